//! Interpreter semantics: values, memory, the read stream, step
//! accounting and runtime errors.

mod common;

use adjointc_core::interp::{
    count_profile, run, ArgValue, ExecConfig, RuntimeError, TrapMode,
};
use common::{module, NORM, RELU3, SUM_READ, TAYLOR};

#[test]
fn norm_on_a_3_4_5_triangle() {
    let m = module(NORM);
    let cfg = ExecConfig::new("norm").with_args(vec![
        ArgValue::BufF64(vec![0.0, 0.0]),
        ArgValue::BufF64(vec![3.0, 4.0]),
        ArgValue::I64(2),
    ]);
    let t = run(&m, &cfg);
    assert!(t.error.is_none(), "{:?}", t.error);
    let out = t.buffers[0].as_ref().unwrap();
    assert!((out[0] - 0.6).abs() < 1e-15);
    assert!((out[1] - 0.8).abs() < 1e-15);
    assert!(t.counts_consistent());
}

#[test]
fn relu3_cubes_positive_inputs() {
    let m = module(RELU3);
    let at = |x: f64| {
        let t = run(&m, &ExecConfig::new("relu3").with_args(vec![ArgValue::F64(x)]));
        t.ret_f64().unwrap()
    };
    assert_eq!(at(2.0), 8.0);
    assert_eq!(at(-1.0), 0.0);
}

/// Compensated-summation oracle for the truncated Taylor series; the
/// interpreter's plain left-to-right sum must agree to 1e-9.
fn taylor_oracle(x: f64, n: u64) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for i in 1..=n {
        let term = x.powf(i as f64) / i as f64;
        let y = term - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

#[test]
fn taylor_matches_compensated_sum_oracle() {
    let m = module(TAYLOR);
    let t = run(
        &m,
        &ExecConfig::new("taylor").with_args(vec![ArgValue::F64(0.5), ArgValue::I64(10_000)]),
    );
    assert!(t.error.is_none(), "{:?}", t.error);
    let got = t.ret_f64().unwrap();
    let want = taylor_oracle(0.5, 10_000);
    assert!(
        (got - want).abs() <= 1e-9 * want.abs().max(1.0),
        "got {got}, oracle {want}"
    );
    // Truncation agrees with the closed form ln(1/(1-x)).
    assert!((got - 2.0f64.ln()).abs() < 1e-9);
}

#[test]
fn read_consumes_the_stream_in_order() {
    let m = module(SUM_READ);
    let stream: Vec<f64> = (1..=10).map(|i| i as f64).collect();
    let xs: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
    let t = run(
        &m,
        &ExecConfig::new("sum")
            .with_args(vec![ArgValue::BufF64(xs.clone())])
            .with_read_stream(stream.clone()),
    );
    assert!(t.error.is_none(), "{:?}", t.error);
    let want: f64 = stream.iter().zip(&xs).map(|(r, x)| r * x).sum();
    assert_eq!(t.ret_f64().unwrap(), want);
    assert_eq!(t.read_count, 10);
}

#[test]
fn read_exhaustion_is_a_defined_error() {
    let m = module(SUM_READ);
    let t = run(
        &m,
        &ExecConfig::new("sum")
            .with_args(vec![ArgValue::BufF64(vec![1.0; 10])])
            .with_read_stream(vec![1.0; 3]),
    );
    assert_eq!(t.error, Some(RuntimeError::ReadExhausted));
}

#[test]
fn out_of_bounds_traps_in_strict_mode() {
    let m = module(NORM);
    let cfg = ExecConfig::new("norm").with_args(vec![
        ArgValue::BufF64(vec![0.0; 2]),
        ArgValue::BufF64(vec![3.0, 4.0]),
        ArgValue::I64(5), // lies about the length
    ]);
    let t = run(&m, &cfg);
    assert!(
        matches!(t.error, Some(RuntimeError::OutOfBounds { .. })),
        "{:?}",
        t.error
    );
}

#[test]
fn counting_mode_reports_violations_but_continues() {
    let m = module(NORM);
    let mut cfg = ExecConfig::new("norm").with_args(vec![
        ArgValue::BufF64(vec![0.0; 2]),
        ArgValue::BufF64(vec![3.0, 4.0]),
        ArgValue::I64(5),
    ]);
    cfg.trap_mode = TrapMode::Counting;
    let t = run(&m, &cfg);
    assert!(t.error.is_none());
    assert!(!t.violations.is_empty());
    // Counting mode never under-reports accesses relative to strict.
    let strict = run(&m, &ExecConfig { trap_mode: TrapMode::Strict, ..cfg });
    assert!(t.steps >= strict.steps);
}

#[test]
fn step_limit_is_enforced() {
    let m = module(TAYLOR);
    let mut cfg =
        ExecConfig::new("taylor").with_args(vec![ArgValue::F64(0.5), ArgValue::I64(1 << 40)]);
    cfg.step_limit = 10_000;
    let t = run(&m, &cfg);
    assert_eq!(t.error, Some(RuntimeError::StepLimit(10_000)));
}

#[test]
fn traces_are_deterministic() {
    let m = module(NORM);
    let cfg = ExecConfig::new("norm").with_args(vec![
        ArgValue::BufF64(vec![0.0; 4]),
        ArgValue::BufF64(vec![0.25, -1.5, 3.25, 2.0]),
        ArgValue::I64(4),
    ]);
    let a = run(&m, &cfg);
    let b = run(&m, &cfg);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.op_counts, b.op_counts);
    assert_eq!(a.buffers, b.buffers);
}

#[test]
fn empty_function_costs_one_step() {
    let m = module("define void @empty() { entry: ret void }");
    let t = run(&m, &ExecConfig::new("empty"));
    assert_eq!(t.steps, 1);
    assert_eq!(t.count("ret"), 1);
}

#[test]
fn calls_are_transparent_in_step_counts() {
    let m = module(
        r#"
define f64 @one(f64 %x) { entry: ret f64 %x }
define f64 @outer(f64 %x) {
entry:
  %a = call f64 @one(f64 %x)
  ret f64 %a
}
"#,
    );
    let t = run(&m, &ExecConfig::new("outer").with_args(vec![ArgValue::F64(1.0)]));
    // call + callee ret + outer ret = 3 executed instructions.
    assert_eq!(t.steps, 3);
}

#[test]
fn primal_norm_scales_quadratically() {
    let m = module(NORM);
    let configs: Vec<(u64, ExecConfig)> = [16u64, 32, 64, 128]
        .iter()
        .map(|&n| {
            let cfg = ExecConfig::new("norm").with_args(vec![
                ArgValue::BufF64(vec![0.0; n as usize]),
                ArgValue::BufF64((0..n).map(|i| 1.0 + i as f64).collect()),
                ArgValue::I64(n as i64),
            ]);
            (n, cfg)
        })
        .collect();
    let table = count_profile(&m, &configs).unwrap();
    assert!(
        table.slope > 1.85,
        "norm with the call inside the loop should be quadratic, slope {}",
        table.slope
    );
}

#[test]
fn function_pointers_flow_through_indirect_calls() {
    let m = module(
        r#"
define f64 @decay(f64 %u) {
entry:
  %r = fneg f64 %u
  ret f64 %r
}
define f64 @apply(ptr %fn, f64 %u) {
entry:
  %r = callind f64 %fn(f64 %u)
  ret f64 %r
}
"#,
    );
    let t = run(
        &m,
        &ExecConfig::new("apply")
            .with_args(vec![ArgValue::FuncRef("decay".into()), ArgValue::F64(3.0)]),
    );
    assert_eq!(t.ret_f64(), Some(-3.0));
}

#[test]
fn globals_are_read_only() {
    let m = module(
        r#"
global @tbl = [f64 1.0, 2.0]
define f64 @peek() {
entry:
  %p = ptradd @tbl, 8
  %v = load f64, %p
  ret f64 %v
}
define void @poke() {
entry:
  store f64 9.0, @tbl
  ret void
}
"#,
    );
    let ok = run(&m, &ExecConfig::new("peek"));
    assert_eq!(ok.ret_f64(), Some(2.0));
    let bad = run(&m, &ExecConfig::new("poke"));
    assert!(matches!(bad.error, Some(RuntimeError::ReadOnlyWrite(_))));
}
