//! Gradient synthesis: adjoint values against analytic results and
//! central finite differences, tape shapes, and structural properties.

mod common;

use adjointc_core::activity::{analyze_activity, ActivitySpec, RetActivity};
use adjointc_core::autodiff::{
    self, differential_use, grad_name, GradMode, GradRequest,
};
use adjointc_core::interp::{gradcheck, run, ArgValue, ExecConfig, GradCheckConfig};
use adjointc_core::ir::{self, ActivityToken, Opcode};
use adjointc_core::typetree;
use common::{module, NORM, RELU3, SUM_READ, TAYLOR};

fn synth_combined(src: &str, f: &str, spec: ActivitySpec) -> adjointc_core::IrModule {
    let m = module(src);
    let req = GradRequest {
        function: f.into(),
        spec,
        mode: GradMode::Combined,
    };
    let out = autodiff::synthesize(&m, &req).expect("synthesis succeeds");
    let diags = ir::validate(&out);
    assert!(
        diags.is_empty(),
        "synthesized module is invalid: {}\n{}",
        diags
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("\n"),
        ir::print(&out)
    );
    out
}

fn scalar_spec(n: usize, active_at: usize) -> ActivitySpec {
    let mut toks = vec![ActivityToken::Const; n];
    toks[active_at] = ActivityToken::Active;
    ActivitySpec::new(toks, RetActivity::Active)
}

#[test]
fn relu3_gradient_matches_fig4_values() {
    let m = synth_combined(RELU3, "relu3", scalar_spec(1, 0));
    let grad = grad_name("relu3");
    let at = |x: f64| {
        let t = run(
            &m,
            &ExecConfig::new(&grad).with_args(vec![ArgValue::F64(x), ArgValue::F64(1.0)]),
        );
        assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&m));
        t.ret_f64().unwrap()
    };
    assert!((at(2.0) - 12.0).abs() < 1e-12);
    assert!(at(-1.0).abs() < 1e-12);
}

#[test]
fn relu3_gradient_structure_mirrors_the_forward_blocks() {
    let m = synth_combined(RELU3, "relu3", scalar_spec(1, 0));
    let g = m.function(&grad_name("relu3")).unwrap();
    let primal = m.function("relu3").unwrap();
    // One reverse block per forward block.
    for b in &primal.blocks {
        assert!(
            g.blocks.iter().any(|rb| rb.name == format!("reverse_{}", b.name)),
            "missing reverse block for {}",
            b.name
        );
    }
    // Every return was replaced by a branch into the reverse section.
    let fwd_rets = g
        .blocks
        .iter()
        .filter(|b| !b.name.starts_with("reverse_"))
        .filter(|b| b.terminator().map(|t| t.opcode == Opcode::Ret).unwrap_or(false))
        .count();
    assert_eq!(fwd_rets, 0);
    // The reverse of the entry is the unique returning block.
    let ret_blocks: Vec<&str> = g
        .blocks
        .iter()
        .filter(|b| b.terminator().map(|t| t.opcode == Opcode::Ret).unwrap_or(false))
        .map(|b| b.name.as_str())
        .collect();
    assert_eq!(ret_blocks, vec!["reverse_entry"]);
    // No cache operations anywhere: everything is recomputed or live.
    let cache_ops = g
        .blocks
        .iter()
        .flat_map(|b| b.instrs.iter())
        .filter(|i| i.attrs.cache)
        .count();
    assert_eq!(cache_ops, 0, "{}", ir::print(&m));
}

#[test]
fn relu3_gradcheck_passes_away_from_the_kink() {
    let m = synth_combined(RELU3, "relu3", scalar_spec(1, 0));
    for x in [2.0, 0.5, -1.0, -0.25, 3.5] {
        let mut cfg = GradCheckConfig::new("relu3", scalar_spec(1, 0));
        cfg.args = vec![ArgValue::F64(x)];
        cfg.shadow_seeds = vec![None];
        let report = gradcheck(&m, &cfg).unwrap();
        assert!(report.pass, "x={x}: {:?}", report.entries);
    }
}

#[test]
fn addition_adjoint_needs_no_forward_values() {
    let m = module("define f64 @add(f64 %x, f64 %y) { entry: %z = fadd f64 %x, %y ret f64 %z }");
    let env = typetree::analyze(&m).unwrap();
    let spec = ActivitySpec::new(
        vec![ActivityToken::Active, ActivityToken::Active],
        RetActivity::Active,
    );
    let act = analyze_activity(&m, "add", &spec, &env);
    let needed = differential_use(m.function("add").unwrap(), &act);
    assert!(needed.is_empty(), "{needed:?}");
}

#[test]
fn product_adjoint_needs_both_operands() {
    let m = module("define f64 @mul(f64 %x, f64 %y) { entry: %z = fmul f64 %x, %y ret f64 %z }");
    let env = typetree::analyze(&m).unwrap();
    let spec = ActivitySpec::new(
        vec![ActivityToken::Active, ActivityToken::Active],
        RetActivity::Active,
    );
    let act = analyze_activity(&m, "mul", &spec, &env);
    let needed = differential_use(m.function("mul").unwrap(), &act);
    assert_eq!(
        needed.into_iter().collect::<Vec<_>>(),
        vec!["x".to_string(), "y".to_string()]
    );
}

#[test]
fn sum_gradient_replays_the_read_stream() {
    let spec = ActivitySpec::new(vec![ActivityToken::Dup], RetActivity::Active);
    let m = synth_combined(SUM_READ, "sum", spec);
    let stream: Vec<f64> = (1..=10).map(|i| i as f64 * 1.5).collect();
    let t = run(
        &m,
        &ExecConfig::new(grad_name("sum"))
            .with_args(vec![
                ArgValue::BufF64(vec![0.5; 10]),
                ArgValue::BufF64(vec![0.0; 10]),
                ArgValue::F64(1.0),
            ])
            .with_read_stream(stream.clone()),
    );
    assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&m));
    // d_x[i] equals the replayed stream, and read ran exactly 10 times.
    let d_x = t.buffers[1].as_ref().unwrap();
    assert_eq!(d_x, &stream);
    assert_eq!(t.read_count, 10);
}

#[test]
fn taylor_gradient_sums_the_geometric_series() {
    let spec = ActivitySpec::new(
        vec![ActivityToken::Active, ActivityToken::Const],
        RetActivity::Active,
    );
    let m = synth_combined(TAYLOR, "taylor", spec);
    let n = 10_000i64;
    let t = run(
        &m,
        &ExecConfig::new(grad_name("taylor")).with_args(vec![
            ArgValue::F64(0.5),
            ArgValue::I64(n),
            ArgValue::F64(1.0),
        ]),
    );
    assert!(t.error.is_none(), "{:?}", t.error);
    // d/dx sum x^i/i = sum x^(i-1) = (1 - x^n) / (1 - x) = 2 at x = 0.5.
    let want = (1.0 - 0.5f64.powi(n as i32)) / 0.5;
    assert!(
        (t.ret_f64().unwrap() - want).abs() < 1e-8,
        "got {} want {want}",
        t.ret_f64().unwrap()
    );
}

#[test]
fn norm_gradient_matches_finite_differences() {
    let spec = ActivitySpec::new(
        vec![
            ActivityToken::Dup,
            ActivityToken::Dup,
            ActivityToken::Const,
        ],
        RetActivity::Const,
    );
    let m = synth_combined(NORM, "norm", spec.clone());
    let mut cfg = GradCheckConfig::new("norm", spec);
    cfg.args = vec![
        ArgValue::BufF64(vec![0.0, 0.0]),
        ArgValue::BufF64(vec![3.0, 4.0]),
        ArgValue::I64(2),
    ];
    cfg.shadow_seeds = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 0.0]), None];
    cfg.tol = 1e-6;
    let report = gradcheck(&m, &cfg).unwrap();
    assert!(
        report.pass,
        "{:#?}\n{}",
        report.entries,
        ir::print(&m)
    );
}

use common::{EULER, FFT, MEMCPY_DOUBLE, MEMCPY_FLOAT};

#[test]
fn memcpy_double_gradient_does_one_8_byte_accumulation() {
    let spec = ActivitySpec::new(
        vec![ActivityToken::Dup, ActivityToken::Dup],
        RetActivity::Const,
    );
    let m = synth_combined(MEMCPY_DOUBLE, "copy8", spec);
    let t = run(
        &m,
        &ExecConfig::new(grad_name("copy8")).with_args(vec![
            ArgValue::BufF64(vec![0.0]),
            ArgValue::BufF64(vec![1.0]), // d_dst seed
            ArgValue::BufF64(vec![7.5]),
            ArgValue::BufF64(vec![0.0]), // d_src
        ]),
    );
    assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&m));
    // Matches the hand-written gradient: dsrc[0] += ddst[0]; ddst[0] = 0.
    assert_eq!(t.buffers[3].as_ref().unwrap(), &vec![1.0]);
    assert_eq!(t.buffers[1].as_ref().unwrap(), &vec![0.0]);
    assert_eq!(t.buffers[0].as_ref().unwrap(), &vec![7.5]); // forward copy ran
    assert_eq!(t.count("fadd.f64"), 1, "{:?}", t.op_counts);
    assert_eq!(t.count("fadd.f32"), 0);
}

#[test]
fn memcpy_float_gradient_does_two_4_byte_accumulations() {
    let spec = ActivitySpec::new(
        vec![ActivityToken::Dup, ActivityToken::Dup],
        RetActivity::Const,
    );
    let m = synth_combined(MEMCPY_FLOAT, "copy8", spec);
    let t = run(
        &m,
        &ExecConfig::new(grad_name("copy8")).with_args(vec![
            ArgValue::BufF32(vec![0.0, 0.0]),
            ArgValue::BufF32(vec![1.0, 2.0]), // d_dst seed
            ArgValue::BufF32(vec![3.5, -2.5]),
            ArgValue::BufF32(vec![0.0, 0.0]),
        ]),
    );
    assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&m));
    assert_eq!(t.buffers[3].as_ref().unwrap(), &vec![1.0, 2.0]);
    assert_eq!(t.buffers[1].as_ref().unwrap(), &vec![0.0, 0.0]);
    assert_eq!(t.count("fadd.f32"), 2, "{:?}", t.op_counts);
    assert_eq!(t.count("fadd.f64"), 0);
}

#[test]
fn euler_sensitivity_telescopes_and_creates_the_shadow_pair() {
    let spec = ActivitySpec::new(
        vec![
            ActivityToken::Active,
            ActivityToken::Const,
            ActivityToken::Const,
        ],
        RetActivity::Active,
    );
    let m = synth_combined(EULER, "euler_decay", spec.clone());
    // The shadow of @decay is a global pair (augmented, gradient).
    let pair = m
        .global(&autodiff::shadow_pair_name("decay"))
        .unwrap_or_else(|| panic!("missing shadow pair\n{}", ir::print(&m)));
    match &pair.init {
        ir::GlobalInit::Functions(fs) => {
            assert_eq!(fs.len(), 2);
            for f in fs {
                assert!(m.function(f).is_some(), "pair member @{f} missing");
            }
        }
        other => panic!("pair global holds {other:?}"),
    }
    let n = 100i64;
    let h = 0.01f64;
    let t = run(
        &m,
        &ExecConfig::new(grad_name("euler_decay")).with_args(vec![
            ArgValue::F64(1.0),
            ArgValue::I64(n),
            ArgValue::F64(h),
            ArgValue::F64(1.0),
        ]),
    );
    assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&m));
    let want = (1.0 - h).powi(n as i32);
    let got = t.ret_f64().unwrap();
    assert!(
        (got - want).abs() <= 1e-10 * want.abs(),
        "got {got}, closed form {want}"
    );
    // Finite differences agree too.
    let mut cfg = GradCheckConfig::new("euler_decay", spec);
    cfg.args = vec![ArgValue::F64(1.0), ArgValue::I64(20), ArgValue::F64(0.05)];
    cfg.shadow_seeds = vec![None, None, None];
    let report = gradcheck(&m, &cfg).unwrap();
    assert!(report.pass, "{:#?}", report.entries);
}

/// Parseval for the unnormalized transform: d/dx sum |X_k|^2 = 2 n x.
#[test]
fn fft_energy_gradient_satisfies_parseval() {
    let spec = ActivitySpec::new(
        vec![
            ActivityToken::Dup,
            ActivityToken::Dup,
            ActivityToken::Const,
        ],
        RetActivity::Active,
    );
    let m = synth_combined(FFT, "fft_energy", spec);
    let n = 8usize;
    let xs: Vec<f64> = (0..n).map(|i| 0.25 + 0.5 * i as f64).collect();
    let t = run(
        &m,
        &ExecConfig::new(grad_name("fft_energy")).with_args(vec![
            ArgValue::BufF64(xs.clone()),
            ArgValue::BufF64(vec![0.0; n]),
            ArgValue::BufF64(vec![0.0; n]),
            ArgValue::BufF64(vec![0.0; n]),
            ArgValue::I64(n as i64),
            ArgValue::F64(1.0),
        ]),
    );
    assert!(t.error.is_none(), "{:?}", t.error);
    let d_re = t.buffers[1].as_ref().unwrap();
    for (i, (d, x)) in d_re.iter().zip(&xs).enumerate() {
        let want = 2.0 * n as f64 * x;
        assert!(
            (d - want).abs() <= 1e-8 * want.abs().max(1.0),
            "d_re[{i}] = {d}, Parseval says {want}"
        );
    }
    // Deallocation deferral: no free ran before the last access of the
    // freed buffer.
    for a in &t.allocations {
        if let (Some(free_step), Some(last)) = (a.free_step, a.last_access_step) {
            assert!(
                free_step >= last,
                "allocation `{}` freed at {free_step} but accessed at {last}",
                a.label
            );
        }
    }
}

#[test]
fn declarations_without_custom_adjoints_are_rejected() {
    let m = module(
        r#"
declare f64 @opaque(f64 %x)
define f64 @wrap(f64 %x) {
entry:
  %r = call f64 @opaque(f64 %x)
  ret f64 %r
}
"#,
    );
    let req = GradRequest {
        function: "wrap".into(),
        spec: scalar_spec(1, 0),
        mode: GradMode::Combined,
    };
    match autodiff::synthesize(&m, &req) {
        Err(autodiff::SynthError::MissingDefinition(f)) => assert_eq!(f, "opaque"),
        other => panic!("expected MissingDefinition, got {other:?}"),
    }
}

#[test]
fn custom_adjoints_replace_missing_bodies() {
    // @scale3 has no body; its registered pair computes 3x and d=3.
    let src = r#"
custom_adjoint @scale3 = (@aug_scale3, @rev_scale3)
declare f64 @scale3(f64 %x)
define f64 @aug_scale3(f64 %x, ptr %tape) {
entry:
  store f64 0.0, %tape
  %r = fmul f64 %x, 3.0
  ret f64 %r
}
define f64 @rev_scale3(f64 %x, f64 %dret, f64 %payload) {
entry:
  %d = fmul f64 3.0, %dret
  ret f64 %d
}
define f64 @user(f64 %x) {
entry:
  %y = call f64 @scale3(f64 %x)
  %z = fmul f64 %y, %y
  ret f64 %z
}
"#;
    let m = synth_combined(src, "user", scalar_spec(1, 0));
    // d/dx (3x)^2 = 18x.
    let t = run(
        &m,
        &ExecConfig::new(grad_name("user"))
            .with_args(vec![ArgValue::F64(2.0), ArgValue::F64(1.0)]),
    );
    assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&m));
    assert!((t.ret_f64().unwrap() - 36.0).abs() < 1e-12);
}

#[test]
fn custom_adjoint_with_wrong_arity_is_rejected() {
    let m = module(
        r#"
define f64 @square(f64 %x) { entry: %r = fmul f64 %x, %x ret f64 %r }
define f64 @bad_aug(f64 %x) { entry: ret f64 %x }
define f64 @bad_rev(f64 %x, f64 %d) { entry: ret f64 %d }
"#,
    );
    let err = autodiff::register_custom_adjoint(&m, "square", "bad_aug", "bad_rev");
    assert!(matches!(err, Err(autodiff::SynthError::CustomSignature(_))));
}

#[test]
fn custom_adjoint_matches_the_synthesized_gradient() {
    let base = r#"
define f64 @square(f64 %x) { entry: %r = fmul f64 %x, %x ret f64 %r }
define f64 @user(f64 %x) {
entry:
  %y = call f64 @square(f64 %x)
  %z = fadd f64 %y, %x
  ret f64 %z
}
"#;
    let custom = r#"
custom_adjoint @square = (@aug_square, @rev_square)
define f64 @square(f64 %x) { entry: %r = fmul f64 %x, %x ret f64 %r }
define f64 @aug_square(f64 %x, ptr %tape) {
entry:
  store f64 %x, %tape
  %r = fmul f64 %x, %x
  ret f64 %r
}
define f64 @rev_square(f64 %x, f64 %dret, f64 %cache) {
entry:
  %t = fmul f64 2.0, %cache
  %d = fmul f64 %t, %dret
  ret f64 %d
}
define f64 @user(f64 %x) {
entry:
  %y = call f64 @square(f64 %x)
  %z = fadd f64 %y, %x
  ret f64 %z
}
"#;
    let auto = synth_combined(base, "user", scalar_spec(1, 0));
    let manual = synth_combined(custom, "user", scalar_spec(1, 0));
    for x in [0.5, 1.0, 2.0, -1.5, 3.25] {
        let dx = |m: &adjointc_core::IrModule| {
            run(
                m,
                &ExecConfig::new(grad_name("user"))
                    .with_args(vec![ArgValue::F64(x), ArgValue::F64(1.0)]),
            )
            .ret_f64()
            .unwrap()
        };
        let a = dx(&auto);
        let b = dx(&manual);
        assert!((a - b).abs() < 1e-12, "at {x}: auto {a} vs custom {b}");
        assert!((a - (2.0 * x + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn gradient_seeds_are_linear() {
    let m = synth_combined(TAYLOR, "taylor", ActivitySpec::new(
        vec![ActivityToken::Active, ActivityToken::Const],
        RetActivity::Active,
    ));
    let grad = grad_name("taylor");
    let with_seed = |s: f64| {
        run(
            &m,
            &ExecConfig::new(&grad).with_args(vec![
                ArgValue::F64(0.5),
                ArgValue::I64(50),
                ArgValue::F64(s),
            ]),
        )
        .ret_f64()
        .unwrap()
    };
    let (a, b) = (0.7, 1.9);
    let lin = with_seed(a + b);
    let sum = with_seed(a) + with_seed(b);
    assert!((lin - sum).abs() < 1e-12, "{lin} vs {sum}");
}

#[test]
fn expand_autodiff_rewrites_fig5_calls() {
    let src = r#"
define f64 @func(ptr %x, ptr %y) {
entry:
  %a = load f64, %x !tbaa.double
  %b = load f64, %y !tbaa.double
  %s = fmul f64 %a, %a
  %t = fadd f64 %s, %b
  ret f64 %t
}
define void @dfunc(ptr %x, ptr %d_x, ptr %y) {
entry:
  call void @__enzyme_autodiff(@func, diffe_dup, ptr %x, ptr %d_x, diffe_const, ptr %y)
  ret void
}
"#;
    let m = module(src);
    let out = autodiff::expand_autodiff_intrinsics(&m).expect("expansion succeeds");
    let diags = ir::validate(&out);
    assert!(diags.is_empty(), "{diags:?}\n{}", ir::print(&out));
    // The intrinsic call is gone, replaced by the gradient.
    let dfunc = out.function("dfunc").unwrap();
    assert!(dfunc
        .instrs()
        .all(|i| i.callee.as_deref() != Some("__enzyme_autodiff")));
    assert!(dfunc
        .instrs()
        .any(|i| i.callee.as_deref() == Some(&grad_name("func")[..])));
    // d/dx (x^2 + y) = 2x at x = 3.
    let t = run(
        &out,
        &ExecConfig::new("dfunc").with_args(vec![
            ArgValue::BufF64(vec![3.0]),
            ArgValue::BufF64(vec![0.0]),
            ArgValue::BufF64(vec![5.0]),
        ]),
    );
    assert!(t.error.is_none(), "{:?}", t.error);
    assert_eq!(t.buffers[1].as_ref().unwrap(), &vec![6.0]);
}

#[test]
fn expand_autodiff_honors_dupnoneed() {
    // Fig. 7 shape: the primal output is not needed; a null primal
    // output pointer is legal because its stores are elided.
    let src = r#"
define void @f(ptr %inp noalias, i64 %n, ptr %out noalias) {
entry:
  %v = load f64, %inp !tbaa.double
  %s = fmul f64 %v, %v
  store f64 %s, %out !tbaa.double
  ret void
}
define void @diffe(ptr %inp, ptr %d_inp, i64 %n, ptr %d_out) {
entry:
  call void @__enzyme_autodiff(@f, diffe_dup, ptr %inp, ptr %d_inp, diffe_const, i64 %n, diffe_dupnoneed, ptr null, ptr %d_out)
  ret void
}
"#;
    let m = module(src);
    let out = autodiff::expand_autodiff_intrinsics(&m).expect("expansion succeeds");
    assert!(ir::validate(&out).is_empty(), "{:?}", ir::validate(&out));
    let t = run(
        &out,
        &ExecConfig::new("diffe").with_args(vec![
            ArgValue::BufF64(vec![3.0]),
            ArgValue::BufF64(vec![0.0]),
            ArgValue::I64(1),
            ArgValue::BufF64(vec![1.0]),
        ]),
    );
    assert!(t.error.is_none(), "{:?}\n{}", t.error, ir::print(&out));
    // d/d inp of out = 2 * inp = 6; the null primal output was never
    // written because the store is elided.
    assert_eq!(t.buffers[1].as_ref().unwrap(), &vec![6.0]);
}

#[test]
fn unexpanded_modules_pass_through() {
    let m = module(RELU3);
    let out = autodiff::expand_autodiff_intrinsics(&m).unwrap();
    assert_eq!(m, out);
}
