//! Optimizer passes: semantic preservation, hoisting behavior, folding,
//! inlining, and idempotence.

mod common;

use adjointc_core::interp::{run, ArgValue, ExecConfig, Value};
use adjointc_core::ir::{self, alpha_normalize, Opcode};
use adjointc_core::opt::{run_passes, Pass, PassPipeline};
use common::{module, NORM, RELU3, SUM_READ, TAYLOR};
use rand::{Rng, SeedableRng};

fn pipe(passes: &[Pass]) -> PassPipeline {
    PassPipeline {
        passes: passes.to_vec(),
        inline_threshold: 64,
    }
}

#[test]
fn empty_pipeline_is_identity() {
    let m = module(NORM);
    let out = run_passes(&m, &PassPipeline::empty());
    assert_eq!(m, out);
}

#[test]
fn licm_hoists_the_mag_call_out_of_norms_loop() {
    let m = module(NORM);
    let out = run_passes(&m, &pipe(&[Pass::Licm]));
    assert!(ir::validate(&out).is_empty(), "{:?}", ir::validate(&out));
    let f = out.function("norm").unwrap();
    // The call now sits in a block outside the loop, before the header.
    let call_block = f
        .blocks
        .iter()
        .find(|b| b.instrs.iter().any(|i| i.callee.as_deref() == Some("mag")))
        .expect("call survives");
    assert_ne!(call_block.name, "body", "{}", ir::print(&out));
    // And the loop body no longer calls anything.
    let body = f.block("body").unwrap();
    assert!(body.instrs.iter().all(|i| i.opcode != Opcode::Call));
}

#[test]
fn licm_does_not_hoist_without_noalias() {
    // Same kernel but the stores may clobber what mag reads.
    let src = NORM.replace(" noalias", "");
    let m = module(&src);
    let out = run_passes(&m, &pipe(&[Pass::Licm]));
    let f = out.function("norm").unwrap();
    let body = f.block("body").unwrap();
    assert!(
        body.instrs.iter().any(|i| i.callee.as_deref() == Some("mag")),
        "the call must stay inside the loop: {}",
        ir::print(&out)
    );
}

#[test]
fn licm_hoists_invariant_arithmetic() {
    let src = r#"
define f64 @k(f64 %a, f64 %b, i64 %n) {
entry:
  br head
head:
  %i = phi i64 [ 0, entry ], [ %i1, body ]
  %acc = phi f64 [ 0.0, entry ], [ %acc1, body ]
  %c = icmp slt i64 %i, %n
  condbr %c, body, done
body:
  %inv = fmul f64 %a, %b
  %acc1 = fadd f64 %acc, %inv
  %i1 = iadd i64 %i, 1
  br head
done:
  ret f64 %acc
}
"#;
    let m = module(src);
    let out = run_passes(&m, &pipe(&[Pass::Licm]));
    assert!(ir::validate(&out).is_empty());
    let f = out.function("k").unwrap();
    assert!(f.block("body").unwrap().instrs.iter().all(|i| i.opcode != Opcode::FMul));
}

#[test]
fn dce_removes_dead_arithmetic() {
    let m = module(
        r#"
define f64 @d(f64 %a, f64 %b) {
entry:
  %t = fmul f64 %a, %b
  %u = fadd f64 %a, %b
  ret f64 %u
}
"#,
    );
    let out = run_passes(&m, &pipe(&[Pass::Dce]));
    let f = out.function("d").unwrap();
    assert_eq!(f.instr_count(), 2, "{}", ir::print(&out));
}

#[test]
fn inline_replaces_small_direct_calls() {
    let m = module(
        r#"
define f64 @id(f64 %x) { entry: ret f64 %x }
define f64 @caller(f64 %x) {
entry:
  %r = call f64 @id(f64 %x)
  %s = fadd f64 %r, 1.0
  ret f64 %s
}
"#,
    );
    let out = run_passes(&m, &pipe(&[Pass::Inline]));
    assert!(ir::validate(&out).is_empty(), "{:?}", ir::validate(&out));
    let f = out.function("caller").unwrap();
    assert!(f.instrs().all(|i| i.opcode != Opcode::Call), "{}", ir::print(&out));
    let t = run(&out, &ExecConfig::new("caller").with_args(vec![ArgValue::F64(2.0)]));
    assert_eq!(t.ret_f64(), Some(3.0));
}

#[test]
fn recursion_and_indirect_calls_are_never_inlined() {
    let m = module(
        r#"
define f64 @fact(f64 %x, i64 %n) {
entry:
  %z = icmp sle i64 %n, 0
  condbr %z, base, rec
base:
  ret f64 %x
rec:
  %m = isub i64 %n, 1
  %y = fmul f64 %x, 2.0
  %r = call f64 @fact(f64 %y, i64 %m)
  ret f64 %r
}
define f64 @apply(ptr %f, f64 %x) {
entry:
  %r = callind f64 %f(f64 %x)
  ret f64 %r
}
"#,
    );
    let out = run_passes(&m, &pipe(&[Pass::Inline]));
    assert!(out
        .function("fact")
        .unwrap()
        .instrs()
        .any(|i| i.opcode == Opcode::Call));
    assert!(out
        .function("apply")
        .unwrap()
        .instrs()
        .any(|i| i.opcode == Opcode::CallInd));
}

#[test]
fn simplify_folds_constants_and_branches() {
    let m = module(
        r#"
define f64 @s(f64 %x) fast {
entry:
  %a = fmul f64 2.0, 3.0
  %b = fadd f64 %x, 0.0
  %cond = icmp eq i64 1, 1
  condbr %cond, yes, no
yes:
  %r = fadd f64 %a, %b
  ret f64 %r
no:
  ret f64 0.0
}
"#,
    );
    let out = run_passes(&m, &pipe(&[Pass::Simplify]));
    assert!(ir::validate(&out).is_empty(), "{:?}", ir::validate(&out));
    let f = out.function("s").unwrap();
    // Branch folded, dead block dropped, x+0 collapsed to x.
    assert_eq!(f.blocks.len(), 2, "{}", ir::print(&out));
    let t = run(&out, &ExecConfig::new("s").with_args(vec![ArgValue::F64(1.5)]));
    assert_eq!(t.ret_f64(), Some(7.5));
}

#[test]
fn algebraic_float_rules_require_the_fast_flag() {
    let m = module("define f64 @s(f64 %x) { entry: %b = fadd f64 %x, 0.0 ret f64 %b }");
    let out = run_passes(&m, &pipe(&[Pass::Simplify]));
    let f = out.function("s").unwrap();
    assert_eq!(f.instr_count(), 2, "x+0.0 must survive without fast");
}

#[test]
fn cse_merges_repeated_pure_expressions() {
    let m = module(
        r#"
define f64 @c(f64 %a, f64 %b) {
entry:
  %x = fmul f64 %a, %b
  %y = fmul f64 %a, %b
  %z = fadd f64 %x, %y
  ret f64 %z
}
"#,
    );
    let out = run_passes(&m, &pipe(&[Pass::Cse]));
    assert!(ir::validate(&out).is_empty());
    // One fmul, one fadd, one ret.
    assert_eq!(out.function("c").unwrap().instr_count(), 3);
}

fn random_args(f: &ir::IrFunction, n: u64, rng: &mut impl Rng) -> Vec<ArgValue> {
    f.params
        .iter()
        .map(|p| match p.ty {
            ir::IrType::F64 => ArgValue::F64(rng.gen_range(0.25..2.0)),
            ir::IrType::F32 => ArgValue::F32(rng.gen_range(0.25..2.0)),
            ir::IrType::I64 => ArgValue::I64(n as i64),
            ir::IrType::I32 => ArgValue::I32(n as i32),
            ir::IrType::I1 => ArgValue::I1(true),
            ir::IrType::Ptr => {
                ArgValue::BufF64((0..n).map(|_| rng.gen_range(0.25..2.0)).collect())
            }
        })
        .collect()
}

fn final_state(m: &ir::IrModule, entry: &str, args: &[ArgValue], stream: &[f64]) -> (Option<Value>, Vec<Option<Vec<f64>>>, u64, u64) {
    let cfg = ExecConfig::new(entry)
        .with_args(args.to_vec())
        .with_read_stream(stream.to_vec());
    let t = run(m, &cfg);
    assert!(t.error.is_none(), "@{entry}: {:?}", t.error);
    (t.ret, t.buffers, t.read_count, t.steps)
}

/// Every pass preserves observable semantics on 10 random inputs,
/// bit-exactly (the kernels do not set `fast`).
#[test]
fn passes_preserve_semantics_bit_exactly() {
    let kernels: [(&str, &str); 4] = [
        (NORM, "norm"),
        (RELU3, "relu3"),
        (SUM_READ, "sum"),
        (TAYLOR, "taylor"),
    ];
    let all = [Pass::Simplify, Pass::Inline, Pass::Licm, Pass::Dce, Pass::Cse];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for (src, entry) in kernels {
        let m = module(src);
        for pass in all {
            let out = run_passes(&m, &pipe(&[pass]));
            assert!(
                ir::validate(&out).is_empty(),
                "{entry}/{pass:?}: {:?}",
                ir::validate(&out)
            );
            for trial in 0..10 {
                // sum iterates a fixed 10 times, so buffers need >= 10.
                let n = 10 + (trial % 3) as u64 * 3;
                let args = random_args(m.function(entry).unwrap(), n, &mut rng);
                let stream: Vec<f64> = (0..32).map(|_| rng.gen_range(0.5..1.5)).collect();
                let (r1, b1, reads1, steps_before) = final_state(&m, entry, &args, &stream);
                let (r2, b2, reads2, steps_after) = final_state(&out, entry, &args, &stream);
                assert_eq!(r1, r2, "{entry}/{pass:?} changed the return value");
                assert_eq!(b1, b2, "{entry}/{pass:?} changed final memory");
                assert_eq!(reads1, reads2, "{entry}/{pass:?} changed read counts");
                if pass == Pass::Licm {
                    assert!(
                        steps_after <= steps_before,
                        "{entry}: licm increased steps {steps_before} -> {steps_after}"
                    );
                }
            }
        }
    }
}

/// Running a pass twice equals running it once, up to renaming.
#[test]
fn passes_are_idempotent() {
    let all = [Pass::Simplify, Pass::Inline, Pass::Licm, Pass::Dce, Pass::Cse];
    for (src, entry) in [(NORM, "norm"), (RELU3, "relu3"), (TAYLOR, "taylor")] {
        for pass in all {
            let m = module(src);
            let once = run_passes(&m, &pipe(&[pass]));
            let twice = run_passes(&once, &pipe(&[pass]));
            let a = alpha_normalize(once.function(entry).unwrap());
            let b = alpha_normalize(twice.function(entry).unwrap());
            assert_eq!(a, b, "{entry}/{pass:?} is not idempotent");
        }
    }
}

#[test]
fn unknown_pass_names_are_rejected() {
    assert!(PassPipeline::parse("licm,dce").is_ok());
    assert!(PassPipeline::parse("licm,vectorize").is_err());
}
