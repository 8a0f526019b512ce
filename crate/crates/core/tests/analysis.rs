//! Type-tree inference and activity analysis.

mod common;

use adjointc_core::activity::{analyze_activity, ActivitySpec, RetActivity};
use adjointc_core::ir::ActivityToken;
use adjointc_core::typetree::{self, BaseType, TypeError};
use common::{module, NORM, RELU3};

/// Fig. 2: a memcpy of unknown 8-byte data, typed by its caller.
pub const MEMCPY_VIA_CALLER: &str = r#"
define void @f(ptr %dst, ptr %src) {
entry:
  memcpy %dst, %src, 8
  ret void
}
define f64 @harness(ptr %a noalias, ptr %b noalias) {
entry:
  memcpy %a, %b, 8 !tbaa.double
  call void @f(ptr %a, ptr %b)
  %v = load f64, %a !tbaa.double
  ret f64 %v
}
"#;

#[test]
fn store_seeds_the_address_tree() {
    let m = module(
        "define void @s(ptr %p, f64 %v) { entry: store f64 %v, %p !tbaa.double ret void }",
    );
    let env = typetree::seed_from_tbaa(&m).unwrap();
    let tree = env.value_tree("s", "p").unwrap();
    assert_eq!(tree.root_kind(), Some(BaseType::Pointer));
    assert_eq!(tree.pointee_at(0), Some(BaseType::Float64));
}

#[test]
fn tagged_memcpy_seeds_star_entries() {
    let m = module(
        "define void @c(ptr %d, ptr %s) { entry: memcpy %d, %s, 8 !tbaa.float ret void }",
    );
    let env = typetree::seed_from_tbaa(&m).unwrap();
    let tree = env.value_tree("c", "s").unwrap();
    assert_eq!(tree.pointee_at(12), Some(BaseType::Float32));
    assert_eq!(format!("{tree}"), "{[]:Pointer, [*]:Float}");
}

#[test]
fn modules_without_memory_ops_seed_nothing() {
    let m = module("define f64 @id(f64 %x) { entry: ret f64 %x }");
    let env = typetree::seed_from_tbaa(&m).unwrap();
    assert!(env.value_tree("id", "x").is_none());
}

#[test]
fn memcpy_callee_is_typed_by_its_callers() {
    let m = module(MEMCPY_VIA_CALLER);
    let env = typetree::analyze(&m).unwrap();
    for v in ["dst", "src"] {
        let tree = env.value_tree("f", v).unwrap();
        assert_eq!(tree.root_kind(), Some(BaseType::Pointer), "%{v}: {tree}");
        assert_eq!(
            tree.pointee_at(0),
            Some(BaseType::Float64),
            "%{v}: {tree}"
        );
    }
}

#[test]
fn conflicting_kinds_at_one_offset_are_an_error() {
    // A value stored as f64 and loaded as i64 from the same address.
    let m = module(
        r#"
define i64 @pun(ptr %p, f64 %v) {
entry:
  store f64 %v, %p !tbaa.double
  %w = load i64, %p !tbaa.int
  ret i64 %w
}
"#,
    );
    match typetree::analyze(&m) {
        Err(TypeError::Conflict(c)) => {
            assert_eq!(c.value, "p");
            let kinds = [c.kind_a, c.kind_b];
            assert!(kinds.contains(&BaseType::Float64));
            assert!(kinds.contains(&BaseType::Integer));
        }
        other => panic!("expected a type conflict, got {other:?}"),
    }
}

#[test]
fn overlapping_float_widths_conflict() {
    // Float64 at [0] overlaps Float32 at [4].
    let m = module(
        r#"
define void @o(ptr %p, f64 %a, f32 %b) {
entry:
  store f64 %a, %p !tbaa.double
  %q = ptradd %p, 4
  store f32 %b, %q !tbaa.float
  ret void
}
"#,
    );
    assert!(matches!(typetree::analyze(&m), Err(TypeError::Conflict(_))));
}

#[test]
fn norm_input_is_a_float64_array() {
    let m = module(NORM);
    let env = typetree::analyze(&m).unwrap();
    let tree = typetree::query(&env, &m, "norm", "in").unwrap();
    assert_eq!(tree.root_kind(), Some(BaseType::Pointer));
    assert!(tree.pointee_at(0) == Some(BaseType::Float64), "{tree}");
    // Loop counters are integers.
    let i = typetree::query(&env, &m, "norm", "i").unwrap();
    assert_eq!(i.root_kind(), Some(BaseType::Integer));
    // Unknown values are an error.
    assert!(matches!(
        typetree::query(&env, &m, "norm", "nope"),
        Err(TypeError::UnknownValue { .. })
    ));
}

#[test]
fn analysis_is_idempotent_and_converges_quickly() {
    for src in [NORM, RELU3, MEMCPY_VIA_CALLER] {
        let m = module(src);
        let a = typetree::analyze(&m).unwrap();
        assert!(a.iterations < 1000);
        let b = typetree::propagate(a.clone(), &m).unwrap();
        // Propagating an already-converged environment changes nothing
        // and stops after one sweep.
        assert_eq!(b.iterations, 1);
        for f in &m.functions {
            assert_eq!(a.function_trees(&f.name), b.function_trees(&f.name));
        }
    }
}

#[test]
fn relu3_activity_matches_the_hand_derivation() {
    let m = module(RELU3);
    let env = typetree::analyze(&m).unwrap();
    let spec = ActivitySpec::new(vec![ActivityToken::Active], RetActivity::Active);
    let act = analyze_activity(&m, "relu3", &spec, &env);
    assert!(act.active_values.contains("x"));
    assert!(act.active_values.contains("call"));
    assert!(act.active_values.contains("res"));
    // The compare is i1: integers never carry differentials.
    assert!(!act.active_values.contains("cmp"));
}

#[test]
fn readonly_integer_call_is_inactive() {
    let m = module(
        r#"
define i64 @len(ptr %x readonly) {
entry:
  %n = load i64, %x !tbaa.int
  ret i64 %n
}
define f64 @use(ptr %x, ptr %meta readonly) {
entry:
  %n = call i64 @len(ptr %meta)
  %e = sitofp f64 %n
  %v = load f64, %x !tbaa.double
  %r = fmul f64 %v, %v
  ret f64 %r
}
"#,
    );
    let env = typetree::analyze(&m).unwrap();
    let spec = ActivitySpec::new(
        vec![ActivityToken::Dup, ActivityToken::Const],
        RetActivity::Active,
    );
    let act = analyze_activity(&m, "use", &spec, &env);
    assert!(!act.active_instructions.contains("n"), "{act:?}");
    assert!(!act.active_values.contains("n"));
    assert!(act.active_values.contains("v"));
}

#[test]
fn all_const_parameters_leave_nothing_active() {
    let m = module(RELU3);
    let env = typetree::analyze(&m).unwrap();
    let spec = ActivitySpec::new(vec![ActivityToken::Const], RetActivity::Active);
    let act = analyze_activity(&m, "relu3", &spec, &env);
    assert!(act.active_values.is_empty());
    assert!(act.active_instructions.is_empty());
}

#[test]
fn activity_grows_monotonically_with_more_active_params() {
    let m = module(NORM);
    let env = typetree::analyze(&m).unwrap();
    let small = ActivitySpec::new(
        vec![ActivityToken::Dup, ActivityToken::Const, ActivityToken::Const],
        RetActivity::Const,
    );
    let big = ActivitySpec::new(
        vec![ActivityToken::Dup, ActivityToken::Dup, ActivityToken::Const],
        RetActivity::Const,
    );
    let a = analyze_activity(&m, "norm", &small, &env);
    let b = analyze_activity(&m, "norm", &big, &env);
    assert!(a.active_values.is_subset(&b.active_values));
    assert!(a.active_instructions.is_subset(&b.active_instructions));
}

#[test]
fn activity_tokens_are_checked_against_parameter_types() {
    let m = module(RELU3);
    let spec = ActivitySpec::new(vec![ActivityToken::Dup], RetActivity::Active);
    assert!(spec.check(m.function("relu3").unwrap()).is_err());
    let spec = ActivitySpec::new(vec![ActivityToken::Active], RetActivity::Active);
    assert!(spec.check(m.function("relu3").unwrap()).is_ok());
}
