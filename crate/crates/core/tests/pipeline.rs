//! Enzyme-versus-Ref pipeline ordering: running optimization before AD
//! produces asymptotically faster gradients on the norm kernel.

mod common;

use adjointc_core::activity::{ActivitySpec, RetActivity};
use adjointc_core::autodiff::{grad_name, GradMode, GradRequest};
use adjointc_core::interp::{fit_slope, run, ArgValue, ExecConfig, ProfileRow};
use adjointc_core::ir::{self, ActivityToken};
use adjointc_core::opt::PassPipeline;
use adjointc_core::pipeline::{pipeline, PipelineMode};
use common::{module, NORM};

fn norm_request() -> GradRequest {
    GradRequest {
        function: "norm".into(),
        spec: ActivitySpec::new(
            vec![
                ActivityToken::Dup,
                ActivityToken::Dup,
                ActivityToken::Const,
            ],
            RetActivity::Const,
        ),
        mode: GradMode::Combined,
    }
}

fn grad_norm_run(m: &ir::IrModule, n: usize, seed_at: usize) -> (u64, Vec<f64>) {
    let input: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 0.25).collect();
    let mut seed = vec![0.0; n];
    seed[seed_at] = 1.0;
    let t = run(
        m,
        &ExecConfig::new(grad_name("norm")).with_args(vec![
            ArgValue::BufF64(vec![0.0; n]),
            ArgValue::BufF64(seed),
            ArgValue::BufF64(input),
            ArgValue::BufF64(vec![0.0; n]),
            ArgValue::I64(n as i64),
        ]),
    );
    assert!(t.error.is_none(), "{:?}", t.error);
    (t.steps, t.buffers[3].clone().unwrap())
}

#[test]
fn enzyme_order_makes_norm_gradients_linear() {
    let m = module(NORM);
    let req = norm_request();
    let passes = PassPipeline::default();
    let enzyme = pipeline(&m, &req, PipelineMode::Enzyme, &passes).unwrap();
    let reference = pipeline(&m, &req, PipelineMode::Ref, &passes).unwrap();
    for (name, gm) in [("enzyme", &enzyme), ("ref", &reference)] {
        let diags = ir::validate(gm);
        assert!(diags.is_empty(), "{name}: {diags:?}");
    }

    let sizes = [64usize, 128, 256, 512];
    let mut rows_e = Vec::new();
    let mut rows_r = Vec::new();
    for &n in &sizes {
        let (se, de) = grad_norm_run(&enzyme, n, 0);
        let (sr, dr) = grad_norm_run(&reference, n, 0);
        // Both pipelines compute the same derivatives pointwise.
        for (i, (a, b)) in de.iter().zip(&dr).enumerate() {
            assert!(
                (a - b).abs() <= 1e-10 * a.abs().max(1.0),
                "n={n} d_in[{i}]: enzyme {a} vs ref {b}"
            );
        }
        rows_e.push(ProfileRow { n: n as u64, steps: se });
        rows_r.push(ProfileRow { n: n as u64, steps: sr });
    }
    let slope_e = fit_slope(&rows_e);
    let slope_r = fit_slope(&rows_r);
    assert!(
        slope_e <= 1.15,
        "enzyme pipeline should be O(N): slope {slope_e}, rows {rows_e:?}"
    );
    assert!(
        slope_r >= 1.85,
        "ref pipeline should be O(N^2): slope {slope_r}, rows {rows_r:?}"
    );
    // The ordering benefit at N = 256 is at least 2x.
    let at = |rows: &[ProfileRow]| rows.iter().find(|r| r.n == 256).unwrap().steps;
    let ratio = at(&rows_r) as f64 / at(&rows_e) as f64;
    assert!(ratio > 2.0, "Ref/Enzyme ratio at N=256 is {ratio}");
}

#[test]
fn both_modes_share_one_pass_pipeline() {
    // Mode fairness by construction: the same PassPipeline value drives
    // both; an empty pipeline makes the orderings coincide.
    let m = module(NORM);
    let req = norm_request();
    let empty = PassPipeline::empty();
    let a = pipeline(&m, &req, PipelineMode::Enzyme, &empty).unwrap();
    let b = pipeline(&m, &req, PipelineMode::Ref, &empty).unwrap();
    let fa = a.function(&grad_name("norm")).unwrap();
    let fb = b.function(&grad_name("norm")).unwrap();
    assert_eq!(
        ir::alpha_normalize(fa),
        ir::alpha_normalize(fb),
        "without passes the two orderings must synthesize identical gradients"
    );
}
