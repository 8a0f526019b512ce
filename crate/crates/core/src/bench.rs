//! The benchmark harness: runs every corpus kernel through both
//! pipelines, gradient-checks them, measures gradient step counts over
//! the size sweep and reports per-kernel and aggregate geometric-mean
//! Ref/Enzyme ratios as JSON plus a text table.

use crate::activity::ActivitySpec;
use crate::autodiff::{self, GradMode, GradRequest};
use crate::interp::{
    fit_slope, gradcheck, ExecConfig, GradCheckConfig, ProfileRow,
};
use crate::ir::{self, IrModule};
use crate::manifest::KernelManifest;
use crate::opt::PassPipeline;
use crate::pipeline::{pipeline, PipelineMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Environment variable fixing all randomness of a bench run.
pub const SEED_ENV: &str = "ADJOINTC_SEED";

pub fn seed_from_env() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(42)
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeRecord {
    pub n: u64,
    pub enzyme_steps: u64,
    pub ref_steps: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub kernel: String,
    pub gradcheck_enzyme: bool,
    pub gradcheck_ref: bool,
    pub rows: Vec<SizeRecord>,
    pub slope_enzyme: Option<f64>,
    pub slope_ref: Option<f64>,
    /// Geometric mean of per-size Ref/Enzyme step ratios.
    pub geomean_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub passes: String,
    pub kernels: Vec<BenchRecord>,
    pub aggregate_geomean_ratio: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<18} {:>8} {:>12} {:>12} {:>8}\n",
            "kernel", "n", "enzyme", "ref", "ratio"
        ));
        for k in &self.kernels {
            if k.rows.is_empty() {
                s.push_str(&format!("{:<18} {:>8} {:>12} {:>12} {:>8}\n", k.kernel, "-", "-", "-", "-"));
            }
            for r in &k.rows {
                s.push_str(&format!(
                    "{:<18} {:>8} {:>12} {:>12} {:>8.3}\n",
                    k.kernel, r.n, r.enzyme_steps, r.ref_steps, r.ratio
                ));
            }
            s.push_str(&format!(
                "{:<18} geomean ratio {:.3}  slopes enzyme {} / ref {}\n",
                k.kernel,
                k.geomean_ratio,
                k.slope_enzyme.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                k.slope_ref.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            ));
        }
        s.push_str(&format!(
            "aggregate geomean Ref/Enzyme ratio: {:.3}\n",
            self.aggregate_geomean_ratio
        ));
        s
    }
}

pub struct KernelRun {
    pub manifest: KernelManifest,
    pub module: IrModule,
    pub enzyme: IrModule,
    pub reference: IrModule,
}

/// Loads and differentiates a kernel under both pipelines.
pub fn prepare_kernel(m: &KernelManifest, passes: &PassPipeline) -> Result<KernelRun, String> {
    let path = m.ir_path();
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let module = ir::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let diags = ir::validate(&module);
    if !diags.is_empty() {
        return Err(format!(
            "{} failed validation: {}",
            m.name,
            diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        ));
    }
    let req = GradRequest {
        function: m.entry.clone(),
        spec: m.spec(),
        mode: GradMode::Combined,
    };
    let enzyme =
        pipeline(&module, &req, PipelineMode::Enzyme, passes).map_err(|e| e.to_string())?;
    let reference =
        pipeline(&module, &req, PipelineMode::Ref, passes).map_err(|e| e.to_string())?;
    Ok(KernelRun {
        manifest: m.clone(),
        module,
        enzyme,
        reference,
    })
}

/// Gradient-checks one prepared module at `points` random inputs.
pub fn gradcheck_kernel(
    run: &KernelRun,
    graded: &IrModule,
    rng: &mut impl Rng,
) -> Result<bool, String> {
    let m = &run.manifest;
    let spec: ActivitySpec = m.spec();
    for _ in 0..m.gradcheck.points {
        let (args, seeds, stream) = m.make_inputs(m.inputs.gradcheck_size, rng);
        let mut cfg = GradCheckConfig::new(m.entry.clone(), spec.clone());
        cfg.args = args;
        cfg.shadow_seeds = seeds;
        cfg.tol = m.gradcheck.tol;
        cfg.read_stream = stream;
        let report = gradcheck(graded, &cfg)?;
        if !report.pass {
            let fails: Vec<String> = report
                .failures()
                .map(|e| {
                    format!(
                        "{}: analytic {} vs numeric {} (rel {})",
                        e.coord, e.analytic, e.numeric, e.rel_err
                    )
                })
                .collect();
            return Err(format!("{} gradcheck failed: {}", m.name, fails.join("; ")));
        }
    }
    Ok(true)
}

/// Runs the synthesized gradient once and returns its step count.
fn grad_steps(
    run: &KernelRun,
    graded: &IrModule,
    n: u64,
    rng: &mut impl Rng,
) -> Result<u64, String> {
    let m = &run.manifest;
    let (args, seeds, stream) = m.make_inputs(n, rng);
    let grad = autodiff::grad_name(&m.entry);
    let f = run
        .module
        .function(&m.entry)
        .ok_or_else(|| format!("unknown entry @{}", m.entry))?;
    let mut grad_args = Vec::new();
    for ((arg, seed), tok) in args.iter().zip(&seeds).zip(&m.activity) {
        grad_args.push(arg.clone());
        if tok.is_dup() {
            let s = seed.clone().unwrap_or_default();
            grad_args.push(match arg {
                crate::interp::ArgValue::BufF32(_) => crate::interp::ArgValue::BufF32(
                    s.iter().map(|v| *v as f32).collect(),
                ),
                _ => crate::interp::ArgValue::BufF64(s),
            });
        }
    }
    if autodiff::has_seed_param(f, &m.spec()) {
        grad_args.push(crate::interp::ArgValue::F64(1.0));
    }
    let cfg = ExecConfig::new(grad)
        .with_args(grad_args)
        .with_read_stream(stream);
    let trace = crate::interp::run(graded, &cfg);
    if let Some(e) = trace.error {
        return Err(format!("{} at n={n}: {e}", m.name));
    }
    Ok(trace.steps)
}

fn geomean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v.ln();
        count += 1;
    }
    if count == 0 {
        1.0
    } else {
        (sum / count as f64).exp()
    }
}

/// Runs one kernel through both pipelines, checking gradients first.
pub fn bench_kernel(
    m: &KernelManifest,
    passes: &PassPipeline,
    seed: u64,
) -> Result<BenchRecord, String> {
    let run = prepare_kernel(m, passes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_name(&m.name));
    let ok_enzyme = gradcheck_kernel(&run, &run.enzyme, &mut rng)?;
    let ok_ref = gradcheck_kernel(&run, &run.reference, &mut rng)?;

    let mut rows = Vec::new();
    for &n in &m.inputs.sizes {
        // Identical inputs for both modes: fork the generator.
        let mut r1 = ChaCha8Rng::seed_from_u64(seed ^ hash_name(&m.name) ^ n);
        let mut r2 = r1.clone();
        let es = grad_steps(&run, &run.enzyme, n, &mut r1)?;
        let rs = grad_steps(&run, &run.reference, n, &mut r2)?;
        rows.push(SizeRecord {
            n,
            enzyme_steps: es,
            ref_steps: rs,
            ratio: rs as f64 / es as f64,
        });
    }
    let slope_of = |pick: fn(&SizeRecord) -> u64| -> Option<f64> {
        if rows.len() < 2 {
            return None;
        }
        Some(fit_slope(
            &rows
                .iter()
                .map(|r| ProfileRow {
                    n: r.n,
                    steps: pick(r),
                })
                .collect::<Vec<_>>(),
        ))
    };
    let geomean_ratio = geomean(rows.iter().map(|r| r.ratio));
    Ok(BenchRecord {
        kernel: m.name.clone(),
        gradcheck_enzyme: ok_enzyme,
        gradcheck_ref: ok_ref,
        slope_enzyme: slope_of(|r| r.enzyme_steps),
        slope_ref: slope_of(|r| r.ref_steps),
        rows,
        geomean_ratio,
    })
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(1469598103934665603u64, |h, b| {
        (h ^ b as u64).wrapping_mul(1099511628211)
    })
}

/// The full suite over a corpus.
pub fn bench_corpus(
    manifests: &[KernelManifest],
    passes: &PassPipeline,
    seed: u64,
) -> Result<BenchReport, String> {
    let mut kernels = Vec::new();
    for m in manifests {
        kernels.push(bench_kernel(m, passes, seed)?);
    }
    let aggregate = geomean(
        kernels
            .iter()
            .filter(|k| !k.rows.is_empty())
            .map(|k| k.geomean_ratio),
    );
    Ok(BenchReport {
        seed,
        passes: passes.to_string(),
        kernels,
        aggregate_geomean_ratio: aggregate,
    })
}
