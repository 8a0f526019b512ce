//! Central-finite-difference gradient checking.
//!
//! The objective is the seeded scalar `L(x) = d_ret * ret(x) + sum over
//! duplicated buffers of seed[e] * final[e]`, which is exactly what the
//! synthesized gradient differentiates: derivatives of `active` scalars
//! come back through the return value, derivatives of buffer elements
//! accumulate onto the caller-provided shadows. Every evaluation replays
//! the same `read` stream so perturbations are isolated to the inputs.

use super::*;
use crate::activity::{ActivitySpec, RetActivity};
use crate::ir::{ActivityToken, IrModule, IrType};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    /// Coordinate name, `%param` or `%param[i]`.
    pub coord: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub function: String,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
    pub pass: bool,
    /// Steps of the analytic (gradient) run, for the curious.
    pub grad_steps: u64,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }
}

pub struct GradCheckConfig {
    pub fn_name: String,
    pub spec: ActivitySpec,
    /// Primal arguments; duplicated parameters must be buffer arguments.
    pub args: Vec<ArgValue>,
    /// Per-parameter shadow seed, aligned with `args`; `None` for
    /// non-duplicated parameters, zeros for pure inputs, the output seed
    /// vector for outputs.
    pub shadow_seeds: Vec<Option<Vec<f64>>>,
    /// Seed for the derivative of an active float return.
    pub d_ret: f64,
    pub tol: f64,
    pub read_stream: Vec<f64>,
}

impl GradCheckConfig {
    pub fn new(fn_name: impl Into<String>, spec: ActivitySpec) -> GradCheckConfig {
        GradCheckConfig {
            fn_name: fn_name.into(),
            spec,
            args: Vec::new(),
            shadow_seeds: Vec::new(),
            d_ret: 1.0,
            tol: 1e-4,
            read_stream: Vec::new(),
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn buffer_len(arg: &ArgValue) -> Option<usize> {
    match arg {
        ArgValue::BufF64(v) => Some(v.len()),
        ArgValue::BufF32(v) => Some(v.len()),
        ArgValue::BufI64(v) => Some(v.len()),
        _ => None,
    }
}

/// Objective value of one primal evaluation.
fn objective(cfg: &GradCheckConfig, trace: &ExecTrace) -> Result<f64, String> {
    if let Some(err) = &trace.error {
        return Err(format!("primal evaluation failed: {err}"));
    }
    let mut l = 0.0;
    if cfg.spec.ret == RetActivity::Active {
        let r = trace
            .ret_f64()
            .ok_or("return-seeded gradcheck of a non-float function")?;
        l += cfg.d_ret * r;
    }
    for (k, tok) in cfg.spec.params.iter().enumerate() {
        if !tok.is_dup() {
            continue;
        }
        let Some(Some(finals)) = trace.buffers.get(k) else {
            continue;
        };
        let seeds = cfg.shadow_seeds[k]
            .as_ref()
            .ok_or_else(|| format!("missing shadow seed for parameter {k}"))?;
        for (s, v) in seeds.iter().zip(finals) {
            l += s * v;
        }
    }
    Ok(l)
}

fn run_primal(m: &IrModule, cfg: &GradCheckConfig, args: Vec<ArgValue>) -> ExecTrace {
    let ec = ExecConfig::new(cfg.fn_name.clone())
        .with_args(args)
        .with_read_stream(cfg.read_stream.clone());
    run(m, &ec)
}

/// Compares the synthesized gradient of `cfg.fn_name` (which must already
/// be present in the module as `grad_<fn>`) against central finite
/// differences at the configured point.
pub fn gradcheck(m: &IrModule, cfg: &GradCheckConfig) -> Result<GradCheckReport, String> {
    let f = m
        .function(&cfg.fn_name)
        .ok_or_else(|| format!("unknown function @{}", cfg.fn_name))?;
    cfg.spec.check(f)?;
    if cfg.args.len() != f.params.len() {
        return Err(format!(
            "@{}: {} arguments for {} parameters",
            cfg.fn_name,
            cfg.args.len(),
            f.params.len()
        ));
    }
    let grad_name = crate::autodiff::grad_name(&cfg.fn_name);
    if m.function(&grad_name).is_none() {
        return Err(format!("gradient @{grad_name} has not been synthesized"));
    }

    // Active scalar coordinates, in parameter order.
    let active_scalars: Vec<usize> = cfg
        .spec
        .params
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == ActivityToken::Active)
        .map(|(i, _)| i)
        .collect();

    // --- Analytic side: one run of the synthesized gradient. ---
    let mut grad_args: Vec<ArgValue> = Vec::new();
    let mut shadow_positions: Vec<Option<usize>> = vec![None; cfg.args.len()];
    for (k, (arg, tok)) in cfg.args.iter().zip(&cfg.spec.params).enumerate() {
        grad_args.push(arg.clone());
        if tok.is_dup() {
            let seeds = cfg.shadow_seeds.get(k).and_then(|s| s.as_ref()).ok_or(
                format!("missing shadow seed for duplicated parameter {k}"),
            )?;
            let shadow = match arg {
                ArgValue::BufF32(_) => {
                    ArgValue::BufF32(seeds.iter().map(|v| *v as f32).collect())
                }
                _ => ArgValue::BufF64(seeds.clone()),
            };
            shadow_positions[k] = Some(grad_args.len());
            grad_args.push(shadow);
        }
    }
    let has_seed_param = cfg.spec.ret == RetActivity::Active
        && f.return_type.map(|t| t.is_float()).unwrap_or(false);
    if has_seed_param {
        grad_args.push(match f.return_type {
            Some(IrType::F32) => ArgValue::F32(cfg.d_ret as f32),
            _ => ArgValue::F64(cfg.d_ret),
        });
    }
    let deriv_out_pos = if active_scalars.len() >= 2 {
        grad_args.push(ArgValue::BufF64(vec![0.0; active_scalars.len()]));
        Some(grad_args.len() - 1)
    } else {
        None
    };
    let grad_ec = ExecConfig::new(grad_name.clone())
        .with_args(grad_args)
        .with_read_stream(cfg.read_stream.clone());
    let grad_trace = run(m, &grad_ec);
    if let Some(err) = &grad_trace.error {
        return Err(format!("gradient evaluation failed: {err}"));
    }

    let mut entries: Vec<GradCheckEntry> = Vec::new();

    // --- Numeric side: central differences on the objective. ---
    let perturb = |k: usize, delta: f64, elem: Option<usize>| -> Vec<ArgValue> {
        let mut args = cfg.args.clone();
        match (&mut args[k], elem) {
            (ArgValue::F64(v), None) => *v += delta,
            (ArgValue::F32(v), None) => *v += delta as f32,
            (ArgValue::BufF64(buf), Some(e)) => buf[e] += delta,
            (ArgValue::BufF32(buf), Some(e)) => buf[e] += delta as f32,
            _ => unreachable!("perturbation of a non-float coordinate"),
        }
        args
    };
    let numeric_at = |k: usize, x: f64, elem: Option<usize>| -> Result<f64, String> {
        let h = 1e-6 * x.abs().max(1.0);
        let plus = objective(cfg, &run_primal(m, cfg, perturb(k, h, elem)))?;
        let minus = objective(cfg, &run_primal(m, cfg, perturb(k, -h, elem)))?;
        Ok((plus - minus) / (2.0 * h))
    };

    for (pos, &k) in active_scalars.iter().enumerate() {
        let x = match &cfg.args[k] {
            ArgValue::F64(v) => *v,
            ArgValue::F32(v) => *v as f64,
            _ => return Err(format!("active parameter {k} is not a float scalar")),
        };
        let analytic = if let Some(out_pos) = deriv_out_pos {
            grad_trace.buffers[out_pos]
                .as_ref()
                .map(|b| b[pos])
                .ok_or("gradient did not fill the derivative buffer")?
        } else {
            grad_trace
                .ret_f64()
                .ok_or("gradient of an active scalar returned no value")?
        };
        let numeric = numeric_at(k, x, None)?;
        let e = rel_err(analytic, numeric);
        entries.push(GradCheckEntry {
            coord: format!("%{}", f.params[k].name),
            analytic,
            numeric,
            rel_err: e,
            pass: e <= cfg.tol,
        });
    }

    for (k, tok) in cfg.spec.params.iter().enumerate() {
        if !tok.is_dup() {
            continue;
        }
        let n = buffer_len(&cfg.args[k])
            .ok_or_else(|| format!("duplicated parameter {k} is not a buffer"))?;
        let shadow_pos = shadow_positions[k].unwrap();
        let finals = grad_trace.buffers[shadow_pos]
            .as_ref()
            .ok_or("gradient shadow buffer missing from trace")?;
        let is_float_buf = matches!(
            &cfg.args[k],
            ArgValue::BufF64(_) | ArgValue::BufF32(_)
        );
        if !is_float_buf {
            continue; // integer buffers carry no derivatives
        }
        for e in 0..n {
            let x = match &cfg.args[k] {
                ArgValue::BufF64(b) => b[e],
                ArgValue::BufF32(b) => b[e] as f64,
                _ => unreachable!(),
            };
            let analytic = finals[e];
            let numeric = numeric_at(k, x, Some(e))?;
            let err = rel_err(analytic, numeric);
            entries.push(GradCheckEntry {
                coord: format!("%{}[{e}]", f.params[k].name),
                analytic,
                numeric,
                rel_err: err,
                pass: err <= cfg.tol,
            });
        }
    }

    let pass = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport {
        function: cfg.fn_name.clone(),
        tol: cfg.tol,
        entries,
        pass,
        grad_steps: grad_trace.steps,
    })
}

/// Step-count profile over a size sweep plus the fitted log2-log2 slope.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ProfileTable {
    pub rows: Vec<ProfileRow>,
    pub slope: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProfileRow {
    pub n: u64,
    pub steps: u64,
}

/// Runs each config and least-squares fits `log2(steps)` against
/// `log2(n)`.
pub fn count_profile(
    m: &IrModule,
    configs: &[(u64, ExecConfig)],
) -> Result<ProfileTable, RuntimeError> {
    let mut rows = Vec::with_capacity(configs.len());
    for (n, cfg) in configs {
        let trace = run(m, cfg);
        if let Some(e) = trace.error {
            return Err(e);
        }
        rows.push(ProfileRow {
            n: *n,
            steps: trace.steps,
        });
    }
    Ok(ProfileTable {
        slope: fit_slope(&rows),
        rows,
    })
}

pub fn fit_slope(rows: &[ProfileRow]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).log2(), (r.steps as f64).log2()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
