//! Kernel manifests: data files describing how to drive one corpus
//! kernel — entry function, activity, input shapes, read streams, size
//! sweeps and expected properties.

use crate::activity::{ActivitySpec, RetActivity};
use crate::interp::ArgValue;
use crate::ir::ActivityToken;
use rand::Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelManifest {
    pub name: String,
    /// IR file, relative to the manifest.
    pub ir: String,
    pub entry: String,
    pub activity: Vec<ActivityToken>,
    #[serde(default = "default_ret_activity")]
    pub return_activity: RetActivity,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub inputs: InputsSpec,
    #[serde(default)]
    pub expected: Expected,
    #[serde(default)]
    pub gradcheck: GradcheckSpec,
    #[serde(skip)]
    pub dir: PathBuf,
}

fn default_ret_activity() -> RetActivity {
    RetActivity::Const
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct ParamSpec {
    pub kind: ParamKind,
    /// Buffer length: a number, or "n" for the sweep size.
    #[serde(default)]
    pub len: Option<LenSpec>,
    #[serde(default)]
    pub fill: Fill,
    /// Uniform range for random fills.
    #[serde(default = "default_range")]
    pub range: [f64; 2],
    #[serde(default)]
    pub role: Role,
    /// Fixed scalar value; "n" substitutes the sweep size.
    #[serde(default)]
    pub value: Option<ScalarSpec>,
    /// Referenced function for `func` parameters.
    #[serde(default)]
    pub func: Option<String>,
}

fn default_range() -> [f64; 2] {
    [0.5, 2.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    BufF64,
    BufF32,
    ScalarF64,
    ScalarI64,
    Func,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LenSpec {
    Fixed(u64),
    Sweep(String), // "n"
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScalarSpec {
    Fixed(f64),
    Sweep(String), // "n"
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    #[default]
    Random,
    Zeros,
    /// 1, 2, 3, ... useful for deterministic expectations.
    Linear,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Input data: shadow starts at zero and accumulates derivatives.
    #[default]
    In,
    /// Output buffer: shadow carries the derivative seed.
    Out,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSpec {
    /// Size sweep for step-count profiling; empty means no sweep.
    #[serde(default)]
    pub sizes: Vec<u64>,
    /// Problem size used for gradient checking.
    #[serde(default = "default_gradcheck_size")]
    pub gradcheck_size: u64,
    /// Number of `read` values to provision per run ("n" scales).
    #[serde(default)]
    pub read_stream_len: Option<LenSpec>,
}

fn default_gradcheck_size() -> u64 {
    8
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub slope_enzyme_max: Option<f64>,
    pub slope_ref_min: Option<f64>,
    /// Minimum Ref/Enzyme step ratio at the largest swept size.
    pub ratio_min: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSpec {
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for GradcheckSpec {
    fn default() -> GradcheckSpec {
        GradcheckSpec {
            points: default_points(),
            tol: default_tol(),
        }
    }
}

fn default_points() -> usize {
    5
}

fn default_tol() -> f64 {
    1e-4
}

impl KernelManifest {
    pub fn load(path: &Path) -> Result<KernelManifest, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let mut m: KernelManifest =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        m.dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(m)
    }

    pub fn ir_path(&self) -> PathBuf {
        self.dir.join(&self.ir)
    }

    pub fn spec(&self) -> ActivitySpec {
        ActivitySpec::new(self.activity.clone(), self.return_activity)
    }

    fn resolve_len(&self, len: &Option<LenSpec>, n: u64) -> u64 {
        match len {
            Some(LenSpec::Fixed(v)) => *v,
            Some(LenSpec::Sweep(_)) => n,
            None => n,
        }
    }

    /// Materializes primal arguments and shadow seeds for problem size
    /// `n`, drawing randomness from `rng`.
    pub fn make_inputs(
        &self,
        n: u64,
        rng: &mut impl Rng,
    ) -> (Vec<ArgValue>, Vec<Option<Vec<f64>>>, Vec<f64>) {
        let mut args = Vec::new();
        let mut seeds = Vec::new();
        for (k, p) in self.params.iter().enumerate() {
            let tok = self.activity.get(k).copied().unwrap_or(ActivityToken::Const);
            match p.kind {
                ParamKind::BufF64 | ParamKind::BufF32 => {
                    let len = self.resolve_len(&p.len, n) as usize;
                    let data: Vec<f64> = (0..len)
                        .map(|i| match p.fill {
                            Fill::Zeros => 0.0,
                            Fill::Linear => (i + 1) as f64,
                            Fill::Random => rng.gen_range(p.range[0]..p.range[1]),
                        })
                        .collect();
                    if p.kind == ParamKind::BufF64 {
                        args.push(ArgValue::BufF64(data));
                    } else {
                        args.push(ArgValue::BufF32(
                            data.iter().map(|v| *v as f32).collect(),
                        ));
                    }
                    let seed = if tok.is_dup() {
                        Some(match p.role {
                            Role::In => vec![0.0; len],
                            Role::Out => (0..len)
                                .map(|_| rng.gen_range(-1.0..1.0))
                                .collect(),
                        })
                    } else {
                        None
                    };
                    seeds.push(seed);
                }
                ParamKind::ScalarF64 => {
                    let v = match &p.value {
                        Some(ScalarSpec::Fixed(v)) => *v,
                        Some(ScalarSpec::Sweep(_)) => n as f64,
                        None => rng.gen_range(p.range[0]..p.range[1]),
                    };
                    args.push(ArgValue::F64(v));
                    seeds.push(None);
                }
                ParamKind::ScalarI64 => {
                    let v = match &p.value {
                        Some(ScalarSpec::Fixed(v)) => *v as i64,
                        Some(ScalarSpec::Sweep(_)) => n as i64,
                        None => n as i64,
                    };
                    args.push(ArgValue::I64(v));
                    seeds.push(None);
                }
                ParamKind::Func => {
                    let name = p.func.clone().unwrap_or_default();
                    args.push(ArgValue::FuncRef(name));
                    seeds.push(None);
                }
            }
        }
        let stream_len = self.resolve_len(
            &self.inputs.read_stream_len,
            n,
        );
        let stream_len = if self.inputs.read_stream_len.is_none() {
            0
        } else {
            stream_len
        };
        let stream: Vec<f64> = (0..stream_len)
            .map(|_| rng.gen_range(0.5..1.5))
            .collect();
        (args, seeds, stream)
    }
}

/// Loads every `*.toml` manifest in a directory, sorted by name.
pub fn corpus(dir: &Path) -> Result<Vec<KernelManifest>, String> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "toml").unwrap_or(false))
        .collect();
    paths.sort();
    for p in paths {
        out.push(KernelManifest::load(&p)?);
    }
    Ok(out)
}
