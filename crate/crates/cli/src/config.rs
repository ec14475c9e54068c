//! Experiment configuration: a TOML document, overridden by flags.

use std::path::{Path, PathBuf};

use matsde::calculus::{resolve_field, FieldName, ScalarField};
use matsde::sde::Coefficients;
use matsde::SquareMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable for the output directory; the only setting read
/// from the environment.
pub const OUTPUT_DIR_ENV: &str = "MATSDE_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "matsde-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Initial state; the identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<SquareMatrix>,
    pub coefficients: CoefficientConfig,
    pub fields: FieldConfig,
    pub tolerances: Tolerances,
    pub picard: PicardConfig,
    pub truncation: TruncationConfig,
    pub strong: StrongConfig,
    pub conditions: ConditionsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            horizon: 1.0,
            steps: 32,
            paths: 10_000,
            seed: 20_240_501,
            output_dir: None,
            x0: None,
            coefficients: CoefficientConfig::default(),
            fields: FieldConfig::default(),
            tolerances: Tolerances::default(),
            picard: PicardConfig::default(),
            truncation: TruncationConfig::default(),
            strong: StrongConfig::default(),
            conditions: ConditionsConfig::default(),
        }
    }
}

/// The SDE family solved by `simulate` and the SDE-based checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientConfig {
    Zero,
    /// `b = a X`, `σ = s X`.
    Linear { a: f64, s: f64 },
    /// `b ≡ drift`, `σ ≡ diffusion`.
    Constant {
        drift: SquareMatrix,
        diffusion: SquareMatrix,
    },
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self::Linear { a: 0.5, s: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub ito: String,
    pub taylor: String,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            ito: "hs_norm_sq".into(),
            taylor: "trace_cube".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Standard errors allowed for Monte Carlo comparisons.
    pub stderr_multiple: f64,
    /// Minimum fraction of covariance pairs within tolerance.
    pub covariance_hit_rate: f64,
    pub taylor_slope: f64,
    /// Minimum fitted order of the RMS Itô residual under refinement.
    pub ito_residual_order: f64,
    /// Remainders below this count as an exact expansion.
    pub exact_remainder: f64,
    pub strong_order: [f64; 2],
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            stderr_multiple: 3.0,
            covariance_hit_rate: 0.9,
            taylor_slope: 2.8,
            ito_residual_order: 0.4,
            exact_remainder: 1e-10,
            strong_order: [0.35, 0.65],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardConfig {
    pub iterations: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { iterations: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationConfig {
    pub radius: f64,
    pub seeds: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self { radius: 2.0, seeds: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongConfig {
    pub base_steps: usize,
    pub levels: usize,
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self { base_steps: 8, levels: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionsConfig {
    pub radius: f64,
    pub samples: usize,
}

impl Default for ConditionsConfig {
    fn default() -> Self {
        Self {
            radius: 10.0,
            samples: 10_000,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub dim: Option<usize>,
    pub horizon: Option<f64>,
    pub out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| usage(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flags win over the file; the environment supplies only the output
    /// directory, and only when neither flag nor file set one.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.paths {
            self.paths = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.dim {
            self.dim = v;
        }
        if let Some(v) = o.horizon {
            self.horizon = v;
        }
        if let Some(v) = &o.out {
            self.output_dir = Some(v.clone());
        }
        if self.output_dir.is_none() {
            let dir = std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
            self.output_dir = Some(dir);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dim == 0 || self.steps == 0 || self.paths == 0 || self.seed == 0 {
            return Err(usage("dim, steps, paths and seed must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(usage(format!("horizon must be positive, found {}", self.horizon)));
        }
        if let Some(x0) = &self.x0 {
            if x0.dim() != self.dim {
                return Err(usage(format!("x0 has dimension {}, expected {}", x0.dim(), self.dim)));
            }
        }
        if let CoefficientConfig::Constant { drift, diffusion } = &self.coefficients {
            if drift.dim() != self.dim || diffusion.dim() != self.dim {
                return Err(usage("constant coefficients must match dim"));
            }
        }
        if self.picard.iterations == 0 || self.truncation.seeds == 0 || self.conditions.samples == 0 {
            return Err(usage("iteration, seed and sample counts must be positive"));
        }
        if self.strong.base_steps == 0 || self.strong.levels < 3 {
            return Err(usage("strong.base_steps must be positive and strong.levels at least 3"));
        }
        let [lo, hi] = self.tolerances.strong_order;
        if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
            return Err(usage("tolerances.strong_order must be an increasing pair"));
        }
        for name in [&self.fields.ito, &self.fields.taylor] {
            name.parse::<FieldName>().map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn x0(&self) -> SquareMatrix {
        self.x0.clone().unwrap_or_else(|| SquareMatrix::identity(self.dim))
    }

    pub fn coefficients(&self) -> Coefficients {
        match &self.coefficients {
            CoefficientConfig::Zero => Coefficients::zero(),
            CoefficientConfig::Linear { a, s } => Coefficients::linear(*a, *s),
            CoefficientConfig::Constant { drift, diffusion } => {
                Coefficients::constant(drift.clone(), diffusion.clone())
            }
        }
    }

    pub fn field(&self, name: &str) -> Result<ScalarField, CliError> {
        let parsed: FieldName = name.parse().map_err(|e: matsde::Error| usage(e.to_string()))?;
        resolve_field(&parsed, self.dim).map_err(|e| usage(format!("field {name}: {e}")))
    }
}
