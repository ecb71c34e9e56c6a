//! Flag / config-file / default resolution.
//!
//! Precedence per field: explicit command-line flag, then the `--config`
//! JSON file, then the built-in default. The resolved configuration is
//! echoed verbatim in every report so a run can be reproduced from its
//! output alone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use scdid::data::{PanelSchema, RcSchema};
use scdid::estimator::{EstimateConfig, WeightMode};
use scdid::inference::MultiplierSpec;
use scdid::kernel_regression::{Bandwidth, KernelSpec, LocalPolyConfig};
use scdid::weights::WeightSolveOptions;

use crate::args::{
    BandwidthArg, BootstrapArgs, CommonArgs, DesignArg, KernelArg, StaggeredArgs, WeightDistArg,
    WeightsArg,
};

/// A configuration problem: bad flag combination, malformed config file,
/// missing required option. Maps to exit code 3.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Fields accepted in a `--config` JSON file. All optional; unknown keys
/// are rejected so typos fail loudly instead of silently using defaults.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub design: Option<String>,
    pub treated_group: Option<String>,
    pub unit_col: Option<String>,
    pub group_col: Option<String>,
    pub time_col: Option<String>,
    pub y_col: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub discrete: Option<Vec<String>>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub kernel: Option<String>,
    pub order: Option<usize>,
    /// A number, or the string "auto".
    pub bandwidth: Option<serde_json::Value>,
    pub ridge_eps: Option<f64>,
    pub r_max: Option<f64>,
    /// "solved", "uniform", or an array of numbers.
    pub weights: Option<serde_json::Value>,
    pub nonneg: Option<bool>,
    pub min_eig_floor: Option<f64>,
    pub ridge: Option<f64>,
    pub allow_partial: Option<bool>,
    pub reps: Option<usize>,
    pub alpha: Option<f64>,
    pub weight_dist: Option<String>,
    pub adoption: Option<BTreeMap<String, Option<i64>>>,
    pub cohort: Option<String>,
    pub event_time: Option<usize>,
    pub e_bar: Option<usize>,
    pub by_discrete: Option<String>,
    pub threads: Option<usize>,
}

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read config file {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| err(format!("config file {}: {e}", path.display())))
    }

    fn bandwidth(&self) -> Result<Option<BandwidthArg>, ConfigError> {
        match &self.bandwidth {
            None => Ok(None),
            Some(serde_json::Value::String(s)) if s.eq_ignore_ascii_case("auto") => {
                Ok(Some(BandwidthArg::Auto))
            }
            Some(serde_json::Value::Number(n)) => match n.as_f64() {
                Some(v) => Ok(Some(BandwidthArg::Fixed(v))),
                None => Err(err("bandwidth in config file is not a finite number")),
            },
            Some(other) => Err(err(format!(
                "bandwidth in config file must be a number or \"auto\", got {other}"
            ))),
        }
    }

    fn weights(&self) -> Result<Option<WeightsArg>, ConfigError> {
        match &self.weights {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => match s.to_ascii_lowercase().as_str() {
                "solved" => Ok(Some(WeightsArg::Solved)),
                "uniform" => Ok(Some(WeightsArg::Uniform)),
                other => Err(err(format!(
                    "weights in config file must be \"solved\", \"uniform\", or an array, got \"{other}\""
                ))),
            },
            Some(serde_json::Value::Array(items)) => {
                let mut v = Vec::with_capacity(items.len());
                for item in items {
                    let x = item
                        .as_f64()
                        .ok_or_else(|| err("weights array in config file must hold numbers"))?;
                    v.push(x);
                }
                Ok(Some(WeightsArg::User(v)))
            }
            Some(other) => Err(err(format!(
                "weights in config file must be \"solved\", \"uniform\", or an array, got {other}"
            ))),
        }
    }
}

/// Sampling design after resolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DesignKind {
    Panel,
    Rc,
    Staggered,
}

impl DesignKind {
    fn name(self) -> &'static str {
        match self {
            DesignKind::Panel => "panel",
            DesignKind::Rc => "rc",
            DesignKind::Staggered => "staggered",
        }
    }
}

/// Column names after resolution.
#[derive(Serialize, Clone)]
pub struct Columns {
    pub unit: String,
    pub group: String,
    pub time: String,
    pub y: String,
}

/// Fully resolved run configuration, echoed in every report.
#[derive(Serialize, Clone)]
pub struct Resolved {
    pub design: String,
    pub data: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treated_group: Option<String>,
    pub columns: Columns,
    pub covariates: Vec<String>,
    pub discrete: Vec<String>,
    pub folds: usize,
    pub seed: u64,
    pub kernel: String,
    pub order: usize,
    /// `null` means the plug-in bandwidth rule.
    pub bandwidth: Option<f64>,
    pub ridge_eps: f64,
    pub r_max: f64,
    pub weights: serde_json::Value,
    pub nonneg: bool,
    pub min_eig_floor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    pub allow_partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_dist: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adoption: Option<BTreeMap<String, Option<i64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event_time: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_bar: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_discrete: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,

    #[serde(skip)]
    pub design_kind: DesignKind,
    #[serde(skip)]
    pub weight_mode: WeightMode,
    #[serde(skip)]
    pub multiplier: MultiplierSpec,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// Per-subcommand extras merged alongside the common flags.
#[derive(Default)]
pub struct Extras<'a> {
    pub staggered: Option<&'a StaggeredArgs>,
    pub by_discrete: Option<&'a str>,
    pub reps: Option<usize>,
    pub alpha: Option<f64>,
    pub weight_dist: Option<WeightDistArg>,
    /// Command wants bootstrap settings resolved (with defaults).
    pub wants_bootstrap: bool,
    /// Command can work on panel data without a designated treated group.
    pub treated_optional: bool,
}

impl<'a> Extras<'a> {
    pub fn for_bootstrap(args: &'a BootstrapArgs) -> Self {
        Self {
            staggered: Some(&args.staggered),
            by_discrete: args.by_discrete.as_deref(),
            reps: args.reps,
            alpha: args.alpha,
            weight_dist: args.weight_dist,
            wants_bootstrap: true,
            treated_optional: false,
        }
    }
}

pub fn resolve(common: &CommonArgs, extras: Extras<'_>) -> Result<Resolved, ConfigError> {
    let file = FileConfig::load(common.config.as_ref())?;
    let file_bandwidth = file.bandwidth()?;
    let file_weights = file.weights()?;

    let design_kind = match common.design {
        Some(DesignArg::Panel) => DesignKind::Panel,
        Some(DesignArg::Rc) => DesignKind::Rc,
        Some(DesignArg::Staggered) => DesignKind::Staggered,
        None => match file.design.as_deref() {
            Some("panel") | None => DesignKind::Panel,
            Some("rc") => DesignKind::Rc,
            Some("staggered") => DesignKind::Staggered,
            Some(other) => {
                return Err(err(format!(
                    "design in config file must be \"panel\", \"rc\", or \"staggered\", got \"{other}\""
                )))
            }
        },
    };

    let data = common
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| err("--data is required (or `data` in the config file)"))?;

    let columns = Columns {
        unit: pick(&common.unit_col, &file.unit_col, "unit_id"),
        group: pick(&common.group_col, &file.group_col, "group"),
        time: pick(&common.time_col, &file.time_col, "time"),
        y: pick(&common.y_col, &file.y_col, "y"),
    };

    let covariates = common
        .covariates
        .clone()
        .or(file.covariates)
        .unwrap_or_default();
    let discrete = common
        .discrete
        .clone()
        .or(file.discrete)
        .unwrap_or_default();

    let folds = common.folds.or(file.folds).unwrap_or(2);
    if folds < 2 {
        return Err(err("--folds must be at least 2"));
    }
    let seed = common.seed.or(file.seed).unwrap_or(0);

    let kernel = match common.kernel {
        Some(KernelArg::Gaussian) => KernelSpec::Gaussian,
        Some(KernelArg::Epanechnikov) => KernelSpec::Epanechnikov,
        None => match file.kernel.as_deref() {
            Some("gaussian") | None => KernelSpec::Gaussian,
            Some("epanechnikov") => KernelSpec::Epanechnikov,
            Some(other) => {
                let msg =
                    format!("kernel must be \"gaussian\" or \"epanechnikov\", got \"{other}\"");
                return Err(err(msg));
            }
        },
    };

    let order = common.order.or(file.order).unwrap_or(1);
    if order == 0 {
        return Err(err("--order must be at least 1"));
    }
    let bandwidth = match common.bandwidth.or(file_bandwidth) {
        None | Some(BandwidthArg::Auto) => None,
        Some(BandwidthArg::Fixed(h)) => {
            if !(h.is_finite() && h > 0.0) {
                return Err(err("--bandwidth must be positive"));
            }
            Some(h)
        }
    };

    let ridge_eps = common.ridge_eps.or(file.ridge_eps).unwrap_or(1e-10);
    let r_max = common.r_max.or(file.r_max).unwrap_or(50.0);
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(err("--r-max must be positive"));
    }

    let weights_arg = common
        .weights
        .clone()
        .or(file_weights)
        .unwrap_or(WeightsArg::Solved);
    let (weight_mode, weights_echo) = match weights_arg {
        WeightsArg::Solved => (WeightMode::Solved, serde_json::json!("solved")),
        WeightsArg::Uniform => (WeightMode::Uniform, serde_json::json!("uniform")),
        WeightsArg::User(v) => {
            let echo = serde_json::json!(v);
            (WeightMode::User { weights: v }, echo)
        }
    };

    let nonneg = common.nonneg || file.nonneg.unwrap_or(false);
    let allow_partial = common.allow_partial || file.allow_partial.unwrap_or(false);
    let min_eig_floor = common.min_eig_floor.or(file.min_eig_floor).unwrap_or(1e-8);
    let ridge = common.ridge.or(file.ridge);

    let (reps, alpha, weight_dist, multiplier) = if extras.wants_bootstrap {
        let reps = extras.reps.or(file.reps).unwrap_or(500);
        let alpha = extras.alpha.or(file.alpha).unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(err("--alpha must lie strictly between 0 and 1"));
        }
        let dist = match extras.weight_dist {
            Some(d) => d,
            None => match file.weight_dist.as_deref() {
                Some("exponential") | None => WeightDistArg::Exponential,
                Some("mammen") => WeightDistArg::Mammen,
                Some("normal") => WeightDistArg::Normal,
                Some("unit") => WeightDistArg::Unit,
                Some(other) => {
                    return Err(err(format!(
                        "weight_dist in config file must be \"exponential\", \"mammen\", \"normal\", or \"unit\", got \"{other}\""
                    )))
                }
            },
        };
        (Some(reps), Some(alpha), Some(dist), to_multiplier(dist))
    } else {
        (None, None, None, MultiplierSpec::Exponential)
    };

    let staggered_flags = extras.staggered;
    let adoption_flag = match staggered_flags.and_then(|s| s.adoption.as_deref()) {
        Some(text) => Some(
            serde_json::from_str::<BTreeMap<String, Option<i64>>>(text).map_err(|e| {
                err(format!(
                    "--adoption must be a JSON object of group label to period (or null), e.g. '{{\"A\":3,\"B\":null}}': {e}"
                ))
            })?,
        ),
        None => None,
    };
    let adoption = adoption_flag.or(file.adoption);
    let cohort = staggered_flags
        .and_then(|s| s.cohort.clone())
        .or(file.cohort);
    let event_time = staggered_flags
        .and_then(|s| s.event_time)
        .or(file.event_time);
    let e_bar = staggered_flags.and_then(|s| s.e_bar).or(file.e_bar);

    let treated_group = common.treated_group.clone().or(file.treated_group);
    match design_kind {
        DesignKind::Panel | DesignKind::Rc => {
            let rc_load = design_kind == DesignKind::Rc;
            if treated_group.is_none() && (rc_load || !extras.treated_optional) {
                return Err(err("--treated-group is required for panel and rc designs"));
            }
        }
        DesignKind::Staggered => {
            if adoption.is_none() {
                return Err(err(
                    "--adoption is required for the staggered design (JSON object of group label to adoption period, null for never-treated)",
                ));
            }
        }
    }

    let by_discrete = extras.by_discrete.map(str::to_owned).or(file.by_discrete);
    if let Some(col) = &by_discrete {
        if !discrete.iter().any(|d| d == col) {
            return Err(err(format!(
                "--by-discrete column '{col}' must also be listed in --discrete"
            )));
        }
        if design_kind == DesignKind::Staggered {
            return Err(err(
                "--by-discrete is not supported with the staggered design",
            ));
        }
    }

    let threads = common.threads.or(file.threads);
    if threads == Some(0) {
        return Err(err("--threads must be at least 1"));
    }

    Ok(Resolved {
        design: design_kind.name().to_owned(),
        data: data.display().to_string(),
        treated_group,
        columns,
        covariates,
        discrete,
        folds,
        seed,
        kernel: match kernel {
            KernelSpec::Gaussian => "gaussian".to_owned(),
            KernelSpec::Epanechnikov => "epanechnikov".to_owned(),
        },
        order,
        bandwidth,
        ridge_eps,
        r_max,
        weights: weights_echo,
        nonneg,
        min_eig_floor,
        ridge,
        allow_partial,
        reps,
        alpha,
        weight_dist: weight_dist.map(|d| dist_name(d).to_owned()),
        adoption,
        cohort,
        event_time,
        e_bar,
        by_discrete,
        threads,
        design_kind,
        weight_mode,
        multiplier,
        out: common.out.clone(),
    })
}

fn pick(flag: &Option<String>, file: &Option<String>, default: &str) -> String {
    flag.clone()
        .or_else(|| file.clone())
        .unwrap_or_else(|| default.to_owned())
}

fn to_multiplier(dist: WeightDistArg) -> MultiplierSpec {
    match dist {
        WeightDistArg::Exponential => MultiplierSpec::Exponential,
        WeightDistArg::Mammen => MultiplierSpec::Mammen,
        WeightDistArg::Normal => MultiplierSpec::NormalShift,
        WeightDistArg::Unit => MultiplierSpec::Unit,
    }
}

fn dist_name(dist: WeightDistArg) -> &'static str {
    match dist {
        WeightDistArg::Exponential => "exponential",
        WeightDistArg::Mammen => "mammen",
        WeightDistArg::Normal => "normal",
        WeightDistArg::Unit => "unit",
    }
}

impl Resolved {
    /// The core estimation configuration this run uses.
    pub fn estimate_config(&self) -> EstimateConfig {
        EstimateConfig {
            folds: self.folds,
            seed: self.seed,
            fit: LocalPolyConfig {
                order: self.order,
                bandwidth: match self.bandwidth {
                    Some(h) => Bandwidth::Fixed(h),
                    None => Bandwidth::Auto,
                },
                kernel: match self.kernel.as_str() {
                    "epanechnikov" => KernelSpec::Epanechnikov,
                    _ => KernelSpec::Gaussian,
                },
                ridge_eps: self.ridge_eps,
                ratio_clamp: self.r_max,
            },
            weight_opts: WeightSolveOptions {
                min_eig_floor_rel: self.min_eig_floor,
                ridge: self.ridge,
                nonneg: self.nonneg,
            },
            weight_mode: self.weight_mode.clone(),
            allow_partial: self.allow_partial,
        }
    }

    /// CSV schema for panel-shaped data (also used by the staggered design,
    /// where no single treated group exists).
    pub fn panel_schema(&self) -> PanelSchema {
        let mut schema = match (&self.design_kind, &self.treated_group) {
            (DesignKind::Staggered, _) | (_, None) => PanelSchema::unordered(),
            (_, Some(label)) => PanelSchema::new(label),
        };
        schema.unit = self.columns.unit.clone();
        schema.group = self.columns.group.clone();
        schema.time = self.columns.time.clone();
        schema.y = self.columns.y.clone();
        schema.continuous = self.covariates.clone();
        schema.discrete = self.discrete.clone();
        schema
    }

    /// CSV schema for repeated-cross-section data.
    pub fn rc_schema(&self) -> Result<RcSchema, ConfigError> {
        let label = self
            .treated_group
            .clone()
            .ok_or_else(|| err("--treated-group is required for rc designs"))?;
        let mut schema = RcSchema::new(&label);
        schema.group = self.columns.group.clone();
        schema.time = self.columns.time.clone();
        schema.y = self.columns.y.clone();
        schema.continuous = self.covariates.clone();
        schema.discrete = self.discrete.clone();
        Ok(schema)
    }
}
