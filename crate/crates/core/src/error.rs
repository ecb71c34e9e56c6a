//! Crate-wide error type with stable CLI exit-code classes.
//!
//! Errors fall into three classes, surfaced by [`Error::exit_class`]:
//! `1` for data problems (files, schemas, malformed panels), `2` for
//! estimation failures (singular designs, unidentifiable weight systems,
//! excessive bootstrap failures), and `3` for configuration mistakes.

use thiserror::Error;

/// Any failure arising from loading, validating, fitting, or resampling.
#[derive(Debug, Error)]
pub enum Error {
    // ----- data errors (exit class 1) -----
    /// A required column is absent from the CSV header.
    #[error("column '{0}' missing from CSV header")]
    MissingColumn(String),

    /// A cell that must be numeric failed to parse.
    #[error("non-numeric value '{value}' in column '{column}' at data row {row}")]
    NonNumericValue {
        column: String,
        value: String,
        row: usize,
    },

    /// A panel unit does not contribute exactly one row per period.
    #[error("unbalanced panel: unit '{unit}' has {count} row(s) for period {period} (expected 1)")]
    UnbalancedPanel {
        unit: String,
        period: i64,
        count: usize,
    },

    /// A referenced group label does not occur in the data.
    #[error("unknown group label '{0}'")]
    UnknownGroupLabel(String),

    /// A time period has no usable observations where one is required.
    #[error("period {period} has no observations{}", fmt_ctx(.context))]
    EmptyPeriod { period: i64, context: String },

    /// A group is too small to be split across the requested folds.
    #[error(
        "group '{group}' has {count} unit(s); fold assignment needs at least {folds} per group"
    )]
    TooFewUnits {
        group: String,
        count: usize,
        folds: usize,
    },

    /// Structurally invalid input not covered by a more specific variant.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// CSV-level parse failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),

    // ----- estimation errors (exit class 2) -----
    /// A covariate has zero dispersion, so no data-driven bandwidth exists.
    #[error("degenerate covariate with zero dispersion{}", fmt_ctx(.context))]
    DegenerateCovariate { context: String },

    /// A local-polynomial fit was requested with an unresolved bandwidth.
    #[error("local polynomial fit requires a resolved bandwidth; supply a fixed value or resolve one with the bandwidth rule first")]
    BandwidthRequired,

    /// The local weighted design matrix is singular beyond ridge repair.
    #[error("singular local design{}", fmt_ctx(.context))]
    SingularLocalDesign { context: String },

    /// A group contributes no training observations inside a stratum.
    #[error("group '{group}' has no observations in stratum {{{stratum}}}")]
    MissingGroupInStratum { group: String, stratum: String },

    /// The weight system's Gram matrix falls below the eigenvalue floor.
    #[error("singular weight system: min eigenvalue {min_eig:.3e} at or below floor {floor:.3e}{}", fmt_ctx(.context))]
    SingularSystem {
        min_eig: f64,
        floor: f64,
        context: String,
    },

    /// Fewer pre-treatment periods than control groups: the weight system
    /// has more unknowns than equations.
    #[error("weight system underidentified: {n_periods} period(s) against {n_controls} control group(s); need at least as many periods as controls")]
    Underidentified { n_periods: usize, n_controls: usize },

    /// No donor groups remain untreated long enough for the requested horizon.
    #[error("donor pool for group '{group}' at horizon {e_bar} is empty")]
    EmptyDonorPool { group: String, e_bar: usize },

    /// No treated cohort qualifies for the requested event time.
    #[error("no group qualifies for event time {0}")]
    NoQualifyingGroup(usize),

    /// Too many bootstrap replications failed even after one retry each.
    #[error("bootstrap failure rate too high: {failures} of {total} replications failed")]
    BootstrapFailures { failures: usize, total: usize },

    /// Weight solves failed at some covariate points and partial results were
    /// not allowed.
    #[error("weight solve failed at {failed} of {total} covariate points; pass allow_partial to drop them")]
    PartialWeightFailure { failed: usize, total: usize },

    // ----- configuration errors (exit class 3) -----
    /// Requested event time falls outside the observable window for a cohort.
    #[error("event time {e} out of range for group '{group}' (valid 0 ..= {max})")]
    EventTimeOutOfRange { group: String, e: usize, max: usize },

    /// Any other invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable CLI exit class: `1` data, `2` estimation, `3` configuration.
    pub fn exit_class(&self) -> i32 {
        use Error::*;
        match self {
            MissingColumn(_)
            | NonNumericValue { .. }
            | UnbalancedPanel { .. }
            | UnknownGroupLabel(_)
            | EmptyPeriod { .. }
            | TooFewUnits { .. }
            | InvalidData(_)
            | Io(_)
            | Csv(_) => 1,
            DegenerateCovariate { .. }
            | BandwidthRequired
            | SingularLocalDesign { .. }
            | MissingGroupInStratum { .. }
            | SingularSystem { .. }
            | Underidentified { .. }
            | EmptyDonorPool { .. }
            | NoQualifyingGroup(_)
            | BootstrapFailures { .. }
            | PartialWeightFailure { .. } => 2,
            EventTimeOutOfRange { .. } | InvalidConfig(_) => 3,
        }
    }

    /// Returns the same error with `context` filled in, for variants that
    /// carry one. Used to tag kernel-level failures with the surface (group,
    /// period, stratum, fold) that triggered them.
    pub(crate) fn with_context(self, ctx: &str) -> Self {
        use Error::*;
        match self {
            DegenerateCovariate { .. } => DegenerateCovariate {
                context: ctx.to_string(),
            },
            SingularLocalDesign { .. } => SingularLocalDesign {
                context: ctx.to_string(),
            },
            SingularSystem { min_eig, floor, .. } => SingularSystem {
                min_eig,
                floor,
                context: ctx.to_string(),
            },
            EmptyPeriod { period, .. } => EmptyPeriod {
                period,
                context: ctx.to_string(),
            },
            other => other,
        }
    }
}

fn fmt_ctx(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}
