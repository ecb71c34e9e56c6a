//! Dataset containers, CSV ingestion, validation, and cross-fitting fold
//! assignment.
//!
//! Three observation designs are supported:
//! - **Panel**: every unit is observed in every period; group membership and
//!   covariates are constant within a unit.
//! - **Repeated cross-section**: each row is a single (group, period, outcome)
//!   observation; no unit identity links rows across periods.
//! - **Staggered adoption**: a panel plus an adoption map giving each group
//!   the first period in which it is treated (or never).
//!
//! Group labels from the data are mapped to internal indices `1..=n_groups`
//! with the treated group always at index 1 and control groups following in
//! numeric-aware label order. Periods are mapped to `1..=n_periods` in
//! ascending order of their raw values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{fnv1a64, mix_seed, Error, Result};

/// Covariates for one observation: continuous values plus discrete levels
/// stored as indices into the dataset's per-covariate level sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateProfile {
    pub continuous: Vec<f64>,
    pub discrete: Vec<usize>,
}

impl CovariateProfile {
    /// Profile with no covariates at all.
    pub fn empty() -> Self {
        Self::default()
    }
}

/// A balanced panel: `n` units, each observed in every period.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    /// Original unit identifiers, in first-appearance order.
    pub unit_ids: Vec<String>,
    /// Internal group of each unit: 1 is treated, 2..=n_groups are controls.
    pub group: Vec<usize>,
    /// Per-unit covariates (time-invariant).
    pub covariates: Vec<CovariateProfile>,
    /// `outcomes[i][t-1]` is unit i's outcome in period t.
    pub outcomes: Vec<Vec<f64>>,
    /// Total number of groups including the treated one.
    pub n_groups: usize,
    /// Number of periods 𝒯.
    pub n_periods: usize,
    /// `group_labels[g-1]` is the original label of internal group g.
    pub group_labels: Vec<String>,
    /// Raw period values in ascending order; period t has value
    /// `period_values[t-1]`.
    pub period_values: Vec<i64>,
    /// Names of continuous covariate columns.
    pub continuous_names: Vec<String>,
    /// Names of discrete covariate columns.
    pub discrete_names: Vec<String>,
    /// `discrete_levels[j]` lists the sorted raw levels of discrete
    /// covariate j; profiles store indices into this list.
    pub discrete_levels: Vec<Vec<String>>,
}

impl PanelDataset {
    /// Validates cross-field invariants and assembles a dataset.
    ///
    /// # Errors
    /// `InvalidData` when dimensions disagree, groups are out of range, the
    /// treated group is empty, fewer than two periods or two groups exist, or
    /// any outcome/covariate is non-finite.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        unit_ids: Vec<String>,
        group: Vec<usize>,
        covariates: Vec<CovariateProfile>,
        outcomes: Vec<Vec<f64>>,
        group_labels: Vec<String>,
        period_values: Vec<i64>,
        continuous_names: Vec<String>,
        discrete_names: Vec<String>,
        discrete_levels: Vec<Vec<String>>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let n_groups = group_labels.len();
        let n_periods = period_values.len();
        if n == 0 {
            return Err(Error::InvalidData("panel has no units".into()));
        }
        if group.len() != n || covariates.len() != n || outcomes.len() != n {
            return Err(Error::InvalidData(
                "unit_ids, group, covariates, and outcomes must have equal length".into(),
            ));
        }
        if n_groups < 2 {
            return Err(Error::InvalidData(
                "need at least two groups (treated plus one control)".into(),
            ));
        }
        if n_periods < 2 {
            return Err(Error::InvalidData("need at least two periods".into()));
        }
        if discrete_levels.len() != discrete_names.len() {
            return Err(Error::InvalidData(
                "discrete_levels must match discrete_names in length".into(),
            ));
        }
        let mut group_seen = vec![false; n_groups];
        for (i, &g) in group.iter().enumerate() {
            if g < 1 || g > n_groups {
                return Err(Error::InvalidData(format!(
                    "unit '{}' has group index {} outside 1..={}",
                    unit_ids[i], g, n_groups
                )));
            }
            group_seen[g - 1] = true;
            let prof = &covariates[i];
            if prof.continuous.len() != continuous_names.len()
                || prof.discrete.len() != discrete_names.len()
            {
                return Err(Error::InvalidData(format!(
                    "unit '{}' has a covariate profile of the wrong arity",
                    unit_ids[i]
                )));
            }
            if prof.continuous.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "unit '{}' has a non-finite continuous covariate",
                    unit_ids[i]
                )));
            }
            for (j, &lev) in prof.discrete.iter().enumerate() {
                if lev >= discrete_levels[j].len() {
                    return Err(Error::InvalidData(format!(
                        "unit '{}' references discrete level {} outside the level set of '{}'",
                        unit_ids[i], lev, discrete_names[j]
                    )));
                }
            }
            if outcomes[i].len() != n_periods {
                return Err(Error::InvalidData(format!(
                    "unit '{}' has {} outcomes for {} periods",
                    unit_ids[i],
                    outcomes[i].len(),
                    n_periods
                )));
            }
            if outcomes[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "unit '{}' has a non-finite outcome",
                    unit_ids[i]
                )));
            }
        }
        if !group_seen[0] {
            return Err(Error::InvalidData(format!(
                "treated group '{}' has no units",
                group_labels[0]
            )));
        }
        if !period_values.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidData(
                "period values must be strictly ascending".into(),
            ));
        }
        Ok(Self {
            unit_ids,
            group,
            covariates,
            outcomes,
            n_groups,
            n_periods,
            group_labels,
            period_values,
            continuous_names,
            discrete_names,
            discrete_levels,
        })
    }

    /// Number of units.
    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    /// Outcome difference ΔYᵢ = Yᵢ,𝒯 − Yᵢ,𝒯₋₁ for unit i.
    pub fn delta_y(&self, i: usize) -> f64 {
        self.outcomes[i][self.n_periods - 1] - self.outcomes[i][self.n_periods - 2]
    }

    /// Unit counts per internal group (index g-1).
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_groups];
        for &g in &self.group {
            sizes[g - 1] += 1;
        }
        sizes
    }

    /// True when no covariates of either kind are present, in which case the
    /// estimator collapses to closed-form group-period means.
    pub fn is_covariate_free(&self) -> bool {
        self.continuous_names.is_empty() && self.discrete_names.is_empty()
    }
}

/// Repeated cross-sections: each row is one (outcome, group, period,
/// covariates) observation with no unit identity across periods.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedCrossSection {
    pub y: Vec<f64>,
    /// Internal group of each row (1 treated, 2..=n_groups controls).
    pub group: Vec<usize>,
    /// Period of each row, in 1..=n_periods.
    pub time: Vec<usize>,
    pub covariates: Vec<CovariateProfile>,
    pub n_groups: usize,
    pub n_periods: usize,
    pub group_labels: Vec<String>,
    pub period_values: Vec<i64>,
    pub continuous_names: Vec<String>,
    pub discrete_names: Vec<String>,
    pub discrete_levels: Vec<Vec<String>>,
}

impl RepeatedCrossSection {
    /// Validates cross-field invariants and assembles a dataset.
    ///
    /// # Errors
    /// `InvalidData` on dimension or range violations, as for
    /// [`PanelDataset::from_parts`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        y: Vec<f64>,
        group: Vec<usize>,
        time: Vec<usize>,
        covariates: Vec<CovariateProfile>,
        group_labels: Vec<String>,
        period_values: Vec<i64>,
        continuous_names: Vec<String>,
        discrete_names: Vec<String>,
        discrete_levels: Vec<Vec<String>>,
    ) -> Result<Self> {
        let n = y.len();
        let n_groups = group_labels.len();
        let n_periods = period_values.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        if group.len() != n || time.len() != n || covariates.len() != n {
            return Err(Error::InvalidData(
                "y, group, time, and covariates must have equal length".into(),
            ));
        }
        if n_groups < 2 {
            return Err(Error::InvalidData(
                "need at least two groups (treated plus one control)".into(),
            ));
        }
        if n_periods < 2 {
            return Err(Error::InvalidData("need at least two periods".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome".into()));
        }
        let mut group_seen = vec![false; n_groups];
        let mut period_seen = vec![false; n_periods];
        for i in 0..n {
            if group[i] < 1 || group[i] > n_groups {
                return Err(Error::InvalidData(format!(
                    "row {i} has group index {} outside 1..={n_groups}",
                    group[i]
                )));
            }
            if time[i] < 1 || time[i] > n_periods {
                return Err(Error::InvalidData(format!(
                    "row {i} has period index {} outside 1..={n_periods}",
                    time[i]
                )));
            }
            group_seen[group[i] - 1] = true;
            period_seen[time[i] - 1] = true;
            let prof = &covariates[i];
            if prof.continuous.len() != continuous_names.len()
                || prof.discrete.len() != discrete_names.len()
                || prof.continuous.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidData(format!(
                    "row {i} has an invalid covariate profile"
                )));
            }
        }
        if !group_seen[0] {
            return Err(Error::InvalidData(format!(
                "treated group '{}' has no rows",
                group_labels[0]
            )));
        }
        if let Some(t) = period_seen.iter().position(|&s| !s) {
            return Err(Error::EmptyPeriod {
                period: period_values[t],
                context: String::new(),
            });
        }
        Ok(Self {
            y,
            group,
            time,
            covariates,
            n_groups,
            n_periods,
            group_labels,
            period_values,
            continuous_names,
            discrete_names,
            discrete_levels,
        })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// True when no covariates of either kind are present.
    pub fn is_covariate_free(&self) -> bool {
        self.continuous_names.is_empty() && self.discrete_names.is_empty()
    }
}

/// Adoption schedule for staggered designs: `adoption[g-1]` is the first
/// period (internal index, ≥ 2) in which internal group g is treated, or
/// `None` for never-treated groups.
#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredDesign {
    pub adoption: Vec<Option<usize>>,
}

impl StaggeredDesign {
    /// Builds a design from per-group internal adoption periods.
    ///
    /// # Errors
    /// `InvalidConfig` when an adoption period falls outside `2..=n_periods`
    /// or no group ever adopts.
    pub fn new(adoption: Vec<Option<usize>>, n_periods: usize) -> Result<Self> {
        for (idx, gamma) in adoption.iter().enumerate() {
            if let Some(gamma) = gamma {
                if *gamma < 2 || *gamma > n_periods {
                    return Err(Error::InvalidConfig(format!(
                        "adoption period {gamma} for group index {} outside 2..={n_periods}",
                        idx + 1
                    )));
                }
            }
        }
        if adoption.iter().all(|g| g.is_none()) {
            return Err(Error::InvalidConfig(
                "staggered design has no treated cohort: every group is never-treated".into(),
            ));
        }
        Ok(Self { adoption })
    }

    /// Builds a design from raw period values keyed by group label. Every
    /// group in the dataset must be mapped; `None` marks never-treated.
    ///
    /// # Errors
    /// `InvalidConfig` for unmapped groups or period values not present in
    /// the panel; `UnknownGroupLabel` for map keys not in the data.
    pub fn from_labels(
        ds: &PanelDataset,
        adoption_by_label: &BTreeMap<String, Option<i64>>,
    ) -> Result<Self> {
        for key in adoption_by_label.keys() {
            if !ds.group_labels.contains(key) {
                return Err(Error::UnknownGroupLabel(key.clone()));
            }
        }
        let mut adoption = Vec::with_capacity(ds.n_groups);
        for label in &ds.group_labels {
            let raw = adoption_by_label.get(label).ok_or_else(|| {
                Error::InvalidConfig(format!("no adoption period given for group '{label}'"))
            })?;
            let gamma = match raw {
                None => None,
                Some(value) => {
                    let idx = ds
                        .period_values
                        .iter()
                        .position(|p| p == value)
                        .ok_or_else(|| {
                            Error::InvalidConfig(format!(
                                "adoption period {value} for group '{label}' is not an observed period"
                            ))
                        })?;
                    Some(idx + 1)
                }
            };
            adoption.push(gamma);
        }
        Self::new(adoption, ds.n_periods)
    }

    /// First treated period γ(g) of internal group g, if any.
    pub fn gamma(&self, g: usize) -> Option<usize> {
        self.adoption[g - 1]
    }
}

/// Column mapping for panel CSV files.
#[derive(Debug, Clone)]
pub struct PanelSchema {
    pub unit: String,
    pub group: String,
    pub time: String,
    pub y: String,
    pub continuous: Vec<String>,
    pub discrete: Vec<String>,
    /// Label of the treated group. `None` (staggered designs) orders all
    /// groups by label without a designated treated slot.
    pub treated_label: Option<String>,
}

impl PanelSchema {
    /// Schema with default column names (`unit_id,group,time,y`) and the
    /// given treated label.
    pub fn new(treated_label: impl Into<String>) -> Self {
        Self {
            unit: "unit_id".into(),
            group: "group".into(),
            time: "time".into(),
            y: "y".into(),
            continuous: Vec::new(),
            discrete: Vec::new(),
            treated_label: Some(treated_label.into()),
        }
    }

    /// Schema with default column names and no treated designation.
    pub fn unordered() -> Self {
        Self {
            unit: "unit_id".into(),
            group: "group".into(),
            time: "time".into(),
            y: "y".into(),
            continuous: Vec::new(),
            discrete: Vec::new(),
            treated_label: None,
        }
    }

    /// Adds continuous covariate columns.
    pub fn with_continuous(mut self, names: &[&str]) -> Self {
        self.continuous = names.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Adds discrete covariate columns.
    pub fn with_discrete(mut self, names: &[&str]) -> Self {
        self.discrete = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Column mapping for repeated-cross-section CSV files (no unit column).
#[derive(Debug, Clone)]
pub struct RcSchema {
    pub group: String,
    pub time: String,
    pub y: String,
    pub continuous: Vec<String>,
    pub discrete: Vec<String>,
    pub treated_label: String,
}

impl RcSchema {
    /// Schema with default column names (`group,time,y`).
    pub fn new(treated_label: impl Into<String>) -> Self {
        Self {
            group: "group".into(),
            time: "time".into(),
            y: "y".into(),
            continuous: Vec::new(),
            discrete: Vec::new(),
            treated_label: treated_label.into(),
        }
    }

    /// Adds continuous covariate columns.
    pub fn with_continuous(mut self, names: &[&str]) -> Self {
        self.continuous = names.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Adds discrete covariate columns.
    pub fn with_discrete(mut self, names: &[&str]) -> Self {
        self.discrete = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Orders group labels numeric-aware: labels parsing as integers first in
/// numeric order, the rest lexicographically.
fn sort_labels(labels: &mut [String]) {
    labels.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    });
}

/// Maps raw group labels to internal indices: treated label (if any) first,
/// remaining labels in numeric-aware order.
fn order_groups(seen: BTreeSet<String>, treated: Option<&str>) -> Result<Vec<String>> {
    let mut labels: Vec<String> = seen.into_iter().collect();
    match treated {
        Some(t) => {
            let pos = labels
                .iter()
                .position(|l| l == t)
                .ok_or_else(|| Error::UnknownGroupLabel(t.to_string()))?;
            labels.remove(pos);
            sort_labels(&mut labels);
            labels.insert(0, t.to_string());
        }
        None => sort_labels(&mut labels),
    }
    Ok(labels)
}

struct ColumnIndex {
    idx: usize,
    name: String,
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<ColumnIndex> {
    headers
        .iter()
        .position(|h| h == name)
        .map(|idx| ColumnIndex {
            idx,
            name: name.to_string(),
        })
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_f64(field: &str, col: &ColumnIndex, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::NonNumericValue {
            column: col.name.clone(),
            value: field.to_string(),
            row,
        })
}

fn parse_i64(field: &str, col: &ColumnIndex, row: usize) -> Result<i64> {
    field
        .trim()
        .parse::<i64>()
        .map_err(|_| Error::NonNumericValue {
            column: col.name.clone(),
            value: field.to_string(),
            row,
        })
}

/// Loads a balanced panel from CSV.
///
/// Expected layout: one row per (unit, period) with columns for unit id,
/// group label, period, outcome, and any covariates. Covariates must be
/// constant within a unit; every unit must contribute exactly one row per
/// observed period.
///
/// # Errors
/// `MissingColumn`, `NonNumericValue`, `UnbalancedPanel`,
/// `UnknownGroupLabel`, `InvalidData`, or I/O and CSV errors.
pub fn load_panel_csv(path: &Path, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let unit_col = find_column(&headers, &schema.unit)?;
    let group_col = find_column(&headers, &schema.group)?;
    let time_col = find_column(&headers, &schema.time)?;
    let y_col = find_column(&headers, &schema.y)?;
    let cont_cols: Vec<ColumnIndex> = schema
        .continuous
        .iter()
        .map(|n| find_column(&headers, n))
        .collect::<Result<_>>()?;
    let disc_cols: Vec<ColumnIndex> = schema
        .discrete
        .iter()
        .map(|n| find_column(&headers, n))
        .collect::<Result<_>>()?;

    struct RawRow {
        unit: String,
        group: String,
        time: i64,
        y: f64,
        cont: Vec<f64>,
        disc: Vec<String>,
    }
    let mut rows = Vec::new();
    for (ridx, record) in reader.records().enumerate() {
        let record = record?;
        let row = ridx + 1;
        let get = |c: &ColumnIndex| record.get(c.idx).unwrap_or("").to_string();
        rows.push(RawRow {
            unit: get(&unit_col),
            group: get(&group_col),
            time: parse_i64(record.get(time_col.idx).unwrap_or(""), &time_col, row)?,
            y: parse_f64(record.get(y_col.idx).unwrap_or(""), &y_col, row)?,
            cont: cont_cols
                .iter()
                .map(|c| parse_f64(record.get(c.idx).unwrap_or(""), c, row))
                .collect::<Result<_>>()?,
            disc: disc_cols.iter().map(get).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!(
            "no data rows in {}",
            path.display()
        )));
    }

    let period_set: BTreeSet<i64> = rows.iter().map(|r| r.time).collect();
    let period_values: Vec<i64> = period_set.into_iter().collect();
    let period_index: HashMap<i64, usize> = period_values
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();

    let label_set: BTreeSet<String> = rows.iter().map(|r| r.group.clone()).collect();
    let group_labels = order_groups(label_set, schema.treated_label.as_deref())?;
    let group_index: HashMap<&String, usize> = group_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l, i + 1))
        .collect();

    let mut discrete_levels: Vec<Vec<String>> = disc_cols
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let set: BTreeSet<String> = rows.iter().map(|r| r.disc[j].clone()).collect();
            set.into_iter().collect()
        })
        .collect();
    for levels in &mut discrete_levels {
        sort_labels(levels);
    }

    let mut unit_order: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    for r in &rows {
        if !unit_index.contains_key(&r.unit) {
            unit_index.insert(r.unit.clone(), unit_order.len());
            unit_order.push(r.unit.clone());
        }
    }
    let n = unit_order.len();
    let n_periods = period_values.len();
    let mut group = vec![0usize; n];
    let mut covariates: Vec<Option<CovariateProfile>> = vec![None; n];
    let mut outcomes: Vec<Vec<Option<f64>>> = vec![vec![None; n_periods]; n];
    for r in &rows {
        let i = unit_index[&r.unit];
        let g = group_index[&r.group];
        if group[i] == 0 {
            group[i] = g;
        } else if group[i] != g {
            return Err(Error::InvalidData(format!(
                "unit '{}' appears in more than one group",
                r.unit
            )));
        }
        let prof = CovariateProfile {
            continuous: r.cont.clone(),
            discrete: r
                .disc
                .iter()
                .enumerate()
                .map(|(j, lev)| discrete_levels[j].iter().position(|l| l == lev).unwrap())
                .collect(),
        };
        match &covariates[i] {
            None => covariates[i] = Some(prof),
            Some(existing) if *existing != prof => {
                return Err(Error::InvalidData(format!(
                    "unit '{}' has covariates that change across periods",
                    r.unit
                )));
            }
            Some(_) => {}
        }
        let t = period_index[&r.time];
        if outcomes[i][t].is_some() {
            return Err(Error::UnbalancedPanel {
                unit: r.unit.clone(),
                period: r.time,
                count: 2,
            });
        }
        outcomes[i][t] = Some(r.y);
    }
    let mut final_outcomes = Vec::with_capacity(n);
    for (i, per_unit) in outcomes.into_iter().enumerate() {
        let mut ys = Vec::with_capacity(n_periods);
        for (t, y) in per_unit.into_iter().enumerate() {
            match y {
                Some(v) => ys.push(v),
                None => {
                    return Err(Error::UnbalancedPanel {
                        unit: unit_order[i].clone(),
                        period: period_values[t],
                        count: 0,
                    })
                }
            }
        }
        final_outcomes.push(ys);
    }

    PanelDataset::from_parts(
        unit_order,
        group,
        covariates.into_iter().map(|c| c.unwrap()).collect(),
        final_outcomes,
        group_labels,
        period_values,
        schema.continuous.clone(),
        schema.discrete.clone(),
        discrete_levels,
    )
}

/// Loads repeated cross-sections from CSV. Each row is one observation.
///
/// # Errors
/// As for [`load_panel_csv`], minus the balance checks.
pub fn load_rc_csv(path: &Path, schema: &RcSchema) -> Result<RepeatedCrossSection> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let group_col = find_column(&headers, &schema.group)?;
    let time_col = find_column(&headers, &schema.time)?;
    let y_col = find_column(&headers, &schema.y)?;
    let cont_cols: Vec<ColumnIndex> = schema
        .continuous
        .iter()
        .map(|n| find_column(&headers, n))
        .collect::<Result<_>>()?;
    let disc_cols: Vec<ColumnIndex> = schema
        .discrete
        .iter()
        .map(|n| find_column(&headers, n))
        .collect::<Result<_>>()?;

    let mut y = Vec::new();
    let mut group_raw: Vec<String> = Vec::new();
    let mut time_raw: Vec<i64> = Vec::new();
    let mut cont_raw: Vec<Vec<f64>> = Vec::new();
    let mut disc_raw: Vec<Vec<String>> = Vec::new();
    for (ridx, record) in reader.records().enumerate() {
        let record = record?;
        let row = ridx + 1;
        y.push(parse_f64(record.get(y_col.idx).unwrap_or(""), &y_col, row)?);
        group_raw.push(record.get(group_col.idx).unwrap_or("").to_string());
        time_raw.push(parse_i64(
            record.get(time_col.idx).unwrap_or(""),
            &time_col,
            row,
        )?);
        cont_raw.push(
            cont_cols
                .iter()
                .map(|c| parse_f64(record.get(c.idx).unwrap_or(""), c, row))
                .collect::<Result<_>>()?,
        );
        disc_raw.push(
            disc_cols
                .iter()
                .map(|c| record.get(c.idx).unwrap_or("").to_string())
                .collect(),
        );
    }
    if y.is_empty() {
        return Err(Error::InvalidData(format!(
            "no data rows in {}",
            path.display()
        )));
    }

    let period_set: BTreeSet<i64> = time_raw.iter().copied().collect();
    let period_values: Vec<i64> = period_set.into_iter().collect();
    let period_index: HashMap<i64, usize> = period_values
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let label_set: BTreeSet<String> = group_raw.iter().cloned().collect();
    let group_labels = order_groups(label_set, Some(&schema.treated_label))?;
    let group_index: HashMap<&String, usize> = group_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l, i + 1))
        .collect();
    let mut discrete_levels: Vec<Vec<String>> = disc_cols
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let set: BTreeSet<String> = disc_raw.iter().map(|r| r[j].clone()).collect();
            set.into_iter().collect()
        })
        .collect();
    for levels in &mut discrete_levels {
        sort_labels(levels);
    }

    let covariates = cont_raw
        .into_iter()
        .zip(disc_raw)
        .map(|(cont, disc)| CovariateProfile {
            continuous: cont,
            discrete: disc
                .iter()
                .enumerate()
                .map(|(j, lev)| discrete_levels[j].iter().position(|l| l == lev).unwrap())
                .collect(),
        })
        .collect();

    RepeatedCrossSection::from_parts(
        y,
        group_raw.iter().map(|l| group_index[l]).collect(),
        time_raw.iter().map(|t| period_index[t] + 1).collect(),
        covariates,
        group_labels,
        period_values,
        schema.continuous.clone(),
        schema.discrete.clone(),
        discrete_levels,
    )
}

/// Writes a panel back to CSV in the layout [`load_panel_csv`] expects
/// (unit-major, periods ascending). Floating-point values use the shortest
/// representation that round-trips exactly.
///
/// # Errors
/// I/O or CSV failures.
pub fn write_panel_csv(ds: &PanelDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "unit_id".to_string(),
        "group".to_string(),
        "time".to_string(),
        "y".to_string(),
    ];
    header.extend(ds.continuous_names.iter().cloned());
    header.extend(ds.discrete_names.iter().cloned());
    writer.write_record(&header)?;
    for i in 0..ds.n() {
        for t in 0..ds.n_periods {
            let mut record = vec![
                ds.unit_ids[i].clone(),
                ds.group_labels[ds.group[i] - 1].clone(),
                ds.period_values[t].to_string(),
                format!("{}", ds.outcomes[i][t]),
            ];
            for v in &ds.covariates[i].continuous {
                record.push(format!("{v}"));
            }
            for (j, &lev) in ds.covariates[i].discrete.iter().enumerate() {
                record.push(ds.discrete_levels[j][lev].clone());
            }
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Structural summary of a dataset, with non-fatal warnings. Hard failures
/// surface as errors at load or estimation time instead.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub n_groups: usize,
    pub n_periods: usize,
    pub group_sizes: Vec<usize>,
    /// Whether the synthetic-control weight system has at least as many
    /// pre-treatment periods as unknowns (𝒯 − 1 ≥ number of controls − 1).
    pub sc_identifiable: bool,
    pub warnings: Vec<String>,
}

/// Validates a panel, optionally against a staggered adoption design.
pub fn validate(ds: &PanelDataset, design: Option<&StaggeredDesign>) -> ValidationReport {
    let group_sizes = ds.group_sizes();
    let n_controls = ds.n_groups - 1;
    let sc_identifiable = ds.n_periods >= n_controls;
    let mut warnings = Vec::new();
    if !sc_identifiable {
        warnings.push(format!(
            "{} periods against {} control groups: synthetic-control weights are underidentified; only parallel-trends estimation is possible",
            ds.n_periods, n_controls
        ));
    }
    for (g, &size) in group_sizes.iter().enumerate() {
        if size > 0 && size < 10 {
            warnings.push(format!(
                "group '{}' has only {} unit(s); nuisance fits will be noisy",
                ds.group_labels[g], size
            ));
        }
        if size == 0 {
            warnings.push(format!("group '{}' has no units", ds.group_labels[g]));
        }
    }
    if !ds.discrete_names.is_empty() {
        let strata =
            crate::nuisance::strata_of(&ds.covariates, &ds.discrete_levels, &ds.discrete_names);
        for stratum in &strata {
            let mut present = vec![false; ds.n_groups];
            for &i in &stratum.members {
                present[ds.group[i] - 1] = true;
            }
            for (g, &p) in present.iter().enumerate() {
                if !p {
                    warnings.push(format!(
                        "group '{}' missing from stratum {{{}}}: conditional fits there will fail",
                        ds.group_labels[g], stratum.label
                    ));
                }
            }
        }
    }
    if let Some(design) = design {
        for g in 1..=ds.n_groups {
            if let Some(gamma) = design.gamma(g) {
                let donors = (1..=ds.n_groups)
                    .filter(|&h| h != g)
                    .filter(|&h| match design.gamma(h) {
                        None => true,
                        Some(gh) => gh > gamma,
                    })
                    .count();
                if donors == 0 {
                    warnings.push(format!(
                        "cohort '{}' (adopts at period index {gamma}) has no donor groups even at horizon 0",
                        ds.group_labels[g - 1]
                    ));
                } else if gamma < donors {
                    warnings.push(format!(
                        "cohort '{}' has {donors} donors but only {} pre-periods: synthetic-control weights underidentified; use parallel-trends mode or a shorter donor horizon",
                        ds.group_labels[g - 1],
                        gamma - 1
                    ));
                }
            }
        }
    }
    ValidationReport {
        n: ds.n(),
        n_groups: ds.n_groups,
        n_periods: ds.n_periods,
        group_sizes,
        sc_identifiable,
        warnings,
    }
}

/// Validates a repeated cross-section.
pub fn validate_rc(ds: &RepeatedCrossSection) -> ValidationReport {
    let mut group_sizes = vec![0usize; ds.n_groups];
    for &g in &ds.group {
        group_sizes[g - 1] += 1;
    }
    let n_controls = ds.n_groups - 1;
    let sc_identifiable = ds.n_periods >= n_controls;
    let mut warnings = Vec::new();
    if !sc_identifiable {
        warnings.push(format!(
            "{} periods against {} control groups: synthetic-control weights are underidentified; only parallel-trends estimation is possible",
            ds.n_periods, n_controls
        ));
    }
    let mut cell = vec![0usize; ds.n_groups * ds.n_periods];
    for i in 0..ds.n() {
        cell[(ds.group[i] - 1) * ds.n_periods + (ds.time[i] - 1)] += 1;
    }
    for g in 1..=ds.n_groups {
        for t in 1..=ds.n_periods {
            if cell[(g - 1) * ds.n_periods + (t - 1)] == 0 {
                warnings.push(format!(
                    "group '{}' has no rows in period {}: its outcome surface there cannot be fit",
                    ds.group_labels[g - 1],
                    ds.period_values[t - 1]
                ));
            }
        }
    }
    ValidationReport {
        n: ds.n(),
        n_groups: ds.n_groups,
        n_periods: ds.n_periods,
        group_sizes,
        sc_identifiable,
        warnings,
    }
}

/// Group-stratified fold assignment: `fold_of[i] ∈ 1..=n_folds` per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub n_folds: usize,
}

impl FoldAssignment {
    /// Indices assigned to `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    /// Indices outside `fold` (the training set for that fold).
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }
}

/// Assigns rows to `n_folds` folds, stratified by group so that every group
/// is spread as evenly as possible (sizes differing by at most one) across
/// folds. Deterministic in (`group_of`, `n_folds`, `seed`).
///
/// # Errors
/// `InvalidConfig` for fewer than two folds; `TooFewUnits` when a non-empty
/// group has fewer members than folds.
pub fn assign_folds_rows(
    group_of: &[usize],
    group_labels: &[String],
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "cross-fitting needs at least 2 folds, got {n_folds}"
        )));
    }
    let n_groups = group_labels.len();
    let mut fold_of = vec![0usize; group_of.len()];
    for g in 1..=n_groups {
        let mut members: Vec<usize> = (0..group_of.len()).filter(|&i| group_of[i] == g).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < n_folds {
            return Err(Error::TooFewUnits {
                group: group_labels[g - 1].clone(),
                count: members.len(),
                folds: n_folds,
            });
        }
        // Salted by the group's label (not its index) so relabeling or
        // reordering groups never reshuffles another group's folds.
        let salt = fnv1a64(group_labels[g - 1].as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt, 0xF01D));
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = (j % n_folds) + 1;
        }
    }
    Ok(FoldAssignment { fold_of, n_folds })
}

/// Fold assignment for a panel (one fold per unit).
pub fn assign_folds(ds: &PanelDataset, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    assign_folds_rows(&ds.group, &ds.group_labels, n_folds, seed)
}

/// Fold assignment for repeated cross-sections (one fold per row, stratified
/// by group only; period composition is left to sampling).
pub fn assign_folds_rc(
    ds: &RepeatedCrossSection,
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    assign_folds_rows(&ds.group, &ds.group_labels, n_folds, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    fn write_temp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().expect("temp file");
        f.write_all(content.as_bytes()).expect("write");
        f.flush().expect("flush");
        f
    }

    const SMALL_PANEL: &str = "\
unit_id,group,time,y,x
u1,T,2000,1.0,0.3
u1,T,2001,2.5,0.3
u2,C,2000,0.5,0.7
u2,C,2001,0.75,0.7
";

    #[test]
    fn loads_small_panel_with_internal_indexing() {
        let f = write_temp_csv(SMALL_PANEL);
        let schema = PanelSchema::new("T").with_continuous(&["x"]);
        let ds = load_panel_csv(f.path(), &schema).expect("load");
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.n_groups, 2);
        assert_eq!(ds.n_periods, 2);
        assert_eq!(ds.group_labels, vec!["T".to_string(), "C".to_string()]);
        assert_eq!(ds.period_values, vec![2000, 2001]);
        assert_eq!(ds.group, vec![1, 2]);
        assert_eq!(ds.outcomes[0], vec![1.0, 2.5]);
        assert_eq!(ds.covariates[1].continuous, vec![0.7]);
        assert_eq!(ds.delta_y(0), 1.5);
        assert_eq!(ds.delta_y(1), 0.25);
        assert!(!ds.is_covariate_free());
    }

    #[test]
    fn missing_column_is_reported_by_name() {
        let f = write_temp_csv(SMALL_PANEL);
        let schema = PanelSchema::new("T").with_continuous(&["wage"]);
        match load_panel_csv(f.path(), &schema) {
            Err(Error::MissingColumn(name)) => assert_eq!(name, "wage"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn unknown_treated_label_is_rejected() {
        let f = write_temp_csv(SMALL_PANEL);
        let schema = PanelSchema::new("Z");
        match load_panel_csv(f.path(), &schema) {
            Err(Error::UnknownGroupLabel(name)) => assert_eq!(name, "Z"),
            other => panic!("expected UnknownGroupLabel, got {other:?}"),
        }
    }

    #[test]
    fn unbalanced_panel_names_unit_and_period() {
        let unbalanced = "\
unit_id,group,time,y
u1,T,2000,1.0
u1,T,2001,2.0
u2,C,2000,0.5
";
        let f = write_temp_csv(unbalanced);
        match load_panel_csv(f.path(), &PanelSchema::new("T")) {
            Err(Error::UnbalancedPanel {
                unit,
                period,
                count,
            }) => {
                assert_eq!(unit, "u2");
                assert_eq!(period, 2001);
                assert_eq!(count, 0);
            }
            other => panic!("expected UnbalancedPanel, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_unit_period_rows_are_rejected() {
        let dup = "\
unit_id,group,time,y
u1,T,2000,1.0
u1,T,2000,1.5
u1,T,2001,2.0
u2,C,2000,0.5
u2,C,2001,0.6
";
        let f = write_temp_csv(dup);
        match load_panel_csv(f.path(), &PanelSchema::new("T")) {
            Err(Error::UnbalancedPanel {
                unit,
                period,
                count,
            }) => {
                assert_eq!(unit, "u1");
                assert_eq!(period, 2000);
                assert_eq!(count, 2);
            }
            other => panic!("expected UnbalancedPanel, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_outcome_names_column_and_row() {
        let bad = "\
unit_id,group,time,y
u1,T,2000,one
u1,T,2001,2.0
";
        let f = write_temp_csv(bad);
        match load_panel_csv(f.path(), &PanelSchema::new("T")) {
            Err(Error::NonNumericValue { column, value, row }) => {
                assert_eq!(column, "y");
                assert_eq!(value, "one");
                assert_eq!(row, 1);
            }
            other => panic!("expected NonNumericValue, got {other:?}"),
        }
    }

    #[test]
    fn control_labels_sort_numerically_after_treated() {
        let csv = "\
unit_id,group,time,y
a,10,1,0
a,10,2,0
b,9,1,0
b,9,2,0
c,2,1,0
c,2,2,0
";
        let f = write_temp_csv(csv);
        let ds = load_panel_csv(f.path(), &PanelSchema::new("9")).expect("load");
        assert_eq!(
            ds.group_labels,
            vec!["9".to_string(), "2".to_string(), "10".to_string()]
        );
    }

    #[test]
    fn panel_roundtrips_through_csv() {
        let ds = PanelDataset::from_parts(
            vec!["u1".into(), "u2".into(), "u3".into()],
            vec![1, 2, 2],
            vec![
                CovariateProfile {
                    continuous: vec![0.125],
                    discrete: vec![1],
                },
                CovariateProfile {
                    continuous: vec![std::f64::consts::PI],
                    discrete: vec![0],
                },
                CovariateProfile {
                    continuous: vec![-3.5e-7],
                    discrete: vec![1],
                },
            ],
            vec![
                vec![1.0, 2.0, 3.0],
                vec![0.1, 0.2, 0.30000000000000004],
                vec![-1.0, -2.0, -4.0],
            ],
            vec!["T".into(), "C".into()],
            vec![5, 6, 7],
            vec!["x".into()],
            vec!["d".into()],
            vec![vec!["a".into(), "b".into()]],
        )
        .expect("build");
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("panel.csv");
        write_panel_csv(&ds, &path).expect("write");
        let schema = PanelSchema::new("T")
            .with_continuous(&["x"])
            .with_discrete(&["d"]);
        let reloaded = load_panel_csv(&path, &schema).expect("reload");
        assert_eq!(ds, reloaded, "CSV round-trip must be lossless");
    }

    #[test]
    fn rc_loader_indexes_groups_and_periods() {
        let csv = "\
group,time,y,x
B,1,0.5,0.1
A,2,1.5,0.9
A,1,1.0,0.4
B,2,0.7,0.6
";
        let f = write_temp_csv(csv);
        let schema = RcSchema::new("A").with_continuous(&["x"]);
        let ds = load_rc_csv(f.path(), &schema).expect("load");
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.group_labels, vec!["A".to_string(), "B".to_string()]);
        assert_eq!(ds.group, vec![2, 1, 1, 2]);
        assert_eq!(ds.time, vec![1, 2, 1, 2]);
    }

    #[test]
    fn staggered_design_maps_labels_to_period_indices() {
        let f = write_temp_csv(SMALL_PANEL);
        let ds =
            load_panel_csv(f.path(), &PanelSchema::new("T").with_continuous(&["x"])).expect("load");
        let mut map = BTreeMap::new();
        map.insert("T".to_string(), Some(2001));
        map.insert("C".to_string(), None);
        let design = StaggeredDesign::from_labels(&ds, &map).expect("design");
        assert_eq!(design.gamma(1), Some(2));
        assert_eq!(design.gamma(2), None);
    }

    #[test]
    fn staggered_design_rejects_unmapped_and_unknown_groups() {
        let f = write_temp_csv(SMALL_PANEL);
        let ds =
            load_panel_csv(f.path(), &PanelSchema::new("T").with_continuous(&["x"])).expect("load");
        let mut missing = BTreeMap::new();
        missing.insert("T".to_string(), Some(2001));
        assert!(matches!(
            StaggeredDesign::from_labels(&ds, &missing),
            Err(Error::InvalidConfig(_))
        ));
        let mut unknown = BTreeMap::new();
        unknown.insert("T".to_string(), Some(2001));
        unknown.insert("C".to_string(), None);
        unknown.insert("Q".to_string(), None);
        assert!(matches!(
            StaggeredDesign::from_labels(&ds, &unknown),
            Err(Error::UnknownGroupLabel(_))
        ));
    }

    #[test]
    fn staggered_design_needs_pre_period_and_a_treated_cohort() {
        assert!(matches!(
            StaggeredDesign::new(vec![Some(1), None], 4),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            StaggeredDesign::new(vec![None, None], 4),
            Err(Error::InvalidConfig(_))
        ));
        assert!(StaggeredDesign::new(vec![Some(2), None], 4).is_ok());
    }

    #[test]
    fn validate_flags_underidentified_weight_systems() {
        let ds = PanelDataset::from_parts(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![1, 2, 3, 4],
            vec![CovariateProfile::empty(); 4],
            vec![vec![0.0, 1.0]; 4],
            vec!["1".into(), "2".into(), "3".into(), "4".into()],
            vec![1, 2],
            vec![],
            vec![],
            vec![],
        )
        .expect("build");
        let report = validate(&ds, None);
        assert!(!report.sc_identifiable);
        assert!(report
            .warnings
            .iter()
            .any(|w| w.contains("underidentified")));
    }

    #[test]
    fn fold_assignment_is_deterministic_and_group_balanced() {
        let group: Vec<usize> = (0..40).map(|i| (i % 3) + 1).collect();
        let labels = vec!["1".to_string(), "2".to_string(), "3".to_string()];
        let a = assign_folds_rows(&group, &labels, 2, 9).expect("folds");
        let b = assign_folds_rows(&group, &labels, 2, 9).expect("folds");
        assert_eq!(a, b, "same inputs must give the same folds");
        let c = assign_folds_rows(&group, &labels, 2, 10).expect("folds");
        assert_ne!(a, c, "a different seed should reshuffle (40 units)");
        for g in 1..=3 {
            let in_fold1 = (0..group.len())
                .filter(|&i| group[i] == g && a.fold_of[i] == 1)
                .count();
            let total = group.iter().filter(|&&x| x == g).count();
            let in_fold2 = total - in_fold1;
            assert!(
                in_fold1.abs_diff(in_fold2) <= 1,
                "group {g} split {in_fold1}/{in_fold2} is not balanced"
            );
        }
    }

    #[test]
    fn fold_assignment_rejects_tiny_groups() {
        let group = vec![1, 1, 1, 2];
        let labels = vec!["T".to_string(), "C".to_string()];
        match assign_folds_rows(&group, &labels, 2, 0) {
            Err(Error::TooFewUnits {
                group,
                count,
                folds,
            }) => {
                assert_eq!(group, "C");
                assert_eq!(count, 1);
                assert_eq!(folds, 2);
            }
            other => panic!("expected TooFewUnits, got {other:?}"),
        }
    }

    proptest! {
        /// Every unit lands in exactly one fold, folds are 1..=L, and within
        /// each group the fold sizes differ by at most one.
        #[test]
        fn folds_partition_and_balance(
            sizes in proptest::collection::vec(2usize..20, 2..5),
            l in 2usize..5,
            seed in any::<u64>(),
        ) {
            let max_fold = l.min(sizes.iter().copied().min().unwrap());
            let mut group = Vec::new();
            for (g, &s) in sizes.iter().enumerate() {
                group.extend(std::iter::repeat_n(g + 1, s));
            }
            let labels: Vec<String> = (1..=sizes.len()).map(|g| g.to_string()).collect();
            let assignment = assign_folds_rows(&group, &labels, max_fold, seed).unwrap();
            prop_assert_eq!(assignment.fold_of.len(), group.len());
            for g in 1..=sizes.len() {
                let mut counts = vec![0usize; max_fold];
                for (&gi, &f) in group.iter().zip(&assignment.fold_of) {
                    if gi == g {
                        prop_assert!(f >= 1 && f <= max_fold);
                        counts[f - 1] += 1;
                    }
                }
                let max = counts.iter().copied().max().unwrap();
                let min = counts.iter().copied().min().unwrap();
                prop_assert!(max - min <= 1, "group {} fold sizes {:?}", g, counts);
            }
        }
    }
}
