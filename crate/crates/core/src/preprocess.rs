//! Encoding, scaling, variation features, macro enrichment, and
//! materialization of the M1/M2/M3 feature sets into a dense matrix.
//!
//! All specs are fitted on the training split only and applied unchanged to
//! anything scored later.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{
    ColumnKind, ColumnSchema, PeriodIndex, SupervisedRow, Value, CAMELS_COLUMNS,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Cap for relative-change features: (0 -> nonzero) maps to +-CAP and all
/// variations are clipped into [-CAP, CAP].
pub const VARIATION_CAP: f64 = 10.0;

/// Token used for the extra one-hot slot that absorbs categories unseen at
/// fit time.
pub const UNKNOWN_TOKEN: &str = "__unknown__";

pub const N_MACRO_FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureVariant {
    M1,
    M2,
    M3,
}

impl FeatureVariant {
    pub fn includes_variations(self) -> bool {
        !matches!(self, FeatureVariant::M1)
    }

    pub fn includes_camels(self) -> bool {
        matches!(self, FeatureVariant::M3)
    }
}

impl std::str::FromStr for FeatureVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(FeatureVariant::M1),
            "M2" | "m2" => Ok(FeatureVariant::M2),
            "M3" | "m3" => Ok(FeatureVariant::M3),
            _ => Err(Error::Config(format!("unknown feature variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    Standardize,
    MinMax,
    LogNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputationPolicy {
    #[default]
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetConfig {
    pub variant: FeatureVariant,
    pub scaler: ScalerKind,
    #[serde(default = "default_cap")]
    pub cap: f64,
    #[serde(default)]
    pub imputation: ImputationPolicy,
}

fn default_cap() -> f64 {
    VARIATION_CAP
}

impl FeatureSetConfig {
    pub fn new(variant: FeatureVariant, scaler: ScalerKind) -> Self {
        FeatureSetConfig {
            variant,
            scaler,
            cap: VARIATION_CAP,
            imputation: ImputationPolicy::Median,
        }
    }
}

/// Ordered category list for one categorical column, learned from training
/// data. Encoding width is `categories.len() + 1`; the last slot is the
/// unknown slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderColumn {
    pub name: String,
    pub categories: Vec<String>,
}

impl EncoderColumn {
    pub fn width(&self) -> usize {
        self.categories.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub columns: Vec<EncoderColumn>,
}

impl EncoderSpec {
    pub fn column(&self, name: &str) -> Option<&EncoderColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Total encoding width over all categorical columns.
    pub fn width(&self) -> usize {
        self.columns.iter().map(|c| c.width()).sum()
    }
}

/// Learns the category list of every categorical input column from the
/// rows' lagged values (all lags pooled). Lists are sorted and
/// duplicate-free; values unseen at fit time later map to the unknown slot.
pub fn fit_encoder(rows: &[SupervisedRow], schema: &ColumnSchema) -> Result<EncoderSpec> {
    if rows.is_empty() {
        return Err(Error::Fit("cannot fit encoder on zero rows".into()));
    }
    let mut columns = Vec::new();
    for (slot, col) in schema.input_columns().enumerate() {
        if col.kind != ColumnKind::Categorical {
            continue;
        }
        let mut observed = std::collections::BTreeSet::new();
        for row in rows {
            for lag in &row.lags {
                if let Value::Category(tok) = &lag[slot] {
                    observed.insert(tok.clone());
                }
            }
        }
        if observed.is_empty() {
            return Err(Error::Fit(format!(
                "categorical column `{}` has no observed values",
                col.name
            )));
        }
        columns.push(EncoderColumn {
            name: col.name.clone(),
            categories: observed.into_iter().collect(),
        });
    }
    Ok(EncoderSpec { columns })
}

/// Encodes one categorical value as a one-hot group. Returns the group and
/// whether the value was missing (all-zero group, recorded for imputation
/// counters).
pub fn encode_category(col: &EncoderColumn, value: &Value) -> (Vec<f64>, bool) {
    let mut group = vec![0.0; col.width()];
    match value {
        Value::Missing => return (group, true),
        Value::Category(tok) => match col.categories.iter().position(|c| c == tok) {
            Some(i) => group[i] = 1.0,
            None => *group.last_mut().unwrap() = 1.0,
        },
        Value::Number(x) => {
            // Numeric token in a categorical column: match on its rendering.
            let tok = format!("{x}");
            match col.categories.iter().position(|c| *c == tok) {
                Some(i) => group[i] = 1.0,
                None => *group.last_mut().unwrap() = 1.0,
            }
        }
    }
    (group, false)
}

/// Replaces the categorical slots of raw value rows by one-hot groups,
/// passing numeric slots through. Returns row-major encoded rows.
pub fn apply_encoding(
    spec: &EncoderSpec,
    schema: &ColumnSchema,
    rows: &[Vec<Value>],
) -> Result<Matrix> {
    let cols: Vec<_> = schema.input_columns().collect();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != cols.len() {
            return Err(Error::Structural(format!(
                "row has {} values, schema expects {}",
                row.len(),
                cols.len()
            )));
        }
        let mut enc = Vec::new();
        for (col, value) in cols.iter().zip(row) {
            if col.kind == ColumnKind::Categorical {
                let spec_col = spec.column(&col.name).ok_or_else(|| {
                    Error::Structural(format!("column `{}` absent from encoder spec", col.name))
                })?;
                enc.extend(encode_category(spec_col, value).0);
            } else {
                enc.push(value.as_number().unwrap_or(f64::NAN));
            }
        }
        out.push(enc);
    }
    Ok(Matrix::from_rows(&out))
}

/// Per-column fitted statistics: (mean, stddev) for standardize,
/// (min, max) for minmax; empty for the stateless lognormal transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerSpec {
    pub kind: ScalerKind,
    pub stats: Vec<(f64, f64)>,
}

/// Fits scaler statistics on a numeric-columns-only training matrix.
/// Stddev is the population stddev. A constant column under minmax is
/// recorded as (v, v) and maps to 0 at apply time.
pub fn fit_scaler(matrix: &Matrix, kind: ScalerKind) -> Result<ScalerSpec> {
    let n = matrix.n_rows();
    if matches!(kind, ScalerKind::Standardize | ScalerKind::MinMax) && n < 2 {
        return Err(Error::Fit(format!(
            "scaler needs at least 2 rows, got {n}"
        )));
    }
    let mut stats = Vec::new();
    if kind != ScalerKind::LogNormal {
        for j in 0..matrix.n_cols {
            let col = (0..n).map(|i| matrix.get(i, j));
            stats.push(match kind {
                ScalerKind::Standardize => {
                    let mean = col.clone().sum::<f64>() / n as f64;
                    let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    (mean, var.sqrt())
                }
                ScalerKind::MinMax => {
                    let min = col.clone().fold(f64::INFINITY, f64::min);
                    let max = col.fold(f64::NEG_INFINITY, f64::max);
                    (min, max)
                }
                ScalerKind::LogNormal => unreachable!(),
            });
        }
    }
    Ok(ScalerSpec { kind, stats })
}

/// Signed log transform: sign(x) * ln(1 + |x|). Odd, strictly monotone,
/// defined everywhere.
pub fn lognormal_transform(x: f64) -> f64 {
    x.signum() * (1.0 + x.abs()).ln()
}

pub fn scale_value(spec: &ScalerSpec, column: usize, x: f64) -> f64 {
    match spec.kind {
        ScalerKind::Standardize => {
            let (mean, std) = spec.stats[column];
            if std == 0.0 {
                0.0
            } else {
                (x - mean) / std
            }
        }
        ScalerKind::MinMax => {
            let (min, max) = spec.stats[column];
            if max == min {
                0.0
            } else {
                ((x - min) / (max - min)).clamp(-0.5, 1.5)
            }
        }
        ScalerKind::LogNormal => lognormal_transform(x),
    }
}

/// Applies fitted scaling to a numeric-columns-only matrix in place.
pub fn apply_scaler(spec: &ScalerSpec, matrix: &mut Matrix) -> Result<()> {
    if spec.kind != ScalerKind::LogNormal && spec.stats.len() != matrix.n_cols {
        return Err(Error::Structural(format!(
            "scaler fitted on {} columns, matrix has {}",
            spec.stats.len(),
            matrix.n_cols
        )));
    }
    let n_cols = matrix.n_cols;
    for i in 0..matrix.n_rows() {
        let row = matrix.row_mut(i);
        for j in 0..n_cols {
            row[j] = scale_value(spec, j, row[j]);
        }
    }
    Ok(())
}

/// Relative change from `a` to `b` with the zero-guard and cap rules.
pub fn relative_change(a: f64, b: f64, cap: f64) -> f64 {
    let raw = if a != 0.0 {
        (b - a) / a.abs()
    } else if b == 0.0 {
        0.0
    } else {
        b.signum() * cap
    };
    raw.clamp(-cap, cap)
}

/// Appends variation-between-periods features to each row: for every
/// derived variation column of the schema, the relative change over
/// (t-3 -> t-2) and (t-2 -> t-1). Missing operands yield NaN (imputed at
/// materialization).
pub fn compute_variations(
    rows: &mut [SupervisedRow],
    schema: &ColumnSchema,
    cap: f64,
) -> Result<()> {
    let mut bases = Vec::new();
    for (col, base) in schema.variation_columns() {
        let slot = schema.input_index(base).ok_or_else(|| {
            Error::Config(format!(
                "variation column `{}` names unknown base `{base}`",
                col.name
            ))
        })?;
        bases.push(slot);
    }
    for row in rows {
        let w = row.lags.len();
        row.variations.clear();
        for &slot in &bases {
            for k in 1..w {
                let a = row.lags[k - 1][slot].as_number();
                let b = row.lags[k][slot].as_number();
                row.variations.push(match (a, b) {
                    (Some(a), Some(b)) => relative_change(a, b, cap),
                    _ => f64::NAN,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroRecord {
    pub cpi: f64,
    pub unemployment_rate: f64,
    pub gdp: f64,
}

/// Per-period macroeconomic indicators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroTable {
    pub entries: BTreeMap<PeriodIndex, MacroRecord>,
}

impl MacroTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        let mut entries = BTreeMap::new();
        for result in rdr.deserialize::<(String, f64, f64, f64)>() {
            let (period, cpi, unemployment_rate, gdp) = result?;
            entries.insert(
                crate::domain::parse_period(&period)?,
                MacroRecord {
                    cpi,
                    unemployment_rate,
                    gdp,
                },
            );
        }
        Ok(MacroTable { entries })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        wtr.write_record(["period", "cpi", "unemployment_rate", "gdp"])?;
        for (period, rec) in &self.entries {
            wtr.write_record(&[
                period.to_string(),
                rec.cpi.to_string(),
                rec.unemployment_rate.to_string(),
                rec.gdp.to_string(),
            ])?;
        }
        wtr.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Joins CPI, unemployment rate and GDP for each lag period, in
/// (indicator, lag) order: cpi for lags t-3..t-1, then unemployment, then
/// GDP. Errors if any lag period is absent from the table.
pub fn enrich_macro(rows: &mut [SupervisedRow], table: &MacroTable) -> Result<()> {
    let mut missing = std::collections::BTreeSet::new();
    for row in rows.iter() {
        for p in row.lag_periods() {
            if !table.entries.contains_key(&p) {
                missing.insert(p);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingMacroPeriods(
            missing.iter().map(|p| p.to_string()).collect(),
        ));
    }
    for row in rows.iter_mut() {
        let recs: Vec<&MacroRecord> = row
            .lag_periods()
            .iter()
            .map(|p| &table.entries[p])
            .collect();
        row.macro_features.clear();
        row.macro_features.extend(recs.iter().map(|r| r.cpi));
        row.macro_features
            .extend(recs.iter().map(|r| r.unemployment_rate));
        row.macro_features.extend(recs.iter().map(|r| r.gdp));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnRole {
    /// Member of a one-hot group; never scaled.
    OneHot { group: usize, category: String },
    /// Plain numeric feature; scaled and median-imputed.
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestColumn {
    pub name: String,
    /// Source column of the panel schema (or indicator name for macro).
    pub source: String,
    /// Lag distance in periods (3 = oldest), None for variation/derived.
    pub lag: Option<usize>,
    pub role: ColumnRole,
}

/// Maps every matrix column back to its named source feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: FeatureVariant,
    pub columns: Vec<ManifestColumn>,
    /// Count of base variables before lag-tripling.
    pub n_base_variables: usize,
}

impl Manifest {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Contiguous (start, end) ranges of the one-hot groups.
    pub fn onehot_groups(&self) -> Vec<(usize, usize)> {
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut current: Option<(usize, usize, usize)> = None; // (group, start, end)
        for (j, col) in self.columns.iter().enumerate() {
            match (&col.role, &mut current) {
                (ColumnRole::OneHot { group, .. }, Some((g, _, end))) if group == g => {
                    *end = j + 1;
                }
                (ColumnRole::OneHot { group, .. }, _) => {
                    if let Some((_, s, e)) = current.take() {
                        groups.push((s, e));
                    }
                    current = Some((*group, j, j + 1));
                }
                (ColumnRole::Numeric, _) => {
                    if let Some((_, s, e)) = current.take() {
                        groups.push((s, e));
                    }
                }
            }
        }
        if let Some((_, s, e)) = current {
            groups.push((s, e));
        }
        groups
    }

    pub fn numeric_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == ColumnRole::Numeric)
            .map(|(j, _)| j)
            .collect()
    }
}

fn build_manifest(
    schema: &ColumnSchema,
    encoder: &EncoderSpec,
    variant: FeatureVariant,
    window: usize,
) -> Manifest {
    let mut columns = Vec::new();
    let mut group = 0usize;
    let camels: std::collections::BTreeSet<&str> = CAMELS_COLUMNS.into_iter().collect();
    let mut push_lagged = |columns: &mut Vec<ManifestColumn>, names: &[&crate::domain::ColumnDef]| {
        for k in 0..window {
            let lag = window - k; // lag distance: k=0 is t-window
            for col in names {
                if col.kind == ColumnKind::Categorical {
                    let spec_col = encoder.column(&col.name).expect("encoder covers schema");
                    for cat in spec_col
                        .categories
                        .iter()
                        .map(|c| c.as_str())
                        .chain([UNKNOWN_TOKEN])
                    {
                        columns.push(ManifestColumn {
                            name: format!("{}_lag{lag}={cat}", col.name),
                            source: col.name.clone(),
                            lag: Some(lag),
                            role: ColumnRole::OneHot {
                                group,
                                category: cat.to_string(),
                            },
                        });
                    }
                    group += 1;
                } else {
                    columns.push(ManifestColumn {
                        name: format!("{}_lag{lag}", col.name),
                        source: col.name.clone(),
                        lag: Some(lag),
                        role: ColumnRole::Numeric,
                    });
                }
            }
        }
    };

    let base: Vec<_> = schema
        .input_columns()
        .filter(|c| !camels.contains(c.name.as_str()))
        .collect();
    push_lagged(&mut columns, &base);

    let mut n_base_variables = base.len();
    if variant.includes_variations() {
        for (col, _) in schema.variation_columns() {
            for k in 1..window {
                let lag = window - k; // change into period t-lag
                columns.push(ManifestColumn {
                    name: format!("{}_lag{lag}", col.name),
                    source: col.name.clone(),
                    lag: None,
                    role: ColumnRole::Numeric,
                });
            }
        }
        n_base_variables += schema.variation_columns().count();
    }
    if variant.includes_camels() {
        let camel_cols: Vec<_> = schema
            .input_columns()
            .filter(|c| camels.contains(c.name.as_str()))
            .collect();
        push_lagged(&mut columns, &camel_cols);
        n_base_variables += camel_cols.len();
        for indicator in ["cpi", "unemployment_rate", "gdp"] {
            for k in 0..window {
                let lag = window - k;
                columns.push(ManifestColumn {
                    name: format!("{indicator}_lag{lag}"),
                    source: indicator.to_string(),
                    lag: Some(lag),
                    role: ColumnRole::Numeric,
                });
            }
        }
        n_base_variables += 3;
    }
    Manifest {
        variant,
        columns,
        n_base_variables,
    }
}

/// Everything needed to turn supervised rows into a feature matrix:
/// encoder, raw-space imputation medians, and the fitted scaler. Immutable
/// once fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpecs {
    pub config: FeatureSetConfig,
    pub encoder: EncoderSpec,
    pub scaler: ScalerSpec,
    /// Raw-space training medians for the manifest's numeric columns, in
    /// numeric-column order.
    pub medians: Vec<f64>,
    pub manifest: Manifest,
}

/// The materialized feature matrix with its provenance manifest, aligned
/// targets and row keys.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub keys: Vec<(String, PeriodIndex)>,
    pub manifest: Manifest,
    /// Per-column count of imputed cells (median fills and all-zero one-hot
    /// groups).
    pub imputed_counts: Vec<usize>,
}

/// Assembles the raw (unscaled, NaN-for-missing) matrix for a manifest.
fn assemble_raw(
    rows: &[SupervisedRow],
    schema: &ColumnSchema,
    encoder: &EncoderSpec,
    manifest: &Manifest,
) -> Result<(Matrix, Vec<usize>)> {
    let window = rows.first().map_or(3, |r| r.lags.len());
    let camels: std::collections::BTreeSet<&str> = CAMELS_COLUMNS.into_iter().collect();
    let variant = manifest.variant;
    let n_variations = schema.variation_columns().count() * (window - 1);

    let mut matrix = Matrix {
        data: Vec::with_capacity(rows.len() * manifest.n_cols()),
        n_cols: manifest.n_cols(),
    };
    let mut imputed = vec![0usize; manifest.n_cols()];
    let base_slots: Vec<(usize, &crate::domain::ColumnDef)> = schema
        .input_columns()
        .enumerate()
        .filter(|(_, c)| !camels.contains(c.name.as_str()))
        .collect();
    let camel_slots: Vec<(usize, &crate::domain::ColumnDef)> = schema
        .input_columns()
        .enumerate()
        .filter(|(_, c)| camels.contains(c.name.as_str()))
        .collect();

    let mut buf: Vec<f64> = Vec::with_capacity(manifest.n_cols());
    for row in rows {
        buf.clear();
        if row.lags.len() != window {
            return Err(Error::Structural("inconsistent window length".into()));
        }
        let emit_lagged = |buf: &mut Vec<f64>,
                               imputed: &mut Vec<usize>,
                               slots: &[(usize, &crate::domain::ColumnDef)]|
         -> Result<()> {
            for lag_values in &row.lags {
                for (slot, col) in slots {
                    let value = &lag_values[*slot];
                    if col.kind == ColumnKind::Categorical {
                        let spec_col = encoder.column(&col.name).ok_or_else(|| {
                            Error::Structural(format!(
                                "column `{}` absent from encoder spec",
                                col.name
                            ))
                        })?;
                        let (group, missing) = encode_category(spec_col, value);
                        if missing {
                            let start = buf.len();
                            for j in start..start + group.len() {
                                imputed[j] += 1;
                            }
                        }
                        buf.extend(group);
                    } else {
                        buf.push(value.as_number().unwrap_or(f64::NAN));
                    }
                }
            }
            Ok(())
        };
        emit_lagged(&mut buf, &mut imputed, &base_slots)?;
        if variant.includes_variations() {
            if row.variations.len() != n_variations {
                return Err(Error::Config(format!(
                    "{:?} requires computed variation features ({} expected, {} present)",
                    variant,
                    n_variations,
                    row.variations.len()
                )));
            }
            buf.extend(&row.variations);
        }
        if variant.includes_camels() {
            emit_lagged(&mut buf, &mut imputed, &camel_slots)?;
            if row.macro_features.len() != N_MACRO_FEATURES {
                return Err(Error::Config(format!(
                    "M3 requires macro enrichment ({N_MACRO_FEATURES} features, {} present)",
                    row.macro_features.len()
                )));
            }
            buf.extend(&row.macro_features);
        }
        if buf.len() != manifest.n_cols() {
            return Err(Error::Structural(format!(
                "assembled {} columns, manifest has {}",
                buf.len(),
                manifest.n_cols()
            )));
        }
        matrix.push_row(&buf);
    }
    Ok((matrix, imputed))
}

fn column_median(values: &mut Vec<f64>) -> f64 {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits encoder, imputation medians and scaler on training rows.
pub fn fit_preprocess(
    rows: &[SupervisedRow],
    schema: &ColumnSchema,
    config: FeatureSetConfig,
) -> Result<PreprocessSpecs> {
    if rows.is_empty() {
        return Err(Error::Fit("cannot fit preprocessing on zero rows".into()));
    }
    let window = rows[0].lags.len();
    let encoder = fit_encoder(rows, schema)?;
    let manifest = build_manifest(schema, &encoder, config.variant, window);
    let (raw, _) = assemble_raw(rows, schema, &encoder, &manifest)?;
    let numeric = manifest.numeric_columns();

    let mut medians = Vec::with_capacity(numeric.len());
    for &j in &numeric {
        let mut col: Vec<f64> = (0..raw.n_rows()).map(|i| raw.get(i, j)).collect();
        medians.push(column_median(&mut col));
    }

    // Imputed numeric submatrix for scaler fitting.
    let mut sub = Matrix::zeros(raw.n_rows(), numeric.len());
    for i in 0..raw.n_rows() {
        for (jj, &j) in numeric.iter().enumerate() {
            let v = raw.get(i, j);
            sub.set(i, jj, if v.is_finite() { v } else { medians[jj] });
        }
    }
    let scaler = fit_scaler(&sub, config.scaler)?;

    Ok(PreprocessSpecs {
        config,
        encoder,
        scaler,
        medians,
        manifest,
    })
}

/// Materializes rows into the feature matrix using fitted specs: one-hot
/// encoding, median imputation of remaining missing numerics, then
/// scaling. The manifest records the provenance of every column.
pub fn materialize(
    rows: &[SupervisedRow],
    specs: &PreprocessSpecs,
    schema: &ColumnSchema,
) -> Result<FeatureMatrix> {
    let (mut raw, mut imputed) = assemble_raw(rows, schema, &specs.encoder, &specs.manifest)?;
    let numeric = specs.manifest.numeric_columns();
    if specs.medians.len() != numeric.len() {
        return Err(Error::Structural(
            "imputation medians do not match manifest".into(),
        ));
    }
    for i in 0..raw.n_rows() {
        for (jj, &j) in numeric.iter().enumerate() {
            let v = raw.get(i, j);
            if !v.is_finite() {
                raw.set(i, j, specs.medians[jj]);
                imputed[j] += 1;
            } else {
                raw.set(i, j, scale_value(&specs.scaler, jj, v));
                continue;
            }
            let m = raw.get(i, j);
            raw.set(i, j, scale_value(&specs.scaler, jj, m));
        }
    }
    Ok(FeatureMatrix {
        x: raw,
        y: rows.iter().map(|r| r.target).collect(),
        keys: rows
            .iter()
            .map(|r| (r.entity_id.clone(), r.target_period))
            .collect(),
        manifest: specs.manifest.clone(),
        imputed_counts: imputed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        filing_schema, ColumnDef, ColumnSchema, PeriodIndex, SupervisedRow, Value,
    };
    use proptest::prelude::*;

    fn mini_schema() -> ColumnSchema {
        ColumnSchema::new(vec![
            ColumnDef {
                name: "entity_id".into(),
                kind: ColumnKind::Identifier,
                categories: None,
                nullable: false,
                derived_from: None,
            },
            ColumnDef {
                name: "period".into(),
                kind: ColumnKind::Period,
                categories: None,
                nullable: false,
                derived_from: None,
            },
            ColumnDef {
                name: "legal_nature".into(),
                kind: ColumnKind::Categorical,
                categories: None,
                nullable: true,
                derived_from: None,
            },
            ColumnDef {
                name: "assets".into(),
                kind: ColumnKind::Continuous,
                categories: None,
                nullable: true,
                derived_from: None,
            },
            ColumnDef {
                name: "variation_assets".into(),
                kind: ColumnKind::Continuous,
                categories: None,
                nullable: true,
                derived_from: Some("assets".into()),
            },
            ColumnDef {
                name: "risk_weighting".into(),
                kind: ColumnKind::Target,
                categories: None,
                nullable: true,
                derived_from: None,
            },
        ])
        .unwrap()
    }

    fn row(entity: &str, cat: &str, assets: [f64; 3], target: u8) -> SupervisedRow {
        SupervisedRow {
            entity_id: entity.into(),
            target_period: PeriodIndex(4035),
            lags: assets
                .iter()
                .map(|&a| vec![Value::Category(cat.into()), Value::Number(a)])
                .collect(),
            variations: Vec::new(),
            macro_features: Vec::new(),
            target,
        }
    }

    #[test]
    fn encoder_learns_sorted_distinct_categories() {
        let schema = mini_schema();
        let rows = vec![
            row("a", "fund", [1.0, 2.0, 3.0], 2),
            row("b", "cooperative", [1.0, 2.0, 3.0], 3),
        ];
        let spec = fit_encoder(&rows, &schema).unwrap();
        assert_eq!(spec.columns.len(), 1);
        assert_eq!(spec.columns[0].categories, vec!["cooperative", "fund"]);
        assert_eq!(spec.columns[0].width(), 3);
    }

    #[test]
    fn unknown_category_routes_to_unknown_slot() {
        let col = EncoderColumn {
            name: "legal_nature".into(),
            categories: vec!["cooperative".into(), "fund".into()],
        };
        assert_eq!(
            encode_category(&col, &Value::Category("cooperative".into())).0,
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            encode_category(&col, &Value::Category("fund".into())).0,
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            encode_category(&col, &Value::Category("mutual".into())).0,
            vec![0.0, 0.0, 1.0]
        );
        let (group, missing) = encode_category(&col, &Value::Missing);
        assert_eq!(group, vec![0.0, 0.0, 0.0]);
        assert!(missing);
    }

    #[test]
    fn standardize_two_point_stats() {
        let m = Matrix::from_rows(&[vec![0.0], vec![10.0]]);
        let spec = fit_scaler(&m, ScalerKind::Standardize).unwrap();
        assert_eq!(spec.stats, vec![(5.0, 5.0)]);
    }

    #[test]
    fn minmax_stats_and_constant_column() {
        let m = Matrix::from_rows(&[vec![2.0, 7.0], vec![4.0, 7.0], vec![6.0, 7.0]]);
        let spec = fit_scaler(&m, ScalerKind::MinMax).unwrap();
        assert_eq!(spec.stats[0], (2.0, 6.0));
        assert_eq!(spec.stats[1], (7.0, 7.0));
        assert_eq!(scale_value(&spec, 1, 7.0), 0.0);
    }

    #[test]
    fn lognormal_fixed_points() {
        let e = std::f64::consts::E;
        assert_eq!(lognormal_transform(0.0), 0.0);
        assert!((lognormal_transform(e - 1.0) - 1.0).abs() < 1e-12);
        assert!((lognormal_transform(-(e - 1.0)) + 1.0).abs() < 1e-12);
        let spec = fit_scaler(&Matrix::from_rows(&[vec![1.0]]), ScalerKind::LogNormal).unwrap();
        assert!(spec.stats.is_empty());
    }

    proptest! {
        #[test]
        fn lognormal_is_odd_and_strictly_monotone(x in -1e12f64..1e12, y in -1e12f64..1e12) {
            prop_assert!((lognormal_transform(-x) + lognormal_transform(x)).abs() < 1e-9);
            if x < y {
                prop_assert!(lognormal_transform(x) < lognormal_transform(y));
            }
        }
    }

    #[test]
    fn standardize_scaled_training_columns_are_centered_unit() {
        let m = Matrix::from_rows(&[
            vec![1.0, 5.0],
            vec![2.0, 5.0],
            vec![4.0, 5.0],
            vec![9.0, 5.0],
        ]);
        let spec = fit_scaler(&m, ScalerKind::Standardize).unwrap();
        let mut scaled = m.clone();
        apply_scaler(&spec, &mut scaled).unwrap();
        let n = scaled.n_rows() as f64;
        let mean0: f64 = (0..4).map(|i| scaled.get(i, 0)).sum::<f64>() / n;
        let var0: f64 = (0..4).map(|i| (scaled.get(i, 0) - mean0).powi(2)).sum::<f64>() / n;
        assert!(mean0.abs() < 1e-9);
        assert!((var0 - 1.0).abs() < 1e-9);
        // Constant column maps to 0.
        assert!((0..4).all(|i| scaled.get(i, 1) == 0.0));
    }

    #[test]
    fn minmax_training_rows_map_into_unit_interval() {
        let m = Matrix::from_rows(&[vec![-3.0], vec![0.0], vec![12.5]]);
        let spec = fit_scaler(&m, ScalerKind::MinMax).unwrap();
        let mut scaled = m.clone();
        apply_scaler(&spec, &mut scaled).unwrap();
        for i in 0..3 {
            let v = scaled.get(i, 0);
            assert!((0.0..=1.0).contains(&v));
        }
        // Out-of-range values at apply time are clipped.
        assert_eq!(scale_value(&spec, 0, 1e9), 1.5);
        assert_eq!(scale_value(&spec, 0, -1e9), -0.5);
    }

    #[test]
    fn relative_change_rules() {
        assert!((relative_change(100.0, 110.0, 10.0) - 0.10).abs() < 1e-12);
        assert_eq!(relative_change(0.0, 0.0, 10.0), 0.0);
        assert_eq!(relative_change(0.0, 500.0, 10.0), 10.0);
        assert_eq!(relative_change(0.0, -500.0, 10.0), -10.0);
        assert_eq!(relative_change(1.0, 1e9, 10.0), 10.0);
        assert!((relative_change(-100.0, -110.0, 10.0) + 0.10).abs() < 1e-12);
    }

    #[test]
    fn variations_appended_per_schema() {
        let schema = mini_schema();
        let mut rows = vec![row("a", "fund", [100.0, 110.0, 99.0], 2)];
        compute_variations(&mut rows, &schema, 10.0).unwrap();
        assert_eq!(rows[0].variations.len(), 2);
        assert!((rows[0].variations[0] - 0.10).abs() < 1e-12);
        assert!((rows[0].variations[1] - (99.0 - 110.0) / 110.0).abs() < 1e-12);
    }

    fn macro_table(periods: &[u32]) -> MacroTable {
        let mut entries = BTreeMap::new();
        for &p in periods {
            entries.insert(
                PeriodIndex(p),
                MacroRecord {
                    cpi: p as f64,
                    unemployment_rate: 0.1,
                    gdp: 2.0 * p as f64,
                },
            );
        }
        MacroTable { entries }
    }

    #[test]
    fn macro_enrichment_appends_nine_values() {
        let mut rows = vec![row("a", "fund", [1.0, 2.0, 3.0], 2)];
        let table = macro_table(&[4032, 4033, 4034]);
        enrich_macro(&mut rows, &table).unwrap();
        assert_eq!(
            rows[0].macro_features,
            vec![4032.0, 4033.0, 4034.0, 0.1, 0.1, 0.1, 8064.0, 8066.0, 8068.0]
        );
    }

    #[test]
    fn macro_missing_period_is_an_error_naming_it() {
        let mut rows = vec![row("a", "fund", [1.0, 2.0, 3.0], 2)];
        let table = macro_table(&[4032, 4033]);
        let err = enrich_macro(&mut rows, &table).unwrap_err();
        assert!(err.to_string().contains("2017-1"), "{err}");
    }

    fn fitted(variant: FeatureVariant) -> (Vec<SupervisedRow>, PreprocessSpecs, ColumnSchema) {
        let schema = mini_schema();
        let mut rows = vec![
            row("a", "fund", [100.0, 110.0, 99.0], 2),
            row("b", "cooperative", [50.0, 55.0, 60.0], 3),
            row("c", "fund", [10.0, 0.0, 5.0], 2),
        ];
        compute_variations(&mut rows, &schema, 10.0).unwrap();
        enrich_macro(&mut rows, &macro_table(&[4032, 4033, 4034])).unwrap();
        let config = FeatureSetConfig::new(variant, ScalerKind::LogNormal);
        let specs = fit_preprocess(&rows, &schema, config).unwrap();
        (rows, specs, schema)
    }

    #[test]
    fn feature_sets_are_nested() {
        let (rows, m1, schema) = fitted(FeatureVariant::M1);
        let (_, m2, _) = fitted(FeatureVariant::M2);
        let (_, m3, _) = fitted(FeatureVariant::M3);
        let names = |m: &PreprocessSpecs| -> std::collections::BTreeSet<String> {
            m.manifest.column_names().map(str::to_string).collect()
        };
        let (n1, n2, n3) = (names(&m1), names(&m2), names(&m3));
        assert!(n1.is_subset(&n2) && n2.len() > n1.len());
        assert!(n2.is_subset(&n3) && n3.len() > n2.len());
        let fm = materialize(&rows, &m1, &schema).unwrap();
        assert_eq!(fm.x.n_cols, m1.manifest.n_cols());
        assert_eq!(fm.y, vec![2, 3, 2]);
    }

    #[test]
    fn onehot_groups_sum_to_one_without_missing() {
        let (rows, specs, schema) = fitted(FeatureVariant::M3);
        let fm = materialize(&rows, &specs, &schema).unwrap();
        for (start, end) in fm.manifest.onehot_groups() {
            for i in 0..fm.x.n_rows() {
                let sum: f64 = fm.x.row(i)[start..end].iter().sum();
                assert_eq!(sum, 1.0);
            }
        }
    }

    #[test]
    fn missing_numeric_is_median_imputed_and_counted() {
        let schema = mini_schema();
        let mut rows = vec![
            row("a", "fund", [100.0, 110.0, 99.0], 2),
            row("b", "fund", [50.0, 55.0, 60.0], 3),
        ];
        rows[0].lags[0][1] = Value::Missing;
        let config = FeatureSetConfig::new(FeatureVariant::M1, ScalerKind::LogNormal);
        let specs = fit_preprocess(&rows, &schema, config).unwrap();
        let fm = materialize(&rows, &specs, &schema).unwrap();
        assert_eq!(fm.imputed_counts.iter().sum::<usize>(), 1);
        // The imputed cell holds the scaled training median of the other
        // observation in that column (single finite value 50).
        let j = fm
            .manifest
            .columns
            .iter()
            .position(|c| c.name == "assets_lag3")
            .unwrap();
        assert!((fm.x.get(0, j) - lognormal_transform(50.0)).abs() < 1e-12);
        assert!(fm.x.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn m3_without_macro_enrichment_errors() {
        let schema = mini_schema();
        let mut rows = vec![
            row("a", "fund", [100.0, 110.0, 99.0], 2),
            row("b", "cooperative", [50.0, 55.0, 60.0], 3),
        ];
        compute_variations(&mut rows, &schema, 10.0).unwrap();
        let config = FeatureSetConfig::new(FeatureVariant::M3, ScalerKind::LogNormal);
        assert!(fit_preprocess(&rows, &schema, config).is_err());
    }

    #[test]
    fn m2_without_variations_errors() {
        let schema = mini_schema();
        let rows = vec![
            row("a", "fund", [100.0, 110.0, 99.0], 2),
            row("b", "cooperative", [50.0, 55.0, 60.0], 3),
        ];
        let config = FeatureSetConfig::new(FeatureVariant::M2, ScalerKind::Standardize);
        assert!(fit_preprocess(&rows, &schema, config).is_err());
    }

    #[test]
    fn refit_on_extended_data_changes_specs() {
        let schema = mini_schema();
        let train = vec![
            row("a", "fund", [100.0, 110.0, 99.0], 2),
            row("b", "fund", [50.0, 55.0, 60.0], 3),
        ];
        let mut both = train.clone();
        both.push(row("c", "fund", [1e6, 1e6, 1e6], 2)); // extends the range
        let config = FeatureSetConfig::new(FeatureVariant::M1, ScalerKind::MinMax);
        let on_train = fit_preprocess(&train, &schema, config).unwrap();
        let on_both = fit_preprocess(&both, &schema, config).unwrap();
        assert_ne!(on_train.scaler, on_both.scaler);
    }

    #[test]
    fn full_schema_manifest_reports_both_variable_counts() {
        let schema = filing_schema();
        let n_inputs = schema.n_inputs();
        let n_variations = schema.variation_columns().count();
        assert_eq!(n_variations, 28);
        // The base-variable count before lag-tripling is on the order of the
        // paper-scale variable list.
        assert!(n_inputs + n_variations > 70);
    }
}
