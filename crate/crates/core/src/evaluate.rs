//! Stratified train/test splitting, confusion matrices with per-class
//! precision/recall, and the end-to-end train-and-evaluate pipeline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{rebalance, RebalancePolicy};
use crate::domain::{
    build_lag_windows, LagWindowReport, PanelDataset, SupervisedRow, N_CLASSES,
};
use crate::error::{Error, Result};
use crate::learn::{
    fit_forest, fit_logistic, forest::Forest, mix_seed, model::Learner, random_grid_search,
    search::forest_params_from_point, ForestParams, LogisticHyper, ModelMetadata,
    RandomForestModel, SearchSpace, Trial, MODEL_FORMAT_VERSION,
};
use crate::preprocess::{
    self, FeatureMatrix, FeatureSetConfig, MacroTable, PreprocessSpecs,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratify: bool,
}

fn default_fraction() -> f64 {
    0.7
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            seed,
            stratify: true,
        }
    }
}

/// floor(fraction * n) with a guard against float droop on exact multiples.
fn floor_fraction(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Splits row indices into train and test. The global train size is
/// exactly floor(fraction * n); per-class train counts are
/// floor(fraction * n_c) plus leftover seats by largest fractional
/// remainder (ties to the lower class). Both index lists come back sorted.
pub fn stratified_split(y: &[u8], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(0.0 < spec.train_fraction && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n_train = floor_fraction(spec.train_fraction, n);
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "fraction {} yields an empty train or test split for n = {n}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(n_train);

    if spec.stratify {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
        for (i, &label) in y.iter().enumerate() {
            let c = label as usize;
            if !(1..=N_CLASSES).contains(&c) {
                return Err(Error::Data(format!(
                    "label {label} at row {i} outside 1..=5"
                )));
            }
            members[c - 1].push(i);
        }
        let mut base = [0usize; N_CLASSES];
        let mut remainder = [0f64; N_CLASSES];
        for c in 0..N_CLASSES {
            let n_c = members[c].len();
            base[c] = floor_fraction(spec.train_fraction, n_c);
            remainder[c] = (spec.train_fraction * n_c as f64 - base[c] as f64).max(0.0);
        }
        let mut leftover = n_train - base.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..N_CLASSES).collect();
        order.sort_by(|&a, &b| remainder[b].total_cmp(&remainder[a]).then(a.cmp(&b)));
        let mut extra = [0usize; N_CLASSES];
        for &c in &order {
            if leftover == 0 {
                break;
            }
            if remainder[c] > 1e-9 && base[c] + 1 <= members[c].len() {
                extra[c] = 1;
                leftover -= 1;
            }
        }
        if leftover > 0 {
            return Err(Error::Data(
                "cannot honor the train fraction with these class counts".into(),
            ));
        }
        for c in 0..N_CLASSES {
            let mut indices = members[c].clone();
            indices.shuffle(&mut rng);
            train.extend(indices.into_iter().take(base[c] + extra[c]));
        }
    } else {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        train.extend(indices.into_iter().take(n_train));
    }
    train.sort_unstable();
    let train_set: std::collections::BTreeSet<usize> = train.iter().copied().collect();
    let test: Vec<usize> = (0..n).filter(|i| !train_set.contains(i)).collect();
    Ok((train, test))
}

/// 5x5 count matrix: rows = actual class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u32; N_CLASSES]; N_CLASSES],
    pub n: usize,
}

pub fn confusion_matrix(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Structural(format!(
            "length mismatch: {} actual vs {} predicted",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = [[0u32; N_CLASSES]; N_CLASSES];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        for (label, which) in [(t, "actual"), (p, "predicted")] {
            if !(1..=N_CLASSES as u8).contains(&label) {
                return Err(Error::Data(format!(
                    "{which} label {label} at index {i} outside 1..=5"
                )));
            }
        }
        counts[t as usize - 1][p as usize - 1] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        n: y_true.len(),
    })
}

impl ConfusionMatrix {
    pub fn row_sum(&self, i: usize) -> u32 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u32 {
        (0..N_CLASSES).map(|i| self.counts[i][j]).sum()
    }

    pub fn trace(&self) -> u32 {
        (0..N_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

/// Per-class metrics. The per-class "accuracy" equation divides by the
/// predicted-in-class count, which is precision; the row-normalized table
/// rendering is recall-shaped. Both are reported, unambiguously labeled.
/// Zero-support classes report null, never 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: [[u32; N_CLASSES]; N_CLASSES],
    /// Exact row percentages (100 * count / row sum).
    pub row_pct: [[f64; N_CLASSES]; N_CLASSES],
    /// Integer row percentages by largest-remainder allocation, so each
    /// nonzero row sums to exactly 100.
    pub row_pct_rendered: [[u32; N_CLASSES]; N_CLASSES],
    pub precision: [Option<f64>; N_CLASSES],
    pub recall: [Option<f64>; N_CLASSES],
    pub accuracy: f64,
    pub support: [u32; N_CLASSES],
    pub n: usize,
}

fn largest_remainder_percents(row: &[u32; N_CLASSES], total: u32) -> [u32; N_CLASSES] {
    if total == 0 {
        return [0; N_CLASSES];
    }
    let exact: [f64; N_CLASSES] =
        std::array::from_fn(|j| 100.0 * row[j] as f64 / total as f64);
    let mut rendered: [u32; N_CLASSES] = std::array::from_fn(|j| exact[j].floor() as u32);
    let mut leftover = 100 - rendered.iter().sum::<u32>();
    let mut order: Vec<usize> = (0..N_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - rendered[a] as f64;
        let rb = exact[b] - rendered[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in &order {
        if leftover == 0 {
            break;
        }
        // Never surface a zero count as a nonzero percent.
        if row[j] > 0 {
            rendered[j] += 1;
            leftover -= 1;
        }
    }
    rendered
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.n == 0 {
        return Err(Error::Data("metrics of an empty confusion matrix".into()));
    }
    let mut precision = [None; N_CLASSES];
    let mut recall = [None; N_CLASSES];
    let mut row_pct = [[0.0; N_CLASSES]; N_CLASSES];
    let mut row_pct_rendered = [[0u32; N_CLASSES]; N_CLASSES];
    let mut support = [0u32; N_CLASSES];
    for i in 0..N_CLASSES {
        let rs = cm.row_sum(i);
        let cs = cm.col_sum(i);
        support[i] = rs;
        if cs > 0 {
            precision[i] = Some(cm.counts[i][i] as f64 / cs as f64);
        }
        if rs > 0 {
            recall[i] = Some(cm.counts[i][i] as f64 / rs as f64);
            for j in 0..N_CLASSES {
                row_pct[i][j] = 100.0 * cm.counts[i][j] as f64 / rs as f64;
            }
        }
        row_pct_rendered[i] = largest_remainder_percents(&cm.counts[i], rs);
    }
    Ok(MetricsReport {
        counts: cm.counts,
        row_pct,
        row_pct_rendered,
        precision,
        recall,
        accuracy: cm.trace() as f64 / cm.n as f64,
        support,
        n: cm.n,
    })
}

impl MetricsReport {
    /// Plain-text rendering of the row-normalized matrix: rows = actual
    /// 1..5, integer percents, blanks for zero cells.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("actual |     1     2     3     4     5\n");
        out.push_str("-------+------------------------------\n");
        for i in 0..N_CLASSES {
            out.push_str(&format!("     {} |", i + 1));
            for j in 0..N_CLASSES {
                let cell = self.row_pct_rendered[i][j];
                if cell == 0 {
                    out.push_str("      ");
                } else {
                    out.push_str(&format!("  {cell:3}%"));
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "overall accuracy: {:.2}%  (n = {})\n",
            100.0 * self.accuracy,
            self.n
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerConfig {
    Forest(ForestParams),
    Logistic(LogisticHyper),
    /// Random search over forest hyperparameters; `base` supplies the
    /// values the space leaves unspecified.
    ForestSearch {
        base: ForestParams,
        space: SearchSpace,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub feature: FeatureSetConfig,
    pub rebalance: Option<RebalancePolicy>,
    pub learner: LearnerConfig,
    pub split: SplitSpec,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: MetricsReport,
    pub model: RandomForestModel,
    pub windows: LagWindowReport,
    pub train_histogram: [usize; N_CLASSES],
    pub test_histogram: [usize; N_CLASSES],
    /// Post-rebalance training histogram.
    pub balanced_histogram: [usize; N_CLASSES],
    pub trials: Vec<Trial>,
    pub tuned_params: Option<ForestParams>,
}

fn histogram(y: &[u8]) -> [usize; N_CLASSES] {
    let mut h = [0usize; N_CLASSES];
    for &label in y {
        h[label as usize - 1] += 1;
    }
    h
}

fn subset_rows(rows: &[SupervisedRow], indices: &[usize]) -> Vec<SupervisedRow> {
    indices.iter().map(|&i| rows[i].clone()).collect()
}

fn accuracy_on(forest: &Forest, fm: &FeatureMatrix) -> Result<f64> {
    let pred = forest.predict_all(&fm.x)?;
    let correct = pred.iter().zip(&fm.y).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / fm.y.len().max(1) as f64)
}

/// Rebalance when possible: searching sub-splits can lose a class
/// entirely, in which case the unbalanced matrix is used as-is.
fn rebalance_if_possible(fm: FeatureMatrix, policy: Option<&RebalancePolicy>) -> Result<FeatureMatrix> {
    let Some(policy) = policy else { return Ok(fm) };
    if histogram(&fm.y).iter().all(|&c| c > 0) {
        rebalance(&fm, policy)
    } else {
        Ok(fm)
    }
}

/// End-to-end protocol: lag windows -> derived features -> stratified
/// split -> fit specs on train -> encode/scale -> rebalance train only ->
/// fit learner -> predict on the untouched test split -> report.
pub fn evaluate_pipeline(
    data: &PanelDataset,
    macro_table: Option<&MacroTable>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let (mut rows, windows) = build_lag_windows(data, crate::domain::DEFAULT_WINDOW);
    if rows.is_empty() {
        return Err(Error::Data("no supervised rows after windowing".into()).in_stage("lag_windows"));
    }
    let variant = cfg.feature.variant;
    if variant.includes_variations() {
        preprocess::compute_variations(&mut rows, &data.schema, cfg.feature.cap)
            .map_err(|e| e.in_stage("variations"))?;
    }
    if variant.includes_camels() {
        let table = macro_table
            .ok_or_else(|| Error::Config("feature set M3 requires a macro table".into()))
            .map_err(|e| e.in_stage("macro"))?;
        preprocess::enrich_macro(&mut rows, table).map_err(|e| e.in_stage("macro"))?;
    }

    let targets: Vec<u8> = rows.iter().map(|r| r.target).collect();
    let (train_idx, test_idx) =
        stratified_split(&targets, &cfg.split).map_err(|e| e.in_stage("split"))?;
    let train_rows = subset_rows(&rows, &train_idx);
    let test_rows = subset_rows(&rows, &test_idx);

    let specs: PreprocessSpecs =
        preprocess::fit_preprocess(&train_rows, &data.schema, cfg.feature)
            .map_err(|e| e.in_stage("preprocess"))?;
    let train_fm = preprocess::materialize(&train_rows, &specs, &data.schema)
        .map_err(|e| e.in_stage("preprocess"))?;
    let test_fm = preprocess::materialize(&test_rows, &specs, &data.schema)
        .map_err(|e| e.in_stage("preprocess"))?;
    let train_histogram = histogram(&train_fm.y);
    let test_histogram = histogram(&test_fm.y);

    let balanced = match &cfg.rebalance {
        Some(policy) => rebalance(&train_fm, policy).map_err(|e| e.in_stage("rebalance"))?,
        None => train_fm,
    };
    let balanced_histogram = histogram(&balanced.y);

    let mut trials = Vec::new();
    let mut tuned_params = None;
    let learner = match &cfg.learner {
        LearnerConfig::Logistic(hyper) => {
            Learner::Logistic(fit_logistic(&balanced.x, &balanced.y, *hyper).map_err(|e| e.in_stage("fit"))?)
        }
        LearnerConfig::Forest(params) => {
            Learner::Forest(fit_forest(&balanced.x, &balanced.y, params).map_err(|e| e.in_stage("fit"))?)
        }
        LearnerConfig::ForestSearch { base, space } => {
            // Inner stratified holdout carved out of the training split.
            let inner_spec = SplitSpec {
                train_fraction: 0.8,
                seed: mix_seed(cfg.seed, 0x5ea2),
                stratify: true,
            };
            let (inner_train, inner_val) = stratified_split(
                &train_rows.iter().map(|r| r.target).collect::<Vec<_>>(),
                &inner_spec,
            )
            .map_err(|e| e.in_stage("search"))?;
            let sub_train = preprocess::materialize(
                &subset_rows(&train_rows, &inner_train),
                &specs,
                &data.schema,
            )
            .map_err(|e| e.in_stage("search"))?;
            let sub_val = preprocess::materialize(
                &subset_rows(&train_rows, &inner_val),
                &specs,
                &data.schema,
            )
            .map_err(|e| e.in_stage("search"))?;
            let sub_train = rebalance_if_possible(sub_train, cfg.rebalance.as_ref())
                .map_err(|e| e.in_stage("search"))?;
            let (best_point, log) = random_grid_search(space, |point| {
                let params = forest_params_from_point(base, point)?;
                let forest = fit_forest(&sub_train.x, &sub_train.y, &params)?;
                accuracy_on(&forest, &sub_val)
            })
            .map_err(|e| e.in_stage("search"))?;
            trials = log;
            let params = forest_params_from_point(base, &best_point)
                .map_err(|e| e.in_stage("search"))?;
            tuned_params = Some(params);
            Learner::Forest(fit_forest(&balanced.x, &balanced.y, &params).map_err(|e| e.in_stage("fit"))?)
        }
    };

    let model = RandomForestModel {
        format_version: MODEL_FORMAT_VERSION,
        learner,
        specs,
        schema: data.schema.clone(),
        metadata: ModelMetadata {
            seed: cfg.seed,
            config_hash: cfg.config_hash.clone(),
            class_labels: [1, 2, 3, 4, 5],
            n_training_rows: balanced.y.len(),
        },
    };

    let mut predictions = Vec::with_capacity(test_fm.y.len());
    for i in 0..test_fm.x.n_rows() {
        predictions.push(model.predict_encoded(test_fm.x.row(i)).map_err(|e| e.in_stage("evaluate"))?.0);
    }
    let cm = confusion_matrix(&test_fm.y, &predictions).map_err(|e| e.in_stage("evaluate"))?;
    let report = metrics(&cm).map_err(|e| e.in_stage("evaluate"))?;

    Ok(PipelineOutcome {
        report,
        model,
        windows,
        train_histogram,
        test_histogram,
        balanced_histogram,
        trials,
        tuned_params,
    })
}
