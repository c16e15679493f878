//! Synthetic SEE cohort generator. Real supervisory filings are not
//! redistributable, so this module fabricates panels over the default
//! schema with the same heavy class imbalance, plus a planted signal that
//! downstream models can recover: next-period risk rises with membership in
//! the cooperative / employee-fund legal natures and with recent growth of
//! the past-due portfolio.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    filing_schema, build_lag_windows, parse_period, ColumnKind, EntityPeriodRecord,
    PanelDataset, PeriodIndex, Value, N_CLASSES,
};
use crate::error::{Error, Result};
use crate::learn::mix_seed;
use crate::preprocess::{relative_change, MacroRecord, MacroTable};

/// Raw class proportions for classes 1..5. They deliberately sum to less
/// than 1 (the source distribution leaves ~1.27% unaccounted); the
/// generator renormalizes.
pub const DEFAULT_PROPORTIONS: [f64; N_CLASSES] = [0.002, 0.466, 0.518, 0.001, 0.0003];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_entities: usize,
    /// Inclusive period range, e.g. "2016-1" .. "2019-1".
    pub first_period: String,
    pub last_period: String,
    #[serde(default = "default_proportions")]
    pub proportions: [f64; N_CLASSES],
    /// Probability that any given entity-period filing is absent.
    #[serde(default)]
    pub gap_probability: f64,
    /// 0 = labels independent of features, 1 = labels a deterministic
    /// function of the planted signal.
    #[serde(default = "default_strength")]
    pub signal_strength: f64,
    pub seed: u64,
}

fn default_proportions() -> [f64; N_CLASSES] {
    DEFAULT_PROPORTIONS
}

fn default_strength() -> f64 {
    1.0
}

impl CohortSpec {
    fn periods(&self) -> Result<Vec<PeriodIndex>> {
        let first = parse_period(&self.first_period)?;
        let last = parse_period(&self.last_period)?;
        if first > last {
            return Err(Error::Config(format!(
                "empty period range {} .. {}",
                self.first_period, self.last_period
            )));
        }
        Ok((first.0..=last.0).map(PeriodIndex).collect())
    }

    fn validate(&self) -> Result<()> {
        if self.n_entities == 0 {
            return Err(Error::Config("n_entities must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gap_probability) {
            return Err(Error::Config(format!(
                "gap probability {} outside [0, 1)",
                self.gap_probability
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config(format!(
                "signal strength {} outside [0, 1]",
                self.signal_strength
            )));
        }
        let sum: f64 = self.proportions.iter().sum();
        if !(sum > 0.0) || self.proportions.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(
                "class proportions must be nonnegative with a positive sum".into(),
            ));
        }
        self.periods().map(|_| ())
    }
}

const LEGAL_NATURES: [(&str, f64); 4] = [
    ("cooperative", 0.35),
    ("employee_fund", 0.25),
    ("mutual_association", 0.30),
    ("other", 0.10),
];

/// Category pools for the categorical columns whose schema leaves the
/// value set open.
fn category_pool(name: &str) -> &'static [&'static str] {
    match name {
        "type_of_organization" => &["association", "foundation", "corporate_body"],
        "niif_group" => &["group_1", "group_2", "group_3"],
        "department" => &["antioquia", "atlantico", "bogota", "santander", "valle"],
        "municipality" => &["m01", "m02", "m03", "m04", "m05", "m06", "m07", "m08"],
        "organization_category" => &["small", "medium", "large"],
        "company_type" => &["multi_active", "employee_fund", "specialized", "other"],
        "supervision_level" => &["1", "2", "3"],
        _ => &["a", "b", "c"],
    }
}

fn pick_weighted(rng: &mut impl Rng, choices: &[(&str, f64)]) -> String {
    let total: f64 = choices.iter().map(|(_, w)| w).sum();
    let mut draw = rng.random::<f64>() * total;
    for (name, w) in choices {
        draw -= w;
        if draw <= 0.0 {
            return (*name).to_string();
        }
    }
    choices.last().unwrap().0.to_string()
}

/// Allocates exact per-class counts: floor of each share, leftover by
/// largest remainder (ties to the lower class), then at least 2 members
/// per class when the cohort is big enough for that.
fn class_counts(proportions: &[f64; N_CLASSES], n: usize) -> [usize; N_CLASSES] {
    let total: f64 = proportions.iter().sum();
    let share: [f64; N_CLASSES] = std::array::from_fn(|c| proportions[c] / total);
    let mut counts: [usize; N_CLASSES] =
        std::array::from_fn(|c| (share[c] * n as f64).floor() as usize);
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..N_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = share[a] * n as f64 - counts[a] as f64;
        let rb = share[b] * n as f64 - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut i = 0;
    while leftover > 0 {
        counts[order[i % N_CLASSES]] += 1;
        leftover -= 1;
        i += 1;
    }
    // Oversampling downstream needs at least 2 real members per class.
    if n >= 2 * N_CLASSES {
        loop {
            let Some(short) = (0..N_CLASSES).find(|&c| counts[c] < 2) else {
                break;
            };
            let donor = (0..N_CLASSES)
                .max_by_key(|&c| counts[c])
                .expect("nonempty");
            counts[donor] -= 1;
            counts[short] += 1;
        }
    }
    counts
}

/// Generates the cohort. Pure in (spec): per-entity streams are seeded by
/// entity index, so the output is independent of generation order.
pub fn generate_cohort(spec: &CohortSpec) -> Result<PanelDataset> {
    spec.validate()?;
    let schema = filing_schema();
    let periods = spec.periods()?;
    let inputs: Vec<_> = schema.input_columns().cloned().collect();
    let legal_slot = schema.input_index("legal_nature").expect("schema column");
    let past_due_slot = schema
        .input_index("past_due_portfolio")
        .expect("schema column");

    let mut records: Vec<EntityPeriodRecord> = Vec::new();
    // Planted risk driver per record, aligned with `records`.
    let mut signal: Vec<f64> = Vec::new();

    for e in 0..spec.n_entities {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1 + e as u64));
        let entity_id = format!("see_{e:05}");

        // Descriptive attributes are constant over the entity's life.
        let mut descriptive: BTreeMap<usize, String> = BTreeMap::new();
        for (slot, col) in inputs.iter().enumerate() {
            if col.kind != ColumnKind::Categorical {
                continue;
            }
            let token = if col.name == "legal_nature" {
                pick_weighted(&mut rng, &LEGAL_NATURES)
            } else {
                let pool = category_pool(&col.name);
                pool[rng.random_range(0..pool.len())].to_string()
            };
            descriptive.insert(slot, token);
        }
        let high_risk_nature = matches!(
            descriptive[&legal_slot].as_str(),
            "cooperative" | "employee_fund"
        );

        // Log-space levels per numeric column, evolved by a random walk.
        let entity_scale: f64 = rng.random_range(9.0..14.0);
        let mut level: Vec<f64> = inputs
            .iter()
            .map(|col| match col.kind {
                ColumnKind::Count => rng.random_range(1.5..8.0),
                _ => entity_scale + rng.random_range(-2.0..2.0),
            })
            .collect();
        // CAMELS-style rating columns hold small grades instead.
        let rating_base: f64 = rng.random_range(1.0..5.0);

        let mut past_due_history: Vec<(PeriodIndex, f64)> = Vec::new();
        for &period in &periods {
            for (slot, col) in inputs.iter().enumerate() {
                if col.kind == ColumnKind::Categorical {
                    continue;
                }
                level[slot] += rng.random_range(-0.1..0.1);
            }
            // Past-due balances occasionally jump or collapse, creating a
            // wide growth distribution for the planted signal.
            let burst: f64 = match rng.random_range(0..8) {
                0 => rng.random_range(0.5..1.4),
                1 => -rng.random_range(0.5..1.4),
                _ => 0.0,
            };
            level[past_due_slot] += burst;

            if rng.random::<f64>() < spec.gap_probability {
                continue; // missed filing
            }
            let mut values = Vec::with_capacity(inputs.len());
            for (slot, col) in inputs.iter().enumerate() {
                let value = match col.kind {
                    ColumnKind::Categorical => Value::Category(descriptive[&slot].clone()),
                    ColumnKind::Count if col.name.ends_with("_risk")
                        || col.name.ends_with("_rating") =>
                    {
                        let grade = (rating_base + rng.random_range(-1.0..1.0))
                            .round()
                            .clamp(1.0, 5.0);
                        Value::Number(grade)
                    }
                    ColumnKind::Count => Value::Number(level[slot].exp().round().max(0.0)),
                    _ => Value::Number((level[slot].exp() * 100.0).round() / 100.0),
                };
                // Sparse missingness for realism, kept away from the two
                // planted columns.
                if slot != legal_slot
                    && slot != past_due_slot
                    && rng.random::<f64>() < 0.01
                {
                    values.push(Value::Missing);
                } else {
                    values.push(value);
                }
            }
            let past_due = values[past_due_slot].as_number().expect("never missing");
            // Growth of the past-due portfolio into the previous period,
            // i.e. over (t-2 -> t-1) relative to this record's label.
            let growth = match past_due_history.len() {
                n if n >= 2
                    && past_due_history[n - 1].0 .0 == period.0 - 1
                    && past_due_history[n - 2].0 .0 == period.0 - 2 =>
                {
                    relative_change(past_due_history[n - 2].1, past_due_history[n - 1].1, 10.0)
                }
                _ => 0.0,
            };
            past_due_history.push((period, past_due));
            signal.push(if high_risk_nature { 1.0 } else { 0.0 } + growth.tanh());
            records.push(EntityPeriodRecord {
                entity_id: entity_id.clone(),
                period,
                values,
                risk_label: None,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Data(
            "gap probability removed every record of the cohort".into(),
        ));
    }

    // Labels: mix the signal's rank with uniform noise, then cut the mixed
    // score at exact class-count quantiles (ascending score = rising risk).
    let n = records.len();
    let mut rank_of = vec![0usize; n];
    let mut by_signal: Vec<usize> = (0..n).collect();
    by_signal.sort_by(|&a, &b| signal[a].total_cmp(&signal[b]).then(a.cmp(&b)));
    for (rank, &i) in by_signal.iter().enumerate() {
        rank_of[i] = rank;
    }
    let mut label_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xab));
    let denom = (n - 1).max(1) as f64;
    let mixed: Vec<f64> = (0..n)
        .map(|i| {
            spec.signal_strength * (rank_of[i] as f64 / denom)
                + (1.0 - spec.signal_strength) * label_rng.random::<f64>()
        })
        .collect();
    let mut by_mixed: Vec<usize> = (0..n).collect();
    by_mixed.sort_by(|&a, &b| mixed[a].total_cmp(&mixed[b]).then(a.cmp(&b)));
    let counts = class_counts(&spec.proportions, n);
    let mut cursor = 0;
    for (class, &count) in counts.iter().enumerate() {
        for &i in &by_mixed[cursor..cursor + count] {
            records[i].risk_label = Some(class as u8 + 1);
        }
        cursor += count;
    }

    Ok(PanelDataset { schema, records })
}

/// Macroeconomic series covering the cohort's period range: slow seasonal
/// drifts seeded independently of the entity streams.
pub fn generate_macro_table(spec: &CohortSpec) -> Result<MacroTable> {
    let periods = spec.periods()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x3ac20));
    let mut cpi: f64 = 100.0;
    let mut unemployment: f64 = 0.10;
    let mut gdp: f64 = 250_000.0;
    let mut entries = BTreeMap::new();
    for period in periods {
        cpi *= 1.0 + rng.random_range(0.005..0.035);
        unemployment = (unemployment + rng.random_range(-0.01..0.01)).clamp(0.04, 0.25);
        gdp *= 1.0 + rng.random_range(-0.01..0.04);
        entries.insert(
            period,
            MacroRecord {
                cpi: (cpi * 100.0).round() / 100.0,
                unemployment_rate: (unemployment * 1e4).round() / 1e4,
                gdp: gdp.round(),
            },
        );
    }
    Ok(MacroTable { entries })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CohortSummary {
    pub n_records: usize,
    pub n_entities: usize,
    pub first_period: Option<String>,
    pub last_period: Option<String>,
    pub label_histogram: [usize; N_CLASSES],
    pub unlabeled_records: usize,
    /// Fraction of missing cells over all input columns.
    pub missing_value_rate: f64,
    /// Supervised rows a 3-period lag window would yield.
    pub n_supervised_rows: usize,
    /// For every 4-consecutive-period span, how many entities filed all
    /// four periods.
    pub four_period_windows: Vec<(String, usize)>,
}

pub fn describe_cohort(data: &PanelDataset) -> CohortSummary {
    let mut summary = CohortSummary::default();
    summary.n_records = data.records.len();
    if data.records.is_empty() {
        return summary;
    }
    let mut entities = std::collections::BTreeSet::new();
    let mut periods_by_entity: BTreeMap<&str, std::collections::BTreeSet<u32>> = BTreeMap::new();
    let mut min_p = u32::MAX;
    let mut max_p = 0;
    let mut missing = 0usize;
    let mut cells = 0usize;
    for rec in &data.records {
        entities.insert(rec.entity_id.as_str());
        periods_by_entity
            .entry(rec.entity_id.as_str())
            .or_default()
            .insert(rec.period.0);
        min_p = min_p.min(rec.period.0);
        max_p = max_p.max(rec.period.0);
        match rec.risk_label {
            Some(label) if (1..=N_CLASSES as u8).contains(&label) => {
                summary.label_histogram[label as usize - 1] += 1;
            }
            _ => summary.unlabeled_records += 1,
        }
        cells += rec.values.len();
        missing += rec.values.iter().filter(|v| v.is_missing()).count();
    }
    summary.n_entities = entities.len();
    summary.first_period = Some(PeriodIndex(min_p).to_string());
    summary.last_period = Some(PeriodIndex(max_p).to_string());
    summary.missing_value_rate = if cells > 0 {
        missing as f64 / cells as f64
    } else {
        0.0
    };
    summary.n_supervised_rows = build_lag_windows(data, 3).0.len();
    for start in min_p..=max_p.saturating_sub(3) {
        let span: Vec<u32> = (start..start + 4).collect();
        let count = periods_by_entity
            .values()
            .filter(|ps| span.iter().all(|p| ps.contains(p)))
            .count();
        summary.four_period_windows.push((
            format!("{}..{}", PeriodIndex(start), PeriodIndex(start + 3)),
            count,
        ));
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_dataset;

    fn spec(n_entities: usize, seed: u64) -> CohortSpec {
        CohortSpec {
            n_entities,
            first_period: "2016-1".into(),
            last_period: "2019-1".into(),
            proportions: DEFAULT_PROPORTIONS,
            gap_probability: 0.0,
            signal_strength: 1.0,
            seed,
        }
    }

    #[test]
    fn identical_spec_gives_identical_cohort() {
        let a = generate_cohort(&spec(30, 5)).unwrap();
        let b = generate_cohort(&spec(30, 5)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(
            generate_macro_table(&spec(30, 5)).unwrap(),
            generate_macro_table(&spec(30, 5)).unwrap()
        );
        let c = generate_cohort(&spec(30, 6)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn cohort_is_schema_valid() {
        let data = generate_cohort(&spec(20, 1)).unwrap();
        assert!(validate_dataset(&data).is_empty());
    }

    #[test]
    fn gap_free_entity_yields_four_windows_over_seven_periods() {
        let data = generate_cohort(&spec(10, 2)).unwrap();
        assert_eq!(data.records.len(), 70);
        let (rows, _) = build_lag_windows(&data, 3);
        assert_eq!(rows.len(), 40);
        for e in 0..10 {
            let id = format!("see_{e:05}");
            assert_eq!(rows.iter().filter(|r| r.entity_id == id).count(), 4);
        }
    }

    #[test]
    fn gaps_reduce_record_count() {
        let mut s = spec(50, 3);
        s.gap_probability = 0.3;
        let data = generate_cohort(&s).unwrap();
        assert!(data.records.len() < 350);
        assert!(!data.records.is_empty());
    }

    #[test]
    fn class_shares_match_the_requested_proportions() {
        // ~7000 entities x 7 periods = ~50k records.
        let data = generate_cohort(&spec(7143, 4)).unwrap();
        let summary = describe_cohort(&data);
        let n = summary.n_records as f64;
        let total: f64 = DEFAULT_PROPORTIONS.iter().sum();
        for c in 0..N_CLASSES {
            let share = summary.label_histogram[c] as f64 / n;
            let want = DEFAULT_PROPORTIONS[c] / total;
            assert!(
                (share - want).abs() < 0.005,
                "class {} share {share} vs {want}",
                c + 1
            );
            assert!(summary.label_histogram[c] >= 2);
        }
        assert_eq!(summary.unlabeled_records, 0);
    }

    #[test]
    fn exact_count_allocation() {
        let counts = class_counts(&DEFAULT_PROPORTIONS, 10_000);
        assert_eq!(counts.iter().sum::<usize>(), 10_000);
        assert!(counts.iter().all(|&c| c >= 2));
        // Tiny cohorts cannot honor the 2-per-class floor.
        let tiny = class_counts(&DEFAULT_PROPORTIONS, 6);
        assert_eq!(tiny.iter().sum::<usize>(), 6);
    }

    #[test]
    fn degenerate_specs_error() {
        let mut s = spec(0, 0);
        assert!(generate_cohort(&s).is_err());
        s = spec(5, 0);
        s.first_period = "2019-1".into();
        s.last_period = "2016-1".into();
        assert!(generate_cohort(&s).is_err());
        s = spec(5, 0);
        s.signal_strength = 1.5;
        assert!(generate_cohort(&s).is_err());
        s = spec(5, 0);
        s.proportions = [0.0; 5];
        assert!(generate_cohort(&s).is_err());
    }

    #[test]
    fn describe_empty_dataset_is_all_zero() {
        let data = PanelDataset {
            schema: filing_schema(),
            records: vec![],
        };
        let summary = describe_cohort(&data);
        assert_eq!(summary, CohortSummary::default());
    }

    #[test]
    fn describe_reports_four_period_windows() {
        let data = generate_cohort(&spec(15, 9)).unwrap();
        let summary = describe_cohort(&data);
        // 7 periods contain 4 rolling spans of 4; every entity is gap-free.
        assert_eq!(summary.four_period_windows.len(), 4);
        for (_, count) in &summary.four_period_windows {
            assert_eq!(*count, 15);
        }
        assert_eq!(summary.n_supervised_rows, 60);
        assert_eq!(summary.n_entities, 15);
        assert_eq!(summary.first_period.as_deref(), Some("2016-1"));
        assert_eq!(summary.last_period.as_deref(), Some("2019-1"));
    }

    /// At strength 0, a forest on the windows does no better than the
    /// majority class, up to sampling noise over seeds.
    #[test]
    fn null_signal_floor() {
        use crate::evaluate::{
            evaluate_pipeline, LearnerConfig, PipelineConfig, SplitSpec,
        };
        use crate::learn::{ForestParams, TreeParams};
        use crate::preprocess::{FeatureSetConfig, FeatureVariant, ScalerKind};
        let mut diffs = Vec::new();
        for seed in 0..5u64 {
            let mut s = spec(150, 100 + seed);
            s.signal_strength = 0.0;
            let data = generate_cohort(&s).unwrap();
            let cfg = PipelineConfig {
                feature: FeatureSetConfig::new(FeatureVariant::M1, ScalerKind::LogNormal),
                rebalance: None,
                learner: LearnerConfig::Forest(ForestParams {
                    n_trees: 25,
                    seed,
                    bootstrap: true,
                    tree: TreeParams {
                        max_depth: Some(6),
                        ..TreeParams::default()
                    },
                }),
                split: SplitSpec::new(0.7, seed),
                seed,
                config_hash: String::new(),
            };
            let out = evaluate_pipeline(&data, None, &cfg).unwrap();
            let majority = *out.test_histogram.iter().max().unwrap() as f64
                / out.report.n as f64;
            diffs.push(out.report.accuracy - majority);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        // 3 sigma for a ~180-row test split is about 0.11; anything near
        // zero mean over 5 seeds clears it with margin.
        assert!(mean.abs() < 0.1, "mean accuracy lift {mean}, diffs {diffs:?}");
    }
}
