//! Batch command-line surface: generate cohorts, prepare lag windows,
//! train, evaluate, predict, rank entities by inspection priority, and
//! inspect panels.
//!
//! Every artifact embeds the format version, the master seed, and a hash of
//! the effective configuration; nothing embeds timestamps, so reruns with
//! identical inputs are byte-identical.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::RebalancePolicy;
use crate::domain::{
    self, filing_schema, build_lag_windows, read_panel_csv, validate_dataset,
    ColumnSchema, PanelDataset, SupervisedRow, N_CLASSES,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_pipeline, LearnerConfig, PipelineConfig, SplitSpec};
use crate::learn::{mix_seed, ForestParams, RandomForestModel};
use crate::preprocess::{FeatureSetConfig, FeatureVariant, MacroTable, ScalerKind};
use crate::synthgen::{describe_cohort, generate_cohort, generate_macro_table, CohortSpec};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub panel_csv: Option<PathBuf>,
    #[serde(default)]
    pub macro_csv: Option<PathBuf>,
    /// Column schema JSON; the built-in default schema when absent.
    #[serde(default)]
    pub schema_json: Option<PathBuf>,
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default = "default_feature")]
    pub feature: FeatureSetConfig,
    #[serde(default)]
    pub rebalance: Option<RebalancePolicy>,
    #[serde(default = "default_learner")]
    pub learner: LearnerConfig,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_feature() -> FeatureSetConfig {
    FeatureSetConfig::new(FeatureVariant::M1, ScalerKind::LogNormal)
}

fn default_learner() -> LearnerConfig {
    LearnerConfig::Forest(ForestParams::default())
}

fn default_split() -> SplitSpec {
    SplitSpec::new(0.7, 0)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies the master seed: the seed flag (when given) replaces the
    /// config seed, and every stage seed is derived from the master so one
    /// number governs the whole run.
    pub fn resolve(mut self, seed_flag: Option<u64>) -> Self {
        if let Some(seed) = seed_flag {
            self.seed = seed;
        }
        self.split.seed = mix_seed(self.seed, 1);
        if let Some(policy) = &mut self.rebalance {
            policy.seed = mix_seed(self.seed, 2);
        }
        match &mut self.learner {
            LearnerConfig::Forest(params) => params.seed = mix_seed(self.seed, 3),
            LearnerConfig::Logistic(_) => {}
            LearnerConfig::ForestSearch { base, space } => {
                base.seed = mix_seed(self.seed, 3);
                space.seed = mix_seed(self.seed, 4);
            }
        }
        self
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    fn schema(&self) -> Result<ColumnSchema> {
        match &self.schema_json {
            Some(path) => ColumnSchema::load(path),
            None => Ok(filing_schema()),
        }
    }

    fn panel(&self) -> Result<PanelDataset> {
        let path = self
            .panel_csv
            .as_ref()
            .ok_or_else(|| Error::Config("config has no panel_csv path".into()))?;
        read_panel_csv(path, &self.schema()?)
    }

    fn macro_table(&self) -> Result<Option<MacroTable>> {
        match &self.macro_csv {
            Some(path) => Ok(Some(MacroTable::read_csv(path)?)),
            None => {
                if self.feature.variant.includes_camels() {
                    return Err(Error::Config(
                        "feature set M3 requires macro_csv in the config".into(),
                    ));
                }
                Ok(None)
            }
        }
    }

    fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            feature: self.feature,
            rebalance: self.rebalance.clone(),
            learner: self.learner.clone(),
            split: self.split,
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "seerisk", version, about = "SEE next-period risk-class pipeline")]
pub struct Cli {
    /// Run configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config seed and derives all stage seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (panel CSV + macro CSV + summary).
    Gen {
        /// Cohort spec JSON.
        #[arg(long)]
        spec: PathBuf,
    },
    /// Build lag windows and report counts and data-quality findings.
    Prepare,
    /// Train a model and persist it with a training report.
    Train,
    /// Evaluate a model on the held-out split of the configured panel.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score every supervised row of the configured panel.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rank entities by high-risk score for inspection priority.
    Rank {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Panel CSV (defaults to the config's panel).
        #[arg(long)]
        panel: Option<PathBuf>,
        /// Keep only the top K entities.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Summarize a panel: class histogram, coverage, data-quality findings.
    Inspect {
        #[arg(long)]
        panel: Option<PathBuf>,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

#[derive(Serialize)]
struct Stamp {
    format_version: u32,
    seed: u64,
    config_hash: String,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
    Ok(RunConfig::load(path)?.resolve(cli.seed))
}

pub fn run(cli: &Cli) -> Result<()> {
    ensure_out(&cli.out)?;
    match &cli.command {
        Command::Gen { spec } => cmd_gen(cli, spec),
        Command::Prepare => cmd_prepare(cli),
        Command::Train => cmd_train(cli),
        Command::Evaluate { model } => cmd_evaluate(cli, model.as_deref()),
        Command::Predict { model } => cmd_predict(cli, model.as_deref()),
        Command::Rank { model, panel, top } => {
            cmd_rank(cli, model.as_deref(), panel.as_deref(), *top)
        }
        Command::Inspect { panel } => cmd_inspect(cli, panel.as_deref()),
    }
}

fn cmd_gen(cli: &Cli, spec_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::io(spec_path.display().to_string(), e))?;
    let mut spec: CohortSpec = serde_json::from_str(&text)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let data = generate_cohort(&spec)?;
    let macro_table = generate_macro_table(&spec)?;
    domain::write_panel_csv(&data, &cli.out.join("cohort.csv"))?;
    macro_table.write_csv(&cli.out.join("macro.csv"))?;
    data.schema.save(&cli.out.join("schema.json"))?;
    let stamp = Stamp {
        format_version: ARTIFACT_FORMAT_VERSION,
        seed: spec.seed,
        config_hash: hex(&Sha256::digest(serde_json::to_vec(&spec)?)),
    };
    #[derive(Serialize)]
    struct GenReport {
        #[serde(flatten)]
        stamp: Stamp,
        summary: crate::synthgen::CohortSummary,
    }
    write_json(
        &cli.out.join("summary.json"),
        &GenReport {
            stamp,
            summary: describe_cohort(&data),
        },
    )?;
    println!(
        "wrote cohort.csv, macro.csv, schema.json, summary.json to {}",
        cli.out.display()
    );
    Ok(())
}

fn cmd_prepare(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = cfg.panel()?;
    let violations = validate_dataset(&data);
    let (rows, report) = build_lag_windows(&data, domain::DEFAULT_WINDOW);
    let mut histogram = [0usize; N_CLASSES];
    for row in &rows {
        histogram[row.target as usize - 1] += 1;
    }
    #[derive(Serialize)]
    struct PrepareReport {
        #[serde(flatten)]
        stamp: Stamp,
        windows: domain::LagWindowReport,
        target_histogram: [usize; N_CLASSES],
        n_violations: usize,
        violations: Vec<domain::Violation>,
    }
    write_json(
        &cli.out.join("prepared.json"),
        &PrepareReport {
            stamp: Stamp {
                format_version: ARTIFACT_FORMAT_VERSION,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
            windows: report,
            target_histogram: histogram,
            n_violations: violations.len(),
            violations,
        },
    )?;
    println!("{} supervised rows -> {}", rows.len(), cli.out.display());
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = cfg.panel()?;
    let macro_table = cfg.macro_table()?;
    let outcome = evaluate_pipeline(&data, macro_table.as_ref(), &cfg.pipeline_config())?;
    let model_path = cfg
        .model_file
        .clone()
        .unwrap_or_else(|| cli.out.join("model.json"));
    outcome.model.save(&model_path)?;
    #[derive(Serialize)]
    struct TrainReport {
        #[serde(flatten)]
        stamp: Stamp,
        windows: domain::LagWindowReport,
        train_histogram: [usize; N_CLASSES],
        test_histogram: [usize; N_CLASSES],
        balanced_histogram: [usize; N_CLASSES],
        n_features: usize,
        tuned_params: Option<ForestParams>,
        trials: Vec<crate::learn::Trial>,
    }
    write_json(
        &cli.out.join("train_report.json"),
        &TrainReport {
            stamp: Stamp {
                format_version: ARTIFACT_FORMAT_VERSION,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
            windows: outcome.windows,
            train_histogram: outcome.train_histogram,
            test_histogram: outcome.test_histogram,
            balanced_histogram: outcome.balanced_histogram,
            n_features: outcome.model.n_features(),
            tuned_params: outcome.tuned_params,
            trials: outcome.trials,
        },
    )?;
    println!("model -> {}", model_path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, flag: Option<&Path>) -> Result<RandomForestModel> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.model_file.clone())
        .ok_or_else(|| Error::Config("no model path given (--model or model_file)".into()))?;
    RandomForestModel::load(&path)
}

/// Supervised rows with derived features left to the model's own specs.
fn panel_rows(cfg: &RunConfig) -> Result<(PanelDataset, Vec<SupervisedRow>)> {
    let data = cfg.panel()?;
    let (rows, _) = build_lag_windows(&data, domain::DEFAULT_WINDOW);
    if rows.is_empty() {
        return Err(Error::Data("panel yields no supervised rows".into()));
    }
    Ok((data, rows))
}

fn cmd_evaluate(cli: &Cli, model_flag: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = load_model(&cfg, model_flag)?;
    if model.variant() != cfg.feature.variant {
        return Err(Error::Config(format!(
            "model was trained with feature set {:?}, config asks for {:?}",
            model.variant(),
            cfg.feature.variant
        )));
    }
    let (_, rows) = panel_rows(&cfg)?;
    let macro_table = cfg.macro_table()?;
    let targets: Vec<u8> = rows.iter().map(|r| r.target).collect();
    let (_, test_idx) = crate::evaluate::stratified_split(&targets, &cfg.split)?;
    let test_rows: Vec<SupervisedRow> = test_idx.iter().map(|&i| rows[i].clone()).collect();
    let scored = model.score_rows(test_rows.clone(), macro_table.as_ref())?;
    let predictions: Vec<u8> = scored.iter().map(|(c, _)| *c).collect();
    let actuals: Vec<u8> = test_rows.iter().map(|r| r.target).collect();
    let cm = crate::evaluate::confusion_matrix(&actuals, &predictions)?;
    let report = crate::evaluate::metrics(&cm)?;
    #[derive(Serialize)]
    struct EvalReport {
        #[serde(flatten)]
        stamp: Stamp,
        metrics: crate::evaluate::MetricsReport,
    }
    write_json(
        &cli.out.join("eval_report.json"),
        &EvalReport {
            stamp: Stamp {
                format_version: ARTIFACT_FORMAT_VERSION,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
            metrics: report.clone(),
        },
    )?;
    let table = report.render_table();
    write_text(&cli.out.join("eval_report.txt"), &table)?;
    match cli.format {
        OutputFormat::Table => print!("{table}"),
        OutputFormat::Json => println!("{}", serde_json::to_string(&report)?),
    }
    Ok(())
}

fn cmd_predict(cli: &Cli, model_flag: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = load_model(&cfg, model_flag)?;
    let (_, rows) = panel_rows(&cfg)?;
    let macro_table = match &cfg.macro_csv {
        Some(path) => Some(MacroTable::read_csv(path)?),
        None => None,
    };
    let scored = model.score_rows(rows.clone(), macro_table.as_ref())?;
    let path = cli.out.join("predictions.csv");
    let mut wtr = csv::Writer::from_path(&path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    wtr.write_record([
        "entity_id",
        "target_period",
        "actual",
        "predicted",
        "p1",
        "p2",
        "p3",
        "p4",
        "p5",
    ])?;
    for (row, (class, p)) in rows.iter().zip(&scored) {
        let mut rec = vec![
            row.entity_id.clone(),
            row.target_period.to_string(),
            row.target.to_string(),
            class.to_string(),
        ];
        rec.extend(p.iter().map(|v| format!("{v:.6}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("{} predictions -> {}", scored.len(), path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity {
    pub entity_id: String,
    pub target_period: String,
    pub predicted_class: u8,
    /// Forest vote mass on classes 4 and 5.
    pub high_risk_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IneligibleEntity {
    pub entity_id: String,
    pub reason: String,
}

/// Builds one forward-looking row per entity from its 3 trailing
/// consecutive periods, scores it, and sorts by high-risk vote mass
/// descending (ties by entity_id ascending).
pub fn rank_entities(
    data: &PanelDataset,
    model: &RandomForestModel,
    macro_table: Option<&MacroTable>,
) -> Result<(Vec<RankedEntity>, Vec<IneligibleEntity>)> {
    let mut by_entity: std::collections::BTreeMap<&str, Vec<&domain::EntityPeriodRecord>> =
        std::collections::BTreeMap::new();
    for rec in &data.records {
        by_entity.entry(&rec.entity_id).or_default().push(rec);
    }
    let mut rows = Vec::new();
    let mut ineligible = Vec::new();
    for (entity, mut recs) in by_entity {
        recs.sort_by_key(|r| r.period);
        recs.dedup_by_key(|r| r.period);
        let n = recs.len();
        let trailing_consecutive = n >= 3
            && recs[n - 1].period.0 == recs[n - 2].period.0 + 1
            && recs[n - 2].period.0 == recs[n - 3].period.0 + 1;
        if !trailing_consecutive {
            ineligible.push(IneligibleEntity {
                entity_id: entity.to_string(),
                reason: "insufficient history".into(),
            });
            continue;
        }
        rows.push(SupervisedRow {
            entity_id: entity.to_string(),
            target_period: recs[n - 1].period.succ(),
            lags: recs[n - 3..].iter().map(|r| r.values.clone()).collect(),
            variations: Vec::new(),
            macro_features: Vec::new(),
            target: 1, // placeholder; scoring ignores it
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("no entity has 3 trailing consecutive periods".into()));
    }
    let scored = model.score_rows(rows.clone(), macro_table)?;
    let mut ranked: Vec<RankedEntity> = rows
        .iter()
        .zip(&scored)
        .map(|(row, (class, p))| RankedEntity {
            entity_id: row.entity_id.clone(),
            target_period: row.target_period.to_string(),
            predicted_class: *class,
            high_risk_score: p[3] + p[4],
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.high_risk_score
            .total_cmp(&a.high_risk_score)
            .then(a.entity_id.cmp(&b.entity_id))
    });
    Ok((ranked, ineligible))
}

fn cmd_rank(
    cli: &Cli,
    model_flag: Option<&Path>,
    panel_flag: Option<&Path>,
    top: Option<usize>,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = load_model(&cfg, model_flag)?;
    let data = match panel_flag {
        Some(path) => read_panel_csv(path, &cfg.schema()?)?,
        None => cfg.panel()?,
    };
    let macro_table = match &cfg.macro_csv {
        Some(path) => Some(MacroTable::read_csv(path)?),
        None => None,
    };
    // Ranking uses the model's own macro needs; an M3 model without a
    // macro table fails inside score_rows with a config error.
    let (mut ranked, ineligible) = rank_entities(&data, &model, macro_table.as_ref())?;
    if let Some(k) = top {
        ranked.truncate(k);
    }
    #[derive(Serialize)]
    struct Ranking {
        #[serde(flatten)]
        stamp: Stamp,
        ranked: Vec<RankedEntity>,
        ineligible: Vec<IneligibleEntity>,
    }
    let ranking = Ranking {
        stamp: Stamp {
            format_version: ARTIFACT_FORMAT_VERSION,
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
        ranked,
        ineligible,
    };
    write_json(&cli.out.join("ranking.json"), &ranking)?;
    match cli.format {
        OutputFormat::Table => {
            println!("entity_id        next   class  high-risk score");
            for r in &ranking.ranked {
                println!(
                    "{:<16} {:<6} {:<6} {:.4}",
                    r.entity_id, r.target_period, r.predicted_class, r.high_risk_score
                );
            }
            if !ranking.ineligible.is_empty() {
                println!("ineligible:");
                for e in &ranking.ineligible {
                    println!("{:<16} {}", e.entity_id, e.reason);
                }
            }
        }
        OutputFormat::Json => println!("{}", serde_json::to_string(&ranking.ranked)?),
    }
    Ok(())
}

fn cmd_inspect(cli: &Cli, panel_flag: Option<&Path>) -> Result<()> {
    // Inspect works with or without a config: --panel alone uses the
    // default schema.
    let (data, seed, hash) = match (&cli.config, panel_flag) {
        (Some(_), flag) => {
            let cfg = load_config(cli)?;
            let data = match flag {
                Some(path) => read_panel_csv(path, &cfg.schema()?)?,
                None => cfg.panel()?,
            };
            (data, cfg.seed, cfg.hash())
        }
        (None, Some(path)) => (
            read_panel_csv(path, &filing_schema())?,
            cli.seed.unwrap_or(0),
            String::new(),
        ),
        (None, None) => {
            return Err(Error::Config("inspect needs --panel or --config".into()))
        }
    };
    let summary = describe_cohort(&data);
    let violations = validate_dataset(&data);
    #[derive(Serialize)]
    struct Inspection {
        #[serde(flatten)]
        stamp: Stamp,
        summary: crate::synthgen::CohortSummary,
        n_violations: usize,
    }
    let inspection = Inspection {
        stamp: Stamp {
            format_version: ARTIFACT_FORMAT_VERSION,
            seed,
            config_hash: hash,
        },
        summary,
        n_violations: violations.len(),
    };
    write_json(&cli.out.join("inspection.json"), &inspection)?;
    match cli.format {
        OutputFormat::Table => {
            let s = &inspection.summary;
            println!("records:    {}", s.n_records);
            println!("entities:   {}", s.n_entities);
            println!(
                "periods:    {} .. {}",
                s.first_period.as_deref().unwrap_or("-"),
                s.last_period.as_deref().unwrap_or("-")
            );
            println!("labels 1-5: {:?}", s.label_histogram);
            println!("windows:    {}", s.n_supervised_rows);
            println!("violations: {}", inspection.n_violations);
        }
        OutputFormat::Json => println!("{}", serde_json::to_string(&inspection.summary)?),
    }
    Ok(())
}
