//! The persisted model artifact: the fitted forest (or logistic baseline)
//! together with the preprocessing specs and schema it was trained with,
//! in a versioned JSON envelope that reproduces predictions bit-exactly
//! across platforms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ColumnSchema, SupervisedRow, N_CLASSES};
use crate::error::{Error, Result};
use crate::learn::forest::Forest;
use crate::learn::logistic::LogisticModel;
use crate::preprocess::{
    self, FeatureVariant, MacroTable, PreprocessSpecs,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub class_labels: [u8; N_CLASSES],
    pub n_training_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Forest(Forest),
    Logistic(LogisticModel),
}

/// A trained classifier that can score raw records only through its own
/// fitted encoder/scaler specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub format_version: u32,
    pub learner: Learner,
    pub specs: PreprocessSpecs,
    pub schema: ColumnSchema,
    pub metadata: ModelMetadata,
}

impl RandomForestModel {
    pub fn variant(&self) -> FeatureVariant {
        self.specs.config.variant
    }

    pub fn n_features(&self) -> usize {
        self.specs.manifest.n_cols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let model: RandomForestModel = serde_json::from_str(&text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        Ok(model)
    }

    /// Predicts class and per-class confidence for an encoded feature row.
    pub fn predict_encoded(&self, row: &[f64]) -> Result<(u8, [f64; N_CLASSES])> {
        match &self.learner {
            Learner::Forest(f) => f.predict(row),
            Learner::Logistic(m) => {
                let p = m.predict_proba(row)?;
                Ok((m.predict(row)?, p))
            }
        }
    }

    /// Scores raw supervised rows: derives variation and macro features as
    /// the model's variant requires, materializes through the fitted specs,
    /// and votes. The macro table is only needed for M3 models.
    pub fn score_rows(
        &self,
        mut rows: Vec<SupervisedRow>,
        macro_table: Option<&MacroTable>,
    ) -> Result<Vec<(u8, [f64; N_CLASSES])>> {
        let variant = self.variant();
        if variant.includes_variations() {
            preprocess::compute_variations(&mut rows, &self.schema, self.specs.config.cap)?;
        }
        if variant.includes_camels() {
            let table = macro_table.ok_or_else(|| {
                Error::Config("an M3 model needs a macro table to score".into())
            })?;
            preprocess::enrich_macro(&mut rows, table)?;
        }
        let fm = preprocess::materialize(&rows, &self.specs, &self.schema)?;
        (0..fm.x.n_rows())
            .map(|i| self.predict_encoded(fm.x.row(i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PeriodIndex, Value};
    use crate::learn::forest::{fit_forest, ForestParams};
    use crate::learn::tree::TreeParams;
    use crate::preprocess::{fit_preprocess, FeatureSetConfig, ScalerKind};

    fn mini_schema() -> ColumnSchema {
        use crate::domain::{ColumnDef, ColumnKind};
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
                name: "assets".into(),
                kind: ColumnKind::Continuous,
                categories: None,
                nullable: true,
                derived_from: None,
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

    fn srow(entity: &str, assets: [f64; 3], target: u8) -> SupervisedRow {
        SupervisedRow {
            entity_id: entity.into(),
            target_period: PeriodIndex(4035),
            lags: assets.iter().map(|&a| vec![Value::Number(a)]).collect(),
            variations: Vec::new(),
            macro_features: Vec::new(),
            target,
        }
    }

    #[test]
    fn model_roundtrips_and_reproduces_predictions() {
        let schema = mini_schema();
        let rows: Vec<SupervisedRow> = (0..20)
            .map(|i| {
                let a = i as f64 * 10.0;
                srow(&format!("e{i}"), [a, a + 1.0, a + 2.0], if i < 10 { 2 } else { 3 })
            })
            .collect();
        let specs = fit_preprocess(
            &rows,
            &schema,
            FeatureSetConfig::new(FeatureVariant::M1, ScalerKind::LogNormal),
        )
        .unwrap();
        let fm = preprocess::materialize(&rows, &specs, &schema).unwrap();
        let forest = fit_forest(
            &fm.x,
            &fm.y,
            &ForestParams {
                n_trees: 10,
                seed: 3,
                bootstrap: true,
                tree: TreeParams::default(),
            },
        )
        .unwrap();
        let model = RandomForestModel {
            format_version: MODEL_FORMAT_VERSION,
            learner: Learner::Forest(forest),
            specs,
            schema: schema.clone(),
            metadata: ModelMetadata {
                seed: 3,
                config_hash: "test".into(),
                class_labels: [1, 2, 3, 4, 5],
                n_training_rows: rows.len(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = RandomForestModel::load(&path).unwrap();
        assert_eq!(loaded, model);

        let scored = model.score_rows(rows.clone(), None).unwrap();
        let scored_loaded = loaded.score_rows(rows, None).unwrap();
        assert_eq!(scored, scored_loaded);
        assert!(scored.iter().take(10).filter(|(c, _)| *c == 2).count() >= 8);
    }

    #[test]
    fn m3_model_requires_macro_table() {
        let schema = mini_schema();
        let model = RandomForestModel {
            format_version: MODEL_FORMAT_VERSION,
            learner: Learner::Forest(Forest {
                trees: vec![],
                params: ForestParams::default(),
                n_features: 0,
            }),
            specs: PreprocessSpecs {
                config: FeatureSetConfig::new(FeatureVariant::M3, ScalerKind::LogNormal),
                encoder: crate::preprocess::EncoderSpec { columns: vec![] },
                scaler: crate::preprocess::ScalerSpec {
                    kind: ScalerKind::LogNormal,
                    stats: vec![],
                },
                medians: vec![],
                manifest: crate::preprocess::Manifest {
                    variant: FeatureVariant::M3,
                    columns: vec![],
                    n_base_variables: 0,
                },
            },
            schema,
            metadata: ModelMetadata {
                seed: 0,
                config_hash: String::new(),
                class_labels: [1, 2, 3, 4, 5],
                n_training_rows: 0,
            },
        };
        let err = model.score_rows(vec![srow("a", [1.0, 2.0, 3.0], 2)], None);
        assert!(err.is_err());
    }

    #[test]
    fn wrong_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(
            &path,
            serde_json::json!({"format_version": 99}).to_string(),
        )
        .unwrap();
        assert!(RandomForestModel::load(&path).is_err());
    }
}
