//! Random search over hyperparameter spaces: uniform sampling of
//! `n_trials` points, seeded, argmax of the validation objective with ties
//! to the earlier trial.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as JsonValue;

use crate::error::{Error, Result};
use crate::learn::forest::ForestParams;
use crate::learn::tree::FeatureSubset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamDomain {
    /// Inclusive integer range.
    Int { min: i64, max: i64 },
    /// Finite value set.
    Values(Vec<JsonValue>),
}

impl ParamDomain {
    fn is_empty(&self) -> bool {
        match self {
            ParamDomain::Int { min, max } => min > max,
            ParamDomain::Values(v) => v.is_empty(),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> JsonValue {
        match self {
            ParamDomain::Int { min, max } => JsonValue::from(rng.random_range(*min..=*max)),
            ParamDomain::Values(v) => v[rng.random_range(0..v.len())].clone(),
        }
    }
}

pub type ParamPoint = BTreeMap<String, JsonValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, ParamDomain>,
    pub n_trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trial {
    pub index: usize,
    pub point: ParamPoint,
    /// Validation score, or the failure message for failed trials.
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Samples `n_trials` points uniformly from the space and returns the point
/// maximizing the objective plus the full trial log. Failed trials are
/// recorded and skipped; all trials failing is an error.
pub fn random_grid_search(
    space: &SearchSpace,
    mut objective: impl FnMut(&ParamPoint) -> Result<f64>,
) -> Result<(ParamPoint, Vec<Trial>)> {
    if space.n_trials == 0 {
        return Err(Error::Config("n_trials must be >= 1".into()));
    }
    for (name, domain) in &space.params {
        if domain.is_empty() {
            return Err(Error::Config(format!("empty range for parameter `{name}`")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let mut log = Vec::with_capacity(space.n_trials);
    let mut best: Option<(usize, f64)> = None;
    for index in 0..space.n_trials {
        let point: ParamPoint = space
            .params
            .iter()
            .map(|(name, domain)| (name.clone(), domain.sample(&mut rng)))
            .collect();
        match objective(&point) {
            Ok(score) => {
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((index, score));
                }
                log.push(Trial {
                    index,
                    point,
                    score: Some(score),
                    error: None,
                });
            }
            Err(e) => log.push(Trial {
                index,
                point,
                score: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (winner, _) = best.ok_or_else(|| Error::Fit("all search trials failed".into()))?;
    Ok((log[winner].point.clone(), log))
}

/// Overlays a sampled point onto forest params. Recognized keys:
/// n_trees, max_depth, min_samples_split, min_samples_leaf,
/// features_per_split.
pub fn forest_params_from_point(base: &ForestParams, point: &ParamPoint) -> Result<ForestParams> {
    let mut params = *base;
    for (key, value) in point {
        let as_usize = || -> Result<usize> {
            value
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("parameter `{key}` must be an integer")))
        };
        match key.as_str() {
            "n_trees" => params.n_trees = as_usize()?,
            "max_depth" => params.tree.max_depth = Some(as_usize()?),
            "min_samples_split" => params.tree.min_samples_split = as_usize()?,
            "min_samples_leaf" => params.tree.min_samples_leaf = as_usize()?,
            "features_per_split" => {
                params.tree.features_per_split = match value.as_str() {
                    Some("sqrt") => FeatureSubset::Sqrt,
                    Some("all") => FeatureSubset::All,
                    _ => FeatureSubset::Count(as_usize()?),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown forest hyperparameter `{other}`"
                )))
            }
        }
    }
    Ok(params)
}
