//! Bootstrap-aggregated forests of CART trees with majority voting.
//! Per-tree seeds are derived from the master seed by index, so the fitted
//! model is a pure function of (data, params, seed) independent of any
//! training parallelism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::N_CLASSES;
use crate::error::{Error, Result};
use crate::learn::tree::{argmax_class, fit_tree_on_rows, DecisionTree, TreeParams};
use crate::learn::mix_seed;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    pub seed: u64,
}

fn default_bootstrap() -> bool {
    true
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            tree: TreeParams::default(),
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub n_features: usize,
}

/// Fits `n_trees` trees, each on its own bootstrap sample (n draws with
/// replacement) when bootstrap is on, with per-tree seed
/// `mix_seed(master, i)`.
pub fn fit_forest(x: &Matrix, y: &[u8], params: &ForestParams) -> Result<Forest> {
    if params.n_trees == 0 {
        return Err(Error::Config("n_trees must be >= 1".into()));
    }
    if x.n_rows() < 2 {
        return Err(Error::Fit(format!(
            "forest needs at least 2 rows, got {}",
            x.n_rows()
        )));
    }
    if x.n_rows() != y.len() {
        return Err(Error::Structural("x and y length mismatch".into()));
    }
    let n = x.n_rows();
    let mut trees = Vec::with_capacity(params.n_trees);
    for i in 0..params.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, i as u64));
        let rows: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        trees.push(fit_tree_on_rows(x, y, &rows, &params.tree, &mut rng)?);
    }
    Ok(Forest {
        trees,
        params: *params,
        n_features: x.n_cols,
    })
}

impl Forest {
    /// Majority vote over trees: the winning class (ties to the lower class
    /// number) and per-class vote fractions summing to 1.
    pub fn predict(&self, row: &[f64]) -> Result<(u8, [f64; N_CLASSES])> {
        if row.len() != self.n_features {
            return Err(Error::Structural(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features
            )));
        }
        let mut votes = [0u32; N_CLASSES];
        for tree in &self.trees {
            votes[tree.predict(row) as usize - 1] += 1;
        }
        let total = self.trees.len() as f64;
        let fractions = votes.map(|v| v as f64 / total);
        Ok((argmax_class(&votes), fractions))
    }

    pub fn predict_all(&self, x: &Matrix) -> Result<Vec<u8>> {
        (0..x.n_rows()).map(|i| Ok(self.predict(x.row(i))?.0)).collect()
    }

    /// Mean per-column impurity importance over trees, normalized to sum
    /// to 1 when any split happened.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.n_features];
        for tree in &self.trees {
            for (t, s) in total.iter_mut().zip(&tree.importance) {
                *t += s;
            }
        }
        let sum: f64 = total.iter().sum();
        if sum > 0.0 {
            for t in &mut total {
                *t /= sum;
            }
        }
        total
    }
}
