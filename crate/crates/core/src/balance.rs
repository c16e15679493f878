//! Training-split rebalancing: SMOTE oversampling of minority classes and
//! seeded random undersampling of majority classes. Distances are computed
//! in the encoded/scaled feature space, so this runs after materialization
//! and only on the training split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::N_CLASSES;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::preprocess::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetCounts {
    /// floor(n / 5) per class.
    Uniform,
    PerClass([usize; N_CLASSES]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalancePolicy {
    pub targets: TargetCounts,
    /// SMOTE neighbor count, truncated to class size - 1 for tiny classes.
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: u64,
    /// When a class has a single member SMOTE is undefined; with this flag
    /// the class is filled by pure duplication instead of erroring.
    #[serde(default)]
    pub allow_duplication_fallback: bool,
}

fn default_k() -> usize {
    5
}

impl RebalancePolicy {
    pub fn uniform(seed: u64) -> Self {
        RebalancePolicy {
            targets: TargetCounts::Uniform,
            k: default_k(),
            seed,
            allow_duplication_fallback: false,
        }
    }

    pub fn target_for(&self, class: usize, n_total: usize) -> usize {
        match &self.targets {
            TargetCounts::Uniform => n_total / N_CLASSES,
            TargetCounts::PerClass(t) => t[class],
        }
    }
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the k nearest neighbors of `target` among `rows`, excluding
/// itself. Ties broken by lower row index.
fn k_nearest(rows: &[&[f64]], target: usize, k: usize) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, r)| (euclidean_sq(rows[target], r), i))
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.truncate(k);
    dists.into_iter().map(|(_, i)| i).collect()
}

/// Interpolates one synthetic point: `x + u * (nn - x)`, then re-snaps each
/// one-hot group to a single 1 at its argmax (ties to the lowest column
/// index). All-zero groups stay all-zero: both parents encoded a missing
/// category.
pub fn interpolate(
    x: &[f64],
    nn: &[f64],
    u: f64,
    onehot_groups: &[(usize, usize)],
) -> Vec<f64> {
    let mut point: Vec<f64> = x.iter().zip(nn).map(|(a, b)| a + u * (b - a)).collect();
    for &(start, end) in onehot_groups {
        let group = &point[start..end];
        let max = group.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max <= 0.0 {
            continue;
        }
        let argmax = group.iter().position(|&v| v == max).unwrap();
        for (off, slot) in point[start..end].iter_mut().enumerate() {
            *slot = if off == argmax { 1.0 } else { 0.0 };
        }
    }
    point
}

/// SMOTE: each synthetic row interpolates between a uniformly chosen class
/// row and one of its k nearest same-class neighbors (Euclidean), with a
/// uniform interpolation factor in [0, 1).
pub fn smote_oversample(
    class_rows: &[&[f64]],
    n_new: usize,
    k: usize,
    onehot_groups: &[(usize, usize)],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if class_rows.len() < 2 {
        return Err(Error::Data(format!(
            "SMOTE needs at least 2 rows per class, got {}; enable the duplication fallback for singleton classes",
            class_rows.len()
        )));
    }
    let k = k.max(1).min(class_rows.len() - 1);
    let neighbors: Vec<Vec<usize>> = (0..class_rows.len())
        .map(|i| k_nearest(class_rows, i, k))
        .collect();
    let mut synthetic = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let parent = rng.random_range(0..class_rows.len());
        let nn = neighbors[parent][rng.random_range(0..neighbors[parent].len())];
        let u: f64 = rng.random();
        synthetic.push(interpolate(
            class_rows[parent],
            class_rows[nn],
            u,
            onehot_groups,
        ));
    }
    Ok(synthetic)
}

/// Uniform sample without replacement of `n_keep` of `n_rows` row indices,
/// returned in ascending order.
pub fn random_undersample(n_rows: usize, n_keep: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n_keep == 0 || n_keep > n_rows {
        return Err(Error::Data(format!(
            "cannot keep {n_keep} of {n_rows} rows"
        )));
    }
    let mut indices: Vec<usize> = (0..n_rows).collect();
    indices.shuffle(rng);
    indices.truncate(n_keep);
    indices.sort_unstable();
    Ok(indices)
}

/// Rebalances the training matrix to the policy's per-class targets.
/// Classes below target keep all originals and gain SMOTE rows; classes
/// above target are undersampled; classes at target pass through. Original
/// surviving rows (in input order) precede all synthetic rows.
pub fn rebalance(fm: &FeatureMatrix, policy: &RebalancePolicy) -> Result<FeatureMatrix> {
    let n = fm.y.len();
    let groups = fm.manifest.onehot_groups();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, &label) in fm.y.iter().enumerate() {
        let c = label as usize - 1;
        members[c].push(i);
    }
    for c in 0..N_CLASSES {
        if members[c].is_empty() {
            return Err(Error::Data(format!(
                "class {} absent from training labels, cannot rebalance",
                c + 1
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(N_CLASSES);
    let mut synth: Vec<(u8, Vec<f64>)> = Vec::new();
    for c in 0..N_CLASSES {
        let target = policy.target_for(c, n);
        if target == 0 {
            return Err(Error::Config(format!(
                "rebalance target for class {} is 0",
                c + 1
            )));
        }
        let count = members[c].len();
        if count > target {
            let kept = random_undersample(count, target, &mut rng)?;
            keep.push(kept.into_iter().map(|i| members[c][i]).collect());
        } else {
            keep.push(members[c].clone());
            let n_new = target - count;
            if n_new > 0 {
                if count == 1 {
                    if !policy.allow_duplication_fallback {
                        return Err(Error::Data(format!(
                            "class {} has a single member; SMOTE is undefined (set allow_duplication_fallback to duplicate)",
                            c + 1
                        )));
                    }
                    let row = fm.x.row(members[c][0]).to_vec();
                    for _ in 0..n_new {
                        synth.push((c as u8 + 1, row.clone()));
                    }
                } else {
                    let rows: Vec<&[f64]> = members[c].iter().map(|&i| fm.x.row(i)).collect();
                    for point in smote_oversample(&rows, n_new, policy.k, &groups, &mut rng)? {
                        synth.push((c as u8 + 1, point));
                    }
                }
            }
        }
    }

    let mut surviving: Vec<usize> = keep.into_iter().flatten().collect();
    surviving.sort_unstable();
    let mut x = Matrix {
        data: Vec::with_capacity((surviving.len() + synth.len()) * fm.x.n_cols),
        n_cols: fm.x.n_cols,
    };
    let mut y = Vec::with_capacity(surviving.len() + synth.len());
    let mut keys = Vec::with_capacity(surviving.len() + synth.len());
    for &i in &surviving {
        x.push_row(fm.x.row(i));
        y.push(fm.y[i]);
        keys.push(fm.keys[i].clone());
    }
    for (label, row) in synth {
        x.push_row(&row);
        y.push(label);
        keys.push((format!("__synthetic_{}", y.len() - 1), crate::domain::PeriodIndex(0)));
    }
    Ok(FeatureMatrix {
        x,
        y,
        keys,
        manifest: fm.manifest.clone(),
        imputed_counts: fm.imputed_counts.clone(),
    })
}
