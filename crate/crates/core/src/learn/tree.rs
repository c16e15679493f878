//! CART decision trees: greedy Gini-impurity minimization with midpoint
//! threshold enumeration and per-node feature subsampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::N_CLASSES;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Gini impurity `1 - sum (c_i / n)^2`. Errors on an all-zero count vector.
pub fn gini(counts: &[u32]) -> Result<f64> {
    let n: u64 = counts.iter().map(|&c| c as u64).sum();
    if n == 0 {
        return Err(Error::Data("gini of an all-zero count vector".into()));
    }
    let n = n as f64;
    Ok(1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
}

fn gini_unchecked(counts: &[u32; N_CLASSES], n: f64) -> f64 {
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub column: usize,
    pub threshold: f64,
    pub gain: f64,
}

fn class_counts(y: &[u8], rows: &[usize]) -> [u32; N_CLASSES] {
    let mut counts = [0u32; N_CLASSES];
    for &i in rows {
        counts[y[i] as usize - 1] += 1;
    }
    counts
}

/// Finds the split maximizing Gini gain over the candidate columns, with
/// thresholds at midpoints between consecutive distinct sorted values.
/// Ties break to the lower column index, then the lower threshold. Returns
/// `None` when no split has positive gain.
pub fn best_split(x: &Matrix, y: &[u8], rows: &[usize], candidates: &[usize]) -> Option<Split> {
    best_split_with_min_leaf(x, y, rows, candidates, 1)
}

pub(crate) fn best_split_with_min_leaf(
    x: &Matrix,
    y: &[u8],
    rows: &[usize],
    candidates: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let parent_counts = class_counts(y, rows);
    let parent_gini = gini_unchecked(&parent_counts, n as f64);
    if parent_gini == 0.0 {
        return None;
    }
    let mut cols: Vec<usize> = candidates.to_vec();
    cols.sort_unstable();
    cols.dedup();

    let mut best: Option<Split> = None;
    let mut cells: Vec<(f64, u8)> = Vec::with_capacity(n);
    for &col in &cols {
        cells.clear();
        cells.extend(rows.iter().map(|&i| (x.get(i, col), y[i])));
        cells.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0u32; N_CLASSES];
        let mut right = parent_counts;
        for i in 1..n {
            let class = cells[i - 1].1 as usize - 1;
            left[class] += 1;
            right[class] -= 1;
            if cells[i].0 == cells[i - 1].0 {
                continue;
            }
            if i < min_leaf || n - i < min_leaf {
                continue;
            }
            let threshold = 0.5 * (cells[i - 1].0 + cells[i].0);
            let gl = gini_unchecked(&left, i as f64);
            let gr = gini_unchecked(&right, (n - i) as f64);
            let gain = parent_gini - (i as f64 * gl + (n - i) as f64 * gr) / n as f64;
            if gain > best.map_or(0.0, |b| b.gain) {
                best = Some(Split {
                    column: col,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// How many columns to consider at each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSubset {
    All,
    /// round(sqrt(n_features)), the usual random-forest heuristic.
    Sqrt,
    Count(usize),
}

impl FeatureSubset {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            FeatureSubset::All => n_features,
            FeatureSubset::Sqrt => ((n_features as f64).sqrt().round() as usize).max(1),
            FeatureSubset::Count(k) => k.clamp(1, n_features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: FeatureSubset,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            features_per_split: FeatureSubset::All,
        }
    }
}

impl TreeParams {
    fn validate(&self) -> Result<()> {
        if self.min_samples_split < 2 {
            return Err(Error::Config("min_samples_split must be >= 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::Config("min_samples_leaf must be >= 1".into()));
        }
        if self.min_samples_leaf > self.min_samples_split {
            return Err(Error::Config(
                "min_samples_leaf must be <= min_samples_split".into(),
            ));
        }
        Ok(())
    }
}

/// Tree nodes in preorder; internal nodes send `x[column] <= threshold`
/// left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        column: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: [u32; N_CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    /// Per-column impurity importance accumulated during fitting:
    /// sum over internal nodes of (node fraction of samples) * gain.
    pub importance: Vec<f64>,
}

impl DecisionTree {
    pub fn leaf_counts(&self, row: &[f64]) -> &[u32; N_CLASSES] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Internal {
                    column,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*column] <= *threshold { *left } else { *right };
                }
                Node::Leaf { counts } => return counts,
            }
        }
    }

    /// Majority class of the reached leaf, 1..=5; ties to the lower class.
    pub fn predict(&self, row: &[f64]) -> u8 {
        argmax_class(self.leaf_counts(row))
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

pub(crate) fn argmax_class<T: PartialOrd + Copy>(counts: &[T; N_CLASSES]) -> u8 {
    let mut best = 0usize;
    for c in 1..N_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best as u8 + 1
}

/// Fits a CART tree by recursive greedy splitting. Stops on max_depth,
/// min_samples_split, node purity, or when no positive-gain split
/// respecting min_samples_leaf exists. `features_per_split` columns are
/// sampled without replacement per node from the rng.
pub fn fit_tree(x: &Matrix, y: &[u8], params: &TreeParams, rng: &mut impl Rng) -> Result<DecisionTree> {
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    fit_tree_on_rows(x, y, &rows, params, rng)
}

pub(crate) fn fit_tree_on_rows(
    x: &Matrix,
    y: &[u8],
    rows: &[usize],
    params: &TreeParams,
    rng: &mut impl Rng,
) -> Result<DecisionTree> {
    params.validate()?;
    if rows.is_empty() {
        return Err(Error::Fit("cannot fit a tree on zero rows".into()));
    }
    let n_features = x.n_cols;
    let k = params.features_per_split.resolve(n_features);
    let mut tree = DecisionTree {
        nodes: Vec::new(),
        importance: vec![0.0; n_features],
    };
    let n_root = rows.len() as f64;
    build(
        x,
        y,
        rows.to_vec(),
        0,
        params,
        k,
        n_root,
        rng,
        &mut tree,
    );
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn build(
    x: &Matrix,
    y: &[u8],
    rows: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    k: usize,
    n_root: f64,
    rng: &mut impl Rng,
    tree: &mut DecisionTree,
) -> usize {
    let counts = class_counts(y, &rows);
    let n = rows.len();
    let stop = params.max_depth.is_some_and(|d| depth >= d)
        || n < params.min_samples_split
        || counts.iter().filter(|&&c| c > 0).count() <= 1;
    let split = if stop {
        None
    } else {
        let candidates: Vec<usize> = if k >= x.n_cols {
            (0..x.n_cols).collect()
        } else {
            rand::seq::index::sample(rng, x.n_cols, k).into_vec()
        };
        best_split_with_min_leaf(x, y, &rows, &candidates, params.min_samples_leaf)
    };
    let Some(split) = split else {
        let at = tree.nodes.len();
        tree.nodes.push(Node::Leaf { counts });
        return at;
    };

    tree.importance[split.column] += (n as f64 / n_root) * split.gain;
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .into_iter()
        .partition(|&i| x.get(i, split.column) <= split.threshold);
    let at = tree.nodes.len();
    tree.nodes.push(Node::Internal {
        column: split.column,
        threshold: split.threshold,
        left: 0,
        right: 0,
    });
    let left = build(x, y, left_rows, depth + 1, params, k, n_root, rng, tree);
    let right = build(x, y, right_rows, depth + 1, params, k, n_root, rng, tree);
    if let Node::Internal {
        left: l, right: r, ..
    } = &mut tree.nodes[at]
    {
        *l = left;
        *r = right;
    }
    at
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[10, 0, 0, 0, 0]).unwrap(), 0.0);
        assert!((gini(&[2, 2, 2, 2, 2]).unwrap() - 0.8).abs() < 1e-12);
        assert!((gini(&[3, 1, 0, 0, 0]).unwrap() - 0.375).abs() < 1e-12);
        assert!(gini(&[0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn gini_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..500 {
            let counts: [u32; 5] = std::array::from_fn(|_| rng.random_range(0..20));
            if counts.iter().all(|&c| c == 0) {
                continue;
            }
            let g = gini(&counts).unwrap();
            assert!((0.0..=0.8 + 1e-12).contains(&g));
            let pure = counts.iter().filter(|&&c| c > 0).count() == 1;
            assert_eq!(g == 0.0, pure, "{counts:?}");
        }
    }

    #[test]
    fn best_split_separates_two_clusters() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![9.0], vec![10.0]]);
        let y = vec![1, 1, 2, 2];
        let split = best_split(&x, &y, &[0, 1, 2, 3], &[0]).unwrap();
        assert_eq!(split.column, 0);
        assert_eq!(split.threshold, 5.5);
        // Full purity: gain equals the parent impurity of 0.5.
        assert!((split.gain - 0.5).abs() < 1e-12);
    }

    #[test]
    fn best_split_none_when_labels_identical() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let y = vec![2, 2, 2];
        assert!(best_split(&x, &y, &[0, 1, 2], &[0]).is_none());
    }

    /// Independent brute-force enumerator over all (column, midpoint)
    /// pairs, used as the split-search oracle.
    fn oracle_best_split(x: &Matrix, y: &[u8], rows: &[usize], cols: &[usize]) -> Option<Split> {
        let n = rows.len();
        let mut counts = [0u32; 5];
        for &i in rows {
            counts[y[i] as usize - 1] += 1;
        }
        let g = |c: &[u32; 5], n: f64| 1.0 - c.iter().map(|&v| (v as f64 / n).powi(2)).sum::<f64>();
        let parent = g(&counts, n as f64);
        let mut best: Option<Split> = None;
        let mut sorted_cols = cols.to_vec();
        sorted_cols.sort_unstable();
        for &col in &sorted_cols {
            let mut values: Vec<f64> = rows.iter().map(|&i| x.get(i, col)).collect();
            values.sort_unstable_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let threshold = 0.5 * (w[0] + w[1]);
                let mut left = [0u32; 5];
                let mut right = [0u32; 5];
                let mut nl = 0usize;
                for &i in rows {
                    if x.get(i, col) <= threshold {
                        left[y[i] as usize - 1] += 1;
                        nl += 1;
                    } else {
                        right[y[i] as usize - 1] += 1;
                    }
                }
                let nr = n - nl;
                if nl == 0 || nr == 0 {
                    continue;
                }
                let gain =
                    parent - (nl as f64 * g(&left, nl as f64) + nr as f64 * g(&right, nr as f64)) / n as f64;
                if gain > best.map_or(0.0, |b| b.gain) {
                    best = Some(Split {
                        column: col,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    #[test]
    fn best_split_matches_brute_force_oracle() {
        use rand::Rng;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=20);
            let d = rng.random_range(1..=4);
            let rows_data: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(0..10) as f64).collect())
                .collect();
            let x = Matrix::from_rows(&rows_data);
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(1..=5)).collect();
            let rows: Vec<usize> = (0..n).collect();
            let cols: Vec<usize> = (0..d).collect();
            let ours = best_split(&x, &y, &rows, &cols);
            let oracle = oracle_best_split(&x, &y, &rows, &cols);
            match (ours, oracle) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.column, b.column, "seed {seed}");
                    assert_eq!(a.threshold, b.threshold, "seed {seed}");
                    assert!((a.gain - b.gain).abs() < 1e-12, "seed {seed}");
                }
                (a, b) => panic!("seed {seed}: ours {a:?} vs oracle {b:?}"),
            }
        }
    }

    #[test]
    fn consistent_data_is_memorized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let rows_data: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![i as f64, rng.random::<f64>()])
            .collect();
        let y: Vec<u8> = (0..50).map(|_| rng.random_range(1..=5)).collect();
        let x = Matrix::from_rows(&rows_data);
        let tree = fit_tree(&x, &y, &TreeParams::default(), &mut rng).unwrap();
        for i in 0..50 {
            assert_eq!(tree.predict(x.row(i)), y[i]);
        }
    }

    #[test]
    fn max_depth_zero_yields_majority_leaf() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        let y = vec![3, 3, 1];
        let params = TreeParams {
            max_depth: Some(0),
            ..TreeParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = fit_tree(&x, &y, &params, &mut rng).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict(&[5.0]), 3);
    }

    /// Hand-constructed two-split tree solving the XOR layout; the greedy
    /// fitter cannot find it (every first split has zero gain), so the
    /// structure itself is the oracle here.
    #[test]
    fn hand_built_depth_two_tree_solves_xor() {
        let tree = DecisionTree {
            nodes: vec![
                Node::Internal {
                    column: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 4,
                },
                Node::Internal {
                    column: 1,
                    threshold: 0.5,
                    left: 2,
                    right: 3,
                },
                Node::Leaf {
                    counts: [1, 0, 0, 0, 0],
                },
                Node::Leaf {
                    counts: [0, 1, 0, 0, 0],
                },
                Node::Internal {
                    column: 1,
                    threshold: 0.5,
                    left: 5,
                    right: 6,
                },
                Node::Leaf {
                    counts: [0, 1, 0, 0, 0],
                },
                Node::Leaf {
                    counts: [1, 0, 0, 0, 0],
                },
            ],
            importance: vec![0.0, 0.0],
        };
        assert_eq!(tree.depth(), 2);
        let points = [
            ([0.0, 0.0], 1),
            ([0.0, 1.0], 2),
            ([1.0, 0.0], 2),
            ([1.0, 1.0], 1),
        ];
        for (p, want) in points {
            assert_eq!(tree.predict(&p), want);
        }
    }

    #[test]
    fn near_xor_with_tiebreaker_point_is_learned_greedily() {
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.1, 0.0], // extra point breaks the zero-gain symmetry
        ]);
        let y = vec![1, 2, 2, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = fit_tree(&x, &y, &TreeParams::default(), &mut rng).unwrap();
        for i in 0..5 {
            assert_eq!(tree.predict(x.row(i)), y[i]);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let x = Matrix::zeros(0, 2);
        let y: Vec<u8> = vec![];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fit_tree(&x, &y, &TreeParams::default(), &mut rng).is_err());
    }

    #[test]
    fn min_samples_leaf_above_split_is_rejected() {
        let params = TreeParams {
            min_samples_split: 2,
            min_samples_leaf: 3,
            ..TreeParams::default()
        };
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fit_tree(&x, &[1, 2], &params, &mut rng).is_err());
    }
}
