//! Learners: CART decision trees, bootstrap-aggregated random forests with
//! majority voting, a multinomial logistic-regression baseline, and random
//! hyperparameter search.

pub mod forest;
pub mod logistic;
pub mod model;
pub mod search;
pub mod tree;

pub use forest::{fit_forest, Forest, ForestParams};
pub use logistic::{fit_logistic, LogisticHyper, LogisticModel};
pub use model::{ModelMetadata, RandomForestModel, MODEL_FORMAT_VERSION};
pub use search::{random_grid_search, ParamDomain, ParamPoint, SearchSpace, Trial};
pub use tree::{best_split, fit_tree, gini, DecisionTree, FeatureSubset, Node, Split, TreeParams};

/// SplitMix64-style seed mixer used to derive independent per-tree seeds
/// from a master seed; results do not depend on scheduling.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
