//! seerisk: a from-scratch toolkit for predicting the next-period risk
//! class (1..5) of social economy enterprises from three consecutive
//! semesters of filings.
//!
//! The pipeline: panel CSV -> lag windows -> one-hot encoding + scaling ->
//! optional SMOTE rebalancing of the training split -> random forest (or
//! logistic baseline) -> stratified holdout evaluation with 5x5 confusion
//! matrices. A synthetic cohort generator with a planted signal stands in
//! for the proprietary supervisory dataset.

pub mod balance;
pub mod cli;
pub mod domain;
pub mod error;
pub mod evaluate;
pub mod learn;
pub mod matrix;
pub mod preprocess;
pub mod synthgen;

pub use error::{Error, Result};
