//! Unsupervised label elicitation by internal coherence maximization.
//!
//! Given unlabeled claims and a model of `P(label | claim, labeled context)`,
//! the search looks for the label assignment maximizing
//! `alpha * mutual_predictability - inconsistency` with simulated annealing
//! and pairwise consistency repair.

pub mod cli;
pub mod consistency;
pub mod data;
pub mod harness;
pub mod predictor;
pub mod scorer;
pub mod search;

pub use consistency::{ConsistencyLink, LinkKind, LinkSet};
pub use data::{Assignment, Dataset, Example, Label, LabelSpace};
pub use predictor::{Prediction, Predictor, PredictorError};
pub use scorer::{ScoreBreakdown, Scorer, ScoringMode};
pub use search::{run_icm, SearchConfig, TraceRecord};
