//! Conditional label probabilities: the predictor contract, the context
//! window builder, synthetic oracles and the remote backend client.

mod context;
pub mod remote;
pub mod synthetic;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::data::{Dataset, Label};

pub use context::{build_context, render_prompt, ContextWindow};
pub use remote::{BackendConfig, RemoteBackend};
pub use synthetic::{MajorityOracle, OracleMode, PlantedOracle, SyntheticTaskSpec, UniformOracle};

/// Tolerance on the total probability mass of a prediction.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("backend {endpoint} unreachable after {attempts} attempt(s): {reason}")]
    Unreachable {
        endpoint: String,
        attempts: u32,
        reason: String,
    },
    #[error("backend {endpoint} rejected credentials (HTTP {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("backend {endpoint} returned HTTP {status}: {body}")]
    Rejected {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed backend response from {endpoint}: {reason}")]
    Malformed { endpoint: String, reason: String },
    #[error("label token `{0}` missing from backend response")]
    MissingLabel(String),
    #[error("example `{0}` is unknown to the predictor")]
    UnknownExample(String),
    #[error("target `{0}` appears in its own context")]
    TargetInContext(String),
}

/// A distribution over the label space, as per-label log-probabilities in
/// label-space order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    log_probs: Vec<f64>,
    pub forward_pass_cost: u32,
}

impl Prediction {
    /// Wraps probabilities that already sum to one.
    pub fn from_probs(probs: &[f64]) -> Self {
        Self {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
            forward_pass_cost: 1,
        }
    }

    /// Renormalizes raw log-probabilities over the supplied labels.
    pub fn from_logprobs(raw: &[f64]) -> Self {
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + raw.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Self {
            log_probs: raw.iter().map(|x| x - lse).collect(),
            forward_pass_cost: 1,
        }
    }

    pub fn log_prob(&self, label: Label) -> f64 {
        self.log_probs[label.index()]
    }

    pub fn prob(&self, label: Label) -> f64 {
        self.log_prob(label).exp()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn total_mass(&self) -> f64 {
        self.log_probs.iter().map(|x| x.exp()).sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= NORMALIZATION_TOLERANCE
    }

    /// Most probable label; ties go to the earliest label.
    pub fn argmax(&self) -> Label {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        Label(best as u16)
    }
}

/// One query: a context window and the example whose label is predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub window: ContextWindow,
    pub target: usize,
}

/// Source of `P(label | target, context)`.
pub trait Predictor: Send + Sync {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError>;

    /// Answers a batch of queries, in order. Implementations may fan out.
    fn label_distributions(
        &self,
        dataset: &Dataset,
        queries: &[Query],
    ) -> Result<Vec<Prediction>, PredictorError> {
        queries
            .iter()
            .map(|q| self.label_distribution(dataset, &q.window, q.target))
            .collect()
    }

    /// Backend queries answered so far.
    fn forward_passes(&self) -> u64;

    /// Short identity for manifests and logs.
    fn describe(&self) -> String;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError> {
        (**self).label_distribution(dataset, window, target)
    }

    fn label_distributions(
        &self,
        dataset: &Dataset,
        queries: &[Query],
    ) -> Result<Vec<Prediction>, PredictorError> {
        (**self).label_distributions(dataset, queries)
    }

    fn forward_passes(&self) -> u64 {
        (**self).forward_passes()
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError> {
        (**self).label_distribution(dataset, window, target)
    }

    fn label_distributions(
        &self,
        dataset: &Dataset,
        queries: &[Query],
    ) -> Result<Vec<Prediction>, PredictorError> {
        (**self).label_distributions(dataset, queries)
    }

    fn forward_passes(&self) -> u64 {
        (**self).forward_passes()
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Atomic forward-pass counter shared by predictor implementations.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

pub(crate) fn check_target(
    dataset: &Dataset,
    window: &ContextWindow,
    target: usize,
) -> Result<(), PredictorError> {
    if window.contains(target) {
        return Err(PredictorError::TargetInContext(
            dataset.example(target).id.clone(),
        ));
    }
    Ok(())
}

/// Mixes seed components into one 64-bit seed (stable across processes).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    xxhash_rust::xxh3::xxh3_64(&bytes)
}
