//! Exactly computable predictors for desk-scale experiments.
//!
//! Synthetic tasks hide a labeling function behind a seed. The planted oracle
//! answers with a Laplace-smoothed estimate of how well the context agrees
//! with its concept; the majority oracle ignores the target and echoes the
//! context's label frequencies.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{check_target, mix_seed, ContextWindow, PassCounter, Prediction, Predictor, PredictorError};
use crate::data::{Dataset, Label};

const TRUE: Label = Label(0);
const FALSE: Label = Label(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// The oracle's concept is the planted labeling.
    PlantedConcept,
    /// The oracle prefers whatever label dominates the context.
    MajorityBias,
    /// The oracle holds a concept unrelated to the planted labels.
    NonSalient,
}

impl std::str::FromStr for OracleMode {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "planted" | "planted_concept" => Ok(Self::PlantedConcept),
            "majority" | "majority_bias" => Ok(Self::MajorityBias),
            "non_salient" | "non-salient" => Ok(Self::NonSalient),
            other => Err(SpecError(format!("unknown oracle mode `{other}`"))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid synthetic task: {0}")]
pub struct SpecError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub size: usize,
    pub planted_seed: u64,
    pub mode: OracleMode,
    /// Laplace constant.
    pub smoothing: f64,
    /// Fraction of examples placed in asymmetry pairs.
    pub link_fraction: f64,
    /// Weight the planted oracle gives to context labels that contradict its
    /// concept. 1 counts them like any other context label; 0 ignores them.
    pub contrary_weight: f64,
    /// Also forbid both claims of a pair being False (exactly one holds).
    pub exclusive_pairs: bool,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            size: 200,
            planted_seed: 0,
            mode: OracleMode::PlantedConcept,
            smoothing: 1.0,
            link_fraction: 0.5,
            contrary_weight: 0.0,
            exclusive_pairs: false,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.size < 2 {
            return Err(SpecError("size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.link_fraction) {
            return Err(SpecError("link_fraction must lie in [0, 1]".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(SpecError("smoothing must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.contrary_weight) {
            return Err(SpecError("contrary_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        ((self.link_fraction * self.size as f64).floor() as usize) / 2
    }

    pub fn example_id(&self, index: usize) -> String {
        let width = (self.size.saturating_sub(1)).to_string().len().max(4);
        format!("ex-{index:0width$}")
    }
}

/// The hidden structure of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub ids: Vec<String>,
    /// `(forward, reverse)` partner pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Labeling the oracle recognizes.
    pub concept: Vec<Label>,
    /// Labeling used for evaluation (the golden labels).
    pub evaluation: Vec<Label>,
}

fn random_label<R: Rng>(rng: &mut R) -> Label {
    if rng.random_bool(0.5) {
        TRUE
    } else {
        FALSE
    }
}

/// Regenerates the hidden task structure from its seed.
pub fn planted_task(spec: &SyntheticTaskSpec) -> Result<PlantedTask, SpecError> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.planted_seed, 0x5eed_0001]));
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let pairs: Vec<(usize, usize)> = (0..spec.pair_count())
        .map(|k| (perm[2 * k], perm[2 * k + 1]))
        .collect();

    let mut concept = vec![FALSE; n];
    let mut paired = vec![false; n];
    for &(a, b) in &pairs {
        // a comparison pair: exactly one of the two claims holds
        let (la, lb) = if rng.random_bool(0.5) { (TRUE, FALSE) } else { (FALSE, TRUE) };
        concept[a] = la;
        concept[b] = lb;
        paired[a] = true;
        paired[b] = true;
    }
    for (i, c) in concept.iter_mut().enumerate() {
        if !paired[i] {
            *c = random_label(&mut rng);
        }
    }

    let evaluation = match spec.mode {
        OracleMode::PlantedConcept | OracleMode::MajorityBias => concept.clone(),
        OracleMode::NonSalient => {
            let mut eval_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[spec.planted_seed, 0x5eed_0002]));
            (0..n).map(|_| random_label(&mut eval_rng)).collect()
        }
    };
    Ok(PlantedTask {
        ids: (0..n).map(|i| spec.example_id(i)).collect(),
        pairs,
        concept,
        evaluation,
    })
}

/// Builds the oracle a synthetic task's mode calls for.
pub fn oracle_for(spec: &SyntheticTaskSpec) -> Result<Box<dyn Predictor>, SpecError> {
    Ok(match spec.mode {
        OracleMode::MajorityBias => Box::new(MajorityOracle::new(spec.smoothing)),
        OracleMode::PlantedConcept | OracleMode::NonSalient => {
            Box::new(PlantedOracle::from_spec(spec)?)
        }
    })
}

/// Same probability for every label.
#[derive(Debug, Default)]
pub struct UniformOracle {
    passes: PassCounter,
}

impl UniformOracle {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Predictor for UniformOracle {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError> {
        check_target(dataset, window, target)?;
        self.passes.bump();
        let k = dataset.label_space().len();
        Ok(Prediction::from_probs(&vec![1.0 / k as f64; k]))
    }

    fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    fn describe(&self) -> String {
        "oracle:uniform".into()
    }
}

/// Laplace-smoothed agreement with a hidden concept `f`.
///
/// With `k` context pairs labeled per `f`, `n - k` contradicting it,
/// smoothing `s`, contrary weight `w` and `L` labels:
/// `P(f(target)) = (s + k) / (L*s + k + w*(n - k))`; the remaining mass is
/// split evenly over the other labels. At `w = 1` this is
/// `(s + k) / (L*s + n)`.
#[derive(Debug)]
pub struct PlantedOracle {
    concept: HashMap<String, Label>,
    smoothing: f64,
    contrary_weight: f64,
    passes: PassCounter,
}

impl PlantedOracle {
    pub fn new(concept: HashMap<String, Label>, smoothing: f64, contrary_weight: f64) -> Self {
        Self {
            concept,
            smoothing,
            contrary_weight,
            passes: PassCounter::default(),
        }
    }

    pub fn from_spec(spec: &SyntheticTaskSpec) -> Result<Self, SpecError> {
        let task = planted_task(spec)?;
        let concept = task.ids.into_iter().zip(task.concept).collect();
        Ok(Self::new(concept, spec.smoothing, spec.contrary_weight))
    }

    fn concept_of(&self, dataset: &Dataset, index: usize) -> Result<Label, PredictorError> {
        let id = &dataset.example(index).id;
        self.concept
            .get(id)
            .copied()
            .ok_or_else(|| PredictorError::UnknownExample(id.clone()))
    }
}

impl Predictor for PlantedOracle {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError> {
        check_target(dataset, window, target)?;
        let mut agree = 0usize;
        for &(i, l) in window.pairs() {
            if self.concept_of(dataset, i)? == l {
                agree += 1;
            }
        }
        let want = self.concept_of(dataset, target)?;
        let labels = dataset.label_space().len();
        let s = self.smoothing;
        let k = agree as f64;
        let contrary = self.contrary_weight * (window.len() - agree) as f64;
        let denom = labels as f64 * s + k + contrary;
        let p_want = (s + k) / denom;
        let p_other = (s + contrary / (labels - 1) as f64) / denom;
        let probs: Vec<f64> = dataset
            .label_space()
            .labels()
            .map(|l| if l == want { p_want } else { p_other })
            .collect();
        self.passes.bump();
        Ok(Prediction::from_probs(&probs))
    }

    fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    fn describe(&self) -> String {
        format!(
            "oracle:planted(s={},w={})",
            self.smoothing, self.contrary_weight
        )
    }
}

/// `P(l) = (s + count of l in context) / (L*s + n)`, independent of the target.
#[derive(Debug)]
pub struct MajorityOracle {
    smoothing: f64,
    passes: PassCounter,
}

impl MajorityOracle {
    pub fn new(smoothing: f64) -> Self {
        Self {
            smoothing,
            passes: PassCounter::default(),
        }
    }
}

impl Predictor for MajorityOracle {
    fn label_distribution(
        &self,
        dataset: &Dataset,
        window: &ContextWindow,
        target: usize,
    ) -> Result<Prediction, PredictorError> {
        check_target(dataset, window, target)?;
        let space = dataset.label_space();
        let mut counts = vec![0usize; space.len()];
        for &(_, l) in window.pairs() {
            counts[l.index()] += 1;
        }
        let denom = space.len() as f64 * self.smoothing + window.len() as f64;
        let probs: Vec<f64> = counts
            .iter()
            .map(|&c| (self.smoothing + c as f64) / denom)
            .collect();
        self.passes.bump();
        Ok(Prediction::from_probs(&probs))
    }

    fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    fn describe(&self) -> String {
        format!("oracle:majority(s={})", self.smoothing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, LabelSpace};

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n).map(|i| Example::new(format!("e{i}"), "c")).collect(),
            LabelSpace::default(),
        )
        .unwrap()
    }

    fn oracle(concept: &[Label], w: f64) -> PlantedOracle {
        PlantedOracle::new(
            concept
                .iter()
                .enumerate()
                .map(|(i, &l)| (format!("e{i}"), l))
                .collect(),
            1.0,
            w,
        )
    }

    fn window(pairs: &[(usize, Label)]) -> ContextWindow {
        ContextWindow::new(pairs.to_vec(), 160)
    }

    #[test]
    fn uniform_is_half() {
        let ds = dataset(3);
        let p = UniformOracle::new()
            .label_distribution(&ds, &window(&[(1, TRUE)]), 0)
            .unwrap();
        assert_eq!(p.log_probs(), &[0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn planted_laplace_values() {
        let ds = dataset(8);
        let concept = [TRUE, FALSE, TRUE, TRUE, FALSE, FALSE, TRUE, FALSE];
        for w in [0.0, 1.0] {
            let o = oracle(&concept, w);
            let p = o.label_distribution(&ds, &ContextWindow::empty(), 0).unwrap();
            assert!((p.prob(TRUE) - 0.5).abs() < 1e-15);
            assert!((p.prob(FALSE) - 0.5).abs() < 1e-15);

            let ctx = window(&[(1, FALSE), (2, TRUE), (3, TRUE)]);
            let p = o.label_distribution(&ds, &ctx, 0).unwrap();
            assert!((p.prob(TRUE) - 0.8).abs() < 1e-12);
            assert_eq!(p.argmax(), TRUE);

            let ctx = window(&[(1, FALSE), (2, TRUE), (3, TRUE), (4, FALSE), (5, FALSE)]);
            let p = o.label_distribution(&ds, &ctx, 7).unwrap();
            assert!((p.prob(FALSE) - 6.0 / 7.0).abs() < 1e-12);
            assert!(p.is_normalized());
        }
    }

    #[test]
    fn contrary_weight_interpolates() {
        let ds = dataset(4);
        let concept = [TRUE, TRUE, TRUE, TRUE];
        // context: one agreeing, two contradicting
        let ctx = window(&[(1, TRUE), (2, FALSE), (3, FALSE)]);
        let literal = oracle(&concept, 1.0).label_distribution(&ds, &ctx, 0).unwrap();
        assert!((literal.prob(TRUE) - 2.0 / 5.0).abs() < 1e-12);
        let ignoring = oracle(&concept, 0.0).label_distribution(&ds, &ctx, 0).unwrap();
        assert!((ignoring.prob(TRUE) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn majority_values() {
        let ds = dataset(12);
        let o = MajorityOracle::new(1.0);
        let all_true: Vec<_> = (1..11).map(|i| (i, TRUE)).collect();
        let p = o.label_distribution(&ds, &window(&all_true), 0).unwrap();
        assert!((p.prob(TRUE) - 11.0 / 12.0).abs() < 1e-12);
        let balanced: Vec<_> = (1..11).map(|i| (i, Label((i % 2) as u16))).collect();
        let p = o.label_distribution(&ds, &window(&balanced), 0).unwrap();
        assert!((p.prob(TRUE) - 0.5).abs() < 1e-12);
        assert_eq!(o.forward_passes(), 2);
    }

    #[test]
    fn target_in_context_rejected() {
        let ds = dataset(2);
        let err = UniformOracle::new()
            .label_distribution(&ds, &window(&[(0, TRUE)]), 0)
            .unwrap_err();
        assert_eq!(err, PredictorError::TargetInContext("e0".into()));
    }

    #[test]
    fn planted_task_structure() {
        let spec = SyntheticTaskSpec {
            size: 200,
            link_fraction: 0.5,
            planted_seed: 3,
            ..Default::default()
        };
        let t = planted_task(&spec).unwrap();
        assert_eq!(t.pairs.len(), 50);
        for &(a, b) in &t.pairs {
            assert!(!(t.concept[a] == TRUE && t.concept[b] == TRUE));
        }
        assert_eq!(t, planted_task(&spec).unwrap());
        assert_eq!(t.concept, t.evaluation);

        let ns = SyntheticTaskSpec {
            mode: OracleMode::NonSalient,
            ..spec.clone()
        };
        let u = planted_task(&ns).unwrap();
        assert_eq!(u.concept, t.concept);
        assert_ne!(u.evaluation, u.concept);
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticTaskSpec {
            size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticTaskSpec {
            link_fraction: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("majority".parse::<OracleMode>().unwrap(), OracleMode::MajorityBias);
    }
}
