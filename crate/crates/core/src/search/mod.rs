//! The annealing search: initialization, cooling schedule, weighted target
//! sampling, label proposal, repair-then-score and Metropolis acceptance.

mod checkpoint;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{consistency_fix, FixIterations, FixOutcome, LabelState, LinkSet};
use crate::data::{Assignment, Dataset, Label};
use crate::predictor::{Predictor, PredictorError};
use crate::scorer::{Memo, ScoreBreakdown, Scorer, ScorerConfig, ScoringMode, TermCache};

pub use checkpoint::{
    read_checkpoint, write_atomic, Checkpoint, CheckpointError, CheckpointSink, NoCheckpoint,
    CHECKPOINT_FORMAT,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

/// How the first `k_init` labels are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitRegime {
    #[default]
    Random,
    /// Golden labels (semi-supervised start).
    Golden,
    /// Every initial label wrong.
    Worst,
}

impl std::str::FromStr for InitRegime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "golden" => Ok(Self::Golden),
            "worst" => Ok(Self::Worst),
            other => Err(format!("unknown init regime `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k_init: usize,
    pub t0: f64,
    pub t_min: f64,
    pub beta: f64,
    pub alpha: f64,
    /// Main-loop iterations; `None` runs one per example.
    pub iterations: Option<u64>,
    pub weight_factor: f64,
    pub seed: u64,
    pub fix_iterations: FixIterations,
    pub scoring_mode: ScoringMode,
    pub context_budget: usize,
    pub init: InitRegime,
    /// Include the inconsistency term in the utility and run consistency
    /// repair. Turning it off is the consistency ablation.
    pub consistency_term: bool,
    pub checkpoint_every: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k_init: 8,
            t0: 10.0,
            t_min: 0.01,
            beta: 0.99,
            alpha: 50.0,
            iterations: None,
            weight_factor: 100.0,
            seed: 0,
            fix_iterations: FixIterations::Auto,
            scoring_mode: ScoringMode::Cached,
            context_budget: 160,
            init: InitRegime::Random,
            consistency_term: true,
            checkpoint_every: 100,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_owned()));
        if !(self.t_min > 0.0 && self.t0 > self.t_min) {
            return bad("requires t0 > t_min > 0");
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return bad("beta must be positive");
        }
        if self.weight_factor.is_nan() || self.weight_factor < 1.0 {
            return bad("weight_factor must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if self.context_budget == 0 {
            return bad("context_budget must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }

    pub fn total_iterations(&self, dataset_size: usize) -> u64 {
        self.iterations.unwrap_or(dataset_size as u64)
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            alpha: self.alpha,
            mode: self.scoring_mode,
            context_budget: self.context_budget,
            inconsistency_weight: if self.consistency_term { 1.0 } else { 0.0 },
            seed: self.seed,
        }
    }
}

/// `max(t_min, t0 / (1 + beta * ln n))` for the 1-based iteration `n`.
pub fn temperature(n: u64, config: &SearchConfig) -> f64 {
    assert!(n >= 1, "iterations are 1-based");
    config
        .t_min
        .max(config.t0 / (1.0 + config.beta * (n as f64).ln()))
}

/// Metropolis rule: improvements always pass, otherwise accept with
/// probability `exp(delta / t)`.
pub fn accept<R: Rng + ?Sized>(delta_u: f64, t: f64, rng: &mut R) -> bool {
    assert!(t > 0.0, "temperature must be positive");
    if delta_u > 0.0 {
        return true;
    }
    rng.random::<f64>() < (delta_u / t).exp()
}

/// Sampling weight per example: `weight_factor` for unlabeled examples linked
/// to a labeled one, 1 otherwise.
pub fn target_weights(assignment: &Assignment, links: &LinkSet, weight_factor: f64) -> Vec<f64> {
    (0..assignment.size())
        .map(|i| {
            let boosted = !assignment.is_labeled(i)
                && links
                    .incident(i)
                    .iter()
                    .any(|&k| assignment.is_labeled(links.get(k).other(i)));
            if boosted {
                weight_factor
            } else {
                1.0
            }
        })
        .collect()
}

pub fn sample_target<R: Rng + ?Sized>(
    assignment: &Assignment,
    links: &LinkSet,
    weight_factor: f64,
    rng: &mut R,
) -> usize {
    let weights = target_weights(assignment, links, weight_factor);
    WeightedIndex::new(&weights)
        .expect("non-empty positive weights")
        .sample(rng)
}

/// One line of the search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub temperature: f64,
    pub target: String,
    pub proposed: String,
    pub delta_u: f64,
    pub accepted: bool,
    pub inconsistency: usize,
    pub labeled: usize,
    pub forward_passes: u64,
    pub rng_fingerprint: u64,
    /// Utility of the state kept after the step.
    pub utility: f64,
    pub mutual_predictability: f64,
    pub best_utility: f64,
    pub fix_iterations: usize,
    pub fix_converged: bool,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSnapshot {
    pub config: SearchConfig,
    pub iteration: u64,
    pub initialized: bool,
    pub rng: ChaCha8Rng,
    /// `(example id, label index)` in insertion order.
    pub assignment: Vec<(String, u16)>,
    pub cache: TermCache,
    pub current: Option<ScoreBreakdown>,
    pub best_utility: f64,
    pub forward_passes: u64,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmOutcome {
    pub assignment: Assignment,
    pub trace: Vec<TraceRecord>,
    pub score: Option<ScoreBreakdown>,
    pub forward_passes: u64,
}

pub struct Search<'a> {
    dataset: &'a Dataset,
    links: &'a LinkSet,
    config: SearchConfig,
    scorer: Scorer<'a>,
    state: LabelState,
    rng: ChaCha8Rng,
    iteration: u64,
    initialized: bool,
    current: Option<ScoreBreakdown>,
    best_utility: f64,
    trace: Vec<TraceRecord>,
    passes_before: u64,
    predictor_start: u64,
}

impl<'a> Search<'a> {
    pub fn new(
        dataset: &'a Dataset,
        links: &'a LinkSet,
        predictor: &'a dyn Predictor,
        config: SearchConfig,
    ) -> Result<Self, SearchError> {
        config.validate()?;
        let scorer = Scorer::new(dataset, links, predictor, config.scorer_config());
        Ok(Self {
            dataset,
            links,
            scorer,
            state: LabelState::new(Assignment::new(dataset.len()), links),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            initialized: false,
            current: None,
            best_utility: f64::NEG_INFINITY,
            trace: Vec::new(),
            passes_before: 0,
            predictor_start: predictor.forward_passes(),
            config,
        })
    }

    /// Rebuilds a search from a snapshot taken on the same dataset.
    pub fn resume(
        dataset: &'a Dataset,
        links: &'a LinkSet,
        predictor: &'a dyn Predictor,
        snapshot: SearchSnapshot,
    ) -> Result<Self, SearchError> {
        let mut s = Self::new(dataset, links, predictor, snapshot.config)?;
        let mut a = Assignment::new(dataset.len());
        for (id, l) in &snapshot.assignment {
            let i = dataset
                .index_of(id)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown example `{id}`")))?;
            if (*l as usize) >= dataset.label_space().len() {
                return Err(CheckpointError::Corrupt(format!("label {l} out of range")).into());
            }
            a.set(i, Label(*l));
        }
        s.state = LabelState::new(a, links);
        s.scorer.set_cache(snapshot.cache);
        s.rng = snapshot.rng;
        s.iteration = snapshot.iteration;
        s.initialized = snapshot.initialized;
        s.current = snapshot.current;
        s.best_utility = snapshot.best_utility;
        s.trace = snapshot.trace;
        s.passes_before = snapshot.forward_passes;
        Ok(s)
    }

    pub fn snapshot(&self) -> SearchSnapshot {
        SearchSnapshot {
            config: self.config.clone(),
            iteration: self.iteration,
            initialized: self.initialized,
            rng: self.rng.clone(),
            assignment: self
                .state
                .assignment()
                .iter()
                .map(|(i, l)| (self.dataset.example(i).id.clone(), l.0))
                .collect(),
            cache: self.scorer.cache().clone(),
            current: self.current,
            best_utility: self.best_utility,
            forward_passes: self.forward_passes(),
            trace: self.trace.clone(),
        }
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn assignment(&self) -> &Assignment {
        self.state.assignment()
    }

    pub fn state(&self) -> &LabelState {
        &self.state
    }

    pub fn scorer(&self) -> &Scorer<'a> {
        &self.scorer
    }

    pub fn scorer_mut(&mut self) -> &mut Scorer<'a> {
        &mut self.scorer
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn current(&self) -> Option<ScoreBreakdown> {
        self.current
    }

    pub fn total_iterations(&self) -> u64 {
        self.config.total_iterations(self.dataset.len())
    }

    pub fn is_finished(&self) -> bool {
        self.initialized && self.iteration >= self.total_iterations()
    }

    /// Backend queries consumed by this run, across resumes.
    pub fn forward_passes(&self) -> u64 {
        self.passes_before + (self.scorer.predictor().forward_passes() - self.predictor_start)
    }

    fn fix_policy(&self) -> FixIterations {
        self.config.fix_iterations
    }

    fn run_fix(&mut self, current: Option<f64>, memo: &mut Memo) -> Result<FixOutcome, PredictorError> {
        // ablating consistency drops the repair step along with the I term
        let m = if self.config.consistency_term {
            self.fix_policy().resolve(self.state.inconsistency())
        } else {
            0
        };
        let scorer = &self.scorer;
        consistency_fix(
            &mut self.state,
            self.links,
            self.dataset.label_space(),
            m,
            current,
            &mut self.rng,
            |s| scorer.evaluate(s, memo).map(|e| e.breakdown.utility),
        )
    }

    /// Labels `k_init` random examples per the init regime, then repairs them.
    /// On failure the search is left uninitialized with its seed state, so
    /// a snapshot taken afterwards resumes from the start.
    pub fn initialize(&mut self) -> Result<(), SearchError> {
        if self.initialized {
            return Ok(());
        }
        let rng_before = self.rng.clone();
        let res = self.try_initialize();
        if res.is_err() {
            self.rng = rng_before;
            self.state = LabelState::new(Assignment::new(self.dataset.len()), self.links);
            self.scorer.set_cache(TermCache::new(self.dataset.len()));
        }
        res
    }

    fn try_initialize(&mut self) -> Result<(), SearchError> {
        let n = self.dataset.len();
        let k = self.config.k_init;
        if k > n {
            return Err(SearchError::Init(format!("k_init {k} exceeds dataset size {n}")));
        }
        let space = self.dataset.label_space().clone();
        let chosen = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        for i in chosen {
            let label = match self.config.init {
                InitRegime::Random => Label(self.rng.random_range(0..space.len()) as u16),
                InitRegime::Golden | InitRegime::Worst => {
                    let golden = self.dataset.golden_label(i).ok_or_else(|| {
                        SearchError::Init(format!(
                            "{:?} initialization needs a golden label on `{}`",
                            self.config.init,
                            self.dataset.example(i).id
                        ))
                    })?;
                    if self.config.init == InitRegime::Golden {
                        golden
                    } else if space.is_binary() {
                        Label(1 - golden.0)
                    } else {
                        let wrong = self.rng.random_range(0..space.len() - 1) as u16;
                        Label(if wrong >= golden.0 { wrong + 1 } else { wrong })
                    }
                }
            };
            self.state.set(self.links, i, label);
        }
        self.scorer.set_clock(0);
        let mut memo = Memo::new();
        self.run_fix(None, &mut memo)?;
        self.state.commit();
        let score = self.scorer.utility(&self.state)?;
        self.current = Some(score);
        self.best_utility = score.utility;
        self.initialized = true;
        Ok(())
    }

    /// One main-loop iteration. On a backend failure the state, cache and RNG
    /// are left exactly as they were before the step.
    pub fn step(&mut self) -> Result<&TraceRecord, SearchError> {
        let rng_before = self.rng.clone();
        match self.try_step() {
            Ok(()) => Ok(self.trace.last().expect("step recorded")),
            Err(e) => {
                self.rng = rng_before;
                Err(e.into())
            }
        }
    }

    fn try_step(&mut self) -> Result<(), PredictorError> {
        let n = self.iteration + 1;
        let t = temperature(n, &self.config);
        self.scorer.set_clock(n);
        let target = sample_target(
            self.state.assignment(),
            self.links,
            self.config.weight_factor,
            &mut self.rng,
        );
        let mut memo = Memo::new();
        let proposed = self
            .scorer
            .predict(self.state.assignment(), target, &mut memo)?
            .argmax();

        let current = self.current.expect("initialized");
        let mark = self.state.mark();
        self.state.set(self.links, target, proposed);
        let outcome = self
            .run_fix(None, &mut memo)
            .and_then(|fix| Ok((fix, self.scorer.evaluate(&self.state, &mut memo)?)));
        let (fix, eval) = match outcome {
            Ok(v) => v,
            Err(e) => {
                self.state.rollback(self.links, mark);
                return Err(e);
            }
        };
        let delta = eval.breakdown.utility - current.utility;
        let accepted = accept(delta, t, &mut self.rng);
        if accepted {
            self.state.commit();
            self.scorer.commit(&eval.fresh);
            let mut kept = eval.breakdown;
            if self.config.scoring_mode == ScoringMode::Cached {
                match self.scorer.refresh_stalest(self.state.assignment()) {
                    Ok(_) => kept = self.scorer.utility(&self.state)?,
                    Err(e) => log::warn!("stale-term refresh failed, keeping old term: {e}"),
                }
            }
            self.current = Some(kept);
        } else {
            self.state.rollback(self.links, mark);
        }
        let kept = self.current.expect("initialized");
        self.best_utility = self.best_utility.max(kept.utility);
        self.iteration = n;
        let space = self.dataset.label_space();
        self.trace.push(TraceRecord {
            iteration: n,
            temperature: t,
            target: self.dataset.example(target).id.clone(),
            proposed: space.token(proposed).to_owned(),
            delta_u: delta,
            accepted,
            inconsistency: self.state.inconsistency(),
            labeled: self.state.assignment().labeled_count(),
            forward_passes: self.forward_passes(),
            rng_fingerprint: rng_fingerprint(&self.rng),
            utility: kept.utility,
            mutual_predictability: kept.mutual_predictability,
            best_utility: self.best_utility,
            fix_iterations: fix.iterations,
            fix_converged: fix.converged(),
        });
        Ok(())
    }

    /// Runs until `stop_at` iterations (capped at the configured total),
    /// saving a snapshot every `checkpoint_every` steps, at the end, and on
    /// failure.
    pub fn run_until(&mut self, stop_at: u64, sink: &mut dyn CheckpointSink) -> Result<(), SearchError> {
        if let Err(e) = self.initialize() {
            if matches!(e, SearchError::Predictor(_)) {
                sink.save(&self.snapshot())?;
            }
            return Err(e);
        }
        let stop_at = stop_at.min(self.total_iterations());
        while self.iteration < stop_at {
            if let Err(e) = self.step() {
                sink.save(&self.snapshot())?;
                return Err(e);
            }
            if self.iteration.is_multiple_of(self.config.checkpoint_every) {
                sink.save(&self.snapshot())?;
            }
        }
        sink.save(&self.snapshot())?;
        Ok(())
    }

    pub fn run(&mut self, sink: &mut dyn CheckpointSink) -> Result<(), SearchError> {
        self.run_until(self.total_iterations(), sink)
    }

    /// Labels every remaining example with the predictor's argmax given the
    /// current labels, repairs, and rescores. Used to compare finished runs
    /// against complete-assignment optima.
    pub fn complete_assignment(&mut self) -> Result<ScoreBreakdown, SearchError> {
        let unlabeled: Vec<usize> = (0..self.dataset.len())
            .filter(|&i| !self.state.assignment().is_labeled(i))
            .collect();
        let mut memo = Memo::new();
        for i in unlabeled {
            let label = self
                .scorer
                .predict(self.state.assignment(), i, &mut memo)?
                .argmax();
            self.state.set(self.links, i, label);
        }
        self.run_fix(None, &mut memo)?;
        self.state.commit();
        let score = self.scorer.utility(&self.state)?;
        self.current = Some(score);
        Ok(score)
    }

    pub fn outcome(&self) -> IcmOutcome {
        IcmOutcome {
            assignment: self.state.assignment().clone(),
            trace: self.trace.clone(),
            score: self.current,
            forward_passes: self.forward_passes(),
        }
    }
}

fn rng_fingerprint(rng: &ChaCha8Rng) -> u64 {
    let bytes = serde_json::to_vec(rng).expect("rng serializes");
    xxhash_rust::xxh3::xxh3_64(&bytes)
}

/// Runs the full search with no checkpointing.
pub fn run_icm(
    dataset: &Dataset,
    predictor: &dyn Predictor,
    config: &SearchConfig,
) -> Result<IcmOutcome, SearchError> {
    let links = LinkSet::from_dataset(dataset);
    if dataset.is_empty() {
        config.validate()?;
        return Ok(IcmOutcome {
            assignment: Assignment::new(0),
            trace: Vec::new(),
            score: None,
            forward_passes: 0,
        });
    }
    let mut search = Search::new(dataset, &links, predictor, config.clone())?;
    search.run(&mut NoCheckpoint)?;
    Ok(search.outcome())
}
