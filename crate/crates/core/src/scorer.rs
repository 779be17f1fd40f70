//! Mutual predictability, the combined utility and the per-example term
//! cache that keeps the search's query cost proportional to the labels it
//! changes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::consistency::{LabelState, LinkSet};
use crate::data::{Assignment, Dataset, Label};
use crate::predictor::{build_context, mix_seed, ContextWindow, Prediction, Predictor, PredictorError, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Every evaluation queries every labeled example.
    Exact,
    /// Terms are recomputed only for examples whose label changed.
    #[default]
    Cached,
}

impl std::str::FromStr for ScoringMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "cached" => Ok(Self::Cached),
            other => Err(format!("unknown scoring mode `{other}`")),
        }
    }
}

/// `utility = alpha * mutual_predictability - inconsistency_weight * inconsistency`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub alpha: f64,
    pub mutual_predictability: f64,
    pub inconsistency: usize,
    /// 1 normally, 0 when the consistency term is ablated.
    pub inconsistency_weight: f64,
    pub utility: f64,
    pub mode: ScoringMode,
}

impl ScoreBreakdown {
    pub fn new(
        alpha: f64,
        mutual_predictability: f64,
        inconsistency: usize,
        inconsistency_weight: f64,
        mode: ScoringMode,
    ) -> Self {
        Self {
            alpha,
            mutual_predictability,
            inconsistency,
            inconsistency_weight,
            utility: alpha * mutual_predictability - inconsistency_weight * inconsistency as f64,
            mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub alpha: f64,
    pub mode: ScoringMode,
    pub context_budget: usize,
    pub inconsistency_weight: f64,
    /// Seeds context sampling when the labeled set exceeds the budget.
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            alpha: 50.0,
            mode: ScoringMode::Cached,
            context_budget: 160,
            inconsistency_weight: 1.0,
            seed: 0,
        }
    }
}

/// Cached `log P(label | example, context)` for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermEntry {
    pub label: Label,
    pub log_prob: f64,
    /// Fingerprint of the window the term was computed under.
    pub fingerprint: u64,
    /// Context-sampling epoch; bumped on every recomputation.
    pub epoch: u64,
    /// Search step at which the term was computed.
    pub computed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TermCache {
    entries: Vec<Option<TermEntry>>,
}

impl TermCache {
    pub fn new(size: usize) -> Self {
        Self {
            entries: vec![None; size],
        }
    }

    pub fn get(&self, index: usize) -> Option<&TermEntry> {
        self.entries.get(index).and_then(Option::as_ref)
    }

    /// A term is current when it exists and was computed for the label the
    /// example now carries.
    pub fn is_current(&self, index: usize, label: Label) -> bool {
        self.get(index).is_some_and(|e| e.label == label)
    }

    fn next_epoch(&self, index: usize) -> u64 {
        self.get(index).map_or(1, |e| e.epoch + 1)
    }
}

/// Predictions already fetched during one search step, keyed by
/// `(target, window fingerprint)`.
pub type Memo = HashMap<(usize, u64), Prediction>;

/// Result of scoring a (possibly tentative) state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: ScoreBreakdown,
    /// Terms computed for examples the cache did not cover.
    pub fresh: Vec<(usize, TermEntry)>,
}

pub struct Scorer<'a> {
    dataset: &'a Dataset,
    links: &'a LinkSet,
    predictor: &'a dyn Predictor,
    config: ScorerConfig,
    cache: TermCache,
    clock: u64,
}

impl<'a> Scorer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        links: &'a LinkSet,
        predictor: &'a dyn Predictor,
        config: ScorerConfig,
    ) -> Self {
        Self {
            dataset,
            links,
            predictor,
            config,
            cache: TermCache::new(dataset.len()),
            clock: 0,
        }
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn predictor(&self) -> &dyn Predictor {
        self.predictor
    }

    pub fn cache(&self) -> &TermCache {
        &self.cache
    }

    pub fn set_cache(&mut self, cache: TermCache) {
        self.cache = cache;
    }

    /// Sets the step number stamped on newly computed terms.
    pub fn set_clock(&mut self, step: u64) {
        self.clock = step;
    }

    fn epoch_seed(&self, index: usize, epoch: u64) -> u64 {
        mix_seed(&[self.config.seed, index as u64, epoch])
    }

    /// The window used to (re)compute `index`'s term in the current mode.
    pub fn window_for(&self, assignment: &Assignment, index: usize) -> ContextWindow {
        let epoch = self.window_epoch(index);
        build_context(
            assignment,
            self.links,
            index,
            self.config.context_budget,
            self.epoch_seed(index, epoch),
        )
    }

    fn window_epoch(&self, index: usize) -> u64 {
        match self.config.mode {
            ScoringMode::Exact => 0,
            ScoringMode::Cached => self.cache.next_epoch(index),
        }
    }

    /// Label distribution for `index` given the rest of `assignment`,
    /// reusing `memo` when the same window was already queried.
    pub fn predict(
        &self,
        assignment: &Assignment,
        index: usize,
        memo: &mut Memo,
    ) -> Result<Prediction, PredictorError> {
        let window = self.window_for(assignment, index);
        let key = (index, window.fingerprint(index));
        if let Some(p) = memo.get(&key) {
            return Ok(p.clone());
        }
        let p = self.predictor.label_distribution(self.dataset, &window, index)?;
        memo.insert(key, p.clone());
        Ok(p)
    }

    /// Exact mutual predictability: one query per labeled example, summed in
    /// dataset order. Empty assignments score 0.
    pub fn exact_mutual_predictability(&self, assignment: &Assignment) -> Result<f64, PredictorError> {
        let labeled: Vec<(usize, Label)> = assignment
            .labeled_indices()
            .map(|i| (i, assignment.get(i).expect("labeled")))
            .collect();
        let queries: Vec<Query> = labeled
            .iter()
            .map(|&(i, _)| Query {
                window: build_context(
                    assignment,
                    self.links,
                    i,
                    self.config.context_budget,
                    self.epoch_seed(i, 0),
                ),
                target: i,
            })
            .collect();
        let preds = self.predictor.label_distributions(self.dataset, &queries)?;
        Ok(labeled
            .iter()
            .zip(&preds)
            .map(|(&(_, l), p)| p.log_prob(l))
            .sum())
    }

    /// Scores `state` without touching the cache.
    pub fn evaluate(&self, state: &LabelState, memo: &mut Memo) -> Result<Evaluation, PredictorError> {
        let assignment = state.assignment();
        let (p, fresh) = match self.config.mode {
            ScoringMode::Exact => (self.exact_mutual_predictability(assignment)?, Vec::new()),
            ScoringMode::Cached => self.cached_mutual_predictability(assignment, memo)?,
        };
        Ok(Evaluation {
            breakdown: self.breakdown(p, state.inconsistency()),
            fresh,
        })
    }

    fn breakdown(&self, p: f64, inconsistency: usize) -> ScoreBreakdown {
        ScoreBreakdown::new(
            self.config.alpha,
            p,
            inconsistency,
            self.config.inconsistency_weight,
            self.config.mode,
        )
    }

    fn cached_mutual_predictability(
        &self,
        assignment: &Assignment,
        memo: &mut Memo,
    ) -> Result<(f64, Vec<(usize, TermEntry)>), PredictorError> {
        let mut missing = Vec::new();
        let mut queries = Vec::new();
        for i in assignment.labeled_indices() {
            let label = assignment.get(i).expect("labeled");
            if self.cache.is_current(i, label) {
                continue;
            }
            let window = self.window_for(assignment, i);
            let fp = window.fingerprint(i);
            if !memo.contains_key(&(i, fp)) {
                queries.push(Query { window, target: i });
            }
            missing.push((i, label, fp));
        }
        let preds = self.predictor.label_distributions(self.dataset, &queries)?;
        for (q, p) in queries.iter().zip(preds) {
            memo.insert((q.target, q.window.fingerprint(q.target)), p);
        }
        let mut fresh = Vec::with_capacity(missing.len());
        for (i, label, fp) in missing {
            let p = &memo[&(i, fp)];
            fresh.push((
                i,
                TermEntry {
                    label,
                    log_prob: p.log_prob(label),
                    fingerprint: fp,
                    epoch: self.cache.next_epoch(i),
                    computed_at: self.clock,
                },
            ));
        }
        let mut fresh_iter = fresh.iter().peekable();
        let mut total = 0.0;
        for i in assignment.labeled_indices() {
            let term = match fresh_iter.peek() {
                Some((j, e)) if *j == i => {
                    let t = e.log_prob;
                    fresh_iter.next();
                    t
                }
                _ => self.cache.get(i).expect("current term").log_prob,
            };
            total += term;
        }
        Ok((total, fresh))
    }

    /// Stores terms computed by [`Scorer::evaluate`] for an accepted state.
    pub fn commit(&mut self, fresh: &[(usize, TermEntry)]) {
        for &(i, e) in fresh {
            self.cache.entries[i] = Some(e);
        }
    }

    /// Mutual predictability of the committed assignment. In cached mode any
    /// missing term is computed and stored.
    pub fn mutual_predictability(&mut self, assignment: &Assignment) -> Result<f64, PredictorError> {
        match self.config.mode {
            ScoringMode::Exact => self.exact_mutual_predictability(assignment),
            ScoringMode::Cached => {
                let (p, fresh) = self.cached_mutual_predictability(assignment, &mut Memo::new())?;
                self.commit(&fresh);
                Ok(p)
            }
        }
    }

    /// Full breakdown for the committed state.
    pub fn utility(&mut self, state: &LabelState) -> Result<ScoreBreakdown, PredictorError> {
        let p = self.mutual_predictability(state.assignment())?;
        Ok(self.breakdown(p, state.inconsistency()))
    }

    /// Recomputes one labeled example's term under a newly sampled window.
    /// Returns whether a query was issued; when the window and label match
    /// the cached ones nothing changes. On failure the old term is kept.
    pub fn refresh_term(&mut self, index: usize, assignment: &Assignment) -> Result<bool, PredictorError> {
        let label = assignment
            .get(index)
            .expect("refresh_term requires a labeled example");
        let epoch = self.cache.next_epoch(index);
        let window = build_context(
            assignment,
            self.links,
            index,
            self.config.context_budget,
            self.epoch_seed(index, epoch),
        );
        let fp = window.fingerprint(index);
        if let Some(e) = self.cache.get(index) {
            if e.label == label && e.fingerprint == fp {
                return Ok(false);
            }
        }
        let p = self.predictor.label_distribution(self.dataset, &window, index)?;
        self.cache.entries[index] = Some(TermEntry {
            label,
            log_prob: p.log_prob(label),
            fingerprint: fp,
            epoch,
            computed_at: self.clock,
        });
        Ok(true)
    }

    /// Refreshes the labeled term computed longest ago (lowest index on ties).
    pub fn refresh_stalest(&mut self, assignment: &Assignment) -> Result<Option<usize>, PredictorError> {
        let stalest = assignment
            .labeled_indices()
            .min_by_key(|&i| (self.cache.get(i).map_or(0, |e| e.computed_at), i));
        match stalest {
            Some(i) => {
                self.refresh_term(i, assignment)?;
                Ok(Some(i))
            }
            None => Ok(None),
        }
    }

    /// Refreshes every labeled term.
    pub fn refresh_all(&mut self, assignment: &Assignment) -> Result<usize, PredictorError> {
        let mut queried = 0;
        let labeled: Vec<usize> = assignment.labeled_indices().collect();
        for i in labeled {
            if self.refresh_term(i, assignment)? {
                queried += 1;
            }
        }
        Ok(queried)
    }
}
