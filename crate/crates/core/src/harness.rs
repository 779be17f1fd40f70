//! Desk-scale evaluation: synthetic tasks, exhaustive optima for small
//! instances, the perturbed-label baseline and run reports.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{inconsistency_count, LinkSet};
use crate::data::{Assignment, ConstraintSpec, DataError, Dataset, Example, Label, LabelSpace, Orientation};
use crate::predictor::synthetic::{planted_task, SpecError};
use crate::predictor::{ContextWindow, Predictor, PredictorError, SyntheticTaskSpec};
use crate::scorer::{ScoreBreakdown, Scorer, ScoringMode};
use crate::search::TraceRecord;

pub const BRUTE_FORCE_MAX: usize = 16;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("brute force needs at most {BRUTE_FORCE_MAX} examples, got {0}")]
    TooLarge(usize),
    #[error("brute force needs an exact-mode scorer")]
    NotExact,
    #[error("label perturbation needs a binary label space")]
    NotBinary,
    #[error("target accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Materializes a synthetic task as a dataset. Golden labels are the task's
/// evaluation labels, which are also returned as the planted map.
pub fn generate_synthetic_task(
    spec: &SyntheticTaskSpec,
) -> Result<(Dataset, BTreeMap<String, Label>), HarnessError> {
    let task = planted_task(spec)?;
    let space = LabelSpace::default();
    let mut examples: Vec<Example> = task
        .ids
        .iter()
        .zip(&task.evaluation)
        .enumerate()
        .map(|(i, (id, &l))| {
            Example::new(id.clone(), format!("synthetic claim {i}")).with_golden(l)
        })
        .collect();
    for &(a, b) in &task.pairs {
        let (ida, idb) = (task.ids[a].clone(), task.ids[b].clone());
        examples[a].claim_text = format!("{} outranks {}", ida, idb);
        examples[b].claim_text = format!("{} outranks {}", idb, ida);
        examples[a].partner_id = Some(idb.clone());
        examples[a].orientation = Some(Orientation::Forward);
        examples[b].partner_id = Some(ida);
        examples[b].orientation = Some(Orientation::Reverse);
        if spec.exclusive_pairs {
            let f = space.token(flip(space.positive())).to_owned();
            examples[a].constraints.push(ConstraintSpec {
                with: idb,
                forbidden: vec![(f.clone(), f)],
            });
        }
    }
    let planted = task.ids.into_iter().zip(task.evaluation).collect();
    Ok((Dataset::new(examples, space)?, planted))
}

fn flip(label: Label) -> Label {
    Label(1 - label.0)
}

/// Exhaustive search over complete assignments. Ties go to the assignment
/// that comes first when labels are read in sorted-id order.
pub fn brute_force_optimum(
    dataset: &Dataset,
    scorer: &Scorer<'_>,
) -> Result<(Assignment, ScoreBreakdown), HarnessError> {
    let n = dataset.len();
    if n > BRUTE_FORCE_MAX {
        return Err(HarnessError::TooLarge(n));
    }
    let cfg = *scorer.config();
    if cfg.mode != ScoringMode::Exact {
        return Err(HarnessError::NotExact);
    }
    let labels = dataset.label_space().len();
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&a, &b| dataset.example(a).id.cmp(&dataset.example(b).id));
    let links = LinkSet::from_dataset(dataset);

    let decode = |mut code: u64| {
        let mut digits = vec![Label(0); n];
        for slot in (0..n).rev() {
            digits[slot] = Label((code % labels as u64) as u16);
            code /= labels as u64;
        }
        let mut a = Assignment::new(n);
        for (slot, &i) in sorted.iter().enumerate() {
            a.set(i, digits[slot]);
        }
        a
    };
    let total = (labels as u64).pow(n as u32);
    let scores: Vec<ScoreBreakdown> = (0..total)
        .into_par_iter()
        .map(|code| {
            let a = decode(code);
            let p = scorer.exact_mutual_predictability(&a)?;
            let i = inconsistency_count(&a, links.links());
            Ok(ScoreBreakdown::new(cfg.alpha, p, i, cfg.inconsistency_weight, cfg.mode))
        })
        .collect::<Result<_, PredictorError>>()?;
    let best = scores
        .iter()
        .map(|s| s.utility)
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best.abs().max(1.0);
    let code = scores
        .iter()
        .position(|s| s.utility >= best - tol)
        .expect("at least one assignment");
    Ok((decode(code as u64), scores[code]))
}

/// Flips exactly `round((1 - target_accuracy) * N)` labels, chosen uniformly.
pub fn perturb_labels(
    golden: &BTreeMap<String, Label>,
    space: &LabelSpace,
    target_accuracy: f64,
    seed: u64,
) -> Result<BTreeMap<String, Label>, HarnessError> {
    if !space.is_binary() {
        return Err(HarnessError::NotBinary);
    }
    if !(0.0..=1.0).contains(&target_accuracy) {
        return Err(HarnessError::BadAccuracy(target_accuracy));
    }
    let n = golden.len();
    let flips = ((1.0 - target_accuracy) * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, n, flips.min(n));
    let mut flipped = vec![false; n];
    for k in chosen {
        flipped[k] = true;
    }
    Ok(golden
        .iter()
        .zip(flipped)
        .map(|((id, &l), f)| (id.clone(), if f { flip(l) } else { l }))
        .collect())
}

/// Labels every example independently from an empty context.
pub fn zero_shot_baseline(
    dataset: &Dataset,
    predictor: &dyn Predictor,
    context_budget: usize,
) -> Result<Assignment, HarnessError> {
    let mut a = Assignment::new(dataset.len());
    let window = ContextWindow::new(Vec::new(), context_budget);
    for i in 0..dataset.len() {
        a.set(i, predictor.label_distribution(dataset, &window, i)?.argmax());
    }
    Ok(a)
}

/// Fraction of reference labels matched, counting only examples the
/// assignment has labeled. `None` when nothing overlaps.
pub fn labeled_agreement(
    assignment: &Assignment,
    dataset: &Dataset,
    reference: &BTreeMap<String, Label>,
) -> Option<f64> {
    let mut seen = 0usize;
    let mut correct = 0usize;
    for (id, &want) in reference {
        let Some(l) = dataset.index_of(id).and_then(|i| assignment.get(i)) else {
            continue;
        };
        seen += 1;
        correct += usize::from(l == want);
    }
    (seen > 0).then(|| correct as f64 / seen as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub examples: usize,
    pub labeled: usize,
    pub iterations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_golden: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_planted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutual_predictability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inconsistency: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_utility: Option<f64>,
    pub acceptance_rate: f64,
    pub forward_passes: u64,
    pub avg_forward_passes: f64,
    /// Fraction of labeled examples per label token, in label order.
    pub label_balance: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

/// Summarizes a finished run. Accuracy fields are computed over labeled
/// examples and omitted when no reference labels exist.
pub fn run_report(
    trace: &[TraceRecord],
    assignment: &Assignment,
    dataset: &Dataset,
    planted: Option<&BTreeMap<String, Label>>,
) -> Report {
    let labeled = assignment.labeled_count();
    let last = trace.last();
    let accepted = trace.iter().filter(|r| r.accepted).count();
    let forward_passes = last.map_or(0, |r| r.forward_passes);
    let space = dataset.label_space();
    let mut counts = vec![0usize; space.len()];
    for (_, l) in assignment.iter() {
        counts[l.index()] += 1;
    }
    let golden = dataset.golden_map();
    Report {
        examples: dataset.len(),
        labeled,
        iterations: last.map_or(0, |r| r.iteration),
        accuracy_golden: if golden.is_empty() {
            None
        } else {
            labeled_agreement(assignment, dataset, &golden)
        },
        accuracy_planted: planted.and_then(|p| labeled_agreement(assignment, dataset, p)),
        utility: last.map(|r| r.utility),
        mutual_predictability: last.map(|r| r.mutual_predictability),
        inconsistency: last.map(|r| r.inconsistency),
        best_utility: last.map(|r| r.best_utility),
        acceptance_rate: if trace.is_empty() {
            0.0
        } else {
            accepted as f64 / trace.len() as f64
        },
        forward_passes,
        avg_forward_passes: if labeled == 0 {
            0.0
        } else {
            forward_passes as f64 / labeled as f64
        },
        label_balance: space
            .labels()
            .map(|l| {
                let frac = if labeled == 0 {
                    0.0
                } else {
                    counts[l.index()] as f64 / labeled as f64
                };
                (space.token(l).to_owned(), frac)
            })
            .collect(),
        wall_clock_secs: None,
    }
}

impl Report {
    /// One `key=value` line per field, stable for diffing.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        put("examples", self.examples.to_string());
        put("labeled", self.labeled.to_string());
        put("iterations", self.iterations.to_string());
        if let Some(v) = self.accuracy_golden {
            put("accuracy_golden", format!("{v:.6}"));
        }
        if let Some(v) = self.accuracy_planted {
            put("accuracy_planted", format!("{v:.6}"));
        }
        if let Some(v) = self.utility {
            put("utility", format!("{v:.9}"));
        }
        if let Some(v) = self.mutual_predictability {
            put("mutual_predictability", format!("{v:.9}"));
        }
        if let Some(v) = self.inconsistency {
            put("inconsistency", v.to_string());
        }
        if let Some(v) = self.best_utility {
            put("best_utility", format!("{v:.9}"));
        }
        put("acceptance_rate", format!("{:.6}", self.acceptance_rate));
        put("forward_passes", self.forward_passes.to_string());
        put("avg_forward_passes", format!("{:.6}", self.avg_forward_passes));
        for (token, frac) in &self.label_balance {
            put(&format!("balance.{token}"), format!("{frac:.6}"));
        }
        if let Some(v) = self.wall_clock_secs {
            put("wall_clock_secs", format!("{v:.3}"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
