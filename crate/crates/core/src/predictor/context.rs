use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::LinkSet;
use crate::data::{Assignment, Dataset, Label};

/// Labeled examples shown to the predictor, in prompt order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContextWindow {
    pairs: Vec<(usize, Label)>,
    budget: usize,
}

impl ContextWindow {
    pub fn new(pairs: Vec<(usize, Label)>, budget: usize) -> Self {
        debug_assert!(pairs.len() <= budget || budget == 0);
        Self { pairs, budget }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[(usize, Label)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn contains(&self, index: usize) -> bool {
        self.pairs.iter().any(|&(i, _)| i == index)
    }

    /// Stable digest of `(target, pairs)`.
    pub fn fingerprint(&self, target: usize) -> u64 {
        let mut bytes = Vec::with_capacity(8 + self.pairs.len() * 10);
        bytes.extend_from_slice(&(target as u64).to_le_bytes());
        for &(i, l) in &self.pairs {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
            bytes.extend_from_slice(&l.0.to_le_bytes());
        }
        xxhash_rust::xxh3::xxh3_64(&bytes)
    }
}

/// Selects the context for `target`.
///
/// When every other labeled example fits in `budget`, all of them are used in
/// insertion order. Otherwise examples linked to the target come first, then
/// a sample of the rest seeded by `epoch_seed`; each tier keeps insertion
/// order.
pub fn build_context(
    assignment: &Assignment,
    links: &LinkSet,
    target: usize,
    budget: usize,
    epoch_seed: u64,
) -> ContextWindow {
    assert!(budget >= 1, "context budget must be at least 1");
    let others: Vec<(usize, Label)> = assignment.iter().filter(|&(i, _)| i != target).collect();
    if others.len() <= budget {
        return ContextWindow::new(others, budget);
    }
    let neighbours = links.neighbours(target);
    let (mut linked, rest): (Vec<_>, Vec<_>) =
        others.into_iter().partition(|(i, _)| neighbours.contains(i));
    if linked.len() >= budget {
        linked.truncate(budget);
        return ContextWindow::new(linked, budget);
    }
    let remaining = budget - linked.len();
    let mut rng = ChaCha8Rng::seed_from_u64(super::mix_seed(&[epoch_seed, target as u64]));
    let mut picked = rand::seq::index::sample(&mut rng, rest.len(), remaining).into_vec();
    picked.sort_unstable();
    linked.extend(picked.into_iter().map(|k| rest[k]));
    ContextWindow::new(linked, budget)
}

/// Renders the prompt: one block per context pair (claim followed by its
/// label token), blocks separated by a blank line, and the target claim last,
/// ending at the label slot.
pub fn render_prompt(dataset: &Dataset, window: &ContextWindow, target: usize) -> String {
    let space = dataset.label_space();
    let mut out = String::new();
    for &(i, l) in window.pairs() {
        out.push_str(&dataset.example(i).claim_text);
        out.push(' ');
        out.push_str(space.token(l));
        out.push_str("\n\n");
    }
    out.push_str(&dataset.example(target).claim_text);
    out
}
