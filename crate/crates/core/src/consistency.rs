//! Pairwise consistency constraints, the inconsistency count and the
//! repair procedure that relabels violated pairs.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Assignment, Dataset, Label, LabelSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Asymmetry,
    AnswerMismatch,
    Custom,
}

/// A constraint between two examples. `first` precedes `second` in id order
/// and `forbidden` holds `(label of first, label of second)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsistencyLink {
    pub first: usize,
    pub second: usize,
    pub kind: LinkKind,
    pub forbidden: Vec<(Label, Label)>,
}

impl ConsistencyLink {
    /// Builds a canonical link; swaps endpoints (and forbidden pairs) when
    /// `a` sorts after `b` by id. Returns `None` if the invariants fail.
    pub fn canonical(
        dataset: &Dataset,
        a: usize,
        b: usize,
        kind: LinkKind,
        forbidden: impl IntoIterator<Item = (Label, Label)>,
    ) -> Option<Self> {
        if a == b {
            return None;
        }
        let swap = dataset.example(a).id > dataset.example(b).id;
        let (first, second) = if swap { (b, a) } else { (a, b) };
        let mut forbidden: Vec<(Label, Label)> = forbidden
            .into_iter()
            .map(|(x, y)| if swap { (y, x) } else { (x, y) })
            .collect();
        forbidden.sort();
        forbidden.dedup();
        let n = dataset.label_space().len();
        if forbidden.is_empty() || forbidden.len() >= n * n {
            return None;
        }
        Some(Self {
            first,
            second,
            kind,
            forbidden,
        })
    }

    pub fn involves(&self, index: usize) -> bool {
        self.first == index || self.second == index
    }

    pub fn other(&self, index: usize) -> usize {
        if self.first == index {
            self.second
        } else {
            self.first
        }
    }
}

/// True iff the joint label is forbidden by the link (1 = inconsistent).
pub fn violates(link: &ConsistencyLink, label_first: Label, label_second: Label) -> bool {
    link.forbidden.contains(&(label_first, label_second))
}

/// Every joint label the link allows, first label varying slowest.
pub fn consistent_options(link: &ConsistencyLink, space: &LabelSpace) -> Vec<(Label, Label)> {
    space
        .labels()
        .flat_map(|a| space.labels().map(move |b| (a, b)))
        .filter(|&(a, b)| !violates(link, a, b))
        .collect()
}

fn link_violated(link: &ConsistencyLink, assignment: &Assignment) -> bool {
    match (assignment.get(link.first), assignment.get(link.second)) {
        (Some(a), Some(b)) => violates(link, a, b),
        _ => false,
    }
}

/// Derives the constraint set from dataset metadata: one asymmetry link per
/// partner pair, one answer-mismatch link per same-group pair with different
/// final answers, and the explicit custom constraints. Sorted by id pair.
pub fn derive_links(dataset: &Dataset) -> Vec<ConsistencyLink> {
    let space = dataset.label_space();
    let pos = space.positive();
    let mut links = Vec::new();

    for (i, ex) in dataset.examples().iter().enumerate() {
        if let (Some(pid), Some(_)) = (&ex.partner_id, ex.orientation) {
            if let Some(j) = dataset.index_of(pid) {
                if ex.id < dataset.example(j).id {
                    links.extend(ConsistencyLink::canonical(
                        dataset,
                        i,
                        j,
                        LinkKind::Asymmetry,
                        [(pos, pos)],
                    ));
                }
            }
        }
        for c in &ex.constraints {
            let Some(j) = dataset.index_of(&c.with) else {
                continue;
            };
            let forbidden = c
                .forbidden
                .iter()
                .filter_map(|(a, b)| Some((space.parse(a)?, space.parse(b)?)));
            links.extend(ConsistencyLink::canonical(
                dataset,
                i,
                j,
                LinkKind::Custom,
                forbidden,
            ));
        }
    }

    let mut groups: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, ex) in dataset.examples().iter().enumerate() {
        if let (Some(g), Some(_)) = (&ex.group_key, &ex.final_answer) {
            groups.entry(g.as_str()).or_default().push(i);
        }
    }
    for members in groups.values() {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                if dataset.example(i).final_answer != dataset.example(j).final_answer {
                    links.extend(ConsistencyLink::canonical(
                        dataset,
                        i,
                        j,
                        LinkKind::AnswerMismatch,
                        [(pos, pos)],
                    ));
                }
            }
        }
    }

    links.sort_by(|a, b| {
        let ka = (&dataset.example(a.first).id, &dataset.example(a.second).id, a.kind);
        let kb = (&dataset.example(b.first).id, &dataset.example(b.second).id, b.kind);
        ka.cmp(&kb).then_with(|| a.forbidden.cmp(&b.forbidden))
    });
    links.dedup();
    links
}

/// Links plus a per-example incidence list.
#[derive(Debug, Clone, Default)]
pub struct LinkSet {
    links: Vec<ConsistencyLink>,
    by_example: Vec<Vec<usize>>,
}

impl LinkSet {
    pub fn new(size: usize, links: Vec<ConsistencyLink>) -> Self {
        let mut by_example = vec![Vec::new(); size];
        for (k, l) in links.iter().enumerate() {
            by_example[l.first].push(k);
            by_example[l.second].push(k);
        }
        Self { links, by_example }
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self::new(dataset.len(), derive_links(dataset))
    }

    pub fn links(&self) -> &[ConsistencyLink] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn get(&self, k: usize) -> &ConsistencyLink {
        &self.links[k]
    }

    /// Indices of the links touching `index`.
    pub fn incident(&self, index: usize) -> &[usize] {
        self.by_example.get(index).map_or(&[], Vec::as_slice)
    }

    pub fn is_linked(&self, index: usize) -> bool {
        !self.incident(index).is_empty()
    }

    /// Examples sharing a link with `index`, ascending.
    pub fn neighbours(&self, index: usize) -> BTreeSet<usize> {
        self.incident(index)
            .iter()
            .map(|&k| self.links[k].other(index))
            .collect()
    }
}

/// Number of violated links (each unordered pair counted once).
pub fn inconsistency_count(assignment: &Assignment, links: &[ConsistencyLink]) -> usize {
    links.iter().filter(|l| link_violated(l, assignment)).count()
}

/// The violated links, in canonical order.
pub fn inconsistent_pairs<'a>(
    assignment: &Assignment,
    links: &'a [ConsistencyLink],
) -> Vec<&'a ConsistencyLink> {
    links.iter().filter(|l| link_violated(l, assignment)).collect()
}

/// The set of violated links for one assignment version, maintained
/// incrementally as labels change.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InconsistencyIndex {
    violated: BTreeSet<usize>,
    version: u64,
}

impl InconsistencyIndex {
    pub fn build(links: &LinkSet, assignment: &Assignment) -> Self {
        let violated = links
            .links()
            .iter()
            .enumerate()
            .filter(|(_, l)| link_violated(l, assignment))
            .map(|(k, _)| k)
            .collect();
        Self {
            violated,
            version: assignment.version(),
        }
    }

    /// Re-checks the links incident to `index` after its label changed.
    pub fn update(&mut self, links: &LinkSet, assignment: &Assignment, index: usize) {
        for &k in links.incident(index) {
            if link_violated(links.get(k), assignment) {
                self.violated.insert(k);
            } else {
                self.violated.remove(&k);
            }
        }
        self.version = assignment.version();
    }

    pub fn count(&self) -> usize {
        self.violated.len()
    }

    pub fn violated(&self) -> impl Iterator<Item = usize> + '_ {
        self.violated.iter().copied()
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// An assignment together with its inconsistency index and an undo journal,
/// so tentative edits can be rolled back exactly.
#[derive(Debug, Clone)]
pub struct LabelState {
    assignment: Assignment,
    index: InconsistencyIndex,
    journal: Vec<(usize, Option<Label>)>,
}

impl LabelState {
    pub fn new(assignment: Assignment, links: &LinkSet) -> Self {
        let index = InconsistencyIndex::build(links, &assignment);
        Self {
            assignment,
            index,
            journal: Vec::new(),
        }
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn index(&self) -> &InconsistencyIndex {
        &self.index
    }

    pub fn inconsistency(&self) -> usize {
        self.index.count()
    }

    pub fn into_assignment(self) -> Assignment {
        self.assignment
    }

    pub fn set(&mut self, links: &LinkSet, index: usize, label: Label) {
        let prev = self.assignment.set(index, label);
        self.journal.push((index, prev));
        self.index.update(links, &self.assignment, index);
    }

    /// Position in the undo journal.
    pub fn mark(&self) -> usize {
        self.journal.len()
    }

    /// Undoes every edit made after `mark`.
    pub fn rollback(&mut self, links: &LinkSet, mark: usize) {
        while self.journal.len() > mark {
            let (i, prev) = self.journal.pop().expect("journal entry");
            self.assignment.restore(i, prev);
            self.index.update(links, &self.assignment, i);
        }
    }

    /// Forgets the journal, making the current edits permanent.
    pub fn commit(&mut self) {
        self.journal.clear();
    }

    /// Examples edited since `mark` (deduplicated, ascending).
    pub fn touched_since(&self, mark: usize) -> BTreeSet<usize> {
        self.journal[mark..].iter().map(|&(i, _)| i).collect()
    }
}

/// How many repair iterations to allow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixIterations {
    /// Ten per currently violated link, at least eight.
    #[default]
    Auto,
    Fixed(usize),
}

impl FixIterations {
    pub fn resolve(self, violated: usize) -> usize {
        match self {
            FixIterations::Auto => (10 * violated).max(8),
            FixIterations::Fixed(m) => m,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixOutcome {
    /// Loop iterations that sampled a violated link.
    pub iterations: usize,
    /// Relabelings applied.
    pub applied: usize,
    pub remaining: usize,
    /// Utility after repair, if it had to be evaluated.
    pub utility: Option<f64>,
}

impl FixOutcome {
    pub fn converged(&self) -> bool {
        self.remaining == 0
    }
}

/// Repairs violated links: each iteration samples one violated link,
/// scores every consistent relabeling of its endpoints, and keeps the best
/// one only if it strictly improves utility. Never lowers utility.
///
/// `utility` scores the current state; it is only invoked when a violation
/// exists. `current` may supply the already-known utility of the state.
pub fn consistency_fix<R, F, E>(
    state: &mut LabelState,
    links: &LinkSet,
    space: &LabelSpace,
    max_iterations: usize,
    current: Option<f64>,
    rng: &mut R,
    mut utility: F,
) -> Result<FixOutcome, E>
where
    R: Rng + ?Sized,
    F: FnMut(&LabelState) -> Result<f64, E>,
{
    let mut out = FixOutcome {
        utility: current,
        ..FixOutcome::default()
    };
    for _ in 0..max_iterations {
        let violated: Vec<usize> = state.index().violated().collect();
        if violated.is_empty() {
            break;
        }
        out.iterations += 1;
        let base = match out.utility {
            Some(u) => u,
            None => {
                let u = utility(state)?;
                out.utility = Some(u);
                u
            }
        };
        let link = links.get(violated[rng.random_range(0..violated.len())]).clone();
        let mut best: Option<((Label, Label), f64)> = None;
        for (a, b) in consistent_options(&link, space) {
            let mark = state.mark();
            state.set(links, link.first, a);
            state.set(links, link.second, b);
            let scored = utility(state);
            state.rollback(links, mark);
            let u = scored?;
            if best.is_none_or(|(_, bu)| u > bu) {
                best = Some(((a, b), u));
            }
        }
        if let Some(((a, b), u)) = best {
            if u > base {
                state.set(links, link.first, a);
                state.set(links, link.second, b);
                out.utility = Some(u);
                out.applied += 1;
            }
        }
    }
    out.remaining = state.inconsistency();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset, Example};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const T: Label = Label(0);
    const F: Label = Label(1);

    fn pair_dataset() -> Dataset {
        let text = r#"{"id":"b","claim":"B>A","partner_id":"a","orientation":"reverse"}
{"id":"a","claim":"A>B","partner_id":"b","orientation":"forward"}"#;
        parse_dataset(text, LabelSpace::default()).unwrap()
    }

    #[test]
    fn asymmetry_link_from_pair() {
        let ds = pair_dataset();
        let links = derive_links(&ds);
        assert_eq!(links.len(), 1);
        let l = &links[0];
        // canonical: "a" (index 1) first
        assert_eq!((l.first, l.second), (1, 0));
        assert_eq!(l.kind, LinkKind::Asymmetry);
        assert_eq!(l.forbidden, vec![(T, T)]);
        assert_eq!(ds.example(l.first).partner_id.as_deref(), Some("b"));
        assert_eq!(ds.example(l.second).partner_id.as_deref(), Some("a"));
    }

    #[test]
    fn answer_mismatch_links() {
        let text = r#"{"id":"s1","claim":"..5","group_key":"q","final_answer":"5"}
{"id":"s2","claim":"..5","group_key":"q","final_answer":"5"}
{"id":"s3","claim":"..7","group_key":"q","final_answer":"7"}
{"id":"s4","claim":"..9","group_key":"r","final_answer":"9"}"#;
        let ds = parse_dataset(text, LabelSpace::default()).unwrap();
        let links = derive_links(&ds);
        let pairs: Vec<(&str, &str)> = links
            .iter()
            .map(|l| (ds.example(l.first).id.as_str(), ds.example(l.second).id.as_str()))
            .collect();
        assert_eq!(pairs, vec![("s1", "s3"), ("s2", "s3")]);
        assert!(links.iter().all(|l| l.kind == LinkKind::AnswerMismatch));
    }

    #[test]
    fn no_metadata_no_links() {
        let ds = Dataset::new(
            vec![Example::new("x", "c"), Example::new("y", "d")],
            LabelSpace::default(),
        )
        .unwrap();
        assert!(derive_links(&ds).is_empty());
    }

    #[test]
    fn custom_constraints_canonicalized_and_deduplicated() {
        let text = r#"{"id":"b","claim":"x","constraints":[{"with":"a","forbidden":[["True","False"]]}]}
{"id":"a","claim":"y","constraints":[{"with":"b","forbidden":[["False","True"]]}]}"#;
        let ds = parse_dataset(text, LabelSpace::default()).unwrap();
        let links = derive_links(&ds);
        // both records state the same constraint from opposite sides
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].kind, LinkKind::Custom);
        assert_eq!(links[0].forbidden, vec![(F, T)]);
    }

    #[test]
    fn violates_asymmetry() {
        let ds = pair_dataset();
        let link = &derive_links(&ds)[0];
        assert!(violates(link, T, T));
        assert!(!violates(link, T, F));
        assert!(!violates(link, F, T));
        // both-False is outside the forbidden set
        assert!(!link.forbidden.contains(&(F, F)));
        assert!(!violates(link, F, F));
    }

    #[test]
    fn options_for_asymmetry() {
        let ds = pair_dataset();
        let link = &derive_links(&ds)[0];
        let all: Vec<(Label, Label)> = vec![(T, T), (T, F), (F, T), (F, F)];
        let expect: Vec<_> = all.into_iter().filter(|p| *p != (T, T)).collect();
        assert_eq!(consistent_options(link, &LabelSpace::default()), expect);
    }

    #[test]
    fn options_for_nearly_full_custom() {
        let ds = pair_dataset();
        let link =
            ConsistencyLink::canonical(&ds, 1, 0, LinkKind::Custom, [(T, T), (T, F), (F, T)])
                .unwrap();
        assert_eq!(consistent_options(&link, ds.label_space()), vec![(F, F)]);
        // forbidding every pair is not a valid link
        assert!(ConsistencyLink::canonical(
            &ds,
            1,
            0,
            LinkKind::Custom,
            [(T, T), (T, F), (F, T), (F, F)]
        )
        .is_none());
        assert!(ConsistencyLink::canonical(&ds, 0, 0, LinkKind::Custom, [(T, T)]).is_none());
    }

    fn four_pairs() -> (Dataset, LinkSet) {
        let mut text = String::new();
        for p in 0..4 {
            text.push_str(&format!(
                "{{\"id\":\"p{p}a\",\"claim\":\"x\",\"partner_id\":\"p{p}b\",\"orientation\":\"forward\"}}\n{{\"id\":\"p{p}b\",\"claim\":\"y\",\"partner_id\":\"p{p}a\",\"orientation\":\"reverse\"}}\n"
            ));
        }
        let ds = parse_dataset(&text, LabelSpace::default()).unwrap();
        let links = LinkSet::from_dataset(&ds);
        (ds, links)
    }

    #[test]
    fn counting() {
        let (ds, links) = four_pairs();
        assert_eq!(inconsistency_count(&Assignment::new(ds.len()), links.links()), 0);
        let all_true = Assignment::from_pairs(8, (0..8).map(|i| (i, T)));
        assert_eq!(inconsistency_count(&all_true, links.links()), 4);
        let alternating = Assignment::from_pairs(8, (0..8).map(|i| (i, Label((i % 2) as u16))));
        assert_eq!(inconsistency_count(&alternating, links.links()), 0);
        assert!(inconsistent_pairs(&alternating, links.links()).is_empty());

        let mut one = alternating.clone();
        one.set(1, T);
        let v = inconsistent_pairs(&one, links.links());
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].first, v[0].second), (0, 1));
    }

    #[test]
    fn state_rollback_restores_index() {
        let (ds, links) = four_pairs();
        let mut state = LabelState::new(Assignment::from_pairs(8, [(0, T), (2, T)]), &links);
        let before_index = state.index().violated().collect::<Vec<_>>();
        let before = state.assignment().clone();
        let mark = state.mark();
        state.set(&links, 1, T);
        state.set(&links, 3, T);
        state.set(&links, 0, F);
        assert_eq!(state.inconsistency(), 1);
        state.rollback(&links, mark);
        assert!(state.assignment().same_labels(&before));
        assert_eq!(state.assignment().insertion_order(), before.insertion_order());
        assert_eq!(state.index().violated().collect::<Vec<_>>(), before_index);
        assert_eq!(
            state.index().violated().collect::<Vec<_>>(),
            InconsistencyIndex::build(&links, state.assignment())
                .violated()
                .collect::<Vec<_>>()
        );
        let _ = ds;
    }

    fn neg_inconsistency(state: &LabelState) -> Result<f64, ()> {
        Ok(-(state.inconsistency() as f64))
    }

    #[test]
    fn fix_without_violations_is_free() {
        let (_, links) = four_pairs();
        let mut state = LabelState::new(Assignment::from_pairs(8, [(0, T), (1, F)]), &links);
        let mut calls = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = consistency_fix(
            &mut state,
            &links,
            &LabelSpace::default(),
            50,
            None,
            &mut rng,
            |s| {
                calls += 1;
                neg_inconsistency(s)
            },
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(calls, 0);
    }

    #[test]
    fn fix_with_zero_budget_is_identity() {
        let (_, links) = four_pairs();
        let a = Assignment::from_pairs(8, [(0, T), (1, T)]);
        let mut state = LabelState::new(a.clone(), &links);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = consistency_fix(
            &mut state,
            &links,
            &LabelSpace::default(),
            0,
            None,
            &mut rng,
            neg_inconsistency,
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert!(state.assignment().same_labels(&a));
    }

    #[test]
    fn fix_clears_violations_under_indifferent_scoring() {
        let (_, links) = four_pairs();
        let mut state = LabelState::new(Assignment::from_pairs(8, (0..8).map(|i| (i, T))), &links);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = consistency_fix(
            &mut state,
            &links,
            &LabelSpace::default(),
            FixIterations::Auto.resolve(4),
            None,
            &mut rng,
            neg_inconsistency,
        )
        .unwrap();
        assert!(out.converged());
        assert_eq!(out.applied, 4);
        assert_eq!(out.utility, Some(0.0));
        assert!(state.assignment().is_complete());
    }

    #[test]
    fn fix_iteration_policy() {
        assert_eq!(FixIterations::Auto.resolve(0), 8);
        assert_eq!(FixIterations::Auto.resolve(3), 30);
        assert_eq!(FixIterations::Fixed(2).resolve(100), 2);
    }
}
