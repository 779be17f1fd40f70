//! Dataset model, line-delimited record ingestion and golden-label accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("dangling partner: `{id}` names absent partner `{partner}`")]
    DanglingPartner { id: String, partner: String },
    #[error("`{id}` has an orientation without a partner_id")]
    OrientationWithoutPartner { id: String },
    #[error("`{id}` has a partner_id without an orientation")]
    PartnerWithoutOrientation { id: String },
    #[error("partner mismatch between `{id}` and `{partner}`: {reason}")]
    PartnerMismatch {
        id: String,
        partner: String,
        reason: String,
    },
    #[error("`{id}` has a final_answer but no group_key")]
    AnswerWithoutGroup { id: String },
    #[error("`{id}`: unknown label `{label}`")]
    UnknownLabel { id: String, label: String },
    #[error("`{id}`: invalid constraint: {reason}")]
    InvalidConstraint { id: String, reason: String },
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),
    #[error("no golden labels")]
    NoGoldenLabels,
    #[error("examples with golden labels are unlabeled: {}", .0.join(", "))]
    MissingLabels(Vec<String>),
    #[error("unknown example id `{0}`")]
    UnknownExample(String),
}

/// Index of a label within a [`LabelSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label(pub u16);

impl Label {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Ordered, duplicate-free set of label tokens. Order drives tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    tokens: Vec<String>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            tokens: vec!["True".to_owned(), "False".to_owned()],
        }
    }
}

impl LabelSpace {
    pub fn new<I, S>(tokens: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(DataError::InvalidLabelSpace(
                "at least two labels are required".into(),
            ));
        }
        if tokens.len() > u16::MAX as usize {
            return Err(DataError::InvalidLabelSpace("too many labels".into()));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(DataError::InvalidLabelSpace(format!("duplicate label `{t}`")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.tokens.len() == 2
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        (0..self.tokens.len()).map(|i| Label(i as u16))
    }

    pub fn token(&self, label: Label) -> &str {
        &self.tokens[label.index()]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn parse(&self, token: &str) -> Option<Label> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| Label(i as u16))
    }

    /// The label the pairwise constraint families treat as an affirmative
    /// claim ("True" in the default space).
    pub fn positive(&self) -> Label {
        Label(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Forward,
    Reverse,
}

impl Orientation {
    pub fn opposite(self) -> Self {
        match self {
            Orientation::Forward => Orientation::Reverse,
            Orientation::Reverse => Orientation::Forward,
        }
    }
}

/// An explicit pairwise constraint carried by a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// Id of the other example.
    pub with: String,
    /// Forbidden joint labels, ordered as (this example, other example).
    pub forbidden: Vec<(String, String)>,
}

/// One claim instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub claim_text: String,
    pub group_key: Option<String>,
    pub final_answer: Option<String>,
    pub partner_id: Option<String>,
    pub orientation: Option<Orientation>,
    pub constraints: Vec<ConstraintSpec>,
    golden_label: Option<Label>,
}

impl Example {
    pub fn new(id: impl Into<String>, claim_text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            claim_text: claim_text.into(),
            group_key: None,
            final_answer: None,
            partner_id: None,
            orientation: None,
            constraints: Vec::new(),
            golden_label: None,
        }
    }

    pub fn with_golden(mut self, label: Label) -> Self {
        self.golden_label = Some(label);
        self
    }

    pub fn has_golden(&self) -> bool {
        self.golden_label.is_some()
    }
}

/// Immutable collection of examples over a label space.
///
/// Golden labels are only reachable through [`Dataset::golden_label`], which
/// counts every read so tests can prove a labeling run never consulted them.
#[derive(Debug)]
pub struct Dataset {
    examples: Vec<Example>,
    label_space: LabelSpace,
    by_id: HashMap<String, usize>,
    golden_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            examples: self.examples.clone(),
            label_space: self.label_space.clone(),
            by_id: self.by_id.clone(),
            golden_reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.examples == other.examples && self.label_space == other.label_space
    }
}

impl Dataset {
    /// Builds a dataset, enforcing every example and cross-reference invariant.
    pub fn new(examples: Vec<Example>, label_space: LabelSpace) -> Result<Self, DataError> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if by_id.insert(ex.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId {
                    line: i + 1,
                    id: ex.id.clone(),
                });
            }
        }
        for ex in &examples {
            if ex.final_answer.is_some() && ex.group_key.is_none() {
                return Err(DataError::AnswerWithoutGroup { id: ex.id.clone() });
            }
            match (&ex.partner_id, ex.orientation) {
                (None, Some(_)) => {
                    return Err(DataError::OrientationWithoutPartner { id: ex.id.clone() })
                }
                (Some(_), None) => {
                    return Err(DataError::PartnerWithoutOrientation { id: ex.id.clone() })
                }
                (Some(partner), Some(orientation)) => {
                    let Some(&pi) = by_id.get(partner) else {
                        return Err(DataError::DanglingPartner {
                            id: ex.id.clone(),
                            partner: partner.clone(),
                        });
                    };
                    let p = &examples[pi];
                    if p.partner_id.as_deref() != Some(ex.id.as_str()) {
                        return Err(DataError::PartnerMismatch {
                            id: ex.id.clone(),
                            partner: partner.clone(),
                            reason: "partner does not reference back".into(),
                        });
                    }
                    if p.orientation != Some(orientation.opposite()) {
                        return Err(DataError::PartnerMismatch {
                            id: ex.id.clone(),
                            partner: partner.clone(),
                            reason: "orientations are not opposite".into(),
                        });
                    }
                }
                (None, None) => {}
            }
            for c in &ex.constraints {
                if c.with == ex.id {
                    return Err(DataError::InvalidConstraint {
                        id: ex.id.clone(),
                        reason: "constraint with itself".into(),
                    });
                }
                if !by_id.contains_key(&c.with) {
                    return Err(DataError::DanglingPartner {
                        id: ex.id.clone(),
                        partner: c.with.clone(),
                    });
                }
                if c.forbidden.is_empty() {
                    return Err(DataError::InvalidConstraint {
                        id: ex.id.clone(),
                        reason: "empty forbidden set".into(),
                    });
                }
                let distinct: std::collections::BTreeSet<_> = c.forbidden.iter().collect();
                if distinct.len() >= label_space.len() * label_space.len() {
                    return Err(DataError::InvalidConstraint {
                        id: ex.id.clone(),
                        reason: "every joint label is forbidden".into(),
                    });
                }
                for (a, b) in &c.forbidden {
                    for t in [a, b] {
                        if label_space.parse(t).is_none() {
                            return Err(DataError::UnknownLabel {
                                id: ex.id.clone(),
                                label: t.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            examples,
            label_space,
            by_id,
            golden_reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, index: usize) -> &Example {
        &self.examples[index]
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Evaluation-only accessor for the golden label of an example.
    pub fn golden_label(&self, index: usize) -> Option<Label> {
        self.golden_reads.fetch_add(1, Ordering::Relaxed);
        self.examples[index].golden_label
    }

    /// Number of golden-label reads since construction.
    pub fn golden_reads(&self) -> u64 {
        self.golden_reads.load(Ordering::Relaxed)
    }

    pub fn has_golden_labels(&self) -> bool {
        self.examples.iter().any(Example::has_golden)
    }

    /// Golden labels keyed by id, for evaluation and ablations.
    pub fn golden_map(&self) -> BTreeMap<String, Label> {
        (0..self.len())
            .filter_map(|i| self.golden_label(i).map(|l| (self.examples[i].id.clone(), l)))
            .collect()
    }
}

/// Partial map from example to label, remembering insertion order.
///
/// `version` is bumped on every mutation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    slots: Vec<Option<Label>>,
    order: Vec<usize>,
    version: u64,
}

impl Assignment {
    pub fn new(size: usize) -> Self {
        Self {
            slots: vec![None; size],
            order: Vec::new(),
            version: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, index: usize) -> Option<Label> {
        self.slots[index]
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.slots[index].is_some()
    }

    pub fn labeled_count(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.order.len() == self.slots.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Labeled examples in insertion order.
    pub fn insertion_order(&self) -> &[usize] {
        &self.order
    }

    /// Labeled `(index, label)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Label)> + '_ {
        self.order.iter().map(|&i| (i, self.slots[i].expect("ordered slot is labeled")))
    }

    /// Labeled indices in dataset order.
    pub fn labeled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
    }

    /// Sets a label, returning the previous one. New labels go to the end of
    /// the insertion order; relabels keep their position.
    pub fn set(&mut self, index: usize, label: Label) -> Option<Label> {
        let prev = self.slots[index].replace(label);
        if prev.is_none() {
            self.order.push(index);
        }
        self.version += 1;
        prev
    }

    /// Removes a label. Only used to undo tentative insertions.
    pub fn unset(&mut self, index: usize) -> Option<Label> {
        let prev = self.slots[index].take();
        if prev.is_some() {
            if self.order.last() == Some(&index) {
                self.order.pop();
            } else if let Some(pos) = self.order.iter().position(|&i| i == index) {
                self.order.remove(pos);
            }
            self.version += 1;
        }
        prev
    }

    /// Restores a slot to a previous value (label or unlabeled).
    pub fn restore(&mut self, index: usize, prev: Option<Label>) {
        match prev {
            Some(label) => {
                self.set(index, label);
            }
            None => {
                self.unset(index);
            }
        }
    }

    /// Builds an assignment from `(index, label)` pairs in insertion order.
    pub fn from_pairs(size: usize, pairs: impl IntoIterator<Item = (usize, Label)>) -> Self {
        let mut a = Self::new(size);
        for (i, l) in pairs {
            a.set(i, l);
        }
        a
    }

    /// Same labels regardless of insertion order or version.
    pub fn same_labels(&self, other: &Self) -> bool {
        self.slots == other.slots
    }

    /// Labels keyed by example id.
    pub fn to_id_map(&self, dataset: &Dataset) -> BTreeMap<String, Label> {
        self.iter()
            .map(|(i, l)| (dataset.example(i).id.clone(), l))
            .collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Record {
    id: Option<String>,
    claim: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partner_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    constraints: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    golden_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

fn parse_records(text: &str) -> Result<Vec<(usize, Record)>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| DataError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

/// Parses a line-delimited record stream into a validated dataset.
/// Any violation rejects the whole stream.
pub fn parse_dataset(text: &str, label_space: LabelSpace) -> Result<Dataset, DataError> {
    let records = parse_records(text)?;
    let mut examples = Vec::with_capacity(records.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, rec) in records {
        let id = rec.id.ok_or_else(|| DataError::Malformed {
            line,
            reason: "missing field `id`".into(),
        })?;
        let claim = rec.claim.ok_or_else(|| DataError::Malformed {
            line,
            reason: "missing field `claim`".into(),
        })?;
        if seen.insert(id.clone(), line).is_some() {
            return Err(DataError::DuplicateId { line, id });
        }
        let golden_label = match rec.golden_label {
            Some(tok) => Some(label_space.parse(&tok).ok_or(DataError::UnknownLabel {
                id: id.clone(),
                label: tok,
            })?),
            None => None,
        };
        examples.push(Example {
            id,
            claim_text: claim,
            group_key: rec.group_key,
            final_answer: rec.final_answer,
            partner_id: rec.partner_id,
            orientation: rec.orientation,
            constraints: rec.constraints,
            golden_label,
        });
    }
    Dataset::new(examples, label_space)
}

fn record_for(example: &Example, space: &LabelSpace) -> Record {
    Record {
        id: Some(example.id.clone()),
        claim: Some(example.claim_text.clone()),
        group_key: example.group_key.clone(),
        final_answer: example.final_answer.clone(),
        partner_id: example.partner_id.clone(),
        orientation: example.orientation,
        constraints: example.constraints.clone(),
        golden_label: example.golden_label.map(|l| space.token(l).to_owned()),
        label: None,
        source: None,
    }
}

fn push_record(out: &mut String, rec: &Record) {
    out.push_str(&serde_json::to_string(rec).expect("record serializes"));
    out.push('\n');
}

/// Serializes a dataset back to the record format (inverse of [`parse_dataset`]).
pub fn serialize_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    for ex in dataset.examples() {
        push_record(&mut out, &record_for(ex, dataset.label_space()));
    }
    out
}

/// Emits labeled records: every input field plus `label` and `source: "icm"`.
/// Unlabeled examples are written without a `label` field.
pub fn serialize_labels(dataset: &Dataset, assignment: &Assignment) -> String {
    let space = dataset.label_space();
    let mut out = String::new();
    for (i, ex) in dataset.examples().iter().enumerate() {
        let mut rec = record_for(ex, space);
        if let Some(l) = assignment.get(i) {
            rec.label = Some(space.token(l).to_owned());
            rec.source = Some("icm".to_owned());
        }
        push_record(&mut out, &rec);
    }
    out
}

/// Reads the `label` field of a labels file, keyed by id.
pub fn parse_labels(text: &str, label_space: &LabelSpace) -> Result<BTreeMap<String, Label>, DataError> {
    let mut out = BTreeMap::new();
    for (line, rec) in parse_records(text)? {
        let id = rec.id.ok_or_else(|| DataError::Malformed {
            line,
            reason: "missing field `id`".into(),
        })?;
        if let Some(tok) = rec.label {
            let label = label_space.parse(&tok).ok_or(DataError::UnknownLabel {
                id: id.clone(),
                label: tok,
            })?;
            if out.insert(id.clone(), label).is_some() {
                return Err(DataError::DuplicateId { line, id });
            }
        }
    }
    Ok(out)
}

/// Builds an assignment over `dataset` from an id-keyed label map.
pub fn assignment_from_map(
    dataset: &Dataset,
    labels: &BTreeMap<String, Label>,
) -> Result<Assignment, DataError> {
    let mut a = Assignment::new(dataset.len());
    for (id, &l) in labels {
        let i = dataset
            .index_of(id)
            .ok_or_else(|| DataError::UnknownExample(id.clone()))?;
        a.set(i, l);
    }
    Ok(a)
}

/// Fraction of golden-labeled examples whose assigned label matches.
pub fn accuracy(assignment: &Assignment, dataset: &Dataset) -> Result<f64, DataError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    let mut missing = Vec::new();
    for i in 0..dataset.len() {
        let Some(golden) = dataset.golden_label(i) else {
            continue;
        };
        total += 1;
        match assignment.get(i) {
            Some(l) if l == golden => correct += 1,
            Some(_) => {}
            None => missing.push(dataset.example(i).id.clone()),
        }
    }
    if total == 0 {
        return Err(DataError::NoGoldenLabels);
    }
    if !missing.is_empty() {
        return Err(DataError::MissingLabels(missing));
    }
    Ok(correct as f64 / total as f64)
}

/// Agreement between an assignment and a reference label map (e.g. planted
/// labels). Examples absent from the reference are ignored.
pub fn agreement(
    assignment: &Assignment,
    dataset: &Dataset,
    reference: &BTreeMap<String, Label>,
) -> Result<f64, DataError> {
    if reference.is_empty() {
        return Err(DataError::NoGoldenLabels);
    }
    let mut correct = 0usize;
    let mut missing = Vec::new();
    for (id, &want) in reference {
        let i = dataset
            .index_of(id)
            .ok_or_else(|| DataError::UnknownExample(id.clone()))?;
        match assignment.get(i) {
            Some(l) if l == want => correct += 1,
            Some(_) => {}
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingLabels(missing));
    }
    Ok(correct as f64 / reference.len() as f64)
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}
