//! Triple ingestion, vocabularies, reciprocal relations and the filter index.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix given to the name of an added reciprocal relation.
pub const RECIPROCAL_SUFFIX: &str = "_reverse";

/// A triple of names as it appears in a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// An integer-encoded fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// The reciprocal of this triple given the number of original relations:
    /// `(h, r, t) ↦ (t, r ± n, h)`. Applying it twice is the identity.
    pub fn reciprocal(self, original_relations: usize) -> Triple {
        let n = original_relations;
        let relation = if self.relation < n {
            self.relation + n
        } else {
            self.relation - n
        };
        Triple::new(self.tail, relation, self.head)
    }
}

/// Parses tab-separated triples, one per non-empty line. Accepts LF and CRLF.
pub fn parse_triples(bytes: &[u8]) -> Result<Vec<RawTriple>> {
    let text = std::str::from_utf8(bytes)?;
    parse_triples_str(text)
}

pub fn parse_triples_str(text: &str) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: idx + 1,
                found: fields.iter().filter(|f| !f.is_empty()).count(),
            });
        }
        out.push(RawTriple::new(fields[0], fields[1], fields[2]));
    }
    Ok(out)
}

/// Bijective name ↔ id maps with ids assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabNames", into = "VocabNames")]
pub struct Vocabulary {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabNames {
    entities: Vec<String>,
    relations: Vec<String>,
}

impl From<VocabNames> for Vocabulary {
    fn from(v: VocabNames) -> Self {
        Vocabulary::from_names(v.entities, v.relations)
    }
}

impl From<Vocabulary> for VocabNames {
    fn from(v: Vocabulary) -> Self {
        VocabNames {
            entities: v.entities,
            relations: v.relations,
        }
    }
}

fn intern(names: &mut Vec<String>, ids: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&id) = ids.get(name) {
        return id;
    }
    let id = names.len();
    names.push(name.to_owned());
    ids.insert(name.to_owned(), id);
    id
}

impl Vocabulary {
    /// Rebuilds a vocabulary from id-ordered name lists. Duplicate names keep
    /// their first id.
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Self {
        let entity_ids = entities
            .iter()
            .enumerate()
            .rev()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let relation_ids = relations
            .iter()
            .enumerate()
            .rev()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            entities,
            relations,
            entity_ids,
            relation_ids,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        self.entities.get(id).map(String::as_str)
    }

    pub fn relation_name(&self, id: usize) -> Option<&str> {
        self.relations.get(id).map(String::as_str)
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    fn encode(&mut self, raw: &RawTriple) -> Triple {
        let head = intern(&mut self.entities, &mut self.entity_ids, &raw.head);
        let relation = intern(&mut self.relations, &mut self.relation_ids, &raw.relation);
        let tail = intern(&mut self.entities, &mut self.entity_ids, &raw.tail);
        Triple::new(head, relation, tail)
    }

    pub fn decode(&self, t: Triple) -> Option<RawTriple> {
        Some(RawTriple::new(
            self.entity_name(t.head)?,
            self.relation_name(t.relation)?,
            self.entity_name(t.tail)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    reciprocal_added: bool,
    original_relations: usize,
}

impl Dataset {
    /// Encodes three raw splits. Ids are dense and assigned in first-seen
    /// order over train, then valid, then test.
    pub fn build(train: &[RawTriple], valid: &[RawTriple], test: &[RawTriple]) -> Self {
        let mut vocab = Vocabulary::default();
        let mut encode =
            |raw: &[RawTriple]| raw.iter().map(|t| vocab.encode(t)).collect::<Vec<_>>();
        let train = encode(train);
        let valid = encode(valid);
        let test = encode(test);
        let original_relations = vocab.num_relations();
        Self {
            vocab,
            train,
            valid,
            test,
            reciprocal_added: false,
            original_relations,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    /// Relation count including reciprocals when they have been added.
    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn original_relations(&self) -> usize {
        self.original_relations
    }

    pub fn reciprocal_added(&self) -> bool {
        self.reciprocal_added
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Adds `(t, r + n_r, h)` for every `(h, r, t)` in each split, doubling the
    /// relation vocabulary. Reciprocal relation `r + n_r` is named
    /// `<name>_reverse`.
    pub fn add_reciprocals(mut self) -> Result<Dataset> {
        if self.reciprocal_added {
            return Err(Error::State("reciprocal relations already added".into()));
        }
        let n = self.original_relations;
        let mut relations = self.vocab.relations.clone();
        for i in 0..n {
            let name = format!("{}{RECIPROCAL_SUFFIX}", self.vocab.relations[i]);
            if self.vocab.relation_ids.contains_key(&name) {
                return Err(Error::State(format!(
                    "reciprocal name {name:?} collides with an existing relation"
                )));
            }
            relations.push(name);
        }
        self.vocab = Vocabulary::from_names(std::mem::take(&mut self.vocab.entities), relations);
        for split in [&mut self.train, &mut self.valid, &mut self.test] {
            let extra: Vec<Triple> = split.iter().map(|t| t.reciprocal(n)).collect();
            split.extend(extra);
        }
        self.reciprocal_added = true;
        Ok(self)
    }

    /// Checks the id-range invariants of every triple.
    pub fn validate(&self) -> Result<()> {
        let (ne, nr) = (self.num_entities(), self.num_relations());
        for t in self.all_triples() {
            if t.head >= ne || t.tail >= ne || t.relation >= nr {
                return Err(Error::Logic(format!(
                    "triple {t:?} out of range ({ne}, {nr})"
                )));
            }
        }
        Ok(())
    }
}

/// Every known-true tail for each `(head, relation)` across all splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    pub fn build(dataset: &Dataset) -> Self {
        Self::from_triples(dataset.all_triples())
    }

    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut tails: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in triples {
            tails.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        for v in tails.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { tails }
    }

    /// Sorted known tails for `(head, relation)`; empty if none.
    pub fn tails(&self, head: usize, relation: usize) -> &[usize] {
        self.tails.get(&(head, relation)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.tails(t.head, t.relation)
            .binary_search(&t.tail)
            .is_ok()
    }

    pub fn len(&self) -> usize {
        self.tails.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tails.is_empty()
    }
}
