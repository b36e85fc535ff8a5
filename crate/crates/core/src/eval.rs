//! Filtered ranking evaluation: MR, MRR and hits@{1,3,10} over both
//! prediction directions.
//!
//! Head prediction for `(h, r, t)` is done as tail prediction for the
//! reciprocal query `(t, r⁻¹, ?)`, so every evaluation is a batch of 1-N
//! tail queries.

use rayon::prelude::*;

use crate::data::{Dataset, FilterIndex, Split, Triple};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, Query};
use crate::tensor::{Matrix, Mode};

/// How candidates scoring exactly the same as the target are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Only strictly higher scores push the target down.
    #[default]
    Optimistic,
    /// The target takes the mean position within its tie group.
    MeanOfTies,
}

impl TiePolicy {
    pub fn name(self) -> &'static str {
        match self {
            TiePolicy::Optimistic => "optimistic",
            TiePolicy::MeanOfTies => "mean",
        }
    }
}

impl std::str::FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimistic" => Ok(TiePolicy::Optimistic),
            "mean" | "mean-of-ties" => Ok(TiePolicy::MeanOfTies),
            other => Err(Error::Config(format!("unknown tie policy {other:?}"))),
        }
    }
}

/// Rank of `target` among the candidates that are not other known-true
/// entities. `known_true` must be sorted and contain `target`.
pub fn filtered_rank(
    scores: &[f64],
    target: usize,
    known_true: &[usize],
    policy: TiePolicy,
) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::Logic(format!(
            "target {target} out of range {}",
            scores.len()
        )));
    }
    if known_true.binary_search(&target).is_err() {
        return Err(Error::Logic(format!(
            "target {target} is not among the known-true entities"
        )));
    }
    let s = scores[target];
    let mut higher = 0usize;
    let mut ties = 0usize;
    let mut known = known_true.iter().peekable();
    for (i, &v) in scores.iter().enumerate() {
        while known.next_if(|&&k| k < i).is_some() {}
        if known.peek() == Some(&&i) {
            continue;
        }
        if v > s {
            higher += 1;
        } else if v == s {
            ties += 1;
        }
    }
    Ok(match policy {
        TiePolicy::Optimistic => 1.0 + higher as f64,
        TiePolicy::MeanOfTies => 1.0 + higher as f64 + ties as f64 / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tail,
    Head,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Tail => "tail",
            Direction::Head => "head",
        }
    }
}

/// One ranked prediction. `triple` is always in its original orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankRecord {
    pub triple: Triple,
    pub direction: Direction,
    pub rank: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingReport {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl RankingReport {
    /// Aggregates in record order.
    pub fn from_records(records: &[RankRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Logic("no ranks to aggregate".into()));
        }
        let n = records.len() as f64;
        let (mut sum, mut recip, mut h1, mut h3, mut h10) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for r in records {
            sum += r.rank;
            recip += 1.0 / r.rank;
            h1 += usize::from(r.rank <= 1.0);
            h3 += usize::from(r.rank <= 3.0);
            h10 += usize::from(r.rank <= 10.0);
        }
        Ok(Self {
            mr: sum / n,
            mrr: recip / n,
            hits1: h1 as f64 / n,
            hits3: h3 as f64 / n,
            hits10: h10 as f64 / n,
            count: records.len(),
        })
    }

    /// Header and one row in the column order MR, MRR, H@10, H@3, H@1.
    pub fn table(&self) -> String {
        format!(
            "{:>10} {:>7} {:>7} {:>7} {:>7}\n{:>10.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}\n",
            "MR",
            "MRR",
            "H@10",
            "H@3",
            "H@1",
            self.mr,
            self.mrr,
            self.hits10,
            self.hits3,
            self.hits1
        )
    }
}

/// Anything that can produce 1-N score rows for a batch of queries.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;
    fn score_batch(&self, queries: &[Query]) -> Result<Matrix>;
}

/// Eval-mode scoring with a trained model.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    config: &'a ModelConfig,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        Self { params, config }
    }
}

impl Scorer for ModelScorer<'_> {
    fn num_entities(&self) -> usize {
        self.params.num_entities()
    }

    fn score_batch(&self, queries: &[Query]) -> Result<Matrix> {
        Ok(model::forward(self.params, self.config, queries, Mode::Eval, None)?.scores)
    }
}

const EVAL_BATCH: usize = 128;

/// Ranks every triple of `split` in both directions. The dataset must carry
/// reciprocal relations.
pub fn evaluate(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    split: Split,
    filter: &FilterIndex,
    policy: TiePolicy,
) -> Result<(RankingReport, Vec<RankRecord>)> {
    if !dataset.reciprocal_added() {
        return Err(Error::State(
            "evaluation expects reciprocal relations".into(),
        ));
    }
    let n_r = dataset.original_relations();
    let originals: Vec<Triple> = dataset
        .split(split)
        .iter()
        .copied()
        .filter(|t| t.relation < n_r)
        .collect();
    if originals.is_empty() {
        return Err(Error::Logic(format!("{} split is empty", split.name())));
    }
    if scorer.num_entities() != dataset.num_entities() {
        return Err(Error::Shape(format!(
            "scorer covers {} entities, dataset has {}",
            scorer.num_entities(),
            dataset.num_entities()
        )));
    }
    // (query triple as a tail prediction, original triple, direction)
    let jobs: Vec<(Triple, Triple, Direction)> = originals
        .iter()
        .flat_map(|&t| {
            [
                (t, t, Direction::Tail),
                (t.reciprocal(n_r), t, Direction::Head),
            ]
        })
        .collect();
    let chunks: Vec<Result<Vec<RankRecord>>> = jobs
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let queries: Vec<Query> = chunk.iter().map(|(q, _, _)| (q.head, q.relation)).collect();
            let scores = scorer.score_batch(&queries)?;
            chunk
                .iter()
                .enumerate()
                .map(|(b, &(q, triple, direction))| {
                    let known = filter.tails(q.head, q.relation);
                    Ok(RankRecord {
                        triple,
                        direction,
                        rank: filtered_rank(scores.row(b), q.tail, known, policy)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(jobs.len());
    for c in chunks {
        records.extend(c?);
    }
    Ok((RankingReport::from_records(&records)?, records))
}

/// Per-record dump, one `head relation tail direction rank` line each,
/// tab-separated, using vocabulary names.
pub fn dump_records(records: &[RankRecord], dataset: &Dataset) -> String {
    let v = &dataset.vocab;
    let mut out = String::new();
    for r in records {
        let t = r.triple;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            v.entity_name(t.head).unwrap_or("?"),
            v.relation_name(t.relation).unwrap_or("?"),
            v.entity_name(t.tail).unwrap_or("?"),
            r.direction.name(),
            r.rank
        ));
    }
    out
}
