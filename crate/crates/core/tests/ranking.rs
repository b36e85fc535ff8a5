//! End-to-end ranking against a brute-force evaluator that shares none of
//! the batched scoring, filter index or rank code.

use hyperkg::data::{Dataset, FilterIndex, Split, Triple};
use hyperkg::eval::{evaluate, Direction, ModelScorer, RankingReport, TiePolicy};
use hyperkg::model::{self, score_triple, ModelConfig};
use hyperkg::toy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_force(
    params: &model::ModelParams,
    config: &ModelConfig,
    d: &Dataset,
    split: Split,
) -> Vec<(Triple, Direction, f64)> {
    let n_r = d.original_relations();
    let all: Vec<Triple> = d.all_triples().copied().collect();
    let mut out = Vec::new();
    for &t in d.split(split).iter().filter(|t| t.relation < n_r) {
        for dir in [Direction::Tail, Direction::Head] {
            let (h, r, target) = match dir {
                Direction::Tail => (t.head, t.relation, t.tail),
                Direction::Head => (t.tail, t.relation + n_r, t.head),
            };
            let mut cands: Vec<(usize, f64)> = (0..d.num_entities())
                .filter(|&e| {
                    e == target
                        || !all
                            .iter()
                            .any(|x| x.head == h && x.relation == r && x.tail == e)
                })
                .map(|e| (e, score_triple(h, r, e, params, config).unwrap()))
                .collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1));
            let s = cands.iter().find(|c| c.0 == target).unwrap().1;
            let rank = cands.iter().position(|c| c.1 == s).unwrap() + 1;
            out.push((t, dir, rank as f64));
        }
    }
    out
}

#[test]
fn frozen_random_model_matches_brute_force() {
    let raw = toy::random_kg(2024, 30, 4, 100);
    let d = Dataset::build(&raw.train, &raw.valid, &raw.test)
        .add_reciprocals()
        .unwrap();
    assert_eq!(d.num_entities(), 30);
    let mut config = ModelConfig::plain(12, 6, 3, 4);
    config.batchnorm = true;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = model::init_params(&config, 30, d.num_relations(), &mut rng).unwrap();
    let f = FilterIndex::build(&d);
    for split in [Split::Valid, Split::Test] {
        let (report, records) = evaluate(
            &ModelScorer::new(&params, &config),
            &d,
            split,
            &f,
            TiePolicy::Optimistic,
        )
        .unwrap();
        let oracle = brute_force(&params, &config, &d, split);
        assert_eq!(records.len(), oracle.len());
        for (r, o) in records.iter().zip(&oracle) {
            assert_eq!((r.triple, r.direction, r.rank), *o);
        }
        let n = oracle.len() as f64;
        let mr = oracle.iter().map(|o| o.2).sum::<f64>() / n;
        let mrr = oracle.iter().map(|o| 1.0 / o.2).sum::<f64>() / n;
        let hits = |k: f64| oracle.iter().filter(|o| o.2 <= k).count() as f64 / n;
        assert_eq!(report.mr, mr);
        assert_eq!(report.mrr, mrr);
        assert_eq!(
            (report.hits1, report.hits3, report.hits10),
            (hits(1.0), hits(3.0), hits(10.0))
        );
        assert_eq!(RankingReport::from_records(&records).unwrap(), report);
    }
}

#[test]
fn head_direction_is_tail_direction_of_reciprocal() {
    let raw = toy::random_kg(5, 30, 3, 100);
    let d = Dataset::build(&raw.train, &raw.valid, &raw.test)
        .add_reciprocals()
        .unwrap();
    let config = ModelConfig::plain(10, 5, 2, 3);
    let params = model::init_params(
        &config,
        30,
        d.num_relations(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let f = FilterIndex::build(&d);
    let scorer = ModelScorer::new(&params, &config);
    let (_, records) = evaluate(&scorer, &d, Split::Test, &f, TiePolicy::Optimistic).unwrap();

    let n = d.original_relations();
    for r in records.iter().filter(|r| r.direction == Direction::Head) {
        let q = r.triple.reciprocal(n);
        let scores = model::score_1n(
            q.head,
            q.relation,
            &params,
            &config,
            hyperkg::tensor::Mode::Eval,
            None,
        )
        .unwrap();
        let rank = hyperkg::eval::filtered_rank(
            &scores,
            q.tail,
            f.tails(q.head, q.relation),
            TiePolicy::Optimistic,
        )
        .unwrap();
        assert_eq!(rank, r.rank);
    }
}
