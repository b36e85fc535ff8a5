use std::path::Path;
use std::process::Command;

use hyperkg::data::{Split, Vocabulary};
use hyperkg::eval::TiePolicy;
use hyperkg::model::{ModelConfig, ModelParams};
use hyperkg::tensor::Matrix;
use hyperkg::toy::{composition_kg, to_tsv};
use hyperkg_cli::checkpoint::Checkpoint;
use hyperkg_cli::commands;

const CYCLE: usize = 8;

fn write_splits(dir: &Path, train: &str, valid: &str, test: &str) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("train.txt"), train).unwrap();
    std::fs::write(dir.join("valid.txt"), valid).unwrap();
    std::fs::write(dir.join("test.txt"), test).unwrap();
}

fn write_cycle(dir: &Path) {
    let (mut train, mut valid, mut test) = (String::new(), String::new(), String::new());
    for i in 0..CYCLE {
        let line = format!("c{i}\tnext\tc{}\n", (i + 1) % CYCLE);
        match i {
            3 | 7 => test.push_str(&line),
            5 => valid.push_str(&line),
            _ => train.push_str(&line),
        }
    }
    write_splits(dir, &train, &valid, &test);
}

fn write_toy(dir: &Path) {
    let kg = composition_kg();
    write_splits(
        dir,
        &to_tsv(&kg.train),
        &to_tsv(&kg.valid),
        &to_tsv(&kg.test),
    );
}

/// One-hot entities, a single 1x1 filter per relation (+1 for `next`, -1 for
/// its reciprocal) and `W = P - Pᵀ` with `P` the cyclic shift: the hidden
/// vector of `c_i` under `next` is `+1` at `c_{i+1}` and `-1` at `c_{i-1}`,
/// which ReLU reduces to the one-hot of the true tail.
fn cycle_oracle() -> Checkpoint {
    let mut model = ModelConfig::plain(CYCLE, 1, 1, 1);
    model.hypernetwork = false;
    let mut params = ModelParams::zeros(&model, CYCLE, 2);
    params.entities = Matrix::identity(CYCLE);
    params.relations = Matrix::from_rows(&[vec![1.0], vec![-1.0]]);
    for i in 0..CYCLE {
        params.projection[(i, (i + 1) % CYCLE)] += 1.0;
        params.projection[((i + 1) % CYCLE, i)] -= 1.0;
    }
    let entities = (0..CYCLE).map(|i| format!("c{i}")).collect();
    Checkpoint {
        model,
        vocab: Vocabulary::from_names(entities, vec!["next".into(), "next_reverse".into()]),
        original_relations: 1,
        params,
        optimizer: None,
    }
}

const TOY_MODEL: &str = "entity_dim = 32\nrelation_dim = 16\nfilter_length = 3\nnum_filters = 8\n";

fn write_config(path: &Path, data: &Path, out: &Path, extra: &str) {
    let text = format!(
        "dataset_dir = {}\noutput_dir = {}\nlearning_rate = 0.01\nlr_decay = 1.0\n\
         label_smoothing = 0.0\nbatch_size = 16\nseed = 1\n{extra}",
        data.display(),
        out.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn hand_built_checkpoint_ranks_every_cycle_edge_first() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cycle");
    write_cycle(&data);
    let ck = tmp.path().join("oracle.hkge");
    cycle_oracle().save(&ck).unwrap();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let dump = tmp.path().join(format!("{}.tsv", split.name()));
        let report =
            commands::eval_checkpoint(&ck, &data, split, &dump, TiePolicy::MeanOfTies).unwrap();
        assert_eq!(
            (report.mr, report.mrr, report.hits1, report.hits10),
            (1.0, 1.0, 1.0, 1.0)
        );
        let dumped = std::fs::read_to_string(&dump).unwrap();
        assert_eq!(dumped.lines().count(), report.count);
        assert!(dumped.lines().all(|l| l.ends_with("\t1")));
    }
}

#[test]
fn eval_refuses_a_checkpoint_from_another_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    write_toy(&data);
    let ck = tmp.path().join("oracle.hkge");
    cycle_oracle().save(&ck).unwrap();
    let err = commands::eval_checkpoint(
        &ck,
        &data,
        Split::Test,
        &tmp.path().join("d"),
        TiePolicy::Optimistic,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("expected n_e = 8, n_r = 2"), "{err}");
    assert!(err.contains("actual n_e = 20, n_r = 6"), "{err}");
}

#[test]
fn best_checkpoint_reproduces_its_validation_mrr() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    write_toy(&data);
    let conf = tmp.path().join("run.conf");
    write_config(
        &conf,
        &data,
        Path::new("out"),
        &format!("{TOY_MODEL}epochs = 30\nvalid_every = 10\n"),
    );
    let summary = commands::train_from_config(&conf, |_| {}).unwrap();
    let out = tmp.path().join("out");
    assert!(out.join("config.resolved").exists());
    assert_eq!(
        std::fs::read_to_string(out.join("train.log")).unwrap(),
        summary.log
    );

    let best_logged = summary
        .log
        .lines()
        .filter_map(|l| l.split('\t').nth(3))
        .map(|m| m.parse::<f64>().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let best = summary.best_checkpoint.expect("validation ran");
    let report = commands::eval_checkpoint(
        &best,
        &data,
        Split::Valid,
        &out.join("v.tsv"),
        TiePolicy::Optimistic,
    )
    .unwrap();
    assert_eq!(format!("{:.6}", report.mrr), format!("{best_logged:.6}"));

    let final_ck = Checkpoint::load(&summary.final_checkpoint).unwrap();
    assert!(final_ck.optimizer.is_some());
    assert_eq!(final_ck.vocab.num_relations(), 6);
}

#[test]
fn inspect_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("oracle.hkge");
    let oracle = cycle_oracle();
    oracle.save(&ck).unwrap();
    let (filters, rel) =
        commands::parse_inspect(&commands::inspect(&ck, "next_reverse").unwrap()).unwrap();
    assert_eq!(filters, Matrix::from_rows(&[vec![-1.0]]));
    assert_eq!(
        rel,
        hyperkg::model::relation_matrix(1, &oracle.params, &oracle.model).unwrap()
    );
    let err = commands::inspect(&ck, "nxet").unwrap_err().to_string();
    assert!(err.contains("nearest: next"), "{err}");
}

#[test]
fn prepare_reports_counts_and_caches() {
    let tmp = tempfile::tempdir().unwrap();
    write_toy(tmp.path());
    let s = commands::prepare(tmp.path()).unwrap();
    assert_eq!(
        (s.entities, s.relations, s.relations_with_reciprocals),
        (20, 3, 6)
    );
    assert_eq!((s.train, s.valid, s.test), (50, 4, 6));
    assert!(s.cache.exists());
    assert_eq!(commands::prepare(tmp.path()).unwrap().cache, s.cache);

    std::fs::remove_file(tmp.path().join("valid.txt")).unwrap();
    let err = format!("{:#}", commands::prepare(tmp.path()).unwrap_err());
    assert!(err.contains("valid.txt"), "{err}");
}

#[test]
fn ablation_validates_every_length_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    write_toy(&data);
    let conf = tmp.path().join("run.conf");
    write_config(
        &conf,
        &data,
        &tmp.path().join("out"),
        &format!("{TOY_MODEL}epochs = 2\n"),
    );
    let err = format!(
        "{:#}",
        commands::ablate_filters(&conf, &[1, 33], commands::HypernetworkSweep::Both).unwrap_err()
    );
    assert!(err.contains("filter length 33"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn binary_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    write_toy(&data);
    let bin = env!("CARGO_BIN_EXE_hyperkg");

    let out = Command::new(bin)
        .arg("prepare")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.starts_with(
            "entities 20, relations 3 (6 with reciprocals)\ntrain 50, valid 4, test 6\n"
        ),
        "{text}"
    );

    let conf = tmp.path().join("run.conf");
    write_config(
        &conf,
        &data,
        Path::new("out"),
        "epochs = 1\nfilter_length = 9\nnum_filters = 32\nentity_dim = 200\n",
    );
    let out = Command::new(bin).arg("train").arg(&conf).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("projection W  6144 x 200"), "{text}");

    let ck = tmp.path().join("out/final.hkge");
    let out = Command::new(bin)
        .arg("eval")
        .arg(&ck)
        .arg(&data)
        .arg("test")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("MRR"));
    assert!(tmp.path().join("out/test.ranks.tsv").exists());

    let out = Command::new(bin)
        .args(["inspect"])
        .arg(&ck)
        .arg("prev")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(bin)
        .args(["inspect"])
        .arg(&ck)
        .arg("prevv")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .contains("nearest: prev"));

    let out = Command::new(bin)
        .args(["eval"])
        .arg(&ck)
        .arg(&data)
        .arg("dev")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
