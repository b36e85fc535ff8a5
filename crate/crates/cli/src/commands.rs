use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hyperkg::data::{parse_triples, Dataset, FilterIndex, Split};
use hyperkg::eval::{dump_records, evaluate, ModelScorer, RankingReport};
use hyperkg::model::{self, param_count, ModelConfig};
use hyperkg::train::{self, EpochRecord};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

/// Reads and encodes `train.txt`, `valid.txt` and `test.txt` from `dir`,
/// without reciprocal relations.
pub fn load_raw_dataset(dir: &Path) -> Result<(Dataset, String)> {
    let mut splits = Vec::new();
    let mut hasher = Sha256::new();
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let bytes =
            std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        splits.push(parse_triples(&bytes).with_context(|| format!("{}", path.display()))?);
    }
    let digest: String = hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok((Dataset::build(&splits[0], &splits[1], &splits[2]), digest))
}

/// Dataset with reciprocal relations added, ready for training or evaluation.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(load_raw_dataset(dir)?.0.add_reciprocals()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub entities: usize,
    pub relations: usize,
    pub relations_with_reciprocals: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub cache: PathBuf,
}

impl std::fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "entities {}, relations {} ({} with reciprocals)",
            self.entities, self.relations, self.relations_with_reciprocals
        )?;
        writeln!(
            f,
            "train {}, valid {}, test {}",
            self.train, self.valid, self.test
        )?;
        write!(f, "cache {}", self.cache.display())
    }
}

/// Statistics of a dataset directory. Also writes a JSON cache of the
/// encoded dataset, named by a hash of the three input files.
pub fn prepare(dir: &Path) -> Result<PrepareSummary> {
    let (raw, digest) = load_raw_dataset(dir)?;
    let cache_dir = dir.join(".cache");
    std::fs::create_dir_all(&cache_dir)
        .with_context(|| format!("cannot create {}", cache_dir.display()))?;
    let cache = cache_dir.join(format!("dataset-{digest}.json"));
    std::fs::write(&cache, serde_json::to_vec(&raw)?)
        .with_context(|| format!("cannot write {}", cache.display()))?;
    Ok(PrepareSummary {
        entities: raw.num_entities(),
        relations: raw.num_relations(),
        relations_with_reciprocals: 2 * raw.num_relations(),
        train: raw.train.len(),
        valid: raw.valid.len(),
        test: raw.test.len(),
        cache,
    })
}

/// Shapes and parameter counts of a model over a given vocabulary size.
pub fn describe_model(config: &ModelConfig, entities: usize, relations: usize) -> String {
    let c = param_count(config, entities, relations);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "entity embeddings E  {entities} x {}  ({})",
        config.entity_dim, c.entities
    );
    let _ = writeln!(
        s,
        "relation embeddings R  {relations} x {}  ({})",
        config.relation_dim, c.relations
    );
    if config.hypernetwork {
        let _ = writeln!(
            s,
            "hypernetwork H  {} x {}  ({})",
            config.relation_dim,
            config.filter_size(),
            c.hypernetwork
        );
    } else {
        let _ = writeln!(s, "hypernetwork H  disabled (filters read from R)");
    }
    let _ = writeln!(
        s,
        "projection W  {} x {}  ({})",
        config.flat_feature_len(),
        config.entity_dim,
        c.projection
    );
    let _ = writeln!(
        s,
        "feature map  {} x {}",
        config.feature_map_len(),
        config.num_filters
    );
    let _ = writeln!(s, "total {} (+{} batch-norm)", c.total(), c.batchnorm);
    s
}

#[derive(Debug)]
pub struct TrainSummary {
    pub log: String,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub description: String,
}

/// Trains from a config file, writing into the configured output directory:
/// `config.resolved`, `train.log`, `final.hkge` and, when validation ran,
/// `best.hkge`.
pub fn train_from_config(
    path: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let mut cfg = RunConfig::load(path)?;
    cfg.dataset_dir = absolute(&cfg.dataset_dir)?;
    cfg.output_dir = absolute(&cfg.output_dir)?;
    let dataset = load_dataset(&cfg.dataset_dir)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    std::fs::write(out.join("config.resolved"), cfg.to_text())?;
    let description = describe_model(&cfg.model, dataset.num_entities(), dataset.num_relations());

    let outcome = train::train_with(&dataset, &cfg.model, &cfg.train, &mut on_epoch)
        .context("training failed")?;
    let log = outcome.report.log();
    std::fs::write(out.join("train.log"), &log)?;

    let checkpoint = |params: &model::ModelParams, optimizer| Checkpoint {
        model: cfg.model.clone(),
        vocab: dataset.vocab.clone(),
        original_relations: dataset.original_relations(),
        params: params.clone(),
        optimizer,
    };
    let final_checkpoint = out.join("final.hkge");
    checkpoint(&outcome.params, Some(outcome.optimizer.clone())).save(&final_checkpoint)?;
    let best_checkpoint = match &outcome.best {
        Some(best) => {
            let p = out.join("best.hkge");
            checkpoint(&best.params, None).save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainSummary {
        log,
        final_checkpoint,
        best_checkpoint,
        description,
    })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

/// Checks that a checkpoint was trained on this dataset's vocabulary.
pub fn check_compatible(ck: &Checkpoint, dataset: &Dataset) -> Result<()> {
    let (ce, cr) = (ck.vocab.num_entities(), ck.vocab.num_relations());
    let (de, dr) = (dataset.num_entities(), dataset.num_relations());
    if (ce, cr) != (de, dr) {
        bail!(
            "checkpoint vocabulary does not match dataset: expected n_e = {ce}, n_r = {cr} (checkpoint), \
             actual n_e = {de}, n_r = {dr} (dataset)"
        );
    }
    if ck.vocab != dataset.vocab {
        bail!("checkpoint and dataset have the same sizes but different entity or relation names");
    }
    Ok(())
}

/// Filtered evaluation of a checkpoint on one split. Writes the per-record
/// dump to `dump` and returns the report.
pub fn eval_checkpoint(
    checkpoint: &Path,
    dir: &Path,
    split: Split,
    dump: &Path,
    tie: hyperkg::eval::TiePolicy,
) -> Result<RankingReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(dir)?;
    check_compatible(&ck, &dataset)?;
    let filter = FilterIndex::build(&dataset);
    let scorer = ModelScorer::new(&ck.params, &ck.model);
    let (report, records) = evaluate(&scorer, &dataset, split, &filter, tie)?;
    std::fs::write(dump, dump_records(&records, &dataset))
        .with_context(|| format!("cannot write {}", dump.display()))?;
    Ok(report)
}

/// Whether an ablation runs with the hypernetwork, without it, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypernetworkSweep {
    On,
    Off,
    Both,
}

impl std::str::FromStr for HypernetworkSweep {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "both" => Ok(Self::Both),
            other => bail!("expected on, off or both, got {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub filter_length: usize,
    pub hypernetwork: bool,
    pub report: RankingReport,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("filter\thypernetwork\tMRR\tH@1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "1x{}\t{}\t{:.3}\t{:.3}",
            r.filter_length,
            if r.hypernetwork { "on" } else { "off" },
            r.report.mrr,
            r.report.hits1
        );
    }
    s
}

/// Trains one model per filter length (and hypernetwork setting) with the
/// same seed and budget, evaluating each on the test split. Without the
/// hypernetwork the relation dimension is set to `l_f · n_f`. All variants
/// are validated before any training starts.
pub fn ablate_filters(
    path: &Path,
    lengths: &[usize],
    sweep: HypernetworkSweep,
) -> Result<Vec<AblationRow>> {
    let cfg = RunConfig::load(path)?;
    if lengths.is_empty() {
        bail!("no filter lengths given");
    }
    let hyper: &[bool] = match sweep {
        HypernetworkSweep::On => &[true],
        HypernetworkSweep::Off => &[false],
        HypernetworkSweep::Both => &[true, false],
    };
    let mut variants = Vec::new();
    for &l_f in lengths {
        for &h in hyper {
            let mut m = cfg.model.clone();
            m.filter_length = l_f;
            m.hypernetwork = h;
            if !h {
                m.relation_dim = m.filter_size();
            }
            m.validate()
                .with_context(|| format!("filter length {l_f}"))?;
            variants.push(m);
        }
    }
    let dataset = load_dataset(&cfg.dataset_dir)?;
    let filter = FilterIndex::build(&dataset);
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.resolved"), cfg.to_text())?;
    let mut rows = Vec::new();
    for m in variants {
        let outcome = train::train(&dataset, &m, &cfg.train)?;
        let params = outcome.best.as_ref().map_or(&outcome.params, |b| &b.params);
        let (report, _) = evaluate(
            &ModelScorer::new(params, &m),
            &dataset,
            Split::Test,
            &filter,
            cfg.tie_policy,
        )?;
        rows.push(AblationRow {
            filter_length: m.filter_length,
            hypernetwork: m.hypernetwork,
            report,
        });
    }
    std::fs::write(cfg.output_dir.join("ablation.tsv"), ablation_table(&rows))?;
    Ok(rows)
}

fn write_matrix(out: &mut String, m: &hyperkg::tensor::Matrix) {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
}

/// The filter bank of a named relation and its implicit `d_e × d_e`
/// relation matrix, as tab-separated text.
pub fn inspect(checkpoint: &Path, relation: &str) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let Some(r) = ck.vocab.relation_id(relation) else {
        let mut near: Vec<(usize, &String)> = ck
            .vocab
            .relation_names()
            .iter()
            .map(|n| (strsim::levenshtein(n, relation), n))
            .collect();
        near.sort();
        let names: Vec<&str> = near.iter().take(5).map(|(_, n)| n.as_str()).collect();
        bail!(
            "unknown relation {relation:?}; nearest: {}",
            names.join(", ")
        );
    };
    let bank = model::generate_filters(r, &ck.params, &ck.model)?;
    let rel = model::relation_matrix(r, &ck.params, &ck.model)?;
    let mut out = String::new();
    let _ = writeln!(out, "# relation {relation} (id {r})");
    let _ = writeln!(
        out,
        "# filters {} x {}",
        bank.filters.rows(),
        bank.filters.cols()
    );
    write_matrix(&mut out, &bank.filters);
    let _ = writeln!(out, "# relation_matrix {} x {}", rel.rows(), rel.cols());
    write_matrix(&mut out, &rel);
    Ok(out)
}

/// Parses the text written by [`inspect`] back into `(filters, relation matrix)`.
pub fn parse_inspect(text: &str) -> Result<(hyperkg::tensor::Matrix, hyperkg::tensor::Matrix)> {
    let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
    for line in text.lines() {
        if line.starts_with("# filters") || line.starts_with("# relation_matrix") {
            blocks.push(Vec::new());
        } else if !line.starts_with('#') && !line.is_empty() {
            let row = line
                .split('\t')
                .map(str::parse)
                .collect::<Result<Vec<f64>, _>>()?;
            blocks.last_mut().context("row before header")?.push(row);
        }
    }
    let [f, m]: [Vec<Vec<f64>>; 2] = blocks
        .try_into()
        .map_err(|_| anyhow::anyhow!("expected two matrices"))?;
    Ok((
        hyperkg::tensor::Matrix::from_rows(&f),
        hyperkg::tensor::Matrix::from_rows(&m),
    ))
}
