//! The hypernetwork convolution scoring model.
//!
//! A relation embedding `w_r` is mapped through the hypernetwork `H` to a
//! bank of 1D filters `F_r = unvec(w_r H)`. The subject embedding is
//! convolved with those filters, the feature map is flattened and projected
//! back to entity space by `W`, passed through the activation, and scored
//! against every entity embedding at once.
//!
//! Batch normalization and dropout sit at three places: the input
//! embedding, the flattened feature map and the hidden layer. At each site
//! batch norm runs first, then dropout.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv1d_valid, conv1d_valid_backward, dot, dropout, dropout_backward, BatchNorm,
    BatchNormCache, Matrix, Mode, RunningStats,
};

/// Nonlinearity applied to the projected feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Identity; turns the model into a bilinear form in the two entities.
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" | "identity" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub filter_length: usize,
    pub num_filters: usize,
    /// When false, `w_r` is reshaped into the filters directly.
    pub hypernetwork: bool,
    pub batchnorm: bool,
    pub activation: Activation,
    pub input_dropout: f64,
    pub feature_map_dropout: f64,
    pub hidden_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            entity_dim: 200,
            relation_dim: 200,
            filter_length: 9,
            num_filters: 32,
            hypernetwork: true,
            batchnorm: true,
            activation: Activation::Relu,
            input_dropout: 0.2,
            feature_map_dropout: 0.2,
            hidden_dropout: 0.3,
        }
    }
}

impl ModelConfig {
    /// A configuration with dropout and batch norm switched off.
    pub fn plain(
        entity_dim: usize,
        relation_dim: usize,
        filter_length: usize,
        num_filters: usize,
    ) -> Self {
        Self {
            entity_dim,
            relation_dim,
            filter_length,
            num_filters,
            hypernetwork: true,
            batchnorm: false,
            activation: Activation::Relu,
            input_dropout: 0.0,
            feature_map_dropout: 0.0,
            hidden_dropout: 0.0,
        }
    }

    /// Feature map length `l_m = d_e - l_f + 1`.
    pub fn feature_map_len(&self) -> usize {
        self.entity_dim + 1 - self.filter_length
    }

    /// Number of weights in one relation's filter bank, `l_f · n_f`.
    pub fn filter_size(&self) -> usize {
        self.filter_length * self.num_filters
    }

    /// Length of the flattened feature map, `l_m · n_f`.
    pub fn flat_feature_len(&self) -> usize {
        self.feature_map_len() * self.num_filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.entity_dim == 0 || self.relation_dim == 0 {
            return Err(Error::Config(
                "embedding dimensions must be positive".into(),
            ));
        }
        if self.filter_length == 0 || self.filter_length > self.entity_dim {
            return Err(Error::Config(format!(
                "filter_length {} must be in [1, entity_dim = {}]",
                self.filter_length, self.entity_dim
            )));
        }
        if self.num_filters == 0 {
            return Err(Error::Config("num_filters must be at least 1".into()));
        }
        if !self.hypernetwork && self.relation_dim != self.filter_size() {
            return Err(Error::Config(format!(
                "without a hypernetwork relation_dim ({}) must equal filter_length * num_filters ({})",
                self.relation_dim,
                self.filter_size()
            )));
        }
        for rate in [
            self.input_dropout,
            self.feature_map_dropout,
            self.hidden_dropout,
        ] {
            tensor::check_dropout_rate(rate)?;
        }
        Ok(())
    }

    fn has_dropout(&self) -> bool {
        self.input_dropout > 0.0 || self.feature_map_dropout > 0.0 || self.hidden_dropout > 0.0
    }
}

/// Trainable tables plus batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `n_e × d_e`
    pub entities: Matrix,
    /// `n_r × d_r`
    pub relations: Matrix,
    /// `d_r × (l_f·n_f)`; `0 × 0` when the hypernetwork is disabled.
    pub hypernetwork: Matrix,
    /// `(l_m·n_f) × d_e`
    pub projection: Matrix,
    pub bn_input: BatchNorm,
    pub bn_feature: BatchNorm,
    pub bn_hidden: BatchNorm,
}

/// Names of the trainable tensors, in the order used by [`ModelParams::trainable_mut`]
/// and [`Gradients::slots`].
pub const TRAINABLE: [&str; 10] = [
    "entities",
    "relations",
    "hypernetwork",
    "projection",
    "bn_input.gamma",
    "bn_input.beta",
    "bn_feature.gamma",
    "bn_feature.beta",
    "bn_hidden.gamma",
    "bn_hidden.beta",
];

const BATCHNORM_TENSORS: [[&str; 4]; 3] = [
    [
        "bn_input.gamma",
        "bn_input.beta",
        "bn_input.running_mean",
        "bn_input.running_var",
    ],
    [
        "bn_feature.gamma",
        "bn_feature.beta",
        "bn_feature.running_mean",
        "bn_feature.running_var",
    ],
    [
        "bn_hidden.gamma",
        "bn_hidden.beta",
        "bn_hidden.running_mean",
        "bn_hidden.running_var",
    ],
];

impl ModelParams {
    pub fn zeros(config: &ModelConfig, num_entities: usize, num_relations: usize) -> Self {
        let hyper = if config.hypernetwork {
            Matrix::zeros(config.relation_dim, config.filter_size())
        } else {
            Matrix::zeros(0, 0)
        };
        Self {
            entities: Matrix::zeros(num_entities, config.entity_dim),
            relations: Matrix::zeros(num_relations, config.relation_dim),
            hypernetwork: hyper,
            projection: Matrix::zeros(config.flat_feature_len(), config.entity_dim),
            bn_input: BatchNorm::new(config.entity_dim),
            bn_feature: BatchNorm::new(config.flat_feature_len()),
            bn_hidden: BatchNorm::new(config.entity_dim),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    /// Every stored tensor by name with its `(rows, cols)` shape, including
    /// running batch-norm statistics. Vectors are reported as `1 × n`.
    pub fn tensors(&self) -> Vec<(&'static str, (usize, usize), &[f64])> {
        let mut out = vec![
            ("entities", self.entities.shape(), self.entities.as_slice()),
            (
                "relations",
                self.relations.shape(),
                self.relations.as_slice(),
            ),
            (
                "hypernetwork",
                self.hypernetwork.shape(),
                self.hypernetwork.as_slice(),
            ),
            (
                "projection",
                self.projection.shape(),
                self.projection.as_slice(),
            ),
        ];
        for (names, bn) in BATCHNORM_TENSORS.iter().zip(self.batchnorms()) {
            for (&name, data) in
                names
                    .iter()
                    .zip([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var])
            {
                out.push((name, (1, data.len()), data.as_slice()));
            }
        }
        out
    }

    /// Mutable access to a stored tensor by the name used in [`ModelParams::tensors`].
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (prefix, field) = match name.split_once('.') {
            Some((p, f)) => (p, Some(f)),
            None => (name, None),
        };
        let bn = match prefix {
            "entities" => return Some(self.entities.as_mut_slice()),
            "relations" => return Some(self.relations.as_mut_slice()),
            "hypernetwork" => return Some(self.hypernetwork.as_mut_slice()),
            "projection" => return Some(self.projection.as_mut_slice()),
            "bn_input" => &mut self.bn_input,
            "bn_feature" => &mut self.bn_feature,
            "bn_hidden" => &mut self.bn_hidden,
            _ => return None,
        };
        match field? {
            "gamma" => Some(&mut bn.gamma),
            "beta" => Some(&mut bn.beta),
            "running_mean" => Some(&mut bn.running_mean),
            "running_var" => Some(&mut bn.running_var),
            _ => None,
        }
    }

    /// Trainable tensors in [`TRAINABLE`] order.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.entities.as_mut_slice(),
            self.relations.as_mut_slice(),
            self.hypernetwork.as_mut_slice(),
            self.projection.as_mut_slice(),
            &mut self.bn_input.gamma,
            &mut self.bn_input.beta,
            &mut self.bn_feature.gamma,
            &mut self.bn_feature.beta,
            &mut self.bn_hidden.gamma,
            &mut self.bn_hidden.beta,
        ]
    }

    fn batchnorms(&self) -> [&BatchNorm; 3] {
        [&self.bn_input, &self.bn_feature, &self.bn_hidden]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    /// Checks that every table agrees with `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expect = ModelParams::zeros(config, self.num_entities(), self.num_relations());
        for ((name, want, _), (_, got, _)) in expect.tensors().iter().zip(self.tensors().iter()) {
            if want != got {
                return Err(Error::Shape(format!(
                    "{name}: expected {want:?}, found {got:?}"
                )));
            }
        }
        Ok(())
    }

    /// Writes the running statistics from a train-mode forward pass.
    pub fn apply_running_stats(&mut self, stats: [RunningStats; 3]) {
        let [a, b, c] = stats;
        for (bn, s) in [
            &mut self.bn_input,
            &mut self.bn_feature,
            &mut self.bn_hidden,
        ]
        .into_iter()
        .zip([a, b, c])
        {
            bn.running_mean = s.mean;
            bn.running_var = s.var;
        }
    }
}

/// Fills the tables from Xavier-style uniform distributions,
/// `U(-a, a)` with `a = sqrt(6 / (rows + cols))`. Batch-norm scale starts
/// at 1 and shift at 0.
pub fn init_params<R: Rng + ?Sized>(
    config: &ModelConfig,
    num_entities: usize,
    num_relations: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::zeros(config, num_entities, num_relations);
    for m in [
        &mut p.entities,
        &mut p.relations,
        &mut p.hypernetwork,
        &mut p.projection,
    ] {
        let (r, c) = m.shape();
        if r * c == 0 {
            continue;
        }
        let a = (6.0 / (r + c) as f64).sqrt();
        for x in m.as_mut_slice() {
            *x = rng.gen_range(-a..a);
        }
    }
    Ok(p)
}

/// One relation's filter bank, `l_f × n_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub relation: usize,
    pub filters: Matrix,
}

/// `F_r = unvec(w_r H)`, or `unvec(w_r)` when the hypernetwork is disabled.
pub fn generate_filters(
    relation: usize,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<FilterBank> {
    if relation >= params.num_relations() {
        return Err(Error::Logic(format!(
            "relation {relation} out of range ({})",
            params.num_relations()
        )));
    }
    let flat = filter_weights(relation, params, config)?;
    Ok(FilterBank {
        relation,
        filters: tensor::unvec(&flat, config.filter_length, config.num_filters)?,
    })
}

fn filter_weights(relation: usize, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    let w_r = params.relations.row(relation);
    if config.hypernetwork {
        tensor::linear(w_r, &params.hypernetwork)
    } else if w_r.len() != config.filter_size() {
        Err(Error::Config(format!(
            "relation_dim {} != filter_length * num_filters {}",
            w_r.len(),
            config.filter_size()
        )))
    } else {
        Ok(w_r.to_vec())
    }
}

/// A `(subject, relation)` query scored against all entities.
pub type Query = (usize, usize);

/// Activations saved by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    queries: Vec<Query>,
    mode: Mode,
    /// Filter banks, one per query row.
    filters: Vec<Matrix>,
    bn0: Option<BatchNormCache>,
    mask0: Vec<Vec<f64>>,
    /// Conv input after input batch norm and dropout.
    conv_in: Matrix,
    bn1: Option<BatchNormCache>,
    mask1: Vec<Vec<f64>>,
    /// Projection input.
    flat: Matrix,
    bn2: Option<BatchNormCache>,
    mask2: Vec<Vec<f64>>,
    /// Pre-activation hidden layer.
    pre_act: Matrix,
    /// Post-activation hidden layer.
    pub hidden: Matrix,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `batch × n_e` raw scores.
    pub scores: Matrix,
    pub cache: ForwardCache,
    /// Updated running statistics, produced only in train mode with batch norm.
    pub running_stats: Option<[RunningStats; 3]>,
}

fn batchnorm_site(
    enabled: bool,
    bn: &BatchNorm,
    x: Matrix,
    mode: Mode,
) -> Result<(Matrix, Option<BatchNormCache>, Option<RunningStats>)> {
    if !enabled {
        return Ok((x, None, None));
    }
    let (y, cache, stats) = bn.forward(&x, mode)?;
    Ok((y, Some(cache), stats))
}

fn dropout_site(
    x: Matrix,
    rate: f64,
    mode: Mode,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x, Vec::new()));
    }
    let rng = rng
        .as_deref_mut()
        .ok_or_else(|| Error::Logic("train-mode dropout requires an rng".into()))?;
    let (rows, cols) = x.shape();
    let mut out = Vec::with_capacity(rows * cols);
    let mut masks = Vec::with_capacity(rows);
    for i in 0..rows {
        let (y, m) = dropout(x.row(i), rate, Mode::Train, rng)?;
        out.extend(y);
        masks.push(m);
    }
    Ok((Matrix::from_vec(rows, cols, out)?, masks))
}

fn dropout_site_backward(masks: &[Vec<f64>], grad: Matrix) -> Matrix {
    if masks.is_empty() {
        return grad;
    }
    let (rows, cols) = grad.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for (i, m) in masks.iter().enumerate() {
        out.extend(dropout_backward(m, grad.row(i)));
    }
    Matrix::from_vec(rows, cols, out).expect("mask shape")
}

/// Scores every query against all entities.
///
/// In [`Mode::Train`] an rng must be supplied whenever any dropout rate is
/// nonzero; in [`Mode::Eval`] the rng is ignored and the result is
/// deterministic.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    queries: &[Query],
    mode: Mode,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Forward> {
    if queries.is_empty() {
        return Err(Error::Shape("empty query batch".into()));
    }
    let d_e = config.entity_dim;
    let n_e = params.num_entities();
    let mut input = Matrix::zeros(queries.len(), d_e);
    let mut filters = Vec::with_capacity(queries.len());
    for (b, &(e, r)) in queries.iter().enumerate() {
        if e >= n_e {
            return Err(Error::Logic(format!("entity {e} out of range ({n_e})")));
        }
        input.row_mut(b).copy_from_slice(params.entities.row(e));
        filters.push(generate_filters(r, params, config)?.filters);
    }

    let (x, bn0, s0) = batchnorm_site(config.batchnorm, &params.bn_input, input, mode)?;
    let (conv_in, mask0) = dropout_site(x, config.input_dropout, mode, &mut rng)?;

    let flat_len = config.flat_feature_len();
    let mut fm = Matrix::zeros(queries.len(), flat_len);
    for (b, f) in filters.iter().enumerate() {
        let m = conv1d_valid(conv_in.row(b), f)?;
        fm.row_mut(b).copy_from_slice(m.as_slice());
    }
    let (fm, bn1, s1) = batchnorm_site(config.batchnorm, &params.bn_feature, fm, mode)?;
    let (flat, mask1) = dropout_site(fm, config.feature_map_dropout, mode, &mut rng)?;

    let z = flat.matmul(&params.projection)?;
    let (z, bn2, s2) = batchnorm_site(config.batchnorm, &params.bn_hidden, z, mode)?;
    let (pre_act, mask2) = dropout_site(z, config.hidden_dropout, mode, &mut rng)?;
    let hidden = match config.activation {
        Activation::Relu => Matrix::from_vec(
            pre_act.rows(),
            pre_act.cols(),
            tensor::relu(pre_act.as_slice()),
        )?,
        Activation::Linear => pre_act.clone(),
    };

    let scores = score_all(&hidden, &params.entities);
    let running_stats = match (s0, s1, s2) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    Ok(Forward {
        scores,
        cache: ForwardCache {
            queries: queries.to_vec(),
            mode,
            filters,
            bn0,
            mask0,
            conv_in,
            bn1,
            mask1,
            flat,
            bn2,
            mask2,
            pre_act,
            hidden,
        },
        running_stats,
    })
}

/// `hidden · Eᵀ`, one row per query, parallel over query rows.
fn score_all(hidden: &Matrix, entities: &Matrix) -> Matrix {
    let n_e = entities.rows();
    let mut out = Matrix::zeros(hidden.rows(), n_e);
    if n_e == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(n_e)
        .enumerate()
        .for_each(|(b, row)| {
            let h = hidden.row(b);
            for (i, o) in row.iter_mut().enumerate() {
                *o = dot(h, entities.row(i));
            }
        });
    out
}

/// Gradients for every trainable tensor, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entities: Matrix,
    pub relations: Matrix,
    pub hypernetwork: Matrix,
    pub projection: Matrix,
    pub bn_input: (Vec<f64>, Vec<f64>),
    pub bn_feature: (Vec<f64>, Vec<f64>),
    pub bn_hidden: (Vec<f64>, Vec<f64>),
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let bn = |b: &BatchNorm| (vec![0.0; b.features()], vec![0.0; b.features()]);
        Self {
            entities: z(&params.entities),
            relations: z(&params.relations),
            hypernetwork: z(&params.hypernetwork),
            projection: z(&params.projection),
            bn_input: bn(&params.bn_input),
            bn_feature: bn(&params.bn_feature),
            bn_hidden: bn(&params.bn_hidden),
        }
    }

    /// Gradient tensors in [`TRAINABLE`] order.
    pub fn slots(&self) -> [&[f64]; 10] {
        [
            self.entities.as_slice(),
            self.relations.as_slice(),
            self.hypernetwork.as_slice(),
            self.projection.as_slice(),
            &self.bn_input.0,
            &self.bn_input.1,
            &self.bn_feature.0,
            &self.bn_feature.1,
            &self.bn_hidden.0,
            &self.bn_hidden.1,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

fn batchnorm_site_backward(
    bn: &BatchNorm,
    cache: &Option<BatchNormCache>,
    grad: Matrix,
    acc: &mut (Vec<f64>, Vec<f64>),
) -> Result<Matrix> {
    let Some(cache) = cache else {
        return Ok(grad);
    };
    let (gx, gg, gb) = bn.backward(cache, &grad)?;
    for (a, g) in acc.0.iter_mut().zip(gg) {
        *a += g;
    }
    for (a, g) in acc.1.iter_mut().zip(gb) {
        *a += g;
    }
    Ok(gx)
}

/// Backpropagates `grad_scores` (`batch × n_e`, the derivative of the loss
/// with respect to the raw scores) through the pipeline.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ForwardCache,
    grad_scores: &Matrix,
) -> Result<Gradients> {
    let batch = cache.queries.len();
    let n_e = params.num_entities();
    if grad_scores.shape() != (batch, n_e) {
        return Err(Error::Shape(format!(
            "score gradient {:?}, expected ({batch}, {n_e})",
            grad_scores.shape()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    let d_e = config.entity_dim;

    // Score layer: dE[i] = Σ_b g[b][i] · hidden[b]; dHidden = g · E.
    grads
        .entities
        .as_mut_slice()
        .par_chunks_mut(d_e)
        .enumerate()
        .for_each(|(i, row)| {
            for b in 0..batch {
                let g = grad_scores[(b, i)];
                if g == 0.0 {
                    continue;
                }
                for (r, h) in row.iter_mut().zip(cache.hidden.row(b)) {
                    *r += g * h;
                }
            }
        });
    let grad_hidden = grad_scores.matmul(&params.entities)?;

    let grad_pre = match config.activation {
        Activation::Relu => Matrix::from_vec(
            batch,
            d_e,
            tensor::relu_backward(cache.pre_act.as_slice(), grad_hidden.as_slice()),
        )?,
        Activation::Linear => grad_hidden,
    };
    let g = dropout_site_backward(&cache.mask2, grad_pre);
    let grad_z = batchnorm_site_backward(&params.bn_hidden, &cache.bn2, g, &mut grads.bn_hidden)?;

    grads.projection = cache.flat.transpose().matmul(&grad_z)?;
    let grad_flat = grad_z.matmul_transposed(&params.projection)?;

    let g = dropout_site_backward(&cache.mask1, grad_flat);
    let grad_fm =
        batchnorm_site_backward(&params.bn_feature, &cache.bn1, g, &mut grads.bn_feature)?;

    let mut grad_conv_in = Matrix::zeros(batch, d_e);
    for (b, &(_, r)) in cache.queries.iter().enumerate() {
        let gm = tensor::unvec(grad_fm.row(b), config.feature_map_len(), config.num_filters)?;
        let (gs, gf) = conv1d_valid_backward(cache.conv_in.row(b), &cache.filters[b], &gm)?;
        grad_conv_in.row_mut(b).copy_from_slice(&gs);
        let gflat = gf.as_slice();
        if config.hypernetwork {
            let w_r = params.relations.row(r);
            for (k, &w) in w_r.iter().enumerate() {
                for (h, &g) in grads.hypernetwork.row_mut(k).iter_mut().zip(gflat) {
                    *h += w * g;
                }
            }
            for (k, gr) in grads.relations.row_mut(r).iter_mut().enumerate() {
                *gr += dot(params.hypernetwork.row(k), gflat);
            }
        } else {
            for (gr, &g) in grads.relations.row_mut(r).iter_mut().zip(gflat) {
                *gr += g;
            }
        }
    }

    let g = dropout_site_backward(&cache.mask0, grad_conv_in);
    let grad_input = batchnorm_site_backward(&params.bn_input, &cache.bn0, g, &mut grads.bn_input)?;
    for (b, &(e, _)) in cache.queries.iter().enumerate() {
        for (ge, &g) in grads.entities.row_mut(e).iter_mut().zip(grad_input.row(b)) {
            *ge += g;
        }
    }
    debug_assert!(cache.mode == Mode::Train || cache.mask0.is_empty());
    Ok(grads)
}

/// Raw scores of `(subject, relation, e)` for every entity `e`.
pub fn score_1n(
    subject: usize,
    relation: usize,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<f64>> {
    if mode == Mode::Train && config.batchnorm {
        return Err(Error::Shape(
            "single-query train-mode scoring is undefined with batch norm".into(),
        ));
    }
    Ok(forward(params, config, &[(subject, relation)], mode, rng)?
        .scores
        .into_vec())
}

/// Eval-mode score of a single triple.
pub fn score_triple(
    subject: usize,
    relation: usize,
    object: usize,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    if object >= params.num_entities() {
        return Err(Error::Logic(format!("entity {object} out of range")));
    }
    let f = forward(params, config, &[(subject, relation)], Mode::Eval, None)?;
    Ok(dot(f.cache.hidden.row(0), params.entities.row(object)))
}

/// Whether eval-mode scoring reduces to the bilinear form given by
/// [`relation_matrix`].
pub fn is_bilinear(config: &ModelConfig) -> bool {
    config.activation == Activation::Linear && !config.batchnorm && !config.has_dropout()
}

/// The convolution with one filter bank written as an explicit sparse
/// `(l_m·n_f) × d_e` matrix. Feature-map element `(i, j)` is row
/// `i·n_f + j`, whose nonzeros are `filters[k][j]` at columns `i + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvMatrix {
    rows: usize,
    cols: usize,
    /// `(row, col, value)` sorted by row then column.
    entries: Vec<(usize, usize, f64)>,
}

impl SparseConvMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// `self · signal`.
    pub fn mul_vec(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.cols {
            return Err(Error::Shape(format!(
                "sparse {}x{} times vector of length {}",
                self.rows,
                self.cols,
                signal.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            out[r] += v * signal[c];
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }
}

pub fn expand_sparse(bank: &FilterBank, entity_dim: usize) -> Result<SparseConvMatrix> {
    let (l_f, n_f) = bank.filters.shape();
    if l_f == 0 || l_f > entity_dim {
        return Err(Error::Shape(format!(
            "filter length {l_f} invalid for dimension {entity_dim}"
        )));
    }
    let l_m = entity_dim - l_f + 1;
    let mut entries = Vec::with_capacity(l_m * n_f * l_f);
    for i in 0..l_m {
        for j in 0..n_f {
            for k in 0..l_f {
                entries.push((i * n_f + j, i + k, bank.filters[(k, j)]));
            }
        }
    }
    Ok(SparseConvMatrix {
        rows: l_m * n_f,
        cols: entity_dim,
        entries,
    })
}

/// The `d_e × d_e` matrix `M_r = Sᵀ W`, where `S` is the sparse convolution
/// matrix of relation `r`, so that `vec(e1 ∗ F_r) W = e1 M_r`.
pub fn relation_matrix(
    relation: usize,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Matrix> {
    let bank = generate_filters(relation, params, config)?;
    let sparse = expand_sparse(&bank, config.entity_dim)?;
    let d_e = config.entity_dim;
    let w = &params.projection;
    let mut m = Matrix::zeros(d_e, d_e);
    for &(row, col, v) in sparse.entries() {
        for (o, &x) in m.row_mut(col).iter_mut().zip(w.row(row)) {
            *o += v * x;
        }
    }
    Ok(m)
}

/// DistMult trilinear score `Σ_i e1[i] · w_r[i] · e2[i]`; needs `d_r = d_e`.
pub fn distmult_score(
    subject: usize,
    relation: usize,
    object: usize,
    params: &ModelParams,
) -> Result<f64> {
    let (e1, w, e2) = (
        params.entities.row(subject),
        params.relations.row(relation),
        params.entities.row(object),
    );
    if w.len() != e1.len() {
        return Err(Error::Config(format!(
            "distmult needs relation_dim == entity_dim, got {} and {}",
            w.len(),
            e1.len()
        )));
    }
    Ok(e1.iter().zip(w).zip(e2).map(|((a, b), c)| a * b * c).sum())
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub entities: usize,
    pub relations: usize,
    pub hypernetwork: usize,
    pub projection: usize,
    /// Batch-norm scale and shift; not part of [`ParamCount::total`].
    pub batchnorm: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.entities + self.relations + self.hypernetwork + self.projection
    }
}

pub fn param_count(config: &ModelConfig, num_entities: usize, num_relations: usize) -> ParamCount {
    let flat = config.flat_feature_len();
    ParamCount {
        entities: num_entities * config.entity_dim,
        relations: num_relations * config.relation_dim,
        hypernetwork: if config.hypernetwork {
            config.relation_dim * config.filter_size()
        } else {
            0
        },
        projection: flat * config.entity_dim,
        batchnorm: if config.batchnorm {
            2 * (2 * config.entity_dim + flat)
        } else {
            0
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(config: &ModelConfig, n_e: usize, n_r: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(config, n_e, n_r, &mut rng).unwrap();
        // Spread values so the products are not tiny.
        for m in [
            &mut p.entities,
            &mut p.relations,
            &mut p.hypernetwork,
            &mut p.projection,
        ] {
            for x in m.as_mut_slice() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        p
    }

    #[test]
    fn selector_hypernetwork() {
        let config = ModelConfig::plain(4, 2, 2, 2);
        let mut p = ModelParams::zeros(&config, 1, 1);
        p.hypernetwork = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        p.relations = Matrix::from_rows(&[[3.0, 5.0]]);
        let f = generate_filters(0, &p, &config).unwrap();
        assert_eq!(f.filters, Matrix::from_rows(&[[3.0, 0.0], [0.0, 5.0]]));
    }

    #[test]
    fn zero_hypernetwork_gives_zero_filters() {
        let config = ModelConfig::plain(5, 3, 2, 3);
        let mut p = random_params(&config, 2, 2, 1);
        p.hypernetwork = Matrix::zeros(3, 6);
        let f = generate_filters(1, &p, &config).unwrap();
        assert!(f.filters.as_slice().iter().all(|&x| x == 0.0));
        assert!(generate_filters(2, &p, &config).is_err());
    }

    #[test]
    fn filters_match_loop_product() {
        let config = ModelConfig::plain(6, 4, 3, 2);
        let p = random_params(&config, 2, 3, 2);
        for r in 0..3 {
            let f = generate_filters(r, &p, &config).unwrap();
            for k in 0..3 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for q in 0..4 {
                        acc += p.relations[(r, q)] * p.hypernetwork[(q, k * 2 + j)];
                    }
                    assert!((f.filters[(k, j)] - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn disabled_hypernetwork_reshapes_relation() {
        let mut config = ModelConfig::plain(5, 4, 2, 2);
        config.hypernetwork = false;
        let p = random_params(&config, 2, 2, 3);
        let f = generate_filters(1, &p, &config).unwrap();
        assert_eq!(f.filters.as_slice(), p.relations.row(1));
        config.relation_dim = 5;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_projection_scores_zero() {
        let config = ModelConfig::plain(4, 3, 2, 2);
        let mut p = random_params(&config, 5, 2, 4);
        p.projection = Matrix::zeros(6, 4);
        let s = score_1n(1, 1, &p, &config, Mode::Eval, None).unwrap();
        assert_eq!(s, vec![0.0; 5]);
        assert!(tensor::sigmoid(&s).iter().all(|&x| x == 0.5));
        assert_eq!(score_triple(0, 0, 3, &p, &config).unwrap(), 0.0);
    }

    #[test]
    fn hand_unrolled_tiny_model() {
        // n_e=3, d_e=2, l_f=1, n_f=1, d_r=1.
        let config = ModelConfig::plain(2, 1, 1, 1);
        let mut p = ModelParams::zeros(&config, 3, 1);
        p.entities = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [-1.0, 1.0]]);
        p.relations = Matrix::from_rows(&[[2.0]]);
        p.hypernetwork = Matrix::from_rows(&[[1.5]]);
        p.projection = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]);
        // filter a = 2·1.5 = 3; conv of e0 = [3, -6]
        // z = [3·1 + -6·-1, 3·2 + -6·0.5] = [9, 3]; relu keeps both
        let h = [9.0, 3.0];
        let s = score_1n(0, 0, &p, &config, Mode::Eval, None).unwrap();
        let expect = [
            h[0] * 1.0 + h[1] * -2.0,
            h[0] * 0.5 + h[1] * 3.0,
            -h[0] + h[1],
        ];
        assert_eq!(s, expect);
        assert_eq!(score_triple(0, 0, 1, &p, &config).unwrap(), 13.5);
    }

    #[test]
    fn one_n_matches_single_triple_scores() {
        let mut config = ModelConfig::plain(8, 5, 3, 2);
        config.batchnorm = true;
        config.input_dropout = 0.3;
        let mut p = random_params(&config, 7, 4, 5);
        p.bn_input.running_mean = vec![0.1; 8];
        for e1 in 0..7 {
            for r in 0..4 {
                let s = score_1n(e1, r, &p, &config, Mode::Eval, None).unwrap();
                for (e2, &v) in s.iter().enumerate() {
                    assert_eq!(v, score_triple(e1, r, e2, &p, &config).unwrap());
                }
            }
        }
    }

    #[test]
    fn sparse_expansion_trivial_cases() {
        let bank = FilterBank {
            relation: 0,
            filters: Matrix::from_rows(&[[2.5]]),
        };
        let s = expand_sparse(&bank, 3).unwrap();
        assert_eq!(
            s.to_dense(),
            Matrix::from_rows(&[[2.5, 0.0, 0.0], [0.0, 2.5, 0.0], [0.0, 0.0, 2.5]])
        );
        let bank = FilterBank {
            relation: 0,
            filters: Matrix::from_rows(&[[1.0], [0.0]]),
        };
        let s = expand_sparse(&bank, 3).unwrap();
        assert_eq!(
            s.to_dense(),
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        );
    }

    #[test]
    fn sparse_expansion_matches_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let filters =
            Matrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bank = FilterBank {
            relation: 0,
            filters,
        };
        let s = expand_sparse(&bank, 10).unwrap();
        assert_eq!(s.shape(), (7 * 3, 10));
        assert_eq!(s.nnz(), 7 * 3 * 4);
        for _ in 0..100 {
            let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = s.mul_vec(&x).unwrap();
            let b = tensor::vec(&conv1d_valid(&x, &bank.filters).unwrap());
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relation_matrix_trivial_cases() {
        let config = ModelConfig::plain(3, 1, 1, 1);
        let mut p = random_params(&config, 2, 1, 6);
        p.hypernetwork = Matrix::from_rows(&[[1.0]]);
        p.relations = Matrix::from_rows(&[[-0.75]]);
        let m = relation_matrix(0, &p, &config).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[(i, j)] + 0.75 * p.projection[(i, j)]).abs() < 1e-15);
            }
        }
        p.relations = Matrix::zeros(1, 1);
        let m = relation_matrix(0, &p, &config).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bilinear_form_matches_pipeline() {
        let mut config = ModelConfig::plain(7, 3, 3, 2);
        config.activation = Activation::Linear;
        assert!(is_bilinear(&config));
        let p = random_params(&config, 6, 2, 7);
        for r in 0..2 {
            let m = relation_matrix(r, &p, &config).unwrap();
            for e1 in 0..6 {
                let left = tensor::linear(p.entities.row(e1), &m).unwrap();
                for e2 in 0..6 {
                    let a = dot(&left, p.entities.row(e2));
                    let b = score_triple(e1, r, e2, &p, &config).unwrap();
                    assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-300));
                }
            }
        }
    }

    #[test]
    fn distmult() {
        let config = ModelConfig::plain(5, 5, 1, 1);
        let mut p = random_params(&config, 3, 2, 8);
        let mut ones = p.clone();
        ones.relations.row_mut(0).fill(1.0);
        let d = distmult_score(0, 0, 2, &ones).unwrap();
        assert!((d - dot(p.entities.row(0), p.entities.row(2))).abs() < 1e-15);
        let loops: f64 = (0..5)
            .map(|i| p.entities[(1, i)] * p.relations[(1, i)] * p.entities[(2, i)])
            .sum();
        assert!((distmult_score(1, 1, 2, &p).unwrap() - loops).abs() < 1e-15);
        p.entities.row_mut(1).fill(0.0);
        assert_eq!(distmult_score(1, 0, 2, &p).unwrap(), 0.0);
        let odd = ModelConfig::plain(5, 4, 1, 1);
        let q = random_params(&odd, 2, 1, 9);
        assert!(matches!(distmult_score(0, 0, 1, &q), Err(Error::Config(_))));
    }

    #[test]
    fn param_counts() {
        let config = ModelConfig {
            batchnorm: false,
            ..ModelConfig::default()
        };
        let c = param_count(&config, 14_541, 474);
        assert_eq!(c.entities, 2_908_200);
        assert_eq!(c.relations, 94_800);
        assert_eq!(c.hypernetwork, 57_600);
        assert_eq!(c.projection, 1_228_800);
        assert_eq!(c.total(), 4_289_400);
        let tiny = ModelConfig::plain(13, 13, 1, 1);
        assert_eq!(param_count(&tiny, 1, 1).projection, 169);
        let no_hyper = ModelConfig {
            hypernetwork: false,
            relation_dim: 288,
            ..ModelConfig::default()
        };
        let c = param_count(&no_hyper, 14_541, 474);
        assert_eq!(c.hypernetwork, 0);
        assert_eq!(c.relations, 474 * 288);
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let config = ModelConfig {
            entity_dim: 50,
            relation_dim: 40,
            filter_length: 5,
            num_filters: 8,
            ..ModelConfig::default()
        };
        let a = init_params(&config, 400, 30, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(&config, 400, 30, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        a.check_shapes(&config).unwrap();
        let count = param_count(&config, 400, 30);
        assert_eq!(a.entities.as_slice().len(), count.entities);
        assert_eq!(a.projection.as_slice().len(), count.projection);
        for m in [&a.entities, &a.hypernetwork, &a.projection] {
            let n = m.as_slice().len() as f64;
            let lim = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            let sigma = lim / 3f64.sqrt();
            let mean = m.as_slice().iter().sum::<f64>() / n;
            assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "mean {mean}");
            assert!(m.as_slice().iter().all(|x| x.abs() <= lim));
        }
        assert_eq!(a.bn_hidden.gamma, vec![1.0; 50]);
    }

    #[test]
    fn filter_rank_bounded_by_relation_dim() {
        let config = ModelConfig::plain(12, 3, 4, 3);
        let p = random_params(&config, 2, 10, 10);
        let mut rows = Vec::new();
        for r in 0..10 {
            rows.push(generate_filters(r, &p, &config).unwrap().filters.into_vec());
        }
        assert_eq!(rank(rows), 3);
    }

    fn rank(mut rows: Vec<Vec<f64>>) -> usize {
        let cols = rows[0].len();
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) =
                (rank..rows.len()).max_by(|&a, &b| rows[a][c].abs().total_cmp(&rows[b][c].abs()))
            else {
                break;
            };
            if rows[p][c].abs() < 1e-9 {
                continue;
            }
            rows.swap(rank, p);
            for i in 0..rows.len() {
                if i != rank {
                    let f = rows[i][c] / rows[rank][c];
                    let pivot = rows[rank].clone();
                    for (x, y) in rows[i].iter_mut().zip(&pivot) {
                        *x -= f * y;
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn tensor_names_round_trip() {
        let mut config = ModelConfig::plain(6, 4, 2, 2);
        config.batchnorm = true;
        let p = random_params(&config, 3, 2, 11);
        let mut q = ModelParams::zeros(&config, 3, 2);
        for (name, _, data) in p.tensors() {
            q.tensor_mut(name).unwrap().copy_from_slice(data);
        }
        assert_eq!(p, q);
        assert!(q.tensor_mut("nope").is_none());
    }
}
