//! Opcode-sequence convolutional detector.
//!
//! Architecture: embedding lookup (the one-hot product with the embedding
//! matrix) -> one 1D convolution with ReLU -> max over time -> dense `tanh`
//! layer -> two-way dense layer -> softmax over (benign, malware).
//!
//! The convolution is evaluated through a per-model projection table
//! `proj[j][v][f] = <kernel[f][j], embedding[v]>`, so scoring a sequence costs
//! one table lookup per (position, tap) instead of a full dot product. Because
//! only the arg-max position of each filter receives gradient, the backward
//! pass touches `filters * width` embedding rows per sample.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DetectorError;
use crate::opcodes::{OpcodeSequence, PADDING_ID};

pub const CHECKPOINT_FORMAT: &str = "nopvis-detector";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub vocabulary_size: usize,
    pub embedding_dim: usize,
    pub conv_filters: usize,
    pub kernel_width: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            vocabulary_size: crate::opcodes::OpcodeTable::dalvik().vocabulary_size(),
            embedding_dim: 8,
            conv_filters: 32,
            kernel_width: 8,
            hidden_dim: 16,
            max_len: crate::opcodes::DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Small settings for tests and laptop-scale experiments.
    pub fn desk(seed: u64) -> Self {
        DetectorConfig {
            max_len: 512,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let dims = [
            self.vocabulary_size,
            self.embedding_dim,
            self.conv_filters,
            self.kernel_width,
            self.hidden_dim,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(DetectorError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if self.kernel_width > self.max_len {
            return Err(DetectorError::InvalidConfig(format!(
                "kernel width {} exceeds max_len {}",
                self.kernel_width, self.max_len
            )));
        }
        Ok(())
    }
}

/// Every trainable array, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// `vocabulary_size x embedding_dim`
    pub embedding: Vec<f64>,
    /// `conv_filters x kernel_width x embedding_dim`
    pub conv_kernels: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// `hidden_dim x conv_filters`
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// `2 x hidden_dim`
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

pub const PARAMETER_GROUPS: [&str; 7] = [
    "embedding",
    "conv_kernels",
    "conv_bias",
    "hidden_weights",
    "hidden_bias",
    "output_weights",
    "output_bias",
];

impl Parameters {
    fn zeros(c: &DetectorConfig) -> Self {
        Parameters {
            embedding: vec![0.0; c.vocabulary_size * c.embedding_dim],
            conv_kernels: vec![0.0; c.conv_filters * c.kernel_width * c.embedding_dim],
            conv_bias: vec![0.0; c.conv_filters],
            hidden_weights: vec![0.0; c.hidden_dim * c.conv_filters],
            hidden_bias: vec![0.0; c.hidden_dim],
            output_weights: vec![0.0; 2 * c.hidden_dim],
            output_bias: vec![0.0; 2],
        }
    }

    pub fn groups(&self) -> [&[f64]; 7] {
        [
            &self.embedding,
            &self.conv_kernels,
            &self.conv_bias,
            &self.hidden_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.embedding,
            &mut self.conv_kernels,
            &mut self.conv_bias,
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    fn scale(&mut self, k: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    fn matches(&self, c: &DetectorConfig) -> bool {
        let z = Parameters::zeros(c);
        let same = self
            .groups()
            .iter()
            .zip(z.groups())
            .all(|(a, b)| a.len() == b.len());
        same
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: Parameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub p_benign: f64,
    pub p_malware: f64,
}

impl Scores {
    fn from_logits(l0: f64, l1: f64) -> Self {
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let s = e0 + e1;
        Scores {
            p_benign: e0 / s,
            p_malware: e1 / s,
        }
    }
}

pub const BENIGN: u8 = 0;
pub const MALWARE: u8 = 1;

/// Malware iff `p_malware >= threshold`.
pub fn label_for(scores: &Scores, threshold: f64) -> u8 {
    if scores.p_malware >= threshold {
        MALWARE
    } else {
        BENIGN
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub fn init_model(config: DetectorConfig) -> Result<DetectorModel, DetectorError> {
    config.validate()?;
    let c = &config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let params = Parameters {
        embedding: uniform(&mut rng, c.vocabulary_size * c.embedding_dim, 0.5),
        conv_kernels: uniform(
            &mut rng,
            c.conv_filters * c.kernel_width * c.embedding_dim,
            (1.0 / (c.kernel_width * c.embedding_dim) as f64).sqrt(),
        ),
        conv_bias: uniform(&mut rng, c.conv_filters, 0.1),
        hidden_weights: uniform(
            &mut rng,
            c.hidden_dim * c.conv_filters,
            (1.0 / c.conv_filters as f64).sqrt(),
        ),
        hidden_bias: vec![0.0; c.hidden_dim],
        output_weights: uniform(
            &mut rng,
            2 * c.hidden_dim,
            (1.0 / c.hidden_dim as f64).sqrt(),
        ),
        output_bias: vec![0.0; 2],
    };
    Ok(DetectorModel { config, params })
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    ids: Vec<u32>,
    /// Per filter: max pre-activation and its position.
    peak: Vec<(f64, usize)>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    scores: Scores,
}

impl DetectorModel {
    pub fn zeros(config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        Ok(DetectorModel {
            params: Parameters::zeros(&config),
            config,
        })
    }

    /// Frozen scorer with the convolution projection precomputed.
    pub fn scorer(&self) -> Scorer<'_> {
        Scorer {
            model: self,
            proj: self.projection(),
        }
    }

    fn projection(&self) -> Vec<f64> {
        let c = &self.config;
        let (v, k, m, w) = (
            c.vocabulary_size,
            c.embedding_dim,
            c.conv_filters,
            c.kernel_width,
        );
        let mut proj = vec![0.0; w * v * m];
        for j in 0..w {
            for t in 0..v {
                let emb = &self.params.embedding[t * k..(t + 1) * k];
                let out = &mut proj[(j * v + t) * m..(j * v + t + 1) * m];
                for (f, o) in out.iter_mut().enumerate() {
                    let ker = &self.params.conv_kernels[(f * w + j) * k..(f * w + j + 1) * k];
                    *o = ker.iter().zip(emb).map(|(a, b)| a * b).sum();
                }
            }
        }
        proj
    }

    /// Checks ids, truncates to `max_len` and right-pads with the padding id
    /// up to the kernel width.
    fn prepare(&self, ids: &[u32]) -> Result<Vec<u32>, DetectorError> {
        let c = &self.config;
        if let Some((position, &id)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= c.vocabulary_size)
        {
            return Err(DetectorError::IdOutOfRange {
                id,
                position,
                vocabulary: c.vocabulary_size,
            });
        }
        let mut v: Vec<u32> = ids[..ids.len().min(c.max_len)].to_vec();
        if v.len() < c.kernel_width {
            v.resize(c.kernel_width, PADDING_ID);
        }
        Ok(v)
    }

    fn run(&self, proj: &[f64], ids: Vec<u32>) -> Trace {
        let c = &self.config;
        let (v, m, w, h) = (
            c.vocabulary_size,
            c.conv_filters,
            c.kernel_width,
            c.hidden_dim,
        );
        let p = &self.params;
        let windows = ids.len() + 1 - w;
        let mut peak = vec![(f64::NEG_INFINITY, 0usize); m];
        let mut z = vec![0.0; m];
        for t in 0..windows {
            z.copy_from_slice(&p.conv_bias);
            for j in 0..w {
                let id = ids[t + j] as usize;
                let row = &proj[(j * v + id) * m..(j * v + id + 1) * m];
                z.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            for (pk, &val) in peak.iter_mut().zip(&z) {
                if val > pk.0 {
                    *pk = (val, t);
                }
            }
        }
        let pooled: Vec<f64> = peak.iter().map(|&(val, _)| val.max(0.0)).collect();
        let hidden: Vec<f64> = (0..h)
            .map(|i| {
                let row = &p.hidden_weights[i * m..(i + 1) * m];
                let pre: f64 =
                    p.hidden_bias[i] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
                pre.tanh()
            })
            .collect();
        let logit = |o: usize| {
            p.output_bias[o]
                + p.output_weights[o * h..(o + 1) * h]
                    .iter()
                    .zip(&hidden)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        };
        let scores = Scores::from_logits(logit(0), logit(1));
        Trace {
            ids,
            peak,
            pooled,
            hidden,
            scores,
        }
    }

    /// Accumulates `scale * d(-log p_label)/d(params)` into `grads`.
    #[allow(clippy::needless_range_loop)]
    fn backprop(&self, tr: &Trace, label: u8, scale: f64, grads: &mut Parameters) {
        let c = &self.config;
        let (k, m, w, h) = (
            c.embedding_dim,
            c.conv_filters,
            c.kernel_width,
            c.hidden_dim,
        );
        let p = &self.params;
        let target = [f64::from(label == BENIGN), f64::from(label == MALWARE)];
        let dlogit = [
            scale * (tr.scores.p_benign - target[0]),
            scale * (tr.scores.p_malware - target[1]),
        ];
        let mut dhidden = vec![0.0; h];
        for o in 0..2 {
            grads.output_bias[o] += dlogit[o];
            for i in 0..h {
                grads.output_weights[o * h + i] += dlogit[o] * tr.hidden[i];
                dhidden[i] += dlogit[o] * p.output_weights[o * h + i];
            }
        }
        let mut dpooled = vec![0.0; m];
        for i in 0..h {
            let dpre = dhidden[i] * (1.0 - tr.hidden[i] * tr.hidden[i]);
            grads.hidden_bias[i] += dpre;
            for f in 0..m {
                grads.hidden_weights[i * m + f] += dpre * tr.pooled[f];
                dpooled[f] += dpre * p.hidden_weights[i * m + f];
            }
        }
        for f in 0..m {
            let (val, t) = tr.peak[f];
            if val <= 0.0 {
                continue;
            }
            let g = dpooled[f];
            grads.conv_bias[f] += g;
            for j in 0..w {
                let id = tr.ids[t + j] as usize;
                let ker = (f * w + j) * k;
                for d in 0..k {
                    grads.conv_kernels[ker + d] += g * p.embedding[id * k + d];
                    grads.embedding[id * k + d] += g * p.conv_kernels[ker + d];
                }
            }
        }
    }

    pub fn checkpoint_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            params: self.params.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, DetectorError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(DetectorError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        if !ck.params.matches(&ck.config) {
            return Err(DetectorError::Checkpoint(
                "parameter shapes do not match config".into(),
            ));
        }
        Ok(DetectorModel {
            config: ck.config,
            params: ck.params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DetectorConfig,
    params: Parameters,
}

/// Read-only scorer for repeated inference with fixed parameters.
pub struct Scorer<'a> {
    model: &'a DetectorModel,
    proj: Vec<f64>,
}

impl Scorer<'_> {
    pub fn score_ids(&self, ids: &[u32]) -> Result<Scores, DetectorError> {
        let ids = self.model.prepare(ids)?;
        Ok(self.model.run(&self.proj, ids).scores)
    }

    pub fn score(&self, seq: &OpcodeSequence) -> Result<Scores, DetectorError> {
        self.score_ids(&seq.ids)
    }
}

pub fn forward(model: &DetectorModel, seq: &OpcodeSequence) -> Result<Scores, DetectorError> {
    model.scorer().score(seq)
}

pub fn classify(
    model: &DetectorModel,
    seq: &OpcodeSequence,
    threshold: f64,
) -> Result<u8, DetectorError> {
    Ok(label_for(&forward(model, seq)?, threshold))
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_gradients(
    model: &DetectorModel,
    batch: &[(&OpcodeSequence, u8)],
) -> Result<(f64, Parameters), DetectorError> {
    if batch.is_empty() {
        return Err(DetectorError::EmptyBatch);
    }
    let proj = model.projection();
    let mut grads = Parameters::zeros(&model.config);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (seq, label) in batch {
        if *label > 1 {
            return Err(DetectorError::InvalidLabel(*label));
        }
        let tr = model.run(&proj, model.prepare(&seq.ids)?);
        let p = if *label == MALWARE {
            tr.scores.p_malware
        } else {
            tr.scores.p_benign
        };
        loss -= p.max(f64::MIN_POSITIVE).ln();
        model.backprop(&tr, *label, scale, &mut grads);
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mini-batch size; 0 means the whole corpus.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64) -> Self {
        TrainConfig {
            epochs,
            learning_rate,
            batch_size: 32,
            optimizer: Optimizer::adam(),
            seed: 0,
        }
    }
}

/// Trains with the default optimizer (Adam, mini-batches of 32).
pub fn train(
    model: &DetectorModel,
    corpus: &[(OpcodeSequence, u8)],
    epochs: usize,
    learning_rate: f64,
) -> Result<DetectorModel, DetectorError> {
    let cfg = TrainConfig {
        seed: model.config.seed,
        ..TrainConfig::new(epochs, learning_rate)
    };
    train_with(model, corpus, &cfg).map(|(m, _)| m)
}

/// Trains and returns the model with the full-corpus loss measured after each
/// epoch.
pub fn train_with(
    model: &DetectorModel,
    corpus: &[(OpcodeSequence, u8)],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>), DetectorError> {
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if corpus.is_empty() {
        return Err(DetectorError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = if cfg.batch_size == 0 {
        corpus.len()
    } else {
        cfg.batch_size
    };
    let mut moments = (
        Parameters::zeros(&model.config),
        Parameters::zeros(&model.config),
    );
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&OpcodeSequence, u8)> =
                chunk.iter().map(|&i| (&corpus[i].0, corpus[i].1)).collect();
            let (_, mut grads) = loss_and_gradients(&model, &batch)?;
            step += 1;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    grads.scale(-cfg.learning_rate);
                    for (p, g) in model.params.groups_mut().into_iter().zip(grads.groups()) {
                        p.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m1, m2) = &mut moments;
                    let c1 = 1.0 - beta1.powi(step);
                    let c2 = 1.0 - beta2.powi(step);
                    for (((p, g), a), b) in model
                        .params
                        .groups_mut()
                        .into_iter()
                        .zip(grads.groups())
                        .zip(m1.groups_mut())
                        .zip(m2.groups_mut())
                    {
                        for i in 0..p.len() {
                            a[i] = beta1 * a[i] + (1.0 - beta1) * g[i];
                            b[i] = beta2 * b[i] + (1.0 - beta2) * g[i] * g[i];
                            p[i] -= cfg.learning_rate * (a[i] / c1) / ((b[i] / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        let all: Vec<(&OpcodeSequence, u8)> = corpus.iter().map(|(s, l)| (s, *l)).collect();
        losses.push(loss_and_gradients(&model, &all)?.0);
    }
    Ok((model, losses))
}

/// Largest disagreement found by [`gradient_check`] in one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub sampled: usize,
    /// Draws rejected because the perturbation crossed a kink.
    pub kinks_skipped: usize,
    pub max_relative_error: f64,
}

/// Max-pool positions and ReLU states of every sequence in the batch. The
/// loss is smooth in any neighbourhood where this does not change.
fn activation_pattern(
    model: &DetectorModel,
    batch: &[(&OpcodeSequence, u8)],
) -> Result<Vec<(usize, bool)>, DetectorError> {
    let proj = model.projection();
    let mut out = Vec::new();
    for (seq, _) in batch {
        let tr = model.run(&proj, model.prepare(&seq.ids)?);
        out.extend(tr.peak.iter().map(|&(v, t)| (t, v > 0.0)));
    }
    Ok(out)
}

/// Compares analytic gradients against central finite differences on
/// `per_group` randomly drawn coordinates of every parameter group.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps coordinates whose true gradient is zero from dividing by
/// rounding noise. A draw whose `+step` or `-step` probe changes the
/// activation pattern straddles a point where the loss is not
/// differentiable; it is counted in `kinks_skipped` and redrawn, up to
/// `20 * per_group` draws per group.
pub fn gradient_check(
    model: &DetectorModel,
    batch: &[(&OpcodeSequence, u8)],
    per_group: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GroupCheck>, DetectorError> {
    const FLOOR: f64 = 1e-6;
    let (_, analytic) = loss_and_gradients(model, batch)?;
    let base = activation_pattern(model, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(PARAMETER_GROUPS.len());
    for (g, name) in PARAMETER_GROUPS.iter().enumerate() {
        let len = analytic.groups()[g].len();
        let mut worst: f64 = 0.0;
        let (mut sampled, mut kinks) = (0, 0);
        while sampled < per_group && sampled + kinks < 20 * per_group {
            let i = rng.gen_range(0..len);
            let original = probe.params.groups_mut()[g][i];
            probe.params.groups_mut()[g][i] = original + step;
            let up = loss_and_gradients(&probe, batch)?.0;
            let smooth_up = activation_pattern(&probe, batch)? == base;
            probe.params.groups_mut()[g][i] = original - step;
            let down = loss_and_gradients(&probe, batch)?.0;
            let smooth_down = activation_pattern(&probe, batch)? == base;
            probe.params.groups_mut()[g][i] = original;
            if !(smooth_up && smooth_down) {
                kinks += 1;
                continue;
            }
            sampled += 1;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.groups()[g][i];
            let denom = a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        out.push(GroupCheck {
            group: (*name).to_string(),
            sampled,
            kinks_skipped: kinks,
            max_relative_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: Vec<u32>) -> OpcodeSequence {
        OpcodeSequence {
            app_id: "t".into(),
            ids,
            max_len: 64,
        }
    }

    fn small(seed: u64) -> DetectorConfig {
        DetectorConfig {
            vocabulary_size: 12,
            embedding_dim: 3,
            conv_filters: 4,
            kernel_width: 3,
            hidden_dim: 5,
            max_len: 64,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(small(1)).unwrap();
        assert_eq!(a, init_model(small(1)).unwrap());
        assert_ne!(a.params, init_model(small(2)).unwrap().params);
        assert!(a.params.is_finite());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = DetectorModel::zeros(small(0)).unwrap();
        let s = forward(&m, &seq(vec![2, 3, 4, 5, 6])).unwrap();
        assert_eq!((s.p_benign, s.p_malware), (0.5, 0.5));
        let (loss, _) =
            loss_and_gradients(&m, &[(&seq(vec![2, 3]), 1), (&seq(vec![4]), 0)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(classify(&m, &seq(vec![2]), 0.5).unwrap(), MALWARE);
    }

    #[test]
    fn rejects_out_of_range_ids_and_bad_configs() {
        let m = init_model(small(0)).unwrap();
        assert!(matches!(
            forward(&m, &seq(vec![2, 99])),
            Err(DetectorError::IdOutOfRange {
                id: 99,
                position: 1,
                ..
            })
        ));
        let mut c = small(0);
        c.kernel_width = 100;
        assert!(init_model(c).is_err());
        c.kernel_width = 0;
        assert!(init_model(c).is_err());
        assert!(matches!(
            loss_and_gradients(&m, &[]),
            Err(DetectorError::EmptyBatch)
        ));
        assert!(matches!(
            loss_and_gradients(&m, &[(&seq(vec![2]), 3)]),
            Err(DetectorError::InvalidLabel(3))
        ));
    }

    #[test]
    fn scores_are_normalized() {
        let m = init_model(small(3)).unwrap();
        let s = forward(&m, &seq(vec![2, 7, 7, 1, 9, 11, 0])).unwrap();
        assert!((s.p_benign + s.p_malware - 1.0).abs() < 1e-12);
        assert!(s.p_benign >= 0.0 && s.p_malware >= 0.0);
    }

    #[test]
    fn relabeling_symmetry() {
        let m = init_model(small(4)).unwrap();
        let k = m.config.embedding_dim;
        // swap ids 3 and 7 in both the embedding and the input
        let mut swapped = m.clone();
        for d in 0..k {
            swapped.params.embedding.swap(3 * k + d, 7 * k + d);
        }
        let input = vec![3, 4, 7, 7, 2, 3, 5];
        let relabeled: Vec<u32> = input
            .iter()
            .map(|&i| match i {
                3 => 7,
                7 => 3,
                x => x,
            })
            .collect();
        let a = forward(&m, &seq(input)).unwrap();
        let b = forward(&swapped, &seq(relabeled)).unwrap();
        assert!((a.p_malware - b.p_malware).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = init_model(small(5)).unwrap();
        let (a, b) = (seq(vec![2, 3, 4, 5]), seq(vec![6, 7, 8]));
        let (l1, g1) = loss_and_gradients(&m, &[(&a, 1), (&b, 0)]).unwrap();
        let (l2, g2) = loss_and_gradients(&m, &[(&a, 1), (&b, 0), (&a, 1), (&b, 0)]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (x, y) in g1.groups().iter().zip(g2.groups()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let m = init_model(small(6)).unwrap();
        let corpus = vec![(seq(vec![2, 3]), 1)];
        assert_eq!(train(&m, &corpus, 0, 0.1).unwrap(), m);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model(small(7)).unwrap();
        let text = m.checkpoint_json();
        assert_eq!(DetectorModel::from_checkpoint_json(&text).unwrap(), m);
        let broken = text.replace("\"version\":1", "\"version\":9");
        assert!(DetectorModel::from_checkpoint_json(&broken).is_err());
    }

    #[test]
    fn short_sequences_are_padded() {
        let m = init_model(small(8)).unwrap();
        let a = forward(&m, &seq(vec![])).unwrap();
        let b = forward(&m, &seq(vec![1, 1, 1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = init_model(small(9)).unwrap();
        let (a, b, c) = (
            seq(vec![2, 3, 4, 5, 6, 7, 8, 2, 3]),
            seq(vec![9, 10, 11, 1, 4, 4, 2]),
            seq(vec![5, 5, 6, 0, 1, 3, 7, 9, 11, 2]),
        );
        let batch = [(&a, 1), (&b, 0), (&c, 1)];
        let report = gradient_check(&m, &batch, 25, 1e-4, 11).unwrap();
        assert_eq!(report.len(), PARAMETER_GROUPS.len());
        for g in report {
            assert_eq!(g.sampled, 25);
            assert!(g.max_relative_error < 1e-4, "{g:?}");
        }
    }
}
