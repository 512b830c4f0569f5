//! Adam, the training loop and full-volume evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    crop_at, random_crop_with_lesion, random_offset, VolumeSample, DEFAULT_CROP,
    DEFAULT_LESION_RATE,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, confusion, MetricsReport};
use crate::network::{
    argmax_classes, network_forward, weighted_ce_loss_with, LossWeights, Network, UNetConfig,
};
use crate::parallel::map_indexed;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to gradients before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Per-parameter switch for weight decay.
    pub decay: Vec<bool>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            decay: vec![true; params.len()],
        }
    }
}

fn check_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.len()],
            actual: vec![grads.len()],
        });
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        check_same(p, g)?;
        check_same(p, m)?;
        check_same(p, v)?;
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let correction1 = 1.0 - c.beta1.powf(t);
    let correction2 = 1.0 - c.beta2.powf(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let (inv_c1, inv_c2) = (T::lit(1.0 / correction1), T::lit(1.0 / correction2));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let wd = T::lit(if state.decay[i] { c.weight_decay } else { 0.0 });
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j] + wd * *x;
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] * inv_c1;
            let v_hat = v[j] * inv_c2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer steps; one step consumes one batch.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay to attention `α`s and embeddings too.
    pub decay_attention: bool,
    pub seed: u64,
    pub crop_size: [usize; 3],
    /// Class rate `r` of the loss weights.
    pub lesion_rate: f64,
    /// Use the exchanged loss weights (larger weight on lesions).
    pub swapped_weights: bool,
    /// Retry crops until they contain a lesion voxel.
    pub label_aware_crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-5,
            decay_attention: true,
            seed: 0,
            crop_size: DEFAULT_CROP,
            lesion_rate: DEFAULT_LESION_RATE,
            swapped_weights: false,
            label_aware_crop: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let w = LossWeights::from_rate(self.lesion_rate)?;
        Ok(if self.swapped_weights { w.swapped() } else { w })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Crops for one batch, stacked as `[B, C, d, h, w]` images and `[B, d, h, w]`
/// labels.
fn make_batch(
    samples: &[&VolumeSample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let crop = config.crop_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let channels = samples[0].image.shape()[0];
    for s in samples {
        let c = if config.label_aware_crop {
            random_crop_with_lesion(s, crop, rng)?
        } else {
            let offset = random_offset(rng, s.dims(), crop)?;
            crop_at(s, offset, crop)?
        };
        if c.image.shape()[0] != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                actual: c.image.shape()[0],
            });
        }
        images.extend_from_slice(c.image.data());
        labels.extend_from_slice(c.label.data());
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, channels, crop[0], crop[1], crop[2]], images)?,
        Tensor::new(&[b, crop[0], crop[1], crop[2]], labels)?,
    ))
}

/// Draws batches by walking seeded permutations of the training set.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut s = Self {
            rng,
            order: (0..n).collect(),
            cursor: n,
        };
        s.reshuffle_if_needed();
        s
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                self.reshuffle_if_needed();
                let i = self.order[self.cursor];
                self.cursor += 1;
                i
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
}

impl TrainHistory {
    /// Mean loss over iterations `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{l:.9e}");
        }
        out
    }
}

/// Trains `net` in place. `on_iteration` receives `(iteration, loss)`.
pub fn train_loop(
    net: &mut Network<f32>,
    samples: &[VolumeSample],
    config: &TrainConfig,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<TrainHistory> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let weights = config.loss_weights()?;
    let mut params = net.param_values();
    let mut state = OptimizerState::new(config.adam(), &params);
    if !config.decay_attention {
        for (i, d) in state.decay.iter_mut().enumerate() {
            *d = !net.is_attention_param(i);
        }
    }
    let mut sampler = BatchSampler::new(samples.len(), config.seed);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(config.seed);
    crop_rng.set_stream(3);

    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let picked: Vec<&VolumeSample> = sampler
            .next(config.batch_size)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let (images, labels) = make_batch(&picked, config, &mut crop_rng)?;
        let tape = Tape::new();
        let x = tape.constant(images);
        let (logits, vars) = net.forward(&tape, x)?;
        let loss = weighted_ce_loss_with(&tape, logits, &labels, weights)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter is a leaf"))
            .collect();
        adam_step(&mut params, &grads, &mut state)?;
        for (p, value) in net.params_mut().iter_mut().zip(&params) {
            p.value = value.clone();
        }
        losses.push(value);
        on_iteration(it, value);
    }
    Ok(TrainHistory { losses })
}

/// Zero-pads `[C, D, H, W]` at the far end of each spatial axis up to a
/// multiple of `divisor`.
pub fn pad_to_multiple(image: &Tensor<f32>, divisor: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let padded: Vec<usize> = s[1..]
        .iter()
        .map(|&e| e.div_ceil(divisor) * divisor)
        .collect();
    if padded == s[1..] {
        return Ok(image.clone());
    }
    let (c, [d, h, w]) = (s[0], [s[1], s[2], s[3]]);
    let [pd, ph, pw] = [padded[0], padded[1], padded[2]];
    let mut out = vec![0.0f32; c * pd * ph * pw];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = ((ch * d + z) * h + y) * w;
                let dst = ((ch * pd + z) * ph + y) * pw;
                out[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
            }
        }
    }
    Tensor::new(&[c, pd, ph, pw], out)
}

/// Binary lesion prediction `[D, H, W]` for a `[C, D, H, W]` volume.
pub fn predict_volume<T: Element>(net: &Network<T>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape().to_vec();
    let padded = pad_to_multiple(image, net.config().divisor())?;
    let ps = padded.shape().to_vec();
    let batch = padded
        .reshape(&[1, ps[0], ps[1], ps[2], ps[3]])?
        .cast::<T>();
    let classes = argmax_classes(&network_forward(net, &batch)?)?;
    let mut out = Vec::with_capacity(s[1] * s[2] * s[3]);
    for z in 0..s[1] {
        for y in 0..s[2] {
            let start = (z * ps[2] + y) * ps[3];
            out.extend(classes.data()[start..start + s[3]].iter().map(|v| {
                // class 1 is lesion
                if v.to_f64().unwrap_or(0.0) > 0.5 {
                    1.0
                } else {
                    0.0
                }
            }));
        }
    }
    Tensor::new(&s[1..], out)
}

/// Full-volume metrics of `net` on `samples`.
pub fn evaluate<T: Element>(net: &Network<T>, samples: &[VolumeSample]) -> Result<MetricsReport> {
    let confusions = map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let pred = predict_volume(net, &s.image)?;
        Ok((s.id.clone(), confusion(&pred, &s.label)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    aggregate(&confusions)
}

/// Metrics of given predictions `(id, prediction, label)`.
pub fn score_predictions(items: &[(String, Tensor<f32>, Tensor<f32>)]) -> Result<MetricsReport> {
    let confusions = items
        .iter()
        .map(|(id, p, l)| Ok((id.clone(), confusion(p, l)?)))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&confusions)
}

/// Network, training and split settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: UNetConfig,
    pub train: TrainConfig,
    /// Training ids drawn by the split.
    pub n_train: usize,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: UNetConfig::default(),
            train: TrainConfig::default(),
            n_train: 20,
            split_seed: 0,
        }
    }
}

impl RunConfig {
    /// Directory name such as `rsa-010-s0`.
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.network.block_kind.name(),
            self.network.placement,
            self.train.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: TrainHistory,
    pub train_report: MetricsReport,
    pub test_report: MetricsReport,
    pub dir: PathBuf,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.json";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `metrics_<tag>.json` and `metrics_<tag>.txt` into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_file(
        &dir.join(format!("metrics_{}.json", report.tag)),
        &report.to_json()?,
    )?;
    write_file(
        &dir.join(format!("metrics_{}.txt", report.tag)),
        &report.to_table(),
    )
}

/// Splits `samples`, trains a fresh network and evaluates it on both splits,
/// writing the resolved config, history, checkpoint and metrics into `dir`.
pub fn run_training(
    samples: &[VolumeSample],
    config: &RunConfig,
    dir: &Path,
    on_iteration: impl FnMut(usize, f64),
) -> Result<RunOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join(CONFIG_FILE),
        &serde_json::to_string_pretty(config)?,
    )?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (train_ids, test_ids) =
        crate::data::split_dataset(&ids, config.n_train, config.split_seed)?;
    let select = |wanted: &[String]| -> Vec<VolumeSample> {
        wanted
            .iter()
            .map(|id| {
                samples
                    .iter()
                    .find(|s| &s.id == id)
                    .expect("id from this set")
                    .clone()
            })
            .collect()
    };
    let (train_set, test_set) = (select(&train_ids), select(&test_ids));

    let mut net = crate::network::build_network::<f32>(&config.network)?;
    let history = train_loop(&mut net, &train_set, &config.train, on_iteration)?;
    write_file(&dir.join(HISTORY_FILE), &history.to_csv())?;
    net.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;

    let train_report = evaluate(&net, &train_set)?.with_tag("train");
    let test_report = evaluate(&net, &test_set)?.with_tag("test");
    write_report(dir, &train_report)?;
    write_report(dir, &test_report)?;
    Ok(RunOutcome {
        history,
        train_report,
        test_report,
        dir: dir.to_path_buf(),
    })
}
