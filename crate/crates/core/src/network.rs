//! 3-D U-Net backbone with optional RSA or non-local blocks, the
//! exponentially class-weighted cross-entropy loss, and checkpoints.
//!
//! Level `l` has `base_channels · 2^l` channels. Each encoder level runs two
//! 3×3×3 conv + ReLU stages (preceded, below level 0, by a stride-2 conv +
//! ReLU); each decoder level upsamples by nearest neighbour, applies conv +
//! ReLU, concatenates the skip connection and runs two more conv + ReLU
//! stages. A pointwise conv produces the class logits.
//!
//! Placement digits select attention blocks at the second-bottom encoder
//! level, the bottom level and the second-bottom decoder level. Blocks act on
//! the output of their level's conv stages.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    nonlocal_block, rsa_block, EmbeddingVars, RsaVars, SaVars, NONLOCAL_MAX_SIDE,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::volume::{read_volume, write_volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    None,
    #[serde(rename = "ncl")]
    NonLocal,
    Rsa,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::NonLocal => "ncl",
            AttentionKind::Rsa => "rsa",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionKind::None),
            "ncl" | "nonlocal" => Ok(AttentionKind::NonLocal),
            "rsa" => Ok(AttentionKind::Rsa),
            other => Err(Error::InvalidConfig(format!(
                "unknown block kind {other:?}"
            ))),
        }
    }
}

/// Which positions receive a block: (second-bottom encoder, bottom,
/// second-bottom decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Placement(pub [bool; 3]);

impl Placement {
    pub const SUPPORTED: [&'static str; 4] = ["000", "010", "101", "111"];

    pub fn none() -> Self {
        Placement([false; 3])
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if !Self::SUPPORTED.contains(&s) {
            return Err(Error::InvalidPlacement(s.to_string()));
        }
        let b = s.as_bytes();
        Ok(Placement([b[0] == b'1', b[1] == b'1', b[2] == b'1']))
    }
}

impl TryFrom<String> for Placement {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Placement> for String {
    fn from(p: Placement) -> String {
        p.to_string()
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Which attention roles get a pointwise embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    #[default]
    Off,
    QueryKey,
    QueryKeyValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub block_kind: AttentionKind,
    pub placement: Placement,
    pub embedding: EmbeddingMode,
    /// Initialization seed.
    pub seed: u64,
    pub nonlocal_max_side: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            in_channels: 3,
            out_classes: 2,
            block_kind: AttentionKind::None,
            placement: Placement::none(),
            embedding: EmbeddingMode::Off,
            seed: 0,
            nonlocal_max_side: NONLOCAL_MAX_SIDE,
        }
    }
}

impl UNetConfig {
    pub fn with_blocks(mut self, kind: AttentionKind, placement: &str) -> Result<Self> {
        self.block_kind = kind;
        self.placement = placement.parse()?;
        Ok(self)
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 6 {
            return Err(Error::InvalidConfig(format!(
                "levels must be in 1..=6, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_classes == 0 {
            return Err(Error::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        match self.block_kind {
            AttentionKind::None if self.placement.count() > 0 => {
                Err(Error::InvalidConfig(format!(
                    "placement {} requires an attention block kind",
                    self.placement
                )))
            }
            _ if self.levels < 2 && (self.placement.0[0] || self.placement.0[2]) => {
                Err(Error::InvalidConfig(format!(
                    "placement {} needs at least two levels",
                    self.placement
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    down: Option<Conv>,
    convs: [Conv; 2],
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Conv,
    convs: [Conv; 2],
}

#[derive(Debug, Clone, Copy, Default)]
struct EmbedSlots {
    query: Option<usize>,
    key: Option<usize>,
    value: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Rsa {
        alphas: [usize; 3],
        embed: Option<EmbedSlots>,
    },
    NonLocal {
        alpha: usize,
        embed: Option<EmbedSlots>,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<EncoderLevel>,
    /// Indexed by level, `0..levels − 1`.
    decoder: Vec<DecoderLevel>,
    head: Conv,
    blocks: [Option<Block>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: UNetConfig,
    params: Vec<NamedTensor<T>>,
    layout: Layout,
}

struct Builder<T> {
    params: Vec<NamedTensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        let t = Tensor::new(shape, data).expect("valid parameter shape");
        self.push(name, t)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (c_in * k * k * k) as f64;
        let weight = self.normal(
            format!("{name}.weight"),
            &[c_out, c_in, k, k, k],
            (2.0 / fan_in).sqrt(),
        );
        let bias = self.push(
            format!("{name}.bias"),
            Tensor::zeros(&[c_out]).expect("non-empty"),
        );
        Conv {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    fn embed(&mut self, name: &str, c: usize, mode: EmbeddingMode) -> Option<EmbedSlots> {
        let ce = (c / 2).max(1);
        let std = (1.0 / c as f64).sqrt();
        match mode {
            EmbeddingMode::Off => None,
            EmbeddingMode::QueryKey | EmbeddingMode::QueryKeyValue => Some(EmbedSlots {
                query: Some(self.normal(format!("{name}.embed.query"), &[ce, c], std)),
                key: Some(self.normal(format!("{name}.embed.key"), &[ce, c], std)),
                value: (mode == EmbeddingMode::QueryKeyValue)
                    .then(|| self.normal(format!("{name}.embed.value"), &[c, c], std)),
            }),
        }
    }
}

/// Attention RNG stream; kept apart from the backbone stream so adding blocks
/// never changes backbone initialization.
const ATTENTION_STREAM: u64 = 1;

/// Creates a network with seeded He-normal conv weights, zero biases and
/// `α = 0` for every attention block.
pub fn build_network<T: Element>(config: &UNetConfig) -> Result<Network<T>> {
    config.validate()?;
    let levels = config.levels;
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut encoder = Vec::with_capacity(levels);
    for l in 0..levels {
        let c = config.channels(l);
        let (down, c_in) = if l == 0 {
            (None, config.in_channels)
        } else {
            let prev = config.channels(l - 1);
            (Some(b.conv(&format!("enc{l}.down"), prev, c, 3, 2)), c)
        };
        let convs = [
            b.conv(&format!("enc{l}.conv0"), c_in, c, 3, 1),
            b.conv(&format!("enc{l}.conv1"), c, c, 3, 1),
        ];
        encoder.push(EncoderLevel { down, convs });
    }
    let mut decoder = Vec::with_capacity(levels - 1);
    for l in 0..levels - 1 {
        let (c, below) = (config.channels(l), config.channels(l + 1));
        decoder.push(DecoderLevel {
            up: b.conv(&format!("dec{l}.up"), below, c, 3, 1),
            convs: [
                b.conv(&format!("dec{l}.conv0"), 2 * c, c, 3, 1),
                b.conv(&format!("dec{l}.conv1"), c, c, 3, 1),
            ],
        });
    }
    let head = b.conv("head", config.channels(0), config.out_classes, 1, 1);

    b.rng.set_stream(ATTENTION_STREAM);
    let slot_channels = [
        config.channels(levels.saturating_sub(2)),
        config.channels(levels - 1),
        config.channels(levels.saturating_sub(2)),
    ];
    let slot_names = ["attn.enc", "attn.bottom", "attn.dec"];
    let mut blocks = [None; 3];
    for i in 0..3 {
        if !config.placement.0[i] {
            continue;
        }
        let name = slot_names[i];
        let c = slot_channels[i];
        blocks[i] = match config.block_kind {
            AttentionKind::None => None,
            AttentionKind::Rsa => {
                let alphas = ["sagittal", "coronal", "axial"]
                    .map(|axis| b.push(format!("{name}.alpha.{axis}"), Tensor::scalar(T::zero())));
                let embed = b.embed(name, c, config.embedding);
                Some(Block::Rsa { alphas, embed })
            }
            AttentionKind::NonLocal => {
                let alpha = b.push(format!("{name}.alpha"), Tensor::scalar(T::zero()));
                let embed = b.embed(name, c, config.embedding);
                Some(Block::NonLocal { alpha, embed })
            }
        };
    }

    Ok(Network {
        config: config.clone(),
        params: b.params,
        layout: Layout {
            encoder,
            decoder,
            head,
            blocks,
        },
    })
}

impl<T: Element> Network<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn param_values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn attention_block_count(&self) -> usize {
        self.layout.blocks.iter().flatten().count()
    }

    /// Names of attention-block parameters (`α`s and embeddings).
    pub fn is_attention_param(&self, index: usize) -> bool {
        self.params[index].name.starts_with("attn.")
    }

    /// Same network with every parameter converted to `U`.
    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Registers all parameters as trainable leaves, in parameter order.
    pub fn register(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Checks that `[N, C, D, H, W]` fits the network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::RankMismatch {
                expected: 5,
                actual: shape.len(),
            });
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.in_channels,
                actual: shape[1],
            });
        }
        let divisor = self.config.divisor();
        for &extent in &shape[2..] {
            if extent == 0 || extent % divisor != 0 {
                return Err(Error::IndivisibleExtent { extent, divisor });
            }
        }
        Ok(())
    }

    /// Logits `[N, out_classes, D, H, W]` for `x`, using `vars` (from
    /// [`Network::register`] or any tape handles in parameter order).
    pub fn forward_with(&self, tape: &Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(&tape.shape(x))?;
        if vars.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let conv = |h: Var, c: &Conv| -> Result<Var> {
            let out = tape.conv3d(h, vars[c.weight], Some(vars[c.bias]), c.stride, c.padding)?;
            Ok(tape.relu(out))
        };
        let levels = self.config.levels;
        let attend = |h: Var, slot: usize| -> Result<Var> {
            match self.layout.blocks[slot] {
                None => Ok(h),
                Some(Block::Rsa { alphas, embed }) => {
                    let vars = RsaVars {
                        alphas: alphas.map(|i| vars[i]),
                        embed: embed.map(|e| embed_vars(vars, e)),
                    };
                    rsa_block(tape, h, &vars)
                }
                Some(Block::NonLocal { alpha, embed }) => {
                    let vars = SaVars {
                        alpha: vars[alpha],
                        embed: embed.map(|e| embed_vars(vars, e)),
                    };
                    nonlocal_block(tape, h, &vars, self.config.nonlocal_max_side)
                }
            }
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(levels);
        for (l, level) in self.layout.encoder.iter().enumerate() {
            if let Some(down) = &level.down {
                h = conv(h, down)?;
            }
            for c in &level.convs {
                h = conv(h, c)?;
            }
            if l + 1 == levels {
                h = attend(h, 1)?;
            } else if l + 2 == levels {
                h = attend(h, 0)?;
            }
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            let level = &self.layout.decoder[l];
            h = conv(tape.upsample_nearest2(h)?, &level.up)?;
            h = tape.concat_channels(skips[l], h)?;
            for c in &level.convs {
                h = conv(h, c)?;
            }
            if l + 2 == levels {
                h = attend(h, 2)?;
            }
        }
        let head = &self.layout.head;
        tape.conv3d(h, vars[head.weight], Some(vars[head.bias]), 1, 0)
    }

    /// Registers the parameters on `tape` and runs [`Network::forward_with`].
    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let vars = self.register(tape);
        let logits = self.forward_with(tape, &vars, x)?;
        Ok((logits, vars))
    }
}

fn embed_vars(vars: &[Var], e: EmbedSlots) -> EmbeddingVars {
    EmbeddingVars {
        query: e.query.map(|i| vars[i]),
        key: e.key.map(|i| vars[i]),
        value: e.value.map(|i| vars[i]),
    }
}

/// Plain-tensor inference: logits `[N, out_classes, D, H, W]`.
pub fn network_forward<T: Element>(net: &Network<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars: Vec<Var> = net
        .params
        .iter()
        .map(|p| tape.constant(p.value.clone()))
        .collect();
    let x = tape.constant(batch.clone());
    let logits = net.forward_with(&tape, &vars, x)?;
    Ok((*tape.value(logits)).clone())
}

/// Per-voxel argmax over the class axis of `[N, K, D, H, W]` logits, as a
/// `[N, D, H, W]` tensor of class indices.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(Error::RankMismatch {
            expected: 5,
            actual: s.len(),
        });
    }
    let (n, k) = (s[0], s[1]);
    let vox: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(n * vox);
    for b in 0..n {
        let base = &logits.data()[b * k * vox..(b + 1) * k * vox];
        for v in 0..vox {
            let mut best = 0;
            for c in 1..k {
                if base[c * vox + v] > base[best * vox + v] {
                    best = c;
                }
            }
            out.push(T::lit(best as f64));
        }
    }
    Tensor::new(&[n, s[2], s[3], s[4]], out)
}

/// Class weights `(background, lesion)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub background: f64,
    pub lesion: f64,
}

impl LossWeights {
    /// `lesion = e^r / (e^r + e^{1−r})`, `background = e^{1−r} / (e^r + e^{1−r})`.
    pub fn from_rate(r: f64) -> Result<Self> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidRate(r));
        }
        // Stable form of the two ratios.
        let lesion = 1.0 / (1.0 + (1.0 - 2.0 * r).exp());
        Ok(Self {
            background: 1.0 - lesion,
            lesion,
        })
    }

    /// Exchanges the two weights so the rarer class gets the larger one.
    pub fn swapped(self) -> Self {
        Self {
            background: self.lesion,
            lesion: self.background,
        }
    }
}

/// Class-weighted cross-entropy of two-class logits `[N, 2, D, H, W]` against
/// binary labels `[N, D, H, W]`:
///
/// ```text
/// loss = Σ_v w[y_v] · (−log softmax(logits_v)[y_v]) / Σ_v w[y_v]
/// ```
///
/// With equal weights this is the mean unweighted cross-entropy.
pub fn weighted_ce_loss_with<T: Element>(
    tape: &Tape<T>,
    logits: Var,
    labels: &Tensor<T>,
    weights: LossWeights,
) -> Result<Var> {
    let vl = tape.value(logits);
    let s = vl.shape().to_vec();
    if s.len() != 5 || s[1] != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(0), 2, 0, 0, 0],
            actual: s,
        });
    }
    let expected_labels = [s[0], s[2], s[3], s[4]];
    if labels.shape() != expected_labels {
        return Err(Error::ShapeMismatch {
            expected: expected_labels.to_vec(),
            actual: labels.shape().to_vec(),
        });
    }
    let classes: Vec<usize> = labels
        .data()
        .iter()
        .map(|&v| {
            if v == T::zero() {
                Ok(0)
            } else if v == T::one() {
                Ok(1)
            } else {
                Err(Error::InvalidLabel(v.to_f64().unwrap_or(f64::NAN)))
            }
        })
        .collect::<Result<_>>()?;
    let w = [weights.background, weights.lesion];
    let vox: usize = s[2..].iter().product();
    let n = s[0];

    let mut total = CompensatedSum::default();
    let mut weight_sum = 0.0f64;
    // d loss / d logit for upstream gradient 1.
    let mut dlogits = vec![T::zero(); vl.len()];
    for b in 0..n {
        let base = b * 2 * vox;
        for v in 0..vox {
            let y = classes[b * vox + v];
            let l0 = vl.data()[base + v].to_f64().expect("finite");
            let l1 = vl.data()[base + vox + v].to_f64().expect("finite");
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let ly = if y == 0 { l0 } else { l1 };
            total.add(w[y] * (lse - ly));
            weight_sum += w[y];
            let p1 = (l1 - lse).exp();
            let p0 = (l0 - lse).exp();
            let indicator = |c: usize| if c == y { 1.0 } else { 0.0 };
            dlogits[base + v] = T::lit(w[y] * (p0 - indicator(0)));
            dlogits[base + vox + v] = T::lit(w[y] * (p1 - indicator(1)));
        }
    }
    if weight_sum <= 0.0 {
        return Err(Error::InvalidConfig(
            "loss weights sum to zero over the batch".into(),
        ));
    }
    let norm = T::lit(1.0 / weight_sum);
    let dlogits = Tensor::new(&s, dlogits.into_iter().map(|d| d * norm).collect())?;
    let value = Tensor::new(&[1], vec![T::lit(total.value() / weight_sum)])?;
    Ok(tape.record(&[logits], value, move |g| {
        let g = g.item();
        vec![Some(dlogits.map(|d| d * g))]
    }))
}

/// Neumaier summation, so the loss is accurate enough for finite differences.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        self.carry += if self.sum.abs() >= x.abs() {
            (self.sum - t) + x
        } else {
            (x - t) + self.sum
        };
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// [`weighted_ce_loss_with`] using [`LossWeights::from_rate`].
pub fn weighted_ce_loss<T: Element>(
    tape: &Tape<T>,
    logits: Var,
    labels: &Tensor<T>,
    r: f64,
) -> Result<Var> {
    weighted_ce_loss_with(tape, logits, labels, LossWeights::from_rate(r)?)
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const CHECKPOINT_FORMAT: &str = "slicewise-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: UNetConfig,
    pub element_width: u8,
    pub tensors: Vec<TensorEntry>,
}

fn incompatible(path: &Path, reason: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint {
        path: PathBuf::from(path),
        reason: reason.into(),
    }
}

impl<T: Element> Network<T> {
    /// Writes `manifest.json` and one `<name>.rsav` per parameter into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let file = format!("{}.rsav", p.name);
            write_volume(dir.join(&file), &p.value)?;
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            element_width: T::WIDTH,
            tensors,
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| incompatible(dir, format!("cannot read {}: {e}", path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| incompatible(dir, format!("bad manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(incompatible(
                dir,
                format!("unknown format {:?}", manifest.format),
            ));
        }
        let mut net =
            build_network::<T>(&manifest.config).map_err(|e| incompatible(dir, e.to_string()))?;
        if manifest.tensors.len() != net.params.len() {
            return Err(incompatible(
                dir,
                format!(
                    "{} tensors listed, network has {}",
                    manifest.tensors.len(),
                    net.params.len()
                ),
            ));
        }
        for (entry, param) in manifest.tensors.iter().zip(net.params.iter_mut()) {
            if entry.name != param.name || entry.shape != param.value.shape() {
                return Err(incompatible(
                    dir,
                    format!(
                        "tensor {} {:?} does not match {} {:?}",
                        entry.name,
                        entry.shape,
                        param.name,
                        param.value.shape()
                    ),
                ));
            }
            let value: Tensor<T> = read_volume(dir.join(&entry.file))?;
            if value.shape() != param.value.shape() {
                return Err(incompatible(
                    dir,
                    format!("{} has shape {:?}", entry.file, value.shape()),
                ));
            }
            param.value = value;
        }
        Ok(net)
    }
}
