//! Slice-wise attention (SA), recurrent slice-wise attention (RSA) and a
//! full-voxel non-local baseline.
//!
//! For a feature map `M` of shape `[C, D, H, W]` and a slice axis of extent
//! `L`, the SA block flattens every slice into a row, builds the `L × L` map
//! `A = softmax_rows(M₂·M₁)` of slice-to-slice affinities, aggregates
//! `A·M₃`, folds the result back into `[C, D, H, W]` and adds it to the input
//! scaled by a learned `α`:
//!
//! ```text
//! M' = α · fold(A · M₃) + M
//! ```
//!
//! `M₁`, `M₂`, `M₃` are reshape-transposes of `M`, optionally after a pointwise
//! channel embedding. The RSA block chains three SA passes (sagittal, coronal,
//! axial) that share one embedding but own independent `α`s. The non-local
//! block applies the same construction with every voxel as a sequence element.
//!
//! Every block accepts `[C, D, H, W]` or a batch `[N, C, D, H, W]`; batches are
//! processed element by element.
//!
//! The `*_naive` and `*_stepwise` functions compute the same quantities with
//! explicit scalar loops and are used as oracles for the matrix path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{inverse_permutation, softmax_in_place, Element, Tensor};

/// Default cap on the side of a non-local attention map.
pub const NONLOCAL_MAX_SIDE: usize = 4096;

/// Slice direction. Axial slices index `D`, coronal `H`, sagittal `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    Sagittal,
    Coronal,
    Axial,
}

impl SliceAxis {
    pub const ALL: [SliceAxis; 3] = [SliceAxis::Sagittal, SliceAxis::Coronal, SliceAxis::Axial];

    /// Pass order of the RSA block.
    pub const RECURRENT_ORDER: [SliceAxis; 3] = Self::ALL;

    /// Index into the spatial extents `[D, H, W]`.
    pub fn spatial_index(self) -> usize {
        match self {
            SliceAxis::Axial => 0,
            SliceAxis::Coronal => 1,
            SliceAxis::Sagittal => 2,
        }
    }

    /// Axis of a `[C, D, H, W]` tensor.
    fn feature_axis(self) -> usize {
        self.spatial_index() + 1
    }

    /// The two remaining spatial indices, ascending.
    fn other_spatial(self) -> [usize; 2] {
        match self.spatial_index() {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SliceAxis::Sagittal => "sagittal",
            SliceAxis::Coronal => "coronal",
            SliceAxis::Axial => "axial",
        }
    }
}

/// Row-stochastic square matrix; entry `(i, j)` weighs element `j`'s
/// contribution to element `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T>(Tensor<T>);

impl<T: Element> AttentionMap<T> {
    pub fn side(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0.data()[i * self.side() + j]
    }

    pub fn row_sums(&self) -> Vec<T> {
        self.0
            .data()
            .chunks(self.side())
            .map(|row| row.iter().copied().sum())
            .collect()
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Optional pointwise embeddings producing the query (`M₂`), key (`M₁`) and
/// value (`M₃`) roles. Any subset may be present; a missing role uses the
/// feature map itself. Query and key weights are `[C_e, C]`; value weights are
/// `[C, C]` so the attended map can be added back to the input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding<T> {
    pub query: Option<Tensor<T>>,
    pub key: Option<Tensor<T>>,
    pub value: Option<Tensor<T>>,
}

impl<T: Element> Embedding<T> {
    pub fn register(&self, tape: &Tape<T>, trainable: bool) -> EmbeddingVars {
        let reg = |t: &Option<Tensor<T>>| {
            t.as_ref().map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
        };
        EmbeddingVars {
            query: reg(&self.query),
            key: reg(&self.key),
            value: reg(&self.value),
        }
    }
}

/// Tape handles of a registered [`Embedding`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmbeddingVars {
    pub query: Option<Var>,
    pub key: Option<Var>,
    pub value: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SAParams<T> {
    pub alpha: T,
    pub embed: Option<Embedding<T>>,
}

impl<T: Element> Default for SAParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> SAParams<T> {
    /// `α = 0`, no embedding: the block starts as the identity.
    pub fn new() -> Self {
        Self {
            alpha: T::zero(),
            embed: None,
        }
    }

    pub fn with_alpha(alpha: T) -> Self {
        Self { alpha, embed: None }
    }

    pub fn register(&self, tape: &Tape<T>, trainable: bool) -> SaVars {
        let alpha = Tensor::scalar(self.alpha);
        SaVars {
            alpha: if trainable {
                tape.leaf(alpha)
            } else {
                tape.constant(alpha)
            },
            embed: self.embed.as_ref().map(|e| e.register(tape, trainable)),
        }
    }
}

/// Three independent `α`s (sagittal, coronal, axial pass) and one embedding
/// shared by all passes.
#[derive(Debug, Clone, PartialEq)]
pub struct RSAParams<T> {
    pub alphas: [T; 3],
    pub embed: Option<Embedding<T>>,
}

impl<T: Element> Default for RSAParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> RSAParams<T> {
    pub fn new() -> Self {
        Self {
            alphas: [T::zero(); 3],
            embed: None,
        }
    }

    pub fn with_alphas(alphas: [T; 3]) -> Self {
        Self {
            alphas,
            embed: None,
        }
    }

    /// The embedding is registered once, so all three passes read the same
    /// tape record and its gradient accumulates their contributions.
    pub fn register(&self, tape: &Tape<T>, trainable: bool) -> RsaVars {
        let reg = |a: T| {
            if trainable {
                tape.leaf(Tensor::scalar(a))
            } else {
                tape.constant(Tensor::scalar(a))
            }
        };
        RsaVars {
            alphas: self.alphas.map(reg),
            embed: self.embed.as_ref().map(|e| e.register(tape, trainable)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaVars {
    pub alpha: Var,
    pub embed: Option<EmbeddingVars>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsaVars {
    pub alphas: [Var; 3],
    pub embed: Option<EmbeddingVars>,
}

fn rank_of<T: Element>(tape: &Tape<T>, m: Var) -> Result<usize> {
    match tape.shape(m).len() {
        r @ (4 | 5) => Ok(r),
        r => Err(Error::RankMismatch {
            expected: 4,
            actual: r,
        }),
    }
}

/// Applies a rank-4 block to a rank-4 map or to every element of a batch.
fn per_element<T: Element>(
    tape: &Tape<T>,
    m: Var,
    block: impl Fn(Var) -> Result<Var>,
) -> Result<Var> {
    if rank_of(tape, m)? == 4 {
        return block(m);
    }
    let n = tape.shape(m)[0];
    let outs = (0..n)
        .map(|i| tape.select_batch(m, i).and_then(&block))
        .collect::<Result<Vec<_>>>()?;
    tape.stack_batch(&outs)
}

struct Roles {
    query: Var,
    key: Var,
    value: Var,
}

fn embed_roles<T: Element>(tape: &Tape<T>, m: Var, embed: Option<&EmbeddingVars>) -> Result<Roles> {
    let apply = |w: Option<Var>| match w {
        Some(w) => tape.conv3d_1x1(m, w, None),
        None => Ok(m),
    };
    let e = embed.copied().unwrap_or_default();
    let roles = Roles {
        query: apply(e.query)?,
        key: apply(e.key)?,
        value: apply(e.value)?,
    };
    let (cq, ck) = (tape.shape(roles.query)[0], tape.shape(roles.key)[0]);
    if cq != ck {
        return Err(Error::ChannelMismatch {
            expected: cq,
            actual: ck,
        });
    }
    let (c, cv) = (tape.shape(m)[0], tape.shape(roles.value)[0]);
    if cv != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            actual: cv,
        });
    }
    Ok(roles)
}

/// Slice attention on a single `[C, D, H, W]` map. Returns `(M', A)`.
fn sa_single<T: Element>(
    tape: &Tape<T>,
    m: Var,
    axis: SliceAxis,
    alpha: Var,
    embed: Option<&EmbeddingVars>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(m);
    let roles = embed_roles(tape, m, embed)?;
    let a = axis.feature_axis();
    let [o1, o2] = axis.other_spatial().map(|s| s + 1);
    let len = shape[a];
    let plane = shape[o1] * shape[o2];
    let rows_first = [a, 0, o1, o2];

    let ce = tape.shape(roles.query)[0];
    let m2 = tape.permute_reshape(roles.query, &rows_first, &[len, ce * plane])?;
    let m1 = tape.permute_reshape(roles.key, &[0, o1, o2, a], &[ce * plane, len])?;
    let logits = tape.matmul(m2, m1)?;
    let map = tape.softmax_rows(logits)?;

    let c = shape[0];
    let m3 = tape.permute_reshape(roles.value, &rows_first, &[len, c * plane])?;
    let aggregated = tape.matmul(map, m3)?;
    let unfolded = tape.reshape(aggregated, &[len, c, shape[o1], shape[o2]])?;
    let attended = tape.permute_reshape(unfolded, &inverse_permutation(&rows_first), &shape)?;
    Ok((tape.scaled_residual(alpha, attended, m)?, map))
}

/// SA block on the tape.
pub fn sa_block<T: Element>(tape: &Tape<T>, m: Var, axis: SliceAxis, vars: &SaVars) -> Result<Var> {
    per_element(tape, m, |x| {
        sa_single(tape, x, axis, vars.alpha, vars.embed.as_ref()).map(|(out, _)| out)
    })
}

/// RSA block on the tape: sagittal, coronal, then axial SA pass.
pub fn rsa_block<T: Element>(tape: &Tape<T>, m: Var, vars: &RsaVars) -> Result<Var> {
    per_element(tape, m, |x| {
        let mut current = x;
        for (axis, &alpha) in SliceAxis::RECURRENT_ORDER.iter().zip(&vars.alphas) {
            current = sa_single(tape, current, *axis, alpha, vars.embed.as_ref())?.0;
        }
        Ok(current)
    })
}

fn nonlocal_single<T: Element>(
    tape: &Tape<T>,
    m: Var,
    alpha: Var,
    embed: Option<&EmbeddingVars>,
    max_side: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(m);
    let len: usize = shape[1..].iter().product();
    if len > max_side {
        return Err(Error::AttentionMapTooLarge {
            side: len,
            limit: max_side,
        });
    }
    let roles = embed_roles(tape, m, embed)?;
    let ce = tape.shape(roles.query)[0];
    let voxels_first = [1, 2, 3, 0];
    let m2 = tape.permute_reshape(roles.query, &voxels_first, &[len, ce])?;
    let m1 = tape.reshape(roles.key, &[ce, len])?;
    let logits = tape.matmul(m2, m1)?;
    let map = tape.softmax_rows(logits)?;
    let c = shape[0];
    let m3 = tape.permute_reshape(roles.value, &voxels_first, &[len, c])?;
    let aggregated = tape.matmul(map, m3)?;
    let unfolded = tape.reshape(aggregated, &[shape[1], shape[2], shape[3], c])?;
    let attended = tape.permute_reshape(unfolded, &[3, 0, 1, 2], &shape)?;
    Ok((tape.scaled_residual(alpha, attended, m)?, map))
}

/// Non-local block on the tape, refusing maps wider than `max_side`.
pub fn nonlocal_block<T: Element>(
    tape: &Tape<T>,
    m: Var,
    vars: &SaVars,
    max_side: usize,
) -> Result<Var> {
    per_element(tape, m, |x| {
        nonlocal_single(tape, x, vars.alpha, vars.embed.as_ref(), max_side).map(|(out, _)| out)
    })
}

fn require_rank4<T: Element>(m: &Tensor<T>) -> Result<()> {
    if m.rank() != 4 {
        return Err(Error::RankMismatch {
            expected: 4,
            actual: m.rank(),
        });
    }
    Ok(())
}

/// Slice attention map of a `[C, D, H, W]` feature map.
pub fn sa_attention_map<T: Element>(
    m: &Tensor<T>,
    axis: SliceAxis,
    params: &SAParams<T>,
) -> Result<AttentionMap<T>> {
    require_rank4(m)?;
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let x = tape.constant(m.clone());
    let (_, map) = sa_single(&tape, x, axis, vars.alpha, vars.embed.as_ref())?;
    Ok(AttentionMap((*tape.value(map)).clone()))
}

/// Full-voxel attention map of a `[C, D, H, W]` feature map.
pub fn nonlocal_attention_map<T: Element>(
    m: &Tensor<T>,
    params: &SAParams<T>,
) -> Result<AttentionMap<T>> {
    require_rank4(m)?;
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let x = tape.constant(m.clone());
    let (_, map) = nonlocal_single(&tape, x, vars.alpha, vars.embed.as_ref(), NONLOCAL_MAX_SIDE)?;
    Ok(AttentionMap((*tape.value(map)).clone()))
}

fn eval_block<T: Element>(
    m: &Tensor<T>,
    run: impl FnOnce(&Tape<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let x = tape.constant(m.clone());
    let out = run(&tape, x)?;
    Ok((*tape.value(out)).clone())
}

pub fn sa_forward<T: Element>(
    m: &Tensor<T>,
    axis: SliceAxis,
    params: &SAParams<T>,
) -> Result<Tensor<T>> {
    eval_block(m, |tape, x| {
        let vars = params.register(tape, false);
        sa_block(tape, x, axis, &vars)
    })
}

pub fn rsa_forward<T: Element>(m: &Tensor<T>, params: &RSAParams<T>) -> Result<Tensor<T>> {
    eval_block(m, |tape, x| {
        let vars = params.register(tape, false);
        rsa_block(tape, x, &vars)
    })
}

pub fn nonlocal_forward<T: Element>(m: &Tensor<T>, params: &SAParams<T>) -> Result<Tensor<T>> {
    nonlocal_forward_with_limit(m, params, NONLOCAL_MAX_SIDE)
}

pub fn nonlocal_forward_with_limit<T: Element>(
    m: &Tensor<T>,
    params: &SAParams<T>,
    max_side: usize,
) -> Result<Tensor<T>> {
    eval_block(m, |tape, x| {
        let vars = params.register(tape, false);
        nonlocal_block(tape, x, &vars, max_side)
    })
}

// ---------------------------------------------------------------------------
// Scalar-loop oracles.

/// Dense `[C, D, H, W]` view used by the loop implementations.
struct Volume<'a, T> {
    channels: usize,
    dims: [usize; 3],
    data: &'a [T],
}

impl<T: Element> Volume<'_, T> {
    fn at(&self, c: usize, p: [usize; 3]) -> T {
        self.data[((c * self.dims[0] + p[0]) * self.dims[1] + p[1]) * self.dims[2] + p[2]]
    }
}

fn position(axis: SliceAxis, slice: usize, u: usize, v: usize) -> [usize; 3] {
    let mut p = [0; 3];
    let [o1, o2] = axis.other_spatial();
    p[axis.spatial_index()] = slice;
    p[o1] = u;
    p[o2] = v;
    p
}

/// Pointwise channel mixing with plain loops.
fn embed_naive<T: Element>(m: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let Some(w) = weights else {
        return Ok(m.clone());
    };
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    if c_in != m.shape()[0] {
        return Err(Error::ChannelMismatch {
            expected: c_in,
            actual: m.shape()[0],
        });
    }
    let voxels = m.len() / c_in;
    let mut out = vec![T::zero(); c_out * voxels];
    for o in 0..c_out {
        for i in 0..c_in {
            let wv = w.data()[o * c_in + i];
            for x in 0..voxels {
                out[o * voxels + x] = out[o * voxels + x] + wv * m.data()[i * voxels + x];
            }
        }
    }
    let mut shape = m.shape().to_vec();
    shape[0] = c_out;
    Tensor::new(&shape, out)
}

struct NaiveRoles<T> {
    query: Tensor<T>,
    key: Tensor<T>,
    value: Tensor<T>,
}

fn naive_roles<T: Element>(m: &Tensor<T>, embed: Option<&Embedding<T>>) -> Result<NaiveRoles<T>> {
    let roles = NaiveRoles {
        query: embed_naive(m, embed.and_then(|e| e.query.as_ref()))?,
        key: embed_naive(m, embed.and_then(|e| e.key.as_ref()))?,
        value: embed_naive(m, embed.and_then(|e| e.value.as_ref()))?,
    };
    if roles.query.shape()[0] != roles.key.shape()[0] {
        return Err(Error::ChannelMismatch {
            expected: roles.query.shape()[0],
            actual: roles.key.shape()[0],
        });
    }
    if roles.value.shape()[0] != m.shape()[0] {
        return Err(Error::ChannelMismatch {
            expected: m.shape()[0],
            actual: roles.value.shape()[0],
        });
    }
    Ok(roles)
}

fn volume<T: Element>(t: &Tensor<T>) -> Volume<'_, T> {
    let s = t.shape();
    Volume {
        channels: s[0],
        dims: [s[1], s[2], s[3]],
        data: t.data(),
    }
}

/// Softmax-normalized affinities of slice `i` to every slice along `axis`.
fn slice_weights<T: Element>(
    query: &Volume<'_, T>,
    key: &Volume<'_, T>,
    axis: SliceAxis,
    i: usize,
) -> Vec<T> {
    let dims = query.dims;
    let [o1, o2] = axis.other_spatial();
    let len = dims[axis.spatial_index()];
    let mut row = vec![T::zero(); len];
    for (j, logit) in row.iter_mut().enumerate() {
        let mut acc = T::zero();
        for c in 0..query.channels {
            for u in 0..dims[o1] {
                for v in 0..dims[o2] {
                    acc = acc
                        + query.at(c, position(axis, i, u, v)) * key.at(c, position(axis, j, u, v));
                }
            }
        }
        *logit = acc;
    }
    softmax_in_place(&mut row);
    row
}

fn apply_per_element<T: Element>(
    m: &Tensor<T>,
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    match m.rank() {
        4 => f(m),
        5 => {
            let n = m.shape()[0];
            let item_shape = &m.shape()[1..];
            let item = m.len() / n;
            let mut data = Vec::with_capacity(m.len());
            for i in 0..n {
                let x = Tensor::new(item_shape, m.data()[i * item..(i + 1) * item].to_vec())?;
                data.extend(f(&x)?.into_data());
            }
            Tensor::new(m.shape(), data)
        }
        r => Err(Error::RankMismatch {
            expected: 4,
            actual: r,
        }),
    }
}

/// Loop oracle for [`sa_forward`]: slice logits, softmax and weighted slice
/// sums with no matrix machinery. Intended for small inputs.
pub fn sa_forward_naive<T: Element>(
    m: &Tensor<T>,
    axis: SliceAxis,
    params: &SAParams<T>,
) -> Result<Tensor<T>> {
    apply_per_element(m, |m| {
        let roles = naive_roles(m, params.embed.as_ref())?;
        let (q, k, val) = (
            volume(&roles.query),
            volume(&roles.key),
            volume(&roles.value),
        );
        let dims = q.dims;
        let [o1, o2] = axis.other_spatial();
        let len = dims[axis.spatial_index()];
        let weights: Vec<Vec<T>> = (0..len).map(|i| slice_weights(&q, &k, axis, i)).collect();
        let mut out = m.clone();
        let input = volume(m);
        let mut cursor = 0;
        // Walk the output in memory order so `cursor` tracks (c, d, h, w).
        for c in 0..input.channels {
            for d in 0..dims[0] {
                for h in 0..dims[1] {
                    for w in 0..dims[2] {
                        let p = [d, h, w];
                        let i = p[axis.spatial_index()];
                        let mut acc = T::zero();
                        for (j, &wij) in weights[i].iter().enumerate() {
                            acc = acc + wij * val.at(c, position(axis, j, p[o1], p[o2]));
                        }
                        out.data_mut()[cursor] = params.alpha * acc + input.at(c, p);
                        cursor += 1;
                    }
                }
            }
        }
        Ok(out)
    })
}

/// Loop oracle for [`rsa_forward`] following the voxel-by-voxel propagation:
/// at each stage every voxel becomes the α-scaled attention-weighted sum of
/// the voxels sharing its line along the stage's axis, plus its own previous
/// value. Each voxel's attention row is recomputed from the previous stage's
/// full output.
pub fn rsa_forward_stepwise<T: Element>(m: &Tensor<T>, params: &RSAParams<T>) -> Result<Tensor<T>> {
    apply_per_element(m, |m| {
        let mut current = m.clone();
        for (axis, &alpha) in SliceAxis::RECURRENT_ORDER.iter().zip(&params.alphas) {
            let roles = naive_roles(&current, params.embed.as_ref())?;
            let (q, k, val) = (
                volume(&roles.query),
                volume(&roles.key),
                volume(&roles.value),
            );
            let prev = volume(&current);
            let dims = prev.dims;
            let [o1, o2] = axis.other_spatial();
            let mut next = vec![T::zero(); current.len()];
            let mut cursor = 0;
            for c in 0..prev.channels {
                for d in 0..dims[0] {
                    for h in 0..dims[1] {
                        for w in 0..dims[2] {
                            let p = [d, h, w];
                            let weights = slice_weights(&q, &k, *axis, p[axis.spatial_index()]);
                            let mut acc = T::zero();
                            for (j, &wj) in weights.iter().enumerate() {
                                acc = acc + wj * val.at(c, position(*axis, j, p[o1], p[o2]));
                            }
                            next[cursor] = alpha * acc + prev.at(c, p);
                            cursor += 1;
                        }
                    }
                }
            }
            current = Tensor::new(m.shape(), next)?;
        }
        Ok(current)
    })
}
