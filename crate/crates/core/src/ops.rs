//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::flops;
use crate::tape::{Tape, Var};
use crate::tensor::{check_shape, inverse_permutation, matmul_dims, permute_data, Element, Tensor};

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<T: Element> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb)?;
        let out = zip_map(&va, &vb, |x, y| x + y);
        Ok(self.record(&[a, b], out, |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb)?;
        let out = zip_map(&va, &vb, |x, y| x * y);
        Ok(self.record(&[a, b], out, move |g| {
            vec![
                Some(zip_map(g, &vb, |g, y| g * y)),
                Some(zip_map(g, &va, |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(&[a], out, move |g| vec![Some(g.map(|g| g * factor))])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let total = va.data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.record(&[a], Tensor::scalar(total), move |g| {
            let n = shape.iter().product();
            vec![Some(Tensor::from_parts(shape.clone(), vec![g.item(); n]))]
        })
    }

    /// Inner product with a constant tensor of the same shape.
    pub fn dot_const(&self, a: Var, weights: Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        same_shape(&va, &weights)?;
        let total = va
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&x, &w)| acc + x * w);
        Ok(self.record(&[a], Tensor::scalar(total), move |g| {
            let g = g.item();
            vec![Some(weights.map(|w| w * g))]
        }))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(T::zero()));
        self.record(&[a], out, move |g| {
            vec![Some(zip_map(g, &va, |g, x| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn reshape(&self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = va.reshape(new_shape)?;
        let old_shape = va.shape().to_vec();
        Ok(self.record(&[a], out, move |g| {
            vec![Some(Tensor::from_parts(
                old_shape.clone(),
                g.data().to_vec(),
            ))]
        }))
    }

    /// Transpose into `axis_order`, then reshape. The backward rule is the
    /// inverse reshape followed by the inverse transpose.
    pub fn permute_reshape(
        &self,
        a: Var,
        axis_order: &[usize],
        new_shape: &[usize],
    ) -> Result<Var> {
        let va = self.value(a);
        let out = va.permute_reshape(axis_order, new_shape)?;
        let permuted_shape: Vec<usize> = axis_order.iter().map(|&ax| va.shape()[ax]).collect();
        let inverse = inverse_permutation(axis_order);
        let in_shape = va.shape().to_vec();
        Ok(self.record(&[a], out, move |g| {
            let data = permute_data(g.data(), &permuted_shape, &inverse);
            vec![Some(Tensor::from_parts(in_shape.clone(), data))]
        }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(va.shape(), vb.shape())?;
        flops::record(|c| c.matmul_mul_adds += (m * k * n) as u128);
        let out = va.matmul(&vb)?;
        Ok(self.record(&[a, b], out, move |g| {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            let mut da = vec![T::zero(); m * k];
            T::gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
            let mut db = vec![T::zero(); k * n];
            T::gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
            vec![
                Some(Tensor::from_parts(vec![m, k], da)),
                Some(Tensor::from_parts(vec![k, n], db)),
            ]
        }))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.softmax_rows()?;
        flops::record(|c| c.softmax_exps += out.len() as u128);
        let probs = Rc::new(out.clone());
        let cols = out.shape()[1];
        Ok(self.record(&[a], out, move |g| {
            // dx = y ⊙ (g − ⟨g, y⟩) per row
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.data().chunks(cols).zip(probs.data().chunks(cols)) {
                let dot = grow
                    .iter()
                    .zip(yrow)
                    .fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                dx.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
            }
            vec![Some(Tensor::from_parts(probs.shape().to_vec(), dx))]
        }))
    }

    /// `alpha · attended + original`, with `alpha` a `[1]` tensor.
    pub fn scaled_residual(&self, alpha: Var, attended: Var, original: Var) -> Result<Var> {
        let (valpha, vatt, vorig) = (
            self.value(alpha),
            self.value(attended),
            self.value(original),
        );
        if valpha.len() != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![1],
                actual: valpha.shape().to_vec(),
            });
        }
        same_shape(&vorig, &vatt)?;
        let a = valpha.item();
        let out = zip_map(&vatt, &vorig, |x, m| a * x + m);
        Ok(self.record(&[alpha, attended, original], out, move |g| {
            let dalpha = g
                .data()
                .iter()
                .zip(vatt.data())
                .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
            vec![
                Some(Tensor::scalar(dalpha)),
                Some(g.map(|g| g * a)),
                Some(g.clone()),
            ]
        }))
    }

    /// Element `index` of a rank-5 batch, as a rank-4 tensor.
    pub fn select_batch(&self, a: Var, index: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 5 {
            return Err(Error::RankMismatch {
                expected: 5,
                actual: va.rank(),
            });
        }
        let shape = va.shape().to_vec();
        let item: usize = shape[1..].iter().product();
        let out = Tensor::from_parts(
            shape[1..].to_vec(),
            va.data()[index * item..(index + 1) * item].to_vec(),
        );
        Ok(self.record(&[a], out, move |g| {
            let mut full = vec![T::zero(); shape.iter().product()];
            full[index * item..(index + 1) * item].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(shape.clone(), full))]
        }))
    }

    /// Stacks equally shaped rank-4 tensors into a rank-5 batch.
    pub fn stack_batch(&self, items: &[Var]) -> Result<Var> {
        let first = self.shape(*items.first().ok_or(Error::EmptyInput)?);
        if first.len() != 4 {
            return Err(Error::RankMismatch {
                expected: 4,
                actual: first.len(),
            });
        }
        let mut data = Vec::new();
        for &v in items {
            let value = self.value(v);
            if value.shape() != first.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: first.clone(),
                    actual: value.shape().to_vec(),
                });
            }
            data.extend_from_slice(value.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first);
        let item: usize = first.iter().product();
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(items, out, move |g| {
            g.data()
                .chunks(item)
                .map(|chunk| Some(Tensor::from_parts(first.clone(), chunk.to_vec())))
                .collect()
        }))
    }

    /// Concatenates two rank-5 tensors along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if sa.len() != 5 || sb.len() != 5 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                expected: sa,
                actual: sb,
            });
        }
        let n = sa[0];
        let block_a = va.len() / n;
        let block_b = vb.len() / n;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * block_a..(i + 1) * block_a]);
            data.extend_from_slice(&vb.data()[i * block_b..(i + 1) * block_b]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(&[a, b], out, move |g| {
            let mut ga = Vec::with_capacity(n * block_a);
            let mut gb = Vec::with_capacity(n * block_b);
            for chunk in g.data().chunks(block_a + block_b) {
                ga.extend_from_slice(&chunk[..block_a]);
                gb.extend_from_slice(&chunk[block_a..]);
            }
            vec![
                Some(Tensor::from_parts(sa.clone(), ga)),
                Some(Tensor::from_parts(sb.clone(), gb)),
            ]
        }))
    }

    /// Nearest-neighbour upsampling by 2 along every spatial axis of a rank-5
    /// tensor.
    pub fn upsample_nearest2(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 5 {
            return Err(Error::RankMismatch {
                expected: 5,
                actual: va.rank(),
            });
        }
        let s = va.shape().to_vec();
        let (d, h, w) = (s[2], s[3], s[4]);
        let out_shape = vec![s[0], s[1], 2 * d, 2 * h, 2 * w];
        check_shape(&out_shape)?;
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * 8 * d * h * w];
        for p in 0..planes {
            let src = &va.data()[p * d * h * w..(p + 1) * d * h * w];
            let dst = &mut out[p * 8 * d * h * w..(p + 1) * 8 * d * h * w];
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let row = &src[((z / 2) * h + y / 2) * w..][..w];
                    let drow = &mut dst[(z * 2 * h + y) * 2 * w..][..2 * w];
                    for (x, v) in drow.iter_mut().enumerate() {
                        *v = row[x / 2];
                    }
                }
            }
        }
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.record(&[a], out, move |g| {
            let mut gin = vec![T::zero(); planes * d * h * w];
            for p in 0..planes {
                let src = &g.data()[p * 8 * d * h * w..(p + 1) * 8 * d * h * w];
                let dst = &mut gin[p * d * h * w..(p + 1) * d * h * w];
                for z in 0..2 * d {
                    for y in 0..2 * h {
                        let row = &src[(z * 2 * h + y) * 2 * w..][..2 * w];
                        let drow = &mut dst[((z / 2) * h + y / 2) * w..][..w];
                        for (x, &v) in row.iter().enumerate() {
                            drow[x / 2] = drow[x / 2] + v;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), gin))]
        }))
    }
}
