//! 3-D convolution (cross-correlation) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::flops;
use crate::parallel::map_indexed;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    fn output_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(Error::ShapeUnderflow {
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output positions `o` along one axis whose input index `o·stride + k − padding`
/// falls inside `0..input`, as a half-open range.
fn valid_range(
    output: usize,
    input: usize,
    stride: usize,
    k: usize,
    padding: usize,
) -> (usize, usize) {
    // o·stride + k ≥ padding
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // o·stride + k − padding ≤ input − 1
    let hi = if input + padding < k + 1 {
        0
    } else {
        ((input + padding - k - 1) / stride + 1).min(output)
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[C, D, H, W]` into `[C·k³, Od·Oh·Ow]`.
fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            let (z0, z1) = valid_range(od, d, s, kd, p);
            for kh in 0..k {
                let (y0, y1) = valid_range(oh, h, s, kh, p);
                for kw in 0..k {
                    let (x0, x1) = valid_range(ow, w, s, kw, p);
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for z in 0..od {
                        let zrow = &mut dst[z * oh * ow..(z + 1) * oh * ow];
                        if z < z0 || z >= z1 {
                            zrow.fill(T::zero());
                            continue;
                        }
                        let iz = z * s + kd - p;
                        for y in 0..oh {
                            let out = &mut zrow[y * ow..(y + 1) * ow];
                            if y < y0 || y >= y1 {
                                out.fill(T::zero());
                                continue;
                            }
                            let iy = y * s + kh - p;
                            let src = &xc[(iz * h + iy) * w..][..w];
                            out[..x0].fill(T::zero());
                            out[x1..].fill(T::zero());
                            if s == 1 {
                                out[x0..x1].copy_from_slice(&src[x0 + kw - p..x1 + kw - p]);
                            } else {
                                for (xo, v) in out[x0..x1].iter_mut().enumerate() {
                                    *v = src[(x0 + xo) * s + kw - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[C·k³, P]` onto `[C, D, H, W]`.
fn col2im<T: Element>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            let (z0, z1) = valid_range(od, d, s, kd, p);
            for kh in 0..k {
                let (y0, y1) = valid_range(oh, h, s, kh, p);
                for kw in 0..k {
                    let (x0, x1) = valid_range(ow, w, s, kw, p);
                    let src = &cols[row * plane..(row + 1) * plane];
                    for z in z0..z1 {
                        let iz = z * s + kd - p;
                        for y in y0..y1 {
                            let iy = y * s + kh - p;
                            let dst = &mut xc[(iz * h + iy) * w..][..w];
                            let from = &src[(z * oh + y) * ow..][..ow];
                            if s == 1 {
                                let dst = &mut dst[x0 + kw - p..x1 + kw - p];
                                for (a, &b) in dst.iter_mut().zip(&from[x0..x1]) {
                                    *a = *a + b;
                                }
                            } else {
                                for (xo, &b) in from.iter().enumerate().take(x1).skip(x0) {
                                    let ix = xo * s + kw - p;
                                    dst[ix] = dst[ix] + b;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn unfold<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let mut cols = vec![T::zero(); g.patch_len() * g.output_voxels()];
    im2col(x, g, &mut cols);
    cols
}

impl<T: Element> Tape<T> {
    /// Dense 3-D cross-correlation of `x` (`[N, C, D, H, W]`, or `[C, D, H, W]`
    /// for a single sample) with cubic `weights` `[C_out, C_in, k, k, k]` and an
    /// optional `bias` `[C_out]`.
    pub fn conv3d(
        &self,
        x: Var,
        weights: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(weights);
        let xs = vx.shape().to_vec();
        let (batch, spatial_at) = match xs.len() {
            4 => (1, 1),
            5 => (xs[0], 2),
            r => {
                return Err(Error::RankMismatch {
                    expected: 5,
                    actual: r,
                })
            }
        };
        let ws = vw.shape();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::ShapeMismatch {
                expected: vec![ws[0], xs[spatial_at - 1], 3, 3, 3],
                actual: ws.to_vec(),
            });
        }
        if ws[1] != xs[spatial_at - 1] {
            return Err(Error::ChannelMismatch {
                expected: ws[1],
                actual: xs[spatial_at - 1],
            });
        }
        let kernel = ws[2];
        let input = [xs[spatial_at], xs[spatial_at + 1], xs[spatial_at + 2]];
        let mut output = [0; 3];
        for (o, &i) in output.iter_mut().zip(&input) {
            *o = output_extent(i, kernel, stride, padding)?;
        }
        let g = Geometry {
            in_channels: ws[1],
            out_channels: ws[0],
            kernel,
            stride,
            padding,
            input,
            output,
        };
        let bias_value = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [g.out_channels] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![g.out_channels],
                        actual: vb.shape().to_vec(),
                    });
                }
                Some(vb)
            }
            None => None,
        };
        let positions = g.output_voxels();
        flops::record(|c| {
            c.conv_mul_adds += (batch * g.out_channels * g.patch_len() * positions) as u128
        });

        let (x_ref, w_ref, b_ref) = (&*vx, &*vw, bias_value.as_deref());
        let samples = map_indexed(batch, |n| {
            let xn = &x_ref.data()[n * g.input_len()..(n + 1) * g.input_len()];
            let cols = unfold(xn, &g);
            let mut y = vec![T::zero(); g.out_channels * positions];
            T::gemm(
                g.out_channels,
                g.patch_len(),
                positions,
                w_ref.data(),
                false,
                &cols,
                false,
                &mut y,
                false,
            );
            if let Some(b) = b_ref {
                for (row, &bv) in y.chunks_mut(positions).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
            y
        });
        let mut out_shape = xs[..spatial_at].to_vec();
        out_shape[spatial_at - 1] = g.out_channels;
        out_shape.extend_from_slice(&output);
        let out = Tensor::from_parts(out_shape, samples.concat());

        let mut inputs = vec![x, weights];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let w_shape = vw.shape().to_vec();
        Ok(self.record(&inputs, out, move |grad| {
            let (x_ref, w_ref) = (&*vx, &*vw);
            let per_sample = map_indexed(batch, |n| {
                let gy =
                    &grad.data()[n * g.out_channels * positions..][..g.out_channels * positions];
                let xn = &x_ref.data()[n * g.input_len()..(n + 1) * g.input_len()];
                let cols = unfold(xn, &g);
                let mut gw = vec![T::zero(); g.out_channels * g.patch_len()];
                T::gemm(
                    g.out_channels,
                    positions,
                    g.patch_len(),
                    gy,
                    false,
                    &cols,
                    true,
                    &mut gw,
                    false,
                );
                let mut gcols = vec![T::zero(); g.patch_len() * positions];
                T::gemm(
                    g.patch_len(),
                    g.out_channels,
                    positions,
                    w_ref.data(),
                    true,
                    gy,
                    false,
                    &mut gcols,
                    false,
                );
                let gx = if g.is_pointwise() {
                    gcols
                } else {
                    let mut gx = vec![T::zero(); g.input_len()];
                    col2im(&gcols, &g, &mut gx);
                    gx
                };
                let gb: Vec<T> = gy
                    .chunks(positions)
                    .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
                    .collect();
                (gx, gw, gb)
            });
            let mut gx = Vec::with_capacity(vx.len());
            let mut gw = vec![T::zero(); g.out_channels * g.patch_len()];
            let mut gb = vec![T::zero(); g.out_channels];
            for (sx, sw, sb) in per_sample {
                gx.extend(sx);
                gw.iter_mut().zip(sw).for_each(|(a, b)| *a = *a + b);
                gb.iter_mut().zip(sb).for_each(|(a, b)| *a = *a + b);
            }
            let mut grads = vec![
                Some(Tensor::from_parts(vx.shape().to_vec(), gx)),
                Some(Tensor::from_parts(w_shape.clone(), gw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::from_parts(vec![g.out_channels], gb)));
            }
            grads
        }))
    }

    /// Pointwise channel mixing with `weights` `[C_out, C_in]`.
    pub fn conv3d_1x1(&self, x: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weights);
        if ws.len() != 2 {
            return Err(Error::RankMismatch {
                expected: 2,
                actual: ws.len(),
            });
        }
        let kernel = self.reshape(weights, &[ws[0], ws[1], 1, 1, 1])?;
        self.conv3d(x, kernel, bias, 1, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_value(
        x: Tensor<f64>,
        w: Tensor<f64>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let (x, w) = (tape.constant(x), tape.constant(w));
        let y = tape.conv3d(x, w, None, stride, padding)?;
        Ok((*tape.value(y)).clone())
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_f64(
            &[1, 3, 4, 5],
            &(0..60).map(|v| v as f64 * 0.3 - 4.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut k = vec![0.0; 27];
        k[13] = 1.0;
        let w = Tensor::from_f64(&[1, 1, 3, 3, 3], &k).unwrap();
        let y = conv_value(x.clone(), w, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::full(&[1, 3, 3, 3], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let y = conv_value(x, w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn stride_two_halves_extents() {
        let x = Tensor::full(&[2, 2, 8, 6, 4], 0.5).unwrap();
        let w = Tensor::full(&[3, 2, 3, 3, 3], 0.1).unwrap();
        let y = conv_value(x, w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3, 2]);
    }

    #[test]
    fn underflow_and_channel_errors() {
        let x = Tensor::full(&[1, 2, 2, 2], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        assert!(matches!(
            conv_value(x, w, 1, 0),
            Err(Error::ShapeUnderflow { .. })
        ));
        let x = Tensor::full(&[2, 3, 3, 3], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        assert!(matches!(
            conv_value(x, w, 1, 1),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn pointwise_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 1, 1, 1], &[3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let y = tape.conv3d_1x1(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);

        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv3d_1x1(x, eye, None).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));

        let w3 = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap());
        assert!(matches!(
            tape.conv3d_1x1(x, w3, None),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    /// Direct seven-loop convolution, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, padding: usize) -> Vec<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let o = |n: usize| (n + 2 * padding - k) / stride + 1;
        let (od, oh, ow) = (o(d), o(h), o(wd));
        let mut out = vec![0.0; co * od * oh * ow];
        for c_out in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for c_in in 0..ci {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let iz = (z * stride + kd) as isize - padding as isize;
                                        let iy = (y * stride + kh) as isize - padding as isize;
                                        let ix = (xo * stride + kw) as isize - padding as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xv = x.data()[((c_in * d + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize];
                                        let wv = w.data()
                                            [(((c_out * ci + c_in) * k + kd) * k + kh) * k + kw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((c_out * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let xv: Vec<f64> = (0..2 * 5 * 4 * 6)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let wv: Vec<f64> = (0..3 * 2 * 27)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let x = Tensor::from_f64(&[2, 5, 4, 6], &xv).unwrap();
            let w = Tensor::from_f64(&[3, 2, 3, 3, 3], &wv).unwrap();
            let fast = conv_value(x.clone(), w.clone(), stride, padding).unwrap();
            let slow = naive_conv(&x, &w, stride, padding);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
