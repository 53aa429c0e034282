//! Numeric kernels behind the autodiff graph: 3D convolution (im2col + GEMM),
//! non-overlapping max pooling, spatial averaging and temporal linear
//! upsampling. Every batched kernel fans out per sample through [`Exec`].

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

/// Stride and zero padding of a 3D convolution along (t, h, w).
///
/// Padding is signed so a 1×1×1 kernel can address the centre voxel of a
/// wider receptive field (padding one less than the wide kernel's).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [isize; 3],
}

impl ConvGeometry {
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvGeometry {
            stride: [1, 1, 1],
            padding: kernel.map(|k| (k / 2) as isize),
        }
    }

    pub fn output_extent(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] as isize + 2 * self.padding[d];
            if self.stride[d] == 0 || padded < kernel[d] as isize {
                return Err(Error::Shape(format!(
                    "axis {d}: extent {} with padding {} cannot fit kernel {}",
                    input[d], self.padding[d], kernel[d]
                )));
            }
            out[d] = ((padded - kernel[d] as isize) as usize) / self.stride[d] + 1;
        }
        Ok(out)
    }
}

struct ConvPlan {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl ConvPlan {
    fn new(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<Self> {
        let [n, c, t, h, w] = input.dims5()?;
        let [co, ci, kt, kh, kw] = weight.dims5()?;
        if ci != c {
            return Err(Error::Shape(format!(
                "convolution expects {ci} input channels, got {c}"
            )));
        }
        let output = geom.output_extent([t, h, w], [kt, kh, kw])?;
        Ok(ConvPlan {
            batch: n,
            in_channels: c,
            out_channels: co,
            input: [t, h, w],
            kernel: [kt, kh, kw],
            output,
            geom,
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geom.stride == [1, 1, 1] && self.geom.padding == [0, 0, 0]
    }

    /// Visit every (column-matrix index, input index) pair that lands inside
    /// the input; out-of-range taps are the implicit zeros.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [to, ho, wo] = self.output;
        let [st, sh, sw] = self.geom.stride;
        let [pt, ph, pw] = self.geom.padding;
        let p = self.out_plane();
        for ci in 0..self.in_channels {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let row = ((ci * kt + a) * kh + b) * kw + c;
                        for ot in 0..to {
                            let it = (ot * st) as isize + a as isize - pt;
                            if it < 0 || it >= ti as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh) as isize + b as isize - ph;
                                if ih < 0 || ih >= hi as isize {
                                    continue;
                                }
                                let out_base = (ot * ho + oh) * wo;
                                let in_base = ((ci * ti + it as usize) * hi + ih as usize) * wi;
                                for ow in 0..wo {
                                    let iw = (ow * sw) as isize + c as isize - pw;
                                    if iw < 0 || iw >= wi as isize {
                                        continue;
                                    }
                                    f(row * p + out_base + ow, in_base + iw as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, sample: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.taps() * self.out_plane()];
        self.for_each_tap(|dst, src| cols[dst] = sample[src]);
        cols
    }

    fn col2im(&self, cols: &[f64], grad_sample: &mut [f64]) {
        self.for_each_tap(|src, dst| grad_sample[dst] += cols[src]);
    }
}

/// `c = a·b + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    // SAFETY: the assertions above keep every strided access inside the
    // slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `input` `[N, Cin, T, H, W]` with `weight`
/// `[Cout, Cin, kt, kh, kw]` under zero padding.
pub fn conv3d_forward(input: &Tensor, weight: &Tensor, geom: ConvGeometry, exec: Exec) -> Result<Tensor> {
    let plan = ConvPlan::new(input, weight, geom)?;
    let (in_plane, out_plane) = (plan.in_plane(), plan.out_plane());
    let cin = plan.in_channels;
    let co = plan.out_channels;
    let k = plan.taps();
    let [to, ho, wo] = plan.output;
    let mut out = Tensor::zeros(&[plan.batch, co, to, ho, wo]);
    let x = input.data();
    let w = weight.data();
    exec.for_each_chunk(out.data_mut(), co * out_plane, |n, dst| {
        let sample = &x[n * cin * in_plane..(n + 1) * cin * in_plane];
        if plan.is_pointwise() {
            gemm(co, k, out_plane, w, (k, 1), sample, (out_plane, 1), 0.0, dst);
        } else {
            let cols = plan.im2col(sample);
            gemm(co, k, out_plane, w, (k, 1), &cols, (out_plane, 1), 0.0, dst);
        }
    });
    Ok(out)
}

/// Gradients of [`conv3d_forward`] with respect to input and weight.
pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeometry,
    exec: Exec,
) -> Result<(Tensor, Tensor)> {
    let plan = ConvPlan::new(input, weight, geom)?;
    let (in_plane, out_plane) = (plan.in_plane(), plan.out_plane());
    let cin = plan.in_channels;
    let co = plan.out_channels;
    let k = plan.taps();
    let [to, ho, wo] = plan.output;
    if grad_out.shape() != [plan.batch, co, to, ho, wo] {
        return Err(Error::Shape(format!(
            "convolution gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [plan.batch, co, to, ho, wo]
        )));
    }
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();

    let per_sample = exec.map_collect(plan.batch, |n| {
        let sample = &x[n * cin * in_plane..(n + 1) * cin * in_plane];
        let g = &gy[n * co * out_plane..(n + 1) * co * out_plane];
        let mut grad_w = vec![0.0; co * k];
        let mut grad_in = vec![0.0; cin * in_plane];
        if plan.is_pointwise() {
            gemm(co, out_plane, k, g, (out_plane, 1), sample, (1, out_plane), 0.0, &mut grad_w);
            gemm(k, co, out_plane, w, (1, k), g, (out_plane, 1), 0.0, &mut grad_in);
        } else {
            let cols = plan.im2col(sample);
            gemm(co, out_plane, k, g, (out_plane, 1), &cols, (1, out_plane), 0.0, &mut grad_w);
            let mut grad_cols = vec![0.0; k * out_plane];
            gemm(k, co, out_plane, w, (1, k), g, (out_plane, 1), 0.0, &mut grad_cols);
            plan.col2im(&grad_cols, &mut grad_in);
        }
        (grad_in, grad_w)
    });

    let mut grad_input = Vec::with_capacity(input.len());
    let mut grad_weight = vec![0.0; weight.len()];
    for (gi, gw) in per_sample {
        grad_input.extend_from_slice(&gi);
        for (acc, v) in grad_weight.iter_mut().zip(&gw) {
            *acc += v;
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_input)?,
        Tensor::from_vec(weight.shape(), grad_weight)?,
    ))
}

/// Non-overlapping max pooling with window = stride. Returns the pooled map
/// and, for each output voxel, the flat input index of its maximum.
pub fn max_pool3d(input: &Tensor, window: [usize; 3]) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, t, h, w] = input.dims5()?;
    if window.contains(&0) {
        return Err(Error::Shape("pooling window must be positive".into()));
    }
    let [to, ho, wo] = [t / window[0], h / window[1], w / window[2]];
    if to == 0 || ho == 0 || wo == 0 {
        return Err(Error::Shape(format!(
            "pooling window {window:?} larger than extent {:?}",
            [t, h, w]
        )));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * to * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * t * h * w;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            for d in 0..window[2] {
                                let idx = base
                                    + ((ot * window[0] + a) * h + oh * window[1] + b) * w
                                    + ow * window[2]
                                    + d;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, to, ho, wo], out)?, argmax))
}

/// `[N, C, T, H, W]` → `[N, C, T, 1, 1]` by averaging each frame.
pub fn spatial_mean(input: &Tensor) -> Result<Tensor> {
    let [n, c, t, h, w] = input.dims5()?;
    let area = h * w;
    let out = input
        .data()
        .chunks(area)
        .map(|frame| frame.iter().sum::<f64>() / area as f64)
        .collect();
    Tensor::from_vec(&[n, c, t, 1, 1], out)
}

/// Source index pair and blend weight for each output frame of a ×`factor`
/// linear upsampling (half-pixel centres, edges clamped).
pub fn upsample_taps(frames: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..frames * factor)
        .map(|j| {
            let src = ((j as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(frames - 1);
            let i1 = (i0 + 1).min(frames - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Linear interpolation along the frame axis by an integer factor.
pub fn temporal_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, t, h, w] = input.dims5()?;
    if factor == 0 || t == 0 {
        return Err(Error::Shape("upsampling needs a positive factor and frames".into()));
    }
    let area = h * w;
    let taps = upsample_taps(t, factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * t * factor * area);
    for plane in 0..n * c {
        let base = plane * t * area;
        for &(i0, i1, lam) in &taps {
            for s in 0..area {
                out.push((1.0 - lam) * x[base + i0 * area + s] + lam * x[base + i1 * area + s]);
            }
        }
    }
    Tensor::from_vec(&[n, c, t * factor, h, w], out)
}

pub fn temporal_upsample_backward(grad_out: &Tensor, frames: usize, factor: usize) -> Result<Tensor> {
    let [n, c, tf, h, w] = grad_out.dims5()?;
    if tf != frames * factor {
        return Err(Error::Shape("upsample gradient length mismatch".into()));
    }
    let area = h * w;
    let taps = upsample_taps(frames, factor);
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * frames * area];
    for plane in 0..n * c {
        let in_base = plane * frames * area;
        let out_base = plane * tf * area;
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            for s in 0..area {
                let gj = g[out_base + j * area + s];
                out[in_base + i0 * area + s] += (1.0 - lam) * gj;
                out[in_base + i1 * area + s] += lam * gj;
            }
        }
    }
    Tensor::from_vec(&[n, c, frames, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Straight seven-loop convolution used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Tensor {
        let [n, ci, t, h, wd] = x.dims5().unwrap();
        let [co, _, kt, kh, kw] = w.dims5().unwrap();
        let [to, ho, wo] = geom.output_extent([t, h, wd], [kt, kh, kw]).unwrap();
        let mut out = Tensor::zeros(&[n, co, to, ho, wo]);
        let at = |b: usize, c: usize, i: isize, j: isize, k: isize| -> f64 {
            if i < 0 || j < 0 || k < 0 || i >= t as isize || j >= h as isize || k >= wd as isize {
                0.0
            } else {
                x.data()[(((b * ci + c) * t + i as usize) * h + j as usize) * wd + k as usize]
            }
        };
        for b in 0..n {
            for o in 0..co {
                for ot in 0..to {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = 0.0;
                            for c in 0..ci {
                                for a in 0..kt {
                                    for bb in 0..kh {
                                        for d in 0..kw {
                                            let wv = w.data()[(((o * ci + c) * kt + a) * kh + bb) * kw + d];
                                            acc += wv
                                                * at(
                                                    b,
                                                    c,
                                                    (ot * geom.stride[0]) as isize + a as isize - geom.padding[0],
                                                    (oh * geom.stride[1]) as isize + bb as isize - geom.padding[1],
                                                    (ow * geom.stride[2]) as isize + d as isize - geom.padding[2],
                                                );
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((b * co + o) * to + ot) * ho + oh) * wo + ow] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (kernel, stride, padding) in [
            ([3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 5, 5], [1, 1, 1], [0, 2, 2]),
            ([3, 1, 1], [2, 1, 2], [1, 0, 0]),
            ([1, 1, 1], [1, 1, 1], [0, 0, 0]),
            ([1, 1, 1], [2, 2, 2], [0, 0, 0]),
        ] {
            let x = random(&[2, 3, 5, 6, 7], &mut rng);
            let w = random(&[4, 3, kernel[0], kernel[1], kernel[2]], &mut rng);
            let geom = ConvGeometry { stride, padding };
            let fast = conv3d_forward(&x, &w, geom, Exec::default()).unwrap();
            let slow = naive_conv(&x, &w, geom);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{kernel:?} {stride:?}");
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), g> must equal <x, dx> + 0 and, by linearity in w, <w, dw>.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 2, 4, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let geom = ConvGeometry::same([3, 3, 3]);
        let y = conv3d_forward(&x, &w, geom, Exec::Sequential).unwrap();
        let g = random(y.shape(), &mut rng);
        let (dx, dw) = conv3d_backward(&x, &w, &g, geom, Exec::Sequential).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9);
        assert!((lhs - via_w).abs() < 1e-9);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 2, 4, 4, 4], &mut rng);
        let w = random(&[2, 2, 3, 3, 3], &mut rng);
        let geom = ConvGeometry::same([3, 3, 3]);
        let a = conv3d_forward(&x, &w, geom, Exec::Sequential).unwrap();
        let b = conv3d_forward(&x, &w, geom, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let (dxa, dwa) = conv3d_backward(&x, &w, &a, geom, Exec::Sequential).unwrap();
        let (dxb, dwb) = conv3d_backward(&x, &w, &a, geom, Exec::Parallel).unwrap();
        assert_eq!(dxa, dxb);
        assert_eq!(dwa, dwb);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(
            conv3d_forward(&x, &w, ConvGeometry::same([3, 3, 3]), Exec::Sequential),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64);
        let (y, idx) = max_pool3d(&x, [2, 2, 2]).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(idx, vec![7]);
    }

    #[test]
    fn upsample_preserves_constants_and_length() {
        let x = Tensor::full(&[1, 2, 5, 1, 1], 3.0);
        let y = temporal_upsample(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 2, 20, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 1, 6, 2, 1], &mut rng);
        let y = temporal_upsample(&x, 4).unwrap();
        let g = random(y.shape(), &mut rng);
        let dx = temporal_upsample_backward(&g, 6, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
