//! Temporal difference convolution.
//!
//! A 3×3×3 convolution whose previous- and next-frame kernel slices see the
//! input relative to the centre voxel of the current frame:
//!
//! ```text
//! O(p) = Σ_{n∈R(t-1)} w(n)·(I(p(t-1)+n) − θ·I(p))
//!      + Σ_{n∈R(t+1)} w(n)·(I(p(t+1)+n) − θ·I(p))
//!      + Σ_{n∈R(t)}   w(n)· I(p(t)+n)
//! ```
//!
//! summed over input channels. `θ = 0` is a plain 3D convolution. Because
//! the θ terms only involve `I(p)`, the whole operator equals a vanilla
//! convolution minus `θ` times a pointwise convolution whose kernel is the
//! sum of the two outer temporal slices; [`tdc_forward_reparam`] uses that
//! form, [`tdc_forward`] evaluates the sums literally.
//!
//! Out-of-range taps read zero padding. The θ correction is applied for
//! every outer-slice tap regardless of whether the tap itself fell into the
//! padding, so the two forms agree everywhere, borders included.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TdcParams {
    weights: Tensor,
    theta: f64,
    stride: [usize; 3],
    padding: [usize; 3],
}

impl TdcParams {
    /// Stride 1 and padding 1 on every axis, so output extents match input.
    pub fn new(weights: Tensor, theta: f64) -> Result<Self> {
        let [_, _, kt, kh, kw] = weights.dims5()?;
        if [kt, kh, kw] != [3, 3, 3] {
            return Err(Error::Shape(format!(
                "temporal difference kernels are 3×3×3, got {kt}×{kh}×{kw}"
            )));
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("theta must lie in [0, 1], got {theta}")));
        }
        if !weights.all_finite() {
            return Err(Error::InvalidArgument("non-finite convolution weights".into()));
        }
        Ok(TdcParams {
            weights,
            theta,
            stride: [1, 1, 1],
            padding: [1, 1, 1],
        })
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Result<Self> {
        if stride.contains(&0) {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding.map(|p| p as isize),
        }
    }

    /// Geometry that makes a 1×1×1 kernel read the centre of each 3×3×3 window.
    pub fn center_geometry(&self) -> ConvGeometry {
        centre_of(self.geometry())
    }
}

fn centre_of(geom: ConvGeometry) -> ConvGeometry {
    ConvGeometry {
        stride: geom.stride,
        padding: geom.padding.map(|p| p - 1),
    }
}

struct Layout {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
}

fn layout(input: &Tensor, params: &TdcParams) -> Result<Layout> {
    let [n, cin, t, h, w] = input.dims5()?;
    let [cout, wcin, ..] = params.weights.dims5()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "temporal difference convolution expects {wcin} input channels, got {cin}"
        )));
    }
    let output = params.geometry().output_extent([t, h, w], [3, 3, 3])?;
    Ok(Layout {
        n,
        cin,
        cout,
        input: [t, h, w],
        output,
    })
}

/// Flat input index of a tap, or `None` when it falls into the padding.
#[inline]
fn tap(l: &Layout, b: usize, c: usize, pos: [isize; 3]) -> Option<usize> {
    let [t, h, w] = l.input;
    if pos[0] < 0 || pos[1] < 0 || pos[2] < 0 || pos[0] >= t as isize || pos[1] >= h as isize || pos[2] >= w as isize {
        return None;
    }
    Some((((b * l.cin + c) * t + pos[0] as usize) * h + pos[1] as usize) * w + pos[2] as usize)
}

/// Visit each (batch, out-channel, flat output index, window origin) tuple.
fn for_each_output(l: &Layout, p: &TdcParams, mut f: impl FnMut(usize, usize, usize, [isize; 3])) {
    let [to, ho, wo] = l.output;
    for b in 0..l.n {
        for o in 0..l.cout {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let out_idx = (((b * l.cout + o) * to + ot) * ho + oh) * wo + ow;
                        let origin = [
                            (ot * p.stride[0]) as isize - p.padding[0] as isize,
                            (oh * p.stride[1]) as isize - p.padding[1] as isize,
                            (ow * p.stride[2]) as isize - p.padding[2] as isize,
                        ];
                        f(b, o, out_idx, origin);
                    }
                }
            }
        }
    }
}

/// Literal evaluation of the three receptive-field sums.
pub fn tdc_forward(input: &Tensor, params: &TdcParams) -> Result<Tensor> {
    let l = layout(input, params)?;
    let x = input.data();
    let w = params.weights.data();
    let theta = params.theta;
    let mut out = Tensor::zeros(&[l.n, l.cout, l.output[0], l.output[1], l.output[2]]);
    let y = out.data_mut();
    for_each_output(&l, params, |b, o, out_idx, origin| {
        let mut acc = 0.0;
        for c in 0..l.cin {
            let centre = tap(&l, b, c, origin.map(|v| v + 1)).map_or(0.0, |i| x[i]);
            for a in 0..3 {
                for bb in 0..3 {
                    for d in 0..3 {
                        let wv = w[(((o * l.cin + c) * 3 + a) * 3 + bb) * 3 + d];
                        let pos = [origin[0] + a as isize, origin[1] + bb as isize, origin[2] + d as isize];
                        let iv = tap(&l, b, c, pos).map_or(0.0, |i| x[i]);
                        acc += if a == 1 { wv * iv } else { wv * (iv - theta * centre) };
                    }
                }
            }
        }
        y[out_idx] = acc;
    });
    Ok(out)
}

/// Gradients of [`tdc_forward`] with respect to input and weights.
pub fn tdc_backward(input: &Tensor, params: &TdcParams, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let l = layout(input, params)?;
    if grad_out.shape() != [l.n, l.cout, l.output[0], l.output[1], l.output[2]] {
        return Err(Error::Shape("gradient does not match the operator output".into()));
    }
    let x = input.data();
    let w = params.weights.data();
    let g = grad_out.data();
    let theta = params.theta;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for_each_output(&l, params, |b, o, out_idx, origin| {
        let go = g[out_idx];
        for c in 0..l.cin {
            let centre_idx = tap(&l, b, c, origin.map(|v| v + 1));
            let centre = centre_idx.map_or(0.0, |i| x[i]);
            for a in 0..3 {
                for bb in 0..3 {
                    for d in 0..3 {
                        let wi = (((o * l.cin + c) * 3 + a) * 3 + bb) * 3 + d;
                        let pos = [origin[0] + a as isize, origin[1] + bb as isize, origin[2] + d as isize];
                        let tap_idx = tap(&l, b, c, pos);
                        let iv = tap_idx.map_or(0.0, |i| x[i]);
                        if let Some(i) = tap_idx {
                            gx[i] += go * w[wi];
                        }
                        if a == 1 {
                            gw[wi] += go * iv;
                        } else {
                            gw[wi] += go * (iv - theta * centre);
                            if let Some(ci) = centre_idx {
                                gx[ci] -= theta * go * w[wi];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(params.weights.shape(), gw)?,
    ))
}

/// Per-(out, in) channel sums of the previous- and next-frame kernel slices.
pub fn temporal_edge_kernel(weights: &Tensor) -> Result<Tensor> {
    let [co, ci, kt, kh, kw] = weights.dims5()?;
    if kt != 3 {
        return Err(Error::Shape(format!("expected a temporal extent of 3, got {kt}")));
    }
    let area = kh * kw;
    let w = weights.data();
    Tensor::from_vec(
        &[co, ci, 1, 1, 1],
        (0..co * ci)
            .map(|pair| {
                let base = pair * 3 * area;
                w[base..base + area].iter().sum::<f64>() + w[base + 2 * area..base + 3 * area].iter().sum::<f64>()
            })
            .collect(),
    )
}

/// Vanilla convolution minus θ times the centre-voxel correction.
pub fn tdc_forward_reparam(input: &Tensor, params: &TdcParams, exec: Exec) -> Result<Tensor> {
    layout(input, params)?;
    let mut out = kernels::conv3d_forward(input, &params.weights, params.geometry(), exec)?;
    if params.theta != 0.0 {
        let edge = temporal_edge_kernel(&params.weights)?;
        let correction = kernels::conv3d_forward(input, &edge, params.center_geometry(), exec)?;
        out.scaled_add_assign(-params.theta, &correction);
    }
    Ok(out)
}

/// Differentiable reparameterised form on the autodiff tape.
pub fn tdc_on_graph(g: &mut Graph, x: Var, w: Var, theta: f64, geom: ConvGeometry) -> Result<Var> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta must lie in [0, 1], got {theta}")));
    }
    let [_, _, kt, kh, kw] = g.value(w).dims5()?;
    if [kt, kh, kw] != [3, 3, 3] {
        return Err(Error::Shape("temporal difference kernels are 3×3×3".into()));
    }
    let conv = g.conv3d(x, w, geom)?;
    if theta == 0.0 {
        return Ok(conv);
    }
    let edge = g.temporal_edge_sum(w)?;
    let correction = g.conv3d(x, edge, centre_of(geom))?;
    g.add_scaled(conv, correction, -theta)
}
