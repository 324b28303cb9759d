//! 2-D convolution lowered to im2col + matrix product, plain and grouped.
//!
//! Tensors are NCHW. A weight for `groups = g` has shape
//! `[c_out, c_in / g, k, k]`; group `γ` reads input channels
//! `γ·c_in/g .. (γ+1)·c_in/g` and writes output channels
//! `γ·c_out/g .. (γ+1)·c_out/g`.

use crate::autodiff::{Tape, Var};
use crate::error::{EksError, Result};
use crate::instrument;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Self {
            c_in,
            c_out,
            k,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Ungrouped spec with "same"-style padding `k / 2`.
    pub fn same(c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::new(c_in, c_out, k, stride, k / 2, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 {
            return Err(EksError::InvalidSpec(format!(
                "channels and kernel size must be positive: {self:?}"
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(EksError::InvalidSpec(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.groups == 0
            || !self.c_in.is_multiple_of(self.groups)
            || !self.c_out.is_multiple_of(self.groups)
        {
            return Err(EksError::InvalidSpec(format!(
                "channels {}→{} not divisible by {} groups",
                self.c_in, self.c_out, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.k || wp < self.k {
            return Err(EksError::InvalidSpec(format!(
                "kernel {} larger than padded input {}x{}",
                self.k, hp, wp
            )));
        }
        Ok((
            (hp - self.k) / self.stride + 1,
            (wp - self.k) / self.stride + 1,
        ))
    }
}

/// Per-sample FLOPs of a convolution, counting each multiply-add as two:
/// `2 · (c_in / groups) · k² · c_out · H' · W'`.
pub fn conv_flops(spec: &ConvSpec, h: usize, w: usize) -> Result<u64> {
    spec.validate()?;
    let (ho, wo) = spec.output_size(h, w)?;
    Ok(2 * (spec.c_in / spec.groups * spec.k * spec.k * spec.c_out * ho * wo) as u64)
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
}

impl Geometry {
    fn patch(&self, spec: &ConvSpec) -> usize {
        self.cig * spec.k * spec.k
    }
}

fn geometry(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [n, c, h, wd] = x.shape() else {
        return Err(EksError::InvalidShape {
            op: "conv2d",
            msg: format!("input must be NCHW, got {:?}", x.shape()),
        });
    };
    if *c != spec.c_in || w.shape() != spec.weight_shape() {
        return Err(EksError::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (ho, wo) = spec.output_size(*h, *wd)?;
    Ok(Geometry {
        n: *n,
        h: *h,
        w: *wd,
        ho,
        wo,
        cig: spec.c_in / spec.groups,
        cog: spec.c_out / spec.groups,
    })
}

/// Unfolds `cig` channel planes into a `[cig·k·k, ho·wo]` column matrix.
fn im2col(planes: &[f64], g: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let (k, s, p) = (spec.k, spec.stride, spec.padding as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.cig {
        let plane = &planes[c * g.h * g.w..(c + 1) * g.h * g.w];
        for m in 0..k {
            for n in 0..k {
                let row = &mut cols[((c * k + m) * k + n) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * s + m) as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + n) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the planes.
fn col2im(cols: &[f64], g: &Geometry, spec: &ConvSpec, planes: &mut [f64]) {
    let (k, s, p) = (spec.k, spec.stride, spec.padding as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.cig {
        let plane = &mut planes[c * g.h * g.w..(c + 1) * g.h * g.w];
        for m in 0..k {
            for n in 0..k {
                let row = &cols[((c * k + m) * k + n) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * s + m) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s + n) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let g = geometry(x, w, spec)?;
    let hw = g.ho * g.wo;
    let patch = g.patch(spec);
    let mut out = vec![0.0; g.n * spec.c_out * hw];
    let mut saved = Vec::with_capacity(g.n * spec.groups);
    for b in 0..g.n {
        for gi in 0..spec.groups {
            let planes = &x.data()[(b * spec.c_in + gi * g.cig) * g.h * g.w..][..g.cig * g.h * g.w];
            let mut cols = vec![0.0; patch * hw];
            im2col(planes, &g, spec, &mut cols);
            let wg = &w.data()[gi * g.cog * patch..(gi + 1) * g.cog * patch];
            let dst = &mut out[(b * spec.c_out + gi * g.cog) * hw..][..g.cog * hw];
            gemm(g.cog, patch, hw, wg, false, &cols, false, dst, false);
            instrument::record_conv_macs((g.cog * patch * hw) as u64);
            saved.push(cols);
        }
    }
    let out = Tensor::new(vec![g.n, spec.c_out, g.ho, g.wo], out)?;
    Ok((out, saved))
}

impl Tape {
    /// Ungrouped convolution; `spec.groups` must be 1.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        if spec.groups != 1 {
            return Err(EksError::InvalidSpec(format!(
                "conv2d expects groups = 1, got {}; use grouped_conv2d",
                spec.groups
            )));
        }
        self.conv_general("conv2d", x, w, spec)
    }

    /// Grouped convolution. Each call bumps the grouped-conv instrumentation counter.
    pub fn grouped_conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        instrument::record_grouped_conv();
        self.conv_general("grouped_conv2d", x, w, spec)
    }

    fn conv_general(&mut self, op: &'static str, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let (out, saved) = conv_forward(self.value(x), self.value(w), spec)?;
        let spec = *spec;
        self.push(op, out, &[x, w], move |c| {
            let (xv, wv) = (c.inputs[0], c.inputs[1]);
            let g = geometry(xv, wv, &spec).expect("validated in forward");
            let hw = g.ho * g.wo;
            let patch = g.patch(&spec);
            let go = c.grad_out.data();
            let mut dx = c.needs[0].then(|| vec![0.0; xv.numel()]);
            let mut dw = c.needs[1].then(|| vec![0.0; wv.numel()]);
            let mut dcols = vec![0.0; patch * hw];
            for b in 0..g.n {
                for gi in 0..spec.groups {
                    let gout = &go[(b * spec.c_out + gi * g.cog) * hw..][..g.cog * hw];
                    if let Some(dw) = dw.as_mut() {
                        let cols = &saved[b * spec.groups + gi];
                        let dwg = &mut dw[gi * g.cog * patch..(gi + 1) * g.cog * patch];
                        gemm(g.cog, hw, patch, gout, false, cols, true, dwg, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wg = &wv.data()[gi * g.cog * patch..(gi + 1) * g.cog * patch];
                        gemm(patch, g.cog, hw, wg, true, gout, false, &mut dcols, false);
                        let planes = &mut dx[(b * spec.c_in + gi * g.cig) * g.h * g.w..]
                            [..g.cig * g.h * g.w];
                        col2im(&dcols, &g, &spec, planes);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(xv.shape().to_vec(), d).unwrap()),
                dw.map(|d| Tensor::new(wv.shape().to_vec(), d).unwrap()),
            ]
        })
    }
}

/// Forward-only convolution outside any tape.
pub fn conv2d_value(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv_forward(x, w, spec).map(|(out, _)| out)
}
