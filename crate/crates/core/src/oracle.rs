//! Slow reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the kernels it checks: convolutions are
//! direct nested loops, products are triple loops.

use crate::conv::ConvSpec;
use crate::tensor::Tensor;

/// `max |a - b| / max(|b|_∞, 1e-300)`.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-300)
}

pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(b.shape()[0], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.data()[i * k + l] * b.data()[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Direct convolution: `o[b, co, i, j] = Σ_ci Σ_m Σ_n x[b, ci, i·s+m−p, j·s+n−p] · w[co, ci, m, n]`.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Tensor {
    let [nb, c_in, h, wd] = x.shape().try_into().unwrap();
    assert_eq!(c_in, spec.c_in);
    let (ho, wo) = spec.output_size(h, wd).unwrap();
    let cig = spec.c_in / spec.groups;
    let cog = spec.c_out / spec.groups;
    let mut out = Tensor::zeros(&[nb, spec.c_out, ho, wo]);
    for b in 0..nb {
        for co in 0..spec.c_out {
            let group = co / cog;
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cig {
                        for m in 0..spec.k {
                            for n in 0..spec.k {
                                let iy = (i * spec.stride + m) as isize - spec.padding as isize;
                                let ix = (j * spec.stride + n) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at(&[b, group * cig + ci, iy as usize, ix as usize])
                                    * w.at(&[co, ci, m, n]);
                            }
                        }
                    }
                    out.set(&[b, co, i, j], s);
                }
            }
        }
    }
    out
}

/// Multi-task convolution evaluated the slow way: for every task, build
/// `W0 + B_t·A_t` and convolve that task's samples with it.
pub fn eks_forward_naive(
    x: &Tensor,
    w0: &Tensor,
    factors: &[(Tensor, Tensor)],
    tasks: &[usize],
    spec: &ConvSpec,
) -> Tensor {
    let [nb, c_in, h, wd] = x.shape().try_into().unwrap();
    let (ho, wo) = spec.output_size(h, wd).unwrap();
    let mut out = Tensor::zeros(&[nb, spec.c_out, ho, wo]);
    let per = spec.c_out * ho * wo;
    let plane = c_in * h * wd;
    for (t, (b, a)) in factors.iter().enumerate() {
        let members: Vec<usize> = (0..nb).filter(|&i| tasks[i] == t).collect();
        if members.is_empty() {
            continue;
        }
        let delta = matmul_naive(b, a);
        let weight = Tensor::from_fn(w0.shape(), |i| w0.data()[i] + delta.data()[i]);
        let mut sub = Vec::with_capacity(members.len() * plane);
        for &i in &members {
            sub.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
        }
        let sub = Tensor::new(vec![members.len(), c_in, h, wd], sub).unwrap();
        let y = conv2d_direct(&sub, &weight, spec);
        for (slot, &i) in members.iter().enumerate() {
            out.data_mut()[i * per..(i + 1) * per]
                .copy_from_slice(&y.data()[slot * per..(slot + 1) * per]);
        }
    }
    out
}

/// Multiplications performed by the two per-sample low-rank strategies,
/// counted by walking their loop nests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountedCosts {
    pub eks: u64,
    pub flora: u64,
}

/// Walks the loop nests of both strategies for a batch of `b` sequences of
/// length `l`, width `d`, `t` experts of rank `r`, counting scalar multiplies
/// inside matrix products.
///
/// * aggregated weights: `T` products `B_t·A_t` (d×r by r×d), then one
///   `X·W'` per sample (l×d by d×d);
/// * per-sample rank-one scaling: for each of the `r` components, a full
///   `(b ⊙ X)·W0` product per sample.
pub fn count_low_rank_multiplies(t: u64, r: u64, b: u64, l: u64, d: u64) -> CountedCosts {
    let mut eks = 0u64;
    for _task in 0..t {
        for _row in 0..d {
            for _col in 0..d {
                for _inner in 0..r {
                    eks += 1;
                }
            }
        }
    }
    for _sample in 0..b {
        for _pos in 0..l {
            for _col in 0..d {
                for _inner in 0..d {
                    eks += 1;
                }
            }
        }
    }
    let mut flora = 0u64;
    for _component in 0..r {
        for _sample in 0..b {
            for _pos in 0..l {
                for _col in 0..d {
                    for _inner in 0..d {
                        flora += 1;
                    }
                }
            }
        }
    }
    CountedCosts { eks, flora }
}
