//! Raw compute loops behind the differentiable operations.
//!
//! Every kernel partitions its output into independent chunks (one output
//! plane, one weight row, one matrix row) and reduces inside a chunk in a
//! fixed order, so the parallel and sequential paths agree bit for bit.

use crate::par;

/// Geometry of a stride-1, zero-padded, grouped 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn ow(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

/// Range of `o` in `0..out_len` such that `o + tap - pad` lies in `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (in_len + pad).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(g: ConvGeom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.oh(), g.ow());
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k);
    let plane = oh * ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    par::for_each_chunk(&mut out, plane, |idx, o| {
        let (n, oc) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            o.fill(b[oc]);
        }
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            let xp = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            let wk = &wt[(oc * cin_g + icl) * k * k..][..k * k];
            for kh in 0..k {
                let (r0, r1) = valid_range(oh, g.h, kh, g.pad);
                for kw in 0..k {
                    let wv = wk[kh * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = valid_range(ow, g.w, kw, g.pad);
                    if c0 == c1 {
                        continue;
                    }
                    for r in r0..r1 {
                        let ir = r + kh - g.pad;
                        let orow = &mut o[r * ow + c0..r * ow + c1];
                        let irow = &xp[ir * g.w + c0 + kw - g.pad..][..c1 - c0];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_backward_input(g: ConvGeom, dy: &[f64], wt: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.oh(), g.ow());
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k);
    let plane = g.h * g.w;
    let mut dx = vec![0.0; g.n * g.cin * plane];
    par::for_each_chunk(&mut dx, plane, |idx, d| {
        let (n, ic) = (idx / g.cin, idx % g.cin);
        let grp = ic / cin_g;
        let icl = ic % cin_g;
        for ocl in 0..cout_g {
            let oc = grp * cout_g + ocl;
            let dp = &dy[(n * g.cout + oc) * oh * ow..][..oh * ow];
            let wk = &wt[(oc * cin_g + icl) * k * k..][..k * k];
            for kh in 0..k {
                let (r0, r1) = valid_range(oh, g.h, kh, g.pad);
                for kw in 0..k {
                    let wv = wk[kh * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = valid_range(ow, g.w, kw, g.pad);
                    if c0 == c1 {
                        continue;
                    }
                    for r in r0..r1 {
                        let ir = r + kh - g.pad;
                        let drow = &mut d[ir * g.w + c0 + kw - g.pad..][..c1 - c0];
                        let orow = &dp[r * ow + c0..r * ow + c1];
                        for (a, b) in drow.iter_mut().zip(orow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient with respect to the convolution weight, one output channel per chunk.
pub(crate) fn conv2d_backward_weight(g: ConvGeom, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.oh(), g.ow());
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k);
    let row = cin_g * k * k;
    let mut dw = vec![0.0; g.cout * row];
    par::for_each_chunk(&mut dw, row, |oc, d| {
        let grp = oc / cout_g;
        for n in 0..g.n {
            let dp = &dy[(n * g.cout + oc) * oh * ow..][..oh * ow];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xp = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for kh in 0..k {
                    let (r0, r1) = valid_range(oh, g.h, kh, g.pad);
                    for kw in 0..k {
                        let (c0, c1) = valid_range(ow, g.w, kw, g.pad);
                        if c0 == c1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            let ir = r + kh - g.pad;
                            let orow = &dp[r * ow + c0..r * ow + c1];
                            let irow = &xp[ir * g.w + c0 + kw - g.pad..][..c1 - c0];
                            acc += orow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        d[(icl * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });
    dw
}

pub(crate) fn conv2d_backward_bias(g: ConvGeom, dy: &[f64]) -> Vec<f64> {
    let plane = g.oh() * g.ow();
    (0..g.cout)
        .map(|oc| {
            (0..g.n)
                .map(|n| dy[(n * g.cout + oc) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect()
}

/// Batched product of `a` (batch×m×k, or batch×k×m when `ta`) and `b`
/// (batch×k×p, or batch×p×k when `tb`), giving batch×m×p.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * p];
    if p == 0 {
        return out;
    }
    par::for_each_chunk(&mut out, p, |idx, row| {
        let (n, i) = (idx / m, idx % m);
        let a0 = n * m * k;
        let b0 = n * k * p;
        for kk in 0..k {
            let av = if ta { a[a0 + kk * m + i] } else { a[a0 + i * k + kk] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[b0 + j * k + kk];
                }
            } else {
                let brow = &b[b0 + kk * p..][..p];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}
