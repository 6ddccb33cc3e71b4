//! Differentiable operations recorded on a [`Tape`].

use std::f64::consts::PI;

use super::kernels::{self, ConvGeom};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    let t = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => gelu(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => gelu_grad(x),
        }
    }
}

/// Indices of the `k` largest entries of every row (last axis) of `values`,
/// largest first; equal values are ordered by lower index.
pub fn topk_row_indices(values: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let cols = *values
        .shape()
        .last()
        .ok_or_else(|| Error::dim("rank", "top-k needs at least one axis"))?;
    let rows = if cols == 0 { 0 } else { values.len() / cols };
    (0..rows)
        .map(|r| topk_row(&values.data()[r * cols..(r + 1) * cols], k))
        .collect()
}

pub(crate) fn topk_row(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(Error::Config(format!(
            "top-k budget {k} outside [1, {}]",
            row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps the lower index first among equal values.
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    Ok(idx)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            what,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn add<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (av, bv) = (a.value(), b.value());
        same_shape(&av, &bv, "add")?;
        let mut out = (*av).clone();
        out.add_assign(&bv);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product.
    pub fn mul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (av, bv) = (a.value(), b.value());
        same_shape(&av, &bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, ins, _, needs| {
                let prod = |t: &Tensor| {
                    let d = g.data().iter().zip(t.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape(), d).ok()
                };
                vec![
                    needs[0].then(|| prod(&ins[1])).flatten(),
                    needs[1].then(|| prod(&ins[0])).flatten(),
                ]
            }),
        ))
    }

    pub fn scale<'a>(&'a self, a: Var<'a>, s: f64) -> Var<'a> {
        let out = a.value().map(|v| v * s);
        self.push(out, &[a], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let out = Tensor::scalar(a.value().sum());
        self.push(
            out,
            &[a],
            Box::new(|g, ins, _, _| vec![Some(Tensor::full(ins[0].shape(), g.item()))]),
        )
    }

    /// Sum of `a ⊙ weights` for a fixed weight tensor.
    pub fn dot_const<'a>(&'a self, a: Var<'a>, weights: &Tensor) -> Result<Var<'a>> {
        let av = a.value();
        same_shape(&av, weights, "dot")?;
        let s = av.data().iter().zip(weights.data()).map(|(x, y)| x * y).sum();
        let w = weights.clone();
        Ok(self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |g, _, _, _| vec![Some(w.map(|v| v * g.item()))]),
        ))
    }

    pub fn reshape<'a>(&'a self, a: Var<'a>, shape: &[usize]) -> Result<Var<'a>> {
        let out = a.value().reshape(shape)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(|g, ins, _, _| vec![g.reshape(ins[0].shape()).ok()]),
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let av = a.value();
        let (b, r, c) = match av.shape() {
            &[r, c] => (1, r, c),
            &[b, r, c] => (b, r, c),
            s => return Err(Error::dim("rank", format!("transpose of shape {s:?}"))),
        };
        let swap = move |t: &Tensor, rows: usize, cols: usize| {
            let mut out = vec![0.0; t.len()];
            for n in 0..b {
                for i in 0..rows {
                    for j in 0..cols {
                        out[n * rows * cols + j * rows + i] = t.data()[n * rows * cols + i * cols + j];
                    }
                }
            }
            out
        };
        let mut shape = av.shape().to_vec();
        let rank = shape.len();
        shape.swap(rank - 1, rank - 2);
        let out = Tensor::new(&shape, swap(&av, r, c))?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g, ins, _, _| vec![Tensor::new(ins[0].shape(), swap(g, c, r)).ok()]),
        ))
    }

    /// Stride-1 grouped convolution with `padding` zeros on every side.
    ///
    /// `weight` is `out_ch × in_ch/groups × k × k`; `bias` has `out_ch` entries.
    pub fn conv2d<'a>(
        &'a self,
        x: Var<'a>,
        weight: Var<'a>,
        bias: Option<Var<'a>>,
        groups: usize,
        padding: usize,
    ) -> Result<Var<'a>> {
        let (xv, wv) = (x.value(), weight.value());
        let (n, cin, h, w) = xv.dims4()?;
        let (cout, cin_g, k, k2) = wv.dims4().map_err(|_| {
            Error::dim("weight", format!("expected 4-D kernel, got {:?}", wv.shape()))
        })?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide input channels {cin} and output channels {cout}"
            )));
        }
        if cin_g != cin / groups {
            return Err(Error::dim(
                "in_channels",
                format!("kernel expects {cin_g} channels per group, input gives {}", cin / groups),
            ));
        }
        if k != k2 {
            return Err(Error::dim("kernel", format!("non-square kernel {k}×{k2}")));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::dim("spatial", format!("{h}×{w} too small for kernel {k}")));
        }
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.len() != cout {
                    return Err(Error::dim("bias", format!("{} entries for {cout} channels", bv.len())));
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeom { n, cin, cout, h, w, k, pad: padding, groups };
        let out = kernels::conv2d_forward(geom, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::new(&[n, cout, geom.oh(), geom.ow()], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |g, ins, _, needs| {
                let dx = needs[0].then(|| {
                    let d = kernels::conv2d_backward_input(geom, g.data(), ins[1].data());
                    Tensor::new(ins[0].shape(), d).unwrap()
                });
                let dw = needs[1].then(|| {
                    let d = kernels::conv2d_backward_weight(geom, g.data(), ins[0].data());
                    Tensor::new(ins[1].shape(), d).unwrap()
                });
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        Tensor::new(&[geom.cout], kernels::conv2d_backward_bias(geom, g.data()))
                            .unwrap()
                    }));
                }
                grads
            }),
        ))
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (ar, br) = (a.value().rank(), b.value().rank());
        if ar != 2 || br != 2 {
            return Err(Error::dim("rank", format!("matmul needs matrices, got ranks {ar} and {br}")));
        }
        let sa = a.value().shape().to_vec();
        let sb = b.value().shape().to_vec();
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched matrix product: `batch×m×k` times `batch×k×p`.
    pub fn bmm<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (av, bv) = (a.value(), b.value());
        let (&[na, m, ka], &[nb, kb, p]) = (av.shape(), bv.shape()) else {
            return Err(Error::dim("rank", "bmm needs rank-3 operands"));
        };
        if na != nb {
            return Err(Error::dim("batch", format!("{na} vs {nb}")));
        }
        if ka != kb {
            return Err(Error::dim("inner", format!("{ka} vs {kb}")));
        }
        let out = Tensor::new(&[na, m, p], kernels::bmm(av.data(), bv.data(), na, m, ka, p, false, false))?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, ins, _, needs| {
                // dA = dY·Bᵀ, dB = Aᵀ·dY
                let da = needs[0].then(|| {
                    let d = kernels::bmm(g.data(), ins[1].data(), na, m, p, ka, false, true);
                    Tensor::new(ins[0].shape(), d).unwrap()
                });
                let db = needs[1].then(|| {
                    let d = kernels::bmm(ins[0].data(), g.data(), na, ka, m, p, true, false);
                    Tensor::new(ins[1].shape(), d).unwrap()
                });
                vec![da, db]
            }),
        ))
    }

    /// Softmax over the last axis. Masked-out entries (`mask[i] == false`)
    /// get exactly zero weight and receive no gradient.
    pub fn softmax_rows<'a>(&'a self, logits: Var<'a>, mask: Option<&[bool]>) -> Result<Var<'a>> {
        let lv = logits.value();
        let cols = *lv.shape().last().ok_or_else(|| Error::dim("rank", "softmax of a scalar"))?;
        if let Some(m) = mask {
            if m.len() != lv.len() {
                return Err(Error::dim("mask", format!("{} entries for {} logits", m.len(), lv.len())));
            }
        }
        let rows = lv.len() / cols.max(1);
        let mut out = vec![0.0; lv.len()];
        for r in 0..rows {
            let x = &lv.data()[r * cols..(r + 1) * cols];
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    o[j] = (x[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(lv.shape(), out)?;
        Ok(self.push(
            out,
            &[logits],
            Box::new(move |g, _, y, _| {
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - inner);
                    }
                }
                vec![Tensor::new(y.shape(), dx).ok()]
            }),
        ))
    }

    /// Layer normalization over the channel axis of an `N×C×H×W` tensor,
    /// independently at every spatial position.
    pub fn layer_norm<'a>(&'a self, x: Var<'a>, gamma: Var<'a>, beta: Var<'a>, eps: f64) -> Result<Var<'a>> {
        let xv = x.value();
        let (n, c, h, w) = xv.dims4()?;
        if gamma.value().len() != c || beta.value().len() != c {
            return Err(Error::dim("channels", format!("affine parameters must have {c} entries")));
        }
        let hw = h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * hw];
        let xd = xv.data();
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    xhat[at(ch)] = (xd[at(ch)] - mean) * is;
                }
            }
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let mut out = xhat.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *o = *o * gv.data()[ch] + bv.data()[ch];
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, ins, _, needs| {
                let gd = g.data();
                let gam = ins[1].data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + p;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ch in 0..c {
                            let dxh = gd[at(ch)] * gam[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[at(ch)];
                            dgamma[ch] += gd[at(ch)] * xhat[at(ch)];
                            dbeta[ch] += gd[at(ch)];
                        }
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let dxh = gd[at(ch)] * gam[ch];
                            dx[at(ch)] = is * (dxh - s1 / c as f64 - xhat[at(ch)] * s2 / c as f64);
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(g.shape(), dx).unwrap()),
                    needs[1].then(|| Tensor::new(&[c], dgamma.clone()).unwrap()),
                    needs[2].then(|| Tensor::new(&[c], dbeta).unwrap()),
                ]
            }),
        ))
    }

    pub fn activation<'a>(&'a self, x: Var<'a>, kind: Activation) -> Var<'a> {
        let out = x.value().map(|v| kind.apply(v));
        self.push(
            out,
            &[x],
            Box::new(move |g, ins, y, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(ins[0].data().iter().zip(y.data()))
                    .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                vec![Tensor::new(g.shape(), d).ok()]
            }),
        )
    }

    /// Mean over the listed axes; those axes are removed from the result.
    pub fn global_avg_pool<'a>(&'a self, x: Var<'a>, axes: &[usize]) -> Result<Var<'a>> {
        let xv = x.value();
        let shape = xv.shape().to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::dim("axes", format!("axis {bad} out of range for rank {}", shape.len())));
        }
        let pooled: Vec<bool> = (0..shape.len()).map(|a| axes.contains(&a)).collect();
        let out_shape: Vec<usize> = shape.iter().zip(&pooled).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
        let count: usize = shape.iter().zip(&pooled).filter(|(_, &p)| p).map(|(&s, _)| s).product();
        let out_index = move |mut flat: usize| {
            let mut idx = 0;
            let mut stride = 1;
            for a in (0..shape.len()).rev() {
                let i = flat % shape[a];
                flat /= shape[a];
                if !pooled[a] {
                    idx += i * stride;
                    stride *= shape[a];
                }
            }
            idx
        };
        let out_len: usize = out_shape.iter().product();
        let mut sums = vec![0.0; out_len];
        for (i, v) in xv.data().iter().enumerate() {
            sums[out_index(i)] += v;
        }
        let inv = 1.0 / count as f64;
        let out = Tensor::new(&out_shape, sums.into_iter().map(|s| s * inv).collect())?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, ins, _, _| {
                let d = (0..ins[0].len()).map(|i| g.data()[out_index(i)] * inv).collect();
                vec![Tensor::new(ins[0].shape(), d).ok()]
            }),
        ))
    }

    /// Rearranges `N×(C·r²)×H×W` into `N×C×(H·r)×(W·r)`.
    pub fn pixel_shuffle<'a>(&'a self, x: Var<'a>, r: usize) -> Result<Var<'a>> {
        let xv = x.value();
        let (n, c, h, w) = xv.dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::Config(format!("{c} channels not divisible by {r}²")));
        }
        let co = c / (r * r);
        // Source index for each destination index.
        let src: Vec<usize> = (0..xv.len())
            .map(|o| {
                let ow = o % (w * r);
                let oh = (o / (w * r)) % (h * r);
                let oc = (o / (w * r * h * r)) % co;
                let b = o / (w * r * h * r * co);
                let ci = oc * r * r + (oh % r) * r + ow % r;
                ((b * c + ci) * h + oh / r) * w + ow / r
            })
            .collect();
        let out = Tensor::new(&[n, co, h * r, w * r], src.iter().map(|&s| xv.data()[s]).collect())?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, ins, _, _| {
                let mut d = vec![0.0; g.len()];
                for (o, &s) in src.iter().enumerate() {
                    d[s] = g.data()[o];
                }
                vec![Tensor::new(ins[0].shape(), d).ok()]
            }),
        ))
    }

    /// Concatenation of `N×Cᵢ×H×W` tensors along the channel axis.
    pub fn concat_channels<'a>(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals.first().ok_or_else(|| Error::dim("channels", "nothing to concatenate"))?.dims4()?;
        let mut chans = Vec::with_capacity(vals.len());
        for v in &vals {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim("concat", format!("{:?} incompatible with batch {n}, {h}×{w}", v.shape())));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |g, _, _, needs| {
                let mut off = 0;
                chans
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let start = off;
                        off += c;
                        need.then(|| {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                let base = (b * total + start) * hw;
                                d.extend_from_slice(&g.data()[base..base + c * hw]);
                            }
                            Tensor::new(&[n, c, h, w], d).unwrap()
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Channels `[start, start+len)` of an `N×C×H×W` tensor.
    pub fn slice_channels<'a>(&'a self, x: Var<'a>, start: usize, len: usize) -> Result<Var<'a>> {
        let xv = x.value();
        let (n, c, h, w) = xv.dims4()?;
        if start + len > c {
            return Err(Error::dim("channels", format!("slice {start}+{len} exceeds {c}")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            out.extend_from_slice(&xv.data()[base..base + len * hw]);
        }
        let out = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; n * c * hw];
                for b in 0..n {
                    let base = (b * c + start) * hw;
                    d[base..base + len * hw].copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                vec![Tensor::new(&[n, c, h, w], d).ok()]
            }),
        ))
    }

    /// Multiplies every element of sample `i` by `g[i] / stop_grad(g[i])`.
    ///
    /// The forward value is `x` itself (the factor is exactly one); backward
    /// still routes `Σ dy·x / g` into `g`, which is how a discrete budget
    /// derived from `g` lets the gate receive a learning signal.
    pub fn scale_by_gate<'a>(&'a self, x: Var<'a>, g: Var<'a>) -> Result<Var<'a>> {
        let anchor = g.value().data().to_vec();
        self.scale_by_anchored_gate(x, g, &anchor)
    }

    /// `x · g/anchor` per sample, with `anchor` held constant. Equal to
    /// [`Tape::scale_by_gate`] when `anchor` holds the current gate values.
    pub fn scale_by_anchored_gate<'a>(&'a self, x: Var<'a>, g: Var<'a>, anchor: &[f64]) -> Result<Var<'a>> {
        let (xv, gv) = (x.value(), g.value());
        let n = *xv.shape().first().ok_or_else(|| Error::dim("rank", "scalar input"))?;
        if gv.len() != n || anchor.len() != n {
            return Err(Error::dim("gate", format!("{} gates, {} anchors for batch {n}", gv.len(), anchor.len())));
        }
        let factor: Vec<f64> = gv.data().iter().zip(anchor).map(|(g, a)| g / a).collect();
        let anchor = anchor.to_vec();
        let per = xv.len() / n.max(1);
        let mut out = (*xv).clone();
        for (i, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            for v in chunk {
                *v *= factor[i];
            }
        }
        Ok(self.push(
            out,
            &[x, g],
            Box::new(move |dy, ins, _, needs| {
                let dx = needs[0].then(|| {
                    let mut d = dy.clone();
                    for (i, chunk) in d.data_mut().chunks_mut(per.max(1)).enumerate() {
                        for v in chunk {
                            *v *= factor[i];
                        }
                    }
                    d
                });
                let dg = needs[1].then(|| {
                    let d = (0..n)
                        .map(|i| {
                            let s: f64 = dy.data()[i * per..(i + 1) * per]
                                .iter()
                                .zip(&ins[0].data()[i * per..(i + 1) * per])
                                .map(|(a, b)| a * b)
                                .sum();
                            s / anchor[i]
                        })
                        .collect();
                    Tensor::new(ins[1].shape(), d).unwrap()
                });
                vec![dx, dg]
            }),
        ))
    }
}
