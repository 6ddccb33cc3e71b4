//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops and no library kernels.

#![allow(dead_code)]

pub mod grads;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdanet::dcsa::DcsaParams;
use sdanet::tensor::{grad_check, GradCheckReport};
use sdanet::{ParamStore, Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Stride-1 zero-padded grouped convolution, one output element at a time.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, groups: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, k, _) = w.dims4().unwrap();
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for s in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(o, ci, ky, kx) * x.at4(s, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((s * cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for t in 0..k {
                out[i * p + j] += a[i * k + t] * b[t * p + j];
            }
        }
    }
    out
}

/// Full `h×w` DFT of a real plane: `X[u,v] = Σ x[y,x]·exp(−2πi(uy/h + vx/w))`.
pub fn naive_dft(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re[u * w + v] += plane[y * w + x] * a.cos();
                    im[u * w + v] += plane[y * w + x] * a.sin();
                }
            }
        }
    }
    (re, im)
}

/// Real part of the normalized inverse DFT of a full spectrum.
pub fn naive_idft(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let a = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += re[u * w + v] * a.cos() - im[u * w + v] * a.sin();
                }
            }
            out[y * w + x] = acc / (h * w) as f64;
        }
    }
    out
}

fn check_dims(p: &Tensor) -> (usize, usize, usize) {
    let s = p.shape();
    (s[0], s[1], s[2])
}

pub fn psnr_loop(p: &Tensor, g: &Tensor) -> f64 {
    let (b, h, w) = check_dims(p);
    let mut total = 0.0;
    for c in 0..b {
        let mut se = 0.0;
        for i in 0..h * w {
            let d = p.data()[c * h * w + i] - g.data()[c * h * w + i];
            se += d * d;
        }
        let mse = se / (h * w) as f64;
        total += if mse < 1e-10 { 100.0 } else { 10.0 * (1.0 / mse).log10() };
    }
    total / b as f64
}

/// SSIM with the Gaussian window weights evaluated directly in 2-D and
/// renormalized over the part of the window inside the image.
pub fn ssim_loop(p: &Tensor, g: &Tensor) -> f64 {
    let (b, h, w) = check_dims(p);
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    for c in 0..b {
        let at = |t: &Tensor, y: usize, x: usize| t.data()[(c * h + y) * w + x];
        let mut band = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut ws = Vec::new();
                for v in 0..h {
                    for u in 0..w {
                        let (dy, dx) = (v as f64 - y as f64, u as f64 - x as f64);
                        if dy.abs() <= 5.0 && dx.abs() <= 5.0 {
                            ws.push(((-(dy * dy + dx * dx) / 4.5).exp(), at(p, v, u), at(g, v, u)));
                        }
                    }
                }
                let z: f64 = ws.iter().map(|t| t.0).sum();
                let e = |f: &dyn Fn(f64, f64) -> f64| ws.iter().map(|&(k, a, r)| k * f(a, r)).sum::<f64>() / z;
                let (mx, my) = (e(&|a, _| a), e(&|_, r| r));
                let vx = e(&|a, _| (a - mx) * (a - mx));
                let vy = e(&|_, r| (r - my) * (r - my));
                let cov = e(&|a, r| (a - mx) * (r - my));
                band += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += band / (h * w) as f64;
    }
    total / b as f64
}

pub fn sam_loop_deg(p: &Tensor, g: &Tensor) -> f64 {
    let (b, h, w) = check_dims(p);
    let mut total = 0.0;
    for i in 0..h * w {
        let (mut d, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for c in 0..b {
            let (a, r) = (p.data()[c * h * w + i], g.data()[c * h * w + i]);
            d += a * r;
            pp += a * a;
            gg += r * r;
        }
        let cos = d / (pp.sqrt().max(1e-8) * gg.sqrt().max(1e-8));
        total += cos.clamp(-1.0, 1.0).acos();
    }
    (total / (h * w) as f64) * 180.0 / PI
}

pub fn cc_loop(p: &Tensor, g: &Tensor) -> f64 {
    let (b, h, w) = check_dims(p);
    let n = (h * w) as f64;
    let mut total = 0.0;
    for c in 0..b {
        let pb = &p.data()[c * h * w..(c + 1) * h * w];
        let gb = &g.data()[c * h * w..(c + 1) * h * w];
        let mp = pb.iter().sum::<f64>() / n;
        let mg = gb.iter().sum::<f64>() / n;
        let cov = pb.iter().zip(gb).map(|(a, r)| (a - mp) * (r - mg)).sum::<f64>() / n;
        let vp = pb.iter().map(|a| (a - mp).powi(2)).sum::<f64>() / n;
        let vg = gb.iter().map(|r| (r - mg).powi(2)).sum::<f64>() / n;
        total += cov / (vp.max(1e-12) * vg.max(1e-12)).sqrt();
    }
    total / b as f64
}

pub fn ergas_loop(p: &Tensor, g: &Tensor, scale: usize) -> f64 {
    let (b, h, w) = check_dims(p);
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for c in 0..b {
        let pb = &p.data()[c * h * w..(c + 1) * h * w];
        let gb = &g.data()[c * h * w..(c + 1) * h * w];
        let mse = pb.iter().zip(gb).map(|(a, r)| (a - r).powi(2)).sum::<f64>() / n;
        let mu = (gb.iter().sum::<f64>() / n).max(1e-8);
        acc += mse / (mu * mu);
    }
    100.0 / scale as f64 * (acc / b as f64).sqrt()
}

/// Per-pixel spectral angle over `π`, averaged over batch and pixels.
pub fn sam_loss_loop(p: &Tensor, g: &Tensor) -> f64 {
    let (n, b, h, w) = p.dims4().unwrap();
    let mut total = 0.0;
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (mut d, mut pp, mut gg) = (0.0, 0.0, 0.0);
                for c in 0..b {
                    let (a, r) = (p.at4(s, c, y, x), g.at4(s, c, y, x));
                    d += a * r;
                    pp += a * a;
                    gg += r * r;
                }
                let cos = d / (pp.sqrt().max(1e-8) * gg.sqrt().max(1e-8));
                total += cos.clamp(-1.0, 1.0).acos() / PI;
            }
        }
    }
    total / (n * h * w) as f64
}

/// Dense (unmasked) channel attention for one sample, from the raw parameter
/// values, with no gate factor.
pub fn dense_attention_reference(store: &ParamStore, p: &DcsaParams, f: &Tensor) -> Tensor {
    let (n, c, h, w) = f.dims4().unwrap();
    let hw = h * w;
    let conv = |cv: &sdanet::layers::Conv| {
        naive_conv(
            f,
            &store.get(cv.weight).value,
            cv.bias.map(|b| &store.get(b).value),
            cv.groups,
            cv.padding,
        )
    };
    let (q, k, v) = (conv(&p.q_dconv), conv(&p.k_dconv), conv(&p.v_dconv));
    let wo = &store.get(p.out_proj.weight).value;
    let bo = &store.get(p.out_proj.bias.unwrap()).value;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        let plane = |t: &Tensor, ch: usize| t.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec();
        let mut attn = vec![vec![0.0; c]; c];
        for (i, row) in attn.iter_mut().enumerate() {
            let ki = plane(&k, i);
            for (j, a) in row.iter_mut().enumerate() {
                let qj = plane(&q, j);
                *a = ki.iter().zip(&qj).map(|(x, y)| x * y).sum::<f64>() / (hw as f64).sqrt();
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - m).exp()).sum();
            for a in row.iter_mut() {
                *a = (*a - m).exp() / z;
            }
        }
        let mut mixed = vec![vec![0.0; hw]; c];
        for i in 0..c {
            for j in 0..c {
                let vj = plane(&v, j);
                for px in 0..hw {
                    mixed[i][px] += attn[i][j] * vj[px];
                }
            }
        }
        for o in 0..c {
            for px in 0..hw {
                let mut acc = bo.data()[o];
                for (i, m) in mixed.iter().enumerate() {
                    acc += wo.at4(o, i, 0, 0) * m[px];
                }
                out.data_mut()[(s * c + o) * hw + px] = acc;
            }
        }
    }
    out
}

/// Bias-corrected Adam on one scalar, written out step by step.
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        x - lr * mh / (vh.sqrt() + 1e-8)
    }
}

/// Gradient check of `op` with respect to every input, through a fixed
/// random weighting of its output.
pub fn check_op<F>(seed: u64, inputs: &[(&str, Tensor)], op: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    for (name, t) in inputs {
        store.insert(*name, t.clone()).unwrap();
    }
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = (0..store.len()).map(|i| tape.param(&store, i)).collect();
        op(&tape, &vars).unwrap().shape()
    };
    let weights = rand_tensor(&mut rng(seed ^ 0x5eed), &out_shape, -1.0, 1.0);
    grad_check(&mut store, 1e-5, 64, |tape, st| {
        let vars: Vec<_> = (0..st.len()).map(|i| tape.param(st, i)).collect();
        let out = op(tape, &vars)?;
        tape.dot_const(out, &weights)
    })
    .unwrap()
}

/// Closed-form parameter count of the full model.
pub fn closed_form_param_count(bands: usize, c: usize, blocks: usize, scale: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize, groups: usize, bias: bool| cout * (cin / groups) * k * k + if bias { cout } else { 0 };
    let hidden = c.div_ceil(4);
    let e = 2 * c;
    let dcsa = 4 * conv(c, c, 3, c, true) + conv(c, hidden, 1, 1, true) + conv(hidden, 1, 1, 1, true) + conv(c, c, 1, 1, true);
    let feffn = conv(c, e, 1, 1, true)
        + conv(e, e, 5, e, false)
        + conv(e, e, 3, e, false)
        + conv(e, e, 5, e, true)
        + conv(e, e, 3, e, true)
        + conv(2 * e, c, 1, 1, true);
    let block = 2 * c + dcsa + 2 * c + feffn;
    conv(bands, c, 3, 1, true)
        + blocks * block
        + 2 * conv(c, c, 3, 1, true)
        + conv(c, c * scale * scale, 3, 1, true)
        + conv(c, bands, 3, 1, true)
}
