//! Dynamic channel-sparse attention.
//!
//! Channel-wise (C×C) attention whose rows keep only their `k` largest
//! logits, with `k` predicted per sample by a small gating network:
//! `g = mean_p sigmoid(mlp(dconv(F))_p)`, `k = clamp(⌊C·g⌋, 1, C)`.
//! Pruned logits are masked before the softmax, so they receive exactly zero
//! weight. Because `⌊·⌋` and top-k selection carry no gradient, the module
//! output is multiplied by `g / stop_grad(g)`, which leaves the forward value
//! untouched and gives the gate a learning signal.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::tensor::{topk_row, Activation, GateAnchor, ParamStore, Tape, Tensor, Var};

/// How the per-sample top-k budget is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BudgetMode {
    /// Predicted from the input by the gate.
    #[default]
    Dynamic,
    /// Fixed budget for every sample; the gate is bypassed.
    Fixed(usize),
}

/// Parameter slots of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct DcsaParams {
    pub channels: usize,
    pub q_dconv: Conv,
    pub k_dconv: Conv,
    pub v_dconv: Conv,
    pub gate_dconv: Conv,
    pub gate_fc1: Conv,
    pub gate_fc2: Conv,
    pub out_proj: Conv,
}

/// Hidden width of the gating MLP.
pub fn gate_hidden(channels: usize) -> usize {
    channels.div_ceil(4)
}

impl DcsaParams {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, channels: usize) -> Result<Self> {
        let c = channels;
        let hidden = gate_hidden(c);
        Ok(DcsaParams {
            channels: c,
            q_dconv: Conv::register(store, seed, &format!("{prefix}.q_dconv"), c, c, 3, c, true)?,
            k_dconv: Conv::register(store, seed, &format!("{prefix}.k_dconv"), c, c, 3, c, true)?,
            v_dconv: Conv::register(store, seed, &format!("{prefix}.v_dconv"), c, c, 3, c, true)?,
            gate_dconv: Conv::register(store, seed, &format!("{prefix}.gate_dconv"), c, c, 3, c, true)?,
            gate_fc1: Conv::register(store, seed, &format!("{prefix}.gate_fc1"), c, hidden, 1, 1, true)?,
            gate_fc2: Conv::register(store, seed, &format!("{prefix}.gate_fc2"), hidden, 1, 1, 1, true)?,
            out_proj: Conv::register(store, seed, &format!("{prefix}.out_proj"), c, c, 1, 1, true)?,
        })
    }
}

/// Gate value and the budget derived from it, one entry per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub g: Vec<f64>,
    pub k_budget: Vec<usize>,
}

/// `clamp(⌊C·g⌋, 1, C)`.
pub fn budget_from_gate(channels: usize, g: f64) -> usize {
    ((channels as f64 * g).floor() as usize).clamp(1, channels)
}

/// Query, key and value matrices for every sample.
#[derive(Clone, Copy, Debug)]
pub struct Qkv<'a> {
    /// `N×HW×C`
    pub q: Var<'a>,
    /// `N×C×HW`
    pub kmat: Var<'a>,
    /// `N×HW×C`
    pub v: Var<'a>,
    pub height: usize,
    pub width: usize,
}

/// Intermediate values of one forward pass, for inspection.
#[derive(Clone, Debug)]
pub struct DcsaTrace {
    pub gate: GateDecision,
    /// Softmax-normalized sparse attention, `N×C×C`.
    pub attention: Tensor,
}

fn check_input(x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != channels {
        return Err(Error::dim("channels", format!("module built for {channels}, input has {c}")));
    }
    Ok((n, h, w))
}

/// Depthwise 3×3 branches, reshaped into the attention matrices.
pub fn compute_qkv<'a>(tape: &'a Tape, store: &ParamStore, f: Var<'a>, p: &DcsaParams) -> Result<Qkv<'a>> {
    let (n, h, w) = check_input(&f.value(), p.channels)?;
    let c = p.channels;
    let flat = |x: Var<'a>| tape.reshape(x, &[n, c, h * w]);
    let q = tape.transpose(flat(p.q_dconv.forward(tape, store, f)?)?)?;
    let kmat = flat(p.k_dconv.forward(tape, store, f)?)?;
    let v = tape.transpose(flat(p.v_dconv.forward(tape, store, f)?)?)?;
    Ok(Qkv { q, kmat, v, height: h, width: w })
}

/// Gate scalar per sample (as a differentiable `[N]` variable) and the
/// resulting budgets.
pub fn dynamic_gate<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    f: Var<'a>,
    p: &DcsaParams,
) -> Result<(Var<'a>, GateDecision)> {
    check_input(&f.value(), p.channels)?;
    let local = p.gate_dconv.forward(tape, store, f)?;
    let hidden = tape.activation(p.gate_fc1.forward(tape, store, local)?, Activation::Gelu);
    let logit = p.gate_fc2.forward(tape, store, hidden)?;
    let prob = tape.activation(logit, Activation::Sigmoid);
    let g = tape.global_avg_pool(prob, &[1, 2, 3])?;
    let gv = g.value().data().to_vec();
    let k_budget = gv.iter().map(|&x| budget_from_gate(p.channels, x)).collect();
    Ok((g, GateDecision { g: gv, k_budget }))
}

/// Row-wise top-k masked channel attention followed by the output projection.
///
/// `gate_var`, when present, multiplies the output by `g/anchor` with the
/// anchor held constant; the anchor is normally the gate's own value.
pub fn sparse_channel_attention<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    qkv: &Qkv<'a>,
    gate: &GateDecision,
    gate_var: Option<(Var<'a>, Vec<f64>)>,
    p: &DcsaParams,
) -> Result<(Var<'a>, Tensor)> {
    let (out, attn, _) = attend(tape, store, qkv, gate, gate_var, p, None)?;
    Ok((out, attn))
}

/// Shared body of the attention; `selection` replaces the top-k mask.
/// Returns the mask that was used.
fn attend<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    qkv: &Qkv<'a>,
    gate: &GateDecision,
    gate_var: Option<(Var<'a>, Vec<f64>)>,
    p: &DcsaParams,
    selection: Option<Vec<bool>>,
) -> Result<(Var<'a>, Tensor, Vec<bool>)> {
    let c = p.channels;
    let (h, w) = (qkv.height, qkv.width);
    let n = qkv.q.shape()[0];
    if gate.k_budget.len() != n {
        return Err(Error::dim("batch", format!("{} budgets for {n} samples", gate.k_budget.len())));
    }
    let temperature = 1.0 / ((h * w) as f64).sqrt();
    let logits = tape.scale(tape.bmm(qkv.kmat, qkv.q)?, temperature);
    let mask = match selection {
        Some(m) if m.len() == n * c * c => m,
        Some(m) => return Err(Error::dim("selection", format!("{} entries for {n}×{c}×{c}", m.len()))),
        None => {
            let lv = logits.value();
            let mut mask = vec![false; n * c * c];
            for (s, &k) in gate.k_budget.iter().enumerate() {
                let k = k.min(c);
                for row in 0..c {
                    let base = (s * c + row) * c;
                    for j in topk_row(&lv.data()[base..base + c], k)? {
                        mask[base + j] = true;
                    }
                }
            }
            mask
        }
    };
    let attn = tape.softmax_rows(logits, Some(&mask))?;
    let v_t = tape.transpose(qkv.v)?;
    let mixed = tape.bmm(attn, v_t)?;
    let mixed = tape.reshape(mixed, &[n, c, h, w])?;
    let mut out = p.out_proj.forward(tape, store, mixed)?;
    if let Some((g, anchor)) = gate_var {
        out = tape.scale_by_anchored_gate(out, g, &anchor)?;
    }
    let attn = (*attn.value()).clone();
    Ok((out, attn, mask))
}

/// Full module: branches, gate, sparse attention.
pub fn dcsa_forward<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    f: Var<'a>,
    p: &DcsaParams,
    mode: BudgetMode,
) -> Result<Var<'a>> {
    Ok(dcsa_forward_traced(tape, store, f, p, mode)?.0)
}

pub fn dcsa_forward_traced<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    f: Var<'a>,
    p: &DcsaParams,
    mode: BudgetMode,
) -> Result<(Var<'a>, DcsaTrace)> {
    let qkv = compute_qkv(tape, store, f, p)?;
    let n = qkv.q.shape()[0];
    let layer = tape.gate_count();
    let frozen = tape.frozen_gate(layer);
    if frozen.is_none() && tape.is_frozen() {
        return Err(Error::Config(format!("no frozen decisions for attention layer {layer}")));
    }
    let (gate, gate_var) = match mode {
        BudgetMode::Dynamic => {
            let (g, mut decision) = dynamic_gate(tape, store, f, p)?;
            let anchor = match &frozen {
                Some(a) => {
                    decision.k_budget = a.k_budget.clone();
                    a.g.clone()
                }
                None => decision.g.clone(),
            };
            (decision, Some((g, anchor)))
        }
        BudgetMode::Fixed(k) => {
            if k == 0 || k > p.channels {
                return Err(Error::Config(format!("fixed budget {k} outside [1, {}]", p.channels)));
            }
            let g = k as f64 / p.channels as f64;
            (GateDecision { g: vec![g; n], k_budget: vec![k; n] }, None)
        }
    };
    let (out, attention, selection) = attend(tape, store, &qkv, &gate, gate_var, p, frozen.map(|a| a.selection))?;
    tape.log_gate(GateAnchor {
        g: gate.g.clone(),
        k_budget: gate.k_budget.clone(),
        selection,
    });
    Ok((out, DcsaTrace { gate, attention }))
}
