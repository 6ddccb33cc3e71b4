//! Finite-difference gradient cases for every primitive and composite
//! module. Each function returns `(case, worst relative error)` pairs.

use super::{check_op, rand_tensor, rng};
use sdanet::dcsa::{compute_qkv, dcsa_forward, dynamic_gate, sparse_channel_attention, BudgetMode, DcsaParams};
use sdanet::feffn::{feffn_forward, FeffnParams};
use sdanet::layers::LayerNorm;
use sdanet::model::{init_params, sdab_forward, BlockParams, SdanetConfig};
use sdanet::objective::{l1_loss, sam_loss, total_loss, DEFAULT_LAMBDA};
use sdanet::spectral::CVar;
use sdanet::tensor::{grad_check, grad_check_frozen, GradCheckReport};
use sdanet::{Activation, ParamStore, Tape, Tensor};

const EPS: f64 = 1e-5;
/// Composite modules have coordinates with gradients near 1e-7, where
/// roundoff in `f` dominates at smaller steps.
const MODULE_EPS: f64 = 1e-4;

fn t(seed: u64, shape: &[usize]) -> Tensor {
    rand_tensor(&mut rng(seed), shape, -1.0, 1.0)
}

fn pos(seed: u64, shape: &[usize]) -> Tensor {
    rand_tensor(&mut rng(seed), shape, 0.1, 0.9)
}

pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut push = |name, r: GradCheckReport| out.push((name, r.max_rel_error));

    push("add", check_op(1, &[("a", t(1, &[2, 3])), ("b", t(2, &[2, 3]))], |tp, v| tp.add(v[0], v[1])));
    push("sub", check_op(2, &[("a", t(3, &[2, 3])), ("b", t(4, &[2, 3]))], |tp, v| tp.sub(v[0], v[1])));
    push("mul", check_op(3, &[("a", t(5, &[2, 3])), ("b", t(6, &[2, 3]))], |tp, v| tp.mul(v[0], v[1])));
    push("scale", check_op(4, &[("a", t(7, &[3, 2]))], |tp, v| Ok(tp.scale(v[0], -1.7))));
    push("sum", check_op(5, &[("a", t(8, &[2, 2, 2]))], |tp, v| Ok(tp.sum(v[0]))));
    push("reshape", check_op(6, &[("a", t(9, &[2, 6]))], |tp, v| tp.reshape(v[0], &[3, 4])));
    push("transpose2", check_op(7, &[("a", t(10, &[2, 5]))], |tp, v| tp.transpose(v[0])));
    push("transpose3", check_op(8, &[("a", t(11, &[2, 3, 4]))], |tp, v| tp.transpose(v[0])));
    push(
        "conv2d",
        check_op(9, &[("x", t(12, &[2, 2, 5, 4])), ("w", t(13, &[3, 2, 3, 3])), ("b", t(14, &[3]))], |tp, v| {
            tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
    );
    push(
        "conv2d_depthwise",
        check_op(10, &[("x", t(15, &[1, 4, 5, 5])), ("w", t(16, &[4, 1, 5, 5])), ("b", t(17, &[4]))], |tp, v| {
            tp.conv2d(v[0], v[1], Some(v[2]), 4, 2)
        }),
    );
    push(
        "conv2d_grouped_valid",
        check_op(11, &[("x", t(18, &[1, 4, 5, 5])), ("w", t(19, &[6, 2, 3, 3]))], |tp, v| tp.conv2d(v[0], v[1], None, 2, 0)),
    );
    push(
        "conv2d_wide_kernel",
        check_op(32, &[("x", t(51, &[1, 2, 1, 3])), ("w", t(52, &[2, 1, 5, 5]))], |tp, v| tp.conv2d(v[0], v[1], None, 2, 2)),
    );
    push("matmul", check_op(12, &[("a", t(20, &[3, 4])), ("b", t(21, &[4, 2]))], |tp, v| tp.matmul(v[0], v[1])));
    push("bmm", check_op(13, &[("a", t(22, &[2, 3, 4])), ("b", t(23, &[2, 4, 2]))], |tp, v| tp.bmm(v[0], v[1])));
    push("softmax", check_op(14, &[("a", t(24, &[3, 4]))], |tp, v| tp.softmax_rows(v[0], None)));
    let mask = vec![true, false, true, true, false, false, true, false, true, true, true, true];
    push("softmax_masked", check_op(15, &[("a", t(25, &[3, 4]))], move |tp, v| tp.softmax_rows(v[0], Some(&mask))));
    push(
        "layer_norm",
        check_op(16, &[("x", t(26, &[2, 3, 2, 2])), ("g", t(27, &[3])), ("b", t(28, &[3]))], |tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
    );
    push("sigmoid", check_op(17, &[("x", t(29, &[2, 5]))], |tp, v| Ok(tp.activation(v[0], Activation::Sigmoid))));
    push("gelu", check_op(18, &[("x", t(30, &[2, 5]))], |tp, v| Ok(tp.activation(v[0], Activation::Gelu))));
    push("pool_spatial", check_op(19, &[("x", t(31, &[2, 3, 3, 2]))], |tp, v| tp.global_avg_pool(v[0], &[2, 3])));
    push("pool_all", check_op(20, &[("x", t(32, &[2, 3, 3, 2]))], |tp, v| tp.global_avg_pool(v[0], &[1, 2, 3])));
    push("pixel_shuffle", check_op(21, &[("x", t(33, &[1, 8, 2, 3]))], |tp, v| tp.pixel_shuffle(v[0], 2)));
    push(
        "concat_channels",
        check_op(22, &[("a", t(34, &[1, 2, 2, 2])), ("b", t(35, &[1, 3, 2, 2]))], |tp, v| tp.concat_channels(&[v[0], v[1]])),
    );
    push("slice_channels", check_op(23, &[("a", t(36, &[2, 5, 2, 2]))], |tp, v| tp.slice_channels(v[0], 1, 3)));
    // The gate input of this op carries a surrogate gradient by design; only
    // the data path is a true derivative.
    let gate = pos(37, &[2]);
    push(
        "scale_by_gate_data",
        check_op(24, &[("x", t(38, &[2, 3, 2, 2]))], move |tp, v| tp.scale_by_gate(v[0], tp.constant(gate.clone()))),
    );
    push(
        "fft2",
        check_op(25, &[("x", t(39, &[1, 2, 4, 5]))], |tp, v| {
            let g = tp.fft2(v[0])?;
            tp.concat_channels(&[g.re, g.im])
        }),
    );
    for (name, w) in [("ifft2_even", 6), ("ifft2_odd", 5)] {
        let wf = w / 2 + 1;
        push(
            name,
            check_op(26, &[("re", t(40, &[1, 2, 3, wf])), ("im", t(41, &[1, 2, 3, wf]))], move |tp, v| {
                tp.ifft2(CVar { re: v[0], im: v[1], width: w })
            }),
        );
    }
    push(
        "fft2_ifft2",
        check_op(27, &[("x", t(42, &[1, 2, 4, 4]))], |tp, v| {
            let g = tp.fft2(v[0])?;
            tp.ifft2(g)
        }),
    );
    push(
        "complex_depthwise_conv",
        check_op(
            28,
            &[("re", t(43, &[1, 2, 4, 3])), ("im", t(44, &[1, 2, 4, 3])), ("k", t(45, &[2, 1, 3, 3]))],
            |tp, v| {
                let g = tp.complex_depthwise_conv(CVar { re: v[0], im: v[1], width: 4 }, v[2])?;
                tp.concat_channels(&[g.re, g.im])
            },
        ),
    );
    let gt = pos(46, &[2, 3, 2, 2]);
    let gt2 = gt.clone();
    push(
        "l1_loss",
        check_op(29, &[("p", pos(47, &[2, 3, 2, 2]))], move |tp, v| l1_loss(tp, v[0], tp.constant(gt.clone()))),
    );
    push(
        "sam_loss",
        check_op(30, &[("p", pos(48, &[2, 3, 2, 2])), ("g", pos(49, &[2, 3, 2, 2]))], |tp, v| sam_loss(tp, v[0], v[1])),
    );
    push(
        "total_loss",
        check_op(31, &[("p", pos(50, &[2, 3, 2, 2]))], move |tp, v| {
            Ok(total_loss(tp, v[0], tp.constant(gt2.clone()), DEFAULT_LAMBDA)?.0)
        }),
    );
    out
}

fn weighted(seed: u64, shape: &[usize]) -> Tensor {
    t(seed, shape)
}

fn frozen_check<F>(store: &mut ParamStore, coords: usize, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> sdanet::Result<sdanet::Var<'t>>,
{
    grad_check_frozen(store, MODULE_EPS, coords, f).unwrap()
}

fn dcsa_store(c: usize) -> (ParamStore, DcsaParams) {
    let mut store = ParamStore::new();
    let p = DcsaParams::register(&mut store, 21, "dcsa", c).unwrap();
    let mut r = rng(77);
    for prm in store.iter_mut() {
        if prm.name.ends_with(".bias") {
            prm.value = rand_tensor(&mut r, prm.value.shape(), -0.5, 0.5);
        }
    }
    store.insert("input", t(78, &[1, c, 4, 4])).unwrap();
    (store, p)
}

/// `(case, error)` for the attention module, feed-forward module, one block,
/// and the tiny full model.
pub fn module_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let (mut store, p) = dcsa_store(4);
    let input = store.id_of("input").unwrap();
    let w = weighted(80, &[1, 4, 4, 4]);
    let r = frozen_check(&mut store, 64, |tape, st| {
        let y = dcsa_forward(tape, st, tape.param(st, input), &p, BudgetMode::Dynamic)?;
        tape.dot_const(y, &w)
    });
    out.push(("dcsa", r.max_rel_error));

    let r = frozen_check(&mut store, 64, |tape, st| {
        let y = dcsa_forward(tape, st, tape.param(st, input), &p, BudgetMode::Fixed(2))?;
        tape.dot_const(y, &w)
    });
    out.push(("dcsa_fixed_budget", r.max_rel_error));
    out.push(("dcsa_gate_surrogate", dcsa_gate_surrogate()));

    let mut store = ParamStore::new();
    let fp = FeffnParams::register(&mut store, 22, "feffn", 4).unwrap();
    let mut rr = rng(81);
    for prm in store.iter_mut() {
        if prm.name.ends_with(".bias") {
            prm.value = rand_tensor(&mut rr, prm.value.shape(), -0.5, 0.5);
        }
    }
    let input = store.insert("input", t(82, &[1, 4, 4, 4])).unwrap();
    let r = frozen_check(&mut store, 64, |tape, st| {
        let y = feffn_forward(tape, st, tape.param(st, input), &fp)?;
        tape.dot_const(y, &w)
    });
    out.push(("feffn", r.max_rel_error));

    let mut store = ParamStore::new();
    let block = BlockParams {
        attn: Some((
            LayerNorm::register(&mut store, "b.norm1", 4).unwrap(),
            DcsaParams::register(&mut store, 23, "b.dcsa", 4).unwrap(),
        )),
        ffn: Some((
            LayerNorm::register(&mut store, "b.norm2", 4).unwrap(),
            FeffnParams::register(&mut store, 23, "b.feffn", 4).unwrap(),
        )),
    };
    let mut rr = rng(83);
    for prm in store.iter_mut() {
        if prm.name.ends_with(".bias") || prm.name.ends_with(".beta") {
            prm.value = rand_tensor(&mut rr, prm.value.shape(), -0.5, 0.5);
        }
    }
    let input = store.insert("input", t(84, &[1, 4, 4, 4])).unwrap();
    let r = frozen_check(&mut store, 64, |tape, st| {
        let y = sdab_forward(tape, st, tape.param(st, input), &block, BudgetMode::Dynamic)?;
        tape.dot_const(y, &w)
    });
    out.push(("sdab", r.max_rel_error));

    out.push(("full_model", full_model_check().1));
    out
}

/// Report and worst error of the tiny full model under the total loss.
pub fn full_model_check() -> (GradCheckReport, f64) {
    let cfg = SdanetConfig {
        bands: 3,
        feat_channels: 8,
        num_blocks: 1,
        scale: 2,
        seed: 9,
    };
    let model = init_params(cfg).unwrap();
    let mut store = model.store.clone();
    let mut rr = rng(85);
    for prm in store.iter_mut() {
        if prm.name.ends_with(".bias") || prm.name.ends_with(".beta") {
            prm.value = rand_tensor(&mut rr, prm.value.shape(), -0.2, 0.2);
        }
    }
    let lr = pos(86, &[1, 3, 4, 4]);
    let hr = pos(87, &[1, 3, 8, 8]);
    let r = frozen_check(&mut store, 48, |tape, st| {
        let pred = model.forward_with(tape, st, tape.constant(lr.clone()))?;
        Ok(total_loss(tape, pred, tape.constant(hr.clone()), DEFAULT_LAMBDA)?.0)
    });
    let e = r.max_rel_error;
    (r, e)
}

/// Builds the frozen-gate objective of the attention module by hand from its
/// parts and checks it, independent of the tape's freezing mechanism. Also
/// confirms the module's analytic gradient equals the hand-built one.
pub fn dcsa_gate_surrogate() -> f64 {
    let (mut store, p) = dcsa_store(4);
    let input = store.id_of("input").unwrap();
    let w = weighted(80, &[1, 4, 4, 4]);
    let (g0, decision) = {
        let tape = Tape::new();
        let (g, d) = dynamic_gate(&tape, &store, tape.param(&store, input), &p).unwrap();
        (g.value().data()[0], d)
    };
    let report = grad_check(&mut store, MODULE_EPS, 64, |tape, st| gate_surrogate(tape, st, input, &p, &decision, &w, g0)).unwrap();

    let grads = |dynamic: bool| {
        let mut st = store.clone();
        st.zero_grad();
        let tape = Tape::new();
        let loss = if dynamic {
            let y = dcsa_forward(&tape, &st, tape.param(&st, input), &p, BudgetMode::Dynamic).unwrap();
            tape.dot_const(y, &w).unwrap()
        } else {
            gate_surrogate(&tape, &st, input, &p, &decision, &w, g0).unwrap()
        };
        tape.backward(loss, &mut st).unwrap();
        st.iter().map(|q| q.grad.clone()).collect::<Vec<_>>()
    };
    let (a, b) = (grads(true), grads(false));
    let mismatch = a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    assert!(mismatch < 1e-12, "module and surrogate gradients differ by {mismatch}");
    report.max_rel_error
}

fn gate_surrogate<'t>(
    tape: &'t Tape,
    st: &ParamStore,
    input: usize,
    p: &DcsaParams,
    decision: &sdanet::dcsa::GateDecision,
    w: &Tensor,
    g0: f64,
) -> sdanet::Result<sdanet::Var<'t>> {
    let f = tape.param(st, input);
    let qkv = compute_qkv(tape, st, f, p)?;
    let (g, _) = dynamic_gate(tape, st, f, p)?;
    let (y, _) = sparse_channel_attention(tape, st, &qkv, decision, None, p)?;
    let s = tape.reshape(tape.dot_const(y, w)?, &[1])?;
    tape.reshape(tape.scale(tape.mul(s, g)?, 1.0 / g0), &[])
}
