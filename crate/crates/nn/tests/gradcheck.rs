//! Central finite-difference checks for every tape op and layer.

use cxrjust_nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, Embedding, Linear, LstmCell, Mode};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::Tape;
use cxrjust_nn::{Arr, VarStore};
use ndarray::IxDyn;
use rand::Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Compare the analytic gradient of `build` w.r.t. a leaf tensor against
/// central finite differences.
fn check_input_grad<F>(shape: &[usize], seed: u64, build: F)
where
    F: Fn(&mut Tape, cxrjust_nn::NodeId) -> cxrjust_nn::NodeId,
{
    check_input_grad_with(&VarStore::new(), shape, seed, build)
}

fn check_input_grad_with<F>(vs: &VarStore, shape: &[usize], seed: u64, build: F)
where
    F: Fn(&mut Tape, cxrjust_nn::NodeId) -> cxrjust_nn::NodeId,
{
    let mut rng = derive_rng(seed, "gradcheck");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Arr::from_shape_vec(IxDyn(shape), data).unwrap();

    let mut tape = Tape::new(vs);
    let xn = tape.constant(x.clone());
    let loss = build(&mut tape, xn);
    let grads = tape.backward(loss);
    let g = grads.node(xn).expect("input grad").clone();

    let f = |x: &Arr| {
        let mut t = Tape::new(vs);
        let xn = t.constant(x.clone());
        let l = build(&mut t, xn);
        t.scalar(l)
    };
    for idx in 0..n.min(40) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += H;
        xm.as_slice_mut().unwrap()[idx] -= H;
        let fd = (f(&xp) - f(&xm)) / (2.0 * H);
        let an = g.as_slice().unwrap()[idx];
        let denom = fd.abs().max(an.abs()).max(1.0);
        assert!(
            (fd - an).abs() / denom < TOL,
            "grad mismatch at {idx}: fd={fd}, analytic={an}"
        );
    }
}

#[test]
fn elementwise_ops() {
    check_input_grad(&[3, 5], 1, |t, x| {
        let y = t.tanh(x);
        let z = t.sigmoid(y);
        let w = t.mul(z, y);
        t.mean_all(w)
    });
    check_input_grad(&[4, 4], 2, |t, x| {
        let a = t.affine(x, 2.0, 0.3);
        let e = t.exp(a);
        let s = t.sqrt_eps(e, 1e-12);
        let l = t.ln(s);
        t.sum_all(l)
    });
    check_input_grad(&[2, 7], 3, |t, x| {
        let r = t.leaky_relu(x, 0.2);
        let sq = t.mul(r, r);
        t.mean_all(sq)
    });
}

#[test]
fn matmul_and_bias() {
    let mut rng = derive_rng(10, "mm");
    let mut vs = VarStore::new();
    let lin = Linear::new(&mut vs, "l0", 6, 4, &mut rng);
    check_by_param(&vs, &[lin.w, lin.b], |t| {
        let x = t.constant(cxrjust_nn::layers::uniform_init(
            &mut derive_rng(11, "x"),
            &[3, 6],
            -1.0,
            1.0,
        ));
        let y = lin.forward(t, x);
        let s = t.tanh(y);
        t.mean_all(s)
    });
    check_input_grad_with(&vs, &[3, 6], 12, |t, x| {
        let y = lin.forward(t, x);
        t.mean_all(y)
    });
}

/// FD-check gradients with respect to parameters of a closure-built loss.
fn check_by_param<F>(vs: &VarStore, params: &[cxrjust_nn::ParamId], build: F)
where
    F: Fn(&mut Tape) -> cxrjust_nn::NodeId,
{
    let mut tape = Tape::new(vs);
    let loss = build(&mut tape);
    let grads = tape.backward(loss);

    // FD requires mutating the store, so clone it into a scratch copy.
    for &pid in params {
        let g = grads.param(pid).expect("param grad").clone();
        let base = vs.get(pid).clone();
        let n = base.len();
        for idx in (0..n).step_by((n / 12).max(1)) {
            let eval = |delta: f64| {
                let mut vs2 = clone_store(vs);
                vs2.get_mut(pid).as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new(&vs2);
                let l = build(&mut t);
                t.scalar(l)
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                (fd - an).abs() / denom < TOL,
                "param grad mismatch at {idx}: fd={fd}, analytic={an}"
            );
        }
    }
}

fn clone_store(vs: &VarStore) -> VarStore {
    let mut out = VarStore::new();
    for id in vs.ids() {
        out.add(vs.name(id).to_string(), vs.get(id).clone(), vs.is_trainable(id));
    }
    out
}

#[test]
fn conv_forward_backward() {
    let mut rng = derive_rng(20, "conv");
    let mut vs = VarStore::new();
    let conv = Conv2d::new(&mut vs, "c0", 2, 3, 4, 2, 1, true, &mut rng);
    check_input_grad_with(&vs, &[2, 2, 8, 8], 21, |t, x| {
        let y = conv.forward(t, x);
        let a = t.tanh(y);
        t.mean_all(a)
    });
    check_by_param(&vs, &[conv.w, conv.b.unwrap()], |t| {
        let x = t.constant(cxrjust_nn::layers::uniform_init(
            &mut derive_rng(22, "cx"),
            &[2, 2, 8, 8],
            -1.0,
            1.0,
        ));
        let y = conv.forward(t, x);
        let a = t.tanh(y);
        t.mean_all(a)
    });
}

#[test]
fn conv_transpose_forward_backward() {
    let mut rng = derive_rng(30, "convt");
    let mut vs = VarStore::new();
    let convt = ConvTranspose2d::new(&mut vs, "u0", 3, 2, 4, 2, 1, true, &mut rng);
    check_input_grad_with(&vs, &[2, 3, 4, 4], 31, |t, x| {
        let y = convt.forward(t, x);
        let a = t.sigmoid(y);
        t.mean_all(a)
    });
    check_by_param(&vs, &[convt.w, convt.b.unwrap()], |t| {
        let x = t.constant(cxrjust_nn::layers::uniform_init(
            &mut derive_rng(32, "ux"),
            &[2, 3, 4, 4],
            -1.0,
            1.0,
        ));
        let y = convt.forward(t, x);
        let a = t.sigmoid(y);
        t.mean_all(a)
    });
}

#[test]
fn batch_norm_train_mode() {
    let mut rng = derive_rng(40, "bn");
    let mut vs = VarStore::new();
    let bn = BatchNorm::new(&mut vs, "bn0", 3, &mut rng);
    check_input_grad_with(&vs, &[4, 3, 5, 5], 41, |t, x| {
        let mode = Mode::Train(&mut derive_rng(0, "unused"));
        let y = bn.forward(t, x, &mode);
        let a = t.tanh(y);
        t.mean_all(a)
    });
    check_by_param(&vs, &[bn.gamma, bn.beta], |t| {
        let x = t.constant(cxrjust_nn::layers::uniform_init(
            &mut derive_rng(42, "bx"),
            &[4, 3, 5, 5],
            -1.0,
            1.0,
        ));
        let mode = Mode::Train(&mut derive_rng(0, "unused"));
        let y = bn.forward(t, x, &mode);
        let a = t.tanh(y);
        t.mean_all(a)
    });
}

#[test]
fn batch_norm_eval_mode() {
    let mut rng = derive_rng(45, "bne");
    let mut vs = VarStore::new();
    let bn = BatchNorm::new(&mut vs, "bn1", 2, &mut rng);
    {
        // push nontrivial running stats
        let mut run = bn.running.write().unwrap();
        run.0 = ndarray::arr1(&[0.3, -0.2]);
        run.1 = ndarray::arr1(&[1.5, 0.7]);
    }
    check_input_grad_with(&vs, &[3, 2, 4, 4], 46, |t, x| {
        let y = bn.forward(t, x, &Mode::Eval);
        let a = t.sigmoid(y);
        t.mean_all(a)
    });
}

#[test]
fn softmax_pick_and_concat() {
    check_input_grad(&[4, 6], 50, |t, x| {
        let lp = t.log_softmax(x);
        let picked = t.pick_rows(lp, &[1, 0, 5, 3]);
        let s = t.sum_all(picked);
        t.affine(s, -0.25, 0.0)
    });
    check_input_grad(&[3, 8], 51, |t, x| {
        let a = t.slice1(x, 0, 3);
        let b = t.slice1(x, 3, 8);
        let a2 = t.tanh(a);
        let c = t.concat1(a2, b);
        let sq = t.mul(c, c);
        t.sum_per_sample(sq);
        let m = t.mul(c, c);
        t.mean_all(m)
    });
    check_input_grad(&[5, 4], 52, |t, x| {
        let sp = t.sum_per_sample(x);
        let e = t.exp(sp);
        t.mean_all(e)
    });
}

#[test]
fn embedding_and_lstm() {
    let mut rng = derive_rng(60, "lstm");
    let mut vs = VarStore::new();
    let emb = Embedding::new(&mut vs, "emb", 7, 5, &mut rng);
    let cell = LstmCell::new(&mut vs, "lstm", 5, 6, &mut rng);
    let out = Linear::new(&mut vs, "out", 6, 7, &mut rng);
    let tokens = [vec![1usize, 2], vec![3, 0], vec![4, 6]];
    let targets = [vec![2usize, 1], vec![0, 5], vec![6, 3]];

    check_by_param(
        &vs,
        &[emb.table, cell.w_ih, cell.w_hh, cell.b, out.w, out.b],
        |t| {
            let (mut h, mut c) = cell.zero_state(t, 2);
            let mut losses = Vec::new();
            for step in 0..3 {
                let x = emb.forward(t, &tokens[step]);
                let (h2, c2) = cell.step(t, x, h, c);
                h = h2;
                c = c2;
                let logits = out.forward(t, h);
                let lp = t.log_softmax(logits);
                let picked = t.pick_rows(lp, &targets[step]);
                let nll = t.sum_all(picked);
                losses.push(nll);
            }
            let s01 = t.add(losses[0], losses[1]);
            let s = t.add(s01, losses[2]);
            t.affine(s, -1.0 / 6.0, 0.0)
        },
    );
}

#[test]
fn tile_spatial_grad() {
    check_input_grad(&[2, 3, 1, 1], 80, |t, x| {
        let tiled = t.tile_spatial(x, 5, 4);
        let a = t.tanh(tiled);
        t.mean_all(a)
    });
}

#[test]
fn shared_param_accumulates() {
    // One parameter used twice must receive the sum of both contributions.
    let mut rng = derive_rng(70, "shared");
    let mut vs = VarStore::new();
    let lin = Linear::new(&mut vs, "shared", 3, 3, &mut rng);
    check_by_param(&vs, &[lin.w], |t| {
        let x = t.constant(cxrjust_nn::layers::uniform_init(
            &mut derive_rng(71, "sx"),
            &[2, 3],
            -1.0,
            1.0,
        ));
        let y1 = lin.forward(t, x);
        let a = t.tanh(y1);
        let y2 = lin.forward(t, a);
        t.mean_all(y2)
    });
}
