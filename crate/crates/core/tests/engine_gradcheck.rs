//! Gradient checks for the tape engine against central finite differences,
//! plus the linearity and determinism contracts.

mod common;

use common::{central_diff_grad, grads_close, max_rel_err};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unlab_core::tensor::{Tape, Tensor, Var};

const REL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

/// Builds a small two-leaf graph exercising one composition of ops and
/// returns the scalar loss. `ax`/`aw` are flat data for a (2,3) and (3,3)
/// leaf respectively.
fn composite_loss(kind: usize, ax: &[f64], aw: &[f64]) -> f64 {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2, 3], ax.to_vec()).unwrap(), true).unwrap();
    let w = t.leaf(Tensor::new(vec![3, 3], aw.to_vec()).unwrap(), true).unwrap();
    let loss = build(kind, &mut t, x, w);
    t.value(loss).item()
}

fn build(kind: usize, t: &mut Tape, x: Var, w: Var) -> Var {
    match kind {
        0 => {
            let h = t.matmul(x, w).unwrap();
            let a = t.gelu(h).unwrap();
            let s = t.softmax(a).unwrap();
            let m = t.mul(s, a).unwrap();
            t.sum(m).unwrap()
        }
        1 => {
            let h = t.matmul_nt(x, w).unwrap(); // (2,3)@(3,3)^T
            let r = t.relu(h).unwrap();
            let sp = t.softplus(r).unwrap();
            t.sum(sp).unwrap()
        }
        2 => {
            let wt = t.transpose(w).unwrap();
            let h = t.matmul(x, wt).unwrap();
            let g = t.slice_cols(w, 0, 3).unwrap();
            let gamma = t.slice_cols(g, 0, 1).unwrap(); // reuse w entries as affine params
            let gflat = t.transpose(gamma).unwrap();
            let gv = t.sum(gflat).unwrap();
            let _ = gv;
            let ones = t.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
            let zeros = t.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
            let ln = t.layer_norm(h, ones, zeros).unwrap();
            let e = t.exp(ln).unwrap();
            t.sum(e).unwrap()
        }
        3 => {
            let h = t.matmul(x, w).unwrap();
            let ls = t.log_softmax(h).unwrap();
            let ce = t.cross_entropy(h, &[(0, 1), (1, 2)]).unwrap();
            let s = t.sum(ls).unwrap();
            let sc = t.scale(s, 0.01).unwrap();
            t.add(ce, sc).unwrap()
        }
        4 => {
            let a = t.slice_cols(x, 0, 2).unwrap();
            let b = t.slice_cols(x, 1, 3).unwrap();
            let c = t.concat_cols(&[a, b]).unwrap(); // (2,4)
            let d = t.slice_cols(c, 0, 3).unwrap();
            let p = t.mul(d, x).unwrap();
            let n = t.l2_norm(p).unwrap();
            let wsum = t.sum(w).unwrap();
            let sq = t.mul(wsum, wsum).unwrap();
            let r = t.sqrt(sq).unwrap();
            let half = t.scale(r, 0.5).unwrap();
            t.add(n, half).unwrap()
        }
        5 => {
            // Attention-like block: causal softmax over x @ x^T.
            let scores = t.matmul_nt(x, x).unwrap(); // (2,2)
            let attn = t.softmax_causal(scores).unwrap();
            let ctx = t.matmul(attn, x).unwrap(); // (2,3)
            let h = t.matmul(ctx, w).unwrap();
            let bias = t.slice_cols(w, 0, 3).unwrap();
            let b0 = t.transpose(bias).unwrap();
            let brow = t.slice_cols(b0, 0, 1).unwrap();
            let bt = t.transpose(brow).unwrap();
            let bflat = t.sum(bt).unwrap();
            let hsum = t.sum(h).unwrap();
            let hb = t.mul(hsum, bflat).unwrap();
            t.scale(hb, 0.1).unwrap()
        }
        6 => {
            let top = t.slice_rows(x, 0, 1).unwrap(); // (1,3)
            let h = t.matmul(top, w).unwrap();
            let e = t.exp(h).unwrap();
            let all = t.slice_rows(x, 1, 2).unwrap();
            let p = t.mul(e, all).unwrap();
            t.l2_norm(p).unwrap()
        }
        _ => unreachable!(),
    }
}

#[test]
fn compositions_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for kind in 0..7 {
        for _ in 0..8 {
            let ax: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let aw: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();

            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 3], ax.clone()).unwrap(), true).unwrap();
            let w = t.leaf(Tensor::new(vec![3, 3], aw.clone()).unwrap(), true).unwrap();
            let loss = build(kind, &mut t, x, w);
            t.backward(loss).unwrap();
            let gx = t.grad(x).unwrap().to_vec();
            let gw = t.grad(w).unwrap().to_vec();

            let nx = central_diff_grad(
                &mut |v: &[f64]| composite_loss(kind, v, &aw),
                &ax,
                1e-5,
            );
            let nw = central_diff_grad(
                &mut |v: &[f64]| composite_loss(kind, &ax, v),
                &aw,
                1e-5,
            );
            assert!(
                grads_close(&gx, &nx, REL, ABS_FLOOR),
                "kind {kind}: x-grad rel err {}",
                max_rel_err(&gx, &nx, ABS_FLOOR)
            );
            assert!(
                grads_close(&gw, &nw, REL, ABS_FLOOR),
                "kind {kind}: w-grad rel err {}",
                max_rel_err(&gw, &nw, ABS_FLOOR)
            );
        }
    }
}

#[test]
fn two_layer_net_matches_central_differences() {
    // Random 2-layer net with 12 parameters: (2,2) W1, bias 2, (2,2) W2, bias 2,
    // plus 2 inputs treated as constants -> 12 learnable scalars.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = [0.3, -0.7];

    let eval = |p: &[f64]| -> (f64, Option<Vec<f64>>) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], input.to_vec()).unwrap()).unwrap();
        let w1 = t.leaf(Tensor::new(vec![2, 2], p[0..4].to_vec()).unwrap(), true).unwrap();
        let b1 = t.leaf(Tensor::new(vec![2], p[4..6].to_vec()).unwrap(), true).unwrap();
        let w2 = t.leaf(Tensor::new(vec![2, 2], p[6..10].to_vec()).unwrap(), true).unwrap();
        let b2 = t.leaf(Tensor::new(vec![2], p[10..12].to_vec()).unwrap(), true).unwrap();
        let h1 = t.matmul(x, w1).unwrap();
        let h1b = t.add_bias(h1, b1).unwrap();
        let a1 = t.gelu(h1b).unwrap();
        let h2 = t.matmul(a1, w2).unwrap();
        let h2b = t.add_bias(h2, b2).unwrap();
        let sm = t.softmax(h2b).unwrap();
        let ce = t.cross_entropy(h2b, &[(0, 0)]).unwrap();
        let s = t.sum(sm).unwrap();
        let s2 = t.scale(s, 0.3).unwrap();
        let loss = t.add(ce, s2).unwrap();
        let val = t.value(loss).item();
        if t.backward(loss).is_ok() {
            let mut g = Vec::new();
            for v in [w1, b1, w2, b2] {
                g.extend_from_slice(t.grad(v).unwrap());
            }
            (val, Some(g))
        } else {
            (val, None)
        }
    };

    let (_, g) = eval(&params);
    let g = g.unwrap();
    let numeric = central_diff_grad(&mut |p: &[f64]| eval(p).0, &params, 1e-5);
    assert!(
        grads_close(&g, &numeric, REL, ABS_FLOOR),
        "rel err {}",
        max_rel_err(&g, &numeric, ABS_FLOOR)
    );
}

#[test]
fn backward_is_linear_in_the_loss() {
    // backward of a*f + b*g equals a*grad(f) + b*grad(g)
    let data: Vec<f64> = (0..6).map(|i| 0.31 * i as f64 - 0.8).collect();
    let (a, b) = (1.7, -0.4);

    let grad_of = |mode: usize| -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], data.clone()).unwrap(), true).unwrap();
        let sm = t.softmax(x).unwrap();
        let f = t.sum(sm).unwrap();
        let ge = t.gelu(x).unwrap();
        let g = t.l2_norm(ge).unwrap();
        let loss = match mode {
            0 => {
                let fa = t.scale(f, a).unwrap();
                let gb = t.scale(g, b).unwrap();
                t.add(fa, gb).unwrap()
            }
            1 => f,
            _ => g,
        };
        t.backward(loss).unwrap();
        t.grad(x).unwrap().to_vec()
    };

    let combined = grad_of(0);
    let gf = grad_of(1);
    let gg = grad_of(2);
    for i in 0..combined.len() {
        let expect = a * gf[i] + b * gg[i];
        assert!(
            (combined[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0),
            "linearity violated at {i}: {} vs {expect}",
            combined[i]
        );
    }
}
