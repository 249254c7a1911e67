//! Forward evaluation: tape construction with opt-in activation capture,
//! sequence probabilities, greedy decoding and exact-match accuracy.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::{CaptureSite, ModelConfig, ModelSnapshot, ModuleKind, ParamVars, LOGP_UNDERFLOW_FLOOR};

pub type CaptureSet = BTreeSet<CaptureSite>;

/// Additive perturbation injected at one (site, unit, token) slot during
/// the forward pass. This is the activation-perturbation oracle's hook:
/// it changes the value flowing downstream without touching the tape ops.
#[derive(Debug, Clone, Copy)]
pub struct Nudge {
    pub site: CaptureSite,
    pub unit: usize,
    pub pos: usize,
    pub delta: f64,
}

pub struct ForwardOut {
    pub logits: Var,
    pub captured: BTreeMap<CaptureSite, Var>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument { op: "forward", msg: "empty token sequence".into() });
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::OverLength { len: tokens.len(), max: cfg.max_seq_len });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken { id: t, vocab: cfg.vocab_size });
        }
    }
    Ok(())
}

/// Runs the transformer on `tokens`, recording requested activation sites.
/// Capture never alters the computation: logits with and without capture
/// are bit-identical.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[u32],
    capture: &CaptureSet,
    nudge: Option<&Nudge>,
) -> Result<ForwardOut> {
    check_tokens(cfg, tokens)?;
    let t_len = tokens.len();
    let dh = cfg.head_dim();
    let mut captured = BTreeMap::new();

    // Applies the oracle nudge (if any) and records the capture.
    let site_out = |tape: &mut Tape,
                        captured: &mut BTreeMap<CaptureSite, Var>,
                        site: CaptureSite,
                        var: Var|
     -> Result<Var> {
        let mut out = var;
        if let Some(n) = nudge {
            if n.site == site {
                let units = tape.value(var).shape()[1];
                if n.unit >= units || n.pos >= t_len {
                    return Err(Error::InvalidArgument {
                        op: "nudge",
                        msg: format!("slot ({}, {}) outside site {site}", n.pos, n.unit),
                    });
                }
                let mut delta = vec![0.0; t_len * units];
                delta[n.pos * units + n.unit] = n.delta;
                let dvar = tape.constant(Tensor::new(vec![t_len, units], delta)?)?;
                out = tape.add(var, dvar)?;
            }
        }
        if capture.contains(&site) {
            captured.insert(site, out);
        }
        Ok(out)
    };

    let embed = params.get("embed");
    let pos_ids: Vec<u32> = (0..t_len as u32).collect();
    let te = tape.embed(embed, tokens)?;
    let pe = tape.embed(params.get("pos"), &pos_ids)?;
    let mut h = tape.add(te, pe)?;

    for l in 0..cfg.num_layers {
        let p = |name: &str| format!("layer{l:02}.{name}");
        let ln1 = tape.layer_norm(h, params.get(&p("ln1.g")), params.get(&p("ln1.b")))?;

        let q0 = tape.matmul(ln1, params.get(&p("wq")))?;
        let q = site_out(tape, &mut captured, CaptureSite::Module { layer: l, kind: ModuleKind::AttnQ }, q0)?;
        let k0 = tape.matmul(ln1, params.get(&p("wk")))?;
        let k = site_out(tape, &mut captured, CaptureSite::Module { layer: l, kind: ModuleKind::AttnK }, k0)?;
        let v0 = tape.matmul(ln1, params.get(&p("wv")))?;
        let v = site_out(tape, &mut captured, CaptureSite::Module { layer: l, kind: ModuleKind::AttnV }, v0)?;

        let mut head_ctx = Vec::with_capacity(cfg.num_heads);
        for hh in 0..cfg.num_heads {
            let (s, e) = (hh * dh, (hh + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax_causal(scaled)?;
            head_ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let ao0 = tape.matmul(ctx, params.get(&p("wo")))?;
        let ao = site_out(tape, &mut captured, CaptureSite::Module { layer: l, kind: ModuleKind::AttnO }, ao0)?;
        h = tape.add(h, ao)?;

        let ln2 = tape.layer_norm(h, params.get(&p("ln2.g")), params.get(&p("ln2.b")))?;
        let pre = tape.matmul(ln2, params.get(&p("w1")))?;
        let act0 = tape.gelu(pre)?;
        let act = site_out(tape, &mut captured, CaptureSite::Module { layer: l, kind: ModuleKind::MlpIn }, act0)?;
        let mo0 = tape.matmul(act, params.get(&p("w2")))?;
        let mo = site_out(tape, &mut captured, CaptureSite::Module { layer: l, kind: ModuleKind::MlpOut }, mo0)?;
        h = tape.add(h, mo)?;
        h = site_out(tape, &mut captured, CaptureSite::Resid { layer: l }, h)?;
    }

    let hf = tape.layer_norm(h, params.get("final.g"), params.get("final.b"))?;
    let unembed = if cfg.tie_embeddings { embed } else { params.get("unembed") };
    let logits = tape.matmul_nt(hf, unembed)?;
    Ok(ForwardOut { logits, captured })
}

/// Frozen-parameter logits for `tokens` (positions, vocab).
pub fn eval_logits(snap: &ModelSnapshot, tokens: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, false)?;
    let out = forward_on_tape(&mut tape, &params, &snap.config, tokens, &CaptureSet::new(), None)?;
    Ok(tape.value(out.logits).clone())
}

/// Logits with one activation slot nudged by `delta` (the perturbation
/// oracle's forward path).
pub fn eval_logits_nudged(snap: &ModelSnapshot, tokens: &[u32], nudge: &Nudge) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, false)?;
    let mut capture = CaptureSet::new();
    capture.insert(nudge.site);
    let out = forward_on_tape(&mut tape, &params, &snap.config, tokens, &capture, Some(nudge))?;
    Ok(tape.value(out.logits).clone())
}

/// Per-token answer targets `(row, token)` for `y` conditioned on `x`.
pub fn answer_targets(x_len: usize, y: &[u32]) -> Vec<(usize, u32)> {
    y.iter().enumerate().map(|(t, &tok)| (x_len - 1 + t, tok)).collect()
}

/// Builds log P(y|x) = sum of per-token conditional log-probs as a tape
/// scalar, returning the var and its current value.
pub fn seq_logprob_var(
    tape: &mut Tape,
    params: &ParamVars,
    cfg: &ModelConfig,
    x: &[u32],
    y: &[u32],
) -> Result<(Var, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument { op: "sequence-prob", msg: "x and y must be nonempty".into() });
    }
    let mut tokens = x.to_vec();
    tokens.extend_from_slice(y);
    let out = forward_on_tape(tape, params, cfg, &tokens, &CaptureSet::new(), None)?;
    let ce = tape.cross_entropy(out.logits, &answer_targets(x.len(), y))?;
    let logp = tape.scale(ce, -(y.len() as f64))?;
    let val = tape.value(logp).item();
    Ok((logp, val))
}

/// P(y|x) and log P(y|x) under the product of per-token conditionals.
/// Probabilities that would underflow 64-bit range are rejected.
pub fn sequence_prob(snap: &ModelSnapshot, x: &[u32], y: &[u32]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, false)?;
    let (_, logp) = seq_logprob_var(&mut tape, &params, &snap.config, x, y)?;
    if logp < LOGP_UNDERFLOW_FLOOR {
        return Err(Error::Underflow { logp, floor: LOGP_UNDERFLOW_FLOOR });
    }
    Ok((logp.exp(), logp))
}

/// True iff greedy decoding of `y.len()` tokens from `x` reproduces `y`
/// exactly. Evaluated in one teacher-forced pass: the first mismatching
/// position already decides the outcome, and while every position matches,
/// the greedy prefix equals the gold prefix, so the checks coincide.
pub fn teacher_forced_match(snap: &ModelSnapshot, x: &[u32], y: &[u32]) -> Result<bool> {
    let mut tokens = x.to_vec();
    tokens.extend_from_slice(y);
    let logits = eval_logits(snap, &tokens)?;
    let v = snap.config.vocab_size;
    for (row, tok) in answer_targets(x.len(), y) {
        if argmax(&logits.data()[row * v..(row + 1) * v]) != tok as usize {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Literal autoregressive greedy decode of `len` tokens after `x`.
pub fn greedy_decode(snap: &ModelSnapshot, x: &[u32], len: usize) -> Result<Vec<u32>> {
    let mut tokens = x.to_vec();
    let v = snap.config.vocab_size;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let logits = eval_logits(snap, &tokens)?;
        let last = logits.shape()[0] - 1;
        let next = argmax(&logits.data()[last * v..(last + 1) * v]) as u32;
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{neuron_ids, ModelConfig, ModelSnapshot, MODULE_KINDS};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            vocab_size: 13,
            max_seq_len: 8,
            init_seed: 7,
            tie_embeddings: true,
        }
    }

    #[test]
    fn capture_is_transparent_and_shapes_match() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        let tokens = [1u32, 5, 3, 9];

        let plain = eval_logits(&snap, &tokens).unwrap();
        assert_eq!(plain.shape(), &[4, 13]);

        let mut tape = Tape::new();
        let params = ParamVars::insert(&mut tape, &snap, false).unwrap();
        let mut cap = CaptureSet::new();
        for l in 0..2 {
            for kind in MODULE_KINDS {
                cap.insert(CaptureSite::Module { layer: l, kind });
            }
            cap.insert(CaptureSite::Resid { layer: l });
        }
        let out = forward_on_tape(&mut tape, &params, &snap.config, &tokens, &cap, None).unwrap();
        assert_eq!(out.captured.len(), 14);
        for (site, var) in &out.captured {
            let shape = tape.value(*var).shape();
            assert_eq!(shape[0], 4, "{site} captures one vector per token");
        }
        for (a, b) in plain.data().iter().zip(tape.value(out.logits).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        let a = eval_logits(&snap, &[2, 4, 6]).unwrap();
        let b = eval_logits(&snap, &[2, 4, 6]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_unknown_token_and_overlength() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        assert!(matches!(eval_logits(&snap, &[99]), Err(Error::UnknownToken { .. })));
        assert!(matches!(
            eval_logits(&snap, &[0; 9]),
            Err(Error::OverLength { .. })
        ));
    }

    #[test]
    fn causality_later_tokens_do_not_change_earlier_logits() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        let a = eval_logits(&snap, &[3, 7, 2, 11]).unwrap();
        let b = eval_logits(&snap, &[3, 7, 2, 1]).unwrap();
        let v = snap.config.vocab_size;
        for row in 0..3 {
            for j in 0..v {
                assert_eq!(
                    a.data()[row * v + j].to_bits(),
                    b.data()[row * v + j].to_bits(),
                    "position {row} shifted"
                );
            }
        }
    }

    #[test]
    fn next_token_distribution_sums_to_one() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        let logits = eval_logits(&snap, &[1, 2, 3]).unwrap();
        let v = snap.config.vocab_size;
        for row in 0..3 {
            let r = &logits.data()[row * v..(row + 1) * v];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
            let total: f64 = r.iter().map(|x| (x - m).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_model_gives_one_over_vocab() {
        let snap = ModelSnapshot::zeroed(tiny_cfg()).unwrap();
        let (p, logp) = sequence_prob(&snap, &[1, 2], &[5]).unwrap();
        assert!((p - 1.0 / 13.0).abs() < 1e-12);
        assert!((logp - (1.0f64 / 13.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_is_sum_of_per_token_log_probs() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        let (x, y) = (vec![1u32, 2, 3], vec![4u32, 5]);
        let (_, logp) = sequence_prob(&snap, &x, &y).unwrap();
        let (_, l1) = sequence_prob(&snap, &x, &y[..1].to_vec()).unwrap();
        let mut x2 = x.clone();
        x2.push(y[0]);
        let (_, l2) = sequence_prob(&snap, &x2, &y[1..].to_vec()).unwrap();
        assert!((logp - (l1 + l2)).abs() < 1e-12);
    }

    #[test]
    fn teacher_forced_match_equals_literal_greedy_decode() {
        for s in 0..5u64 {
            let cfg = ModelConfig { init_seed: s, ..tiny_cfg() };
            let snap = ModelSnapshot::init(cfg).unwrap();
            for x0 in 0..6u32 {
                let x = vec![x0, (x0 + 3) % 13];
                let y = vec![(x0 * 5 + 1) % 13, (x0 * 7 + 2) % 13];
                let tf = teacher_forced_match(&snap, &x, &y).unwrap();
                let greedy = greedy_decode(&snap, &x, y.len()).unwrap();
                assert_eq!(tf, greedy == y, "seed {s} x {x:?}");
            }
        }
    }

    #[test]
    fn nudge_changes_only_downstream_values() {
        let snap = ModelSnapshot::init(tiny_cfg()).unwrap();
        let tokens = [1u32, 5, 3];
        let plain = eval_logits(&snap, &tokens).unwrap();
        let nudge = Nudge {
            site: CaptureSite::Module { layer: 1, kind: ModuleKind::MlpOut },
            unit: 2,
            pos: 1,
            delta: 0.25,
        };
        let bumped = eval_logits_nudged(&snap, &tokens, &nudge).unwrap();
        let v = snap.config.vocab_size;
        // position 0 logits unaffected (causality), position 1..2 shift
        for j in 0..v {
            assert_eq!(plain.data()[j].to_bits(), bumped.data()[j].to_bits());
        }
        let shifted = (0..v).any(|j| plain.data()[v + j] != bumped.data()[v + j]);
        assert!(shifted);
        let _ = neuron_ids(&snap.config);
    }
}
