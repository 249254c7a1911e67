//! The six unlearning objectives (GA, GD, DPO, NPO, RMU, SSIUU) and the
//! forget-score early-stopping loop.
//!
//! SSIUU adds an attribution regularizer on top of the GD backbone: the
//! parameter-level attribution theta_i * dP(y|x)/dtheta_i is pinned to its
//! previous-step value on the negative-index set I-. The previous-step term
//! and the gradient factor inside the current-step attribution are treated
//! as constants, so the whole objective stays first-order; the
//! finite-difference checks hold those caches fixed the same way.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{fact_pairs, CorpusSplits, Fact};
use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, pairs_accuracy, seq_logprob_var, CaptureSet, CaptureSite, ModelSnapshot,
    ParamLayout, ParamVars, MODULE_KINDS,
};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ga,
    Gd,
    Dpo,
    Npo,
    Rmu,
    Ssiuu,
}

pub const ALL_METHODS: [Method; 6] = [Method::Ga, Method::Gd, Method::Dpo, Method::Npo, Method::Rmu, Method::Ssiuu];

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Ga => "ga",
            Method::Gd => "gd",
            Method::Dpo => "dpo",
            Method::Npo => "npo",
            Method::Rmu => "rmu",
            Method::Ssiuu => "ssiuu",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// How SSIUU derives attributions inside the training loop: the efficiency
/// variant multiplies each parameter with its gradient; the activation
/// variant uses per-token module-site attributions (analysis cross-checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SsiuuAttrMode {
    #[default]
    Params,
    Activations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// FS early-stop target (exact-match accuracy on the forget split).
    pub forget_threshold: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// 0 = full forget split each step.
    pub batch_forget: usize,
    /// 0 = full retain split each step.
    pub batch_retain: usize,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub rmu_alpha: Option<f64>,
    pub rmu_c: Option<f64>,
    pub rmu_layer: Option<usize>,
    #[serde(default)]
    pub ssiuu_attr_mode: SsiuuAttrMode,
    pub seed: u64,
    /// Question templates used for FS/RS evaluation.
    pub eval_templates: Vec<usize>,
}

impl UnlearnConfig {
    pub fn new(method: Method, learning_rate: f64, seed: u64) -> Self {
        let mut cfg = UnlearnConfig {
            method,
            learning_rate,
            forget_threshold: 0.0,
            max_steps: 400,
            eval_every: 1,
            batch_forget: 0,
            batch_retain: 0,
            lambda: None,
            beta: None,
            rmu_alpha: None,
            rmu_c: None,
            rmu_layer: None,
            ssiuu_attr_mode: SsiuuAttrMode::Params,
            seed,
            eval_templates: vec![0, 1],
        };
        match method {
            Method::Dpo | Method::Npo => cfg.beta = Some(0.1),
            Method::Rmu => {
                cfg.rmu_alpha = Some(5.0);
                cfg.rmu_c = Some(20.0);
                cfg.rmu_layer = Some(1);
            }
            Method::Ssiuu => cfg.lambda = Some(0.001),
            _ => {}
        }
        cfg
    }

    pub fn validate(&self, snap: &ModelSnapshot) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.learning_rate <= 0.0 {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        match self.method {
            Method::Ssiuu => match self.lambda {
                Some(l) if l >= 0.0 => {}
                Some(l) => return bad(format!("lambda {l} must be nonnegative")),
                None => return bad("ssiuu requires lambda".into()),
            },
            _ if self.lambda.is_some() => return bad(format!("lambda is only used by ssiuu, not {}", self.method)),
            _ => {}
        }
        match self.method {
            Method::Dpo => {
                match self.beta {
                    Some(b) if b >= 0.0 => {}
                    _ => return bad("dpo requires beta >= 0".into()),
                }
            }
            Method::Npo => {
                match self.beta {
                    Some(b) if b > 0.0 => {}
                    _ => return bad("npo requires beta > 0".into()),
                }
            }
            _ if self.beta.is_some() => return bad(format!("beta is only used by dpo/npo, not {}", self.method)),
            _ => {}
        }
        if self.method == Method::Rmu {
            let layer = self.rmu_layer.ok_or_else(|| Error::Config("rmu requires rmu-layer".into()))?;
            if layer >= snap.config.num_layers {
                return bad(format!("rmu layer {layer} out of range 0..{}", snap.config.num_layers));
            }
            if self.rmu_alpha.is_none() || self.rmu_c.is_none() {
                return bad("rmu requires rmu-alpha and rmu-c".into());
            }
        } else if self.rmu_alpha.is_some() || self.rmu_c.is_some() || self.rmu_layer.is_some() {
            return bad(format!("rmu-* settings are only used by rmu, not {}", self.method));
        }
        if self.eval_templates.is_empty() {
            return bad("eval_templates must not be empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ThresholdReached,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_unlearn: f64,
    pub loss_retain: f64,
    pub loss_reg: f64,
    pub reg_magnitude: f64,
    pub fs: Option<f64>,
    pub rs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnTrace {
    pub method: Method,
    pub learning_rate: f64,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub stop_step: usize,
    pub stop_reason: StopReason,
    pub fs_stop: f64,
    pub rs_retain_stop: f64,
    pub rs_test_stop: f64,
    pub meta: BTreeMap<String, String>,
}

// ── Loss construction ────────────────────────────────────────────────

pub struct LossBatch<'a> {
    pub forget: Vec<&'a Fact>,
    pub retain: Vec<&'a Fact>,
    /// |C_f|, for the per-batch regularizer scaling.
    pub forget_set_size: usize,
}

/// Per-fact data for the SSIUU regularizer, all treated as constants by
/// the loss: the previous-step attribution, the current-step gradient
/// factor and the negative-index mask.
pub struct SsiuuFactCache {
    pub fact_id: u32,
    pub a_prev: Vec<f64>,
    pub grad: Vec<f64>,
    pub mask: Vec<bool>,
}

pub struct SsiuuCache {
    pub entries: Vec<SsiuuFactCache>,
}

/// Activation-mode analog: per-site previous attributions, gradient
/// factors and masks, over input-token rows only.
pub struct SsiuuActFactCache {
    pub fact_id: u32,
    /// Per capture site in `MODULE_KINDS`-major order: (a_prev, grad, mask),
    /// each of length x_len * units.
    pub sites: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

pub struct SsiuuActCache {
    pub entries: Vec<SsiuuActFactCache>,
}

pub struct MethodAux<'a> {
    /// Frozen pre-unlearning snapshot (DPO/NPO contrast, RMU retain anchor).
    pub reference: Option<&'a ModelSnapshot>,
    pub rmu_direction: Option<&'a [f64]>,
    pub ssiuu: Option<&'a SsiuuCache>,
    pub ssiuu_act: Option<&'a SsiuuActCache>,
}

impl<'a> MethodAux<'a> {
    pub fn none() -> Self {
        MethodAux { reference: None, rmu_direction: None, ssiuu: None, ssiuu_act: None }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossParts {
    pub unlearn: f64,
    pub retain: f64,
    pub reg: f64,
    pub total: f64,
}

/// Sequence log-prob of a fact's gold answer under frozen parameters.
fn frozen_logp(snap: &ModelSnapshot, x: &[u32], y: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, false)?;
    let (_, v) = seq_logprob_var(&mut tape, &params, &snap.config, x, y)?;
    Ok(v)
}

/// Mean of scalar vars (empty -> constant zero).
fn mean_scalars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    if vars.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

/// Frozen layer-l residual activations for RMU's retain anchor.
fn frozen_resid(snap: &ModelSnapshot, tokens: &[u32], layer: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, false)?;
    let mut cap = CaptureSet::new();
    cap.insert(CaptureSite::Resid { layer });
    let out = forward_on_tape(&mut tape, &params, &snap.config, tokens, &cap, None)?;
    Ok(tape.value(out.captured[&CaptureSite::Resid { layer }]).clone())
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

fn join(x: &[u32], y: &[u32]) -> Vec<u32> {
    let mut t = x.to_vec();
    t.extend_from_slice(y);
    t
}

/// Builds the configured objective on a fresh tape. Returns the loss parts,
/// the tape, the total-loss var and the parameter vars (so callers can run
/// backward and extract gradients).
fn build_loss(
    snap: &ModelSnapshot,
    cfg: &UnlearnConfig,
    batch: &LossBatch,
    aux: &MethodAux,
) -> Result<(LossParts, Tape, Var, ParamVars)> {
    if batch.forget.is_empty() {
        return Err(Error::InvalidArgument { op: "unlearn-loss", msg: "empty forget batch".into() });
    }
    let mcfg = &snap.config;
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, true)?;

    let need_reference = matches!(cfg.method, Method::Dpo | Method::Npo | Method::Rmu);
    let reference = if need_reference {
        let r = aux.reference.ok_or_else(|| Error::InvalidArgument {
            op: "unlearn-loss",
            msg: format!("{} requires a reference snapshot", cfg.method),
        })?;
        if !r.same_schema(snap) {
            return Err(Error::ConfigMismatch("reference snapshot schema differs from policy".into()));
        }
        Some(r)
    } else {
        None
    };

    // Auxiliary retain term: mean NLL over the retain batch (zero when
    // empty, which also makes GD collapse to GA). GA has no retention
    // loss and RMU anchors retention on activations instead.
    let retain_term = if matches!(cfg.method, Method::Gd | Method::Dpo | Method::Npo | Method::Ssiuu) {
        let mut nlls = Vec::with_capacity(batch.retain.len());
        for f in &batch.retain {
            let (lp, _) = seq_logprob_var(&mut tape, &params, mcfg, &f.question_tokens, &f.answer_tokens)?;
            nlls.push(tape.scale(lp, -1.0)?);
        }
        mean_scalars(&mut tape, &nlls)?
    } else {
        tape.constant(Tensor::scalar(0.0))?
    };

    // Unlearn term per method.
    let (unlearn_term, reg_term) = match cfg.method {
        Method::Ga | Method::Gd => {
            let mut lps = Vec::with_capacity(batch.forget.len());
            for f in &batch.forget {
                let (lp, _) = seq_logprob_var(&mut tape, &params, mcfg, &f.question_tokens, &f.answer_tokens)?;
                lps.push(lp);
            }
            (mean_scalars(&mut tape, &lps)?, None)
        }
        Method::Dpo => {
            let beta = cfg.beta.expect("validated");
            let reference = reference.expect("validated");
            let rej = crate::corpus::REJECTION_TOKENS.to_vec();
            let mut terms = Vec::with_capacity(batch.forget.len());
            for f in &batch.forget {
                let (lp_rej, _) = seq_logprob_var(&mut tape, &params, mcfg, &f.question_tokens, &rej)?;
                let (lp_gold, _) = seq_logprob_var(&mut tape, &params, mcfg, &f.question_tokens, &f.answer_tokens)?;
                let ref_rej = frozen_logp(reference, &f.question_tokens, &rej)?;
                let ref_gold = frozen_logp(reference, &f.question_tokens, &f.answer_tokens)?;
                let pol_gap = tape.sub(lp_rej, lp_gold)?;
                let ref_gap = tape.constant(Tensor::scalar(ref_rej - ref_gold))?;
                let z0 = tape.sub(pol_gap, ref_gap)?;
                let z = tape.scale(z0, beta)?;
                let negz = tape.scale(z, -1.0)?;
                terms.push(tape.softplus(negz)?); // -log sigmoid(z)
            }
            (mean_scalars(&mut tape, &terms)?, None)
        }
        Method::Npo => {
            let beta = cfg.beta.expect("validated");
            let reference = reference.expect("validated");
            let mut terms = Vec::with_capacity(batch.forget.len());
            for f in &batch.forget {
                let (lp, _) = seq_logprob_var(&mut tape, &params, mcfg, &f.question_tokens, &f.answer_tokens)?;
                let ref_lp = frozen_logp(reference, &f.question_tokens, &f.answer_tokens)?;
                let refc = tape.constant(Tensor::scalar(ref_lp))?;
                let z0 = tape.sub(lp, refc)?;
                let z = tape.scale(z0, beta)?;
                let sp = tape.softplus(z)?; // -log sigmoid(-beta z0)
                terms.push(tape.scale(sp, 2.0 / beta)?);
            }
            (mean_scalars(&mut tape, &terms)?, None)
        }
        Method::Rmu => {
            let (alpha, c, layer) =
                (cfg.rmu_alpha.expect("validated"), cfg.rmu_c.expect("validated"), cfg.rmu_layer.expect("validated"));
            let reference = reference.expect("validated");
            let dir = aux.rmu_direction.ok_or_else(|| Error::InvalidArgument {
                op: "unlearn-loss",
                msg: "rmu requires a unit direction".into(),
            })?;
            let site = CaptureSite::Resid { layer };
            let mut cap = CaptureSet::new();
            cap.insert(site);

            let mut forget_mses = Vec::with_capacity(batch.forget.len());
            for f in &batch.forget {
                let tokens = join(&f.question_tokens, &f.answer_tokens);
                let out = forward_on_tape(&mut tape, &params, mcfg, &tokens, &cap, None)?;
                let h = out.captured[&site];
                let t_len = tokens.len();
                let mut target = vec![0.0; t_len * mcfg.d_model];
                for t in 0..t_len {
                    for (j, &u) in dir.iter().enumerate() {
                        target[t * mcfg.d_model + j] = c * u;
                    }
                }
                let tv = tape.constant(Tensor::new(vec![t_len, mcfg.d_model], target)?)?;
                forget_mses.push(mse(&mut tape, h, tv)?);
            }
            let forget_term = mean_scalars(&mut tape, &forget_mses)?;

            let mut retain_mses = Vec::with_capacity(batch.retain.len());
            for f in &batch.retain {
                let tokens = join(&f.question_tokens, &f.answer_tokens);
                let out = forward_on_tape(&mut tape, &params, mcfg, &tokens, &cap, None)?;
                let h = out.captured[&site];
                let anchor = frozen_resid(reference, &tokens, layer)?;
                let av = tape.constant(anchor)?;
                retain_mses.push(mse(&mut tape, h, av)?);
            }
            let retain_mse = mean_scalars(&mut tape, &retain_mses)?;
            let scaled = tape.scale(retain_mse, alpha)?;
            // RMU's own retain anchor replaces the NLL retain term.
            let total_unlearn = forget_term;
            return finish_loss(tape, params, total_unlearn, scaled, None, cfg, batch);
        }
        Method::Ssiuu => {
            let lambda = cfg.lambda.expect("validated");
            let mut lps = Vec::with_capacity(batch.forget.len());
            let mut regs: Vec<Var> = Vec::new();
            match cfg.ssiuu_attr_mode {
                SsiuuAttrMode::Params => {
                    let cache = aux.ssiuu.ok_or_else(|| Error::InvalidArgument {
                        op: "unlearn-loss",
                        msg: "ssiuu requires the per-step attribution cache".into(),
                    })?;
                    if cache.entries.len() != batch.forget.len() {
                        return Err(Error::InvalidArgument {
                            op: "unlearn-loss",
                            msg: "ssiuu cache does not match the forget batch".into(),
                        });
                    }
                    let layout = ParamLayout::of(mcfg);
                    for (f, entry) in batch.forget.iter().zip(&cache.entries) {
                        debug_assert_eq!(f.fact_id, entry.fact_id);
                        let (lp, _) = seq_logprob_var(&mut tape, &params, mcfg, &f.question_tokens, &f.answer_tokens)?;
                        lps.push(lp);
                        if lambda > 0.0 {
                            regs.push(param_reg_term(&mut tape, &params, &layout, entry)?);
                        }
                    }
                }
                SsiuuAttrMode::Activations => {
                    let cache = aux.ssiuu_act.ok_or_else(|| Error::InvalidArgument {
                        op: "unlearn-loss",
                        msg: "ssiuu (activation mode) requires the per-step attribution cache".into(),
                    })?;
                    if cache.entries.len() != batch.forget.len() {
                        return Err(Error::InvalidArgument {
                            op: "unlearn-loss",
                            msg: "ssiuu cache does not match the forget batch".into(),
                        });
                    }
                    let mut cap = CaptureSet::new();
                    for l in 0..mcfg.num_layers {
                        for kind in MODULE_KINDS {
                            cap.insert(CaptureSite::Module { layer: l, kind });
                        }
                    }
                    for (f, entry) in batch.forget.iter().zip(&cache.entries) {
                        debug_assert_eq!(f.fact_id, entry.fact_id);
                        let tokens = join(&f.question_tokens, &f.answer_tokens);
                        let out = forward_on_tape(&mut tape, &params, mcfg, &tokens, &cap, None)?;
                        let targets: Vec<(usize, u32)> = f
                            .answer_tokens
                            .iter()
                            .enumerate()
                            .map(|(t, &tok)| (f.question_tokens.len() - 1 + t, tok))
                            .collect();
                        let ce = tape.cross_entropy(out.logits, &targets)?;
                        lps.push(tape.scale(ce, -(f.answer_tokens.len() as f64))?);
                        if lambda > 0.0 {
                            regs.push(act_reg_term(
                                &mut tape,
                                mcfg,
                                &out.captured,
                                entry,
                                f.question_tokens.len(),
                            )?);
                        }
                    }
                }
            }
            let gd_forget = mean_scalars(&mut tape, &lps)?;
            let reg = if regs.is_empty() {
                tape.constant(Tensor::scalar(0.0))?
            } else {
                let mut acc = regs[0];
                for &r in &regs[1..] {
                    acc = tape.add(acc, r)?;
                }
                // Per-batch application of the full-set regularizer sum,
                // rescaled by the batch fraction.
                let scale = lambda * batch.forget_set_size as f64 / batch.forget.len() as f64;
                tape.scale(acc, scale)?
            };
            return finish_loss(tape, params, gd_forget, retain_term, Some(reg), cfg, batch);
        }
    };

    let reg = reg_term;
    finish_loss(tape, params, unlearn_term, retain_term, reg, cfg, batch)
}

/// L2 norm of the masked parameter-attribution gap for one fact:
/// || mask * (a_prev - theta * g) ||_2 over all parameters.
fn param_reg_term(tape: &mut Tape, params: &ParamVars, layout: &ParamLayout, entry: &SsiuuFactCache) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, name) in layout.names.iter().enumerate() {
        let off = layout.offsets[i];
        let shape = layout.shapes[i].clone();
        let numel: usize = shape.iter().product();
        let mask_slice = &entry.mask[off..off + numel];
        if !mask_slice.iter().any(|&m| m) {
            continue;
        }
        let g = Tensor::new(shape.clone(), entry.grad[off..off + numel].to_vec())?;
        let ap = Tensor::new(shape.clone(), entry.a_prev[off..off + numel].to_vec())?;
        let m = Tensor::new(shape, mask_slice.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
        let gv = tape.constant(g)?;
        let apv = tape.constant(ap)?;
        let mv = tape.constant(m)?;
        let p = params.get(name);
        let a_cur = tape.mul(p, gv)?;
        let diff = tape.sub(apv, a_cur)?;
        let masked = tape.mul(diff, mv)?;
        let sq = tape.mul(masked, masked)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => tape.sqrt(a),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

/// Activation-mode analog over module sites, input-token rows only.
fn act_reg_term(
    tape: &mut Tape,
    mcfg: &crate::model::ModelConfig,
    captured: &BTreeMap<CaptureSite, Var>,
    entry: &SsiuuActFactCache,
    x_len: usize,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut idx = 0;
    for l in 0..mcfg.num_layers {
        for kind in MODULE_KINDS {
            let (a_prev, grad, mask) = &entry.sites[idx];
            idx += 1;
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let units = kind.units(mcfg);
            let h_full = captured[&CaptureSite::Module { layer: l, kind }];
            let h = tape.slice_rows(h_full, 0, x_len)?;
            let gv = tape.constant(Tensor::new(vec![x_len, units], grad.clone())?)?;
            let apv = tape.constant(Tensor::new(vec![x_len, units], a_prev.clone())?)?;
            let mv = tape.constant(Tensor::new(vec![x_len, units], mask.clone())?)?;
            let a_cur = tape.mul(h, gv)?;
            let diff = tape.sub(apv, a_cur)?;
            let masked = tape.mul(diff, mv)?;
            let sq = tape.mul(masked, masked)?;
            let s = tape.sum(sq)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    match acc {
        Some(a) => tape.sqrt(a),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

fn finish_loss(
    mut tape: Tape,
    params: ParamVars,
    unlearn_term: Var,
    retain_term: Var,
    reg: Option<Var>,
    cfg: &UnlearnConfig,
    _batch: &LossBatch,
) -> Result<(LossParts, Tape, Var, ParamVars)> {
    let mut total = tape.add(unlearn_term, retain_term)?;
    let reg_val = match reg {
        Some(r) => {
            total = tape.add(total, r)?;
            tape.value(r).item()
        }
        None => 0.0,
    };
    let parts = LossParts {
        unlearn: tape.value(unlearn_term).item(),
        retain: tape.value(retain_term).item(),
        reg: reg_val,
        total: tape.value(total).item(),
    };
    let _ = cfg;
    Ok((parts, tape, total, params))
}

/// Loss value only (the finite-difference oracle's forward path).
pub fn compute_loss_value(snap: &ModelSnapshot, cfg: &UnlearnConfig, batch: &LossBatch, aux: &MethodAux) -> Result<LossParts> {
    let (parts, _, _, _) = build_loss(snap, cfg, batch, aux)?;
    Ok(parts)
}

/// Loss value plus flat parameter gradients.
pub fn compute_loss_and_grads(
    snap: &ModelSnapshot,
    cfg: &UnlearnConfig,
    batch: &LossBatch,
    aux: &MethodAux,
    layout: &ParamLayout,
) -> Result<(LossParts, Vec<f64>)> {
    let (parts, mut tape, total, params) = build_loss(snap, cfg, batch, aux)?;
    tape.backward(total)?;
    Ok((parts, params.grads_flat(&tape, layout)))
}

// ── Parameter-level attribution and the negative-index set ──────────

/// theta_i * dP(y|x)/dtheta_i for every parameter, flat in layout order.
pub struct ParamAttribution {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

pub fn param_attribution(snap: &ModelSnapshot, layout: &ParamLayout, x: &[u32], y: &[u32]) -> Result<ParamAttribution> {
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, true)?;
    let (logp, logp_val) = seq_logprob_var(&mut tape, &params, &snap.config, x, y)?;
    let p = tape.exp(logp)?;
    tape.backward(p)?;
    let grad = params.grads_flat(&tape, layout);
    let theta = layout.flatten(snap);
    let values: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t * g).collect();
    Ok(ParamAttribution { values, grad, logp: logp_val })
}

/// I-: indices whose parameter-level attribution is negative.
pub fn negative_index_set(attr: &ParamAttribution) -> Vec<bool> {
    attr.values.iter().map(|&v| v < 0.0).collect()
}

/// Per-step SSIUU cache in the efficiency (parameter x gradient) variant.
/// `prev` maps fact-id to the previous step's attribution values; facts
/// unseen so far anchor to their current (pre-step) attribution.
pub fn build_ssiuu_cache(
    snap: &ModelSnapshot,
    layout: &ParamLayout,
    forget: &[&Fact],
    prev: &BTreeMap<u32, Vec<f64>>,
) -> Result<(SsiuuCache, BTreeMap<u32, Vec<f64>>)> {
    let mut entries = Vec::with_capacity(forget.len());
    let mut next = BTreeMap::new();
    for f in forget {
        let attr = param_attribution(snap, layout, &f.question_tokens, &f.answer_tokens)?;
        let mask = negative_index_set(&attr);
        let a_prev = prev.get(&f.fact_id).cloned().unwrap_or_else(|| attr.values.clone());
        next.insert(f.fact_id, attr.values.clone());
        entries.push(SsiuuFactCache { fact_id: f.fact_id, a_prev, grad: attr.grad, mask });
    }
    Ok((SsiuuCache { entries }, next))
}

/// Activation-mode cache: per-site input-token attributions at theta^t.
pub fn build_ssiuu_act_cache(
    snap: &ModelSnapshot,
    forget: &[&Fact],
    prev: &BTreeMap<u32, Vec<Vec<f64>>>,
) -> Result<(SsiuuActCache, BTreeMap<u32, Vec<Vec<f64>>>)> {
    let mcfg = &snap.config;
    let mut entries = Vec::with_capacity(forget.len());
    let mut next = BTreeMap::new();
    for f in forget {
        let x = &f.question_tokens;
        let y = &f.answer_tokens;
        let mut tape = Tape::new();
        let params = ParamVars::insert(&mut tape, snap, true)?;
        let mut cap = CaptureSet::new();
        for l in 0..mcfg.num_layers {
            for kind in MODULE_KINDS {
                cap.insert(CaptureSite::Module { layer: l, kind });
            }
        }
        let out = forward_on_tape(&mut tape, &params, mcfg, &join(x, y), &cap, None)?;
        let targets: Vec<(usize, u32)> = y.iter().enumerate().map(|(t, &tok)| (x.len() - 1 + t, tok)).collect();
        let ce = tape.cross_entropy(out.logits, &targets)?;
        let logp = tape.scale(ce, -(y.len() as f64))?;
        let p = tape.exp(logp)?;
        tape.backward(p)?;

        let mut sites = Vec::new();
        let mut cur_values: Vec<Vec<f64>> = Vec::new();
        let mut site_idx = 0;
        for l in 0..mcfg.num_layers {
            for kind in MODULE_KINDS {
                let units = kind.units(mcfg);
                let var = out.captured[&CaptureSite::Module { layer: l, kind }];
                let h = tape.value(var).data();
                let g = tape.grad(var).unwrap_or(&[]);
                let mut a_cur = vec![0.0; x.len() * units];
                let mut grad = vec![0.0; x.len() * units];
                for k in 0..x.len() {
                    for u in 0..units {
                        let idx = k * units + u;
                        grad[idx] = if g.is_empty() { 0.0 } else { g[idx] };
                        a_cur[idx] = h[idx] * grad[idx];
                    }
                }
                let mask: Vec<f64> = a_cur.iter().map(|&v| if v < 0.0 { 1.0 } else { 0.0 }).collect();
                let a_prev = prev
                    .get(&f.fact_id)
                    .map(|v| v[site_idx].clone())
                    .unwrap_or_else(|| a_cur.clone());
                cur_values.push(a_cur);
                sites.push((a_prev, grad, mask));
                site_idx += 1;
            }
        }
        next.insert(f.fact_id, cur_values);
        entries.push(SsiuuActFactCache { fact_id: f.fact_id, sites });
    }
    Ok((SsiuuActCache { entries }, next))
}

// ── The unlearning loop ──────────────────────────────────────────────

fn sample_batch<'a>(facts: &[&'a Fact], size: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<&'a Fact> {
    if size == 0 || size >= facts.len() {
        let mut all = facts.to_vec();
        all.sort_by_key(|f| f.fact_id);
        return all;
    }
    let mut idx: Vec<usize> = (0..facts.len()).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<&Fact> = idx[..size].iter().map(|&i| facts[i]).collect();
    chosen.sort_by_key(|f| f.fact_id);
    chosen
}

/// Forget score over all (fact, template) pairs plus the per-fact "still
/// answered" flags. A fact stays in the unlearning batch while any
/// evaluation template still decodes its gold answer; facts already fully
/// forgotten are parked so the objective stops driving their probability
/// toward minus infinity (which only destroys shared structure).
fn forget_state(
    snap: &ModelSnapshot,
    corpus: &CorpusSplits,
    facts: &[&Fact],
    templates: &[usize],
) -> Result<(f64, Vec<bool>)> {
    use rayon::prelude::*;
    let per_fact: Result<Vec<Vec<bool>>> = facts
        .par_iter()
        .map(|f| {
            templates
                .iter()
                .map(|&t| {
                    let x = crate::corpus::render_question(&corpus.vocab, f.subject, f.relation, t);
                    crate::model::teacher_forced_match(snap, &x, &f.answer_tokens)
                })
                .collect()
        })
        .collect();
    let per_fact = per_fact?;
    let total: usize = per_fact.iter().map(|v| v.len()).sum();
    let hits: usize = per_fact.iter().flatten().filter(|&&h| h).count();
    let active: Vec<bool> = per_fact.iter().map(|v| v.iter().any(|&h| h)).collect();
    Ok((hits as f64 / total as f64, active))
}

/// Unit vector in model space for RMU's steering target.
pub fn rmu_unit_direction(d_model: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed::subseed(seed, "rmu-direction"));
    let mut v: Vec<f64> = (0..d_model).map(|_| rand::Rng::sample(&mut rng, StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Runs the configured unlearning method with forget-score early stopping.
/// Evaluation happens before each step, so a vacuous threshold stops at
/// step zero with the snapshot untouched.
pub fn unlearn(snap: &ModelSnapshot, corpus: &CorpusSplits, cfg: &UnlearnConfig) -> Result<(ModelSnapshot, UnlearnTrace)> {
    cfg.validate(snap)?;
    corpus.check_fits(&snap.config)?;
    let forget = corpus.forget();
    let retain = corpus.retain();
    let test = corpus.test();
    if forget.is_empty() {
        return Err(Error::InvalidArgument { op: "unlearn", msg: "empty forget split".into() });
    }

    let tpls = &cfg.eval_templates;
    let fs_pairs = fact_pairs(&corpus.vocab, &forget, tpls);
    let rs_pairs = fact_pairs(&corpus.vocab, &retain, tpls);
    let ts_pairs = fact_pairs(&corpus.vocab, &test, tpls);

    let fs_pre = pairs_accuracy(snap, &fs_pairs)?;
    if fs_pre < 0.9 {
        return Err(Error::InvalidArgument {
            op: "unlearn",
            msg: format!("snapshot does not memorize the corpus: pre-unlearning FS {fs_pre:.3}"),
        });
    }

    let reference = snap.clone();
    let rmu_dir = rmu_unit_direction(snap.config.d_model, cfg.seed);
    let layout = ParamLayout::of(&snap.config);
    let mut working = snap.clone();
    let mut flat = layout.flatten(&working);
    let mut rng = seed::rng(seed::subseed(cfg.seed, "unlearn-batches"));

    let mut ssiuu_prev: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut ssiuu_act_prev: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();

    let mut trace = UnlearnTrace {
        method: cfg.method,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        records: Vec::new(),
        stop_step: 0,
        stop_reason: StopReason::MaxSteps,
        fs_stop: fs_pre,
        rs_retain_stop: 0.0,
        rs_test_stop: 0.0,
        meta: BTreeMap::new(),
    };
    trace.meta.insert("regularizer_batching".into(), "per-batch, scaled by |C_f|/|batch|".into());
    trace.meta.insert("optimizer".into(), "sgd".into());
    trace.meta.insert(
        "forget_batching".into(),
        "facts already wrong on every evaluation template are parked".into(),
    );

    let eval_every = cfg.eval_every.max(1);
    let mut stopped = false;
    for step in 0..=cfg.max_steps {
        // The forget state drives both early stopping and batch selection,
        // so it is evaluated every step; the retain probe follows the eval
        // cadence.
        let (fs, active) = forget_state(&working, corpus, &forget, tpls)?;
        let eval_now = step % eval_every == 0 || step == cfg.max_steps;
        let rs = if eval_now && !rs_pairs.is_empty() {
            Some(pairs_accuracy(&working, &rs_pairs)?)
        } else {
            None
        };
        trace.fs_stop = fs;
        if fs <= cfg.forget_threshold {
            trace.stop_step = step;
            trace.stop_reason = StopReason::ThresholdReached;
            stopped = true;
        }
        if stopped || step == cfg.max_steps {
            trace.stop_step = step;
            if !stopped {
                trace.stop_reason = StopReason::MaxSteps;
            }
            break;
        }

        let active_facts: Vec<&Fact> =
            forget.iter().zip(&active).filter_map(|(f, &a)| a.then_some(*f)).collect();
        let forget_batch = sample_batch(&active_facts, cfg.batch_forget, &mut rng);
        let retain_batch = sample_batch(&retain, cfg.batch_retain, &mut rng);
        let batch = LossBatch { forget: forget_batch, retain: retain_batch, forget_set_size: forget.len() };

        let (ssiuu_cache, ssiuu_act_cache) = if cfg.method == Method::Ssiuu {
            match cfg.ssiuu_attr_mode {
                SsiuuAttrMode::Params => {
                    let (cache, next) = build_ssiuu_cache(&working, &layout, &batch.forget, &ssiuu_prev)?;
                    ssiuu_prev = next;
                    (Some(cache), None)
                }
                SsiuuAttrMode::Activations => {
                    let (cache, next) = build_ssiuu_act_cache(&working, &batch.forget, &ssiuu_act_prev)?;
                    ssiuu_act_prev = next;
                    (None, Some(cache))
                }
            }
        } else {
            (None, None)
        };
        let aux = MethodAux {
            reference: Some(&reference),
            rmu_direction: Some(&rmu_dir),
            ssiuu: ssiuu_cache.as_ref(),
            ssiuu_act: ssiuu_act_cache.as_ref(),
        };

        let step_result = compute_loss_and_grads(&working, cfg, &batch, &aux, &layout);
        let (parts, grads) = match step_result {
            Ok(v) => v,
            Err(Error::NonFinite(w)) => {
                trace.stop_step = step;
                trace.stop_reason = StopReason::Diverged;
                trace.meta.insert("divergence".into(), format!("non-finite value in {w} at step {step}"));
                stopped = true;
                break;
            }
            Err(e) => return Err(e),
        };

        for (p, g) in flat.iter_mut().zip(&grads) {
            *p -= cfg.learning_rate * g;
        }
        layout.write_back(&mut working, &flat);
        working.step += 1;

        trace.records.push(StepRecord {
            step,
            loss_unlearn: parts.unlearn,
            loss_retain: parts.retain,
            loss_reg: parts.reg,
            reg_magnitude: parts.reg,
            fs: Some(fs),
            rs,
        });
    }
    let _ = stopped;

    trace.fs_stop = pairs_accuracy(&working, &fs_pairs)?;
    trace.rs_retain_stop = if rs_pairs.is_empty() { f64::NAN } else { pairs_accuracy(&working, &rs_pairs)? };
    trace.rs_test_stop = if ts_pairs.is_empty() { f64::NAN } else { pairs_accuracy(&working, &ts_pairs)? };
    Ok((working, trace))
}

/// High learning rates destroy retained knowledge, so the search walks the
/// candidate rates from the lowest up and keeps the first run that reaches
/// the forget threshold. Returns the converged run, or the last attempt
/// when none converge.
pub fn unlearn_with_lr_search(
    snap: &ModelSnapshot,
    corpus: &CorpusSplits,
    base: &UnlearnConfig,
    rates: &[f64],
) -> Result<(ModelSnapshot, UnlearnTrace)> {
    if rates.is_empty() {
        return Err(Error::InvalidArgument { op: "unlearn", msg: "empty learning-rate list".into() });
    }
    let mut sorted = rates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut last = None;
    for lr in sorted {
        let cfg = UnlearnConfig { learning_rate: lr, ..base.clone() };
        let (model, trace) = unlearn(snap, corpus, &cfg)?;
        if trace.stop_reason == StopReason::ThresholdReached {
            return Ok((model, trace));
        }
        last = Some((model, trace));
    }
    Ok(last.expect("at least one rate attempted"))
}

/// Trace rows as line-delimited JSON.
pub fn trace_jsonl(trace: &UnlearnTrace) -> Result<String> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&serde_json::json!({
        "method": trace.method,
        "learning_rate": trace.learning_rate,
        "seed": trace.seed,
        "stop_step": trace.stop_step,
        "stop_reason": trace.stop_reason,
        "fs_stop": trace.fs_stop,
        "rs_retain_stop": trace.rs_retain_stop,
        "rs_test_stop": trace.rs_test_stop,
        "meta": trace.meta,
    }))?);
    out.push('\n');
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
