//! Finite-difference checks for all six unlearning objectives on
//! micro-models, including the SSIUU stop-gradient contract (the cached
//! previous-step attributions and gradient factors are data, and the
//! oracle holds them fixed the same way the loss does).

mod common;

use common::micro::{check_method_grad, micro_cfg, micro_facts};
use unlab_core::corpus::Fact;
use unlab_core::model::{ModelSnapshot, ParamLayout};
use unlab_core::unlearn::{
    compute_loss_and_grads, compute_loss_value, LossBatch, Method, MethodAux, SsiuuAttrMode,
    UnlearnConfig,
};

#[test]
fn ga_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_method_grad(Method::Ga, SsiuuAttrMode::Params, seed);
    }
}

#[test]
fn gd_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_method_grad(Method::Gd, SsiuuAttrMode::Params, seed);
    }
}

#[test]
fn dpo_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_method_grad(Method::Dpo, SsiuuAttrMode::Params, seed);
    }
}

#[test]
fn npo_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_method_grad(Method::Npo, SsiuuAttrMode::Params, seed);
    }
}

#[test]
fn rmu_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_method_grad(Method::Rmu, SsiuuAttrMode::Params, seed);
    }
}

#[test]
fn ssiuu_gradients_match_finite_differences_in_both_modes() {
    for seed in 0..3 {
        check_method_grad(Method::Ssiuu, SsiuuAttrMode::Params, seed);
        check_method_grad(Method::Ssiuu, SsiuuAttrMode::Activations, seed);
    }
}

#[test]
fn ga_single_step_decreases_mean_log_prob() {
    // One small GA step strictly decreases mean log P(y|x) on the batch.
    let snap = ModelSnapshot::init(micro_cfg(11)).unwrap();
    let layout = ParamLayout::of(&snap.config);
    let (forget, _) = micro_facts(11);
    let fr: Vec<&Fact> = forget.iter().collect();
    let cfg = UnlearnConfig::new(Method::Ga, 0.05, 0);
    let batch = LossBatch { forget: fr.clone(), retain: vec![], forget_set_size: fr.len() };
    let (parts0, grads) = compute_loss_and_grads(&snap, &cfg, &batch, &MethodAux::none(), &layout).unwrap();

    let mut flat = layout.flatten(&snap);
    for (p, g) in flat.iter_mut().zip(&grads) {
        *p -= 0.05 * g;
    }
    let mut stepped = snap.clone();
    layout.write_back(&mut stepped, &flat);
    let b2 = LossBatch { forget: fr, retain: vec![], forget_set_size: 2 };
    let parts1 = compute_loss_value(&stepped, &cfg, &b2, &MethodAux::none()).unwrap();
    assert!(
        parts1.unlearn < parts0.unlearn,
        "mean log P should drop: {} -> {}",
        parts0.unlearn,
        parts1.unlearn
    );
}

#[test]
fn dpo_loss_drops_when_rejection_probability_rises() {
    // Directional check: one step along the negative loss gradient raises
    // the rejection likelihood and lowers the loss.
    let snap = ModelSnapshot::init(micro_cfg(21)).unwrap();
    let layout = ParamLayout::of(&snap.config);
    let (forget, _) = micro_facts(21);
    let fr: Vec<&Fact> = forget.iter().collect();
    let mut cfg = UnlearnConfig::new(Method::Dpo, 0.05, 0);
    cfg.beta = Some(0.4);
    let reference = snap.clone();
    let aux = MethodAux { reference: Some(&reference), ..MethodAux::none() };
    let batch = LossBatch { forget: fr.clone(), retain: vec![], forget_set_size: fr.len() };
    let (parts0, grads) = compute_loss_and_grads(&snap, &cfg, &batch, &aux, &layout).unwrap();

    let mut flat = layout.flatten(&snap);
    for (p, g) in flat.iter_mut().zip(&grads) {
        *p -= 0.05 * g;
    }
    let mut stepped = snap.clone();
    layout.write_back(&mut stepped, &flat);
    let b2 = LossBatch { forget: fr.clone(), retain: vec![], forget_set_size: fr.len() };
    let parts1 = compute_loss_value(&stepped, &cfg, &b2, &aux).unwrap();
    assert!(parts1.unlearn < parts0.unlearn);

    // And the rejection sequence did get more likely under the policy.
    let rej = unlab_core::corpus::REJECTION_TOKENS.to_vec();
    let f = fr[0];
    let (_, lp_before) = unlab_core::model::sequence_prob(&snap, &f.question_tokens, &rej).unwrap();
    let (_, lp_after) = unlab_core::model::sequence_prob(&stepped, &f.question_tokens, &rej).unwrap();
    assert!(lp_after > lp_before, "{lp_before} -> {lp_after}");
}
