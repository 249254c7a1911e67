//! Shared finite-difference oracles for gradient checks.
//!
//! These are independent of the tape's backward pass: they only call the
//! forward evaluation of whatever function is under test.

#![allow(dead_code)]

/// Central finite difference d f / d x_i for every coordinate of `x`.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = eps * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative-error agreement with an absolute floor near zero.
pub fn grads_close(analytic: &[f64], numeric: &[f64], rel: f64, abs_floor: f64) -> bool {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).all(|(&a, &n)| {
        let diff = (a - n).abs();
        diff <= abs_floor || diff <= rel * a.abs().max(n.abs())
    })
}

/// Largest relative error over all coordinates (with the same floor),
/// handy for diagnostics when a check fails.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(1e-300)
            }
        })
        .fold(0.0, f64::max)
}

/// Micro-model finite-difference harness shared by the loss gradient
/// checks and the acceptance suite.
pub mod micro {
    use std::collections::BTreeMap;

    use rand::Rng;
    use unlab_core::corpus::{Fact, Split};
    use unlab_core::model::{ModelConfig, ModelSnapshot, ParamLayout};
    use unlab_core::unlearn::{
        build_ssiuu_act_cache, build_ssiuu_cache, compute_loss_and_grads, compute_loss_value,
        rmu_unit_direction, LossBatch, Method, MethodAux, SsiuuAttrMode, UnlearnConfig,
    };

    use super::{central_diff_grad, grads_close, max_rel_err};

    pub const REL: f64 = 1e-4;
    pub const ABS_FLOOR: f64 = 1e-8;

    pub fn micro_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: 2,
            num_heads: 1,
            d_ff: 2,
            vocab_size: 6,
            max_seq_len: 6,
            init_seed: seed,
            tie_embeddings: true,
        }
    }

    /// Two forget and two retain facts with seed-dependent token content.
    pub fn micro_facts(seed: u64) -> (Vec<Fact>, Vec<Fact>) {
        let mut rng = unlab_core::seed::rng(seed ^ 0x5eed);
        let mut tok = |lo: u32| rng.random_range(lo..6u32);
        let mk = |id: u32, x: Vec<u32>, y: Vec<u32>, split: Split| Fact {
            fact_id: id,
            subject: 0,
            relation: 0,
            object: 0,
            question_tokens: x,
            answer_tokens: y,
            split,
        };
        let forget = vec![
            mk(0, vec![0, tok(1), tok(1)], vec![tok(1), tok(1)], Split::Forget),
            mk(1, vec![0, tok(1), tok(1)], vec![tok(1), tok(1)], Split::Forget),
        ];
        let retain = vec![
            mk(2, vec![0, tok(1), tok(1)], vec![tok(1), tok(1)], Split::Retain),
            mk(3, vec![0, tok(1), tok(1)], vec![tok(1), tok(1)], Split::Retain),
        ];
        (forget, retain)
    }

    /// Checks one method's analytic gradient against central differences
    /// on one seeded micro-model; returns the max relative error observed.
    /// Panics on disagreement beyond the tolerance.
    pub fn check_method_grad(method: Method, mode: SsiuuAttrMode, seed: u64) -> f64 {
        let snap = ModelSnapshot::init(micro_cfg(seed)).unwrap();
        let layout = ParamLayout::of(&snap.config);
        assert!(layout.total <= 64, "micro model has {} params", layout.total);

        let reference = ModelSnapshot::init(micro_cfg(seed + 1000)).unwrap();
        let rmu_dir = rmu_unit_direction(snap.config.d_model, seed);
        let (forget, retain) = micro_facts(seed);
        let fr: Vec<&Fact> = forget.iter().collect();
        let rr: Vec<&Fact> = retain.iter().collect();

        let mut cfg = UnlearnConfig::new(method, 0.05, seed);
        cfg.ssiuu_attr_mode = mode;
        if method == Method::Ssiuu {
            cfg.lambda = Some(0.3);
        }
        if method == Method::Rmu {
            cfg.rmu_layer = Some(0);
            cfg.rmu_alpha = Some(1.5);
            cfg.rmu_c = Some(0.8);
        }

        let (ssiuu_cache, ssiuu_act_cache) = if method == Method::Ssiuu {
            match mode {
                SsiuuAttrMode::Params => {
                    let (_, next) = build_ssiuu_cache(&snap, &layout, &fr, &BTreeMap::new()).unwrap();
                    let shifted: BTreeMap<u32, Vec<f64>> = next
                        .into_iter()
                        .map(|(k, v)| (k, v.into_iter().map(|x| x + 0.03).collect()))
                        .collect();
                    let (cache, _) = build_ssiuu_cache(&snap, &layout, &fr, &shifted).unwrap();
                    (Some(cache), None)
                }
                SsiuuAttrMode::Activations => {
                    let (_, next) = build_ssiuu_act_cache(&snap, &fr, &BTreeMap::new()).unwrap();
                    let shifted: BTreeMap<u32, Vec<Vec<f64>>> = next
                        .into_iter()
                        .map(|(k, sites)| {
                            (k, sites.into_iter().map(|s| s.into_iter().map(|x| x + 0.02).collect()).collect())
                        })
                        .collect();
                    let (cache, _) = build_ssiuu_act_cache(&snap, &fr, &shifted).unwrap();
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
        let batch = LossBatch { forget: fr.clone(), retain: rr.clone(), forget_set_size: fr.len() };

        let (_, analytic) = compute_loss_and_grads(&snap, &cfg, &batch, &aux, &layout).unwrap();

        let theta0 = layout.flatten(&snap);
        let mut eval = |p: &[f64]| -> f64 {
            let mut s = snap.clone();
            layout.write_back(&mut s, p);
            let b = LossBatch { forget: fr.clone(), retain: rr.clone(), forget_set_size: fr.len() };
            compute_loss_value(&s, &cfg, &b, &aux).unwrap().total
        };
        let numeric = central_diff_grad(&mut eval, &theta0, 1e-5);
        let err = max_rel_err(&analytic, &numeric, ABS_FLOOR);
        assert!(
            grads_close(&analytic, &numeric, REL, ABS_FLOOR),
            "{method} (mode {mode:?}, seed {seed}) grad mismatch: rel err {err}"
        );
        err
    }
}
