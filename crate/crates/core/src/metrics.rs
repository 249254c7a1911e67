//! Forgetting/Retention/Utility scores and the logit-lens
//! over-unlearning probe.
//!
//! FS is exact-match answer accuracy on the forget split, RS on the
//! held-out test split, US on the utility split. The lens projects the
//! post-block residual stream at the last question position through the
//! final layer norm and the (tied) embedding, and scores the golden answer
//! against a seeded distractor of the same relation.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{fact_pairs, CorpusSplits, Fact};
use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, pairs_accuracy, CaptureSet, CaptureSite, ModelSnapshot, ParamVars,
};
use crate::seed;
use crate::tensor::Tape;

const LN_EPS: f64 = 1e-5;

/// Note attached to exported lens profiles: which intermediate
/// representation the lens reads.
pub const LENS_SITE_NOTE: &str = "resid-post-block+final-ln";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Forgetting score: accuracy on the forget split (lower is better
    /// post-unlearning). Absent when the split is empty.
    pub fs: Option<f64>,
    /// Retention score: accuracy on the held-out test split.
    pub rs: Option<f64>,
    /// Utility score: accuracy on the utility split.
    pub us: Option<f64>,
    pub forget_size: usize,
    pub test_size: usize,
    pub utility_size: usize,
    pub snapshot_step: u64,
}

/// FS/RS/US for one snapshot. Empty splits report an absent score and do
/// not affect the others.
pub fn score(snap: &ModelSnapshot, corpus: &CorpusSplits, eval_templates: &[usize]) -> Result<ScoreReport> {
    let sc = |facts: &[&Fact]| -> Result<Option<f64>> {
        if facts.is_empty() {
            return Ok(None);
        }
        let pairs = fact_pairs(&corpus.vocab, facts, eval_templates);
        Ok(Some(pairs_accuracy(snap, &pairs)?))
    };
    let forget = corpus.forget();
    let test = corpus.test();
    let utility = corpus.utility();
    Ok(ScoreReport {
        fs: sc(&forget)?,
        rs: sc(&test)?,
        us: sc(&utility)?,
        forget_size: forget.len(),
        test_size: test.len(),
        utility_size: utility.len(),
        snapshot_step: snap.step,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitLensProfile {
    /// Golden-vs-distractor binary accuracy per layer, ordered by depth.
    pub per_layer: Vec<f64>,
    pub chance_level: f64,
    pub distractor_seed: u64,
    pub meta: BTreeMap<String, String>,
}

/// Residual-stream lens readout: per layer, does the golden answer's first
/// token outscore the distractor's first token when the post-block
/// representation at the last question position is projected through the
/// final layer norm and the unembedding?
pub fn logit_lens(snap: &ModelSnapshot, fact: &Fact, distractor_object: u32, corpus: &CorpusSplits) -> Result<Vec<bool>> {
    if distractor_object == fact.object {
        return Err(Error::InvalidArgument {
            op: "logit-lens",
            msg: "distractor equals the golden answer".into(),
        });
    }
    let cfg = &snap.config;
    let mut tape = Tape::new();
    let params = ParamVars::insert(&mut tape, snap, false)?;
    let mut cap = CaptureSet::new();
    for l in 0..cfg.num_layers {
        cap.insert(CaptureSite::Resid { layer: l });
    }
    let mut tokens = fact.question_tokens.clone();
    tokens.extend_from_slice(&fact.answer_tokens);
    let out = forward_on_tape(&mut tape, &params, cfg, &tokens, &cap, None)?;
    let _ = out.logits;

    let pos = fact.question_tokens.len() - 1;
    let gold_tok = corpus.vocab.answer(fact.object) as usize;
    let distr_tok = corpus.vocab.answer(distractor_object) as usize;

    let gamma = snap.param("final.g").data();
    let beta = snap.param("final.b").data();
    let unembed = if cfg.tie_embeddings { snap.param("embed") } else { snap.param("unembed") };
    let d = cfg.d_model;

    let mut decisions = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let h = tape.value(out.captured[&CaptureSite::Resid { layer: l }]);
        let row = &h.data()[pos * d..(pos + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        let project = |tok: usize| -> f64 {
            let e = &unembed.data()[tok * d..(tok + 1) * d];
            let mut s = 0.0;
            for j in 0..d {
                let normed = (row[j] - mean) * istd * gamma[j] + beta[j];
                s += normed * e[j];
            }
            s
        };
        decisions.push(project(gold_tok) > project(distr_tok));
    }
    Ok(decisions)
}

/// Seeded distractor: uniform over answer objects of the fact's relation,
/// excluding the gold answer.
pub fn sample_distractor(corpus: &CorpusSplits, fact: &Fact, rng: &mut rand_chacha::ChaCha8Rng) -> Result<u32> {
    let mut candidates: Vec<u32> = corpus
        .facts
        .iter()
        .filter(|f| f.relation == fact.relation && f.object != fact.object)
        .map(|f| f.object)
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::Corpus(format!("relation {} offers no distractor", fact.relation)));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Mean lens decision accuracy per layer over a fact set, one seeded
/// distractor per fact.
pub fn lens_profile(
    snap: &ModelSnapshot,
    corpus: &CorpusSplits,
    facts: &[&Fact],
    distractor_seed: u64,
) -> Result<LogitLensProfile> {
    if facts.is_empty() {
        return Err(Error::InvalidArgument { op: "lens-profile", msg: "empty fact set".into() });
    }
    let mut sorted: Vec<&Fact> = facts.to_vec();
    sorted.sort_by_key(|f| f.fact_id);
    let mut rng = seed::rng(seed::subseed(distractor_seed, "distractors"));
    let with_distractors: Result<Vec<(&Fact, u32)>> = sorted
        .iter()
        .map(|f| Ok((*f, sample_distractor(corpus, f, &mut rng)?)))
        .collect();
    let with_distractors = with_distractors?;

    let per_fact: Result<Vec<Vec<bool>>> = with_distractors
        .par_iter()
        .map(|(f, d)| logit_lens(snap, f, *d, corpus))
        .collect();
    let per_fact = per_fact?;

    let layers = snap.config.num_layers;
    let mut per_layer = vec![0.0; layers];
    for row in &per_fact {
        for (l, &hit) in row.iter().enumerate() {
            if hit {
                per_layer[l] += 1.0;
            }
        }
    }
    for v in &mut per_layer {
        *v /= per_fact.len() as f64;
    }
    let mut meta = BTreeMap::new();
    meta.insert("site".into(), LENS_SITE_NOTE.into());
    Ok(LogitLensProfile { per_layer, chance_level: 0.5, distractor_seed, meta })
}

/// The full model's own two-way comparison between the golden and
/// distractor first answer tokens, used to cross-check the final lens layer.
pub fn model_two_way_decision(snap: &ModelSnapshot, fact: &Fact, distractor_object: u32, corpus: &CorpusSplits) -> Result<bool> {
    let logits = crate::model::eval_logits(snap, &fact.question_tokens)?;
    let v = snap.config.vocab_size;
    let pos = fact.question_tokens.len() - 1;
    let row = &logits.data()[pos * v..(pos + 1) * v];
    let gold = corpus.vocab.answer(fact.object) as usize;
    let distr = corpus.vocab.answer(distractor_object) as usize;
    Ok(row[gold] > row[distr])
}

pub fn lens_csv(profile: &LogitLensProfile) -> String {
    let mut out = String::new();
    for (k, v) in &profile.meta {
        out.push_str(&format!("# {k}: {v}\n"));
    }
    out.push_str(&format!("# chance_level: {}\n", profile.chance_level));
    out.push_str("layer,accuracy\n");
    for (l, acc) in profile.per_layer.iter().enumerate() {
        out.push_str(&format!("{l},{acc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GenerateConfig};
    use crate::model::ModelConfig;

    fn world() -> (ModelSnapshot, CorpusSplits) {
        let corpus = generate(&GenerateConfig {
            num_entities: 12,
            num_relations: 2,
            forget_fraction: 0.2,
            retain_fraction: 0.2,
            test_fraction: 0.5,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 8,
            init_seed: 5,
            tie_embeddings: true,
        };
        (ModelSnapshot::init(cfg).unwrap(), corpus)
    }

    #[test]
    fn score_reports_absent_for_empty_utility_split() {
        let (snap, corpus) = world();
        // This config's fractions leave a utility remainder; drop it by hand.
        let mut c2 = corpus.clone();
        c2.facts.retain(|f| f.split != crate::corpus::Split::Utility);
        let r = score(&snap, &c2, &[0, 1]).unwrap();
        assert!(r.us.is_none());
        assert!(r.fs.is_some());
        assert!(r.rs.is_some());
    }

    #[test]
    fn lens_rejects_gold_distractor() {
        let (snap, corpus) = world();
        let f = corpus.forget()[0];
        assert!(logit_lens(&snap, f, f.object, &corpus).is_err());
    }

    #[test]
    fn lens_profile_is_seed_reproducible_and_bounded() {
        let (snap, corpus) = world();
        let facts = corpus.forget();
        let a = lens_profile(&snap, &corpus, &facts, 9).unwrap();
        let b = lens_profile(&snap, &corpus, &facts, 9).unwrap();
        assert_eq!(a.per_layer, b.per_layer);
        assert_eq!(a.per_layer.len(), snap.config.num_layers);
        assert!(a.per_layer.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.chance_level, 0.5);
    }

    #[test]
    fn single_fact_profile_entries_are_binary() {
        let (snap, corpus) = world();
        let facts = vec![corpus.forget()[0]];
        let p = lens_profile(&snap, &corpus, &facts, 2).unwrap();
        assert!(p.per_layer.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn final_layer_lens_agrees_with_model_comparison() {
        let (snap, corpus) = world();
        let mut rng = seed::rng(seed::subseed(4, "distractors"));
        let mut total = 0usize;
        let mut agree = 0usize;
        for f in corpus.facts.iter().take(30) {
            let d = sample_distractor(&corpus, f, &mut rng).unwrap();
            let lens = logit_lens(&snap, f, d, &corpus).unwrap();
            let model = model_two_way_decision(&snap, f, d, &corpus).unwrap();
            total += 1;
            if lens[snap.config.num_layers - 1] == model {
                agree += 1;
            }
        }
        assert_eq!(agree, total, "tied-embedding final lens must equal the model head");
    }

    #[test]
    fn distractor_shares_relation_and_differs_from_gold() {
        let (_, corpus) = world();
        let mut rng = seed::rng(1);
        for f in corpus.facts.iter().take(20) {
            let d = sample_distractor(&corpus, f, &mut rng).unwrap();
            assert_ne!(d, f.object);
            assert!(corpus.facts.iter().any(|g| g.relation == f.relation && g.object == d));
        }
    }
}
