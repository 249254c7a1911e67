//! Retraining attacks on unlearned models: harmful (a fraction p of the
//! forget set) and benign (instruction-like data unrelated to the forget
//! set), with learning-rate sweeps and multi-seed aggregation.
//!
//! The reported number is the maximum forget score observed during
//! retraining, evaluated only on facts disjoint from the attack training
//! data. The max is taken over steps and the learning-rate grid per seed,
//! then averaged over seeds.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{attack_subset, benign_fact_overlap, fact_pairs, BenignCorpus, CorpusSplits, Fact};
use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, pairs_accuracy, teacher_forced_match, CaptureSet, ModelSnapshot, ParamLayout,
    ParamVars,
};
use crate::seed;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    /// Retrain on ceil(p * eligible) forget facts; evaluate on the rest.
    Harmful { p: f64 },
    /// Retrain on `size` benign sequences; evaluate on all eligible facts.
    Benign { size: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub learning_rates: Vec<f64>,
    pub steps: usize,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    /// Minibatch size for benign retraining (harmful runs train on the
    /// full attack set every step).
    pub batch_size: usize,
    /// Question templates for FS evaluation.
    pub eval_templates: Vec<usize>,
}

impl AttackConfig {
    /// Learning rates in ascending order: ties in the per-seed maximum
    /// resolve toward the gentlest attack, and within a run toward the
    /// earliest step, so the reported post-attack model is the least
    /// perturbed one achieving the maximum.
    pub fn sorted_rates(&self) -> Vec<f64> {
        let mut r = self.learning_rates.clone();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        r
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Harmful { p } => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Config(format!("harmful attack requires 0 < p < 1, got {p}")));
                }
            }
            AttackKind::Benign { size } => {
                if size == 0 {
                    return Err(Error::Config("benign attack requires benign-size >= 1".into()));
                }
            }
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::Config("attack learning rates must be positive and nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("attack needs at least one seed".into()));
        }
        if self.eval_templates.is_empty() {
            return Err(Error::Config("attack needs evaluation templates".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRun {
    pub seed: u64,
    pub lr: f64,
    /// (step, FS on the evaluation facts), sampled every eval interval
    /// including step 0.
    pub trajectory: Vec<(usize, f64)>,
    pub max_fs: f64,
    pub step_at_max: usize,
    /// Test-split retention at the snapshot achieving the maximum.
    pub rs_at_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub eligible: usize,
    pub attack_train_size: usize,
    pub eval_size: usize,
    /// Attack-train / evaluation disjointness, asserted per run.
    pub disjoint: bool,
    pub runs: Vec<AttackRun>,
    /// Per seed: max over the learning-rate grid and steps.
    pub per_seed_max: Vec<(u64, f64)>,
    pub mean_max_fs: f64,
    pub mean_rs_at_max: f64,
}

/// Post-attack snapshots at each seed's maximum-FS point, for the
/// attribution-correlation analysis.
pub struct AttackOutcome {
    pub report: AttackReport,
    pub post_snapshots: Vec<(u64, ModelSnapshot)>,
}

/// Forget facts the unlearned model answers incorrectly on every
/// evaluation template (instances answered correctly by chance are
/// excluded from attack pools).
pub fn eligible_forget_facts<'a>(
    snap: &ModelSnapshot,
    corpus: &'a CorpusSplits,
    eval_templates: &[usize],
) -> Result<Vec<&'a Fact>> {
    let forget = corpus.forget();
    let flags: Result<Vec<bool>> = forget
        .par_iter()
        .map(|f| {
            for &t in eval_templates {
                let x = crate::corpus::render_question(&corpus.vocab, f.subject, f.relation, t);
                if teacher_forced_match(snap, &x, &f.answer_tokens)? {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect();
    Ok(forget.into_iter().zip(flags?).filter_map(|(f, keep)| keep.then_some(f)).collect())
}

/// One SGD retraining run, tracking the maximum FS over the trajectory.
/// `train` yields the (x, y) pairs to fit at each step.
fn retrain_run(
    unlearned: &ModelSnapshot,
    eval_pairs: &[(Vec<u32>, Vec<u32>)],
    test_pairs: &[(Vec<u32>, Vec<u32>)],
    train_pool: &[(Vec<u32>, Vec<u32>)],
    batch_size: usize,
    lr: f64,
    steps: usize,
    eval_every: usize,
    run_seed: u64,
) -> Result<(AttackRun, ModelSnapshot)> {
    let layout = ParamLayout::of(&unlearned.config);
    let mut working = unlearned.clone();
    let mut flat = layout.flatten(&working);
    let mut rng = seed::rng(run_seed);
    let eval_every = eval_every.max(1);
    let batch_size = if batch_size == 0 { train_pool.len() } else { batch_size.min(train_pool.len()) };

    let mut order: Vec<usize> = (0..train_pool.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut trajectory = Vec::new();
    let mut max_fs = f64::NEG_INFINITY;
    let mut step_at_max = 0usize;
    let mut best_snapshot = working.clone();

    for step in 0..=steps {
        if step % eval_every == 0 || step == steps {
            let fs = pairs_accuracy(&working, eval_pairs)?;
            trajectory.push((step, fs));
            if fs > max_fs {
                max_fs = fs;
                step_at_max = step;
                best_snapshot = working.clone();
            }
        }
        if step == steps {
            break;
        }
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&(Vec<u32>, Vec<u32>)> =
            order[cursor..cursor + batch_size].iter().map(|&i| &train_pool[i]).collect();
        cursor += batch_size;

        let mut tape = Tape::new();
        let params = ParamVars::insert(&mut tape, &working, true)?;
        let mut losses = Vec::with_capacity(batch.len());
        for (x, y) in &batch {
            let mut tokens = x.clone();
            tokens.extend_from_slice(y);
            let out = forward_on_tape(&mut tape, &params, &working.config, &tokens, &CaptureSet::new(), None)?;
            let targets: Vec<(usize, u32)> =
                y.iter().enumerate().map(|(t, &tok)| (x.len() - 1 + t, tok)).collect();
            losses.push(tape.cross_entropy(out.logits, &targets)?);
        }
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = tape.add(acc, l)?;
        }
        let loss = tape.scale(acc, 1.0 / losses.len() as f64)?;
        tape.backward(loss)?;
        let grads = params.grads_flat(&tape, &layout);
        for (p, g) in flat.iter_mut().zip(&grads) {
            *p -= lr * g;
        }
        layout.write_back(&mut working, &flat);
        working.step += 1;
    }

    let rs_at_max = if test_pairs.is_empty() { f64::NAN } else { pairs_accuracy(&best_snapshot, test_pairs)? };
    Ok((AttackRun { seed: run_seed, lr, trajectory, max_fs, step_at_max, rs_at_max }, best_snapshot))
}

struct RunPlan {
    seed_index: usize,
    seed: u64,
    lr: f64,
    train_pool: Vec<(Vec<u32>, Vec<u32>)>,
    eval_pairs: Vec<(Vec<u32>, Vec<u32>)>,
    eval_ids: Vec<u32>,
    train_ids: Vec<u32>,
}

fn aggregate(
    kind: AttackKind,
    cfg: &AttackConfig,
    unlearned: &ModelSnapshot,
    plans: Vec<RunPlan>,
    test_pairs: &[(Vec<u32>, Vec<u32>)],
    eligible: usize,
    attack_train_size: usize,
    eval_size: usize,
) -> Result<AttackOutcome> {
    // Disjointness of attack-train facts and FS-evaluation facts, checked
    // for every planned run.
    for plan in &plans {
        for id in &plan.train_ids {
            if plan.eval_ids.contains(id) {
                return Err(Error::Pipeline(format!("attack fact {id} leaked into the evaluation set")));
            }
        }
    }

    let runs_and_best: Result<Vec<(AttackRun, ModelSnapshot)>> = plans
        .par_iter()
        .map(|plan| {
            let run_seed = seed::subseed_indexed(plan.seed, "attack-run", (plan.lr.to_bits() as u64).rotate_left(7));
            retrain_run(
                unlearned,
                &plan.eval_pairs,
                test_pairs,
                &plan.train_pool,
                cfg.batch_size,
                plan.lr,
                cfg.steps,
                cfg.eval_every,
                run_seed,
            )
        })
        .collect();
    let runs_and_best = runs_and_best?;
    let mut runs: Vec<AttackRun> = runs_and_best.iter().map(|(r, _)| r.clone()).collect();
    // Keep runs in (seed, lr) plan order for deterministic reports.
    let mut per_seed_max: Vec<(u64, f64)> = Vec::new();
    let mut per_seed_best_plan: Vec<usize> = Vec::new();
    for (si, &seedv) in cfg.seeds.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, (plan, run)) in plans.iter().zip(&runs).enumerate() {
            if plan.seed_index == si && run.max_fs > best {
                best = run.max_fs;
                best_idx = i;
            }
        }
        per_seed_max.push((seedv, best));
        per_seed_best_plan.push(best_idx);
    }
    let mean_max_fs = per_seed_max.iter().map(|(_, v)| v).sum::<f64>() / per_seed_max.len() as f64;
    let mean_rs_at_max = per_seed_best_plan.iter().map(|&i| runs[i].rs_at_max).sum::<f64>()
        / per_seed_best_plan.len() as f64;

    let best_snapshots: Vec<(u64, ModelSnapshot)> = per_seed_best_plan
        .iter()
        .map(|&i| (plans[i].seed, runs_and_best[i].1.clone()))
        .collect();

    for run in &mut runs {
        if run.trajectory.is_empty() {
            return Err(Error::Pipeline("attack run recorded no evaluations".into()));
        }
    }

    Ok(AttackOutcome {
        report: AttackReport {
            kind,
            eligible,
            attack_train_size,
            eval_size,
            disjoint: true,
            runs,
            per_seed_max,
            mean_max_fs,
            mean_rs_at_max,
        },
        post_snapshots: best_snapshots,
    })
}

/// Harmful retraining attack: fine-tune on a seeded fraction-p subset of
/// the falsely-answered forget facts and report recovered FS on the
/// disjoint remainder.
pub fn harmful_attack(
    unlearned: &ModelSnapshot,
    corpus: &CorpusSplits,
    cfg: &AttackConfig,
    fs_threshold: f64,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let p = match cfg.kind {
        AttackKind::Harmful { p } => p,
        _ => return Err(Error::Config("harmful_attack requires a harmful config".into())),
    };
    let forget_pairs = fact_pairs(&corpus.vocab, &corpus.forget(), &cfg.eval_templates);
    let fs_pre = pairs_accuracy(unlearned, &forget_pairs)?;
    if fs_pre > fs_threshold + 1e-12 {
        return Err(Error::InvalidArgument {
            op: "harmful-attack",
            msg: format!("snapshot FS {fs_pre:.3} above the unlearning threshold {fs_threshold}"),
        });
    }
    let eligible = eligible_forget_facts(unlearned, corpus, &cfg.eval_templates)?;
    let n_eligible = eligible.len();

    let mut plans = Vec::new();
    let mut attack_train_size = 0;
    let mut eval_size = 0;
    for (si, &seedv) in cfg.seeds.iter().enumerate() {
        let (attack_facts, heldout) = attack_subset(&eligible, p, seedv)?;
        attack_train_size = attack_facts.len();
        eval_size = heldout.len();
        let attack_refs: Vec<&Fact> = attack_facts.iter().collect();
        let heldout_refs: Vec<&Fact> = heldout.iter().collect();
        let train_pool = fact_pairs(&corpus.vocab, &attack_refs, &[0]);
        let eval_pairs = fact_pairs(&corpus.vocab, &heldout_refs, &cfg.eval_templates);
        for &lr in &cfg.sorted_rates() {
            plans.push(RunPlan {
                seed_index: si,
                seed: seedv,
                lr,
                train_pool: train_pool.clone(),
                eval_pairs: eval_pairs.clone(),
                eval_ids: heldout.iter().map(|f| f.fact_id).collect(),
                train_ids: attack_facts.iter().map(|f| f.fact_id).collect(),
            });
        }
    }
    let test_pairs = fact_pairs(&corpus.vocab, &corpus.test(), &cfg.eval_templates);
    aggregate(cfg.kind, cfg, unlearned, plans, &test_pairs, n_eligible, attack_train_size, eval_size)
}

/// Benign retraining attack: fine-tune on instruction-like sequences and
/// report recovered FS on the whole eligible forget set.
pub fn benign_attack(
    unlearned: &ModelSnapshot,
    benign: &BenignCorpus,
    corpus: &CorpusSplits,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let size = match cfg.kind {
        AttackKind::Benign { size } => size,
        _ => return Err(Error::Config("benign_attack requires a benign config".into())),
    };
    if benign.seqs.is_empty() {
        return Err(Error::InvalidArgument { op: "benign-attack", msg: "empty benign corpus".into() });
    }
    let forget = corpus.forget();
    let overlap = benign_fact_overlap(benign, &corpus.vocab, &forget);
    if !overlap.is_empty() {
        return Err(Error::InvalidArgument {
            op: "benign-attack",
            msg: format!("benign corpus shares {} (subject, relation) pair(s) with the forget set", overlap.len()),
        });
    }
    let eligible = eligible_forget_facts(unlearned, corpus, &cfg.eval_templates)?;
    if eligible.is_empty() {
        return Err(Error::InvalidArgument { op: "benign-attack", msg: "no eligible forget facts".into() });
    }
    let eval_pairs = fact_pairs(&corpus.vocab, &eligible, &cfg.eval_templates);
    let eval_ids: Vec<u32> = eligible.iter().map(|f| f.fact_id).collect();

    // Benign sequences train as plain next-token prediction from <bos>.
    let take = size.min(benign.seqs.len());
    let train_pool: Vec<(Vec<u32>, Vec<u32>)> = benign.seqs[..take]
        .iter()
        .map(|s| (s[..1].to_vec(), s[1..].to_vec()))
        .collect();

    let mut plans = Vec::new();
    for (si, &seedv) in cfg.seeds.iter().enumerate() {
        for &lr in &cfg.sorted_rates() {
            plans.push(RunPlan {
                seed_index: si,
                seed: seedv,
                lr,
                train_pool: train_pool.clone(),
                eval_pairs: eval_pairs.clone(),
                eval_ids: eval_ids.clone(),
                train_ids: Vec::new(),
            });
        }
    }
    let test_pairs = fact_pairs(&corpus.vocab, &corpus.test(), &cfg.eval_templates);
    aggregate(cfg.kind, cfg, unlearned, plans, &test_pairs, eligible.len(), take, eval_pairs.len())
}

/// Trajectory rows as two-column CSV.
pub fn trajectory_csv(run: &AttackRun) -> String {
    let mut out = String::new();
    out.push_str(&format!("# seed: {}\n# lr: {}\n", run.seed, run.lr));
    out.push_str("step,fs\n");
    for (s, v) in &run.trajectory {
        out.push_str(&format!("{s},{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{benign_corpus, generate, GenerateConfig};
    use crate::model::{pretrain, ModelConfig, ModelSnapshot, PretrainSettings};

    fn world() -> (ModelConfig, CorpusSplits) {
        let corpus = generate(&GenerateConfig {
            num_entities: 12,
            num_relations: 2,
            forget_fraction: 0.25,
            retain_fraction: 0.25,
            test_fraction: 0.4,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 24,
            num_heads: 2,
            d_ff: 48,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 12,
            init_seed: 3,
            tie_embeddings: true,
        };
        (cfg, corpus)
    }

    #[test]
    fn zero_step_attack_reports_initial_fs_and_disjointness() {
        let (mcfg, corpus) = world();
        // A zeroed model answers uniformly, so every forget fact is eligible.
        let zero = ModelSnapshot::zeroed(mcfg).unwrap();
        let cfg = AttackConfig {
            kind: AttackKind::Harmful { p: 0.3 },
            learning_rates: vec![0.05],
            steps: 0,
            eval_every: 5,
            seeds: vec![0, 1],
            batch_size: 0,
            eval_templates: vec![0, 1],
        };
        let out = harmful_attack(&zero, &corpus, &cfg, 0.0).unwrap();
        assert!(out.report.disjoint);
        assert_eq!(out.report.runs.len(), 2);
        for run in &out.report.runs {
            assert_eq!(run.trajectory.len(), 1);
            assert_eq!(run.max_fs, run.trajectory[0].1);
            assert_eq!(run.step_at_max, 0);
        }
        assert_eq!(out.post_snapshots.len(), 2);
    }

    #[test]
    fn harmful_attack_rejects_non_unlearned_snapshot() {
        let (mcfg, corpus) = world();
        // Teach the model only the forget facts so FS is far above zero.
        let snap = ModelSnapshot::init(mcfg).unwrap();
        let forget = corpus.forget();
        let pool = fact_pairs(&corpus.vocab, &forget, &[0, 1]);
        let (snap, log) = pretrain(
            &snap,
            &pool,
            &PretrainSettings { learning_rate: 4e-3, batch_size: 0, max_steps: 600, memorize_threshold: 0.67, eval_every: 20, seed: 1 },
        )
        .unwrap();
        assert!(log.reached_threshold, "forget-only training stalled at {}", log.final_accuracy);
        let cfg = AttackConfig {
            kind: AttackKind::Harmful { p: 0.3 },
            learning_rates: vec![0.05],
            steps: 0,
            eval_every: 5,
            seeds: vec![0],
            batch_size: 0,
            eval_templates: vec![0, 1],
        };
        assert!(harmful_attack(&snap, &corpus, &cfg, 0.0).is_err());
    }

    #[test]
    fn harmful_attack_recovers_knowledge_on_a_zeroed_model() {
        // Retraining a blank model on one fact lifts accuracy on that fact
        // but held-out FS stays at chance: a sanity check that training and
        // evaluation paths do not leak into each other.
        let (mcfg, corpus) = world();
        let blank = ModelSnapshot::init(ModelConfig { init_seed: 7, ..mcfg }).unwrap();
        let cfg = AttackConfig {
            kind: AttackKind::Harmful { p: 0.3 },
            learning_rates: vec![0.3],
            steps: 60,
            eval_every: 10,
            seeds: vec![0],
            batch_size: 0,
            eval_templates: vec![0],
        };
        let out = harmful_attack(&blank, &corpus, &cfg, 0.05).unwrap();
        // Held-out facts disjoint from one trained fact stay near zero.
        assert!(out.report.mean_max_fs <= 0.35, "held-out FS {}", out.report.mean_max_fs);
    }

    #[test]
    fn benign_attack_validates_inputs_and_runs() {
        let (mcfg, corpus) = world();
        let zero = ModelSnapshot::zeroed(mcfg).unwrap();
        let benign = benign_corpus(5, 40, &corpus.vocab);
        let cfg = AttackConfig {
            kind: AttackKind::Benign { size: 40 },
            learning_rates: vec![0.05],
            steps: 5,
            eval_every: 5,
            seeds: vec![0],
            batch_size: 8,
            eval_templates: vec![0, 1],
        };
        let out = benign_attack(&zero, &benign, &corpus, &cfg).unwrap();
        assert_eq!(out.report.attack_train_size, 40);
        assert!(out.report.mean_max_fs >= 0.0);

        let bad = AttackConfig { kind: AttackKind::Benign { size: 0 }, ..cfg.clone() };
        assert!(benign_attack(&zero, &benign, &corpus, &bad).is_err());
    }

    #[test]
    fn identical_seed_and_lr_reproduce_identical_trajectories() {
        let (mcfg, corpus) = world();
        let zero = ModelSnapshot::zeroed(mcfg).unwrap();
        let cfg = AttackConfig {
            kind: AttackKind::Harmful { p: 0.3 },
            learning_rates: vec![0.1],
            steps: 20,
            eval_every: 5,
            seeds: vec![3],
            batch_size: 0,
            eval_templates: vec![0, 1],
        };
        let a = harmful_attack(&zero, &corpus, &cfg, 0.0).unwrap();
        let b = harmful_attack(&zero, &corpus, &cfg, 0.0).unwrap();
        assert_eq!(a.report.runs[0].trajectory, b.report.runs[0].trajectory);
        // Max-FS is at least the step-0 value.
        assert!(a.report.runs[0].max_fs >= a.report.runs[0].trajectory[0].1);
    }
}
