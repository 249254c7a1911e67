//! Stage implementations and orchestration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{benign_attack, harmful_attack, trajectory_csv, AttackConfig, AttackKind, AttackOutcome};
use crate::attribution::{
    aggregate_attribution, cumulative_top_m, curve_csv, default_grid_top_k, distribution_correlation,
    grid_csv, influence_variation, module_layer_grid, summary_csv, variation_csv, Direction,
    DMINUS_CLAMP_NOTE, POOLING_NOTE,
};
use crate::corpus::{benign_corpus, export_benign, export_corpus, fact_pairs, generate, import_benign,
    import_corpus, BenignCorpus, CorpusSplits, GenerateConfig};
use crate::error::{Error, Result};
use crate::metrics::{lens_csv, lens_profile, score, ScoreReport};
use crate::model::{load_checkpoint, pretrain, save_checkpoint, ModelConfig, ModelSnapshot, PretrainSettings};
use crate::seed::{subseed, subseed_indexed};
use crate::unlearn::{trace_jsonl, unlearn_with_lr_search, Method, StopReason, UnlearnConfig};

use super::{Manifest, PipelineConfig, UnlearnSection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Pretrain,
    Unlearn,
    Analyze,
    Attack,
    Report,
}

pub const ALL_STAGES: [Stage; 6] =
    [Stage::Generate, Stage::Pretrain, Stage::Unlearn, Stage::Analyze, Stage::Attack, Stage::Report];

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Pretrain => "pretrain",
            Stage::Unlearn => "unlearn",
            Stage::Analyze => "analyze",
            Stage::Attack => "attack",
            Stage::Report => "report",
        }
    }

    fn deps(&self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Pretrain => &[Stage::Generate],
            Stage::Unlearn => &[Stage::Generate, Stage::Pretrain],
            Stage::Analyze => &[Stage::Generate, Stage::Pretrain, Stage::Unlearn],
            Stage::Attack => &[Stage::Generate, Stage::Pretrain, Stage::Unlearn],
            Stage::Report => &[Stage::Generate, Stage::Pretrain, Stage::Unlearn],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Runs the requested stages in dependency order, skipping stages already
/// recorded as done, persisting per-stage status so an interrupted run
/// resumes from the last completed stage.
pub fn run_stages(cfg: &PipelineConfig, requested: &[Stage]) -> Result<()> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::load_or_new(out, cfg)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut failures: Vec<String> = Vec::new();
    for stage in ALL_STAGES {
        if !requested.contains(&stage) {
            continue;
        }
        if manifest.is_done(stage.name()) {
            continue;
        }
        // A stage whose dependency failed (or was never run) is skipped.
        let missing: Vec<&str> = stage
            .deps()
            .iter()
            .filter(|d| !manifest.is_done(d.name()))
            .map(|d| d.name())
            .collect();
        if !missing.is_empty() {
            if requested.iter().any(|r| stage.deps().contains(r)) {
                // Dependency was requested but failed upstream this run.
                failures.push(format!("{stage}: skipped (incomplete dependencies: {})", missing.join(", ")));
                continue;
            }
            return Err(Error::Pipeline(format!(
                "stage {stage} requires completed stages: {}",
                missing.join(", ")
            )));
        }
        let result = match stage {
            Stage::Generate => stage_generate(cfg),
            Stage::Pretrain => stage_pretrain(cfg),
            Stage::Unlearn => stage_unlearn(cfg),
            Stage::Analyze => stage_analyze(cfg),
            Stage::Attack => stage_attack(cfg),
            Stage::Report => super::report::stage_report(cfg),
        };
        match result {
            Ok(detail) => {
                manifest.mark(stage.name(), "done", &detail);
                manifest.save(out)?;
            }
            Err(e) => {
                manifest.mark(stage.name(), "failed", &e.to_string());
                manifest.save(out)?;
                failures.push(format!("{stage}: {e}"));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Pipeline(failures.join("; ")))
    }
}

// ── Paths ────────────────────────────────────────────────────────────

pub fn corpus_path(out: &Path) -> PathBuf {
    out.join("corpus/corpus.jsonl")
}

pub fn benign_path(out: &Path) -> PathBuf {
    out.join("corpus/benign.jsonl")
}

pub fn base_ckpt_path(out: &Path) -> PathBuf {
    out.join("pretrain/base.ckpt")
}

pub fn unlearn_dir(out: &Path, method: Method, seed_idx: usize) -> PathBuf {
    out.join(format!("unlearn/{method}/seed{seed_idx}"))
}

pub fn analyze_dir(out: &Path, method: Method, seed_idx: usize) -> PathBuf {
    out.join(format!("analyze/{method}/seed{seed_idx}"))
}

pub fn attack_dir(out: &Path, method: Method) -> PathBuf {
    out.join(format!("attack/{method}"))
}

pub fn harmful_dir_name(p: f64) -> String {
    format!("harmful_p{:03}", (p * 100.0).round() as u32)
}

// ── Stage: generate ──────────────────────────────────────────────────

fn stage_generate(cfg: &PipelineConfig) -> Result<String> {
    let gen = GenerateConfig {
        seed: subseed(cfg.seed, "corpus"),
        num_entities: cfg.corpus.num_entities,
        num_relations: cfg.corpus.num_relations,
        forget_fraction: cfg.corpus.forget_fraction,
        retain_fraction: cfg.corpus.retain_fraction,
        test_fraction: cfg.corpus.test_fraction,
    };
    let corpus = generate(&gen)?;
    if cfg.model.vocab_size > 0 {
        let mc = resolve_model_config(cfg, &corpus);
        corpus.check_fits(&mc)?;
    }
    let benign = benign_corpus(subseed(cfg.seed, "benign"), cfg.corpus.benign_size, &corpus.vocab);
    export_corpus(&corpus_path(&cfg.out_dir), &corpus)?;
    export_benign(&benign_path(&cfg.out_dir), &benign)?;
    Ok(format!(
        "{} facts (forget {}, retain {}, test {}, utility {}), benign {}",
        corpus.facts.len(),
        corpus.forget().len(),
        corpus.retain().len(),
        corpus.test().len(),
        corpus.utility().len(),
        benign.seqs.len()
    ))
}

pub fn resolve_model_config(cfg: &PipelineConfig, corpus: &CorpusSplits) -> ModelConfig {
    ModelConfig {
        num_layers: cfg.model.num_layers,
        d_model: cfg.model.d_model,
        num_heads: cfg.model.num_heads,
        d_ff: cfg.model.d_ff,
        vocab_size: if cfg.model.vocab_size == 0 { corpus.vocab.len() } else { cfg.model.vocab_size },
        max_seq_len: cfg.model.max_seq_len,
        init_seed: subseed(cfg.seed, "init"),
        tie_embeddings: cfg.model.tie_embeddings,
    }
}

pub fn load_corpus(cfg: &PipelineConfig) -> Result<CorpusSplits> {
    import_corpus(&corpus_path(&cfg.out_dir))
}

pub fn load_benign(cfg: &PipelineConfig) -> Result<BenignCorpus> {
    import_benign(&benign_path(&cfg.out_dir))
}

pub fn load_base(cfg: &PipelineConfig) -> Result<ModelSnapshot> {
    load_checkpoint(&base_ckpt_path(&cfg.out_dir))
}

// ── Stage: pretrain ──────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainResult {
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub reached_threshold: bool,
    pub score: ScoreReport,
}

fn stage_pretrain(cfg: &PipelineConfig) -> Result<String> {
    let corpus = load_corpus(cfg)?;
    let mc = resolve_model_config(cfg, &corpus);
    corpus.check_fits(&mc)?;
    let snap = ModelSnapshot::init(mc)?;
    let refs: Vec<&crate::corpus::Fact> = corpus.facts.iter().collect();
    let pool = fact_pairs(&corpus.vocab, &refs, &[0, 1]);
    let settings = PretrainSettings {
        learning_rate: cfg.pretrain.learning_rate,
        batch_size: cfg.pretrain.batch_size,
        max_steps: cfg.pretrain.max_steps,
        memorize_threshold: cfg.pretrain.memorize_threshold,
        eval_every: cfg.pretrain.eval_every,
        seed: subseed(cfg.seed, "pretrain"),
    };
    let (trained, log) = pretrain(&snap, &pool, &settings)?;
    save_checkpoint(&base_ckpt_path(&cfg.out_dir), &trained)?;
    let sc = score(&trained, &corpus, &cfg.eval_templates())?;
    let result = PretrainResult {
        steps_run: log.steps_run,
        final_accuracy: log.final_accuracy,
        reached_threshold: log.reached_threshold,
        score: sc,
    };
    std::fs::write(
        cfg.out_dir.join("pretrain/result.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    if !log.reached_threshold {
        return Err(Error::Pipeline(format!(
            "memorization failed: accuracy {:.4} below threshold {:.4} after {} steps",
            log.final_accuracy, cfg.pretrain.memorize_threshold, log.steps_run
        )));
    }
    Ok(format!("accuracy {:.4} after {} steps", log.final_accuracy, log.steps_run))
}

// ── Stage: unlearn ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnRunResult {
    pub method: Method,
    pub seed_index: usize,
    pub seed: u64,
    pub chosen_lr: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub stop_step: usize,
    pub fs_stop: f64,
    pub rs_retain_stop: f64,
    pub rs_test_stop: f64,
    pub score: ScoreReport,
}

fn section_to_config(section: &UnlearnSection, run_seed: u64, eval_templates: Vec<usize>) -> UnlearnConfig {
    UnlearnConfig {
        method: section.method,
        learning_rate: section.learning_rates[0],
        forget_threshold: section.forget_threshold,
        max_steps: section.max_steps,
        eval_every: section.eval_every,
        batch_forget: section.batch_forget,
        batch_retain: section.batch_retain,
        lambda: section.lambda,
        beta: section.beta,
        rmu_alpha: section.rmu_alpha,
        rmu_c: section.rmu_c,
        rmu_layer: section.rmu_layer,
        ssiuu_attr_mode: section.ssiuu_attr_mode,
        seed: run_seed,
        eval_templates,
    }
}

fn stage_unlearn(cfg: &PipelineConfig) -> Result<String> {
    let corpus = load_corpus(cfg)?;
    let base = load_base(cfg)?;
    let mut jobs: Vec<(&UnlearnSection, usize, u64)> = Vec::new();
    for section in &cfg.unlearn {
        for (k, &sv) in section.seeds.iter().enumerate() {
            jobs.push((section, k, sv));
        }
    }
    let outcomes: Result<Vec<(Method, usize, bool)>> = jobs
        .par_iter()
        .map(|(section, k, sv)| {
            let run_seed = subseed_indexed(cfg.seed, &format!("unlearn/{}", section.method), *sv);
            let ucfg = section_to_config(section, run_seed, cfg.eval_templates());
            let (model, trace) = unlearn_with_lr_search(&base, &corpus, &ucfg, &section.learning_rates)?;
            let dir = unlearn_dir(&cfg.out_dir, section.method, *k);
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&dir.join("model.ckpt"), &model)?;
            std::fs::write(dir.join("trace.jsonl"), trace_jsonl(&trace)?)?;
            let sc = score(&model, &corpus, &cfg.eval_templates())?;
            let converged = trace.stop_reason == StopReason::ThresholdReached;
            let result = UnlearnRunResult {
                method: section.method,
                seed_index: *k,
                seed: *sv,
                chosen_lr: trace.learning_rate,
                converged,
                stop_reason: trace.stop_reason,
                stop_step: trace.stop_step,
                fs_stop: trace.fs_stop,
                rs_retain_stop: trace.rs_retain_stop,
                rs_test_stop: trace.rs_test_stop,
                score: sc,
            };
            std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
            Ok((section.method, *k, converged))
        })
        .collect();
    let outcomes = outcomes?;
    let converged = outcomes.iter().filter(|(_, _, c)| *c).count();
    Ok(format!("{converged}/{} runs reached the forget threshold", outcomes.len()))
}

pub fn load_unlearn_result(cfg: &PipelineConfig, method: Method, seed_idx: usize) -> Result<UnlearnRunResult> {
    let path = unlearn_dir(&cfg.out_dir, method, seed_idx).join("result.json");
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn load_unlearned(cfg: &PipelineConfig, method: Method, seed_idx: usize) -> Result<ModelSnapshot> {
    load_checkpoint(&unlearn_dir(&cfg.out_dir, method, seed_idx).join("model.ckpt"))
}

// ── Stage: analyze ───────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub method: Method,
    pub seed_index: usize,
    pub cumulative_plus_at_top_m: Option<f64>,
    pub cumulative_minus_at_top_m: Option<f64>,
    pub lens_min_accuracy: Option<f64>,
    pub lens_dip_below_chance: Option<bool>,
    pub clamp_invariants_hold: bool,
    pub meta: BTreeMap<String, String>,
}

fn stage_analyze(cfg: &PipelineConfig) -> Result<String> {
    let corpus = load_corpus(cfg)?;
    let base = load_base(cfg)?;
    let forget = corpus.forget();
    let an = &cfg.analysis;

    let adir = cfg.out_dir.join("analyze");
    std::fs::create_dir_all(&adir)?;
    if an.lens {
        let p = lens_profile(&base, &corpus, &forget, subseed(cfg.seed, "distractors"))?;
        std::fs::write(adir.join("base_lens.csv"), lens_csv(&p))?;
    }
    if an.correlation || an.influence_variation {
        let summary = aggregate_attribution(&base, &forget)?;
        std::fs::write(adir.join("base_attr.csv"), summary_csv(&base.config, &summary))?;
    }

    let mut jobs = Vec::new();
    for section in &cfg.unlearn {
        for k in 0..section.seeds.len() {
            jobs.push((section.method, k));
        }
    }
    let results: Result<Vec<()>> = jobs
        .par_iter()
        .map(|&(method, k)| {
            let unlearned = load_unlearned(cfg, method, k)?;
            let dir = analyze_dir(&cfg.out_dir, method, k);
            std::fs::create_dir_all(&dir)?;
            let mut res = AnalysisResult {
                method,
                seed_index: k,
                cumulative_plus_at_top_m: None,
                cumulative_minus_at_top_m: None,
                lens_min_accuracy: None,
                lens_dip_below_chance: None,
                clamp_invariants_hold: true,
                meta: BTreeMap::new(),
            };
            res.meta.insert("dminus_after_clamp".into(), DMINUS_CLAMP_NOTE.into());
            res.meta.insert("pooling".into(), POOLING_NOTE.into());

            if an.influence_variation {
                let iv = influence_variation(&base, &unlearned, &forget)?;
                res.clamp_invariants_hold = iv.d_plus_clamped.iter().all(|&v| v >= 0.0)
                    && iv.d_minus_clamped.iter().all(|&v| v >= 0.0);
                std::fs::write(dir.join("variation.csv"), variation_csv(&unlearned.config, &iv))?;
                if an.curves {
                    let m_max = an.top_m.min(iv.d_plus_clamped.len());
                    let plus = cumulative_top_m(&iv, Direction::Plus, m_max)?;
                    let minus = cumulative_top_m(&iv, Direction::Minus, m_max)?;
                    res.cumulative_plus_at_top_m = plus.last().map(|&(_, v)| v);
                    res.cumulative_minus_at_top_m = minus.last().map(|&(_, v)| v);
                    std::fs::write(dir.join("curve_plus.csv"), curve_csv(Direction::Plus, &plus))?;
                    std::fs::write(dir.join("curve_minus.csv"), curve_csv(Direction::Minus, &minus))?;
                }
                if an.grids {
                    let top_k = if an.grid_top_k == 0 {
                        default_grid_top_k(&unlearned.config)
                    } else {
                        an.grid_top_k
                    };
                    let gp = module_layer_grid(&unlearned.config, &iv, Direction::Plus, top_k)?;
                    let gm = module_layer_grid(&unlearned.config, &iv, Direction::Minus, top_k)?;
                    std::fs::write(dir.join("grid.csv"), grid_csv(&unlearned.config, &gp, &gm))?;
                }
            }
            if an.lens {
                let p = lens_profile(&unlearned, &corpus, &forget, subseed(cfg.seed, "distractors"))?;
                let min_acc = p.per_layer.iter().cloned().fold(f64::INFINITY, f64::min);
                res.lens_min_accuracy = Some(min_acc);
                res.lens_dip_below_chance = Some(min_acc < p.chance_level);
                std::fs::write(dir.join("lens.csv"), lens_csv(&p))?;
            }
            if an.correlation {
                let summary = aggregate_attribution(&unlearned, &forget)?;
                std::fs::write(dir.join("attr.csv"), summary_csv(&unlearned.config, &summary))?;
            }
            std::fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(&res)?)?;
            Ok(())
        })
        .collect();
    results?;
    Ok(format!("{} runs analyzed", jobs.len()))
}

pub fn load_analysis(cfg: &PipelineConfig, method: Method, seed_idx: usize) -> Result<AnalysisResult> {
    let path = analyze_dir(&cfg.out_dir, method, seed_idx).join("analysis.json");
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ── Stage: attack ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub kind: AttackKind,
    /// (unlearn seed index, attack seed, per-seed max FS, RS at max).
    pub per_seed: Vec<(usize, u64, f64, f64)>,
    pub mean_max_fs: f64,
    pub mean_rs_at_max: f64,
    pub lr_multiplier: f64,
    pub effective_learning_rates: Vec<f64>,
    pub eligible: usize,
    pub attack_train_size: usize,
    pub eval_size: usize,
    pub disjoint: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrelationSummary {
    /// (seed index, rho) per unlearn seed; rho of None means undefined
    /// (zero variance).
    pub per_seed: Vec<(usize, Option<f64>)>,
    pub mean_rho: Option<f64>,
    pub attack: String,
    pub meta: BTreeMap<String, String>,
}

fn paired_attack_seed(cfg: &PipelineConfig, k: usize) -> u64 {
    *cfg.attack.seeds.get(k).unwrap_or(&(k as u64))
}

/// Runs one attack kind against each unlearned seed snapshot of a method,
/// pairing unlearn seed k with attack seed k, and pools the outcomes.
fn run_attack_for_method(
    cfg: &PipelineConfig,
    corpus: &CorpusSplits,
    benign: Option<&BenignCorpus>,
    method: Method,
    n_seeds: usize,
    kind: AttackKind,
    fs_threshold: f64,
) -> Result<(AttackSummary, Vec<(usize, AttackOutcome)>)> {
    let (rates, steps, batch) = match kind {
        AttackKind::Harmful { .. } => (
            cfg.attack.harmful_learning_rates.clone(),
            cfg.attack.harmful_steps,
            0usize,
        ),
        AttackKind::Benign { .. } => (
            cfg.attack.benign_learning_rates.clone(),
            cfg.attack.benign_steps,
            cfg.attack.benign_batch,
        ),
    };
    let effective: Vec<f64> = rates.iter().map(|r| r * cfg.attack.lr_multiplier).collect();

    let mut per_seed = Vec::new();
    let mut outcomes = Vec::new();
    let mut eligible = 0;
    let mut train_size = 0;
    let mut eval_size = 0;
    let mut disjoint = true;
    for k in 0..n_seeds {
        let unlearned = load_unlearned(cfg, method, k)?;
        let acfg = AttackConfig {
            kind,
            learning_rates: effective.clone(),
            steps,
            eval_every: cfg.attack.eval_every,
            seeds: vec![subseed_indexed(cfg.seed, "attack", paired_attack_seed(cfg, k))],
            batch_size: batch,
            eval_templates: cfg.eval_templates(),
        };
        let outcome = match kind {
            AttackKind::Harmful { .. } => harmful_attack(&unlearned, corpus, &acfg, fs_threshold)?,
            AttackKind::Benign { .. } => benign_attack(
                &unlearned,
                benign.expect("benign corpus loaded"),
                corpus,
                &acfg,
            )?,
        };
        let (seed, maxfs) = outcome.report.per_seed_max[0];
        per_seed.push((k, seed, maxfs, outcome.report.mean_rs_at_max));
        eligible = outcome.report.eligible;
        train_size = outcome.report.attack_train_size;
        eval_size = outcome.report.eval_size;
        disjoint &= outcome.report.disjoint;
        outcomes.push((k, outcome));
    }
    let mean_max_fs = per_seed.iter().map(|&(_, _, v, _)| v).sum::<f64>() / per_seed.len() as f64;
    let mean_rs = per_seed.iter().map(|&(_, _, _, v)| v).sum::<f64>() / per_seed.len() as f64;
    Ok((
        AttackSummary {
            kind,
            per_seed,
            mean_max_fs,
            mean_rs_at_max: mean_rs,
            lr_multiplier: cfg.attack.lr_multiplier,
            effective_learning_rates: effective,
            eligible,
            attack_train_size: train_size,
            eval_size,
            disjoint,
        },
        outcomes,
    ))
}

fn stage_attack(cfg: &PipelineConfig) -> Result<String> {
    if !cfg.attack.enabled {
        return Ok("attacks disabled".into());
    }
    let corpus = load_corpus(cfg)?;
    let benign = load_benign(cfg)?;
    let forget = corpus.forget();
    let mut failures = Vec::new();
    let mut completed = 0usize;

    for section in &cfg.unlearn {
        let method = section.method;
        let n_seeds = section.seeds.len();
        let mdir = attack_dir(&cfg.out_dir, method);
        std::fs::create_dir_all(&mdir)?;
        let run = || -> Result<()> {
            // Attacks require converged unlearning runs.
            for k in 0..n_seeds {
                let res = load_unlearn_result(cfg, method, k)?;
                if !res.converged {
                    return Err(Error::Pipeline(format!(
                        "{method} seed {k} never reached the forget threshold; attack skipped"
                    )));
                }
            }
            let mut first_harmful_posts: Vec<(usize, ModelSnapshot)> = Vec::new();
            for (pi, &p) in cfg.attack.harmful_p.iter().enumerate() {
                let (summary, outcomes) = run_attack_for_method(
                    cfg,
                    &corpus,
                    None,
                    method,
                    n_seeds,
                    AttackKind::Harmful { p },
                    section.forget_threshold,
                )?;
                let dir = mdir.join(harmful_dir_name(p));
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
                for (k, outcome) in &outcomes {
                    for (ri, run) in outcome.report.runs.iter().enumerate() {
                        std::fs::write(dir.join(format!("run_s{k}_lr{ri}.csv")), trajectory_csv(run))?;
                    }
                    for (_, snap) in &outcome.post_snapshots {
                        save_checkpoint(&dir.join(format!("post_seed{k}.ckpt")), snap)?;
                    }
                }
                if pi == 0 {
                    first_harmful_posts = outcomes
                        .into_iter()
                        .map(|(k, o)| (k, o.post_snapshots.into_iter().next().expect("one seed").1))
                        .collect();
                }
            }

            let (bsummary, boutcomes) = run_attack_for_method(
                cfg,
                &corpus,
                Some(&benign),
                method,
                n_seeds,
                AttackKind::Benign { size: cfg.corpus.benign_size },
                section.forget_threshold,
            )?;
            let bdir = mdir.join("benign");
            std::fs::create_dir_all(&bdir)?;
            std::fs::write(bdir.join("report.json"), serde_json::to_string_pretty(&bsummary)?)?;
            for (k, outcome) in &boutcomes {
                for (ri, run) in outcome.report.runs.iter().enumerate() {
                    std::fs::write(bdir.join(format!("run_s{k}_lr{ri}.csv")), trajectory_csv(run))?;
                }
            }

            if cfg.analysis.correlation && !first_harmful_posts.is_empty() {
                let mut per_seed = Vec::new();
                let mut rhos = Vec::new();
                for (k, post) in &first_harmful_posts {
                    let unlearned = load_unlearned(cfg, method, *k)?;
                    let pre = aggregate_attribution(&unlearned, &forget)?;
                    let post_summary = aggregate_attribution(post, &forget)?;
                    match distribution_correlation(&pre, &post_summary) {
                        Ok(rho) => {
                            per_seed.push((*k, Some(rho)));
                            rhos.push(rho);
                        }
                        Err(Error::ZeroVariance(_)) => per_seed.push((*k, None)),
                        Err(e) => return Err(e),
                    }
                }
                let mean_rho = if rhos.is_empty() {
                    None
                } else {
                    Some(rhos.iter().sum::<f64>() / rhos.len() as f64)
                };
                let mut meta = BTreeMap::new();
                meta.insert("pooling".into(), POOLING_NOTE.into());
                let corr = CorrelationSummary {
                    per_seed,
                    mean_rho,
                    attack: harmful_dir_name(cfg.attack.harmful_p.first().copied().unwrap_or(0.1)),
                    meta,
                };
                std::fs::write(mdir.join("correlation.json"), serde_json::to_string_pretty(&corr)?)?;
            }
            Ok(())
        };
        match run() {
            Ok(()) => completed += 1,
            Err(e) => failures.push(format!("{method}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(format!("{completed} methods attacked"))
    } else {
        Err(Error::Pipeline(failures.join("; ")))
    }
}

pub fn load_attack_summary(cfg: &PipelineConfig, method: Method, sub: &str) -> Result<AttackSummary> {
    let path = attack_dir(&cfg.out_dir, method).join(sub).join("report.json");
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn load_correlation(cfg: &PipelineConfig, method: Method) -> Result<CorrelationSummary> {
    let path = attack_dir(&cfg.out_dir, method).join("correlation.json");
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
