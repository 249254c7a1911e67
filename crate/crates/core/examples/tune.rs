//! Dev harness for tuning unlearning/attack hyperparameters at the
//! default desk scale. Artifacts under a working directory so the
//! expensive pretrain runs once.
//!
//!   tune <dir> pretrain
//!   tune <dir> unlearn <method> <lr> [lambda=X] [steps=N] [seed=K]
//!   tune <dir> curves <method> <lr> [lambda=X] [seed=K]
//!   tune <dir> attack <method> <lr> [lambda=X] [p=0.1] [alr=0.1,0.05] [steps=N] [seed=K]
//!   tune <dir> benign <method> <lr> [lambda=X] [alr=...] [steps=N] [seed=K]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use unlab_core::attack::{benign_attack, harmful_attack, AttackConfig, AttackKind};
use unlab_core::attribution::{
    aggregate_attribution, cumulative_top_m, distribution_correlation, influence_variation, Direction,
};
use unlab_core::corpus::{benign_corpus, export_benign, export_corpus, fact_pairs, generate,
    import_benign, import_corpus, CorpusSplits, GenerateConfig};
use unlab_core::metrics::score;
use unlab_core::model::{
    load_checkpoint, pretrain, save_checkpoint, ModelConfig, ModelSnapshot, PretrainSettings,
};
use unlab_core::unlearn::{unlearn, Method, UnlearnConfig};

fn parse_kv(args: &[String]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for a in args {
        if let Some((k, v)) = a.split_once('=') {
            m.insert(k.to_string(), v.to_string());
        }
    }
    m
}

fn corpus_path(dir: &Path) -> PathBuf {
    dir.join("corpus.jsonl")
}

fn load_world(dir: &Path) -> (ModelSnapshot, CorpusSplits) {
    let corpus = import_corpus(&corpus_path(dir)).expect("run pretrain first");
    let snap = load_checkpoint(&dir.join("base.ckpt")).expect("run pretrain first");
    (snap, corpus)
}

fn method_of(s: &str) -> Method {
    match s {
        "ga" => Method::Ga,
        "gd" => Method::Gd,
        "dpo" => Method::Dpo,
        "npo" => Method::Npo,
        "rmu" => Method::Rmu,
        "ssiuu" => Method::Ssiuu,
        other => panic!("unknown method {other}"),
    }
}

fn build_cfg(method: Method, lr: f64, kv: &BTreeMap<String, String>) -> UnlearnConfig {
    let mut cfg = UnlearnConfig::new(method, lr, kv.get("seed").map(|s| s.parse().unwrap()).unwrap_or(0));
    if let Some(l) = kv.get("lambda") {
        cfg.lambda = Some(l.parse().unwrap());
    }
    if let Some(b) = kv.get("beta") {
        cfg.beta = Some(b.parse().unwrap());
    }
    if let Some(a) = kv.get("alpha") {
        cfg.rmu_alpha = Some(a.parse().unwrap());
    }
    if let Some(c) = kv.get("c") {
        cfg.rmu_c = Some(c.parse().unwrap());
    }
    if let Some(s) = kv.get("steps") {
        cfg.max_steps = s.parse().unwrap();
    }
    cfg
}

fn do_unlearn(dir: &Path, args: &[String]) -> (ModelSnapshot, ModelSnapshot, CorpusSplits, UnlearnConfig) {
    let (base, corpus) = load_world(dir);
    let method = method_of(&args[0]);
    let lr: f64 = args[1].parse().unwrap();
    let kv = parse_kv(&args[2..]);
    let cfg = build_cfg(method, lr, &kv);
    let t0 = std::time::Instant::now();
    let (model, trace) = unlearn(&base, &corpus, &cfg).unwrap();
    let sc = score(&model, &corpus, &[0, 1]).unwrap();
    println!(
        "method={method} lr={lr} stop={:?}@{} fs={:.3} rs_retain={:.3} rs_test={:.3} us={:.3} [{:.1}s]",
        trace.stop_reason,
        trace.stop_step,
        trace.fs_stop,
        trace.rs_retain_stop,
        trace.rs_test_stop,
        sc.us.unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64()
    );
    for r in trace.records.iter().filter(|r| r.step % 10 == 0 || r.step + 3 >= trace.stop_step) {
        println!(
            "  step {} unlearn={:.4} retain={:.4} reg={:.6} fs={:.3} rs={:.3}",
            r.step, r.loss_unlearn, r.loss_retain, r.loss_reg,
            r.fs.unwrap_or(f64::NAN), r.rs.unwrap_or(f64::NAN)
        );
    }
    (base, model, corpus, cfg)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(&args[0]);
    std::fs::create_dir_all(&dir).unwrap();
    let cmd = args[1].as_str();
    let rest = &args[2..];

    match cmd {
        "pretrain" => {
            let kv = parse_kv(rest);
            let gen = GenerateConfig { seed: 11, ..Default::default() };
            let corpus = generate(&gen).unwrap();
            println!(
                "corpus: {} facts (forget {} retain {} test {} utility {}), vocab {}",
                corpus.facts.len(),
                corpus.forget().len(),
                corpus.retain().len(),
                corpus.test().len(),
                corpus.utility().len(),
                corpus.vocab.len()
            );
            let mc = ModelConfig { vocab_size: corpus.vocab.len(), init_seed: 13, ..Default::default() };
            let snap = ModelSnapshot::init(mc).unwrap();
            let refs: Vec<_> = corpus.facts.iter().collect();
            let pool = fact_pairs(&corpus.vocab, &refs, &[0, 1]);
            let t0 = std::time::Instant::now();
            let settings = PretrainSettings {
                learning_rate: kv.get("lr").map(|s| s.parse().unwrap()).unwrap_or(2e-3),
                batch_size: kv.get("batch").map(|s| s.parse().unwrap()).unwrap_or(16),
                max_steps: kv.get("steps").map(|s| s.parse().unwrap()).unwrap_or(2500),
                memorize_threshold: kv.get("thresh").map(|s| s.parse().unwrap()).unwrap_or(0.995),
                eval_every: kv.get("every").map(|s| s.parse().unwrap()).unwrap_or(50),
                seed: 5,
            };
            let (trained, log) = pretrain(&snap, &pool, &settings).unwrap();
            println!(
                "pretrain: acc {:.4} in {} steps [{:.1}s] reached={}",
                log.final_accuracy,
                log.steps_run,
                t0.elapsed().as_secs_f64(),
                log.reached_threshold
            );
            for (s, l) in log.loss_history.iter().rev().take(8).collect::<Vec<_>>().iter().rev() {
                println!("  step {s} loss {l:.4}");
            }
            export_corpus(&corpus_path(&dir), &corpus).unwrap();
            export_benign(&dir.join("benign.jsonl"), &benign_corpus(3, 1000, &corpus.vocab)).unwrap();
            save_checkpoint(&dir.join("base.ckpt"), &trained).unwrap();
            let sc = score(&trained, &corpus, &[0, 1]).unwrap();
            println!("base scores: fs={:?} rs={:?} us={:?}", sc.fs, sc.rs, sc.us);
        }
        "unlearn" => {
            do_unlearn(&dir, rest);
        }
        "curves" => {
            let (base, model, corpus, _) = do_unlearn(&dir, rest);
            let t0 = std::time::Instant::now();
            let iv = influence_variation(&base, &model, &corpus.forget()).unwrap();
            let m = 100.min(iv.d_plus_clamped.len());
            let plus = cumulative_top_m(&iv, Direction::Plus, m).unwrap().last().unwrap().1;
            let minus = cumulative_top_m(&iv, Direction::Minus, m).unwrap().last().unwrap().1;
            println!(
                "curves@{m}: plus={plus:.6} minus={minus:.6} minus/plus={:.2} [{:.1}s]",
                minus / plus.max(1e-300),
                t0.elapsed().as_secs_f64()
            );
        }
        "attack" | "benign" => {
            let (base, model, corpus, ucfg) = do_unlearn(&dir, &rest[..]);
            let kv = parse_kv(&rest[2..]);
            let alrs: Vec<f64> = kv
                .get("alr")
                .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
                .unwrap_or_else(|| vec![0.1, 0.05, 0.01]);
            let steps: usize = kv.get("asteps").map(|s| s.parse().unwrap()).unwrap_or(200);
            let t0 = std::time::Instant::now();
            if cmd == "attack" {
                let p: f64 = kv.get("p").map(|s| s.parse().unwrap()).unwrap_or(0.1);
                let acfg = AttackConfig {
                    kind: AttackKind::Harmful { p },
                    learning_rates: alrs.clone(),
                    steps,
                    eval_every: kv.get("aevery").map(|s| s.parse().unwrap()).unwrap_or(10),
                    seeds: vec![0],
                    batch_size: 0,
                    eval_templates: vec![0, 1],
                };
                let out = harmful_attack(&model, &corpus, &acfg, ucfg.forget_threshold).unwrap();
                println!(
                    "harmful p={p}: eligible={} train={} eval={} mean_max_fs={:.3} rs_at_max={:.3} [{:.1}s]",
                    out.report.eligible,
                    out.report.attack_train_size,
                    out.report.eval_size,
                    out.report.mean_max_fs,
                    out.report.mean_rs_at_max,
                    t0.elapsed().as_secs_f64()
                );
                for r in &out.report.runs {
                    let tr: Vec<String> = r.trajectory.iter().map(|(s, f)| format!("{s}:{f:.2}")).collect();
                    println!("  lr={:.4} max_fs={:.3}@{} [{}]", r.lr, r.max_fs, r.step_at_max, tr.join(" "));
                }
                let pre = aggregate_attribution(&model, &corpus.forget()).unwrap();
                let post = aggregate_attribution(&out.post_snapshots[0].1, &corpus.forget()).unwrap();
                match distribution_correlation(&pre, &post) {
                    Ok(rho) => println!("  rho={rho:.4}"),
                    Err(e) => println!("  rho undefined: {e}"),
                }
            } else {
                let benign = import_benign(&dir.join("benign.jsonl")).unwrap();
                let acfg = AttackConfig {
                    kind: AttackKind::Benign { size: 1000 },
                    learning_rates: alrs.clone(),
                    steps,
                    eval_every: 10,
                    seeds: vec![0],
                    batch_size: 8,
                    eval_templates: vec![0, 1],
                };
                let out = benign_attack(&model, &benign, &corpus, &acfg).unwrap();
                println!(
                    "benign: eligible={} mean_max_fs={:.3} rs_at_max={:.3} [{:.1}s]",
                    out.report.eligible,
                    out.report.mean_max_fs,
                    out.report.mean_rs_at_max,
                    t0.elapsed().as_secs_f64()
                );
                for r in &out.report.runs {
                    println!("  lr={:.5} max_fs={:.3}@{}", r.lr, r.max_fs, r.step_at_max);
                }
            }
            let _ = base;
        }
        other => panic!("unknown command {other}"),
    }
}
