//! Report collation: one summary row per method plus the plot-ready CSV
//! pointers, all recomputable from the persisted stage artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::unlearn::Method;

use super::stages::{
    harmful_dir_name, load_analysis, load_attack_summary, load_correlation, load_unlearn_result,
};
use super::{Manifest, PipelineConfig};

#[derive(Debug, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub seeds: usize,
    pub converged_seeds: usize,
    pub chosen_lrs: Vec<f64>,
    pub mean_fs: Option<f64>,
    pub mean_rs: Option<f64>,
    pub mean_us: Option<f64>,
    /// Mean max recovered FS per harmful sweep ("harmful_p010" etc).
    pub harmful: BTreeMap<String, f64>,
    pub benign_max_fs: Option<f64>,
    pub mean_rho: Option<f64>,
    pub cumulative_plus_at_top_m: Option<f64>,
    pub cumulative_minus_at_top_m: Option<f64>,
    pub lens_min_accuracy: Option<f64>,
    pub lens_dip_below_chance: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub base_score: Option<ScoreReport>,
    pub methods: Vec<MethodReport>,
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

pub(super) fn build_report(cfg: &PipelineConfig) -> Result<RunReport> {
    let base_score: Option<ScoreReport> = std::fs::read_to_string(cfg.out_dir.join("pretrain/result.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<super::stages::PretrainResult>(&s).ok())
        .map(|r| r.score);

    let mut methods = Vec::new();
    for section in &cfg.unlearn {
        let method = section.method;
        let n = section.seeds.len();
        let mut fs = Vec::new();
        let mut rs = Vec::new();
        let mut us = Vec::new();
        let mut lrs = Vec::new();
        let mut converged = 0usize;
        let mut any = false;
        for k in 0..n {
            match load_unlearn_result(cfg, method, k) {
                Ok(r) => {
                    any = true;
                    fs.push(r.score.fs);
                    rs.push(r.score.rs);
                    us.push(r.score.us);
                    lrs.push(r.chosen_lr);
                    if r.converged {
                        converged += 1;
                    }
                }
                Err(_) => continue,
            }
        }
        if !any {
            continue;
        }

        let mut harmful = BTreeMap::new();
        for &p in &cfg.attack.harmful_p {
            let name = harmful_dir_name(p);
            if let Ok(s) = load_attack_summary(cfg, method, &name) {
                harmful.insert(name, s.mean_max_fs);
            }
        }
        let benign_max_fs = load_attack_summary(cfg, method, "benign").ok().map(|s| s.mean_max_fs);
        let mean_rho = load_correlation(cfg, method).ok().and_then(|c| c.mean_rho);

        let mut plus = Vec::new();
        let mut minus = Vec::new();
        let mut lens_min = Vec::new();
        let mut dip = None;
        for k in 0..n {
            if let Ok(a) = load_analysis(cfg, method, k) {
                plus.push(a.cumulative_plus_at_top_m);
                minus.push(a.cumulative_minus_at_top_m);
                lens_min.push(a.lens_min_accuracy);
                if let Some(d) = a.lens_dip_below_chance {
                    dip = Some(dip.unwrap_or(false) | d);
                }
            }
        }

        methods.push(MethodReport {
            method,
            seeds: n,
            converged_seeds: converged,
            chosen_lrs: lrs,
            mean_fs: mean_opt(&fs),
            mean_rs: mean_opt(&rs),
            mean_us: mean_opt(&us),
            harmful,
            benign_max_fs,
            mean_rho,
            cumulative_plus_at_top_m: mean_opt(&plus),
            cumulative_minus_at_top_m: mean_opt(&minus),
            lens_min_accuracy: mean_opt(&lens_min),
            lens_dip_below_chance: dip,
        });
    }
    if methods.is_empty() {
        return Err(Error::Pipeline("no runs found".into()));
    }
    Ok(RunReport {
        version: super::CONFIG_VERSION,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        base_score,
        methods,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

pub(super) fn summary_csv_text(cfg: &PipelineConfig, report: &RunReport) -> String {
    let mut cols = vec!["method".to_string(), "fs".into(), "rs".into(), "us".into()];
    for &p in &cfg.attack.harmful_p {
        cols.push(harmful_dir_name(p));
    }
    cols.extend(["benign".to_string(), "rho".into(), "cum_plus".into(), "cum_minus".into()]);
    let mut out = cols.join(",");
    out.push('\n');
    for m in &report.methods {
        let mut row = vec![
            m.method.to_string(),
            fmt_opt(m.mean_fs),
            fmt_opt(m.mean_rs),
            fmt_opt(m.mean_us),
        ];
        for &p in &cfg.attack.harmful_p {
            row.push(fmt_opt(m.harmful.get(&harmful_dir_name(p)).copied()));
        }
        row.push(fmt_opt(m.benign_max_fs));
        row.push(fmt_opt(m.mean_rho));
        row.push(fmt_opt(m.cumulative_plus_at_top_m));
        row.push(fmt_opt(m.cumulative_minus_at_top_m));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub(super) fn summary_table_text(cfg: &PipelineConfig, report: &RunReport) -> String {
    let mut out = String::new();
    if let Some(b) = &report.base_score {
        out.push_str(&format!(
            "base model: FS {} RS {} US {} (step {})\n",
            fmt_opt(b.fs),
            fmt_opt(b.rs),
            fmt_opt(b.us),
            b.snapshot_step
        ));
    }
    let mut headers = vec!["method".to_string(), "FS".into(), "RS".into(), "US".into()];
    for &p in &cfg.attack.harmful_p {
        headers.push(format!("harm p={p}"));
    }
    headers.extend(["benign".to_string(), "rho".into()]);
    let rows: Vec<Vec<String>> = report
        .methods
        .iter()
        .map(|m| {
            let mut row = vec![
                m.method.to_string(),
                fmt_opt(m.mean_fs),
                fmt_opt(m.mean_rs),
                fmt_opt(m.mean_us),
            ];
            for &p in &cfg.attack.harmful_p {
                row.push(fmt_opt(m.harmful.get(&harmful_dir_name(p)).copied()));
            }
            row.push(fmt_opt(m.benign_max_fs));
            row.push(fmt_opt(m.mean_rho));
            row
        })
        .collect();
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r[i].len()).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(&headers));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &rows {
        out.push_str(&fmt_row(r));
        out.push('\n');
    }
    out
}

pub(super) fn stage_report(cfg: &PipelineConfig) -> Result<String> {
    let report = build_report(cfg)?;
    let dir = cfg.out_dir.join("report");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("run_report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(dir.join("summary.csv"), summary_csv_text(cfg, &report))?;
    std::fs::write(dir.join("summary.txt"), summary_table_text(cfg, &report))?;
    Ok(format!("{} method summaries", report.methods.len()))
}

/// Human-readable summary of an existing run directory.
pub fn render_report(dir: &Path) -> Result<String> {
    let config_path = dir.join("config.json");
    if !config_path.exists() || !Manifest::path(dir).exists() {
        return Err(Error::Pipeline(format!("no runs found in {}", dir.display())));
    }
    let cfg: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(config_path)?)?;
    let cfg = PipelineConfig { out_dir: dir.to_path_buf(), ..cfg };
    let report = build_report(&cfg)?;
    Ok(summary_table_text(&cfg, &report))
}
