use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use odg_core::data::{generate_synthetic_domains, write_dataset_pngs, write_manifest};
use odg_core::engine::checkpoint::{self, write_atomic};
use odg_core::engine::experiment::{assemble_tables, run_cell, sweep_cells, CellResult, GridTable, SweepAxis};
use odg_core::engine::gradcheck::{grad_check, GradCheckConfig, GradComponent};
use odg_core::engine::{evaluate_domains, read_loss_log, train, write_loss_log};
use odg_core::Model;

use crate::config::{ExperimentConfig, Track};
use crate::plots;

pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";
pub const LOSS_LOG: &str = "losses.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const TABLES_JSON: &str = "tables.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn prepare_out_dir(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(EFFECTIVE_CONFIG), &cfg.to_toml()?)
}

/// Writes every synthetic domain as PNG files plus one manifest per domain.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.track != Track::Synthetic {
        bail!("generate only supports the synthetic track");
    }
    prepare_out_dir(out, cfg)?;
    let t = &cfg.synthetic;
    let domains = generate_synthetic_domains(&t.spec, t.n_domains, t.n_per_class)?;
    for (d, ds) in domains.iter().enumerate() {
        let records = write_dataset_pngs(ds, out, &t.spec.normalization)?;
        let manifest = out.join(format!("domain{d}.tsv"));
        write_manifest(&manifest, &records)?;
        println!("domain {d}: {} images, manifest {}", ds.len(), manifest.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    seconds: f64,
    final_losses: odg_core::engine::StepLosses,
    checkpoint: PathBuf,
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out_dir(out, cfg)?;
    let data = cfg.prepare_data()?;
    let model_cfg = cfg.model_config(data.num_known);
    let train_cfg = cfg.train_config();
    let mut model = Model::new(model_cfg)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    info!(
        "training on {} source samples, {} known classes",
        data.source.len(),
        data.num_known
    );
    let start = Instant::now();
    let outcome = train(&mut model, &data.source, &train_cfg, |epoch, m| {
        info!("epoch {epoch} done");
        checkpoint::save(m, Some(&train_cfg), &ckpt_dir.join(format!("epoch-{epoch:03}.ckpt")))
    })?;
    let final_path = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&model, Some(&train_cfg), &final_path)?;
    write_loss_log(&out.join(LOSS_LOG), &outcome.history)?;
    let summary = TrainSummary {
        steps: outcome.steps,
        seconds: start.elapsed().as_secs_f64(),
        final_losses: outcome.final_losses,
        checkpoint: final_path,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    let l = outcome.final_losses;
    println!(
        "trained {} steps: ce {:.4} disc {:.4} sm {:.4} total {:.4}",
        outcome.steps, l.ce, l.disc, l.sm, l.total
    );
    Ok(())
}

pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let data = cfg.prepare_data()?;
    if model.config.num_known != data.num_known {
        bail!(
            "checkpoint has {} known classes, the configured split has {}",
            model.config.num_known,
            data.num_known
        );
    }
    let report = evaluate_domains(&model, &data.targets)?;
    prepare_out_dir(out, cfg)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    let table = report.to_table();
    write_text(&out.join(REPORT_TABLE), &table)?;
    print!("{table}");
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, axis: SweepAxis, seeds: &[u64], parallel: usize, out: &Path) -> Result<()> {
    if cfg.track != Track::Synthetic {
        bail!("ablation sweeps run on the synthetic track");
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    prepare_out_dir(out, cfg)?;
    let base_model = cfg.model_config(cfg.synthetic.known.len());
    let cells = sweep_cells(axis, &base_model, &cfg.train_config());
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    info!("{} cells x {} seeds", cells.len(), seeds.len());
    let run_job = |&(c, s): &(usize, u64)| -> (usize, u64, odg_core::Result<CellResult>) {
        let cell = &cells[c];
        let t = Instant::now();
        let r = run_cell(cell, &cfg.synthetic, s);
        info!("cell {}/{} seed {s}: {:.1}s", cell.row, cell.col, t.elapsed().as_secs_f64());
        (c, s, r)
    };
    let outcomes: Vec<_> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel).build()?;
        pool.install(|| jobs.par_iter().map(run_job).collect())
    } else {
        jobs.iter().map(run_job).collect()
    };
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for (c, s, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e) => failed.push(format!("{}/{} seed {s}: {e}", cells[c].row, cells[c].col)),
        }
    }
    let tables = assemble_tables(axis, &cells, &results);
    write_json(&out.join("cells.json"), &results)?;
    write_json(&out.join(TABLES_JSON), &tables)?;
    let text: String = tables.iter().map(|t| t.to_text() + "\n").collect();
    write_text(&out.join("tables.txt"), &text)?;
    print!("{text}");
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("failed cell {f}");
        }
        bail!("{} of {} runs failed", failed.len(), jobs.len());
    }
    Ok(())
}

pub fn gradcheck_cmd(samples: usize, step: f64, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let cfg = GradCheckConfig { step, samples, seed };
    let reports = GradComponent::ALL
        .iter()
        .map(|&c| grad_check(c, cfg))
        .collect::<odg_core::Result<Vec<_>>>()?;
    write_json(&out.join("gradcheck.json"), &reports)?;
    println!("{:<10}{:>9}{:>8}{:>14}  status", "group", "sampled", "kinks", "max_rel_err");
    for r in &reports {
        println!(
            "{:<10}{:>9}{:>8}{:>14.3e}  {}",
            r.component.name(),
            r.sampled,
            r.skipped_kinks,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.component.name()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn find_files(dir: &Path, name: &str, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_files(&p, name, found)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            found.push(p);
        }
    }
    Ok(())
}

/// Error type for an empty log directory, mapped to its own exit code.
#[derive(Debug)]
pub struct NoRuns(pub PathBuf);

impl std::fmt::Display for NoRuns {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no runs found in {}", self.0.display())
    }
}

impl std::error::Error for NoRuns {}

pub fn report(log_dir: &Path, out: &Path) -> Result<()> {
    if !log_dir.is_dir() {
        bail!("{} is not a directory", log_dir.display());
    }
    let mut logs = Vec::new();
    find_files(log_dir, LOSS_LOG, &mut logs)?;
    let mut tables = Vec::new();
    find_files(log_dir, TABLES_JSON, &mut tables)?;
    if logs.is_empty() && tables.is_empty() {
        return Err(anyhow!(NoRuns(log_dir.to_path_buf())));
    }
    fs::create_dir_all(out)?;
    let mut md = String::from("# Run summary\n\n");
    for (i, log) in logs.iter().enumerate() {
        let run_dir = log.parent().unwrap_or(log_dir);
        let name = run_dir.strip_prefix(log_dir).unwrap_or(run_dir).display().to_string();
        let name = if name.is_empty() { ".".to_string() } else { name };
        let records = read_loss_log(log)?;
        let svg = out.join(format!("losses-{i:02}.svg"));
        plots::loss_curves(&records, &format!("losses: {name}"), &svg)?;
        md.push_str(&format!("## {name}\n\n- steps: {}\n", records.len() / 3));
        for comp in odg_core::engine::train::LOSS_COMPONENTS {
            if let Some(last) = records.iter().rev().find(|r| r.component == comp) {
                md.push_str(&format!("- final {comp}: {:.4}\n", last.value));
            }
        }
        md.push_str(&format!("- plot: {}\n", svg.display()));
        let report_path = run_dir.join(REPORT_TABLE);
        if report_path.is_file() {
            md.push_str(&format!("\n```\n{}```\n", fs::read_to_string(&report_path)?));
        }
        md.push('\n');
    }
    for (i, t) in tables.iter().enumerate() {
        let grids: Vec<GridTable> = serde_json::from_str(&fs::read_to_string(t)?)
            .with_context(|| format!("parsing {}", t.display()))?;
        md.push_str(&format!("## sweep {}\n\n```\n", t.display()));
        for g in &grids {
            md.push_str(&g.to_text());
            md.push('\n');
        }
        md.push_str("```\n\n");
        let acc = grids.iter().find(|g| g.title == "known-classes acc");
        let hs = grids.iter().find(|g| g.title == "known-classes hs");
        if let (Some(acc), Some(hs)) = (acc, hs) {
            let svg = out.join(format!("known-classes-{i:02}.svg"));
            plots::known_classes(acc, hs, &svg)?;
            md.push_str(&format!("known-class plot: {}\n\n", svg.display()));
        }
    }
    let summary = out.join("summary.md");
    write_text(&summary, &md)?;
    println!("wrote {} ({} runs, {} sweeps)", summary.display(), logs.len(), tables.len());
    if logs.is_empty() {
        warn!("no loss logs found, only sweep tables");
    }
    Ok(())
}
