//! One trained artifact per cell, where a cell is a fully resolved training
//! configuration. Cells are skipped when their manifest already exists,
//! guarded by a lockfile while training, and evaluated into the ledger.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use catx_core::checkpoint;
use catx_core::eval::{evaluate, MetricsReport, EVAL_BATCH};
use catx_core::report::{append_ledger, read_ledger};
use catx_core::train::{self, Pipeline, RunManifest, TrainConfig, TrainData, RUN_FORMAT_VERSION};
use catx_core::vit::Vit;
use catx_core::CatxError;

pub struct Layout {
    pub out_dir: PathBuf,
}

impl Layout {
    pub fn dir(&self, cfg: &TrainConfig) -> PathBuf {
        self.out_dir.join(cfg.dataset.name.as_str())
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> PathBuf {
        self.dir(cfg).join(format!("{}.ckpt", cfg.run_name()))
    }

    pub fn manifest(&self, cfg: &TrainConfig) -> PathBuf {
        self.dir(cfg).join(format!("{}.json", cfg.run_name()))
    }

    pub fn ledger(&self) -> PathBuf {
        self.out_dir.join("ledger.jsonl")
    }
}

/// Removes the lockfile when dropped.
struct CellLock(PathBuf);

impl CellLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(CellLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CatxError::Locked(format!(
                "{} exists; another process is training this cell (delete it if that process is gone)",
                path.display()
            ))
            .into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for CellLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct Trained {
    pub model: Vit<f32>,
    pub manifest: RunManifest,
    pub fresh: bool,
}

/// Loads the cell if it exists (and `force` is off), otherwise trains and
/// saves it. `blackbox` supplies the frozen scorer for post-hoc cells.
pub fn ensure(
    layout: &Layout,
    cfg: &TrainConfig,
    data: &TrainData,
    blackbox: Option<&Vit<f32>>,
    force: bool,
) -> Result<Trained> {
    let manifest_path = layout.manifest(cfg);
    let ckpt_path = layout.checkpoint(cfg);
    if manifest_path.exists() && !force {
        let manifest = RunManifest::load(&manifest_path)?;
        if manifest.config != *cfg {
            bail!(
                "{} was produced with a different configuration; rerun with --force or use another --out-dir",
                manifest_path.display()
            );
        }
        let (model, _) = checkpoint::load(&ckpt_path, Some(&cfg.model))
            .with_context(|| format!("manifest exists but checkpoint {} is unusable", ckpt_path.display()))?;
        log::info!("{}: already trained, skipping", cfg.run_name());
        return Ok(Trained {
            model,
            manifest,
            fresh: false,
        });
    }

    let _lock = CellLock::acquire(layout.dir(cfg).join(format!("{}.lock", cfg.run_name())))?;
    log::info!("{}: training", cfg.run_name());
    let mut outcome = match (cfg.pipeline, blackbox) {
        (Pipeline::Posthoc, Some(bb)) => train::train_posthoc(cfg, data, bb)?,
        _ => train::train(cfg, data)?,
    };
    if cfg.pipeline == Pipeline::Blackbox {
        let acc = catx_core::eval::eval_acc(&outcome.model, &data.test)?;
        outcome.manifest.final_metrics.insert("test_acc".into(), acc);
    }
    outcome.save(&layout.dir(cfg))?;
    Ok(Trained {
        model: outcome.model,
        manifest: outcome.manifest,
        fresh: true,
    })
}

/// Evaluates a post-hoc or expViT cell and appends its ledger row, unless an
/// up-to-date row already exists.
pub fn record(
    layout: &Layout,
    trained: &Trained,
    blackbox: Option<&Vit<f32>>,
    data: &TrainData,
) -> Result<Option<MetricsReport>> {
    let cfg = &trained.manifest.config;
    let cell = cfg.run_name();
    let ledger = layout.ledger();
    let existing = read_ledger(&ledger)?;
    if !trained.fresh && existing.iter().any(|r| r.dataset == cfg.dataset.name && r.cell == cell) {
        return Ok(None);
    }
    let report = evaluate_cell(cfg, &trained.model, blackbox, data)?;
    append_ledger(&ledger, &report)?;
    log::info!(
        "{cell}: PA {:.3} ACE {:.3} ACC {:.3}",
        report.pa,
        report.ace,
        report.acc
    );
    Ok(Some(report))
}

pub fn evaluate_cell(
    cfg: &TrainConfig,
    model: &Vit<f32>,
    blackbox: Option<&Vit<f32>>,
    data: &TrainData,
) -> Result<MetricsReport> {
    let frac = cfg
        .frac
        .context("only post-hoc and expViT cells are evaluated for PA/ACE")?;
    let scorer = match cfg.pipeline {
        Pipeline::Posthoc => blackbox.context("post-hoc evaluation needs the black-box")?,
        _ => model,
    };
    let n = evaluate(scorer, model, &data.test, frac, cfg.seeds.eval, EVAL_BATCH)?;
    Ok(MetricsReport {
        format_version: RUN_FORMAT_VERSION,
        dataset: cfg.dataset.name,
        method: cfg.pipeline,
        frac,
        lambda: cfg.lambda,
        pa: n.pa,
        ace: n.ace,
        acc: n.acc,
        n_test: n.n,
        eval_seed: cfg.seeds.eval,
        cell: cfg.run_name(),
    })
}

/// Loads a checkpoint together with its sibling run manifest, if any.
pub fn load_run(ckpt: &Path) -> Result<(Vit<f32>, Option<RunManifest>)> {
    let (model, _) = checkpoint::load(ckpt, None)?;
    let json = ckpt.with_extension("json");
    let manifest = if json.exists() {
        Some(RunManifest::load(&json)?)
    } else {
        None
    };
    Ok((model, manifest))
}
