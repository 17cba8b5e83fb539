use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use catx_core::data::{
    dataset_dir, load_dataset, of_split, patchify_pixels, resolve_data_root, verify_dataset, write_checksums,
    DatasetName, DatasetSpec, Split,
};
use catx_core::report::{load_image, read_ledger, render_overlay, OverlayStyle, ResultsTable, DEFAULT_FRACS};
use catx_core::sampler::{compute_k, hard_topk};
use catx_core::train::{Pipeline, TrainConfig, TrainData};
use catx_core::vit::HeadKind;
use serde_json::json;

use crate::cells::{self, Layout};
use crate::config::{default_lambda, load_file, RunOpts};
use crate::{Cli, Command, DataAction, EvalArgs, ExplainArgs, Format};

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let file = load_file(cli.config.as_deref())?;
    let root = resolve_data_root(cli.data_root.as_deref());
    let layout = Layout {
        out_dir: cli.out_dir.clone(),
    };
    match &cli.command {
        Command::Data { action } => data(&root, action),
        Command::Train {
            pipeline,
            run,
            frac,
            lambda,
            blackbox,
            force,
        } => {
            let opts = run.over(&file.run);
            train_one(
                &layout,
                &root,
                &opts,
                (*pipeline).into(),
                *frac,
                *lambda,
                blackbox.clone(),
                *force,
            )
        }
        Command::Sweep {
            run,
            fracs,
            lambdas,
            force,
        } => {
            let opts = run.over(&file.run);
            let fracs = fracs
                .clone()
                .or(file.sweep.fracs.clone())
                .unwrap_or_else(|| DEFAULT_FRACS.to_vec());
            let lambdas = lambdas.clone().or(file.sweep.lambdas.clone());
            sweep(&layout, &root, &opts, &fracs, lambdas.as_deref(), *force)
        }
        Command::Eval(args) => eval(&layout, &root, args),
        Command::Report {
            dataset,
            format,
            fracs,
            ledger,
        } => report(
            &layout,
            dataset.as_deref(),
            *format,
            fracs.as_deref().unwrap_or(&DEFAULT_FRACS),
            ledger.as_deref(),
        ),
        Command::Explain(args) => explain(&root, args),
        Command::Describe {
            pipeline,
            run,
            frac,
            lambda,
        } => {
            let opts = run.over(&file.run);
            let pipeline: Pipeline = (*pipeline).into();
            let (frac, lambda) = pipeline_defaults(pipeline, &opts, *frac, *lambda)?;
            let blackbox = (pipeline == Pipeline::Posthoc).then(|| PathBuf::from("<blackbox checkpoint>"));
            let cfg = opts.train_config(pipeline, frac, lambda, blackbox)?;
            let params = catx_core::vit::Vit::<f32>::new(cfg.model.clone(), cfg.seeds.init)?.num_parameters();
            let doc = json!({
                "run_name": cfg.run_name(),
                "parameters": params,
                "k": cfg.k(),
                "config_hash": cfg.model.config_hash(),
                "config": cfg,
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Fills in frac/λ for the pipelines that need them.
fn pipeline_defaults(
    pipeline: Pipeline,
    opts: &RunOpts,
    frac: Option<f64>,
    lambda: Option<f64>,
) -> Result<(Option<f64>, Option<f64>)> {
    match pipeline {
        Pipeline::Blackbox => Ok((None, None)),
        Pipeline::Posthoc => Ok((Some(frac.unwrap_or(0.1)), None)),
        Pipeline::Expvit => {
            let f = frac.unwrap_or(0.1);
            let l = match lambda.or_else(|| default_lambda(opts.dataset().ok()?, f)) {
                Some(l) => l,
                None => bail!("no default λ for frac {f}; pass --lambda"),
            };
            Ok((Some(f), Some(l)))
        }
    }
}

fn data(root: &Path, action: &DataAction) -> Result<ExitCode> {
    match action {
        DataAction::Fetch { dataset, mirror } => {
            let dir = crate::fetch::fetch(root, *dataset, mirror.as_deref())?;
            println!("{dataset}: ready in {}", dir.display());
        }
        DataAction::Verify {
            dataset,
            write_checksums: write,
        } => {
            let files = verify_dataset(root, *dataset)?;
            let mut mismatch = false;
            for f in &files {
                let status = match f.checksum_ok {
                    Some(true) => "ok",
                    Some(false) => {
                        mismatch = true;
                        "CHECKSUM MISMATCH"
                    }
                    None => "unrecorded",
                };
                println!("{}  {}  {} records  {status}", f.sha256, f.path.display(), f.records);
            }
            if *write {
                write_checksums(&dataset_dir(root, *dataset), &files)?;
            }
            if mismatch && !*write {
                bail!("{dataset}: files differ from the recorded checksums");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn blackbox_config(opts: &RunOpts) -> Result<TrainConfig> {
    opts.train_config(Pipeline::Blackbox, None, None, None)
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    layout: &Layout,
    root: &Path,
    opts: &RunOpts,
    pipeline: Pipeline,
    frac: Option<f64>,
    lambda: Option<f64>,
    blackbox: Option<PathBuf>,
    force: bool,
) -> Result<ExitCode> {
    let (frac, lambda) = match pipeline {
        Pipeline::Blackbox => (None, None),
        _ => pipeline_defaults(pipeline, opts, frac, lambda)?,
    };
    let bb_path = match pipeline {
        Pipeline::Posthoc => Some(blackbox.unwrap_or(layout.checkpoint(&blackbox_config(opts)?))),
        _ => None,
    };
    let cfg = opts.train_config(pipeline, frac, lambda, bb_path.clone())?;
    let data = TrainData::load(&cfg.dataset, root, cfg.model.patch_size)?;
    let bb = match &bb_path {
        Some(p) => Some(
            catx_core::checkpoint::load(p, None)
                .with_context(|| format!("loading black-box {} (train it first)", p.display()))?
                .0,
        ),
        None => None,
    };
    let trained = cells::ensure(layout, &cfg, &data, bb.as_ref(), force)?;
    if pipeline == Pipeline::Blackbox {
        if let Some(acc) = trained.manifest.final_metrics.get("test_acc") {
            println!("{}: test ACC {acc:.4}", cfg.run_name());
        }
    } else if let Some(r) = cells::record(layout, &trained, bb.as_ref(), &data)? {
        println!("{}", serde_json::to_string(&r)?);
    }
    println!("{}", layout.manifest(&cfg).display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(
    layout: &Layout,
    root: &Path,
    opts: &RunOpts,
    fracs: &[f64],
    lambdas: Option<&[f64]>,
    force: bool,
) -> Result<ExitCode> {
    let dataset = opts.dataset()?;
    let mut grid = Vec::new();
    for &f in fracs {
        let ls = match lambdas {
            Some(ls) => ls.to_vec(),
            None => {
                vec![default_lambda(dataset, f).with_context(|| format!("no default λ for frac {f}; pass --lambdas"))?]
            }
        };
        grid.push((f, ls));
    }
    let bb_cfg = blackbox_config(opts)?;
    // Resolve every cell before any training so configuration errors surface early.
    let mut cells_cfg = Vec::new();
    for (f, ls) in &grid {
        cells_cfg.push(opts.train_config(Pipeline::Posthoc, Some(*f), None, Some(layout.checkpoint(&bb_cfg)))?);
        for &l in ls {
            cells_cfg.push(opts.train_config(Pipeline::Expvit, Some(*f), Some(l), None)?);
        }
    }

    let data = TrainData::load(&bb_cfg.dataset, root, bb_cfg.model.patch_size)?;
    let bb = cells::ensure(layout, &bb_cfg, &data, None, force)?;
    let mut trained = usize::from(bb.fresh);
    let mut appended = 0;
    for cfg in &cells_cfg {
        let cell = cells::ensure(layout, cfg, &data, Some(&bb.model), force)?;
        trained += usize::from(cell.fresh);
        if let Some(r) = cells::record(layout, &cell, Some(&bb.model), &data)? {
            appended += 1;
            println!("{}", serde_json::to_string(&r)?);
        }
    }
    eprintln!(
        "{dataset}: {} cells, {trained} trained, {appended} ledger rows appended",
        cells_cfg.len() + 1
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(layout: &Layout, root: &Path, args: &EvalArgs) -> Result<ExitCode> {
    let (model, manifest) = cells::load_run(&args.checkpoint)?;
    let mut cfg = match manifest {
        Some(m) => m.config,
        None => {
            let name = args
                .dataset
                .context("no run manifest next to the checkpoint; pass --dataset")?;
            let pipeline = match model.config().head_kind {
                HeadKind::Both => Pipeline::Expvit,
                HeadKind::Selector => Pipeline::Posthoc,
                HeadKind::Classifier => Pipeline::Blackbox,
            };
            let mut cfg = TrainConfig::new(DatasetSpec::new(name), model.config().clone(), pipeline);
            cfg.frac = Some(args.frac.unwrap_or(0.1));
            cfg
        }
    };
    if let Some(f) = args.frac {
        cfg.frac = Some(f);
    }
    if let Some(s) = args.seed_eval {
        cfg.seeds.eval = s;
    }
    let data = TrainData::load(&cfg.dataset, root, cfg.model.patch_size)?;
    if cfg.pipeline == Pipeline::Blackbox {
        let acc = catx_core::eval::eval_acc(&model, &data.test)?;
        println!("{}", json!({ "acc": acc, "n_test": data.test.len() }));
        return Ok(ExitCode::SUCCESS);
    }
    let bb = if cfg.pipeline == Pipeline::Posthoc {
        let path = args
            .blackbox
            .clone()
            .or(cfg.blackbox_checkpoint.clone())
            .context("post-hoc evaluation needs --blackbox")?;
        Some(catx_core::checkpoint::load(&path, None)?.0)
    } else {
        None
    };
    let report = cells::evaluate_cell(&cfg, &model, bb.as_ref(), &data)?;
    if !args.no_ledger {
        catx_core::report::append_ledger(&layout.ledger(), &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn report(
    layout: &Layout,
    datasets: Option<&[DatasetName]>,
    format: Format,
    fracs: &[f64],
    ledger: Option<&Path>,
) -> Result<ExitCode> {
    let ledger = ledger.map(Path::to_path_buf).unwrap_or_else(|| layout.ledger());
    let records = read_ledger(&ledger)?;
    let names: Vec<DatasetName> = match datasets {
        Some(d) => d.to_vec(),
        None => DatasetName::ALL
            .into_iter()
            .filter(|d| records.iter().any(|r| r.dataset == *d))
            .collect(),
    };
    if names.is_empty() {
        bail!("{} has no records", ledger.display());
    }
    std::fs::create_dir_all(&layout.out_dir)?;
    let mut complete = true;
    for name in names {
        if !records.iter().any(|r| r.dataset == name) {
            bail!("{} has no records for {name}", ledger.display());
        }
        let table = ResultsTable::from_ledger(&records, name, fracs);
        complete &= table.is_complete();
        if matches!(format, Format::Csv | Format::Both) {
            let p = layout.out_dir.join(format!("{name}_table.csv"));
            std::fs::write(&p, table.to_csv())?;
            eprintln!("wrote {}", p.display());
        }
        if matches!(format, Format::Markdown | Format::Both) {
            let p = layout.out_dir.join(format!("{name}_table.md"));
            let md = table.to_markdown();
            std::fs::write(&p, &md)?;
            eprintln!("wrote {}", p.display());
            println!("{md}");
        } else {
            println!("{}", table.to_csv());
        }
    }
    if complete {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("some cells are missing; the tables above contain gaps");
        Ok(ExitCode::from(2))
    }
}

fn explain(root: &Path, args: &ExplainArgs) -> Result<ExitCode> {
    let (model, manifest) = cells::load_run(&args.checkpoint)?;
    let mc = model.config().clone();
    if !mc.has_selector() {
        bail!("{} has no selection head", args.checkpoint.display());
    }
    let name = args
        .dataset
        .or(manifest.as_ref().map(|m| m.config.dataset.name))
        .unwrap_or(if mc.channels == 3 {
            DatasetName::Cifar
        } else {
            DatasetName::Mnist
        });
    let spec = manifest
        .as_ref()
        .map(|m| m.config.dataset.clone())
        .unwrap_or_else(|| DatasetSpec::new(name));
    let plane = mc.image_size * mc.image_size;

    let (unit_pixels, stem) = match (&args.image, args.test_index) {
        (Some(path), _) => {
            let px = load_image(path, mc.channels, mc.image_size)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or("image".into());
            (px, stem)
        }
        (None, Some(i)) => {
            let test = of_split(&load_dataset(&spec, root)?, Split::Test);
            let x = test
                .get(i)
                .with_context(|| format!("test split has {} instances", test.len()))?;
            let px = x
                .pixels
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let (m, s) = spec.normalization[j / plane];
                    v * s + m
                })
                .collect();
            (px, format!("{name}_test{i}"))
        }
        (None, None) => bail!("pass --image or --test-index"),
    };
    let normalized: Vec<f32> = unit_pixels
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let (m, s) = spec.normalization[j / plane];
            (v - m) / s
        })
        .collect();
    let seq = patchify_pixels(&normalized, mc.channels, mc.image_size, mc.image_size, mc.patch_size)?;
    let out = model.forward(&seq.patches, 1)?;
    let probs = out.sel_probs()?.to_vec();
    let style = OverlayStyle {
        dim: if args.hard_black { 0.0 } else { 0.25 },
        grid: args.grid,
    };

    std::fs::create_dir_all(&args.out)?;
    let mut selections = Vec::new();
    for &frac in &args.fracs {
        let k = compute_k(frac, mc.num_patches)?;
        let mask = hard_topk(&probs, k)?;
        let img = render_overlay(&unit_pixels, mc.channels, mc.image_size, mc.patch_size, &mask, style)?;
        let file = args.out.join(format!("{stem}_frac{frac}.png"));
        img.save(&file)?;
        selections.push(json!({ "frac": frac, "k": k, "patches": mask.selected(), "file": file }));
    }
    let sidecar = args.out.join(format!("{stem}_selection.json"));
    let class_probs = out.class_probs().ok().map(<[f32]>::to_vec);
    let doc = json!({
        "instance": stem,
        "checkpoint": args.checkpoint,
        "grid": [mc.image_size / mc.patch_size, mc.image_size / mc.patch_size],
        "selection_probs": probs,
        "selection_sum": probs.iter().map(|&p| p as f64).sum::<f64>(),
        "class_probs": class_probs,
        "style": style,
        "selections": selections,
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&doc)?)?;
    println!("{}", sidecar.display());
    Ok(ExitCode::SUCCESS)
}
