//! Times training on a slice of MNIST (3,8) to size a run before committing to it.
//!
//! `cargo run --release --example throughput -- [dim] [depth] [train_limit] [blackbox|expvit] [epochs] [lr]`
//! Reads data from `CATX_DATA_ROOT` (default `data`).

use std::time::Instant;

use catx_core::data::{resolve_data_root, DatasetName, DatasetSpec};
use catx_core::train::{train, Pipeline, TrainConfig, TrainData};
use catx_core::vit::ModelConfig;

fn main() -> catx_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dim: usize = args.get(1).map_or(64, |s| s.parse().unwrap());
    let depth: usize = args.get(2).map_or(2, |s| s.parse().unwrap());
    let limit: usize = args.get(3).map_or(1024, |s| s.parse().unwrap());
    let pipeline: Pipeline = args.get(4).map_or(Pipeline::Blackbox, |s| s.parse().unwrap());
    let spec = DatasetSpec::new(DatasetName::Mnist);
    let t = Instant::now();
    let data = TrainData::load(&spec, &resolve_data_root(None), 4)?;
    println!(
        "load {:?} train {} val {} test {}",
        t.elapsed(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let model = ModelConfig::for_dataset(DatasetName::Mnist, pipeline.head_kind(), dim, depth);
    let mut cfg = TrainConfig::new(spec, model, pipeline);
    cfg.epochs = args.get(5).map_or(1, |s| s.parse().unwrap());
    cfg.learning_rate = args.get(6).map_or(1e-4, |s| s.parse().unwrap());
    cfg.train_limit = Some(limit);
    if pipeline == Pipeline::Expvit {
        cfg.frac = Some(0.1);
        cfg.lambda = Some(0.9);
    }
    let t = Instant::now();
    let out = train(&cfg, &data)?;
    let secs = t.elapsed().as_secs_f64();
    println!(
        "{limit} train imgs + {} val in {secs:.2}s; {:?}",
        data.val.len(),
        out.manifest.epochs
    );
    Ok(())
}
