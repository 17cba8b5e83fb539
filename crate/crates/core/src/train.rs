//! Training pipelines: the black-box classifier, the post-hoc selector
//! trained against a frozen black-box, and the jointly trained explainer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointManifest};
use crate::data::{self, patchify, Batches, DatasetSpec, ImageInstance, Split};
use crate::error::{CatxError, Result};
use crate::objectives::{
    self, batch_mean, cross_entropy_grad, cross_entropy_probs, selection_loss_grad, selection_loss_probs, LossBreakdown,
};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::{
    apply_mask_backward, apply_mask_batch, batch_noise, compute_k, relaxed_backward, relaxed_from_noise, MaskMode,
    RelaxedCache,
};
use crate::scalar::{argmax, softmax_backward, Scalar};
use crate::vit::{Grads, HeadKind, ModelConfig, Vit};

/// Version stamped into run manifests and ledgers.
pub const RUN_FORMAT_VERSION: u32 = 1;

/// Noise stream reserved for validation passes so they are comparable across epochs.
const VAL_NOISE_EPOCH: u64 = u32::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Blackbox,
    Posthoc,
    Expvit,
}

impl Pipeline {
    pub fn head_kind(self) -> HeadKind {
        match self {
            Pipeline::Blackbox => HeadKind::Classifier,
            Pipeline::Posthoc => HeadKind::Selector,
            Pipeline::Expvit => HeadKind::Both,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Blackbox => "blackbox",
            Pipeline::Posthoc => "posthoc",
            Pipeline::Expvit => "expvit",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = CatxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blackbox" => Ok(Pipeline::Blackbox),
            "posthoc" => Ok(Pipeline::Posthoc),
            "expvit" => Ok(Pipeline::Expvit),
            other => Err(CatxError::config(format!("unknown pipeline '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub gumbel: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            shuffle: 2,
            gumbel: 3,
            eval: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub pipeline: Pipeline,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: Option<f64>,
    pub frac: Option<f64>,
    pub temperature: f64,
    pub seeds: Seeds,
    pub blackbox_checkpoint: Option<PathBuf>,
    /// Use only the first `n` training instances.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

impl TrainConfig {
    /// Ten epochs of Adam at 1e-4, batch 128, temperature 0.5.
    pub fn new(dataset: DatasetSpec, model: ModelConfig, pipeline: Pipeline) -> Self {
        TrainConfig {
            dataset,
            model,
            pipeline,
            epochs: 10,
            learning_rate: 1e-4,
            batch_size: 128,
            lambda: None,
            frac: None,
            temperature: 0.5,
            seeds: Seeds::default(),
            blackbox_checkpoint: None,
            train_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        let m = &self.model;
        let name = self.dataset.name;
        if m.channels != name.channels() || m.image_size != name.image_side() {
            return Err(CatxError::config(format!(
                "model expects {}x{}x{} images but {name} has {}x{}x{}",
                m.channels,
                m.image_size,
                m.image_size,
                name.channels(),
                name.image_side(),
                name.image_side()
            )));
        }
        if m.head_kind != self.pipeline.head_kind() {
            return Err(CatxError::config(format!(
                "{} pipeline needs head kind {:?}, got {:?}",
                self.pipeline,
                self.pipeline.head_kind(),
                m.head_kind
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CatxError::config("epochs and batch_size must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(CatxError::config("learning rate must be positive"));
        }
        let needs_frac = self.pipeline != Pipeline::Blackbox;
        let needs_lambda = self.pipeline == Pipeline::Expvit;
        let needs_bb = self.pipeline == Pipeline::Posthoc;
        if self.frac.is_some() != needs_frac {
            return Err(CatxError::config(format!(
                "frac is {} for the {} pipeline",
                if needs_frac { "required" } else { "not accepted" },
                self.pipeline
            )));
        }
        if self.lambda.is_some() != needs_lambda {
            return Err(CatxError::config(format!(
                "lambda is {} for the {} pipeline",
                if needs_lambda { "required" } else { "not accepted" },
                self.pipeline
            )));
        }
        if self.blackbox_checkpoint.is_some() != needs_bb {
            return Err(CatxError::config(format!(
                "a black-box checkpoint is {} for the {} pipeline",
                if needs_bb { "required" } else { "not accepted" },
                self.pipeline
            )));
        }
        if let Some(frac) = self.frac {
            compute_k(frac, m.num_patches)?;
        }
        if let Some(lambda) = self.lambda {
            objectives::check_lambda(lambda)?;
        }
        if needs_frac && (self.temperature.is_nan() || self.temperature <= 0.0) {
            return Err(CatxError::config("temperature must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> Option<usize> {
        self.frac
            .map(|f| compute_k(f, self.model.num_patches).expect("validated frac"))
    }

    /// File stem naming dataset, pipeline, frac, lambda and init seed.
    pub fn run_name(&self) -> String {
        let mut name = format!("{}_{}", self.dataset.name, self.pipeline);
        if let Some(f) = self.frac {
            name.push_str(&format!("_frac{f}"));
        }
        if let Some(l) = self.lambda {
            name.push_str(&format!("_lambda{l}"));
        }
        name.push_str(&format!("_seed{}", self.seeds.init));
        name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Full-input validation accuracy, when the model classifies.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
    #[serde(default)]
    pub final_metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    /// Black-box fingerprint before and after post-hoc training.
    #[serde(default)]
    pub blackbox_fingerprint: Option<(String, String)>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CatxError::Ingestion {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != RUN_FORMAT_VERSION {
            return Err(CatxError::Migration {
                path: path.to_path_buf(),
                found,
                expected: RUN_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// Instances patchified once into a contiguous `[n × P × patch_dim]` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedSet {
    pub patches: Vec<f32>,
    pub labels: Vec<usize>,
    /// Stable per-instance identifiers (source file positions).
    pub ids: Vec<u64>,
    pub num_patches: usize,
    pub patch_dim: usize,
    /// One patch of black pixels in the same normalization; masked-out
    /// patches are replaced by it.
    pub black: Vec<f32>,
}

impl PatchedSet {
    pub fn from_instances<'a, I>(instances: I, patch_size: usize, normalization: &[(f32, f32)]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ImageInstance>,
    {
        let mut set = PatchedSet {
            patches: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            num_patches: 0,
            patch_dim: 0,
            black: data::black_patch(normalization, patch_size),
        };
        for x in instances {
            let seq = patchify(x, patch_size)?;
            if set.labels.is_empty() {
                set.num_patches = seq.num_patches();
                set.patch_dim = seq.patch_dim();
            } else if seq.num_patches() != set.num_patches || seq.patch_dim() != set.patch_dim {
                return Err(CatxError::shape("instances of mixed sizes"));
            }
            set.patches.extend_from_slice(&seq.patches);
            set.labels.push(x.label);
            set.ids.push(x.index as u64);
        }
        if !set.is_empty() && set.black.len() != set.patch_dim {
            return Err(CatxError::shape(format!(
                "{} normalization pairs for patches of width {}",
                normalization.len(),
                set.patch_dim
            )));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.num_patches * self.patch_dim
    }

    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let s = self.stride();
        let mut x = Vec::with_capacity(indices.len() * s);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend(self.patches[i * s..(i + 1) * s].iter().map(|&v| T::from_f32(v)));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> PatchedSet {
        let s = self.stride();
        PatchedSet {
            patches: indices
                .iter()
                .flat_map(|&i| self.patches[i * s..(i + 1) * s].iter().copied())
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_patches: self.num_patches,
            patch_dim: self.patch_dim,
            black: self.black.clone(),
        }
    }

    pub fn black<T: Scalar>(&self) -> Vec<T> {
        self.black.iter().map(|&v| T::from_f32(v)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: PatchedSet,
    pub val: PatchedSet,
    pub test: PatchedSet,
}

impl TrainData {
    pub fn from_instances(
        instances: &[ImageInstance],
        patch_size: usize,
        normalization: &[(f32, f32)],
    ) -> Result<Self> {
        let pick =
            |s: Split| PatchedSet::from_instances(instances.iter().filter(|x| x.split == s), patch_size, normalization);
        Ok(TrainData {
            train: pick(Split::Train)?,
            val: pick(Split::Val)?,
            test: pick(Split::Test)?,
        })
    }

    pub fn load(spec: &DatasetSpec, root: &Path, patch_size: usize) -> Result<Self> {
        Self::from_instances(&data::load_dataset(spec, root)?, patch_size, &spec.normalization)
    }
}

/// A trained model together with its run record.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Vit<f32>,
    pub manifest: RunManifest,
}

impl TrainOutcome {
    /// Writes `<run_name>.ckpt` and `<run_name>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let name = self.manifest.config.run_name();
        let ckpt = dir.join(format!("{name}.ckpt"));
        let json = dir.join(format!("{name}.json"));
        let last = &self.manifest.epochs[self.manifest.selected_epoch - 1];
        let mut metrics = BTreeMap::new();
        metrics.insert("val_loss".to_string(), last.val_loss);
        if let Some(a) = last.val_accuracy {
            metrics.insert("val_accuracy".to_string(), a);
        }
        let cm = CheckpointManifest::new(
            self.model.config(),
            self.manifest.config.seeds.init,
            self.manifest.selected_epoch,
            metrics,
        );
        checkpoint::save(&ckpt, &self.model, &cm)?;
        self.manifest.save(&json)?;
        Ok((ckpt, json))
    }
}

fn row_softmax_backward<T: Scalar>(probs: &[T], dprobs: &[T], width: usize) -> Vec<T> {
    probs
        .chunks_exact(width)
        .zip(dprobs.chunks_exact(width))
        .flat_map(|(p, d)| softmax_backward(p, d))
        .collect()
}

/// Relaxed masks for every row of a batch of selection logits.
fn relaxed_masks<T: Scalar>(
    sel_logits: &[T],
    noise: &[T],
    num_patches: usize,
    k: usize,
    temperature: T,
) -> Result<(Vec<T>, Vec<RelaxedCache<T>>)> {
    let mut masks = Vec::with_capacity(sel_logits.len());
    let mut caches = Vec::new();
    for (logits, n) in sel_logits
        .chunks_exact(num_patches)
        .zip(noise.chunks_exact(k * num_patches))
    {
        let (m, c) = relaxed_from_noise(logits, n, k, temperature)?;
        masks.extend(m);
        caches.push(c);
    }
    Ok((masks, caches))
}

fn relaxed_masks_backward<T: Scalar>(caches: &[RelaxedCache<T>], dmask: &[T], num_patches: usize) -> Vec<T> {
    caches
        .iter()
        .zip(dmask.chunks_exact(num_patches))
        .flat_map(|(c, d)| relaxed_backward(c, d))
        .collect()
}

/// Mean cross-entropy of a classifier on one batch, plus parameter gradients.
pub fn blackbox_step<T: Scalar>(
    model: &Vit<T>,
    x: &[T],
    labels: &[usize],
    grads: Option<&mut Grads<T>>,
) -> Result<(f64, usize)> {
    let batch = labels.len();
    let c = model.config().num_classes;
    let (out, cache) = model.forward_train(x, batch)?;
    let probs = out.class_probs()?;
    let mut losses = Vec::with_capacity(batch);
    let mut dprobs = Vec::with_capacity(batch * c);
    let mut correct = 0;
    let scale = T::one() / T::from_f64(batch as f64);
    for (row, &y) in probs.chunks_exact(c).zip(labels) {
        losses.push(cross_entropy_probs(row, y)?);
        dprobs.extend(cross_entropy_grad(row, y).into_iter().map(|g| g * scale));
        correct += usize::from(argmax(row) == y);
    }
    if let Some(g) = grads {
        let dlogits = row_softmax_backward(probs, &dprobs, c);
        model.backward(&cache, Some(&dlogits), None, Some(g), false)?;
    }
    Ok((batch_mean(&losses).to_f64(), correct))
}

/// Mean selection loss of a post-hoc selector against a frozen black-box on
/// one batch. Only the selector receives gradients.
#[allow(clippy::too_many_arguments)]
pub fn posthoc_step<T: Scalar>(
    selector: &Vit<T>,
    blackbox: &Vit<T>,
    x: &[T],
    black: &[T],
    noise: &[T],
    k: usize,
    temperature: T,
    grads: Option<&mut Grads<T>>,
) -> Result<f64> {
    let cfg = selector.config();
    let (p, pd) = (cfg.num_patches, cfg.patch_dim());
    let batch = x.len() / (p * pd);
    let c = blackbox.config().num_classes;

    let full = blackbox.forward(x, batch)?;
    let p_full = full.class_probs()?;
    let (sel_out, sel_cache) = selector.forward_train(x, batch)?;
    let (masks, rcaches) = relaxed_masks(sel_out.sel_logits()?, noise, p, k, temperature)?;
    let removed = apply_mask_batch(x, &masks, p, pd, black, MaskMode::Remove)?;
    let (rem_out, rem_cache) = blackbox.forward_train(&removed, batch)?;
    let p_rem = rem_out.class_probs()?;

    let mut losses = Vec::with_capacity(batch);
    let mut dprem = Vec::with_capacity(batch * c);
    let scale = T::one() / T::from_f64(batch as f64);
    for (pf, pr) in p_full.chunks_exact(c).zip(p_rem.chunks_exact(c)) {
        losses.push(selection_loss_probs(pf, pr)?);
        dprem.extend(selection_loss_grad(pf, pr).into_iter().map(|g| g * scale));
    }
    if let Some(g) = grads {
        let dlogits = row_softmax_backward(p_rem, &dprem, c);
        let dremoved = blackbox
            .backward(&rem_cache, Some(&dlogits), None, None, true)?
            .expect("input gradient requested");
        let dmask = apply_mask_backward(x, &dremoved, pd, black, MaskMode::Remove);
        let dsel = relaxed_masks_backward(&rcaches, &dmask, p);
        selector.backward(&sel_cache, None, Some(&dsel), Some(g), false)?;
    }
    Ok(batch_mean(&losses).to_f64())
}

/// Combined loss of the explainer on one batch: cross-entropy on the full
/// input plus the selection loss of the prediction with the sampled patches
/// blacked out. One full-input forward pass supplies both the
/// cross-entropy prediction and the (gradient-free) selection target.
#[allow(clippy::too_many_arguments)]
pub fn expvit_step<T: Scalar>(
    model: &Vit<T>,
    x: &[T],
    black: &[T],
    labels: &[usize],
    noise: &[T],
    k: usize,
    temperature: T,
    lambda: f64,
    grads: Option<&mut Grads<T>>,
) -> Result<(LossBreakdown, usize)> {
    let cfg = model.config();
    let (p, pd, c) = (cfg.num_patches, cfg.patch_dim(), cfg.num_classes);
    let batch = labels.len();

    let (full_out, full_cache) = model.forward_train(x, batch)?;
    let p_full = full_out.class_probs()?;
    let (masks, rcaches) = relaxed_masks(full_out.sel_logits()?, noise, p, k, temperature)?;
    let removed = apply_mask_batch(x, &masks, p, pd, black, MaskMode::Remove)?;
    let (rem_out, rem_cache) = model.forward_train(&removed, batch)?;
    let p_rem = rem_out.class_probs()?;

    let lam = T::from_f64(lambda);
    let scale = T::one() / T::from_f64(batch as f64);
    let mut ce = Vec::with_capacity(batch);
    let mut sel = Vec::with_capacity(batch);
    let mut dfull = Vec::with_capacity(batch * c);
    let mut drem = Vec::with_capacity(batch * c);
    let mut correct = 0;
    for ((pf, pr), &y) in p_full.chunks_exact(c).zip(p_rem.chunks_exact(c)).zip(labels) {
        ce.push(cross_entropy_probs(pf, y)?);
        sel.push(selection_loss_probs(pf, pr)?);
        dfull.extend(cross_entropy_grad(pf, y).into_iter().map(|g| g * lam * scale));
        drem.extend(
            selection_loss_grad(pf, pr)
                .into_iter()
                .map(|g| g * (T::one() - lam) * scale),
        );
        correct += usize::from(argmax(pf) == y);
    }
    let breakdown = objectives::combined_loss(batch_mean(&ce).to_f64(), batch_mean(&sel).to_f64(), lambda)?;

    if let Some(g) = grads {
        let drem_logits = row_softmax_backward(p_rem, &drem, c);
        let dremoved = model
            .backward(&rem_cache, Some(&drem_logits), None, Some(&mut *g), true)?
            .expect("input gradient requested");
        let dmask = apply_mask_backward(x, &dremoved, pd, black, MaskMode::Remove);
        let dsel = relaxed_masks_backward(&rcaches, &dmask, p);
        let dfull_logits = row_softmax_backward(p_full, &dfull, c);
        model.backward(&full_cache, Some(&dfull_logits), Some(&dsel), Some(g), false)?;
    }
    Ok((breakdown, correct))
}

fn select_epoch(records: &[EpochRecord], pipeline: Pipeline) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        let better = match pipeline {
            Pipeline::Blackbox => r.val_accuracy > records[best].val_accuracy,
            _ => r.val_loss < records[best].val_loss,
        };
        if better {
            best = i;
        }
    }
    best + 1
}

fn limited(cfg: &TrainConfig, set: &PatchedSet) -> PatchedSet {
    match cfg.train_limit {
        Some(n) if n < set.len() => set.subset(&(0..n).collect::<Vec<_>>()),
        _ => set.clone(),
    }
}

/// Shared epoch loop. `step` runs one batch (training when given gradient
/// buffers) and returns `(loss, correct)`.
fn run_epochs<F>(cfg: &TrainConfig, data: &TrainData, mut model: Vit<f32>, mut step: F) -> Result<TrainOutcome>
where
    F: FnMut(&Vit<f32>, &[f32], &[usize], u64, u64, Option<&mut Grads<f32>>) -> Result<(f64, usize)>,
{
    let start = Instant::now();
    let train = limited(cfg, &data.train);
    if train.is_empty() {
        return Err(CatxError::config("empty training split"));
    }
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(adam_cfg, model.params());
    let mut grads = model.params().zeros_like();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Option<f64>, Vit<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in Batches::new(train.len(), cfg.batch_size, true, cfg.seeds.shuffle, epoch as u64).enumerate() {
            let (x, y) = train.gather::<f32>(&idx);
            grads.zero();
            let (loss, _) = step(&model, &x, &y, epoch as u64, bi as u64, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(CatxError::Numeric(format!("loss became {loss} in epoch {}", epoch + 1)));
            }
            opt.update(model.params_mut(), &grads);
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = total / seen as f64;

        let (mut vloss, mut vcorrect, mut vseen) = (0.0, 0usize, 0usize);
        for (bi, idx) in Batches::new(data.val.len(), cfg.batch_size, false, 0, 0).enumerate() {
            let (x, y) = data.val.gather::<f32>(&idx);
            let (loss, correct) = step(&model, &x, &y, VAL_NOISE_EPOCH, bi as u64, None)?;
            vloss += loss * idx.len() as f64;
            vcorrect += correct;
            vseen += idx.len();
        }
        let val_loss = if vseen > 0 { vloss / vseen as f64 } else { f64::NAN };
        let val_accuracy = (model.config().has_classifier() && vseen > 0).then(|| vcorrect as f64 / vseen as f64);
        log::info!(
            "{} epoch {}/{}: train {train_loss:.5} val {val_loss:.5} acc {val_accuracy:?}",
            cfg.run_name(),
            epoch + 1,
            cfg.epochs
        );
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_accuracy,
        });
        let selected = select_epoch(&records, cfg.pipeline);
        if selected == epoch + 1 {
            best = Some((val_loss, val_accuracy, model.clone()));
        }
    }

    let selected_epoch = select_epoch(&records, cfg.pipeline);
    let (_, _, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        manifest: RunManifest {
            format_version: RUN_FORMAT_VERSION,
            config: cfg.clone(),
            epochs: records,
            selected_epoch,
            final_metrics: BTreeMap::new(),
            wall_clock_secs: start.elapsed().as_secs_f64(),
            blackbox_fingerprint: None,
        },
    })
}

/// Minimizes mean cross-entropy; keeps the best-validation-accuracy epoch.
pub fn train_blackbox(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.pipeline != Pipeline::Blackbox {
        return Err(CatxError::config("train_blackbox needs the blackbox pipeline"));
    }
    let model = Vit::new(cfg.model.clone(), cfg.seeds.init)?;
    run_epochs(cfg, data, model, |m, x, y, _, _, g| blackbox_step(m, x, y, g))
}

/// Trains a selector against a frozen black-box; keeps the lowest
/// validation selection loss. Fails if the black-box changed.
pub fn train_posthoc(cfg: &TrainConfig, data: &TrainData, blackbox: &Vit<f32>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.pipeline != Pipeline::Posthoc {
        return Err(CatxError::config("train_posthoc needs the posthoc pipeline"));
    }
    let bb_cfg = blackbox.config();
    if bb_cfg.head_kind != HeadKind::Classifier
        || bb_cfg.num_patches != cfg.model.num_patches
        || bb_cfg.patch_dim() != cfg.model.patch_dim()
    {
        return Err(CatxError::config(
            "black-box does not match the selector's input layout",
        ));
    }
    let before = blackbox.params().fingerprint();
    let k = cfg.k().expect("validated");
    let p = cfg.model.num_patches;
    let tau = cfg.temperature as f32;
    let gumbel = cfg.seeds.gumbel;
    let black = data.train.black.clone();
    let model = Vit::new(cfg.model.clone(), cfg.seeds.init)?;
    let mut outcome = run_epochs(cfg, data, model, |m, x, y, epoch, bi, g| {
        let noise = batch_noise::<f32>(gumbel, epoch, bi, y.len(), k, p);
        Ok((posthoc_step(m, blackbox, x, &black, &noise, k, tau, g)?, 0))
    })?;
    let after = blackbox.params().fingerprint();
    if before != after {
        return Err(CatxError::Checkpoint(
            "black-box parameters changed during post-hoc training".into(),
        ));
    }
    outcome.manifest.blackbox_fingerprint = Some((before, after));
    Ok(outcome)
}

/// Loads the black-box named in the config, then runs [`train_posthoc`].
pub fn train_posthoc_from_checkpoint(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let path = cfg
        .blackbox_checkpoint
        .as_ref()
        .ok_or_else(|| CatxError::config("posthoc training needs a black-box checkpoint"))?;
    let (blackbox, _) = checkpoint::load(path, None)?;
    train_posthoc(cfg, data, &blackbox)
}

/// Joint classification and selection training; keeps the lowest
/// validation total loss.
pub fn train_expvit(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.pipeline != Pipeline::Expvit {
        return Err(CatxError::config("train_expvit needs the expvit pipeline"));
    }
    let k = cfg.k().expect("validated");
    let p = cfg.model.num_patches;
    let tau = cfg.temperature as f32;
    let lambda = cfg.lambda.expect("validated");
    let gumbel = cfg.seeds.gumbel;
    let black = data.train.black.clone();
    let model = Vit::new(cfg.model.clone(), cfg.seeds.init)?;
    run_epochs(cfg, data, model, |m, x, y, epoch, bi, g| {
        let noise = batch_noise::<f32>(gumbel, epoch, bi, y.len(), k, p);
        let (loss, correct) = expvit_step(m, x, &black, y, &noise, k, tau, lambda, g)?;
        Ok((loss.total, correct))
    })
}

/// Dispatches on the configured pipeline.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    match cfg.pipeline {
        Pipeline::Blackbox => train_blackbox(cfg, data),
        Pipeline::Posthoc => train_posthoc_from_checkpoint(cfg, data),
        Pipeline::Expvit => train_expvit(cfg, data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;

    fn cfg(pipeline: Pipeline) -> TrainConfig {
        let name = DatasetName::Mnist;
        let mut c = TrainConfig::new(
            DatasetSpec::new(name),
            ModelConfig::for_dataset(name, pipeline.head_kind(), 16, 1),
            pipeline,
        );
        match pipeline {
            Pipeline::Blackbox => {}
            Pipeline::Posthoc => {
                c.frac = Some(0.1);
                c.blackbox_checkpoint = Some("bb.ckpt".into());
            }
            Pipeline::Expvit => {
                c.frac = Some(0.1);
                c.lambda = Some(0.7);
            }
        }
        c
    }

    #[test]
    fn pipeline_fields_must_match() {
        for p in [Pipeline::Blackbox, Pipeline::Posthoc, Pipeline::Expvit] {
            cfg(p).validate().unwrap();
        }
        let mut c = cfg(Pipeline::Blackbox);
        c.lambda = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = cfg(Pipeline::Expvit);
        c.lambda = None;
        assert!(c.validate().is_err());
        let mut c = cfg(Pipeline::Posthoc);
        c.blackbox_checkpoint = None;
        assert!(c.validate().is_err());
        let mut c = cfg(Pipeline::Expvit);
        c.model = ModelConfig::for_dataset(DatasetName::Cifar, HeadKind::Both, 16, 1);
        assert!(matches!(c.validate(), Err(CatxError::Config(_))));
    }

    #[test]
    fn run_names_embed_the_cell() {
        assert_eq!(cfg(Pipeline::Blackbox).run_name(), "mnist_blackbox_seed1");
        assert_eq!(cfg(Pipeline::Expvit).run_name(), "mnist_expvit_frac0.1_lambda0.7_seed1");
        assert_eq!(cfg(Pipeline::Posthoc).run_name(), "mnist_posthoc_frac0.1_seed1");
    }

    #[test]
    fn epoch_selection() {
        let r = |e, vl, va| EpochRecord {
            epoch: e,
            train_loss: 0.0,
            val_loss: vl,
            val_accuracy: va,
        };
        let recs = vec![r(1, 0.5, Some(0.9)), r(2, 0.3, Some(0.95)), r(3, 0.4, Some(0.95))];
        assert_eq!(select_epoch(&recs, Pipeline::Blackbox), 2);
        assert_eq!(select_epoch(&recs, Pipeline::Expvit), 2);
        let recs = vec![r(1, 0.5, None), r(2, 0.6, None), r(3, 0.1, None)];
        assert_eq!(select_epoch(&recs, Pipeline::Posthoc), 3);
    }

    #[test]
    fn manifest_version_mismatch_is_a_migration_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("run.json");
        std::fs::write(&p, r#"{"format_version": 0}"#).unwrap();
        assert!(matches!(
            RunManifest::load(&p),
            Err(CatxError::Migration { found: 0, .. })
        ));
    }
}
