use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{trunc_normal, Block, BlockCache, LayerNorm, Linear, LnCache};
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{CatxError, Result};
use crate::sampler::{apply_mask_batch, MaskMode};
use crate::scalar::{softmax, Scalar};

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: Linear,
    cls: ParamId,
    sel: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    class_head: Option<Linear>,
    sel_head: Option<Linear>,
}

impl Layout {
    fn build<T: Scalar>(config: &ModelConfig, ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        let patch_embed = Linear::new(ps, rng, "patch_embed", config.patch_dim(), d);
        let cls = ps.register("cls_token".into(), vec![d], trunc_normal(rng, d));
        let sel = config
            .has_sel_token
            .then(|| ps.register("sel_token".into(), vec![d], trunc_normal(rng, d)));
        let n = config.num_tokens();
        let pos = ps.register("pos_embed".into(), vec![n, d], trunc_normal(rng, n * d));
        let blocks = (0..config.depth)
            .map(|i| Block::new(ps, rng, &format!("blocks.{i}"), d, config.heads, config.mlp_dim))
            .collect();
        let norm = LayerNorm::new(ps, "norm", d);
        let class_head = config
            .has_classifier()
            .then(|| Linear::new(ps, rng, "class_head", d, config.num_classes));
        let sel_head = config
            .has_selector()
            .then(|| Linear::new(ps, rng, "sel_head", d, config.num_patches));
        Layout {
            patch_embed,
            cls,
            sel,
            pos,
            blocks,
            norm,
            class_head,
            sel_head,
        }
    }
}

/// Vision transformer with a cls token, an optional sel token, and
/// classification and/or selection heads.
#[derive(Debug, Clone)]
pub struct Vit<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Head outputs for a batch; each present field is `[batch × width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<T> {
    pub batch: usize,
    pub class_logits: Option<Vec<T>>,
    pub class_probs: Option<Vec<T>>,
    pub sel_logits: Option<Vec<T>>,
    pub sel_probs: Option<Vec<T>>,
}

impl<T: Scalar> Outputs<T> {
    pub fn class_probs(&self) -> Result<&[T]> {
        self.class_probs
            .as_deref()
            .ok_or_else(|| CatxError::config("model has no classification head"))
    }

    pub fn sel_probs(&self) -> Result<&[T]> {
        self.sel_probs
            .as_deref()
            .ok_or_else(|| CatxError::config("model has no selection head"))
    }

    pub fn sel_logits(&self) -> Result<&[T]> {
        self.sel_logits
            .as_deref()
            .ok_or_else(|| CatxError::config("model has no selection head"))
    }
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    input: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LnCache<T>,
    normed: Vec<T>,
}

impl<T: Scalar> Vit<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng);
        Ok(Vit { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Vit<U> {
        Vit {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, patches: &[T], batch: usize) -> Result<()> {
        let want = batch * self.config.num_patches * self.config.patch_dim();
        if patches.len() != want {
            return Err(CatxError::shape(format!(
                "expected {batch} x {} patches x {} values, got {} values",
                self.config.num_patches,
                self.config.patch_dim(),
                patches.len()
            )));
        }
        Ok(())
    }

    /// Inference forward over `[batch × num_patches × patch_dim]` patches.
    pub fn forward(&self, patches: &[T], batch: usize) -> Result<Outputs<T>> {
        self.check_input(patches, batch)?;
        Ok(self.run(patches, batch, false).0)
    }

    /// Forward with the patches first masked by `mask` (`[batch × num_patches]`),
    /// fading toward the normalized all-black patch `black`.
    pub fn forward_masked(
        &self,
        patches: &[T],
        batch: usize,
        mask: Option<&[T]>,
        black: &[T],
        mode: MaskMode,
    ) -> Result<Outputs<T>> {
        match mask {
            Some(m) if mode != MaskMode::None => {
                let masked = apply_mask_batch(
                    patches,
                    m,
                    self.config.num_patches,
                    self.config.patch_dim(),
                    black,
                    mode,
                )?;
                self.forward(&masked, batch)
            }
            _ => self.forward(patches, batch),
        }
    }

    /// Forward pass that keeps what [`Vit::backward`] needs.
    pub fn forward_train(&self, patches: &[T], batch: usize) -> Result<(Outputs<T>, ForwardCache<T>)> {
        self.check_input(patches, batch)?;
        let (out, cache) = self.run(patches, batch, true);
        Ok((out, cache.expect("cache kept")))
    }

    fn run(&self, patches: &[T], batch: usize, keep: bool) -> (Outputs<T>, Option<ForwardCache<T>>) {
        let cfg = &self.config;
        let (d, p, t) = (cfg.dim, cfg.num_patches, cfg.special_tokens());
        let n = cfg.num_tokens();
        let ps = &self.params;

        let embedded = self.layout.patch_embed.forward(ps, patches, batch * p);
        let pos = ps.get(self.layout.pos);
        let mut x = vec![T::zero(); batch * n * d];
        for b in 0..batch {
            let seq = &mut x[b * n * d..(b + 1) * n * d];
            seq[..d].copy_from_slice(ps.get(self.layout.cls));
            if let Some(sel) = self.layout.sel {
                seq[d..2 * d].copy_from_slice(ps.get(sel));
            }
            seq[t * d..].copy_from_slice(&embedded[b * p * d..(b + 1) * p * d]);
            for (v, &e) in seq.iter_mut().zip(pos) {
                *v += e;
            }
        }

        let mut caches = Vec::with_capacity(if keep { cfg.depth } else { 0 });
        for block in &self.layout.blocks {
            let (next, cache) = block.forward(ps, &x, batch, n, keep);
            x = next;
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        let (normed, norm_cache) = self.layout.norm.forward(ps, &x);

        let gather = |token: usize| -> Vec<T> {
            let mut rows = Vec::with_capacity(batch * d);
            for b in 0..batch {
                let at = (b * n + token) * d;
                rows.extend_from_slice(&normed[at..at + d]);
            }
            rows
        };
        let head = |lin: &Linear, token: usize| {
            let logits = lin.forward(ps, &gather(token), batch);
            let probs: Vec<T> = logits.chunks_exact(lin.fan_out).flat_map(|row| softmax(row)).collect();
            (logits, probs)
        };
        let (class_logits, class_probs) = match &self.layout.class_head {
            Some(lin) => {
                let (l, p) = head(lin, 0);
                (Some(l), Some(p))
            }
            None => (None, None),
        };
        let (sel_logits, sel_probs) = match &self.layout.sel_head {
            Some(lin) => {
                let (l, p) = head(lin, cfg.selector_token());
                (Some(l), Some(p))
            }
            None => (None, None),
        };

        let outputs = Outputs {
            batch,
            class_logits,
            class_probs,
            sel_logits,
            sel_probs,
        };
        let cache = keep.then(|| ForwardCache {
            batch,
            input: patches.to_vec(),
            blocks: caches,
            norm: norm_cache,
            normed,
        });
        (outputs, cache)
    }

    /// Backpropagates logit gradients. Parameter gradients accumulate into
    /// `grads` when given; returns the gradient with respect to the input
    /// patches when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_class_logits: Option<&[T]>,
        d_sel_logits: Option<&[T]>,
        mut grads: Option<&mut Grads<T>>,
        need_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        let cfg = &self.config;
        let ps = &self.params;
        let batch = cache.batch;
        let (d, p, t) = (cfg.dim, cfg.num_patches, cfg.special_tokens());
        let n = cfg.num_tokens();

        let mut dnormed = vec![T::zero(); batch * n * d];
        let mut head_back = |lin: &Option<Linear>, dlogits: Option<&[T]>, token: usize, what: &str| -> Result<()> {
            let Some(dl) = dlogits else { return Ok(()) };
            let lin = lin
                .as_ref()
                .ok_or_else(|| CatxError::config(format!("model has no {what} head")))?;
            if dl.len() != batch * lin.fan_out {
                return Err(CatxError::shape(format!(
                    "{what} logit gradient has {} values, expected {}",
                    dl.len(),
                    batch * lin.fan_out
                )));
            }
            let mut x = Vec::with_capacity(batch * d);
            for b in 0..batch {
                let at = (b * n + token) * d;
                x.extend_from_slice(&cache.normed[at..at + d]);
            }
            let dx = lin
                .backward(ps, grads.as_deref_mut(), &x, dl, batch, true)
                .expect("dx requested");
            for b in 0..batch {
                let at = (b * n + token) * d;
                for (g, &v) in dnormed[at..at + d].iter_mut().zip(&dx[b * d..(b + 1) * d]) {
                    *g += v;
                }
            }
            Ok(())
        };
        head_back(&self.layout.class_head, d_class_logits, 0, "classification")?;
        head_back(&self.layout.sel_head, d_sel_logits, cfg.selector_token(), "selection")?;

        let mut dx = self
            .layout
            .norm
            .backward(ps, grads.as_deref_mut(), &cache.norm, &dnormed);
        for (block, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            dx = block.backward(ps, grads.as_deref_mut(), bc, &dx, batch, n);
        }

        if let Some(g) = grads.as_deref_mut() {
            let dpos = g.get_mut(self.layout.pos);
            for seq in dx.chunks_exact(n * d) {
                for (a, &v) in dpos.iter_mut().zip(seq) {
                    *a += v;
                }
            }
            let dcls = g.get_mut(self.layout.cls);
            for seq in dx.chunks_exact(n * d) {
                for (a, &v) in dcls.iter_mut().zip(&seq[..d]) {
                    *a += v;
                }
            }
            if let Some(sel) = self.layout.sel {
                let dsel = g.get_mut(sel);
                for seq in dx.chunks_exact(n * d) {
                    for (a, &v) in dsel.iter_mut().zip(&seq[d..2 * d]) {
                        *a += v;
                    }
                }
            }
        }
        let mut dembed = Vec::with_capacity(batch * p * d);
        for seq in dx.chunks_exact(n * d) {
            dembed.extend_from_slice(&seq[t * d..]);
        }
        Ok(self
            .layout
            .patch_embed
            .backward(ps, grads, &cache.input, &dembed, batch * p, need_input_grad))
    }

    /// Replaces parameter values by name; shapes must match exactly.
    pub(crate) fn load_values(&mut self, named: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(CatxError::Checkpoint(format!(
                "archive has {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, shape, value) in named {
            let slot = self
                .params
                .entries_mut()
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| CatxError::Checkpoint(format!("unexpected tensor '{name}'")))?;
            if slot.shape != shape {
                return Err(CatxError::Checkpoint(format!(
                    "tensor '{name}' has shape {shape:?}, expected {:?}",
                    slot.shape
                )));
            }
            slot.value = value;
        }
        Ok(())
    }
}
