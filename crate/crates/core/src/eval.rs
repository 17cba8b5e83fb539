//! Post-hoc accuracy (PA), average causal effect (ACE) and full-input
//! accuracy (ACC) over a test split.
//!
//! PA compares the scorer's prediction on the full image with its
//! prediction when only the selector's top-k patches are kept. ACE is the
//! mean gap in true-class probability between keeping the selected patches
//! and keeping k uniformly random ones.

use serde::{Deserialize, Serialize};

use crate::data::DatasetName;
use crate::error::{CatxError, Result};
use crate::sampler::{apply_mask_batch, compute_k, hard_topk, random_mask, MaskMode};
use crate::scalar::argmax;
use crate::train::{PatchedSet, Pipeline};
use crate::vit::Vit;

/// Default evaluation batch size.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub dataset: DatasetName,
    pub method: Pipeline,
    pub frac: f64,
    pub lambda: Option<f64>,
    pub pa: f64,
    pub ace: f64,
    pub acc: f64,
    pub n_test: usize,
    pub eval_seed: u64,
    /// Run name of the evaluated model.
    pub cell: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.pa)
            || !unit.contains(&self.acc)
            || !(-1.0..=1.0).contains(&self.ace)
            || self.n_test == 0
        {
            return Err(CatxError::Evaluation(format!("metrics out of range: {self:?}")));
        }
        Ok(())
    }
}

/// The three numbers plus the test-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalNumbers {
    pub pa: f64,
    pub ace: f64,
    pub acc: f64,
    pub n: usize,
}

/// Fraction of rows whose argmax agrees.
pub fn post_hoc_accuracy(p_full: &[Vec<f64>], p_sel: &[Vec<f64>]) -> Result<f64> {
    if p_full.is_empty() || p_full.len() != p_sel.len() {
        return Err(CatxError::Evaluation("PA needs matching, non-empty rows".into()));
    }
    let agree = p_full.iter().zip(p_sel).filter(|(a, b)| argmax(a) == argmax(b)).count();
    Ok(agree as f64 / p_full.len() as f64)
}

/// Mean of `p_sel(y) - p_rand(y)`.
pub fn average_causal_effect(p_sel_true: &[f64], p_rand_true: &[f64]) -> Result<f64> {
    if p_sel_true.is_empty() || p_sel_true.len() != p_rand_true.len() {
        return Err(CatxError::Evaluation("ACE needs matching, non-empty rows".into()));
    }
    let total: f64 = p_sel_true.iter().zip(p_rand_true).map(|(a, b)| a - b).sum();
    Ok(total / p_sel_true.len() as f64)
}

/// Fraction of rows whose argmax is the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(CatxError::Evaluation("accuracy needs matching, non-empty rows".into()));
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / probs.len() as f64)
}

fn check_pair(scorer: &Vit<f32>, selector: &Vit<f32>, test: &PatchedSet) -> Result<()> {
    if !scorer.config().has_classifier() {
        return Err(CatxError::config("scorer has no classification head"));
    }
    if !selector.config().has_selector() {
        return Err(CatxError::config("selector has no selection head"));
    }
    if test.is_empty() {
        return Err(CatxError::Evaluation("empty test set".into()));
    }
    for m in [scorer, selector] {
        if m.config().num_patches != test.num_patches || m.config().patch_dim() != test.patch_dim {
            return Err(CatxError::shape("test patches do not match the model input"));
        }
    }
    Ok(())
}

/// PA, ACE and ACC in one batched pass. `scorer` and `selector` may be the
/// same model.
pub fn evaluate(
    scorer: &Vit<f32>,
    selector: &Vit<f32>,
    test: &PatchedSet,
    frac: f64,
    eval_seed: u64,
    batch_size: usize,
) -> Result<EvalNumbers> {
    check_pair(scorer, selector, test)?;
    let (p, pd) = (test.num_patches, test.patch_dim);
    let c = scorer.config().num_classes;
    let k = compute_k(frac, p)?;
    let same = std::ptr::eq(scorer, selector);
    let (mut agree, mut hits, mut effect) = (0usize, 0usize, 0.0f64);
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = test.gather::<f32>(chunk);
        let b = chunk.len();
        let full = scorer.forward(&x, b)?;
        let sel_probs = if same {
            full.sel_probs()?.to_vec()
        } else {
            selector.forward(&x, b)?.sel_probs()?.to_vec()
        };
        let mut top = Vec::with_capacity(b * p);
        let mut rand = Vec::with_capacity(b * p);
        for (row, &i) in sel_probs.chunks_exact(p).zip(chunk) {
            top.extend(hard_topk(row, k)?.values);
            rand.extend(random_mask::<f32>(p, k, eval_seed, test.ids[i])?.values);
        }
        let kept = scorer.forward(&apply_mask_batch(&x, &top, p, pd, &test.black, MaskMode::Keep)?, b)?;
        let kept_rand = scorer.forward(&apply_mask_batch(&x, &rand, p, pd, &test.black, MaskMode::Keep)?, b)?;
        let (pf, ps, pr) = (full.class_probs()?, kept.class_probs()?, kept_rand.class_probs()?);
        for (j, &y) in labels.iter().enumerate() {
            let row = |v: &[f32]| v[j * c..(j + 1) * c].to_vec();
            let (f, s, r) = (row(pf), row(ps), row(pr));
            agree += usize::from(argmax(&f) == argmax(&s));
            hits += usize::from(argmax(&f) == y);
            effect += s[y] as f64 - r[y] as f64;
        }
    }
    let n = test.len();
    Ok(EvalNumbers {
        pa: agree as f64 / n as f64,
        ace: effect / n as f64,
        acc: hits as f64 / n as f64,
        n,
    })
}

pub fn eval_pa(scorer: &Vit<f32>, selector: &Vit<f32>, test: &PatchedSet, frac: f64) -> Result<f64> {
    Ok(evaluate(scorer, selector, test, frac, 0, EVAL_BATCH)?.pa)
}

pub fn eval_ace(scorer: &Vit<f32>, selector: &Vit<f32>, test: &PatchedSet, frac: f64, eval_seed: u64) -> Result<f64> {
    Ok(evaluate(scorer, selector, test, frac, eval_seed, EVAL_BATCH)?.ace)
}

pub fn eval_acc(model: &Vit<f32>, test: &PatchedSet) -> Result<f64> {
    if test.is_empty() {
        return Err(CatxError::Evaluation("empty test set".into()));
    }
    let c = model.config().num_classes;
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut hits = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = test.gather::<f32>(chunk);
        let out = model.forward(&x, chunk.len())?;
        hits += out
            .class_probs()?
            .chunks_exact(c)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(hits as f64 / test.len() as f64)
}

/// One-instance-at-a-time evaluation, written without the batched code
/// path. Used to cross-check [`evaluate`].
pub mod reference {
    use super::*;

    fn probs(model: &Vit<f32>, x: &[f32]) -> Result<Vec<f64>> {
        Ok(model.forward(x, 1)?.class_probs()?.iter().map(|&v| v as f64).collect())
    }

    /// Pixel by pixel: kept values stay, dropped values turn black.
    fn keep(x: &[f32], mask: &[f32], black: &[f32]) -> Vec<f32> {
        let d = black.len();
        x.iter()
            .enumerate()
            .map(|(i, &v)| if mask[i / d] == 1.0 { v } else { black[i % d] })
            .collect()
    }

    pub fn evaluate_one_by_one(
        scorer: &Vit<f32>,
        selector: &Vit<f32>,
        test: &PatchedSet,
        frac: f64,
        eval_seed: u64,
    ) -> Result<EvalNumbers> {
        check_pair(scorer, selector, test)?;
        let p = test.num_patches;
        let k = compute_k(frac, p)?;
        let (mut full, mut sel, mut psel_y, mut prand_y) = (vec![], vec![], vec![], vec![]);
        for i in 0..test.len() {
            let (x, _) = test.gather::<f32>(&[i]);
            let y = test.labels[i];
            let pf = probs(scorer, &x)?;
            let dist = selector.forward(&x, 1)?;
            let top = hard_topk(dist.sel_probs()?, k)?;
            let ps = probs(scorer, &keep(&x, &top.values, &test.black))?;
            let rnd = random_mask::<f32>(p, k, eval_seed, test.ids[i])?;
            let pr = probs(scorer, &keep(&x, &rnd.values, &test.black))?;
            psel_y.push(ps[y]);
            prand_y.push(pr[y]);
            full.push(pf);
            sel.push(ps);
        }
        Ok(EvalNumbers {
            pa: post_hoc_accuracy(&full, &sel)?,
            ace: average_causal_effect(&psel_y, &prand_y)?,
            acc: accuracy(&full, &test.labels)?,
            n: test.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_oracles() {
        let full = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]];
        let sel = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.1, 0.9], vec![0.45, 0.55]];
        assert_eq!(post_hoc_accuracy(&full, &sel).unwrap(), 0.75);
        assert_eq!(post_hoc_accuracy(&full, &full).unwrap(), 1.0);
        let ace = average_causal_effect(&[0.9, 0.8], &[0.5, 0.6]).unwrap();
        assert!((ace - 0.3).abs() < 1e-12);
        assert_eq!(average_causal_effect(&[0.4, 0.7], &[0.4, 0.7]).unwrap(), 0.0);
        assert_eq!(accuracy(&full, &[0, 1, 0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn constant_classifier_on_balanced_labels() {
        let probs = vec![vec![0.6, 0.4]; 1000];
        let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let acc = accuracy(&probs, &labels).unwrap();
        assert!((acc - 0.5).abs() <= 3.0 * (0.25f64 / 1000.0).sqrt());
    }

    #[test]
    fn batched_evaluation_matches_one_by_one() {
        use crate::vit::{HeadKind, ModelConfig};
        use rand::{Rng, SeedableRng};

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::for_dataset(DatasetName::Mnist, HeadKind::Both, 16, 1);
        let model = Vit::<f32>::new(cfg.clone(), 3).unwrap();
        let (n, p, pd) = (40, cfg.num_patches, cfg.patch_dim());
        let set = PatchedSet {
            patches: (0..n * p * pd).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            labels: (0..n).map(|i| i % 2).collect(),
            ids: (0..n as u64).collect(),
            num_patches: p,
            patch_dim: pd,
            black: vec![-1.0; pd],
        };
        let one = reference::evaluate_one_by_one(&model, &model, &set, 0.1, 4).unwrap();
        for batch in [1, 7, 64] {
            let b = evaluate(&model, &model, &set, 0.1, 4, batch).unwrap();
            assert_eq!((b.pa, b.acc), (one.pa, one.acc));
            assert!(
                (b.ace - one.ace).abs() <= 1e-6,
                "batch {batch}: {} vs {}",
                b.ace,
                one.ace
            );
        }
    }

    #[test]
    fn empty_inputs_are_evaluation_errors() {
        assert!(matches!(post_hoc_accuracy(&[], &[]), Err(CatxError::Evaluation(_))));
        assert!(matches!(average_causal_effect(&[], &[]), Err(CatxError::Evaluation(_))));
        assert!(matches!(accuracy(&[], &[]), Err(CatxError::Evaluation(_))));
    }
}
