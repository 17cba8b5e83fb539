//! Finite-difference gradient checks in f64 for the relaxed sampler and
//! for the full training objectives of a tiny model.
//!
//! A coordinate counts as a mismatch when its relative error reaches
//! [`TOLERANCE`] and the absolute gap also exceeds the round-off floor of
//! the difference quotient, `max(1e-9, 10 ε |L| / h)` for a loss of size
//! `|L|`. Gaps below that floor are indistinguishable from rounding noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::objectives::{cross_entropy_probs, selection_loss_probs};
use crate::sampler::{apply_mask_batch, gumbel_noise, relaxed_backward, relaxed_from_noise, MaskMode};
use crate::train::{expvit_step, posthoc_step};
use crate::vit::{Grads, HeadKind, ModelConfig, Vit};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Absolute gap below which a coordinate is not judged.
    pub floor: f64,
    /// Coordinates whose numeric gradient exceeds 1e-6 in magnitude.
    pub nontrivial: usize,
    pub mismatches: Vec<String>,
    /// Largest relative error among coordinates whose gradient exceeds 1e-6.
    pub worst_relative: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked >= 100 && self.nontrivial * 4 >= self.checked * 3
    }

    fn add(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        if numeric.abs() > 1e-6 {
            self.nontrivial += 1;
        }
        let gap = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { gap / scale } else { 0.0 };
        if scale > 1e-6 {
            self.worst_relative = self.worst_relative.max(rel);
        }
        if gap > self.floor.max(1e-9) && rel >= TOLERANCE {
            self.mismatches
                .push(format!("{}: analytic {analytic:.4e} numeric {numeric:.4e}", label()));
        }
    }
}

/// The dim-8, depth-1, four-patch model used by the checks.
pub fn tiny_config(head_kind: HeadKind) -> ModelConfig {
    ModelConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_dim: 16,
        patch_size: 2,
        channels: 1,
        image_size: 4,
        num_patches: 4,
        num_classes: 2,
        head_kind,
        has_sel_token: head_kind == HeadKind::Both,
    }
}

/// Inflates a fresh init so the check runs away from the near-linear regime.
fn spread(model: &mut Vit<f64>, rng: &mut ChaCha8Rng) {
    for p in model.params_mut().entries_mut() {
        for v in &mut p.value {
            *v = *v * 10.0 + rng.random_range(-0.05..0.05);
        }
    }
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A black level below every input value, so masking shifts the inputs.
fn dark(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..-1.0)).collect()
}

fn noise(batch: usize, k: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..batch).flat_map(|_| gumbel_noise::<f64, _>(rng, k, p)).collect()
}

fn round_off_floor(loss: f64) -> f64 {
    10.0 * f64::EPSILON * loss.abs() / STEP
}

/// Fourth-order central difference `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`.
/// With error `O(h^4)` it tolerates a step large enough to keep round-off
/// well below the size of small gradients.
fn central(f: &mut impl FnMut(f64) -> f64) -> f64 {
    let h = STEP;
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// `count` random coordinates plus the first entry of every tensor.
fn coordinates(model: &Vit<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let entries = model.params().entries();
    let flat: Vec<(usize, usize)> = entries
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.value.len()).map(move |i| (t, i)))
        .collect();
    let mut picked: Vec<(usize, usize)> = sample(rng, flat.len(), count.min(flat.len()))
        .into_iter()
        .map(|i| flat[i])
        .collect();
    for t in 0..entries.len() {
        if !picked.iter().any(|&(pt, _)| pt == t) {
            picked.push((t, 0));
        }
    }
    picked
}

fn compare<F>(model: &mut Vit<f64>, grads: &Grads<f64>, coords: &[(usize, usize)], loss: F) -> GradReport
where
    F: Fn(&Vit<f64>) -> f64,
{
    let mut report = GradReport {
        floor: round_off_floor(loss(model)),
        ..GradReport::default()
    };
    for &(t, i) in coords {
        let orig = model.params().entries()[t].value[i];
        let mut at = |delta: f64| {
            model.params_mut().entries_mut()[t].value[i] = orig + delta;
            loss(model)
        };
        let numeric = central(&mut at);
        model.params_mut().entries_mut()[t].value[i] = orig;
        let name = &model.params().entries()[t].name;
        report.add(|| format!("{name}[{i}]"), grads.values[t][i], numeric);
    }
    report
}

/// Logit gradients of the relaxed k-hot mask under a random linear read-out,
/// over `trials` instances of 16 patches with k = 3.
pub fn check_sampler(seed: u64, trials: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, k, tau) = (16, 3, 0.5);
    let mut report = GradReport::default();
    for _ in 0..trials {
        let logits: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let weights = uniform(p, &mut rng);
        let g = noise(1, k, p, &mut rng);
        let objective = |l: &[f64]| -> Result<f64> {
            let (m, _) = relaxed_from_noise(l, &g, k, tau)?;
            Ok(m.iter().zip(&weights).map(|(a, b)| a * b).sum())
        };
        let (_, cache) = relaxed_from_noise(&logits, &g, k, tau)?;
        let analytic = relaxed_backward(&cache, &weights);
        report.floor = report.floor.max(round_off_floor(objective(&logits)?));
        for i in 0..p {
            let numeric = central(&mut |delta| {
                let mut shifted = logits.clone();
                shifted[i] += delta;
                objective(&shifted).expect("valid logits")
            });
            report.add(|| format!("logit[{i}]"), analytic[i], numeric);
        }
    }
    Ok(report)
}

/// The combined objective rebuilt from forward passes only, with the
/// full-input class distribution in the selection term held at `p_full`.
#[allow(clippy::too_many_arguments)]
pub fn expvit_objective(
    model: &Vit<f64>,
    x: &[f64],
    black: &[f64],
    labels: &[usize],
    noise: &[f64],
    k: usize,
    tau: f64,
    lambda: f64,
    p_full: &[f64],
) -> Result<f64> {
    let cfg = model.config();
    let (p, pd, c) = (cfg.num_patches, cfg.patch_dim(), cfg.num_classes);
    let b = labels.len();
    let out = model.forward(x, b)?;
    let probs = out.class_probs()?;
    let logits = out.sel_logits()?;
    let mut masks = Vec::with_capacity(b * p);
    for i in 0..b {
        let (m, _) = relaxed_from_noise(&logits[i * p..(i + 1) * p], &noise[i * k * p..(i + 1) * k * p], k, tau)?;
        masks.extend(m);
    }
    let removed = apply_mask_batch(x, &masks, p, pd, black, MaskMode::Remove)?;
    let rem = model.forward(&removed, b)?;
    let prem = rem.class_probs()?;
    let (mut ce, mut sel) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        ce += cross_entropy_probs(&probs[i * c..(i + 1) * c], y)?;
        sel += selection_loss_probs(&p_full[i * c..(i + 1) * c], &prem[i * c..(i + 1) * c])?;
    }
    Ok((lambda * ce + (1.0 - lambda) * sel) / b as f64)
}

/// Parameter gradients of the expViT objective on a batch of three.
pub fn check_expvit(seed: u64, coords: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(HeadKind::Both);
    let mut model = Vit::<f64>::new(cfg.clone(), rng.random())?;
    spread(&mut model, &mut rng);
    let (b, k, tau, lambda) = (3, 2, 0.5, 0.6);
    let x = uniform(b * cfg.num_patches * cfg.patch_dim(), &mut rng);
    let black = dark(cfg.patch_dim(), &mut rng);
    let labels = vec![0, 1, 1];
    let g = noise(b, k, cfg.num_patches, &mut rng);

    let mut grads = model.params().zeros_like();
    let (breakdown, _) = expvit_step(&model, &x, &black, &labels, &g, k, tau, lambda, Some(&mut grads))?;
    let p_full = model.forward(&x, b)?.class_probs()?.to_vec();
    let base = expvit_objective(&model, &x, &black, &labels, &g, k, tau, lambda, &p_full)?;
    let mut report = GradReport::default();
    if (base - breakdown.total).abs() > 1e-12 {
        report.mismatches.push(format!(
            "training loss {} differs from rebuilt objective {base}",
            breakdown.total
        ));
    }
    let coords = coordinates(&model, coords, &mut rng);
    let r = compare(&mut model, &grads, &coords, |m| {
        expvit_objective(m, &x, &black, &labels, &g, k, tau, lambda, &p_full).expect("forward on valid input")
    });
    report.floor = r.floor;
    report.checked = r.checked;
    report.nontrivial = r.nontrivial;
    report.worst_relative = r.worst_relative;
    report.mismatches.extend(r.mismatches);
    Ok(report)
}

/// Selector gradients of the post-hoc objective against a frozen tiny
/// classifier, on a batch of three.
pub fn check_posthoc(seed: u64, coords: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blackbox = Vit::<f64>::new(tiny_config(HeadKind::Classifier), rng.random())?;
    spread(&mut blackbox, &mut rng);
    let cfg = tiny_config(HeadKind::Selector);
    let mut selector = Vit::<f64>::new(cfg.clone(), rng.random())?;
    spread(&mut selector, &mut rng);
    let (b, k, tau) = (3, 1, 0.5);
    let x = uniform(b * cfg.num_patches * cfg.patch_dim(), &mut rng);
    let black = dark(cfg.patch_dim(), &mut rng);
    let g = noise(b, k, cfg.num_patches, &mut rng);

    let mut grads = selector.params().zeros_like();
    posthoc_step(&selector, &blackbox, &x, &black, &g, k, tau, Some(&mut grads))?;
    let coords = coordinates(&selector, coords, &mut rng);
    Ok(compare(&mut selector, &grads, &coords, |m| {
        posthoc_step(m, &blackbox, &x, &black, &g, k, tau, None).expect("forward on valid input")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradients_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config(HeadKind::Classifier);
        let mut model = Vit::<f64>::new(cfg.clone(), 2).unwrap();
        spread(&mut model, &mut rng);
        let x = uniform(2 * cfg.num_patches * cfg.patch_dim(), &mut rng);
        let labels = [0, 1];
        let mut grads = model.params().zeros_like();
        crate::train::blackbox_step(&model, &x, &labels, Some(&mut grads)).unwrap();
        let loss = |m: &Vit<f64>| crate::train::blackbox_step(m, &x, &labels, None).unwrap().0;
        let coords = coordinates(&model, 40, &mut rng);
        assert!(compare(&mut model, &grads, &coords, loss).mismatches.is_empty());

        let &(t, i) = coords.iter().find(|&&(t, i)| grads.values[t][i].abs() > 1e-4).unwrap();
        grads.values[t][i] *= 1.01;
        let r = compare(&mut model, &grads, &coords, loss);
        assert_eq!(r.mismatches.len(), 1, "{:?}", r.mismatches);
    }
}
