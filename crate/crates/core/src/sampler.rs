//! Top-k patch selection: a relaxed k-hot sample built from k Concrete
//! draws combined by elementwise max, a deterministic hard top-k, uniform
//! random k-subsets, and mask application on raw patch pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchSequence;
use crate::distribution::SelectionDistribution;
use crate::error::{CatxError, Result};
use crate::scalar::{log_softmax, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Relaxed,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Scale patch `i` by `m_i`: only the selection survives.
    Keep,
    /// Scale patch `i` by `1 - m_i`: the selection is blacked out.
    Remove,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMask<T = f64> {
    pub values: Vec<T>,
    pub kind: MaskKind,
    pub k: usize,
}

impl<T: Scalar> PatchMask<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices whose entry is nonzero.
    pub fn selected(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub k: usize,
    pub noise_seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(CatxError::config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        check_k(self.k, num_patches)
    }
}

fn check_k(k: usize, p: usize) -> Result<()> {
    if k == 0 || k > p {
        return Err(CatxError::config(format!("k = {k} outside 1..={p}")));
    }
    Ok(())
}

/// `max(1, round_half_up(frac * P))`.
pub fn compute_k(frac: f64, num_patches: usize) -> Result<usize> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(CatxError::config(format!("frac {frac} outside (0, 1]")));
    }
    let k = (frac * num_patches as f64 + 0.5).floor() as usize;
    Ok(k.clamp(1, num_patches.max(1)))
}

/// `k × P` standard Gumbel draws.
pub fn gumbel_noise<T: Scalar, R: Rng>(rng: &mut R, k: usize, num_patches: usize) -> Vec<T> {
    (0..k * num_patches)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            T::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// Seeded noise for one batch of training; a distinct stream per
/// `(epoch, batch)` so draws are never reused inside a run.
pub fn batch_noise<T: Scalar>(
    seed: u64,
    epoch: u64,
    batch_index: u64,
    batch: usize,
    k: usize,
    num_patches: usize,
) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ batch_index);
    gumbel_noise(&mut rng, batch * k, num_patches)
}

/// Per-instance state for [`relaxed_backward`].
#[derive(Debug, Clone)]
pub struct RelaxedCache<T> {
    log_probs: Vec<T>,
    draws: Vec<T>,
    winner: Vec<usize>,
    k: usize,
    temperature: T,
}

/// Relaxed k-hot mask from logits and frozen `k × P` Gumbel noise:
/// `c_j = softmax((log p + g_j) / τ)`, mask = elementwise max over j.
pub fn relaxed_from_noise<T: Scalar>(
    logits: &[T],
    noise: &[T],
    k: usize,
    temperature: T,
) -> Result<(Vec<T>, RelaxedCache<T>)> {
    let p = logits.len();
    check_k(k, p)?;
    if noise.len() != k * p {
        return Err(CatxError::shape(format!(
            "noise has {} values, expected {k} x {p}",
            noise.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CatxError::Numeric("non-finite selection logits".into()));
    }
    let log_probs = log_softmax(logits);
    let mut draws = Vec::with_capacity(k * p);
    for g in noise.chunks_exact(p) {
        let mut row: Vec<T> = log_probs
            .iter()
            .zip(g)
            .map(|(&lp, &gi)| (lp + gi) / temperature)
            .collect();
        crate::scalar::softmax_in_place(&mut row);
        draws.extend(row);
    }
    let mut mask = vec![T::zero(); p];
    let mut winner = vec![0; p];
    for i in 0..p {
        let mut best = 0;
        for j in 1..k {
            if draws[j * p + i] > draws[best * p + i] {
                best = j;
            }
        }
        winner[i] = best;
        mask[i] = draws[best * p + i];
    }
    Ok((
        mask,
        RelaxedCache {
            log_probs,
            draws,
            winner,
            k,
            temperature,
        },
    ))
}

/// Gradient of a scalar loss with respect to the logits, given its
/// gradient with respect to the relaxed mask.
pub fn relaxed_backward<T: Scalar>(cache: &RelaxedCache<T>, dmask: &[T]) -> Vec<T> {
    let p = cache.log_probs.len();
    let mut dlog_probs = vec![T::zero(); p];
    for j in 0..cache.k {
        let c = &cache.draws[j * p..(j + 1) * p];
        let dc: Vec<T> = (0..p)
            .map(|i| if cache.winner[i] == j { dmask[i] } else { T::zero() })
            .collect();
        let dot: T = c.iter().zip(&dc).map(|(&a, &b)| a * b).sum();
        for i in 0..p {
            dlog_probs[i] += c[i] * (dc[i] - dot) / cache.temperature;
        }
    }
    // log_softmax backward
    let total: T = dlog_probs.iter().copied().sum();
    (0..p)
        .map(|i| dlog_probs[i] - cache.log_probs[i].exp() * total)
        .collect()
}

/// Relaxed sample from a selection distribution with noise drawn from
/// `cfg.noise_seed`.
pub fn sample_relaxed<T: Scalar>(dist: &SelectionDistribution<T>, cfg: &SamplerConfig) -> Result<PatchMask<T>> {
    let p = dist.num_patches();
    cfg.validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let noise = gumbel_noise(&mut rng, cfg.k, p);
    let (values, _) = relaxed_from_noise(&dist.logits, &noise, cfg.k, T::from_f64(cfg.temperature))?;
    Ok(PatchMask {
        values,
        kind: MaskKind::Relaxed,
        k: cfg.k,
    })
}

/// Ones at the `k` largest probabilities, ties to the lowest index.
pub fn hard_topk<T: Scalar>(probs: &[T], k: usize) -> Result<PatchMask<T>> {
    check_k(k, probs.len())?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut values = vec![T::zero(); probs.len()];
    for &i in &order[..k] {
        values[i] = T::one();
    }
    Ok(PatchMask {
        values,
        kind: MaskKind::Hard,
        k,
    })
}

/// Uniform k-subset of `0..P`, fixed by `(seed, index)`.
pub fn random_mask<T: Scalar>(num_patches: usize, k: usize, seed: u64, index: u64) -> Result<PatchMask<T>> {
    check_k(k, num_patches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut values = vec![T::zero(); num_patches];
    for i in rand::seq::index::sample(&mut rng, num_patches, k) {
        values[i] = T::one();
    }
    Ok(PatchMask {
        values,
        kind: MaskKind::Hard,
        k,
    })
}

fn factor<T: Scalar>(m: T, mode: MaskMode) -> T {
    match mode {
        MaskMode::Keep => m,
        MaskMode::Remove => T::one() - m,
        MaskMode::None => T::one(),
    }
}

/// Masks one image. `black` is a normalized all-black patch (see
/// [`crate::data::black_patch`]); masked-out pixels fade toward it.
pub fn apply_mask(
    patches: &PatchSequence,
    mask: &PatchMask<f32>,
    black: &[f32],
    mode: MaskMode,
) -> Result<PatchSequence> {
    let data = apply_mask_batch(
        &patches.patches,
        &mask.values,
        patches.num_patches(),
        patches.patch_dim(),
        black,
        mode,
    )?;
    Ok(PatchSequence {
        patches: data,
        ..patches.clone()
    })
}

/// Scales `[batch × P × patch_dim]` normalized patches by `[batch × P]` mask
/// factors as if the factor multiplied the raw pixels: each value becomes
/// `f * x + (1 - f) * black`, so a factor of 0 gives a black patch and a
/// factor of 1 returns `x` unchanged.
pub fn apply_mask_batch<T: Scalar>(
    patches: &[T],
    masks: &[T],
    num_patches: usize,
    patch_dim: usize,
    black: &[T],
    mode: MaskMode,
) -> Result<Vec<T>> {
    if masks.len() * patch_dim != patches.len() || !masks.len().is_multiple_of(num_patches) {
        return Err(CatxError::shape(format!(
            "mask of {} entries does not cover {} patch values of width {patch_dim}",
            masks.len(),
            patches.len()
        )));
    }
    if black.len() != patch_dim {
        return Err(CatxError::shape(format!(
            "black patch has {} values, patches have {patch_dim}",
            black.len()
        )));
    }
    let mut out = patches.to_vec();
    for (chunk, &m) in out.chunks_exact_mut(patch_dim).zip(masks) {
        let f = factor(m, mode);
        let g = T::one() - f;
        for (v, &b) in chunk.iter_mut().zip(black) {
            *v = f * *v + g * b;
        }
    }
    Ok(out)
}

/// Gradient with respect to the mask, given the gradient with respect to
/// the masked patches.
pub fn apply_mask_backward<T: Scalar>(
    patches: &[T],
    dmasked: &[T],
    patch_dim: usize,
    black: &[T],
    mode: MaskMode,
) -> Vec<T> {
    let sign = match mode {
        MaskMode::Keep => T::one(),
        MaskMode::Remove => -T::one(),
        MaskMode::None => T::zero(),
    };
    patches
        .chunks_exact(patch_dim)
        .zip(dmasked.chunks_exact(patch_dim))
        .map(|(x, g)| sign * x.iter().zip(g).zip(black).map(|((&a, &d), &b)| (a - b) * d).sum::<T>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_from_fraction() {
        assert_eq!(compute_k(0.05, 49).unwrap(), 2);
        assert_eq!(compute_k(0.1, 49).unwrap(), 5);
        assert_eq!(compute_k(0.25, 49).unwrap(), 12);
        assert_eq!(compute_k(0.5, 49).unwrap(), 25);
        assert_eq!(compute_k(0.5, 64).unwrap(), 32);
        assert_eq!(compute_k(0.01, 49).unwrap(), 1);
        assert_eq!(compute_k(1.0, 49).unwrap(), 49);
        assert!(compute_k(0.0, 49).is_err());
        assert!(compute_k(1.2, 49).is_err());
    }

    #[test]
    fn hard_topk_ties_go_low() {
        let m = hard_topk(&[0.1, 0.5, 0.2, 0.2], 2).unwrap();
        assert_eq!(m.values, vec![0.0, 1.0, 1.0, 0.0]);
        let m = hard_topk(&[0.2; 5], 3).unwrap();
        assert_eq!(m.selected(), vec![0, 1, 2]);
        let m = hard_topk(&[0.3, 0.1, 0.6], 3).unwrap();
        assert_eq!(m.values, vec![1.0; 3]);
        assert!(hard_topk(&[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn random_mask_full_and_deterministic() {
        for seed in 0..5 {
            let m: PatchMask = random_mask(7, 7, seed, 3).unwrap();
            assert_eq!(m.values, vec![1.0; 7]);
        }
        let a: PatchMask = random_mask(20, 4, 11, 9).unwrap();
        let b: PatchMask = random_mask(20, 4, 11, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_mask_is_uniform() {
        let hits = (0..10_000u64)
            .filter(|&i| random_mask::<f64>(10, 3, 4, i).unwrap().values[0] == 1.0)
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.3).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn zero_temperature_collapses_to_one_hot() {
        let logits = [0.3, -1.0, 2.0, 0.1, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f64> = gumbel_noise(&mut rng, 2, 5);
        let (mask, cache) = relaxed_from_noise(&logits, &noise, 2, 1e-4).unwrap();
        for c in cache.draws.chunks(5) {
            let ones = c.iter().filter(|&&v| (v - 1.0).abs() < 1e-6).count();
            let zeros = c.iter().filter(|&&v| v.abs() < 1e-6).count();
            assert_eq!((ones, zeros), (1, 4));
        }
        assert!(mask.iter().all(|&v| v.abs() < 1e-6 || (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn mask_dominates_each_draw() {
        let logits = [0.5, 0.1, -0.3, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = gumbel_noise(&mut rng, 4, 4);
        let (mask, cache) = relaxed_from_noise(&logits, &noise, 4, 1e-3).unwrap();
        for c in cache.draws.chunks(4) {
            for (m, v) in mask.iter().zip(c) {
                assert!(*m <= 1.0 && m >= v);
            }
        }
    }

    #[test]
    fn relaxed_gradient_matches_central_differences() {
        // d sum(mask) / d logits, P = 6, k = 2, tau = 0.5, frozen noise
        let logits = vec![0.2, -0.4, 1.1, 0.0, -0.9, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise: Vec<f64> = gumbel_noise(&mut rng, 2, 6);
        let (_, cache) = relaxed_from_noise(&logits, &noise, 2, 0.5).unwrap();
        let analytic = relaxed_backward(&cache, &[1.0; 6]);
        let h = 1e-6;
        for i in 0..6 {
            let eval = |delta: f64| {
                let mut l = logits.clone();
                l[i] += delta;
                relaxed_from_noise(&l, &noise, 2, 0.5).unwrap().0.iter().sum::<f64>()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        let noise = vec![0.0; 3];
        let err = relaxed_from_noise(&[0.0, f64::NAN, 1.0], &noise, 1, 0.5).unwrap_err();
        assert!(matches!(err, CatxError::Numeric(_)));
    }

    #[test]
    fn sample_relaxed_is_reproducible() {
        let dist = SelectionDistribution::from_logits(vec![0.1, 0.7, -0.2, 0.0]).unwrap();
        let cfg = SamplerConfig {
            temperature: 0.5,
            k: 2,
            noise_seed: 8,
        };
        let a = sample_relaxed(&dist, &cfg).unwrap();
        let b = sample_relaxed(&dist, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kind, MaskKind::Relaxed);
        let bad = SamplerConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(sample_relaxed(&dist, &bad).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let seq = crate::data::patchify_pixels(&(0..16).map(|v| v as f32).collect::<Vec<_>>(), 1, 4, 4, 2).unwrap();
        let zero = [0.0f32; 4];
        let ones = PatchMask {
            values: vec![1.0f32; 4],
            kind: MaskKind::Hard,
            k: 4,
        };
        assert_eq!(apply_mask(&seq, &ones, &zero, MaskMode::Keep).unwrap(), seq);
        assert!(apply_mask(&seq, &ones, &zero, MaskMode::Remove)
            .unwrap()
            .patches
            .iter()
            .all(|&v| v == 0.0));
        let half = PatchMask {
            values: vec![1.0, 0.5, 1.0, 1.0],
            kind: MaskKind::Relaxed,
            k: 1,
        };
        let out = apply_mask(&seq, &half, &zero, MaskMode::Keep).unwrap();
        let want: Vec<f32> = seq.patch(1).iter().map(|v| v * 0.5).collect();
        assert_eq!(out.patch(1), want.as_slice());
        let short = PatchMask {
            values: vec![1.0f32; 3],
            kind: MaskKind::Hard,
            k: 3,
        };
        assert!(matches!(
            apply_mask(&seq, &short, &zero, MaskMode::Keep),
            Err(CatxError::Shape(_))
        ));
        assert!(matches!(
            apply_mask(&seq, &ones, &zero[..3], MaskMode::Keep),
            Err(CatxError::Shape(_))
        ));
    }

    #[test]
    fn masking_normalized_patches_acts_on_raw_pixels() {
        let norm = [(0.5f32, 0.5f32)];
        let black = crate::data::black_patch(&norm, 2);
        assert_eq!(black, vec![-1.0; 4]);
        let raw: Vec<f32> = (0..16).map(|v| v as f32 / 15.0).collect();
        let normalized: Vec<f32> = raw.iter().map(|r| (r - 0.5) / 0.5).collect();
        let seq = crate::data::patchify_pixels(&normalized, 1, 4, 4, 2).unwrap();
        let mask = PatchMask {
            values: vec![0.0, 0.25, 1.0, 0.0],
            kind: MaskKind::Relaxed,
            k: 1,
        };
        let out = apply_mask(&seq, &mask, &black, MaskMode::Keep).unwrap();
        let raw_seq = crate::data::patchify_pixels(&raw, 1, 4, 4, 2).unwrap();
        for i in 0..4 {
            for (&o, &r) in out.patch(i).iter().zip(raw_seq.patch(i)) {
                assert!((o - (mask.values[i] * r - 0.5) / 0.5).abs() < 1e-6);
            }
        }
        let bright = [(0.4914f32, 0.2470f32), (0.4822, 0.2435), (0.4465, 0.2616)];
        let b = crate::data::black_patch(&bright, 4);
        assert_eq!(b.len(), 48);
        assert_eq!(b[16], -0.4822 / 0.2435);
    }

    proptest! {
        #[test]
        fn keep_plus_remove_is_identity(
            x in proptest::collection::vec(-3.0f64..3.0, 12),
            m in proptest::collection::vec(0.0f64..=1.0, 4),
            black in proptest::collection::vec(-2.0f64..0.0, 3),
        ) {
            let keep = apply_mask_batch(&x, &m, 4, 3, &black, MaskMode::Keep).unwrap();
            let rem = apply_mask_batch(&x, &m, 4, 3, &black, MaskMode::Remove).unwrap();
            // in raw pixel terms keep + remove = x; normalized, the offset is counted twice
            for i in 0..12 {
                prop_assert!((keep[i] + rem[i] - black[i % 3] - x[i]).abs() < 1e-12);
            }
            let zero = [0.0; 3];
            let keep = apply_mask_batch(&x, &m, 4, 3, &zero, MaskMode::Keep).unwrap();
            let rem = apply_mask_batch(&x, &m, 4, 3, &zero, MaskMode::Remove).unwrap();
            for i in 0..12 {
                prop_assert!((keep[i] + rem[i] - x[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn full_keep_mask_is_exact(
            x in proptest::collection::vec(-3.0f32..3.0, 12),
            black in proptest::collection::vec(-2.0f32..0.0, 3),
        ) {
            let keep = apply_mask_batch(&x, &[1.0f32; 4], 4, 3, &black, MaskMode::Keep).unwrap();
            prop_assert_eq!(keep, x);
        }

        #[test]
        fn hard_topk_has_exactly_k_ones(
            probs in proptest::collection::vec(0.0f64..1.0, 1..40),
            kf in 0.0f64..1.0,
        ) {
            let k = 1 + ((probs.len() - 1) as f64 * kf) as usize;
            let m = hard_topk(&probs, k).unwrap();
            prop_assert_eq!(m.values.iter().filter(|&&v| v == 1.0).count(), k);
            prop_assert!(m.values.iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn relaxed_mask_in_unit_box_with_nonzero_gradient(
            logits in proptest::collection::vec(-4.0f64..4.0, 2..20),
            seed in any::<u64>(),
            tau in 0.1f64..2.0,
        ) {
            let p = logits.len();
            let k = 1 + (seed as usize) % p;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = gumbel_noise(&mut rng, k, p);
            let (mask, cache) = relaxed_from_noise(&logits, &noise, k, tau).unwrap();
            prop_assert!(mask.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (again, _) = relaxed_from_noise(&logits, &noise, k, tau).unwrap();
            prop_assert_eq!(&mask, &again);
            // weight entries unequally so the gradient of the weighted sum is generic
            let w: Vec<f64> = (0..p).map(|i| 1.0 + i as f64).collect();
            let g = relaxed_backward(&cache, &w);
            prop_assert!(g.iter().any(|v| v.abs() > 0.0));
        }
    }
}
