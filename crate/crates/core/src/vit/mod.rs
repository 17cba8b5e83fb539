//! Vision transformer backbone shared by the black-box classifier, the
//! post-hoc selector and the explainable model.

mod config;
mod layers;
mod model;
mod params;

pub use config::{HeadKind, ModelConfig};
pub use model::{ForwardCache, Outputs, Vit};
pub use params::{Grads, Param, ParamId, ParamStore};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;
    use crate::sampler::MaskMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(head_kind: HeadKind) -> ModelConfig {
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

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Closed-form parameter count, written independently of the layout code.
    fn closed_form_count(c: &ModelConfig) -> usize {
        let d = c.dim;
        let block =
            2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * c.mlp_dim + c.mlp_dim) + (c.mlp_dim * d + d);
        let mut total = c.patch_dim() * d + d; // patch projection
        total += d * c.special_tokens(); // cls (+ sel)
        total += c.num_tokens() * d; // positional
        total += c.depth * block;
        total += 2 * d; // final norm
        if c.has_classifier() {
            total += d * c.num_classes + c.num_classes;
        }
        if c.has_selector() {
            total += d * c.num_patches + c.num_patches;
        }
        total
    }

    #[test]
    fn reference_mnist_explainer_parameter_count() {
        let cfg = ModelConfig::reference(DatasetName::Mnist, HeadKind::Both);
        assert_eq!(closed_form_count(&cfg), 12_679_731);
        let vit = Vit::<f32>::new(cfg, 1).unwrap();
        assert_eq!(vit.num_parameters(), 12_679_731);
    }

    #[test]
    fn parameter_count_matches_closed_form_for_all_heads() {
        for kind in [HeadKind::Classifier, HeadKind::Selector, HeadKind::Both] {
            let cfg = ModelConfig::for_dataset(DatasetName::Cifar, kind, 64, 2);
            let vit = Vit::<f32>::new(cfg.clone(), 3).unwrap();
            assert_eq!(vit.num_parameters(), closed_form_count(&cfg), "{kind:?}");
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny(HeadKind::Both);
        let a = Vit::<f32>::new(cfg.clone(), 5).unwrap();
        let b = Vit::<f32>::new(cfg.clone(), 5).unwrap();
        let c = Vit::<f32>::new(cfg, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let cls = a.params().entries().iter().find(|p| p.name == "cls_token").unwrap();
        let sel = a.params().entries().iter().find(|p| p.name == "sel_token").unwrap();
        assert_ne!(cls.value, sel.value);
    }

    #[test]
    fn output_widths_follow_head_kind() {
        let cfg = ModelConfig::for_dataset(DatasetName::Mnist, HeadKind::Both, 16, 1);
        let vit = Vit::<f64>::new(cfg, 1).unwrap();
        let out = vit.forward(&random_input(49 * 16, 1), 1).unwrap();
        assert_eq!(out.class_probs.as_ref().unwrap().len(), 2);
        assert_eq!(out.sel_probs.as_ref().unwrap().len(), 49);

        let cfg = ModelConfig::for_dataset(DatasetName::Mnist, HeadKind::Classifier, 16, 1);
        let vit = Vit::<f64>::new(cfg, 1).unwrap();
        let out = vit.forward(&random_input(49 * 16, 1), 1).unwrap();
        assert!(out.sel_probs.is_none());
        assert!(matches!(out.sel_probs(), Err(crate::CatxError::Config(_))));
    }

    #[test]
    fn wrong_patch_count_is_a_shape_error() {
        let vit = Vit::<f64>::new(tiny(HeadKind::Both), 1).unwrap();
        let err = vit.forward(&[0.0; 12], 1).unwrap_err();
        assert!(matches!(err, crate::CatxError::Shape(_)));
        let err = vit
            .forward_masked(&[0.0; 16], 1, Some(&[1.0; 3]), &[0.0; 4], MaskMode::Keep)
            .unwrap_err();
        assert!(matches!(err, crate::CatxError::Shape(_)));
    }

    #[test]
    fn rows_do_not_leak_across_the_batch() {
        let vit = Vit::<f64>::new(tiny(HeadKind::Both), 2).unwrap();
        let x = random_input(16, 3);
        let y = random_input(16, 4);
        let single_x = vit.forward(&x, 1).unwrap();
        let single_y = vit.forward(&y, 1).unwrap();
        let both = vit.forward(&[x.clone(), y, x].concat(), 3).unwrap();
        let cp = both.class_probs.unwrap();
        let sp = both.sel_probs.unwrap();
        for (a, b) in cp[..2].iter().zip(single_x.class_probs.as_ref().unwrap()) {
            assert!((a - b).abs() <= 1e-5);
        }
        for (a, b) in cp[2..4].iter().zip(single_y.class_probs.as_ref().unwrap()) {
            assert!((a - b).abs() <= 1e-5);
        }
        assert_eq!(&cp[..2], &cp[4..6]);
        assert_eq!(&sp[..4], &sp[8..12]);
    }

    #[test]
    fn heads_emit_distributions() {
        let vit = Vit::<f32>::new(tiny(HeadKind::Both), 9).unwrap();
        for seed in 0..20 {
            let x: Vec<f32> = random_input(4 * 16, seed).into_iter().map(|v| v as f32 * 3.0).collect();
            let out = vit.forward(&x, 4).unwrap();
            for row in out.class_probs.as_ref().unwrap().chunks(2) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            for row in out.sel_probs.as_ref().unwrap().chunks(4) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn patch_order_matters() {
        let mut vit = Vit::<f64>::new(tiny(HeadKind::Classifier), 4).unwrap();
        // scale up the random weights so the positional signal is not washed out
        for p in vit.params_mut().entries_mut() {
            if p.name.ends_with("weight") && p.shape.len() == 2 || p.name.contains("embed") {
                p.value.iter_mut().for_each(|v| *v *= 20.0);
            }
        }
        let x = random_input(16, 8);
        let mut permuted = Vec::new();
        for i in [2usize, 0, 3, 1] {
            permuted.extend_from_slice(&x[i * 4..(i + 1) * 4]);
        }
        let a = vit.forward(&x, 1).unwrap().class_logits.unwrap();
        let b = vit.forward(&permuted, 1).unwrap().class_logits.unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zeroed_selector_head_is_uniform_and_isolated() {
        let mut vit = Vit::<f64>::new(tiny(HeadKind::Both), 4).unwrap();
        let x = random_input(16, 2);
        let before = vit.forward(&x, 1).unwrap();
        for p in vit.params_mut().entries_mut() {
            if p.name == "sel_head.weight" {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let after = vit.forward(&x, 1).unwrap();
        assert_eq!(before.class_probs, after.class_probs);
        // biases are zero-initialized, so softmax(bias) is uniform
        for &p in after.sel_probs.as_ref().unwrap() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
}
