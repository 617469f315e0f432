//! End-to-end training-loop contracts on small random data: determinism,
//! frozen-vault behavior, method identities, and the gradient path through
//! the full sealed pipeline against finite differences.

use std::sync::Arc;

use graybox::adapters::{init_adapters, AblationMask, AdapterConfig, AdapterParamRef};
use graybox::rng::DetRng;
use graybox::tensor::gradcheck::{compare, Tolerance};
use graybox::tensor::{Scalar, Tensor};
use graybox::train::{
    eval_features, frozen_batch_entry_grads, infonce_loss, train_graybox, train_whitebox,
    whitebox_eval_features, Method, TrainConfig, TrainPair,
};
use graybox::vault::{build_vault, InProcessClient, Mode, VaultClient};

fn toy_pairs<T: Scalar>(n: usize, salt: u64) -> Vec<TrainPair<T>> {
    let mut rng = DetRng::derive(0xDA7A, salt);
    (0..n)
        .map(|i| {
            let image = Tensor::new(
                vec![3, 32, 32],
                (0..3 * 32 * 32)
                    .map(|_| T::from_f64(rng.uniform()))
                    .collect(),
            )
            .unwrap();
            // Spread captions over disjoint tokens so pairs are learnable.
            let caption = vec![1 + (i % 8), 9 + ((i / 8) % 4), 13 + (i % 2)];
            TrainPair {
                image,
                caption,
                class_id: i % 8,
            }
        })
        .collect()
}

fn small_config(method: Method, seed: u64) -> TrainConfig {
    let mut config = TrainConfig::new(method, seed);
    config.epochs = 2;
    config.batch = 8;
    config.lr0 = 1e-3;
    config
}

#[test]
fn graybox_training_runs_and_keeps_the_vault_frozen() {
    let vault = Arc::new(build_vault::<f32>(100));
    let checksum = vault.checksum();
    let train = toy_pairs::<f32>(16, 1);
    let eval = toy_pairs::<f32>(8, 2);

    for method in [Method::Dga, Method::Lga, Method::Lp] {
        let mut client = InProcessClient::new(Arc::clone(&vault));
        let outcome =
            train_graybox(&mut client, &train, &eval, &small_config(method, 5)).unwrap();
        assert!(outcome.final_train_loss.is_finite());
        assert!(!outcome.history.is_empty());
        assert_eq!(vault.checksum(), checksum, "{method:?} must not touch the vault");
    }
}

#[test]
fn zero_epochs_returns_init_adapters_and_zero_shot_metrics() {
    let vault = Arc::new(build_vault::<f32>(100));
    let train = toy_pairs::<f32>(8, 1);
    let eval = toy_pairs::<f32>(8, 2);
    let mut config = small_config(Method::Dga, 5);
    config.epochs = 0;
    config.adapters.extra_tokens = 0; // identity-at-init configuration

    let mut client = InProcessClient::new(Arc::clone(&vault));
    let outcome = train_graybox(&mut client, &train, &eval, &config).unwrap();

    // Adapters are bit-identical to a fresh init.
    let fresh = init_adapters::<f32>(&config.adapters, config.seed).unwrap();
    for ((ra, ta), (rb, tb)) in outcome
        .adapters
        .trainables()
        .iter()
        .zip(fresh.trainables().iter())
    {
        assert_eq!(ra, rb);
        assert_eq!(ta, tb);
    }

    // And the recorded metrics equal a plain zero-shot evaluation.
    let (img, txt) = whitebox_eval_features(&vault, Mode::Sealed, &eval).unwrap();
    let zs = graybox::train::evaluate_retrieval(&txt, &img, &[1]);
    let recorded = outcome
        .history
        .iter()
        .find(|r| r.metric == "r@1")
        .unwrap()
        .value;
    assert_eq!(zs[0].1, recorded);
}

#[test]
fn same_seed_gives_bit_identical_history() {
    let vault = Arc::new(build_vault::<f32>(100));
    let train = toy_pairs::<f32>(16, 1);
    let eval = toy_pairs::<f32>(8, 2);
    let config = small_config(Method::Dga, 5);

    let mut c1 = InProcessClient::new(Arc::clone(&vault));
    let a = train_graybox(&mut c1, &train, &eval, &config).unwrap();
    let mut c2 = InProcessClient::new(Arc::clone(&vault));
    let b = train_graybox(&mut c2, &train, &eval, &config).unwrap();
    assert_eq!(a.history, b.history);
    for ((ra, ta), (rb, tb)) in a
        .adapters
        .trainables()
        .iter()
        .zip(b.adapters.trainables().iter())
    {
        assert_eq!(ra, rb);
        assert_eq!(ta, tb);
    }
}

#[test]
fn linear_probe_is_exactly_the_output_adapter_mask() {
    let vault = Arc::new(build_vault::<f32>(100));
    let train = toy_pairs::<f32>(16, 1);
    let eval = toy_pairs::<f32>(8, 2);

    let lp = small_config(Method::Lp, 5);
    let mut dga_masked = small_config(Method::Dga, 5);
    dga_masked.adapters = AdapterConfig::with_mask(AblationMask::LP);

    let mut c1 = InProcessClient::new(Arc::clone(&vault));
    let a = train_graybox(&mut c1, &train, &eval, &lp).unwrap();
    let mut c2 = InProcessClient::new(Arc::clone(&vault));
    let b = train_graybox(&mut c2, &train, &eval, &dga_masked).unwrap();
    assert_eq!(a.history, b.history, "same computation by construction");
}

#[test]
fn ft_changes_checksum_and_lora_is_identity_at_init() {
    let mut vault = build_vault::<f32>(100);
    let train = toy_pairs::<f32>(8, 1);
    let eval = toy_pairs::<f32>(4, 2);

    // LoRA with zero up-factors: first forward equals zero-shot bit-exactly.
    let before = vault.checksum();
    {
        let lora_cfg = {
            let mut c = small_config(Method::Lora, 5);
            c.epochs = 0;
            c
        };
        let outcome = train_whitebox(&mut vault, 100, &train, &eval, &lora_cfg).unwrap();
        let attachments = outcome.lora.unwrap();
        let (img_lora, txt_lora) = whitebox_eval_features(
            &vault,
            Mode::Lora {
                attachments: &attachments,
            },
            &eval,
        )
        .unwrap();
        let (img_zs, txt_zs) = whitebox_eval_features(&vault, Mode::Sealed, &eval).unwrap();
        assert_eq!(img_lora, img_zs);
        assert_eq!(txt_lora, txt_zs);
        assert_eq!(vault.checksum(), before, "identity attachment, no edits");
    }

    // LoRA training moves the attachments, not the vault.
    let outcome =
        train_whitebox(&mut vault, 100, &train, &eval, &small_config(Method::Lora, 5)).unwrap();
    assert!(outcome.final_train_loss.is_finite());
    assert_eq!(vault.checksum(), before);

    // Full fine-tuning edits the vault.
    let outcome =
        train_whitebox(&mut vault, 100, &train, &eval, &small_config(Method::Ft, 5)).unwrap();
    assert!(outcome.final_train_loss.is_finite());
    assert_ne!(vault.checksum(), before);
}

#[test]
fn whitebox_requires_owner_credential() {
    let mut vault = build_vault::<f32>(100);
    let train = toy_pairs::<f32>(8, 1);
    let err = train_whitebox(&mut vault, 101, &train, &train, &small_config(Method::Ft, 5))
        .unwrap_err();
    assert!(err.to_string().contains("access denied"), "{err}");
}

#[test]
fn training_loss_descends_on_learnable_data() {
    let vault = Arc::new(build_vault::<f32>(100));
    let train = toy_pairs::<f32>(32, 1);
    let mut config = small_config(Method::Dga, 5);
    config.epochs = 4;
    config.lr0 = 2e-3;
    let mut client = InProcessClient::new(Arc::clone(&vault));
    let outcome = train_graybox(&mut client, &train, &train[..8], &config).unwrap();
    let losses: Vec<f64> = outcome
        .history
        .iter()
        .filter(|r| r.metric == "loss")
        .map(|r| r.value)
        .collect();
    assert!(losses.len() == 4);
    let best_late = losses[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        best_late < losses[0],
        "loss failed to descend: {losses:?}"
    );
}

/// The core premise: the gradient of the loss with respect to a client
/// conv kernel, computed through the sealed boundary, matches central
/// finite differences of the end-to-end loss.
#[test]
fn sealed_pipeline_conv_gradient_matches_finite_differences() {
    let vault = Arc::new(build_vault::<f64>(55));
    let pairs = toy_pairs::<f64>(4, 9);
    let refs: Vec<&TrainPair<f64>> = pairs.iter().collect();
    let config = AdapterConfig::dga();
    let adapters = init_adapters::<f64>(&config, 7).unwrap();
    let temperature = graybox::vault::TEMPERATURE;
    let tol = Tolerance::strict_f64();

    // Analytic gradient via one training step's plumbing (no optimizer).
    let mut client = InProcessClient::new(Arc::clone(&vault));
    let analytic = {
        // Reuse the trainer's internals through a single-step run at lr 0:
        // gradient extraction happens inside; instead we recompute here via
        // the public pieces.
        let mut cache = std::collections::BTreeMap::new();
        let mut embs = Vec::new();
        for p in &refs {
            if !cache.contains_key(&p.caption) {
                cache.insert(p.caption.clone(), client.embed_tokens(&p.caption).unwrap());
            }
            embs.push(cache.get(&p.caption).unwrap().clone());
        }
        let _ = embs;
        graybox::train::adapter_gradients_for_batch(&mut client, &adapters, &refs, temperature)
            .unwrap()
    };

    // Scalar loss as a function of one perturbed kernel element.
    let loss_for = |adapters: &graybox::adapters::AdapterSet<f64>| -> f64 {
        let mut client = InProcessClient::new(Arc::clone(&vault));
        let (img, txt) = eval_features(&mut client, adapters, &pairs, 8).unwrap();
        infonce_loss(&img, &txt, temperature).unwrap()
    };

    let mut idx_rng = DetRng::derive(0xF00D, 1);
    for (param_ref, grad) in &analytic {
        let base = adapters.get(*param_ref).clone();
        // Check a few sampled coordinates of every parameter class.
        for _ in 0..3 {
            let flat = idx_rng.index(base.numel());
            let mut up = adapters.clone();
            let mut t = base.clone();
            t.data_mut()[flat] += tol.h;
            up.set(*param_ref, t);
            let mut down = adapters.clone();
            let mut t = base.clone();
            t.data_mut()[flat] -= tol.h;
            down.set(*param_ref, t);
            let fd = (loss_for(&up) - loss_for(&down)) / (2.0 * tol.h);
            compare(&[grad.data()[flat]], &[fd], tol)
                .unwrap_or_else(|e| panic!("{param_ref:?} flat {flat}: {e}"));
        }
    }
}

#[test]
fn frozen_batch_entry_grads_are_deterministic() {
    let vault = Arc::new(build_vault::<f32>(100));
    let pairs = toy_pairs::<f32>(4, 3);
    let refs: Vec<&TrainPair<f32>> = pairs.iter().collect();
    let adapters = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();

    let mut c1 = InProcessClient::new(Arc::clone(&vault));
    let a = frozen_batch_entry_grads(&mut c1, &adapters, &refs, graybox::vault::TEMPERATURE)
        .unwrap();
    let mut c2 = InProcessClient::new(Arc::clone(&vault));
    let b = frozen_batch_entry_grads(&mut c2, &adapters, &refs, graybox::vault::TEMPERATURE)
        .unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
}

#[test]
fn lga_proxy_grads_have_token_dims() {
    let vault = Arc::new(build_vault::<f32>(100));
    let pairs = toy_pairs::<f32>(4, 3);
    let refs: Vec<&TrainPair<f32>> = pairs.iter().collect();
    let adapters = init_adapters::<f32>(&AdapterConfig::lga(2), 7).unwrap();

    let mut client = InProcessClient::new(Arc::clone(&vault));
    let grads = frozen_batch_entry_grads(&mut client, &adapters, &refs, graybox::vault::TEMPERATURE)
        .unwrap();
    // vision entry + 8 proxy entries
    let proxy_grads: Vec<_> = grads
        .iter()
        .filter(|(id, _)| *id >= 3)
        .collect();
    assert_eq!(proxy_grads.len(), 8);
    for (_, g) in proxy_grads {
        assert_eq!(g.dims(), &[2, 64]);
    }
}

#[test]
fn adapterref_decay_classes() {
    assert!(AdapterParamRef::ConvKernel(0).decays());
    assert!(AdapterParamRef::OutWeight(graybox::vault::Encoder::Text).decays());
    assert!(!AdapterParamRef::Shift.decays());
    assert!(!AdapterParamRef::Extra.decays());
    assert!(!AdapterParamRef::ConvBias(1).decays());
    assert!(!AdapterParamRef::Proxy(graybox::vault::Encoder::Vision, 0).decays());
}

#[test]
fn infonce_consumes_the_outputs_of_eval_features() {
    let vault = Arc::new(build_vault::<f32>(100));
    let pairs = toy_pairs::<f32>(4, 3);
    let adapters = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();
    let mut client = InProcessClient::new(Arc::clone(&vault));
    let (img, txt) = eval_features(&mut client, &adapters, &pairs, 8).unwrap();
    // Rows are unit-norm by construction.
    for r in 0..4 {
        let sq: f64 = img.data()[r * 64..(r + 1) * 64]
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum();
        assert!((sq - 1.0).abs() < 1e-5);
    }
    let loss = infonce_loss(&img, &txt, graybox::vault::TEMPERATURE).unwrap();
    assert!(loss.is_finite());
}
