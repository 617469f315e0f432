//! Owner-mode pretraining: turns a randomly initialized vault into a
//! competent clean-domain model before any gray-box experiment touches it,
//! then caches the result on disk keyed by seed.

use std::path::{Path, PathBuf};

use super::{generate_dataset, unique_pairs, DomainShift, HarnessError};
use crate::train::{
    evaluate_retrieval, train_whitebox, whitebox_eval_features, Method, TrainConfig,
};
use crate::vault::{build_vault, Mode, VaultModel};

pub const PRETRAIN_TARGET_R1: f64 = 0.9;
const EPOCH_CAP: usize = 400;

pub struct PretrainOutcome {
    pub vault: VaultModel<f32>,
    pub clean_r1: f64,
    pub from_cache: bool,
    pub epochs_run: usize,
}

/// Cache location: `GBX_CACHE` when set, otherwise a user-cache temp dir.
pub fn default_cache_dir() -> PathBuf {
    match std::env::var_os("GBX_CACHE") {
        Some(dir) => PathBuf::from(dir),
        None => std::env::temp_dir().join("gbx-cache"),
    }
}

fn cache_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("vault-{seed}.gbv"))
}

fn clean_r1(vault: &VaultModel<f32>, eval: &[super::SyntheticPair]) -> Result<f64, HarnessError> {
    let (img, txt) = whitebox_eval_features(vault, Mode::Sealed, eval)?;
    Ok(evaluate_retrieval(&txt, &img, &[1])[0].1)
}

/// Pretrains (or loads from cache) the vault for `seed`: full fine-tuning
/// with the contrastive loss over the 32 unique clean pairs, batch 16 at a
/// flat 3e-4 rate, until clean text-to-image R@1 reaches 0.9 or the epoch
/// cap reports a stalled run. The frozen result is cached to disk.
pub fn pretrain_vault(seed: u64, cache_dir: &Path) -> Result<PretrainOutcome, HarnessError> {
    std::fs::create_dir_all(cache_dir)?;
    let path = cache_path(cache_dir, seed);
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(vault) = VaultModel::<f32>::from_bytes(&bytes) {
            let eval = unique_pairs(&generate_dataset(32, 32, DomainShift::none(), seed).test);
            let r1 = clean_r1(&vault, &eval)?;
            return Ok(PretrainOutcome {
                vault,
                clean_r1: r1,
                from_cache: true,
                epochs_run: 0,
            });
        }
        // Unreadable cache entry: fall through and rebuild it.
    }

    let mut vault = build_vault::<f32>(seed);
    let data = generate_dataset(32, 32, DomainShift::none(), seed);
    let train = unique_pairs(&data.train);
    let eval = train.clone();

    let mut config = TrainConfig::new(Method::Ft, seed);
    config.epochs = EPOCH_CAP;
    config.batch = 16;
    config.lr0 = 3e-4;
    config.decay = 1.0;
    config.eval_every = 10;
    config.stop_at_test_r1 = Some(PRETRAIN_TARGET_R1);
    let outcome = train_whitebox(&mut vault, seed, &train, &eval, &config)?;
    let epochs_run = outcome
        .history
        .iter()
        .filter(|r| r.metric == "loss")
        .count();

    let r1 = clean_r1(&vault, &eval)?;
    if r1 < PRETRAIN_TARGET_R1 {
        return Err(HarnessError::PretrainStalled {
            target: PRETRAIN_TARGET_R1,
            cap: EPOCH_CAP,
            best: r1,
        });
    }

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, vault.to_bytes())?;
    std::fs::rename(&tmp, &path)?;
    Ok(PretrainOutcome {
        vault,
        clean_r1: r1,
        from_cache: false,
        epochs_run,
    })
}
