//! Input/output-adapter training against a sealed vault, on the
//! constructed affine-pixel-shift task where recovery is provable: the
//! shift is exactly invertible by a 1x1 conv, so the closed-form oracle
//! adapter bounds what training should reach.
//!
//! ```bash
//! cargo run --release --example train_dga
//! ```

use std::sync::Arc;

use graybox::harness::{
    default_cache_dir, generate_dataset, oracle_inverse_adapter, pretrain_vault, unique_pairs,
    DomainShift,
};
use graybox::train::{eval_features, evaluate_retrieval, train_graybox, Method, TrainConfig};
use graybox::vault::InProcessClient;

fn main() -> anyhow::Result<()> {
    let seed = 7;
    let pretrained = pretrain_vault(seed, &default_cache_dir())?;
    println!(
        "pretrained vault: clean r@1={:.4} (cached={})",
        pretrained.clean_r1, pretrained.from_cache
    );
    let vault = Arc::new(pretrained.vault);
    let checksum = vault.checksum();

    let shift = DomainShift::affine(seed ^ 0x51F7);
    let data = generate_dataset(2048, 512, shift, seed);
    let eval = unique_pairs(&data.test);

    // Zero-shot on the shifted domain collapses.
    let mut client = InProcessClient::new(Arc::clone(&vault));
    let none = graybox::adapters::init_adapters(
        &graybox::adapters::AdapterConfig::with_mask(graybox::adapters::AblationMask::NONE),
        seed,
    )?;
    let (img, txt) = eval_features(&mut client, &none, &eval, 64)?;
    let zs = evaluate_retrieval(&txt, &img, &[1])[0].1;
    println!("shifted zero-shot r@1: {zs:.4}");

    // The closed-form oracle restores clean performance.
    let oracle = oracle_inverse_adapter(&shift);
    let (img, txt) = eval_features(&mut client, &oracle, &eval, 64)?;
    let oracle_r1 = evaluate_retrieval(&txt, &img, &[1])[0].1;
    println!("oracle-inverse r@1:    {oracle_r1:.4}");

    // Trained adapters should reach the oracle's neighborhood.
    let mut config = TrainConfig::new(Method::Dga, seed);
    config.epochs = 5;
    config.lr0 = 1e-3;
    config.decay = 0.8;
    config.stop_at_test_r1 = Some(0.95 * oracle_r1);
    let outcome = train_graybox(&mut client, &data.train, &eval, &config)?;
    for r in &outcome.history {
        if r.metric == "r@1" {
            println!("epoch {:>2} trained dga r@1: {:.4}", r.epoch, r.value);
        }
    }
    let (_, fraction) = outcome.adapters.count_trainable(vault.param_count());
    println!("adapter parameters: {:.2}% of the backbone", 100.0 * fraction);
    assert_eq!(vault.checksum(), checksum, "training never touched the vault");
    Ok(())
}
