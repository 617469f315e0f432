//! Proxy-token training: learnable tokens injected at every transformer
//! layer of both encoders, on the frequency-warp task where pixel-space
//! adapters cannot fully recover and deeper injection pays off.
//!
//! ```bash
//! cargo run --release --example train_lga
//! ```

use std::sync::Arc;

use graybox::harness::{
    default_cache_dir, generate_dataset, pretrain_vault, unique_pairs, DomainShift,
};
use graybox::train::{evaluate_retrieval, train_graybox, whitebox_eval_features, Method, TrainConfig};
use graybox::vault::{InProcessClient, Mode};

fn main() -> anyhow::Result<()> {
    let seed = 7;
    let pretrained = pretrain_vault(seed, &default_cache_dir())?;
    let vault = Arc::new(pretrained.vault);

    let shift = DomainShift::frequency(seed ^ 0x51F7);
    let data = generate_dataset(1024, 256, shift, seed);
    let eval = unique_pairs(&data.test);

    let (img, txt) = whitebox_eval_features(&vault, Mode::Sealed, &eval)?;
    let zs = evaluate_retrieval(&txt, &img, &[1])[0].1;
    println!("frequency-shift zero-shot r@1: {zs:.4}");

    let mut config = TrainConfig::new(Method::Lga, seed);
    config.adapters.proxy_tokens = 2;
    config.epochs = 6;
    config.lr0 = 2e-3;
    config.decay = 0.8;
    let mut client = InProcessClient::new(Arc::clone(&vault));
    let outcome = train_graybox(&mut client, &data.train, &eval, &config)?;
    for r in &outcome.history {
        if r.metric == "r@1" {
            println!("epoch {:>2} lga r@1: {:.4}", r.epoch, r.value);
        }
    }

    let proxies = outcome.adapters.proxies.as_ref().unwrap();
    println!(
        "trained {} proxy token sets ({} parameters)",
        proxies.tokens.len(),
        outcome.adapters.count_trainable(vault.param_count()).0
    );
    Ok(())
}
