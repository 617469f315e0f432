//! Tour of the sealed surface: build a vault, list its entry points, fetch
//! embeddings, run a zero-shot forward, and confirm the checksum never
//! moves.
//!
//! ```bash
//! cargo run --release --example zero_shot
//! ```

use std::sync::Arc;

use graybox::harness::{generate_dataset, unique_pairs, DomainShift};
use graybox::train::{evaluate_retrieval, whitebox_eval_features};
use graybox::vault::{build_vault, InProcessClient, Mode, VaultClient};

fn main() -> anyhow::Result<()> {
    let vault = build_vault::<f32>(42);
    println!("vault checksum: {:016x}", vault.checksum());
    println!("parameters:     {}", vault.param_count());

    // The only structural information a sealed caller sees.
    for entry in vault.list_entries() {
        println!(
            "entry {:>2}  {:<16} shape {:?} grad={}",
            entry.id, entry.name, entry.shape, entry.grad_available
        );
    }

    // Embedding rows for a caption, through the sealed op.
    let mut client = InProcessClient::new(Arc::new(vault.clone()));
    let emb = client.embed_tokens(&[1, 5, 9])?;
    println!("embedded 3 tokens -> {:?}", emb.dims());

    // Zero-shot retrieval on the clean synthetic task. An untrained vault
    // is near chance; `gbx pretrain` (or the training examples) turn it
    // into a competent backbone first.
    let data = generate_dataset(32, 32, DomainShift::none(), 42);
    let eval = unique_pairs(&data.test);
    let before = vault.checksum();
    let (img, txt) = whitebox_eval_features(&vault, Mode::Sealed, &eval)?;
    for (k, v) in evaluate_retrieval(&txt, &img, &[1, 5, 10]) {
        println!("untrained zero-shot r@{k}: {v:.4}");
    }
    assert_eq!(vault.checksum(), before, "sealed calls never move weights");
    Ok(())
}
