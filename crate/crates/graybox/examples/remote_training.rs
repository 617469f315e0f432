//! The split deployment: a vault server on one end, an adapter trainer on
//! the other, with only descriptors, activations, and gradients crossing
//! the wire. Training remotely reproduces the in-process run bit-for-bit,
//! and the connection's exposure ledger is audited at the end.
//!
//! ```bash
//! cargo run --release --example remote_training
//! ```

use std::sync::Arc;

use graybox::harness::{default_cache_dir, generate_dataset, pretrain_vault, unique_pairs, DomainShift};
use graybox::protocol::{audit_ledger, connect, serve, ServeLimits};
use graybox::train::{train_graybox, Method, TrainConfig};
use graybox::vault::InProcessClient;

fn main() -> anyhow::Result<()> {
    let seed = 7;
    let vault = Arc::new(pretrain_vault(seed, &default_cache_dir())?.vault);
    let server = serve(Arc::clone(&vault), "127.0.0.1:0", ServeLimits::default())?;
    println!("vault serving on {}", server.addr());

    let data = generate_dataset(256, 64, DomainShift::affine(seed ^ 0x51F7), seed);
    let eval = unique_pairs(&data.test);
    let mut config = TrainConfig::new(Method::Dga, seed);
    config.epochs = 2;
    config.lr0 = 1e-3;

    // Same seed, both transports.
    let mut local = InProcessClient::new(Arc::clone(&vault));
    let local_run = train_graybox(&mut local, &data.train, &eval, &config)?;

    let mut remote = connect(&server.addr().to_string()).map_err(|e| anyhow::anyhow!("{e}"))?;
    let remote_run = train_graybox(&mut remote, &data.train, &eval, &config)?;

    assert_eq!(
        local_run.history, remote_run.history,
        "metric histories must be bit-identical across transports"
    );
    println!("remote == in-process: bit-identical histories over {} records", local_run.history.len());

    let ledger = remote.take_ledger();
    println!("wire traffic: {} frames, {} bytes", ledger.entries.len(), ledger.total_bytes());
    let report = audit_ledger(&ledger, &vault, "dga").map_err(|e| anyhow::anyhow!("{e}"))?;
    print!("{}", report.render());

    server.shutdown();
    Ok(())
}
