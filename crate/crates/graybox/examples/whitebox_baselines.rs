//! The full comparison hierarchy on one task: zero-shot, linear probing,
//! input/output adapters, proxy tokens, low-rank attachments, last-layers
//! and full fine-tuning, each tagged with its access shade.
//!
//! Budgeted for a quick run; push the dataset and epochs up for a sharper
//! table.
//!
//! ```bash
//! cargo run --release --example whitebox_baselines
//! ```

use graybox::harness::{run_experiment, ExperimentSpec, Task};
use graybox::train::{Method, TrainConfig};

fn main() -> anyhow::Result<()> {
    let seed = 7;
    let mut methods = Vec::new();
    for method in [
        Method::Zs,
        Method::Lp,
        Method::Dga,
        Method::Lga,
        Method::Lora,
        Method::Llft(1),
        Method::Ft,
    ] {
        let mut config = TrainConfig::new(method, seed);
        config.epochs = 2;
        config.lr0 = 1e-3;
        config.decay = 0.8;
        config.eval_every = 2;
        methods.push(config);
    }
    let spec = ExperimentSpec {
        name: "affine-shift-baselines".into(),
        task: Task::Retrieval,
        shift: graybox::harness::DomainShift::affine(seed ^ 0x51F7),
        n_train: 512,
        n_test: 128,
        data_seed: seed,
        vault_seed: seed,
        methods,
    };
    let result = run_experiment(&spec)?;
    print!("{}", result.render());
    Ok(())
}
