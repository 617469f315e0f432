//! The ten-row input/output adapter combination grid on the affine-shift
//! task: every single-adapter and per-modality configuration against the
//! full set.
//!
//! ```bash
//! cargo run --release --example ablate_adapters
//! ```

use graybox::harness::{ablation_suite, AblationKind, DomainShift, ExperimentSpec, Task};
use graybox::train::{Method, TrainConfig};

fn main() -> anyhow::Result<()> {
    let seed = 7;
    let spec = ExperimentSpec {
        name: "adapter-combos".into(),
        task: Task::Retrieval,
        shift: DomainShift::affine(seed ^ 0x51F7),
        n_train: 512,
        n_test: 128,
        data_seed: seed,
        vault_seed: seed,
        methods: vec![],
    };
    let mut template = TrainConfig::new(Method::Dga, seed);
    template.epochs = 3;
    template.lr0 = 1e-3;
    template.decay = 0.8;
    template.eval_every = 3;

    let result = ablation_suite(AblationKind::AdapterCombos, &spec, &template)?;
    print!("{}", result.render());
    Ok(())
}
