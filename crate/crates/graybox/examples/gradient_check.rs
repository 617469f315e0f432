//! The access contract's load-bearing beam: gradients obtained through the
//! sealed boundary equal central finite differences of the end-to-end loss,
//! for every adapter parameter class, in float64.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use std::sync::Arc;

use graybox::adapters::{init_adapters, AdapterConfig};
use graybox::rng::DetRng;
use graybox::tensor::gradcheck::{compare, Tolerance};
use graybox::tensor::Tensor;
use graybox::train::{adapter_gradients_for_batch, eval_features, infonce_loss, TrainPair};
use graybox::vault::{build_vault, InProcessClient, TEMPERATURE};

fn main() -> anyhow::Result<()> {
    let vault = Arc::new(build_vault::<f64>(55));
    let mut rng = DetRng::new(9);
    let pairs: Vec<TrainPair<f64>> = (0..3)
        .map(|i| TrainPair {
            image: Tensor::new(
                vec![3, 32, 32],
                (0..3 * 32 * 32).map(|_| rng.uniform()).collect(),
            )
            .unwrap(),
            caption: vec![1 + i, 5, 9],
            class_id: i,
        })
        .collect();
    let refs: Vec<&TrainPair<f64>> = pairs.iter().collect();

    let mut config = AdapterConfig::dga();
    config.mask.lga = true;
    config.proxy_tokens = 1;
    let adapters = init_adapters::<f64>(&config, 3)?;

    let mut client = InProcessClient::new(Arc::clone(&vault));
    let analytic = adapter_gradients_for_batch(&mut client, &adapters, &refs, TEMPERATURE)?;

    let loss_for = |set: &graybox::adapters::AdapterSet<f64>| -> f64 {
        let mut client = InProcessClient::new(Arc::clone(&vault));
        let (img, txt) = eval_features(&mut client, set, &pairs, 8).unwrap();
        infonce_loss(&img, &txt, TEMPERATURE).unwrap()
    };

    let tol = Tolerance::strict_f64();
    let mut idx_rng = DetRng::new(31);
    for (param_ref, grad) in &analytic {
        let base = adapters.get(*param_ref).clone();
        let flat = idx_rng.index(base.numel());
        let mut up = adapters.clone();
        let mut probe = base.clone();
        probe.data_mut()[flat] += tol.h;
        up.set(*param_ref, probe);
        let mut down = adapters.clone();
        let mut probe = base.clone();
        probe.data_mut()[flat] -= tol.h;
        down.set(*param_ref, probe);
        let fd = (loss_for(&up) - loss_for(&down)) / (2.0 * tol.h);
        compare(&[grad.data()[flat]], &[fd], tol)
            .map_err(|e| anyhow::anyhow!("{param_ref:?}: {e}"))?;
        println!(
            "{param_ref:?}[{flat}]  autodiff {:+.9e}  finite-diff {fd:+.9e}  ok",
            grad.data()[flat]
        );
    }
    println!("every adapter parameter class verified at rtol 1e-6");
    Ok(())
}
