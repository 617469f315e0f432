//! What the visual input adapter does to images: writes side-by-side PPM
//! pairs of shifted originals and their adapter-recovered views,
//! renormalized to the original's statistics.
//!
//! ```bash
//! cargo run --release --example visualize_adapter
//! ```

use graybox::harness::{dump_adapter_views, generate_dataset, oracle_inverse_adapter, DomainShift};

fn main() -> anyhow::Result<()> {
    let seed = 7;
    let shift = DomainShift::affine(seed ^ 0x51F7);
    let data = generate_dataset(8, 1, shift, seed);
    let images: Vec<_> = data.train.iter().map(|p| p.image.clone()).collect();

    // The closed-form inverse adapter: its views undo the channel shift.
    let oracle = oracle_inverse_adapter(&shift);
    let out = std::path::PathBuf::from("runs/adapter-views");
    let written = dump_adapter_views(&oracle, &images, &out)?;
    for (orig, adapted) in &written {
        println!("{} | {}", orig.display(), adapted.display());
    }
    println!("{} pairs written under {}", written.len(), out.display());
    Ok(())
}
