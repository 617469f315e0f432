//! Adapter-output visualization: binary PPM (P6) side-by-side dumps of
//! original and adapter-transformed images, the transformed view
//! renormalized to the original's mean and standard deviation.

use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::adapters::AdapterSet;
use crate::tensor::Tensor;
use crate::vault::IMG_CHANNELS;

/// Writes a `[3, h, w]` tensor as binary PPM. Pixels map by
/// `clamp(round(v * 255), 0, 255)`.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<(), HarnessError> {
    assert_eq!(image.rank(), 3);
    let (c, h, w) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    assert_eq!(c, IMG_CHANNELS);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[(ch * h + y) * w + x];
                let byte = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                bytes.push(byte);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PPM written by [`write_ppm`] back into `[3, h, w]` floats
/// in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, HarnessError> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| HarnessError::Config(format!("ppm {}: {msg}", path.display()));
    let header_end = bytes
        .windows(1)
        .enumerate()
        .scan(0, |newlines, (i, w)| {
            if w[0] == b'\n' {
                *newlines += 1;
            }
            Some((i, *newlines))
        })
        .find(|(_, n)| *n == 3)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header utf8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P6") {
        return Err(bad("not P6"));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("missing dims"))?
        .split_whitespace()
        .filter_map(|v| v.parse().ok())
        .collect();
    let (w, h) = (dims[0], dims[1]);
    let body = &bytes[header_end..];
    if body.len() != w * h * 3 {
        return Err(bad("body size mismatch"));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = body[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).unwrap())
}

fn mean_std(t: &Tensor<f32>) -> (f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Renormalizes `transformed` to the mean and standard deviation of
/// `original` (whole-image statistics). A near-constant transform only
/// recenters.
pub fn renormalize_to(original: &Tensor<f32>, transformed: &Tensor<f32>) -> Tensor<f32> {
    let (mo, so) = mean_std(original);
    let (mt, st) = mean_std(transformed);
    if st < 1e-12 {
        return transformed.map(|v| (v as f64 - mt + mo) as f32);
    }
    transformed.map(|v| ((v as f64 - mt) * (so / st) + mo) as f32)
}

/// Writes `orig_NN.ppm` / `adapted_NN.ppm` pairs for each image; when the
/// set has no visual adapter the adapted view equals the original.
/// Returns the written file pairs.
pub fn dump_adapter_views(
    adapters: &AdapterSet<f32>,
    images: &[Tensor<f32>],
    out_dir: &Path,
) -> Result<Vec<(PathBuf, PathBuf)>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let orig_path = out_dir.join(format!("orig_{i:02}.ppm"));
        let adapted_path = out_dir.join(format!("adapted_{i:02}.ppm"));
        write_ppm(&orig_path, image)?;
        let transformed = match &adapters.visual {
            Some(v) => v.apply(image).map_err(crate::adapters::AdapterError::from)?,
            None => image.clone(),
        };
        let view = renormalize_to(image, &transformed);
        write_ppm(&adapted_path, &view)?;
        written.push((orig_path, adapted_path));
    }
    Ok(written)
}
