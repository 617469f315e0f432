//! Shared-backbone efficiency accounting.
//!
//! Compares serving many domains through one vault plus per-domain input
//! adapter pairs against instantiating a full backbone copy per domain
//! (each copy running the full sample set). FLOPs come from the tape's
//! instrumented counters and are cross-checked against closed-form counts
//! derived from the architecture dims; memory is resident parameter bytes.

use std::sync::Arc;

use super::{generate_dataset, DomainShift, HarnessError};
use crate::adapters::{init_adapters, AblationMask, AdapterConfig};
use crate::train::TrainPair;
use crate::vault::{
    build_vault, EntryBatch, Mode, ENTRY_TEXT_EMBEDDINGS, ENTRY_TEXT_TOKEN_IDS,
    ENTRY_VISION_PIXELS, MLP_DIM, N_PATCHES, PATCH_DIM, VIS_SEQ, WIDTH,
};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct EfficiencyReport {
    pub n_domains: usize,
    pub n_samples: usize,
    pub flops_shared: u64,
    pub flops_separate: u64,
    pub analytic_shared: u64,
    pub analytic_separate: u64,
    pub mem_shared_bytes: usize,
    pub mem_separate_bytes: usize,
    pub adapter_params: usize,
    pub vault_params: usize,
    /// separate / shared, both dimensions.
    pub flop_ratio: f64,
    pub mem_ratio: f64,
}

impl EfficiencyReport {
    pub fn render(&self) -> String {
        format!(
            "efficiency bench: {} domains, {} samples\n\
             flops   shared={} separate={} ratio={:.3}\n\
             analytic shared={} separate={} (measured == analytic: {})\n\
             memory  shared={}B separate={}B ratio={:.3}\n\
             params  vault={} adapter-pair={}\n",
            self.n_domains,
            self.n_samples,
            self.flops_shared,
            self.flops_separate,
            self.flop_ratio,
            self.analytic_shared,
            self.analytic_separate,
            self.flops_shared == self.analytic_shared
                && self.flops_separate == self.analytic_separate,
            self.mem_shared_bytes,
            self.mem_separate_bytes,
            self.mem_ratio,
            self.vault_params,
            self.adapter_params,
        )
    }
}

// ---- closed-form forward costs, mirrored from the tape's documented
// per-op counts but derived here directly from the architecture dims ----

fn block_flops(rows: u64) -> u64 {
    let t = rows;
    let w = WIDTH as u64;
    let mlp = MLP_DIM as u64;
    let heads = crate::vault::HEADS as u64;
    let hd = crate::vault::HEAD_DIM as u64;
    let ln1 = 8 * t * w;
    let qkv = 3 * (2 * t * w * w + t * w);
    let per_head = 2 * t * hd * t + t * t + 4 * t * t + 2 * t * t * hd;
    let attn_out = 2 * t * w * w + t * w;
    let resid1 = t * w;
    let ln2 = 8 * t * w;
    let mlp_cost = (2 * t * w * mlp + t * mlp) + 8 * t * mlp + (2 * t * mlp * w + t * w);
    let resid2 = t * w;
    ln1 + qkv + heads * per_head + attn_out + resid1 + ln2 + mlp_cost + resid2
}

/// Vision encoder forward cost for one image.
pub fn analytic_vision_flops() -> u64 {
    let p = N_PATCHES as u64;
    let pd = PATCH_DIM as u64;
    let w = WIDTH as u64;
    let t = VIS_SEQ as u64;
    let patch_embed = 2 * p * pd * w + p * w;
    let pos_add = t * w;
    let blocks = 4 * block_flops(t);
    let lnf = 8 * t * w;
    let proj = 2 * w * w + w;
    patch_embed + pos_add + blocks + lnf + proj
}

/// Text encoder forward cost for `content` positioned rows plus `suffix`
/// position-free rows (the vault's EOS row is appended on top).
pub fn analytic_text_flops(content: usize, suffix: usize) -> u64 {
    let w = WIDTH as u64;
    let t = (content + suffix + 1) as u64;
    let pos_add = content as u64 * w;
    let eos_add = w;
    let blocks = 4 * block_flops(t);
    let lnf = 8 * t * w;
    let proj = 2 * w * w + w;
    pos_add + eos_add + blocks + lnf + proj
}

/// Client-side input adapter forward cost: the conv stack plus the shift
/// broadcast over `content` embedding rows.
pub fn analytic_input_adapter_flops(content: usize) -> u64 {
    let hw = (crate::vault::IMG_SIZE * crate::vault::IMG_SIZE) as u64;
    let conv: u64 = [(3u64, 16u64), (16, 16), (16, 3)]
        .iter()
        .map(|&(cin, cout)| hw * cout * (2 * cin * 9 + 1))
        .sum();
    conv + (content as u64) * WIDTH as u64
}

fn bench_pairs(n: usize) -> Vec<TrainPair<f32>> {
    let data = generate_dataset(n, 1, DomainShift::none(), 0xBE11C);
    data.train
}

/// Runs the benchmark: measured tape FLOPs for a representative batch of
/// each setup, scaled exactly to the sample counts (per-sample costs are
/// shape-determined constants), plus resident parameter memory.
pub fn efficiency_bench(n_domains: usize, n_samples: usize) -> Result<EfficiencyReport, HarnessError> {
    assert!(n_domains >= 1 && n_samples >= n_domains);
    let vault = Arc::new(build_vault::<f32>(0xEFF1C));

    // Per-domain adapter: the input pair (conv stack + shift/extra tokens).
    let adapter_config = AdapterConfig {
        mask: AblationMask {
            in_vis: true,
            in_txt: true,
            out_vis: false,
            out_txt: false,
            lga: false,
        },
        extra_tokens: 1,
        ..AdapterConfig::dga()
    };
    let adapters = init_adapters::<f32>(&adapter_config, 1)?;
    let adapter_params = adapters.count_trainable(vault.param_count()).0;

    // One representative batch per setup; per-sample cost is constant, so
    // scaling to the full counts is exact.
    let b = {
        let mut b = n_samples.min(16);
        while n_samples % b != 0 {
            b -= 1;
        }
        b
    };
    let pairs = bench_pairs(b);
    let content_rows = pairs[0].caption.len();

    // Shared setup: adapters applied client-side, then the vault.
    let shared_batch_flops = {
        let mut client_flops = 0u64;
        let mut batch = EntryBatch::new();
        let visual = adapters.visual.as_ref().unwrap();
        let textual = adapters.textual.as_ref().unwrap();
        let mut vis_data = Vec::new();
        let mut txt_data = Vec::new();
        for p in &pairs {
            let mut tape = Tape::new();
            let img = tape.constant(p.image.clone());
            let out = visual.apply_on_tape(&mut tape, img, None)?;
            vis_data.extend_from_slice(tape.value(out).data());

            let emb = vault.embed_tokens(&p.caption)?;
            let e = tape.constant(emb);
            let s = tape.constant(textual.shift.clone());
            let shifted = tape.add_bias_rows(e, s)?;
            txt_data.extend_from_slice(tape.value(shifted).data());
            client_flops += tape.flops();
        }
        batch.push(
            ENTRY_VISION_PIXELS,
            Tensor::new(vec![b, 3, 32, 32], vis_data).unwrap(),
        );
        batch.push(
            ENTRY_TEXT_EMBEDDINGS,
            Tensor::new(vec![b, content_rows, WIDTH], txt_data).unwrap(),
        );
        batch.push(
            ENTRY_TEXT_EMBEDDINGS,
            adapters.textual.as_ref().unwrap().extra.clone().unwrap(),
        );
        let pass = vault.forward(&batch, &Mode::Sealed)?;
        client_flops + pass.flops()
    };

    // Separate setup: the bare backbone over token ids.
    let separate_batch_flops = {
        let mut batch = EntryBatch::new();
        let mut vis_data = Vec::new();
        let mut ids = Vec::new();
        for p in &pairs {
            vis_data.extend_from_slice(p.image.data());
            ids.extend(p.caption.iter().map(|&v| v as f32));
        }
        batch.push(
            ENTRY_VISION_PIXELS,
            Tensor::new(vec![b, 3, 32, 32], vis_data).unwrap(),
        );
        batch.push(
            ENTRY_TEXT_TOKEN_IDS,
            Tensor::new(vec![b, content_rows], ids).unwrap(),
        );
        let pass = vault.forward(&batch, &Mode::Sealed)?;
        pass.flops()
    };

    let scale = (n_samples / b) as u64;
    let flops_shared = shared_batch_flops * scale;
    let flops_separate = separate_batch_flops * scale * n_domains as u64;

    let per_pair_shared = analytic_input_adapter_flops(content_rows)
        + analytic_vision_flops()
        + analytic_text_flops(content_rows, 1);
    let per_pair_separate = analytic_vision_flops() + analytic_text_flops(content_rows, 0);
    let analytic_shared = per_pair_shared * n_samples as u64;
    let analytic_separate = per_pair_separate * (n_samples * n_domains) as u64;

    let scalar = std::mem::size_of::<f32>();
    let vault_params = vault.param_count();
    let mem_shared_bytes = (vault_params + n_domains * adapter_params) * scalar;
    let mem_separate_bytes = n_domains * vault_params * scalar;

    Ok(EfficiencyReport {
        n_domains,
        n_samples,
        flops_shared,
        flops_separate,
        analytic_shared,
        analytic_separate,
        mem_shared_bytes,
        mem_separate_bytes,
        adapter_params,
        vault_params,
        flop_ratio: flops_separate as f64 / flops_shared as f64,
        mem_ratio: mem_separate_bytes as f64 / mem_shared_bytes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measured_flops_equal_analytic_exactly() {
        let report = efficiency_bench(2, 8).unwrap();
        assert_eq!(report.flops_shared, report.analytic_shared);
        assert_eq!(report.flops_separate, report.analytic_separate);
    }

    #[test]
    fn single_domain_ratios_reflect_adapter_overhead_only() {
        let report = efficiency_bench(1, 4).unwrap();
        // Memory: one backbone each side; the shared side adds one adapter
        // pair.
        assert_eq!(
            report.mem_separate_bytes,
            report.vault_params * 4
        );
        assert_eq!(
            report.mem_shared_bytes,
            (report.vault_params + report.adapter_params) * 4
        );
        assert!(report.mem_ratio < 1.0 && report.mem_ratio > 0.9);
        assert!(report.flop_ratio < 1.0, "shared adds adapter flops");
    }

    #[test]
    fn ten_domain_memory_ratio_sits_in_the_expected_band() {
        let report = efficiency_bench(10, 20).unwrap();
        assert!(
            report.mem_ratio >= 9.0 && report.mem_ratio <= 10.0,
            "ratio {}",
            report.mem_ratio
        );
    }
}
