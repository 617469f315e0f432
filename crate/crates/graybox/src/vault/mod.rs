//! The sealed dual-encoder backbone.
//!
//! A vault owns every backbone parameter and enforces the access contract:
//! sealed callers get entry-point descriptors, output features, embeddings
//! of requested ids, and entry gradients — never a parameter tensor. Owner
//! mode (credentialed by the build seed) exists so the white-box baselines
//! can train the same architecture in the same codebase.
//!
//! Architecture (fixed): images 3x32x32 split into 4x4 patches -> 64 patch
//! tokens + CLS; text over a 64-token vocabulary, up to 16 supplied tokens
//! plus a vault-appended EOS that is also the pooled slot. Both encoders
//! are 4 pre-norm transformer blocks of width 64 with 4 heads and a 256-wide
//! GELU MLP, followed by a final layernorm and a 64->64 projection. The
//! similarity temperature is a frozen backbone parameter.

mod forward;
mod owner;

pub mod client;

pub use client::{ClientError, InProcessClient, SessionId, VaultClient, SEALED_SURFACE};
pub use forward::{
    EntryBatch, EntryGrads, ForwardOutputs, ForwardPass, LoraAttachments, LoraPair, Mode,
    OutputTag, ParamGrads, ParamKey,
};
pub use owner::WhiteBoxHandle;

use crate::rng::DetRng;
use crate::tensor::{Scalar, Tensor, TensorError};
use thiserror::Error;

pub const WIDTH: usize = 64;
pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = WIDTH / HEADS;
pub const BLOCKS: usize = 4;
pub const IMG_CHANNELS: usize = 3;
pub const IMG_SIZE: usize = 32;
pub const PATCH: usize = 4;
pub const N_PATCHES: usize = (IMG_SIZE / PATCH) * (IMG_SIZE / PATCH);
pub const PATCH_DIM: usize = IMG_CHANNELS * PATCH * PATCH;
pub const VIS_SEQ: usize = N_PATCHES + 1;
pub const MLP_DIM: usize = 4 * WIDTH;
pub const VOCAB: usize = 64;
/// Reserved pooling token appended by the vault itself.
pub const EOS_ID: usize = VOCAB - 1;
/// Longest token/embedding sequence a caller may supply.
pub const MAX_TEXT: usize = 16;
/// 16 content positions plus the EOS slot.
pub const TXT_POS: usize = MAX_TEXT + 1;
/// Upper bound on prefix tokens per layer entry.
pub const MAX_PREFIX: usize = 64;
/// CLIP-style logit scale, frozen as a backbone parameter.
pub const TEMPERATURE: f64 = 1.0 / 0.07;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("unknown entry id {0}")]
    UnknownEntry(u8),
    #[error("entry {entry}: expected shape {expected}, got {got:?}")]
    EntryShape {
        entry: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("session is {actual}; operation requires {needed}")]
    SessionState {
        needed: &'static str,
        actual: &'static str,
    },
    #[error("access denied: wrong owner credential")]
    AccessDenied,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What a parameter is, for optimizers that exclude some classes from
/// weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Token,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct VisionIdx {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub pos: usize,
    pub blocks: [BlockIdx; BLOCKS],
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TextIdx {
    pub embed: usize,
    pub pos: usize,
    pub blocks: [BlockIdx; BLOCKS],
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

/// Which encoder an intermediate entry point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Encoder {
    Vision,
    Text,
}

impl Encoder {
    pub fn short(self) -> &'static str {
        match self {
            Encoder::Vision => "vision",
            Encoder::Text => "text",
        }
    }
}

/// The structural information a sealed caller may see about one entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Modality {
    VisionPixels,
    TextTokenIds,
    TextEmbeddings,
    LayerPrefix { encoder: Encoder, layer: usize },
}

/// Entry-point descriptor: id, name, modality, shape, gradient exposure.
/// Shapes are per-item maxima; batched calls add a leading batch axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryPointDescriptor {
    pub id: u8,
    pub name: String,
    pub modality: Modality,
    pub shape: Vec<usize>,
    pub grad_available: bool,
}

pub const ENTRY_VISION_PIXELS: u8 = 0;
pub const ENTRY_TEXT_TOKEN_IDS: u8 = 1;
pub const ENTRY_TEXT_EMBEDDINGS: u8 = 2;

/// Entry id of the prefix injection point at `layer` of `encoder`.
pub fn prefix_entry_id(encoder: Encoder, layer: usize) -> u8 {
    debug_assert!(layer < BLOCKS);
    match encoder {
        Encoder::Vision => 3 + layer as u8,
        Encoder::Text => 3 + BLOCKS as u8 + layer as u8,
    }
}

pub fn entry_count() -> usize {
    3 + 2 * BLOCKS
}

/// The frozen backbone: parameters, index maps, and the build seed.
#[derive(Clone)]
pub struct VaultModel<T: Scalar> {
    params: Vec<Param<T>>,
    pub(crate) vis: VisionIdx,
    pub(crate) txt: TextIdx,
    pub(crate) temp: usize,
    seed: u64,
}

/// Deterministically initializes a vault from a seed: normal(0, 0.02)
/// weights and tokens, zero biases, unit layernorm gains. The same seed
/// always yields a bit-identical parameter set and checksum.
pub fn build_vault<T: Scalar>(seed: u64) -> VaultModel<T> {
    VaultModel::build(seed)
}

impl<T: Scalar> VaultModel<T> {
    fn build(seed: u64) -> Self {
        let mut rng = DetRng::derive(seed, 0x56415531); // "VAU1"
        let mut params: Vec<Param<T>> = Vec::new();

        let push = |params: &mut Vec<Param<T>>,
                        rng: &mut DetRng,
                        name: String,
                        kind: ParamKind,
                        dims: &[usize]|
         -> usize {
            let numel: usize = dims.iter().product();
            let data: Vec<T> = match kind {
                ParamKind::Weight | ParamKind::Token => (0..numel)
                    .map(|_| T::from_f64(rng.normal_scaled(INIT_STD)))
                    .collect(),
                ParamKind::Bias => vec![T::ZERO; numel],
                ParamKind::Gain => vec![T::ONE; numel],
            };
            params.push(Param {
                name,
                kind,
                value: Tensor::new(dims.to_vec(), data).unwrap(),
            });
            params.len() - 1
        };

        let block = |params: &mut Vec<Param<T>>, rng: &mut DetRng, prefix: &str| BlockIdx {
            ln1_g: push(params, rng, format!("{prefix}.ln1.g"), ParamKind::Gain, &[WIDTH]),
            ln1_b: push(params, rng, format!("{prefix}.ln1.b"), ParamKind::Bias, &[WIDTH]),
            wq: push(params, rng, format!("{prefix}.attn.wq"), ParamKind::Weight, &[WIDTH, WIDTH]),
            bq: push(params, rng, format!("{prefix}.attn.bq"), ParamKind::Bias, &[WIDTH]),
            wk: push(params, rng, format!("{prefix}.attn.wk"), ParamKind::Weight, &[WIDTH, WIDTH]),
            bk: push(params, rng, format!("{prefix}.attn.bk"), ParamKind::Bias, &[WIDTH]),
            wv: push(params, rng, format!("{prefix}.attn.wv"), ParamKind::Weight, &[WIDTH, WIDTH]),
            bv: push(params, rng, format!("{prefix}.attn.bv"), ParamKind::Bias, &[WIDTH]),
            wo: push(params, rng, format!("{prefix}.attn.wo"), ParamKind::Weight, &[WIDTH, WIDTH]),
            bo: push(params, rng, format!("{prefix}.attn.bo"), ParamKind::Bias, &[WIDTH]),
            ln2_g: push(params, rng, format!("{prefix}.ln2.g"), ParamKind::Gain, &[WIDTH]),
            ln2_b: push(params, rng, format!("{prefix}.ln2.b"), ParamKind::Bias, &[WIDTH]),
            w1: push(params, rng, format!("{prefix}.mlp.w1"), ParamKind::Weight, &[WIDTH, MLP_DIM]),
            b1: push(params, rng, format!("{prefix}.mlp.b1"), ParamKind::Bias, &[MLP_DIM]),
            w2: push(params, rng, format!("{prefix}.mlp.w2"), ParamKind::Weight, &[MLP_DIM, WIDTH]),
            b2: push(params, rng, format!("{prefix}.mlp.b2"), ParamKind::Bias, &[WIDTH]),
        };

        let vis = VisionIdx {
            patch_w: push(&mut params, &mut rng, "vis.patch.w".into(), ParamKind::Weight, &[PATCH_DIM, WIDTH]),
            patch_b: push(&mut params, &mut rng, "vis.patch.b".into(), ParamKind::Bias, &[WIDTH]),
            cls: push(&mut params, &mut rng, "vis.cls".into(), ParamKind::Token, &[1, WIDTH]),
            pos: push(&mut params, &mut rng, "vis.pos".into(), ParamKind::Token, &[VIS_SEQ, WIDTH]),
            blocks: std::array::from_fn(|i| block(&mut params, &mut rng, &format!("vis.blk{i}"))),
            lnf_g: push(&mut params, &mut rng, "vis.lnf.g".into(), ParamKind::Gain, &[WIDTH]),
            lnf_b: push(&mut params, &mut rng, "vis.lnf.b".into(), ParamKind::Bias, &[WIDTH]),
            proj_w: push(&mut params, &mut rng, "vis.proj.w".into(), ParamKind::Weight, &[WIDTH, WIDTH]),
            proj_b: push(&mut params, &mut rng, "vis.proj.b".into(), ParamKind::Bias, &[WIDTH]),
        };

        let txt = TextIdx {
            embed: push(&mut params, &mut rng, "txt.embed".into(), ParamKind::Token, &[VOCAB, WIDTH]),
            pos: push(&mut params, &mut rng, "txt.pos".into(), ParamKind::Token, &[TXT_POS, WIDTH]),
            blocks: std::array::from_fn(|i| block(&mut params, &mut rng, &format!("txt.blk{i}"))),
            lnf_g: push(&mut params, &mut rng, "txt.lnf.g".into(), ParamKind::Gain, &[WIDTH]),
            lnf_b: push(&mut params, &mut rng, "txt.lnf.b".into(), ParamKind::Bias, &[WIDTH]),
            proj_w: push(&mut params, &mut rng, "txt.proj.w".into(), ParamKind::Weight, &[WIDTH, WIDTH]),
            proj_b: push(&mut params, &mut rng, "txt.proj.b".into(), ParamKind::Bias, &[WIDTH]),
        };

        let temp = params.len();
        params.push(Param {
            name: "temp".into(),
            kind: ParamKind::Gain,
            value: Tensor::scalar(T::from_f64(TEMPERATURE)),
        });

        VaultModel {
            params,
            vis,
            txt,
            temp,
            seed,
        }
    }

    pub fn seed_fingerprint(&self) -> u64 {
        // Exposed for cache keying only; the seed itself doubles as the
        // owner credential and is compared inside owner_unlock.
        fnv1a64(&self.seed.to_le_bytes())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a 64-bit digest over the concatenated little-endian parameter
    /// bytes, taken in registry (construction) order. Bit-exact across
    /// runs; any owner-mode edit changes it, no sealed call ever does.
    pub fn checksum(&self) -> u64 {
        let mut hash = FNV_OFFSET;
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.clear();
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            hash = fnv1a64_continue(hash, &bytes);
        }
        hash
    }

    /// Sealed structural listing: base entries first, then the per-layer
    /// prefix entries of both encoders in layer order.
    pub fn list_entries(&self) -> Vec<EntryPointDescriptor> {
        let mut out = Vec::with_capacity(entry_count());
        out.push(EntryPointDescriptor {
            id: ENTRY_VISION_PIXELS,
            name: "vision-pixels".into(),
            modality: Modality::VisionPixels,
            shape: vec![IMG_CHANNELS, IMG_SIZE, IMG_SIZE],
            grad_available: true,
        });
        out.push(EntryPointDescriptor {
            id: ENTRY_TEXT_TOKEN_IDS,
            name: "text-token-ids".into(),
            modality: Modality::TextTokenIds,
            shape: vec![MAX_TEXT],
            grad_available: false,
        });
        out.push(EntryPointDescriptor {
            id: ENTRY_TEXT_EMBEDDINGS,
            name: "text-embeddings".into(),
            modality: Modality::TextEmbeddings,
            shape: vec![MAX_TEXT, WIDTH],
            grad_available: true,
        });
        for encoder in [Encoder::Vision, Encoder::Text] {
            for layer in 0..BLOCKS {
                out.push(EntryPointDescriptor {
                    id: prefix_entry_id(encoder, layer),
                    name: format!("{}-layer-{layer}", encoder.short()),
                    modality: Modality::LayerPrefix { encoder, layer },
                    shape: vec![MAX_PREFIX, WIDTH],
                    grad_available: true,
                });
            }
        }
        out
    }

    /// Embedding rows for the requested ids, nothing else. Positional
    /// information is applied later inside forward, which is what makes
    /// client-side shift/extra tokens position-free.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor<T>, VaultError> {
        if ids.is_empty() {
            return Err(VaultError::Input("empty token sequence".into()));
        }
        if ids.len() > MAX_TEXT {
            return Err(VaultError::Input(format!(
                "sequence of {} tokens exceeds the {MAX_TEXT}-token budget",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB) {
            return Err(VaultError::Input(format!(
                "token id {bad} outside vocabulary of {VOCAB}"
            )));
        }
        let table = &self.params[self.txt.embed].value;
        let mut data = Vec::with_capacity(ids.len() * WIDTH);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * WIDTH..(i + 1) * WIDTH]);
        }
        Ok(Tensor::new(vec![ids.len(), WIDTH], data).unwrap())
    }

    /// Opens owner mode. The credential is the build seed.
    pub fn owner_unlock(&mut self, credential: u64) -> Result<WhiteBoxHandle<'_, T>, VaultError> {
        if credential != self.seed {
            return Err(VaultError::AccessDenied);
        }
        Ok(WhiteBoxHandle::new(self))
    }

    pub(crate) fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<Param<T>> {
        &mut self.params
    }

    /// Serializes the vault for the pretrain cache: magic, seed, then each
    /// parameter as name + tensor encoding in registry order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"GBV1");
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.push(p.name.len() as u8);
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.value.encode());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VaultError> {
        let bad = |msg: &str| VaultError::Input(format!("vault decode: {msg}"));
        if bytes.len() < 16 || &bytes[..4] != b"GBV1" {
            return Err(bad("missing GBV1 header"));
        }
        let seed = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        // Rebuild from the seed to recover names/kinds/index maps, then
        // overwrite values from the payload.
        let mut vault = Self::build(seed);
        if count != vault.params.len() {
            return Err(bad("parameter count mismatch"));
        }
        let mut off = 16;
        for i in 0..count {
            if bytes.len() < off + 1 {
                return Err(bad("truncated name"));
            }
            let nlen = bytes[off] as usize;
            off += 1;
            if bytes.len() < off + nlen {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&bytes[off..off + nlen])
                .map_err(|_| bad("name not utf-8"))?;
            if name != vault.params[i].name {
                return Err(bad(&format!(
                    "parameter {i} is {name}, expected {}",
                    vault.params[i].name
                )));
            }
            off += nlen;
            let (tensor, used) = Tensor::<T>::decode(&bytes[off..])
                .map_err(|e| bad(&format!("param {name}: {e}")))?;
            if tensor.dims() != vault.params[i].value.dims() {
                return Err(bad(&format!("param {name}: wrong dims")));
            }
            vault.params[i].value = tensor;
            off += used;
        }
        Ok(vault)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64_continue(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_continue(FNV_OFFSET, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a64_known_vectors() {
        // Reference values of the standard FNV-1a 64-bit parameters.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn same_seed_same_checksum_different_seed_differs() {
        let a = build_vault::<f32>(42);
        let b = build_vault::<f32>(42);
        let c = build_vault::<f32>(43);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // Independent hand count of the architecture:
        //   block = 2*64 (ln1) + 4*(64*64+64) (attn) + 2*64 (ln2)
        //         + (64*256+256) + (256*64+64) (mlp)
        let block = 2 * 64 + 4 * (64 * 64 + 64) + 2 * 64 + (64 * 256 + 256) + (256 * 64 + 64);
        let vision = (48 * 64 + 64) + 64 + 65 * 64 + 4 * block + 2 * 64 + (64 * 64 + 64);
        let text = 64 * 64 + 17 * 64 + 4 * block + 2 * 64 + (64 * 64 + 64);
        let expected = vision + text + 1; // + temperature
        assert_eq!(expected, 420_993);
        assert_eq!(build_vault::<f32>(7).param_count(), expected);
    }

    #[test]
    fn entry_listing_order_and_grads() {
        let vault = build_vault::<f32>(1);
        let entries = vault.list_entries();
        assert_eq!(entries.len(), 11);
        assert_eq!(entries[0].name, "vision-pixels");
        assert_eq!(entries[0].shape, vec![3, 32, 32]);
        assert_eq!(entries[1].name, "text-token-ids");
        assert_eq!(entries[2].name, "text-embeddings");
        assert_eq!(entries[3].name, "vision-layer-0");
        assert_eq!(entries[7].name, "text-layer-0");
        assert_eq!(entries[10].name, "text-layer-3");
        for e in &entries {
            assert_eq!(e.grad_available, e.name != "text-token-ids");
        }
        let ids: Vec<u8> = entries.iter().map(|e| e.id).collect();
        assert_eq!(ids, (0..11).collect::<Vec<u8>>());
    }

    #[test]
    fn embed_tokens_contract() {
        let vault = build_vault::<f32>(5);
        let two = vault.embed_tokens(&[9, 9]).unwrap();
        assert_eq!(two.dims(), &[2, 64]);
        assert_eq!(&two.data()[..64], &two.data()[64..]);

        assert!(vault.embed_tokens(&[]).is_err());
        assert!(vault.embed_tokens(&[64]).is_err());
        assert!(vault.embed_tokens(&[0; 17]).is_err());

        // Owner-mode ground truth: returned row k equals table row k.
        let mut vault = vault;
        let table = vault
            .owner_unlock(5)
            .unwrap()
            .param_by_name("txt.embed")
            .unwrap()
            .clone();
        let row = vault.embed_tokens(&[9]).unwrap();
        assert_eq!(row.data(), &table.data()[9 * 64..10 * 64]);
    }

    #[test]
    fn vault_cache_roundtrip_is_bit_exact() {
        let vault = build_vault::<f32>(11);
        let bytes = vault.to_bytes();
        let back = VaultModel::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.checksum(), vault.checksum());
        assert!(VaultModel::<f32>::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn owner_unlock_requires_build_seed() {
        let mut vault = build_vault::<f32>(99);
        assert!(matches!(
            vault.owner_unlock(98),
            Err(VaultError::AccessDenied)
        ));
        let before = vault.checksum();
        {
            let _handle = vault.owner_unlock(99).unwrap();
            // No edits.
        }
        assert_eq!(vault.checksum(), before);
    }
}
