//! Batched forward/backward through the backbone.
//!
//! Every batch item gets its own tape so items run in parallel; shared
//! entries (prefix tokens, the position-free text suffix) appear as a leaf
//! on every item tape and their gradients are summed in item order, which
//! keeps results bit-identical regardless of thread count.
//!
//! The same machinery serves three access modes:
//! - `Sealed`: parameters enter tapes as constants; only entry gradients
//!   leave.
//! - `Owner`: a chosen parameter subset enters as leaves and receives
//!   gradients (full/last-layers fine-tuning and pretraining).
//! - `Lora`: parameters stay constant but the attention Q/K/V weights are
//!   replaced by `W + down*up * (alpha/r)` with the low-rank factors as
//!   leaves.

use rayon::prelude::*;

use super::{
    BlockIdx, Encoder, Modality, VaultError, VaultModel, BLOCKS, ENTRY_TEXT_EMBEDDINGS, ENTRY_VISION_PIXELS, EOS_ID, HEADS, HEAD_DIM, IMG_CHANNELS, IMG_SIZE,
    MAX_PREFIX, MAX_TEXT, PATCH, VOCAB, WIDTH,
};
use crate::tensor::{Scalar, Tape, Tensor, VarId};

/// Which projected feature an output row belongs to. Features are the raw
/// projection outputs; normalization happens on the client side of the
/// boundary (before similarity), so an identity output adapter reproduces
/// the unadapted path bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputTag {
    VisionFeature,
    TextFeature,
}

impl OutputTag {
    pub fn code(self) -> u8 {
        match self {
            OutputTag::VisionFeature => 0,
            OutputTag::TextFeature => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputTag::VisionFeature),
            1 => Some(OutputTag::TextFeature),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputTag::VisionFeature => "vision-feature",
            OutputTag::TextFeature => "text-feature",
        }
    }
}

/// Entries for one forward call, in supply order, exactly as they travel on
/// the wire. The text-embeddings id may appear twice: the first occurrence
/// is the positioned per-item content `[n, l, 64]`, an optional second
/// occurrence is a shared position-free suffix `[e, 64]` appended to every
/// item (this is where a learned extra token rides).
#[derive(Debug, Clone, PartialEq)]
pub struct EntryBatch<T: Scalar> {
    pub entries: Vec<(u8, Tensor<T>)>,
}

impl<T: Scalar> EntryBatch<T> {
    pub fn new() -> Self {
        EntryBatch {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u8, tensor: Tensor<T>) -> &mut Self {
        self.entries.push((id, tensor));
        self
    }
}

impl<T: Scalar> Default for EntryBatch<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Low-rank attention attachments: one (down, up) pair per Q/K/V matrix of
/// every block of both encoders, in (encoder, block, q/k/v) order. `up`
/// starts at zero so the attachment is the identity at init.
#[derive(Debug, Clone)]
pub struct LoraAttachments<T: Scalar> {
    pub rank: usize,
    pub alpha: f64,
    pub pairs: Vec<LoraPair<T>>,
}

#[derive(Debug, Clone)]
pub struct LoraPair<T: Scalar> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

impl<T: Scalar> LoraAttachments<T> {
    pub const MATS_PER_BLOCK: usize = 3; // Q, K, V

    pub fn pair_index(encoder: Encoder, block: usize, mat: usize) -> usize {
        let e = match encoder {
            Encoder::Vision => 0,
            Encoder::Text => 1,
        };
        (e * BLOCKS + block) * Self::MATS_PER_BLOCK + mat
    }

    pub fn pair_count() -> usize {
        2 * BLOCKS * Self::MATS_PER_BLOCK
    }

    pub fn param_count(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.down.numel() + p.up.numel())
            .sum()
    }
}

/// Access mode for one forward pass.
pub enum Mode<'a, T: Scalar> {
    Sealed,
    Owner { trainable: &'a [usize] },
    Lora { attachments: &'a LoraAttachments<T> },
}

/// Key for a gradient produced in a non-sealed pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKey {
    Vault(usize),
    LoraDown(usize),
    LoraUp(usize),
}

pub type ParamGrads<T> = Vec<(ParamKey, Tensor<T>)>;
pub type EntryGrads<T> = Vec<(u8, Tensor<T>)>;

#[derive(Debug, Clone)]
pub struct ForwardOutputs<T: Scalar> {
    /// Stacked `[n, 64]` pre-normalization projections, vision first.
    pub features: Vec<(OutputTag, Tensor<T>)>,
}

impl<T: Scalar> ForwardOutputs<T> {
    pub fn get(&self, tag: OutputTag) -> Option<&Tensor<T>> {
        self.features.iter().find(|(t, _)| *t == tag).map(|(_, f)| f)
    }
}

enum TextSource<T: Scalar> {
    Ids(Vec<Vec<usize>>),
    Embeddings {
        content: Tensor<T>,
        suffix: Option<Tensor<T>>,
    },
}

struct Parsed<T: Scalar> {
    n: usize,
    vision: Option<Tensor<T>>,
    text: Option<TextSource<T>>,
    prefixes: Vec<(Encoder, usize, Tensor<T>)>,
    /// Grad-capable entries in supply order, for reassembling BACKWARD
    /// responses with the shapes of what was supplied.
    grad_order: Vec<GradSlot>,
}

#[derive(Debug, Clone, Copy)]
enum GradSlot {
    Vision,
    TextContent,
    TextSuffix,
    Prefix(Encoder, usize),
}

fn parse_entries<T: Scalar>(
    vault: &VaultModel<T>,
    batch: &EntryBatch<T>,
) -> Result<Parsed<T>, VaultError> {
    let descriptors = vault.list_entries();
    let mut parsed = Parsed {
        n: 0,
        vision: None,
        text: None,
        prefixes: Vec::new(),
        grad_order: Vec::new(),
    };
    let mut n: Option<usize> = None;
    let set_n = |n: &mut Option<usize>, candidate: usize| -> Result<(), VaultError> {
        match *n {
            None => {
                *n = Some(candidate);
                Ok(())
            }
            Some(existing) if existing == candidate => Ok(()),
            Some(existing) => Err(VaultError::Input(format!(
                "inconsistent batch sizes: {existing} vs {candidate}"
            ))),
        }
    };

    for (id, tensor) in &batch.entries {
        let desc = descriptors
            .iter()
            .find(|d| d.id == *id)
            .ok_or(VaultError::UnknownEntry(*id))?;
        match &desc.modality {
            Modality::VisionPixels => {
                if parsed.vision.is_some() {
                    return Err(VaultError::Input("vision-pixels supplied twice".into()));
                }
                if tensor.rank() != 4
                    || tensor.dims()[1] != IMG_CHANNELS
                    || tensor.dims()[2] != IMG_SIZE
                    || tensor.dims()[3] != IMG_SIZE
                {
                    return Err(VaultError::EntryShape {
                        entry: "vision-pixels",
                        expected: format!("[n, {IMG_CHANNELS}, {IMG_SIZE}, {IMG_SIZE}]"),
                        got: tensor.dims().to_vec(),
                    });
                }
                set_n(&mut n, tensor.dims()[0])?;
                parsed.vision = Some(tensor.clone());
                parsed.grad_order.push(GradSlot::Vision);
            }
            Modality::TextTokenIds => {
                if parsed.text.is_some() {
                    return Err(VaultError::Input(
                        "exactly one of text-token-ids / text-embeddings may be supplied".into(),
                    ));
                }
                if tensor.rank() != 2 || tensor.dims()[1] > MAX_TEXT {
                    return Err(VaultError::EntryShape {
                        entry: "text-token-ids",
                        expected: format!("[n, l<={MAX_TEXT}]"),
                        got: tensor.dims().to_vec(),
                    });
                }
                set_n(&mut n, tensor.dims()[0])?;
                let l = tensor.dims()[1];
                let mut ids = Vec::with_capacity(tensor.dims()[0]);
                for item in 0..tensor.dims()[0] {
                    let mut row = Vec::with_capacity(l);
                    for j in 0..l {
                        let v = tensor.data()[item * l + j].to_f64();
                        if v.fract() != 0.0 || v < 0.0 || v >= VOCAB as f64 {
                            return Err(VaultError::Input(format!(
                                "token id {v} is not an integer within the {VOCAB}-token vocabulary"
                            )));
                        }
                        row.push(v as usize);
                    }
                    ids.push(row);
                }
                parsed.text = Some(TextSource::Ids(ids));
                // No grad slot: integer ids have no gradient.
            }
            Modality::TextEmbeddings => match &mut parsed.text {
                None => {
                    if tensor.rank() != 3
                        || tensor.dims()[1] == 0
                        || tensor.dims()[1] > MAX_TEXT
                        || tensor.dims()[2] != WIDTH
                    {
                        return Err(VaultError::EntryShape {
                            entry: "text-embeddings",
                            expected: format!("[n, l<={MAX_TEXT}, {WIDTH}]"),
                            got: tensor.dims().to_vec(),
                        });
                    }
                    set_n(&mut n, tensor.dims()[0])?;
                    parsed.text = Some(TextSource::Embeddings {
                        content: tensor.clone(),
                        suffix: None,
                    });
                    parsed.grad_order.push(GradSlot::TextContent);
                }
                Some(TextSource::Embeddings { content, suffix }) => {
                    if suffix.is_some() {
                        return Err(VaultError::Input(
                            "text-embeddings supplied more than twice".into(),
                        ));
                    }
                    if tensor.rank() != 2 || tensor.dims()[1] != WIDTH {
                        return Err(VaultError::EntryShape {
                            entry: "text-embeddings suffix",
                            expected: format!("[e, {WIDTH}]"),
                            got: tensor.dims().to_vec(),
                        });
                    }
                    if content.dims()[1] + tensor.dims()[0] > MAX_TEXT {
                        return Err(VaultError::Input(format!(
                            "sequence budget exceeded: {} content + {} suffix rows > {MAX_TEXT}; \
                             truncate the prompt",
                            content.dims()[1],
                            tensor.dims()[0]
                        )));
                    }
                    *suffix = Some(tensor.clone());
                    parsed.grad_order.push(GradSlot::TextSuffix);
                }
                Some(TextSource::Ids(_)) => {
                    return Err(VaultError::Input(
                        "exactly one of text-token-ids / text-embeddings may be supplied".into(),
                    ));
                }
            },
            Modality::LayerPrefix { encoder, layer } => {
                if parsed
                    .prefixes
                    .iter()
                    .any(|(e, l, _)| e == encoder && l == layer)
                {
                    return Err(VaultError::Input(format!(
                        "layer-prefix entry {} supplied twice",
                        desc.name
                    )));
                }
                if tensor.rank() != 2 || tensor.dims()[1] != WIDTH || tensor.dims()[0] > MAX_PREFIX
                {
                    return Err(VaultError::EntryShape {
                        entry: "layer-prefix",
                        expected: format!("[p<={MAX_PREFIX}, {WIDTH}]"),
                        got: tensor.dims().to_vec(),
                    });
                }
                parsed
                    .prefixes
                    .push((*encoder, *layer, tensor.clone()));
                parsed.grad_order.push(GradSlot::Prefix(*encoder, *layer));
            }
        }
    }

    if parsed.vision.is_none() && parsed.text.is_none() {
        return Err(VaultError::Input(
            "at least one of vision-pixels / text input must be supplied".into(),
        ));
    }
    parsed.n = n.unwrap();
    Ok(parsed)
}

/// Binds vault parameters into one item tape, caching each bind.
struct Binder<'v, T: Scalar> {
    vault: &'v VaultModel<T>,
    bound: Vec<Option<VarId>>,
    trainable: Vec<(ParamKey, VarId)>,
    owner_set: Option<Vec<bool>>,
    lora: Option<&'v LoraAttachments<T>>,
    lora_bound: Vec<Option<(VarId, VarId)>>,
}

impl<'v, T: Scalar> Binder<'v, T> {
    fn new(vault: &'v VaultModel<T>, mode: &Mode<'v, T>) -> Self {
        let owner_set = match mode {
            Mode::Owner { trainable } => {
                let mut mask = vec![false; vault.params().len()];
                for &idx in *trainable {
                    mask[idx] = true;
                }
                Some(mask)
            }
            _ => None,
        };
        let lora = match mode {
            Mode::Lora { attachments } => Some(*attachments),
            _ => None,
        };
        Binder {
            vault,
            bound: vec![None; vault.params().len()],
            trainable: Vec::new(),
            owner_set,
            lora,
            lora_bound: vec![None; LoraAttachments::<T>::pair_count()],
        }
    }

    fn bind(&mut self, tape: &mut Tape<T>, idx: usize) -> VarId {
        if let Some(var) = self.bound[idx] {
            return var;
        }
        let value = self.vault.params()[idx].value.clone();
        let var = match &self.owner_set {
            Some(mask) if mask[idx] => {
                let var = tape.leaf(value);
                self.trainable.push((ParamKey::Vault(idx), var));
                var
            }
            _ => tape.constant(value),
        };
        self.bound[idx] = Some(var);
        var
    }

    /// Binds an attention matrix, composing the low-rank update when a LoRA
    /// attachment is active.
    fn bind_attn(
        &mut self,
        tape: &mut Tape<T>,
        idx: usize,
        encoder: Encoder,
        block: usize,
        mat: usize,
    ) -> VarId {
        let Some(lora) = self.lora else {
            return self.bind(tape, idx);
        };
        if let Some(var) = self.bound[idx] {
            return var;
        }
        let pair_idx = LoraAttachments::<T>::pair_index(encoder, block, mat);
        let (down, up) = match self.lora_bound[pair_idx] {
            Some(pair) => pair,
            None => {
                let down = tape.leaf(lora.pairs[pair_idx].down.clone());
                let up = tape.leaf(lora.pairs[pair_idx].up.clone());
                self.trainable.push((ParamKey::LoraDown(pair_idx), down));
                self.trainable.push((ParamKey::LoraUp(pair_idx), up));
                self.lora_bound[pair_idx] = Some((down, up));
                (down, up)
            }
        };
        let base = tape.constant(self.vault.params()[idx].value.clone());
        let delta = tape.matmul(down, up).expect("lora factor dims");
        let scaled = tape.scale(delta, T::from_f64(lora.alpha / lora.rank as f64));
        let eff = tape.add(base, scaled).expect("lora delta dims");
        self.bound[idx] = Some(eff);
        eff
    }
}

struct ItemGraph<T: Scalar> {
    tape: Tape<T>,
    vis_out: Option<VarId>,
    txt_out: Option<VarId>,
    /// Grad-capable entry leaves in the batch's supply order.
    entry_vars: Vec<VarId>,
    trainable: Vec<(ParamKey, VarId)>,
}

/// One forward call's recorded state: consumed by exactly one backward.
pub struct ForwardPass<T: Scalar> {
    items: Vec<ItemGraph<T>>,
    n: usize,
    outputs: ForwardOutputs<T>,
    grad_order: Vec<GradSlot>,
    grad_shapes: Vec<Vec<usize>>,
    flops: u64,
}

impl<T: Scalar> std::fmt::Debug for ForwardPass<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardPass")
            .field("batch", &self.n)
            .field("flops", &self.flops)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> ForwardPass<T> {
    pub fn outputs(&self) -> &ForwardOutputs<T> {
        &self.outputs
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Forward arithmetic cost of this pass, summed over item tapes.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Consumes the pass: seeds the supplied output gradients, sweeps every
    /// item tape, and returns (a) gradients for the grad-capable entries in
    /// supply order with supply shapes, and (b) gradients for trainable
    /// parameters when the pass was not sealed.
    pub fn backward(
        self,
        out_grads: &[(OutputTag, Tensor<T>)],
    ) -> Result<(EntryGrads<T>, ParamGrads<T>), VaultError> {
        for (tag, grad) in out_grads {
            let produced = self.outputs.get(*tag).ok_or_else(|| {
                VaultError::Input(format!(
                    "gradient supplied for {} which this forward did not produce",
                    tag.name()
                ))
            })?;
            if grad.dims() != produced.dims() {
                return Err(VaultError::EntryShape {
                    entry: "output gradient",
                    expected: format!("{:?}", produced.dims()),
                    got: grad.dims().to_vec(),
                });
            }
        }

        let n = self.n;
        let grad_order = self.grad_order;
        let grad_shapes = self.grad_shapes;
        let results: Vec<Result<ItemBack<T>, VaultError>> = self
            .items
            .into_par_iter()
            .enumerate()
            .map(|(i, mut item)| {
                let mut seeds = Vec::new();
                for (tag, grad) in out_grads {
                    let var = match tag {
                        OutputTag::VisionFeature => item.vis_out,
                        OutputTag::TextFeature => item.txt_out,
                    }
                    .expect("validated above");
                    let row =
                        Tensor::new(vec![1, WIDTH], grad.data()[i * WIDTH..(i + 1) * WIDTH].to_vec())
                            .unwrap();
                    seeds.push((var, row));
                }
                let grads = item.tape.backward_seeded(seeds)?;
                let entry_grads: Vec<Tensor<T>> = item
                    .entry_vars
                    .iter()
                    .map(|&v| grads.get(v).clone())
                    .collect();
                let param_grads: Vec<(ParamKey, Tensor<T>)> = item
                    .trainable
                    .iter()
                    .map(|&(key, v)| (key, grads.get(v).clone()))
                    .collect();
                Ok(ItemBack {
                    entry_grads,
                    param_grads,
                })
            })
            .collect();

        let mut per_item = Vec::with_capacity(n);
        for r in results {
            per_item.push(r?);
        }

        // Reassemble entry gradients in supply order. Per-item entries stack
        // along a new batch axis; shared entries sum over items in index
        // order.
        let mut entry_grads: EntryGrads<T> = Vec::with_capacity(grad_order.len());
        for (slot_idx, slot) in grad_order.iter().enumerate() {
            let shape = &grad_shapes[slot_idx];
            let (id, tensor) = match slot {
                GradSlot::Vision | GradSlot::TextContent => {
                    let mut data = Vec::with_capacity(shape.iter().product());
                    for item in &per_item {
                        data.extend_from_slice(item.entry_grads[slot_idx].data());
                    }
                    let id = match slot {
                        GradSlot::Vision => ENTRY_VISION_PIXELS,
                        _ => ENTRY_TEXT_EMBEDDINGS,
                    };
                    (id, Tensor::new(shape.clone(), data).unwrap())
                }
                GradSlot::TextSuffix => {
                    let mut acc = Tensor::<T>::zeros(shape);
                    for item in &per_item {
                        for (d, s) in acc
                            .data_mut()
                            .iter_mut()
                            .zip(item.entry_grads[slot_idx].data())
                        {
                            *d += *s;
                        }
                    }
                    (ENTRY_TEXT_EMBEDDINGS, acc)
                }
                GradSlot::Prefix(encoder, layer) => {
                    let mut acc = Tensor::<T>::zeros(shape);
                    for item in &per_item {
                        for (d, s) in acc
                            .data_mut()
                            .iter_mut()
                            .zip(item.entry_grads[slot_idx].data())
                        {
                            *d += *s;
                        }
                    }
                    (super::prefix_entry_id(*encoder, *layer), acc)
                }
            };
            entry_grads.push((id, tensor));
        }

        // Parameter gradients: sum across items keyed by ParamKey, ordered
        // by first appearance in item 0.
        let mut param_grads: ParamGrads<T> = Vec::new();
        if let Some(first) = per_item.first() {
            for (key, grad) in &first.param_grads {
                param_grads.push((*key, grad.clone()));
            }
            for item in per_item.iter().skip(1) {
                for (acc, (key, grad)) in param_grads.iter_mut().zip(&item.param_grads) {
                    debug_assert_eq!(acc.0, *key);
                    for (d, s) in acc.1.data_mut().iter_mut().zip(grad.data()) {
                        *d += *s;
                    }
                }
            }
        }

        Ok((entry_grads, param_grads))
    }
}

struct ItemBack<T: Scalar> {
    entry_grads: Vec<Tensor<T>>,
    param_grads: Vec<(ParamKey, Tensor<T>)>,
}

impl<T: Scalar> VaultModel<T> {
    /// Runs the batched forward pass. The vault itself is shared-read: any
    /// number of passes may run concurrently.
    pub fn forward(
        &self,
        batch: &EntryBatch<T>,
        mode: &Mode<'_, T>,
    ) -> Result<ForwardPass<T>, VaultError> {
        let parsed = parse_entries(self, batch)?;
        let n = parsed.n;

        // Shapes the backward must reproduce, in supply order.
        let grad_shapes: Vec<Vec<usize>> = parsed
            .grad_order
            .iter()
            .map(|slot| match slot {
                GradSlot::Vision => parsed.vision.as_ref().unwrap().dims().to_vec(),
                GradSlot::TextContent => match parsed.text.as_ref().unwrap() {
                    TextSource::Embeddings { content, .. } => content.dims().to_vec(),
                    _ => unreachable!(),
                },
                GradSlot::TextSuffix => match parsed.text.as_ref().unwrap() {
                    TextSource::Embeddings { suffix, .. } => {
                        suffix.as_ref().unwrap().dims().to_vec()
                    }
                    _ => unreachable!(),
                },
                GradSlot::Prefix(e, l) => parsed
                    .prefixes
                    .iter()
                    .find(|(pe, pl, _)| pe == e && pl == l)
                    .map(|(_, _, t)| t.dims().to_vec())
                    .unwrap(),
            })
            .collect();

        let items: Vec<Result<ItemGraph<T>, VaultError>> = (0..n)
            .into_par_iter()
            .map(|i| self.build_item(i, &parsed, mode))
            .collect();
        let mut built = Vec::with_capacity(n);
        for item in items {
            built.push(item?);
        }

        let flops = built.iter().map(|it| it.tape.flops()).sum();

        let mut features = Vec::new();
        if parsed.vision.is_some() {
            let mut data = Vec::with_capacity(n * WIDTH);
            for item in &built {
                data.extend_from_slice(item.tape.value(item.vis_out.unwrap()).data());
            }
            features.push((
                OutputTag::VisionFeature,
                Tensor::new(vec![n, WIDTH], data).unwrap(),
            ));
        }
        if parsed.text.is_some() {
            let mut data = Vec::with_capacity(n * WIDTH);
            for item in &built {
                data.extend_from_slice(item.tape.value(item.txt_out.unwrap()).data());
            }
            features.push((
                OutputTag::TextFeature,
                Tensor::new(vec![n, WIDTH], data).unwrap(),
            ));
        }

        Ok(ForwardPass {
            items: built,
            n,
            outputs: ForwardOutputs { features },
            grad_order: parsed.grad_order,
            grad_shapes,
            flops,
        })
    }

    fn build_item(
        &self,
        i: usize,
        parsed: &Parsed<T>,
        mode: &Mode<'_, T>,
    ) -> Result<ItemGraph<T>, VaultError> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(self, mode);
        let mut entry_vars: Vec<VarId> = Vec::with_capacity(parsed.grad_order.len());
        // Pre-size so supply-order slots can be filled out of build order.
        entry_vars.resize(parsed.grad_order.len(), VarId(usize::MAX));

        let slot_of = |want: &GradSlot| -> usize {
            parsed
                .grad_order
                .iter()
                .position(|s| match (s, want) {
                    (GradSlot::Vision, GradSlot::Vision) => true,
                    (GradSlot::TextContent, GradSlot::TextContent) => true,
                    (GradSlot::TextSuffix, GradSlot::TextSuffix) => true,
                    (GradSlot::Prefix(e1, l1), GradSlot::Prefix(e2, l2)) => e1 == e2 && l1 == l2,
                    _ => false,
                })
                .expect("slot exists")
        };

        // Shared prefix leaves for this item's tape.
        let mut vis_prefix: [Option<VarId>; BLOCKS] = [None; BLOCKS];
        let mut txt_prefix: [Option<VarId>; BLOCKS] = [None; BLOCKS];
        for (encoder, layer, tensor) in &parsed.prefixes {
            let var = tape.leaf(tensor.clone());
            entry_vars[slot_of(&GradSlot::Prefix(*encoder, *layer))] = var;
            match encoder {
                Encoder::Vision => vis_prefix[*layer] = Some(var),
                Encoder::Text => txt_prefix[*layer] = Some(var),
            }
        }

        let mut vis_out = None;
        if let Some(pixels) = &parsed.vision {
            let per = IMG_CHANNELS * IMG_SIZE * IMG_SIZE;
            let item_pixels = Tensor::new(
                vec![IMG_CHANNELS, IMG_SIZE, IMG_SIZE],
                pixels.data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap();
            let entry = tape.leaf(item_pixels);
            entry_vars[slot_of(&GradSlot::Vision)] = entry;
            vis_out = Some(self.encode_image(&mut tape, &mut binder, entry, &vis_prefix)?);
        }

        let mut txt_out = None;
        if let Some(text) = &parsed.text {
            let (content_var, positioned_len, suffix_var) = match text {
                TextSource::Ids(ids) => {
                    let table = binder.bind(&mut tape, self.txt.embed);
                    let content = tape.embedding_lookup(table, &ids[i])?;
                    (content, ids[i].len(), None)
                }
                TextSource::Embeddings { content, suffix } => {
                    let l = content.dims()[1];
                    let per = l * WIDTH;
                    let item = Tensor::new(
                        vec![l, WIDTH],
                        content.data()[i * per..(i + 1) * per].to_vec(),
                    )
                    .unwrap();
                    let entry = tape.leaf(item);
                    entry_vars[slot_of(&GradSlot::TextContent)] = entry;
                    let suffix_var = suffix.as_ref().map(|s| {
                        let var = tape.leaf(s.clone());
                        entry_vars[slot_of(&GradSlot::TextSuffix)] = var;
                        var
                    });
                    (entry, l, suffix_var)
                }
            };
            txt_out = Some(self.encode_text(
                &mut tape,
                &mut binder,
                content_var,
                positioned_len,
                suffix_var,
                &txt_prefix,
            )?);
        }

        Ok(ItemGraph {
            tape,
            vis_out,
            txt_out,
            entry_vars,
            trainable: binder.trainable,
        })
    }

    fn encode_image(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        pixels: VarId,
        prefixes: &[Option<VarId>; BLOCKS],
    ) -> Result<VarId, VaultError> {
        let patches = tape.patchify(pixels, PATCH)?;
        let w = binder.bind(tape, self.vis.patch_w);
        let b = binder.bind(tape, self.vis.patch_b);
        let emb = tape.matmul(patches, w)?;
        let emb = tape.add_bias_rows(emb, b)?;
        let cls = binder.bind(tape, self.vis.cls);
        let seq = tape.concat_rows(&[cls, emb])?;
        let pos = binder.bind(tape, self.vis.pos);
        let mut x = tape.add(seq, pos)?;
        for (layer, idx) in self.vis.blocks.iter().enumerate() {
            x = self.transformer_block(tape, binder, Encoder::Vision, layer, idx, x, prefixes[layer])?;
        }
        let g = binder.bind(tape, self.vis.lnf_g);
        let bb = binder.bind(tape, self.vis.lnf_b);
        let x = tape.layernorm(x, g, bb)?;
        let pooled = tape.slice_rows(x, 0, 1)?; // CLS slot
        let pw = binder.bind(tape, self.vis.proj_w);
        let pb = binder.bind(tape, self.vis.proj_b);
        let proj = tape.matmul(pooled, pw)?;
        Ok(tape.add_bias_rows(proj, pb)?)
    }

    /// Text sequence assembly: positions 0..l-1 go on the positioned content
    /// rows only; suffix rows are appended position-free; the vault appends
    /// its EOS token at position index l and pools there.
    fn encode_text(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        content: VarId,
        positioned_len: usize,
        suffix: Option<VarId>,
        prefixes: &[Option<VarId>; BLOCKS],
    ) -> Result<VarId, VaultError> {
        let pos = binder.bind(tape, self.txt.pos);
        let pos_l = tape.slice_rows(pos, 0, positioned_len)?;
        let content_pos = tape.add(content, pos_l)?;

        let table = binder.bind(tape, self.txt.embed);
        let eos_emb = tape.embedding_lookup(table, &[EOS_ID])?;
        let eos_pos = tape.slice_rows(pos, positioned_len, 1)?;
        let eos = tape.add(eos_emb, eos_pos)?;

        let mut parts = vec![content_pos];
        if let Some(suffix) = suffix {
            parts.push(suffix);
        }
        parts.push(eos);
        let mut x = tape.concat_rows(&parts)?;

        for (layer, idx) in self.txt.blocks.iter().enumerate() {
            x = self.transformer_block(tape, binder, Encoder::Text, layer, idx, x, prefixes[layer])?;
        }
        let g = binder.bind(tape, self.txt.lnf_g);
        let bb = binder.bind(tape, self.txt.lnf_b);
        let x = tape.layernorm(x, g, bb)?;
        let rows = tape.dims(x)[0];
        let pooled = tape.slice_rows(x, rows - 1, 1)?; // EOS slot
        let pw = binder.bind(tape, self.txt.proj_w);
        let pb = binder.bind(tape, self.txt.proj_b);
        let proj = tape.matmul(pooled, pw)?;
        Ok(tape.add_bias_rows(proj, pb)?)
    }

    /// Pre-norm block. A supplied prefix is prepended to the block input and
    /// its output slots are discarded afterwards, so prefixes act on
    /// attention only and stay independent across layers.
    #[allow(clippy::too_many_arguments)]
    fn transformer_block(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        encoder: Encoder,
        layer: usize,
        idx: &BlockIdx,
        x: VarId,
        prefix: Option<VarId>,
    ) -> Result<VarId, VaultError> {
        let orig_rows = tape.dims(x)[0];
        let x_in = match prefix {
            Some(p) => tape.concat_rows(&[p, x])?,
            None => x,
        };

        let g1 = binder.bind(tape, idx.ln1_g);
        let b1 = binder.bind(tape, idx.ln1_b);
        let h = tape.layernorm(x_in, g1, b1)?;

        let wq = binder.bind_attn(tape, idx.wq, encoder, layer, 0);
        let wk = binder.bind_attn(tape, idx.wk, encoder, layer, 1);
        let wv = binder.bind_attn(tape, idx.wv, encoder, layer, 2);
        let bq = binder.bind(tape, idx.bq);
        let bk = binder.bind(tape, idx.bk);
        let bv = binder.bind(tape, idx.bv);
        let q = tape.matmul(h, wq)?;
        let q = tape.add_bias_rows(q, bq)?;
        let k = tape.matmul(h, wk)?;
        let k = tape.add_bias_rows(k, bk)?;
        let v = tape.matmul(h, wv)?;
        let v = tape.add_bias_rows(v, bv)?;

        let scale = T::from_f64(1.0 / (HEAD_DIM as f64).sqrt());
        let mut heads = Vec::with_capacity(HEADS);
        for hd in 0..HEADS {
            let qh = tape.slice_cols(q, hd * HEAD_DIM, HEAD_DIM)?;
            let kh = tape.slice_cols(k, hd * HEAD_DIM, HEAD_DIM)?;
            let vh = tape.slice_cols(v, hd * HEAD_DIM, HEAD_DIM)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = binder.bind(tape, idx.wo);
        let bo = binder.bind(tape, idx.bo);
        let o = tape.matmul(cat, wo)?;
        let o = tape.add_bias_rows(o, bo)?;
        let x1 = tape.add(x_in, o)?;

        let g2 = binder.bind(tape, idx.ln2_g);
        let b2 = binder.bind(tape, idx.ln2_b);
        let h2 = tape.layernorm(x1, g2, b2)?;
        let w1 = binder.bind(tape, idx.w1);
        let b1m = binder.bind(tape, idx.b1);
        let m = tape.matmul(h2, w1)?;
        let m = tape.add_bias_rows(m, b1m)?;
        let m = tape.gelu(m);
        let w2 = binder.bind(tape, idx.w2);
        let b2m = binder.bind(tape, idx.b2);
        let m = tape.matmul(m, w2)?;
        let m = tape.add_bias_rows(m, b2m)?;
        let x2 = tape.add(x1, m)?;

        Ok(match prefix {
            Some(p) => {
                let p_rows = tape.dims(p)[0];
                tape.slice_rows(x2, p_rows, orig_rows)?
            }
            None => x2,
        })
    }
}
