//! Training loops.
//!
//! The gray-box loop is the access contract in motion: per step the client
//! applies its input adapters locally, ships entry tensors to the vault,
//! receives output features, computes the loss and backpropagates through
//! its output adapters locally, ships output-feature gradients back,
//! receives entry gradients, finishes backpropagation into its input
//! adapters, and takes an AdamW step. Weights never cross the boundary in
//! either direction.
//!
//! The white-box loop trains vault parameters directly (full, last-layers,
//! or low-rank) through owner mode, sharing the same loss and optimizer.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{infonce_on_tape, lr_at, AdamW, Method, MetricRecord, TrainConfig, TrainError};
use crate::adapters::{init_adapters, AdapterParamRef, AdapterSet};
use crate::rng::DetRng;
use crate::tensor::{Scalar, Tape, Tensor, VarId};
use crate::train::evaluate_retrieval;
use crate::vault::{
    Encoder, EntryBatch, EntryGrads, LoraAttachments, LoraPair, Mode, OutputTag, ParamKey,
    VaultClient, VaultModel, WhiteBoxHandle, ENTRY_TEXT_EMBEDDINGS, ENTRY_TEXT_TOKEN_IDS,
    ENTRY_VISION_PIXELS, IMG_CHANNELS, IMG_SIZE, WIDTH,
};

/// One image/caption pair as the trainer consumes it.
#[derive(Debug, Clone)]
pub struct TrainPair<T: Scalar> {
    pub image: Tensor<T>, // [3, 32, 32]
    pub caption: Vec<usize>,
    pub class_id: usize,
}

#[derive(Debug)]
pub struct GrayboxOutcome<T: Scalar> {
    pub adapters: AdapterSet<T>,
    pub history: Vec<MetricRecord>,
    pub final_train_loss: f64,
}

#[derive(Debug)]
pub struct WhiteboxOutcome<T: Scalar> {
    pub history: Vec<MetricRecord>,
    pub lora: Option<LoraAttachments<T>>,
    pub final_train_loss: f64,
}

fn stack_images<T: Scalar>(pairs: &[&TrainPair<T>]) -> Tensor<T> {
    let per = IMG_CHANNELS * IMG_SIZE * IMG_SIZE;
    let mut data = Vec::with_capacity(pairs.len() * per);
    for p in pairs {
        data.extend_from_slice(p.image.data());
    }
    Tensor::new(vec![pairs.len(), IMG_CHANNELS, IMG_SIZE, IMG_SIZE], data).unwrap()
}

fn caption_len<T: Scalar>(pairs: &[&TrainPair<T>]) -> Result<usize, TrainError> {
    let l = pairs[0].caption.len();
    if pairs.iter().any(|p| p.caption.len() != l) {
        return Err(TrainError::Config(
            "captions within a batch must share one length".into(),
        ));
    }
    Ok(l)
}

fn ids_tensor<T: Scalar>(pairs: &[&TrainPair<T>]) -> Result<Tensor<T>, TrainError> {
    let l = caption_len(pairs)?;
    let mut data = Vec::with_capacity(pairs.len() * l);
    for p in pairs {
        data.extend(p.caption.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new(vec![pairs.len(), l], data).unwrap())
}

/// Per-item client-side input graph: the adapter applications whose outputs
/// become entry tensors.
struct InputItem<T: Scalar> {
    tape: Tape<T>,
    vis_out: Option<VarId>,
    txt_out: Option<VarId>,
    leaves: Vec<(AdapterParamRef, VarId)>,
}

/// What was supplied for one step and how gradients come back.
struct StepPlan<T: Scalar> {
    batch: EntryBatch<T>,
    items: Vec<InputItem<T>>,
    /// Roles of the grad-capable supplied entries, in supply order.
    grad_roles: Vec<GradRole>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GradRole {
    /// Gradient seeds the per-item input tapes at the vision output.
    VisionAdapted,
    /// Raw pixels were supplied; the returned gradient is unused.
    VisionRaw,
    /// Gradient seeds the per-item input tapes at the text content output.
    TextContent,
    /// Gradient applies directly to the extra-token member.
    ExtraTokens,
    /// Gradient applies directly to a proxy member.
    Proxy(Encoder, usize),
}

/// Builds the step's entries. Embeddings for captions come from
/// `embeddings` (one `[l, 64]` tensor per batch item, vault-fetched).
fn build_step<T: Scalar>(
    adapters: &AdapterSet<T>,
    pairs: &[&TrainPair<T>],
    embeddings: Option<&[Tensor<T>]>,
    with_leaves: bool,
) -> Result<StepPlan<T>, TrainError> {
    let n = pairs.len();
    let mut batch = EntryBatch::new();
    let mut grad_roles = Vec::new();

    let items: Vec<Result<InputItem<T>, TrainError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let mut leaves = Vec::new();
            let mut vis_out = None;
            let mut txt_out = None;
            if let Some(visual) = &adapters.visual {
                let img = tape.constant(pairs[i].image.clone());
                let out = visual.apply_on_tape(
                    &mut tape,
                    img,
                    if with_leaves { Some(&mut leaves) } else { None },
                )?;
                vis_out = Some(out);
            }
            if let Some(textual) = &adapters.textual {
                let emb = embeddings.expect("textual adapter requires embeddings")[i].clone();
                let e = tape.constant(emb);
                let s = if with_leaves {
                    let s = tape.leaf(textual.shift.clone());
                    leaves.push((AdapterParamRef::Shift, s));
                    s
                } else {
                    tape.constant(textual.shift.clone())
                };
                txt_out = Some(tape.add_bias_rows(e, s)?);
            }
            Ok(InputItem {
                tape,
                vis_out,
                txt_out,
                leaves,
            })
        })
        .collect();
    let mut items_built = Vec::with_capacity(n);
    for item in items {
        items_built.push(item?);
    }

    // Vision entry.
    if adapters.visual.is_some() {
        let per = IMG_CHANNELS * IMG_SIZE * IMG_SIZE;
        let mut data = Vec::with_capacity(n * per);
        for item in &items_built {
            data.extend_from_slice(item.tape.value(item.vis_out.unwrap()).data());
        }
        batch.push(
            ENTRY_VISION_PIXELS,
            Tensor::new(vec![n, IMG_CHANNELS, IMG_SIZE, IMG_SIZE], data).unwrap(),
        );
        grad_roles.push(GradRole::VisionAdapted);
    } else {
        batch.push(ENTRY_VISION_PIXELS, stack_images(pairs));
        grad_roles.push(GradRole::VisionRaw);
    }

    // Text entry.
    if let Some(textual) = &adapters.textual {
        let l = caption_len(pairs)?;
        let mut data = Vec::with_capacity(n * l * WIDTH);
        for item in &items_built {
            data.extend_from_slice(item.tape.value(item.txt_out.unwrap()).data());
        }
        batch.push(
            ENTRY_TEXT_EMBEDDINGS,
            Tensor::new(vec![n, l, WIDTH], data).unwrap(),
        );
        grad_roles.push(GradRole::TextContent);
        if let Some(extra) = &textual.extra {
            batch.push(ENTRY_TEXT_EMBEDDINGS, extra.clone());
            grad_roles.push(GradRole::ExtraTokens);
        }
    } else {
        batch.push(ENTRY_TEXT_TOKEN_IDS, ids_tensor(pairs)?);
        // Token ids carry no gradient.
    }

    // Proxy entries.
    if let Some(proxies) = &adapters.proxies {
        for (encoder, layer, tokens) in &proxies.tokens {
            batch.push(
                crate::vault::prefix_entry_id(*encoder, *layer),
                tokens.clone(),
            );
            grad_roles.push(GradRole::Proxy(*encoder, *layer));
        }
    }

    Ok(StepPlan {
        batch,
        items: items_built,
        grad_roles,
    })
}

/// Client-side loss graph over the returned features. Returns the loss
/// value, gradients to ship back per output, and gradients for the output
/// adapter parameters.
struct LossBack<T: Scalar> {
    loss: f64,
    out_grads: Vec<(OutputTag, Tensor<T>)>,
    adapter_grads: Vec<(AdapterParamRef, Tensor<T>)>,
}

fn loss_and_backward<T: Scalar>(
    adapters: &AdapterSet<T>,
    vis_pre: &Tensor<T>,
    txt_pre: &Tensor<T>,
    temperature: f64,
    with_leaves: bool,
) -> Result<LossBack<T>, TrainError> {
    let mut tape = Tape::new();
    let mut leaves: Vec<(AdapterParamRef, VarId)> = Vec::new();
    let v_in = tape.leaf(vis_pre.clone());
    let t_in = tape.leaf(txt_pre.clone());
    let v_feat = match &adapters.out_vis {
        Some(out) => out.apply_on_tape(
            &mut tape,
            v_in,
            if with_leaves { Some(&mut leaves) } else { None },
            Encoder::Vision,
        )?,
        None => tape.l2_normalize(v_in),
    };
    let t_feat = match &adapters.out_txt {
        Some(out) => out.apply_on_tape(
            &mut tape,
            t_in,
            if with_leaves { Some(&mut leaves) } else { None },
            Encoder::Text,
        )?,
        None => tape.l2_normalize(t_in),
    };
    let loss_var = infonce_on_tape(&mut tape, v_feat, t_feat, temperature)?;
    let loss = tape.value(loss_var).data()[0].to_f64();
    let grads = tape.backward_seeded(vec![(loss_var, Tensor::scalar(T::ONE))])?;
    let adapter_grads = leaves
        .iter()
        .map(|&(r, var)| (r, grads.get(var).clone()))
        .collect();
    Ok(LossBack {
        loss,
        out_grads: vec![
            (OutputTag::VisionFeature, grads.get(v_in).clone()),
            (OutputTag::TextFeature, grads.get(t_in).clone()),
        ],
        adapter_grads,
    })
}

/// Finishes backpropagation into the input adapters and assembles the full
/// gradient list in `adapters.trainables()` order.
fn assemble_gradients<T: Scalar>(
    adapters: &AdapterSet<T>,
    plan: StepPlan<T>,
    entry_grads: EntryGrads<T>,
    mut out_adapter_grads: Vec<(AdapterParamRef, Tensor<T>)>,
) -> Result<Vec<(AdapterParamRef, Tensor<T>)>, TrainError> {
    let n = plan.items.len();
    let mut direct: Vec<(AdapterParamRef, Tensor<T>)> = Vec::new();
    let mut vis_seed: Option<Tensor<T>> = None;
    let mut txt_seed: Option<Tensor<T>> = None;

    debug_assert_eq!(plan.grad_roles.len(), entry_grads.len());
    for (role, (_, grad)) in plan.grad_roles.iter().zip(entry_grads) {
        match role {
            GradRole::VisionAdapted => vis_seed = Some(grad),
            GradRole::TextContent => txt_seed = Some(grad),
            GradRole::ExtraTokens => direct.push((AdapterParamRef::Extra, grad)),
            GradRole::Proxy(e, l) => direct.push((AdapterParamRef::Proxy(*e, *l), grad)),
            GradRole::VisionRaw => {}
        }
    }

    // Seed each item tape with its slice of the entry gradients and sum the
    // per-item adapter gradients in item order.
    let mut input_grads: BTreeMap<usize, (AdapterParamRef, Tensor<T>)> = BTreeMap::new();
    if plan.items.iter().any(|it| !it.leaves.is_empty()) {
        let per_item: Vec<Result<Vec<(AdapterParamRef, Tensor<T>)>, TrainError>> = plan
            .items
            .into_par_iter()
            .enumerate()
            .map(|(i, mut item)| {
                let mut seeds = Vec::new();
                if let (Some(var), Some(seed)) = (item.vis_out, &vis_seed) {
                    let per = seed.numel() / n;
                    seeds.push((
                        var,
                        Tensor::new(
                            vec![IMG_CHANNELS, IMG_SIZE, IMG_SIZE],
                            seed.data()[i * per..(i + 1) * per].to_vec(),
                        )
                        .unwrap(),
                    ));
                }
                if let (Some(var), Some(seed)) = (item.txt_out, &txt_seed) {
                    let per = seed.numel() / n;
                    let l = seed.dims()[1];
                    seeds.push((
                        var,
                        Tensor::new(vec![l, WIDTH], seed.data()[i * per..(i + 1) * per].to_vec())
                            .unwrap(),
                    ));
                }
                let grads = item.tape.backward_seeded(seeds)?;
                Ok(item
                    .leaves
                    .iter()
                    .map(|&(r, var)| (r, grads.get(var).clone()))
                    .collect())
            })
            .collect();
        for item in per_item {
            for (slot, (r, g)) in item?.into_iter().enumerate() {
                match input_grads.get_mut(&slot) {
                    None => {
                        input_grads.insert(slot, (r, g));
                    }
                    Some((r0, acc)) => {
                        debug_assert_eq!(*r0, r);
                        for (d, s) in acc.data_mut().iter_mut().zip(g.data()) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    let mut by_ref: Vec<(AdapterParamRef, Tensor<T>)> = input_grads.into_values().collect();
    by_ref.append(&mut direct);
    by_ref.append(&mut out_adapter_grads);

    // Align with the canonical trainable order; anything untouched this
    // step gets zeros.
    let ordered = adapters
        .trainables()
        .iter()
        .map(|(r, t)| {
            by_ref
                .iter()
                .find(|(r2, _)| r2 == r)
                .map(|(_, g)| (*r, g.clone()))
                .unwrap_or_else(|| (*r, Tensor::zeros(t.dims())))
        })
        .collect();
    Ok(ordered)
}

/// Fetches (and caches) per-caption embedding rows through the sealed
/// embedding op.
fn embeddings_for<T: Scalar, C: VaultClient<T>>(
    client: &mut C,
    cache: &mut BTreeMap<Vec<usize>, Tensor<T>>,
    pairs: &[&TrainPair<T>],
) -> Result<Vec<Tensor<T>>, TrainError> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !cache.contains_key(&p.caption) {
            let emb = client.embed_tokens(&p.caption)?;
            cache.insert(p.caption.clone(), emb);
        }
        out.push(cache.get(&p.caption).unwrap().clone());
    }
    Ok(out)
}

/// Normalized (image, text) features for `pairs` under the current
/// adapters, chunked through sealed sessions.
pub fn eval_features<T: Scalar, C: VaultClient<T>>(
    client: &mut C,
    adapters: &AdapterSet<T>,
    pairs: &[TrainPair<T>],
    chunk: usize,
) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
    let mut cache = BTreeMap::new();
    let mut img_rows: Vec<T> = Vec::with_capacity(pairs.len() * WIDTH);
    let mut txt_rows: Vec<T> = Vec::with_capacity(pairs.len() * WIDTH);
    for chunk_pairs in pairs.chunks(chunk.max(1)) {
        let refs: Vec<&TrainPair<T>> = chunk_pairs.iter().collect();
        let embeddings = if adapters.textual.is_some() {
            Some(embeddings_for(client, &mut cache, &refs)?)
        } else {
            None
        };
        let plan = build_step(adapters, &refs, embeddings.as_deref(), false)?;
        let session = client.open_session()?;
        let outputs = client.forward(session, &plan.batch)?;
        client.close_session(session)?;
        let vis_pre = outputs.get(OutputTag::VisionFeature).unwrap();
        let txt_pre = outputs.get(OutputTag::TextFeature).unwrap();

        let mut tape = Tape::new();
        let v_in = tape.constant(vis_pre.clone());
        let t_in = tape.constant(txt_pre.clone());
        let v_feat = match &adapters.out_vis {
            Some(out) => out.apply_on_tape(&mut tape, v_in, None, Encoder::Vision)?,
            None => tape.l2_normalize(v_in),
        };
        let t_feat = match &adapters.out_txt {
            Some(out) => out.apply_on_tape(&mut tape, t_in, None, Encoder::Text)?,
            None => tape.l2_normalize(t_in),
        };
        img_rows.extend_from_slice(tape.value(v_feat).data());
        txt_rows.extend_from_slice(tape.value(t_feat).data());
    }
    Ok((
        Tensor::new(vec![pairs.len(), WIDTH], img_rows).unwrap(),
        Tensor::new(vec![pairs.len(), WIDTH], txt_rows).unwrap(),
    ))
}

fn record_retrieval<T: Scalar>(
    history: &mut Vec<MetricRecord>,
    epoch: usize,
    split: &str,
    img: &Tensor<T>,
    txt: &Tensor<T>,
) {
    for (k, v) in evaluate_retrieval(txt, img, &[1, 5, 10]) {
        history.push(MetricRecord {
            epoch,
            split: split.into(),
            metric: format!("r@{k}"),
            value: v,
        });
    }
}

/// Trains client-side adapters against a sealed vault. Covers the
/// input/output-adapter method, the proxy-token method, and linear probing
/// (which is exactly the output-adapter mask).
pub fn train_graybox<T: Scalar, C: VaultClient<T>>(
    client: &mut C,
    train: &[TrainPair<T>],
    eval: &[TrainPair<T>],
    config: &TrainConfig,
) -> Result<GrayboxOutcome<T>, TrainError> {
    if matches!(config.method, Method::Ft | Method::Llft(_) | Method::Lora) {
        return Err(TrainError::Config(format!(
            "method {} trains vault parameters; use the owner-mode loop",
            config.method.name()
        )));
    }
    let mut adapters = init_adapters::<T>(&config.adapters, config.seed)?;
    let trainables = adapters.trainables();
    let shapes: Vec<(Vec<usize>, bool)> = trainables
        .iter()
        .map(|(r, t)| (t.dims().to_vec(), r.decays()))
        .collect();
    let mut opt = AdamW::<T>::new(&shapes, config.weight_decay);
    let mut cache: BTreeMap<Vec<usize>, Tensor<T>> = BTreeMap::new();
    let mut history = Vec::new();

    let (img0, txt0) = eval_features(client, &adapters, eval, 64)?;
    record_retrieval(&mut history, 0, "test", &img0, &txt0);

    let mut final_train_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        let lr = lr_at(config, epoch - 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        DetRng::derive(config.seed, 0xE70C_0000 + epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue; // contrastive loss needs at least two pairs
            }
            let pairs: Vec<&TrainPair<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let embeddings = if adapters.textual.is_some() {
                Some(embeddings_for(client, &mut cache, &pairs)?)
            } else {
                None
            };
            let plan = build_step(&adapters, &pairs, embeddings.as_deref(), true)?;

            let session = client.open_session()?;
            let outputs = client.forward(session, &plan.batch)?;
            let vis_pre = outputs.get(OutputTag::VisionFeature).unwrap().clone();
            let txt_pre = outputs.get(OutputTag::TextFeature).unwrap().clone();
            let back = loss_and_backward(
                &adapters,
                &vis_pre,
                &txt_pre,
                config.temperature,
                true,
            )?;
            if back.loss.is_nan() {
                return Err(TrainError::NanLoss {
                    epoch,
                    step: steps,
                });
            }
            let entry_grads = client.backward(session, &back.out_grads)?;
            let grads = assemble_gradients(&adapters, plan, entry_grads, back.adapter_grads)?;

            let mut params: Vec<Tensor<T>> =
                adapters.trainables().into_iter().map(|(_, t)| t).collect();
            let grad_tensors: Vec<Tensor<T>> = grads.into_iter().map(|(_, g)| g).collect();
            opt.step(&mut params, &grad_tensors, lr);
            for ((r, _), new_value) in trainables.iter().zip(params) {
                adapters.set(*r, new_value);
            }

            epoch_loss += back.loss;
            steps += 1;
        }
        let mean_loss = if steps > 0 {
            epoch_loss / steps as f64
        } else {
            f64::NAN
        };
        final_train_loss = mean_loss;
        history.push(MetricRecord {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: mean_loss,
        });
        if epoch % config.eval_every.max(1) == 0 || epoch == config.epochs {
            let (img, txt) = eval_features(client, &adapters, eval, 64)?;
            record_retrieval(&mut history, epoch, "test", &img, &txt);
            if let Some(threshold) = config.stop_at_test_r1 {
                let r1 = history
                    .iter()
                    .rev()
                    .find(|r| r.metric == "r@1")
                    .map(|r| r.value)
                    .unwrap_or(0.0);
                if r1 >= threshold {
                    break;
                }
            }
        }
    }

    Ok(GrayboxOutcome {
        adapters,
        history,
        final_train_loss,
    })
}

/// One full gray-box step's gradient extraction without an optimizer
/// update: loss gradients for every adapter parameter, in
/// `adapters.trainables()` order. This is the quantity the finite
/// difference oracles verify.
pub fn adapter_gradients_for_batch<T: Scalar, C: VaultClient<T>>(
    client: &mut C,
    adapters: &AdapterSet<T>,
    pairs: &[&TrainPair<T>],
    temperature: f64,
) -> Result<Vec<(AdapterParamRef, Tensor<T>)>, TrainError> {
    let mut cache = BTreeMap::new();
    let embeddings = if adapters.textual.is_some() {
        Some(embeddings_for(client, &mut cache, pairs)?)
    } else {
        None
    };
    let plan = build_step(adapters, pairs, embeddings.as_deref(), true)?;
    let session = client.open_session()?;
    let outputs = client.forward(session, &plan.batch)?;
    let back = loss_and_backward(
        adapters,
        outputs.get(OutputTag::VisionFeature).unwrap(),
        outputs.get(OutputTag::TextFeature).unwrap(),
        temperature,
        true,
    )?;
    let entry_grads = client.backward(session, &back.out_grads)?;
    assemble_gradients(adapters, plan, entry_grads, back.adapter_grads)
}

/// One forward/backward on a frozen batch, returning the raw entry
/// gradients. Used to compare transport paths bit-for-bit.
pub fn frozen_batch_entry_grads<T: Scalar, C: VaultClient<T>>(
    client: &mut C,
    adapters: &AdapterSet<T>,
    pairs: &[&TrainPair<T>],
    temperature: f64,
) -> Result<EntryGrads<T>, TrainError> {
    let mut cache = BTreeMap::new();
    let embeddings = if adapters.textual.is_some() {
        Some(embeddings_for(client, &mut cache, pairs)?)
    } else {
        None
    };
    let plan = build_step(adapters, pairs, embeddings.as_deref(), false)?;
    let session = client.open_session()?;
    let outputs = client.forward(session, &plan.batch)?;
    let back = loss_and_backward(
        adapters,
        outputs.get(OutputTag::VisionFeature).unwrap(),
        outputs.get(OutputTag::TextFeature).unwrap(),
        temperature,
        false,
    )?;
    Ok(client.backward(session, &back.out_grads)?)
}

/// Owner-mode training: full fine-tuning, last-layers fine-tuning, or
/// low-rank attachments. Requires the owner credential; the sealed boundary
/// plays no part here.
pub fn train_whitebox<T: Scalar>(
    vault: &mut VaultModel<T>,
    credential: u64,
    train: &[TrainPair<T>],
    eval: &[TrainPair<T>],
    config: &TrainConfig,
) -> Result<WhiteboxOutcome<T>, TrainError> {
    let mut handle: WhiteBoxHandle<'_, T> = vault.owner_unlock(credential)?;

    enum Plan<T: Scalar> {
        Owner(Vec<usize>),
        Lora(LoraAttachments<T>),
    }
    let mut plan = match config.method {
        Method::Ft => Plan::Owner(handle.full_trainable()),
        Method::Llft(n) => Plan::Owner(handle.last_layers_trainable(n)),
        Method::Lora => {
            let rank = config.lora_rank.unwrap_or_else(|| {
                // Match the default adapter budget.
                let dga = init_adapters::<T>(&crate::adapters::AdapterConfig::dga(), config.seed)
                    .map(|set| set.count_trainable(1).0)
                    .unwrap_or(0);
                crate::adapters::match_lora_rank(dga, 2 * crate::vault::BLOCKS).0
            });
            let mut rng = DetRng::derive(config.seed, 0x10BA);
            let pairs = (0..LoraAttachments::<T>::pair_count())
                .map(|_| LoraPair {
                    down: Tensor::new(
                        vec![WIDTH, rank],
                        (0..WIDTH * rank)
                            .map(|_| T::from_f64(rng.normal_scaled(0.02)))
                            .collect(),
                    )
                    .unwrap(),
                    up: Tensor::zeros(&[rank, WIDTH]),
                })
                .collect();
            Plan::Lora(LoraAttachments {
                rank,
                alpha: rank as f64,
                pairs,
            })
        }
        other => {
            return Err(TrainError::Config(format!(
                "method {} does not train vault parameters; use the sealed loop",
                other.name()
            )))
        }
    };

    // Canonical optimizer order and decay flags.
    let (keys, shapes): (Vec<ParamKey>, Vec<(Vec<usize>, bool)>) = match &plan {
        Plan::Owner(set) => set
            .iter()
            .map(|&idx| {
                let p = &handle.params()[idx];
                let decay = matches!(p.kind, crate::vault::ParamKind::Weight);
                (ParamKey::Vault(idx), (p.value.dims().to_vec(), decay))
            })
            .unzip(),
        Plan::Lora(att) => {
            let mut keys = Vec::new();
            let mut shapes = Vec::new();
            for (i, pair) in att.pairs.iter().enumerate() {
                keys.push(ParamKey::LoraDown(i));
                shapes.push((pair.down.dims().to_vec(), true));
                keys.push(ParamKey::LoraUp(i));
                shapes.push((pair.up.dims().to_vec(), true));
            }
            (keys, shapes)
        }
    };
    let mut opt = AdamW::<T>::new(&shapes, config.weight_decay);
    let mut history = Vec::new();

    fn eval_mode<'a, T: Scalar>(plan: &'a Plan<T>) -> Mode<'a, T> {
        match plan {
            Plan::Owner(_) => Mode::Sealed,
            Plan::Lora(att) => Mode::Lora { attachments: att },
        }
    }

    {
        let (img, txt) = whitebox_eval_features(handle.vault(), eval_mode(&plan), eval)?;
        record_retrieval(&mut history, 0, "test", &img, &txt);
    }

    let mut final_train_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        let lr = lr_at(config, epoch - 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        DetRng::derive(config.seed, 0xE70C_0000 + epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let pairs: Vec<&TrainPair<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let mut batch = EntryBatch::new();
            batch.push(ENTRY_VISION_PIXELS, stack_images(&pairs));
            batch.push(ENTRY_TEXT_TOKEN_IDS, ids_tensor(&pairs)?);

            let mode = match &plan {
                Plan::Owner(set) => Mode::Owner {
                    trainable: set.as_slice(),
                },
                Plan::Lora(att) => Mode::Lora { attachments: att },
            };
            let pass = handle.vault().forward(&batch, &mode)?;
            let vis_pre = pass.outputs().get(OutputTag::VisionFeature).unwrap().clone();
            let txt_pre = pass.outputs().get(OutputTag::TextFeature).unwrap().clone();
            // No client adapters: normalize, contrast, backprop.
            let empty = AdapterSet::<T> {
                config: crate::adapters::AdapterConfig::with_mask(
                    crate::adapters::AblationMask::NONE,
                ),
                visual: None,
                textual: None,
                out_vis: None,
                out_txt: None,
                proxies: None,
            };
            let back =
                loss_and_backward(&empty, &vis_pre, &txt_pre, config.temperature, false)?;
            if back.loss.is_nan() {
                return Err(TrainError::NanLoss { epoch, step: steps });
            }
            let (_, param_grads) = pass.backward(&back.out_grads)?;
            let by_key: std::collections::HashMap<ParamKey, Tensor<T>> =
                param_grads.into_iter().collect();

            let mut params: Vec<Tensor<T>> = keys
                .iter()
                .map(|k| match (&plan, k) {
                    (Plan::Owner(_), ParamKey::Vault(idx)) => handle.param(*idx).clone(),
                    (Plan::Lora(att), ParamKey::LoraDown(i)) => att.pairs[*i].down.clone(),
                    (Plan::Lora(att), ParamKey::LoraUp(i)) => att.pairs[*i].up.clone(),
                    _ => unreachable!(),
                })
                .collect();
            let grads: Vec<Tensor<T>> = keys
                .iter()
                .zip(&params)
                .map(|(k, p)| {
                    by_key
                        .get(k)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.dims()))
                })
                .collect();
            opt.step(&mut params, &grads, lr);
            match &mut plan {
                Plan::Owner(_) => {
                    for (k, value) in keys.iter().zip(params) {
                        let ParamKey::Vault(idx) = k else { unreachable!() };
                        handle.set_param(*idx, value)?;
                    }
                }
                Plan::Lora(att) => {
                    for (k, value) in keys.iter().zip(params) {
                        match k {
                            ParamKey::LoraDown(i) => att.pairs[*i].down = value,
                            ParamKey::LoraUp(i) => att.pairs[*i].up = value,
                            _ => unreachable!(),
                        }
                    }
                }
            }

            epoch_loss += back.loss;
            steps += 1;
        }
        let mean_loss = if steps > 0 {
            epoch_loss / steps as f64
        } else {
            f64::NAN
        };
        final_train_loss = mean_loss;
        history.push(MetricRecord {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: mean_loss,
        });
        if epoch % config.eval_every.max(1) == 0 || epoch == config.epochs {
            let (img, txt) = whitebox_eval_features(handle.vault(), eval_mode(&plan), eval)?;
            record_retrieval(&mut history, epoch, "test", &img, &txt);
            if let Some(threshold) = config.stop_at_test_r1 {
                let r1 = history
                    .iter()
                    .rev()
                    .find(|r| r.metric == "r@1")
                    .map(|r| r.value)
                    .unwrap_or(0.0);
                if r1 >= threshold {
                    break;
                }
            }
        }
    }

    Ok(WhiteboxOutcome {
        history,
        lora: match plan {
            Plan::Lora(att) => Some(att),
            Plan::Owner(_) => None,
        },
        final_train_loss,
    })
}

/// Normalized features straight off the vault (no client adapters), for
/// zero-shot and owner-mode evaluation.
pub fn whitebox_eval_features<T: Scalar>(
    vault: &VaultModel<T>,
    mode: Mode<'_, T>,
    pairs: &[TrainPair<T>],
) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
    let mut img_rows: Vec<T> = Vec::with_capacity(pairs.len() * WIDTH);
    let mut txt_rows: Vec<T> = Vec::with_capacity(pairs.len() * WIDTH);
    for chunk in pairs.chunks(64) {
        let refs: Vec<&TrainPair<T>> = chunk.iter().collect();
        let mut batch = EntryBatch::new();
        batch.push(ENTRY_VISION_PIXELS, stack_images(&refs));
        batch.push(ENTRY_TEXT_TOKEN_IDS, ids_tensor(&refs)?);
        let pass = vault.forward(&batch, &mode)?;
        let mut tape = Tape::new();
        let v = tape.constant(pass.outputs().get(OutputTag::VisionFeature).unwrap().clone());
        let t = tape.constant(pass.outputs().get(OutputTag::TextFeature).unwrap().clone());
        let vn = tape.l2_normalize(v);
        let tn = tape.l2_normalize(t);
        img_rows.extend_from_slice(tape.value(vn).data());
        txt_rows.extend_from_slice(tape.value(tn).data());
    }
    Ok((
        Tensor::new(vec![pairs.len(), WIDTH], img_rows).unwrap(),
        Tensor::new(vec![pairs.len(), WIDTH], txt_rows).unwrap(),
    ))
}
