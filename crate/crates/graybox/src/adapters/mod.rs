//! Client-side trainables: the convolutional visual input adapter, the
//! shift/extra textual tokens, the linear output adapters, and the per-layer
//! proxy token sets, plus parameter accounting and checkpointing.
//!
//! Everything except extra/proxy tokens initializes to an exact identity:
//! delta-kernel convolutions, zero shift, identity output matrices. That
//! makes "fresh adapters reproduce the unadapted model bit-for-bit" a
//! testable invariant rather than an approximation.

use thiserror::Error;

use crate::rng::DetRng;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, VarId};
use crate::vault::{Encoder, BLOCKS, IMG_CHANNELS, MAX_PREFIX, MAX_TEXT, WIDTH};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter config error: {0}")]
    Config(String),
    #[error("adapter input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which adapter families are present. Masked-off members are absent, not
/// zeroed, so parameter counts reflect the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationMask {
    pub in_vis: bool,
    pub in_txt: bool,
    pub out_vis: bool,
    pub out_txt: bool,
    pub lga: bool,
}

impl AblationMask {
    pub const NONE: AblationMask = AblationMask {
        in_vis: false,
        in_txt: false,
        out_vis: false,
        out_txt: false,
        lga: false,
    };

    /// Full input/output adapter configuration.
    pub const DGA: AblationMask = AblationMask {
        in_vis: true,
        in_txt: true,
        out_vis: true,
        out_txt: true,
        lga: false,
    };

    /// Proxy tokens only.
    pub const LGA: AblationMask = AblationMask {
        in_vis: false,
        in_txt: false,
        out_vis: false,
        out_txt: false,
        lga: true,
    };

    /// Output adapters only; identical to linear probing.
    pub const LP: AblationMask = AblationMask {
        in_vis: false,
        in_txt: false,
        out_vis: true,
        out_txt: true,
        lga: false,
    };
}

/// Which transformer layers receive proxy tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    FirstHalf,
    SecondHalf,
    All,
}

impl LayerSelection {
    pub fn layers(self) -> Vec<usize> {
        match self {
            LayerSelection::FirstHalf => (0..BLOCKS / 2).collect(),
            LayerSelection::SecondHalf => (BLOCKS / 2..BLOCKS).collect(),
            LayerSelection::All => (0..BLOCKS).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub mask: AblationMask,
    /// Position-free tokens appended to every prompt (0 disables).
    pub extra_tokens: usize,
    /// Proxy tokens per selected layer.
    pub proxy_tokens: usize,
    pub proxy_layers: LayerSelection,
    /// Hidden channel widths of the conv stack; the full stack is
    /// 3 -> hidden... -> 3 with 3x3 kernels and no activations.
    pub conv_hidden: Vec<usize>,
}

impl AdapterConfig {
    pub fn dga() -> Self {
        AdapterConfig {
            mask: AblationMask::DGA,
            extra_tokens: 1,
            proxy_tokens: 0,
            proxy_layers: LayerSelection::All,
            conv_hidden: vec![16, 16],
        }
    }

    pub fn lga(proxy_tokens: usize) -> Self {
        AdapterConfig {
            mask: AblationMask::LGA,
            extra_tokens: 0,
            proxy_tokens,
            proxy_layers: LayerSelection::All,
            conv_hidden: vec![16, 16],
        }
    }

    pub fn linear_probe() -> Self {
        AdapterConfig {
            mask: AblationMask::LP,
            extra_tokens: 0,
            proxy_tokens: 0,
            proxy_layers: LayerSelection::All,
            conv_hidden: vec![16, 16],
        }
    }

    pub fn with_mask(mask: AblationMask) -> Self {
        AdapterConfig {
            mask,
            extra_tokens: if mask.in_txt { 1 } else { 0 },
            proxy_tokens: if mask.lga { 1 } else { 0 },
            proxy_layers: LayerSelection::All,
            conv_hidden: vec![16, 16],
        }
    }

    fn conv_channels(&self) -> Vec<usize> {
        let mut chans = vec![IMG_CHANNELS];
        chans.extend_from_slice(&self.conv_hidden);
        chans.push(IMG_CHANNELS);
        chans
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    pub kernel: Tensor<T>, // [c_out, c_in, 3, 3]
    pub bias: Tensor<T>,   // [c_out]
}

/// Affine convolutional stack preserving image dimensions.
#[derive(Debug, Clone)]
pub struct VisualInputAdapter<T: Scalar> {
    pub layers: Vec<ConvLayer<T>>,
}

/// Shift token added to every prompt embedding plus optional position-free
/// extra tokens appended at the end of the sequence.
#[derive(Debug, Clone)]
pub struct TextualInputAdapter<T: Scalar> {
    pub shift: Tensor<T>,          // [64]
    pub extra: Option<Tensor<T>>,  // [e, 64]
}

/// Linear map applied to the backbone projection output; features are
/// re-normalized after it.
#[derive(Debug, Clone)]
pub struct OutputAdapter<T: Scalar> {
    pub weight: Tensor<T>, // [64, 64], out = f * W^T + b
    pub bias: Tensor<T>,   // [64]
}

/// Independent learnable token sets per (encoder, layer).
#[derive(Debug, Clone)]
pub struct LgaProxySet<T: Scalar> {
    pub tokens: Vec<(Encoder, usize, Tensor<T>)>, // [p, 64] each
}

#[derive(Debug, Clone)]
pub struct AdapterSet<T: Scalar> {
    pub config: AdapterConfig,
    pub visual: Option<VisualInputAdapter<T>>,
    pub textual: Option<TextualInputAdapter<T>>,
    pub out_vis: Option<OutputAdapter<T>>,
    pub out_txt: Option<OutputAdapter<T>>,
    pub proxies: Option<LgaProxySet<T>>,
}

/// Stable handle for one trainable tensor of an [`AdapterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterParamRef {
    ConvKernel(usize),
    ConvBias(usize),
    Shift,
    Extra,
    OutWeight(Encoder),
    OutBias(Encoder),
    Proxy(Encoder, usize),
}

impl AdapterParamRef {
    /// Weight decay applies to spatial kernels and output matrices only;
    /// bias and token-like parameters are excluded.
    pub fn decays(self) -> bool {
        matches!(
            self,
            AdapterParamRef::ConvKernel(_) | AdapterParamRef::OutWeight(_)
        )
    }
}

/// Builds a fresh adapter set for `config`. The conv stack, the shift token
/// and the output adapters are exact identities; extra and proxy tokens are
/// normal(0, 0.02) from `seed`.
pub fn init_adapters<T: Scalar>(
    config: &AdapterConfig,
    seed: u64,
) -> Result<AdapterSet<T>, AdapterError> {
    if config.proxy_tokens > MAX_PREFIX {
        return Err(AdapterError::Config(format!(
            "proxy token count {} exceeds the per-layer budget of {MAX_PREFIX}",
            config.proxy_tokens
        )));
    }
    if config.mask.lga && config.proxy_tokens == 0 {
        // Allowed: degenerates to the unadapted model.
    }
    if config.extra_tokens >= MAX_TEXT {
        return Err(AdapterError::Config(format!(
            "extra token count {} leaves no room for the prompt",
            config.extra_tokens
        )));
    }
    for &h in &config.conv_hidden {
        if h < IMG_CHANNELS {
            return Err(AdapterError::Config(format!(
                "conv hidden width {h} cannot carry the {IMG_CHANNELS} input channels through \
                 an identity initialization"
            )));
        }
    }

    let mut rng = DetRng::derive(seed, 0x47424131); // "GBA1"

    let visual = config.mask.in_vis.then(|| {
        let chans = config.conv_channels();
        let layers = chans
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let mut kernel = Tensor::<T>::zeros(&[cout, cin, 3, 3]);
                // Delta taps on the channel diagonal: copy-in, pass-through,
                // copy-back. The composed stack is an exact identity.
                for c in 0..cin.min(cout) {
                    kernel.data_mut()[((c * cin + c) * 3 + 1) * 3 + 1] = T::ONE;
                }
                ConvLayer {
                    kernel,
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        VisualInputAdapter { layers }
    });

    let textual = config.mask.in_txt.then(|| TextualInputAdapter {
        shift: Tensor::zeros(&[WIDTH]),
        extra: (config.extra_tokens > 0).then(|| {
            Tensor::new(
                vec![config.extra_tokens, WIDTH],
                (0..config.extra_tokens * WIDTH)
                    .map(|_| T::from_f64(rng.normal_scaled(INIT_STD)))
                    .collect(),
            )
            .unwrap()
        }),
    });

    let identity_out = || OutputAdapter {
        weight: Tensor::eye(WIDTH),
        bias: Tensor::zeros(&[WIDTH]),
    };
    let out_vis = config.mask.out_vis.then(identity_out);
    let out_txt = config.mask.out_txt.then(identity_out);

    let proxies = (config.mask.lga && config.proxy_tokens > 0).then(|| {
        let mut tokens = Vec::new();
        for encoder in [Encoder::Vision, Encoder::Text] {
            for layer in config.proxy_layers.layers() {
                let t = Tensor::new(
                    vec![config.proxy_tokens, WIDTH],
                    (0..config.proxy_tokens * WIDTH)
                        .map(|_| T::from_f64(rng.normal_scaled(INIT_STD)))
                        .collect(),
                )
                .unwrap();
                tokens.push((encoder, layer, t));
            }
        }
        LgaProxySet { tokens }
    });

    Ok(AdapterSet {
        config: config.clone(),
        visual,
        textual,
        out_vis,
        out_txt,
        proxies,
    })
}

/// Result of the textual adapter: shifted content rows (still positioned by
/// the vault) plus the appended position-free extra rows. `len()` is the
/// context the sequence will occupy.
#[derive(Debug, Clone)]
pub struct TextInput<T: Scalar> {
    pub content: Tensor<T>,          // [l, 64]
    pub suffix: Option<Tensor<T>>,   // [e, 64]
}

impl<T: Scalar> TextInput<T> {
    pub fn len(&self) -> usize {
        self.content.dims()[0] + self.suffix.as_ref().map_or(0, |s| s.dims()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> VisualInputAdapter<T> {
    /// Records the conv stack on `tape`. Parameters enter as leaves when
    /// `leaves` is given (collecting their refs), as constants otherwise.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        image: VarId,
        mut leaves: Option<&mut Vec<(AdapterParamRef, VarId)>>,
    ) -> Result<VarId, TensorError> {
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, b) = match leaves.as_deref_mut() {
                Some(collect) => {
                    let k = tape.leaf(layer.kernel.clone());
                    let b = tape.leaf(layer.bias.clone());
                    collect.push((AdapterParamRef::ConvKernel(i), k));
                    collect.push((AdapterParamRef::ConvBias(i), b));
                    (k, b)
                }
                None => (
                    tape.constant(layer.kernel.clone()),
                    tape.constant(layer.bias.clone()),
                ),
            };
            x = tape.conv2d_same(x, k, b)?;
        }
        Ok(x)
    }

    /// Convenience eval without an external tape.
    pub fn apply(&self, image: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let out = self.apply_on_tape(&mut tape, img, None)?;
        Ok(tape.value(out).clone())
    }
}

impl<T: Scalar> TextualInputAdapter<T> {
    /// Adds the shift to every embedding row and appends the extra tokens.
    pub fn apply(&self, embeddings: &Tensor<T>) -> Result<TextInput<T>, AdapterError> {
        if embeddings.rank() != 2 || embeddings.dims()[1] != WIDTH {
            return Err(AdapterError::Input(format!(
                "expected [l, {WIDTH}] embeddings, got {:?}",
                embeddings.dims()
            )));
        }
        let l = embeddings.dims()[0];
        let extra_rows = self.extra.as_ref().map_or(0, |e| e.dims()[0]);
        if l + extra_rows > MAX_TEXT {
            return Err(AdapterError::Input(format!(
                "prompt of {l} tokens plus {extra_rows} extra exceeds the {MAX_TEXT}-slot \
                 context; truncate the prompt"
            )));
        }
        let mut tape = Tape::new();
        let e = tape.constant(embeddings.clone());
        let s = tape.constant(self.shift.clone());
        let shifted = tape.add_bias_rows(e, s)?;
        Ok(TextInput {
            content: tape.value(shifted).clone(),
            suffix: self.extra.clone(),
        })
    }
}

impl<T: Scalar> OutputAdapter<T> {
    /// Records `normalize(rows * W^T + b)` on the tape for `[n, 64]` rows.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        features: VarId,
        mut leaves: Option<&mut Vec<(AdapterParamRef, VarId)>>,
        encoder: Encoder,
    ) -> Result<VarId, TensorError> {
        let (w, b) = match leaves.as_deref_mut() {
            Some(collect) => {
                let w = tape.leaf(self.weight.clone());
                let b = tape.leaf(self.bias.clone());
                collect.push((AdapterParamRef::OutWeight(encoder), w));
                collect.push((AdapterParamRef::OutBias(encoder), b));
                (w, b)
            }
            None => (
                tape.constant(self.weight.clone()),
                tape.constant(self.bias.clone()),
            ),
        };
        let wt = tape.transpose(w)?;
        let mapped = tape.matmul(features, wt)?;
        let mapped = tape.add_bias_rows(mapped, b)?;
        Ok(tape.l2_normalize(mapped))
    }

    /// Single-feature convenience: `normalize(W f + b)`.
    pub fn apply(&self, feature: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, WIDTH], feature.data().to_vec())?);
        let out = self.apply_on_tape(&mut tape, f, None, Encoder::Vision)?;
        Tensor::new(vec![WIDTH], tape.value(out).data().to_vec())
    }
}

impl<T: Scalar> LgaProxySet<T> {
    pub fn get(&self, encoder: Encoder, layer: usize) -> Option<&Tensor<T>> {
        self.tokens
            .iter()
            .find(|(e, l, _)| *e == encoder && *l == layer)
            .map(|(_, _, t)| t)
    }
}

impl<T: Scalar> AdapterSet<T> {
    /// Trainable members in a fixed order: conv layers, shift, extra,
    /// output adapters, proxies.
    pub fn trainables(&self) -> Vec<(AdapterParamRef, Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(v) = &self.visual {
            for (i, layer) in v.layers.iter().enumerate() {
                out.push((AdapterParamRef::ConvKernel(i), layer.kernel.clone()));
                out.push((AdapterParamRef::ConvBias(i), layer.bias.clone()));
            }
        }
        if let Some(t) = &self.textual {
            out.push((AdapterParamRef::Shift, t.shift.clone()));
            if let Some(e) = &t.extra {
                out.push((AdapterParamRef::Extra, e.clone()));
            }
        }
        if let Some(o) = &self.out_vis {
            out.push((AdapterParamRef::OutWeight(Encoder::Vision), o.weight.clone()));
            out.push((AdapterParamRef::OutBias(Encoder::Vision), o.bias.clone()));
        }
        if let Some(o) = &self.out_txt {
            out.push((AdapterParamRef::OutWeight(Encoder::Text), o.weight.clone()));
            out.push((AdapterParamRef::OutBias(Encoder::Text), o.bias.clone()));
        }
        if let Some(p) = &self.proxies {
            for (e, l, t) in &p.tokens {
                out.push((AdapterParamRef::Proxy(*e, *l), t.clone()));
            }
        }
        out
    }

    pub fn get(&self, r: AdapterParamRef) -> &Tensor<T> {
        self.try_get(r).expect("adapter member present")
    }

    pub fn try_get(&self, r: AdapterParamRef) -> Option<&Tensor<T>> {
        match r {
            AdapterParamRef::ConvKernel(i) => self.visual.as_ref().map(|v| &v.layers[i].kernel),
            AdapterParamRef::ConvBias(i) => self.visual.as_ref().map(|v| &v.layers[i].bias),
            AdapterParamRef::Shift => self.textual.as_ref().map(|t| &t.shift),
            AdapterParamRef::Extra => self.textual.as_ref().and_then(|t| t.extra.as_ref()),
            AdapterParamRef::OutWeight(Encoder::Vision) => self.out_vis.as_ref().map(|o| &o.weight),
            AdapterParamRef::OutBias(Encoder::Vision) => self.out_vis.as_ref().map(|o| &o.bias),
            AdapterParamRef::OutWeight(Encoder::Text) => self.out_txt.as_ref().map(|o| &o.weight),
            AdapterParamRef::OutBias(Encoder::Text) => self.out_txt.as_ref().map(|o| &o.bias),
            AdapterParamRef::Proxy(e, l) => self.proxies.as_ref().and_then(|p| p.get(e, l)),
        }
    }

    pub fn set(&mut self, r: AdapterParamRef, value: Tensor<T>) {
        let slot: &mut Tensor<T> = match r {
            AdapterParamRef::ConvKernel(i) => &mut self.visual.as_mut().unwrap().layers[i].kernel,
            AdapterParamRef::ConvBias(i) => &mut self.visual.as_mut().unwrap().layers[i].bias,
            AdapterParamRef::Shift => &mut self.textual.as_mut().unwrap().shift,
            AdapterParamRef::Extra => self.textual.as_mut().unwrap().extra.as_mut().unwrap(),
            AdapterParamRef::OutWeight(Encoder::Vision) => {
                &mut self.out_vis.as_mut().unwrap().weight
            }
            AdapterParamRef::OutBias(Encoder::Vision) => &mut self.out_vis.as_mut().unwrap().bias,
            AdapterParamRef::OutWeight(Encoder::Text) => &mut self.out_txt.as_mut().unwrap().weight,
            AdapterParamRef::OutBias(Encoder::Text) => &mut self.out_txt.as_mut().unwrap().bias,
            AdapterParamRef::Proxy(e, l) => self
                .proxies
                .as_mut()
                .unwrap()
                .tokens
                .iter_mut()
                .find(|(pe, pl, _)| *pe == e && *pl == l)
                .map(|(_, _, t)| t)
                .unwrap(),
        };
        debug_assert_eq!(slot.dims(), value.dims());
        *slot = value;
    }

    /// Exact count of unmasked adapter parameters and the fraction of the
    /// backbone size they represent.
    pub fn count_trainable(&self, vault_param_count: usize) -> (usize, f64) {
        let absolute: usize = self.trainables().iter().map(|(_, t)| t.numel()).sum();
        (absolute, absolute as f64 / vault_param_count as f64)
    }
}

/// Rank for a low-rank baseline matched to `dga_count` trainable
/// parameters: minimizes |blocks * 3 * 2 * width * r - dga_count| with ties
/// going to the smaller rank. A zero count floors at r = 1 and warns.
pub fn match_lora_rank(dga_count: usize, blocks: usize) -> (usize, bool) {
    let per_rank = blocks * 3 * 2 * WIDTH;
    if dga_count == 0 {
        return (1, true);
    }
    let lo = dga_count / per_rank;
    let mut best = 1usize;
    let mut best_err = u64::MAX;
    for r in [lo.saturating_sub(1), lo, lo + 1, lo + 2] {
        if r == 0 {
            continue;
        }
        let err = (per_rank * r) as i64 - dga_count as i64;
        let err = err.unsigned_abs();
        if err < best_err || (err == best_err && r < best) {
            best_err = err;
            best = r;
        }
    }
    (best, false)
}

// ---- checkpoint io ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"GBA1";

const TAG_CONV: u8 = 1;
const TAG_SHIFT: u8 = 2;
const TAG_EXTRA: u8 = 3;
const TAG_OUT_VIS: u8 = 4;
const TAG_OUT_TXT: u8 = 5;
const TAG_PROXY: u8 = 6;

/// Serializes the present members: magic, member count, then per member a
/// tag byte (+ locator bytes) and tensor encodings. Round-trips bit-exactly.
pub fn encode_adapters<T: Scalar>(set: &AdapterSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let mut count = 0u8;
    let mut body = Vec::new();
    if let Some(v) = &set.visual {
        for (i, layer) in v.layers.iter().enumerate() {
            body.push(TAG_CONV);
            body.push(i as u8);
            body.extend_from_slice(&layer.kernel.encode());
            body.extend_from_slice(&layer.bias.encode());
            count += 1;
        }
    }
    if let Some(t) = &set.textual {
        body.push(TAG_SHIFT);
        body.extend_from_slice(&t.shift.encode());
        count += 1;
        if let Some(e) = &t.extra {
            body.push(TAG_EXTRA);
            body.extend_from_slice(&e.encode());
            count += 1;
        }
    }
    for (tag, out_adapter) in [(TAG_OUT_VIS, &set.out_vis), (TAG_OUT_TXT, &set.out_txt)] {
        if let Some(o) = out_adapter {
            body.push(tag);
            body.extend_from_slice(&o.weight.encode());
            body.extend_from_slice(&o.bias.encode());
            count += 1;
        }
    }
    if let Some(p) = &set.proxies {
        for (e, l, t) in &p.tokens {
            body.push(TAG_PROXY);
            body.push(match e {
                Encoder::Vision => 0,
                Encoder::Text => 1,
            });
            body.push(*l as u8);
            body.extend_from_slice(&t.encode());
            count += 1;
        }
    }
    out.push(count);
    out.extend_from_slice(&body);
    out
}

pub fn decode_adapters<T: Scalar>(bytes: &[u8]) -> Result<AdapterSet<T>, AdapterError> {
    let bad = |msg: String| AdapterError::Checkpoint(msg);
    if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing GBA1 header".into()));
    }
    let count = bytes[4] as usize;
    let mut off = 5;
    let read_tensor = |off: &mut usize| -> Result<Tensor<T>, AdapterError> {
        let (t, used) =
            Tensor::<T>::decode(&bytes[*off..]).map_err(|e| bad(format!("at byte {off}: {e}")))?;
        *off += used;
        Ok(t)
    };

    let mut conv_layers: Vec<(usize, ConvLayer<T>)> = Vec::new();
    let mut shift: Option<Tensor<T>> = None;
    let mut extra: Option<Tensor<T>> = None;
    let mut out_vis: Option<OutputAdapter<T>> = None;
    let mut out_txt: Option<OutputAdapter<T>> = None;
    let mut proxies: Vec<(Encoder, usize, Tensor<T>)> = Vec::new();

    for _ in 0..count {
        if off >= bytes.len() {
            return Err(bad("truncated member list".into()));
        }
        let tag = bytes[off];
        off += 1;
        match tag {
            TAG_CONV => {
                if off >= bytes.len() {
                    return Err(bad("truncated conv layer index".into()));
                }
                let idx = bytes[off] as usize;
                off += 1;
                let kernel = read_tensor(&mut off)?;
                let bias = read_tensor(&mut off)?;
                conv_layers.push((idx, ConvLayer { kernel, bias }));
            }
            TAG_SHIFT => shift = Some(read_tensor(&mut off)?),
            TAG_EXTRA => extra = Some(read_tensor(&mut off)?),
            TAG_OUT_VIS | TAG_OUT_TXT => {
                let weight = read_tensor(&mut off)?;
                let bias = read_tensor(&mut off)?;
                let adapter = OutputAdapter { weight, bias };
                if tag == TAG_OUT_VIS {
                    out_vis = Some(adapter);
                } else {
                    out_txt = Some(adapter);
                }
            }
            TAG_PROXY => {
                if off + 2 > bytes.len() {
                    return Err(bad("truncated proxy locator".into()));
                }
                let encoder = match bytes[off] {
                    0 => Encoder::Vision,
                    1 => Encoder::Text,
                    other => return Err(bad(format!("bad encoder byte {other}"))),
                };
                let layer = bytes[off + 1] as usize;
                off += 2;
                proxies.push((encoder, layer, read_tensor(&mut off)?));
            }
            other => return Err(bad(format!("unknown member tag {other}"))),
        }
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }

    conv_layers.sort_by_key(|(i, _)| *i);
    let visual = (!conv_layers.is_empty()).then(|| VisualInputAdapter {
        layers: conv_layers.into_iter().map(|(_, l)| l).collect(),
    });
    let textual = shift.map(|shift| TextualInputAdapter {
        shift,
        extra: extra.clone(),
    });

    // Reconstruct the config from what is present.
    let mask = AblationMask {
        in_vis: visual.is_some(),
        in_txt: textual.is_some(),
        out_vis: out_vis.is_some(),
        out_txt: out_txt.is_some(),
        lga: !proxies.is_empty(),
    };
    let conv_hidden = visual
        .as_ref()
        .map(|v| {
            v.layers[..v.layers.len().saturating_sub(1)]
                .iter()
                .map(|l| l.kernel.dims()[0])
                .collect()
        })
        .unwrap_or_else(|| vec![16, 16]);
    let proxy_layer_set: Vec<usize> = {
        let mut ls: Vec<usize> = proxies
            .iter()
            .filter(|(e, _, _)| *e == Encoder::Vision)
            .map(|(_, l, _)| *l)
            .collect();
        ls.sort_unstable();
        ls
    };
    let proxy_layers = if proxy_layer_set == LayerSelection::FirstHalf.layers() {
        LayerSelection::FirstHalf
    } else if proxy_layer_set == LayerSelection::SecondHalf.layers() {
        LayerSelection::SecondHalf
    } else {
        LayerSelection::All
    };
    let config = AdapterConfig {
        mask,
        extra_tokens: textual
            .as_ref()
            .and_then(|t| t.extra.as_ref())
            .map_or(0, |e| e.dims()[0]),
        proxy_tokens: proxies.first().map_or(0, |(_, _, t)| t.dims()[0]),
        proxy_layers,
        conv_hidden,
    };

    Ok(AdapterSet {
        config,
        visual,
        textual,
        out_vis,
        out_txt,
        proxies: (!proxies.is_empty()).then_some(LgaProxySet { tokens: proxies }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_init_conv_stack_is_bitwise_identity() {
        let set = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();
        let visual = set.visual.as_ref().unwrap();
        let mut rng = DetRng::new(3);
        for _ in 0..10 {
            let img = Tensor::<f32>::new(
                vec![3, 32, 32],
                (0..3 * 32 * 32).map(|_| rng.uniform() as f32).collect(),
            )
            .unwrap();
            let out = visual.apply(&img).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn conv_stack_preserves_dims_for_odd_sizes() {
        let set = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();
        let visual = set.visual.as_ref().unwrap();
        for (h, w) in [(8, 8), (17, 17), (32, 32), (9, 15)] {
            let img = Tensor::<f32>::zeros(&[3, h, w]);
            assert_eq!(visual.apply(&img).unwrap().dims(), &[3, h, w]);
        }
    }

    #[test]
    fn conv_stack_is_affine() {
        // apply(ax + by) - apply(0) == a(apply(x) - apply(0)) + b(apply(y) - apply(0))
        let mut set = init_adapters::<f64>(&AdapterConfig::dga(), 7).unwrap();
        // Perturb away from identity so the test is not vacuous.
        let mut rng = DetRng::new(5);
        if let Some(v) = set.visual.as_mut() {
            for layer in &mut v.layers {
                for k in layer.kernel.data_mut() {
                    *k = *k + rng.normal() * 0.05;
                }
                for b in layer.bias.data_mut() {
                    *b = rng.normal() * 0.1;
                }
            }
        }
        let visual = set.visual.as_ref().unwrap();
        let rand_img = |rng: &mut DetRng| {
            Tensor::<f64>::new(
                vec![3, 8, 8],
                (0..192).map(|_| rng.uniform()).collect(),
            )
            .unwrap()
        };
        let x = rand_img(&mut rng);
        let y = rand_img(&mut rng);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::new(
            vec![3, 8, 8],
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&xv, &yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let zero = Tensor::<f64>::zeros(&[3, 8, 8]);
        let f = |t: &Tensor<f64>| visual.apply(t).unwrap();
        let f0 = f(&zero);
        let lhs = f(&mixed);
        let fx = f(&x);
        let fy = f(&y);
        for i in 0..lhs.numel() {
            let linear = a * (fx.data()[i] - f0.data()[i]) + b * (fy.data()[i] - f0.data()[i]);
            let got = lhs.data()[i] - f0.data()[i];
            assert!(
                (got - linear).abs() < 1e-9,
                "nonlinearity at {i}: {got} vs {linear}"
            );
        }
    }

    #[test]
    fn textual_adapter_shift_and_budget() {
        let mut set = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();
        let textual = set.textual.as_mut().unwrap();
        for (i, v) in textual.shift.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.01;
        }
        let emb = Tensor::<f32>::filled(&[3, 64], 1.0);
        let out = textual.apply(&emb).unwrap();
        assert_eq!(out.len(), 4); // 3 content + 1 extra
        for r in 0..3 {
            for j in 0..64 {
                assert_eq!(out.content.data()[r * 64 + j], 1.0 + j as f32 * 0.01);
            }
        }

        // Budget exactly consumed at 15 content + 1 extra.
        let out = textual.apply(&Tensor::filled(&[15, 64], 0.0)).unwrap();
        assert_eq!(out.len(), 16);
        // One more content row overflows.
        let err = textual.apply(&Tensor::filled(&[16, 64], 0.0)).unwrap_err();
        assert!(err.to_string().contains("truncate"), "{err}");
    }

    #[test]
    fn textual_adapter_is_identity_without_extra_and_zero_shift() {
        let config = AdapterConfig {
            extra_tokens: 0,
            ..AdapterConfig::dga()
        };
        let set = init_adapters::<f32>(&config, 7).unwrap();
        let textual = set.textual.as_ref().unwrap();
        let mut rng = DetRng::new(9);
        let emb = Tensor::<f32>::new(
            vec![5, 64],
            (0..320).map(|_| rng.normal() as f32).collect(),
        )
        .unwrap();
        let out = textual.apply(&emb).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.suffix.is_none());
        assert_eq!(out.content, emb);
    }

    #[test]
    fn output_adapter_identity_and_scale_invariance() {
        let set = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();
        let out = set.out_vis.as_ref().unwrap();
        let mut rng = DetRng::new(11);
        // Unit-norm input: identity adapter must return it bit-exactly.
        let raw: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
        let norm = (raw.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()).sqrt();
        let f = Tensor::<f32>::new(
            vec![64],
            raw.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        )
        .unwrap();
        let roundtrip = out.apply(&f).unwrap();
        assert_eq!(roundtrip, f);

        // W = 2I is absorbed by the normalization.
        let doubled = OutputAdapter {
            weight: Tensor::<f32>::eye(64).map(|v| v * 2.0),
            bias: Tensor::zeros(&[64]),
        };
        assert_eq!(doubled.apply(&f).unwrap(), f);
    }

    #[test]
    fn trainable_counts() {
        // Full input/output set: conv stack + two text tokens + two output adapters.
        let set = init_adapters::<f32>(&AdapterConfig::dga(), 7).unwrap();
        let conv = (16 * 3 * 9 + 16) + (16 * 16 * 9 + 16) + (3 * 16 * 9 + 3);
        let text = 2 * 64;
        let outputs = 2 * (64 * 64 + 64);
        let expected = conv + text + outputs;
        let (absolute, fraction) = set.count_trainable(420_993);
        assert_eq!(absolute, expected);
        assert_eq!(absolute, 11_651);
        assert!(fraction < 0.05, "fraction {fraction}");

        // Empty mask counts zero.
        let empty = init_adapters::<f32>(&AdapterConfig::with_mask(AblationMask::NONE), 7).unwrap();
        assert_eq!(empty.count_trainable(420_993), (0, 0.0));

        // One proxy token per layer over both encoders.
        let lga = init_adapters::<f32>(&AdapterConfig::lga(1), 7).unwrap();
        assert_eq!(lga.count_trainable(420_993).0, 2 * 4 * 64);
    }

    #[test]
    fn proxy_budget_is_enforced() {
        let config = AdapterConfig {
            proxy_tokens: 65,
            ..AdapterConfig::lga(65)
        };
        assert!(init_adapters::<f32>(&config, 7).is_err());
    }

    #[test]
    fn lora_rank_matching() {
        assert_eq!(match_lora_rank(6144, 8), (2, false));
        assert_eq!(match_lora_rank(0, 8), (1, true));
        // 4608 sits exactly between r=1 (3072) and r=2 (6144): tie -> 1.
        assert_eq!(match_lora_rank(4608, 8), (1, false));
        // The full adapter budget lands nearest r=4.
        assert_eq!(match_lora_rank(11_651, 8), (4, false));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut config = AdapterConfig::dga();
        config.mask.lga = true;
        config.proxy_tokens = 2;
        let mut set = init_adapters::<f32>(&config, 123).unwrap();
        // Make the contents non-trivial.
        let mut rng = DetRng::new(17);
        let refs: Vec<AdapterParamRef> = set.trainables().iter().map(|(r, _)| *r).collect();
        for r in refs {
            let bumped = set.get(r).map(|v| v + rng.normal() as f32 * 0.1);
            set.set(r, bumped);
        }
        let bytes = encode_adapters(&set);
        let back: AdapterSet<f32> = decode_adapters(&bytes).unwrap();
        let a = set.trainables();
        let b = back.trainables();
        assert_eq!(a.len(), b.len());
        for ((ra, ta), (rb, tb)) in a.iter().zip(&b) {
            assert_eq!(ra, rb);
            assert_eq!(ta, tb);
        }
        assert!(decode_adapters::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
