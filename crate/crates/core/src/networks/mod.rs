//! SegNet, U-SegNet, and U-Net encoder-decoder architectures with an
//! optional distance-map-regularizer decoder attached at the bottleneck.
//!
//! All three variants share one encoder layout: three stages of two
//! conv(3x3)-[batchnorm]-relu units followed by 2x2 max pooling, then a
//! two-unit bottleneck. Decoders differ only in how they return to full
//! resolution:
//!
//! * SegNet: 1x1 channel reduction, unpooling with the encoder's pooling
//!   indices, no skip connections;
//! * U-SegNet: unpooling with indices plus skip concatenation;
//! * U-Net: learned 2x2 stride-2 transposed convolution plus skip
//!   concatenation, no indices.
//!
//! The regularizer decoder is SegNet-style for every variant, consumes only
//! the bottleneck and the pooling indices, and emits one unconstrained real
//! channel per foreground class. It is a pure side branch: removing it
//! leaves the segmentation path untouched.

pub mod checkpoint;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d, concat_channels, conv2d, conv_transpose2d, max_unpool2x2,
    maxpool2x2_with_indices, relu, Mode, PoolIndices, Tape, Tensor,
};

/// The three baseline decoder wirings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    SegNet,
    USegNet,
    UNet,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::SegNet => "segnet",
            Variant::USegNet => "usegnet",
            Variant::UNet => "unet",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "segnet" => Ok(Variant::SegNet),
            "usegnet" => Ok(Variant::USegNet),
            "unet" => Ok(Variant::UNet),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (segnet|usegnet|unet)"
            ))),
        }
    }

    fn uses_skips(&self) -> bool {
        matches!(self, Variant::USegNet | Variant::UNet)
    }
}

/// Complete description of one model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub num_classes: usize,
    /// encoder widths per stage; exactly 3 strictly increasing entries
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub use_batchnorm: bool,
    pub dmr_attached: bool,
    /// distance map truncation threshold, pixels
    pub dm_threshold: f64,
}

impl ArchSpec {
    pub fn new(variant: Variant) -> ArchSpec {
        ArchSpec {
            variant,
            in_channels: 1,
            num_classes: 4,
            stage_channels: vec![32, 64, 128],
            bottleneck_channels: 256,
            use_batchnorm: true,
            dmr_attached: false,
            dm_threshold: 250.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 {
            return Err(Error::Spec(format!(
                "expected 3 pooling stages, got {}",
                self.stage_channels.len()
            )));
        }
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Spec(format!(
                "stage channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.stage_channels[0] == 0 || self.bottleneck_channels == 0 {
            return Err(Error::Spec("channel counts must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Spec("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dm_threshold <= 0.0 {
            return Err(Error::Spec(format!(
                "dm_threshold must be positive, got {}",
                self.dm_threshold
            )));
        }
        Ok(())
    }
}

/// Named parameter and buffer tensors of one model. Learnable entries have
/// `requires_grad` set; batch-norm running statistics are plain buffers.
/// Groups are read off the name prefix: `encoder.`, `seg_decoder.`,
/// `dmr_decoder.`.
#[derive(Clone)]
pub struct ModelParams {
    spec: ArchSpec,
    entries: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    fn tensor(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("model is missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    /// Learnable tensors only, in registration order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().filter(|(_, t)| t.requires_grad())
    }

    /// Number of learnable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn group_param_count(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn has_dmr_group(&self) -> bool {
        self.entries.keys().any(|n| n.starts_with("dmr_decoder."))
    }

    /// Independent snapshot of every tensor.
    pub fn deep_copy(&self) -> ModelParams {
        ModelParams {
            spec: self.spec.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.deep_copy()))
                .collect(),
        }
    }

    pub fn clear_grads(&self) {
        for (_, t) in self.entries.iter() {
            t.clear_grad();
        }
    }

    pub(crate) fn from_entries(spec: ArchSpec, entries: IndexMap<String, Tensor>) -> ModelParams {
        ModelParams { spec, entries }
    }
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// present iff the regularizer decoder is attached
    pub dm_pred: Option<Tensor>,
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

struct Builder {
    rng: ChaCha8Rng,
    use_bn: bool,
    entries: IndexMap<String, Tensor>,
}

impl Builder {
    /// Kaiming-uniform kernel in (-b, b) with b = sqrt(2) * sqrt(3 / fan_in),
    /// zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.entries.insert(
            format!("{name}.weight"),
            Tensor::param(vec![cout, cin, k, k], weight).expect("conv weight"),
        );
        self.entries.insert(
            format!("{name}.bias"),
            Tensor::param(vec![cout], vec![0.0; cout]).expect("conv bias"),
        );
    }

    /// Transposed-conv kernel in conv layout (cin_of_op, cout, k, k), no bias.
    fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..cin * cout * k * k)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.entries.insert(
            format!("{name}.weight"),
            Tensor::param(vec![cin, cout, k, k], weight).expect("convt weight"),
        );
    }

    fn bn(&mut self, name: &str, c: usize) {
        if !self.use_bn {
            return;
        }
        self.entries.insert(
            format!("{name}.gamma"),
            Tensor::param(vec![c], vec![1.0; c]).expect("bn gamma"),
        );
        self.entries.insert(
            format!("{name}.beta"),
            Tensor::param(vec![c], vec![0.0; c]).expect("bn beta"),
        );
        self.entries
            .insert(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
        self.entries
            .insert(format!("{name}.running_var"), Tensor::full(vec![c], 1.0));
    }

    /// conv-bn pair used by every block
    fn unit(&mut self, stage: &str, conv: &str, bn: &str, cin: usize, cout: usize, k: usize) {
        self.conv(&format!("{stage}.{conv}"), cin, cout, k);
        self.bn(&format!("{stage}.{bn}"), cout);
    }
}

fn register_seg_decoder(b: &mut Builder, spec: &ArchSpec) {
    let ch = &spec.stage_channels;
    let widths = [
        (spec.bottleneck_channels, ch[2]),
        (ch[2], ch[1]),
        (ch[1], ch[0]),
    ];
    for (i, &(cin, cout)) in widths.iter().enumerate() {
        let stage = format!("seg_decoder.d{}", 3 - i);
        match spec.variant {
            Variant::UNet => {
                b.conv_transpose(&format!("{stage}.up"), cin, cout, 2);
                b.bn(&format!("{stage}.up_bn"), cout);
            }
            _ => {
                b.unit(&stage, "reduce", "reduce_bn", cin, cout, 1);
            }
        }
        let merge_in = if spec.variant.uses_skips() { 2 * cout } else { cout };
        b.unit(&stage, "conv1", "bn1", merge_in, cout, 3);
        b.unit(&stage, "conv2", "bn2", cout, cout, 3);
    }
    b.conv("seg_decoder.head", ch[0], spec.num_classes, 1);
}

fn register_dmr_decoder(b: &mut Builder, spec: &ArchSpec) {
    let ch = &spec.stage_channels;
    let widths = [
        (spec.bottleneck_channels, ch[2]),
        (ch[2], ch[1]),
        (ch[1], ch[0]),
    ];
    for (i, &(cin, cout)) in widths.iter().enumerate() {
        let stage = format!("dmr_decoder.d{}", 3 - i);
        b.unit(&stage, "reduce", "reduce_bn", cin, cout, 1);
        b.unit(&stage, "conv1", "bn1", cout, cout, 3);
        b.unit(&stage, "conv2", "bn2", cout, cout, 3);
    }
    b.conv("dmr_decoder.head", ch[0], spec.num_classes - 1, 1);
}

/// Build a model with Kaiming-uniform kernels, zero biases, batch-norm gamma
/// 1 / beta 0, and fresh running statistics. Deterministic given the seed;
/// regularizer parameters are drawn last, so the encoder and segmentation
/// decoder of a given seed are identical with or without the regularizer.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        use_bn: spec.use_batchnorm,
        entries: IndexMap::new(),
    };
    let ch = &spec.stage_channels;
    let enc_widths = [
        (spec.in_channels, ch[0]),
        (ch[0], ch[1]),
        (ch[1], ch[2]),
        (ch[2], spec.bottleneck_channels),
    ];
    for (i, &(cin, cout)) in enc_widths.iter().enumerate() {
        let stage = if i < 3 {
            format!("encoder.s{}", i + 1)
        } else {
            "encoder.bott".to_string()
        };
        b.unit(&stage, "conv1", "bn1", cin, cout, 3);
        b.unit(&stage, "conv2", "bn2", cout, cout, 3);
    }
    register_seg_decoder(&mut b, spec);
    if spec.dmr_attached {
        register_dmr_decoder(&mut b, spec);
    }
    Ok(ModelParams {
        spec: spec.clone(),
        entries: b.entries,
    })
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

fn conv_bn_relu(
    tape: &mut Tape,
    params: &ModelParams,
    stage: &str,
    conv: &str,
    bn: &str,
    x: &Tensor,
    mode: Mode,
    padding: usize,
) -> Result<Tensor> {
    let w = params.tensor(&format!("{stage}.{conv}.weight"));
    let bias = params.tensor(&format!("{stage}.{conv}.bias"));
    let mut y = conv2d(tape, x, w, bias, padding, 1)?;
    if params.spec.use_batchnorm {
        y = batchnorm2d(
            tape,
            &y,
            params.tensor(&format!("{stage}.{bn}.gamma")),
            params.tensor(&format!("{stage}.{bn}.beta")),
            params.tensor(&format!("{stage}.{bn}.running_mean")),
            params.tensor(&format!("{stage}.{bn}.running_var")),
            mode,
        )?;
    }
    Ok(relu(tape, &y))
}

struct EncoderOut {
    skips: Vec<Tensor>,
    indices: Vec<PoolIndices>,
    bottleneck: Tensor,
}

fn run_encoder(
    tape: &mut Tape,
    params: &ModelParams,
    image: &Tensor,
    mode: Mode,
) -> Result<EncoderOut> {
    let mut x = image.clone();
    let mut skips = Vec::with_capacity(3);
    let mut indices = Vec::with_capacity(3);
    for stage in ["encoder.s1", "encoder.s2", "encoder.s3"] {
        x = conv_bn_relu(tape, params, stage, "conv1", "bn1", &x, mode, 1)?;
        x = conv_bn_relu(tape, params, stage, "conv2", "bn2", &x, mode, 1)?;
        skips.push(x.clone());
        let (pooled, idx) = maxpool2x2_with_indices(tape, &x)?;
        x = pooled;
        indices.push(idx);
    }
    x = conv_bn_relu(tape, params, "encoder.bott", "conv1", "bn1", &x, mode, 1)?;
    x = conv_bn_relu(tape, params, "encoder.bott", "conv2", "bn2", &x, mode, 1)?;
    Ok(EncoderOut {
        skips,
        indices,
        bottleneck: x,
    })
}

fn run_seg_decoder(
    tape: &mut Tape,
    params: &ModelParams,
    enc: &EncoderOut,
    mode: Mode,
    zero_skips: bool,
) -> Result<Tensor> {
    let spec = &params.spec;
    let mut x = enc.bottleneck.clone();
    for i in (0..3).rev() {
        let stage = format!("seg_decoder.d{}", i + 1);
        match spec.variant {
            Variant::UNet => {
                let w = params.tensor(&format!("{stage}.up.weight"));
                x = conv_transpose2d(tape, &x, w, 2)?;
                if spec.use_batchnorm {
                    x = batchnorm2d(
                        tape,
                        &x,
                        params.tensor(&format!("{stage}.up_bn.gamma")),
                        params.tensor(&format!("{stage}.up_bn.beta")),
                        params.tensor(&format!("{stage}.up_bn.running_mean")),
                        params.tensor(&format!("{stage}.up_bn.running_var")),
                        mode,
                    )?;
                }
                x = relu(tape, &x);
            }
            _ => {
                x = conv_bn_relu(tape, params, &stage, "reduce", "reduce_bn", &x, mode, 0)?;
                x = max_unpool2x2(tape, &x, &enc.indices[i])?;
            }
        }
        if spec.variant.uses_skips() {
            let skip = if zero_skips {
                Tensor::zeros(enc.skips[i].shape().to_vec())
            } else {
                enc.skips[i].clone()
            };
            x = concat_channels(tape, &skip, &x)?;
        }
        x = conv_bn_relu(tape, params, &stage, "conv1", "bn1", &x, mode, 1)?;
        x = conv_bn_relu(tape, params, &stage, "conv2", "bn2", &x, mode, 1)?;
    }
    let w = params.tensor("seg_decoder.head.weight");
    let bias = params.tensor("seg_decoder.head.bias");
    conv2d(tape, &x, w, bias, 0, 1)
}

fn run_dmr_decoder(
    tape: &mut Tape,
    params: &ModelParams,
    enc: &EncoderOut,
    mode: Mode,
) -> Result<Tensor> {
    let mut x = enc.bottleneck.clone();
    for i in (0..3).rev() {
        let stage = format!("dmr_decoder.d{}", i + 1);
        x = conv_bn_relu(tape, params, &stage, "reduce", "reduce_bn", &x, mode, 0)?;
        x = max_unpool2x2(tape, &x, &enc.indices[i])?;
        x = conv_bn_relu(tape, params, &stage, "conv1", "bn1", &x, mode, 1)?;
        x = conv_bn_relu(tape, params, &stage, "conv2", "bn2", &x, mode, 1)?;
    }
    let w = params.tensor("dmr_decoder.head.weight");
    let bias = params.tensor("dmr_decoder.head.bias");
    // regression head: no activation, outputs span the real line
    conv2d(tape, &x, w, bias, 0, 1)
}

pub(crate) fn forward_impl(
    tape: &mut Tape,
    params: &ModelParams,
    image: &Tensor,
    mode: Mode,
    zero_skips: bool,
) -> Result<ForwardOutput> {
    let spec = &params.spec;
    let (_, c, h, w) = image.dims4()?;
    if c != spec.in_channels {
        return Err(Error::Dim(format!(
            "input has {c} channels, model expects {}",
            spec.in_channels
        )));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Dim(format!(
            "input extents must be divisible by 8 (3 pooling stages), got {h}x{w}"
        )));
    }
    let enc = run_encoder(tape, params, image, mode)?;
    let logits = run_seg_decoder(tape, params, &enc, mode, zero_skips)?;
    let dm_pred = if spec.dmr_attached {
        Some(run_dmr_decoder(tape, params, &enc, mode)?)
    } else {
        None
    };
    Ok(ForwardOutput { logits, dm_pred })
}

/// One forward pass. Input is (batch, in_channels, h, w) with h and w
/// divisible by 8; logits keep the input resolution, and `dm_pred` holds
/// `num_classes - 1` regression channels when the regularizer is attached.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    image: &Tensor,
    mode: Mode,
) -> Result<ForwardOutput> {
    forward_impl(tape, params, image, mode, false)
}

// ---------------------------------------------------------------------------
// regularizer lifecycle
// ---------------------------------------------------------------------------

/// Drop the regularizer decoder, leaving the segmentation path bit-for-bit
/// untouched. Fails if no regularizer is attached.
pub fn detach_regularizer(params: &ModelParams) -> Result<ModelParams> {
    if !params.spec.dmr_attached {
        return Err(Error::Usage("regularizer is already detached".into()));
    }
    let mut spec = params.spec.clone();
    spec.dmr_attached = false;
    let entries: IndexMap<String, Tensor> = params
        .entries
        .iter()
        .filter(|(n, _)| !n.starts_with("dmr_decoder."))
        .map(|(n, t)| (n.clone(), t.deep_copy()))
        .collect();
    Ok(ModelParams { spec, entries })
}

/// Attach a freshly initialized regularizer decoder to a detached model.
pub fn attach_regularizer(params: &ModelParams, seed: u64) -> Result<ModelParams> {
    if params.spec.dmr_attached {
        return Err(Error::Usage("regularizer is already attached".into()));
    }
    let mut spec = params.spec.clone();
    spec.dmr_attached = true;
    let mut entries: IndexMap<String, Tensor> = params
        .entries
        .iter()
        .map(|(n, t)| (n.clone(), t.deep_copy()))
        .collect();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        use_bn: spec.use_batchnorm,
        entries: IndexMap::new(),
    };
    register_dmr_decoder(&mut b, &spec);
    entries.extend(b.entries);
    Ok(ModelParams { spec, entries })
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// Slice-wise eval-mode segmentation of a preprocessed volume: per-pixel
/// argmax over the logit channels (ties go to the lower class id), slices
/// restacked in order.
pub fn predict_labels(params: &ModelParams, volume: &Volume) -> Result<LabelVolume> {
    let spec = &params.spec;
    if spec.in_channels != 1 {
        return Err(Error::Dim(format!(
            "predict_labels expects a single-channel model, got {}",
            spec.in_channels
        )));
    }
    let (w, h) = (volume.width, volume.height);
    let plane = w * h;
    let mut labels = Vec::with_capacity(plane * volume.depth);
    for z in 0..volume.depth {
        let data: Vec<f64> = volume.slice(z).iter().map(|&v| v as f64).collect();
        let image = Tensor::from_vec(vec![1, 1, h, w], data)?;
        let mut tape = Tape::no_grad();
        let out = forward(&mut tape, params, &image, Mode::Eval)?;
        let logits = out.logits.data();
        for p in 0..plane {
            let mut best = 0usize;
            for c in 1..spec.num_classes {
                if logits[c * plane + p] > logits[best * plane + p] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    let mut out = LabelVolume::new(w, h, volume.depth, labels, spec.num_classes, volume.spacing)?;
    out.origin = volume.origin;
    Ok(out)
}

#[cfg(test)]
mod tests;
