//! The two detectors: a pixel-domain CNN behind a fixed horizontal
//! difference filter, and a histogram-domain CNN over the 256-bin gray-level
//! histogram.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::dataset::{derive_seed, Representation, DEFAULT_SMOOTHNESS};
use crate::enhance::{gamma_correct, GammaParam};
use crate::imagecore::{synth_patch, LEVELS};
use crate::nn::{grad_check, Checkpoint, GradCheckOptions, GradCheckReport, LayerSpec, Network, NetworkSpec, Tensor};

/// Smallest accepted P-CNN input side.
pub const PCNN_MIN_INPUT: usize = 32;
pub const PCNN_CHANNELS: [usize; 4] = [64, 16, 32, 128];
pub const PCNN_SPP_SCALES: [usize; 3] = [4, 2, 1];
pub const HCNN_CONV_CHANNELS: [usize; 2] = [64, 64];
pub const HCNN_FC_WIDTHS: [usize; 3] = [512, 1024, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Pcnn,
    Hcnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pcnn => "pcnn",
            ModelKind::Hcnn => "hcnn",
        }
    }

    pub fn representation(self) -> Representation {
        match self {
            ModelKind::Pcnn => Representation::Pixel,
            ModelKind::Hcnn => Representation::Histogram,
        }
    }

    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        spec.name.parse()
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcnn" => Ok(ModelKind::Pcnn),
            "hcnn" => Ok(ModelKind::Hcnn),
            other => Err(Error::SpecMismatch(format!("unknown model {other:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn pcnn_spec(input_h: usize, input_w: usize) -> Result<NetworkSpec> {
    if input_h < PCNN_MIN_INPUT || input_w < PCNN_MIN_INPUT {
        return Err(Error::InputTooSmall {
            height: input_h,
            width: input_w,
            min: PCNN_MIN_INPUT,
        });
    }
    let mut layers = vec![LayerSpec::FixedHpf];
    for (i, &ch) in PCNN_CHANNELS.iter().enumerate() {
        layers.push(LayerSpec::conv3x3(ch));
        layers.push(LayerSpec::batchnorm());
        layers.push(LayerSpec::Relu);
        if i + 1 < PCNN_CHANNELS.len() {
            layers.push(LayerSpec::AvgPool { kernel: 5, stride: 2 });
        } else {
            layers.push(LayerSpec::Spp {
                scales: PCNN_SPP_SCALES.to_vec(),
            });
        }
    }
    layers.push(LayerSpec::Fc { out: 2 });
    layers.push(LayerSpec::SoftmaxLoss { classes: 2 });
    Ok(NetworkSpec {
        name: ModelKind::Pcnn.name().into(),
        input: [1, input_h, input_w],
        layers,
    })
}

pub fn hcnn_spec() -> NetworkSpec {
    let mut layers = Vec::new();
    for &ch in &HCNN_CONV_CHANNELS {
        layers.push(LayerSpec::Conv {
            out_channels: ch,
            kernel_h: 1,
            kernel_w: 3,
            stride: 1,
            pad_h: 0,
            pad_w: 1,
        });
        layers.push(LayerSpec::batchnorm());
        layers.push(LayerSpec::Relu);
    }
    for (i, &w) in HCNN_FC_WIDTHS.iter().enumerate() {
        layers.push(LayerSpec::Fc { out: w });
        if i + 1 < HCNN_FC_WIDTHS.len() {
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::SoftmaxLoss { classes: 2 });
    NetworkSpec {
        name: ModelKind::Hcnn.name().into(),
        input: [1, 1, LEVELS],
        layers,
    }
}

pub fn build_pcnn(input_h: usize, input_w: usize, seed: u64) -> Result<Network<f32>> {
    Network::new(pcnn_spec(input_h, input_w)?, seed)
}

pub fn build_hcnn(seed: u64) -> Result<Network<f32>> {
    Network::new(hcnn_spec(), seed)
}

/// Builds `kind` for patches of `patch_h x patch_w` pixels.
pub fn build_model(kind: ModelKind, patch_h: usize, patch_w: usize, seed: u64) -> Result<Network<f32>> {
    match kind {
        ModelKind::Pcnn => build_pcnn(patch_h, patch_w, seed),
        ModelKind::Hcnn => build_hcnn(seed),
    }
}

/// Starts a network from `base`'s weights and running statistics. The
/// base must have been trained on exactly `target`.
pub fn finetune_init(base: &Checkpoint, target: &NetworkSpec) -> Result<Network<f32>> {
    if &base.spec != target {
        return Err(Error::SpecMismatch(format!(
            "cannot fine-tune {} ({:?}) from {} ({:?})",
            target.name, target.input, base.spec.name, base.spec.input
        )));
    }
    let mut net = Network::new(target.clone(), 0)?;
    base.load_into(&mut net)?;
    Ok(net)
}

/// Side of the P-CNN patches used for gradient checking.
pub const GRADCHECK_PATCH: usize = 32;
const GRADCHECK_BATCH: usize = 4;

/// Finite-difference check of a freshly initialized `kind` on a small
/// synthetic batch (alternating original and gamma 0.6 patches).
pub fn gradcheck_model(kind: ModelKind, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let p = GRADCHECK_PATCH;
    let net = build_model(kind, p, p, seed)?;
    let repr = kind.representation();
    let brighten = GammaParam::new(0.6)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape = [0; 3];
    for i in 0..GRADCHECK_BATCH {
        let mut img = synth_patch(derive_seed(seed, i as u64), p, p, DEFAULT_SMOOTHNESS)?;
        if i % 2 == 1 {
            img = gamma_correct(&img, brighten);
        }
        shape = repr.shape(&img);
        data.extend(repr.features(&img));
        labels.push(i % 2);
    }
    let batch = Tensor::new(vec![GRADCHECK_BATCH, shape[0], shape[1], shape[2]], data)?;
    grad_check(&net, &batch, &labels, opts)
}
