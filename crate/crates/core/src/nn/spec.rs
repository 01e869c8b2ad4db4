//! Declarative description of a network: an input contract and an ordered
//! list of layers, with a line-oriented text form used in checkpoint headers.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Horizontal first-order difference with the fixed kernel `[1, -1]`,
    /// valid extent (output width `W - 1`).
    FixedHpf,
    Conv {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    },
    BatchNorm {
        eps: f32,
        momentum: f32,
    },
    Relu,
    /// Average pooling, no padding, ceiling-mode output size.
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    /// Max pooling over `n x n` grids for each scale `n`, concatenated.
    Spp {
        scales: Vec<usize>,
    },
    Fc {
        out: usize,
    },
    SoftmaxLoss {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::FixedHpf => "fixed_hpf",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Spp { .. } => "spp",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::SoftmaxLoss { .. } => "softmax_loss",
        }
    }

    pub fn conv3x3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad_h: 1,
            pad_w: 1,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm {
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } if *out_channels == 0 || *kernel_h == 0 || *kernel_w == 0 || *stride == 0 => {
                bad(format!("conv sizes must be positive: {self}"))
            }
            LayerSpec::BatchNorm { eps, momentum }
                if !(*eps > 0.0) || !(*momentum > 0.0 && *momentum < 1.0) =>
            {
                bad(format!("batchnorm needs eps > 0 and momentum in (0,1): {self}"))
            }
            LayerSpec::AvgPool { kernel, stride } if *kernel == 0 || *stride == 0 => {
                bad(format!("pool sizes must be positive: {self}"))
            }
            LayerSpec::Spp { scales }
                if scales.is_empty()
                    || scales.contains(&0)
                    || scales.windows(2).any(|w| w[0] <= w[1]) =>
            {
                bad(format!("spp scales must be positive and strictly decreasing: {self}"))
            }
            LayerSpec::Fc { out: 0 } => bad("fc width must be positive".into()),
            LayerSpec::SoftmaxLoss { classes } if *classes < 2 => {
                bad("softmax loss needs at least two classes".into())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape `[C, H, W]` for input `[C, H, W]`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let mismatch = |m: String| Err(Error::ShapeMismatch(format!("{}: {m}", self.kind())));
        match *self {
            LayerSpec::FixedHpf => {
                if w < 2 {
                    return mismatch(format!("width {w} < 2"));
                }
                Ok([c, h, w - 1])
            }
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad_h,
                pad_w,
            } => {
                if h + 2 * pad_h < kernel_h || w + 2 * pad_w < kernel_w {
                    return mismatch(format!("input {h}x{w} smaller than kernel"));
                }
                Ok([
                    out_channels,
                    (h + 2 * pad_h - kernel_h) / stride + 1,
                    (w + 2 * pad_w - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Relu => Ok(input),
            LayerSpec::AvgPool { kernel, stride } => {
                if h < kernel || w < kernel {
                    return mismatch(format!("input {h}x{w} smaller than {kernel}x{kernel} window"));
                }
                Ok([c, pool_extent(h, kernel, stride), pool_extent(w, kernel, stride)])
            }
            LayerSpec::Spp { ref scales } => Ok([c * scales.iter().map(|s| s * s).sum::<usize>(), 1, 1]),
            LayerSpec::Fc { out } => Ok([out, 1, 1]),
            LayerSpec::SoftmaxLoss { classes } => {
                if input != [classes, 1, 1] {
                    return mismatch(format!("expects {classes} logits, got {input:?}"));
                }
                Ok(input)
            }
        }
    }

    fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let kind = parts
            .next()
            .ok_or_else(|| Error::InvalidSpec("empty layer line".into()))?;
        let mut kv = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("bad layer field {p}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidSpec(format!("{kind}: missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("{kind}: bad {k}")))
        };
        let real = |k: &str| -> Result<f32> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("{kind}: bad {k}")))
        };
        let spec = match kind {
            "fixed_hpf" => LayerSpec::FixedHpf,
            "conv" => LayerSpec::Conv {
                out_channels: num("out")?,
                kernel_h: num("kh")?,
                kernel_w: num("kw")?,
                stride: num("stride")?,
                pad_h: num("pad_h")?,
                pad_w: num("pad_w")?,
            },
            "batchnorm" => LayerSpec::BatchNorm {
                eps: real("eps")?,
                momentum: real("momentum")?,
            },
            "relu" => LayerSpec::Relu,
            "avgpool" => LayerSpec::AvgPool {
                kernel: num("k")?,
                stride: num("stride")?,
            },
            "spp" => LayerSpec::Spp {
                scales: get("scales")?
                    .split(',')
                    .map(|s| s.parse().map_err(|_| Error::InvalidSpec("spp: bad scales".into())))
                    .collect::<Result<_>>()?,
            },
            "fc" => LayerSpec::Fc { out: num("out")? },
            "softmax_loss" => LayerSpec::SoftmaxLoss {
                classes: num("classes")?,
            },
            other => return Err(Error::InvalidSpec(format!("unknown layer kind {other}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind())?;
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad_h,
                pad_w,
            } => write!(
                f,
                " out={out_channels} kh={kernel_h} kw={kernel_w} stride={stride} pad_h={pad_h} pad_w={pad_w}"
            ),
            LayerSpec::BatchNorm { eps, momentum } => write!(f, " eps={eps:?} momentum={momentum:?}"),
            LayerSpec::AvgPool { kernel, stride } => write!(f, " k={kernel} stride={stride}"),
            LayerSpec::Spp { scales } => {
                let s: Vec<String> = scales.iter().map(|s| s.to_string()).collect();
                write!(f, " scales={}", s.join(","))
            }
            LayerSpec::Fc { out } => write!(f, " out={out}"),
            LayerSpec::SoftmaxLoss { classes } => write!(f, " classes={classes}"),
            LayerSpec::FixedHpf | LayerSpec::Relu => Ok(()),
        }
    }
}

/// Ceiling-mode window count along an axis; a trailing window that would
/// start past the input is dropped.
pub(crate) fn pool_extent(len: usize, kernel: usize, stride: usize) -> usize {
    let n = (len - kernel).div_ceil(stride) + 1;
    if (n - 1) * stride >= len {
        n - 1
    } else {
        n
    }
}

/// Model name, per-sample input shape `[C, H, W]` and layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks every layer and runs shape inference over the stack. Returns
    /// the per-layer output shapes.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>> {
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(Error::InvalidSpec(format!("bad model name {:?}", self.name)));
        }
        if self.input.contains(&0) {
            return Err(Error::InvalidSpec(format!("input shape {:?}", self.input)));
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxLoss { .. }) => {}
            _ => return Err(Error::InvalidSpec("last layer must be softmax_loss".into())),
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::SoftmaxLoss { .. }))
        {
            return Err(Error::InvalidSpec("softmax_loss must be the last layer".into()));
        }
        let mut shape = self.input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            l.validate()?;
            shape = l.output_shape(shape)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxLoss { classes }) => *classes,
            _ => 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "model {}\ninput {} {} {}\n",
            self.name, self.input[0], self.input[1], self.input[2]
        );
        for l in &self.layers {
            out.push_str(&format!("layer {l}\n"));
        }
        out
    }

    /// Parses the `model`, `input` and `layer` lines of `text`; other lines
    /// are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut layers = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("model ") {
                name = Some(rest.trim().to_string());
            } else if let Some(rest) = line.strip_prefix("input ") {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|d| d.parse().map_err(|_| Error::InvalidSpec(format!("bad input {rest}"))))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(Error::InvalidSpec(format!("input needs 3 dims: {rest}")));
                }
                input = Some([dims[0], dims[1], dims[2]]);
            } else if let Some(rest) = line.strip_prefix("layer ") {
                layers.push(LayerSpec::parse(rest)?);
            }
        }
        let spec = Self {
            name: name.ok_or_else(|| Error::InvalidSpec("missing model line".into()))?,
            input: input.ok_or_else(|| Error::InvalidSpec("missing input line".into()))?,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}
