use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::MAX_BITS;

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    MaxPool {
        kernel: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    /// Shape of the latent weight tensor of a learnable layer.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(vec![inputs, outputs]),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// A sequential network description.
///
/// The first and last learnable layers run in full precision; every learnable
/// layer between them is a quantized block, numbered `0..L` from input to output.
/// A block owns its layer plus the batch norms and activations that follow it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// Per-sample input shape, e.g. `[d]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// `inputs → hidden[0] → … → classes`, with batch norm and ReLU after every
    /// hidden layer.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: prev,
                outputs: h,
            });
            layers.push(LayerSpec::BatchNorm { channels: h });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: prev,
            outputs: classes,
        });
        Self {
            input_shape: vec![inputs],
            classes,
            layers,
        }
    }

    /// Three 3×3 convolutions with two 2× poolings and a dense classifier.
    pub fn small_cnn(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let conv = |i, o| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let layers = vec![
            conv(channels, 8),
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            conv(8, 16),
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2 },
            conv(16, 16),
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * (height / 4) * (width / 4),
                outputs: classes,
            },
        ];
        Self {
            input_shape: vec![channels, height, width],
            classes,
            layers,
        }
    }

    pub fn learnable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_learnable()).count()
    }

    /// Number `L` of quantized blocks.
    pub fn quantized_count(&self) -> usize {
        self.learnable_count().saturating_sub(2)
    }

    pub fn bn_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::BatchNorm { .. }))
            .count()
    }

    /// Whether learnable layer `idx` (in learnable order) is quantized.
    pub fn is_quantized(&self, idx: usize) -> bool {
        idx > 0 && idx + 1 < self.learnable_count()
    }

    /// Channel count of every batch-norm layer, in order.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { channels } => Some(*channels),
                _ => None,
            })
            .collect()
    }

    /// Walks the layer list checking every shape transition.
    pub fn validate(&self) -> Result<()> {
        if self.learnable_count() < 3 {
            return Err(Error::Config(
                "architecture needs at least three learnable layers (first, one quantized, last)"
                    .into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({layer:?}): {msg}"));
            shape = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if shape != [inputs] {
                        return Err(bad(format!("expects [{inputs}], gets {shape:?}")));
                    }
                    vec![outputs]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(bad(format!(
                            "expects [{in_channels}, H, W], gets {shape:?}"
                        )));
                    }
                    if stride == 0
                        || kernel == 0
                        || kernel > shape[1] + 2 * padding
                        || kernel > shape[2] + 2 * padding
                    {
                        return Err(bad("kernel does not fit the padded input".into()));
                    }
                    vec![
                        out_channels,
                        (shape[1] + 2 * padding - kernel) / stride + 1,
                        (shape[2] + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::BatchNorm { channels } => {
                    if shape.first() != Some(&channels) {
                        return Err(bad(format!("expects {channels} channels, gets {shape:?}")));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::AvgPool { kernel } | LayerSpec::MaxPool { kernel } => {
                    if shape.len() != 3 || kernel == 0 || shape[1] < kernel || shape[2] < kernel {
                        return Err(bad(format!("cannot pool {shape:?}")));
                    }
                    vec![shape[0], shape[1] / kernel, shape[2] / kernel]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
        }
        if shape != [self.classes] {
            return Err(Error::Config(format!(
                "network emits {shape:?}, expected [{}]",
                self.classes
            )));
        }
        Ok(())
    }
}

/// The set `B` of supported bit-widths, stored in strictly descending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitWidthSet(Vec<u8>);

impl BitWidthSet {
    pub fn new(mut bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Config("bit-width set is empty".into()));
        }
        if let Some(b) = bits.iter().find(|b| !(2..=MAX_BITS).contains(*b)) {
            return Err(Error::Config(format!(
                "bit-width {b} outside 2..={MAX_BITS}"
            )));
        }
        bits.sort_unstable_by(|a, b| b.cmp(a));
        if bits.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate bit-width in {bits:?}")));
        }
        Ok(Self(bits))
    }

    /// The highest precision `b1`.
    pub fn b1(&self) -> u8 {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0.contains(&b)
    }

    /// Position `k` of `b` in descending order (0 for `b1`).
    pub fn position(&self, b: u8) -> Option<usize> {
        self.0.iter().position(|x| *x == b)
    }

    /// Element of the set nearest to `b`; ties go to the higher bit-width.
    pub fn nearest(&self, b: u8) -> u8 {
        let mut best = self.0[0];
        for &c in &self.0 {
            let (d, db) = ((c as i32 - b as i32).abs(), (best as i32 - b as i32).abs());
            if d < db || (d == db && c > best) {
                best = c;
            }
        }
        best
    }
}

impl TryFrom<Vec<u8>> for BitWidthSet {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitWidthSet> for Vec<u8> {
    fn from(b: BitWidthSet) -> Self {
        b.0
    }
}

/// Per-block execution choice: `true` runs the student block, `false` swaps
/// in the teacher block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapMask {
    pub beta: Vec<bool>,
}

impl SwapMask {
    pub fn all_student(blocks: usize) -> Self {
        Self {
            beta: vec![true; blocks],
        }
    }

    pub fn is_all_student(&self) -> bool {
        self.beta.iter().all(|b| *b)
    }

    /// Fraction of blocks executed by the student.
    pub fn student_fraction(&self) -> f64 {
        if self.beta.is_empty() {
            return 1.0;
        }
        self.beta.iter().filter(|b| **b).count() as f64 / self.beta.len() as f64
    }
}
