//! Shared feature extractor and the per-region stage applied inside the heads.

use autograd::{Conv2dSpec, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, FrozenBn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// ResNet-50 stem through stage 4 (stride 16, 1024 channels); stage 5
    /// runs per region (2048 channels). Batch norms are frozen affines.
    Resnet50,
    /// Three stride-2 3x3 convolutions (stride 8); the region stage is one
    /// stride-2 3x3 convolution.
    Toy { channels: [usize; 3], head_channels: usize },
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig::Toy {
            channels: [16, 32, 64],
            head_channels: 128,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            BackboneConfig::Resnet50 => 16,
            BackboneConfig::Toy { .. } => 8,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneConfig::Resnet50 => 1024,
            BackboneConfig::Toy { channels, .. } => channels[2],
        }
    }

    pub fn head_channels(&self) -> usize {
        match self {
            BackboneConfig::Resnet50 => 2048,
            BackboneConfig::Toy { head_channels, .. } => *head_channels,
        }
    }

    /// Window geometry of every spatial layer in order.
    fn layer_specs(&self) -> Vec<Conv2dSpec> {
        let s2 = Conv2dSpec::new(3, 2, 1);
        match self {
            // conv1 7x7/2, maxpool 3x3/2, stage-2 and stage-3 first blocks 3x3/2
            BackboneConfig::Resnet50 => vec![Conv2dSpec::new(7, 2, 3), s2, s2, s2],
            BackboneConfig::Toy { .. } => vec![s2, s2, s2],
        }
    }

    /// Spatial size of the shared feature map for an `h x w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let stride = self.stride();
        if h < stride || w < stride {
            return Err(Error::ImageTooSmall { height: h, width: w, stride });
        }
        let mut hw = (h, w);
        for s in self.layer_specs() {
            hw = (
                s.output_len(hw.0).ok_or(Error::ImageTooSmall { height: h, width: w, stride })?,
                s.output_len(hw.1).ok_or(Error::ImageTooSmall { height: h, width: w, stride })?,
            );
        }
        Ok(hw)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv,
    bn1: FrozenBn,
    conv2: Conv,
    bn2: FrozenBn,
    conv3: Conv,
    bn3: FrozenBn,
    down: Option<(Conv, FrozenBn)>,
}

impl Bottleneck {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        (cin, mid, cout): (usize, usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(store, &format!("{name}.down"), (cin, cout), Conv2dSpec::new(1, stride, 0), false, rng),
                FrozenBn::new(store, &format!("{name}.down_bn"), cout),
            )
        });
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), (cin, mid), Conv2dSpec::new(1, 1, 0), false, rng),
            bn1: FrozenBn::new(store, &format!("{name}.bn1"), mid),
            conv2: Conv::new(store, &format!("{name}.conv2"), (mid, mid), Conv2dSpec::new(3, stride, 1), false, rng),
            bn2: FrozenBn::new(store, &format!("{name}.bn2"), mid),
            conv3: Conv::new(store, &format!("{name}.conv3"), (mid, cout), Conv2dSpec::new(1, 1, 0), false, rng),
            bn3: FrozenBn::new(store, &format!("{name}.bn3"), cout),
            down,
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = self.bn1.forward(tape, store, self.conv1.forward(tape, store, x)).relu();
        let y = self.bn2.forward(tape, store, self.conv2.forward(tape, store, y)).relu();
        let y = self.bn3.forward(tape, store, self.conv3.forward(tape, store, y));
        let skip = match &self.down {
            Some((c, bn)) => bn.forward(tape, store, c.forward(tape, store, x)),
            None => x,
        };
        y.add(skip).relu()
    }
}

fn res_stage<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    blocks: usize,
    (cin, mid, cout): (usize, usize, usize),
    stride: usize,
    rng: &mut R,
) -> Vec<Bottleneck> {
    (0..blocks)
        .map(|i| {
            let (c, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
            Bottleneck::new(store, &format!("{name}.{i}"), (c, mid, cout), s, rng)
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Layers {
    Resnet {
        stem: Conv,
        stem_bn: FrozenBn,
        blocks: Vec<Bottleneck>,
    },
    Toy(Vec<Conv>),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Layers,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Self {
        let layers = match config {
            BackboneConfig::Resnet50 => {
                let stem = Conv::new(store, "backbone.conv1", (3, 64), Conv2dSpec::new(7, 2, 3), false, rng);
                let stem_bn = FrozenBn::new(store, "backbone.bn1", 64);
                let mut blocks = res_stage(store, "backbone.layer1", 3, (64, 64, 256), 1, rng);
                blocks.extend(res_stage(store, "backbone.layer2", 4, (256, 128, 512), 2, rng));
                blocks.extend(res_stage(store, "backbone.layer3", 6, (512, 256, 1024), 2, rng));
                Layers::Resnet { stem, stem_bn, blocks }
            }
            BackboneConfig::Toy { channels, .. } => {
                let mut cin = 3;
                let convs = channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let conv = Conv::new(store, &format!("backbone.conv{i}"), (cin, c), Conv2dSpec::new(3, 2, 1), true, rng);
                        cin = c;
                        conv
                    })
                    .collect();
                Layers::Toy(convs)
            }
        };
        Self {
            config: config.clone(),
            layers,
        }
    }

    /// `[1, 3, H, W]` image tensor to the shared `[1, C, h, w]` map.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        self.config.output_shape(s[2], s[3])?;
        Ok(match &self.layers {
            Layers::Resnet { stem, stem_bn, blocks } => {
                let mut x = stem_bn.forward(tape, store, stem.forward(tape, store, image)).relu();
                x = x.max_pool2d(Conv2dSpec::new(3, 2, 1));
                for b in blocks {
                    x = b.forward(tape, store, x);
                }
                x
            }
            Layers::Toy(convs) => convs
                .iter()
                .fold(image, |x, c| c.forward(tape, store, x).relu()),
        })
    }
}

/// The stage applied to each pooled region (`[n, C, r, r]` to
/// `[n, C5, r/2, r/2]`).
#[derive(Clone, Debug)]
pub struct HeadStage {
    blocks: Vec<Bottleneck>,
    toy: Option<Conv>,
}

impl HeadStage {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &BackboneConfig, rng: &mut R) -> Self {
        match config {
            BackboneConfig::Resnet50 => Self {
                blocks: res_stage(store, &format!("{name}.layer4"), 3, (1024, 512, 2048), 2, rng),
                toy: None,
            },
            BackboneConfig::Toy { channels, head_channels } => Self {
                blocks: Vec::new(),
                toy: Some(Conv::new(
                    store,
                    &format!("{name}.conv"),
                    (channels[2], *head_channels),
                    Conv2dSpec::new(3, 2, 1),
                    true,
                    rng,
                )),
            },
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        match &self.toy {
            Some(c) => c.forward(tape, store, x).relu(),
            None => self.blocks.iter().fold(x, |x, b| b.forward(tape, store, x)),
        }
    }
}
