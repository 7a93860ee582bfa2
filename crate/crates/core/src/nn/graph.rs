//! Residual network container: bottleneck blocks grouped into stages whose
//! shared output width the pruner rewrites.
//!
//! Structure rules the rest of the crate relies on:
//! - every stage starts with a downsample conv + BN on the identity path of
//!   its first block, even when the stage keeps spatial size, so stage-width
//!   edits always have a concrete layer to rewrite;
//! - all blocks in a stage and the downsample share one output width;
//! - ReLU follows the shortcut add;
//! - the stem and classifier never change shape.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d, Linear};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Stable address of a conv + BN pair (or the classifier) inside the graph.
///
/// Rendered as `stem`, `s{stage}.b{block}.conv{1..3}`, `s{stage}.down`, or
/// `fc`; the same strings parse back via [`FromStr`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Stem,
    Conv { stage: usize, block: usize, index: u8 },
    Downsample { stage: usize },
    Classifier,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Stem => write!(f, "stem"),
            LayerId::Conv { stage, block, index } => {
                write!(f, "s{stage}.b{block}.conv{index}")
            }
            LayerId::Downsample { stage } => write!(f, "s{stage}.down"),
            LayerId::Classifier => write!(f, "fc"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = || Error::InvalidArgument(format!("unrecognized layer id {s:?}"));
        match s {
            "stem" => return Ok(LayerId::Stem),
            "fc" => return Ok(LayerId::Classifier),
            _ => {}
        }
        let mut parts = s.split('.');
        let stage = parts
            .next()
            .and_then(|p| p.strip_prefix('s'))
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(invalid)?;
        match (parts.next(), parts.next(), parts.next()) {
            (Some("down"), None, _) => Ok(LayerId::Downsample { stage }),
            (Some(b), Some(c), None) => {
                let block = b
                    .strip_prefix('b')
                    .and_then(|p| p.parse::<usize>().ok())
                    .ok_or_else(invalid)?;
                let index = c
                    .strip_prefix("conv")
                    .and_then(|p| p.parse::<u8>().ok())
                    .filter(|i| (1..=3).contains(i))
                    .ok_or_else(invalid)?;
                Ok(LayerId::Conv { stage, block, index })
            }
            _ => Err(invalid()),
        }
    }
}

/// User-facing architecture knobs; expands to a [`GraphSpec`] with the
/// bottleneck mid-width fixed at a quarter of the stage width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_side: usize,
    pub in_channels: usize,
    pub class_count: usize,
    /// Output width per stage.
    pub widths: Vec<usize>,
    /// Block count per stage; same length as `widths`.
    pub blocks: Vec<usize>,
    /// Replace each block's 3×3 conv with a depthwise conv.
    pub depthwise: bool,
}

impl NetConfig {
    /// The small reference net used throughout: 1×32×32 inputs, three stages
    /// of two blocks, ten classes.
    pub fn desk() -> Self {
        NetConfig {
            input_side: 32,
            in_channels: 1,
            class_count: 10,
            widths: vec![32, 64, 128],
            blocks: vec![2, 2, 2],
            depthwise: false,
        }
    }

    pub fn spec(&self) -> Result<GraphSpec> {
        let cfg = |msg: String| Error::Config(msg);
        if self.widths.is_empty() {
            return Err(cfg("need at least one stage".into()));
        }
        if self.blocks.len() != self.widths.len() {
            return Err(cfg(format!(
                "blocks list has {} entries for {} stages",
                self.blocks.len(),
                self.widths.len()
            )));
        }
        for (s, &w) in self.widths.iter().enumerate() {
            if w < 4 {
                return Err(cfg(format!(
                    "stage {s} width {w} cannot form a bottleneck reduce/expand (minimum 4)"
                )));
            }
            if self.blocks[s] == 0 {
                return Err(cfg(format!("stage {s} needs at least one block")));
            }
        }
        if self.class_count == 0 || self.in_channels == 0 || self.input_side == 0 {
            return Err(cfg(
                "class_count, in_channels, and input_side must be positive".into(),
            ));
        }
        let stages = self
            .widths
            .iter()
            .zip(&self.blocks)
            .map(|(&width, &blocks)| StageSpec {
                width,
                blocks: vec![
                    BlockSpec {
                        mid_a: width / 4,
                        mid_b: width / 4,
                    };
                    blocks
                ],
            })
            .collect();
        let spec = GraphSpec {
            in_channels: self.in_channels,
            input_side: self.input_side,
            class_count: self.class_count,
            depthwise: self.depthwise,
            stem_width: self.widths[0],
            stages,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Exact per-layer widths of a graph. Unlike [`NetConfig`] this survives
/// pruning: surgery produces a reduced spec and rebuilds from it, and the
/// checkpoint manifest embeds it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub in_channels: usize,
    pub input_side: usize,
    pub class_count: usize,
    pub depthwise: bool,
    pub stem_width: usize,
    pub stages: Vec<StageSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub mid_a: usize,
    pub mid_b: usize,
}

impl GraphSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Error::Config(msg);
        if self.stages.is_empty() {
            return Err(cfg("graph spec has no stages".into()));
        }
        if self.class_count == 0
            || self.in_channels == 0
            || self.input_side == 0
            || self.stem_width == 0
        {
            return Err(cfg(
                "class_count, in_channels, input_side, and stem_width must be positive".into(),
            ));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.width == 0 {
                return Err(cfg(format!("stage {s} has zero width")));
            }
            if stage.blocks.is_empty() {
                return Err(cfg(format!("stage {s} has no blocks")));
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                if block.mid_a == 0 || block.mid_b == 0 {
                    return Err(cfg(format!("block s{s}.b{b} has a zero mid width")));
                }
                if self.depthwise && block.mid_a != block.mid_b {
                    return Err(cfg(format!(
                        "block s{s}.b{b}: depthwise conv needs mid_a == mid_b, got {} and {}",
                        block.mid_a, block.mid_b
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel count feeding stage `s`.
    pub fn stage_input_width(&self, s: usize) -> usize {
        if s == 0 {
            self.stem_width
        } else {
            self.stages[s - 1].width
        }
    }
}

/// 1×1 reduce → 3×3 (optionally depthwise) → 1×1 expand, each followed by
/// BN, with ReLU after the shortcut add.
#[derive(Clone)]
pub struct Bottleneck<T: Scalar> {
    pub(crate) conv1: Conv2d<T>,
    pub(crate) bn1: BatchNorm2d<T>,
    pub(crate) conv2: Conv2d<T>,
    pub(crate) bn2: BatchNorm2d<T>,
    pub(crate) conv3: Conv2d<T>,
    pub(crate) bn3: BatchNorm2d<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn new<R: Rng>(
        rng: &mut R,
        in_width: usize,
        width: usize,
        spec: &BlockSpec,
        stride: usize,
        depthwise: bool,
    ) -> Result<Self> {
        let groups = if depthwise { spec.mid_a } else { 1 };
        Ok(Bottleneck {
            conv1: Conv2d::new(rng, in_width, spec.mid_a, 1, 1, 0, 1, false)?,
            bn1: BatchNorm2d::new(spec.mid_a),
            conv2: Conv2d::new(rng, spec.mid_a, spec.mid_b, 3, stride, 1, groups, false)?,
            bn2: BatchNorm2d::new(spec.mid_b),
            conv3: Conv2d::new(rng, spec.mid_b, width, 1, 1, 0, 1, false)?,
            bn3: BatchNorm2d::new(width),
        })
    }

    /// Width of the 1×1 reduce output (first inner channel set).
    pub fn mid_a(&self) -> usize {
        self.conv1.out_channels()
    }

    /// Width of the 3×3 output (second inner channel set).
    pub fn mid_b(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn width(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn conv1(&self) -> &Conv2d<T> {
        &self.conv1
    }

    pub fn conv2(&self) -> &Conv2d<T> {
        &self.conv2
    }

    pub fn conv3(&self) -> &Conv2d<T> {
        &self.conv3
    }

    pub fn bn3(&self) -> &BatchNorm2d<T> {
        &self.bn3
    }

    fn forward_train(
        &mut self,
        x: &Tensor<T>,
        identity: &Tensor<T>,
        stage: usize,
        block: usize,
    ) -> Result<Tensor<T>> {
        let lid = |index: u8| LayerId::Conv { stage, block, index };
        let h = self.conv1.forward(x).map_err(|e| e.in_layer(lid(1)))?;
        let h = self.bn1.forward_train(&h).map_err(|e| e.in_layer(lid(1)))?.relu();
        let h = self.conv2.forward(&h).map_err(|e| e.in_layer(lid(2)))?;
        let h = self.bn2.forward_train(&h).map_err(|e| e.in_layer(lid(2)))?.relu();
        let h = self.conv3.forward(&h).map_err(|e| e.in_layer(lid(3)))?;
        let h = self.bn3.forward_train(&h).map_err(|e| e.in_layer(lid(3)))?;
        Ok(h.add(identity).map_err(|e| e.in_layer(lid(3)))?.relu())
    }

    fn forward_eval(
        &self,
        x: &Tensor<T>,
        identity: &Tensor<T>,
        stage: usize,
        block: usize,
    ) -> Result<Tensor<T>> {
        let lid = |index: u8| LayerId::Conv { stage, block, index };
        let h = self.conv1.forward(x).map_err(|e| e.in_layer(lid(1)))?;
        let h = self.bn1.forward_eval(&h).map_err(|e| e.in_layer(lid(1)))?.relu();
        let h = self.conv2.forward(&h).map_err(|e| e.in_layer(lid(2)))?;
        let h = self.bn2.forward_eval(&h).map_err(|e| e.in_layer(lid(2)))?.relu();
        let h = self.conv3.forward(&h).map_err(|e| e.in_layer(lid(3)))?;
        let h = self.bn3.forward_eval(&h).map_err(|e| e.in_layer(lid(3)))?;
        Ok(h.add(identity).map_err(|e| e.in_layer(lid(3)))?.relu())
    }

    fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Parameter<T>)>,
    ) {
        self.conv1.params_mut(&format!("{prefix}.conv1"), out);
        self.bn1.params_mut(&format!("{prefix}.bn1"), out);
        self.conv2.params_mut(&format!("{prefix}.conv2"), out);
        self.bn2.params_mut(&format!("{prefix}.bn2"), out);
        self.conv3.params_mut(&format!("{prefix}.conv3"), out);
        self.bn3.params_mut(&format!("{prefix}.bn3"), out);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.bn1.params(&format!("{prefix}.bn1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        self.bn2.params(&format!("{prefix}.bn2"), out);
        self.conv3.params(&format!("{prefix}.conv3"), out);
        self.bn3.params(&format!("{prefix}.bn3"), out);
    }
}

/// Blocks sharing one output width, plus the downsample pair on the first
/// block's identity path.
#[derive(Clone)]
pub struct ResidualStage<T: Scalar> {
    pub(crate) down_conv: Conv2d<T>,
    pub(crate) down_bn: BatchNorm2d<T>,
    pub(crate) blocks: Vec<Bottleneck<T>>,
}

impl<T: Scalar> ResidualStage<T> {
    pub fn width(&self) -> usize {
        self.down_bn.channels()
    }

    pub fn blocks(&self) -> &[Bottleneck<T>] {
        &self.blocks
    }

    pub fn down_conv(&self) -> &Conv2d<T> {
        &self.down_conv
    }

    pub fn down_bn(&self) -> &BatchNorm2d<T> {
        &self.down_bn
    }

    fn forward_train(&mut self, x: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        let did = LayerId::Downsample { stage };
        let identity = self.down_conv.forward(x).map_err(|e| e.in_layer(did))?;
        let identity = self
            .down_bn
            .forward_train(&identity)
            .map_err(|e| e.in_layer(did))?;
        let mut h = self.blocks[0].forward_train(x, &identity, stage, 0)?;
        for b in 1..self.blocks.len() {
            let x = h.clone();
            h = self.blocks[b].forward_train(&x, &x, stage, b)?;
        }
        Ok(h)
    }

    fn forward_eval(&self, x: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        let did = LayerId::Downsample { stage };
        let identity = self.down_conv.forward(x).map_err(|e| e.in_layer(did))?;
        let identity = self
            .down_bn
            .forward_eval(&identity)
            .map_err(|e| e.in_layer(did))?;
        let mut h = self.blocks[0].forward_eval(x, &identity, stage, 0)?;
        for b in 1..self.blocks.len() {
            let x = h.clone();
            h = self.blocks[b].forward_eval(&x, &x, stage, b)?;
        }
        Ok(h)
    }

    fn params_mut<'a>(
        &'a mut self,
        stage: usize,
        out: &mut Vec<(String, &'a mut Parameter<T>)>,
    ) {
        self.down_conv.params_mut(&format!("s{stage}.down.conv"), out);
        self.down_bn.params_mut(&format!("s{stage}.down.bn"), out);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.params_mut(&format!("s{stage}.b{b}"), out);
        }
    }

    fn params<'a>(&'a self, stage: usize, out: &mut Vec<(String, &'a Parameter<T>)>) {
        self.down_conv.params(&format!("s{stage}.down.conv"), out);
        self.down_bn.params(&format!("s{stage}.down.bn"), out);
        for (b, block) in self.blocks.iter().enumerate() {
            block.params(&format!("s{stage}.b{b}"), out);
        }
    }
}

/// Stem conv + BN + ReLU, residual stages, global average pool, classifier.
#[derive(Clone)]
pub struct NetworkGraph<T: Scalar> {
    pub(crate) stem_conv: Conv2d<T>,
    pub(crate) stem_bn: BatchNorm2d<T>,
    pub(crate) stages: Vec<ResidualStage<T>>,
    pub(crate) classifier: Linear<T>,
    in_channels: usize,
    input_side: usize,
    class_count: usize,
    depthwise: bool,
}

impl<T: Scalar> fmt::Debug for NetworkGraph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NetworkGraph<{}> {:?}", T::DTYPE, self.spec())
    }
}

/// Builds the reference architecture from a config with freshly initialized
/// weights; the same seed reproduces the same weights bit for bit.
pub fn build_tiny_resnet<T: Scalar>(config: &NetConfig, seed: u64) -> Result<NetworkGraph<T>> {
    NetworkGraph::from_spec(&config.spec()?, seed)
}

impl<T: Scalar> NetworkGraph<T> {
    /// Constructs a graph with the exact per-layer widths of `spec`.
    pub fn from_spec(spec: &GraphSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(&mut rng, spec.in_channels, spec.stem_width, 3, 1, 1, 1, false)?;
        let stem_bn = BatchNorm2d::new(spec.stem_width);
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (s, stage_spec) in spec.stages.iter().enumerate() {
            let in_width = spec.stage_input_width(s);
            let stride = Self::stage_stride(s);
            let down_conv = Conv2d::new(&mut rng, in_width, stage_spec.width, 1, stride, 0, 1, false)?;
            let down_bn = BatchNorm2d::new(stage_spec.width);
            let mut blocks = Vec::with_capacity(stage_spec.blocks.len());
            for (b, block_spec) in stage_spec.blocks.iter().enumerate() {
                let block_in = if b == 0 { in_width } else { stage_spec.width };
                let block_stride = if b == 0 { stride } else { 1 };
                blocks.push(Bottleneck::new(
                    &mut rng,
                    block_in,
                    stage_spec.width,
                    block_spec,
                    block_stride,
                    spec.depthwise,
                )?);
            }
            stages.push(ResidualStage {
                down_conv,
                down_bn,
                blocks,
            });
        }
        let last_width = spec.stages.last().expect("validated nonempty").width;
        let classifier = Linear::new(&mut rng, last_width, spec.class_count)?;
        let net = NetworkGraph {
            stem_conv,
            stem_bn,
            stages,
            classifier,
            in_channels: spec.in_channels,
            input_side: spec.input_side,
            class_count: spec.class_count,
            depthwise: spec.depthwise,
        };
        net.validate()?;
        Ok(net)
    }

    /// Spatial stride applied by a stage's first block and downsample.
    pub fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Per-layer widths as currently built, the inverse of [`Self::from_spec`].
    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            in_channels: self.in_channels,
            input_side: self.input_side,
            class_count: self.class_count,
            depthwise: self.depthwise,
            stem_width: self.stem_conv.out_channels(),
            stages: self
                .stages
                .iter()
                .map(|stage| StageSpec {
                    width: stage.width(),
                    blocks: stage
                        .blocks
                        .iter()
                        .map(|b| BlockSpec {
                            mid_a: b.mid_a(),
                            mid_b: b.mid_b(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn depthwise(&self) -> bool {
        self.depthwise
    }

    pub fn stages(&self) -> &[ResidualStage<T>] {
        &self.stages
    }

    pub fn classifier(&self) -> &Linear<T> {
        &self.classifier
    }

    pub fn stem_conv(&self) -> &Conv2d<T> {
        &self.stem_conv
    }

    pub fn stem_bn(&self) -> &BatchNorm2d<T> {
        &self.stem_bn
    }

    /// Checks every cross-layer width constraint, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        fn ensure(cond: bool, layer: LayerId, msg: impl FnOnce() -> String) -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::shape("graph structure", msg()).in_layer(layer))
            }
        }
        let bn_ok = |bn: &BatchNorm2d<T>, c: usize, layer: LayerId| -> Result<()> {
            ensure(bn.channels() == c, layer, || {
                format!("BN width {} does not match conv output {}", bn.channels(), c)
            })?;
            ensure(
                bn.running_mean().len() == c && bn.running_var().len() == c,
                layer,
                || "running statistic length differs from channel count".into(),
            )?;
            ensure(
                bn.running_var().iter().all(|v| *v >= T::zero()),
                layer,
                || "running variance has a negative entry".into(),
            )
        };

        ensure(
            self.stem_conv.in_channels() == self.in_channels,
            LayerId::Stem,
            || {
                format!(
                    "stem expects {} input channels, graph says {}",
                    self.stem_conv.in_channels(),
                    self.in_channels
                )
            },
        )?;
        bn_ok(&self.stem_bn, self.stem_conv.out_channels(), LayerId::Stem)?;

        let mut prev_width = self.stem_conv.out_channels();
        for (s, stage) in self.stages.iter().enumerate() {
            let width = stage.width();
            let did = LayerId::Downsample { stage: s };
            ensure(stage.down_conv.in_channels() == prev_width, did, || {
                format!(
                    "downsample input {} vs previous width {}",
                    stage.down_conv.in_channels(),
                    prev_width
                )
            })?;
            ensure(stage.down_conv.out_channels() == width, did, || {
                format!(
                    "downsample output {} vs stage width {}",
                    stage.down_conv.out_channels(),
                    width
                )
            })?;
            ensure(stage.down_conv.stride() == Self::stage_stride(s), did, || {
                format!("downsample stride {}", stage.down_conv.stride())
            })?;
            bn_ok(&stage.down_bn, width, did)?;

            for (b, block) in stage.blocks.iter().enumerate() {
                let lid = |index: u8| LayerId::Conv { stage: s, block: b, index };
                let block_in = if b == 0 { prev_width } else { width };
                ensure(block.conv1.in_channels() == block_in, lid(1), || {
                    format!(
                        "conv1 input {} vs block input {}",
                        block.conv1.in_channels(),
                        block_in
                    )
                })?;
                bn_ok(&block.bn1, block.conv1.out_channels(), lid(1))?;
                ensure(
                    block.conv2.in_channels() == block.conv1.out_channels(),
                    lid(2),
                    || {
                        format!(
                            "conv2 input {} vs conv1 output {}",
                            block.conv2.in_channels(),
                            block.conv1.out_channels()
                        )
                    },
                )?;
                if self.depthwise {
                    ensure(
                        block.conv2.groups() == block.conv2.in_channels()
                            && block.conv2.out_channels() == block.conv2.in_channels(),
                        lid(2),
                        || "depthwise conv2 must keep groups == in == out".into(),
                    )?;
                }
                let expected_stride = if b == 0 { Self::stage_stride(s) } else { 1 };
                ensure(block.conv2.stride() == expected_stride, lid(2), || {
                    format!(
                        "conv2 stride {} vs expected {}",
                        block.conv2.stride(),
                        expected_stride
                    )
                })?;
                bn_ok(&block.bn2, block.conv2.out_channels(), lid(2))?;
                ensure(
                    block.conv3.in_channels() == block.conv2.out_channels(),
                    lid(3),
                    || {
                        format!(
                            "conv3 input {} vs conv2 output {}",
                            block.conv3.in_channels(),
                            block.conv2.out_channels()
                        )
                    },
                )?;
                ensure(block.conv3.out_channels() == width, lid(3), || {
                    format!(
                        "conv3 output {} vs stage width {}",
                        block.conv3.out_channels(),
                        width
                    )
                })?;
                bn_ok(&block.bn3, width, lid(3))?;
            }
            prev_width = width;
        }

        ensure(
            self.classifier.in_features() == prev_width,
            LayerId::Classifier,
            || {
                format!(
                    "classifier input {} vs final stage width {}",
                    self.classifier.in_features(),
                    prev_width
                )
            },
        )?;
        ensure(
            self.classifier.out_features() == self.class_count,
            LayerId::Classifier,
            || {
                format!(
                    "classifier output {} vs class count {}",
                    self.classifier.out_features(),
                    self.class_count
                )
            },
        )
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 4 || x.shape()[1] != self.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected input [n, {}, h, w], got {:?}",
                    self.in_channels,
                    x.shape()
                ),
            )
            .in_layer(LayerId::Stem));
        }
        Ok(())
    }

    /// Forward pass that records gradients and updates BN running stats.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self
            .stem_conv
            .forward(x)
            .map_err(|e| e.in_layer(LayerId::Stem))?;
        let mut h = self
            .stem_bn
            .forward_train(&h)
            .map_err(|e| e.in_layer(LayerId::Stem))?
            .relu();
        for s in 0..self.stages.len() {
            let x = h;
            h = self.stages[s].forward_train(&x, s)?;
        }
        let pooled = h.mean_axes(&[2, 3])?;
        self.classifier
            .forward(&pooled)
            .map_err(|e| e.in_layer(LayerId::Classifier))
    }

    /// Deterministic forward with frozen BN statistics; a pure function of
    /// (weights, input).
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self
            .stem_conv
            .forward(x)
            .map_err(|e| e.in_layer(LayerId::Stem))?;
        let mut h = self
            .stem_bn
            .forward_eval(&h)
            .map_err(|e| e.in_layer(LayerId::Stem))?
            .relu();
        for (s, stage) in self.stages.iter().enumerate() {
            let x = h;
            h = stage.forward_eval(&x, s)?;
        }
        let pooled = h.mean_axes(&[2, 3])?;
        self.classifier
            .forward(&pooled)
            .map_err(|e| e.in_layer(LayerId::Classifier))
    }

    /// All parameters in a fixed traversal order: stem, stages (downsample
    /// first, then blocks), classifier. Checkpoints and the optimizer both
    /// rely on this order being stable.
    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        self.stem_conv.params("stem.conv", &mut out);
        self.stem_bn.params("stem.bn", &mut out);
        for (s, stage) in self.stages.iter().enumerate() {
            stage.params(s, &mut out);
        }
        self.classifier.params("fc", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        self.stem_conv.params_mut("stem.conv", &mut out);
        self.stem_bn.params_mut("stem.bn", &mut out);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            stage.params_mut(s, &mut out);
        }
        self.classifier.params_mut("fc", &mut out);
        out
    }

    /// Count of trainable scalars (conv and classifier weights/biases, BN
    /// scale and shift; running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Conv + BN pair behind a layer id, or the stem pair; `fc` has none.
    pub(crate) fn conv_bn_mut(
        &mut self,
        id: LayerId,
    ) -> Option<(&mut Conv2d<T>, &mut BatchNorm2d<T>)> {
        match id {
            LayerId::Stem => Some((&mut self.stem_conv, &mut self.stem_bn)),
            LayerId::Downsample { stage } => {
                let s = self.stages.get_mut(stage)?;
                Some((&mut s.down_conv, &mut s.down_bn))
            }
            LayerId::Conv { stage, block, index } => {
                let b = self.stages.get_mut(stage)?.blocks.get_mut(block)?;
                match index {
                    1 => Some((&mut b.conv1, &mut b.bn1)),
                    2 => Some((&mut b.conv2, &mut b.bn2)),
                    3 => Some((&mut b.conv3, &mut b.bn3)),
                    _ => None,
                }
            }
            LayerId::Classifier => None,
        }
    }

    pub(crate) fn conv_bn(&self, id: LayerId) -> Option<(&Conv2d<T>, &BatchNorm2d<T>)> {
        match id {
            LayerId::Stem => Some((&self.stem_conv, &self.stem_bn)),
            LayerId::Downsample { stage } => {
                let s = self.stages.get(stage)?;
                Some((&s.down_conv, &s.down_bn))
            }
            LayerId::Conv { stage, block, index } => {
                let b = self.stages.get(stage)?.blocks.get(block)?;
                match index {
                    1 => Some((&b.conv1, &b.bn1)),
                    2 => Some((&b.conv2, &b.bn2)),
                    3 => Some((&b.conv3, &b.bn3)),
                    _ => None,
                }
            }
            LayerId::Classifier => None,
        }
    }
}
