use std::fmt;

use super::config::{Activation, FusionConfig, ProjectorKind};
use super::params::{LayerId, ModuleParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Feature maps tapped from selected encoder blocks, ascending block index,
/// each `H1 x W1 x C1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    block_indices: Vec<u32>,
    maps: Vec<Tensor>,
}

impl FeatureStack {
    pub fn new(block_indices: Vec<u32>, maps: Vec<Tensor>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Config("feature stack needs at least one map".into()));
        }
        if block_indices.len() != maps.len() {
            return Err(Error::Config(format!(
                "{} block indices for {} maps",
                block_indices.len(),
                maps.len()
            )));
        }
        let dims = maps[0].dims3("feature stack")?;
        for (i, m) in maps.iter().enumerate() {
            if m.dims3("feature stack")? != dims {
                return Err(Error::Config(format!(
                    "map {i} has shape {:?}, expected {:?}",
                    m.shape(),
                    maps[0].shape()
                )));
            }
        }
        Ok(Self {
            block_indices,
            maps,
        })
    }

    pub fn block_indices(&self) -> &[u32] {
        &self.block_indices
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<Tensor> {
        self.maps
    }

    pub fn num_blocks(&self) -> usize {
        self.maps.len()
    }

    /// `(H, W, C)` shared by all maps.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.maps[0].dims3("feature stack").expect("validated on construction")
    }

    /// Map of the deepest selected block.
    pub fn last(&self) -> &Tensor {
        self.maps.last().expect("non-empty")
    }

    /// Errors unless the stack holds exactly `M` maps of `H1 x W1 x C1`.
    pub fn check(&self, config: &FusionConfig) -> Result<()> {
        if self.num_blocks() != config.num_blocks {
            return Err(Error::Config(format!(
                "feature stack has {} maps, config expects M = {}",
                self.num_blocks(),
                config.num_blocks
            )));
        }
        self.check_map_shape(config)
    }

    fn check_map_shape(&self, config: &FusionConfig) -> Result<()> {
        let expected = (config.grid_h, config.grid_w, config.encoder_width);
        if self.dims() != expected {
            return Err(Error::Config(format!(
                "feature maps are {:?}, config expects {:?}",
                self.dims(),
                expected
            )));
        }
        Ok(())
    }
}

/// Which path produced a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Stf,
    AvgPool,
    TokenConcat,
    Identity,
}

impl From<ProjectorKind> for Provenance {
    fn from(kind: ProjectorKind) -> Self {
        match kind {
            ProjectorKind::Stf => Self::Stf,
            ProjectorKind::AvgPool => Self::AvgPool,
            ProjectorKind::TokenConcat => Self::TokenConcat,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stf => "stf",
            Self::AvgPool => "avgpool",
            Self::TokenConcat => "tokenconcat",
            Self::Identity => "identity",
        })
    }
}

/// `L x width` tokens bound for the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Tensor,
    provenance: Provenance,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, provenance: Provenance) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::Config(format!(
                "token sequence must be rank 2, got {:?}",
                tokens.shape()
            )));
        }
        Ok(Self { tokens, provenance })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn data(&self) -> &[f32] {
        self.tokens.data()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.data()[i * w..(i + 1) * w]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }
}

fn activate<T: Element>(tape: &mut Tape<LayerId, T>, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Gelu => tape.gelu(x),
        Activation::Identity => x,
    }
}

fn conv_act<T: Element>(
    tape: &mut Tape<LayerId, T>,
    x: Var,
    params: &ModuleParams<T>,
    layer: LayerId,
    stride: usize,
    config: &FusionConfig,
) -> Result<Var> {
    let y = tape.conv2d(x, params, layer, stride)?;
    Ok(activate(tape, y, config.activation))
}

fn require_kind<T: Element>(params: &ModuleParams<T>, kind: ProjectorKind) -> Result<()> {
    if params.kind() != kind {
        return Err(Error::Config(format!(
            "expected {kind} parameters, got {}",
            params.kind()
        )));
    }
    Ok(())
}

/// Records one conv layer of `params` plus the configured activation.
pub fn record_layer<T: Element>(
    tape: &mut Tape<LayerId, T>,
    x: Var,
    params: &ModuleParams<T>,
    layer: LayerId,
    config: &FusionConfig,
) -> Result<Var> {
    let stride = if layer == LayerId::StfConv1 {
        config.kernel
    } else {
        1
    };
    conv_act(tape, x, params, layer, stride, config)
}

/// Records multi-block fusion: concat -> 1x1 conv -> act -> 1x1 conv -> act.
pub fn record_mbtf<T: Element>(
    tape: &mut Tape<LayerId, T>,
    maps: &[Var],
    params: &ModuleParams<T>,
    config: &FusionConfig,
) -> Result<Var> {
    if maps.len() != config.num_blocks {
        return Err(Error::Config(format!(
            "multi-block fusion takes M = {} maps, got {}",
            config.num_blocks,
            maps.len()
        )));
    }
    let x = tape.concat_channels(maps)?;
    let x = conv_act(tape, x, params, LayerId::MbtfConv1, 1, config)?;
    conv_act(tape, x, params, LayerId::MbtfConv2, 1, config)
}

/// Records spatial fusion: k x k stride-k conv -> act -> two 1x1 convs with
/// act -> split each position into E tokens of width C3.
pub fn record_stf<T: Element>(
    tape: &mut Tape<LayerId, T>,
    fused: Var,
    params: &ModuleParams<T>,
    config: &FusionConfig,
) -> Result<Var> {
    let x = conv_act(tape, fused, params, LayerId::StfConv1, config.kernel, config)?;
    let x = conv_act(tape, x, params, LayerId::StfConv2, 1, config)?;
    let x = conv_act(tape, x, params, LayerId::StfConv3, 1, config)?;
    Ok(tape.reshape_tokens(x, config.tokens_per_window)?)
}

fn record_mlp_head<T: Element>(
    tape: &mut Tape<LayerId, T>,
    x: Var,
    params: &ModuleParams<T>,
    layers: [LayerId; 2],
    config: &FusionConfig,
) -> Result<Var> {
    let x = conv_act(tape, x, params, layers[0], 1, config)?;
    let x = conv_act(tape, x, params, layers[1], 1, config)?;
    Ok(tape.reshape_tokens(x, 1)?)
}

/// Records the projector selected by `params.kind()` on maps already placed
/// on the tape (ascending block order). Baselines read only the last map.
pub fn record_projector<T: Element>(
    tape: &mut Tape<LayerId, T>,
    maps: &[Var],
    params: &ModuleParams<T>,
    config: &FusionConfig,
) -> Result<Var> {
    config.validate()?;
    params.check(config)?;
    let last = *maps
        .last()
        .ok_or_else(|| Error::Config("projector needs at least one feature map".into()))?;
    match params.kind() {
        ProjectorKind::Stf => {
            let fused = record_mbtf(tape, maps, params, config)?;
            record_stf(tape, fused, params, config)
        }
        ProjectorKind::AvgPool => {
            let pooled = tape.avgpool2x2(last)?;
            let layers = [LayerId::AvgPoolFc1, LayerId::AvgPoolFc2];
            record_mlp_head(tape, pooled, params, layers, config)
        }
        ProjectorKind::TokenConcat => {
            let packed = tape.space_to_depth(last, 2)?;
            let layers = [LayerId::ConcatFc1, LayerId::ConcatFc2];
            record_mlp_head(tape, packed, params, layers, config)
        }
    }
}

/// Checks `stack` against what projector `kind` consumes under `config`.
pub fn check_stack(stack: &FeatureStack, config: &FusionConfig, kind: ProjectorKind) -> Result<()> {
    match kind {
        ProjectorKind::Stf => stack.check(config),
        _ => stack.check_map_shape(config),
    }
}

/// Multi-block fusion of an `M`-map stack into one `H1 x W1 x C1` map.
pub fn mbtf_forward(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
) -> Result<Tensor> {
    require_kind(params, ProjectorKind::Stf)?;
    stack.check(config)?;
    let mut tape = Tape::new();
    let inputs: Vec<Var> = stack.maps().iter().map(|m| tape.input(m.clone())).collect();
    let out = record_mbtf(&mut tape, &inputs, params, config)?;
    Ok(tape.value(out).clone())
}

/// Spatial fusion of an `H1 x W1 x C1` map into `(H1/k)(W1/k)E` tokens.
pub fn stf_forward(
    fused: &Tensor,
    params: &ModuleParams,
    config: &FusionConfig,
) -> Result<TokenSequence> {
    require_kind(params, ProjectorKind::Stf)?;
    config.validate()?;
    let mut tape = Tape::new();
    let x = tape.input(fused.clone());
    let out = record_stf(&mut tape, x, params, config)?;
    TokenSequence::new(tape.value(out).clone(), Provenance::Stf)
}

fn run_kind(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
    kind: ProjectorKind,
) -> Result<TokenSequence> {
    require_kind(params, kind)?;
    check_stack(stack, config, kind)?;
    let mut tape = Tape::new();
    let maps: Vec<Var> = stack.maps().iter().map(|m| tape.input(m.clone())).collect();
    let out = record_projector(&mut tape, &maps, params, config)?;
    TokenSequence::new(tape.value(out).clone(), kind.into())
}

/// Multi-block fusion followed by spatial fusion.
pub fn projector_forward(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
) -> Result<TokenSequence> {
    run_kind(stack, params, config, ProjectorKind::Stf)
}

/// Last block -> 2x2 mean pooling -> two-layer pointwise MLP.
pub fn avgpool_projector(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
) -> Result<TokenSequence> {
    run_kind(stack, params, config, ProjectorKind::AvgPool)
}

/// Last block -> 2x2 space-to-depth -> two-layer pointwise MLP.
pub fn tokenconcat_projector(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
) -> Result<TokenSequence> {
    run_kind(stack, params, config, ProjectorKind::TokenConcat)
}

/// Runs whichever projector `params` belongs to.
pub fn run_projector(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
) -> Result<TokenSequence> {
    run_kind(stack, params, config, params.kind())
}
