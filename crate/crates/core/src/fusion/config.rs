use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Nonlinearity applied after every projector conv.
///
/// `Identity` exists for linear-path tests and gradient probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Hyperparameters of the fusion projector and its baselines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    /// Number of blocks in the vision encoder.
    pub encoder_depth: usize,
    /// Number of evenly sampled blocks fed to multi-block fusion (M).
    pub num_blocks: usize,
    /// Encoder token grid height (H1).
    pub grid_h: usize,
    /// Encoder token grid width (W1).
    pub grid_w: usize,
    /// Encoder channel width (C1).
    pub encoder_width: usize,
    /// Spatial fusion kernel and stride (k).
    pub kernel: usize,
    /// Tokens emitted per fused window (E).
    pub tokens_per_window: usize,
    /// LLM embedding width (C3).
    pub llm_width: usize,
    pub mbtf_hidden: usize,
    pub stf_hidden: usize,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl FusionConfig {
    /// LLaVA-1.5-7B sized projector: CLIP ViT-L/14 at 336px into a 4096-wide LLM.
    pub fn paper() -> Self {
        Self {
            encoder_depth: 24,
            num_blocks: 8,
            grid_h: 24,
            grid_w: 24,
            encoder_width: 1024,
            kernel: 2,
            tokens_per_window: 1,
            llm_width: 4096,
            mbtf_hidden: 4096,
            stf_hidden: 16384,
            seed: 0,
            activation: Activation::Gelu,
        }
    }

    /// Tiny shapes for gradient checks.
    pub fn tiny() -> Self {
        Self {
            encoder_depth: 4,
            num_blocks: 2,
            grid_h: 4,
            grid_w: 4,
            encoder_width: 4,
            kernel: 2,
            tokens_per_window: 1,
            llm_width: 16,
            mbtf_hidden: 8,
            stf_hidden: 64,
            seed: 0,
            activation: Activation::Gelu,
        }
    }

    /// Small shapes for the toy regression run.
    pub fn toy() -> Self {
        Self {
            encoder_depth: 4,
            num_blocks: 2,
            grid_h: 8,
            grid_w: 8,
            encoder_width: 8,
            kernel: 2,
            tokens_per_window: 1,
            llm_width: 32,
            mbtf_hidden: 16,
            stf_hidden: 128,
            seed: 0,
            activation: Activation::Gelu,
        }
    }

    /// Sets `k` and `E`; the hidden width follows as `4 * k^2 * C1`.
    pub fn with_fusion(mut self, kernel: usize, tokens_per_window: usize) -> Self {
        self.kernel = kernel;
        self.tokens_per_window = tokens_per_window;
        self.stf_hidden = 4 * kernel * kernel * self.encoder_width;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Channel width after the k x k fusion conv, `k^2 * C1`.
    pub fn fused_width(&self) -> usize {
        self.kernel * self.kernel * self.encoder_width
    }

    /// Vision tokens handed to the LLM, `(H1/k) * (W1/k) * E`.
    pub fn token_count(&self) -> usize {
        (self.grid_h / self.kernel) * (self.grid_w / self.kernel) * self.tokens_per_window
    }

    pub fn baseline_token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn block_indices(&self) -> Result<Vec<usize>> {
        select_block_indices(self.encoder_depth, self.num_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        select_block_indices(self.encoder_depth, self.num_blocks)?;
        for (name, v) in [
            ("H1", self.grid_h),
            ("W1", self.grid_w),
            ("C1", self.encoder_width),
            ("C3", self.llm_width),
            ("mbtf_hidden", self.mbtf_hidden),
            ("stf_hidden", self.stf_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.kernel == 0 {
            return fail("k must be at least 1".into());
        }
        if self.grid_h % self.kernel != 0 || self.grid_w % self.kernel != 0 {
            return fail(format!(
                "k = {} must divide the {}x{} token grid",
                self.kernel, self.grid_h, self.grid_w
            ));
        }
        let windows = self.kernel * self.kernel;
        if self.tokens_per_window == 0 || self.tokens_per_window > windows {
            return fail(format!(
                "E = {} must lie in 1..={windows} for k = {}",
                self.tokens_per_window, self.kernel
            ));
        }
        Ok(())
    }
}

/// Evenly spaced 1-based block indices `d, 2d, ..., depth` with `d = depth / m`.
pub fn select_block_indices(encoder_depth: usize, num_blocks: usize) -> Result<Vec<usize>> {
    if num_blocks == 0 || num_blocks > encoder_depth {
        return Err(Error::Config(format!(
            "M = {num_blocks} must lie in 1..={encoder_depth}"
        )));
    }
    if encoder_depth % num_blocks != 0 {
        return Err(Error::Config(format!(
            "encoder depth {encoder_depth} is not divisible by M = {num_blocks}"
        )));
    }
    let step = encoder_depth / num_blocks;
    Ok((1..=num_blocks).map(|i| i * step).collect())
}

/// Which projector maps encoder features to LLM tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ProjectorKind {
    /// Multi-block fusion followed by spatial fusion.
    #[default]
    Stf,
    /// 2x2 mean pooling of the last block, then a two-layer MLP.
    AvgPool,
    /// 2x2 space-to-depth of the last block, then a two-layer MLP.
    TokenConcat,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 3] = [Self::Stf, Self::AvgPool, Self::TokenConcat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stf => "stf",
            Self::AvgPool => "avgpool",
            Self::TokenConcat => "tokenconcat",
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projector '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_indices() {
        assert_eq!(
            select_block_indices(24, 8).unwrap(),
            vec![3, 6, 9, 12, 15, 18, 21, 24]
        );
        assert_eq!(select_block_indices(24, 1).unwrap(), vec![24]);
        assert_eq!(select_block_indices(12, 4).unwrap(), vec![3, 6, 9, 12]);
        assert!(select_block_indices(24, 5).is_err());
        assert!(select_block_indices(24, 0).is_err());
        assert!(select_block_indices(4, 8).is_err());
    }

    #[test]
    fn fused_width_matches_llm_width_at_defaults() {
        let c = FusionConfig::paper();
        assert_eq!(c.fused_width(), 4096);
        assert_eq!(c.fused_width(), c.llm_width);
        assert_eq!(c.stf_hidden, 4 * c.fused_width());
        assert_eq!(c.clone().with_fusion(2, 1), c);
    }

    #[test]
    fn validation() {
        assert!(FusionConfig::paper().validate().is_ok());
        assert!(FusionConfig::paper().with_fusion(3, 1).validate().is_ok());
        assert!(FusionConfig::paper().with_fusion(5, 1).validate().is_err());
        assert!(FusionConfig::paper().with_fusion(2, 5).validate().is_err());
        assert!(FusionConfig::paper().with_fusion(2, 0).validate().is_err());
        assert!(FusionConfig::paper().with_fusion(0, 1).validate().is_err());
        let mut c = FusionConfig::paper();
        c.num_blocks = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn projector_names_round_trip() {
        for k in ProjectorKind::ALL {
            assert_eq!(k.name().parse::<ProjectorKind>().unwrap(), k);
        }
        assert!("mlp".parse::<ProjectorKind>().is_err());
    }
}
