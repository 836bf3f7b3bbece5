//! Central-difference verification of the hand-written backward passes.
//!
//! The probe objective is the sum of squares of the module output,
//! accumulated in `f64`. Each parameter block is checked on a seeded subsample
//! of at least [`MIN_SAMPLES`] entries (all entries when the block is smaller).
//!
//! Probes run the production kernels with `f64` storage by default. With
//! `f32` storage the rounding of stored activations alone perturbs the loss by
//! about `1e-7 * |loss|`, which swamps central differences of small gradients
//! at `eps = 1e-3`; [`Precision::F32`] is kept for inspecting that floor.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{
    layer_shapes, record_layer, record_mbtf, record_projector, record_stf, FusionConfig,
    LayerId, ModuleParams, ProjectorKind,
};
use crate::rng::{self, Stream};
use crate::tensor::{Element, Tensor};

pub const MIN_SAMPLES: usize = 200;
pub const DEFAULT_EPSILON: f32 = 1e-3;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;
/// Inputs whose pre-activations come this close to a sensitive point of
/// GeLU are redrawn.
pub const PREACTIVATION_MARGIN: f32 = 1e-4;
/// Zero, and the minimum of GeLU where its slope vanishes.
pub const GELU_SENSITIVE_POINTS: [f64; 2] = [0.0, -0.751_791_524_693_564_5];
const MAX_REDRAWS: u64 = 64;

/// Storage type used while probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("unknown precision '{s}'"))),
        }
    }
}

/// What a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    /// One conv layer plus its activation, fed a random input.
    Layer(LayerId),
    /// Multi-block fusion on a random stack.
    Mbtf,
    /// Spatial fusion on a random fused map.
    Stf,
    /// A whole projector on a random stack.
    Projector(ProjectorKind),
}

impl CheckTarget {
    /// The five fusion layers, the two fusion stages and all three projectors.
    pub fn all() -> Vec<CheckTarget> {
        let mut v: Vec<_> = LayerId::FUSION.into_iter().map(CheckTarget::Layer).collect();
        v.extend([CheckTarget::Mbtf, CheckTarget::Stf]);
        v.extend(ProjectorKind::ALL.into_iter().map(CheckTarget::Projector));
        v
    }

    /// The five learnable fusion layers and the composed fusion projector.
    pub fn fusion_suite() -> Vec<CheckTarget> {
        let mut v: Vec<_> = LayerId::FUSION.into_iter().map(CheckTarget::Layer).collect();
        v.push(CheckTarget::Projector(ProjectorKind::Stf));
        v
    }

    fn kind(self) -> ProjectorKind {
        match self {
            CheckTarget::Layer(LayerId::AvgPoolFc1 | LayerId::AvgPoolFc2) => ProjectorKind::AvgPool,
            CheckTarget::Layer(LayerId::ConcatFc1 | LayerId::ConcatFc2) => ProjectorKind::TokenConcat,
            CheckTarget::Projector(k) => k,
            _ => ProjectorKind::Stf,
        }
    }

    fn layers(self, config: &FusionConfig) -> Vec<LayerId> {
        match self {
            CheckTarget::Layer(id) => vec![id],
            CheckTarget::Mbtf => vec![LayerId::MbtfConv1, LayerId::MbtfConv2],
            CheckTarget::Stf => vec![LayerId::StfConv1, LayerId::StfConv2, LayerId::StfConv3],
            CheckTarget::Projector(k) => layer_shapes(config, k).iter().map(|s| s.id).collect(),
        }
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Layer(id) => write!(f, "{id}"),
            CheckTarget::Mbtf => f.write_str("mbtf"),
            CheckTarget::Stf => f.write_str("stf"),
            CheckTarget::Projector(k) => write!(f, "projector:{k}"),
        }
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mbtf" => Ok(CheckTarget::Mbtf),
            "stf" => Ok(CheckTarget::Stf),
            _ => {
                if let Some(kind) = s.strip_prefix("projector:") {
                    return kind.parse().map(CheckTarget::Projector);
                }
                s.parse::<LayerId>().map(CheckTarget::Layer).map_err(|_| {
                    Error::Config(format!(
                        "unknown check target {s:?} (a layer name, mbtf, stf or projector:<kind>)"
                    ))
                })
            }
        }
    }
}

/// A differentiable slice of the probe: a layer's weight or bias, or an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Weight(LayerId),
    Bias(LayerId),
    Input(usize),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Weight(id) => write!(f, "{id}.weight"),
            Block::Bias(id) => write!(f, "{id}.bias"),
            Block::Input(i) => write!(f, "input[{i}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: Block,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub target: CheckTarget,
    pub seed: u64,
    pub epsilon: f32,
    pub threshold: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub const CSV_HEADER: &'static str =
        "target,seed,block,checked,max_rel_error,worst_index,analytic,numeric,pass";

    pub fn csv_rows(&self) -> Vec<String> {
        self.blocks
            .iter()
            .map(|b| {
                format!(
                    "{},{},{},{},{:.3e},{},{:.6e},{:.6e},{}",
                    self.target,
                    self.seed,
                    b.block,
                    b.checked,
                    b.max_rel_error,
                    b.worst_index,
                    b.worst_analytic,
                    b.worst_numeric,
                    b.passed
                )
            })
            .collect()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} (seed {}, eps {:e}, threshold {:e}): {}",
            self.target,
            self.seed,
            self.epsilon,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<22} n={:<4} max_rel={:.3e} worst=#{} ({:.6e} vs {:.6e}) {}",
                b.block.to_string(),
                b.checked,
                b.max_rel_error,
                b.worst_index,
                b.worst_analytic,
                b.worst_numeric,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A module under test together with the inputs it is probed on.
#[derive(Debug, Clone)]
pub struct Probe<T: Element = f64> {
    pub target: CheckTarget,
    pub config: FusionConfig,
    pub params: ModuleParams<T>,
    pub inputs: Vec<Tensor<T>>,
}

impl<T: Element> Probe<T> {
    /// Builds the module with seeded params and draws N(0, 1) inputs, redrawing
    /// until no pre-activation lies within [`PREACTIVATION_MARGIN`] of a
    /// point in [`GELU_SENSITIVE_POINTS`].
    pub fn new(target: CheckTarget, config: &FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = config.clone().with_seed(seed);
        let params = ModuleParams::init(&config, target.kind()).cast::<T>();
        let shapes = input_shapes(target, &config);
        let mut rng = rng::stream(seed, Stream::GradCheck);
        for _ in 0..MAX_REDRAWS {
            let inputs: Vec<Tensor<T>> = shapes
                .iter()
                .map(|s| {
                    Tensor::from_fn(s.clone(), |_| {
                        T::from_f64(StandardNormal.sample(&mut rng))
                    })
                })
                .collect();
            if inputs.iter().any(|t| t.data().contains(&T::ZERO)) {
                continue;
            }
            let probe = Probe {
                target,
                config: config.clone(),
                params: params.clone(),
                inputs,
            };
            let (tape, _, _) = probe.record(&probe.params, &probe.inputs)?;
            let margin = PREACTIVATION_MARGIN as f64;
            let sensitive = tape.preactivations().any(|t| {
                t.data().iter().any(|z| {
                    GELU_SENSITIVE_POINTS
                        .iter()
                        .any(|p| (z.to_f64() - p).abs() < margin)
                })
            });
            if !sensitive {
                return Ok(probe);
            }
        }
        Err(Error::Numeric(format!(
            "{target}: no input draw kept pre-activations away from sensitive GeLU points"
        )))
    }

    fn record(
        &self,
        params: &ModuleParams<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(Tape<LayerId, T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let config = &self.config;
        let (vars, out) = match self.target {
            CheckTarget::Layer(id) => {
                let x = tape.input(inputs[0].clone());
                let y = record_layer(&mut tape, x, params, id, config)?;
                (vec![x], y)
            }
            CheckTarget::Mbtf => {
                let xs: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
                let y = record_mbtf(&mut tape, &xs, params, config)?;
                (xs, y)
            }
            CheckTarget::Stf => {
                let x = tape.input(inputs[0].clone());
                let y = record_stf(&mut tape, x, params, config)?;
                (vec![x], y)
            }
            CheckTarget::Projector(_) => {
                let xs: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
                let y = record_projector(&mut tape, &xs, params, config)?;
                (xs, y)
            }
        };
        Ok((tape, vars, out))
    }

    /// Sum of squared outputs.
    pub fn loss(&self, params: &ModuleParams<T>, inputs: &[Tensor<T>]) -> Result<f64> {
        let (tape, _, out) = self.record(params, inputs)?;
        let loss: f64 = tape.value(out).data().iter().map(|v| v.to_f64().powi(2)).sum();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "{}: probe loss is {loss}",
                self.target
            )));
        }
        Ok(loss)
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut blocks = Vec::new();
        for id in self.target.layers(&self.config) {
            blocks.push(Block::Weight(id));
            blocks.push(Block::Bias(id));
        }
        blocks.extend((0..self.inputs.len()).map(Block::Input));
        blocks
    }

    /// Analytic gradient of every block, in [`Probe::blocks`] order.
    pub fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut params = self.params.clone();
        params.zero_grad();
        let (mut tape, vars, out) = self.record(&params, &self.inputs)?;
        let two = T::from_f64(2.0);
        let grad_out: Vec<T> = tape.value(out).data().iter().map(|&v| two * v).collect();
        tape.backward(out, &grad_out, &mut params)?;
        self.blocks()
            .into_iter()
            .map(|b| {
                let values: Vec<f64> = match b {
                    Block::Weight(id) | Block::Bias(id) => {
                        let layer = params.get(id).expect("layer in probe");
                        let t = if matches!(b, Block::Weight(_)) {
                            &layer.weight
                        } else {
                            &layer.bias
                        };
                        match t.grad() {
                            Some(g) => g.iter().map(|v| v.to_f64()).collect(),
                            None => vec![0.0; t.len()],
                        }
                    }
                    Block::Input(i) => match tape.grad(vars[i]) {
                        Some(g) => g.iter().map(|v| v.to_f64()).collect(),
                        None => vec![0.0; self.inputs[i].len()],
                    },
                };
                Ok(values)
            })
            .collect()
    }

    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::Weight(id) => self.params.get(id).map_or(0, |l| l.weight.len()),
            Block::Bias(id) => self.params.get(id).map_or(0, |l| l.bias.len()),
            Block::Input(i) => self.inputs[i].len(),
        }
    }

    /// Central difference of the loss with respect to one entry.
    ///
    /// The denominator is the realized step in storage precision, not `2 * eps`.
    pub fn numeric(&self, block: Block, index: usize, epsilon: f32) -> Result<f64> {
        let mut params = self.params.clone();
        let mut inputs = self.inputs.clone();
        let base = *entry(&mut params, &mut inputs, block, index);
        let eps = T::from_f64(epsilon as f64);
        let plus = base + eps;
        let minus = base - eps;
        *entry(&mut params, &mut inputs, block, index) = plus;
        let f_plus = self.loss(&params, &inputs)?;
        *entry(&mut params, &mut inputs, block, index) = minus;
        let f_minus = self.loss(&params, &inputs)?;
        Ok((f_plus - f_minus) / (plus.to_f64() - minus.to_f64()))
    }
}

fn entry<'a, T: Element>(
    params: &'a mut ModuleParams<T>,
    inputs: &'a mut [Tensor<T>],
    block: Block,
    index: usize,
) -> &'a mut T {
    match block {
        Block::Weight(id) => &mut params.get_mut(id).expect("layer").weight.data_mut()[index],
        Block::Bias(id) => &mut params.get_mut(id).expect("layer").bias.data_mut()[index],
        Block::Input(i) => &mut inputs[i].data_mut()[index],
    }
}

fn input_shapes(target: CheckTarget, config: &FusionConfig) -> Vec<Vec<usize>> {
    let map = vec![config.grid_h, config.grid_w, config.encoder_width];
    match target {
        CheckTarget::Layer(id) => {
            let s = layer_shapes(config, target.kind())
                .into_iter()
                .find(|s| s.id == id)
                .expect("layer belongs to its projector");
            vec![vec![s.out_h * s.stride, s.out_w * s.stride, s.in_channels]]
        }
        CheckTarget::Stf => vec![map],
        CheckTarget::Mbtf | CheckTarget::Projector(ProjectorKind::Stf) => {
            vec![map; config.num_blocks]
        }
        CheckTarget::Projector(_) => vec![map],
    }
}

/// Seeded subsample of `len` indices, all of them when `len <= MIN_SAMPLES`.
pub fn sample_indices(len: usize, seed: u64, salt: u64) -> Vec<usize> {
    if len <= MIN_SAMPLES {
        return (0..len).collect();
    }
    let mut rng = rng::stream(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15), Stream::GradCheck);
    let mut idx = index::sample(&mut rng, len, MIN_SAMPLES).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares analytic and central-difference gradients for `target`, probing
/// in `f64` storage.
pub fn check_module(
    target: CheckTarget,
    config: &FusionConfig,
    seed: u64,
    epsilon: f32,
    threshold: f64,
) -> Result<GradReport> {
    check_module_with(target, config, seed, epsilon, threshold, Precision::F64)
}

pub fn check_module_with(
    target: CheckTarget,
    config: &FusionConfig,
    seed: u64,
    epsilon: f32,
    threshold: f64,
    precision: Precision,
) -> Result<GradReport> {
    match precision {
        Precision::F32 => check_probe(&Probe::<f32>::new(target, config, seed)?, seed, epsilon, threshold),
        Precision::F64 => check_probe(&Probe::<f64>::new(target, config, seed)?, seed, epsilon, threshold),
    }
}

pub fn check_probe<T: Element>(
    probe: &Probe<T>,
    seed: u64,
    epsilon: f32,
    threshold: f64,
) -> Result<GradReport> {
    let analytic = probe.analytic()?;
    let mut blocks = Vec::new();
    for (salt, (block, grads)) in probe.blocks().into_iter().zip(analytic).enumerate() {
        let indices = sample_indices(probe.block_len(block), seed, salt as u64);
        let numeric: Vec<f64> = indices
            .par_iter()
            .map(|&i| probe.numeric(block, i, epsilon))
            .collect::<Result<_>>()?;
        let mut report = BlockReport {
            block,
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            passed: true,
        };
        let mut first = true;
        for (&i, &n) in indices.iter().zip(&numeric) {
            let a = grads[i];
            let err = relative_error(a, n);
            if first || err > report.max_rel_error {
                first = false;
                report.max_rel_error = err;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
        report.passed = report.max_rel_error <= threshold;
        blocks.push(report);
    }
    Ok(GradReport {
        target: probe.target,
        seed,
        epsilon,
        threshold,
        blocks,
    })
}

/// Largest absolute gap between analytic and central-difference gradients
/// over `entries`, for each step size in `epsilons`.
pub fn epsilon_sweep<T: Element>(
    probe: &Probe<T>,
    entries: &[(Block, usize)],
    epsilons: &[f32],
) -> Result<Vec<(f32, f64)>> {
    let blocks = probe.blocks();
    let analytic = probe.analytic()?;
    epsilons
        .iter()
        .map(|&eps| {
            let mut worst = 0.0f64;
            for &(block, i) in entries {
                let b = blocks
                    .iter()
                    .position(|x| *x == block)
                    .ok_or_else(|| Error::Config(format!("{block} not in probe")))?;
                let n = probe.numeric(block, i, eps)?;
                worst = worst.max((analytic[b][i] - n).abs());
            }
            Ok((eps, worst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_parse_back() {
        for t in CheckTarget::all() {
            assert_eq!(t.to_string().parse::<CheckTarget>().unwrap(), t);
        }
        assert!("stf.conv9".parse::<CheckTarget>().is_err());
        assert_eq!(CheckTarget::fusion_suite().len(), 6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
    }

    #[test]
    fn subsample_is_seeded_and_sized() {
        assert_eq!(sample_indices(50, 1, 0), (0..50).collect::<Vec<_>>());
        let a = sample_indices(5000, 1, 2);
        assert_eq!(a.len(), MIN_SAMPLES);
        assert_eq!(a, sample_indices(5000, 1, 2));
        assert_ne!(a, sample_indices(5000, 2, 2));
    }

    #[test]
    fn probe_inputs_are_zero_free() {
        let probe: Probe = Probe::new(CheckTarget::Mbtf, &FusionConfig::tiny(), 0).unwrap();
        assert!(probe.inputs.iter().all(|t| !t.data().contains(&0.0)));
        assert_eq!(probe.inputs.len(), 2);
    }

    #[test]
    fn probe_preactivations_avoid_sensitive_points() {
        let config = FusionConfig::tiny();
        let probe: Probe = Probe::new(CheckTarget::Projector(ProjectorKind::Stf), &config, 3).unwrap();
        let tape = probe.record(&probe.params, &probe.inputs).unwrap().0;
        for t in tape.preactivations() {
            for z in t.data() {
                for p in GELU_SENSITIVE_POINTS {
                    assert!((z - p).abs() >= PREACTIVATION_MARGIN as f64);
                }
            }
        }
    }

    #[test]
    fn linear_probe_matches_to_1e5() {
        use crate::fusion::Activation;
        let config = FusionConfig::tiny().with_activation(Activation::Identity);
        for target in [
            CheckTarget::Layer(LayerId::StfConv1),
            CheckTarget::Projector(ProjectorKind::Stf),
        ] {
            let report = check_module(target, &config, 0, DEFAULT_EPSILON, 1e-5).unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn error_shrinks_quadratically_on_projector() {
        let config = FusionConfig::tiny();
        let probe: Probe = Probe::new(CheckTarget::Projector(ProjectorKind::Stf), &config, 0).unwrap();
        let entries: Vec<(Block, usize)> = probe
            .blocks()
            .into_iter()
            .flat_map(|b| sample_indices(probe.block_len(b), 0, 7).into_iter().take(20).map(move |i| (b, i)))
            .collect();
        let eps = [1e-2f32, 5e-3, 2.5e-3, 1.25e-3];
        let sweep = epsilon_sweep(&probe, &entries, &eps).unwrap();
        for w in sweep.windows(2) {
            let ratio = w[0].1 / w[1].1;
            assert!((3.0..5.0).contains(&ratio), "halving {} -> {}: ratio {ratio}", w[0].0, w[1].0);
        }
        let decade = epsilon_sweep(&probe, &entries, &[1e-2, 1e-3]).unwrap();
        let ratio = decade[0].1 / decade[1].1;
        assert!((70.0..130.0).contains(&ratio), "decade ratio {ratio}");
    }
}
