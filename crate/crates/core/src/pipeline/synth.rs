//! Synthetic encoder features with spatial redundancy.
//!
//! Each map is a sum of four low-frequency 2-D cosine modes with per-channel
//! amplitudes plus white noise, standardized to mean 0 and std 1. Neighbouring
//! positions are therefore strongly correlated, which is what spatial fusion
//! exploits.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::fusion::{FeatureStack, FusionConfig};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const MODES: usize = 4;
/// Highest spatial frequency of a mode, in cycles across the grid.
pub const MAX_CYCLES: f64 = 2.0;
pub const NOISE_STD: f64 = 0.5;

/// Deterministic `M`-map stack shaped by `config`.
pub fn gen_features(seed: u64, config: &FusionConfig) -> Result<FeatureStack> {
    Ok(gen_batch(seed, config, 1)?.remove(0))
}

/// `n` stacks drawn one after another from the same stream; the first equals
/// `gen_features(seed, config)`.
pub fn gen_batch(seed: u64, config: &FusionConfig, n: usize) -> Result<Vec<FeatureStack>> {
    config.validate()?;
    let (h, w, c) = (config.grid_h, config.grid_w, config.encoder_width);
    let mut rng = rng::stream(seed, Stream::Features);
    let indices: Vec<u32> = config.block_indices()?.into_iter().map(|i| i as u32).collect();
    (0..n)
        .map(|_| {
            let maps = indices.iter().map(|_| gen_map(&mut rng, h, w, c)).collect();
            FeatureStack::new(indices.clone(), maps)
        })
        .collect()
}

fn gen_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor {
    let mut basis = Vec::with_capacity(MODES);
    let mut amps = Vec::with_capacity(MODES);
    for _ in 0..MODES {
        let fy = rng.random_range(0.0..MAX_CYCLES);
        let fx = rng.random_range(0.0..MAX_CYCLES);
        let phase = rng.random_range(0.0..TAU);
        let wave: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                (TAU * (fy * y / h as f64 + fx * x / w as f64) + phase).cos()
            })
            .collect();
        let a: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        basis.push(wave);
        amps.push(a);
    }
    let mut values = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        for ch in 0..c {
            let smooth: f64 = (0..MODES).map(|m| amps[m][ch] * basis[m][p]).sum();
            let noise: f64 = StandardNormal.sample(rng);
            values.push(smooth + NOISE_STD * noise);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    let data = values.iter().map(|v| ((v - mean) * scale) as f32).collect();
    Tensor::new(vec![h, w, c], data).expect("length matches shape")
}

/// Cosine similarity of two channel vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}
