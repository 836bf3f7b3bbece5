//! Wall-clock timing of projector forward passes.

use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fusion::{run_projector, FeatureStack, FusionConfig, ModuleParams};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub samples: Vec<Duration>,
    pub tokens: usize,
}

impl BenchReport {
    fn sorted(&self) -> Vec<Duration> {
        let mut s = self.samples.clone();
        s.sort_unstable();
        s
    }

    /// Nearest-rank quantile, `q` in `[0, 1]`.
    pub fn quantile(&self, q: f64) -> Duration {
        let s = self.sorted();
        let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
        s[rank - 1]
    }

    pub fn median(&self) -> Duration {
        self.quantile(0.5)
    }

    pub fn p90(&self) -> Duration {
        self.quantile(0.9)
    }

    /// Sample standard deviation in seconds; zero for a single sample.
    pub fn std_dev(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let secs: Vec<f64> = self.samples.iter().map(Duration::as_secs_f64).collect();
        let mean = secs.iter().sum::<f64>() / n as f64;
        (secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn tokens_per_sec(&self) -> f64 {
        self.tokens as f64 / self.median().as_secs_f64()
    }

    pub const CSV_HEADER: &'static str = "reps,tokens,median_ms,p90_ms,std_ms,tokens_per_sec";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{:.1}",
            self.samples.len(),
            self.tokens,
            self.median().as_secs_f64() * 1e3,
            self.p90().as_secs_f64() * 1e3,
            self.std_dev() * 1e3,
            self.tokens_per_sec()
        )
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} reps, {} tokens: median {:.3} ms, p90 {:.3} ms, std {:.3} ms, {:.1} tokens/s",
            self.samples.len(),
            self.tokens,
            self.median().as_secs_f64() * 1e3,
            self.p90().as_secs_f64() * 1e3,
            self.std_dev() * 1e3,
            self.tokens_per_sec()
        )
    }
}

/// Times `reps` forward passes after `warmup` untimed ones.
pub fn bench(
    stack: &FeatureStack,
    params: &ModuleParams,
    config: &FusionConfig,
    reps: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    let mut tokens = 0;
    for _ in 0..warmup {
        tokens = run_projector(stack, params, config)?.len();
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = run_projector(stack, params, config)?;
        samples.push(start.elapsed());
        tokens = out.len();
    }
    Ok(BenchReport { samples, tokens })
}
