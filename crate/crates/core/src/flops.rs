//! Analytical cost model.
//!
//! LLM prefill cost is `2 * N * L` for `N` dense parameters and `L` vision
//! tokens. The attention term, quadratic in `L`, is left out: at `L <= 576`
//! and width 4096 it stays under 2% of the total. Text tokens are left out too,
//! since only the vision-token count varies between the configurations compared.

use std::fmt::{self, Write as _};

use crate::fusion::{layer_shapes, FusionConfig, LayerShape, ProjectorKind};

/// Dense parameter count of a 7B-class LLM.
pub const DEFAULT_LLM_PARAMS: u64 = 6_700_000_000;

/// `(k, E)` pairs of the kernel-size ablation.
pub const TABLE4_FUSIONS: [(usize, usize); 7] =
    [(1, 1), (2, 1), (2, 2), (4, 4), (4, 8), (8, 16), (8, 32)];

pub fn token_count(config: &FusionConfig) -> u64 {
    config.token_count() as u64
}

pub fn llm_prefill_flops(n_params: u64, n_vision_tokens: u64) -> u64 {
    2 * n_params * n_vision_tokens
}

/// Sums `2 * MACs + bias adds` over `layers`.
pub fn layer_flops(layers: &[LayerShape]) -> u64 {
    layers.iter().map(LayerShape::flops).sum()
}

pub fn layer_params(layers: &[LayerShape]) -> u64 {
    layers.iter().map(LayerShape::param_count).sum()
}

pub fn projector_flops(config: &FusionConfig, kind: ProjectorKind) -> u64 {
    layer_flops(&layer_shapes(config, kind))
}

pub fn projector_params(config: &FusionConfig, kind: ProjectorKind) -> u64 {
    layer_params(&layer_shapes(config, kind))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub kind: ProjectorKind,
    pub kernel: usize,
    pub tokens_per_window: usize,
    pub grid: (usize, usize),
    pub vision_tokens: u64,
    pub llm_params: u64,
    pub llm_prefill_flops: u64,
    pub projector_flops: u64,
    pub projector_params: u64,
    /// Vision tokens relative to the unfused `H1 * W1` grid.
    pub ratio_to_baseline: f64,
}

impl FlopsReport {
    pub fn new(config: &FusionConfig, kind: ProjectorKind, llm_params: u64) -> Self {
        let vision_tokens = match kind {
            ProjectorKind::Stf => token_count(config),
            _ => ((config.grid_h / 2) * (config.grid_w / 2)) as u64,
        };
        let baseline = config.baseline_token_count() as u64;
        Self {
            kind,
            kernel: config.kernel,
            tokens_per_window: config.tokens_per_window,
            grid: (config.grid_h, config.grid_w),
            vision_tokens,
            llm_params,
            llm_prefill_flops: llm_prefill_flops(llm_params, vision_tokens),
            projector_flops: projector_flops(config, kind),
            projector_params: projector_params(config, kind),
            ratio_to_baseline: vision_tokens as f64 / baseline as f64,
        }
    }

    pub fn tflops(&self) -> f64 {
        self.llm_prefill_flops as f64 / 1e12
    }

    pub const CSV_HEADER: &'static str = "k,E,tokens,tflops,ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4}",
            self.kernel,
            self.tokens_per_window,
            self.vision_tokens,
            self.tflops(),
            self.ratio_to_baseline
        )
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} k={} E={}: {} tokens, {:.2} TFLOPs, projector {:.3} GFLOPs / {} params",
            self.kind,
            self.kernel,
            self.tokens_per_window,
            self.vision_tokens,
            self.tflops(),
            self.projector_flops as f64 / 1e9,
            self.projector_params
        )
    }
}

/// Reports for every kernel-size ablation row, built on `base` with
/// `stf_hidden` following `k`.
pub fn table4_grid(base: &FusionConfig, llm_params: u64) -> Vec<FlopsReport> {
    TABLE4_FUSIONS
        .iter()
        .map(|&(k, e)| {
            let config = base.clone().with_fusion(k, e);
            FlopsReport::new(&config, ProjectorKind::Stf, llm_params)
        })
        .collect()
}

pub fn render_csv(reports: &[FlopsReport]) -> String {
    let mut out = String::from(FlopsReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Aligned plain-text table.
pub fn render_table(reports: &[FlopsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>3} {:>3} {:>7} {:>8} {:>7} {:>14} {:>14}",
        "projector", "k", "E", "tokens", "TFLOPs", "ratio", "proj GFLOPs", "proj params"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:>3} {:>3} {:>7} {:>8.2} {:>7.3} {:>14.3} {:>14}",
            r.kind.name(),
            r.kernel,
            r.tokens_per_window,
            r.vision_tokens,
            r.tflops(),
            r.ratio_to_baseline,
            r.projector_flops as f64 / 1e9,
            r.projector_params
        );
    }
    out
}
