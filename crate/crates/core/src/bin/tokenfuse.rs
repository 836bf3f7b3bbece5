use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokenfuse::flops::{self, FlopsReport, DEFAULT_LLM_PARAMS};
use tokenfuse::fusion::{run_projector, FusionConfig, ModuleParams, ProjectorKind};
use tokenfuse::gradcheck::{self, CheckTarget, GradReport, Precision};
use tokenfuse::pipeline::config::{load_config, preset};
use tokenfuse::pipeline::{
    bench, fmap, gen_features, toy_train, FeatureSource, ReportFormat, RunConfig, TrainConfig,
};
use tokenfuse::{Error, FeatureStack, Result};

/// Vision-token fusion projectors: forward passes, FLOPs reports, gradient
/// checks and a toy training run.
#[derive(Parser)]
#[command(name = "tokenfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature stack as an FMAP1 file.
    GenFeatures {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a projector on a feature file or synthetic features.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value = "stf")]
        projector: ProjectorKind,
        /// Token output file (FMAP1, one map of 1 x L x C3).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Print LLM prefill cost over the kernel-size grid.
    Report {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_LLM_PARAMS)]
        llm_params: u64,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        /// `all`, `suite`, a layer name, `mbtf`, `stf` or `projector:<kind>`.
        #[arg(long, default_value = "suite")]
        target: String,
        /// First seed; seeds `seed .. seed + seeds` are checked.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
        epsilon: f32,
        #[arg(long, default_value_t = gradcheck::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// CSV report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a projector to a random linear map of pooled features.
    ToyTrain {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "stf")]
        projector: ProjectorKind,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// step,loss CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time projector forward passes.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value = "stf")]
        projector: ProjectorKind,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// `paper`, `tiny` or `toy`; each subcommand has its own default.
    #[arg(long)]
    preset: Option<String>,
    /// Flat `key = value` file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fusion kernel; the STF hidden width follows as 4 k^2 C1.
    #[arg(long)]
    k: Option<usize>,
    /// Tokens per fused window.
    #[arg(long)]
    e: Option<usize>,
    /// Parameter seed, overriding the config file.
    #[arg(long)]
    param_seed: Option<u64>,
}

impl ModelArgs {
    fn resolve(&self, default_preset: &str) -> Result<FusionConfig> {
        let mut config = preset(self.preset.as_deref().unwrap_or(default_preset))?;
        if let Some(path) = &self.config {
            config = load_config(path, config)?;
        }
        if let Some(k) = self.k {
            let e = self.e.unwrap_or(config.tokens_per_window);
            config = config.with_fusion(k, e);
        }
        if let Some(e) = self.e {
            config.tokens_per_window = e;
        }
        if let Some(seed) = self.param_seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SourceArgs {
    /// FMAP1 feature file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Synthetic feature seed (default 0 when no input is given).
    #[arg(long)]
    seed: Option<u64>,
}

fn load_stack(run: &RunConfig) -> Result<FeatureStack> {
    match &run.source {
        FeatureSource::File(path) => fmap::read_path(path),
        FeatureSource::Synthetic(seed) => gen_features(*seed, &run.fusion),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fmap::write_path(path, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenFeatures { model, seed, out } => {
            let config = model.resolve("paper")?;
            let stack = gen_features(seed, &config)?;
            fmap::write_path(&out, &fmap::encode(&stack)?)?;
            let (h, w, c) = stack.dims();
            println!(
                "wrote {} maps of {h}x{w}x{c} (blocks {:?}) to {}",
                stack.num_blocks(),
                stack.block_indices(),
                out.display()
            );
        }
        Command::Forward { model, source, projector, out, format } => {
            let run = RunConfig::new(model.resolve("paper")?, source.input, source.seed, out, format, 1)?;
            let stack = load_stack(&run)?;
            let params = ModuleParams::init(&run.fusion, projector);
            let tokens = run_projector(&stack, &params, &run.fusion)?;
            if !tokens.tensor().is_finite() {
                return Err(Error::Numeric(format!("{projector} produced non-finite tokens")));
            }
            if let Some(path) = &run.out {
                fmap::write_path(path, &fmap::encode_tokens(&tokens)?)?;
            }
            let t = tokens.tensor();
            match run.format {
                ReportFormat::Text => println!(
                    "{projector}: {} tokens x {}, min {:.6} max {:.6} mean {:.6}",
                    tokens.len(),
                    tokens.width(),
                    t.min(),
                    t.max(),
                    t.mean()
                ),
                ReportFormat::Csv => println!(
                    "projector,tokens,width,min,max,mean\n{projector},{},{},{:.6},{:.6},{:.6}",
                    tokens.len(),
                    tokens.width(),
                    t.min(),
                    t.max(),
                    t.mean()
                ),
            }
        }
        Command::Report { model, llm_params, format, out } => {
            let config = model.resolve("paper")?;
            let grid = flops::table4_grid(&config, llm_params);
            let text = match format {
                ReportFormat::Csv => flops::render_csv(&grid),
                ReportFormat::Text => {
                    let mut rows = grid;
                    for kind in [ProjectorKind::AvgPool, ProjectorKind::TokenConcat] {
                        rows.push(FlopsReport::new(&config, kind, llm_params));
                    }
                    format!(
                        "LLM prefill at 2 * {llm_params} params * tokens, {}x{} encoder grid\n{}",
                        config.grid_h,
                        config.grid_w,
                        flops::render_table(&rows)
                    )
                }
            };
            emit(&text, out.as_deref())?;
        }
        Command::Gradcheck {
            model,
            target,
            seed,
            seeds,
            epsilon,
            threshold,
            precision,
            format,
            out,
        } => {
            let config = model.resolve("tiny")?;
            let targets = match target.as_str() {
                "all" => CheckTarget::all(),
                "suite" => CheckTarget::fusion_suite(),
                one => vec![one.parse()?],
            };
            let mut reports = Vec::new();
            for t in targets {
                for s in seed..seed + seeds.max(1) {
                    let r = gradcheck::check_module_with(t, &config, s, epsilon, threshold, precision)?;
                    if format == ReportFormat::Text {
                        print!("{r}");
                    }
                    reports.push(r);
                }
            }
            let mut csv = String::from(GradReport::CSV_HEADER);
            csv.push('\n');
            for r in &reports {
                for row in r.csv_rows() {
                    csv.push_str(&row);
                    csv.push('\n');
                }
            }
            if format == ReportFormat::Csv && out.is_none() {
                print!("{csv}");
            }
            if let Some(path) = &out {
                fmap::write_path(path, csv.as_bytes())?;
            }
            let failed: Vec<String> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{} seed {}", r.target, r.seed))
                .collect();
            let worst = reports.iter().map(GradReport::max_rel_error).fold(0.0, f64::max);
            eprintln!(
                "{} of {} checks passed, worst relative error {worst:.3e}",
                reports.len() - failed.len(),
                reports.len()
            );
            if !failed.is_empty() {
                return Err(Error::Numeric(format!(
                    "gradient check above {threshold:e}: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::ToyTrain {
            model,
            seed,
            projector,
            lr,
            steps,
            batch,
            out,
        } => {
            let mut fusion = model.resolve("toy")?;
            if model.param_seed.is_none() {
                fusion.seed = seed;
            }
            let cfg = TrainConfig {
                fusion,
                kind: projector,
                seed,
                lr,
                steps,
                batch,
            };
            let curve = toy_train(&cfg)?;
            match &out {
                Some(path) => fmap::write_path(path, curve.to_csv().as_bytes())?,
                None => print!("{}", curve.to_csv()),
            }
            eprintln!(
                "loss {:.6} -> {:.6} ({:.4} of initial) over {steps} steps",
                curve.initial(),
                curve.last(),
                curve.last() / curve.initial()
            );
        }
        Command::Bench {
            model,
            source,
            projector,
            reps,
            warmup,
            format,
        } => {
            let run = RunConfig::new(model.resolve("paper")?, source.input, source.seed, None, format, reps)?;
            let stack = load_stack(&run)?;
            let params = ModuleParams::init(&run.fusion, projector);
            let report = bench(&stack, &params, &run.fusion, run.reps, warmup)?;
            match run.format {
                ReportFormat::Text => println!("{projector} {report}"),
                ReportFormat::Csv => {
                    println!("projector,{}\n{projector},{}", bench::BenchReport::CSV_HEADER, report.csv_row())
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
