//! Flat `key = value` config files and run settings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;

/// Keys accepted in a config file, in the order they are documented.
pub const KEYS: [&str; 12] = [
    "preset",
    "encoder_depth",
    "m",
    "h1",
    "w1",
    "c1",
    "k",
    "e",
    "c3",
    "mbtf_hidden",
    "stf_hidden",
    "seed",
];

pub fn preset(name: &str) -> Result<FusionConfig> {
    match name {
        "paper" | "default" => Ok(FusionConfig::paper()),
        "tiny" => Ok(FusionConfig::tiny()),
        "toy" => Ok(FusionConfig::toy()),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected paper, tiny or toy)"
        ))),
    }
}

/// Applies `text` on top of `base`. A `preset` line replaces the base and
/// must come before any other key.
pub fn parse_config(text: &str, base: FusionConfig) -> Result<FusionConfig> {
    let mut config = base;
    let mut seen: Vec<&str> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let key = KEYS
            .iter()
            .find(|k| k.eq_ignore_ascii_case(key))
            .copied()
            .ok_or_else(|| at(format!("unknown key {key:?}")))?;
        if seen.contains(&key) {
            return Err(at(format!("duplicate key {key:?}")));
        }
        if key == "preset" {
            if !seen.is_empty() {
                return Err(at("preset must come before other keys".into()));
            }
            config = preset(value).map_err(|e| at(e.to_string()))?;
            seen.push(key);
            continue;
        }
        seen.push(key);
        let num = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| at(format!("{key} expects a non-negative integer, got {value:?}")))
        };
        match key {
            "encoder_depth" => config.encoder_depth = num()?,
            "m" => config.num_blocks = num()?,
            "h1" => config.grid_h = num()?,
            "w1" => config.grid_w = num()?,
            "c1" => config.encoder_width = num()?,
            "k" => config.kernel = num()?,
            "e" => config.tokens_per_window = num()?,
            "c3" => config.llm_width = num()?,
            "mbtf_hidden" => config.mbtf_hidden = num()?,
            "stf_hidden" => config.stf_hidden = num()?,
            "seed" => {
                config.seed = value
                    .parse()
                    .map_err(|_| at(format!("seed expects an unsigned integer, got {value:?}")))?
            }
            _ => unreachable!("key list is exhaustive"),
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, base: FusionConfig) -> Result<FusionConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("reading config {}: {e}", path.display()),
        ))
    })?;
    parse_config(&text, base)
}

/// Renders `config` in the file format read by [`parse_config`].
pub fn render_config(config: &FusionConfig) -> String {
    format!(
        "encoder_depth = {}\nm = {}\nh1 = {}\nw1 = {}\nc1 = {}\nk = {}\ne = {}\nc3 = {}\n\
         mbtf_hidden = {}\nstf_hidden = {}\nseed = {}\n",
        config.encoder_depth,
        config.num_blocks,
        config.grid_h,
        config.grid_w,
        config.encoder_width,
        config.kernel,
        config.tokens_per_window,
        config.llm_width,
        config.mbtf_hidden,
        config.stf_hidden,
        config.seed
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Csv => "csv",
        })
    }
}

/// Where features come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    File(PathBuf),
    Synthetic(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fusion: FusionConfig,
    pub source: FeatureSource,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
    pub reps: usize,
}

impl RunConfig {
    /// Exactly one of `input` and `seed` may be given; with neither, features
    /// are synthesized from seed 0.
    pub fn new(
        fusion: FusionConfig,
        input: Option<PathBuf>,
        seed: Option<u64>,
        out: Option<PathBuf>,
        format: ReportFormat,
        reps: usize,
    ) -> Result<Self> {
        let source = match (input, seed) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either an input file or a synthetic seed, not both".into(),
                ))
            }
            (Some(path), None) => FeatureSource::File(path),
            (None, seed) => FeatureSource::Synthetic(seed.unwrap_or(0)),
        };
        fusion.validate()?;
        Ok(Self {
            fusion,
            source,
            out,
            format,
            reps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let text = "# tiny run\npreset = tiny\nk = 1  # no spatial fusion\n\nE = 1\nseed = 42\n";
        let c = parse_config(text, FusionConfig::paper()).unwrap();
        assert_eq!(c.kernel, 1);
        assert_eq!(c.seed, 42);
        assert_eq!(c.grid_h, 4);
    }

    #[test]
    fn round_trips_rendered_config() {
        let c = FusionConfig::paper().with_fusion(4, 8);
        assert_eq!(parse_config(&render_config(&c), FusionConfig::tiny()).unwrap(), c);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_config("k = 2\nbogus = 1\n", FusionConfig::paper()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_config("k = two", FusionConfig::paper()).is_err());
        assert!(parse_config("k 2", FusionConfig::paper()).is_err());
        assert!(parse_config("k = 2\nk = 3", FusionConfig::paper()).is_err());
        assert!(parse_config("k = 2\npreset = tiny", FusionConfig::paper()).is_err());
        // k = 5 does not divide 24
        assert!(parse_config("k = 5", FusionConfig::paper()).is_err());
    }

    #[test]
    fn source_is_exclusive() {
        let c = FusionConfig::tiny();
        let fmt = ReportFormat::Text;
        assert!(RunConfig::new(c.clone(), Some("a".into()), Some(1), None, fmt, 1).is_err());
        let r = RunConfig::new(c.clone(), None, None, None, fmt, 1).unwrap();
        assert_eq!(r.source, FeatureSource::Synthetic(0));
        let r = RunConfig::new(c, Some("a".into()), None, None, fmt, 1).unwrap();
        assert_eq!(r.source, FeatureSource::File("a".into()));
    }
}
