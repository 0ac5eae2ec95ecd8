//! Command-line flags and the flat `key = value` config file behind them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

/// Options shared by every subcommand. Anything left unset on the command
/// line is taken from `--config`, then from the subcommand's defaults.
#[derive(Args, Debug, Clone, Default, PartialEq)]
pub struct Options {
    /// Architecture id (see `convgp::registry`).
    #[arg(long)]
    pub arch: Option<String>,
    /// CIFAR-10 batch file or directory of batches.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of inputs (a multiple of 10 for CIFAR subsets).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Matérn lengthscale; repeat or separate with commas for a sweep.
    #[arg(long, value_delimiter = ',')]
    pub lengthscale: Vec<f64>,
    /// Noise variances as multiples of trace(K)/n.
    #[arg(long, value_delimiter = ',')]
    pub sigma_grid: Vec<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Hidden width of the sampled networks.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Output width of the sampled networks.
    #[arg(long)]
    pub out_channels: Option<usize>,
    /// Number of sampled networks.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where kernel files are stored and looked up.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of (conv, relu) blocks, for the cnngp family.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Filter size of the plain convolutions.
    #[arg(long)]
    pub filter: Option<usize>,
    /// Kernel file, for `predict`.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Label file with one class per line and `?` for unknown, for `predict`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "arch",
    "data",
    "n",
    "seed",
    "lengthscale",
    "sigma-grid",
    "folds",
    "channels",
    "out-channels",
    "samples",
    "threads",
    "out",
    "cache-dir",
    "depth",
    "filter",
    "kernel",
    "labels",
];

/// Parses `key = value` lines. `#` starts a comment; keys use the flag names
/// without dashes in front.
pub fn parse_config(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
        let key = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            bail!("line {}: unknown key '{}'", no + 1, k.trim());
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("config key '{key}': {e}"))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl Options {
    /// Fills unset fields from the config file named by `--config`, if any.
    pub fn resolve(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply(&parse_config(&text)?, path.parent().unwrap_or(Path::new(".")))?;
        Ok(self)
    }

    /// Relative paths in the file are taken relative to `base`.
    fn apply(&mut self, map: &HashMap<String, String>, base: &Path) -> Result<()> {
        let path = |v: &String| base.join(v);
        for (k, v) in map {
            match k.as_str() {
                "arch" => {
                    self.arch.get_or_insert_with(|| v.clone());
                }
                "data" => {
                    self.data.get_or_insert_with(|| path(v));
                }
                "n" => set(&mut self.n, k, v)?,
                "seed" => set(&mut self.seed, k, v)?,
                "lengthscale" if self.lengthscale.is_empty() => self.lengthscale = list(k, v)?,
                "sigma-grid" if self.sigma_grid.is_empty() => self.sigma_grid = list(k, v)?,
                "lengthscale" | "sigma-grid" => {}
                "folds" => set(&mut self.folds, k, v)?,
                "channels" => set(&mut self.channels, k, v)?,
                "out-channels" => set(&mut self.out_channels, k, v)?,
                "samples" => set(&mut self.samples, k, v)?,
                "threads" => set(&mut self.threads, k, v)?,
                "out" => {
                    self.out.get_or_insert_with(|| path(v));
                }
                "cache-dir" => {
                    self.cache_dir.get_or_insert_with(|| path(v));
                }
                "depth" => set(&mut self.depth, k, v)?,
                "filter" => set(&mut self.filter, k, v)?,
                "kernel" => {
                    self.kernel.get_or_insert_with(|| path(v));
                }
                "labels" => {
                    self.labels.get_or_insert_with(|| path(v));
                }
                _ => unreachable!("keys are checked while parsing"),
            }
        }
        Ok(())
    }
}

fn set<T: std::str::FromStr>(slot: &mut Option<T>, key: &str, v: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if slot.is_none() {
        *slot = Some(parse(key, v)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_fills_gaps_and_flags_win() {
        let map = parse_config(
            "# sweep\narch = cnngp-7\nn=40\nlengthscale = 1e-3, 17 ,1e5\nsigma_grid = 0.1\ndata = cifar\n",
        )
        .unwrap();
        let mut o = Options {
            n: Some(20),
            ..Default::default()
        };
        o.apply(&map, Path::new("/cfg")).unwrap();
        assert_eq!(o.arch.as_deref(), Some("cnngp-7"));
        assert_eq!(o.n, Some(20));
        assert_eq!(o.lengthscale, vec![1e-3, 17.0, 1e5]);
        assert_eq!(o.sigma_grid, vec![0.1]);
        assert_eq!(o.data, Some(PathBuf::from("/cfg/cifar")));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(parse_config("colour = red").is_err());
        assert!(parse_config("arch cnngp-14").is_err());
        let map = parse_config("n = many").unwrap();
        assert!(Options::default().apply(&map, Path::new(".")).is_err());
    }
}
