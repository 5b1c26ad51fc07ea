//! Model settings resolution: built-in defaults, then a flat
//! `key = value` file, then command-line flags, last writer wins.

use cgrl_core::error::{Error, Result};
use cgrl_core::model::{AttentionVariant, ModelConfig, Scorer};
use cgrl_core::pipeline::DEFAULT_LAMBDA;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Per-field overrides; every flag mirrors one settings key.
#[derive(Debug, clap::Args)]
pub struct ConfigOverrides {
    /// Settings file, one `key = value` per line, `#` comments.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Components per node embedding.
    #[arg(long)]
    pub k: Option<usize>,
    /// Top components selected per instance.
    #[arg(long)]
    pub n: Option<usize>,
    /// Total node dimension (K must divide it).
    #[arg(long)]
    pub d: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the attention-sharpening loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// transe | convkb | gat.
    #[arg(long)]
    pub scorer: Option<Scorer>,
    /// kg-logits | a1 | a2 | ne-pair.
    #[arg(long)]
    pub attention: Option<AttentionVariant>,
    /// Negatives sampled per positive.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Epochs per stream part.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Neighbor activation order (1 or 2).
    #[arg(long)]
    pub neighbor_order: Option<u8>,
    /// Maximum replayed old instances per part.
    #[arg(long)]
    pub memory_budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TransE distance norm (1 or 2).
    #[arg(long)]
    pub transe_norm: Option<u8>,
    /// ConvKB filter count.
    #[arg(long)]
    pub conv_filters: Option<usize>,
    /// Validation cadence in epochs (0 disables early stopping).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Early-stopping patience in evaluations.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Reset Adam state at part boundaries.
    #[arg(long)]
    pub reset_optimizer: Option<bool>,
    /// Consolidation strength for the ewc strategy.
    #[arg(long)]
    pub lambda: Option<f64>,
}

impl ConfigOverrides {
    /// Folds defaults, the optional settings file and the flags into a
    /// validated configuration plus the consolidation weight.
    pub fn resolve(&self) -> Result<(ModelConfig, f64)> {
        let mut config = ModelConfig::default();
        let mut lambda = DEFAULT_LAMBDA;
        if let Some(path) = &self.config {
            apply_settings_file(path, &mut config, &mut lambda)?;
        }
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field {
                    config.$field = v;
                })*
            };
        }
        over!(
            k, n, d, lr, beta, scorer, attention, negatives, epochs, batch_size,
            neighbor_order, memory_budget, seed, transe_norm, conv_filters, eval_every,
            patience, reset_optimizer
        );
        if let Some(v) = self.lambda {
            lambda = v;
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        config.validate()?;
        Ok((config, lambda))
    }
}

fn parse_value<T: FromStr>(path: &Path, lineno: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| {
        Error::Config(format!("{}:{lineno}: bad value for {key}: {e}", path.display()))
    })
}

/// Applies one settings file on top of `config`/`lambda`.
pub fn apply_settings_file(path: &Path, config: &mut ModelConfig, lambda: &mut f64) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read settings {}: {e}", path.display())))?;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{lineno}: expected key = value, got {raw:?}", path.display()))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "k" => config.k = parse_value(path, lineno, key, value)?,
            "n" => config.n = parse_value(path, lineno, key, value)?,
            "d" => config.d = parse_value(path, lineno, key, value)?,
            "lr" => config.lr = parse_value(path, lineno, key, value)?,
            "beta" => config.beta = parse_value(path, lineno, key, value)?,
            "scorer" => config.scorer = parse_value(path, lineno, key, value)?,
            "attention" => config.attention = parse_value(path, lineno, key, value)?,
            "negatives" => config.negatives = parse_value(path, lineno, key, value)?,
            "epochs" => config.epochs = parse_value(path, lineno, key, value)?,
            "batch_size" => config.batch_size = parse_value(path, lineno, key, value)?,
            "neighbor_order" => config.neighbor_order = parse_value(path, lineno, key, value)?,
            "memory_budget" => config.memory_budget = parse_value(path, lineno, key, value)?,
            "seed" => config.seed = parse_value(path, lineno, key, value)?,
            "transe_norm" => config.transe_norm = parse_value(path, lineno, key, value)?,
            "conv_filters" => config.conv_filters = parse_value(path, lineno, key, value)?,
            "eval_every" => config.eval_every = parse_value(path, lineno, key, value)?,
            "patience" => config.patience = parse_value(path, lineno, key, value)?,
            "reset_optimizer" => {
                config.reset_optimizer = parse_value(path, lineno, key, value)?
            }
            "lambda" => *lambda = parse_value(path, lineno, key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "{}:{lineno}: unknown settings key {other}",
                    path.display()
                )))
            }
        }
    }
    Ok(())
}

/// Comma-separated fractions, e.g. `0.8,0.05,0.05,0.05,0.05`.
pub fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad ratio {s:?}: {e}")))
        })
        .collect()
}
