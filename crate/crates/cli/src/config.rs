//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique per
//! file; a later command-line override replaces the file value. The echo
//! written next to a model lists every key, so feeding it back reproduces
//! the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use inrpack::{FieldKind, HeadMode, PipelineConfig, SynthSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthSpec,
    /// Input dataset recorded by `encode`.
    pub data: Option<PathBuf>,
    /// Model path recorded by `encode`.
    pub model: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            synth: SynthSpec {
                point_count: 1000,
                timesteps: 2,
                fields: vec![FieldKind::Trig],
                noise: 0.0,
                seed: 0,
                clustered: false,
            },
            data: None,
            model: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value '{value}' for '{key}': {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("invalid value '{value}' for '{key}': expected true or false"),
    }
}

fn parse_optional(key: &str, value: &str, none: &str) -> Result<Option<usize>> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

pub fn parse_head_mode(value: &str) -> Result<HeadMode> {
    match value {
        "branched" => Ok(HeadMode::Branched),
        "shared" => Ok(HeadMode::Shared),
        _ => bail!("invalid head mode '{value}': expected branched or shared"),
    }
}

fn head_mode_name(mode: HeadMode) -> &'static str {
    match mode {
        HeadMode::Branched => "branched",
        HeadMode::Shared => "shared",
    }
}

pub fn parse_fields(value: &str) -> Result<Vec<FieldKind>> {
    let fields = value
        .split(',')
        .map(|s| s.trim().parse::<FieldKind>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    if fields.is_empty() {
        bail!("at least one field kind is required");
    }
    Ok(fields)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value'", i + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key '{key}'", i + 1);
            }
            cfg.set(key, value.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let t = &mut p.train;
        let m = &mut p.meta;
        let s = &mut self.synth;
        match key {
            "initial_lr" => t.initial_lr = parse(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "lr_decay_interval_epochs" => t.lr_decay_interval_epochs = parse(key, value)?,
            "convergence_patience_epochs" => t.convergence_patience_epochs = parse(key, value)?,
            "sample_fraction_per_epoch" => t.sample_fraction_per_epoch = parse(key, value)?,
            "residual_threshold" | "tau" => t.residual_threshold = parse(key, value)?,
            "max_split_depth" => t.max_split_depth = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "worker_count" | "workers" => t.worker_count = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse_optional(key, value, "none")?,
            "use_meta" => t.use_meta = parse_bool(key, value)?,
            "recluster" => t.recluster = parse_bool(key, value)?,
            "kmeans_max_iters" => t.kmeans_max_iters = parse(key, value)?,
            "meta.sample_count" => m.sample_count = parse_optional(key, value, "auto")?,
            "meta.inner_steps" => m.inner_steps = parse(key, value)?,
            "meta.inner_lr" => m.inner_lr = parse(key, value)?,
            "meta.outer_lr" => m.outer_lr = parse(key, value)?,
            "meta.iterations" => m.meta_iterations = parse(key, value)?,
            "meta.tasks_per_iteration" => m.tasks_per_iteration = parse(key, value)?,
            "meta.first_order" => m.first_order = parse_bool(key, value)?,
            "meta.seed" => m.seed = parse(key, value)?,
            "meta.chunk_size" => m.chunk_size = parse(key, value)?,
            "width" => p.width = parse(key, value)?,
            "num_frequencies" => p.num_frequencies = parse(key, value)?,
            "gfe_blocks" => p.gfe_blocks = parse(key, value)?,
            "lfe_blocks" => p.lfe_blocks = parse(key, value)?,
            "head_mode" => p.head_mode = parse_head_mode(value)?,
            "synth.points" => s.point_count = parse(key, value)?,
            "synth.timesteps" => s.timesteps = parse(key, value)?,
            "synth.fields" => s.fields = parse_fields(value)?,
            "synth.noise" => s.noise = parse(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            "synth.clustered" => s.clustered = parse_bool(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    /// Every key with its current value, in the file format.
    pub fn echo(&self) -> String {
        let p = &self.pipeline;
        let t = &p.train;
        let m = &p.meta;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("initial_lr", t.initial_lr.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_interval_epochs", t.lr_decay_interval_epochs.to_string());
        kv("convergence_patience_epochs", t.convergence_patience_epochs.to_string());
        kv("sample_fraction_per_epoch", t.sample_fraction_per_epoch.to_string());
        kv("residual_threshold", t.residual_threshold.to_string());
        kv("max_split_depth", t.max_split_depth.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("k", t.k.to_string());
        kv("seed", t.seed.to_string());
        kv("worker_count", t.worker_count.to_string());
        kv("max_epochs", t.max_epochs.map_or("none".into(), |e| e.to_string()));
        kv("use_meta", t.use_meta.to_string());
        kv("recluster", t.recluster.to_string());
        kv("kmeans_max_iters", t.kmeans_max_iters.to_string());
        kv("meta.sample_count", m.sample_count.map_or("auto".into(), |c| c.to_string()));
        kv("meta.inner_steps", m.inner_steps.to_string());
        kv("meta.inner_lr", m.inner_lr.to_string());
        kv("meta.outer_lr", m.outer_lr.to_string());
        kv("meta.iterations", m.meta_iterations.to_string());
        kv("meta.tasks_per_iteration", m.tasks_per_iteration.to_string());
        kv("meta.first_order", m.first_order.to_string());
        kv("meta.seed", m.seed.to_string());
        kv("meta.chunk_size", m.chunk_size.to_string());
        kv("width", p.width.to_string());
        kv("num_frequencies", p.num_frequencies.to_string());
        kv("gfe_blocks", p.gfe_blocks.to_string());
        kv("lfe_blocks", p.lfe_blocks.to_string());
        kv("head_mode", head_mode_name(p.head_mode).into());
        kv("synth.points", s.point_count.to_string());
        kv("synth.timesteps", s.timesteps.to_string());
        kv(
            "synth.fields",
            s.fields.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
        );
        kv("synth.noise", s.noise.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("synth.clustered", s.clustered.to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(m) = &self.model {
            kv("model", m.display().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("tau", "1e-3").unwrap();
        cfg.set("max_epochs", "40").unwrap();
        cfg.set("meta.sample_count", "12").unwrap();
        cfg.set("head_mode", "shared").unwrap();
        cfg.set("synth.fields", "bump,contrast").unwrap();
        cfg.set("initial_lr", "0.1").unwrap();
        cfg.data = Some("in.mcds".into());
        let back = RunConfig::parse_str(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_parse_from_empty_file() {
        assert_eq!(RunConfig::parse_str("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse_str("k = 4\nwidth = wide\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
        let err = RunConfig::parse_str("k = 4\nk = 5\n").unwrap_err();
        assert!(format!("{err:#}").contains("duplicate"), "{err:#}");
        assert!(RunConfig::parse_str("colour = red").is_err());
        assert!(RunConfig::parse_str("just text").is_err());
    }
}
