//! Run configuration: defaults, a flat `key = value` file, then command-line
//! overrides, in increasing precedence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dynvo::dataset_io::DEFAULT_MAX_DT;
use dynvo::evaluation::{RpeDelta, DEFAULT_RPE_DELTA};
use dynvo::refine::RefineConfig;

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub refine: RefineConfig,
    /// Largest rgb/depth timestamp gap (s) accepted when associating.
    pub association_tolerance: f64,
    pub seed: u64,
    /// Write one mask PNG per processed pair.
    pub debug_masks: bool,
    /// Initialise each pair with the previous motion (sequential run).
    pub warm_start: bool,
    pub delta: RpeDelta,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            refine: RefineConfig::default(),
            association_tolerance: DEFAULT_MAX_DT,
            seed: 0,
            debug_masks: false,
            warm_start: true,
            delta: DEFAULT_RPE_DELTA,
            dataset: None,
            out: None,
        }
    }
}

/// Accepts `0.5`, `0.5s` (seconds) or `3f` (frames).
pub fn parse_delta(text: &str) -> std::result::Result<RpeDelta, String> {
    let text = text.trim();
    if let Some(n) = text.strip_suffix('f') {
        let n: usize = n.parse().map_err(|e| format!("bad frame count `{n}`: {e}"))?;
        if n == 0 {
            return Err("frame delta must be at least 1".into());
        }
        return Ok(RpeDelta::Frames(n));
    }
    let s = text.strip_suffix('s').unwrap_or(text);
    let d: f64 = s.parse().map_err(|e| format!("bad delta `{text}`: {e}"))?;
    if !(d.is_finite() && d > 0.0) {
        return Err(format!("delta must be positive, got {d}"));
    }
    Ok(RpeDelta::Seconds(d))
}

pub fn format_delta(delta: RpeDelta) -> String {
    match delta {
        RpeDelta::Seconds(d) => format!("{d}s"),
        RpeDelta::Frames(n) => format!("{n}f"),
    }
}

fn num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad value `{value}`: {e}"))
}

fn flag(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("bad boolean `{value}`")),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let a = &mut self.refine.alignment;
        let s = &mut self.refine.segmentation;
        match key {
            "alpha_i" => a.alpha_i = num(value)?,
            "pyramid_levels" => a.pyramid_levels = num(value)?,
            "max_gn_iters" => a.max_gn_iters = num(value)?,
            "update_norm_tol" => a.update_norm_tol = num(value)?,
            "huber_delta" => a.huber_delta = num(value)?,
            "outlier_kappa" => a.outlier_kappa = num(value)?,
            "outlier_floor" => a.outlier_floor = num(value)?,
            "occlusion_margin" => a.occlusion_margin = num(value)?,
            "occlusion_ratio" => a.occlusion_ratio = num(value)?,
            "max_step_halvings" => a.max_step_halvings = num(value)?,
            "block_size" => s.block = num(value)?,
            "tau_abs" => s.tau_abs = num(value)?,
            "tau_rel" => s.tau_rel = num(value)?,
            "ratio_band_low" => s.ratio_band.0 = num(value)?,
            "ratio_band_high" => s.ratio_band.1 = num(value)?,
            "pair_window" => s.pair_window = num(value)?,
            "change_window" => s.change_window = num(value)?,
            "dynamic_threshold" => s.dynamic_threshold = num(value)?,
            "max_refine_iters" => self.refine.max_refine_iters = num(value)?,
            "change_tol" => self.refine.change_tol = num(value)?,
            "max_clusters" => self.refine.max_clusters = num(value)?,
            "association_tolerance" => self.association_tolerance = num(value)?,
            "seed" => self.seed = num(value)?,
            "debug_masks" => self.debug_masks = flag(value)?,
            "warm_start" => self.warm_start = flag(value)?,
            "delta" => self.delta = parse_delta(value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies the `key = value` lines of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Config {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    /// Defaults, then `file`, then `overrides` (already-formatted values).
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)
                .map_err(|m| CliError::Usage(format!("--{}: {m}", key.replace('_', "-"))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        if !(self.association_tolerance.is_finite() && self.association_tolerance > 0.0) {
            return Err(CliError::Usage("association_tolerance must be positive".into()));
        }
        Ok(())
    }

    /// The full configuration as a file that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let a = &self.refine.alignment;
        let s = &self.refine.segmentation;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("alpha_i", a.alpha_i.to_string());
        kv("pyramid_levels", a.pyramid_levels.to_string());
        kv("max_gn_iters", a.max_gn_iters.to_string());
        kv("update_norm_tol", a.update_norm_tol.to_string());
        kv("huber_delta", a.huber_delta.to_string());
        kv("outlier_kappa", a.outlier_kappa.to_string());
        kv("outlier_floor", a.outlier_floor.to_string());
        kv("occlusion_margin", a.occlusion_margin.to_string());
        kv("occlusion_ratio", a.occlusion_ratio.to_string());
        kv("max_step_halvings", a.max_step_halvings.to_string());
        kv("block_size", s.block.to_string());
        kv("tau_abs", s.tau_abs.to_string());
        kv("tau_rel", s.tau_rel.to_string());
        kv("ratio_band_low", s.ratio_band.0.to_string());
        kv("ratio_band_high", s.ratio_band.1.to_string());
        kv("pair_window", s.pair_window.to_string());
        kv("change_window", s.change_window.to_string());
        kv("dynamic_threshold", s.dynamic_threshold.to_string());
        kv("max_refine_iters", self.refine.max_refine_iters.to_string());
        kv("change_tol", self.refine.change_tol.to_string());
        kv("max_clusters", self.refine.max_clusters.to_string());
        kv("association_tolerance", self.association_tolerance.to_string());
        kv("seed", self.seed.to_string());
        kv("debug_masks", self.debug_masks.to_string());
        kv("warm_start", self.warm_start.to_string());
        kv("delta", format_delta(self.delta));
        if let Some(p) = &self.dataset {
            kv("dataset", p.display().to_string());
        }
        if let Some(p) = &self.out {
            kv("out", p.display().to_string());
        }
        out
    }
}
