//! Flat `key=value` configuration shared by every subcommand.
//!
//! Layers, later wins: built-in defaults, the file named by `--config` (or the
//! `FREQADAPT_CONFIG` environment variable), then `--set key=value` flags.

use std::fmt::Write as _;
use std::path::Path;

use freqadapt::estimator::{EstimatorConfig, GridSpec};
use freqadapt::imaging::ChannelPolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub estimator: EstimatorConfig,
    pub grid_r_count: usize,
    pub grid_max_sweeps: usize,
    pub fdc_batch: usize,
    pub fdc_iterations: u64,
    pub channel_policy: ChannelPolicy,
}

impl Default for AppConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            estimator: EstimatorConfig::default(),
            grid_r_count: grid.r_values.len(),
            grid_max_sweeps: grid.max_sweeps,
            fdc_batch: 8,
            fdc_iterations: 2000,
            channel_policy: ChannelPolicy::default(),
        }
    }
}

const KEY_DOCS: &[(&str, &str)] = &[
    ("lambda1", "weight of the comparator loss"),
    ("lambda2", "weight of the wavelet discriminator loss"),
    ("iterations", "adversarial estimator iterations"),
    ("images_per_step", "source images sampled per iteration"),
    ("patch_size", "side of profiled patches, pixels"),
    ("scale", "downsampling factor of the generator"),
    ("kernel_side", "side of the estimated kernel, pixels"),
    ("curriculum_start", "first triplet resampling factor"),
    ("curriculum_end", "final triplet resampling factor"),
    ("curriculum_steps", "iterations from start to end factor"),
    ("curriculum_decay", "linear or geometric"),
    ("r_min", "lower bound of kernel std-devs"),
    ("r_max", "upper bound of kernel std-devs"),
    ("seed", "seed of every random stream"),
    ("bin_kind", "profile bins: axis or radial"),
    ("normalization", "comparator input: none, unit-sum or log1p"),
    ("fdc_lr", "comparator learning rate"),
    ("wd_lr", "discriminator learning rate"),
    ("kernel_lr", "kernel parameter learning rate"),
    ("spsa_delta", "perturbation of kernel gradient estimates"),
    ("warmup", "iterations before the kernel moves"),
    ("average_tail", "fraction of final iterations averaged into the estimate"),
    ("plateau_window", "plateau detection window, 0 disables"),
    ("plateau_tol", "relative loss change that counts as a plateau"),
    ("divergence_factor", "smoothed loss growth that aborts a run"),
    ("grid_r_count", "radii per axis of the direct estimator grid"),
    ("grid_max_sweeps", "coordinate descent sweep limit"),
    ("fdc_batch", "triplets per step in train-fdc"),
    ("fdc_iterations", "iterations of train-fdc"),
    ("channel_policy", "color to gray: luminance or average"),
];

impl AppConfig {
    /// Every key with its current value, in help order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = self.estimator.echo();
        out.push(("grid_r_count".into(), self.grid_r_count.to_string()));
        out.push(("grid_max_sweeps".into(), self.grid_max_sweeps.to_string()));
        out.push(("fdc_batch".into(), self.fdc_batch.to_string()));
        out.push(("fdc_iterations".into(), self.fdc_iterations.to_string()));
        out.push(("channel_policy".into(), self.channel_policy.to_string()));
        out
    }

    /// Sets one key; unknown keys and unparsable values are errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.trim().parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "grid_r_count" => self.grid_r_count = num(key, value)?,
            "grid_max_sweeps" => self.grid_max_sweeps = num(key, value)?,
            "fdc_batch" => self.fdc_batch = num(key, value)?,
            "fdc_iterations" => self.fdc_iterations = num(key, value)?,
            "channel_policy" => {
                self.channel_policy = value.trim().parse().map_err(|e| format!("{key}: {e}"))?;
            }
            _ => {
                if !self.estimator.set(key, value).map_err(|e| e.to_string())? {
                    return Err(format!("unknown config key {key:?}"));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin} line {}: expected key=value, got {raw:?}", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{origin} line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.estimator.validate().map_err(|e| e.to_string())?;
        if self.grid_r_count < 2 {
            return Err("grid_r_count: must be >= 2".into());
        }
        if self.grid_max_sweeps == 0 {
            return Err("grid_max_sweeps: must be >= 1".into());
        }
        if self.fdc_batch == 0 {
            return Err("fdc_batch: must be >= 1".into());
        }
        if self.fdc_iterations == 0 {
            return Err("fdc_iterations: must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        let e = &self.estimator;
        let mut grid = GridSpec {
            max_sweeps: self.grid_max_sweeps,
            ..GridSpec::default()
        };
        if let Ok(r) = GridSpec::evenly_spaced(self.grid_r_count, e.r_min, e.r_max) {
            grid.r_values = r;
        }
        grid.min_sweeps = grid.min_sweeps.min(grid.max_sweeps);
        grid
    }

    /// Builds the layered configuration.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, String> {
        let mut cfg = AppConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| format!("--config {}: {e}", path.display()))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| format!("--set expects key=value, got {s:?}"))?;
            cfg.set(k.trim(), v).map_err(|e| format!("--set {e}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The key table appended to every `--help`.
pub fn help_table() -> String {
    let defaults = AppConfig::default().echo();
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from(
        "Configuration keys (set in a --config file, the file named by FREQADAPT_CONFIG, or with --set key=value):\n",
    );
    for (key, doc) in KEY_DOCS {
        let default = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or("");
        let _ = writeln!(s, "  {key:<width$}  {default:<10}  {doc}");
    }
    s
}

/// `key=value` lines for report files and logs.
pub fn echo_text(cfg: &AppConfig) -> String {
    cfg.echo().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented_once() {
        let keys: Vec<String> = AppConfig::default().echo().into_iter().map(|(k, _)| k).collect();
        let docs: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, docs);
    }

    #[test]
    fn echo_round_trips_through_set() {
        let mut cfg = AppConfig::default();
        cfg.set("lambda2", "0.5").unwrap();
        cfg.set("channel_policy", "average").unwrap();
        let text = echo_text(&cfg);
        let mut back = AppConfig::default();
        back.apply_text(&text, "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_key_and_line() {
        let mut cfg = AppConfig::default();
        let e = cfg.apply_text("# c\nseed=1\nlambda1=abc\n", "f.cfg").unwrap_err();
        assert!(e.contains("f.cfg line 3") && e.contains("lambda1"), "{e}");
        let e = cfg.apply_text("bogus=1", "f.cfg").unwrap_err();
        assert!(e.contains("bogus"), "{e}");
        cfg.set("kernel_side", "12").unwrap();
        assert!(cfg.validate().unwrap_err().contains("kernel_side"));
    }
}
