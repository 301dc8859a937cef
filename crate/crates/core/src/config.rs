//! `key = value` configuration with full-scale and desk presets.

use std::fmt::Write as _;
use std::path::Path;

use crate::descriptor::{AttentionKind, DescriptorConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::overlap::OverlapConfig;
use crate::retrieval::{DEFAULT_EXCLUSION, DEFAULT_K};
use crate::voxel::GridConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected full or desk)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub grid: GridConfig,
    pub encoder: EncoderConfig,
    pub descriptor: DescriptorConfig,
    pub overlap: OverlapConfig,
    pub k: usize,
    pub exclusion: u64,
    pub d_true: f64,
    pub margin: f64,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub learning_rate: f64,
    pub overlap_learning_rate: f64,
    pub epochs: usize,
    pub overlap_epochs: usize,
    pub seed: u64,
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        let (grid, encoder, descriptor) = match p {
            Preset::Full => (
                GridConfig::full(),
                EncoderConfig::full(),
                DescriptorConfig::full(),
            ),
            Preset::Desk => (
                GridConfig::desk(),
                EncoderConfig::desk(),
                DescriptorConfig::desk(),
            ),
        };
        Self {
            grid,
            encoder,
            overlap: OverlapConfig::for_channels(descriptor.channels),
            descriptor,
            k: DEFAULT_K,
            exclusion: DEFAULT_EXCLUSION,
            d_true: 10.0,
            margin: 0.3,
            sigma_pos: 10.0,
            sigma_neg: 50.0,
            n_pos: 2,
            n_neg: 10,
            learning_rate: 1e-3,
            overlap_learning_rate: 1e-3,
            epochs: 10,
            overlap_epochs: 5,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self::preset(Preset::Full)
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    /// Checks cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder.in_channels != self.grid.c_layers {
            return bad(format!(
                "encoder input channels {} != grid layers {}",
                self.encoder.in_channels, self.grid.c_layers
            ));
        }
        if self.descriptor.channels != self.encoder.feature_channels()
            || self.overlap.channels != self.descriptor.channels
        {
            return bad(
                "feature channels disagree between encoder, descriptor and overlap head".into(),
            );
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.sigma_pos < self.sigma_neg) {
            return bad(format!(
                "sigma_pos {} must be below sigma_neg {}",
                self.sigma_pos, self.sigma_neg
            ));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return bad("n_pos and n_neg must be positive".into());
        }
        for lr in [self.learning_rate, self.overlap_learning_rate] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rates must be finite and >= 0, got {lr}"));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn range(key: &str, v: &str) -> Result<(f64, f64)> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            match parts[..] {
                [a, b] => Ok((num(key, a)?, num(key, b)?)),
                _ => Err(Error::Config(format!(
                    "{key} expects \"min, max\", got {v:?}"
                ))),
            }
        }
        match key {
            "grid.x_range" => self.grid.x_range = range(key, value)?,
            "grid.y_range" => self.grid.y_range = range(key, value)?,
            "grid.z_range" => self.grid.z_range = range(key, value)?,
            "grid.h" => self.grid.h_cells = num(key, value)?,
            "grid.w" => self.grid.w_cells = num(key, value)?,
            "grid.c" => {
                self.grid.c_layers = num(key, value)?;
                self.encoder.in_channels = self.grid.c_layers;
            }
            "encoder.widths" => {
                let w: Vec<usize> = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?;
                self.encoder.widths = w
                    .try_into()
                    .map_err(|_| Error::Config("encoder.widths needs four values".into()))?;
                self.descriptor.channels = self.encoder.feature_channels();
                self.overlap = OverlapConfig::for_channels(self.descriptor.channels);
            }
            "descriptor.clusters" => self.descriptor.clusters = num(key, value)?,
            "descriptor.dim" => self.descriptor.dim = num(key, value)?,
            "descriptor.attention" => {
                self.descriptor.attention = match value {
                    "self" => AttentionKind::SelfAttention,
                    "gate" => AttentionKind::ConvGate,
                    _ => {
                        return Err(Error::Config(format!(
                            "descriptor.attention is self or gate, got {value:?}"
                        )))
                    }
                }
            }
            "overlap.hidden" => self.overlap.hidden = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "exclusion" => self.exclusion = num(key, value)?,
            "d_true" => self.d_true = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "sigma_pos" => self.sigma_pos = num(key, value)?,
            "sigma_neg" => self.sigma_neg = num(key, value)?,
            "n_pos" => self.n_pos = num(key, value)?,
            "n_neg" => self.n_neg = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "overlap_learning_rate" => self.overlap_learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "overlap_epochs" => self.overlap_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses assignments on top of `base`. `#` starts a comment.
    pub fn parse(text: &str, base: Config) -> Result<Self> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, base: Config) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, base)
    }

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let w = self.encoder.widths;
        let attention = match self.descriptor.attention {
            AttentionKind::SelfAttention => "self",
            AttentionKind::ConvGate => "gate",
        };
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        line("grid.x_range", format!("{}, {}", g.x_range.0, g.x_range.1));
        line("grid.y_range", format!("{}, {}", g.y_range.0, g.y_range.1));
        line("grid.z_range", format!("{}, {}", g.z_range.0, g.z_range.1));
        line("grid.h", g.h_cells.to_string());
        line("grid.w", g.w_cells.to_string());
        line("grid.c", g.c_layers.to_string());
        line(
            "encoder.widths",
            format!("{}, {}, {}, {}", w[0], w[1], w[2], w[3]),
        );
        line("descriptor.clusters", self.descriptor.clusters.to_string());
        line("descriptor.dim", self.descriptor.dim.to_string());
        line("descriptor.attention", attention.into());
        line("overlap.hidden", self.overlap.hidden.to_string());
        line("k", self.k.to_string());
        line("exclusion", self.exclusion.to_string());
        line("d_true", self.d_true.to_string());
        line("margin", self.margin.to_string());
        line("sigma_pos", self.sigma_pos.to_string());
        line("sigma_neg", self.sigma_neg.to_string());
        line("n_pos", self.n_pos.to_string());
        line("n_neg", self.n_neg.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line(
            "overlap_learning_rate",
            self.overlap_learning_rate.to_string(),
        );
        line("epochs", self.epochs.to_string());
        line("overlap_epochs", self.overlap_epochs.to_string());
        line("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::full().validate().unwrap();
        Config::desk().validate().unwrap();
        let f = Config::full();
        assert_eq!((f.grid.h_cells, f.grid.c_layers), (256, 32));
        assert_eq!(
            (
                f.descriptor.channels,
                f.descriptor.clusters,
                f.descriptor.dim
            ),
            (512, 32, 1024)
        );
        assert_eq!(
            (f.k, f.margin, f.sigma_pos, f.sigma_neg),
            (25, 0.3, 10.0, 50.0)
        );
    }

    #[test]
    fn text_round_trip() {
        for base in [Config::full(), Config::desk()] {
            let back = Config::parse(&base.to_text(), Config::full()).unwrap();
            assert_eq!(back, base);
        }
    }

    #[test]
    fn overrides_and_errors() {
        let c = Config::parse("k = 5  # fewer\n\nmargin=0.5\n", Config::desk()).unwrap();
        assert_eq!((c.k, c.margin), (5, 0.5));
        assert!(Config::parse("bogus = 1", Config::desk()).is_err());
        assert!(Config::parse("k 5", Config::desk()).is_err());
        assert!(Config::parse("sigma_pos = 60", Config::desk()).is_err());
        assert!(Config::parse("grid.c = 4", Config::desk()).is_ok());
        let err = Config::parse("k = 1\nk = x", Config::desk())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
