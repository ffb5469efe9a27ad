//! Run configuration in TOML.
//!
//! ```toml
//! seed = 7
//! edge_trim = 128          # optional, default half the longest window
//!
//! [input]
//! path = "data.f64bin"
//! format = "f64bin"        # optional, inferred from the extension
//!
//! [output]
//! dir = "model"
//!
//! [global]
//! n_bands = "auto"         # or an integer >= 2
//! k_min = 2
//! k_max = 16
//!
//! [level.0]
//! window_length = 16
//! rank = 8
//! slide_fraction = 0.1     # optional
//! rho = 0.00625            # optional, default 0.1 / window duration
//! n_local_bands = 4        # optional, default rank / 2; or "auto"
//! transform = "abs_imag"   # optional
//! ```
//!
//! A `[synth]` section with `[[synth.component]]` tables describes a
//! synthetic data set for `mrcosts synth`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{BandCount, OmegaTransform};
use crate::error::{Error, Result};
use crate::model::{GLOBAL_K_MAX, GLOBAL_K_MIN};
use crate::snapshot::MatrixFormat;
use crate::synth::ComponentSpec;
use crate::window::{slide_from_fraction, LevelConfig};

pub const DEFAULT_SLIDE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSection {
    #[serde(default = "auto_bands")]
    pub n_bands: BandCount,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
}

fn auto_bands() -> BandCount {
    BandCount::Auto
}

fn default_k_min() -> usize {
    GLOBAL_K_MIN
}

fn default_k_max() -> usize {
    GLOBAL_K_MAX
}

impl Default for GlobalSection {
    fn default() -> Self {
        GlobalSection {
            n_bands: BandCount::Auto,
            k_min: GLOBAL_K_MIN,
            k_max: GLOBAL_K_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    pub window_length: usize,
    pub rank: usize,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub slide_fraction: Option<f64>,
    #[serde(default)]
    pub n_local_bands: Option<BandCount>,
    #[serde(default)]
    pub transform: Option<OmegaTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_space: usize,
    pub n_time: usize,
    #[serde(default = "unit_dt")]
    pub dt: f64,
    /// Noise standard deviation; ignored when `snr` is set.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Signal-to-noise power ratio of the noisy sum.
    #[serde(default)]
    pub snr: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub component: Vec<ComponentSpec>,
}

fn unit_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub edge_trim: Option<usize>,
    #[serde(default)]
    pub input: Option<InputSection>,
    #[serde(default)]
    pub output: Option<OutputSection>,
    #[serde(default)]
    pub global: GlobalSection,
    /// Keyed by level number as written in `[level.N]`.
    #[serde(default)]
    pub level: BTreeMap<String, LevelSection>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    /// Original text, echoed into model manifests.
    #[serde(skip)]
    pub source: String,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.source = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Level sections in order; keys must be exactly `0..N`.
    pub fn levels(&self) -> Result<Vec<&LevelSection>> {
        let mut keyed = Vec::with_capacity(self.level.len());
        for (key, section) in &self.level {
            let l: usize = key
                .parse()
                .map_err(|_| Error::Config(format!("level key {key:?} is not a number")))?;
            keyed.push((l, section));
        }
        keyed.sort_by_key(|(l, _)| *l);
        for (i, (l, _)) in keyed.iter().enumerate() {
            if *l != i {
                return Err(Error::Config(format!(
                    "levels must be numbered 0..N, found level {l} at position {i}"
                )));
            }
        }
        Ok(keyed.into_iter().map(|(_, s)| s).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels()?;
        for (l, s) in levels.iter().enumerate() {
            if s.rank % 2 != 0 {
                return Err(Error::Config(format!(
                    "level {l}: rank must be even, got {}",
                    s.rank
                )));
            }
            if let Some(f) = s.slide_fraction {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "level {l}: slide_fraction must lie in (0, 1], got {f}"
                    )));
                }
            }
            if let Some(rho) = s.rho {
                if !(rho.is_finite() && rho >= 0.0) {
                    return Err(Error::Config(format!(
                        "level {l}: rho must be finite and >= 0, got {rho}"
                    )));
                }
            }
        }
        if let BandCount::Fixed(k) = self.global.n_bands {
            if k < 2 {
                return Err(Error::Config(format!(
                    "global n_bands must be >= 2, got {k}"
                )));
            }
        }
        validate_k_range(self.global.k_min, self.global.k_max)?;
        if let Some(fmt) = self.input.as_ref().and_then(|i| i.format.as_deref()) {
            fmt.parse::<MatrixFormat>()?;
        }
        if let Some(s) = &self.synth {
            if s.component.is_empty() {
                return Err(Error::Config("synth section has no components".into()));
            }
            for c in &s.component {
                c.validate()?;
            }
            if let Some(snr) = s.snr {
                if !(snr.is_finite() && snr > 0.0) {
                    return Err(Error::Config(format!("snr must be positive, got {snr}")));
                }
            }
        }
        Ok(())
    }

    /// Per-level configuration for data sampled every `dt`.
    pub fn level_configs(&self, dt: f64) -> Result<Vec<LevelConfig>> {
        let levels = self.levels()?;
        if levels.is_empty() {
            return Err(Error::Config("no [level.N] sections".into()));
        }
        levels
            .iter()
            .map(|s| {
                let mut c = LevelConfig::new(s.window_length, s.rank, dt);
                c.slide = slide_from_fraction(
                    s.window_length,
                    s.slide_fraction.unwrap_or(DEFAULT_SLIDE_FRACTION),
                );
                if let Some(rho) = s.rho {
                    c.rho = rho;
                }
                if let Some(b) = s.n_local_bands {
                    c.n_local_bands = b;
                }
                if let Some(t) = s.transform {
                    c.transform = t;
                }
                c.validate()?;
                Ok(c)
            })
            .collect()
    }
}

pub fn validate_k_range(k_min: usize, k_max: usize) -> Result<()> {
    if k_min < 2 || k_max < k_min {
        return Err(Error::Config(format!(
            "cluster range must satisfy 2 <= k_min <= k_max, got [{k_min}, {k_max}]"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 7
[input]
path = "data.csv"
[output]
dir = "out"
[level.1]
window_length = 64
rank = 8
n_local_bands = "auto"
[level.0]
window_length = 16
rank = 8
transform = "log10_abs_imag"
"#;

    #[test]
    fn levels_in_order_with_defaults() {
        let cfg = RunConfig::parse(BASIC).unwrap();
        let levels = cfg.level_configs(1.0).unwrap();
        assert_eq!(levels.len(), 2);
        assert_eq!(levels[0].window_length, 16);
        assert_eq!(levels[0].slide, 2);
        assert_eq!(levels[1].slide, 6);
        assert_eq!(levels[0].n_local_bands, BandCount::Fixed(4));
        assert_eq!(levels[1].n_local_bands, BandCount::Auto);
        assert_eq!(levels[0].transform, OmegaTransform::Log10AbsImag);
        assert_eq!(levels[1].rho, 0.1 / 64.0);
        assert_eq!(cfg.global, GlobalSection::default());
        assert_eq!(cfg.source, BASIC);
    }

    #[test]
    fn odd_rank_rejected() {
        let text = BASIC.replace(
            "window_length = 16\nrank = 8",
            "window_length = 16\nrank = 7",
        );
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("rank must be even"));
    }

    #[test]
    fn gaps_and_bad_ranges_rejected() {
        let text = BASIC.replace("[level.1]", "[level.2]");
        assert!(RunConfig::parse(&text).is_err());
        let text = format!("{BASIC}\n[global]\nk_min = 1\n");
        assert!(RunConfig::parse(&text).is_err());
        let text = format!("{BASIC}\n[global]\nn_bands = 1\n");
        assert!(RunConfig::parse(&text).is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn synth_section() {
        let text = r#"
[synth]
n_space = 8
n_time = 100
snr = 10.0
[[synth.component]]
frequency = 0.005
amplitude = 1.0
pattern = { kind = "traveling", wavenumber = 1.0 }
[[synth.component]]
frequency = 0.125
amplitude = 0.5
pattern = { kind = "standing", wavenumber = 2.0 }
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let s = cfg.synth.unwrap();
        assert_eq!(s.component.len(), 2);
        assert_eq!(s.dt, 1.0);
        assert_eq!(s.snr, Some(10.0));
    }
}
