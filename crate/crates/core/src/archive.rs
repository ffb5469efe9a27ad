//! Directory archive of a fitted model.
//!
//! ```text
//! manifest.toml
//! level{ℓ}/win{k}.f64bin      ω (2r), b (2r), c (n_space), φ (2·n_space·r)
//! level{ℓ}/local_bands.f64bin labels per (window, mode), then centroids
//! global_bands.f64bin         labels per (level, window, mode), centroids,
//!                             band silhouettes, (K, score) pairs
//! ```
//!
//! Blobs are bare little-endian f64 arrays whose lengths follow from the
//! manifest. Floats in the manifest use shortest round-trip formatting, so a
//! load reproduces every number bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cluster::{BandCount, OmegaTransform};
use crate::error::{Error, Result};
use crate::level::LevelDecomposition;
use crate::model::{GlobalBands, MrCostsModel};
use crate::snapshot::write_atomic;
use crate::varpro::C64;
use crate::window::{LevelConfig, WindowFit, WindowSpec};

pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    n_levels: usize,
    n_space: usize,
    n_time: usize,
    t0: f64,
    dt: f64,
    // decimal string: TOML integers are signed 64-bit
    seed: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    config_echo: String,
    level: Vec<LevelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global: Option<GlobalEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LevelEntry {
    window_length: usize,
    slide: usize,
    rank: usize,
    rho: f64,
    n_local_bands: BandCount,
    transform: OmegaTransform,
    n_windows: usize,
    starts: Vec<usize>,
    ranks: Vec<usize>,
    residuals: Vec<f64>,
    noise_floors: Vec<f64>,
    min_cycles: f64,
    /// Empty string for windows that fitted.
    failures: Vec<String>,
    n_bands: usize,
    silhouette: f64,
    low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GlobalEntry {
    n_bands: usize,
    silhouette: f64,
    low_confidence: bool,
    seed: String,
    n_scores: usize,
}

fn level_dir(dir: &Path, l: usize) -> PathBuf {
    dir.join(format!("level{l}"))
}

fn encode(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptArchive(msg.into())
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(format!("missing blob {}", path.display())),
        _ => Error::io(path, e),
    })?;
    if bytes.len() != 8 * expected {
        return Err(corrupt(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            8 * expected
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn to_index(v: f64, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(corrupt(format!("invalid {what} {v}")))
    }
}

fn encode_window(fit: &WindowFit) -> Vec<u8> {
    let omega = fit.omega.iter().flat_map(|w| [w.re, w.im]);
    let amps = fit.amplitudes.iter().flat_map(|b| [b.re, b.im]);
    let bg = fit.background.iter().copied();
    let phi = fit.phi.iter().flat_map(|z| [z.re, z.im]);
    encode(omega.chain(amps).chain(bg).chain(phi))
}

fn pairs(v: &[f64]) -> Vec<C64> {
    v.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect()
}

/// Save without a configuration echo.
pub fn save_model(model: &MrCostsModel, dir: impl AsRef<Path>) -> Result<()> {
    save_model_with_config(model, dir, "")
}

/// Save, storing `config_echo` verbatim in the manifest.
pub fn save_model_with_config(
    model: &MrCostsModel,
    dir: impl AsRef<Path>,
    config_echo: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(model.levels.len());
    for level in &model.levels {
        let ldir = level_dir(dir, level.level);
        fs::create_dir_all(&ldir).map_err(|e| Error::io(&ldir, e))?;
        for fit in &level.fits {
            write_atomic(
                &ldir.join(format!("win{}.f64bin", fit.spec.index)),
                &encode_window(fit),
            )?;
        }
        let labels = level.local_labels.iter().flatten().map(|&l| l as f64);
        write_atomic(
            &ldir.join("local_bands.f64bin"),
            &encode(labels.chain(level.centroids.iter().copied())),
        )?;
        let c = &level.config;
        entries.push(LevelEntry {
            window_length: c.window_length,
            slide: c.slide,
            rank: c.rank,
            rho: c.rho,
            n_local_bands: c.n_local_bands,
            transform: c.transform,
            n_windows: level.fits.len(),
            starts: level.fits.iter().map(|f| f.spec.start).collect(),
            ranks: level.fits.iter().map(|f| f.rank()).collect(),
            residuals: level.fits.iter().map(|f| f.residual_rel).collect(),
            noise_floors: level.fits.iter().map(|f| f.noise_floor).collect(),
            min_cycles: level.min_cycles,
            failures: level
                .fits
                .iter()
                .map(|f| f.failure.clone().unwrap_or_default())
                .collect(),
            n_bands: level.n_bands(),
            silhouette: level.silhouette,
            low_confidence: level.low_confidence,
        });
    }

    let global = match &model.global {
        Some(g) => {
            let labels = g
                .labels
                .iter()
                .flatten()
                .flatten()
                .map(|l| l.map_or(-1.0, |v| v as f64));
            let scores = g.scores.iter().flat_map(|(k, s)| [*k as f64, *s]);
            let blob = encode(
                labels
                    .chain(g.centroids.iter().copied())
                    .chain(g.band_silhouette.iter().copied())
                    .chain(scores),
            );
            write_atomic(&dir.join("global_bands.f64bin"), &blob)?;
            Some(GlobalEntry {
                n_bands: g.n_bands(),
                silhouette: g.silhouette,
                low_confidence: g.low_confidence,
                seed: g.seed.to_string(),
                n_scores: g.scores.len(),
            })
        }
        None => None,
    };

    let manifest = Manifest {
        format_version: ARCHIVE_VERSION,
        n_levels: model.levels.len(),
        n_space: model.n_space,
        n_time: model.n_time,
        t0: model.t0,
        dt: model.dt,
        seed: model.seed.to_string(),
        config_echo: config_echo.to_string(),
        level: entries,
        global,
    };
    let text =
        toml::to_string(&manifest).map_err(|e| corrupt(format!("manifest encoding: {e}")))?;
    // manifest last: a directory without one is never mistaken for an archive
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: toml::Table = text
        .parse()
        .map_err(|e| corrupt(format!("manifest is not valid TOML: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| corrupt("manifest lacks format_version"))?;
    if version != ARCHIVE_VERSION as i64 {
        return Err(Error::VersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: ARCHIVE_VERSION,
        });
    }
    toml::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))
}

/// Configuration text stored alongside the model, empty when none was saved.
pub fn load_config_echo(dir: impl AsRef<Path>) -> Result<String> {
    Ok(read_manifest(dir.as_ref())?.config_echo)
}

fn parse_seed(s: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| corrupt(format!("invalid seed {s:?}")))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<MrCostsModel> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if m.level.len() != m.n_levels || m.n_levels == 0 {
        return Err(corrupt(format!(
            "manifest declares {} levels but lists {}",
            m.n_levels,
            m.level.len()
        )));
    }
    let n = m.n_space;
    let mut levels = Vec::with_capacity(m.n_levels);
    for (l, e) in m.level.iter().enumerate() {
        let nw = e.n_windows;
        if e.starts.len() != nw
            || e.ranks.len() != nw
            || e.residuals.len() != nw
            || e.noise_floors.len() != nw
            || e.failures.len() != nw
        {
            return Err(corrupt(format!(
                "level {l}: per-window lists disagree with n_windows {nw}"
            )));
        }
        let ldir = level_dir(dir, l);
        let mut fits = Vec::with_capacity(nw);
        for k in 0..nw {
            let r = e.ranks[k];
            if e.starts[k] + e.window_length > m.n_time {
                return Err(corrupt(format!(
                    "level {l} window {k} runs past the record"
                )));
            }
            let v = read_blob(&ldir.join(format!("win{k}.f64bin")), 4 * r + n + 2 * n * r)?;
            let (omega, rest) = v.split_at(2 * r);
            let (amps, rest) = rest.split_at(2 * r);
            let (bg, phi) = rest.split_at(n);
            fits.push(WindowFit {
                spec: WindowSpec {
                    start: e.starts[k],
                    length: e.window_length,
                    level: l,
                    index: k,
                },
                omega: pairs(omega),
                phi: DMatrix::from_vec(n, r, pairs(phi)),
                amplitudes: pairs(amps),
                background: DVector::from_column_slice(bg),
                residual_rel: e.residuals[k],
                noise_floor: e.noise_floors[k],
                failure: (!e.failures[k].is_empty()).then(|| e.failures[k].clone()),
            });
        }
        let n_labels: usize = e.ranks.iter().sum();
        let v = read_blob(&ldir.join("local_bands.f64bin"), n_labels + e.n_bands)?;
        let mut it = v[..n_labels].iter();
        let mut local_labels = Vec::with_capacity(nw);
        for &r in &e.ranks {
            let row = it
                .by_ref()
                .take(r)
                .map(|&x| to_index(x, "local label"))
                .collect::<Result<Vec<_>>>()?;
            if row.iter().any(|&p| p >= e.n_bands) {
                return Err(corrupt(format!("level {l}: local label out of range")));
            }
            local_labels.push(row);
        }
        levels.push(LevelDecomposition {
            level: l,
            config: LevelConfig {
                window_length: e.window_length,
                slide: e.slide,
                rank: e.rank,
                rho: e.rho,
                n_local_bands: e.n_local_bands,
                transform: e.transform,
            },
            fits,
            local_labels,
            centroids: v[n_labels..].to_vec(),
            silhouette: e.silhouette,
            low_confidence: e.low_confidence,
            min_cycles: e.min_cycles,
            n_space: n,
            n_time: m.n_time,
            dt: m.dt,
        });
    }

    let global = match &m.global {
        Some(g) => {
            let n_labels: usize = m.level.iter().map(|e| e.ranks.iter().sum::<usize>()).sum();
            let nb = g.n_bands;
            let v = read_blob(
                &dir.join("global_bands.f64bin"),
                n_labels + 2 * nb + 2 * g.n_scores,
            )?;
            let mut it = v[..n_labels].iter();
            let mut labels = Vec::with_capacity(m.n_levels);
            for e in &m.level {
                let mut per_window = Vec::with_capacity(e.n_windows);
                for &r in &e.ranks {
                    let row = it
                        .by_ref()
                        .take(r)
                        .map(|&x| {
                            if x == -1.0 {
                                Ok(None)
                            } else {
                                let p = to_index(x, "global label")?;
                                if p >= nb {
                                    return Err(corrupt("global label out of range"));
                                }
                                Ok(Some(p))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    per_window.push(row);
                }
                labels.push(per_window);
            }
            let rest = &v[n_labels..];
            let scores = rest[2 * nb..]
                .chunks_exact(2)
                .map(|c| Ok((to_index(c[0], "score K")?, c[1])))
                .collect::<Result<Vec<_>>>()?;
            Some(GlobalBands {
                labels,
                centroids: rest[..nb].to_vec(),
                band_silhouette: rest[nb..2 * nb].to_vec(),
                silhouette: g.silhouette,
                scores,
                low_confidence: g.low_confidence,
                seed: parse_seed(&g.seed)?,
            })
        }
        None => None,
    };

    Ok(MrCostsModel {
        levels,
        n_space: n,
        n_time: m.n_time,
        t0: m.t0,
        dt: m.dt,
        seed: parse_seed(&m.seed)?,
        global,
    })
}
