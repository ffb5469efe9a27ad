//! Multi-level decomposition and global scale separation.
//!
//! Levels are fitted sequentially, each on the band-0 handoff of the one
//! before. The fast bands (`p > 0`) of every level are then pooled, aligned in
//! time onto the level-0 window centers by nearest neighbour, and clustered
//! in `log10|Im ω|` into global bands `G_1..G_P`. `G_0` is the deepest level's
//! local band 0 and is the only band that carries a background.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::cluster::{
    kmeans, nearest_sorted, silhouette_samples, sweep_clusters_with, BandCount, ClusterResult,
    ModeIndex, OmegaFeatures, OmegaTransform, DEFAULT_RESTARTS, LOW_CONFIDENCE_SILHOUETTE,
};
use crate::error::{Error, Result};
use crate::level::{
    assign_local_bands, fit_level, lowpass_handoff, reconstruct_local_band, LevelDecomposition,
};
use crate::snapshot::SnapshotMatrix;
use crate::window::{overlap_reconstruct, LevelConfig, DEEPEST_MIN_CYCLES};

pub const GLOBAL_K_MIN: usize = 2;
pub const GLOBAL_K_MAX: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBands {
    /// Global band per `(level, window, mode)`; `None` for the band-0 modes
    /// of intermediate levels, which were handed down instead.
    pub labels: Vec<Vec<Vec<Option<usize>>>>,
    /// `|Im ω|` centroid per band in 1/time; index 0 is `G_0`.
    pub centroids: Vec<f64>,
    /// Mean silhouette of each band's members (NaN for `G_0`).
    pub band_silhouette: Vec<f64>,
    pub silhouette: f64,
    /// `(K, silhouette)` for every K tried.
    pub scores: Vec<(usize, f64)>,
    pub low_confidence: bool,
    pub seed: u64,
}

impl GlobalBands {
    pub fn n_bands(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrCostsModel {
    pub levels: Vec<LevelDecomposition>,
    pub n_space: usize,
    pub n_time: usize,
    pub t0: f64,
    pub dt: f64,
    /// Seed the levels were fitted with; level `ℓ` used `seed + ℓ`.
    pub seed: u64,
    pub global: Option<GlobalBands>,
}

/// Summary row describing one global band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandInfo {
    pub band: usize,
    /// Centroid `|Im ω|`, radians per time unit.
    pub centroid_omega: f64,
    /// Cycles per time unit.
    pub frequency: f64,
    pub period: f64,
    pub n_modes: usize,
    pub silhouette: f64,
}

impl MrCostsModel {
    pub fn deepest(&self) -> &LevelDecomposition {
        self.levels.last().expect("model has at least one level")
    }

    pub fn global(&self) -> Result<&GlobalBands> {
        self.global.as_ref().ok_or(Error::MissingGlobalBands)
    }

    pub fn n_global_bands(&self) -> Result<usize> {
        Ok(self.global()?.n_bands())
    }

    pub fn band_table(&self) -> Result<Vec<BandInfo>> {
        let g = self.global()?;
        let mut counts = vec![0usize; g.n_bands()];
        for level in &g.labels {
            for window in level {
                for label in window.iter().flatten() {
                    counts[*label] += 1;
                }
            }
        }
        Ok((0..g.n_bands())
            .map(|p| {
                let w = g.centroids[p];
                BandInfo {
                    band: p,
                    centroid_omega: w,
                    frequency: w / (2.0 * PI),
                    period: 2.0 * PI / w,
                    n_modes: counts[p],
                    silhouette: g.band_silhouette[p],
                }
            })
            .collect())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_time)
            .map(|i| self.t0 + self.dt * i as f64)
            .collect()
    }

    /// Default edge exclusion: half the longest window.
    pub fn default_edge_trim(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.config.window_length)
            .max()
            .unwrap_or(0)
            / 2
    }
}

/// Fit all levels; level `ℓ + 1` runs on the band-0 handoff of level `ℓ`.
pub fn fit(data: &SnapshotMatrix, configs: &[LevelConfig], seed: u64) -> Result<MrCostsModel> {
    if configs.is_empty() {
        return Err(Error::Config("at least one level is required".into()));
    }
    for (i, pair) in configs.windows(2).enumerate() {
        if pair[1].window_length <= pair[0].window_length {
            return Err(Error::NonIncreasingWindows {
                level: i + 1,
                prev: pair[0].window_length,
                next: pair[1].window_length,
            });
        }
    }
    for c in configs {
        c.validate()?;
    }
    let mut levels = Vec::with_capacity(configs.len());
    let mut input = data.clone();
    for (l, config) in configs.iter().enumerate() {
        let level = fit_level(&input, config, l, seed.wrapping_add(l as u64))?;
        if l + 1 < configs.len() {
            input = lowpass_handoff(&level, &input)?;
        }
        levels.push(level);
    }
    // nothing is handed down from the deepest level, so it resolves what it can
    let deepest = levels.len() - 1;
    let last = &mut levels[deepest];
    last.min_cycles = DEEPEST_MIN_CYCLES;
    assign_local_bands(last, seed.wrapping_add(deepest as u64))?;
    Ok(MrCostsModel {
        levels,
        n_space: data.n_space(),
        n_time: data.n_time(),
        t0: data.times()[0],
        dt: data.dt(),
        seed,
        global: None,
    })
}

/// Fast-band eigenvalues of every level resampled onto the level-0 windows.
#[derive(Debug, Clone)]
pub struct InterpolatedOmega {
    /// `log10|Im ω|` features; `source_index` names the original mode.
    pub features: OmegaFeatures,
    /// Level-0 window each entry was resampled onto.
    pub base_window: Vec<usize>,
}

/// Nearest window center for each query center; ties go to the earlier window.
pub fn nearest_centers(centers: &[f64], queries: &[f64]) -> Vec<usize> {
    queries
        .iter()
        .map(|&q| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &c) in centers.iter().enumerate() {
                let d = (c - q).abs();
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

pub fn interpolate_omega_global(model: &MrCostsModel) -> InterpolatedOmega {
    let base: Vec<f64> = model.levels[0]
        .fits
        .iter()
        .map(|f| f.spec.center())
        .collect();
    let mut modes = Vec::new();
    let mut base_window = Vec::new();
    for level in &model.levels {
        let alive: Vec<usize> = level
            .fits
            .iter()
            .filter(|f| !f.failed())
            .map(|f| f.spec.index)
            .collect();
        let centers: Vec<f64> = alive.iter().map(|&k| level.fits[k].spec.center()).collect();
        let nearest = nearest_centers(&centers, &base);
        for (b, &n) in nearest.iter().enumerate() {
            let fit = &level.fits[alive[n]];
            for (j, w) in fit.omega.iter().enumerate() {
                if level.local_labels[fit.spec.index][j] > 0 {
                    let idx = ModeIndex {
                        level: level.level,
                        window: fit.spec.index,
                        mode: j,
                    };
                    modes.push((idx, *w));
                    base_window.push(b);
                }
            }
        }
    }
    InterpolatedOmega {
        features: OmegaFeatures::from_modes(&modes, OmegaTransform::Log10AbsImag),
        base_window,
    }
}

/// Cluster the pooled fast bands of all levels into global bands.
///
/// Clustering always uses `log10|Im ω|`; bands spanning decades cannot be
/// separated reliably on a linear scale.
pub fn global_separation(
    model: &mut MrCostsModel,
    n_bands: BandCount,
    k_range: (usize, usize),
    seed: u64,
) -> Result<()> {
    if let BandCount::Fixed(k) = n_bands {
        if k < 2 {
            return Err(Error::Config(format!(
                "global separation needs at least 2 bands, got {k}"
            )));
        }
    }
    let interp = interpolate_omega_global(model);
    let values = interp.features.clusterable();
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let (result, scores) = match n_bands {
        BandCount::Fixed(k) => {
            let r = kmeans(&values, k, seed, DEFAULT_RESTARTS)?;
            let s = vec![(k, r.silhouette)];
            (r, s)
        }
        BandCount::Auto => {
            let (k_min, k_max) = k_range;
            let k_max = k_max.min(distinct.len());
            // bands closer than one frequency bin of the longest window are one band
            let longest = model
                .levels
                .iter()
                .map(|l| l.config.window_length)
                .max()
                .unwrap_or(1);
            let bin = 2.0 * PI / (longest as f64 * model.dt);
            let separated = |r: &ClusterResult| {
                r.centroids
                    .windows(2)
                    .all(|c| 10f64.powf(c[1]) - 10f64.powf(c[0]) >= bin)
            };
            let sweep =
                sweep_clusters_with(&values, k_min, k_max, seed, DEFAULT_RESTARTS, separated)?;
            (sweep.result, sweep.scores)
        }
    };

    // assignments of the resampled entries, mapped back to the source modes
    let entry_labels = interp.features.expand_labels(&result.labels);
    let assigned: BTreeMap<ModeIndex, usize> = interp
        .features
        .source_index
        .iter()
        .copied()
        .zip(entry_labels)
        .collect();

    let deepest = model.levels.len() - 1;
    let mut labels: Vec<Vec<Vec<Option<usize>>>> = model
        .levels
        .iter()
        .map(|l| l.fits.iter().map(|f| vec![None; f.rank()]).collect())
        .collect();
    for level in &model.levels {
        for fit in level.fits.iter().filter(|f| !f.failed()) {
            let k = fit.spec.index;
            for (j, w) in fit.omega.iter().enumerate() {
                let local = level.local_labels[k][j];
                labels[level.level][k][j] = if local == 0 {
                    (level.level == deepest).then_some(0)
                } else {
                    let idx = ModeIndex {
                        level: level.level,
                        window: k,
                        mode: j,
                    };
                    // windows never nearest to a level-0 center fall back to
                    // the nearest centroid
                    let band = assigned.get(&idx).copied().unwrap_or_else(|| {
                        let im = w.im.abs();
                        if im > 0.0 {
                            nearest_sorted(&result.centroids, im.log10())
                        } else {
                            0
                        }
                    });
                    Some(band + 1)
                };
            }
        }
    }

    let k = result.k();
    let mut band_silhouette = vec![f64::NAN; k + 1];
    if k >= 2 {
        let samples = silhouette_samples(&values, &result.labels)?;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (s, &l) in samples.iter().zip(&result.labels) {
            sums[l] += s;
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                band_silhouette[c + 1] = sums[c] / counts[c] as f64;
            }
        }
    }

    let mut centroids = Vec::with_capacity(k + 1);
    centroids.push(model.levels[deepest].centroids[0]);
    centroids.extend(result.centroids.iter().map(|c| 10f64.powf(*c)));

    model.global = Some(GlobalBands {
        labels,
        centroids,
        band_silhouette,
        silhouette: result.silhouette,
        low_confidence: result.silhouette < LOW_CONFIDENCE_SILHOUETTE,
        scores,
        seed,
    });
    Ok(())
}

fn check_band(model: &MrCostsModel, p: usize) -> Result<()> {
    let n = model.n_global_bands()?;
    if p >= n {
        return Err(Error::BandOutOfRange {
            band: p,
            n_bands: n,
        });
    }
    Ok(())
}

/// Contribution of global band `p`. `G_0` includes the deepest level's
/// window backgrounds; every other band carries none.
pub fn reconstruct_global_band(model: &MrCostsModel, p: usize) -> Result<DMatrix<f64>> {
    check_band(model, p)?;
    if p == 0 {
        return reconstruct_local_band(model.deepest(), 0);
    }
    let g = model.global()?;
    let mut out = DMatrix::zeros(model.n_space, model.n_time);
    for level in &model.levels {
        let labels = &g.labels[level.level];
        out += overlap_reconstruct(
            &level.fits,
            |k, j| labels[k][j] == Some(p),
            false,
            model.n_space,
            model.n_time,
            model.dt,
        )?;
    }
    Ok(out)
}

/// Sum of the given global bands, background included only with band 0.
pub fn aggregate_bands(model: &MrCostsModel, bands: &[usize]) -> Result<DMatrix<f64>> {
    if bands.is_empty() {
        return Err(Error::Config("no bands selected".into()));
    }
    for &p in bands {
        check_band(model, p)?;
    }
    let set: BTreeSet<usize> = bands.iter().copied().collect();
    let g = model.global()?;
    let deepest = model.levels.len() - 1;
    let mut out = DMatrix::zeros(model.n_space, model.n_time);
    for level in &model.levels {
        let labels = &g.labels[level.level];
        out += overlap_reconstruct(
            &level.fits,
            |k, j| labels[k][j].is_some_and(|b| set.contains(&b)),
            level.level == deepest && set.contains(&0),
            model.n_space,
            model.n_time,
            model.dt,
        )?;
    }
    Ok(out)
}

/// Full reconstruction: every level's fast bands plus the deepest level's
/// complete fit with its background.
pub fn reconstruct_full(model: &MrCostsModel) -> Result<DMatrix<f64>> {
    let deepest = model.levels.len() - 1;
    let mut out = DMatrix::zeros(model.n_space, model.n_time);
    for level in &model.levels {
        let is_deepest = level.level == deepest;
        out += overlap_reconstruct(
            &level.fits,
            |k, j| is_deepest || level.local_labels[k][j] > 0,
            is_deepest,
            model.n_space,
            model.n_time,
            model.dt,
        )?;
    }
    Ok(out)
}

/// Frobenius relative error in percent over `edge_trim..n_time − edge_trim`.
pub fn relative_error(recon: &DMatrix<f64>, truth: &DMatrix<f64>, edge_trim: usize) -> Result<f64> {
    if recon.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs truth {:?}",
            recon.shape(),
            truth.shape()
        )));
    }
    let n_time = truth.ncols();
    if 2 * edge_trim >= n_time {
        return Err(Error::ShapeMismatch(format!(
            "edge trim {edge_trim} leaves no interior in {n_time} snapshots"
        )));
    }
    let len = n_time - 2 * edge_trim;
    let diff = recon.columns(edge_trim, len) - truth.columns(edge_trim, len);
    let denom = truth.columns(edge_trim, len).norm();
    if denom == 0.0 {
        return Ok(if diff.norm() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        });
    }
    Ok(100.0 * diff.norm() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_center_tie_goes_early() {
        // query midway between 4.5 and 6.5
        assert_eq!(
            nearest_centers(&[0.5, 4.5, 6.5], &[5.5, 6.4, 0.0]),
            vec![1, 2, 0]
        );
    }

    #[test]
    fn relative_error_basics() {
        let t = DMatrix::from_fn(2, 10, |i, j| (i + j) as f64 + 1.0);
        assert_eq!(relative_error(&t, &t, 0).unwrap(), 0.0);
        assert!(matches!(
            relative_error(&t, &t, 5),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(relative_error(&t, &DMatrix::zeros(2, 9), 0).is_err());
    }
}
