//! One decomposition level: windowed fits, local frequency bands and the
//! low-frequency handoff to the next level.

use nalgebra::DMatrix;

use crate::cluster::{
    kmeans, sweep_clusters_with, BandCount, ClusterResult, ModeIndex, OmegaFeatures,
    DEFAULT_RESTARTS,
};
use crate::error::{Error, Result};
use crate::snapshot::SnapshotMatrix;
use crate::varpro::{EigConstraint, VarproSettings, C64};
use crate::window::{
    fit_windows, make_windows, overlap_reconstruct, LevelConfig, WindowFit, MIN_CYCLES,
};

/// Upper end of the local silhouette sweep.
pub const LOCAL_K_MAX: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDecomposition {
    pub level: usize,
    pub config: LevelConfig,
    pub fits: Vec<WindowFit>,
    /// Band per `(window, mode)`; empty rows for failed windows.
    pub local_labels: Vec<Vec<usize>>,
    /// Band centroids as `|Im ω|` in 1/time, ascending.
    pub centroids: Vec<f64>,
    pub silhouette: f64,
    pub low_confidence: bool,
    /// Cycles a mode must complete within its window to leave band 0.
    pub min_cycles: f64,
    pub n_space: usize,
    pub n_time: usize,
    pub dt: f64,
}

impl LevelDecomposition {
    pub fn n_bands(&self) -> usize {
        self.centroids.len()
    }

    pub fn failed_windows(&self) -> usize {
        self.fits.iter().filter(|f| f.failed()).count()
    }

    pub fn median_residual(&self) -> f64 {
        let mut r: Vec<f64> = self
            .fits
            .iter()
            .filter(|f| !f.failed())
            .map(|f| f.residual_rel)
            .collect();
        if r.is_empty() {
            return f64::NAN;
        }
        r.sort_by(f64::total_cmp);
        let n = r.len();
        if n % 2 == 1 {
            r[n / 2]
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2])
        }
    }

    /// Fitted eigenvalues standing above their window's noise floor.
    pub fn resolved_modes(&self) -> Vec<(ModeIndex, C64)> {
        self.modes()
            .into_iter()
            .filter(|(i, _)| self.fits[i.window].resolved(i.mode, self.dt, self.min_cycles))
            .collect()
    }

    /// All fitted eigenvalues tagged with their position.
    pub fn modes(&self) -> Vec<(ModeIndex, C64)> {
        self.fits
            .iter()
            .filter(|f| !f.failed())
            .flat_map(|f| {
                f.omega.iter().enumerate().map(move |(j, w)| {
                    (
                        ModeIndex {
                            level: self.level,
                            window: f.spec.index,
                            mode: j,
                        },
                        *w,
                    )
                })
            })
            .collect()
    }

    pub fn label(&self, window: usize, mode: usize) -> usize {
        self.local_labels[window][mode]
    }
}

/// Fit every window of a level and cluster the eigenvalues into local bands.
pub fn fit_level(
    data: &SnapshotMatrix,
    config: &LevelConfig,
    level: usize,
    seed: u64,
) -> Result<LevelDecomposition> {
    config.validate()?;
    let specs = make_windows(data.n_time(), config.window_length, config.slide, level)?;
    let settings = VarproSettings::new(config.rank);
    let constraint = EigConstraint::new(config.rho)?;
    let fits = fit_windows(data, &specs, &settings, &constraint);
    if fits.iter().all(|f| f.failed()) {
        return Err(Error::AllWindowsFailed(fits.len()));
    }

    let mut decomposition = LevelDecomposition {
        level,
        config: config.clone(),
        local_labels: fits.iter().map(|f| vec![0; f.rank()]).collect(),
        fits,
        centroids: Vec::new(),
        silhouette: 0.0,
        low_confidence: false,
        min_cycles: MIN_CYCLES,
        n_space: data.n_space(),
        n_time: data.n_time(),
        dt: data.dt(),
    };
    assign_local_bands(&mut decomposition, seed)?;
    Ok(decomposition)
}

/// Band 0 collects every mode the level cannot resolve: too slow to complete
/// a cycle in the window, below the noise floor, or cancelling against
/// another pair. It is handed down to the next level rather than discarded.
/// Resolved modes are clustered into bands `1..`.
pub(crate) fn assign_local_bands(level: &mut LevelDecomposition, seed: u64) -> Result<()> {
    let modes = level.resolved_modes();
    let features = OmegaFeatures::from_modes(&modes, level.config.transform);
    let values = features.clusterable();
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let fixed_k = match level.config.n_local_bands {
        BandCount::Fixed(k) => Some(k - 1),
        BandCount::Auto => None,
    };
    let (labels, feature_centroids, silhouette, low_confidence) = if values.is_empty() {
        (Vec::new(), Vec::new(), f64::NAN, true)
    } else if distinct.len() < 2 || fixed_k == Some(1) {
        let c = values.iter().sum::<f64>() / values.len() as f64;
        (vec![0; values.len()], vec![c], f64::NAN, false)
    } else {
        let result = match fixed_k {
            Some(k) => kmeans(&values, k.min(distinct.len()), seed, DEFAULT_RESTARTS)?,
            None => {
                let k_max = (LOCAL_K_MAX - 1).min(distinct.len());
                {
                    let transform = level.config.transform;
                    let bin =
                        2.0 * std::f64::consts::PI / (level.config.window_length as f64 * level.dt);
                    let separated = |r: &ClusterResult| {
                        r.centroids
                            .windows(2)
                            .all(|c| transform.invert(c[1]) - transform.invert(c[0]) >= bin)
                    };
                    sweep_clusters_with(
                        &values,
                        2,
                        k_max.max(2),
                        seed,
                        DEFAULT_RESTARTS,
                        separated,
                    )?
                    .result
                }
            }
        };
        let low = result.silhouette < crate::cluster::LOW_CONFIDENCE_SILHOUETTE;
        (result.labels, result.centroids, result.silhouette, low)
    };

    for row in level.local_labels.iter_mut() {
        row.fill(0);
    }
    let all_labels = features.expand_labels(&labels);
    for (idx, label) in features.source_index.iter().zip(all_labels) {
        level.local_labels[idx.window][idx.mode] = label + 1;
    }

    // band 0 centroid: the slow modes, which sit below every resolved band
    let cutoff = level.min_cycles * 2.0 * std::f64::consts::PI
        / (level.config.window_length as f64 * level.dt);
    let slow: Vec<f64> = level
        .modes()
        .iter()
        .map(|(_, w)| w.im.abs())
        .filter(|im| *im < cutoff)
        .collect();
    let slow_centroid = if slow.is_empty() {
        0.0
    } else {
        slow.iter().sum::<f64>() / slow.len() as f64
    };
    let transform = level.config.transform;
    level.centroids = std::iter::once(slow_centroid)
        .chain(feature_centroids.iter().map(|c| transform.invert(*c)))
        .collect();
    level.silhouette = silhouette;
    level.low_confidence = low_confidence;
    Ok(())
}

/// Contribution of local band `p`; the window backgrounds are added for `p = 0`.
pub fn reconstruct_local_band(level: &LevelDecomposition, p: usize) -> Result<DMatrix<f64>> {
    if p >= level.n_bands() {
        return Err(Error::BandOutOfRange {
            band: p,
            n_bands: level.n_bands(),
        });
    }
    overlap_reconstruct(
        &level.fits,
        |k, j| level.local_labels[k][j] == p,
        p == 0,
        level.n_space,
        level.n_time,
        level.dt,
    )
}

/// Reconstruction from every mode plus background.
pub fn reconstruct_level(level: &LevelDecomposition) -> Result<DMatrix<f64>> {
    overlap_reconstruct(
        &level.fits,
        |_, _| true,
        true,
        level.n_space,
        level.n_time,
        level.dt,
    )
}

/// Band-0 reconstruction on the original grid: input to the next level.
pub fn lowpass_handoff(
    level: &LevelDecomposition,
    data: &SnapshotMatrix,
) -> Result<SnapshotMatrix> {
    if data.n_time() != level.n_time || data.n_space() != level.n_space {
        return Err(Error::ShapeMismatch(format!(
            "level fitted on {}x{}, data is {}x{}",
            level.n_space,
            level.n_time,
            data.n_space(),
            data.n_time()
        )));
    }
    data.with_values(reconstruct_local_band(level, 0)?)
}
