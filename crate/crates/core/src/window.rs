//! Sliding windows, per-window fits and overlap-weighted reconstruction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{BandCount, OmegaTransform};
use crate::error::{Error, Result};
use crate::snapshot::SnapshotMatrix;
use crate::varpro::{
    init_eigenvalue_candidates, varpro_solve, EigConstraint, VarproFit, VarproSettings, C64,
};

/// Smallest taper weight; keeps window endpoints covered.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Tolerated imaginary residue of a conjugate-paired reconstruction.
pub const IMAG_RTOL: f64 = 1e-10;
/// Pairs weaker than this fraction of the window norm are not resolved.
pub const MIN_PAIR_SHARE: f64 = 0.15;
/// Oscillations completing fewer cycles than this within a window are
/// indistinguishable from a trend and are left to the next, longer window.
pub const MIN_CYCLES: f64 = 1.5;
/// Cycle requirement at the deepest level, which has no longer window to
/// defer to.
pub const DEEPEST_MIN_CYCLES: f64 = 1.0;
/// A pair whose own contribution exceeds this multiple of the whole fit
/// cancels against other pairs and cannot stand alone in a band.
pub const MAX_PAIR_GAIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub start: usize,
    pub length: usize,
    pub level: usize,
    pub index: usize,
}

impl WindowSpec {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn covers(&self, i: usize) -> bool {
        i >= self.start && i < self.end()
    }

    /// Center in snapshot units.
    pub fn center(&self) -> f64 {
        self.start as f64 + 0.5 * (self.length - 1) as f64
    }
}

/// Fitted model of one window. Failed windows keep their background but
/// carry no modes and are excluded from blending.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFit {
    pub spec: WindowSpec,
    pub omega: Vec<C64>,
    /// n_space × r, unit-norm columns.
    pub phi: DMatrix<C64>,
    pub amplitudes: Vec<C64>,
    pub background: DVector<f64>,
    pub residual_rel: f64,
    /// Singular-value threshold a mode pair must exceed to count as
    /// resolved; see [`noise_floor`].
    pub noise_floor: f64,
    pub failure: Option<String>,
}

impl WindowFit {
    pub fn rank(&self) -> usize {
        self.omega.len()
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Largest singular value of the part of the fitted field that only the
    /// conjugate pair containing mode `j` can explain, i.e. the fit projected
    /// onto the pair's time dynamics orthogonalized against all other pairs.
    /// Pairs that duplicate or cancel each other score near zero.
    pub fn pair_strength(&self, j: usize, dt: f64) -> f64 {
        self.pair_metrics(j, dt).unique
    }

    fn pair_metrics(&self, j: usize, dt: f64) -> PairMetrics {
        let r = self.rank();
        let n = self.background.len();
        let m = self.spec.length;
        let target = j - j % 2;
        // real dynamics and coefficients, with the tested pair ordered last
        let order: Vec<usize> = (0..r)
            .step_by(2)
            .filter(|&q| q != target)
            .chain(std::iter::once(target))
            .collect();
        let mut dynamics = DMatrix::<f64>::zeros(m, r);
        let mut coefs = DMatrix::<f64>::zeros(r, n);
        for (slot, &q) in order.iter().enumerate() {
            let w = self.omega[q];
            for i in 0..m {
                let tau = i as f64 * dt;
                let e = (w.re * tau).exp();
                let (sn, c) = (w.im * tau).sin_cos();
                dynamics[(i, 2 * slot)] = e * c;
                dynamics[(i, 2 * slot + 1)] = e * sn;
            }
            for s in 0..n {
                let u = self.phi[(s, q)] * self.amplitudes[q];
                coefs[(2 * slot, s)] = 2.0 * u.re;
                coefs[(2 * slot + 1, s)] = -2.0 * u.im;
            }
        }
        // D·C and R·C share singular values for D = QR
        let own_r = dynamics.columns(r - 2, 2).into_owned().qr().r();
        let own = top_singular_value(&(own_r * coefs.rows(r - 2, 2)));
        // Qᵀ·fit = R·coefs; the last two rows belong to the tested pair alone
        let rc = dynamics.qr().r() * coefs;
        let unique = top_singular_value(&rc.rows(r - 2, 2).into_owned());
        PairMetrics {
            unique,
            own,
            fit_norm: rc.norm(),
        }
    }

    /// Whether mode `j` is resolved by this window: it completes at least
    /// `min_cycles` cycles, its unique contribution stands above the noise
    /// floor, and it does not lean on cancellation against other pairs.
    pub fn resolved(&self, j: usize, dt: f64, min_cycles: f64) -> bool {
        let duration = self.spec.length as f64 * dt;
        if self.omega[j].im.abs() * duration < min_cycles * 2.0 * std::f64::consts::PI {
            return false;
        }
        let p = self.pair_metrics(j, dt);
        p.unique > self.noise_floor && p.own <= MAX_PAIR_GAIN * p.fit_norm
    }
}

struct PairMetrics {
    unique: f64,
    own: f64,
    fit_norm: f64,
}

/// Largest singular value of a matrix with two rows or two columns.
fn top_singular_value(a: &DMatrix<f64>) -> f64 {
    let g = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    debug_assert_eq!(g.nrows(), 2);
    let half_tr = 0.5 * (g[(0, 0)] + g[(1, 1)]);
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    (half_tr + disc).max(0.0).sqrt()
}

/// Optimal hard threshold coefficient for singular values of an
/// `n × m` matrix with known white-noise level, `β = min/max` aspect ratio.
fn hard_threshold_coefficient(beta: f64) -> f64 {
    let w = (beta + 1.0) + (beta * beta + 14.0 * beta + 1.0).sqrt();
    (2.0 * (beta + 1.0) + 8.0 * beta / w).sqrt()
}

/// Threshold separating coherent mode pairs from fitted noise.
///
/// The noise level is estimated from the residual of the rank-`r` fit,
/// `σ² = ‖R‖² / (n·m − r·(n + 1))`, and scaled by the optimal hard threshold
/// for an `n × m` white-noise matrix. The floor never drops below
/// [`MIN_PAIR_SHARE`]`·‖X‖`, which also covers windows too small to estimate
/// a noise level.
pub fn noise_floor(n: usize, m: usize, rank: usize, data_norm: f64, residual_rel: f64) -> f64 {
    let numeric = MIN_PAIR_SHARE * data_norm;
    let dof = (n * m) as f64 - (rank * (n + 1)) as f64;
    if dof < 1.0 {
        return numeric;
    }
    let sigma = residual_rel * data_norm / dof.sqrt();
    let (lo, hi) = (n.min(m) as f64, n.max(m) as f64);
    let threshold = hard_threshold_coefficient(lo / hi) * hi.sqrt() * sigma;
    threshold.max(numeric)
}

/// Per-level hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub window_length: usize,
    pub slide: usize,
    pub rank: usize,
    /// Bound on `|Re ω|` in 1/time.
    pub rho: f64,
    pub n_local_bands: BandCount,
    pub transform: OmegaTransform,
}

impl LevelConfig {
    /// Defaults: slide of 10% of the window, `ρ = 0.1 / duration`,
    /// `r/2` local bands and `|Im ω|` features.
    pub fn new(window_length: usize, rank: usize, dt: f64) -> Self {
        LevelConfig {
            window_length,
            slide: slide_from_fraction(window_length, 0.1),
            rank,
            rho: EigConstraint::for_duration(window_length as f64 * dt).rho,
            n_local_bands: BandCount::Fixed((rank / 2).max(2)),
            transform: OmegaTransform::AbsImag,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 {
            return Err(Error::Config("window_length must be at least 2".into()));
        }
        if self.slide < 1 || self.slide > self.window_length {
            return Err(Error::Config(format!(
                "slide must lie in [1, {}], got {}",
                self.window_length, self.slide
            )));
        }
        if self.rank < 2 || !self.rank.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rank must be even, got {}",
                self.rank
            )));
        }
        if self.rank >= self.window_length {
            return Err(Error::Config(format!(
                "rank {} must be smaller than window_length {}",
                self.rank, self.window_length
            )));
        }
        EigConstraint::new(self.rho)?;
        if let BandCount::Fixed(k) = self.n_local_bands {
            if k < 2 {
                return Err(Error::Config(format!(
                    "n_local_bands must be >= 2, got {k}"
                )));
            }
        }
        Ok(())
    }
}

pub fn slide_from_fraction(window_length: usize, fraction: f64) -> usize {
    ((window_length as f64 * fraction).round() as usize).clamp(1, window_length)
}

/// Windows at `0, slide, 2·slide, …`; a final window anchored at
/// `n_time − window_length` is added when the regular grid stops short.
pub fn make_windows(
    n_time: usize,
    window_length: usize,
    slide: usize,
    level: usize,
) -> Result<Vec<WindowSpec>> {
    if window_length > n_time {
        return Err(Error::WindowTooLong {
            window_length,
            n_time,
        });
    }
    if slide == 0 {
        return Err(Error::Config("slide must be positive".into()));
    }
    let mut starts: Vec<usize> = (0..=n_time - window_length).step_by(slide).collect();
    let last = *starts.last().expect("window fits at least once");
    if last + window_length < n_time {
        starts.push(n_time - window_length);
    }
    Ok(starts
        .into_iter()
        .enumerate()
        .map(|(index, start)| WindowSpec {
            start,
            length: window_length,
            level,
            index,
        })
        .collect())
}

/// Remove the per-row time mean. Returns the demeaned window and the means.
pub fn demean_window(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let m = x.ncols() as f64;
    let mean = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.sum() / m));
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    (out, mean)
}

/// Squared-cosine taper peaking at the window center, floored at
/// [`WEIGHT_FLOOR`].
pub fn window_weights(length: usize) -> Vec<f64> {
    if length < 2 {
        return vec![1.0; length];
    }
    let denom = (length - 1) as f64;
    (0..length)
        .map(|i| {
            let k = i.min(length - 1 - i) as f64;
            (std::f64::consts::PI * k / denom)
                .sin()
                .powi(2)
                .max(WEIGHT_FLOOR)
        })
        .collect()
}

/// Total taper weight per time index over the windows that survived fitting.
pub fn coverage(fits: &[WindowFit], n_time: usize) -> Vec<f64> {
    let mut total = vec![0.0; n_time];
    for fit in fits.iter().filter(|f| !f.failed()) {
        let w = window_weights(fit.spec.length);
        for (i, wi) in w.iter().enumerate() {
            total[fit.spec.start + i] += wi;
        }
    }
    total
}

/// Fit one window of `data`.
pub fn fit_window(
    data: &SnapshotMatrix,
    spec: WindowSpec,
    settings: &VarproSettings,
    constraint: &EigConstraint,
) -> WindowFit {
    let x = data.values().columns(spec.start, spec.length).into_owned();
    let t = &data.times()[spec.start..spec.end()];
    let (xd, background) = demean_window(&x);
    let n = x.nrows();

    let empty = |failure: Option<String>, background: DVector<f64>| WindowFit {
        spec,
        omega: Vec::new(),
        phi: DMatrix::zeros(n, 0),
        amplitudes: Vec::new(),
        background,
        residual_rel: 0.0,
        noise_floor: 0.0,
        failure,
    };

    // nothing left after demeaning: the window is pure background
    if xd.iter().all(|v| *v == 0.0) {
        return empty(None, background);
    }
    // keep the better of the alternative starts; the first error reports a failure
    let fit = init_eigenvalue_candidates(&xd, t, settings.rank).and_then(|inits| {
        let mut best: Option<Result<VarproFit>> = None;
        for init in &inits {
            let f = varpro_solve(&xd, t, init, settings, constraint);
            best = match (best, f) {
                (None, f) => Some(f),
                (Some(Err(_)), Ok(f)) => Some(Ok(f)),
                (Some(Ok(b)), Ok(f)) if f.residual_rel < b.residual_rel => Some(Ok(f)),
                (b, _) => b,
            };
        }
        best.expect("at least one initial guess")
    });
    match fit {
        Ok(f) => WindowFit {
            noise_floor: noise_floor(n, spec.length, f.omega.len(), xd.norm(), f.residual_rel),
            spec,
            omega: f.omega,
            phi: f.modes,
            amplitudes: f.amplitudes,
            background,
            residual_rel: f.residual_rel,
            failure: None,
        },
        Err(e) => empty(Some(e.to_string()), background),
    }
}

/// Fit every window; runs in parallel, results ordered by window index.
pub fn fit_windows(
    data: &SnapshotMatrix,
    specs: &[WindowSpec],
    settings: &VarproSettings,
    constraint: &EigConstraint,
) -> Vec<WindowFit> {
    specs
        .par_iter()
        .map(|spec| fit_window(data, *spec, settings, constraint))
        .collect()
}

/// Evaluate one window's selected modes on its own time span.
///
/// Returns an `n_space × length` real block.
pub fn window_partial(
    fit: &WindowFit,
    select: impl Fn(usize) -> bool,
    include_background: bool,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let n = fit.background.len();
    let len = fit.spec.length;
    let mut acc = DMatrix::<C64>::zeros(n, len);
    for j in (0..fit.rank()).filter(|&j| select(j)) {
        let w = fit.omega[j];
        let b = fit.amplitudes[j];
        let phi = fit.phi.column(j);
        for i in 0..len {
            let e = (w * (i as f64 * dt)).exp() * b;
            for s in 0..n {
                acc[(s, i)] += phi[s] * e;
            }
        }
    }
    let re_max = acc.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let im_max = acc.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if im_max > IMAG_RTOL * re_max.max(f64::MIN_POSITIVE) && im_max > 1e-300 {
        return Err(Error::ImaginaryResidue {
            window: fit.spec.index,
            ratio: im_max / re_max.max(f64::MIN_POSITIVE),
        });
    }
    let mut out = acc.map(|z| z.re);
    if include_background {
        for mut col in out.column_iter_mut() {
            col += &fit.background;
        }
    }
    Ok(out)
}

/// Blend per-window reconstructions with the center-peaked taper.
///
/// `select(k, j)` picks mode `j` of window `k`. Each time index is divided by
/// the total taper weight of the surviving windows covering it, so the blend
/// weights form a partition of unity independent of the selection.
pub fn overlap_reconstruct(
    fits: &[WindowFit],
    select: impl Fn(usize, usize) -> bool + Sync,
    include_background: bool,
    n_space: usize,
    n_time: usize,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let total = coverage(fits, n_time);
    if let Some(index) = total.iter().position(|w| *w <= 0.0) {
        let window = fits
            .iter()
            .filter(|f| f.failed())
            .min_by_key(|f| (f.spec.center() - index as f64).abs() as usize)
            .map(|f| f.spec.index);
        return Err(Error::UncoveredTime { index, window });
    }

    let partials: Vec<DMatrix<f64>> = fits
        .par_iter()
        .filter(|f| !f.failed())
        .map(|f| {
            let k = f.spec.index;
            window_partial(f, |j| select(k, j), include_background, dt)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = DMatrix::zeros(n_space, n_time);
    // fixed reduction order: by window index
    for (fit, part) in fits.iter().filter(|f| !f.failed()).zip(&partials) {
        let w = window_weights(fit.spec.length);
        for (i, wi) in w.iter().enumerate() {
            let col = fit.spec.start + i;
            let scale = wi / total[col];
            let mut dst = out.column_mut(col);
            dst.axpy(scale, &part.column(i), 1.0);
        }
    }
    Ok(out)
}
