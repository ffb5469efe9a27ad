//! Seeded synthetic multi-scale fields with known ground truth, plus
//! independent frequency oracles used to check fits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Schur, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::SnapshotMatrix;
use crate::varpro::C64;

/// Spatial shape of a component over the flattened space axis
/// `x_s = s / n_space`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// `cos(2π k x + phase) · cos(2π f t)`
    Standing {
        wavenumber: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `cos(2π k x − 2π f t)`; give either the wavenumber or the phase
    /// speed (in domain lengths per time unit, `k = f / speed`).
    Traveling {
        #[serde(default)]
        wavenumber: Option<f64>,
        #[serde(default)]
        speed: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    /// Cycles per time unit.
    pub frequency: f64,
    #[serde(default)]
    pub growth: f64,
    pub amplitude: f64,
    pub pattern: Pattern,
    #[serde(default)]
    pub onset: Option<f64>,
    #[serde(default)]
    pub offset: Option<f64>,
}

impl ComponentSpec {
    pub fn traveling(frequency: f64, amplitude: f64, wavenumber: f64) -> Self {
        ComponentSpec {
            frequency,
            growth: 0.0,
            amplitude,
            pattern: Pattern::Traveling {
                wavenumber: Some(wavenumber),
                speed: None,
            },
            onset: None,
            offset: None,
        }
    }

    pub fn standing(frequency: f64, amplitude: f64, wavenumber: f64, phase: f64) -> Self {
        ComponentSpec {
            frequency,
            growth: 0.0,
            amplitude,
            pattern: Pattern::Standing { wavenumber, phase },
            onset: None,
            offset: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return bad(format!(
                "component frequency must be > 0, got {}",
                self.frequency
            ));
        }
        if !self.amplitude.is_finite() || !self.growth.is_finite() {
            return bad("component amplitude and growth must be finite".into());
        }
        if let (Some(on), Some(off)) = (self.onset, self.offset) {
            if on >= off {
                return bad(format!("onset {on} must precede offset {off}"));
            }
        }
        if let Pattern::Traveling { wavenumber, speed } = &self.pattern {
            match (wavenumber, speed) {
                (Some(k), None) if k.is_finite() => {}
                (None, Some(c)) if c.is_finite() && *c != 0.0 => {}
                _ => {
                    return bad(
                        "traveling pattern needs exactly one of wavenumber or nonzero speed".into(),
                    )
                }
            }
        }
        Ok(())
    }

    fn value(&self, x: f64, t: f64) -> f64 {
        if self.onset.is_some_and(|on| t < on) || self.offset.is_some_and(|off| t >= off) {
            return 0.0;
        }
        let envelope = self.amplitude * (self.growth * t).exp();
        let phase_t = 2.0 * PI * self.frequency * t;
        match &self.pattern {
            Pattern::Standing { wavenumber, phase } => {
                envelope * (2.0 * PI * wavenumber * x + phase).cos() * phase_t.cos()
            }
            Pattern::Traveling { wavenumber, speed } => {
                let k = wavenumber.unwrap_or_else(|| self.frequency / speed.unwrap_or(1.0));
                envelope * (2.0 * PI * k * x - phase_t).cos()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    /// Sum of all components plus noise.
    pub data: SnapshotMatrix,
    /// One noiseless field per component.
    pub truths: Vec<DMatrix<f64>>,
    pub noise_sigma: f64,
}

impl Synthetic {
    /// Sum of the component truths (the noiseless signal).
    pub fn clean(&self) -> DMatrix<f64> {
        let (n, m) = (self.data.n_space(), self.data.n_time());
        self.truths
            .iter()
            .fold(DMatrix::zeros(n, m), |acc, t| acc + t)
    }
}

/// Render the components on an `n_space × n_time` grid starting at `t = 0`.
/// Gaussian white noise with standard deviation `noise_sigma` is added
/// independently to every sample.
pub fn generate(
    components: &[ComponentSpec],
    n_space: usize,
    n_time: usize,
    dt: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Synthetic> {
    if n_space == 0 || n_time < 2 {
        return Err(Error::Config(format!("grid {n_space}x{n_time} too small")));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    for c in components {
        c.validate()?;
    }
    let truths: Vec<DMatrix<f64>> = components
        .iter()
        .map(|c| {
            DMatrix::from_fn(n_space, n_time, |s, j| {
                c.value(s as f64 / n_space as f64, j as f64 * dt)
            })
        })
        .collect();
    let mut values = truths
        .iter()
        .fold(DMatrix::zeros(n_space, n_time), |acc, t| acc + t);
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        // snapshot-major order, matching the storage layout
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data = SnapshotMatrix::from_grid(values, 0.0, dt)?;
    Ok(Synthetic {
        data,
        truths,
        noise_sigma,
    })
}

/// Noise level giving the requested signal-to-noise power ratio.
pub fn noise_sigma_for_snr(signal: &DMatrix<f64>, snr: f64) -> f64 {
    let power = signal.norm_squared() / signal.len() as f64;
    (power / snr).sqrt()
}

/// Continuous-time eigenvalues of noiseless exponential data via linear
/// prediction: fit `x[k + r] = Σ c_i x[k + i]` jointly over all space
/// points, then take the roots of the characteristic polynomial through its
/// companion matrix. Returned sorted by imaginary part, then real part.
pub fn oracle_exact_dmd(x: &DMatrix<f64>, t: &[f64], r: usize) -> Result<Vec<C64>> {
    let (n, m) = x.shape();
    if r == 0 || m <= r || t.len() != m {
        return Err(Error::Config(format!(
            "cannot fit order {r} to {m} snapshots"
        )));
    }
    let dt = (t[m - 1] - t[0]) / (m - 1) as f64;
    let rows = n * (m - r);
    let mut a = DMatrix::zeros(rows, r);
    let mut b = DMatrix::zeros(rows, 1);
    for s in 0..n {
        for k in 0..m - r {
            let row = s * (m - r) + k;
            for i in 0..r {
                a[(row, i)] = x[(s, k + i)];
            }
            b[(row, 0)] = x[(s, k + r)];
        }
    }
    let svd = SVD::new(a, true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&v| v > 1e-10 * smax)
        .count();
    if smax == 0.0 || rank < r {
        return Err(Error::RankDeficientWindow { rank, requested: r });
    }
    let coef = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::NumericalBreakdown(e.to_string()))?;
    // companion matrix of λ^r − Σ c_i λ^i
    let mut comp = DMatrix::zeros(r, r);
    for i in 1..r {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..r {
        comp[(i, r - 1)] = coef[(i, 0)];
    }
    let roots = Schur::try_new(comp, 1e-15, 10_000)
        .ok_or_else(|| Error::NumericalBreakdown("companion eigenvalues did not converge".into()))?
        .complex_eigenvalues();
    let mut omega: Vec<C64> = roots.iter().map(|l| l.ln() / dt).collect();
    omega.sort_by(|p, q| p.im.total_cmp(&q.im).then(p.re.total_cmp(&q.re)));
    Ok(omega)
}

/// Frequencies (cycles per time unit) of the `n_peaks` strongest local
/// maxima of the periodogram of `series`. On white noise the result is not
/// stable and should only be used to check that peaks exist.
pub fn oracle_fft_peaks(series: &[f64], dt: f64, n_peaks: usize) -> Vec<f64> {
    let n = series.len();
    if n < 8 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = series.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[..=n / 2].iter().map(|z| z.norm_sqr()).collect();
    let mut peaks: Vec<(usize, f64)> = (1..power.len())
        .filter(|&k| {
            let left = power[k - 1];
            let right = if k + 1 < power.len() {
                power[k + 1]
            } else {
                0.0
            };
            power[k] > left && power[k] >= right
        })
        .map(|k| (k, power[k]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks
        .into_iter()
        .take(n_peaks)
        .map(|(k, _)| k as f64 / (n as f64 * dt))
        .collect()
}
