//! Constrained optimized DMD on a single window.
//!
//! The window is modelled as `x(τ) = Σ_j φ_j b_j exp(ω_j τ)` with `τ` measured
//! from the window start. Eigenvalues are optimized with Levenberg–Marquardt on
//! the variable-projection residual `(I − Φ Φ⁺) Y`, so the linear coefficients
//! never enter the nonlinear search. After every step `Re(ω)` is clamped into
//! `[−ρ, ρ]`.
//!
//! Real data is fitted with eigenvalues in conjugate pairs `a ± iv`. Each pair
//! is parameterized by `(a, v)` and spans the real basis
//! `e^{aτ} cos(vτ), e^{aτ} sin(vτ)`, which keeps the whole problem real and
//! makes conjugate symmetry exact rather than approximate.

use nalgebra::{Complex, DMatrix, DVector, Schur, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITERS: usize = 10_000;
/// Singular values below this fraction of the largest are treated as zero.
const RANK_RTOL: f64 = 1e-10;
/// Initial eigenvalues explaining less than this fraction of the strongest
/// one's contribution are dropped in favour of placeholder pairs.
const NEGLIGIBLE_ENERGY: f64 = 1e-2;
/// Relative cutoff for the coefficient pseudo-inverse.
const PINV_RTOL: f64 = 1e-8;
const LAMBDA_MAX: f64 = 1e16;

/// Bound on `|Re(ω)|`, in 1/time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigConstraint {
    pub rho: f64,
}

impl EigConstraint {
    pub fn new(rho: f64) -> Result<Self> {
        if !rho.is_finite() || rho < 0.0 {
            return Err(Error::Config(format!(
                "rho must be finite and >= 0, got {rho}"
            )));
        }
        Ok(EigConstraint { rho })
    }

    /// Default bound: at most ~10% amplitude change across a window of the
    /// given duration.
    pub fn for_duration(duration: f64) -> Self {
        EigConstraint {
            rho: 0.1 / duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarproSettings {
    pub rank: usize,
    pub max_iters: usize,
    pub tol_grad: f64,
    pub tol_step: f64,
    /// Stop once an accepted step and its linearized prediction both lower
    /// the cost by less than this fraction.
    pub tol_cost: f64,
    pub lm_lambda0: f64,
}

impl VarproSettings {
    pub fn new(rank: usize) -> Self {
        VarproSettings {
            rank,
            max_iters: 100,
            tol_grad: 1e-8,
            tol_step: 1e-10,
            tol_cost: 1e-9,
            lm_lambda0: 1e-2,
        }
    }

    pub fn validate(&self, window_length: usize) -> Result<()> {
        if self.rank < 2 || !self.rank.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rank must be even and >= 2, got {}",
                self.rank
            )));
        }
        if self.rank >= window_length {
            return Err(Error::Config(format!(
                "rank {} must be smaller than the window length {window_length}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Result of fitting one window.
#[derive(Debug, Clone)]
pub struct VarproFit {
    /// Eigenvalues in 1/time, ordered by pair frequency, `+v` before `−v`.
    pub omega: Vec<C64>,
    /// Unit-norm spatial modes, one column per eigenvalue.
    pub modes: DMatrix<C64>,
    pub amplitudes: Vec<C64>,
    pub residual_rel: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost (half squared residual norm) of every accepted iterate.
    pub accepted_costs: Vec<f64>,
}

/// One conjugate pair in sample units: `ω·dt = a ± iv`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pair {
    a: f64,
    v: f64,
}

fn window_dt(t: &[f64]) -> f64 {
    (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64
}

fn svd(m: DMatrix<f64>) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let mut s = SVD::try_new(m, true, true, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::NumericalBreakdown("SVD did not converge".into()))?;
    s.sort_by_singular_values();
    Ok(s)
}

fn numerical_rank(sv: &DVector<f64>, rtol: f64) -> usize {
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * max).count()
}

/// Stack `delays` time-shifted copies of the window on top of each other.
fn delay_embed(x: &DMatrix<f64>, delays: usize) -> DMatrix<f64> {
    let (n, m) = x.shape();
    let cols = m + 1 - delays;
    DMatrix::from_fn(n * delays, cols, |i, j| x[(i % n, j + i / n)])
}

/// Initial eigenvalues for one window from the exact one-step propagator.
///
/// The window is projected onto its leading left singular vectors, successive
/// snapshots are regressed onto each other and the propagator eigenvalues
/// are mapped to continuous time by `ln(λ)/dt`. When the spatial rank is too
/// small to host `r` eigenvalues (a single sensor, a standing wave) the
/// snapshots are delay-embedded until the rank stops growing. Slots that the
/// data cannot populate are filled with low-frequency placeholder pairs.
pub fn init_eigenvalues(x: &DMatrix<f64>, t: &[f64], r: usize) -> Result<Vec<C64>> {
    let mut candidates = init_eigenvalue_candidates(x, t, r)?;
    Ok(candidates.swap_remove(0))
}

/// Alternative starting points for [`varpro_solve`] from the same propagator
/// eigenvalues: first the persistent dynamics with negligible ones dropped
/// (the [`init_eigenvalues`] choice), then the `r/2` most energetic. The
/// second is omitted when both coincide.
pub fn init_eigenvalue_candidates(x: &DMatrix<f64>, t: &[f64], r: usize) -> Result<Vec<Vec<C64>>> {
    let (_, m) = x.shape();
    if r < 2 || !r.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rank must be even and >= 2, got {r}"
        )));
    }
    if t.len() != m || m < r + 1 {
        return Err(Error::Config(format!(
            "window of {m} snapshots is too short for rank {r}"
        )));
    }
    let dt = window_dt(t);

    let mut best: Option<(usize, DMatrix<f64>)> = None;
    let mut delays = 1;
    loop {
        let h = delay_embed(x, delays);
        let x1 = h.columns(0, h.ncols() - 1).into_owned();
        let s = svd(x1)?;
        let rank = numerical_rank(&s.singular_values, RANK_RTOL);
        let improved = best.as_ref().is_none_or(|(b, _)| rank > *b);
        if improved {
            best = Some((rank, h));
        }
        // X1 of the next embedding has m − delays − 1 columns
        if rank >= r || !improved || m - delays - 1 < r {
            break;
        }
        delays += 1;
    }
    let (rank, h) = best.expect("at least one embedding evaluated");
    if rank < 2 {
        return Err(Error::RankDeficientWindow { rank, requested: r });
    }
    let k = rank.min(r);

    let cols = h.ncols();
    let x1 = h.columns(0, cols - 1).into_owned();
    let x2 = h.columns(1, cols - 1).into_owned();
    let s = svd(x1)?;
    let u = s.u.as_ref().unwrap().columns(0, k).into_owned();
    let vt = s.v_t.as_ref().unwrap().rows(0, k).into_owned();
    let sinv = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        s.singular_values.iter().take(k).map(|v| 1.0 / v),
    ));
    let atilde = u.transpose() * x2 * vt.transpose() * sinv;
    let schur = Schur::try_new(atilde, SVD_EPS, SVD_MAX_ITERS).ok_or_else(|| {
        Error::NumericalBreakdown("propagator eigenvalues did not converge".into())
    })?;
    let lambdas = schur.complex_eigenvalues();

    let nu: Vec<C64> = lambdas
        .iter()
        .map(|l| {
            if l.norm() == 0.0 {
                // a vanishing eigenvalue carries no dynamics; park it as a slow pair
                C64::new(0.0, 0.0)
            } else {
                l.ln()
            }
        })
        .collect();
    let (pruned, strongest) = rank_by_energy(&nu, x, r / 2);
    let first = pairs_to_omega(&pairs_from_sample_omega(&pruned, r / 2, m), dt);
    let second = pairs_to_omega(&pairs_from_sample_omega(&strongest, r / 2, m), dt);
    Ok(if first == second {
        vec![first]
    } else {
        vec![first, second]
    })
}

/// Sample-unit eigenvalues ranked by the energy they carry in `x`: those
/// above [`NEGLIGIBLE_ENERGY`] of the strongest in their original order, and
/// the `n_slots` strongest (a conjugate pair counts once).
///
/// Each candidate's contribution comes from a joint least-squares fit of its
/// real dynamics to the window; a real eigenvalue (typically the slow drift
/// left after demeaning) competes for a slot like any oscillation.
fn rank_by_energy(nu: &[C64], x: &DMatrix<f64>, n_slots: usize) -> (Vec<C64>, Vec<C64>) {
    const IM_TOL: f64 = 1e-12;
    let m = x.ncols();
    // one representative per conjugate pair
    let candidates: Vec<C64> = nu.iter().copied().filter(|z| z.im >= -IM_TOL).collect();
    let widths: Vec<usize> = candidates
        .iter()
        .map(|z| if z.im > IM_TOL { 2 } else { 1 })
        .collect();
    let cols: usize = widths.iter().sum();
    let mut basis = DMatrix::<f64>::zeros(m, cols);
    let mut c = 0;
    for (z, &w) in candidates.iter().zip(&widths) {
        for i in 0..m {
            let tau = i as f64;
            let e = (z.re * tau).exp();
            let (sn, cs) = (z.im * tau).sin_cos();
            basis[(i, c)] = e * cs;
            if w == 2 {
                basis[(i, c + 1)] = e * sn;
            }
        }
        c += w;
    }
    if basis.iter().any(|v| !v.is_finite()) {
        return (nu.to_vec(), nu.to_vec());
    }
    let Ok(pinv) = basis.clone().pseudo_inverse(RANK_RTOL * basis.norm()) else {
        return (nu.to_vec(), nu.to_vec());
    };
    let coef = pinv * x.transpose();
    let mut energy: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    let mut c = 0;
    for (k, &w) in widths.iter().enumerate() {
        let part = basis.columns(c, w) * coef.rows(c, w);
        energy.push((k, part.norm()));
        c += w;
    }
    let floor = NEGLIGIBLE_ENERGY * energy.iter().map(|e| e.1).fold(0.0, f64::max);
    let pruned: Vec<usize> = energy.iter().filter(|e| e.1 > floor).map(|e| e.0).collect();
    energy.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut strongest: Vec<usize> = energy.iter().take(n_slots).map(|&(k, _)| k).collect();
    strongest.sort_unstable();
    let expand = |keep: &[usize]| -> Vec<C64> {
        keep.iter()
            .flat_map(|&k| {
                let z = candidates[k];
                if widths[k] == 2 {
                    vec![z, z.conj()]
                } else {
                    vec![z]
                }
            })
            .collect()
    };
    (expand(&pruned), expand(&strongest))
}

/// Group sample-unit eigenvalues into `n_pairs` conjugate pairs.
fn pairs_from_sample_omega(nu: &[C64], n_pairs: usize, m: usize) -> Vec<Pair> {
    const IM_TOL: f64 = 1e-12;
    let mut oscillatory: Vec<Pair> = Vec::new();
    let mut real: Vec<f64> = Vec::new();
    let mut used = vec![false; nu.len()];
    for i in 0..nu.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let z = nu[i];
        if z.im.abs() <= IM_TOL {
            real.push(z.re);
            continue;
        }
        // drop the conjugate partner if present
        if let Some(jj) = (i + 1..nu.len())
            .find(|&jj| !used[jj] && (nu[jj] - z.conj()).norm() <= 1e-8 * (1.0 + z.norm()))
        {
            used[jj] = true;
        }
        oscillatory.push(Pair {
            a: z.re,
            v: z.im.abs().min(std::f64::consts::PI),
        });
    }
    // persistent dynamics first
    oscillatory.sort_by(|p, q| p.a.abs().total_cmp(&q.a.abs()));
    oscillatory.truncate(n_pairs);

    real.sort_by(|p, q| p.abs().total_cmp(&q.abs()));
    let mut real_iter = real.into_iter();
    let spacing = std::f64::consts::PI / m as f64;
    let mut slot = 0usize;
    while oscillatory.len() < n_pairs {
        let a = match (real_iter.next(), real_iter.next()) {
            (Some(a1), Some(a2)) => 0.5 * (a1 + a2),
            (Some(a1), None) => a1,
            _ => 0.0,
        };
        // half-integer multiples of π/m, skipping frequencies already taken
        let v = loop {
            let cand = spacing * (slot as f64 + 0.5);
            slot += 1;
            if cand >= std::f64::consts::PI {
                break spacing * 0.25 / slot as f64;
            }
            if oscillatory
                .iter()
                .all(|p| (p.v - cand).abs() > 0.5 * spacing)
            {
                break cand;
            }
        };
        oscillatory.push(Pair { a, v });
    }
    oscillatory.sort_by(|p, q| p.v.total_cmp(&q.v));
    oscillatory
}

fn pairs_to_omega(pairs: &[Pair], dt: f64) -> Vec<C64> {
    pairs
        .iter()
        .flat_map(|p| [C64::new(p.a / dt, p.v / dt), C64::new(p.a / dt, -p.v / dt)])
        .collect()
}

/// Variable-projection problem in sample units (`τ = 0, 1, ..., m−1`).
struct Problem {
    /// Data with time along rows: m × n.
    y: DMatrix<f64>,
    y_norm2: f64,
}

struct Evaluation {
    /// Left singular vectors of the basis restricted to its numerical rank.
    u: DMatrix<f64>,
    /// Transpose of the basis pseudo-inverse, m × r.
    pinv_t: DMatrix<f64>,
    coef: DMatrix<f64>,
    resid: DMatrix<f64>,
    cost: f64,
}

fn theta_from_pairs(pairs: &[Pair]) -> Vec<f64> {
    pairs.iter().flat_map(|p| [p.a, p.v]).collect()
}

fn pairs_from_theta(theta: &[f64]) -> Vec<Pair> {
    theta
        .chunks_exact(2)
        .map(|c| Pair { a: c[0], v: c[1] })
        .collect()
}

fn basis(theta: &[f64], m: usize) -> DMatrix<f64> {
    let r = theta.len();
    let mut phi = DMatrix::zeros(m, r);
    for q in 0..r / 2 {
        let (a, v) = (theta[2 * q], theta[2 * q + 1]);
        for i in 0..m {
            let tau = i as f64;
            let e = (a * tau).exp();
            let (sn, cs) = (v * tau).sin_cos();
            phi[(i, 2 * q)] = e * cs;
            phi[(i, 2 * q + 1)] = e * sn;
        }
    }
    phi
}

/// Derivatives of the two basis columns of the pair owning parameter `s`.
fn basis_derivative(theta: &[f64], m: usize, s: usize) -> (DVector<f64>, DVector<f64>) {
    let q = s / 2;
    let (a, v) = (theta[2 * q], theta[2 * q + 1]);
    let mut d0 = DVector::zeros(m);
    let mut d1 = DVector::zeros(m);
    for i in 0..m {
        let tau = i as f64;
        let e = (a * tau).exp();
        let (sn, cs) = (v * tau).sin_cos();
        if s.is_multiple_of(2) {
            d0[i] = tau * e * cs;
            d1[i] = tau * e * sn;
        } else {
            d0[i] = -tau * e * sn;
            d1[i] = tau * e * cs;
        }
    }
    (d0, d1)
}

impl Problem {
    fn new(x: &DMatrix<f64>) -> Self {
        let y = x.transpose();
        let y_norm2 = y.norm_squared();
        Problem { y, y_norm2 }
    }

    fn m(&self) -> usize {
        self.y.nrows()
    }

    fn evaluate(&self, theta: &[f64]) -> Option<Evaluation> {
        let phi = basis(theta, self.m());
        if phi.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let s = SVD::try_new(phi, true, true, SVD_EPS, SVD_MAX_ITERS)?;
        let smax = s.singular_values.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..s.singular_values.len())
            .filter(|&i| s.singular_values[i] > PINV_RTOL * smax)
            .collect();
        let u_full = s.u.as_ref()?;
        let vt_full = s.v_t.as_ref()?;
        let k = keep.len();
        let r = theta.len();
        let mut u = DMatrix::zeros(self.m(), k);
        let mut pinv_t = DMatrix::zeros(self.m(), r);
        for (c, &i) in keep.iter().enumerate() {
            u.set_column(c, &u_full.column(i));
            let inv = 1.0 / s.singular_values[i];
            // (Φ⁺)ᵀ = U Σ⁺ Vᵀ
            pinv_t += u_full.column(i) * (vt_full.row(i) * inv);
        }
        let coef = pinv_t.tr_mul(&self.y);
        let resid = &self.y - &u * u.tr_mul(&self.y);
        let cost = 0.5 * resid.norm_squared();
        if !cost.is_finite() {
            return None;
        }
        Some(Evaluation {
            u,
            pinv_t,
            coef,
            resid,
            cost,
        })
    }

    /// Exact Jacobian of `vec(R)` with respect to `theta`.
    fn jacobian(&self, theta: &[f64], ev: &Evaluation) -> DMatrix<f64> {
        let (m, n) = self.y.shape();
        let r = theta.len();
        let mut jac = DMatrix::zeros(m * n, r);
        for s in 0..r {
            let q = s / 2;
            let (c0, c1) = (2 * q, 2 * q + 1);
            let (d0, d1) = basis_derivative(theta, m, s);
            // P⊥ (D B) = (P⊥ D) B, projecting the two columns only
            let p0 = &d0 - &ev.u * ev.u.tr_mul(&d0);
            let p1 = &d1 - &ev.u * ev.u.tr_mul(&d1);
            let (b0, b1) = (ev.coef.row(c0), ev.coef.row(c1));
            // (Φ⁺)ᵀ Dᵀ R
            let r0 = ev.resid.tr_mul(&d0);
            let r1 = ev.resid.tr_mul(&d1);
            let (q0, q1) = (ev.pinv_t.column(c0), ev.pinv_t.column(c1));
            let mut col = jac.column_mut(s);
            for j in 0..n {
                let (b0j, b1j, r0j, r1j) = (b0[j], b1[j], r0[j], r1[j]);
                for i in 0..m {
                    col[j * m + i] = -(p0[i] * b0j + p1[i] * b1j + q0[i] * r0j + q1[i] * r1j);
                }
            }
        }
        jac
    }
}

fn project(theta: &mut [f64], rho_s: f64) {
    for pair in theta.chunks_exact_mut(2) {
        pair[0] = pair[0].clamp(-rho_s, rho_s);
        pair[1] = pair[1].abs().min(std::f64::consts::PI);
    }
}

/// Fit one demeaned window. `x` is space × time, `t` the window times.
pub fn varpro_solve(
    x: &DMatrix<f64>,
    t: &[f64],
    init_omega: &[C64],
    settings: &VarproSettings,
    constraint: &EigConstraint,
) -> Result<VarproFit> {
    let (n, m) = x.shape();
    let r = settings.rank;
    if init_omega.len() != r {
        return Err(Error::Config(format!(
            "{} initial eigenvalues for rank {r}",
            init_omega.len()
        )));
    }
    settings.validate(m)?;
    if t.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} times for {m} snapshots",
            t.len()
        )));
    }
    let dt = window_dt(t);
    let rho_s = constraint.rho * dt;

    let nu: Vec<C64> = init_omega.iter().map(|w| w * dt).collect();
    let mut theta = theta_from_pairs(&pairs_from_sample_omega(&nu, r / 2, m));
    project(&mut theta, rho_s);

    let problem = Problem::new(x);
    let mut ev = problem.evaluate(&theta).ok_or_else(|| {
        Error::NumericalBreakdown("non-finite residual at the initial eigenvalues".into())
    })?;

    let grad_scale = problem.y_norm2.max(f64::MIN_POSITIVE);
    let mut lambda = settings.lm_lambda0;
    let mut accepted_costs = vec![ev.cost];
    let mut converged = ev.cost <= 1e-30 * grad_scale;
    let mut iterations = 0;

    while !converged && iterations < settings.max_iters {
        iterations += 1;
        let jac = problem.jacobian(&theta, &ev);
        let rvec = DVector::from_column_slice(ev.resid.as_slice());
        let grad = jac.tr_mul(&rvec);
        if grad.amax() / grad_scale < settings.tol_grad {
            converged = true;
            break;
        }
        let jtj = jac.tr_mul(&jac);
        let diag_floor = jtj.diagonal().amax().max(f64::MIN_POSITIVE) * 1e-12;

        let mut accepted = false;
        let mut small_step = false;
        let mut stalled = false;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for i in 0..r {
                a[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial = theta.clone();
            for (p, d) in trial.iter_mut().zip(step.iter()) {
                *p += d;
            }
            project(&mut trial, rho_s);
            let moved = trial
                .iter()
                .zip(&theta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let theta_scale = 1.0 + theta.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if moved < settings.tol_step * theta_scale {
                small_step = true;
                break;
            }
            match problem.evaluate(&trial) {
                Some(trial_ev) if trial_ev.cost < ev.cost => {
                    // the projected step is the one actually taken
                    let taken =
                        DVector::from_iterator(r, trial.iter().zip(&theta).map(|(a, b)| a - b));
                    let predicted = -grad.dot(&taken) - 0.5 * taken.dot(&(&jtj * &taken));
                    let actual = ev.cost - trial_ev.cost;
                    stalled = actual.max(predicted) < settings.tol_cost * ev.cost;
                    theta = trial;
                    ev = trial_ev;
                    accepted_costs.push(ev.cost);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if small_step || stalled {
            converged = true;
            break;
        }
        if !accepted {
            if !ev.cost.is_finite() {
                return Err(Error::NumericalBreakdown("residual diverged".into()));
            }
            // damping exhausted: the current iterate is a local minimum
            converged = true;
            break;
        }
        if ev.cost <= 1e-30 * grad_scale {
            converged = true;
        }
    }

    let pairs = pairs_from_theta(&theta);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&p, &q| pairs[p].v.total_cmp(&pairs[q].v));

    let mut omega = Vec::with_capacity(r);
    let mut modes = DMatrix::zeros(n, r);
    let mut amplitudes = Vec::with_capacity(r);
    for (slot, &q) in order.iter().enumerate() {
        let p = pairs[q];
        // unit conversion can push a clamped rate one ulp past the bound
        let w = C64::new((p.a / dt).clamp(-constraint.rho, constraint.rho), p.v / dt);
        // cos/sin coefficients → complex mode u = (C − iS)/2 for a + iv
        let u = DVector::from_fn(n, |i, _| {
            C64::new(0.5 * ev.coef[(2 * q, i)], -0.5 * ev.coef[(2 * q + 1, i)])
        });
        let norm = u.norm();
        let phi = if norm > 0.0 {
            u / C64::new(norm, 0.0)
        } else {
            let mut e = DVector::zeros(n);
            e[0] = C64::new(1.0, 0.0);
            e
        };
        let b = C64::new(norm, 0.0);
        modes.set_column(2 * slot, &phi);
        modes.set_column(2 * slot + 1, &phi.map(|z| z.conj()));
        omega.push(w);
        omega.push(w.conj());
        amplitudes.push(b);
        amplitudes.push(b.conj());
    }
    let residual_rel = if problem.y_norm2 > 0.0 {
        (2.0 * ev.cost / problem.y_norm2).sqrt()
    } else {
        0.0
    };
    Ok(VarproFit {
        omega,
        modes,
        amplitudes,
        residual_rel,
        iterations,
        converged,
        accepted_costs,
    })
}

/// Compare the analytic variable-projection Jacobian with central finite
/// differences and return the largest relative deviation.
///
/// Deviations are measured per parameter column (max-norm of the difference
/// over max-norm of the finite-difference column); columns whose magnitude
/// is below `1e-10` are skipped. `omega` must be conjugate-paired and
/// strictly inside the constraint set.
pub fn jacobian_check(x: &DMatrix<f64>, t: &[f64], omega: &[C64]) -> f64 {
    let m = x.ncols();
    let dt = window_dt(t);
    let nu: Vec<C64> = omega.iter().map(|w| w * dt).collect();
    let theta = theta_from_pairs(&pairs_from_sample_omega(&nu, omega.len() / 2, m));
    let problem = Problem::new(x);
    let Some(ev) = problem.evaluate(&theta) else {
        return f64::INFINITY;
    };
    let analytic = problem.jacobian(&theta, &ev);

    let mut worst: f64 = 0.0;
    for s in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[s].abs());
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[s] += h;
        minus[s] -= h;
        let (Some(ep), Some(em)) = (problem.evaluate(&plus), problem.evaluate(&minus)) else {
            return f64::INFINITY;
        };
        let fd = (ep.resid - em.resid) / (2.0 * h);
        let scale = fd.amax();
        if scale <= 1e-10 {
            continue;
        }
        let an = DMatrix::from_column_slice(fd.nrows(), fd.ncols(), analytic.column(s).as_slice());
        let dev = (an - &fd).amax() / scale;
        worst = worst.max(dev);
    }
    worst
}
