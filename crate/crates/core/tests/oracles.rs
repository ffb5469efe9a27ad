//! Fits checked against independent oracles: companion-matrix DMD,
//! the periodogram and hand-placed cluster centers.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrcosts::cluster::{kmeans, sweep_clusters, DEFAULT_RESTARTS};
use mrcosts::synth::{generate, oracle_exact_dmd, oracle_fft_peaks, ComponentSpec};
use mrcosts::varpro::{init_eigenvalues, jacobian_check, varpro_solve};
use mrcosts::{
    fit, global_separation, BandCount, EigConstraint, Error, LevelConfig, VarproSettings, C64,
};

/// Sum of `2 Re(φ e^{ωt})` over the given eigenvalues, one random spatial
/// mode per eigenvalue.
fn exponential_field(
    omega: &[C64],
    n: usize,
    m: usize,
    dt: f64,
    seed: u64,
) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<Vec<C64>> = omega
        .iter()
        .map(|_| {
            (0..n)
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let t: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
    let x = DMatrix::from_fn(n, m, |s, j| {
        omega
            .iter()
            .zip(&modes)
            .map(|(w, phi)| 2.0 * (phi[s] * (w * t[j]).exp()).re)
            .sum()
    });
    (x, t)
}

fn max_relative_mismatch(fitted: &[C64], reference: &[C64]) -> f64 {
    reference
        .iter()
        .map(|w| {
            fitted
                .iter()
                .map(|f| (f - w).norm())
                .fold(f64::INFINITY, f64::min)
                / w.norm()
        })
        .fold(0.0, f64::max)
}

#[test]
fn varpro_matches_companion_dmd_with_growth_and_decay() {
    let omega = [
        C64::new(-0.02, 2.0),
        C64::new(0.015, 5.5),
        C64::new(0.0, 9.0),
    ];
    let (x, t) = exponential_field(&omega, 6, 90, 0.05, 3);
    let r = 6;
    let oracle = oracle_exact_dmd(&x, &t, r).unwrap();
    let init = init_eigenvalues(&x, &t, r).unwrap();
    let fitted = varpro_solve(
        &x,
        &t,
        &init,
        &VarproSettings::new(r),
        &EigConstraint::new(1.0).unwrap(),
    )
    .unwrap();
    assert!(max_relative_mismatch(&fitted.omega, &oracle) < 1e-6);
    let truth: Vec<C64> = omega.iter().flat_map(|w| [*w, w.conj()]).collect();
    assert!(max_relative_mismatch(&oracle, &truth) < 1e-8);
    assert!(fitted.residual_rel < 1e-8);
}

#[test]
fn single_sensor_needs_delay_embedding() {
    let omega = [C64::new(0.0, 0.4), C64::new(0.0, 1.3)];
    let (x, t) = exponential_field(&omega, 1, 120, 1.0, 9);
    let init = init_eigenvalues(&x, &t, 4).unwrap();
    let fitted = varpro_solve(
        &x,
        &t,
        &init,
        &VarproSettings::new(4),
        &EigConstraint::new(0.1).unwrap(),
    )
    .unwrap();
    let oracle = oracle_exact_dmd(&x, &t, 4).unwrap();
    assert!(max_relative_mismatch(&fitted.omega, &oracle) < 1e-6);
}

#[test]
fn active_bound_holds_exactly() {
    // growth well outside the allowed band is pinned to its edge
    let omega = [C64::new(0.05, 1.0)];
    let (x, t) = exponential_field(&omega, 4, 60, 1.0, 1);
    let rho = 0.01;
    let init = init_eigenvalues(&x, &t, 2).unwrap();
    let fitted = varpro_solve(
        &x,
        &t,
        &init,
        &VarproSettings::new(2),
        &EigConstraint::new(rho).unwrap(),
    )
    .unwrap();
    assert!(fitted.omega.iter().all(|w| w.re.abs() <= rho));
    assert_relative_eq!(fitted.omega[0].re, rho);
}

#[test]
fn jacobian_agrees_with_finite_differences() {
    let omega = [C64::new(-0.01, 0.7), C64::new(0.005, 2.1)];
    let (x, t) = exponential_field(&omega, 5, 64, 1.0, 4);
    let mut noisy = x.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    noisy
        .iter_mut()
        .for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
    let probe = [
        C64::new(-0.02, 0.8),
        C64::new(-0.02, -0.8),
        C64::new(0.0, 2.0),
        C64::new(0.0, -2.0),
    ];
    assert!(jacobian_check(&noisy, &t, &probe) < 1e-5);
}

#[test]
fn exact_dmd_rejects_constant_field() {
    let x = DMatrix::from_element(3, 40, 2.5);
    let t: Vec<f64> = (0..40).map(f64::from).collect();
    assert!(matches!(
        oracle_exact_dmd(&x, &t, 2),
        Err(Error::RankDeficientWindow { .. })
    ));
}

#[test]
fn periodogram_finds_two_tones() {
    let dt = 0.01;
    let series: Vec<f64> = (0..1000)
        .map(|i| {
            let t = i as f64 * dt;
            (2.0 * PI * t).sin() + 0.6 * (2.0 * PI * 10.0 * t).sin()
        })
        .collect();
    let mut peaks = oracle_fft_peaks(&series, dt, 2);
    peaks.sort_by(f64::total_cmp);
    let bin = 1.0 / (1000.0 * dt);
    assert!((peaks[0] - 1.0).abs() <= bin);
    assert!((peaks[1] - 10.0).abs() <= bin);
}

#[test]
fn kmeans_recovers_placed_centers() {
    let centers = [-3.0, 0.5, 4.0, 9.0];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let values: Vec<f64> = centers
        .iter()
        .flat_map(|c| {
            (0..40)
                .map(|_| c + rng.random_range(-0.2..0.2))
                .collect::<Vec<_>>()
        })
        .collect();
    let fixed = kmeans(&values, 4, 5, DEFAULT_RESTARTS).unwrap();
    for (found, want) in fixed.centroids.iter().zip(centers) {
        assert!((found - want).abs() < 0.05, "{found} vs {want}");
    }
    let swept = sweep_clusters(&values, 2, 8, 5, DEFAULT_RESTARTS).unwrap();
    assert_eq!(swept.best_k, 4);
    assert!(swept.result.silhouette > 0.9);
}

/// Global band centroids of a two-tone record match its periodogram peaks.
#[test]
fn global_bands_match_periodogram() {
    let comps = vec![
        ComponentSpec::traveling(1.0 / 60.0, 1.0, 1.0),
        ComponentSpec::standing(1.0 / 6.0, 0.6, 2.0, 0.3),
    ];
    let syn = generate(&comps, 8, 960, 1.0, 0.0, 0).unwrap();
    let configs: Vec<LevelConfig> = [16, 128]
        .iter()
        .map(|&w| LevelConfig::new(w, 4, 1.0))
        .collect();
    let mut model = fit(&syn.data, &configs, 3).unwrap();
    global_separation(&mut model, BandCount::Auto, (2, 6), 3).unwrap();

    let row: Vec<f64> = syn.data.values().row(0).iter().copied().collect();
    let mut peaks = oracle_fft_peaks(&row, 1.0, 2);
    peaks.sort_by(f64::total_cmp);
    let bands = model.band_table().unwrap();
    assert_eq!(bands.len(), 3, "{bands:?}");
    for (band, peak) in bands[1..].iter().zip(&peaks) {
        // one periodogram bin is 1/960 cycles per sample
        assert!(
            (band.frequency - peak).abs() < 0.05 * peak,
            "{} vs {peak}",
            band.frequency
        );
    }
}
