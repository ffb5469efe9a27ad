//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the report is always printed; the
//! process fails if any criterion fails.

use std::cell::Cell;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mrcosts::cluster::{sweep_clusters, transform_omega, DEFAULT_RESTARTS};
use mrcosts::synth::{generate, noise_sigma_for_snr, oracle_exact_dmd, ComponentSpec, Synthetic};
use mrcosts::varpro::{init_eigenvalues, jacobian_check, varpro_solve};
use mrcosts::window::{make_windows, overlap_reconstruct};
use mrcosts::{
    fit, global_separation, reconstruct_full, reconstruct_global_band, relative_error, BandCount,
    EigConstraint, LevelConfig, MrCostsModel, OmegaTransform, VarproSettings, WindowFit, C64,
};
use mrcosts_cli::{cmd_fit, cmd_synth, FitArgs, SynthArgs};

const N_SPACE: usize = 32;
const N_TIME: usize = 2048;
const WINDOWS: [usize; 3] = [16, 64, 256];
const RANK: usize = 8;
const PERIODS: [f64; 3] = [200.0, 40.0, 8.0];
const AMPLITUDES: [f64; 3] = [1.0, 0.7, 0.5];
const SNR: f64 = 10.0;
const NOISE_SEED: u64 = 1;
const FIT_SEED: u64 = 0;

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: &str, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("criterion {id:<3} {name:<28} PASS  {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("criterion {id:<3} {name:<28} FAIL  {detail}");
            }
        }
    }
}

fn components() -> Vec<ComponentSpec> {
    PERIODS
        .iter()
        .zip(AMPLITUDES)
        .enumerate()
        .map(|(i, (p, a))| ComponentSpec::traveling(1.0 / p, a, (i + 1) as f64))
        .collect()
}

fn fixture(snr: Option<f64>) -> Synthetic {
    let comps = components();
    let sigma = match snr {
        Some(snr) => {
            let clean = generate(&comps, N_SPACE, N_TIME, 1.0, 0.0, NOISE_SEED).unwrap();
            noise_sigma_for_snr(&clean.clean(), snr)
        }
        None => 0.0,
    };
    generate(&comps, N_SPACE, N_TIME, 1.0, sigma, NOISE_SEED).unwrap()
}

fn level_configs() -> Vec<LevelConfig> {
    WINDOWS
        .iter()
        .map(|&w| LevelConfig::new(w, RANK, 1.0))
        .collect()
}

fn fit_separated(data: &Synthetic) -> mrcosts::Result<(MrCostsModel, f64)> {
    let start = Instant::now();
    let mut model = fit(&data.data, &level_configs(), FIT_SEED)?;
    global_separation(&mut model, BandCount::Auto, (2, 16), FIT_SEED)?;
    Ok((model, start.elapsed().as_secs_f64()))
}

fn frequency_recovery(model: &MrCostsModel, seconds: f64) -> Outcome {
    let table = model.band_table().map_err(|e| e.to_string())?;
    let oscillatory: Vec<f64> = table.iter().skip(1).map(|b| b.frequency).collect();
    let found = oscillatory
        .iter()
        .map(|f| format!("{f:.5}"))
        .collect::<Vec<_>>()
        .join(",");
    if oscillatory.len() != PERIODS.len() {
        return Err(format!(
            "{} oscillatory bands [{found}], expected 3",
            oscillatory.len()
        ));
    }
    let worst = oscillatory
        .iter()
        .zip(PERIODS.iter())
        .map(|(f, p)| (f * p - 1.0).abs())
        .fold(0.0, f64::max);
    let detail = format!(
        "bands [{found}] worst deviation {:.2}% fit {seconds:.1} s",
        100.0 * worst
    );
    if worst < 0.05 && seconds < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reconstruction_fidelity(
    clean_model: &MrCostsModel,
    clean: &Synthetic,
    noisy_model: &MrCostsModel,
    noisy: &Synthetic,
) -> Outcome {
    let trim = clean_model.default_edge_trim();
    let full = reconstruct_full(clean_model).map_err(|e| e.to_string())?;
    let noiseless = relative_error(&full, &clean.clean(), trim).map_err(|e| e.to_string())?;
    let full = reconstruct_full(noisy_model).map_err(|e| e.to_string())?;
    let vs_clean = relative_error(&full, &noisy.clean(), trim).map_err(|e| e.to_string())?;
    let vs_noisy = relative_error(&full, noisy.data.values(), trim).map_err(|e| e.to_string())?;
    let detail = format!(
        "noiseless {noiseless:.3}%, SNR 10 vs clean {vs_clean:.2}% vs noisy {vs_noisy:.2}%"
    );
    if noiseless < 5.0 && vs_clean < vs_noisy {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn band_sum_identity(models: &[&MrCostsModel]) -> Outcome {
    let mut worst: f64 = 0.0;
    for model in models {
        let full = reconstruct_full(model).map_err(|e| e.to_string())?;
        let mut sum = DMatrix::zeros(full.nrows(), full.ncols());
        for p in 0..model.n_global_bands().map_err(|e| e.to_string())? {
            sum += reconstruct_global_band(model, p).map_err(|e| e.to_string())?;
        }
        worst = worst.max((sum - &full).norm() / full.norm());
    }
    let detail = format!("max relative deviation {worst:.2e}");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Random noiseless window: `r/2` oscillations with distinct frequencies,
/// gentle growth or decay, and random complex spatial modes.
fn random_window(rng: &mut ChaCha8Rng, r: usize) -> (DMatrix<f64>, Vec<f64>, Vec<C64>) {
    let n = rng.random_range(3..=10);
    let m = rng.random_range(48..=128);
    let mut freqs: Vec<f64> = Vec::new();
    while freqs.len() < r / 2 {
        let v = rng.random_range(0.15..2.8);
        if freqs.iter().all(|f: &f64| (f - v).abs() > 0.2) {
            freqs.push(v);
        }
    }
    let omega: Vec<C64> = freqs
        .iter()
        .map(|&v| C64::new(rng.random_range(-0.01..0.01), v))
        .collect();
    let modes: Vec<Vec<C64>> = omega
        .iter()
        .map(|_| {
            (0..n)
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let t: Vec<f64> = (0..m).map(|i| i as f64).collect();
    let x = DMatrix::from_fn(n, m, |s, j| {
        omega
            .iter()
            .zip(&modes)
            .map(|(w, phi)| 2.0 * (phi[s] * (w * t[j]).exp()).re)
            .sum()
    });
    (x, t, omega)
}

fn varpro_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let constraint = EigConstraint::new(0.05).unwrap();
    let mut worst_omega: f64 = 0.0;
    let mut worst_jac: f64 = 0.0;
    for case in 0..50 {
        let r = [2, 4, 8][case % 3];
        let (x, t, _) = random_window(&mut rng, r);
        let init = init_eigenvalues(&x, &t, r).map_err(|e| format!("case {case}: {e}"))?;
        let fitted = varpro_solve(&x, &t, &init, &VarproSettings::new(r), &constraint)
            .map_err(|e| format!("case {case}: {e}"))?;
        let oracle = oracle_exact_dmd(&x, &t, r).map_err(|e| format!("case {case}: {e}"))?;
        for w in &oracle {
            let nearest = fitted
                .omega
                .iter()
                .map(|f| (f - w).norm())
                .fold(f64::INFINITY, f64::min);
            worst_omega = worst_omega.max(nearest / w.norm());
        }
        // away from the optimum, where the residual-dependent terms matter
        let shifted: Vec<C64> = fitted
            .omega
            .iter()
            .map(|w| w * C64::new(1.03, 0.0) + C64::new(-0.002, 0.0))
            .collect();
        worst_jac = worst_jac.max(jacobian_check(&x, &t, &shifted));
    }
    let detail =
        format!("max ω deviation {worst_omega:.2e}, max Jacobian deviation {worst_jac:.2e}");
    if worst_omega <= 1e-6 && worst_jac <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn eigenvalue_bound(models: &[&MrCostsModel]) -> Outcome {
    let mut checked = 0usize;
    for model in models {
        for level in &model.levels {
            let rho = level.config.rho;
            for (idx, w) in level.modes() {
                checked += 1;
                if w.re.abs() > rho {
                    return Err(format!(
                        "level {} window {} mode {}: |Re ω| = {:e} > ρ = {rho:e}",
                        idx.level,
                        idx.window,
                        idx.mode,
                        w.re.abs()
                    ));
                }
            }
        }
    }
    Ok(format!("{checked} eigenvalues within bounds"))
}

fn clustering() -> Outcome {
    let centers = [0.01, 0.1, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let omega: Vec<C64> = centers
        .iter()
        .flat_map(|&c| {
            let normal = Normal::new(c, 0.01 * c).unwrap();
            (0..60)
                .map(|_| C64::new(0.0, normal.sample(&mut rng)))
                .collect::<Vec<_>>()
        })
        .collect();
    let transform = OmegaTransform::Log10AbsImag;
    let features = transform_omega(&omega, transform);
    let sweep = sweep_clusters(&features.clusterable(), 2, 8, 6, DEFAULT_RESTARTS)
        .map_err(|e| e.to_string())?;
    let found: Vec<f64> = sweep
        .result
        .centroids
        .iter()
        .map(|c| transform.invert(*c))
        .collect();
    let worst = if found.len() == centers.len() {
        found
            .iter()
            .zip(centers)
            .map(|(f, c)| (f / c - 1.0).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let detail = format!(
        "K = {} worst centroid deviation {:.3}%",
        sweep.best_k,
        100.0 * worst
    );
    if sweep.best_k == 3 && worst <= 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn background_fit(spec: mrcosts::WindowSpec, n: usize) -> WindowFit {
    WindowFit {
        spec,
        omega: Vec::new(),
        phi: DMatrix::zeros(n, 0),
        amplitudes: Vec::new(),
        background: DVector::from_element(n, 1.0),
        residual_rel: 0.0,
        noise_floor: 0.0,
        failure: None,
    }
}

fn partition_of_unity() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (8usize..600, 0.02f64..1.0, 0.01f64..1.0);
    let worst = Cell::new(0.0f64);
    let result = runner.run(&strategy, |(n_time, len_frac, slide_frac)| {
        let length = ((n_time as f64 * len_frac) as usize).clamp(2, n_time);
        let slide = ((length as f64 * slide_frac) as usize).clamp(1, length);
        let specs = make_windows(n_time, length, slide, 0).unwrap();
        let fits: Vec<WindowFit> = specs.into_iter().map(|s| background_fit(s, 2)).collect();
        let blended = overlap_reconstruct(&fits, |_, _| true, true, 2, n_time, 1.0).unwrap();
        let dev = blended.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        worst.set(worst.get().max(dev));
        prop_assert!(
            dev <= 1e-12,
            "n_time {n_time} length {length} slide {slide}: deviation {dev:e}"
        );
        Ok(())
    });
    match result {
        Ok(()) => Ok(format!("100 cases, max deviation {:.2e}", worst.get())),
        Err(e) => Err(e.to_string()),
    }
}

fn edge_degradation(runs: &[(&str, &MrCostsModel, &Synthetic)]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, model, data) in runs {
        let full = reconstruct_full(model).map_err(|e| e.to_string())?;
        let clean = data.clean();
        let interior =
            relative_error(&full, &clean, model.default_edge_trim()).map_err(|e| e.to_string())?;
        let whole = relative_error(&full, &clean, 0).map_err(|e| e.to_string())?;
        ok &= interior <= whole;
        parts.push(format!("{name} interior {interior:.3}% full {whole:.3}%"));
    }
    let detail = parts.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    let text = r#"
seed = 11

[input]
path = "data/data.f64bin"

[output]
dir = "model"

[synth]
n_space = 12
n_time = 600
snr = 10.0
seed = 3

[[synth.component]]
frequency = 0.02
amplitude = 1.0
pattern = { kind = "traveling", wavenumber = 1.0 }

[[synth.component]]
frequency = 0.125
amplitude = 0.5
pattern = { kind = "standing", wavenumber = 2.0 }

[level.0]
window_length = 16
rank = 6

[level.1]
window_length = 96
rank = 6
"#;
    fs::write(&config, text).map_err(|e| e.to_string())?;
    let mut sink = Vec::new();
    cmd_synth(
        &SynthArgs {
            config: config.clone(),
            out: Some(tmp.path().join("data")),
            seed: None,
            format: "f64bin".into(),
        },
        &mut sink,
    )
    .map_err(|e| e.to_string())?;
    let mut archives = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let args = FitArgs {
            config: config.clone(),
            input: None,
            format: None,
            out: Some(out.clone()),
            seed: None,
        };
        cmd_fit(&args, &mut sink).map_err(|e| e.to_string())?;
        archives.push(dir_bytes(&out));
    }
    let files = archives[0].len();
    let bytes: usize = archives[0].iter().map(|(_, b)| b.len()).sum();
    if files > 0 && archives[0] == archives[1] {
        Ok(format!("{files} files, {bytes} bytes identical"))
    } else {
        let differing: Vec<&str> = archives[0]
            .iter()
            .zip(&archives[1])
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.as_str())
            .collect();
        Err(format!("archives differ: {differing:?}"))
    }
}

fn white_noise() -> Outcome {
    let data = generate(&[], N_SPACE, N_TIME, 1.0, 1.0, 10).map_err(|e| e.to_string())?;
    let mut model = fit(&data.data, &level_configs(), FIT_SEED).map_err(|e| e.to_string())?;
    // too few coherent modes to cluster is itself a rejection of the noise
    let separation = global_separation(&mut model, BandCount::Auto, (2, 16), FIT_SEED);
    let full = reconstruct_full(&model).map_err(|e| e.to_string())?;
    let ratio = full.norm_squared() / data.data.values().norm_squared();
    let bands = match separation {
        Ok(()) => format!("{} global bands", model.n_global_bands().unwrap_or(0)),
        Err(e) => format!("no global bands ({e})"),
    };
    let detail = format!(
        "reconstructed energy {:.2}% of input, {bands}",
        100.0 * ratio
    );
    if ratio < 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let started = Instant::now();
    let mut report = Report { failures: 0 };

    let noisy = fixture(Some(SNR));
    let clean = fixture(None);
    let noisy_fit = fit_separated(&noisy);
    let clean_fit = fit_separated(&clean);

    match (&noisy_fit, &clean_fit) {
        (Ok((noisy_model, seconds)), Ok((clean_model, _))) => {
            report.record(
                "1",
                "frequency recovery",
                frequency_recovery(noisy_model, *seconds),
            );
            report.record(
                "2",
                "reconstruction fidelity",
                reconstruction_fidelity(clean_model, &clean, noisy_model, &noisy),
            );
            report.record(
                "3",
                "band sum identity",
                band_sum_identity(&[noisy_model, clean_model]),
            );
        }
        _ => {
            let msg = format!(
                "fit failed: {:?} / {:?}",
                noisy_fit.as_ref().err(),
                clean_fit.as_ref().err()
            );
            for (id, name) in [
                ("1", "frequency recovery"),
                ("2", "reconstruction fidelity"),
                ("3", "band sum identity"),
            ] {
                report.record(id, name, Err(msg.clone()));
            }
        }
    }
    report.record("4", "varpro vs exact DMD", varpro_correctness());
    match (&noisy_fit, &clean_fit) {
        (Ok((n, _)), Ok((c, _))) => {
            report.record("5", "eigenvalue bound", eigenvalue_bound(&[n, c]))
        }
        _ => report.record("5", "eigenvalue bound", Err("no fitted model".into())),
    }
    report.record("6", "clustering sweep", clustering());
    report.record("7", "partition of unity", partition_of_unity());
    match (&noisy_fit, &clean_fit) {
        (Ok((n, _)), Ok((c, _))) => report.record(
            "8",
            "edge degradation",
            edge_degradation(&[("SNR 10", n, &noisy), ("noiseless", c, &clean)]),
        ),
        _ => report.record("8", "edge degradation", Err("no fitted model".into())),
    }
    report.record("9", "determinism", determinism());
    report.record("10", "white noise rejection", white_noise());

    println!(
        "acceptance: {} of 10 criteria passed in {:.1} s",
        10 - report.failures,
        started.elapsed().as_secs_f64()
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}
