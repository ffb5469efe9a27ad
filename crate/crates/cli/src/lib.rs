//! Command implementations behind the `mrcosts` binary.
//!
//! Every command writes its tables to the supplied writer and its files
//! atomically, so a zero exit status means every requested artifact exists.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use mrcosts::config::validate_k_range;
use mrcosts::synth::{generate, noise_sigma_for_snr};
use mrcosts::{
    aggregate_bands, fit, global_separation, load_matrix, load_model, reconstruct_full,
    reconstruct_global_band, relative_error, save_matrix, save_model_with_config, write_atomic,
    BandCount, Error, MatrixFormat, MrCostsModel, RunConfig, SnapshotMatrix,
};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Parser)]
#[command(
    name = "mrcosts",
    version,
    about = "Multi-resolution coherent spatio-temporal scale separation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data set from the config's [synth] section.
    Synth(SynthArgs),
    /// Fit all levels, separate global bands and save the model archive.
    Fit(FitArgs),
    /// Reconstruct global bands from a saved model.
    Reconstruct(ReconstructArgs),
    /// Print the global band table of a saved model.
    Bands(BandsArgs),
    /// Silhouette score for every global band count in a range.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's [output] dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Matrix format of the written files (csv or f64bin).
    #[arg(long, default_value = "f64bin")]
    pub format: String,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Input matrix; overrides the config's [input] path.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    /// Archive directory; overrides the config's [output] dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    pub model_dir: PathBuf,
    /// `all` or a comma-separated list of global bands.
    #[arg(long, default_value = "all")]
    pub bands: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth to report relative errors against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Snapshots excluded at each end; default half the longest window.
    #[arg(long)]
    pub edge_trim: Option<usize>,
    /// Space rows averaged in the CSV export, e.g. `0-3,7`; default all.
    #[arg(long)]
    pub rows: Option<String>,
    /// Format of matrix outputs and of the truth file when it has no
    /// recognisable extension.
    #[arg(long, default_value = "f64bin")]
    pub format: String,
}

#[derive(Debug, Clone, Args)]
pub struct BandsArgs {
    pub model_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::AllWindowsFailed(_) => 3,
        Error::NumericalBreakdown(_)
        | Error::RankDeficientWindow { .. }
        | Error::UncoveredTime { .. }
        | Error::ImaginaryResidue { .. }
        | Error::TooFewPoints { .. }
        | Error::DegeneratePartition(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Fit(a) => cmd_fit(a, out).map(|_| ()),
        Command::Reconstruct(a) => cmd_reconstruct(a, out),
        Command::Bands(a) => cmd_bands(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn parse_format(s: &str) -> Result<MatrixFormat> {
    s.parse()
}

fn extension(format: MatrixFormat) -> &'static str {
    match format {
        MatrixFormat::Csv => "csv",
        MatrixFormat::F64bin => "f64bin",
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn output_dir(cfg: &RunConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    match (flag, &cfg.output) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(o)) => Ok(cfg.resolve(&o.dir)),
        (None, None) => Err(Error::Config(
            "no output directory: pass --out or set [output] dir".into(),
        )),
    }
}

fn load_input(
    cfg: &RunConfig,
    path: Option<&PathBuf>,
    format: Option<&str>,
) -> Result<SnapshotMatrix> {
    let (path, cfg_format) = match (path, &cfg.input) {
        (Some(p), _) => (p.clone(), None),
        (None, Some(i)) => (cfg.resolve(&i.path), i.format.as_deref()),
        (None, None) => {
            return Err(Error::Config(
                "no input: pass --input or set [input] path".into(),
            ))
        }
    };
    let format = match format.or(cfg_format) {
        Some(f) => parse_format(f)?,
        None => MatrixFormat::from_path(&path),
    };
    load_matrix(&path, format)
}

/// Write the noisy data, the clean sum and one truth field per component.
pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let format = parse_format(&args.format)?;
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
    let dir = output_dir(&cfg, args.out.as_ref())?;
    let seed = args.seed.or(synth.seed).unwrap_or(cfg.seed);

    let sigma = match synth.snr {
        Some(snr) => {
            let clean = generate(
                &synth.component,
                synth.n_space,
                synth.n_time,
                synth.dt,
                0.0,
                seed,
            )?;
            noise_sigma_for_snr(&clean.clean(), snr)
        }
        None => synth.noise_sigma,
    };
    let generated = generate(
        &synth.component,
        synth.n_space,
        synth.n_time,
        synth.dt,
        sigma,
        seed,
    )?;

    create_dir(&dir)?;
    let ext = extension(format);
    let data_path = dir.join(format!("data.{ext}"));
    save_matrix(&generated.data, &data_path, format)?;
    save_matrix(
        &generated.data.with_values(generated.clean())?,
        dir.join(format!("truth.{ext}")),
        format,
    )?;
    for (i, t) in generated.truths.iter().enumerate() {
        save_matrix(
            &generated.data.with_values(t.clone())?,
            dir.join(format!("truth_{i}.{ext}")),
            format,
        )?;
    }
    emit(
        out,
        &format!(
            "wrote {} ({}x{}, noise_sigma {sigma}) and {} truth fields\n",
            data_path.display(),
            synth.n_space,
            synth.n_time,
            generated.truths.len()
        ),
    )
}

fn fit_from_config(
    cfg: &RunConfig,
    data: &SnapshotMatrix,
    seed: u64,
    n_bands: BandCount,
    k: (usize, usize),
) -> Result<MrCostsModel> {
    let configs = cfg.level_configs(data.dt())?;
    let mut model = fit(data, &configs, seed)?;
    global_separation(&mut model, n_bands, k, seed)?;
    Ok(model)
}

/// Fit, separate and save; returns the fitted model.
pub fn cmd_fit(args: &FitArgs, out: &mut dyn Write) -> Result<MrCostsModel> {
    let cfg = RunConfig::load(&args.config)?;
    let dir = output_dir(&cfg, args.out.as_ref())?;
    let data = load_input(&cfg, args.input.as_ref(), args.format.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);

    let start = Instant::now();
    let g = &cfg.global;
    let model = fit_from_config(&cfg, &data, seed, g.n_bands, (g.k_min, g.k_max))?;
    let elapsed = start.elapsed().as_secs_f64();
    save_model_with_config(&model, &dir, &cfg.source)?;

    let mut text =
        String::from("level\twindow_length\trank\twindows\tfailed\tmedian_residual\tlocal_bands\n");
    for l in &model.levels {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{:.6e}\t{}",
            l.level,
            l.config.window_length,
            l.config.rank,
            l.fits.len(),
            l.failed_windows(),
            l.median_residual(),
            l.n_bands()
        );
    }
    text.push('\n');
    text.push_str(&band_table(&model)?);
    let _ = writeln!(text, "\nsaved {} in {elapsed:.1} s", dir.display());
    emit(out, &text)?;
    Ok(model)
}

fn band_table(model: &MrCostsModel) -> Result<String> {
    let mut text = String::from("band\tcentroid_freq\tcentroid_period\tn_modes\tsilhouette\n");
    for b in model.band_table()? {
        let _ = writeln!(
            text,
            "{}\t{:.6e}\t{:.6e}\t{}\t{:.4}",
            b.band, b.frequency, b.period, b.n_modes, b.silhouette
        );
    }
    Ok(text)
}

pub fn cmd_bands(args: &BandsArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model_dir)?;
    emit(out, &band_table(&model)?)
}

/// Band selection: `all`, or indices such as `1,2`.
pub fn parse_bands(spec: &str, n_bands: usize) -> Result<Option<Vec<usize>>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let mut bands = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let b: usize = part
            .parse()
            .map_err(|_| Error::Config(format!("band {part:?} is not a number")))?;
        if b >= n_bands {
            return Err(Error::BandOutOfRange { band: b, n_bands });
        }
        if !bands.contains(&b) {
            bands.push(b);
        }
    }
    if bands.is_empty() {
        return Err(Error::Config("no bands requested".into()));
    }
    Ok(Some(bands))
}

/// Row mask such as `0-3,7`, inclusive ranges.
pub fn parse_rows(spec: &str, n_space: usize) -> Result<Vec<usize>> {
    let bad = |p: &str| Error::Config(format!("invalid row selection {p:?}"));
    let mut rows = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (
                a.trim().parse().map_err(|_| bad(part))?,
                b.trim().parse().map_err(|_| bad(part))?,
            ),
            None => {
                let r: usize = part.parse().map_err(|_| bad(part))?;
                (r, r)
            }
        };
        if lo > hi || hi >= n_space {
            return Err(Error::Config(format!("rows {part:?} outside 0..{n_space}")));
        }
        rows.extend(lo..=hi);
    }
    rows.sort_unstable();
    rows.dedup();
    if rows.is_empty() {
        return Err(Error::Config("empty row selection".into()));
    }
    Ok(rows)
}

fn row_mean(m: &DMatrix<f64>, rows: &[usize], j: usize) -> f64 {
    rows.iter().map(|&i| m[(i, j)]).sum::<f64>() / rows.len() as f64
}

/// Write the requested band matrices, their aggregate and the full
/// reconstruction, plus a long-format CSV of row means.
pub fn cmd_reconstruct(args: &ReconstructArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model_dir)?;
    let n_bands = model.n_global_bands()?;
    let format = parse_format(&args.format)?;
    let selection = parse_bands(&args.bands, n_bands)?;
    let rows = match &args.rows {
        Some(spec) => parse_rows(spec, model.n_space)?,
        None => (0..model.n_space).collect(),
    };
    let trim = args.edge_trim.unwrap_or_else(|| model.default_edge_trim());
    let truth = match &args.truth {
        Some(p) => {
            let f = match p.extension() {
                Some(_) => MatrixFormat::from_path(p),
                None => format,
            };
            Some(load_matrix(p, f)?)
        }
        None => None,
    };

    let bands = selection.clone().unwrap_or_else(|| (0..n_bands).collect());
    let mut series: Vec<(String, DMatrix<f64>)> = Vec::new();
    for &p in &bands {
        series.push((p.to_string(), reconstruct_global_band(&model, p)?));
    }
    if let Some(sel) = selection.as_ref().filter(|s| s.len() > 1) {
        series.push(("aggregate".into(), aggregate_bands(&model, sel)?));
    }
    let full = reconstruct_full(&model)?;

    create_dir(&args.out)?;
    let times = model.times();
    let ext = extension(format);
    let as_matrix = |m: &DMatrix<f64>| SnapshotMatrix::new(m.clone(), times.clone());
    for (name, m) in &series {
        let file = if name == "aggregate" {
            format!("aggregate.{ext}")
        } else {
            format!("band_{name}.{ext}")
        };
        save_matrix(&as_matrix(m)?, args.out.join(file), format)?;
    }
    save_matrix(
        &as_matrix(&full)?,
        args.out.join(format!("full.{ext}")),
        format,
    )?;

    let mut csv = String::from("time,band,value\n");
    for (name, m) in series
        .iter()
        .map(|(n, m)| (n.as_str(), m))
        .chain([("full", &full)])
    {
        for (j, t) in times.iter().enumerate() {
            let _ = writeln!(csv, "{t},{name},{}", row_mean(m, &rows, j));
        }
    }
    write_atomic(&args.out.join("band_means.csv"), csv.as_bytes())?;

    let mut text = format!(
        "wrote {} band matrices and full reconstruction to {}\n",
        series.len(),
        args.out.display()
    );
    if let Some(truth) = truth {
        let full_err = relative_error(&full, truth.values(), 0)?;
        let trimmed = relative_error(&full, truth.values(), trim)?;
        let _ = writeln!(text, "relative_error_full\t{full_err:.6}");
        let _ = writeln!(
            text,
            "relative_error_trimmed\t{trimmed:.6}\tedge_trim\t{trim}"
        );
    }
    emit(out, &text)
}

/// Fit once and report the global silhouette for every K in the range.
pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let k_min = args.k_min.unwrap_or(cfg.global.k_min);
    let k_max = args.k_max.unwrap_or(cfg.global.k_max);
    validate_k_range(k_min, k_max)?;
    let data = load_input(&cfg, args.input.as_ref(), args.format.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let model = fit_from_config(&cfg, &data, seed, BandCount::Auto, (k_min, k_max))?;
    let g = model.global()?;
    let selected = g.n_bands() - 1;

    let mut text = String::from("k\tsilhouette\tselected\n");
    for (k, s) in &g.scores {
        let mark = if *k == selected { "*" } else { "" };
        let _ = writeln!(text, "{k}\t{s:.6}\t{mark}");
    }
    let _ = writeln!(text, "\nselected K = {selected}");
    emit(out, &text)
}
