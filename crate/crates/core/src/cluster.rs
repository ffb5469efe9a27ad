//! Frequency features, 1-D k-means and silhouette scoring.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::varpro::C64;

/// Below this fraction of the median `|Im ω|`, a mode counts as zero-frequency.
pub const NEAR_ZERO_RTOL: f64 = 1e-12;
/// Sweeps whose best silhouette falls below this are flagged low-confidence.
pub const LOW_CONFIDENCE_SILHOUETTE: f64 = 0.25;
pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaTransform {
    #[default]
    AbsImag,
    AbsImagSq,
    Log10AbsImag,
}

impl OmegaTransform {
    pub fn as_str(&self) -> &'static str {
        match self {
            OmegaTransform::AbsImag => "abs_imag",
            OmegaTransform::AbsImagSq => "abs_imag_sq",
            OmegaTransform::Log10AbsImag => "log10_abs_imag",
        }
    }

    /// Map a feature value back to `|Im ω|`.
    pub fn invert(&self, value: f64) -> f64 {
        match self {
            OmegaTransform::AbsImag => value,
            OmegaTransform::AbsImagSq => value.max(0.0).sqrt(),
            OmegaTransform::Log10AbsImag => 10f64.powf(value),
        }
    }
}

impl FromStr for OmegaTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_imag" => Ok(OmegaTransform::AbsImag),
            "abs_imag_sq" => Ok(OmegaTransform::AbsImagSq),
            "log10_abs_imag" => Ok(OmegaTransform::Log10AbsImag),
            other => Err(Error::Config(format!("unknown transform '{other}'"))),
        }
    }
}

/// Either a fixed number of clusters or a silhouette sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandCount {
    Fixed(usize),
    Auto,
}

impl fmt::Display for BandCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandCount::Fixed(k) => write!(f, "{k}"),
            BandCount::Auto => f.write_str("auto"),
        }
    }
}

impl Serialize for BandCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BandCount::Fixed(k) => s.serialize_u64(*k as u64),
            BandCount::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for BandCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => Ok(BandCount::Fixed(k as usize)),
            Raw::S(s) if s == "auto" => Ok(BandCount::Auto),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected an integer or \"auto\", got \"{s}\""
            ))),
        }
    }
}

/// Identifies one eigenvalue inside a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModeIndex {
    pub level: usize,
    pub window: usize,
    pub mode: usize,
}

#[derive(Debug, Clone)]
pub struct OmegaFeatures {
    pub values: Vec<f64>,
    /// Zero-frequency entries excluded from clustering and routed to the
    /// lowest band.
    pub near_zero: Vec<bool>,
    pub transform: OmegaTransform,
    pub source_index: Vec<ModeIndex>,
}

impl OmegaFeatures {
    pub fn from_modes(modes: &[(ModeIndex, C64)], transform: OmegaTransform) -> Self {
        let im: Vec<f64> = modes.iter().map(|(_, w)| w.im.abs()).collect();
        let mut values = Vec::with_capacity(im.len());
        let mut near_zero = vec![false; im.len()];
        match transform {
            OmegaTransform::AbsImag => values.extend(im.iter().copied()),
            OmegaTransform::AbsImagSq => values.extend(im.iter().map(|v| v * v)),
            OmegaTransform::Log10AbsImag => {
                let floor = NEAR_ZERO_RTOL * median(&im);
                let floor_value = if floor > 0.0 { floor.log10() } else { 0.0 };
                for (i, &v) in im.iter().enumerate() {
                    if v <= floor || v == 0.0 {
                        near_zero[i] = true;
                        values.push(floor_value);
                    } else {
                        values.push(v.log10());
                    }
                }
            }
        }
        OmegaFeatures {
            values,
            near_zero,
            transform,
            source_index: modes.iter().map(|(i, _)| *i).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values that take part in clustering.
    pub fn clusterable(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.near_zero)
            .filter(|(_, z)| !**z)
            .map(|(v, _)| *v)
            .collect()
    }

    /// Expand labels computed on [`clusterable`](Self::clusterable) back to
    /// every entry; near-zero entries get label 0.
    pub fn expand_labels(&self, labels: &[usize]) -> Vec<usize> {
        let mut it = labels.iter();
        self.near_zero
            .iter()
            .map(|&z| {
                if z {
                    0
                } else {
                    *it.next().expect("label per clusterable entry")
                }
            })
            .collect()
    }
}

/// Transform a plain list of eigenvalues; source indices number the modes.
pub fn transform_omega(omegas: &[C64], kind: OmegaTransform) -> OmegaFeatures {
    let modes: Vec<(ModeIndex, C64)> = omegas
        .iter()
        .enumerate()
        .map(|(j, w)| {
            (
                ModeIndex {
                    level: 0,
                    window: 0,
                    mode: j,
                },
                *w,
            )
        })
        .collect();
    OmegaFeatures::from_modes(&modes, kind)
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Cluster per feature; label 0 has the smallest centroid.
    pub labels: Vec<usize>,
    /// Ascending.
    pub centroids: Vec<f64>,
    pub silhouette: f64,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn distinct_count(values: &[f64]) -> usize {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

/// Index of the nearest entry in an ascending slice; ties go to the lower index.
pub fn nearest_sorted(sorted: &[f64], x: f64) -> usize {
    let p = sorted.partition_point(|&c| c < x);
    if p == 0 {
        0
    } else if p == sorted.len() {
        sorted.len() - 1
    } else if x - sorted[p - 1] <= sorted[p] - x {
        p - 1
    } else {
        p
    }
}

fn kmeans_plus_plus(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = values.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(values[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            values[pick]
        } else {
            values[rng.random_range(0..n)]
        };
        centers.push(next);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - next).powi(2));
        }
    }
    centers
}

/// One Lloyd run; returns ascending centroids, labels and inertia.
fn lloyd(values: &[f64], mut centers: Vec<f64>) -> (Vec<f64>, Vec<usize>, f64) {
    let k = centers.len();
    let mut labels = vec![usize::MAX; values.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        centers.sort_by(f64::total_cmp);
        let mut changed = false;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &v) in values.iter().enumerate() {
            let c = nearest_sorted(&centers, v);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            sums[c] += v;
            counts[c] += 1;
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            } else {
                // move an empty cluster onto the worst-served point
                let (far, _) = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, (v - centers[labels[i]]).abs()))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                centers[c] = values[far];
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    centers.sort_by(f64::total_cmp);
    let mut inertia = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let c = nearest_sorted(&centers, v);
        labels[i] = c;
        inertia += (v - centers[c]).powi(2);
    }
    // recompute means for the final assignment so centroids match labels
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&v, &l) in values.iter().zip(&labels) {
        sums[l] += v;
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            centers[c] = sums[c] / counts[c] as f64;
        }
    }
    (centers, labels, inertia)
}

/// k-means on scalar features: k-means++ seeding, Lloyd iterations, best of
/// `restarts` runs by inertia. Labels are ordered by ascending centroid.
pub fn kmeans(values: &[f64], k: usize, seed: u64, restarts: usize) -> Result<ClusterResult> {
    let distinct = distinct_count(values);
    if k == 0 || distinct < k {
        return Err(Error::TooFewPoints {
            points: distinct,
            clusters: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_plus_plus(values, k, &mut rng);
        let run = lloyd(values, init);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, labels, inertia) = best.expect("at least one restart");
    let silhouette = if k >= 2 {
        silhouette(values, &labels).unwrap_or(0.0)
    } else {
        0.0
    };
    Ok(ClusterResult {
        labels,
        centroids,
        silhouette,
        inertia,
        seed,
    })
}

/// Per-point silhouette values for 1-D data.
///
/// Singletons score 0. When both the intra-cluster and nearest-cluster mean
/// distances are 0 (coincident points split across clusters) the score is 0.
pub fn silhouette_samples(values: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    if values.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} values",
            labels.len(),
            values.len()
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::DegeneratePartition("fewer than two clusters".into()));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&v, &l) in values.iter().zip(labels) {
        members[l].push(v);
    }
    if let Some(empty) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::DegeneratePartition(format!(
            "cluster {empty} is empty"
        )));
    }
    let prefix: Vec<Vec<f64>> = members
        .iter_mut()
        .map(|m| {
            m.sort_by(f64::total_cmp);
            let mut p = Vec::with_capacity(m.len() + 1);
            p.push(0.0);
            let mut acc = 0.0;
            for v in m.iter() {
                acc += v;
                p.push(acc);
            }
            p
        })
        .collect();
    // sum of |x − y| over a sorted cluster via prefix sums
    let dist_sum = |c: usize, x: f64| -> f64 {
        let m = &members[c];
        let p = &prefix[c];
        let idx = m.partition_point(|&y| y < x);
        let below = x * idx as f64 - p[idx];
        let above = (p[m.len()] - p[idx]) - x * (m.len() - idx) as f64;
        below + above
    };
    Ok(values
        .iter()
        .zip(labels)
        .map(|(&x, &l)| {
            let own = members[l].len();
            if own == 1 {
                return 0.0;
            }
            let a = dist_sum(l, x) / (own - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != l)
                .map(|c| dist_sum(c, x) / members[c].len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                ((b - a) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean silhouette over all points.
pub fn silhouette(values: &[f64], labels: &[usize]) -> Result<f64> {
    let s = silhouette_samples(values, labels)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub best_k: usize,
    pub result: ClusterResult,
    /// `(K, silhouette)` for every K evaluated, ascending in K.
    pub scores: Vec<(usize, f64)>,
    pub low_confidence: bool,
}

/// Silhouette scores this close count as a tie in the K sweep.
pub const SILHOUETTE_TIE_TOL: f64 = 1e-3;

/// Run k-means for each K in `k_min..=k_max` and keep the smallest K whose
/// silhouette is within [`SILHOUETTE_TIE_TOL`] of the best.
pub fn sweep_clusters(
    values: &[f64],
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
) -> Result<SweepResult> {
    sweep_clusters_with(values, k_min, k_max, seed, restarts, |_| true)
}

/// Like [`sweep_clusters`], but only clusterings passing `admissible` can be
/// selected. Falls back to `k_min` when none pass.
pub fn sweep_clusters_with(
    values: &[f64],
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
    admissible: impl Fn(&ClusterResult) -> bool,
) -> Result<SweepResult> {
    if k_min < 2 {
        return Err(Error::Config(format!("k_min must be >= 2, got {k_min}")));
    }
    if k_max < k_min {
        return Err(Error::Config(format!("empty K range [{k_min}, {k_max}]")));
    }
    let results: Vec<ClusterResult> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| kmeans(values, k, seed, restarts))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<(usize, f64)> = results.iter().map(|r| (r.k(), r.silhouette)).collect();
    let ok: Vec<bool> = results.iter().map(&admissible).collect();
    let top = results
        .iter()
        .zip(&ok)
        .filter(|(_, ok)| **ok)
        .map(|(r, _)| r.silhouette)
        .fold(f64::NEG_INFINITY, f64::max);
    // splitting tight clusters further barely moves the score
    let best = results
        .iter()
        .zip(&ok)
        .position(|(r, ok)| *ok && r.silhouette >= top - SILHOUETTE_TIE_TOL)
        .unwrap_or(0);
    let result = results[best].clone();
    Ok(SweepResult {
        best_k: result.k(),
        low_confidence: result.silhouette < LOW_CONFIDENCE_SILHOUETTE,
        result,
        scores,
    })
}
