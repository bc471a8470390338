//! Synthetic Gaussian-cloud pairs with a known rotation and correspondence.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use rayon::prelude::*;

use crate::aligner::AlignResult;
use crate::error::{Error, Result};
use crate::geometry::{random_orthogonal, GaussianCloud, OrthogonalMap, PointCloud};
use crate::transport::Matching;

/// Log-standard-deviation of the per-entry variance distribution.
const VARIANCE_LOG_STD: f64 = 0.5;
/// Informative breadth factors span `10^-1 ..= 10^1`.
const BREADTH_DECADES: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Log-normal variances carried over to the matching target.
    Clean,
    /// As `Clean`, with an extra per-row breadth factor spanning two orders
    /// of magnitude.
    Informative,
    /// Breadth-scaled variances handed to target rows by an independent
    /// permutation, so dispersion says nothing about the true partner.
    Hostile,
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clean => "clean",
            Self::Informative => "informative-variance",
            Self::Hostile => "hostile-variance",
        })
    }
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "informative-variance" | "informative" => Ok(Self::Informative),
            "hostile-variance" | "hostile" => Ok(Self::Hostile),
            other => Err(Error::Config(format!("unknown variance mode '{other}'"))),
        }
    }
}

/// Source row `i` corresponds to target row `true_matching[i]`, whose mean
/// is `x_i Q*` plus noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub source: GaussianCloud,
    pub target: GaussianCloud,
    pub true_map: OrthogonalMap,
    pub true_matching: Matching,
    pub noise_sigma: f64,
    pub mode: VarianceMode,
}

pub fn generate(n: usize, d: usize, noise_sigma: f64, mode: VarianceMode, seed: u64) -> Result<SynthInstance> {
    if n < 2 || d < 2 {
        return Err(Error::Config(format!("synthetic instances need n >= 2 and d >= 2, got n = {n}, d = {d}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let source_means = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let log_normal = LogNormal::new(0.0, VARIANCE_LOG_STD).expect("valid log-normal");
    let mut source_vars = DMatrix::from_fn(n, d, |_, _| log_normal.sample(&mut rng));
    if mode != VarianceMode::Clean {
        for mut row in source_vars.row_iter_mut() {
            let breadth = 10f64.powf(rng.random_range(-BREADTH_DECADES..=BREADTH_DECADES));
            row *= breadth;
        }
    }

    let true_map = random_orthogonal(d, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let rotated = &source_means * true_map.matrix();
    let mut target_means = DMatrix::zeros(n, d);
    let mut target_vars = DMatrix::zeros(n, d);
    for (i, &j) in perm.iter().enumerate() {
        target_means.set_row(j, &rotated.row(i));
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("valid noise sigma");
        target_means.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let variance_owner = match mode {
        VarianceMode::Hostile => {
            let mut other: Vec<usize> = (0..n).collect();
            other.shuffle(&mut rng);
            other
        }
        _ => perm.clone(),
    };
    for (i, &j) in variance_owner.iter().enumerate() {
        target_vars.set_row(j, &source_vars.row(i));
    }

    Ok(SynthInstance {
        source: GaussianCloud::new(PointCloud::new(source_means)?, source_vars)?,
        target: GaussianCloud::new(PointCloud::new(target_means)?, target_vars)?,
        true_map,
        true_matching: Matching::new(perm, n)?,
        noise_sigma,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthScore {
    /// Fraction of source rows whose nearest target mean under the map is
    /// the true partner.
    pub match_accuracy: f64,
    /// `‖R − Q*‖_F`.
    pub map_error: f64,
}

pub fn score_against_truth(result: &AlignResult, instance: &SynthInstance) -> Result<TruthScore> {
    score_map(&result.map, instance)
}

pub fn score_map(map: &OrthogonalMap, instance: &SynthInstance) -> Result<TruthScore> {
    let x = instance.source.means().transform(map)?;
    let y = instance.target.means().as_matrix();
    let truth = instance.true_matching.target_of();
    let sq_y: Vec<f64> = y.row_iter().map(|r| r.norm_squared()).collect();
    let xm = x.as_matrix();
    let hits = (0..xm.nrows())
        .into_par_iter()
        .filter(|&i| {
            let xi = xm.row(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, yj) in y.row_iter().enumerate() {
                let dist = sq_y[j] - 2.0 * xi.dot(&yj);
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1 == truth[i]
        })
        .count();
    Ok(TruthScore {
        match_accuracy: hits as f64 / xm.nrows() as f64,
        map_error: (map.matrix() - instance.true_map.matrix()).norm(),
    })
}
