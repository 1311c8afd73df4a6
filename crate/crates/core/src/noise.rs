//! Input-noise sensitivity of the AMSP-VConv block against a standard
//! convolution layer.
//!
//! For each seed both blocks get fresh random weights, one clean input `x`
//! and one noise direction `z`; at level `s` the deviation is
//! `‖f(x + s·z) − f(x)‖ / ‖f(x)‖`. Curves are averaged over seeds.

use rayon::prelude::*;
use serde::Serialize;

use crate::amsp::{AMSPVConvBlock, DEFAULT_GROUPS, DEFAULT_KERNEL};
use crate::error::{invalid, Result};
use crate::init;
use crate::ops::{cbs, Cbs};
use crate::tensor::{Shape, Tensor};

pub const STUDY: &str = "output-deviation property study: relative change of block output under additive Gaussian input noise; untrained random weights, no detection accuracy is measured";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseProbeConfig {
    pub shape: [usize; 4],
    pub groups: usize,
    pub kernel: usize,
    pub seeds: usize,
    pub seed: u64,
    pub levels: Vec<f64>,
}

impl Default for NoiseProbeConfig {
    fn default() -> Self {
        Self {
            shape: [2, 16, 16, 16],
            groups: DEFAULT_GROUPS,
            kernel: DEFAULT_KERNEL,
            seeds: 16,
            seed: 0,
            levels: default_levels(),
        }
    }
}

/// Standard deviations 0, 1, ..., 10.
pub fn default_levels() -> Vec<f64> {
    (0..=10).map(f64::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseCurve {
    pub block: &'static str,
    pub weight_count: usize,
    /// Seed-averaged deviation, one entry per level.
    pub mean_deviation: Vec<f64>,
    pub per_seed: Vec<Vec<f64>>,
    pub non_decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseReport {
    pub study: &'static str,
    pub config: NoiseProbeConfig,
    pub curves: Vec<NoiseCurve>,
}

fn deviation(block: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, z: &Tensor, clean: &Tensor, level: f64) -> Result<f64> {
    let noisy_in = x.zip_map(z, "noise", |a, b| a + level * b)?;
    let noisy = block(&noisy_in)?;
    let diff = noisy.zip_map(clean, "noise", |a, b| a - b)?;
    Ok(diff.norm() / clean.norm())
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

pub fn noise_probe(cfg: &NoiseProbeConfig) -> Result<NoiseReport> {
    if let Some(bad) = cfg.levels.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(invalid(format!("noise level {bad} must be finite and non-negative")));
    }
    if cfg.seeds == 0 {
        return Err(invalid("noise probe needs at least one seed"));
    }
    let shape = Shape::from(cfg.shape);
    let c = shape.c;
    // Validates c, groups and kernel before any work is spread out.
    AMSPVConvBlock::seeded(c, cfg.groups, cfg.kernel, cfg.seed)?;

    type SeedCurves = (Vec<f64>, Vec<f64>, usize, usize);
    let per_seed: Vec<SeedCurves> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| -> Result<SeedCurves> {
            let seed = init::derive_seed(cfg.seed, &format!("probe-{s}"));
            let block = AMSPVConvBlock::seeded(c, cfg.groups, cfg.kernel, init::derive_seed(seed, "amsp-vconv"))?;
            let mut rng = init::rng(init::derive_seed(seed, "standard"));
            let standard: Cbs = init::cbs(c, c, cfg.kernel, 1, &mut rng)?;
            let mut rng = init::rng(init::derive_seed(seed, "data"));
            let x = Tensor::normal(shape, 1.0, &mut rng);
            let z = Tensor::normal(shape, 1.0, &mut rng);

            let run_amsp = |t: &Tensor| block.forward(t);
            let run_std = |t: &Tensor| cbs(t, &standard.conv, &standard.bn);
            let clean_a = run_amsp(&x)?;
            let clean_s = run_std(&x)?;
            let mut a = Vec::with_capacity(cfg.levels.len());
            let mut b = Vec::with_capacity(cfg.levels.len());
            for &level in &cfg.levels {
                a.push(deviation(run_amsp, &x, &z, &clean_a, level)?);
                b.push(deviation(run_std, &x, &z, &clean_s, level)?);
            }
            Ok((a, b, block.weight_count(), standard.conv.weight.len()))
        })
        .collect::<Result<_>>()?;

    let mean = |pick: fn(&SeedCurves) -> &Vec<f64>| -> Vec<f64> {
        (0..cfg.levels.len())
            .map(|i| per_seed.iter().map(|s| pick(s)[i]).sum::<f64>() / per_seed.len() as f64)
            .collect()
    };
    let amsp_mean = mean(|s| &s.0);
    let std_mean = mean(|s| &s.1);
    let curves = vec![
        NoiseCurve {
            block: "amsp_vconv",
            weight_count: per_seed[0].2,
            non_decreasing: non_decreasing(&amsp_mean),
            mean_deviation: amsp_mean,
            per_seed: per_seed.iter().map(|s| s.0.clone()).collect(),
        },
        NoiseCurve {
            block: "standard_conv",
            weight_count: per_seed[0].3,
            non_decreasing: non_decreasing(&std_mean),
            mean_deviation: std_mean,
            per_seed: per_seed.iter().map(|s| s.1.clone()).collect(),
        },
    ];
    Ok(NoiseReport {
        study: STUDY,
        config: cfg.clone(),
        curves,
    })
}
