//! Dense Monte Carlo forward-pass kernel used as an empirical oracle for the
//! analytic variance profiles.
//!
//! The kernel is deliberately small: fully connected weight layers drawn
//! fresh from He initialization on every call, batch normalization with
//! exact sample statistics (biased variance, epsilon = 0), and ReLU. Means
//! are outside the variance model, so block-to-block handoff carries the
//! measured second moment into a fresh centered normal input rather than the
//! raw activations. Trials run in parallel with disjoint RNG streams derived
//! from (seed, trial), so profiles are bit-identical regardless of
//! scheduling.

use crate::archspec::{ArchSpec, BlockSpec, Style};
use crate::varprop::{ProfileSource, VarianceProfile};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Dense row-major batch-by-feature matrix.
pub type Matrix = Array2<f64>;

/// Smallest batch for which batch statistics are considered meaningful.
pub const MIN_BATCH: usize = 64;

/// Relative-error floor used when comparing profiles.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("column {column} has zero variance; batch statistics are undefined")]
    ZeroVarianceColumn { column: usize },
    #[error("batch must be at least {MIN_BATCH}, got {0}")]
    BatchTooSmall(usize),
    #[error("v1 architecture needs a stem normalization to define the input variance")]
    MissingStemNorm,
    #[error("profiles do not cover the same block positions")]
    PositionMismatch,
}

/// Monte Carlo parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub batch: usize,
    /// Feature count of the simulated layers.
    pub width: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            batch: 8192,
            width: 256,
            trials: 8,
            seed: 0,
        }
    }
}

/// He-initialized weight matrix: i.i.d. N(0, 2/fan_in) entries, filled in
/// row-major order so the result is a pure function of the RNG state.
pub fn he_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    assert!(fan_in > 0 && fan_out > 0, "weight dims must be positive");
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub(crate) fn standard_normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Idealized batch normalization: every column is shifted and rescaled to
/// exact sample mean 0 and biased sample variance gamma^2. A zero gamma
/// short-circuits to the zero matrix, since the output variance is zero no
/// matter what comes in.
pub fn batchnorm(x: &Matrix, gamma: f64) -> Result<Matrix, SimError> {
    assert!(x.nrows() >= 2, "batch statistics need at least two samples");
    if gamma == 0.0 {
        return Ok(Matrix::zeros(x.raw_dim()));
    }
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
    let mut out = x - &mean;
    let var = out.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>() / n);
    if let Some(column) = var.iter().position(|&v| v == 0.0) {
        return Err(SimError::ZeroVarianceColumn { column });
    }
    let scale = var.mapv(|v| gamma / v.sqrt());
    out *= &scale;
    Ok(out)
}

/// Elementwise max(0, x).
pub fn relu(x: &Matrix) -> Matrix {
    x.mapv(|v| v.max(0.0))
}

/// Mean over columns of the per-column sample variance, with means ignored:
/// the raw second moment E[x^2].
///
/// The whole variance analysis drops E[x]; normalization outputs have exact
/// zero mean anyway, and for post-ReLU activations the propagation laws
/// track the second moment, so this is the matching empirical quantity.
pub fn mean_column_variance(x: &Matrix) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

struct BlockTrace {
    skip_var: f64,
    branch_var: f64,
    out_var: f64,
}

fn forward_block_traced<R: Rng + ?Sized>(
    block: &BlockSpec,
    style: Style,
    x: &Matrix,
    rng: &mut R,
) -> Result<(Matrix, BlockTrace), SimError> {
    let width = x.ncols();
    let fresh = |rng: &mut R| he_init(width, width, rng);
    match style {
        Style::PreAct => {
            if block.downsample {
                // The first norm and ReLU are shared by the branch and the
                // projection skip path.
                let h = relu(&batchnorm(x, block.branch_gammas[0])?);
                let skip = h.dot(&fresh(rng));
                let mut t = h.dot(&fresh(rng));
                for &g in &block.branch_gammas[1..] {
                    t = relu(&batchnorm(&t, g)?).dot(&fresh(rng));
                }
                let out = &skip + &t;
                let trace = BlockTrace {
                    skip_var: mean_column_variance(&skip),
                    branch_var: mean_column_variance(&t),
                    out_var: mean_column_variance(&out),
                };
                Ok((out, trace))
            } else {
                let mut t = x.clone();
                for &g in &block.branch_gammas {
                    t = relu(&batchnorm(&t, g)?).dot(&fresh(rng));
                }
                let out = x + &t;
                let trace = BlockTrace {
                    skip_var: mean_column_variance(x),
                    branch_var: mean_column_variance(&t),
                    out_var: mean_column_variance(&out),
                };
                Ok((out, trace))
            }
        }
        Style::V1 => {
            let (last, mids) = block
                .branch_gammas
                .split_last()
                .expect("validated blocks have a non-empty branch");
            let mut t = x.clone();
            for &g in mids {
                t = relu(&batchnorm(&t.dot(&fresh(rng)), g)?);
            }
            let t = batchnorm(&t.dot(&fresh(rng)), *last)?;
            let skip = if block.downsample {
                let gd = block.gamma_down.expect("validated v1 downsampling block");
                batchnorm(&x.dot(&fresh(rng)), gd)?
            } else {
                x.clone()
            };
            let out = relu(&(&skip + &t));
            let trace = BlockTrace {
                skip_var: mean_column_variance(&skip),
                branch_var: mean_column_variance(&t),
                out_var: mean_column_variance(&out),
            };
            Ok((out, trace))
        }
        Style::Transformer => {
            // Two sequential residual adds, one normalized branch each; no
            // post-addition ReLU. The reported branch variance is the total
            // variance added by the block.
            let (g1, g2) = (block.branch_gammas[0], block.branch_gammas[1]);
            let b1 = relu(&batchnorm(x, g1)?).dot(&fresh(rng));
            let h = x + &b1;
            let b2 = relu(&batchnorm(&h, g2)?).dot(&fresh(rng));
            let out = &h + &b2;
            let trace = BlockTrace {
                skip_var: mean_column_variance(x),
                branch_var: mean_column_variance(&b1) + mean_column_variance(&b2),
                out_var: mean_column_variance(&out),
            };
            Ok((out, trace))
        }
    }
}

/// One residual block forward pass with fresh He weights.
pub fn forward_block<R: Rng + ?Sized>(
    block: &BlockSpec,
    style: Style,
    x: &Matrix,
    rng: &mut R,
) -> Result<Matrix, SimError> {
    forward_block_traced(block, style, x, rng).map(|(out, _)| out)
}

fn trial_profile(spec: &ArchSpec, cfg: &McConfig, trial: u64) -> Result<Vec<BlockTrace>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial);
    // Measure the variance leaving the stem.
    let mut v = match spec.style {
        Style::V1 => {
            if !spec.stem.has_norm {
                return Err(SimError::MissingStemNorm);
            }
            let g0 = spec.stem.gamma0.expect("validated stems carry gamma0");
            let x0 = standard_normal_matrix(cfg.batch, cfg.width, &mut rng);
            let w = he_init(cfg.width, cfg.width, &mut rng);
            mean_column_variance(&relu(&batchnorm(&x0.dot(&w), g0)?))
        }
        Style::Transformer if spec.stem.has_norm => {
            let g0 = spec.stem.gamma0.expect("validated stems carry gamma0");
            let x0 = standard_normal_matrix(cfg.batch, cfg.width, &mut rng);
            let w = he_init(cfg.width, cfg.width, &mut rng);
            mean_column_variance(&batchnorm(&x0.dot(&w), g0)?)
        }
        // No stem normalization: normalized network input, variance 1.
        _ => 1.0,
    };
    // The laws model every block input as a centered feature map with the
    // propagated variance; means are outside the model. Each block therefore
    // reads a fresh centered normal input carrying the empirically measured
    // variance of the previous output.
    let mut traces = Vec::new();
    for (_, _, block) in spec.blocks() {
        let x = standard_normal_matrix(cfg.batch, cfg.width, &mut rng) * v.sqrt();
        let (_, trace) = forward_block_traced(block, spec.style, &x, &mut rng)?;
        v = trace.out_var;
        traces.push(trace);
    }
    Ok(traces)
}

/// Measure the empirical variance profile of `spec`: `cfg.trials`
/// independent forward passes, averaged per block, with the standard error
/// of `out_var` across trials.
pub fn mc_variance_profile(spec: &ArchSpec, cfg: &McConfig) -> Result<VarianceProfile, SimError> {
    if cfg.batch < MIN_BATCH {
        return Err(SimError::BatchTooSmall(cfg.batch));
    }
    assert!(cfg.trials >= 1, "at least one trial is required");
    assert!(cfg.width >= 2, "width must allow batch statistics");

    let per_trial: Vec<Vec<BlockTrace>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| trial_profile(spec, cfg, t))
        .collect::<Result<_, _>>()?;

    let rows = per_trial[0].len();
    let trials = cfg.trials as f64;
    let mut skip_var = vec![0.0; rows];
    let mut branch_var = vec![0.0; rows];
    let mut out_var = vec![0.0; rows];
    for trial in &per_trial {
        for (i, tr) in trial.iter().enumerate() {
            skip_var[i] += tr.skip_var / trials;
            branch_var[i] += tr.branch_var / trials;
            out_var[i] += tr.out_var / trials;
        }
    }
    let stderr: Vec<f64> = (0..rows)
        .map(|i| {
            if cfg.trials < 2 {
                return 0.0;
            }
            let mean = out_var[i];
            let ss: f64 = per_trial
                .iter()
                .map(|t| (t[i].out_var - mean) * (t[i].out_var - mean))
                .sum();
            (ss / (trials - 1.0)).sqrt() / trials.sqrt()
        })
        .collect();

    Ok(VarianceProfile {
        positions: spec.blocks().map(|(s, b, _)| (s, b)).collect(),
        skip_var,
        branch_var,
        out_var,
        source: ProfileSource::Empirical,
        stderr: Some(stderr),
    })
}

/// Row-by-row relative error of an empirical `out_var` sequence against the
/// analytic one: `|e - a| / max(a, floor)` with floor 1e-6.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileComparison {
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

pub fn compare_profiles(
    analytic: &VarianceProfile,
    empirical: &VarianceProfile,
) -> Result<ProfileComparison, SimError> {
    if analytic.positions != empirical.positions {
        return Err(SimError::PositionMismatch);
    }
    let rel_err: Vec<f64> = analytic
        .out_var
        .iter()
        .zip(&empirical.out_var)
        .map(|(a, e)| (e - a).abs() / a.max(REL_ERR_FLOOR))
        .collect();
    let max_rel_err = rel_err.iter().copied().fold(0.0, f64::max);
    let mean_rel_err = if rel_err.is_empty() {
        0.0
    } else {
        rel_err.iter().sum::<f64>() / rel_err.len() as f64
    };
    Ok(ProfileComparison {
        rel_err,
        max_rel_err,
        mean_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{build_canonical, BlockKind, CanonicalName};
    use crate::varprop::full_profile;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn he_init_sample_variance() {
        let w = he_init(256, 256, &mut rng(7));
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 256.0;
        assert!(var > expected * 0.9 && var < expected * 1.1, "{var}");
    }

    #[test]
    fn he_init_is_deterministic() {
        assert_eq!(he_init(16, 16, &mut rng(3)), he_init(16, 16, &mut rng(3)));
    }

    #[test]
    fn he_init_fan_in_one() {
        let w = he_init(1, 4096, &mut rng(11));
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0).abs() < 0.2, "{var}");
    }

    #[test]
    fn batchnorm_exact_statistics() {
        let x = standard_normal_matrix(512, 16, &mut rng(1)) * 3.0 + 7.0;
        for gamma in [1.0, 0.3, 2.5] {
            let y = batchnorm(&x, gamma).unwrap();
            let n = y.nrows() as f64;
            for col in y.axis_iter(Axis(1)) {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-12, "mean {mean}");
                assert!((var - gamma * gamma).abs() < 1e-10, "var {var}");
            }
        }
    }

    #[test]
    fn batchnorm_zero_gamma_is_zero() {
        let x = standard_normal_matrix(64, 8, &mut rng(2));
        let y = batchnorm(&x, 0.0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_is_idempotent_up_to_rounding() {
        let x = standard_normal_matrix(256, 8, &mut rng(4));
        let once = batchnorm(&x, 1.7).unwrap();
        let twice = batchnorm(&batchnorm(&x, 1.0).unwrap(), 1.7).unwrap();
        let max_diff = (&once - &twice)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "{max_diff}");
    }

    #[test]
    fn batchnorm_zero_variance_names_column() {
        let mut x = standard_normal_matrix(64, 4, &mut rng(5));
        x.column_mut(2).fill(3.25);
        assert_eq!(
            batchnorm(&x, 1.0).unwrap_err(),
            SimError::ZeroVarianceColumn { column: 2 }
        );
    }

    #[test]
    fn relu_basics() {
        let x = standard_normal_matrix(64, 4, &mut rng(6));
        let y = relu(&x);
        assert!(y.iter().all(|&v| v >= 0.0));
        assert_eq!(relu(&y), y);
        let neg = Matrix::from_elem((4, 4), -2.0);
        assert!(relu(&neg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_half_second_moment() {
        let x = standard_normal_matrix(1000, 1000, &mut rng(8));
        let m = relu(&x).iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((0.48..=0.52).contains(&m), "{m}");
    }

    fn mean_out_var<F>(trials: u64, mut forward: F) -> f64
    where
        F: FnMut(&mut ChaCha8Rng) -> f64,
    {
        let mut acc = 0.0;
        for t in 0..trials {
            let mut r = rng(100);
            r.set_stream(t);
            acc += forward(&mut r);
        }
        acc / trials as f64
    }

    #[test]
    fn v1_block_halves_the_added_variance() {
        let block = BlockSpec {
            kind: BlockKind::Basic,
            downsample: false,
            branch_gammas: vec![1.0, 1.0],
            gamma_down: None,
        };
        // Input columns with variance 4 -> output variance near 2.5.
        let got = mean_out_var(8, |r| {
            let x = batchnorm(&standard_normal_matrix(8192, 64, r), 2.0).unwrap();
            let y = forward_block(&block, Style::V1, &x, r).unwrap();
            mean_column_variance(&y)
        });
        assert!((got - 2.5).abs() / 2.5 < 0.1, "{got}");
    }

    #[test]
    fn v1_downsample_ignores_input_variance() {
        let block = BlockSpec {
            kind: BlockKind::Basic,
            downsample: true,
            branch_gammas: vec![1.0, 1.0],
            gamma_down: Some(2.0),
        };
        for input_gamma in [1.0, 3.0] {
            let got = mean_out_var(8, |r| {
                let x = batchnorm(&standard_normal_matrix(8192, 64, r), input_gamma).unwrap();
                let y = forward_block(&block, Style::V1, &x, r).unwrap();
                mean_column_variance(&y)
            });
            assert!((got - 2.5).abs() / 2.5 < 0.1, "{got} at {input_gamma}");
        }
    }

    #[test]
    fn preact_zero_last_gamma_is_exact_identity() {
        let block = BlockSpec {
            kind: BlockKind::Basic,
            downsample: false,
            branch_gammas: vec![1.0, 0.0],
            gamma_down: None,
        };
        let x = standard_normal_matrix(128, 16, &mut rng(9));
        let y = forward_block(&block, Style::PreAct, &x, &mut rng(10)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn v1_all_zero_gammas_is_relu_of_input() {
        let block = BlockSpec {
            kind: BlockKind::Bottleneck,
            downsample: false,
            branch_gammas: vec![0.0, 0.0, 0.0],
            gamma_down: None,
        };
        let x = standard_normal_matrix(128, 16, &mut rng(12));
        let y = forward_block(&block, Style::V1, &x, &mut rng(13)).unwrap();
        assert_eq!(y, relu(&x));
    }

    #[test]
    fn transformer_block_accumulates_both_branches() {
        let block = BlockSpec {
            kind: BlockKind::TxBlock,
            downsample: false,
            branch_gammas: vec![1.0, 1.0],
            gamma_down: None,
        };
        let got = mean_out_var(8, |r| {
            let x = batchnorm(&standard_normal_matrix(8192, 64, r), 1.0).unwrap();
            let y = forward_block(&block, Style::Transformer, &x, r).unwrap();
            mean_column_variance(&y)
        });
        // Additive model: 1 + 1 + 1.
        assert!((got - 3.0).abs() / 3.0 < 0.1, "{got}");
    }

    #[test]
    fn mc_profile_matches_analytic_on_small_runs() {
        let cfg = McConfig {
            batch: 2048,
            width: 128,
            trials: 4,
            seed: 0,
        };
        for name in [CanonicalName::ResNet18, CanonicalName::PreAct18] {
            let spec = build_canonical(name, 1.0);
            let analytic = full_profile(&spec).unwrap();
            let empirical = mc_variance_profile(&spec, &cfg).unwrap();
            let cmp = compare_profiles(&analytic, &empirical).unwrap();
            assert!(cmp.max_rel_err < 0.15, "{name:?}: {:?}", cmp.rel_err);
        }
    }

    #[test]
    fn mc_profile_is_deterministic() {
        let spec = build_canonical(CanonicalName::ResNet18, 1.0);
        let cfg = McConfig {
            batch: 256,
            width: 32,
            trials: 3,
            seed: 42,
        };
        let a = mc_variance_profile(&spec, &cfg).unwrap();
        let b = mc_variance_profile(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn mc_rejects_small_batches() {
        let spec = build_canonical(CanonicalName::ResNet18, 1.0);
        let cfg = McConfig {
            batch: 8,
            ..McConfig::default()
        };
        assert_eq!(
            mc_variance_profile(&spec, &cfg).unwrap_err(),
            SimError::BatchTooSmall(8)
        );
    }

    #[test]
    fn mc_empirical_export_carries_stderr() {
        let spec = build_canonical(CanonicalName::PreAct18, 1.0);
        let cfg = McConfig {
            batch: 128,
            width: 16,
            trials: 2,
            seed: 0,
        };
        let profile = mc_variance_profile(&spec, &cfg).unwrap();
        let json: serde_json::Value = serde_json::from_str(&profile.to_json()).unwrap();
        assert_eq!(json["source"], "empirical");
        assert!(json["rows"][0].get("stderr").is_some());
    }

    #[test]
    fn compare_profiles_basics() {
        let spec = build_canonical(CanonicalName::ResNet18, 1.0);
        let a = full_profile(&spec).unwrap();
        let same = compare_profiles(&a, &a).unwrap();
        assert_eq!(same.max_rel_err, 0.0);
        let mut shifted = a.clone();
        shifted.out_var = shifted.out_var.iter().map(|v| v * 1.05).collect();
        let cmp = compare_profiles(&a, &shifted).unwrap();
        assert!((cmp.max_rel_err - 0.05).abs() < 1e-12);
        let mut other = a.clone();
        other.positions.pop();
        other.skip_var.pop();
        other.branch_var.pop();
        other.out_var.pop();
        assert_eq!(
            compare_profiles(&a, &other).unwrap_err(),
            SimError::PositionMismatch
        );
    }
}
