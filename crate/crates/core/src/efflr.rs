//! Effective-learning-rate analysis of the normalization scale.
//!
//! The intermediate block `y = N[W ReLU(diag(gamma) x)]` is invariant to the
//! overall scale of gamma, so only the direction of gamma matters to the
//! loss. Gradients, however, shrink as 1/||gamma||, and a plain SGD step on
//! gamma moves the direction with an effective step size proportional to
//! eta / ||gamma||^2. The experiment here measures the first-update norm of
//! the direction across initial scales and fits the power law, which should
//! come out with slope close to -2.

use crate::simkernel::{batchnorm, he_init, standard_normal_matrix, Matrix, SimError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Default central-difference base step; scaled per coordinate by
/// max(1, |gamma_i|).
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Default SGD step for the update-norm experiment, small enough that the
/// first update stays deep in the first-order regime.
pub const DEFAULT_ETA: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum EfflrError {
    #[error("column {column} has zero variance before normalization")]
    ZeroVariance { column: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("need at least 3 positive, distinct scales")]
    BadScales,
    #[error("update norm at scale {scale} is degenerate")]
    DegenerateUpdate { scale: f64 },
    #[error("log-log fit needs strictly positive coordinates")]
    NonPositivePoint,
    #[error("log-log fit needs at least two distinct x values")]
    DegenerateFit,
}

impl From<SimError> for EfflrError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ZeroVarianceColumn { column } => EfflrError::ZeroVariance { column },
            other => unreachable!("normalization only fails on zero variance: {other}"),
        }
    }
}

/// Diagonal of the scaling step, one positive value per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaVec(Vec<f64>);

impl GammaVec {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(
            !values.is_empty() && values.iter().all(|v| v.is_finite()),
            "gamma vector must be nonempty and finite"
        );
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Frobenius norm of the diagonal.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-norm direction.
    pub fn direction(&self) -> GammaVec {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize the zero vector");
        self.scaled(1.0 / n)
    }

    pub fn scaled(&self, c: f64) -> GammaVec {
        GammaVec(self.0.iter().map(|v| v * c).collect())
    }
}

/// `N[W ReLU(diag(gamma) x)]`: per-feature scaling, ReLU, weight multiply,
/// then exact normalization of every output column to mean 0, variance 1.
pub fn intermediate_forward(
    x: &Matrix,
    gamma: &GammaVec,
    w: &Matrix,
) -> Result<Matrix, EfflrError> {
    assert_eq!(x.ncols(), gamma.len(), "gamma length must match features");
    assert_eq!(w.nrows(), x.ncols(), "weight shape must match features");
    let mut scaled = x.clone();
    for (mut col, &g) in scaled.columns_mut().into_iter().zip(gamma.values()) {
        col.mapv_inplace(|v| (v * g).max(0.0));
    }
    Ok(batchnorm(&scaled.dot(w), 1.0)?)
}

/// Half mean-squared error between the intermediate block output and a fixed
/// target.
pub fn loss(gamma: &GammaVec, x: &Matrix, w: &Matrix, target: &Matrix) -> Result<f64, EfflrError> {
    let y = intermediate_forward(x, gamma, w)?;
    let d = &y - target;
    let mse = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    Ok(0.5 * mse)
}

/// Central-difference gradient of [`loss`] with per-coordinate step
/// `h * max(1, |gamma_i|)`.
pub fn grad_gamma(
    gamma: &GammaVec,
    x: &Matrix,
    w: &Matrix,
    target: &Matrix,
    h: f64,
) -> Result<Vec<f64>, EfflrError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = Vec::with_capacity(gamma.len());
    let mut probe = gamma.clone();
    for i in 0..gamma.len() {
        let base = gamma.values()[i];
        let step = h * base.abs().max(1.0);
        probe.0[i] = base + step;
        let up = loss(&probe, x, w, target)?;
        probe.0[i] = base - step;
        let down = loss(&probe, x, w, target)?;
        probe.0[i] = base;
        let g = (up - down) / (2.0 * step);
        if !g.is_finite() {
            return Err(EfflrError::NonFiniteLoss);
        }
        grad.push(g);
    }
    Ok(grad)
}

/// One plain gradient-descent step, elementwise `gamma - eta * grad`.
pub fn sgd_step(gamma: &GammaVec, grad: &[f64], eta: f64) -> GammaVec {
    assert_eq!(gamma.len(), grad.len());
    assert!(eta.is_finite() && eta >= 0.0, "eta must be nonnegative");
    GammaVec(
        gamma
            .values()
            .iter()
            .zip(grad)
            .map(|(g, d)| g - eta * d)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalePoint {
    pub scale: f64,
    pub update_norm: f64,
}

/// Ordinary least-squares fit on log-transformed points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UpdateNormExperiment {
    pub points: Vec<ScalePoint>,
    pub fit: RegressionFit,
}

impl UpdateNormExperiment {
    pub fn to_json(&self) -> String {
        crate::jsonfmt::to_string_pretty(self)
    }
}

/// OLS on (ln x, ln y).
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<RegressionFit, EfflrError> {
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(EfflrError::NonPositivePoint);
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return Err(EfflrError::DegenerateFit);
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = logs
        .iter()
        .map(|p| {
            let r = p.1 - (slope * p.0 + intercept);
            r * r
        })
        .sum();
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(RegressionFit {
        slope,
        intercept,
        r2,
    })
}

/// Measure the first-update norm of the gamma direction across initial
/// scales and fit the power law.
///
/// One direction, input batch, weight matrix, and target are drawn from
/// `seed` and shared by every scale. For each scale c the initial gamma is
/// c times the unit direction; after a single SGD step the re-normalized
/// direction is compared against the initial one.
pub fn update_norm_experiment(
    scales: &[f64],
    width: usize,
    batch: usize,
    eta: f64,
    seed: u64,
) -> Result<UpdateNormExperiment, EfflrError> {
    let mut distinct: Vec<f64> = scales.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if scales.len() < 3 || distinct.len() != scales.len() || distinct[0] <= 0.0 {
        return Err(EfflrError::BadScales);
    }
    assert!(width >= 2 && batch >= 2, "width and batch must be at least 2");
    assert!(eta.is_finite() && eta > 0.0, "eta must be positive");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = GammaVec::new(
        (0..width)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v.abs() + 0.1
            })
            .collect(),
    )
    .direction();
    let x = standard_normal_matrix(batch, width, &mut rng);
    let w = he_init(width, width, &mut rng);
    let target = standard_normal_matrix(batch, width, &mut rng);

    let points: Vec<ScalePoint> = scales
        .par_iter()
        .map(|&scale| {
            let start = direction.scaled(scale);
            let grad = grad_gamma(&start, &x, &w, &target, DEFAULT_FD_STEP)?;
            let stepped = sgd_step(&start, &grad, eta).direction();
            let update_norm = stepped
                .values()
                .iter()
                .zip(direction.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if !(update_norm > 0.0) || !update_norm.is_finite() {
                return Err(EfflrError::DegenerateUpdate { scale });
            }
            Ok(ScalePoint { scale, update_norm })
        })
        .collect::<Result<_, _>>()?;

    let fit = fit_loglog(
        &points
            .iter()
            .map(|p| (p.scale, p.update_norm))
            .collect::<Vec<_>>(),
    )?;
    Ok(UpdateNormExperiment { points, fit })
}
