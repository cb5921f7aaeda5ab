//! Closed-form variance propagation through residual architectures.
//!
//! All formulas operate on per-element variances at initialization, assuming
//! normalization rescales each feature to variance gamma^2, He-initialized
//! weight layers, and zero covariance between skip connection and residual
//! branch. Three regimes appear:
//!
//! * preact blocks add the branch variance: `v' = v + gamma_last^2`;
//! * v1 blocks halve the sum through the post-addition ReLU:
//!   `v' = (v + gamma_last^2) / 2`;
//! * downsampling blocks ignore the incoming variance entirely and reset it
//!   from their own scales.

use crate::archspec::{ArchSpec, BlockKind, BlockSpec, Style};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    Analytic,
    Empirical,
}

/// Per-block variance sequence: variance entering the addition on the skip
/// side, variance of the residual branch output, and variance after the
/// block.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    pub positions: Vec<(usize, usize)>,
    pub skip_var: Vec<f64>,
    pub branch_var: Vec<f64>,
    pub out_var: Vec<f64>,
    pub source: ProfileSource,
    /// Standard error of `out_var` across trials; empirical profiles only.
    pub stderr: Option<Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum VarianceError {
    #[error("v1 architecture needs a stem normalization to define the input variance")]
    MissingStemNorm,
    #[error("input variance must be finite and nonnegative, got {0}")]
    BadInputVariance(f64),
}

/// Variance of a residual branch output: the square of the last branch
/// gamma. Earlier branch scales are erased by the later normalizations.
pub fn branch_variance(block: &BlockSpec, style: Style) -> f64 {
    assert!(
        style != Style::Transformer && block.kind != BlockKind::TxBlock,
        "transformer blocks have two branches; use propagate_transformer"
    );
    let g = block.gamma_last();
    g * g
}

/// Additive accumulation: `out[k] = var_s + sum of gamma_lasts[..=k]^2`.
pub fn propagate_preact(var_s: f64, gamma_lasts: &[f64]) -> Vec<f64> {
    let mut v = var_s;
    gamma_lasts
        .iter()
        .map(|g| {
            v += g * g;
            v
        })
        .collect()
}

/// Half accumulation through the post-addition ReLU:
/// `v_{k+1} = (v_k + gamma_lasts[k]^2) / 2`.
pub fn propagate_v1(var_s: f64, gamma_lasts: &[f64]) -> Vec<f64> {
    let mut v = var_s;
    gamma_lasts
        .iter()
        .map(|g| {
            v = 0.5 * (v + g * g);
            v
        })
        .collect()
}

/// Closed form of the same recurrence:
/// `out[k] = 2^-(k+1) var_s + sum_m 2^-(k+1-m) gamma_lasts[m]^2`.
///
/// Kept as an independent route; it must agree with [`propagate_v1`] to
/// relative 1e-12.
pub fn propagate_v1_closed_form(var_s: f64, gamma_lasts: &[f64]) -> Vec<f64> {
    (0..gamma_lasts.len())
        .map(|k| {
            let mut v = var_s / f64::powi(2.0, k as i32 + 1);
            for (m, g) in gamma_lasts[..=k].iter().enumerate() {
                v += g * g / f64::powi(2.0, (k + 1 - m) as i32);
            }
            v
        })
        .collect()
}

/// Reset variance of a v1 downsampling block. The incoming variance does not
/// appear: both paths end in a normalization.
pub fn reset_downsample_v1(gamma_down: f64, gamma_last: f64) -> f64 {
    0.5 * (gamma_down * gamma_down + gamma_last * gamma_last)
}

/// Reset variance of a preact downsampling block, where `gamma1` is the
/// shared first norm feeding the skip path and `gamma2` the last branch
/// norm. No post-addition ReLU, so nothing is halved.
pub fn reset_downsample_preact(gamma1: f64, gamma2: f64) -> f64 {
    gamma1 * gamma1 + gamma2 * gamma2
}

/// Variance leaving a conv-norm-ReLU stem.
pub fn early_stage_variance(gamma0: f64) -> f64 {
    0.5 * gamma0 * gamma0
}

/// Transformer accumulation: each block adds the variance of both of its
/// branches, `v' = v + gamma1^2 + gamma2^2`. There is no post-addition ReLU,
/// so no halving.
pub fn propagate_transformer(var_s: f64, blocks: &[BlockSpec]) -> Vec<f64> {
    let mut v = var_s;
    blocks
        .iter()
        .map(|b| {
            assert!(
                b.kind == BlockKind::TxBlock,
                "propagate_transformer expects txblock blocks"
            );
            let (g1, g2) = (b.branch_gammas[0], b.branch_gammas[1]);
            v += g1 * g1 + g2 * g2;
            v
        })
        .collect()
}

/// Analytic profile with the default input variance of 1.0 for
/// architectures whose stem does not define it.
pub fn full_profile(spec: &ArchSpec) -> Result<VarianceProfile, VarianceError> {
    full_profile_with_input(spec, 1.0)
}

/// Analytic profile. `input_var` is the variance of the network input; it
/// only matters for styles without a stem normalization (preact, transformer
/// without a stem norm), since a v1 stem resets the variance itself.
pub fn full_profile_with_input(
    spec: &ArchSpec,
    input_var: f64,
) -> Result<VarianceProfile, VarianceError> {
    if !input_var.is_finite() || input_var < 0.0 {
        return Err(VarianceError::BadInputVariance(input_var));
    }
    let mut v = match spec.style {
        Style::V1 => {
            if !spec.stem.has_norm {
                return Err(VarianceError::MissingStemNorm);
            }
            early_stage_variance(spec.stem.gamma0.expect("validated stems carry gamma0"))
        }
        Style::PreAct => input_var,
        Style::Transformer => match spec.stem.gamma0.filter(|_| spec.stem.has_norm) {
            // A stem LayerNorm pins the variance to gamma0^2 directly; no
            // ReLU follows it.
            Some(g0) => g0 * g0,
            None => input_var,
        },
    };

    let mut positions = Vec::new();
    let mut skip_var = Vec::new();
    let mut branch_var = Vec::new();
    let mut out_var = Vec::new();
    for (s, b, block) in spec.blocks() {
        let (skip, branch, out) = match spec.style {
            Style::Transformer => {
                let added = propagate_transformer(0.0, std::slice::from_ref(block))[0];
                (v, added, v + added)
            }
            Style::V1 if block.downsample => {
                let gd = block.gamma_down.expect("validated v1 downsampling block");
                let gl = block.gamma_last();
                (gd * gd, gl * gl, reset_downsample_v1(gd, gl))
            }
            Style::V1 => {
                let branch = branch_variance(block, spec.style);
                (v, branch, propagate_v1(v, &[block.gamma_last()])[0])
            }
            Style::PreAct if block.downsample => {
                let g1 = block.branch_gammas[0];
                let gl = block.gamma_last();
                (g1 * g1, gl * gl, reset_downsample_preact(g1, gl))
            }
            Style::PreAct => {
                let branch = branch_variance(block, spec.style);
                (v, branch, propagate_preact(v, &[block.gamma_last()])[0])
            }
        };
        positions.push((s, b));
        skip_var.push(skip);
        branch_var.push(branch);
        out_var.push(out);
        v = out;
    }
    Ok(VarianceProfile {
        positions,
        skip_var,
        branch_var,
        out_var,
        source: ProfileSource::Analytic,
        stderr: None,
    })
}

/// Per block: does the skip connection strictly dominate the residual
/// branch? Ties count as not dominant.
pub fn dominance_check(profile: &VarianceProfile) -> Vec<bool> {
    profile
        .skip_var
        .iter()
        .zip(&profile.branch_var)
        .map(|(s, b)| s > b)
        .collect()
}

#[derive(Serialize)]
pub struct ProfileRow {
    pub stage: usize,
    pub block: usize,
    pub skip_var: f64,
    pub branch_var: f64,
    pub out_var: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

#[derive(Serialize)]
pub struct ProfileExport {
    pub source: ProfileSource,
    pub rows: Vec<ProfileRow>,
}

impl VarianceProfile {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn export(&self) -> ProfileExport {
        ProfileExport {
            source: self.source,
            rows: self
                .positions
                .iter()
                .enumerate()
                .map(|(i, &(stage, block))| ProfileRow {
                    stage,
                    block,
                    skip_var: self.skip_var[i],
                    branch_var: self.branch_var[i],
                    out_var: self.out_var[i],
                    stderr: self.stderr.as_ref().map(|s| s[i]),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        crate::jsonfmt::to_string_pretty(&self.export())
    }

    /// Aligned plain-text table with a dominance column.
    pub fn render_table(&self) -> String {
        let dominant = dominance_check(self);
        let mut out = String::from("stage  block    skip_var      branch_var    out_var       dominant");
        if self.stderr.is_some() {
            out.push_str("  stderr");
        }
        out.push('\n');
        for (i, &(s, b)) in self.positions.iter().enumerate() {
            out.push_str(&format!(
                "{s:<5}  {b:<5}  {:<12.6}  {:<12.6}  {:<12.6}  {:<8}",
                self.skip_var[i],
                self.branch_var[i],
                self.out_var[i],
                if dominant[i] { "yes" } else { "no" },
            ));
            if let Some(se) = &self.stderr {
                out.push_str(&format!("  {:.6}", se[i]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{build_canonical, enumerate_gammas, CanonicalName, ParamPath};
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn basic(gammas: &[f64]) -> BlockSpec {
        BlockSpec {
            kind: if gammas.len() == 3 {
                BlockKind::Bottleneck
            } else {
                BlockKind::Basic
            },
            downsample: false,
            branch_gammas: gammas.to_vec(),
            gamma_down: None,
        }
    }

    #[test]
    fn branch_variance_uses_last_gamma_only() {
        assert_eq!(branch_variance(&basic(&[3.0, 1.5]), Style::V1), 2.25);
        assert_eq!(branch_variance(&basic(&[2.0, 2.0, 0.5]), Style::V1), 0.25);
        assert_eq!(branch_variance(&basic(&[1.0, 0.0]), Style::PreAct), 0.0);
    }

    #[test]
    fn preact_accumulation() {
        assert_eq!(propagate_preact(1.0, &[1.0, 1.0, 1.0]), vec![2.0, 3.0, 4.0]);
        assert_eq!(propagate_preact(4.0, &[0.0, 0.0]), vec![4.0, 4.0]);
        assert_eq!(propagate_preact(1.0, &[0.5, 2.0]), vec![1.25, 5.25]);
    }

    #[test]
    fn v1_half_accumulation() {
        assert_eq!(propagate_v1(4.0, &[1.0, 1.0]), vec![2.5, 1.75]);
        assert_eq!(propagate_v1(7.0, &[]), Vec::<f64>::new());
        // Fixed point of v = (v + 1) / 2.
        let chain = propagate_v1(1.0, &vec![1.0; 50]);
        assert!(chain.iter().all(|&v| v == 1.0));
        let toward = propagate_v1(9.0, &vec![1.0; 60]);
        assert_close(*toward.last().unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn closed_form_matches_on_examples() {
        assert_eq!(propagate_v1_closed_form(4.0, &[1.0, 1.0]), vec![2.5, 1.75]);
        assert_eq!(
            propagate_v1_closed_form(7.0, &[]),
            Vec::<f64>::new()
        );
    }

    #[test]
    fn reset_formulas() {
        assert_eq!(reset_downsample_v1(1.0, 1.0), 1.0);
        assert_eq!(reset_downsample_v1(2.0, 1.0), 2.5);
        assert_eq!(reset_downsample_v1(2.0, 0.0), 2.0);
        assert_eq!(reset_downsample_preact(1.0, 1.0), 2.0);
        assert_eq!(reset_downsample_preact(2.0, 1.0), 5.0);
        assert_eq!(reset_downsample_preact(0.0, 0.0), 0.0);
    }

    #[test]
    fn early_stage() {
        assert_eq!(early_stage_variance(1.0), 0.5);
        assert_eq!(early_stage_variance(3.0), 4.5);
        assert_eq!(early_stage_variance(0.0), 0.0);
    }

    #[test]
    fn transformer_accumulation() {
        let tx = |g1: f64, g2: f64| BlockSpec {
            kind: BlockKind::TxBlock,
            downsample: false,
            branch_gammas: vec![g1, g2],
            gamma_down: None,
        };
        assert_eq!(propagate_transformer(1.0, &[tx(1.0, 1.0)]), vec![3.0]);
        assert_eq!(propagate_transformer(1.0, &[tx(0.0, 0.0)]), vec![1.0]);
        assert_eq!(
            propagate_transformer(2.0, &[tx(1.0, 1.0), tx(1.0, 1.0)]),
            vec![4.0, 6.0]
        );
    }

    #[test]
    fn resnet18_uniform_profile() {
        let spec = build_canonical(CanonicalName::ResNet18, 1.0);
        let profile = full_profile(&spec).unwrap();
        assert_eq!(profile.len(), 8);
        assert_eq!(profile.source, ProfileSource::Analytic);
        assert!(profile.stderr.is_none());
        let mut v = 0.5; // half of gamma0^2
        for (i, &(_, _)) in profile.positions.iter().enumerate() {
            let down = spec.blocks().nth(i).unwrap().2.downsample;
            if down {
                assert_eq!(profile.out_var[i], 1.0);
            } else {
                assert_eq!(profile.out_var[i], 0.5 * (v + 1.0));
                // converging toward the fixed point 1
                assert!((profile.out_var[i] - 1.0).abs() <= (v - 1.0).abs());
            }
            v = profile.out_var[i];
        }
    }

    /// gamma0 = 2 and gamma_down = 2 with everything else 1: the variance
    /// entering stage 0 is 2.0 and every downsampling block resets to 2.5.
    #[test]
    fn resnet18_mixed_profile_stage_entries() {
        let mut spec = build_canonical(CanonicalName::ResNet18, 1.0);
        spec.stem.gamma0 = Some(2.0);
        for (path, _) in enumerate_gammas(&spec) {
            if matches!(path, ParamPath::Down { .. }) {
                spec.set_gamma(path, 2.0);
            }
        }
        let profile = full_profile(&spec).unwrap();
        assert_eq!(early_stage_variance(2.0), 2.0);
        let resets: Vec<f64> = profile
            .positions
            .iter()
            .zip(&profile.out_var)
            .filter(|(&(s, b), _)| s > 0 && b == 0)
            .map(|(_, &v)| v)
            .collect();
        assert_eq!(resets, vec![2.5, 2.5, 2.5]);
        // strictly decreasing within each stage
        for i in 1..profile.len() {
            if profile.positions[i].1 > 0 {
                assert!(profile.out_var[i] < profile.out_var[i - 1]);
            }
        }
    }

    #[test]
    fn preact18_profile_grows_and_resets() {
        let spec = build_canonical(CanonicalName::PreAct18, 1.0);
        let profile = full_profile(&spec).unwrap();
        let mut v = 1.0;
        for (i, &(s, b)) in profile.positions.iter().enumerate() {
            if s > 0 && b == 0 {
                assert_eq!(profile.out_var[i], 2.0);
            } else {
                assert_eq!(profile.out_var[i], v + 1.0);
            }
            v = profile.out_var[i];
        }
    }

    #[test]
    fn v1_without_stem_norm_is_an_error() {
        let mut spec = build_canonical(CanonicalName::ResNet18, 1.0);
        spec.stem.has_norm = false;
        spec.stem.gamma0 = None;
        assert_eq!(
            full_profile(&spec).unwrap_err(),
            VarianceError::MissingStemNorm
        );
    }

    #[test]
    fn dominance_is_strict() {
        let profile = VarianceProfile {
            positions: vec![(0, 0), (0, 1), (0, 2)],
            skip_var: vec![4.0, 1.0, 1.0],
            branch_var: vec![1.0, 4.0, 1.0],
            out_var: vec![2.5, 2.5, 1.0],
            source: ProfileSource::Analytic,
            stderr: None,
        };
        assert_eq!(dominance_check(&profile), vec![true, false, false]);
    }

    #[test]
    fn resnet18_dominance_after_reset_is_a_tie() {
        let spec = build_canonical(CanonicalName::ResNet18, 1.0);
        let profile = full_profile(&spec).unwrap();
        let dom = dominance_check(&profile);
        // Block right after a stage-1..3 reset sees skip 1.0 vs branch 1.0.
        for (i, &(s, b)) in profile.positions.iter().enumerate() {
            if s > 0 && b == 1 {
                assert_eq!(profile.skip_var[i], 1.0);
                assert!(!dom[i]);
            }
        }
    }

    #[test]
    fn export_schema() {
        let spec = build_canonical(CanonicalName::ResNet18, 1.0);
        let json = full_profile(&spec).unwrap().to_json();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["source"], "analytic");
        assert_eq!(value["rows"].as_array().unwrap().len(), 8);
        let row = &value["rows"][0];
        for key in ["stage", "block", "skip_var", "branch_var", "out_var"] {
            assert!(row.get(key).is_some(), "missing {key}");
        }
        assert!(row.get("stderr").is_none());
    }

    proptest! {
        /// The two routes through the half-accumulation law agree.
        #[test]
        fn closed_form_matches_recurrence(
            var_s in 0.0f64..16.0,
            gammas in proptest::collection::vec(0.0f64..3.0, 0..24),
        ) {
            let a = propagate_v1(var_s, &gammas);
            let b = propagate_v1_closed_form(var_s, &gammas);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-30));
            }
        }

        /// Profiles do not look at non-last branch gammas (outside of preact
        /// downsampling blocks, where the first norm feeds the skip path).
        #[test]
        fn profile_ignores_inner_gammas(spec in crate::teststrat::arb_spec(), factor in 0.2f64..5.0) {
            prop_assume!(spec.style != Style::Transformer);
            let mut tweaked = spec.clone();
            for (s, b, block) in spec.blocks() {
                let first_is_reset = spec.style == Style::PreAct && block.downsample;
                let lo = usize::from(first_is_reset);
                for k in lo..block.branch_gammas.len() - 1 {
                    let path = ParamPath::Norm { stage: s, block: b, norm: k };
                    tweaked.set_gamma(path, block.branch_gammas[k] * factor);
                }
            }
            let a = full_profile(&spec).unwrap();
            let b = full_profile(&tweaked).unwrap();
            prop_assert_eq!(a, b);
        }

        /// Everything after a downsampling block is independent of what came
        /// before it.
        #[test]
        fn reset_forgets_the_past(factor in 0.1f64..8.0) {
            let spec = build_canonical(CanonicalName::ResNet18, 1.0);
            let mut tweaked = spec.clone();
            tweaked.stem.gamma0 = Some(factor);
            for k in 0..2 {
                for norm in 0..2 {
                    tweaked.set_gamma(ParamPath::Norm { stage: 0, block: k, norm }, factor);
                }
            }
            let a = full_profile(&spec).unwrap();
            let b = full_profile(&tweaked).unwrap();
            for (i, &(s, _)) in a.positions.iter().enumerate() {
                if s >= 1 {
                    prop_assert_eq!(a.skip_var[i], b.skip_var[i]);
                    prop_assert_eq!(a.branch_var[i], b.branch_var[i]);
                    prop_assert_eq!(a.out_var[i], b.out_var[i]);
                }
            }
        }

        /// Raising a gamma_last weakly raises every later variance up to the
        /// next downsampling block, after which the profiles coincide.
        #[test]
        fn gamma_last_monotonicity(
            preact in proptest::bool::ANY,
            stage in 0usize..4,
            block in 0usize..2,
            bump in 0.1f64..2.0,
        ) {
            let name = if preact { CanonicalName::PreAct18 } else { CanonicalName::ResNet18 };
            let spec = build_canonical(name, 1.0);
            let mut tweaked = spec.clone();
            let path = ParamPath::Norm { stage, block, norm: 1 };
            tweaked.set_gamma(path, 1.0 + bump);
            let a = full_profile(&spec).unwrap();
            let b = full_profile(&tweaked).unwrap();
            let flat: Vec<(usize, usize)> = a.positions.clone();
            let target = flat.iter().position(|&(s, bl)| (s, bl) == (stage, block)).unwrap();
            let next_reset = flat
                .iter()
                .enumerate()
                .position(|(i, &(s, bl))| {
                    i > target && bl == 0 && s > 0
                })
                .unwrap_or(flat.len());
            for i in 0..flat.len() {
                if i < target {
                    prop_assert_eq!(a.out_var[i], b.out_var[i]);
                } else if i < next_reset {
                    prop_assert!(b.out_var[i] >= a.out_var[i]);
                } else {
                    prop_assert_eq!(a.out_var[i], b.out_var[i]);
                }
            }
        }

        /// Scaling every preact gamma by c and the input variance by c^2
        /// scales the whole profile by c^2.
        #[test]
        fn preact_profile_scales_quadratically(c in 0.2f64..3.0) {
            let spec = build_canonical(CanonicalName::PreAct18, 1.0);
            let mut scaled = spec.clone();
            for (path, value) in enumerate_gammas(&spec) {
                scaled.set_gamma(path, value * c);
            }
            let a = full_profile_with_input(&spec, 1.0).unwrap();
            let b = full_profile_with_input(&scaled, c * c).unwrap();
            for i in 0..a.len() {
                let want = a.out_var[i] * c * c;
                prop_assert!((b.out_var[i] - want).abs() <= 1e-12 * want.abs().max(1e-30));
            }
        }
    }
}
