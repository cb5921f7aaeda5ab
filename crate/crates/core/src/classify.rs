//! Role assignment for normalization scales and L2 decay-plan construction.
//!
//! Every gamma falls into exactly one of four roles, determined purely by its
//! position in the topology:
//!
//! * `Gamma0` — the stem normalization; sets the variance entering the first
//!   stage. Not decayed under the guidelines.
//! * `GammaLast` — the last normalization of a residual branch (both branch
//!   norms of a transformer block); sets the branch output variance. Decayed.
//! * `GammaDown` — the scale that sets a downsampling block's reset
//!   variance: the skip-path norm in v1, the shared first branch norm in
//!   preact downsampling blocks. Not decayed.
//! * `GammaOthers` — everything else; no effect on branch variance but decay
//!   still improves the effective learning rate. Decayed.

use crate::archspec::{enumerate_gammas, ArchSpec, BlockKind, ParamPath, Style};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRole {
    Gamma0,
    GammaLast,
    GammaDown,
    GammaOthers,
}

impl GammaRole {
    pub const ALL: [GammaRole; 4] = [
        GammaRole::Gamma0,
        GammaRole::GammaLast,
        GammaRole::GammaDown,
        GammaRole::GammaOthers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GammaRole::Gamma0 => "gamma0",
            GammaRole::GammaLast => "gamma_last",
            GammaRole::GammaDown => "gamma_down",
            GammaRole::GammaOthers => "gamma_others",
        }
    }
}

/// Which roles receive L2 decay.
#[derive(Debug, Clone, PartialEq)]
pub enum DecayPolicy {
    /// Decay gamma_last and gamma_others only.
    Guidelines,
    /// Decay every gamma (the optimizer-level weight-decay convention).
    AllParams,
    /// Decay no gamma (the per-layer kernel-regularizer convention).
    WeightsOnly,
    /// Explicit role-to-decay map.
    Custom(BTreeMap<GammaRole, bool>),
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("lambda must be a finite nonnegative number, got {0}")]
    BadLambda(f64),
    #[error("custom policy does not map role {}", .0.as_str())]
    MissingRole(GammaRole),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub path: ParamPath,
    pub role: GammaRole,
    pub apply_decay: bool,
}

/// Per-parameter decay directives for one architecture. Weight matrices are
/// always decayed and therefore not listed.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayPlan {
    pub lambda: f64,
    pub entries: Vec<PlanEntry>,
}

fn role_of(spec: &ArchSpec, path: ParamPath) -> GammaRole {
    match path {
        ParamPath::Stem => GammaRole::Gamma0,
        ParamPath::Down { .. } => GammaRole::GammaDown,
        ParamPath::FinalNorm => GammaRole::GammaOthers,
        ParamPath::Norm { stage, block, norm } => {
            let b = &spec.stages[stage].blocks[block];
            if b.kind == BlockKind::TxBlock {
                // Both branches of a transformer block accumulate variance.
                GammaRole::GammaLast
            } else if b.downsample && spec.style == Style::PreAct && norm == 0 {
                // The shared first norm feeds the skip path and sets the
                // reset variance.
                GammaRole::GammaDown
            } else if norm == b.branch_gammas.len() - 1 {
                GammaRole::GammaLast
            } else {
                GammaRole::GammaOthers
            }
        }
    }
}

/// Assign a role to every gamma of the spec. Total on valid specs and
/// independent of the gamma values themselves.
pub fn classify_gammas(spec: &ArchSpec) -> BTreeMap<ParamPath, GammaRole> {
    enumerate_gammas(spec)
        .into_iter()
        .map(|(path, _)| (path, role_of(spec, path)))
        .collect()
}

/// Count of each role, in `GammaRole::ALL` order.
pub fn role_counts(roles: &BTreeMap<ParamPath, GammaRole>) -> [usize; 4] {
    let mut counts = [0; 4];
    for role in roles.values() {
        let i = GammaRole::ALL.iter().position(|r| r == role).unwrap();
        counts[i] += 1;
    }
    counts
}

/// Build the decay plan for `spec` under `policy`.
pub fn make_plan(spec: &ArchSpec, lambda: f64, policy: &DecayPolicy) -> Result<DecayPlan, PlanError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(PlanError::BadLambda(lambda));
    }
    let mut entries = Vec::new();
    for (path, _) in enumerate_gammas(spec) {
        let role = role_of(spec, path);
        let apply_decay = match policy {
            DecayPolicy::Guidelines => {
                matches!(role, GammaRole::GammaLast | GammaRole::GammaOthers)
            }
            DecayPolicy::AllParams => true,
            DecayPolicy::WeightsOnly => false,
            DecayPolicy::Custom(map) => *map.get(&role).ok_or(PlanError::MissingRole(role))?,
        };
        entries.push(PlanEntry {
            path,
            role,
            apply_decay,
        });
    }
    Ok(DecayPlan { lambda, entries })
}

#[derive(Serialize)]
struct PlanRow {
    path: String,
    role: GammaRole,
    decay: bool,
    lambda: f64,
}

impl DecayPlan {
    pub fn decayed_count(&self) -> usize {
        self.entries.iter().filter(|e| e.apply_decay).count()
    }

    /// JSON export: array of rows sorted by path string, stable bytes.
    pub fn to_json(&self) -> String {
        let mut rows: Vec<PlanRow> = self
            .entries
            .iter()
            .map(|e| PlanRow {
                path: e.path.to_string(),
                role: e.role,
                decay: e.apply_decay,
                lambda: self.lambda,
            })
            .collect();
        rows.sort_by(|a, b| a.path.cmp(&b.path));
        crate::jsonfmt::to_string_pretty(&rows)
    }

    /// Aligned plain-text table, entries in enumeration order.
    pub fn render_table(&self) -> String {
        let mut out = format!("lambda = {:e}\n", self.lambda);
        let width = self
            .entries
            .iter()
            .map(|e| e.path.to_string().len())
            .max()
            .unwrap_or(4)
            .max(4);
        out.push_str(&format!("{:<width$}  {:<12}  decay\n", "path", "role"));
        for e in &self.entries {
            out.push_str(&format!(
                "{:<width$}  {:<12}  {}\n",
                e.path.to_string(),
                e.role.as_str(),
                if e.apply_decay { "yes" } else { "no" },
            ));
        }
        out
    }
}
