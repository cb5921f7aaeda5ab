//! Block-structured architecture descriptions and their JSON file format.
//!
//! An [`ArchSpec`] records just enough topology to reason about normalization
//! scale parameters: the stem, an ordered list of stages of residual blocks,
//! and the gamma attached to every normalization layer. Spatial details
//! (strides, pooling geometry, channel counts) are intentionally absent; the
//! `width` field is the feature count used when the architecture is
//! simulated.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Simulation width used by the canonical builders.
pub const CANONICAL_WIDTH: usize = 256;

/// Wiring style of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    /// Post-activation residual blocks; ReLU after the addition.
    V1,
    /// Pre-activation residual blocks; plain addition.
    PreAct,
    /// Stack of transformer blocks, two normalized branches per block.
    Transformer,
}

/// Residual block kind, which fixes how many normalization layers the branch
/// holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
    TxBlock,
}

impl BlockKind {
    /// Number of normalization layers in the residual branch.
    pub fn branch_norms(self) -> usize {
        match self {
            BlockKind::Basic | BlockKind::TxBlock => 2,
            BlockKind::Bottleneck => 3,
        }
    }
}

/// The pre-residual layers of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub has_norm: bool,
    /// Scale of the stem normalization; required when `has_norm` is true.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma0: Option<f64>,
}

/// One residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    #[serde(default)]
    pub downsample: bool,
    /// Scales of the branch normalizations, first to last.
    pub branch_gammas: Vec<f64>,
    /// Scale of the skip-path normalization; v1 downsampling blocks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_down: Option<f64>,
}

impl BlockSpec {
    /// Gamma of the last normalization in the branch.
    pub fn gamma_last(&self) -> f64 {
        *self
            .branch_gammas
            .last()
            .expect("validated blocks have a non-empty branch")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
}

/// Architecture description. Immutable by convention once validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub style: Style,
    /// Feature count used for simulation.
    pub width: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Optional scale of a lone normalization between the last block and the
    /// head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_norm: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ArchError {
    /// The text is not well-formed JSON or does not match the schema.
    #[error("{message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    /// The document parsed but violates a structural invariant.
    #[error("invalid architecture at `{path}`: {message}")]
    Invariant { path: String, message: String },
    #[error("unknown canonical architecture `{0}`")]
    UnknownName(String),
    #[error("malformed parameter path `{0}`")]
    BadPath(String),
}

fn invariant(path: impl Into<String>, message: impl Into<String>) -> ArchError {
    ArchError::Invariant {
        path: path.into(),
        message: message.into(),
    }
}

/// A finite, nonnegative gamma. Zero is admitted so that zero-initialized
/// scales can be analyzed.
fn check_gamma(value: f64, path: &str) -> Result<(), ArchError> {
    if !value.is_finite() || value < 0.0 {
        Err(invariant(
            path,
            format!("gamma must be finite and nonnegative, got {value}"),
        ))
    } else {
        Ok(())
    }
}

impl ArchSpec {
    /// Check every structural invariant, reporting the offending path.
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(invariant("name", "name must be a nonempty identifier"));
        }
        if self.width == 0 {
            return Err(invariant("width", "width must be positive"));
        }
        match (self.stem.has_norm, self.stem.gamma0) {
            (true, None) => {
                return Err(invariant("stem", "stem with has_norm=true requires gamma0"))
            }
            (_, Some(g)) => check_gamma(g, "stem.gamma0")?,
            (false, None) => {}
        }
        if self.style == Style::PreAct && self.stem.has_norm {
            return Err(invariant(
                "stem",
                "preact style has no stem normalization layer",
            ));
        }
        if self.stages.is_empty() {
            return Err(invariant("stages", "at least one stage is required"));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.blocks.is_empty() {
                return Err(invariant(
                    format!("stage{s}"),
                    "each stage needs at least one block",
                ));
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let path = format!("stage{s}.block{b}");
                let tx = block.kind == BlockKind::TxBlock;
                if tx != (self.style == Style::Transformer) {
                    return Err(invariant(
                        path,
                        "txblock kind is used exactly by transformer style",
                    ));
                }
                if self.style == Style::Transformer && block.downsample {
                    return Err(invariant(path, "transformer blocks never downsample"));
                }
                let expected = block.kind.branch_norms();
                if block.branch_gammas.len() != expected {
                    return Err(invariant(
                        path,
                        format!(
                            "{:?} blocks need {expected} branch gammas, got {}",
                            block.kind,
                            block.branch_gammas.len()
                        ),
                    ));
                }
                for (k, &g) in block.branch_gammas.iter().enumerate() {
                    check_gamma(g, &format!("{path}.norm{k}"))?;
                }
                let needs_down = block.downsample && self.style == Style::V1;
                match (needs_down, block.gamma_down) {
                    (true, None) => {
                        return Err(invariant(
                            path,
                            "v1 downsampling block requires gamma_down",
                        ))
                    }
                    (false, Some(_)) => {
                        return Err(invariant(
                            path,
                            "gamma_down only applies to v1 downsampling blocks",
                        ))
                    }
                    (true, Some(g)) => check_gamma(g, &format!("{path}.down"))?,
                    (false, None) => {}
                }
            }
        }
        if let Some(g) = self.final_norm {
            check_gamma(g, "final.norm")?;
        }
        Ok(())
    }

    /// Flat view of all blocks with their (stage, block) position.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &BlockSpec)> {
        self.stages.iter().enumerate().flat_map(|(s, stage)| {
            stage
                .blocks
                .iter()
                .enumerate()
                .map(move |(b, block)| (s, b, block))
        })
    }

    /// Value of the gamma at `path`, if the path exists in this spec.
    pub fn gamma_at(&self, path: ParamPath) -> Option<f64> {
        match path {
            ParamPath::Stem => self.stem.has_norm.then_some(self.stem.gamma0).flatten(),
            ParamPath::Down { stage, block } => {
                self.stages.get(stage)?.blocks.get(block)?.gamma_down
            }
            ParamPath::Norm { stage, block, norm } => self
                .stages
                .get(stage)?
                .blocks
                .get(block)?
                .branch_gammas
                .get(norm)
                .copied(),
            ParamPath::FinalNorm => self.final_norm,
        }
    }

    /// Overwrite the gamma at `path`. Returns false if the path does not
    /// exist in this spec.
    pub fn set_gamma(&mut self, path: ParamPath, value: f64) -> bool {
        match path {
            ParamPath::Stem => {
                if self.stem.has_norm {
                    self.stem.gamma0 = Some(value);
                    true
                } else {
                    false
                }
            }
            ParamPath::Down { stage, block } => {
                match self
                    .stages
                    .get_mut(stage)
                    .and_then(|s| s.blocks.get_mut(block))
                {
                    Some(b) if b.gamma_down.is_some() => {
                        b.gamma_down = Some(value);
                        true
                    }
                    _ => false,
                }
            }
            ParamPath::Norm { stage, block, norm } => self
                .stages
                .get_mut(stage)
                .and_then(|s| s.blocks.get_mut(block))
                .and_then(|b| b.branch_gammas.get_mut(norm))
                .map(|g| *g = value)
                .is_some(),
            ParamPath::FinalNorm => {
                if self.final_norm.is_some() {
                    self.final_norm = Some(value);
                    true
                } else {
                    false
                }
            }
        }
    }
}

/// Parse and validate the JSON architecture format.
pub fn parse_arch(text: &str) -> Result<ArchSpec, ArchError> {
    let spec: ArchSpec = serde_json::from_str(text).map_err(|e| ArchError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Canonical serialization: fixed field order, deterministic bytes, trailing
/// newline. `parse_arch(serialize(s)) == s` for every valid spec.
pub fn serialize(spec: &ArchSpec) -> String {
    let mut text = crate::jsonfmt::to_string_pretty(spec);
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------
// Parameter paths
// ---------------------------------------------------------------------------

/// Address of a single gamma parameter inside an [`ArchSpec`].
///
/// Formats as `stem.norm.gamma`, `stage{S}.block{B}.norm{K}.gamma`,
/// `stage{S}.block{B}.down.norm.gamma`, or `final.norm.gamma`, and parses
/// back losslessly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamPath {
    Stem,
    Down { stage: usize, block: usize },
    Norm { stage: usize, block: usize, norm: usize },
    FinalNorm,
}

impl ParamPath {
    /// Stem first, then stage/block order with the skip-path norm ahead of
    /// the branch norms, final norm last.
    fn sort_key(&self) -> (u8, usize, usize, u8, usize) {
        match *self {
            ParamPath::Stem => (0, 0, 0, 0, 0),
            ParamPath::Down { stage, block } => (1, stage, block, 0, 0),
            ParamPath::Norm { stage, block, norm } => (1, stage, block, 1, norm),
            ParamPath::FinalNorm => (2, 0, 0, 0, 0),
        }
    }
}

impl PartialOrd for ParamPath {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ParamPath {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamPath::Stem => write!(f, "stem.norm.gamma"),
            ParamPath::Down { stage, block } => {
                write!(f, "stage{stage}.block{block}.down.norm.gamma")
            }
            ParamPath::Norm { stage, block, norm } => {
                write!(f, "stage{stage}.block{block}.norm{norm}.gamma")
            }
            ParamPath::FinalNorm => write!(f, "final.norm.gamma"),
        }
    }
}

impl FromStr for ParamPath {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        fn index(part: &str, prefix: &str) -> Option<usize> {
            part.strip_prefix(prefix)?.parse().ok()
        }
        let bad = || ArchError::BadPath(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            ["stem", "norm", "gamma"] => Ok(ParamPath::Stem),
            ["final", "norm", "gamma"] => Ok(ParamPath::FinalNorm),
            [st, bl, "down", "norm", "gamma"] => Ok(ParamPath::Down {
                stage: index(st, "stage").ok_or_else(bad)?,
                block: index(bl, "block").ok_or_else(bad)?,
            }),
            [st, bl, no, "gamma"] => Ok(ParamPath::Norm {
                stage: index(st, "stage").ok_or_else(bad)?,
                block: index(bl, "block").ok_or_else(bad)?,
                norm: index(no, "norm").ok_or_else(bad)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Every gamma of the spec with its initial value, in a stable order: stem
/// first, then stages/blocks in index order (skip-path norm before branch
/// norms within a block), final norm last.
pub fn enumerate_gammas(spec: &ArchSpec) -> Vec<(ParamPath, f64)> {
    let mut out = Vec::new();
    if spec.stem.has_norm {
        let g0 = spec.stem.gamma0.expect("validated stems carry gamma0");
        out.push((ParamPath::Stem, g0));
    }
    for (s, b, block) in spec.blocks() {
        if let Some(gd) = block.gamma_down {
            out.push((ParamPath::Down { stage: s, block: b }, gd));
        }
        for (k, &g) in block.branch_gammas.iter().enumerate() {
            out.push((
                ParamPath::Norm {
                    stage: s,
                    block: b,
                    norm: k,
                },
                g,
            ));
        }
    }
    if let Some(g) = spec.final_norm {
        out.push((ParamPath::FinalNorm, g));
    }
    out
}

// ---------------------------------------------------------------------------
// Canonical builders
// ---------------------------------------------------------------------------

/// Names understood by [`build_canonical`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalName {
    ResNet18,
    ResNet34,
    ResNet50,
    ResNet101,
    ResNet152,
    PreAct18,
    PreAct50,
    /// `txstack{n}`: n transformer blocks in one stage.
    TxStack(usize),
}

impl FromStr for CanonicalName {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resnet18" => Ok(CanonicalName::ResNet18),
            "resnet34" => Ok(CanonicalName::ResNet34),
            "resnet50" => Ok(CanonicalName::ResNet50),
            "resnet101" => Ok(CanonicalName::ResNet101),
            "resnet152" => Ok(CanonicalName::ResNet152),
            "preact18" => Ok(CanonicalName::PreAct18),
            "preact50" => Ok(CanonicalName::PreAct50),
            other => other
                .strip_prefix("txstack")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(CanonicalName::TxStack)
                .ok_or_else(|| ArchError::UnknownName(s.to_string())),
        }
    }
}

impl fmt::Display for CanonicalName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalName::ResNet18 => write!(f, "resnet18"),
            CanonicalName::ResNet34 => write!(f, "resnet34"),
            CanonicalName::ResNet50 => write!(f, "resnet50"),
            CanonicalName::ResNet101 => write!(f, "resnet101"),
            CanonicalName::ResNet152 => write!(f, "resnet152"),
            CanonicalName::PreAct18 => write!(f, "preact18"),
            CanonicalName::PreAct50 => write!(f, "preact50"),
            CanonicalName::TxStack(n) => write!(f, "txstack{n}"),
        }
    }
}

fn residual_stages(counts: &[usize], kind: BlockKind, style: Style, g: f64) -> Vec<StageSpec> {
    counts
        .iter()
        .enumerate()
        .map(|(s, &n)| StageSpec {
            blocks: (0..n)
                .map(|b| {
                    // Basic stacks keep the stage-0 entry at identity; the
                    // bottleneck entry block projects channels, so it
                    // downsamples at stage 0 too.
                    let down = b == 0 && (kind == BlockKind::Bottleneck || s > 0);
                    BlockSpec {
                        kind,
                        downsample: down,
                        branch_gammas: vec![g; kind.branch_norms()],
                        gamma_down: (down && style == Style::V1).then_some(g),
                    }
                })
                .collect(),
        })
        .collect()
}

/// Build one of the canonical topologies with every gamma set to
/// `gamma_init`.
pub fn build_canonical(name: CanonicalName, gamma_init: f64) -> ArchSpec {
    assert!(
        gamma_init.is_finite() && gamma_init > 0.0,
        "gamma_init must be positive"
    );
    let g = gamma_init;
    let (style, kind, counts): (Style, BlockKind, &[usize]) = match name {
        CanonicalName::ResNet18 => (Style::V1, BlockKind::Basic, &[2, 2, 2, 2]),
        CanonicalName::ResNet34 => (Style::V1, BlockKind::Basic, &[3, 4, 6, 3]),
        CanonicalName::ResNet50 => (Style::V1, BlockKind::Bottleneck, &[3, 4, 6, 3]),
        CanonicalName::ResNet101 => (Style::V1, BlockKind::Bottleneck, &[3, 4, 23, 3]),
        CanonicalName::ResNet152 => (Style::V1, BlockKind::Bottleneck, &[3, 8, 36, 3]),
        CanonicalName::PreAct18 => (Style::PreAct, BlockKind::Basic, &[2, 2, 2, 2]),
        CanonicalName::PreAct50 => (Style::PreAct, BlockKind::Bottleneck, &[3, 4, 6, 3]),
        CanonicalName::TxStack(n) => {
            let spec = ArchSpec {
                name: name.to_string(),
                style: Style::Transformer,
                width: CANONICAL_WIDTH,
                stem: StemSpec {
                    has_norm: false,
                    gamma0: None,
                },
                stages: vec![StageSpec {
                    blocks: (0..n)
                        .map(|_| BlockSpec {
                            kind: BlockKind::TxBlock,
                            downsample: false,
                            branch_gammas: vec![g; 2],
                            gamma_down: None,
                        })
                        .collect(),
                }],
                final_norm: None,
            };
            spec.validate().expect("canonical specs are valid");
            return spec;
        }
    };
    let stem = match style {
        Style::V1 => StemSpec {
            has_norm: true,
            gamma0: Some(g),
        },
        _ => StemSpec {
            has_norm: false,
            gamma0: None,
        },
    };
    let spec = ArchSpec {
        name: name.to_string(),
        style,
        width: CANONICAL_WIDTH,
        stem,
        stages: residual_stages(counts, kind, style, g),
        final_norm: None,
    };
    spec.validate().expect("canonical specs are valid");
    spec
}
