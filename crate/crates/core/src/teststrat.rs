//! Proptest strategies shared by the unit tests.

use crate::archspec::{ArchSpec, BlockKind, BlockSpec, StageSpec, StemSpec, Style};
use proptest::prelude::*;

pub(crate) fn arb_param_path() -> impl Strategy<Value = crate::archspec::ParamPath> {
    use crate::archspec::ParamPath;
    prop_oneof![
        Just(ParamPath::Stem),
        Just(ParamPath::FinalNorm),
        (0usize..40, 0usize..40).prop_map(|(stage, block)| ParamPath::Down { stage, block }),
        (0usize..40, 0usize..40, 0usize..4)
            .prop_map(|(stage, block, norm)| ParamPath::Norm { stage, block, norm }),
    ]
}

fn arb_gamma() -> impl Strategy<Value = f64> {
    // Positive, away from zero so variance profiles stay well defined.
    0.05f64..4.0
}

fn arb_block(style: Style) -> impl Strategy<Value = BlockSpec> {
    let kind = match style {
        Style::Transformer => Just(BlockKind::TxBlock).boxed(),
        _ => prop_oneof![Just(BlockKind::Basic), Just(BlockKind::Bottleneck)].boxed(),
    };
    (kind, any::<bool>(), proptest::collection::vec(arb_gamma(), 3), arb_gamma()).prop_map(
        move |(kind, down, gammas, gd)| {
            let down = down && style != Style::Transformer;
            BlockSpec {
                kind,
                downsample: down,
                branch_gammas: gammas[..kind.branch_norms()].to_vec(),
                gamma_down: (down && style == Style::V1).then_some(gd),
            }
        },
    )
}

/// Valid architecture specs of bounded size. V1 stems always carry a norm so
/// the variance profile is defined.
pub(crate) fn arb_spec() -> impl Strategy<Value = ArchSpec> {
    prop_oneof![Just(Style::V1), Just(Style::PreAct), Just(Style::Transformer)].prop_flat_map(
        |style| {
            let stages = proptest::collection::vec(
                proptest::collection::vec(arb_block(style), 1..4)
                    .prop_map(|blocks| StageSpec { blocks }),
                1..4,
            );
            let stem = match style {
                Style::V1 => arb_gamma().prop_map(|g| StemSpec {
                    has_norm: true,
                    gamma0: Some(g),
                })
                .boxed(),
                _ => Just(StemSpec {
                    has_norm: false,
                    gamma0: None,
                })
                .boxed(),
            };
            let final_norm = prop_oneof![Just(None), arb_gamma().prop_map(Some)];
            (stages, stem, final_norm, 1usize..16).prop_map(move |(stages, stem, final_norm, width)| {
                let spec = ArchSpec {
                    name: "prop".to_string(),
                    style,
                    width,
                    stem,
                    stages,
                    final_norm,
                };
                spec.validate().expect("strategy produces valid specs");
                spec
            })
        },
    )
}
