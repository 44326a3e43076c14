mod common;

use common::{cost_ordering, structural};
use incepkit::graph::{infer_shapes, validate, NodeKind, Rule, Ruleset};
use incepkit::ops::Activation;
use incepkit::zoo::{assemble, scale_filters, ArchConfig, ArchDefinition, Layer, Variant};

#[test]
fn residual_structure_of_all_variants() {
    for v in Variant::ALL {
        structural(v).unwrap();
    }
}

#[test]
fn v2_costs_more_than_v1() {
    cost_ordering().unwrap();
}

fn rules_after(variant: Variant, mutate: impl FnOnce(&mut incepkit::graph::GraphSpec)) -> Vec<(Rule, String)> {
    let mut g = assemble(&ArchConfig::new(variant)).unwrap();
    mutate(&mut g);
    validate(&g, Ruleset::InceptionResNet).into_iter().map(|v| (v.rule, v.node)).collect()
}

fn node_mut<'a>(g: &'a mut incepkit::graph::GraphSpec, id: &str) -> &'a mut NodeKind {
    &mut g.nodes.iter_mut().find(|n| n.id == id).unwrap().kind
}

#[test]
fn seeded_mutations_are_caught() {
    for v in [Variant::InceptionResNetV1, Variant::InceptionResNetV2] {
        let found = rules_after(v, |g| {
            *node_mut(g, "inception_b_3/relu") = NodeKind::BatchNorm(Default::default());
        });
        assert!(found.contains(&(Rule::BatchNormOnSum, "inception_b_3/relu".into())), "{found:?}");

        let found = rules_after(v, |g| {
            if let NodeKind::Conv(c) = node_mut(g, "inception_c_2/expand") {
                c.activation = Activation::Relu;
            }
        });
        assert!(found.iter().any(|(r, _)| *r == Rule::ActivatedResidual), "{found:?}");

        let found = rules_after(v, |g| {
            if let NodeKind::Conv(c) = node_mut(g, "inception_a_1/expand") {
                c.out_channels += 4;
            }
        });
        assert!(found.iter().any(|(r, _)| *r == Rule::ResidualChannelMismatch), "{found:?}");
    }
}

fn filters(layers: &[Layer], def: &ArchDefinition, out: &mut Vec<usize>) {
    for l in layers {
        match l {
            Layer::Conv { filters: f, .. } => out.push(f.resolve(&def.reduction_a_filters).unwrap()),
            Layer::Mixed { branches } => branches.iter().for_each(|b| filters(b, def, out)),
            _ => {}
        }
    }
}

fn graph_filters(variant: Variant, width: f64) -> Vec<usize> {
    let mut config = ArchConfig::new(variant);
    config.width_multiplier = width;
    let g = assemble(&config).unwrap();
    g.nodes
        .iter()
        .filter(|n| !n.id.ends_with("/expand"))
        .filter_map(|n| match &n.kind {
            NodeKind::Conv(c) => Some(c.out_channels),
            _ => None,
        })
        .collect()
}

/// Conv filter counts straight from the definition file, in graph order.
fn definition_filters(variant: Variant) -> Vec<usize> {
    let def = ArchDefinition::shipped(variant);
    let b = def.block_counts;
    let mut out = Vec::new();
    let repeats = [1, b.a, 1, b.b, 1, b.c];
    for ((_, layers), n) in def.modules().into_iter().zip(repeats) {
        for _ in 0..n {
            filters(layers, &def, &mut out);
        }
    }
    out
}

#[test]
fn width_one_is_the_definition() {
    for v in Variant::ALL {
        let def = definition_filters(v);
        let mut graph = graph_filters(v, 1.0);
        let mut sorted = def.clone();
        sorted.sort_unstable();
        graph.sort_unstable();
        assert_eq!(graph, sorted, "{v}");

        let mut half: Vec<usize> = def.iter().map(|&f| scale_filters(f, 0.5).unwrap()).collect();
        half.sort_unstable();
        let mut g = graph_filters(v, 0.5);
        g.sort_unstable();
        assert_eq!(g, half, "{v}");
    }
}

#[test]
fn residualized_v4_is_valid() {
    let mut config = ArchConfig::new(Variant::InceptionV4);
    config.residualize = true;
    let g = assemble(&config).unwrap();
    assert!(validate(&g, Ruleset::InceptionResNet).is_empty());
    let b = config.block_counts;
    assert_eq!(g.count_kind(|k| matches!(k, NodeKind::ResidualAdd { .. })), b.a + b.b + b.c);
    let shapes = infer_shapes(&g).unwrap();
    assert_eq!(shapes[&g.node("avgpool").unwrap().inputs[0]], [1, 8, 8, 1536]);
}
