mod common;

use graphviz_rust::dot_structures::{Graph, Stmt};
use incepkit::graph::{export_dot, infer_shapes, GraphBuilder, GraphSpec};
use incepkit::zoo::{assemble, ArchConfig, Variant};

fn statements(text: &str) -> Vec<Stmt> {
    match graphviz_rust::parse(text).unwrap_or_else(|e| panic!("DOT failed to parse: {e}")) {
        Graph::DiGraph { stmts, .. } => stmts,
        Graph::Graph { .. } => panic!("expected a digraph"),
    }
}

fn counts(stmts: &[Stmt]) -> (usize, usize) {
    let nodes = stmts.iter().filter(|s| matches!(s, Stmt::Node(_))).count();
    let edges = stmts.iter().filter(|s| matches!(s, Stmt::Edge(_))).count();
    (nodes, edges)
}

fn edge_total(graph: &GraphSpec) -> usize {
    graph.nodes.iter().map(|n| n.inputs.len()).sum()
}

#[test]
fn zoo_graphs_round_trip_through_a_dot_parser() {
    for v in Variant::ALL {
        let graph = assemble(&ArchConfig::new(v)).unwrap();
        let shapes = infer_shapes(&graph).unwrap();
        let text = export_dot(&graph, Some(&shapes));
        let (nodes, edges) = counts(&statements(&text));
        assert_eq!(nodes, graph.nodes.len(), "{v}");
        assert_eq!(edges, edge_total(&graph), "{v}");
        assert_eq!(text, export_dot(&graph, Some(&shapes)));
    }
}

#[test]
fn input_only_graph_has_one_node() {
    let graph = GraphBuilder::new([1, 4, 4, 3]).finish(GraphBuilder::INPUT_ID);
    let (nodes, edges) = counts(&statements(&export_dot(&graph, None)));
    assert_eq!((nodes, edges), (1, 0));
}

#[test]
fn awkward_ids_are_escaped() {
    let graph = common::tiny_classifier(3);
    let mut renamed = graph.clone();
    for n in &mut renamed.nodes {
        if n.id != GraphBuilder::INPUT_ID {
            n.id = format!("we\"ird\\{}", n.id);
        }
        for i in &mut n.inputs {
            if i != GraphBuilder::INPUT_ID {
                *i = format!("we\"ird\\{i}");
            }
        }
    }
    renamed.output_id = format!("we\"ird\\{}", graph.output_id);
    let (nodes, edges) = counts(&statements(&export_dot(&renamed, None)));
    assert_eq!((nodes, edges), (graph.nodes.len(), edge_total(&graph)));
}
