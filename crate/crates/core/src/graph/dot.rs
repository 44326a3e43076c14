use std::fmt::Write;

use super::{GraphSpec, NodeKind, ShapeMap};

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn describe(kind: &NodeKind) -> String {
    match kind {
        NodeKind::Conv(s) => format!(
            "Conv {}x{}/{} {:?} {} {:?}",
            s.kernel_h, s.kernel_w, s.stride_h, s.padding, s.out_channels, s.activation
        ),
        NodeKind::MaxPool(s) | NodeKind::AvgPool(s) => {
            format!("{} {}x{}/{} {:?}", kind.name(), s.kernel_h, s.kernel_w, s.stride_h, s.padding)
        }
        NodeKind::ResidualAdd { alpha } => format!("ResidualAdd alpha={alpha}"),
        NodeKind::Dropout { keep } => format!("Dropout keep={keep}"),
        NodeKind::FullyConnected { out_features } => format!("FullyConnected {out_features}"),
        other => other.name().to_string(),
    }
}

/// Graphviz DOT, one node per [`super::NodeSpec`] in list order, labelled with
/// the layer kind and (when known) the inferred NHWC shape.
pub fn export_dot(graph: &GraphSpec, shapes: Option<&ShapeMap>) -> String {
    let mut out = String::new();
    out.push_str("digraph network {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n");
    for n in &graph.nodes {
        let mut label = format!("{}\\n{}", escape(&n.id), escape(&describe(&n.kind)));
        if let Some(s) = shapes.and_then(|m| m.get(&n.id)) {
            let _ = write!(label, "\\n{}x{}x{}x{}", s[0], s[1], s[2], s[3]);
        }
        let _ = writeln!(out, "  {} [label=\"{label}\"];", quote(&n.id));
    }
    for n in &graph.nodes {
        for (k, input) in n.inputs.iter().enumerate() {
            if n.inputs.len() > 1 {
                let _ = writeln!(out, "  {} -> {} [label=\"{k}\"];", quote(input), quote(&n.id));
            } else {
                let _ = writeln!(out, "  {} -> {};", quote(input), quote(&n.id));
            }
        }
    }
    out.push_str("}\n");
    out
}
