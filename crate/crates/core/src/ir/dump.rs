use std::fmt::Write;

use super::{canonicalize, IrGraph, NodeAttrs, NodeId};
use crate::error::Result;

fn tuple(values: &[usize]) -> String {
    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("({})", items.join(", "))
}

fn attrs_text(attrs: &NodeAttrs) -> String {
    match attrs {
        NodeAttrs::None => String::new(),
        NodeAttrs::DeviceData { device, dynamic_scalar, .. } => {
            if *dynamic_scalar {
                format!(", device={device}, scalar=1")
            } else {
                format!(", device={device}")
            }
        }
        NodeAttrs::Constant { value } => format!(", value={value}"),
        NodeAttrs::Expand { dims } | NodeAttrs::Reshape { dims } => format!(", size={}", tuple(dims)),
        NodeAttrs::Permute { perm } => format!(", dims={}", tuple(perm)),
        NodeAttrs::ReduceSum { dims } => format!(", dims={}", tuple(dims)),
        NodeAttrs::Narrow { dim, start, length } => format!(", dim={dim}, start={start}, length={length}"),
        NodeAttrs::UpdateNarrow { dim, start } => format!(", dim={dim}, start={start}"),
    }
}

/// Renders the graph reachable from `roots` in the textual IR format.
///
/// Nodes are numbered by canonical index, so the text depends only on graph
/// structure and embedded constants.
pub fn dump_text(graph: &IrGraph, roots: &[NodeId]) -> Result<String> {
    let canon = canonicalize(graph, roots)?;
    let mut out = String::from("IR {\n");
    for node in canon.graph.nodes() {
        let operands: Vec<String> = node.operands.iter().map(|o| o.to_string()).collect();
        write!(out, "  {} = {} {}({}){}", node.id, node.shape, node.kind.name(), operands.join(", "), attrs_text(&node.attrs))
            .unwrap();
        for (k, r) in canon.roots.iter().enumerate() {
            if *r == node.id {
                write!(out, ", ROOT={k}").unwrap();
            }
        }
        out.push('\n');
    }
    out.push_str("}\n");
    Ok(out)
}
