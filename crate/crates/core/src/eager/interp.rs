use super::{Buffer, KernelRegistry};
use crate::error::{Error, Result};
use crate::ir::{IrGraph, IrNode, NodeId, OpKind};

/// Evaluates `roots` node by node with the eager kernels, with no rewriting
/// or fusion. `leaf` supplies the buffer for each `device_data` node.
pub fn evaluate(
    registry: &KernelRegistry,
    graph: &IrGraph,
    roots: &[NodeId],
    mut leaf: impl FnMut(&IrNode) -> Result<Buffer>,
) -> Result<Vec<Buffer>> {
    let mut values: Vec<Option<Buffer>> = vec![None; graph.len()];
    let mut stack: Vec<(NodeId, bool)> = roots.iter().rev().map(|r| (*r, false)).collect();
    while let Some((id, expanded)) = stack.pop() {
        let node = graph.get(id)?;
        if values[id.0].is_some() {
            continue;
        }
        if node.kind == OpKind::DeviceData {
            let buf = leaf(node)?;
            if buf.shape() != &node.shape {
                return Err(Error::ShapeMismatch { op: "device_data", lhs: node.shape.clone(), rhs: buf.shape().clone() });
            }
            values[id.0] = Some(buf);
        } else if expanded {
            let inputs: Vec<Buffer> = node.operands.iter().map(|o| values[o.0].clone().expect("operand evaluated")).collect();
            values[id.0] = Some(registry.dispatch(graph.device(), node.kind, &inputs, &node.attrs)?);
        } else {
            stack.push((id, true));
            stack.extend(node.operands.iter().rev().filter(|o| values[o.0].is_none()).map(|o| (*o, false)));
        }
    }
    Ok(roots.iter().map(|r| values[r.0].clone().expect("root evaluated")).collect())
}
