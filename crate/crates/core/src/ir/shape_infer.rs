use super::{NodeAttrs, OpKind, Shape};
use crate::error::{Error, Result};

fn arity(kind: OpKind, shapes: &[Shape], expected: usize) -> Result<()> {
    if shapes.len() != expected {
        return Err(Error::ArityMismatch { op: kind.name(), expected, got: shapes.len() });
    }
    Ok(())
}

fn bad_attrs(kind: OpKind, reason: impl Into<String>) -> Error {
    Error::InvalidAttrs { op: kind.name(), reason: reason.into() }
}

fn numeric(kind: OpKind, shape: &Shape) -> Result<()> {
    if !shape.dtype.is_numeric() {
        return Err(bad_attrs(kind, format!("arithmetic is not defined on {}", shape.dtype)));
    }
    Ok(())
}

fn same_dtype(kind: OpKind, a: &Shape, b: &Shape) -> Result<()> {
    if a.dtype != b.dtype {
        return Err(Error::DTypeMismatch { op: kind.name(), lhs: a.clone(), rhs: b.clone() });
    }
    Ok(())
}

/// Shape rules for every op kind.
///
/// Binary elementwise ops demand identical shapes; the only broadcast is an
/// explicit `Expand` from rank 0. `device_data` leaves carry their shape from
/// the bound buffer and cannot be inferred.
pub fn infer_shape(kind: OpKind, shapes: &[Shape], attrs: &NodeAttrs) -> Result<Shape> {
    match (kind, attrs) {
        (OpKind::DeviceData, _) => Err(bad_attrs(kind, "leaf shapes come from their data")),
        (OpKind::Constant, NodeAttrs::Constant { value }) => {
            arity(kind, shapes, 0)?;
            Ok(Shape::scalar(value.dtype()))
        }
        (OpKind::Expand, NodeAttrs::Expand { dims }) => {
            arity(kind, shapes, 1)?;
            let input = &shapes[0];
            if input.rank() != 0 && &input.dims != dims {
                return Err(Error::ShapeMismatch { op: kind.name(), lhs: input.clone(), rhs: input.with_dims(dims.clone()) });
            }
            Ok(input.with_dims(dims.clone()))
        }
        (k, NodeAttrs::None) if k.is_binary_elementwise() => {
            arity(kind, shapes, 2)?;
            let (a, b) = (&shapes[0], &shapes[1]);
            same_dtype(kind, a, b)?;
            numeric(kind, a)?;
            if a.dims != b.dims {
                return Err(Error::ShapeMismatch { op: kind.name(), lhs: a.clone(), rhs: b.clone() });
            }
            Ok(a.clone())
        }
        (k, NodeAttrs::None) if k.is_unary_elementwise() => {
            arity(kind, shapes, 1)?;
            numeric(kind, &shapes[0])?;
            Ok(shapes[0].clone())
        }
        (OpKind::MatMul, NodeAttrs::None) => {
            arity(kind, shapes, 2)?;
            let (a, b) = (&shapes[0], &shapes[1]);
            same_dtype(kind, a, b)?;
            numeric(kind, a)?;
            if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
                return Err(Error::ShapeMismatch { op: kind.name(), lhs: a.clone(), rhs: b.clone() });
            }
            Ok(a.with_dims([a.dims[0], b.dims[1]]))
        }
        (OpKind::ReduceSum, NodeAttrs::ReduceSum { dims }) => {
            arity(kind, shapes, 1)?;
            let input = &shapes[0];
            numeric(kind, input)?;
            let mut seen = vec![false; input.rank()];
            for &d in dims {
                if d >= input.rank() || seen[d] {
                    return Err(bad_attrs(kind, format!("bad reduction dims {dims:?} for {input}")));
                }
                seen[d] = true;
            }
            let kept: Vec<usize> = input.dims.iter().enumerate().filter(|(i, _)| !seen[*i]).map(|(_, &d)| d).collect();
            Ok(input.with_dims(kept))
        }
        (OpKind::Reshape, NodeAttrs::Reshape { dims }) => {
            arity(kind, shapes, 1)?;
            let input = &shapes[0];
            let target = input.with_dims(dims.clone());
            if target.element_count() != input.element_count() {
                return Err(Error::ShapeMismatch { op: kind.name(), lhs: input.clone(), rhs: target });
            }
            Ok(target)
        }
        (OpKind::Permute, NodeAttrs::Permute { perm }) => {
            arity(kind, shapes, 1)?;
            let input = &shapes[0];
            if !is_permutation(perm, input.rank()) {
                return Err(bad_attrs(kind, format!("{perm:?} is not a permutation of rank {}", input.rank())));
            }
            Ok(input.with_dims(perm.iter().map(|&p| input.dims[p]).collect::<Vec<_>>()))
        }
        (OpKind::Narrow, &NodeAttrs::Narrow { dim, start, length }) => {
            arity(kind, shapes, 1)?;
            let input = &shapes[0];
            if dim >= input.rank() || start + length > input.dims[dim] {
                return Err(bad_attrs(kind, format!("dim={dim}, start={start}, length={length} out of range for {input}")));
            }
            let mut dims = input.dims.clone();
            dims[dim] = length;
            Ok(input.with_dims(dims))
        }
        (OpKind::UpdateNarrow, &NodeAttrs::UpdateNarrow { dim, start }) => {
            arity(kind, shapes, 2)?;
            let (base, update) = (&shapes[0], &shapes[1]);
            same_dtype(kind, base, update)?;
            let fits = dim < base.rank()
                && update.rank() == base.rank()
                && base.dims.iter().zip(&update.dims).enumerate().all(
                    |(i, (b, u))| {
                        if i == dim {
                            start + u <= *b
                        } else {
                            b == u
                        }
                    },
                );
            if !fits {
                return Err(Error::ShapeMismatch { op: kind.name(), lhs: base.clone(), rhs: update.clone() });
            }
            Ok(base.clone())
        }
        _ => Err(bad_attrs(kind, format!("unexpected attributes {attrs:?}"))),
    }
}

pub(crate) fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, Scalar};

    #[test]
    fn matmul_rule() {
        let s = infer_shape(OpKind::MatMul, &[Shape::f32([4, 8]), Shape::f32([8, 2])], &NodeAttrs::None).unwrap();
        assert_eq!(s, Shape::f32([4, 2]));
        let err = infer_shape(OpKind::MatMul, &[Shape::f32([4, 8]), Shape::f32([4, 2])], &NodeAttrs::None);
        assert!(matches!(err, Err(Error::ShapeMismatch { op: "dot", .. })));
    }

    #[test]
    fn permute_rule() {
        let attrs = NodeAttrs::Permute { perm: vec![1, 2, 0] };
        assert_eq!(infer_shape(OpKind::Permute, &[Shape::f32([2, 3, 4])], &attrs).unwrap(), Shape::f32([3, 4, 2]));
        let bad = NodeAttrs::Permute { perm: vec![1, 1, 0] };
        assert!(matches!(infer_shape(OpKind::Permute, &[Shape::f32([2, 3, 4])], &bad), Err(Error::InvalidAttrs { .. })));
    }

    #[test]
    fn reshape_rule() {
        let attrs = NodeAttrs::Reshape { dims: vec![2, 8] };
        assert_eq!(infer_shape(OpKind::Reshape, &[Shape::f32([4, 4])], &attrs).unwrap(), Shape::f32([2, 8]));
        let bad = NodeAttrs::Reshape { dims: vec![3, 5] };
        assert!(infer_shape(OpKind::Reshape, &[Shape::f32([4, 4])], &bad).is_err());
    }

    #[test]
    fn narrow_and_update_narrow() {
        let n = NodeAttrs::Narrow { dim: 1, start: 0, length: 3 };
        assert_eq!(infer_shape(OpKind::Narrow, &[Shape::f32([2, 8])], &n).unwrap(), Shape::f32([2, 3]));
        let oob = NodeAttrs::Narrow { dim: 1, start: 6, length: 3 };
        assert!(infer_shape(OpKind::Narrow, &[Shape::f32([2, 8])], &oob).is_err());
        let u = NodeAttrs::UpdateNarrow { dim: 1, start: 5 };
        let out = infer_shape(OpKind::UpdateNarrow, &[Shape::f32([2, 8]), Shape::f32([2, 3])], &u).unwrap();
        assert_eq!(out, Shape::f32([2, 8]));
        let u = NodeAttrs::UpdateNarrow { dim: 1, start: 6 };
        assert!(infer_shape(OpKind::UpdateNarrow, &[Shape::f32([2, 8]), Shape::f32([2, 3])], &u).is_err());
    }

    #[test]
    fn expand_only_from_rank_zero_or_same_shape() {
        let e = NodeAttrs::Expand { dims: vec![2, 4] };
        assert_eq!(infer_shape(OpKind::Expand, &[Shape::scalar(DType::F32)], &e).unwrap(), Shape::f32([2, 4]));
        assert_eq!(infer_shape(OpKind::Expand, &[Shape::f32([2, 4])], &e).unwrap(), Shape::f32([2, 4]));
        assert!(infer_shape(OpKind::Expand, &[Shape::f32([4])], &e).is_err());
    }

    #[test]
    fn reduce_sum_removes_dims() {
        let r = NodeAttrs::ReduceSum { dims: vec![0, 2] };
        assert_eq!(infer_shape(OpKind::ReduceSum, &[Shape::f32([2, 3, 4])], &r).unwrap(), Shape::f32([3]));
        let dup = NodeAttrs::ReduceSum { dims: vec![0, 0] };
        assert!(infer_shape(OpKind::ReduceSum, &[Shape::f32([2, 3])], &dup).is_err());
    }

    #[test]
    fn no_dtype_promotion() {
        let err = infer_shape(OpKind::Add, &[Shape::f32([2]), Shape::new(DType::I64, [2])], &NodeAttrs::None);
        assert!(matches!(err, Err(Error::DTypeMismatch { .. })));
        let pred = Shape::new(DType::Pred, [2]);
        assert!(infer_shape(OpKind::Add, &[pred.clone(), pred], &NodeAttrs::None).is_err());
    }

    #[test]
    fn arity_and_attr_checks() {
        let c = NodeAttrs::Constant { value: Scalar::I64(3) };
        assert_eq!(infer_shape(OpKind::Constant, &[], &c).unwrap(), Shape::scalar(DType::I64));
        assert!(matches!(infer_shape(OpKind::Neg, &[], &NodeAttrs::None), Err(Error::ArityMismatch { expected: 1, got: 0, .. })));
        assert!(matches!(infer_shape(OpKind::Add, &[Shape::f32([1]), Shape::f32([1])], &c), Err(Error::InvalidAttrs { .. })));
    }
}
