//! The merging layer: one context per NET in, one merged vector out.

use super::encoder::ContextVector;
use super::MergeFn;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::NetId;
use serde::{Deserialize, Serialize};

/// Result of merging the contexts of one interconnection at one timestep.
/// Slice boundaries are recorded so the loss gradient can be routed back to
/// each contributing NET.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedVector {
    pub values: Tensor,
    pub interconnection_id: u32,
    pub timestep: u64,
    pub merge_fn: MergeFn,
    /// `(net, offset, len)` per contributor, in merge order. For sum and
    /// average merges every slice spans the whole vector.
    pub slices: Vec<(NetId, usize, usize)>,
}

/// Merge one context per NET, in the coordinator-declared `net_order`.
/// Contexts may arrive in any order; the merge order never depends on it.
pub fn merge(
    contexts: &[ContextVector],
    merge_fn: MergeFn,
    net_order: &[NetId],
    interconnection_id: u32,
    timestep: u64,
) -> Result<MergedVector> {
    let mut ordered = Vec::with_capacity(net_order.len());
    for &net in net_order {
        let matches: Vec<&ContextVector> =
            contexts.iter().filter(|c| c.net_id == net).collect();
        match matches.len() {
            0 => {
                return Err(Error::Protocol(format!(
                    "merge for interconnection {interconnection_id} is missing a context from {net}"
                )))
            }
            1 => ordered.push(matches[0]),
            n => {
                return Err(Error::Protocol(format!(
                    "merge for interconnection {interconnection_id} got {n} contexts from {net}"
                )))
            }
        }
    }
    if contexts.len() != net_order.len() {
        return Err(Error::Protocol(format!(
            "merge expected {} contexts, got {}",
            net_order.len(),
            contexts.len()
        )));
    }

    let (values, slices) = match merge_fn {
        MergeFn::Concat => {
            let total: usize = ordered.iter().map(|c| c.len()).sum();
            let mut data = Vec::with_capacity(total);
            let mut slices = Vec::with_capacity(ordered.len());
            for c in &ordered {
                slices.push((c.net_id, data.len(), c.len()));
                data.extend_from_slice(c.values.data());
            }
            (Tensor::vector(&data), slices)
        }
        MergeFn::Sum | MergeFn::Average => {
            let dim = ordered[0].len();
            let mut acc = Tensor::zeros(&[dim]);
            for c in &ordered {
                if c.len() != dim {
                    return Err(Error::ShapeMismatch {
                        context: "merge(sum/average)",
                        expected: vec![dim],
                        got: vec![c.len()],
                    });
                }
                acc.add_assign(&c.values)?;
            }
            if merge_fn == MergeFn::Average {
                acc = acc.scale(1.0 / ordered.len() as f64);
            }
            let slices = ordered.iter().map(|c| (c.net_id, 0, dim)).collect();
            (acc, slices)
        }
    };

    Ok(MergedVector {
        values,
        interconnection_id,
        timestep,
        merge_fn,
        slices,
    })
}

/// Route a merged-vector gradient back to per-NET context gradients,
/// inverting [`merge`]: concatenation slices apart, sum copies through,
/// average scales by `1/n`.
pub fn split_merged_grad(
    merged: &MergedVector,
    d_merged: &Tensor,
) -> Result<Vec<(NetId, Tensor)>> {
    if d_merged.len() != merged.values.len() {
        return Err(Error::ShapeMismatch {
            context: "split_merged_grad",
            expected: vec![merged.values.len()],
            got: vec![d_merged.len()],
        });
    }
    let n = merged.slices.len();
    merged
        .slices
        .iter()
        .map(|&(net, offset, len)| {
            let slice = d_merged.slice_cols(offset, len)?;
            let grad = match merged.merge_fn {
                MergeFn::Concat | MergeFn::Sum => slice,
                MergeFn::Average => slice.scale(1.0 / n as f64),
            };
            Ok((net, grad))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::WorkerId;

    fn ctx(net: u32, values: &[f64]) -> ContextVector {
        ContextVector {
            values: Tensor::vector(values),
            net_id: NetId(net),
            worker_id: WorkerId(1),
            timestep: 0,
        }
    }

    #[test]
    fn concat_keeps_every_context_recoverable() {
        let contexts = vec![ctx(1, &[1.0, 2.0]), ctx(2, &[3.0]), ctx(3, &[4.0, 5.0, 6.0])];
        let order = [NetId(1), NetId(2), NetId(3)];
        let merged = merge(&contexts, MergeFn::Concat, &order, 1, 0).unwrap();
        assert_eq!(merged.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(merged.values.len(), 2 + 1 + 3);
        // Un-slicing recovers each contribution exactly.
        for (c, &(net, off, len)) in contexts.iter().zip(&merged.slices) {
            assert_eq!(net, c.net_id);
            assert_eq!(
                merged.values.slice_cols(off, len).unwrap().data(),
                c.values.data()
            );
        }
    }

    #[test]
    fn merge_order_is_declared_not_arrival() {
        let contexts = vec![ctx(3, &[9.0]), ctx(1, &[7.0]), ctx(2, &[8.0])];
        let order = [NetId(1), NetId(2), NetId(3)];
        let merged = merge(&contexts, MergeFn::Concat, &order, 1, 0).unwrap();
        assert_eq!(merged.values.data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn sum_and_average_are_elementwise() {
        let contexts = vec![ctx(1, &[1.0, 2.0]), ctx(2, &[3.0, 4.0])];
        let order = [NetId(1), NetId(2)];
        let sum = merge(&contexts, MergeFn::Sum, &order, 1, 0).unwrap();
        assert_eq!(sum.values.data(), &[4.0, 6.0]);

        let identical = vec![ctx(1, &[5.0, -1.0]), ctx(2, &[5.0, -1.0])];
        let avg = merge(&identical, MergeFn::Average, &order, 1, 0).unwrap();
        assert_eq!(avg.values.data(), &[5.0, -1.0], "average of identical vectors");
    }

    #[test]
    fn missing_and_duplicate_nets_are_rejected() {
        let order = [NetId(1), NetId(2)];
        let missing = vec![ctx(1, &[1.0])];
        assert!(merge(&missing, MergeFn::Concat, &order, 1, 0).is_err());
        let duplicate = vec![ctx(1, &[1.0]), ctx(1, &[2.0]), ctx(2, &[3.0])];
        assert!(merge(&duplicate, MergeFn::Concat, &order, 1, 0).is_err());
    }

    #[test]
    fn grad_split_inverts_each_merge_fn() {
        let contexts = vec![ctx(1, &[1.0, 2.0]), ctx(2, &[3.0, 4.0])];
        let order = [NetId(1), NetId(2)];

        let merged = merge(&contexts, MergeFn::Concat, &order, 1, 0).unwrap();
        let d = Tensor::vector(&[0.1, 0.2, 0.3, 0.4]);
        let parts = split_merged_grad(&merged, &d).unwrap();
        assert_eq!(parts[0].1.data(), &[0.1, 0.2]);
        assert_eq!(parts[1].1.data(), &[0.3, 0.4]);
        // Partition of a concatenation: slices reassemble the full gradient.
        let reassembled: Vec<f64> = parts
            .iter()
            .flat_map(|(_, g)| g.data().to_vec())
            .collect();
        assert_eq!(reassembled, d.data());

        let summed = merge(&contexts, MergeFn::Sum, &order, 1, 0).unwrap();
        let d2 = Tensor::vector(&[1.0, 2.0]);
        for (_, g) in split_merged_grad(&summed, &d2).unwrap() {
            assert_eq!(g.data(), d2.data(), "sum passes gradients through");
        }

        let averaged = merge(&contexts, MergeFn::Average, &order, 1, 0).unwrap();
        for (_, g) in split_merged_grad(&averaged, &d2).unwrap() {
            assert_eq!(g.data(), &[0.5, 1.0], "average scales gradients by 1/n");
        }
    }
}
