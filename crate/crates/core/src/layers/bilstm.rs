//! Bidirectional LSTM: two independent cells reading the sequence in
//! opposite directions, outputs concatenated per step.

use super::lstm::{LstmLayer, LstmOutput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Forward result of a bidirectional pass.
#[derive(Debug, Clone)]
pub struct BiLstmOutput {
    /// Per-step concatenation `[fwd_h_t ; bwd_h_t]`, `[T, 2·units]`, with the
    /// backward half re-aligned to input time order.
    pub hidden_seq: Tensor,
    /// `[fwd final hidden ; bwd final hidden]`, `[2·units]`. The backward
    /// cell's final state corresponds to input position 0.
    pub combined_final: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub forward_cell: LstmLayer,
    pub backward_cell: LstmLayer,
}

fn reverse_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in (0..r).rev() {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_vec(&[r, c], data).expect("same volume")
}

impl BiLstmLayer {
    pub fn new(input_dim: usize, units: usize, rng: &mut impl Rng) -> Self {
        BiLstmLayer {
            forward_cell: LstmLayer::new(input_dim, units, rng),
            backward_cell: LstmLayer::new(input_dim, units, rng),
        }
    }

    pub fn units(&self) -> usize {
        self.forward_cell.units
    }

    pub fn input_dim(&self) -> usize {
        self.forward_cell.input_dim()
    }

    /// Output width per step: `2·units`.
    pub fn output_dim(&self) -> usize {
        2 * self.units()
    }

    /// Run both directions from zero initial states.
    pub fn forward(&mut self, seq: &Tensor) -> Result<BiLstmOutput> {
        let u = self.units();
        let zeros = Tensor::zeros(&[u]);
        let fwd = self.forward_cell.forward(seq, &zeros, &zeros)?;
        let bwd = self.backward_cell.forward(&reverse_rows(seq), &zeros, &zeros)?;
        Self::combine(fwd, bwd)
    }

    /// Forward without caching; for evaluation-only passes.
    pub fn forward_inference(&self, seq: &Tensor) -> Result<BiLstmOutput> {
        let u = self.units();
        let zeros = Tensor::zeros(&[u]);
        let fwd = self.forward_cell.forward_inference(seq, &zeros, &zeros)?;
        let bwd = self
            .backward_cell
            .forward_inference(&reverse_rows(seq), &zeros, &zeros)?;
        Self::combine(fwd, bwd)
    }

    fn combine(fwd: LstmOutput, bwd: LstmOutput) -> Result<BiLstmOutput> {
        let hidden_seq = fwd.hidden_seq.concat_cols(&reverse_rows(&bwd.hidden_seq))?;
        let combined_final = fwd.h_last.concat_cols(&bwd.h_last)?;
        Ok(BiLstmOutput {
            hidden_seq,
            combined_final,
        })
    }

    /// Backward through the most recent forward pass.
    ///
    /// `d_hidden_seq` (if any) is `[T, 2·units]` in input time order;
    /// `d_combined_final` (if any) is `[2·units]`. Returns the input-sequence
    /// gradient `[T, in]`.
    pub fn backward(
        &mut self,
        d_hidden_seq: Option<&Tensor>,
        d_combined_final: Option<&Tensor>,
        seq_len: usize,
    ) -> Result<Tensor> {
        let u = self.units();
        if d_hidden_seq.is_none() && d_combined_final.is_none() {
            return Err(Error::Protocol(
                "BiLstmLayer::backward needs at least one upstream gradient".into(),
            ));
        }
        if let Some(d) = d_combined_final {
            if d.len() != 2 * u {
                return Err(Error::ShapeMismatch {
                    context: "BiLstmLayer::backward(final)",
                    expected: vec![2 * u],
                    got: vec![d.len()],
                });
            }
        }

        let (d_fwd_seq, d_bwd_seq) = match d_hidden_seq {
            Some(d) => {
                if d.rows() != seq_len || d.cols() != 2 * u {
                    return Err(Error::ShapeMismatch {
                        context: "BiLstmLayer::backward(seq)",
                        expected: vec![seq_len, 2 * u],
                        got: d.shape().to_vec(),
                    });
                }
                (d.slice_cols(0, u)?, reverse_rows(&d.slice_cols(u, u)?))
            }
            None => (Tensor::zeros(&[seq_len, u]), Tensor::zeros(&[seq_len, u])),
        };
        let (d_fwd_last, d_bwd_last) = match d_combined_final {
            Some(d) => (Some(d.slice_cols(0, u)?), Some(d.slice_cols(u, u)?)),
            None => (None, None),
        };

        let fwd_grads = self
            .forward_cell
            .backward(&d_fwd_seq, d_fwd_last.as_ref(), None)?;
        let bwd_grads = self
            .backward_cell
            .backward(&d_bwd_seq, d_bwd_last.as_ref(), None)?;

        let mut d_seq = fwd_grads.d_seq;
        d_seq.add_assign(&reverse_rows(&bwd_grads.d_seq))?;
        Ok(d_seq)
    }

    /// Drain accumulated gradients from both cells; kernel L2 added once.
    pub fn take_grads(&mut self, lambda: f64) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(6);
        for (name, g) in self.forward_cell.take_grads(lambda) {
            out.push((format!("fwd.{name}"), g));
        }
        for (name, g) in self.backward_cell.take_grads(lambda) {
            out.push((format!("bwd.{name}"), g));
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(6);
        for (name, p) in self.forward_cell.named_params() {
            out.push((format!("fwd.{name}"), p));
        }
        for (name, p) in self.backward_cell.named_params() {
            out.push((format!("bwd.{name}"), p));
        }
        out
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.forward_cell
            .for_each_param(&mut |name, p| f(format!("fwd.{name}"), p));
        self.backward_cell
            .for_each_param(&mut |name, p| f(format!("bwd.{name}"), p));
    }

    pub fn clear_cache(&mut self) {
        self.forward_cell.clear_cache();
        self.backward_cell.clear_cache();
    }
}
