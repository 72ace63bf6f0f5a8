//! LSTM layer over full sequences, with truncated-nothing BPTT.
//!
//! Gate layout in every `[.., 4·units]` parameter is fixed as
//! (input, forget, cell, output): columns `[0, u)` gate the input,
//! `[u, 2u)` the forget path, `[2u, 3u)` the candidate cell, and
//! `[3u, 4u)` the output.

use super::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Result of a forward pass over one sequence.
#[derive(Debug, Clone)]
pub struct LstmOutput {
    /// Hidden state at every step, `[T, units]`.
    pub hidden_seq: Tensor,
    /// Final hidden state, `[units]`.
    pub h_last: Tensor,
    /// Final cell state, `[units]`.
    pub c_last: Tensor,
}

/// Gradients flowing out of a backward pass, mirroring the forward inputs.
#[derive(Debug, Clone)]
pub struct LstmInputGrads {
    pub d_seq: Tensor,
    pub d_h0: Tensor,
    pub d_c0: Tensor,
}

#[derive(Debug, Clone)]
struct LstmCache {
    seq: Tensor,      // [T, in]
    hs: Vec<f64>,     // [(T+1) * u], row 0 = h0
    cs: Vec<f64>,     // [(T+1) * u], row 0 = c0
    gate_i: Vec<f64>, // [T * u]
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    tanh_c: Vec<f64>, // [T * u]
}

/// Single-direction LSTM with sigmoid gates and tanh squashing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmLayer {
    /// Input kernel, `[in, 4·units]`.
    pub w_input: Tensor,
    /// Recurrent kernel, `[units, 4·units]`.
    pub w_recurrent: Tensor,
    /// Gate bias, `[4·units]`.
    pub bias: Tensor,
    pub units: usize,
    #[serde(skip)]
    grad_w_input: Option<Tensor>,
    #[serde(skip)]
    grad_w_recurrent: Option<Tensor>,
    #[serde(skip)]
    grad_bias: Option<Tensor>,
    #[serde(skip)]
    cache: Vec<LstmCache>,
}

impl LstmLayer {
    pub fn new(input_dim: usize, units: usize, rng: &mut impl Rng) -> Self {
        LstmLayer {
            w_input: Tensor::glorot_uniform(input_dim, 4 * units, rng),
            w_recurrent: Tensor::glorot_uniform(units, 4 * units, rng),
            bias: Tensor::zeros(&[4 * units]),
            units,
            grad_w_input: None,
            grad_w_recurrent: None,
            grad_bias: None,
            cache: Vec::new(),
        }
    }

    pub fn from_parts(w_input: Tensor, w_recurrent: Tensor, bias: Tensor, units: usize) -> Result<Self> {
        let ok = w_input.rank() == 2
            && w_input.cols() == 4 * units
            && w_recurrent.rows() == units
            && w_recurrent.cols() == 4 * units
            && bias.len() == 4 * units;
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "LstmLayer::from_parts",
                expected: vec![units, 4 * units],
                got: vec![w_recurrent.rows(), w_input.cols()],
            });
        }
        Ok(LstmLayer {
            w_input,
            w_recurrent,
            bias,
            units,
            grad_w_input: None,
            grad_w_recurrent: None,
            grad_bias: None,
            cache: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.rows()
    }

    /// Run the recurrence over `seq` (`[T, in]`) from the given initial
    /// states (`[units]` each). Caches all gate activations for backward.
    pub fn forward(&mut self, seq: &Tensor, h0: &Tensor, c0: &Tensor) -> Result<LstmOutput> {
        let (out, cache) = self.run_forward(seq, h0, c0)?;
        self.cache.push(cache);
        Ok(out)
    }

    /// Forward without caching; for evaluation-only passes.
    pub fn forward_inference(&self, seq: &Tensor, h0: &Tensor, c0: &Tensor) -> Result<LstmOutput> {
        self.run_forward(seq, h0, c0).map(|(out, _)| out)
    }

    fn run_forward(&self, seq: &Tensor, h0: &Tensor, c0: &Tensor) -> Result<(LstmOutput, LstmCache)> {
        let u = self.units;
        let input_dim = self.input_dim();
        if seq.cols() != input_dim {
            return Err(Error::ShapeMismatch {
                context: "LstmLayer::forward(seq)",
                expected: vec![input_dim],
                got: vec![seq.cols()],
            });
        }
        if h0.len() != u || c0.len() != u {
            return Err(Error::ShapeMismatch {
                context: "LstmLayer::forward(state)",
                expected: vec![u],
                got: vec![h0.len(), c0.len()],
            });
        }
        let t_len = seq.rows();
        let mut hs = vec![0.0; (t_len + 1) * u];
        let mut cs = vec![0.0; (t_len + 1) * u];
        hs[..u].copy_from_slice(h0.data());
        cs[..u].copy_from_slice(c0.data());
        let mut gate_i = vec![0.0; t_len * u];
        let mut gate_f = vec![0.0; t_len * u];
        let mut gate_g = vec![0.0; t_len * u];
        let mut gate_o = vec![0.0; t_len * u];
        let mut tanh_c = vec![0.0; t_len * u];

        let w_x = self.w_input.data();
        let w_h = self.w_recurrent.data();
        let b = self.bias.data();
        let cols = 4 * u;

        let mut z = vec![0.0; cols];
        for t in 0..t_len {
            z.copy_from_slice(b);
            let x_row = seq.row(t);
            for (p, &x) in x_row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let w_row = &w_x[p * cols..(p + 1) * cols];
                for (zv, &w) in z.iter_mut().zip(w_row) {
                    *zv += x * w;
                }
            }
            let h_prev = &hs[t * u..(t + 1) * u];
            for (p, &h) in h_prev.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                let w_row = &w_h[p * cols..(p + 1) * cols];
                for (zv, &w) in z.iter_mut().zip(w_row) {
                    *zv += h * w;
                }
            }
            for j in 0..u {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[u + j]);
                let g = z[2 * u + j].tanh();
                let o = sigmoid(z[3 * u + j]);
                let c_prev = cs[t * u + j];
                let c = f * c_prev + i * g;
                let tc = c.tanh();
                let h = o * tc;
                if !(c.is_finite() && h.is_finite()) {
                    return Err(Error::NonFinite("LstmLayer::forward"));
                }
                gate_i[t * u + j] = i;
                gate_f[t * u + j] = f;
                gate_g[t * u + j] = g;
                gate_o[t * u + j] = o;
                tanh_c[t * u + j] = tc;
                cs[(t + 1) * u + j] = c;
                hs[(t + 1) * u + j] = h;
            }
        }

        let hidden_seq = Tensor::from_vec(&[t_len, u], hs[u..].to_vec())?;
        let h_last = Tensor::vector(&hs[t_len * u..]);
        let c_last = Tensor::vector(&cs[t_len * u..]);
        let cache = LstmCache {
            seq: seq.clone(),
            hs,
            cs,
            gate_i,
            gate_f,
            gate_g,
            gate_o,
            tanh_c,
        };
        Ok((
            LstmOutput {
                hidden_seq,
                h_last,
                c_last,
            },
            cache,
        ))
    }

    /// Backpropagate through the most recent un-consumed forward pass.
    ///
    /// `d_hidden_seq` carries the upstream gradient for every step's hidden
    /// state; `d_h_last`/`d_c_last` add extra gradient on the final states
    /// (used when only the last state feeds downstream). Parameter gradients
    /// accumulate internally.
    pub fn backward(
        &mut self,
        d_hidden_seq: &Tensor,
        d_h_last: Option<&Tensor>,
        d_c_last: Option<&Tensor>,
    ) -> Result<LstmInputGrads> {
        let cache = self
            .cache
            .pop()
            .ok_or(Error::MissingForwardCache("LstmLayer::backward"))?;
        let u = self.units;
        let t_len = cache.seq.rows();
        let input_dim = self.input_dim();
        if d_hidden_seq.rows() != t_len || d_hidden_seq.cols() != u {
            return Err(Error::ShapeMismatch {
                context: "LstmLayer::backward",
                expected: vec![t_len, u],
                got: d_hidden_seq.shape().to_vec(),
            });
        }

        let mut dh_next = vec![0.0; u];
        let mut dc_next = vec![0.0; u];
        if let Some(d) = d_h_last {
            dh_next.copy_from_slice(d.data());
        }
        if let Some(d) = d_c_last {
            dc_next.copy_from_slice(d.data());
        }

        let cols = 4 * u;
        let mut dw_x = self
            .grad_w_input
            .take()
            .unwrap_or_else(|| Tensor::zeros(&[input_dim, cols]));
        let mut dw_h = self
            .grad_w_recurrent
            .take()
            .unwrap_or_else(|| Tensor::zeros(&[u, cols]));
        let mut db = self.grad_bias.take().unwrap_or_else(|| Tensor::zeros(&[cols]));
        let mut d_seq = vec![0.0; t_len * input_dim];

        let w_x = self.w_input.data();
        let w_h = self.w_recurrent.data();
        let mut dz = vec![0.0; cols];

        for t in (0..t_len).rev() {
            let base = t * u;
            for j in 0..u {
                let i = cache.gate_i[base + j];
                let f = cache.gate_f[base + j];
                let g = cache.gate_g[base + j];
                let o = cache.gate_o[base + j];
                let tc = cache.tanh_c[base + j];
                let c_prev = cache.cs[base + j];

                let dh = d_hidden_seq.get(t, j) + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                let d_f = dc * c_prev;
                let d_i = dc * g;
                let d_g = dc * i;

                dz[j] = d_i * i * (1.0 - i);
                dz[u + j] = d_f * f * (1.0 - f);
                dz[2 * u + j] = d_g * (1.0 - g * g);
                dz[3 * u + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }

            // dW += x_tᵀ·dz, db += dz, dx_t = dz·Wᵀ
            let x_row = cache.seq.row(t);
            {
                let dw = dw_x.data_mut();
                for (p, &x) in x_row.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let dw_row = &mut dw[p * cols..(p + 1) * cols];
                    for (d, &z) in dw_row.iter_mut().zip(&dz) {
                        *d += x * z;
                    }
                }
            }
            let h_prev = &cache.hs[base..base + u];
            {
                let dw = dw_h.data_mut();
                for (p, &h) in h_prev.iter().enumerate() {
                    if h == 0.0 {
                        continue;
                    }
                    let dw_row = &mut dw[p * cols..(p + 1) * cols];
                    for (d, &z) in dw_row.iter_mut().zip(&dz) {
                        *d += h * z;
                    }
                }
            }
            for (d, &z) in db.data_mut().iter_mut().zip(&dz) {
                *d += z;
            }
            let dx_row = &mut d_seq[t * input_dim..(t + 1) * input_dim];
            for (p, dx) in dx_row.iter_mut().enumerate() {
                let w_row = &w_x[p * cols..(p + 1) * cols];
                *dx = w_row.iter().zip(&dz).map(|(w, z)| w * z).sum();
            }
            for (j, slot) in dh_next.iter_mut().enumerate() {
                let w_row = &w_h[j * cols..(j + 1) * cols];
                *slot = w_row.iter().zip(&dz).map(|(w, z)| w * z).sum();
            }
        }

        self.grad_w_input = Some(dw_x);
        self.grad_w_recurrent = Some(dw_h);
        self.grad_bias = Some(db);

        Ok(LstmInputGrads {
            d_seq: Tensor::from_vec(&[t_len, input_dim], d_seq)?,
            d_h0: Tensor::vector(&dh_next),
            d_c0: Tensor::vector(&dc_next),
        })
    }

    /// Drain accumulated gradients; the L2 term `2·λ·w` is added once to the
    /// two kernels (biases are never regularized).
    pub fn take_grads(&mut self, lambda: f64) -> Vec<(&'static str, Tensor)> {
        let mut gx = self
            .grad_w_input
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.w_input.shape()));
        let mut gh = self
            .grad_w_recurrent
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.w_recurrent.shape()));
        if lambda != 0.0 {
            gx.add_assign(&self.w_input.scale(2.0 * lambda)).unwrap();
            gh.add_assign(&self.w_recurrent.scale(2.0 * lambda)).unwrap();
        }
        let gb = self
            .grad_bias
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.bias.shape()));
        vec![("w_x", gx), ("w_h", gh), ("b", gb)]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_x", &self.w_input),
            ("w_h", &self.w_recurrent),
            ("b", &self.bias),
        ]
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&'static str, &mut Tensor)) {
        f("w_x", &mut self.w_input);
        f("w_h", &mut self.w_recurrent);
        f("b", &mut self.bias);
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
        self.grad_w_input = None;
        self.grad_w_recurrent = None;
        self.grad_bias = None;
    }

    pub fn pending_backwards(&self) -> usize {
        self.cache.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn zero_state(u: usize) -> (Tensor, Tensor) {
        (Tensor::zeros(&[u]), Tensor::zeros(&[u]))
    }

    #[test]
    fn zero_weights_freeze_state_at_zero() {
        let u = 3;
        let mut layer = LstmLayer::from_parts(
            Tensor::zeros(&[2, 4 * u]),
            Tensor::zeros(&[u, 4 * u]),
            Tensor::zeros(&[4 * u]),
            u,
        )
        .unwrap();
        let seq = Tensor::matrix(&[&[1.0, -2.0], &[3.0, 4.0], &[0.5, 0.5]]).unwrap();
        let (h0, c0) = zero_state(u);
        let out = layer.forward(&seq, &h0, &c0).unwrap();
        assert!(out.h_last.data().iter().all(|&v| v == 0.0));
        assert!(out.c_last.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_closed_form() {
        // T = 1, units = 1: every gate reduces to a scalar expression.
        let w_x = Tensor::matrix(&[&[0.1, 0.2, 0.3, 0.4]]).unwrap();
        let w_h = Tensor::matrix(&[&[0.9, -0.8, 0.7, -0.6]]).unwrap();
        let b = Tensor::vector(&[0.05, 0.06, 0.07, 0.08]);
        let mut layer = LstmLayer::from_parts(w_x, w_h, b, 1).unwrap();

        let x = 2.0;
        let h0v = 0.25;
        let c0v = 0.5;
        let seq = Tensor::matrix(&[&[x]]).unwrap();
        let out = layer
            .forward(&seq, &Tensor::vector(&[h0v]), &Tensor::vector(&[c0v]))
            .unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(x * 0.1 + h0v * 0.9 + 0.05);
        let f = sig(x * 0.2 + h0v * -0.8 + 0.06);
        let g = (x * 0.3 + h0v * 0.7 + 0.07_f64).tanh();
        let o = sig(x * 0.4 + h0v * -0.6 + 0.08);
        let c1 = f * c0v + i * g;
        let h1 = o * c1.tanh();

        assert!((out.h_last.data()[0] - h1).abs() < 1e-15);
        assert!((out.c_last.data()[0] - c1).abs() < 1e-15);
    }

    #[test]
    fn sequence_matches_independent_recurrence() {
        let (t_len, input_dim, u) = (5, 2, 3);
        let mut rng = seeded_rng(11, "lstm.recurrence.oracle");
        let mut layer = LstmLayer::new(input_dim, u, &mut rng);
        layer.bias = Tensor::glorot_uniform(1, 4 * u, &mut rng)
            .reshape(&[4 * u])
            .unwrap();
        let seq = Tensor::glorot_uniform(t_len, input_dim, &mut rng);
        let (h0, c0) = zero_state(u);
        let out = layer.forward(&seq, &h0, &c0).unwrap();

        // Independent straight-line recurrence: scalar loops only, local
        // sigmoid, no shared helpers.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; u];
        let mut c = vec![0.0; u];
        for t in 0..t_len {
            let mut z = vec![0.0; 4 * u];
            for (col, zv) in z.iter_mut().enumerate() {
                let mut acc = layer.bias.data()[col];
                for p in 0..input_dim {
                    acc += seq.get(t, p) * layer.w_input.get(p, col);
                }
                for p in 0..u {
                    acc += h[p] * layer.w_recurrent.get(p, col);
                }
                *zv = acc;
            }
            let mut h_new = vec![0.0; u];
            let mut c_new = vec![0.0; u];
            for j in 0..u {
                let i = sig(z[j]);
                let f = sig(z[u + j]);
                let g = z[2 * u + j].tanh();
                let o = sig(z[3 * u + j]);
                c_new[j] = f * c[j] + i * g;
                h_new[j] = o * c_new[j].tanh();
            }
            h = h_new;
            c = c_new;
            for j in 0..u {
                assert!(
                    (out.hidden_seq.get(t, j) - h[j]).abs() < 1e-12,
                    "hidden state diverges from oracle at step {t}, unit {j}"
                );
            }
        }
        for j in 0..u {
            assert!((out.h_last.data()[j] - h[j]).abs() < 1e-12);
            assert!((out.c_last.data()[j] - c[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut rng = seeded_rng(1, "lstm.nocache");
        let mut layer = LstmLayer::new(2, 3, &mut rng);
        let d = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            layer.backward(&d, None, None),
            Err(Error::MissingForwardCache(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = seeded_rng(2, "lstm.zero.upstream");
        let mut layer = LstmLayer::new(2, 3, &mut rng);
        let seq = Tensor::glorot_uniform(4, 2, &mut rng);
        let (h0, c0) = zero_state(3);
        layer.forward(&seq, &h0, &c0).unwrap();
        let grads_in = layer.backward(&Tensor::zeros(&[4, 3]), None, None).unwrap();
        assert!(grads_in.d_seq.data().iter().all(|&v| v == 0.0));
        for (_, g) in layer.take_grads(0.0) {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }
}
