//! Recurrent cell used by the sequence models. The default is a standard
//! LSTM (gate order input, forget, candidate, output); a plain sigmoid
//! recurrence is available for comparing against gated memory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{init_bound, VectorTable};
use crate::error::{DirError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Vanilla,
}

impl CellKind {
    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "lstm" => Some(CellKind::Lstm),
            "vanilla" => Some(CellKind::Vanilla),
            _ => None,
        }
    }

    pub(crate) fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Vanilla => 1,
        }
    }
}

/// Recurrent cell parameters. Weight rows are gate-major: row g*hidden + j
/// feeds unit j of gate g.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    kind: CellKind,
    input_dim: usize,
    hidden: usize,
    w_in: VectorTable,
    w_rec: VectorTable,
    bias: Vec<f64>,
}

/// Activations saved by the forward step, enough to run the exact backward
/// pass without recomputing.
#[derive(Debug, Clone)]
pub struct StepCache {
    gates: Vec<f64>,
    c: Vec<f64>,
}

/// Dense gradient of every cell parameter, laid out like the cell tables.
#[derive(Debug, Clone)]
pub struct CellGrads {
    pub w_in: Vec<f64>,
    pub w_rec: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CellGrads {
    pub fn zeros(cell: &RnnCell) -> CellGrads {
        let rows = cell.kind.gates() * cell.hidden;
        CellGrads {
            w_in: vec![0.0; rows * cell.input_dim],
            w_rec: vec![0.0; rows * cell.hidden],
            bias: vec![0.0; rows],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RnnCell {
    pub fn init<R: Rng>(kind: CellKind, input_dim: usize, hidden: usize, rng: &mut R) -> RnnCell {
        let rows = kind.gates() * hidden;
        let bound = init_bound(hidden);
        RnnCell {
            kind,
            input_dim,
            hidden,
            w_in: VectorTable::random(rows, input_dim, bound, rng),
            w_rec: VectorTable::random(rows, hidden, bound, rng),
            bias: (0..rows).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn from_tables(
        kind: CellKind,
        w_in: VectorTable,
        w_rec: VectorTable,
        bias: Vec<f64>,
    ) -> Result<RnnCell> {
        let hidden = w_rec.dim();
        let rows = kind.gates() * hidden;
        if w_in.rows() != rows || w_rec.rows() != rows || bias.len() != rows {
            return Err(DirError::Invalid(format!(
                "cell table shapes disagree: {} input rows, {} recurrent rows, {} biases, expected {rows}",
                w_in.rows(),
                w_rec.rows(),
                bias.len()
            )));
        }
        Ok(RnnCell {
            kind,
            input_dim: w_in.dim(),
            hidden,
            w_in,
            w_rec,
            bias,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn tables(&self) -> (&VectorTable, &VectorTable, &[f64]) {
        (&self.w_in, &self.w_rec, &self.bias)
    }

    pub fn zero_state(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.hidden], vec![0.0; self.hidden])
    }

    pub fn parameter_count(&self) -> usize {
        let rows = self.kind.gates() * self.hidden;
        rows * self.input_dim + rows * self.hidden + rows
    }

    fn preactivations(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let rows = self.kind.gates() * self.hidden;
        let mut z = self.bias.clone();
        for k in 0..rows {
            let wi = self.w_in.row(k as u32);
            let wr = self.w_rec.row(k as u32);
            let mut s = 0.0;
            for j in 0..self.input_dim {
                s += wi[j] * x[j];
            }
            for j in 0..self.hidden {
                s += wr[j] * h_prev[j];
            }
            z[k] += s;
        }
        z
    }

    /// One step. Returns the new hidden state, new cell state (zeros for the
    /// sigmoid cell) and the cache needed to backpropagate through this step.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, StepCache) {
        let h = self.hidden;
        let z = self.preactivations(x, h_prev);
        match self.kind {
            CellKind::Lstm => {
                let mut gates = vec![0.0; 4 * h];
                for j in 0..h {
                    gates[j] = sigmoid(z[j]);
                    gates[h + j] = sigmoid(z[h + j]);
                    gates[2 * h + j] = z[2 * h + j].tanh();
                    gates[3 * h + j] = sigmoid(z[3 * h + j]);
                }
                let mut c = vec![0.0; h];
                let mut out = vec![0.0; h];
                for j in 0..h {
                    c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                    out[j] = gates[3 * h + j] * c[j].tanh();
                }
                let cache = StepCache {
                    gates,
                    c: c.clone(),
                };
                (out, c, cache)
            }
            CellKind::Vanilla => {
                let out: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
                let cache = StepCache {
                    gates: out.clone(),
                    c: Vec::new(),
                };
                (out, vec![0.0; h], cache)
            }
        }
    }

    /// Exact backward pass for one step. `dh`/`dc` are the gradients flowing
    /// into this step's outputs; returns gradients for the input and previous
    /// state, accumulating parameter gradients into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &StepCache,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        dh: &[f64],
        dc: &[f64],
        grads: &mut CellGrads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let rows = self.kind.gates() * h;
        let mut dz = vec![0.0; rows];
        let mut dc_prev = vec![0.0; h];
        match self.kind {
            CellKind::Lstm => {
                for j in 0..h {
                    let gi = cache.gates[j];
                    let gf = cache.gates[h + j];
                    let gg = cache.gates[2 * h + j];
                    let go = cache.gates[3 * h + j];
                    let tc = cache.c[j].tanh();
                    let do_ = dh[j] * tc;
                    let dct = dc[j] + dh[j] * go * (1.0 - tc * tc);
                    dz[j] = dct * gg * gi * (1.0 - gi);
                    dz[h + j] = dct * c_prev[j] * gf * (1.0 - gf);
                    dz[2 * h + j] = dct * gi * (1.0 - gg * gg);
                    dz[3 * h + j] = do_ * go * (1.0 - go);
                    dc_prev[j] = dct * gf;
                }
            }
            CellKind::Vanilla => {
                for j in 0..h {
                    let out = cache.gates[j];
                    dz[j] = dh[j] * out * (1.0 - out);
                }
            }
        }
        let mut dx = vec![0.0; self.input_dim];
        let mut dh_prev = vec![0.0; h];
        for k in 0..rows {
            let g = dz[k];
            if g == 0.0 {
                continue;
            }
            let wi = self.w_in.row(k as u32);
            let wr = self.w_rec.row(k as u32);
            for j in 0..self.input_dim {
                grads.w_in[k * self.input_dim + j] += g * x[j];
                dx[j] += g * wi[j];
            }
            for j in 0..h {
                grads.w_rec[k * h + j] += g * h_prev[j];
                dh_prev[j] += g * wr[j];
            }
            grads.bias[k] += g;
        }
        (dx, dh_prev, dc_prev)
    }

    pub fn apply_sgd(&mut self, grads: &CellGrads, lr: f64, weight_decay: f64) -> Result<()> {
        fn update(params: &mut [f64], g: &[f64], lr: f64, wd: f64) -> Result<()> {
            for i in 0..params.len() {
                let step = g[i] + wd * params[i];
                params[i] -= lr * step;
                if !params[i].is_finite() {
                    return Err(DirError::NonFinite("recurrent cell".into()));
                }
            }
            Ok(())
        }
        let rows = self.kind.gates() * self.hidden;
        for k in 0..rows as u32 {
            update(
                self.w_in.row_mut(k),
                &grads.w_in[k as usize * self.input_dim..(k as usize + 1) * self.input_dim],
                lr,
                weight_decay,
            )?;
            update(
                self.w_rec.row_mut(k),
                &grads.w_rec[k as usize * self.hidden..(k as usize + 1) * self.hidden],
                lr,
                weight_decay,
            )?;
        }
        update(&mut self.bias, &grads.bias, lr, weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(kind: CellKind, input_dim: usize, hidden: usize) -> RnnCell {
        let rows = kind.gates() * hidden;
        RnnCell::from_tables(
            kind,
            VectorTable::zeros(rows, input_dim),
            VectorTable::zeros(rows, hidden),
            vec![0.0; rows],
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let cell = zero_cell(CellKind::Lstm, 3, 2);
        let (h0, c0) = cell.zero_state();
        let (h, c, _) = cell.step(&[1.0, -2.0, 0.5], &h0, &c0);
        // gates sit at 1/2, candidate at 0, so both states stay zero
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
        let vcell = zero_cell(CellKind::Vanilla, 3, 2);
        let (h, _, _) = vcell.step(&[1.0, -2.0, 0.5], &h0, &c0);
        assert_eq!(h, vec![0.5, 0.5]);
    }

    #[test]
    fn saturated_forget_gate_carries_the_cell_state() {
        let hidden = 2;
        let rows = 4 * hidden;
        let mut bias = vec![0.0; rows];
        for j in 0..hidden {
            bias[hidden + j] = 50.0; // forget ~ 1
            bias[j] = -50.0; // input ~ 0
        }
        let cell = RnnCell::from_tables(
            CellKind::Lstm,
            VectorTable::zeros(rows, 1),
            VectorTable::zeros(rows, hidden),
            bias,
        )
        .unwrap();
        let c_prev = vec![0.7, -1.3];
        let (_, c, _) = cell.step(&[0.0], &[0.0, 0.0], &c_prev);
        for j in 0..hidden {
            assert!((c[j] - c_prev[j]).abs() < 1e-9);
        }
    }

    /// Scalar readout of a short unroll, used as the loss for gradient checks.
    fn unroll_loss(cell: &RnnCell, xs: &[Vec<f64>], w: &[f64]) -> f64 {
        let (mut h, mut c) = cell.zero_state();
        let mut loss = 0.0;
        for x in xs {
            let (h2, c2, _) = cell.step(x, &h, &c);
            h = h2;
            c = c2;
            loss += dot(w, &h);
        }
        loss
    }

    fn unroll_grads(cell: &RnnCell, xs: &[Vec<f64>], w: &[f64]) -> (CellGrads, Vec<Vec<f64>>) {
        let (mut h, mut c) = cell.zero_state();
        let mut steps = Vec::new();
        for x in xs {
            let (h2, c2, cache) = cell.step(x, &h, &c);
            steps.push((h.clone(), c.clone(), cache));
            h = h2;
            c = c2;
        }
        let mut grads = CellGrads::zeros(cell);
        let mut dxs = vec![Vec::new(); xs.len()];
        let mut dh_next = vec![0.0; cell.hidden()];
        let mut dc_next = vec![0.0; cell.hidden()];
        for t in (0..xs.len()).rev() {
            let (h_prev, c_prev, cache) = &steps[t];
            let mut dh = w.to_vec();
            for j in 0..cell.hidden() {
                dh[j] += dh_next[j];
            }
            let (dx, dh_prev, dc_prev) =
                cell.backward(cache, &xs[t], h_prev, c_prev, &dh, &dc_next, &mut grads);
            dxs[t] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        (grads, dxs)
    }

    fn check_cell_grads(kind: CellKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (input_dim, hidden) = (3, 2);
        let cell = RnnCell::init(kind, input_dim, hidden, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let w: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (grads, dxs) = unroll_grads(&cell, &xs, &w);

        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let rows = kind.gates() * hidden;
        // every parameter, perturbed through from_tables clones
        for k in 0..rows {
            for j in 0..input_dim {
                let mut plus = cell.clone();
                plus.w_in.row_mut(k as u32)[j] += h;
                let mut minus = cell.clone();
                minus.w_in.row_mut(k as u32)[j] -= h;
                let fd = (unroll_loss(&plus, &xs, &w) - unroll_loss(&minus, &xs, &w)) / (2.0 * h);
                assert!(
                    rel(grads.w_in[k * input_dim + j], fd) < 1e-4,
                    "w_in[{k},{j}]: {} vs {fd}",
                    grads.w_in[k * input_dim + j]
                );
            }
            for j in 0..hidden {
                let mut plus = cell.clone();
                plus.w_rec.row_mut(k as u32)[j] += h;
                let mut minus = cell.clone();
                minus.w_rec.row_mut(k as u32)[j] -= h;
                let fd = (unroll_loss(&plus, &xs, &w) - unroll_loss(&minus, &xs, &w)) / (2.0 * h);
                assert!(rel(grads.w_rec[k * hidden + j], fd) < 1e-4);
            }
            let mut plus = cell.clone();
            plus.bias[k] += h;
            let mut minus = cell.clone();
            minus.bias[k] -= h;
            let fd = (unroll_loss(&plus, &xs, &w) - unroll_loss(&minus, &xs, &w)) / (2.0 * h);
            assert!(rel(grads.bias[k], fd) < 1e-4);
        }
        // input gradients at every step
        for t in 0..xs.len() {
            for j in 0..input_dim {
                let mut plus = xs.clone();
                plus[t][j] += h;
                let mut minus = xs.clone();
                minus[t][j] -= h;
                let fd = (unroll_loss(&cell, &plus, &w) - unroll_loss(&cell, &minus, &w)) / (2.0 * h);
                assert!(rel(dxs[t][j], fd) < 1e-4, "dx[{t},{j}]: {} vs {fd}", dxs[t][j]);
            }
        }
    }

    #[test]
    fn lstm_backward_matches_finite_differences() {
        check_cell_grads(CellKind::Lstm);
    }

    #[test]
    fn vanilla_backward_matches_finite_differences() {
        check_cell_grads(CellKind::Vanilla);
    }

    #[test]
    fn parameter_count_matches_table_sizes() {
        let cell = zero_cell(CellKind::Lstm, 6, 2);
        assert_eq!(cell.parameter_count(), 8 * 6 + 8 * 2 + 8);
        let vcell = zero_cell(CellKind::Vanilla, 6, 2);
        assert_eq!(vcell.parameter_count(), 2 * 6 + 2 * 2 + 2);
    }

    #[test]
    fn sgd_moves_parameters_and_rejects_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cell = RnnCell::init(CellKind::Lstm, 2, 2, &mut rng);
        let before = cell.clone();
        let mut grads = CellGrads::zeros(&cell);
        grads.bias[0] = 1.0;
        cell.apply_sgd(&grads, 0.1, 0.0).unwrap();
        assert!((cell.bias[0] - (before.bias[0] - 0.1)).abs() < 1e-12);
        grads.bias[1] = f64::NAN;
        assert!(cell.apply_sgd(&grads, 0.1, 0.0).is_err());
    }
}
