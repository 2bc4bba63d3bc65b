//! Forward and backward passes for the Siamese sub-network:
//! masked batch norm → LSTM → dropout → masked batch norm → LSTM (final state).
//!
//! Activations are time-major: row `t * batch + b` holds step `t` of sequence
//! `b`. A row is valid while `t < lengths[b]`; invalid rows never reach the
//! normalization statistics and the recurrent state is carried through them
//! unchanged.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::activation::{sigmoid_in_place, tanh, tanh_in_place};

pub(crate) const BN_EPSILON: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `(inputs, 4·units)`, gate blocks ordered input, forget, cell, output.
    pub kernel: Array2<f32>,
    /// `(units, 4·units)`.
    pub recurrent: Array2<f32>,
    /// `4·units`.
    pub bias: Array1<f32>,
}

/// The full parameter set. Also used as the gradient and optimizer-moment
/// container, in which case the running statistics are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub bn1: BatchNorm,
    pub lstm1: Lstm,
    pub bn2: BatchNorm,
    pub lstm2: Lstm,
}

/// A batch of equally shaped sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(seq_len · batch, features)`, time-major.
    pub x: Array2<f32>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    fn valid(&self) -> Vec<bool> {
        let b = self.size();
        (0..self.seq_len * b)
            .map(|r| r / b < self.lengths[r % b])
            .collect()
    }
}

impl BatchNorm {
    fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    fn zeros(features: usize) -> Self {
        BatchNorm {
            gamma: Array1::zeros(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::zeros(features),
        }
    }

    fn infer(&self, x: &Array2<f32>, valid: &[bool]) -> Array2<f32> {
        let scale: Vec<f32> = self
            .running_var
            .iter()
            .zip(&self.gamma)
            .map(|(v, g)| g / (v + BN_EPSILON).sqrt())
            .collect();
        let mut y = Array2::zeros(x.raw_dim());
        for ((xr, mut yr), &ok) in x.rows().into_iter().zip(y.rows_mut()).zip(valid) {
            if !ok {
                continue;
            }
            for f in 0..xr.len() {
                yr[f] = (xr[f] - self.running_mean[f]) * scale[f] + self.beta[f];
            }
        }
        y
    }

    /// Normalizes with statistics over valid rows only and folds them into the
    /// running estimates.
    fn train(&mut self, x: &Array2<f32>, valid: &[bool], momentum: f32) -> (Array2<f32>, BnCache) {
        let features = x.ncols();
        let count = valid.iter().filter(|&&v| v).count().max(1);
        let mut mean = vec![0.0f64; features];
        for (xr, _) in x.rows().into_iter().zip(valid).filter(|(_, &v)| v) {
            for f in 0..features {
                mean[f] += f64::from(xr[f]);
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0f64; features];
        for (xr, _) in x.rows().into_iter().zip(valid).filter(|(_, &v)| v) {
            for f in 0..features {
                let d = f64::from(xr[f]) - mean[f];
                var[f] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);

        let inv_std: Array1<f32> = var
            .iter()
            .map(|v| (1.0 / (v + f64::from(BN_EPSILON)).sqrt()) as f32)
            .collect();
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut y = Array2::zeros(x.raw_dim());
        for (((xr, mut hr), mut yr), &ok) in x
            .rows()
            .into_iter()
            .zip(xhat.rows_mut())
            .zip(y.rows_mut())
            .zip(valid)
        {
            if !ok {
                continue;
            }
            for f in 0..features {
                let h = (xr[f] - mean[f] as f32) * inv_std[f];
                hr[f] = h;
                yr[f] = self.gamma[f] * h + self.beta[f];
            }
        }

        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for f in 0..features {
            self.running_mean[f] =
                momentum * self.running_mean[f] + (1.0 - momentum) * mean[f] as f32;
            self.running_var[f] =
                momentum * self.running_var[f] + (1.0 - momentum) * (var[f] * unbias) as f32;
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                count,
            },
        )
    }

    fn backward(
        &self,
        dy: &Array2<f32>,
        cache: &BnCache,
        valid: &[bool],
        grad: &mut BatchNorm,
    ) -> Array2<f32> {
        let features = dy.ncols();
        let mut dgamma = vec![0.0f64; features];
        let mut dbeta = vec![0.0f64; features];
        for ((dr, hr), _) in dy
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(valid)
            .filter(|(_, &v)| v)
        {
            for f in 0..features {
                dgamma[f] += f64::from(dr[f]) * f64::from(hr[f]);
                dbeta[f] += f64::from(dr[f]);
            }
        }
        let n = cache.count as f32;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((dr, hr), mut xr), &ok) in dy
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(dx.rows_mut())
            .zip(valid)
        {
            if !ok {
                continue;
            }
            for f in 0..features {
                let k = self.gamma[f] * cache.inv_std[f] / n;
                xr[f] = k * (n * dr[f] - dbeta[f] as f32 - hr[f] * dgamma[f] as f32);
            }
        }
        for f in 0..features {
            grad.gamma[f] += dgamma[f] as f32;
            grad.beta[f] += dbeta[f] as f32;
        }
        dx
    }
}

struct BnCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
    count: usize,
}

impl Lstm {
    fn new<R: Rng>(inputs: usize, units: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + 4 * units) as f32).sqrt();
        let uniform = Uniform::new_inclusive(-limit, limit);
        let kernel = Array2::from_shape_fn((inputs, 4 * units), |_| uniform.sample(rng));
        let mut bias = Array1::zeros(4 * units);
        bias.slice_mut(s![units..2 * units]).fill(1.0);
        Lstm {
            kernel,
            recurrent: orthogonal_rows(units, 4 * units, rng),
            bias,
        }
    }

    fn zeros(inputs: usize, units: usize) -> Self {
        Lstm {
            kernel: Array2::zeros((inputs, 4 * units)),
            recurrent: Array2::zeros((units, 4 * units)),
            bias: Array1::zeros(4 * units),
        }
    }

    pub fn units(&self) -> usize {
        self.recurrent.nrows()
    }

    /// Runs the recurrence. Returns the per-step outputs (zero on invalid
    /// rows), the final hidden state of each sequence, and, when `keep` is
    /// set, what the backward pass needs.
    fn forward(
        &self,
        x: ArrayView2<f32>,
        lengths: &[usize],
        seq_len: usize,
        keep: bool,
    ) -> (Array2<f32>, Array2<f32>, Option<LstmCache>) {
        let batch = lengths.len();
        let units = self.units();
        let mut projected = x.dot(&self.kernel);
        projected += &self.bias;
        let mut outputs = Array2::zeros((seq_len * batch, units));
        let mut h = Array2::<f32>::zeros((batch, units));
        let mut c = Array2::<f32>::zeros((batch, units));
        let mut cache = keep.then(|| LstmCache {
            gates: Array2::zeros((seq_len * batch, 4 * units)),
            cells: Array2::zeros((seq_len * batch, units)),
            h_prev: Array2::zeros((seq_len * batch, units)),
            c_prev: Array2::zeros((seq_len * batch, units)),
        });

        for t in 0..seq_len {
            if lengths.iter().all(|&l| t >= l) {
                break;
            }
            let rows = t * batch..(t + 1) * batch;
            let mut z = projected.slice(s![rows.clone(), ..]).to_owned();
            general_mat_mul(1.0, &h, &self.recurrent, 1.0, &mut z);
            if let Some(cache) = cache.as_mut() {
                cache.h_prev.slice_mut(s![rows.clone(), ..]).assign(&h);
                cache.c_prev.slice_mut(s![rows.clone(), ..]).assign(&c);
            }
            for b in 0..batch {
                if t >= lengths[b] {
                    continue;
                }
                let zr = z.row_mut(b).into_slice().expect("contiguous");
                sigmoid_in_place(&mut zr[..2 * units]);
                tanh_in_place(&mut zr[2 * units..3 * units]);
                sigmoid_in_place(&mut zr[3 * units..]);
                let (gi, rest) = zr.split_at(units);
                let (gf, rest) = rest.split_at(units);
                let (gg, go) = rest.split_at(units);
                let cr = c.row_mut(b).into_slice().expect("contiguous");
                let hr = h.row_mut(b).into_slice().expect("contiguous");
                for ((((c, h), &i), &f), (&g, &o)) in
                    cr.iter_mut().zip(hr).zip(gi).zip(gf).zip(gg.iter().zip(go))
                {
                    *c = f * *c + i * g;
                    *h = o * tanh(*c);
                }
                outputs.row_mut(t * batch + b).assign(&h.row(b));
            }
            if let Some(cache) = cache.as_mut() {
                cache.gates.slice_mut(s![rows.clone(), ..]).assign(&z);
                cache.cells.slice_mut(s![rows, ..]).assign(&c);
            }
        }
        (outputs, h, cache)
    }

    /// Backpropagates through time. `d_outputs` is the gradient of the
    /// per-step outputs, `d_final` that of the final hidden state. Returns the
    /// gradient with respect to the inputs and accumulates into `grad`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        x: ArrayView2<f32>,
        lengths: &[usize],
        seq_len: usize,
        cache: &LstmCache,
        d_outputs: Option<&Array2<f32>>,
        d_final: Option<&Array2<f32>>,
        grad: &mut Lstm,
    ) -> Array2<f32> {
        let batch = lengths.len();
        let units = self.units();
        let mut dh = d_final
            .cloned()
            .unwrap_or_else(|| Array2::zeros((batch, units)));
        let mut dc = Array2::<f32>::zeros((batch, units));
        let mut dz_all = Array2::<f32>::zeros((seq_len * batch, 4 * units));
        let recurrent_t = self.recurrent.t();

        for t in (0..seq_len).rev() {
            if lengths.iter().all(|&l| t >= l) {
                continue;
            }
            let base = t * batch;
            if let Some(d_out) = d_outputs {
                dh += &d_out.slice(s![base..base + batch, ..]);
            }
            let mut dz = Array2::<f32>::zeros((batch, 4 * units));
            for b in 0..batch {
                if t >= lengths[b] {
                    continue;
                }
                let row = base + b;
                let gates = cache.gates.row(row);
                let gates = gates.as_slice().expect("contiguous");
                let (gi, rest) = gates.split_at(units);
                let (gf, rest) = rest.split_at(units);
                let (gg, go) = rest.split_at(units);
                let cell = cache.cells.row(row);
                let cell = cell.as_slice().expect("contiguous");
                let c_prev = cache.c_prev.row(row);
                let c_prev = c_prev.as_slice().expect("contiguous");
                let dhr = dh.row(b);
                let dhr = dhr.as_slice().expect("contiguous");
                let dcr = dc.row_mut(b).into_slice().expect("contiguous");
                let dzr = dz.row_mut(b).into_slice().expect("contiguous");
                let (dzi, rest) = dzr.split_at_mut(units);
                let (dzf, rest) = rest.split_at_mut(units);
                let (dzg, dzo) = rest.split_at_mut(units);
                for k in 0..units {
                    let (i, f, g, o) = (gi[k], gf[k], gg[k], go[k]);
                    let tc = tanh(cell[k]);
                    let d_o = dhr[k] * tc;
                    let d_c = dcr[k] + dhr[k] * o * (1.0 - tc * tc);
                    dzi[k] = d_c * g * i * (1.0 - i);
                    dzf[k] = d_c * c_prev[k] * f * (1.0 - f);
                    dzg[k] = d_c * i * (1.0 - g * g);
                    dzo[k] = d_o * o * (1.0 - o);
                    dcr[k] = d_c * f;
                }
            }
            let dh_prev = dz.dot(&recurrent_t);
            for b in 0..batch {
                // Inactive rows pass their state gradient straight through.
                if t < lengths[b] {
                    dh.row_mut(b).assign(&dh_prev.row(b));
                }
            }
            dz_all.slice_mut(s![base..base + batch, ..]).assign(&dz);
        }
        // Rows of inactive steps have zero gate gradients and add nothing.
        general_mat_mul(1.0, &cache.h_prev.t(), &dz_all, 1.0, &mut grad.recurrent);
        general_mat_mul(1.0, &x.t(), &dz_all, 1.0, &mut grad.kernel);
        grad.bias += &dz_all.sum_axis(Axis(0));
        dz_all.dot(&self.kernel.t())
    }
}

struct LstmCache {
    /// Activated gates per row.
    gates: Array2<f32>,
    /// Cell state after each step.
    cells: Array2<f32>,
    h_prev: Array2<f32>,
    c_prev: Array2<f32>,
}

/// `(rows, cols)` matrix with orthonormal rows (`rows ≤ cols`).
fn orthogonal_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f32> {
    let mut m: Array2<f64> = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
    for i in 0..rows {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m.mapv(|v| v as f32)
}

/// Everything the backward pass of one training forward needs.
pub struct ForwardCache {
    valid: Vec<bool>,
    bn1: BnCache,
    n1: Array2<f32>,
    lstm1: LstmCache,
    dropout: Option<Array2<f32>>,
    bn2: BnCache,
    n2: Array2<f32>,
    lstm2: LstmCache,
}

impl Network {
    pub fn new<R: Rng>(features: usize, units: [usize; 2], rng: &mut R) -> Self {
        Network {
            bn1: BatchNorm::new(features),
            lstm1: Lstm::new(features, units[0], rng),
            bn2: BatchNorm::new(units[0]),
            lstm2: Lstm::new(units[0], units[1], rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let features = self.lstm1.kernel.nrows();
        let (u1, u2) = (self.lstm1.units(), self.lstm2.units());
        Network {
            bn1: BatchNorm::zeros(features),
            lstm1: Lstm::zeros(features, u1),
            bn2: BatchNorm::zeros(u1),
            lstm2: Lstm::zeros(u1, u2),
        }
    }

    /// Trainable tensors as flat slices, in a fixed order.
    pub fn trainable(&self) -> [&[f32]; 10] {
        [
            self.bn1.gamma.as_slice().expect("contiguous"),
            self.bn1.beta.as_slice().expect("contiguous"),
            self.lstm1.kernel.as_slice().expect("contiguous"),
            self.lstm1.recurrent.as_slice().expect("contiguous"),
            self.lstm1.bias.as_slice().expect("contiguous"),
            self.bn2.gamma.as_slice().expect("contiguous"),
            self.bn2.beta.as_slice().expect("contiguous"),
            self.lstm2.kernel.as_slice().expect("contiguous"),
            self.lstm2.recurrent.as_slice().expect("contiguous"),
            self.lstm2.bias.as_slice().expect("contiguous"),
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut [f32]; 10] {
        [
            self.bn1.gamma.as_slice_mut().expect("contiguous"),
            self.bn1.beta.as_slice_mut().expect("contiguous"),
            self.lstm1.kernel.as_slice_mut().expect("contiguous"),
            self.lstm1.recurrent.as_slice_mut().expect("contiguous"),
            self.lstm1.bias.as_slice_mut().expect("contiguous"),
            self.bn2.gamma.as_slice_mut().expect("contiguous"),
            self.bn2.beta.as_slice_mut().expect("contiguous"),
            self.lstm2.kernel.as_slice_mut().expect("contiguous"),
            self.lstm2.recurrent.as_slice_mut().expect("contiguous"),
            self.lstm2.bias.as_slice_mut().expect("contiguous"),
        ]
    }

    /// Inference: running normalization statistics, no dropout.
    pub fn infer(&self, batch: &Batch) -> Array2<f32> {
        let valid = batch.valid();
        let n1 = self.bn1.infer(&batch.x, &valid);
        let (seq1, _, _) = self
            .lstm1
            .forward(n1.view(), &batch.lengths, batch.seq_len, false);
        let n2 = self.bn2.infer(&seq1, &valid);
        let (_, last, _) = self
            .lstm2
            .forward(n2.view(), &batch.lengths, batch.seq_len, false);
        last
    }

    /// Training forward pass: batch statistics (which also update the running
    /// estimates) and inverted dropout at `dropout_rate`.
    pub fn forward_train<R: Rng>(
        &mut self,
        batch: &Batch,
        dropout_rate: f32,
        momentum: f32,
        rng: &mut R,
    ) -> (Array2<f32>, ForwardCache) {
        let valid = batch.valid();
        let (n1, bn1) = self.bn1.train(&batch.x, &valid, momentum);
        let (mut seq1, _, lstm1) =
            self.lstm1
                .forward(n1.view(), &batch.lengths, batch.seq_len, true);
        let dropout = (dropout_rate > 0.0).then(|| {
            let keep = 1.0 - dropout_rate;
            let mask = Array2::from_shape_fn(seq1.raw_dim(), |_| {
                if rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            seq1 *= &mask;
            mask
        });
        let (n2, bn2) = self.bn2.train(&seq1, &valid, momentum);
        let (_, last, lstm2) = self
            .lstm2
            .forward(n2.view(), &batch.lengths, batch.seq_len, true);
        let cache = ForwardCache {
            valid,
            bn1,
            n1,
            lstm1: lstm1.expect("kept"),
            dropout,
            bn2,
            n2,
            lstm2: lstm2.expect("kept"),
        };
        (last, cache)
    }

    /// Gradients of all trainable parameters given the gradient of the
    /// embeddings returned by [`Network::forward_train`].
    pub fn backward(
        &self,
        batch: &Batch,
        cache: &ForwardCache,
        d_embedding: &Array2<f32>,
    ) -> Network {
        let mut grad = self.zeros_like();
        let (lengths, seq_len) = (&batch.lengths, batch.seq_len);
        let d_n2 = self.lstm2.backward(
            cache.n2.view(),
            lengths,
            seq_len,
            &cache.lstm2,
            None,
            Some(d_embedding),
            &mut grad.lstm2,
        );
        let mut d_seq1 = self
            .bn2
            .backward(&d_n2, &cache.bn2, &cache.valid, &mut grad.bn2);
        if let Some(mask) = &cache.dropout {
            d_seq1 *= mask;
        }
        let d_n1 = self.lstm1.backward(
            cache.n1.view(),
            lengths,
            seq_len,
            &cache.lstm1,
            Some(&d_seq1),
            None,
            &mut grad.lstm1,
        );
        self.bn1
            .backward(&d_n1, &cache.bn1, &cache.valid, &mut grad.bn1);
        grad
    }
}
