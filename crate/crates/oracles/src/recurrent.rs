//! Hand-rolled recurrence references: LSTM cell, bidirectional encoder, and
//! the attention-pooled visual recurrence, all as scalar loops.
//!
//! Weight layout matches the production convention: gates are computed as
//! `[x, h] . W + b` with `W` of shape `[(d_in + d_h) x 4 d_h]` stored
//! row-major, gate order `i, f, g, o`.

pub struct LstmWeights {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec_rowmajor(z: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    assert_eq!(z.len(), w.len());
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (zi, row) in z.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += zi * wij;
        }
    }
    out
}

/// One LSTM step. Returns the new `(h, c)`.
pub fn brute_lstm_step(x: &[f64], h: &[f64], c: &[f64], weights: &LstmWeights) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let mut z = x.to_vec();
    z.extend_from_slice(h);
    let mut gates = matvec_rowmajor(&z, &weights.w);
    for (g, b) in gates.iter_mut().zip(&weights.b) {
        *g += b;
    }
    let mut h_new = vec![0.0; d];
    let mut c_new = vec![0.0; d];
    for j in 0..d {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[d + j]);
        let g = gates[2 * d + j].tanh();
        let o = sigmoid(gates[3 * d + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// Unidirectional LSTM over a sequence from zero state; returns all h_t.
pub fn brute_lstm_forward(xs: &[Vec<f64>], weights: &LstmWeights, d_h: usize) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; d_h];
    let mut c = vec![0.0; d_h];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let (hn, cn) = brute_lstm_step(x, &h, &c, weights);
        h = hn;
        c = cn;
        out.push(h.clone());
    }
    out
}

/// Bidirectional LSTM; each output row is `[forward_t, backward_t]`.
pub fn brute_bilstm(xs: &[Vec<f64>], fwd: &LstmWeights, bwd: &LstmWeights, d_h: usize) -> Vec<Vec<f64>> {
    let forward = brute_lstm_forward(xs, fwd, d_h);
    let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let mut backward = brute_lstm_forward(&reversed, bwd, d_h);
    backward.reverse();
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| {
            let mut row = f;
            row.extend(b);
            row
        })
        .collect()
}

/// Scaled dot-product attention with learned query/key projections and
/// unprojected values. Returns `(pooled, weights)`.
pub fn brute_scaled_attention(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    w_q: &[Vec<f64>],
    w_k: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>) {
    assert!(!keys.is_empty());
    let q = matvec_rowmajor(query, w_q);
    let d_att = q.len() as f64;
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| {
            let kp = matvec_rowmajor(k, w_k);
            q.iter().zip(&kp).map(|(a, b)| a * b).sum::<f64>() / d_att.sqrt()
        })
        .collect();
    let weights = crate::losses::softmax(&scores);
    let d_val = values[0].len();
    let mut pooled = vec![0.0; d_val];
    for (wi, v) in weights.iter().zip(values) {
        for (p, vj) in pooled.iter_mut().zip(v) {
            *p += wi * vj;
        }
    }
    (pooled, weights)
}

/// Attention-pooled visual recurrence: at each step, pool the step's view
/// matrix with the previous state as query, then apply one LSTM step.
/// Returns `(states, pooled_inputs)`.
pub fn brute_visual_encoder(
    views_per_step: &[Vec<Vec<f64>>],
    weights: &LstmWeights,
    w_q: &[Vec<f64>],
    w_k: &[Vec<f64>],
    d_h: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut h = vec![0.0; d_h];
    let mut c = vec![0.0; d_h];
    let mut states = Vec::new();
    let mut pooled_inputs = Vec::new();
    for views in views_per_step {
        let (pooled, _) = brute_scaled_attention(&h, views, views, w_q, w_k);
        let (hn, cn) = brute_lstm_step(&pooled, &h, &c, weights);
        h = hn;
        c = cn;
        states.push(h.clone());
        pooled_inputs.push(pooled);
    }
    (states, pooled_inputs)
}
