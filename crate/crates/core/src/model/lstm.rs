//! Stacked unidirectional LSTM with explicit backpropagation through time.
//!
//! Activations are stored time-major: row `t * batch + b` holds step `t` of
//! sequence `b`. Gate order inside the `4H` blocks is `i, f, g, o`.

use crate::numerics::{Op, ParamSet, Real, Tensor2};

pub fn w_ih_name(layer: usize) -> String {
    format!("lstm.{layer}.w_ih")
}

pub fn w_hh_name(layer: usize) -> String {
    format!("lstm.{layer}.w_hh")
}

pub fn bias_name(layer: usize) -> String {
    format!("lstm.{layer}.bias")
}

/// Forward activations of one layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    pub input: Tensor2<F>,
    /// Post-activation gates `[i f g o]`, `(T*B) × 4H`.
    pub gates: Tensor2<F>,
    pub cell: Tensor2<F>,
    pub cell_tanh: Tensor2<F>,
    pub hidden: Tensor2<F>,
}

#[derive(Debug, Clone)]
pub struct LstmTrace<F> {
    pub batch: usize,
    pub steps: usize,
    pub layers: Vec<LayerCache<F>>,
}

impl<F: Real> LstmTrace<F> {
    pub fn top(&self) -> &Tensor2<F> {
        &self.layers.last().expect("at least one layer").hidden
    }

    /// Hidden states of `layer` for sequence `b`, `T × H`.
    pub fn sequence_hidden(&self, layer: usize, b: usize, len: usize) -> Tensor2<F> {
        let rows: Vec<usize> = (0..len).map(|t| t * self.batch + b).collect();
        self.layers[layer].hidden.gather_rows(&rows)
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn rows_slice<F: Real>(m: &Tensor2<F>, start: usize, end: usize) -> Tensor2<F> {
    let c = m.cols();
    Tensor2::from_vec(end - start, c, m.as_slice()[start * c..end * c].to_vec()).expect("row range")
}

/// Runs every layer over `inputs` (`(steps*batch) × d`, time-major) from a
/// zero initial state.
pub fn lstm_forward<F: Real>(
    params: &ParamSet<F>,
    layers: usize,
    inputs: &Tensor2<F>,
    batch: usize,
) -> LstmTrace<F> {
    assert!(
        batch > 0 && inputs.rows() % batch == 0,
        "ragged time-major input"
    );
    let steps = inputs.rows() / batch;
    let mut caches = Vec::with_capacity(layers);
    let mut input = inputs.clone();
    for l in 0..layers {
        let cache = layer_forward(params, l, input, batch, steps);
        input = cache.hidden.clone();
        caches.push(cache);
    }
    LstmTrace {
        batch,
        steps,
        layers: caches,
    }
}

fn layer_forward<F: Real>(
    params: &ParamSet<F>,
    l: usize,
    input: Tensor2<F>,
    batch: usize,
    steps: usize,
) -> LayerCache<F> {
    let w_ih = params.get(&w_ih_name(l));
    let w_hh = params.get(&w_hh_name(l));
    let bias = params.get(&bias_name(l));
    let h4 = w_ih.rows();
    let h = h4 / 4;
    assert_eq!(w_ih.cols(), input.cols(), "layer {l} input width");

    let mut pre = Tensor2::matmul(&input, Op::N, w_ih, Op::T);
    for r in 0..pre.rows() {
        for (p, &b) in pre.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *p += b;
        }
    }

    let n = steps * batch;
    let mut gates = Tensor2::zeros(n, h4);
    let mut cell = Tensor2::zeros(n, h);
    let mut cell_tanh = Tensor2::zeros(n, h);
    let mut hidden = Tensor2::zeros(n, h);
    let mut h_prev = Tensor2::zeros(batch, h);
    let mut c_prev = Tensor2::zeros(batch, h);
    for t in 0..steps {
        let mut g = rows_slice(&pre, t * batch, (t + 1) * batch);
        if t > 0 {
            g.gemm(F::one(), &h_prev, Op::N, w_hh, Op::T, F::one());
        }
        for b in 0..batch {
            let r = t * batch + b;
            let gr = g.row(b);
            for j in 0..h {
                let i_g = sigmoid(gr[j]);
                let f_g = sigmoid(gr[h + j]);
                let g_g = gr[2 * h + j].tanh();
                let o_g = sigmoid(gr[3 * h + j]);
                let c = f_g * c_prev[(b, j)] + i_g * g_g;
                let ct = c.tanh();
                let hv = o_g * ct;
                let gates_row = gates.row_mut(r);
                gates_row[j] = i_g;
                gates_row[h + j] = f_g;
                gates_row[2 * h + j] = g_g;
                gates_row[3 * h + j] = o_g;
                cell[(r, j)] = c;
                cell_tanh[(r, j)] = ct;
                hidden[(r, j)] = hv;
                h_prev[(b, j)] = hv;
                c_prev[(b, j)] = c;
            }
        }
    }
    LayerCache {
        input,
        gates,
        cell,
        cell_tanh,
        hidden,
    }
}

/// Backpropagates `d_top` (gradient w.r.t. the top layer's hidden states,
/// same layout as the trace) through all layers, accumulating into `grads`.
pub fn lstm_backward<F: Real>(
    params: &ParamSet<F>,
    trace: &LstmTrace<F>,
    d_top: Tensor2<F>,
    grads: &mut ParamSet<F>,
) {
    let batch = trace.batch;
    let steps = trace.steps;
    let mut d_ext = d_top;
    for l in (0..trace.layers.len()).rev() {
        let cache = &trace.layers[l];
        let w_hh = params.get(&w_hh_name(l));
        let h = w_hh.cols();
        let n = steps * batch;
        let mut dpre = Tensor2::zeros(n, 4 * h);
        let mut dh_next = Tensor2::<F>::zeros(batch, h);
        let mut dc_next = Tensor2::<F>::zeros(batch, h);
        let one = F::one();
        for t in (0..steps).rev() {
            let mut dpre_t = Tensor2::zeros(batch, 4 * h);
            for b in 0..batch {
                let r = t * batch + b;
                let gr = cache.gates.row(r);
                for j in 0..h {
                    let i_g = gr[j];
                    let f_g = gr[h + j];
                    let g_g = gr[2 * h + j];
                    let o_g = gr[3 * h + j];
                    let ct = cache.cell_tanh[(r, j)];
                    let c_prev = if t > 0 {
                        cache.cell[(r - batch, j)]
                    } else {
                        F::zero()
                    };
                    let dh = d_ext[(r, j)] + dh_next[(b, j)];
                    let d_o = dh * ct;
                    let dc = dh * o_g * (one - ct * ct) + dc_next[(b, j)];
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev;
                    dc_next[(b, j)] = dc * f_g;
                    let row = dpre_t.row_mut(b);
                    row[j] = d_i * i_g * (one - i_g);
                    row[h + j] = d_f * f_g * (one - f_g);
                    row[2 * h + j] = d_g * (one - g_g * g_g);
                    row[3 * h + j] = d_o * o_g * (one - o_g);
                }
            }
            dh_next.gemm(one, &dpre_t, Op::N, w_hh, Op::N, F::zero());
            let c = 4 * h;
            dpre.as_mut_slice()[t * batch * c..(t + 1) * batch * c]
                .copy_from_slice(dpre_t.as_slice());
        }

        grads
            .get_mut(&w_ih_name(l))
            .gemm(one, &dpre, Op::T, &cache.input, Op::N, one);
        if steps > 1 {
            let later = rows_slice(&dpre, batch, n);
            let earlier = rows_slice(&cache.hidden, 0, n - batch);
            grads
                .get_mut(&w_hh_name(l))
                .gemm(one, &later, Op::T, &earlier, Op::N, one);
        }
        let db = dpre.col_sums();
        for (g, d) in grads
            .get_mut(&bias_name(l))
            .as_mut_slice()
            .iter_mut()
            .zip(db)
        {
            *g += d;
        }
        if l > 0 {
            d_ext = Tensor2::matmul(&dpre, Op::N, params.get(&w_ih_name(l)), Op::N);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(wi: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push(w_ih_name(0), Tensor2::from_vec(4, 1, wi.to_vec()).unwrap());
        p.push(w_hh_name(0), Tensor2::from_vec(4, 1, wh.to_vec()).unwrap());
        p.push(bias_name(0), Tensor2::from_vec(1, 4, b.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_weights_zero_states() {
        let p = scalar_params([0.0; 4], [0.0; 4], [0.0; 4]);
        let trace = lstm_forward(&p, 1, &Tensor2::zeros(5, 1), 1);
        assert!(trace.top().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_recurrence_matches_hand_arithmetic() {
        let wi = [0.5, -0.3, 0.8, 0.2];
        let wh = [0.1, 0.4, -0.6, 0.9];
        let b = [0.05, 1.0, -0.1, 0.0];
        let p = scalar_params(wi, wh, b);
        let xs = [0.7, -1.3];
        let trace = lstm_forward(&p, 1, &Tensor2::from_vec(2, 1, xs.to_vec()).unwrap(), 1);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for (t, &x) in xs.iter().enumerate() {
            let i = sig(wi[0] * x + wh[0] * h + b[0]);
            let f = sig(wi[1] * x + wh[1] * h + b[1]);
            let g = (wi[2] * x + wh[2] * h + b[2]).tanh();
            let o = sig(wi[3] * x + wh[3] * h + b[3]);
            c = f * c + i * g;
            h = o * c.tanh();
            assert!((trace.top()[(t, 0)] - h).abs() < 1e-14);
            assert!((trace.layers[0].cell[(t, 0)] - c).abs() < 1e-14);
        }
    }
}
