//! Small neural building blocks composed from tape primitives, so gradients
//! flow through everything here.

use crate::params::Binder;
use crate::tensor::{Scalar, Tensor};

/// `x @ W + b` with weights looked up under `prefix`.
pub fn linear<'t, F: Scalar>(binder: &Binder<'t, F>, prefix: &str, x: Tensor<'t, F>) -> Tensor<'t, F> {
    let w = binder.get(&format!("{prefix}/w"));
    let b = binder.get(&format!("{prefix}/b"));
    x.matmul(w).add(b)
}

/// Single feed-forward layer with ReLU activation: `relu(x @ W + b)`.
pub fn ff_relu<'t, F: Scalar>(binder: &Binder<'t, F>, prefix: &str, x: Tensor<'t, F>) -> Tensor<'t, F> {
    linear(binder, prefix, x).relu()
}

/// Two-layer head: ReLU hidden layer followed by a linear output layer.
/// Expects parameters under `{prefix}/hidden` and `{prefix}/out`.
pub fn mlp<'t, F: Scalar>(binder: &Binder<'t, F>, prefix: &str, x: Tensor<'t, F>) -> Tensor<'t, F> {
    let h = ff_relu(binder, &format!("{prefix}/hidden"), x);
    linear(binder, &format!("{prefix}/out"), h)
}

/// One LSTM step. Gate order in the packed weight matrices is
/// input, forget, candidate, output.
///
/// Shapes: `x` is `[1, din]`, `h_prev`/`c_prev` are `[1, dh]`; weights are
/// `{prefix}/w_ih [din, 4dh]`, `{prefix}/w_hh [dh, 4dh]`, `{prefix}/b [4dh]`.
pub fn lstm_cell<'t, F: Scalar>(
    binder: &Binder<'t, F>,
    prefix: &str,
    x: Tensor<'t, F>,
    h_prev: Tensor<'t, F>,
    c_prev: Tensor<'t, F>,
) -> (Tensor<'t, F>, Tensor<'t, F>) {
    let w_ih = binder.get(&format!("{prefix}/w_ih"));
    let w_hh = binder.get(&format!("{prefix}/w_hh"));
    let b = binder.get(&format!("{prefix}/b"));
    let dh = w_hh.shape()[0];

    let gates = x.matmul(w_ih).add(h_prev.matmul(w_hh)).add(b);
    let i = gates.slice_last(0, dh).sigmoid();
    let f = gates.slice_last(dh, dh).sigmoid();
    let g = gates.slice_last(2 * dh, dh).tanh();
    let o = gates.slice_last(3 * dh, dh).sigmoid();

    let c = f.mul(c_prev).add(i.mul(g));
    let h = o.mul(c.tanh());
    (h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Parameters;
    use crate::rng;
    use crate::tensor::Tape;
    use rand::Rng;

    fn zero_lstm(din: usize, dh: usize) -> Parameters<f64> {
        let mut p = Parameters::new();
        p.insert("cell/w_ih", &[din, 4 * dh], vec![0.0; din * 4 * dh]);
        p.insert("cell/w_hh", &[dh, 4 * dh], vec![0.0; dh * 4 * dh]);
        p.insert("cell/b", &[4 * dh], vec![0.0; 4 * dh]);
        p
    }

    #[test]
    fn zero_weight_cell_outputs_zero_hidden() {
        let params = zero_lstm(3, 2);
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &params);
        let x = tape.leaf(vec![0.7, -1.3, 2.0], &[1, 3]);
        let h0 = tape.leaf(vec![0.4, -0.2], &[1, 2]);
        let c0 = tape.leaf(vec![0.0, 0.0], &[1, 2]);
        let (h, c) = lstm_cell(&binder, "cell", x, h0, c0);
        assert!(h.to_vec().iter().all(|&v| v == 0.0));
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_cell_state() {
        // Forget-gate bias large positive, input-gate bias large negative:
        // c' ~= c_prev regardless of input.
        let mut params = zero_lstm(2, 2);
        {
            let b = &mut params.get_mut("cell/b").data;
            b[0] = -50.0; // input gate ~ 0
            b[1] = -50.0;
            b[2] = 50.0; // forget gate ~ 1
            b[3] = 50.0;
        }
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &params);
        let x = tape.leaf(vec![0.3, -0.9], &[1, 2]);
        let h0 = tape.leaf(vec![0.1, 0.2], &[1, 2]);
        let c0 = tape.leaf(vec![0.8, -0.5], &[1, 2]);
        let (_h, c) = lstm_cell(&binder, "cell", x, h0, c0);
        let cv = c.to_vec();
        assert!((cv[0] - 0.8).abs() < 1e-9 && (cv[1] - -0.5).abs() < 1e-9);
    }

    /// Scalar-by-scalar reference LSTM, independent of the tape path.
    #[allow(clippy::too_many_arguments)]
    fn lstm_reference(
        w_ih: &[f64],
        w_hh: &[f64],
        b: &[f64],
        din: usize,
        dh: usize,
        x: &[f64],
        h0: &[f64],
        c0: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut gates = vec![0.0; 4 * dh];
        for j in 0..4 * dh {
            let mut s = b[j];
            for k in 0..din {
                s += x[k] * w_ih[k * 4 * dh + j];
            }
            for k in 0..dh {
                s += h0[k] * w_hh[k * 4 * dh + j];
            }
            gates[j] = s;
        }
        let mut h = vec![0.0; dh];
        let mut c = vec![0.0; dh];
        for u in 0..dh {
            let i = sigma(gates[u]);
            let f = sigma(gates[dh + u]);
            let g = gates[2 * dh + u].tanh();
            let o = sigma(gates[3 * dh + u]);
            c[u] = f * c0[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        (h, c)
    }

    #[test]
    fn random_cell_matches_scalar_reference() {
        let mut r = rng::substream(11, "lstm-test");
        let (din, dh) = (3, 4);
        let w_ih: Vec<f64> = (0..din * 4 * dh).map(|_| r.gen_range(-0.5..0.5)).collect();
        let w_hh: Vec<f64> = (0..dh * 4 * dh).map(|_| r.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..4 * dh).map(|_| r.gen_range(-0.5..0.5)).collect();
        let x: Vec<f64> = (0..din).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..dh).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c0: Vec<f64> = (0..dh).map(|_| r.gen_range(-1.0..1.0)).collect();

        let mut params: Parameters<f64> = Parameters::new();
        params.insert("cell/w_ih", &[din, 4 * dh], w_ih.clone());
        params.insert("cell/w_hh", &[dh, 4 * dh], w_hh.clone());
        params.insert("cell/b", &[4 * dh], b.clone());

        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &params);
        let xt = tape.leaf(x.clone(), &[1, din]);
        let ht = tape.leaf(h0.clone(), &[1, dh]);
        let ct = tape.leaf(c0.clone(), &[1, dh]);
        let (h, c) = lstm_cell(&binder, "cell", xt, ht, ct);

        let (h_ref, c_ref) = lstm_reference(&w_ih, &w_hh, &b, din, dh, &x, &h0, &c0);
        for (a, b) in h.to_vec().iter().zip(h_ref.iter()) {
            assert!((a - b).abs() < 1e-12, "h: {a} vs {b}");
        }
        for (a, b) in c.to_vec().iter().zip(c_ref.iter()) {
            assert!((a - b).abs() < 1e-12, "c: {a} vs {b}");
        }
    }
}
