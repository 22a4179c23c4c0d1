//! LSTM cell and bidirectional sequence encoder.
//!
//! The cell is the standard four-gate formulation: input, forget and output
//! gates are sigmoid affines, the candidate is a tanh affine,
//! c_t = f ⊙ c_{t-1} + i ⊙ g and h_t = o ⊙ tanh(c_t). The bidirectional
//! encoder runs one cell left-to-right and an independently parameterized
//! cell right-to-left, concatenating the two states per token.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Weights for one gate: x·wx + h·wh + b.
pub struct GateParams {
    pub wx: Tensor, // d_in × d_h
    pub wh: Tensor, // d_h × d_h
    pub b: Tensor,  // d_h
}

impl GateParams {
    fn init(d_in: usize, d_h: usize, bias: f64, rng: &mut ChaCha8Rng) -> GateParams {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        GateParams {
            wx: Tensor::param(&[d_in, d_h], draw(d_in * d_h)).expect("consistent shape"),
            wh: Tensor::param(&[d_h, d_h], draw(d_h * d_h)).expect("consistent shape"),
            b: Tensor::param(&[d_h], vec![bias; d_h]).expect("consistent shape"),
        }
    }
}

/// Parameters of a unidirectional LSTM cell. All four gates are present and
/// independently parameterized; the forget-gate bias starts at 1.0.
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub cell_gate: GateParams,
}

impl LstmParams {
    pub fn init(d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        LstmParams {
            input_dim: d_in,
            hidden: d_h,
            input_gate: GateParams::init(d_in, d_h, 0.0, rng),
            forget_gate: GateParams::init(d_in, d_h, 1.0, rng),
            output_gate: GateParams::init(d_in, d_h, 0.0, rng),
            cell_gate: GateParams::init(d_in, d_h, 0.0, rng),
        }
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (gate, p) in [
            ("input", &self.input_gate),
            ("forget", &self.forget_gate),
            ("output", &self.output_gate),
            ("cell", &self.cell_gate),
        ] {
            out.push((format!("{prefix}.{gate}.wx"), p.wx.clone()));
            out.push((format!("{prefix}.{gate}.wh"), p.wh.clone()));
            out.push((format!("{prefix}.{gate}.b"), p.b.clone()));
        }
    }
}

/// One LSTM transition. `x_t` is a d_in vector; states are d_h vectors.
pub fn lstm_step(
    tape: &Tape,
    params: &LstmParams,
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (d_in, d_h) = (params.input_dim, params.hidden);
    if x_t.shape() != vec![d_in] || h_prev.shape() != vec![d_h] || c_prev.shape() != vec![d_h] {
        return Err(Error::shape(
            "lstm_step",
            format!(
                "expected x[{}], h[{}], c[{}]; got {:?}, {:?}, {:?}",
                d_in,
                d_h,
                d_h,
                x_t.shape(),
                h_prev.shape(),
                c_prev.shape()
            ),
        ));
    }
    let x_row = tape.reshape(x_t, &[1, d_in])?;
    let h_row = tape.reshape(h_prev, &[1, d_h])?;
    let affine = |gate: &GateParams| -> Result<Tensor> {
        let xw = tape.matmul(&x_row, &gate.wx)?;
        let hw = tape.matmul(&h_row, &gate.wh)?;
        let pre = tape.add(&tape.add(&xw, &hw)?, &tape.reshape(&gate.b, &[1, d_h])?)?;
        tape.reshape(&pre, &[d_h])
    };
    let i = tape.sigmoid(&affine(&params.input_gate)?)?;
    let f = tape.sigmoid(&affine(&params.forget_gate)?)?;
    let o = tape.sigmoid(&affine(&params.output_gate)?)?;
    let g = tape.tanh(&affine(&params.cell_gate)?)?;
    let c_t = tape.add(&tape.mul(&f, c_prev)?, &tape.mul(&i, &g)?)?;
    let h_t = tape.mul(&o, &tape.tanh(&c_t)?)?;
    Ok((h_t, c_t))
}

/// Bidirectional encoder: per-token output is [forward state; backward state],
/// so output width is 2·hidden.
pub struct BiLstmEncoder {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub hidden: usize,
}

impl BiLstmEncoder {
    pub fn init(d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> BiLstmEncoder {
        BiLstmEncoder {
            fwd: LstmParams::init(d_in, d_h, rng),
            bwd: LstmParams::init(d_in, d_h, rng),
            hidden: d_h,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fwd.collect(&format!("{prefix}.fwd"), out);
        self.bwd.collect(&format!("{prefix}.bwd"), out);
    }
}

fn run_direction(tape: &Tape, params: &LstmParams, x: &Tensor, reversed: bool) -> Result<Vec<Tensor>> {
    let n = x.dim(0);
    let mut h = Tensor::zeros(&[params.hidden]);
    let mut c = Tensor::zeros(&[params.hidden]);
    let mut states = vec![None; n];
    let order: Vec<usize> = if reversed { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let x_t = tape.row(x, t)?;
        let (h_t, c_t) = lstm_step(tape, params, &x_t, &h, &c)?;
        states[t] = Some(h_t.clone());
        h = h_t;
        c = c_t;
    }
    Ok(states.into_iter().map(|s| s.expect("state filled")).collect())
}

/// Encode an n×d_in sequence into the n×2d_h hidden-state matrix, with zero
/// initial states at both ends.
pub fn encode_sequence(tape: &Tape, encoder: &BiLstmEncoder, x: &Tensor) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 2 {
        return Err(Error::shape("encode_sequence", format!("expected a matrix, got {:?}", sh)));
    }
    if sh[0] == 0 {
        return Err(Error::EmptySequence("encode_sequence"));
    }
    let forward = run_direction(tape, &encoder.fwd, x, false)?;
    let backward = run_direction(tape, &encoder.bwd, x, true)?;
    let rows: Vec<Tensor> = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| tape.concat(f, b, 0))
        .collect::<Result<_>>()?;
    tape.stack_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::SeedableRng;

    fn zero_lstm(d_in: usize, d_h: usize) -> LstmParams {
        let zero_gate = |bias: f64| GateParams {
            wx: Tensor::param(&[d_in, d_h], vec![0.0; d_in * d_h]).unwrap(),
            wh: Tensor::param(&[d_h, d_h], vec![0.0; d_h * d_h]).unwrap(),
            b: Tensor::param(&[d_h], vec![bias; d_h]).unwrap(),
        };
        LstmParams {
            input_dim: d_in,
            hidden: d_h,
            input_gate: zero_gate(0.0),
            forget_gate: zero_gate(0.0),
            output_gate: zero_gate(0.0),
            cell_gate: zero_gate(0.0),
        }
    }

    fn sigma(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let tape = Tape::new();
        let params = zero_lstm(3, 2);
        let x = Tensor::from_values(&[3], vec![0.7, -0.3, 2.0]).unwrap();
        let h0 = Tensor::zeros(&[2]);
        let c0 = Tensor::zeros(&[2]);
        let (h, c) = lstm_step(&tape, &params, &x, &h0, &c0).unwrap();
        assert_eq!(h.values(), vec![0.0, 0.0]);
        assert_eq!(c.values(), vec![0.0, 0.0]);
    }

    #[test]
    fn forget_bias_gate_algebra() {
        // Scalar cell, all weights zero except forget bias. With c_prev = 1
        // and zero input, c_t = sigmoid(b_f) * 1.
        let tape = Tape::new();
        let params = zero_lstm(1, 1);
        params.forget_gate.b.set_values(&[0.9]).unwrap();
        let x = Tensor::zeros(&[1]);
        let h0 = Tensor::zeros(&[1]);
        let c1 = Tensor::from_values(&[1], vec![1.0]).unwrap();
        let (_, c) = lstm_step(&tape, &params, &x, &h0, &c1).unwrap();
        assert!((c.item() - sigma(0.9)).abs() < 1e-15);
    }

    #[test]
    fn scalar_cell_matches_hand_oracle() {
        // d = 1, every weight 0.5, biases 0, x = 1, zero states. All gate
        // preactivations are 0.5, so:
        //   i = f = o = sigmoid(0.5), g = tanh(0.5)
        //   c = sigmoid(0.5) * tanh(0.5)
        //   h = sigmoid(0.5) * tanh(c)
        let tape = Tape::new();
        let params = zero_lstm(1, 1);
        for gate in [&params.input_gate, &params.forget_gate, &params.output_gate, &params.cell_gate] {
            gate.wx.set_values(&[0.5]).unwrap();
            gate.wh.set_values(&[0.5]).unwrap();
        }
        let x = Tensor::from_values(&[1], vec![1.0]).unwrap();
        let h0 = Tensor::zeros(&[1]);
        let c0 = Tensor::zeros(&[1]);
        let (h, c) = lstm_step(&tape, &params, &x, &h0, &c0).unwrap();
        let expected_c = sigma(0.5) * 0.5f64.tanh();
        let expected_h = sigma(0.5) * expected_c.tanh();
        assert!((c.item() - expected_c).abs() < 1e-15);
        assert!((h.item() - expected_h).abs() < 1e-15);
    }

    #[test]
    fn single_token_sequence_concats_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = BiLstmEncoder::init(3, 2, &mut rng);
        let tape = Tape::new();
        let x = Tensor::from_values(&[1, 3], vec![0.2, -0.5, 1.0]).unwrap();
        let h = encode_sequence(&tape, &enc, &x).unwrap();
        assert_eq!(h.shape(), vec![1, 4]);
        let x0 = tape.row(&x, 0).unwrap();
        let zero = Tensor::zeros(&[2]);
        let (hf, _) = lstm_step(&tape, &enc.fwd, &x0, &zero, &zero).unwrap();
        let (hb, _) = lstm_step(&tape, &enc.bwd, &x0, &zero, &zero).unwrap();
        let mut expected = hf.values();
        expected.extend(hb.values());
        assert_eq!(h.values(), expected);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = BiLstmEncoder::init(3, 2, &mut rng);
        let tape = Tape::new();
        let x = Tensor::zeros(&[0, 3]);
        assert!(matches!(encode_sequence(&tape, &enc, &x), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn reversing_input_swaps_direction_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = BiLstmEncoder::init(2, 3, &mut rng);
        // Same parameters with directions exchanged.
        let swapped = BiLstmEncoder {
            fwd: LstmParams {
                input_dim: enc.bwd.input_dim,
                hidden: enc.bwd.hidden,
                input_gate: GateParams { wx: enc.bwd.input_gate.wx.clone(), wh: enc.bwd.input_gate.wh.clone(), b: enc.bwd.input_gate.b.clone() },
                forget_gate: GateParams { wx: enc.bwd.forget_gate.wx.clone(), wh: enc.bwd.forget_gate.wh.clone(), b: enc.bwd.forget_gate.b.clone() },
                output_gate: GateParams { wx: enc.bwd.output_gate.wx.clone(), wh: enc.bwd.output_gate.wh.clone(), b: enc.bwd.output_gate.b.clone() },
                cell_gate: GateParams { wx: enc.bwd.cell_gate.wx.clone(), wh: enc.bwd.cell_gate.wh.clone(), b: enc.bwd.cell_gate.b.clone() },
            },
            bwd: LstmParams {
                input_dim: enc.fwd.input_dim,
                hidden: enc.fwd.hidden,
                input_gate: GateParams { wx: enc.fwd.input_gate.wx.clone(), wh: enc.fwd.input_gate.wh.clone(), b: enc.fwd.input_gate.b.clone() },
                forget_gate: GateParams { wx: enc.fwd.forget_gate.wx.clone(), wh: enc.fwd.forget_gate.wh.clone(), b: enc.fwd.forget_gate.b.clone() },
                output_gate: GateParams { wx: enc.fwd.output_gate.wx.clone(), wh: enc.fwd.output_gate.wh.clone(), b: enc.fwd.output_gate.b.clone() },
                cell_gate: GateParams { wx: enc.fwd.cell_gate.wx.clone(), wh: enc.fwd.cell_gate.wh.clone(), b: enc.fwd.cell_gate.b.clone() },
            },
            hidden: enc.hidden,
        };
        let n = 4;
        let values: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let reversed: Vec<f64> = (0..n).rev().flat_map(|t| values[t * 2..(t + 1) * 2].to_vec()).collect();
        let tape = Tape::new();
        let x = Tensor::from_values(&[n, 2], values).unwrap();
        let xr = Tensor::from_values(&[n, 2], reversed).unwrap();
        let h = encode_sequence(&tape, &enc, &x).unwrap().values();
        let hr = encode_sequence(&tape, &swapped, &xr).unwrap().values();
        let d = 3;
        for t in 0..n {
            let rt = n - 1 - t;
            // forward half at t matches swapped encoder's backward half at rt
            for j in 0..d {
                assert!((h[t * 2 * d + j] - hr[rt * 2 * d + d + j]).abs() < 1e-15);
                assert!((h[t * 2 * d + d + j] - hr[rt * 2 * d + j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn five_token_sequence_matches_manual_unrolling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = BiLstmEncoder::init(3, 2, &mut rng);
        let n = 5;
        use rand::Rng;
        let values: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let x = Tensor::from_values(&[n, 3], values.clone()).unwrap();
        let h = encode_sequence(&tape, &enc, &x).unwrap();

        // Unroll step by step through the public cell API.
        let mut fwd_states = Vec::new();
        let mut hf = Tensor::zeros(&[2]);
        let mut cf = Tensor::zeros(&[2]);
        for t in 0..n {
            let x_t = Tensor::from_values(&[3], values[t * 3..(t + 1) * 3].to_vec()).unwrap();
            let (h_t, c_t) = lstm_step(&tape, &enc.fwd, &x_t, &hf, &cf).unwrap();
            fwd_states.push(h_t.values());
            hf = h_t;
            cf = c_t;
        }
        let mut bwd_states = vec![Vec::new(); n];
        let mut hb = Tensor::zeros(&[2]);
        let mut cb = Tensor::zeros(&[2]);
        for t in (0..n).rev() {
            let x_t = Tensor::from_values(&[3], values[t * 3..(t + 1) * 3].to_vec()).unwrap();
            let (h_t, c_t) = lstm_step(&tape, &enc.bwd, &x_t, &hb, &cb).unwrap();
            bwd_states[t] = h_t.values();
            hb = h_t;
            cb = c_t;
        }
        let hv = h.values();
        for t in 0..n {
            for j in 0..2 {
                assert!((hv[t * 4 + j] - fwd_states[t][j]).abs() < 1e-15);
                assert!((hv[t * 4 + 2 + j] - bwd_states[t][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_half_is_causal_backward_half_anticausal() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let enc = BiLstmEncoder::init(2, 2, &mut rng);
        let n = 4;
        use rand::Rng;
        let mut values: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::inference();
        let x = Tensor::from_values(&[n, 2], values.clone()).unwrap();
        let before = encode_sequence(&tape, &enc, &x).unwrap().values();
        // Perturb token 3; forward halves at t <= 2 must not move, and the
        // backward halves at t >= 3... the backward half at t < 3 may move.
        values[3 * 2] += 0.5;
        let x2 = Tensor::from_values(&[n, 2], values).unwrap();
        let after = encode_sequence(&tape, &enc, &x2).unwrap().values();
        for t in 0..3 {
            for j in 0..2 {
                assert_eq!(before[t * 4 + j], after[t * 4 + j], "forward half changed at t={}", t);
            }
        }
        // The perturbed token's own forward state must change.
        assert!((0..2).any(|j| before[3 * 4 + j] != after[3 * 4 + j]));
    }

    #[test]
    fn hidden_values_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let enc = BiLstmEncoder::init(3, 4, &mut rng);
        use rand::Rng;
        let n = 12;
        let values: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::inference();
        let x = Tensor::from_values(&[n, 3], values).unwrap();
        let h = encode_sequence(&tape, &enc, &x).unwrap();
        assert!(h.values().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn whole_encoder_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let enc = BiLstmEncoder::init(2, 2, &mut rng);
        let x = {
            use rand::Rng;
            let values: Vec<f64> = (0..3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::param(&[3, 2], values).unwrap()
        };
        let mut params = Vec::new();
        enc.collect("enc", &mut params);
        let mut refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        refs.push(&x);
        let (err, count) = finite_difference_check(&refs, 1e-4, Some(4), &mut rng, |tape| {
            let h = encode_sequence(tape, &enc, &x)?;
            tape.sum(&tape.tanh(&h)?)
        })
        .unwrap();
        assert!(count >= 20);
        assert!(err < 1e-3, "encoder gradient error {}", err);
    }
}
