use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::{Binding, ParameterSet, Sgd, Tape, Tensor};
use crate::rng::{self, stream};

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Exponentially weighted moving average, seeded with the first entry.
pub fn predict_workload(history: &[f64], alpha: f64) -> Result<f64> {
    let Some((&first, rest)) = history.split_first() else {
        return Err(Error::InvalidArgument("workload history is empty".into()));
    };
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(rest.iter().fold(first, |acc, &h| alpha * h + (1.0 - alpha) * acc))
}

/// Single-layer Elman network mapping the last `window` workloads to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentPredictor {
    pub window: usize,
    pub hidden: usize,
    params: ParameterSet,
    scale: f64,
}

const WX: &str = "rnn.input";
const WH: &str = "rnn.recurrent";
const B: &str = "rnn.bias";
const WO: &str = "rnn.output";
const BO: &str = "rnn.output_bias";

impl RecurrentPredictor {
    pub fn new(window: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::rng_from(seed, &[stream::INIT, 0x5C4E]);
        let mut uniform = |rows: usize, cols: usize, limit: f64| {
            let data = (0..rows * cols).map(|_| r.random_range(-limit..=limit)).collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches")
        };
        let mut params = ParameterSet::new();
        let lim = 1.0 / (hidden as f64).sqrt();
        for (name, t) in [
            (WX, uniform(1, hidden, lim)),
            (WH, uniform(hidden, hidden, lim)),
            (B, Tensor::zeros(&[hidden])),
            (WO, uniform(hidden, 1, lim)),
            (BO, Tensor::zeros(&[1])),
        ] {
            params.insert(name, t).expect("distinct names");
        }
        Self {
            window: window.max(1),
            hidden,
            params,
            scale: 1.0,
        }
    }

    fn forward(&self, tape: &mut Tape, b: &mut Binding<'_>, windows: &[&[f64]]) -> Result<crate::numcore::Var> {
        let n = windows.len();
        let p = &self.params;
        let wx = b.bind(tape, WX, p.get(WX).expect("present"));
        let wh = b.bind(tape, WH, p.get(WH).expect("present"));
        let bias = b.bind(tape, B, p.get(B).expect("present"));
        let wo = b.bind(tape, WO, p.get(WO).expect("present"));
        let bo = b.bind(tape, BO, p.get(BO).expect("present"));
        let mut h = tape.constant(Tensor::zeros(&[n, self.hidden]));
        for t in 0..self.window {
            let col: Vec<f64> = windows.iter().map(|w| w[t] / self.scale).collect();
            let x = tape.constant(Tensor::new(vec![n, 1], col)?);
            let a = tape.matmul(x, wx)?;
            let r = tape.matmul(h, wh)?;
            let s = tape.add(a, r)?;
            let s = tape.add_bias(s, bias)?;
            h = tape.tanh(s)?;
        }
        let y = tape.matmul(h, wo)?;
        tape.add_bias(y, bo)
    }

    /// Full-batch SGD on every window of `history`; returns the final L1 loss.
    pub fn fit(&mut self, history: &[f64], epochs: usize, lr: f64) -> Result<f64> {
        if history.len() <= self.window {
            return Err(Error::InvalidArgument(format!(
                "need more than {} history entries to fit",
                self.window
            )));
        }
        self.scale = history.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let windows: Vec<&[f64]> = history.windows(self.window + 1).collect();
        let inputs: Vec<&[f64]> = windows.iter().map(|w| &w[..self.window]).collect();
        let targets: Vec<f64> = windows.iter().map(|w| w[self.window] / self.scale).collect();
        let target = Tensor::new(vec![targets.len(), 1], targets)?;
        let mut sgd = Sgd::new(lr, 0.0);
        let mut last = f64::NAN;
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let mut b = Binding::all();
            let y = self.forward(&mut tape, &mut b, &inputs)?;
            let t = tape.constant(target.clone());
            let loss = tape.l1_loss(y, t)?;
            last = tape.value(loss)?.item();
            let grads = b.gradients(&tape, &tape.backward(loss)?)?;
            sgd.step(&mut self.params, &grads)?;
        }
        Ok(last)
    }

    /// Predicts the entry after `history` from its last `window` values.
    pub fn predict(&self, history: &[f64]) -> Result<f64> {
        if history.len() < self.window {
            return Err(Error::InvalidArgument(format!(
                "need {} history entries, got {}",
                self.window,
                history.len()
            )));
        }
        let mut tape = Tape::new();
        let w = &history[history.len() - self.window..];
        let y = self.forward(&mut tape, &mut Binding::frozen(), &[w])?;
        Ok((tape.value(y)?.item() * self.scale).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewma_hand_values() {
        assert_eq!(predict_workload(&[4.0; 7], 0.5).unwrap(), 4.0);
        assert_eq!(predict_workload(&[0.0, 10.0], 0.5).unwrap(), 5.0);
        assert!(predict_workload(&[], 0.5).is_err());
        assert!(predict_workload(&[1.0], 1.5).is_err());
    }

    #[test]
    fn ewma_lags_a_ramp() {
        let ramp: Vec<f64> = (0..20).map(f64::from).collect();
        let p = predict_workload(&ramp, 0.5).unwrap();
        // closed form: sum_k a(1-a)^k h_{n-k} + (1-a)^{n-1} h_0
        let mut expect = 0.0;
        for k in 0..19 {
            expect += 0.5 * 0.5f64.powi(k) * ramp[19 - k as usize];
        }
        expect += 0.5f64.powi(19) * ramp[0];
        assert!((p - expect).abs() < 1e-12);
        assert!(p < 19.0);
    }

    #[test]
    fn recurrent_predictor_learns_a_constant() {
        let history = vec![6.0; 40];
        let mut rnn = RecurrentPredictor::new(4, 8, 1);
        let loss = rnn.fit(&history, 600, 0.05).unwrap();
        assert!(loss < 0.05, "{loss}");
        assert!((rnn.predict(&history).unwrap() - 6.0).abs() < 0.5);
    }

    #[test]
    fn recurrent_predictor_needs_history() {
        let mut rnn = RecurrentPredictor::new(4, 8, 1);
        assert!(rnn.fit(&[1.0; 4], 1, 0.1).is_err());
        assert!(rnn.predict(&[1.0; 3]).is_err());
    }
}
