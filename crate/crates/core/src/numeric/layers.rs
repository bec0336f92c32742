//! Parameterized layers built on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Array, NormStats, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// One forward pass: the tape, read-only parameters, the mode flag and the
/// run's random stream. Buffer updates (batch-norm running statistics) are
/// collected here and applied by the caller once the pass succeeds.
pub struct Session<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Array)>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore, training: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            training,
            rng,
            buffer_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.tape.constant(value)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        dropout(&mut self.tape, x, rate, self.training, self.rng)
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Array)> {
        std::mem::take(&mut self.buffer_updates)
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Array)>) {
    for (id, value) in updates {
        store.get_mut(id).value = value;
    }
}

/// Inverted dropout. Evaluation mode and `rate == 0` are the identity.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, &Array::new(&shape, mask)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// LSTM cell with gate order (input, forget, cell candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let w_input = store.add_uniform(format!("{name}.w_input"), &[input_dim, 4 * hidden], input_dim, rng)?;
        let w_hidden = store.add_uniform(format!("{name}.w_hidden"), &[hidden, 4 * hidden], hidden, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[4 * hidden])?;
        Ok(Self {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden,
        })
    }

    pub fn zero_state(&self, s: &mut Session<'_>, rows: usize) -> (Var, Var) {
        let h = s.constant(Array::zeros(&[rows, self.hidden]));
        let c = s.constant(Array::zeros(&[rows, self.hidden]));
        (h, c)
    }

    /// Input contribution `x W_x + b`, reusable across steps when the input
    /// is constant.
    pub fn input_gates(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.w_input);
        let b = s.param(self.bias);
        let xg = s.tape.matmul(x, w)?;
        s.tape.add_bias(xg, b)
    }

    pub fn step_from_gates(&self, s: &mut Session<'_>, input_gates: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = s.tape.shape(h).to_vec();
        if hs.len() != 2 || hs[1] != self.hidden || s.tape.shape(c) != hs.as_slice() {
            return Err(Error::dim("lstm_cell hidden state", &hs, &[self.hidden]));
        }
        let w = s.param(self.w_hidden);
        let hg = s.tape.matmul(h, w)?;
        let gates = s.tape.add(input_gates, hg)?;
        let n = self.hidden;
        let i = s.tape.slice(gates, 1, 0, n)?;
        let f = s.tape.slice(gates, 1, n, n)?;
        let g = s.tape.slice(gates, 1, 2 * n, n)?;
        let o = s.tape.slice(gates, 1, 3 * n, n)?;
        let i = s.tape.sigmoid(i);
        let f = s.tape.sigmoid(f);
        let g = s.tape.tanh(g);
        let o = s.tape.sigmoid(o);
        let fc = s.tape.mul(f, c)?;
        let ig = s.tape.mul(i, g)?;
        let c_next = s.tape.add(fc, ig)?;
        let tc = s.tape.tanh(c_next);
        let h_next = s.tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    pub fn step(&self, s: &mut Session<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xs = s.tape.shape(x);
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(Error::dim("lstm_cell input", xs, &[self.input_dim]));
        }
        let xg = self.input_gates(s, x)?;
        self.step_from_gates(s, xg, h, c)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Argument(format!("conv kernel size must be odd, got {kernel_size}")));
        }
        let kernel = store.add_uniform(
            format!("{name}.kernel"),
            &[out_channels, in_channels, kernel_size, kernel_size],
            in_channels * kernel_size * kernel_size,
            rng,
        )?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels])?;
        Ok(Self {
            kernel,
            bias,
            padding: kernel_size / 2,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let k = s.param(self.kernel);
        let b = s.param(self.bias);
        s.tape.conv2d(x, k, Some(b), self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Array::full(&[dim], 1.0), true)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[dim])?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Batch normalization over rows with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, momentum: f64) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Array::full(&[dim], 1.0), true)?,
            bias: store.add_zeros(format!("{name}.bias"), &[dim])?,
            running_mean: store.add(format!("{name}.running_mean"), Array::zeros(&[dim]), false)?,
            running_var: store.add(format!("{name}.running_var"), Array::full(&[dim], 1.0), false)?,
            momentum,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, valid: &[bool]) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        if !s.training {
            let mean = s.params.value(self.running_mean).data();
            let var = s.params.value(self.running_var).data();
            let (y, _) = s.tape.batch_norm(x, g, b, valid, NormStats::Fixed { mean, var }, NORM_EPS)?;
            return Ok(y);
        }
        let (y, stats) = s.tape.batch_norm(x, g, b, valid, NormStats::Batch, NORM_EPS)?;
        let count = valid.iter().filter(|&&v| v).count();
        if let (Some((mean, var)), true) = (stats, count > 0) {
            let m = self.momentum;
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let rm = s.params.value(self.running_mean);
            let rv = s.params.value(self.running_var);
            let new_mean: Vec<f64> = rm.data().iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                .collect();
            s.buffer_updates.push((self.running_mean, Array::from_vec(new_mean)));
            s.buffer_updates.push((self.running_var, Array::from_vec(new_var)));
        }
        Ok(y)
    }
}
