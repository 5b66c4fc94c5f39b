//! Layer building blocks. A layer holds hyperparameters plus [`ParamId`]
//! handles; construction registers parameters in the model's [`VarStore`]
//! under a given name prefix (which is also the checkpoint key).

use crate::store::{ParamId, VarStore};
use crate::tape::{BnMode, NodeId, Tape};
use crate::Arr;
use ndarray::{Array1, Array2, Array4, Dimension};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::sync::RwLock;

/// Forward-pass mode. `Train` carries the RNG used by dropout masks.
pub enum Mode<'r> {
    Train(&'r mut ChaCha12Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub fn normal_init(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    mean: f64,
    std: f64,
) -> Arr {
    let dist = Normal::new(mean, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

pub fn uniform_init(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Fully connected layer; weight stored input-major as [in, out].
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = vs.add(
            format!("{name}.w"),
            uniform_init(rng, &[n_in, n_out], -bound, bound),
            true,
        );
        let b = vs.add(
            format!("{name}.b"),
            Arr::zeros(ndarray::IxDyn(&[n_out])),
            true,
        );
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_bias(y, b)
    }
}

/// Convolution, weight [OC, IC, K, K], DCGAN-style N(0, 0.02) init.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = vs.add(
            format!("{name}.w"),
            normal_init(rng, &[oc, ic, k, k], 0.0, 0.02),
            true,
        );
        let b = bias.then(|| {
            vs.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[oc])), true)
        });
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(self.w);
        let y = t.conv2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Transposed convolution, weight [IC, OC, K, K].
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = vs.add(
            format!("{name}.w"),
            normal_init(rng, &[ic, oc, k, k], 0.0, 0.02),
            true,
        );
        let b = bias.then(|| {
            vs.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[oc])), true)
        });
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(self.w);
        let y = t.conv_transpose2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Batch normalization with running statistics for eval mode.
/// The running stats live behind an `RwLock` so a trained model stays `Sync`;
/// only train-mode forwards take the write lock.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RwLock<(Array1<f64>, Array1<f64>)>,
    pub momentum: f64,
    pub eps: f64,
    name: String,
}

impl BatchNorm {
    pub fn new(vs: &mut VarStore, name: &str, c: usize, rng: &mut ChaCha12Rng) -> Self {
        let gamma = vs.add(
            format!("{name}.gamma"),
            normal_init(rng, &[c], 1.0, 0.02),
            true,
        );
        let beta = vs.add(format!("{name}.beta"), Arr::zeros(ndarray::IxDyn(&[c])), true);
        BatchNorm {
            gamma,
            beta,
            running: RwLock::new((Array1::zeros(c), Array1::ones(c))),
            momentum: 0.1,
            eps: 1e-5,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId, mode: &Mode) -> NodeId {
        let bn_mode = if mode.is_train() {
            BnMode::Train
        } else {
            BnMode::Eval
        };
        let gamma = t.param(self.gamma);
        let beta = t.param(self.beta);
        let guard = self.running.read().unwrap();
        let (y, stats) = t.batch_norm(x, gamma, beta, bn_mode, (&guard.0, &guard.1), self.eps);
        drop(guard);
        if let Some((mean, var)) = stats {
            let mut run = self.running.write().unwrap();
            let m = self.momentum;
            run.0 = &run.0 * (1.0 - m) + &mean * m;
            run.1 = &run.1 * (1.0 - m) + &var * m;
        }
        y
    }

    /// Running statistics under checkpoint keys `<name>.running_{mean,var}`.
    pub fn stats_entries(&self) -> Vec<(String, Arr)> {
        let run = self.running.read().unwrap();
        vec![
            (format!("{}.running_mean", self.name), run.0.clone().into_dyn()),
            (format!("{}.running_var", self.name), run.1.clone().into_dyn()),
        ]
    }

    pub fn load_stats(&self, state: &[(String, Arr)]) -> Result<(), String> {
        let mean = state
            .iter()
            .find(|(n, _)| n == &format!("{}.running_mean", self.name))
            .ok_or_else(|| format!("missing {}.running_mean", self.name))?;
        let var = state
            .iter()
            .find(|(n, _)| n == &format!("{}.running_var", self.name))
            .ok_or_else(|| format!("missing {}.running_var", self.name))?;
        let mut run = self.running.write().unwrap();
        run.0 = mean.1.clone().into_dimensionality().map_err(|e| e.to_string())?;
        run.1 = var.1.clone().into_dimensionality().map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Token embedding table [V, E].
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let table = vs.add(
            format!("{name}.table"),
            normal_init(rng, &[vocab, dim], 0.0, 0.1),
            true,
        );
        Embedding { table }
    }

    pub fn forward(&self, t: &mut Tape, tokens: &[usize]) -> NodeId {
        let table = t.param(self.table);
        t.gather(table, tokens)
    }
}

/// Inverted dropout; identity in eval mode.
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId, mode: &mut Mode) -> NodeId {
        match mode {
            Mode::Train(rng) if self.p > 0.0 => {
                let keep = 1.0 - self.p;
                let shape = t.value(x).raw_dim();
                let n = shape.size();
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = Arr::from_shape_vec(shape, mask).unwrap();
                t.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// Single LSTM cell; gates ordered [i, f, g, o], forget bias starts at 1.
pub struct LstmCell {
    pub w_ih: ParamId, // [E, 4H]
    pub w_hh: ParamId, // [H, 4H]
    pub b: ParamId,    // [4H]
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = vs.add(
            format!("{name}.w_ih"),
            uniform_init(rng, &[input, 4 * hidden], -bound, bound),
            true,
        );
        let w_hh = vs.add(
            format!("{name}.w_hh"),
            uniform_init(rng, &[hidden, 4 * hidden], -bound, bound),
            true,
        );
        let mut bias = Array1::<f64>::zeros(4 * hidden);
        bias.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        let b = vs.add(format!("{name}.b"), bias.into_dyn(), true);
        LstmCell {
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }

    /// One step: returns (h', c').
    pub fn step(
        &self,
        t: &mut Tape,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let hsz = self.hidden;
        let w_ih = t.param(self.w_ih);
        let w_hh = t.param(self.w_hh);
        let b = t.param(self.b);
        let xi = t.matmul(x, w_ih);
        let hh = t.matmul(h, w_hh);
        let s = t.add(xi, hh);
        let gates = t.add_bias(s, b);
        let i_raw = t.slice1(gates, 0, hsz);
        let f_raw = t.slice1(gates, hsz, 2 * hsz);
        let g_raw = t.slice1(gates, 2 * hsz, 3 * hsz);
        let o_raw = t.slice1(gates, 3 * hsz, 4 * hsz);
        let i = t.sigmoid(i_raw);
        let f = t.sigmoid(f_raw);
        let g = t.tanh(g_raw);
        let o = t.sigmoid(o_raw);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c_new = t.add(fc, ig);
        let c_act = t.tanh(c_new);
        let h_new = t.mul(o, c_act);
        (h_new, c_new)
    }

    pub fn zero_state(&self, t: &mut Tape, batch: usize) -> (NodeId, NodeId) {
        let h = t.constant(Array2::<f64>::zeros((batch, self.hidden)).into_dyn());
        let c = t.constant(Array2::<f64>::zeros((batch, self.hidden)).into_dyn());
        (h, c)
    }
}

/// Helper: image batch [N,C,H,W] constant node from an Array4.
pub fn image_node(t: &mut Tape, x: Array4<f64>) -> NodeId {
    t.constant(x.into_dyn())
}
