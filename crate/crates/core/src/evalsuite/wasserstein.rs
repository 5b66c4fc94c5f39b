//! Critic-based Wasserstein distance estimation: train a critic with the
//! Wasserstein objective (gradient penalty for stability) to separate
//! validation-real from generated images, then report the score gap on
//! held-out test-real versus held-out generated samples. The `alignment`
//! variant scores (image, embedding) pairs instead, measuring how well
//! conditional information was assimilated.
//!
//! The gradient penalty differentiates the critic's input gradient with
//! respect to its weights. The input gradient of the LeakyReLU conv stack is
//! itself expressed on the tape (transposed convolutions against the same
//! weight nodes, activation masks as constants), so one reverse pass handles
//! the second-order term.

use crate::error::{Error, Result};
use cxrjust_nn::adam::Adam;
use cxrjust_nn::layers::{Conv2d, Linear};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::{NodeId, Tape};
use cxrjust_nn::VarStore;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Base channel width of the critic conv stack.
    pub channels: usize,
    /// Embedding projection width (alignment variant only).
    pub emb_proj: usize,
    /// Conditioning dim (alignment variant only).
    pub cond_dim: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_lambda: f64,
    pub runs: usize,
    pub seed: u64,
    /// Precondition on the generated-set size.
    pub min_generated: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            channels: 8,
            emb_proj: 16,
            cond_dim: 300,
            iters: 250,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            gp_lambda: 10.0,
            runs: 4,
            seed: 17,
            min_generated: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticEstimate {
    /// Mean critic gap (real minus generated) over runs; lower means the
    /// generated distribution is closer to real.
    pub value: f64,
    pub std: f64,
    pub runs: Vec<f64>,
    pub variant: String,
}

/// Critic: LeakyReLU conv stack (kernel 4, stride 2, no normalization) with
/// an optional conditioning branch joined at the 8x8 feature map.
pub struct TrainedCritic {
    vs: VarStore,
    convs: Vec<Conv2d>,
    join: Option<(Linear, Conv2d)>,
    fc: Linear,
    channels: usize,
    emb_proj: usize,
}

const ALPHA: f64 = 0.2;

impl TrainedCritic {
    fn new(cfg: &CriticConfig, conditional: bool, seed: u64) -> Self {
        let mut vs = VarStore::new();
        let mut rng = derive_rng(seed, "critic-init");
        let c = cfg.channels;
        let convs = vec![
            Conv2d::new(&mut vs, "w.c0", 1, c, 4, 2, 1, true, &mut rng),
            Conv2d::new(&mut vs, "w.c1", c, 2 * c, 4, 2, 1, true, &mut rng),
            Conv2d::new(&mut vs, "w.c2", 2 * c, 4 * c, 4, 2, 1, true, &mut rng),
        ];
        let join = conditional.then(|| {
            (
                Linear::new(&mut vs, "w.embed", cfg.cond_dim, cfg.emb_proj, &mut rng),
                Conv2d::new(
                    &mut vs,
                    "w.join",
                    4 * c + cfg.emb_proj,
                    4 * c,
                    4,
                    2,
                    1,
                    true,
                    &mut rng,
                ),
            )
        });
        // plain variant flattens at 8x8, conditional at 4x4
        let fc_in = if conditional { 4 * c * 4 * 4 } else { 4 * c * 8 * 8 };
        let fc = Linear::new(&mut vs, "w.fc", fc_in, 1, &mut rng);
        TrainedCritic {
            vs,
            convs,
            join,
            fc,
            channels: c,
            emb_proj: cfg.emb_proj,
        }
    }

    /// Critic forward; returns per-sample scores [N,1] plus the LeakyReLU
    /// masks and pre-join feature shape needed for the input-gradient
    /// composition.
    fn forward_full(
        &self,
        t: &mut Tape,
        img: NodeId,
        cond: Option<NodeId>,
    ) -> (NodeId, Vec<cxrjust_nn::Arr>) {
        let n = t.value(img).shape()[0];
        let mut masks = Vec::new();
        let mut h = img;
        for cv in &self.convs {
            h = cv.forward(t, h);
            let mask = t
                .value(h)
                .mapv(|v| if v > 0.0 { 1.0 } else { ALPHA });
            masks.push(mask);
            h = t.leaky_relu(h, ALPHA);
        }
        if let Some((embed, join)) = &self.join {
            let cond = cond.expect("conditional critic needs a conditioning node");
            let e = embed.forward(t, cond);
            let e = t.leaky_relu(e, ALPHA);
            let e = t.reshape(e, &[n, self.emb_proj, 1, 1]);
            let e_tiled = t.tile_spatial(e, 8, 8);
            h = t.concat1(h, e_tiled);
            h = join.forward(t, h);
            let mask = t
                .value(h)
                .mapv(|v| if v > 0.0 { 1.0 } else { ALPHA });
            masks.push(mask);
            h = t.leaky_relu(h, ALPHA);
        }
        let flat_len = t.value(h).len() / n;
        let h = t.reshape(h, &[n, flat_len]);
        let score = self.fc.forward(t, h);
        (score, masks)
    }

    /// Critic input gradient d f / d img, expressed on the tape so it stays
    /// differentiable with respect to the critic weights (activation masks
    /// enter as constants).
    fn input_grad_on(
        &self,
        t: &mut Tape,
        masks: &[cxrjust_nn::Arr],
        n: usize,
    ) -> NodeId {
        let c = self.channels;
        let fc_w = t.param(self.fc.w); // [D, 1]
        let fc_wt = t.transpose2(fc_w); // [1, D]
        let ones = t.constant(Array2::<f64>::from_elem((n, 1), 1.0).into_dyn());
        let mut g = t.matmul(ones, fc_wt); // [N, D]
        if let Some((_, join)) = &self.join {
            let g4 = t.reshape(g, &[n, 4 * c, 4, 4]);
            let gm = t.mul_const(g4, masks[3].clone());
            let jw = t.param(join.w);
            let back = t.conv_transpose2d(gm, jw, 2, 1); // [N, 4c+proj, 8, 8]
            g = t.slice1(back, 0, 4 * c);
        } else {
            g = t.reshape(g, &[n, 4 * c, 8, 8]);
        }
        for i in (0..self.convs.len()).rev() {
            let gm = t.mul_const(g, masks[i].clone());
            let w = t.param(self.convs[i].w);
            g = t.conv_transpose2d(gm, w, 2, 1);
        }
        g
    }

    /// Mean score on an image batch (the sign convention is "higher means
    /// more real").
    pub fn score(&self, images: &Array3<f64>, cond: Option<&Array2<f64>>) -> f64 {
        let mut t = Tape::new(&self.vs);
        let img = t.constant(to_nchw(images));
        let cond = cond.map(|c| t.constant(c.clone().into_dyn()));
        let (s, _) = self.forward_full(&mut t, img, cond);
        let m = t.mean_all(s);
        t.scalar(m)
    }
}

fn to_nchw(images: &Array3<f64>) -> cxrjust_nn::Arr {
    let (n, h, w) = images.dim();
    images
        .clone()
        .into_shape_with_order((n, 1, h, w))
        .unwrap()
        .into_dyn()
}

fn sample_batch(
    images: &Array3<f64>,
    cond: Option<&Array2<f64>>,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> (Array3<f64>, Option<Array2<f64>>) {
    let n = images.dim().0;
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let (_, h, w) = images.dim();
    let mut out = Array3::zeros((batch, h, w));
    for (i, &j) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&images.index_axis(ndarray::Axis(0), j));
    }
    let c = cond.map(|cm| {
        let mut out = Array2::zeros((batch, cm.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&cm.row(j));
        }
        out
    });
    (out, c)
}

struct CriticSets<'a> {
    real_train: (&'a Array3<f64>, Option<&'a Array2<f64>>),
    real_eval: (&'a Array3<f64>, Option<&'a Array2<f64>>),
    gen_all: (&'a Array3<f64>, Option<&'a Array2<f64>>),
}

/// Train a critic to separate `real_train` from `gen_train` with the
/// Wasserstein objective plus gradient penalty.
pub fn train_critic(
    cfg: &CriticConfig,
    real_train: (&Array3<f64>, Option<&Array2<f64>>),
    gen_train: (&Array3<f64>, Option<&Array2<f64>>),
    conditional: bool,
    run_seed: u64,
    lr: f64,
) -> Result<TrainedCritic> {
    let mut critic = TrainedCritic::new(cfg, conditional, run_seed);
    let mut rng = derive_rng(run_seed, "critic-train");
    let mut opt = Adam::new(critic.vs.trainable_ids(), lr, cfg.beta1, cfg.beta2);
    let (h, w) = (real_train.0.dim().1, real_train.0.dim().2);

    for it in 0..cfg.iters {
        let (rb, rc) = sample_batch(real_train.0, real_train.1, cfg.batch_size, &mut rng);
        let (fb, fc) = sample_batch(gen_train.0, gen_train.1, cfg.batch_size, &mut rng);
        let n = cfg.batch_size;
        let mut t = Tape::new(&critic.vs);
        let real = t.constant(to_nchw(&rb));
        let fake = t.constant(to_nchw(&fb));
        let rcond = rc.clone().map(|c| t.constant(c.into_dyn()));
        let fcond = fc.map(|c| t.constant(c.into_dyn()));
        let (f_real, _) = critic.forward_full(&mut t, real, rcond);
        let (f_fake, _) = critic.forward_full(&mut t, fake, fcond);
        let m_real = t.mean_all(f_real);
        let m_fake = t.mean_all(f_fake);
        let gap_loss = t.sub(m_fake, m_real);

        // gradient penalty at interpolates; the penalty acts on the image
        // input, with the real pairs' conditioning held fixed
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut interp = Array4::zeros((n, 1, h, w));
        for i in 0..n {
            let e = eps[i];
            let xi = &rb.index_axis(ndarray::Axis(0), i) * e
                + &fb.index_axis(ndarray::Axis(0), i) * (1.0 - e);
            interp.slice_mut(ndarray::s![i, 0, .., ..]).assign(&xi);
        }
        let xi = t.constant(interp.into_dyn());
        let icond = if conditional {
            rc.map(|c| t.constant(c.into_dyn()))
        } else {
            None
        };
        let (_, masks) = critic.forward_full(&mut t, xi, icond);
        let gx = critic.input_grad_on(&mut t, &masks, n);
        let g2 = t.mul(gx, gx);
        let per = t.sum_per_sample(g2);
        let norm = t.sqrt_eps(per, 1e-12);
        let nm1 = t.affine(norm, 1.0, -1.0);
        let sq = t.mul(nm1, nm1);
        let gp = t.mean_all(sq);
        let gp_scaled = t.affine(gp, cfg.gp_lambda, 0.0);
        let loss = t.add(gap_loss, gp_scaled);
        let lv = t.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "critic loss {lv} at iteration {it}"
            )));
        }
        let grads = t.backward(loss);
        opt.step(&mut critic.vs, &grads);
    }
    Ok(critic)
}

/// Deterministic even/odd split of a set into (train, eval) halves.
fn half_split(
    imgs: &Array3<f64>,
    cond: Option<&Array2<f64>>,
) -> (
    (Array3<f64>, Option<Array2<f64>>),
    (Array3<f64>, Option<Array2<f64>>),
) {
    let (n, h, w) = imgs.dim();
    let part = |parity: usize| {
        let idx: Vec<usize> = (0..n).filter(|i| i % 2 == parity).collect();
        let mut out = Array3::zeros((idx.len(), h, w));
        for (k, &i) in idx.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), k)
                .assign(&imgs.index_axis(ndarray::Axis(0), i));
        }
        let c = cond.map(|cm| {
            let mut out = Array2::zeros((idx.len(), cm.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(k).assign(&cm.row(i));
            }
            out
        });
        (out, c)
    };
    (part(0), part(1))
}

fn train_and_estimate_once(
    cfg: &CriticConfig,
    sets: &CriticSets,
    conditional: bool,
    run_seed: u64,
    lr: f64,
) -> Result<f64> {
    let ((gen_train, gen_train_cond), (gen_eval, gen_eval_cond)) =
        half_split(sets.gen_all.0, sets.gen_all.1);
    let critic = train_critic(
        cfg,
        sets.real_train,
        (&gen_train, gen_train_cond.as_ref()),
        conditional,
        run_seed,
        lr,
    )?;
    let real_score = critic.score(sets.real_eval.0, sets.real_eval.1);
    let gen_score = critic.score(&gen_eval, gen_eval_cond.as_ref());
    Ok(real_score - gen_score)
}

/// Signed critic gap between two evaluation sets under an already-trained
/// critic: mean f(a) - mean f(b).
pub fn critic_gap(
    critic: &TrainedCritic,
    a: (&Array3<f64>, Option<&Array2<f64>>),
    b: (&Array3<f64>, Option<&Array2<f64>>),
) -> f64 {
    critic.score(a.0, a.1) - critic.score(b.0, b.1)
}

/// Wasserstein estimate between generated images and real images. `val` and
/// `test` must be disjoint real sets; the generated set is split in half for
/// training and evaluation. Critic divergence triggers one retry at half the
/// learning rate.
pub fn wasserstein_estimate(
    generated: &Array3<f64>,
    val: &Array3<f64>,
    test: &Array3<f64>,
    cfg: &CriticConfig,
) -> Result<CriticEstimate> {
    if generated.dim().0 < cfg.min_generated {
        return Err(Error::Eval(format!(
            "need at least {} generated samples, got {}",
            cfg.min_generated,
            generated.dim().0
        )));
    }
    let sets = CriticSets {
        real_train: (val, None),
        real_eval: (test, None),
        gen_all: (generated, None),
    };
    run_estimates(cfg, &sets, false, "wasserstein")
}

/// Alignment estimate over (image, conditioning-embedding) pairs.
#[allow(clippy::too_many_arguments)]
pub fn alignment_estimate(
    generated: &Array3<f64>,
    generated_cond: &Array2<f64>,
    val: &Array3<f64>,
    val_cond: &Array2<f64>,
    test: &Array3<f64>,
    test_cond: &Array2<f64>,
    cfg: &CriticConfig,
) -> Result<CriticEstimate> {
    if generated.dim().0 < cfg.min_generated {
        return Err(Error::Eval(format!(
            "need at least {} generated samples, got {}",
            cfg.min_generated,
            generated.dim().0
        )));
    }
    let sets = CriticSets {
        real_train: (val, Some(val_cond)),
        real_eval: (test, Some(test_cond)),
        gen_all: (generated, Some(generated_cond)),
    };
    run_estimates(cfg, &sets, true, "alignment")
}

fn run_estimates(
    cfg: &CriticConfig,
    sets: &CriticSets,
    conditional: bool,
    variant: &str,
) -> Result<CriticEstimate> {
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let run_seed = cfg.seed.wrapping_add(1000 * run as u64 + 1);
        let est = match train_and_estimate_once(cfg, sets, conditional, run_seed, cfg.lr) {
            Ok(v) => v,
            Err(Error::TrainingDiverged(_)) => {
                train_and_estimate_once(cfg, sets, conditional, run_seed, cfg.lr / 2.0)?
            }
            Err(e) => return Err(e),
        };
        runs.push(est);
    }
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let std = (runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (runs.len() as f64 - 1.0).max(1.0))
    .sqrt();
    Ok(CriticEstimate {
        value: mean,
        std,
        runs,
        variant: variant.to_string(),
    })
}
