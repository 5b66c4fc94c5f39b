//! Two-stage conditional text-to-image GAN. Stage I maps a representation
//! (sentence embedding ++ noise) to a 64x64 image through a projected
//! transposed-convolution stack; stage II refines a stage-I image to 256x256
//! conditioned on both the low-resolution image and the embedding. Strided
//! convolutions use kernel 4, stride 2; no conditioning augmentation
//! anywhere. Matched pairs train as real; generated pairs and mismatched
//! real-image/wrong-embedding pairs train as fake.
//!
//! For the representation ablation the conditioning source is switchable: an
//! external (frozen) sentence embedding, or an embedding layer over one-hot
//! word inputs learned jointly with the generator.

use crate::corpus::{self, AugmentMode, Sample, PAD};
use crate::error::{Error, Result};
use crate::arae::AraeModel;
use cxrjust_nn::adam::Adam;
use cxrjust_nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::{NodeId, Tape};
use cxrjust_nn::{Arr, VarStore};
use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const STAGE1_SIZE: usize = 64;
pub const STAGE2_SIZE: usize = 256;

/// Where the conditioning vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondMode {
    /// Frozen upstream sentence embeddings (the ARAE path).
    External,
    /// Embedding layer over one-hot word inputs, trained with the generator.
    Learned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gan1Config {
    /// Conditioning vector width (the ARAE embedding dimension v).
    pub cond_dim: usize,
    pub noise_dim: usize,
    /// Generator base channel count (width of the last upsample block).
    pub ng: usize,
    /// Discriminator base channel count.
    pub nd: usize,
    /// Width of the discriminator's compressed-embedding branch.
    pub emb_proj: usize,
    pub cond_mode: CondMode,
    /// Vocabulary size; required for [`CondMode::Learned`].
    pub vocab_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Keep a state snapshot every this many epochs (plus first and final).
    pub checkpoint_every: usize,
    /// Abort when the discriminator loss stays below `collapse_threshold`
    /// for this many consecutive iterations.
    pub collapse_window: usize,
    pub collapse_threshold: f64,
}

impl Default for Gan1Config {
    fn default() -> Self {
        Gan1Config {
            cond_dim: 300,
            noise_dim: 100,
            ng: 16,
            nd: 16,
            emb_proj: 32,
            cond_mode: CondMode::External,
            vocab_size: 0,
            epochs: 40,
            batch_size: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 2,
            checkpoint_every: 10,
            collapse_window: 80,
            collapse_threshold: 0.02,
        }
    }
}

/// One training example for the image stages.
#[derive(Debug, Clone)]
pub struct GanSample {
    /// [0,1] grayscale at storage canvas size (crop margin included).
    pub image: Array2<f64>,
    /// Fixed-length description token ids (for the learned conditioning).
    pub tokens: Vec<usize>,
    /// Precomputed sentence embedding (for the external conditioning).
    pub embedding: Array1<f64>,
    pub label: String,
}

/// Pair corpus samples with the embedding of their first description.
pub fn gan_samples(samples: &[Sample], arae: &AraeModel) -> Result<Vec<GanSample>> {
    let descs: Vec<&corpus::Description> =
        samples.iter().map(|s| &s.descriptions[0]).collect();
    let embs = arae.encode_batch(&descs)?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| GanSample {
            image: s.image.clone(),
            tokens: s.descriptions[0].sequence(&arae.vocab),
            embedding: embs.row(i).to_owned(),
            label: s.label.clone(),
        })
        .collect())
}

/// Stage-I generator/discriminator pair.
pub struct Stage1Gan {
    pub vs: VarStore,
    pub cfg: Gan1Config,
    fc: Linear,
    bn0: BatchNorm,
    ups: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
    d_convs: Vec<(Conv2d, Option<BatchNorm>)>,
    d_embed: Linear,
    d_post_conv: Conv2d,
    d_post_bn: BatchNorm,
    d_final: Conv2d,
    cond_table: Option<cxrjust_nn::ParamId>,
}

impl Stage1Gan {
    pub fn new(cfg: Gan1Config) -> Self {
        assert!(
            cfg.cond_mode == CondMode::External || cfg.vocab_size > 0,
            "learned conditioning needs vocab_size"
        );
        let mut vs = VarStore::new();
        let mut rng = derive_rng(cfg.seed, "gan1-init");
        let ng = cfg.ng;
        let nd = cfg.nd;
        let rdim = cfg.cond_dim + cfg.noise_dim;
        let fc = Linear::new(&mut vs, "g.fc", rdim, 8 * ng * 4 * 4, &mut rng);
        let bn0 = BatchNorm::new(&mut vs, "g.bn0", 8 * ng, &mut rng);
        let ups = vec![
            (
                ConvTranspose2d::new(&mut vs, "g.up0", 8 * ng, 4 * ng, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "g.up0.bn", 4 * ng, &mut rng)),
            ),
            (
                ConvTranspose2d::new(&mut vs, "g.up1", 4 * ng, 2 * ng, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "g.up1.bn", 2 * ng, &mut rng)),
            ),
            (
                ConvTranspose2d::new(&mut vs, "g.up2", 2 * ng, ng, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "g.up2.bn", ng, &mut rng)),
            ),
            (
                ConvTranspose2d::new(&mut vs, "g.up3", ng, 1, 4, 2, 1, true, &mut rng),
                None,
            ),
        ];
        let d_convs = vec![
            (
                Conv2d::new(&mut vs, "d.c0", 1, nd, 4, 2, 1, true, &mut rng),
                None,
            ),
            (
                Conv2d::new(&mut vs, "d.c1", nd, 2 * nd, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "d.c1.bn", 2 * nd, &mut rng)),
            ),
            (
                Conv2d::new(&mut vs, "d.c2", 2 * nd, 4 * nd, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "d.c2.bn", 4 * nd, &mut rng)),
            ),
            (
                Conv2d::new(&mut vs, "d.c3", 4 * nd, 8 * nd, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "d.c3.bn", 8 * nd, &mut rng)),
            ),
        ];
        let d_embed = Linear::new(&mut vs, "d.embed", cfg.cond_dim, cfg.emb_proj, &mut rng);
        let d_post_conv = Conv2d::new(
            &mut vs,
            "d.post",
            8 * nd + cfg.emb_proj,
            8 * nd,
            4,
            2,
            1,
            false,
            &mut rng,
        );
        let d_post_bn = BatchNorm::new(&mut vs, "d.post.bn", 8 * nd, &mut rng);
        let d_final = Conv2d::new(&mut vs, "d.final", 8 * nd, 1, 4, 2, 1, true, &mut rng);
        let cond_table = (cfg.cond_mode == CondMode::Learned).then(|| {
            vs.add(
                "g.cond_table".to_string(),
                cxrjust_nn::layers::normal_init(
                    &mut rng,
                    &[cfg.vocab_size, cfg.cond_dim],
                    0.0,
                    0.02,
                ),
                true,
            )
        });
        Stage1Gan {
            vs,
            cfg,
            fc,
            bn0,
            ups,
            d_convs,
            d_embed,
            d_post_conv,
            d_post_bn,
            d_final,
            cond_table,
        }
    }

    pub fn generator_params(&self) -> Vec<cxrjust_nn::ParamId> {
        let mut p = vec![self.fc.w, self.fc.b, self.bn0.gamma, self.bn0.beta];
        for (up, bn) in &self.ups {
            p.push(up.w);
            if let Some(b) = up.b {
                p.push(b);
            }
            if let Some(bn) = bn {
                p.push(bn.gamma);
                p.push(bn.beta);
            }
        }
        if let Some(tbl) = self.cond_table {
            p.push(tbl);
        }
        p
    }

    pub fn discriminator_params(&self) -> Vec<cxrjust_nn::ParamId> {
        let mut p = Vec::new();
        for (cv, bn) in &self.d_convs {
            p.push(cv.w);
            if let Some(b) = cv.b {
                p.push(b);
            }
            if let Some(bn) = bn {
                p.push(bn.gamma);
                p.push(bn.beta);
            }
        }
        p.extend([self.d_embed.w, self.d_embed.b]);
        p.push(self.d_post_conv.w);
        p.extend([self.d_post_bn.gamma, self.d_post_bn.beta]);
        p.push(self.d_final.w);
        if let Some(b) = self.d_final.b {
            p.push(b);
        }
        p
    }

    /// Generator forward from a representation node [N, v+noise].
    pub fn generator_on(&self, t: &mut Tape, r: NodeId, mode: &Mode) -> NodeId {
        let n = t.value(r).shape()[0];
        let ng = self.cfg.ng;
        let h = self.fc.forward(t, r);
        let h = t.reshape(h, &[n, 8 * ng, 4, 4]);
        let h = self.bn0.forward(t, h, mode);
        let mut h = t.relu(h);
        for (i, (up, bn)) in self.ups.iter().enumerate() {
            h = up.forward(t, h);
            if let Some(bn) = bn {
                h = bn.forward(t, h, mode);
            }
            if i + 1 < self.ups.len() {
                h = t.relu(h);
            } else {
                h = t.tanh(h);
            }
        }
        h
    }

    /// Discriminator forward on (image [N,1,64,64], conditioning [N, v]).
    pub fn discriminator_on(
        &self,
        t: &mut Tape,
        img: NodeId,
        cond: NodeId,
        mode: &Mode,
    ) -> NodeId {
        let n = t.value(img).shape()[0];
        let mut h = img;
        for (cv, bn) in &self.d_convs {
            h = cv.forward(t, h);
            if let Some(bn) = bn {
                h = bn.forward(t, h, mode);
            }
            h = t.leaky_relu(h, 0.2);
        }
        let e = self.d_embed.forward(t, cond);
        let e = t.leaky_relu(e, 0.2);
        let e = t.reshape(e, &[n, self.cfg.emb_proj, 1, 1]);
        let e_tiled = t.tile_spatial(e, 4, 4);
        let h = t.concat1(h, e_tiled);
        let h = self.d_post_conv.forward(t, h);
        let h = self.d_post_bn.forward(t, h, mode);
        let h = t.leaky_relu(h, 0.2);
        let h = self.d_final.forward(t, h);
        t.reshape(h, &[n, 1])
    }

    /// Conditioning node for a batch: stored embeddings (constant) or the
    /// learned embedding layer's bag-of-words mean. `live` controls whether
    /// gradients flow into the table.
    pub fn cond_on(&self, t: &mut Tape, batch: &[&GanSample], live: bool) -> NodeId {
        match self.cfg.cond_mode {
            CondMode::External => {
                let mut m = Array2::zeros((batch.len(), self.cfg.cond_dim));
                for (i, s) in batch.iter().enumerate() {
                    m.row_mut(i).assign(&s.embedding);
                }
                t.constant(m.into_dyn())
            }
            CondMode::Learned => {
                let mut weights = Array2::<f64>::zeros((batch.len(), self.cfg.vocab_size));
                for (i, s) in batch.iter().enumerate() {
                    let real: Vec<usize> =
                        s.tokens.iter().copied().filter(|&tk| tk != PAD).collect();
                    let w = 1.0 / real.len().max(1) as f64;
                    for tok in real {
                        weights[[i, tok]] += w;
                    }
                }
                let wn = t.constant(weights.into_dyn());
                let table = self.cond_table.expect("learned mode has table");
                let tbl = if live {
                    t.param(table)
                } else {
                    t.constant(self.vs.get(table).clone())
                };
                t.matmul(wn, tbl)
            }
        }
    }

    /// Frozen conditioning vectors (used by the alignment critics).
    pub fn cond_vectors(&self, samples: &[&GanSample]) -> Array2<f64> {
        let mut t = Tape::new(&self.vs);
        let node = self.cond_on(&mut t, samples, false);
        t.value(node)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    /// Deterministic generation from one representation vector; [-1,1] pixels.
    pub fn generate(&self, r: &Array1<f64>) -> Result<Array2<f64>> {
        let r2 = Array2::from_shape_vec((1, r.len()), r.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let imgs = self.generate_batch(&r2)?;
        Ok(imgs.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// Batched generation: rows of `r` are representations -> [N, 64, 64].
    pub fn generate_batch(&self, r: &Array2<f64>) -> Result<ndarray::Array3<f64>> {
        let rdim = self.cfg.cond_dim + self.cfg.noise_dim;
        if r.ncols() != rdim {
            return Err(Error::Shape(format!(
                "representation dim {} != expected {rdim}",
                r.ncols()
            )));
        }
        let mut t = Tape::new(&self.vs);
        let rn = t.constant(r.clone().into_dyn());
        let img = self.generator_on(&mut t, rn, &Mode::Eval);
        let v = t.value(img);
        let n = v.shape()[0];
        Ok(v
            .view()
            .into_shape_with_order((n, STAGE1_SIZE, STAGE1_SIZE))
            .unwrap()
            .to_owned())
    }

    /// Full state (parameters plus batch-norm statistics).
    pub fn state(&self) -> Vec<(String, Arr)> {
        let mut out = self.vs.state_dict();
        out.extend(self.bn0.stats_entries());
        for (_, bn) in &self.ups {
            if let Some(bn) = bn {
                out.extend(bn.stats_entries());
            }
        }
        for (_, bn) in &self.d_convs {
            if let Some(bn) = bn {
                out.extend(bn.stats_entries());
            }
        }
        out.extend(self.d_post_bn.stats_entries());
        out
    }

    pub fn load_state(&mut self, state: &[(String, Arr)]) -> Result<()> {
        self.vs.load_state_dict(state).map_err(Error::Checkpoint)?;
        self.bn0.load_stats(state).map_err(Error::Checkpoint)?;
        for (_, bn) in &self.ups {
            if let Some(bn) = bn {
                bn.load_stats(state).map_err(Error::Checkpoint)?;
            }
        }
        for (_, bn) in &self.d_convs {
            if let Some(bn) = bn {
                bn.load_stats(state).map_err(Error::Checkpoint)?;
            }
        }
        self.d_post_bn.load_stats(state).map_err(Error::Checkpoint)?;
        Ok(())
    }
}

/// Numerically stable softplus on the tape: ln(1 + e^x).
pub fn softplus(t: &mut Tape, x: NodeId) -> NodeId {
    let r = t.relu(x);
    let nr = t.neg(r);
    let e1 = t.exp(nr);
    let xm = t.sub(x, r);
    let e2 = t.exp(xm);
    let s = t.add(e1, e2);
    let l = t.ln(s);
    t.add(r, l)
}

/// Mean binary cross-entropy with logits against an all-real or all-fake
/// target.
pub fn bce_mean(t: &mut Tape, logits: NodeId, target_real: bool) -> NodeId {
    let z = if target_real { t.neg(logits) } else { logits };
    let sp = softplus(t, z);
    t.mean_all(sp)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug)]
pub struct GanTrainReport {
    pub log: Vec<GanEpochLog>,
    /// (epoch, full state) including the first and final epochs.
    pub snapshots: Vec<(usize, Vec<(String, Arr)>)>,
}

/// Stack a batch of samples into an augmented [N,1,S,S] image tensor.
fn image_batch(
    batch: &[&GanSample],
    size: usize,
    mode: AugmentMode,
    rng: &mut ChaCha12Rng,
) -> Result<Arr> {
    let n = batch.len();
    let mut out = Array4::<f64>::zeros((n, 1, size, size));
    for (i, s) in batch.iter().enumerate() {
        let img = corpus::augment_image(&s.image, size, mode, rng)?;
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&img);
    }
    Ok(out.into_dyn())
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha12Rng) -> Arr {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n * d).map(|_| dist.sample(rng)).collect();
    Array2::from_shape_vec((n, d), data).unwrap().into_dyn()
}

/// Rotate rows by one: the standard wrong-pair construction within a batch.
fn rotate_rows(m: &Arr) -> Arr {
    let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let n = m2.nrows();
    let mut out = m2.to_owned();
    for i in 0..n {
        out.row_mut(i).assign(&m2.row((i + 1) % n));
    }
    out.into_dyn()
}

/// Stage-I adversarial training.
pub fn train_stage1(gan: &mut Stage1Gan, data: &[GanSample]) -> Result<GanTrainReport> {
    let cfg = gan.cfg.clone();
    if data.len() < 4 {
        return Err(Error::Corpus("stage-1 training needs at least 4 samples".into()));
    }
    let mut order_rng = derive_rng(cfg.seed, "gan1-order");
    let mut aug_rng = derive_rng(cfg.seed, "gan1-augment");
    let mut noise_rng = derive_rng(cfg.seed, "gan1-noise");
    let mut dropout_rng = derive_rng(cfg.seed, "gan1-dropout");
    let mut opt_g = Adam::new(gan.generator_params(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(gan.discriminator_params(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut collapse_run = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&GanSample> = chunk.iter().map(|&i| &data[i]).collect();
            let n = batch.len();
            let x_real = image_batch(&batch, STAGE1_SIZE, AugmentMode::Train, &mut aug_rng)?;

            // discriminator step
            let d_loss = {
                let mut t = Tape::new(&gan.vs);
                let cond = gan.cond_on(&mut t, &batch, false);
                let z = t.constant(gaussian(n, cfg.noise_dim, &mut noise_rng));
                let r = t.concat1(cond, z);
                let mode = Mode::Train(&mut dropout_rng);
                let fake_live = gan.generator_on(&mut t, r, &mode);
                let fake = t.constant(t.value(fake_live).clone());
                let xr = t.constant(x_real.clone());
                let real_logit = gan.discriminator_on(&mut t, xr, cond, &mode);
                let fake_logit = gan.discriminator_on(&mut t, fake, cond, &mode);
                let cond_wrong = t.constant(rotate_rows(t.value(cond)));
                let mis_logit = gan.discriminator_on(&mut t, xr, cond_wrong, &mode);
                let l_real = bce_mean(&mut t, real_logit, true);
                let l_fake = bce_mean(&mut t, fake_logit, false);
                let l_mis = bce_mean(&mut t, mis_logit, false);
                let l_neg = t.add(l_fake, l_mis);
                let l_neg_half = t.affine(l_neg, 0.5, 0.0);
                let loss = t.add(l_real, l_neg_half);
                let lv = t.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "discriminator loss {lv} at epoch {epoch}"
                    )));
                }
                let grads = t.backward(loss);
                opt_d.step(&mut gan.vs, &grads);
                lv
            };

            // generator step
            let g_loss = {
                let mut t = Tape::new(&gan.vs);
                let cond = gan.cond_on(&mut t, &batch, true);
                let z = t.constant(gaussian(n, cfg.noise_dim, &mut noise_rng));
                let r = t.concat1(cond, z);
                let mode = Mode::Train(&mut dropout_rng);
                let fake = gan.generator_on(&mut t, r, &mode);
                let logit = gan.discriminator_on(&mut t, fake, cond, &mode);
                let loss = bce_mean(&mut t, logit, true);
                let lv = t.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "generator loss {lv} at epoch {epoch}"
                    )));
                }
                let grads = t.backward(loss);
                opt_g.step(&mut gan.vs, &grads);
                lv
            };

            if d_loss < cfg.collapse_threshold {
                collapse_run += 1;
                if collapse_run >= cfg.collapse_window {
                    return Err(Error::TrainingDiverged(format!(
                        "discriminator loss below {} for {} iterations",
                        cfg.collapse_threshold, cfg.collapse_window
                    )));
                }
            } else {
                collapse_run = 0;
            }
            d_sum += d_loss;
            g_sum += g_loss;
            batches += 1;
        }
        log.push(GanEpochLog {
            epoch,
            d_loss: d_sum / batches.max(1) as f64,
            g_loss: g_sum / batches.max(1) as f64,
        });
        if epoch == 0
            || epoch + 1 == cfg.epochs
            || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
        {
            snapshots.push((epoch, gan.state()));
        }
    }
    Ok(GanTrainReport { log, snapshots })
}

// ---------------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gan2Config {
    pub cond_dim: usize,
    pub noise_dim: usize,
    pub ng: usize,
    pub nd: usize,
    pub emb_proj: usize,
    pub res_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub collapse_window: usize,
    pub collapse_threshold: f64,
}

impl Default for Gan2Config {
    fn default() -> Self {
        Gan2Config {
            cond_dim: 300,
            noise_dim: 100,
            ng: 16,
            nd: 8,
            emb_proj: 32,
            res_blocks: 2,
            epochs: 20,
            batch_size: 8,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 5,
            collapse_window: 80,
            collapse_threshold: 0.02,
        }
    }
}

struct ResBlock {
    c1: Conv2d,
    b1: BatchNorm,
    c2: Conv2d,
    b2: BatchNorm,
}

/// Stage-II refinement GAN: 64x64 input, 256x256 output, conditioned on both
/// the low-resolution image and the embedding.
pub struct Stage2Gan {
    pub vs: VarStore,
    pub cfg: Gan2Config,
    enc0: Conv2d,
    enc1: Conv2d,
    enc1_bn: BatchNorm,
    g_embed: Linear,
    join: Conv2d,
    join_bn: BatchNorm,
    res: Vec<ResBlock>,
    ups: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
    d_convs: Vec<(Conv2d, Option<BatchNorm>)>,
    d_embed: Linear,
    d_post_conv: Conv2d,
    d_post_bn: BatchNorm,
    d_final: Conv2d,
}

impl Stage2Gan {
    pub fn new(cfg: Gan2Config) -> Self {
        let mut vs = VarStore::new();
        let mut rng = derive_rng(cfg.seed, "gan2-init");
        let ng = cfg.ng;
        let nd = cfg.nd;
        let enc0 = Conv2d::new(&mut vs, "g2.enc0", 1, ng, 4, 2, 1, true, &mut rng);
        let enc1 = Conv2d::new(&mut vs, "g2.enc1", ng, 2 * ng, 4, 2, 1, false, &mut rng);
        let enc1_bn = BatchNorm::new(&mut vs, "g2.enc1.bn", 2 * ng, &mut rng);
        let g_embed = Linear::new(&mut vs, "g2.embed", cfg.cond_dim, cfg.emb_proj, &mut rng);
        let join = Conv2d::new(
            &mut vs,
            "g2.join",
            2 * ng + cfg.emb_proj,
            2 * ng,
            3,
            1,
            1,
            false,
            &mut rng,
        );
        let join_bn = BatchNorm::new(&mut vs, "g2.join.bn", 2 * ng, &mut rng);
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock {
                c1: Conv2d::new(&mut vs, &format!("g2.res{i}.c1"), 2 * ng, 2 * ng, 3, 1, 1, false, &mut rng),
                b1: BatchNorm::new(&mut vs, &format!("g2.res{i}.bn1"), 2 * ng, &mut rng),
                c2: Conv2d::new(&mut vs, &format!("g2.res{i}.c2"), 2 * ng, 2 * ng, 3, 1, 1, false, &mut rng),
                b2: BatchNorm::new(&mut vs, &format!("g2.res{i}.bn2"), 2 * ng, &mut rng),
            })
            .collect();
        let ups = vec![
            (
                ConvTranspose2d::new(&mut vs, "g2.up0", 2 * ng, ng, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "g2.up0.bn", ng, &mut rng)),
            ),
            (
                ConvTranspose2d::new(&mut vs, "g2.up1", ng, ng / 2, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "g2.up1.bn", ng / 2, &mut rng)),
            ),
            (
                ConvTranspose2d::new(&mut vs, "g2.up2", ng / 2, ng / 4, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "g2.up2.bn", ng / 4, &mut rng)),
            ),
            (
                ConvTranspose2d::new(&mut vs, "g2.up3", ng / 4, 1, 4, 2, 1, true, &mut rng),
                None,
            ),
        ];
        let mut d_convs: Vec<(Conv2d, Option<BatchNorm>)> = Vec::new();
        let widths = [1, nd, 2 * nd, 4 * nd, 8 * nd, 8 * nd, 8 * nd];
        for i in 0..6 {
            let bn = (i > 0).then(|| {
                BatchNorm::new(&mut vs, &format!("d2.c{i}.bn"), widths[i + 1], &mut rng)
            });
            d_convs.push((
                Conv2d::new(
                    &mut vs,
                    &format!("d2.c{i}"),
                    widths[i],
                    widths[i + 1],
                    4,
                    2,
                    1,
                    i == 0,
                    &mut rng,
                ),
                bn,
            ));
        }
        let d_embed = Linear::new(&mut vs, "d2.embed", cfg.cond_dim, cfg.emb_proj, &mut rng);
        let d_post_conv = Conv2d::new(
            &mut vs,
            "d2.post",
            8 * nd + cfg.emb_proj,
            8 * nd,
            4,
            2,
            1,
            false,
            &mut rng,
        );
        let d_post_bn = BatchNorm::new(&mut vs, "d2.post.bn", 8 * nd, &mut rng);
        let d_final = Conv2d::new(&mut vs, "d2.final", 8 * nd, 1, 4, 2, 1, true, &mut rng);
        Stage2Gan {
            vs,
            cfg,
            enc0,
            enc1,
            enc1_bn,
            g_embed,
            join,
            join_bn,
            res,
            ups,
            d_convs,
            d_embed,
            d_post_conv,
            d_post_bn,
            d_final,
        }
    }

    pub fn generator_params(&self) -> Vec<cxrjust_nn::ParamId> {
        let mut p = vec![self.enc0.w];
        if let Some(b) = self.enc0.b {
            p.push(b);
        }
        p.push(self.enc1.w);
        p.extend([self.enc1_bn.gamma, self.enc1_bn.beta]);
        p.extend([self.g_embed.w, self.g_embed.b]);
        p.push(self.join.w);
        p.extend([self.join_bn.gamma, self.join_bn.beta]);
        for r in &self.res {
            p.extend([r.c1.w, r.b1.gamma, r.b1.beta, r.c2.w, r.b2.gamma, r.b2.beta]);
        }
        for (up, bn) in &self.ups {
            p.push(up.w);
            if let Some(b) = up.b {
                p.push(b);
            }
            if let Some(bn) = bn {
                p.extend([bn.gamma, bn.beta]);
            }
        }
        p
    }

    pub fn discriminator_params(&self) -> Vec<cxrjust_nn::ParamId> {
        let mut p = Vec::new();
        for (cv, bn) in &self.d_convs {
            p.push(cv.w);
            if let Some(b) = cv.b {
                p.push(b);
            }
            if let Some(bn) = bn {
                p.extend([bn.gamma, bn.beta]);
            }
        }
        p.extend([self.d_embed.w, self.d_embed.b]);
        p.push(self.d_post_conv.w);
        p.extend([self.d_post_bn.gamma, self.d_post_bn.beta]);
        p.push(self.d_final.w);
        if let Some(b) = self.d_final.b {
            p.push(b);
        }
        p
    }

    /// Generator forward: (low-res image [N,1,64,64], cond [N,v]) -> 256x256.
    pub fn generator_on(&self, t: &mut Tape, low: NodeId, cond: NodeId, mode: &Mode) -> NodeId {
        let n = t.value(low).shape()[0];
        let h = self.enc0.forward(t, low);
        let h = t.relu(h);
        let h = self.enc1.forward(t, h);
        let h = self.enc1_bn.forward(t, h, mode);
        let h = t.relu(h);
        let e = self.g_embed.forward(t, cond);
        let e = t.relu(e);
        let e = t.reshape(e, &[n, self.cfg.emb_proj, 1, 1]);
        let e_tiled = t.tile_spatial(e, 16, 16);
        let h = t.concat1(h, e_tiled);
        let h = self.join.forward(t, h);
        let h = self.join_bn.forward(t, h, mode);
        let mut h = t.relu(h);
        for r in &self.res {
            let y = r.c1.forward(t, h);
            let y = r.b1.forward(t, y, mode);
            let y = t.relu(y);
            let y = r.c2.forward(t, y);
            let y = r.b2.forward(t, y, mode);
            let s = t.add(h, y);
            h = t.relu(s);
        }
        for (i, (up, bn)) in self.ups.iter().enumerate() {
            h = up.forward(t, h);
            if let Some(bn) = bn {
                h = bn.forward(t, h, mode);
            }
            if i + 1 < self.ups.len() {
                h = t.relu(h);
            } else {
                h = t.tanh(h);
            }
        }
        h
    }

    pub fn discriminator_on(
        &self,
        t: &mut Tape,
        img: NodeId,
        cond: NodeId,
        mode: &Mode,
    ) -> NodeId {
        let n = t.value(img).shape()[0];
        let mut h = img;
        for (cv, bn) in &self.d_convs {
            h = cv.forward(t, h);
            if let Some(bn) = bn {
                h = bn.forward(t, h, mode);
            }
            h = t.leaky_relu(h, 0.2);
        }
        let e = self.d_embed.forward(t, cond);
        let e = t.leaky_relu(e, 0.2);
        let e = t.reshape(e, &[n, self.cfg.emb_proj, 1, 1]);
        let e_tiled = t.tile_spatial(e, 4, 4);
        let h = t.concat1(h, e_tiled);
        let h = self.d_post_conv.forward(t, h);
        let h = self.d_post_bn.forward(t, h, mode);
        let h = t.leaky_relu(h, 0.2);
        let h = self.d_final.forward(t, h);
        t.reshape(h, &[n, 1])
    }

    /// Deterministic 256x256 refinement of stage-I outputs.
    pub fn generate_batch(
        &self,
        low: &ndarray::Array3<f64>,
        cond: &Array2<f64>,
    ) -> Result<ndarray::Array3<f64>> {
        let n = low.dim().0;
        let mut t = Tape::new(&self.vs);
        let low4 = t.constant(
            low.clone()
                .into_shape_with_order((n, 1, STAGE1_SIZE, STAGE1_SIZE))
                .map_err(|e| Error::Shape(e.to_string()))?
                .into_dyn(),
        );
        let condn = t.constant(cond.clone().into_dyn());
        let img = self.generator_on(&mut t, low4, condn, &Mode::Eval);
        Ok(t
            .value(img)
            .view()
            .into_shape_with_order((n, STAGE2_SIZE, STAGE2_SIZE))
            .unwrap()
            .to_owned())
    }
}

/// Stage-II training; the stage-I generator is used only through its frozen
/// outputs (it lives in a separate parameter store, so no gradient can reach
/// it).
pub fn train_stage2(
    gan2: &mut Stage2Gan,
    stage1: &Stage1Gan,
    data: &[GanSample],
) -> Result<GanTrainReport> {
    let cfg = gan2.cfg.clone();
    if data.len() < 4 {
        return Err(Error::Corpus("stage-2 training needs at least 4 samples".into()));
    }
    let mut order_rng = derive_rng(cfg.seed, "gan2-order");
    let mut aug_rng = derive_rng(cfg.seed, "gan2-augment");
    let mut noise_rng = derive_rng(cfg.seed, "gan2-noise");
    let mut dropout_rng = derive_rng(cfg.seed, "gan2-dropout");
    let mut opt_g = Adam::new(gan2.generator_params(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(gan2.discriminator_params(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut collapse_run = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&GanSample> = chunk.iter().map(|&i| &data[i]).collect();
            let n = batch.len();
            let x_real = image_batch(&batch, STAGE2_SIZE, AugmentMode::Train, &mut aug_rng)?;
            let cond_rows = {
                let mut m = Array2::zeros((n, cfg.cond_dim));
                for (i, s) in batch.iter().enumerate() {
                    m.row_mut(i).assign(&s.embedding);
                }
                m
            };
            // frozen stage-I pass, off-tape
            let z = gaussian(n, cfg.noise_dim, &mut noise_rng);
            let mut r = Array2::zeros((n, cfg.cond_dim + cfg.noise_dim));
            let z2 = z.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for i in 0..n {
                let mut row = r.row_mut(i);
                row.slice_mut(ndarray::s![..cfg.cond_dim])
                    .assign(&cond_rows.row(i));
                row.slice_mut(ndarray::s![cfg.cond_dim..]).assign(&z2.row(i));
            }
            let low = stage1.generate_batch(&r)?;

            let d_loss = {
                let mut t = Tape::new(&gan2.vs);
                let cond = t.constant(cond_rows.clone().into_dyn());
                let lown = t.constant(
                    low.clone()
                        .into_shape_with_order((n, 1, STAGE1_SIZE, STAGE1_SIZE))
                        .unwrap()
                        .into_dyn(),
                );
                let mode = Mode::Train(&mut dropout_rng);
                let fake_live = gan2.generator_on(&mut t, lown, cond, &mode);
                let fake = t.constant(t.value(fake_live).clone());
                let xr = t.constant(x_real.clone());
                let real_logit = gan2.discriminator_on(&mut t, xr, cond, &mode);
                let fake_logit = gan2.discriminator_on(&mut t, fake, cond, &mode);
                let cond_wrong = t.constant(rotate_rows(t.value(cond)));
                let mis_logit = gan2.discriminator_on(&mut t, xr, cond_wrong, &mode);
                let l_real = bce_mean(&mut t, real_logit, true);
                let l_fake = bce_mean(&mut t, fake_logit, false);
                let l_mis = bce_mean(&mut t, mis_logit, false);
                let l_neg = t.add(l_fake, l_mis);
                let l_neg_half = t.affine(l_neg, 0.5, 0.0);
                let loss = t.add(l_real, l_neg_half);
                let lv = t.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "stage-2 discriminator loss {lv} at epoch {epoch}"
                    )));
                }
                let grads = t.backward(loss);
                opt_d.step(&mut gan2.vs, &grads);
                lv
            };

            let g_loss = {
                let mut t = Tape::new(&gan2.vs);
                let cond = t.constant(cond_rows.clone().into_dyn());
                let lown = t.constant(
                    low.clone()
                        .into_shape_with_order((n, 1, STAGE1_SIZE, STAGE1_SIZE))
                        .unwrap()
                        .into_dyn(),
                );
                let mode = Mode::Train(&mut dropout_rng);
                let fake = gan2.generator_on(&mut t, lown, cond, &mode);
                let logit = gan2.discriminator_on(&mut t, fake, cond, &mode);
                let loss = bce_mean(&mut t, logit, true);
                let lv = t.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "stage-2 generator loss {lv} at epoch {epoch}"
                    )));
                }
                let grads = t.backward(loss);
                opt_g.step(&mut gan2.vs, &grads);
                lv
            };

            if d_loss < cfg.collapse_threshold {
                collapse_run += 1;
                if collapse_run >= cfg.collapse_window {
                    return Err(Error::TrainingDiverged(format!(
                        "stage-2 discriminator loss below {} for {} iterations",
                        cfg.collapse_threshold, cfg.collapse_window
                    )));
                }
            } else {
                collapse_run = 0;
            }
            d_sum += d_loss;
            g_sum += g_loss;
            batches += 1;
        }
        log.push(GanEpochLog {
            epoch,
            d_loss: d_sum / batches.max(1) as f64,
            g_loss: g_sum / batches.max(1) as f64,
        });
        if epoch == 0 || epoch + 1 == cfg.epochs {
            snapshots.push((epoch, gan2.vs.state_dict()));
        }
    }
    Ok(GanTrainReport { log, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cxrjust_nn::rng::derive_rng;
    use rand::Rng;

    fn tiny_cfg() -> Gan1Config {
        Gan1Config {
            cond_dim: 12,
            noise_dim: 6,
            ng: 4,
            nd: 4,
            emb_proj: 8,
            epochs: 1,
            batch_size: 4,
            seed: 9,
            ..Default::default()
        }
    }

    fn rand_vec(n: usize, seed: u64) -> Array1<f64> {
        let mut rng = derive_rng(seed, "rv");
        Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)))
    }

    fn tiny_samples(n: usize, canvas: usize, cond: usize) -> Vec<GanSample> {
        (0..n)
            .map(|i| GanSample {
                image: Array2::from_shape_fn((canvas, canvas), |(y, x)| {
                    (((y + x + i) % 7) as f64) / 7.0
                }),
                tokens: vec![4, 5, 2, 0, 0, 0],
                embedding: rand_vec(cond, i as u64),
                label: if i % 2 == 0 { "normal".into() } else { "cardiomegaly".into() },
            })
            .collect()
    }

    #[test]
    fn generator_shape_and_range() {
        let gan = Stage1Gan::new(tiny_cfg());
        let r = rand_vec(18, 3);
        let img = gan.generate(&r).unwrap();
        assert_eq!(img.dim(), (64, 64));
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generation_is_deterministic_and_noise_sensitive() {
        let gan = Stage1Gan::new(tiny_cfg());
        let r = rand_vec(18, 4);
        let a = gan.generate(&r).unwrap();
        let b = gan.generate(&r).unwrap();
        assert_eq!(a, b);
        // same embedding, different noise -> different image
        let mut r2 = r.clone();
        for i in 12..18 {
            r2[i] += 0.5;
        }
        let c = gan.generate(&r2).unwrap();
        let mse: f64 = a.iter().zip(c.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(mse > 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let gan = Stage1Gan::new(tiny_cfg());
        assert!(gan.generate(&rand_vec(10, 5)).is_err());
    }

    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        let gan = Stage1Gan::new(tiny_cfg());
        let samples = tiny_samples(2, 70, 12);
        let batch: Vec<&GanSample> = samples.iter().collect();
        let r0 = {
            let mut m = Array2::zeros((2, 18));
            m.row_mut(0).assign(&rand_vec(18, 6));
            m.row_mut(1).assign(&rand_vec(18, 7));
            m
        };
        let loss_of = |r: &Array2<f64>| -> (f64, Option<Arr>) {
            let mut t = Tape::new(&gan.vs);
            let rn = t.constant(r.clone().into_dyn());
            let cond = gan.cond_on(&mut t, &batch, false);
            let fake = gan.generator_on(&mut t, rn, &Mode::Eval);
            let logit = gan.discriminator_on(&mut t, fake, cond, &Mode::Eval);
            let loss = bce_mean(&mut t, logit, true);
            let lv = t.scalar(loss);
            let g = t.backward(loss).node(rn).cloned();
            (lv, g)
        };
        let (_, grad) = loss_of(&r0);
        let grad = grad.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in [0usize, 5, 11, 13, 17, 20, 29, 35] {
            let (i, j) = (idx / 18, idx % 18);
            let mut rp = r0.clone();
            rp[[i, j]] += h;
            let mut rm = r0.clone();
            rm[[i, j]] -= h;
            let fd = (loss_of(&rp).0 - loss_of(&rm).0) / (2.0 * h);
            let an = grad[[i, j]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn short_training_runs_and_snapshots() {
        let mut gan = Stage1Gan::new(Gan1Config {
            epochs: 2,
            batch_size: 4,
            checkpoint_every: 1,
            ..tiny_cfg()
        });
        let samples = tiny_samples(8, 70, 12);
        let report = train_stage1(&mut gan, &samples).unwrap();
        assert_eq!(report.log.len(), 2);
        assert!(report.log.iter().all(|l| l.d_loss.is_finite() && l.g_loss.is_finite()));
        assert_eq!(report.snapshots.first().unwrap().0, 0);
        assert_eq!(report.snapshots.last().unwrap().0, 1);
    }

    #[test]
    fn collapse_guard_triggers() {
        let mut gan = Stage1Gan::new(Gan1Config {
            epochs: 3,
            batch_size: 4,
            collapse_threshold: 1e9, // every iteration "collapses"
            collapse_window: 3,
            ..tiny_cfg()
        });
        let samples = tiny_samples(8, 70, 12);
        match train_stage1(&mut gan, &samples) {
            Err(Error::TrainingDiverged(_)) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn learned_conditioning_trains() {
        let mut gan = Stage1Gan::new(Gan1Config {
            cond_mode: CondMode::Learned,
            vocab_size: 10,
            epochs: 1,
            batch_size: 4,
            ..tiny_cfg()
        });
        let samples = tiny_samples(8, 70, 12);
        let before = gan.vs.get(gan.cond_table.unwrap()).clone();
        train_stage1(&mut gan, &samples).unwrap();
        let after = gan.vs.get(gan.cond_table.unwrap()).clone();
        assert_ne!(before, after, "embedding table should receive updates");
    }

    #[test]
    fn stage2_shapes_and_decoupling() {
        let s1 = Stage1Gan::new(tiny_cfg());
        let s1_params_before = s1.vs.state_dict();
        let mut s2 = Stage2Gan::new(Gan2Config {
            cond_dim: 12,
            noise_dim: 6,
            ng: 8,
            nd: 4,
            emb_proj: 8,
            res_blocks: 1,
            epochs: 1,
            batch_size: 2,
            seed: 13,
            ..Default::default()
        });
        let samples = tiny_samples(4, 280, 12);
        let report = train_stage2(&mut s2, &s1, &samples).unwrap();
        assert_eq!(report.log.len(), 1);
        // stage-I untouched by stage-II training
        for ((n1, v1), (n2, v2)) in s1_params_before.iter().zip(s1.vs.state_dict().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "stage-1 param {n1} changed");
        }
        // 256x256 output
        let low = s1
            .generate_batch(&{
                let mut m = Array2::zeros((2, 18));
                m.row_mut(0).assign(&rand_vec(18, 21));
                m.row_mut(1).assign(&rand_vec(18, 22));
                m
            })
            .unwrap();
        let cond = Array2::from_shape_fn((2, 12), |(i, j)| (i + j) as f64 * 0.01);
        let big = s2.generate_batch(&low, &cond).unwrap();
        assert_eq!(big.dim(), (2, 256, 256));
        assert!(big.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
