//! Inverse mapping I: a convolutional projection of a 64x64 image to a
//! representation, trained against three objectives at once:
//!
//! * a diagnosis loss, read from the frozen decoder's first step given the
//!   predicted embedding half, weighted by log10(epoch+1) so the first epoch
//!   trains purely on the cycle terms;
//! * an image cycle loss: mean squared pixel error of G(I(x)) against x;
//! * an embedding cycle loss: mean squared error between I(G(e ++ z))'s
//!   embedding half and e, for real training-description embeddings e.
//!
//! The decoder and generator stay frozen; their parameter stores are
//! separate, so gradients cross model boundaries by seeding this tape with
//! the input gradients computed on theirs.

use crate::arae::{diagnosis_certainty, AraeModel, NoiseDistribution, Representation};
use crate::corpus::{AugmentMode, Sample};
use crate::error::{Error, Result};
use crate::t2igan::{GanSample, Stage1Gan, STAGE1_SIZE};
use crate::{arae, corpus};
use cxrjust_nn::adam::Adam;
use cxrjust_nn::layers::{BatchNorm, Conv2d, Dropout, Linear, Mode};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::{NodeId, Tape};
use cxrjust_nn::{Arr, VarStore};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvMapConfig {
    pub cond_dim: usize,
    pub noise_dim: usize,
    /// Base conv width; the stack runs 1 -> nc -> 2nc -> 4nc -> 8nc.
    pub nc: usize,
    pub fc_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Ablation switch: train with the diagnosis loss only.
    pub diagnosis_only: bool,
}

impl Default for InvMapConfig {
    fn default() -> Self {
        InvMapConfig {
            cond_dim: 300,
            noise_dim: 100,
            nc: 16,
            fc_hidden: 256,
            epochs: 100,
            batch_size: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 4,
            diagnosis_only: false,
        }
    }
}

/// Diagnosis-loss schedule: zero at the first epoch, then growing
/// logarithmically.
pub fn diagnosis_weight(epoch: usize) -> f64 {
    ((epoch + 1) as f64).log10()
}

/// Convolutional image-to-representation mapper. Dropout 0.1 follows every
/// LeakyReLU, dropout 0.5 follows the ReLU before the output head.
pub struct InverseMapper {
    pub vs: VarStore,
    pub cfg: InvMapConfig,
    convs: Vec<(Conv2d, Option<BatchNorm>)>,
    drop_conv: Dropout,
    fc1: Linear,
    drop_fc: Dropout,
    fc2: Linear,
}

impl InverseMapper {
    pub fn new(cfg: InvMapConfig) -> Self {
        let mut vs = VarStore::new();
        let mut rng = derive_rng(cfg.seed, "invmap-init");
        let nc = cfg.nc;
        let convs = vec![
            (
                Conv2d::new(&mut vs, "i.c0", 1, nc, 4, 2, 1, true, &mut rng),
                None,
            ),
            (
                Conv2d::new(&mut vs, "i.c1", nc, 2 * nc, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "i.c1.bn", 2 * nc, &mut rng)),
            ),
            (
                Conv2d::new(&mut vs, "i.c2", 2 * nc, 4 * nc, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "i.c2.bn", 4 * nc, &mut rng)),
            ),
            (
                Conv2d::new(&mut vs, "i.c3", 4 * nc, 8 * nc, 4, 2, 1, false, &mut rng),
                Some(BatchNorm::new(&mut vs, "i.c3.bn", 8 * nc, &mut rng)),
            ),
        ];
        let fc1 = Linear::new(&mut vs, "i.fc1", 8 * nc * 4 * 4, cfg.fc_hidden, &mut rng);
        let fc2 = Linear::new(
            &mut vs,
            "i.fc2",
            cfg.fc_hidden,
            cfg.cond_dim + cfg.noise_dim,
            &mut rng,
        );
        InverseMapper {
            vs,
            cfg,
            convs,
            drop_conv: Dropout::new(0.1),
            fc1,
            drop_fc: Dropout::new(0.5),
            fc2,
        }
    }

    pub fn params(&self) -> Vec<cxrjust_nn::ParamId> {
        self.vs.trainable_ids()
    }

    /// Forward over [N,1,64,64] images to [N, v+noise] representations.
    pub fn forward_on(&self, t: &mut Tape, img: NodeId, mode: &mut Mode) -> NodeId {
        let n = t.value(img).shape()[0];
        let mut h = img;
        for (cv, bn) in &self.convs {
            h = cv.forward(t, h);
            if let Some(bn) = bn {
                h = bn.forward(t, h, mode);
            }
            h = t.leaky_relu(h, 0.2);
            h = self.drop_conv.forward(t, h, mode);
        }
        let h = t.reshape(h, &[n, self.cfg.nc * 8 * 4 * 4]);
        let h = self.fc1.forward(t, h);
        let h = t.relu(h);
        let h = self.drop_fc.forward(t, h, mode);
        self.fc2.forward(t, h)
    }

    /// Deterministic batched projection (dropout off, running batch stats).
    pub fn project_batch(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let (_, c, h, w) = images.dim();
        if c != 1 || h != STAGE1_SIZE || w != STAGE1_SIZE {
            return Err(Error::Shape(format!(
                "inverse mapper expects [N,1,{STAGE1_SIZE},{STAGE1_SIZE}], got [{c},{h},{w}]"
            )));
        }
        let mut t = Tape::new(&self.vs);
        let img = t.constant(images.clone().into_dyn());
        let r = self.forward_on(&mut t, img, &mut Mode::Eval);
        Ok(t
            .value(r)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    /// Project one [-1,1] 64x64 image.
    pub fn project(&self, image: &Array2<f64>) -> Result<Representation> {
        let (h, w) = image.dim();
        if h != STAGE1_SIZE || w != STAGE1_SIZE {
            return Err(Error::Shape(format!(
                "inverse mapper expects {STAGE1_SIZE}x{STAGE1_SIZE}, got {h}x{w}"
            )));
        }
        let mut m = Array4::zeros((1, 1, STAGE1_SIZE, STAGE1_SIZE));
        m.slice_mut(ndarray::s![0, 0, .., ..]).assign(image);
        let r = self.project_batch(&m)?;
        Ok(Representation::from_concat(
            &r.row(0).to_owned(),
            self.cfg.cond_dim,
        ))
    }

    pub fn state(&self) -> Vec<(String, Arr)> {
        let mut out = self.vs.state_dict();
        for (_, bn) in &self.convs {
            if let Some(bn) = bn {
                out.extend(bn.stats_entries());
            }
        }
        out
    }

    pub fn load_state(&mut self, state: &[(String, Arr)]) -> Result<()> {
        self.vs.load_state_dict(state).map_err(Error::Checkpoint)?;
        for (_, bn) in &self.convs {
            if let Some(bn) = bn {
                bn.load_stats(state).map_err(Error::Checkpoint)?;
            }
        }
        Ok(())
    }
}

/// Inference output: diagnosis with certainty, decoded caption and the
/// underlying representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub label: String,
    pub certainty: BTreeMap<String, f64>,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub representation: Representation,
}

/// Project an image, decode its embedding and read the diagnosis. The input
/// must be a [-1,1] 64x64 image.
pub fn infer(
    mapper: &InverseMapper,
    arae_model: &AraeModel,
    image: &Array2<f64>,
) -> Result<DiagnosisResult> {
    let representation = mapper.project(image)?;
    let (_, dists) = arae_model.decode(&representation.embedding);
    let certainty = diagnosis_certainty(&dists, &arae_model.vocab)?;
    let label = certainty
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
        .map(|(l, _)| l.clone())
        .expect("non-empty certainty");
    let label_id = arae_model.vocab.id_of(&label);
    let (tokens, _) = arae_model.decode_forced_label(&representation.embedding, label_id);
    let words = arae_model.vocab.decode_words(&tokens);
    Ok(DiagnosisResult {
        label,
        certainty,
        caption: words.join(" "),
        tokens,
        representation,
    })
}

/// The three loss components of one training step, already weighted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseLossBreakdown {
    pub total: f64,
    pub diagnosis: f64,
    pub diagnosis_weight: f64,
    pub cycle_img: f64,
    pub cycle_emb: f64,
}

/// Evaluate the full inverse-training loss on a batch without updating
/// anything (the gradient path is exercised identically during training).
#[allow(clippy::too_many_arguments)]
pub fn loss_inverse(
    epoch: usize,
    mapper: &InverseMapper,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
    images: &Array4<f64>,
    label_targets: &[usize],
    pool_images: &Array4<f64>,
    pool_embeddings: &Array2<f64>,
) -> Result<InverseLossBreakdown> {
    let mut t = Tape::new(&mapper.vs);
    let img = t.constant(images.clone().into_dyn());
    let r = mapper.forward_on(&mut t, img, &mut Mode::Eval);
    let r_val = t
        .value(r)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let (l_diag, _) = diagnosis_loss_and_grad(arae_model, &r_val, label_targets)?;
    let (l_img, _) = cycle_img_loss_and_grad(gan, &r_val, images)?;
    let l_emb = {
        let pimg = t.constant(pool_images.clone().into_dyn());
        let rp = mapper.forward_on(&mut t, pimg, &mut Mode::Eval);
        let emb_half = t.slice1(rp, 0, mapper.cfg.cond_dim);
        let target = t.constant(pool_embeddings.clone().into_dyn());
        let l = t.mse(emb_half, target);
        t.scalar(l)
    };
    let w = diagnosis_weight(epoch);
    Ok(InverseLossBreakdown {
        total: w * l_diag + l_img + l_emb,
        diagnosis: l_diag,
        diagnosis_weight: w,
        cycle_img: l_img,
        cycle_emb: l_emb,
    })
}

/// Cross-entropy over label categories at the decoder's first step, given
/// predicted representations. Returns the loss and its gradient with respect
/// to the representations (zero over the noise half).
pub fn diagnosis_loss_and_grad(
    arae_model: &AraeModel,
    r: &Array2<f64>,
    label_targets: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let n = r.nrows();
    let v = arae_model.embedding_dim();
    let labels: Vec<usize> = arae_model.vocab.label_ids().iter().copied().collect();
    let targets_local: Vec<usize> = label_targets
        .iter()
        .map(|t| {
            labels
                .iter()
                .position(|l| l == t)
                .ok_or_else(|| Error::Corpus(format!("target {t} is not a label id")))
        })
        .collect::<Result<_>>()?;
    let mut t = Tape::new(&arae_model.vs);
    let emb = t.constant(r.slice(ndarray::s![.., ..v]).to_owned().into_dyn());
    let logits = arae_model.first_step_logits_on(&mut t, emb, n);
    let logp = arae_model.label_log_probs_on(&mut t, logits);
    let picked = t.pick_rows(logp, &targets_local);
    let s = t.sum_all(picked);
    let loss = t.affine(s, -1.0 / n as f64, 0.0);
    let lv = t.scalar(loss);
    let seed = ndarray::arr1(&[1.0]).into_dyn();
    let grads = t.backward_wrt(vec![(loss, seed)], &[emb]);
    let g_emb = grads
        .node(emb)
        .expect("gradient on embedding input")
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let mut g_full = Array2::zeros(r.raw_dim());
    g_full.slice_mut(ndarray::s![.., ..v]).assign(&g_emb);
    Ok((lv, g_full))
}

/// Mean squared pixel error of G(r) against target images, with gradient
/// w.r.t. the representations (the generator is frozen).
pub fn cycle_img_loss_and_grad(
    gan: &Stage1Gan,
    r: &Array2<f64>,
    targets: &Array4<f64>,
) -> Result<(f64, Array2<f64>)> {
    let mut t = Tape::new(&gan.vs);
    let rn = t.constant(r.clone().into_dyn());
    let fake = gan.generator_on(&mut t, rn, &Mode::Eval);
    let target = t.constant(targets.clone().into_dyn());
    let loss = t.mse(fake, target);
    let lv = t.scalar(loss);
    let seed = ndarray::arr1(&[1.0]).into_dyn();
    let grads = t.backward_wrt(vec![(loss, seed)], &[rn]);
    let g = grads
        .node(rn)
        .expect("gradient on representation input")
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    Ok((lv, g))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvMapEpochLog {
    pub epoch: usize,
    pub diagnosis_loss: f64,
    pub cycle_img_loss: f64,
    pub cycle_emb_loss: f64,
    pub diagnosis_weight: f64,
    pub val_accuracy: f64,
}

pub struct InvMapTrainReport {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<InvMapEpochLog>,
}

/// Fixed bank of (embedding, generated image) pairs for the embedding cycle
/// loss; built once since the generator is frozen.
pub struct CyclePool {
    pub images: Array4<f64>,
    pub embeddings: Array2<f64>,
}

pub fn build_cycle_pool(
    gan: &Stage1Gan,
    samples: &[GanSample],
    noise_dim: usize,
    seed: u64,
) -> Result<CyclePool> {
    let mut rng = derive_rng(seed, "cycle-pool");
    let n = samples.len();
    let v = gan.cfg.cond_dim;
    let mut r = Array2::zeros((n, v + noise_dim));
    let mut embeddings = Array2::zeros((n, v));
    for (i, s) in samples.iter().enumerate() {
        embeddings.row_mut(i).assign(&s.embedding);
        r.row_mut(i)
            .slice_mut(ndarray::s![..v])
            .assign(&s.embedding);
        let z = arae::sample_noise(noise_dim, NoiseDistribution::Normal, &mut rng);
        r.row_mut(i).slice_mut(ndarray::s![v..]).assign(&z);
    }
    let mut images = Array4::zeros((n, 1, STAGE1_SIZE, STAGE1_SIZE));
    // generate in slabs to bound memory
    let slab = 64;
    for start in (0..n).step_by(slab) {
        let end = (start + slab).min(n);
        let imgs = gan.generate_batch(&r.slice(ndarray::s![start..end, ..]).to_owned())?;
        for (k, i) in (start..end).enumerate() {
            images
                .slice_mut(ndarray::s![i, 0, .., ..])
                .assign(&imgs.index_axis(ndarray::Axis(0), k));
        }
    }
    Ok(CyclePool { images, embeddings })
}

/// Percentage of samples whose inferred label matches the truth; eval-mode,
/// center crops.
pub fn diagnosis_accuracy_on(
    mapper: &InverseMapper,
    arae_model: &AraeModel,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let mut rng = derive_rng(0, "acc-eval");
    let mut hits = 0usize;
    for chunk in samples.chunks(64) {
        let mut imgs = Array4::zeros((chunk.len(), 1, STAGE1_SIZE, STAGE1_SIZE));
        for (i, s) in chunk.iter().enumerate() {
            let x = corpus::augment_image(&s.image, STAGE1_SIZE, AugmentMode::Eval, &mut rng)?;
            imgs.slice_mut(ndarray::s![i, 0, .., ..]).assign(&x);
        }
        let r = mapper.project_batch(&imgs)?;
        let labels = predict_labels(arae_model, &r)?;
        for (s, l) in chunk.iter().zip(labels) {
            if l == s.label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Batched first-step label prediction from representations.
pub fn predict_labels(arae_model: &AraeModel, r: &Array2<f64>) -> Result<Vec<String>> {
    let n = r.nrows();
    let v = arae_model.embedding_dim();
    let labels: Vec<usize> = arae_model.vocab.label_ids().iter().copied().collect();
    let mut t = Tape::new(&arae_model.vs);
    let emb = t.constant(r.slice(ndarray::s![.., ..v]).to_owned().into_dyn());
    let logits = arae_model.first_step_logits_on(&mut t, emb, n);
    let logp = arae_model.label_log_probs_on(&mut t, logits);
    let lp = t
        .value(logp)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    Ok((0..n)
        .map(|i| {
            let row = lp.row(i);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            arae_model.vocab.word_of(labels[best]).to_string()
        })
        .collect())
}

/// Train the inverse mapper against the frozen ARAE and stage-I generator.
/// Returns the checkpoint with the best validation diagnosis accuracy.
pub fn train_invmap(
    mapper: &mut InverseMapper,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
    train: &[Sample],
    val: &[Sample],
    on_epoch: impl Fn(&InvMapEpochLog),
) -> Result<InvMapTrainReport> {
    let cfg = mapper.cfg.clone();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Corpus("empty train or validation split".into()));
    }
    let gan_train = crate::t2igan::gan_samples(train, arae_model)?;
    let pool = if cfg.diagnosis_only {
        None
    } else {
        Some(build_cycle_pool(gan, &gan_train, cfg.noise_dim, cfg.seed)?)
    };
    let label_ids: Vec<usize> = train
        .iter()
        .map(|s| arae_model.vocab.id_of(&s.label))
        .collect();

    let mut order_rng = derive_rng(cfg.seed, "invmap-order");
    let mut aug_rng = derive_rng(cfg.seed, "invmap-augment");
    let mut dropout_rng = derive_rng(cfg.seed, "invmap-dropout");
    let mut opt = Adam::new(mapper.params(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut best: Option<(usize, f64, Vec<(String, Arr)>)> = None;
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let w_diag = diagnosis_weight(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let n = chunk.len();
            let mut imgs = Array4::zeros((n, 1, STAGE1_SIZE, STAGE1_SIZE));
            for (i, &ix) in chunk.iter().enumerate() {
                let x = corpus::augment_image(
                    &train[ix].image,
                    STAGE1_SIZE,
                    AugmentMode::Train,
                    &mut aug_rng,
                )?;
                imgs.slice_mut(ndarray::s![i, 0, .., ..]).assign(&x);
            }
            let targets: Vec<usize> = chunk.iter().map(|&ix| label_ids[ix]).collect();

            let mut t = Tape::new(&mapper.vs);
            let img = t.constant(imgs.clone().into_dyn());
            let mut mode = Mode::Train(&mut dropout_rng);
            let r = mapper.forward_on(&mut t, img, &mut mode);
            let r_val = t
                .value(r)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();

            // foreign gradients through the frozen decoder and generator
            let (l_diag, g_diag) = diagnosis_loss_and_grad(arae_model, &r_val, &targets)?;
            let mut seed_r = g_diag.mapv(|v| v * w_diag);
            let mut l_img = 0.0;
            if !cfg.diagnosis_only {
                let (li, g_img) = cycle_img_loss_and_grad(gan, &r_val, &imgs)?;
                l_img = li;
                seed_r += &g_img;
            }

            let mut seeds: Vec<(NodeId, Arr)> = vec![(r, seed_r.into_dyn())];
            let mut l_emb = 0.0;
            if let Some(pool) = &pool {
                let pimgs = {
                    let mut m = Array4::zeros((n, 1, STAGE1_SIZE, STAGE1_SIZE));
                    let mut e = Array2::zeros((n, cfg.cond_dim));
                    for (i, &ix) in chunk.iter().enumerate() {
                        m.slice_mut(ndarray::s![i, .., .., ..])
                            .assign(&pool.images.slice(ndarray::s![ix, .., .., ..]));
                        e.row_mut(i).assign(&pool.embeddings.row(ix));
                    }
                    (m, e)
                };
                let pimg = t.constant(pimgs.0.into_dyn());
                let rp = mapper.forward_on(&mut t, pimg, &mut mode);
                let emb_half = t.slice1(rp, 0, cfg.cond_dim);
                let target = t.constant(pimgs.1.into_dyn());
                let l = t.mse(emb_half, target);
                l_emb = t.scalar(l);
                seeds.push((l, ndarray::arr1(&[1.0]).into_dyn()));
            }
            let total = w_diag * l_diag + l_img + l_emb;
            if !total.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "inverse-mapping loss {total} at epoch {epoch}"
                )));
            }
            let grads = t.backward_multi(seeds);
            opt.step(&mut mapper.vs, &grads);

            sums.0 += l_diag;
            sums.1 += l_img;
            sums.2 += l_emb;
            batches += 1;
        }

        let val_accuracy = diagnosis_accuracy_on(mapper, arae_model, val)?;
        let entry = InvMapEpochLog {
            epoch,
            diagnosis_loss: sums.0 / batches.max(1) as f64,
            cycle_img_loss: sums.1 / batches.max(1) as f64,
            cycle_emb_loss: sums.2 / batches.max(1) as f64,
            diagnosis_weight: w_diag,
            val_accuracy,
        };
        let improved = best
            .as_ref()
            .map(|(_, b, _)| val_accuracy > *b)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, val_accuracy, mapper.state()));
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (best_epoch, best_val_accuracy, state) = best.unwrap();
    mapper.load_state(&state)?;
    Ok(InvMapTrainReport {
        best_epoch,
        best_val_accuracy,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_schedule_values() {
        assert_eq!(diagnosis_weight(0), 0.0);
        assert_eq!(diagnosis_weight(9), 1.0);
        assert_eq!(diagnosis_weight(99), 2.0);
    }

    #[test]
    fn mapper_output_dimension_and_split() {
        let cfg = InvMapConfig {
            cond_dim: 12,
            noise_dim: 6,
            nc: 4,
            fc_hidden: 32,
            ..Default::default()
        };
        let mapper = InverseMapper::new(cfg);
        let img = Array2::from_shape_fn((64, 64), |(y, x)| ((y + x) % 5) as f64 / 5.0 - 0.5);
        let r = mapper.project(&img).unwrap();
        assert_eq!(r.embedding.dim(), 12);
        assert_eq!(r.noise.len(), 6);
        assert_eq!(r.dim(), 18);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mapper = InverseMapper::new(InvMapConfig {
            cond_dim: 8,
            noise_dim: 4,
            nc: 4,
            fc_hidden: 16,
            ..Default::default()
        });
        let img = Array2::zeros((32, 32));
        assert!(mapper.project(&img).is_err());
    }

    #[test]
    fn projection_is_deterministic() {
        let mapper = InverseMapper::new(InvMapConfig {
            cond_dim: 8,
            noise_dim: 4,
            nc: 4,
            fc_hidden: 16,
            ..Default::default()
        });
        let img = Array2::from_shape_fn((64, 64), |(y, x)| ((y * 64 + x) % 11) as f64 / 11.0);
        let a = mapper.project(&img).unwrap();
        let b = mapper.project(&img).unwrap();
        assert_eq!(a.concat(), b.concat());
    }
}
