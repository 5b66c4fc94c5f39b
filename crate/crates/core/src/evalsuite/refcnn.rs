//! Reference CNN classifier and the activation-based saliency baseline:
//! channel-wise sum of squared activations at a chosen depth, normalized and
//! upsampled to the input size.

use crate::corpus::{self, AugmentMode, Sample};
use crate::error::{Error, Result};
use crate::imgutil;
use cxrjust_nn::adam::Adam;
use cxrjust_nn::layers::{BatchNorm, Conv2d, Linear, Mode};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::{NodeId, Tape};
use cxrjust_nn::VarStore;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const INPUT_SIZE: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefCnnConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RefCnnConfig {
    fn default() -> Self {
        RefCnnConfig {
            channels: 8,
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyLayer {
    /// After the second conv block (16x16 feature map).
    Intermediate,
    /// After the third conv block (8x8 feature map).
    Abstract,
}

impl std::str::FromStr for SaliencyLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intermediate" => Ok(SaliencyLayer::Intermediate),
            "abstract" => Ok(SaliencyLayer::Abstract),
            other => Err(Error::Eval(format!(
                "unknown saliency layer `{other}` (expected intermediate|abstract)"
            ))),
        }
    }
}

/// Small conv classifier over 64x64 single-channel inputs.
pub struct ReferenceCnn {
    pub vs: VarStore,
    pub labels: Vec<String>,
    c0: Conv2d,
    c1: Conv2d,
    bn1: BatchNorm,
    c2: Conv2d,
    bn2: BatchNorm,
    fc: Linear,
    channels: usize,
}

impl ReferenceCnn {
    pub fn new(labels: Vec<String>, cfg: &RefCnnConfig) -> Self {
        let mut vs = VarStore::new();
        let mut rng = derive_rng(cfg.seed, "refcnn-init");
        let c = cfg.channels;
        let c0 = Conv2d::new(&mut vs, "r.c0", 1, c, 4, 2, 1, true, &mut rng);
        let c1 = Conv2d::new(&mut vs, "r.c1", c, 2 * c, 4, 2, 1, false, &mut rng);
        let bn1 = BatchNorm::new(&mut vs, "r.c1.bn", 2 * c, &mut rng);
        let c2 = Conv2d::new(&mut vs, "r.c2", 2 * c, 4 * c, 4, 2, 1, false, &mut rng);
        let bn2 = BatchNorm::new(&mut vs, "r.c2.bn", 4 * c, &mut rng);
        let fc = Linear::new(&mut vs, "r.fc", 4 * c * 8 * 8, labels.len(), &mut rng);
        ReferenceCnn {
            vs,
            labels,
            c0,
            c1,
            bn1,
            c2,
            bn2,
            fc,
            channels: c,
        }
    }

    /// Forward pass; also returns the activation maps at the two saliency
    /// depths.
    fn forward_full(
        &self,
        t: &mut Tape,
        img: NodeId,
        mode: &Mode,
    ) -> (NodeId, NodeId, NodeId) {
        let n = t.value(img).shape()[0];
        let h = self.c0.forward(t, img);
        let h = t.leaky_relu(h, 0.2);
        let h = self.c1.forward(t, h);
        let h = self.bn1.forward(t, h, mode);
        let intermediate = t.leaky_relu(h, 0.2);
        let h = self.c2.forward(t, intermediate);
        let h = self.bn2.forward(t, h, mode);
        let abstract_act = t.leaky_relu(h, 0.2);
        let flat = t.reshape(abstract_act, &[n, self.channels * 4 * 8 * 8]);
        let logits = self.fc.forward(t, flat);
        (logits, intermediate, abstract_act)
    }

    /// Predicted label for one [-1,1] 64x64 image.
    pub fn predict(&self, image: &Array2<f64>) -> Result<String> {
        let logits = self.logits_batch(&stack(&[image.clone()])?)?;
        let row = logits.row(0);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        Ok(self.labels[best].clone())
    }

    /// Full state (parameters plus batch-norm statistics).
    pub fn state(&self) -> Vec<(String, cxrjust_nn::Arr)> {
        let mut out = self.vs.state_dict();
        out.extend(self.bn1.stats_entries());
        out.extend(self.bn2.stats_entries());
        out
    }

    pub fn load_state(&mut self, state: &[(String, cxrjust_nn::Arr)]) -> Result<()> {
        self.vs.load_state_dict(state).map_err(Error::Checkpoint)?;
        self.bn1.load_stats(state).map_err(Error::Checkpoint)?;
        self.bn2.load_stats(state).map_err(Error::Checkpoint)?;
        Ok(())
    }

    pub fn logits_batch(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        check_input(images)?;
        let mut t = Tape::new(&self.vs);
        let img = t.constant(images.clone().into_dyn());
        let (logits, _, _) = self.forward_full(&mut t, img, &Mode::Eval);
        Ok(t
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }
}

fn check_input(images: &Array4<f64>) -> Result<()> {
    let (_, c, h, w) = images.dim();
    if c != 1 || h != INPUT_SIZE || w != INPUT_SIZE {
        return Err(Error::Shape(format!(
            "reference CNN expects [N,1,{INPUT_SIZE},{INPUT_SIZE}], got [{c},{h},{w}]"
        )));
    }
    Ok(())
}

fn stack(images: &[Array2<f64>]) -> Result<Array4<f64>> {
    let n = images.len();
    let mut out = Array4::zeros((n, 1, INPUT_SIZE, INPUT_SIZE));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (INPUT_SIZE, INPUT_SIZE) {
            return Err(Error::Shape(format!(
                "expected {INPUT_SIZE}x{INPUT_SIZE} image, got {:?}",
                img.dim()
            )));
        }
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(img);
    }
    Ok(out)
}

/// Train the reference classifier with plain cross-entropy.
pub fn train_reference_cnn(
    cnn: &mut ReferenceCnn,
    cfg: &RefCnnConfig,
    train: &[Sample],
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Corpus("empty training set".into()));
    }
    let mut order_rng = derive_rng(cfg.seed, "refcnn-order");
    let mut aug_rng = derive_rng(cfg.seed, "refcnn-augment");
    let mut dropout_rng = derive_rng(cfg.seed, "refcnn-dropout");
    let mut opt = Adam::new(cnn.vs.trainable_ids(), cfg.lr, 0.9, 0.999);
    let targets: Vec<usize> = train
        .iter()
        .map(|s| {
            cnn.labels
                .iter()
                .position(|l| l == &s.label)
                .ok_or_else(|| Error::Corpus(format!("unknown label {}", s.label)))
        })
        .collect::<Result<_>>()?;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<Array2<f64>> = chunk
                .iter()
                .map(|&i| {
                    corpus::augment_image(
                        &train[i].image,
                        INPUT_SIZE,
                        AugmentMode::Train,
                        &mut aug_rng,
                    )
                })
                .collect::<Result<_>>()?;
            let batch = stack(&imgs)?;
            let ids: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let mut t = Tape::new(&cnn.vs);
            let img = t.constant(batch.into_dyn());
            let mode = Mode::Train(&mut dropout_rng);
            let (logits, _, _) = cnn.forward_full(&mut t, img, &mode);
            let logp = t.log_softmax(logits);
            let picked = t.pick_rows(logp, &ids);
            let s = t.sum_all(picked);
            let loss = t.affine(s, -1.0 / ids.len() as f64, 0.0);
            let lv = t.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "classifier loss {lv} at epoch {epoch}"
                )));
            }
            let grads = t.backward(loss);
            opt.step(&mut cnn.vs, &grads);
        }
    }
    Ok(())
}

/// Activation-based saliency: sum of squared channel activations at the
/// chosen layer, min-max normalized to [0,1] and bilinearly upsampled to the
/// input size. A constant activation map normalizes to all zeros.
pub fn saliency_baseline(
    cnn: &ReferenceCnn,
    image: &Array2<f64>,
    layer: SaliencyLayer,
) -> Result<Array2<f64>> {
    let batch = stack(&[image.clone()])?;
    let mut t = Tape::new(&cnn.vs);
    let img = t.constant(batch.into_dyn());
    let (_, intermediate, abstract_act) = cnn.forward_full(&mut t, img, &Mode::Eval);
    let chosen = match layer {
        SaliencyLayer::Intermediate => intermediate,
        SaliencyLayer::Abstract => abstract_act,
    };
    let act = t.value(chosen);
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let mut map = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = act[[0, ci, y, x]];
                map[[y, x]] += v * v;
            }
        }
    }
    let up = imgutil::resize_bilinear(&map, INPUT_SIZE, INPUT_SIZE);
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Ok(Array2::zeros((INPUT_SIZE, INPUT_SIZE)));
    }
    Ok(up.mapv(|v| (v - lo) / (hi - lo)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cnn() -> ReferenceCnn {
        ReferenceCnn::new(
            vec!["normal".into(), "cardiomegaly".into()],
            &RefCnnConfig {
                channels: 4,
                ..Default::default()
            },
        )
    }

    #[test]
    fn heatmap_shape_and_range() {
        let cnn = tiny_cnn();
        let img = Array2::from_shape_fn((64, 64), |(y, x)| {
            ((y as f64 - 32.0).powi(2) + (x as f64 - 32.0).powi(2)).sqrt() / 45.0 - 1.0
        });
        for layer in [SaliencyLayer::Intermediate, SaliencyLayer::Abstract] {
            let m = saliency_baseline(&cnn, &img, layer).unwrap();
            assert_eq!(m.dim(), (64, 64));
            assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let cnn = tiny_cnn();
        let img = Array2::from_elem((64, 64), 0.25);
        let m = saliency_baseline(&cnn, &img, SaliencyLayer::Abstract).unwrap();
        // border effects from zero padding are excluded
        let interior = m.slice(ndarray::s![16..48, 16..48]);
        let lo = interior.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = interior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-3, "interior varies by {}", hi - lo);
    }

    #[test]
    fn unknown_layer_name_rejected() {
        assert!("gradcam".parse::<SaliencyLayer>().is_err());
        assert!("intermediate".parse::<SaliencyLayer>().is_ok());
    }
}
