//! Adversarially regularized autoencoder for descriptions: a single-layer
//! LSTM encoder/decoder pair whose continuous code space is smoothed by a
//! critic/generator game in embedding space. The encoder hidden state is the
//! sentence embedding; concatenated with a noise vector it becomes the
//! representation bridging text and image.

use crate::corpus::{Description, Vocabulary, BOS, EOS, PAD, SEQ_LEN};
use crate::error::{Error, Result};
use cxrjust_nn::adam::{clamp_weights, Adam};
use cxrjust_nn::layers::{Embedding as EmbeddingTable, Linear, LstmCell};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::{NodeId, Tape};
use cxrjust_nn::{Arr, VarStore};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AraeConfig {
    /// Sentence embedding dimension v.
    pub embedding_dim: usize,
    /// Word embedding width feeding both LSTMs.
    pub word_dim: usize,
    /// Hidden width of the 3-layer critic / generator MLPs.
    pub adv_hidden: usize,
    /// Prior noise width for the latent generator.
    pub gen_noise_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_ae: f64,
    pub lr_adv: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight clamp for the embedding critic.
    pub critic_clip: f64,
    pub seed: u64,
}

impl Default for AraeConfig {
    fn default() -> Self {
        AraeConfig {
            embedding_dim: 300,
            word_dim: 300,
            adv_hidden: 300,
            gen_noise_dim: 100,
            epochs: 300,
            batch_size: 32,
            lr_ae: 1e-3,
            lr_adv: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            critic_clip: 0.05,
            seed: 1,
        }
    }
}

/// Continuous sentence embedding (encoder hidden state or generator output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Array1<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDistribution {
    Normal,
    Uniform,
}

impl std::str::FromStr for NoiseDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(NoiseDistribution::Normal),
            "uniform" => Ok(NoiseDistribution::Uniform),
            other => Err(Error::Config(format!(
                "unsupported noise distribution `{other}` (expected normal|uniform)"
            ))),
        }
    }
}

/// Embedding concatenated with its noise vector. The noise is drawn once and
/// stored; splitting recovers both halves exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub embedding: Embedding,
    pub noise: Array1<f64>,
}

impl Representation {
    pub fn dim(&self) -> usize {
        self.embedding.dim() + self.noise.len()
    }

    pub fn concat(&self) -> Array1<f64> {
        ndarray::concatenate(
            Axis(0),
            &[self.embedding.0.view(), self.noise.view()],
        )
        .unwrap()
    }

    /// Split a raw vector back into (embedding, noise) at `v_dim`.
    pub fn from_concat(values: &Array1<f64>, v_dim: usize) -> Self {
        Representation {
            embedding: Embedding(values.slice(ndarray::s![..v_dim]).to_owned()),
            noise: values.slice(ndarray::s![v_dim..]).to_owned(),
        }
    }
}

/// Build a representation with fresh noise from a dedicated stream.
pub fn make_representation(
    embedding: Embedding,
    noise_dim: usize,
    distribution: NoiseDistribution,
    seed: u64,
) -> Result<Representation> {
    if noise_dim == 0 {
        return Err(Error::Config("noise_dim must be positive".into()));
    }
    let mut rng = derive_rng(seed, "representation-noise");
    let noise = sample_noise(noise_dim, distribution, &mut rng);
    Ok(Representation {
        embedding,
        noise,
    })
}

pub fn sample_noise(
    noise_dim: usize,
    distribution: NoiseDistribution,
    rng: &mut ChaCha12Rng,
) -> Array1<f64> {
    use rand_distr::{Distribution, Normal, Uniform};
    match distribution {
        NoiseDistribution::Normal => {
            let d = Normal::new(0.0, 1.0).unwrap();
            Array1::from_iter((0..noise_dim).map(|_| d.sample(rng)))
        }
        NoiseDistribution::Uniform => {
            let d = Uniform::new(-1.0, 1.0).unwrap();
            Array1::from_iter((0..noise_dim).map(|_| d.sample(rng)))
        }
    }
}

/// Trained ARAE: immutable after training, safe for concurrent encode/decode.
pub struct AraeModel {
    pub vs: VarStore,
    pub cfg: AraeConfig,
    pub vocab: Vocabulary,
    word_emb: EmbeddingTable,
    encoder: LstmCell,
    decoder: LstmCell,
    dec_out: Linear,
    gen: Vec<Linear>,
    critic: Vec<Linear>,
}

impl AraeModel {
    pub fn new(vocab: Vocabulary, cfg: AraeConfig) -> Self {
        let mut vs = VarStore::new();
        let mut rng = derive_rng(cfg.seed, "arae-init");
        let v = cfg.embedding_dim;
        let word_emb = EmbeddingTable::new(&mut vs, "word_emb", vocab.size(), cfg.word_dim, &mut rng);
        let encoder = LstmCell::new(&mut vs, "encoder", cfg.word_dim, v, &mut rng);
        let decoder = LstmCell::new(&mut vs, "decoder", cfg.word_dim, v, &mut rng);
        let dec_out = Linear::new(&mut vs, "dec_out", v, vocab.size(), &mut rng);
        let h = cfg.adv_hidden;
        let gen = vec![
            Linear::new(&mut vs, "gen.0", cfg.gen_noise_dim, h, &mut rng),
            Linear::new(&mut vs, "gen.1", h, h, &mut rng),
            Linear::new(&mut vs, "gen.2", h, v, &mut rng),
        ];
        let critic = vec![
            Linear::new(&mut vs, "critic.0", v, h, &mut rng),
            Linear::new(&mut vs, "critic.1", h, h / 2, &mut rng),
            Linear::new(&mut vs, "critic.2", h / 2, 1, &mut rng),
        ];
        AraeModel {
            vs,
            cfg,
            vocab,
            word_emb,
            encoder,
            decoder,
            dec_out,
            gen,
            critic,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    fn ae_params(&self) -> Vec<cxrjust_nn::ParamId> {
        vec![
            self.word_emb.table,
            self.encoder.w_ih,
            self.encoder.w_hh,
            self.encoder.b,
            self.decoder.w_ih,
            self.decoder.w_hh,
            self.decoder.b,
            self.dec_out.w,
            self.dec_out.b,
        ]
    }

    fn enc_params(&self) -> Vec<cxrjust_nn::ParamId> {
        vec![
            self.word_emb.table,
            self.encoder.w_ih,
            self.encoder.w_hh,
            self.encoder.b,
        ]
    }

    fn gen_params(&self) -> Vec<cxrjust_nn::ParamId> {
        self.gen.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    fn critic_params(&self) -> Vec<cxrjust_nn::ParamId> {
        self.critic.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Encoder forward over padded sequences: hidden state at each sample's
    /// last real token. `seqs` rows are SEQ_LEN ids.
    pub fn encode_on(&self, t: &mut Tape, seqs: &[Vec<usize>]) -> NodeId {
        let n = seqs.len();
        let v = self.cfg.embedding_dim;
        let (mut h, mut c) = self.encoder.zero_state(t, n);
        for step in 0..SEQ_LEN {
            let tokens: Vec<usize> = seqs.iter().map(|s| s[step]).collect();
            // carry the previous state through pad positions
            let mask_vals: Vec<f64> = seqs
                .iter()
                .map(|s| if s[step] == PAD { 0.0 } else { 1.0 })
                .collect();
            if mask_vals.iter().all(|&m| m == 0.0) {
                break;
            }
            let x = self.word_emb.forward(t, &tokens);
            let (h_new, c_new) = self.encoder.step(t, x, h, c);
            let mut mask = Array2::<f64>::zeros((n, v));
            for (i, &m) in mask_vals.iter().enumerate() {
                mask.row_mut(i).fill(m);
            }
            let inv = mask.mapv(|m| 1.0 - m);
            let hm = t.mul_const(h_new, mask.clone().into_dyn());
            let hp = t.mul_const(h, inv.clone().into_dyn());
            h = t.add(hm, hp);
            let cm = t.mul_const(c_new, mask.into_dyn());
            let cp = t.mul_const(c, inv.into_dyn());
            c = t.add(cm, cp);
        }
        h
    }

    /// Teacher-forced reconstruction loss (mean CE over real target tokens)
    /// plus the argmax token accuracy of the same pass. Targets are the
    /// sequences themselves; inputs are BOS-shifted.
    pub fn reconstruction_on(
        &self,
        t: &mut Tape,
        seqs: &[Vec<usize>],
        emb: NodeId,
    ) -> (NodeId, f64) {
        let n = seqs.len();
        let mut h = emb;
        let zeros = t.constant(Array2::<f64>::zeros((n, self.cfg.embedding_dim)).into_dyn());
        let mut c = zeros;
        let mut total: Option<NodeId> = None;
        let mut count = 0usize;
        let mut hits = 0usize;
        for step in 0..SEQ_LEN {
            let inputs: Vec<usize> = seqs
                .iter()
                .map(|s| if step == 0 { BOS } else { s[step - 1] })
                .collect();
            let targets: Vec<usize> = seqs.iter().map(|s| s[step]).collect();
            let weights: Vec<f64> = targets
                .iter()
                .map(|&tok| if tok == PAD { 0.0 } else { 1.0 })
                .collect();
            let n_real = weights.iter().sum::<f64>() as usize;
            if n_real == 0 {
                break;
            }
            count += n_real;
            let x = self.word_emb.forward(t, &inputs);
            let (h_new, c_new) = self.decoder.step(t, x, h, c);
            h = h_new;
            c = c_new;
            let logits = self.dec_out.forward(t, h);
            {
                let lv = t
                    .value(logits)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                for (i, row) in lv.rows().into_iter().enumerate() {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap();
                    if argmax == targets[i] {
                        hits += 1;
                    }
                }
            }
            let logp = t.log_softmax(logits);
            let picked = t.pick_rows(logp, &targets);
            let masked = t.mul_const(picked, Array1::from_vec(weights).into_dyn());
            let s = t.sum_all(masked);
            total = Some(match total {
                Some(acc) => t.add(acc, s),
                None => s,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = t.affine(total, -1.0 / count as f64, 0.0);
        (loss, hits as f64 / count as f64)
    }

    /// Critic value, mean over the batch.
    pub fn critic_on(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.critic.iter().enumerate() {
            h = layer.forward(t, h);
            if i + 1 < self.critic.len() {
                h = t.leaky_relu(h, 0.2);
            }
        }
        t.mean_all(h)
    }

    /// Latent generator forward from prior noise rows.
    pub fn generator_on(&self, t: &mut Tape, z: NodeId) -> NodeId {
        let mut h = z;
        for (i, layer) in self.gen.iter().enumerate() {
            h = layer.forward(t, h);
            if i + 1 < self.gen.len() {
                h = t.relu(h);
            }
        }
        h
    }

    /// One decoder step on the tape from an embedding node (BOS input);
    /// returns full-vocabulary logits, differentiable w.r.t. the embedding.
    pub fn first_step_logits_on(&self, t: &mut Tape, emb: NodeId, n: usize) -> NodeId {
        let zeros = t.constant(Array2::<f64>::zeros((n, self.cfg.embedding_dim)).into_dyn());
        let x = self.word_emb.forward(t, &vec![BOS; n]);
        let (h, _c) = self.decoder.step(t, x, emb, zeros);
        self.dec_out.forward(t, h)
    }

    /// Restrict logits [N, V] to the label-word columns (ascending id
    /// order), as log-probabilities renormalized over labels.
    pub fn label_log_probs_on(&self, t: &mut Tape, logits: NodeId) -> NodeId {
        let labels: Vec<usize> = self.vocab.label_ids().iter().copied().collect();
        let vsize = self.vocab.size();
        let mut sel = Array2::<f64>::zeros((vsize, labels.len()));
        for (j, &id) in labels.iter().enumerate() {
            sel[[id, j]] = 1.0;
        }
        let seln = t.constant(sel.into_dyn());
        let restricted = t.matmul(logits, seln);
        t.log_softmax(restricted)
    }

    /// Deterministic batched encoder (no grads kept).
    pub fn encode_batch(&self, descriptions: &[&Description]) -> Result<Array2<f64>> {
        let seqs: Vec<Vec<usize>> = descriptions
            .iter()
            .map(|d| self.check_sequence(d))
            .collect::<Result<_>>()?;
        let mut t = Tape::new(&self.vs);
        let h = self.encode_on(&mut t, &seqs);
        Ok(t.value(h)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    fn check_sequence(&self, d: &Description) -> Result<Vec<usize>> {
        let seq = d.sequence(&self.vocab);
        for &tok in &seq {
            if tok >= self.vocab.size() {
                return Err(Error::Corpus(format!(
                    "token id {tok} out of range for vocabulary of {}",
                    self.vocab.size()
                )));
            }
        }
        Ok(seq)
    }

    /// Encode one description to its sentence embedding.
    pub fn encode(&self, description: &Description) -> Result<Embedding> {
        let m = self.encode_batch(&[description])?;
        Ok(Embedding(m.row(0).to_owned()))
    }

    /// Greedy decoding from an embedding until EOS or the length cap.
    /// Returns the emitted tokens and the full categorical distribution at
    /// each step.
    pub fn decode(&self, embedding: &Embedding) -> (Vec<usize>, Array2<f64>) {
        let mut t = Tape::new(&self.vs);
        let emb = t.constant(
            embedding
                .0
                .view()
                .into_shape_with_order((1, embedding.dim()))
                .unwrap()
                .to_owned()
                .into_dyn(),
        );
        let zeros = t.constant(Array2::<f64>::zeros((1, self.cfg.embedding_dim)).into_dyn());
        let mut h = emb;
        let mut c = zeros;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut dists = Vec::new();
        for _ in 0..SEQ_LEN {
            let x = self.word_emb.forward(&mut t, &[prev]);
            let (h2, c2) = self.decoder.step(&mut t, x, h, c);
            h = h2;
            c = c2;
            let logits = self.dec_out.forward(&mut t, h);
            let probs = t.softmax(logits);
            let row = t.value(probs).view().into_dimensionality::<ndarray::Ix1>();
            let row = match row {
                Ok(r) => r.to_owned(),
                Err(_) => t
                    .value(probs)
                    .view()
                    .into_shape_with_order(self.vocab.size())
                    .unwrap()
                    .to_owned(),
            };
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            dists.push(row);
            tokens.push(argmax);
            if argmax == EOS {
                break;
            }
            prev = argmax;
        }
        let vsize = self.vocab.size();
        let mut out = Array2::zeros((dists.len(), vsize));
        for (i, d) in dists.iter().enumerate() {
            out.row_mut(i).assign(d);
        }
        (tokens, out)
    }

    /// Greedy decoding with the first emitted token forced to a given label
    /// word (the remaining steps condition on it). The recorded step
    /// distributions are the unconstrained ones.
    pub fn decode_forced_label(
        &self,
        embedding: &Embedding,
        label_id: usize,
    ) -> (Vec<usize>, Array2<f64>) {
        let mut t = Tape::new(&self.vs);
        let emb = t.constant(
            embedding
                .0
                .view()
                .into_shape_with_order((1, embedding.dim()))
                .unwrap()
                .to_owned()
                .into_dyn(),
        );
        let zeros = t.constant(Array2::<f64>::zeros((1, self.cfg.embedding_dim)).into_dyn());
        let mut h = emb;
        let mut c = zeros;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut dists: Vec<Array1<f64>> = Vec::new();
        for step in 0..SEQ_LEN {
            let x = self.word_emb.forward(&mut t, &[prev]);
            let (h2, c2) = self.decoder.step(&mut t, x, h, c);
            h = h2;
            c = c2;
            let logits = self.dec_out.forward(&mut t, h);
            let probs = t.softmax(logits);
            let row = t
                .value(probs)
                .view()
                .into_shape_with_order(self.vocab.size())
                .unwrap()
                .to_owned();
            let emitted = if step == 0 {
                label_id
            } else {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            };
            dists.push(row);
            tokens.push(emitted);
            if emitted == EOS {
                break;
            }
            prev = emitted;
        }
        let mut out = Array2::zeros((dists.len(), self.vocab.size()));
        for (i, d) in dists.iter().enumerate() {
            out.row_mut(i).assign(d);
        }
        (tokens, out)
    }

    /// Free-running reconstruction: fraction of descriptions whose decoded
    /// tokens reproduce the original exactly, and token-level accuracy.
    pub fn reconstruction_metrics(&self, descriptions: &[&Description]) -> Result<(f64, f64)> {
        if descriptions.is_empty() {
            return Err(Error::Corpus("no descriptions".into()));
        }
        let emb = self.encode_batch(descriptions)?;
        let mut exact = 0usize;
        let mut tok_hits = 0usize;
        let mut tok_total = 0usize;
        for (i, d) in descriptions.iter().enumerate() {
            let (decoded, _) = self.decode(&Embedding(emb.row(i).to_owned()));
            let truth: Vec<usize> = d.sequence(&self.vocab)[..d.real_len()].to_vec();
            if decoded == truth {
                exact += 1;
            }
            for (j, &tok) in truth.iter().enumerate() {
                tok_total += 1;
                if decoded.get(j) == Some(&tok) {
                    tok_hits += 1;
                }
            }
        }
        Ok((
            exact as f64 / descriptions.len() as f64,
            tok_hits as f64 / tok_total as f64,
        ))
    }
}

/// Certainty over diagnosis labels: the first-step distribution restricted
/// to label words and renormalized.
pub fn diagnosis_certainty(
    per_step_distributions: &Array2<f64>,
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, f64>> {
    if per_step_distributions.nrows() == 0 {
        return Err(Error::Eval("empty distribution sequence".into()));
    }
    let first = per_step_distributions.row(0);
    let mut out = BTreeMap::new();
    let mut total = 0.0;
    for &id in vocab.label_ids() {
        let p = first[id];
        total += p;
        out.insert(vocab.word_of(id).to_string(), p);
    }
    if !(total.is_finite() && total > 1e-12) {
        return Err(Error::Eval(
            "degenerate model: no probability mass on label words".into(),
        ));
    }
    for v in out.values_mut() {
        *v /= total;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AraeEpochLog {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_token_accuracy: f64,
    pub critic_gap_mean_abs: f64,
}

pub struct AraeTrainReport {
    pub best_epoch: usize,
    pub best_val_ce: f64,
    pub log: Vec<AraeEpochLog>,
    /// Per-batch signed critic gap (real minus generated score).
    pub critic_gap_trace: Vec<f64>,
}

/// Train the ARAE: each batch takes one autoencoder step, one critic step
/// (weight-clamped) and one adversarial step updating encoder and generator.
/// Returns the parameters of the epoch with the lowest validation
/// reconstruction error.
pub fn train_arae(
    model: &mut AraeModel,
    train: &[&Description],
    val: &[&Description],
    on_epoch: impl Fn(&AraeEpochLog),
) -> Result<AraeTrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Corpus("empty train or validation split".into()));
    }
    let cfg = model.cfg.clone();
    let mut rng = derive_rng(cfg.seed, "arae-train");
    let mut opt_ae = Adam::new(model.ae_params(), cfg.lr_ae, cfg.beta1, cfg.beta2);
    let mut opt_critic = Adam::new(model.critic_params(), cfg.lr_adv, cfg.beta1, cfg.beta2);
    let mut adv_params = model.enc_params();
    adv_params.extend(model.gen_params());
    let mut opt_adv = Adam::new(adv_params, cfg.lr_adv, cfg.beta1, cfg.beta2);

    let train_seqs: Vec<Vec<usize>> = train
        .iter()
        .map(|d| model.check_sequence(d))
        .collect::<Result<_>>()?;
    let val_seqs: Vec<Vec<usize>> = val
        .iter()
        .map(|d| model.check_sequence(d))
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, f64, Vec<(String, Arr)>)> = None;
    let mut log = Vec::new();
    let mut gap_trace = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_ce = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let n = seqs.len();

            // autoencoder step
            {
                let mut t = Tape::new(&model.vs);
                let emb = model.encode_on(&mut t, &seqs);
                let (loss, _) = model.reconstruction_on(&mut t, &seqs, emb);
                let lv = t.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "reconstruction loss {lv} at epoch {epoch}"
                    )));
                }
                epoch_ce += lv;
                n_batches += 1;
                let grads = t.backward(loss);
                opt_ae.step(&mut model.vs, &grads);
            }

            // critic step: widen the real-vs-generated score gap
            {
                let mut t = Tape::new(&model.vs);
                let emb = model.encode_on(&mut t, &seqs);
                let real = t.constant(t.value(emb).clone()); // detached
                let z = t.constant(gaussian(n, cfg.gen_noise_dim, &mut rng));
                let fake_live = model.generator_on(&mut t, z);
                let fake = t.constant(t.value(fake_live).clone()); // detached
                let f_real = model.critic_on(&mut t, real);
                let f_fake = model.critic_on(&mut t, fake);
                let loss = t.sub(f_fake, f_real);
                let gap = t.scalar(f_real) - t.scalar(f_fake);
                gap_trace.push(gap);
                let grads = t.backward(loss);
                opt_critic.step(&mut model.vs, &grads);
                clamp_weights(&mut model.vs, opt_critic.params(), cfg.critic_clip);
            }

            // adversarial step: encoder and generator move toward each other
            {
                let mut t = Tape::new(&model.vs);
                let emb = model.encode_on(&mut t, &seqs);
                let z = t.constant(gaussian(n, cfg.gen_noise_dim, &mut rng));
                let fake = model.generator_on(&mut t, z);
                let f_real = model.critic_on(&mut t, emb);
                let f_fake = model.critic_on(&mut t, fake);
                let loss = t.sub(f_real, f_fake);
                let grads = t.backward(loss);
                opt_adv.step(&mut model.vs, &grads);
            }
        }

        // validation reconstruction error (teacher-forced CE)
        let mut val_ce = 0.0;
        let mut val_acc = 0.0;
        let mut vb = 0usize;
        for chunk in val_seqs.chunks(cfg.batch_size) {
            let mut t = Tape::new(&model.vs);
            let emb = model.encode_on(&mut t, chunk);
            let (loss, acc) = model.reconstruction_on(&mut t, chunk, emb);
            val_ce += t.scalar(loss);
            val_acc += acc;
            vb += 1;
        }
        val_ce /= vb as f64;
        val_acc /= vb as f64;
        if !val_ce.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "validation loss {val_ce} at epoch {epoch}"
            )));
        }

        let epoch_gaps = &gap_trace[gap_trace.len() - n_batches..];
        let entry = AraeEpochLog {
            epoch,
            train_ce: epoch_ce / n_batches as f64,
            val_ce,
            val_token_accuracy: val_acc,
            critic_gap_mean_abs: epoch_gaps.iter().map(|g| g.abs()).sum::<f64>()
                / n_batches as f64,
        };
        let improved = best.as_ref().map(|(_, b, _)| val_ce < *b).unwrap_or(true);
        if improved {
            best = Some((epoch, val_ce, snapshot(model)));
        }
        on_epoch(&entry);
        log.push(entry);
    }

    let (best_epoch, best_val_ce, state) = best.unwrap();
    restore(model, &state)?;
    Ok(AraeTrainReport {
        best_epoch,
        best_val_ce,
        log,
        critic_gap_trace: gap_trace,
    })
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha12Rng) -> Arr {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n * d).map(|_| dist.sample(rng)).collect();
    Array2::from_shape_vec((n, d), data).unwrap().into_dyn()
}

fn snapshot(model: &AraeModel) -> Vec<(String, Arr)> {
    model.vs.state_dict()
}

fn restore(model: &mut AraeModel, state: &[(String, Arr)]) -> Result<()> {
    model
        .vs
        .load_state_dict(state)
        .map_err(Error::Checkpoint)
}

/// Full model state for checkpointing.
pub fn arae_state(model: &AraeModel) -> Vec<(String, Arr)> {
    model.vs.state_dict()
}

pub fn arae_load_state(model: &mut AraeModel, state: &[(String, Arr)]) -> Result<()> {
    restore(model, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;

    fn tiny_model() -> (AraeModel, Vec<Description>) {
        let corpus = vec![
            "normal : heart size within normal limits .".to_string(),
            "cardiomegaly : heart size slightly elevated .".to_string(),
            "normal : the lungs are clear .".to_string(),
            "cardiomegaly : the heart is enlarged .".to_string(),
        ];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let descs: Vec<Description> = corpus
            .iter()
            .map(|c| {
                let toks = crate::corpus::tokenize(c);
                Description {
                    label_token: vocab.id_of(&toks[0]),
                    caption_tokens: toks[2..].iter().map(|w| vocab.id_of(w)).collect(),
                }
            })
            .collect();
        let cfg = AraeConfig {
            embedding_dim: 24,
            word_dim: 16,
            adv_hidden: 16,
            gen_noise_dim: 8,
            epochs: 2,
            batch_size: 2,
            seed: 3,
            ..Default::default()
        };
        (AraeModel::new(vocab, cfg), descs)
    }

    #[test]
    fn encode_dimension_and_determinism() {
        let (model, descs) = tiny_model();
        let a = model.encode(&descs[0]).unwrap();
        let b = model.encode(&descs[0]).unwrap();
        assert_eq!(a.dim(), 24);
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn default_embedding_dim_is_300() {
        assert_eq!(AraeConfig::default().embedding_dim, 300);
        assert_eq!(AraeConfig::default().beta1, 0.5);
        assert_eq!(AraeConfig::default().beta2, 0.999);
    }

    #[test]
    fn decode_distributions_normalized() {
        let (model, descs) = tiny_model();
        let emb = model.encode(&descs[1]).unwrap();
        let (tokens, dists) = model.decode(&emb);
        assert!(!tokens.is_empty() && tokens.len() <= SEQ_LEN);
        for row in dists.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        }
    }

    #[test]
    fn certainty_renormalizes_label_mass() {
        let (model, _) = tiny_model();
        let vsize = model.vocab.size();
        let mut dist = Array2::zeros((1, vsize));
        let cardio = model.vocab.id_of("cardiomegaly");
        let normal = model.vocab.id_of("normal");
        dist[[0, cardio]] = 0.35;
        dist[[0, normal]] = 0.15;
        dist[[0, EOS]] = 0.50;
        let cert = diagnosis_certainty(&dist, &model.vocab).unwrap();
        assert!((cert["cardiomegaly"] - 0.70).abs() < 1e-12);
        assert!((cert["normal"] - 0.30).abs() < 1e-12);
        assert!((cert.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn certainty_single_label_mass() {
        let (model, _) = tiny_model();
        let mut dist = Array2::zeros((1, model.vocab.size()));
        dist[[0, model.vocab.id_of("normal")]] = 0.2;
        let cert = diagnosis_certainty(&dist, &model.vocab).unwrap();
        assert!((cert["normal"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn certainty_zero_mass_errors() {
        let (model, _) = tiny_model();
        let mut dist = Array2::zeros((1, model.vocab.size()));
        dist[[0, EOS]] = 1.0;
        assert!(diagnosis_certainty(&dist, &model.vocab).is_err());
    }

    #[test]
    fn representation_dimensions_and_split() {
        let emb = Embedding(Array1::from_elem(300, 0.5));
        let r = make_representation(emb.clone(), 100, NoiseDistribution::Normal, 9).unwrap();
        assert_eq!(r.dim(), 400);
        let flat = r.concat();
        let back = Representation::from_concat(&flat, 300);
        assert_eq!(back.embedding, r.embedding);
        assert_eq!(back.noise, r.noise);
    }

    #[test]
    fn representation_noise_deterministic_per_seed() {
        let emb = Embedding(Array1::zeros(8));
        let a = make_representation(emb.clone(), 16, NoiseDistribution::Normal, 4).unwrap();
        let b = make_representation(emb.clone(), 16, NoiseDistribution::Normal, 4).unwrap();
        let c = make_representation(emb, 16, NoiseDistribution::Normal, 5).unwrap();
        assert_eq!(a.noise, b.noise);
        assert_ne!(a.noise, c.noise);
    }

    #[test]
    fn noise_dim_sweep_constructs() {
        for dim in (50..=300).step_by(50) {
            for dist in [NoiseDistribution::Normal, NoiseDistribution::Uniform] {
                let emb = Embedding(Array1::zeros(300));
                let r = make_representation(emb, dim, dist, 0).unwrap();
                assert_eq!(r.dim(), 300 + dim);
            }
        }
    }

    #[test]
    fn unsupported_distribution_name() {
        assert!("cauchy".parse::<NoiseDistribution>().is_err());
        assert!("normal".parse::<NoiseDistribution>().is_ok());
    }

    #[test]
    fn out_of_range_token_errors() {
        let (model, descs) = tiny_model();
        let mut bad = descs[0].clone();
        bad.caption_tokens[0] = model.vocab.size() + 5;
        assert!(model.encode(&bad).is_err());
    }

    #[test]
    fn short_training_runs_and_selects_best() {
        let (mut model, descs) = tiny_model();
        let refs: Vec<&Description> = descs.iter().collect();
        let report = train_arae(&mut model, &refs, &refs, |_| {}).unwrap();
        assert_eq!(report.log.len(), 2);
        assert!(report.best_epoch < 2);
        assert!(report.best_val_ce.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, descs) = tiny_model();
            let refs: Vec<&Description> = descs.iter().collect();
            let r = train_arae(&mut model, &refs, &refs, |_| {}).unwrap();
            (r.best_epoch, r.best_val_ce, r.log.last().unwrap().train_ce)
        };
        assert_eq!(run(), run());
    }
}
