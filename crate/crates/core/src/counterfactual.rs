//! Inference-time counterfactual mapping M: starting from the
//! representation r of a real image with diagnosis d, search for r' that
//! decodes to the nearest alternative diagnosis d' while G(r') stays close
//! to the input image and r' stays close to r:
//!
//!   L_M = -log p(d'|r') + ||G(r') - x||^2 + ||r' - r||^2
//!
//! (both norms taken as means, matching the surrounding loss definitions).
//! The search runs L-BFGS at learning rate 1 for up to 100 outer steps of at
//! most 20 iterations; on failure it restarts from r + z for a small normal
//! z, up to 20 tries. The counterfactual image is always G(r') — never a
//! pixel-space edit of the input.

use crate::arae::{diagnosis_certainty, AraeModel, Embedding, Representation};
use crate::error::{Error, Result};
use crate::imgutil;
use crate::invmap::{infer, DiagnosisResult, InverseMapper};
use crate::t2igan::{Stage1Gan, STAGE1_SIZE};
use cxrjust_nn::lbfgs::{Lbfgs, LbfgsConfig};
use cxrjust_nn::rng::derive_rng;
use cxrjust_nn::tape::Tape;
use ndarray::{Array1, Array2, Array4};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualSearchConfig {
    pub learning_rate: f64,
    pub outer_steps: usize,
    pub max_inner: usize,
    pub max_tries: usize,
    /// Restart perturbation scale as a fraction of RMS(r).
    pub sigma_z_scale: f64,
    /// Relative best-loss change over the plateau window that counts as
    /// converged.
    pub eps_rel: f64,
    pub plateau_window: usize,
    pub seed: u64,
}

impl Default for CounterfactualSearchConfig {
    fn default() -> Self {
        CounterfactualSearchConfig {
            learning_rate: 1.0,
            outer_steps: 100,
            max_inner: 20,
            max_tries: 20,
            sigma_z_scale: 0.01,
            eps_rel: 1e-4,
            plateau_window: 10,
            seed: 11,
        }
    }
}

impl CounterfactualSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tries < 1 {
            return Err(Error::Config("max_tries must be at least 1".into()));
        }
        if self.eps_rel <= 0.0 || self.sigma_z_scale < 0.0 {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Runner-up of the certainty map: the label with the highest probability
/// among all labels except the diagnosis, ties broken lexicographically.
pub fn nearest_alternative(certainty: &BTreeMap<String, f64>, d: &str) -> Result<String> {
    if certainty.len() < 2 {
        return Err(Error::Eval(
            "nearest alternative undefined for a single-label task".into(),
        ));
    }
    certainty
        .iter()
        .filter(|(l, _)| l.as_str() != d)
        .max_by(|a, b| {
            a.1.partial_cmp(b.1)
                .unwrap()
                .then_with(|| b.0.cmp(a.0)) // reversed: prefer lexicographically smaller
        })
        .map(|(l, _)| l.clone())
        .ok_or_else(|| Error::Eval("no alternative label".into()))
}

/// The three components of L_M (already in their final units).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossMBreakdown {
    pub total: f64,
    pub alt_diagnosis: f64,
    pub img_similarity: f64,
    pub emb_similarity: f64,
}

/// Per-component gradients of L_M with respect to r' (each full-length;
/// the diagnosis term's gradient is zero over the noise half).
pub struct LossMGrads {
    pub alt_diagnosis: Array1<f64>,
    pub img_similarity: Array1<f64>,
    pub emb_similarity: Array1<f64>,
}

impl LossMGrads {
    pub fn total(&self) -> Array1<f64> {
        &self.alt_diagnosis + &self.img_similarity + &self.emb_similarity
    }
}

/// Evaluate L_M and its gradient with respect to r'. The alternative-label
/// probability is the decoder's first-step distribution restricted to label
/// words; gradients flow through the decoder softmax and the frozen
/// generator.
pub fn loss_m_and_grad(
    r_prime: &Array1<f64>,
    r: &Array1<f64>,
    x: &Array2<f64>,
    d_prime_id: usize,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
) -> Result<(LossMBreakdown, Array1<f64>)> {
    let (breakdown, grads) =
        loss_m_components_and_grads(r_prime, r, x, d_prime_id, arae_model, gan)?;
    Ok((breakdown, grads.total()))
}

/// As [`loss_m_and_grad`] but keeping the three gradients separate.
pub fn loss_m_components_and_grads(
    r_prime: &Array1<f64>,
    r: &Array1<f64>,
    x: &Array2<f64>,
    d_prime_id: usize,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
) -> Result<(LossMBreakdown, LossMGrads)> {
    let v = arae_model.embedding_dim();
    let dim = r_prime.len();
    if r.len() != dim {
        return Err(Error::Shape("r and r' dimensions differ".into()));
    }
    let labels: Vec<usize> = arae_model.vocab.label_ids().iter().copied().collect();
    let target = labels
        .iter()
        .position(|&l| l == d_prime_id)
        .ok_or_else(|| Error::Corpus(format!("{d_prime_id} is not a label id")))?;

    // alternative-diagnosis term via the frozen decoder
    let (l_alt, g_alt_emb) = {
        let mut t = Tape::new(&arae_model.vs);
        let emb = t.constant(
            r_prime
                .slice(ndarray::s![..v])
                .to_owned()
                .into_shape_with_order((1, v))
                .unwrap()
                .into_dyn(),
        );
        let logits = arae_model.first_step_logits_on(&mut t, emb, 1);
        let logp = arae_model.label_log_probs_on(&mut t, logits);
        let picked = t.pick_rows(logp, &[target]);
        let s = t.sum_all(picked);
        let loss = t.affine(s, -1.0, 0.0);
        let lv = t.scalar(loss);
        let seed = ndarray::arr1(&[1.0]).into_dyn();
        let grads = t.backward_wrt(vec![(loss, seed)], &[emb]);
        let g = grads
            .node(emb)
            .expect("embedding grad")
            .view()
            .into_shape_with_order(v)
            .unwrap()
            .to_owned();
        (lv, g)
    };

    // image-similarity term via the frozen generator
    let (l_img, g_img) = {
        let mut t = Tape::new(&gan.vs);
        let rn = t.constant(
            r_prime
                .view()
                .into_shape_with_order((1, dim))
                .unwrap()
                .to_owned()
                .into_dyn(),
        );
        let img = gan.generator_on(&mut t, rn, &cxrjust_nn::layers::Mode::Eval);
        let mut x4 = Array4::zeros((1, 1, STAGE1_SIZE, STAGE1_SIZE));
        x4.slice_mut(ndarray::s![0, 0, .., ..]).assign(x);
        let xn = t.constant(x4.into_dyn());
        let loss = t.mse(img, xn);
        let lv = t.scalar(loss);
        let seed = ndarray::arr1(&[1.0]).into_dyn();
        let grads = t.backward_wrt(vec![(loss, seed)], &[rn]);
        let g = grads
            .node(rn)
            .expect("representation grad")
            .view()
            .into_shape_with_order(dim)
            .unwrap()
            .to_owned();
        (lv, g)
    };

    // representation-similarity term, analytic
    let diff = r_prime - r;
    let l_emb = diff.mapv(|d| d * d).mean().unwrap();
    let g_emb_sim = diff.mapv(|d| 2.0 * d / dim as f64);

    let mut g_alt_full = Array1::zeros(dim);
    g_alt_full.slice_mut(ndarray::s![..v]).assign(&g_alt_emb);
    Ok((
        LossMBreakdown {
            total: l_alt + l_img + l_emb,
            alt_diagnosis: l_alt,
            img_similarity: l_img,
            emb_similarity: l_emb,
        },
        LossMGrads {
            alt_diagnosis: g_alt_full,
            img_similarity: g_img,
            emb_similarity: g_emb_sim,
        },
    ))
}

/// L_M without the gradient.
pub fn loss_m(
    r_prime: &Representation,
    r: &Representation,
    x: &Array2<f64>,
    d_prime: &str,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
) -> Result<LossMBreakdown> {
    let id = arae_model.vocab.id_of(d_prime);
    let (b, _) = loss_m_and_grad(&r_prime.concat(), &r.concat(), x, id, arae_model, gan)?;
    Ok(b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TryTrace {
    pub try_index: usize,
    /// Best-so-far total loss after each outer step.
    pub best_loss: Vec<f64>,
    pub flipped: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchDiagnostics {
    pub success: bool,
    pub tries_used: usize,
    pub outer_steps_used: usize,
    pub final_loss: LossMBreakdown,
    pub traces: Vec<TryTrace>,
}

pub struct MapMOutcome {
    pub r_prime: Representation,
    pub diagnostics: SearchDiagnostics,
}

fn first_decoded_label(arae_model: &AraeModel, r: &Array1<f64>) -> Option<usize> {
    let v = arae_model.embedding_dim();
    let emb = Embedding(r.slice(ndarray::s![..v]).to_owned());
    let (tokens, _) = arae_model.decode(&emb);
    tokens
        .first()
        .copied()
        .filter(|t| arae_model.vocab.is_label(*t))
}

/// Quasi-Newton search for the counterfactual representation. SUCCESS means
/// the pure greedy decode of r' starts with d' and the best loss has
/// plateaued (relative change over the last `plateau_window` outer steps
/// below `eps_rel`). On failure the search restarts from r + z with small
/// normal z, up to `max_tries` tries; exhausting the tries yields an
/// explicit non-success outcome carrying every trace.
pub fn map_m(
    r: &Representation,
    x: &Array2<f64>,
    d_prime: &str,
    cfg: &CounterfactualSearchConfig,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
) -> Result<MapMOutcome> {
    cfg.validate()?;
    let d_prime_id = arae_model.vocab.id_of(d_prime);
    if !arae_model.vocab.is_label(d_prime_id) {
        return Err(Error::Corpus(format!("`{d_prime}` is not a label word")));
    }
    if first_decoded_label(arae_model, &r.concat()) == Some(d_prime_id) {
        return Err(Error::Eval(
            "r already decodes to the requested alternative diagnosis".into(),
        ));
    }
    let r0 = r.concat();
    let dim = r0.len();
    let rms = (r0.mapv(|v| v * v).mean().unwrap()).sqrt();
    let sigma_z = cfg.sigma_z_scale * rms;
    let v = arae_model.embedding_dim();

    let mut rng = derive_rng(cfg.seed, "map-m-restarts");
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();

    let mut best_global: Option<(f64, Array1<f64>, LossMBreakdown)> = None;
    let mut traces = Vec::new();
    let mut outer_used_total = 0usize;

    for try_index in 0..cfg.max_tries {
        let start: Array1<f64> = if try_index == 0 {
            r0.clone()
        } else {
            // restart from r + z, z ~ Normal(0, sigma_z^2)
            let z = Array1::from_iter((0..dim).map(|_| normal.sample(&mut rng) * sigma_z));
            &r0 + &z
        };
        let eval = |xv: &[f64]| -> (f64, Vec<f64>) {
            let rp = Array1::from_vec(xv.to_vec());
            match loss_m_and_grad(&rp, &r0, x, d_prime_id, arae_model, gan) {
                Ok((b, g)) => (b.total, g.to_vec()),
                Err(_) => (f64::INFINITY, vec![0.0; dim]),
            }
        };
        let (f0, g0) = eval(start.as_slice().unwrap());
        let mut opt = Lbfgs::new(
            start.to_vec(),
            f0,
            g0,
            LbfgsConfig {
                lr: cfg.learning_rate,
                max_inner: cfg.max_inner,
                history: 10,
                grad_tol: 1e-12,
            },
        );
        let mut best_loss = f0;
        let mut best_x = start.clone();
        let mut trace = Vec::with_capacity(cfg.outer_steps);
        let mut success = false;
        let mut stalled = false;
        for step in 0..cfg.outer_steps {
            let rep = opt.outer_step(&eval);
            outer_used_total += 1;
            if rep.f < best_loss {
                best_loss = rep.f;
                best_x = Array1::from_vec(opt.x.clone());
            }
            trace.push(best_loss);
            let plateaued = if stalled || rep.stalled {
                true
            } else if step + 1 >= cfg.plateau_window {
                let prev = trace[step + 1 - cfg.plateau_window];
                (prev - best_loss) / prev.abs().max(1e-12) < cfg.eps_rel
            } else {
                false
            };
            stalled = rep.stalled;
            if plateaued {
                let flipped = first_decoded_label(arae_model, &best_x) == Some(d_prime_id);
                if flipped {
                    success = true;
                }
                break;
            }
        }
        let flipped = first_decoded_label(arae_model, &best_x) == Some(d_prime_id);
        success = success || (flipped && stalled);
        traces.push(TryTrace {
            try_index,
            best_loss: trace,
            flipped,
            converged: success,
        });
        let better = best_global
            .as_ref()
            .map(|(b, _, _)| best_loss < *b)
            .unwrap_or(true);
        if success || better {
            let (breakdown, _) =
                loss_m_and_grad(&best_x, &r0, x, d_prime_id, arae_model, gan)?;
            best_global = Some((best_loss, best_x.clone(), breakdown));
        }
        if success {
            let (_, bx, breakdown) = best_global.unwrap();
            return Ok(MapMOutcome {
                r_prime: Representation::from_concat(&bx, v),
                diagnostics: SearchDiagnostics {
                    success: true,
                    tries_used: try_index + 1,
                    outer_steps_used: outer_used_total,
                    final_loss: breakdown,
                    traces,
                },
            });
        }
    }
    let (_, bx, breakdown) = best_global.expect("at least one try ran");
    Ok(MapMOutcome {
        r_prime: Representation::from_concat(&bx, v),
        diagnostics: SearchDiagnostics {
            success: false,
            tries_used: cfg.max_tries,
            outer_steps_used: outer_used_total,
            final_loss: breakdown,
            traces,
        },
    })
}

/// Everything a reader needs to audit one diagnosis: the inputs, the decoded
/// justification, and the counterfactual under the nearest alternative
/// diagnosis. Images are [-1,1] 64x64; `counterfactual_image` is always a
/// generator output.
#[derive(Debug, Clone)]
pub struct JustificationReport {
    pub input: Array2<f64>,
    pub diagnosis: DiagnosisResult,
    pub reconstruction: Array2<f64>,
    pub alternative_label: String,
    pub alternative_caption: String,
    pub counterfactual_image: Array2<f64>,
    pub counterfactual_r: Representation,
    pub counterfactual_failed: bool,
    pub diagnostics: SearchDiagnostics,
}

/// Serializable sidecar (pixel data lives in the PNGs next to it).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JustificationRecord {
    pub diagnosis: String,
    pub certainty: BTreeMap<String, f64>,
    pub caption: String,
    pub alternative_diagnosis: String,
    pub alternative_caption: String,
    pub counterfactual_failed: bool,
    pub tries_used: usize,
    pub final_loss: LossMBreakdown,
    pub files: BTreeMap<String, String>,
}

/// Full inference chain for one [-1,1] 64x64 image: diagnose, decode the
/// justification, find the nearest alternative and synthesize its image.
pub fn justify(
    x: &Array2<f64>,
    mapper: &InverseMapper,
    arae_model: &AraeModel,
    gan: &Stage1Gan,
    cfg: &CounterfactualSearchConfig,
) -> Result<JustificationReport> {
    let diagnosis = infer(mapper, arae_model, x)?;
    let reconstruction = gan.generate(&diagnosis.representation.concat())?;
    let d_prime = nearest_alternative(&diagnosis.certainty, &diagnosis.label)?;
    let outcome = map_m(&diagnosis.representation, x, &d_prime, cfg, arae_model, gan)?;
    let counterfactual_image = gan.generate(&outcome.r_prime.concat())?;
    let (cf_tokens, cf_dists) = arae_model.decode(&outcome.r_prime.embedding);
    let _ = diagnosis_certainty(&cf_dists, &arae_model.vocab); // may fail for degenerate r'; caption still reported
    let alternative_caption = arae_model.vocab.decode_words(&cf_tokens).join(" ");
    Ok(JustificationReport {
        input: x.clone(),
        diagnosis,
        reconstruction,
        alternative_label: d_prime,
        alternative_caption,
        counterfactual_image,
        counterfactual_r: outcome.r_prime,
        counterfactual_failed: !outcome.diagnostics.success,
        diagnostics: outcome.diagnostics,
    })
}

/// Write one report as JSON plus three PNGs (input, reconstruction,
/// counterfactual) sharing a stem.
pub fn save_report(dir: &Path, stem: &str, report: &JustificationReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (tag, img) in [
        ("input", &report.input),
        ("reconstruction", &report.reconstruction),
        ("counterfactual", &report.counterfactual_image),
    ] {
        let name = format!("{stem}_{tag}.png");
        imgutil::save_png(&dir.join(&name), &imgutil::to_unit(img))?;
        files.insert(tag.to_string(), name);
    }
    let record = JustificationRecord {
        diagnosis: report.diagnosis.label.clone(),
        certainty: report.diagnosis.certainty.clone(),
        caption: report.diagnosis.caption.clone(),
        alternative_diagnosis: report.alternative_label.clone(),
        alternative_caption: report.alternative_caption.clone(),
        counterfactual_failed: report.counterfactual_failed,
        tries_used: report.diagnostics.tries_used,
        final_loss: report.diagnostics.final_loss.clone(),
        files,
    };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

/// Batch manifest: one CSV row per image with success flag, tries and final
/// loss components.
pub fn write_batch_manifest(
    path: &Path,
    rows: &[(String, &JustificationReport)],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "image_id,diagnosis,alternative,success,tries,loss_total,loss_alt_diagnosis,loss_img_similarity,loss_emb_similarity"
    )?;
    for (id, r) in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            id,
            r.diagnosis.label,
            r.alternative_label,
            !r.counterfactual_failed,
            r.diagnostics.tries_used,
            r.diagnostics.final_loss.total,
            r.diagnostics.final_loss.alt_diagnosis,
            r.diagnostics.final_loss.img_similarity,
            r.diagnostics.final_loss.emb_similarity,
        )?;
    }
    Ok(())
}
