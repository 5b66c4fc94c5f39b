//! Procedural "phantom thorax" dataset: a measurable stand-in for a chest
//! X-ray corpus. Each phantom is a dark lung field with rib striping and a
//! bright central heart ellipse whose width relative to the thorax (the
//! cardiothoracic ratio, CTR) determines the label: CTR > 0.5 means
//! cardiomegaly. [`measure_ctr`] recovers the ratio from pixels alone, which
//! makes generated and counterfactual images independently checkable.

use crate::corpus::{self, Description, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::imgutil;
use cxrjust_nn::rng::derive_rng;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const LABEL_NORMAL: &str = "normal";
pub const LABEL_CARDIOMEGALY: &str = "cardiomegaly";

/// CTR decision threshold mirroring the clinical rule.
pub const CTR_THRESHOLD: f64 = 0.5;

// Render luminances; measurement thresholds sit between them.
const BG: f64 = 0.02;
const LUNG: f64 = 0.25;
const HEART: f64 = 0.95;
const RIB_AMP: f64 = 0.06;
const HEART_THRESH: f64 = 0.60;
const THORAX_THRESH: f64 = 0.12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomParams {
    /// Reference canvas side the pixel fields below are expressed in.
    pub canvas: usize,
    pub thorax_width: f64,
    pub thorax_height: f64,
    /// Cardiothoracic ratio in (0, 1); > 0.5 iff cardiomegaly.
    pub heart_width_ratio: f64,
    pub heart_center_dx: f64,
    pub heart_center_dy: f64,
    pub texture_seed: u64,
    pub label: String,
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let cardio = self.heart_width_ratio > CTR_THRESHOLD;
        let claimed = self.label == LABEL_CARDIOMEGALY;
        if cardio != claimed {
            return Err(Error::Corpus(format!(
                "label `{}` inconsistent with CTR {}",
                self.label, self.heart_width_ratio
            )));
        }
        if self.thorax_width >= self.canvas as f64 || self.thorax_height >= self.canvas as f64 {
            return Err(Error::Corpus("thorax exceeds canvas".into()));
        }
        Ok(())
    }

    /// Heart ellipse (cy, cx, semi_h, semi_w) in pixels for a rendering at
    /// `size`.
    pub fn heart_ellipse(&self, size: usize) -> (f64, f64, f64, f64) {
        let s = size as f64 / self.canvas as f64;
        let cx = size as f64 / 2.0 + self.heart_center_dx * s;
        let cy = size as f64 / 2.0 + self.heart_center_dy * s;
        let mut t = derive_rng(self.texture_seed, "heart-shape");
        let height_frac: f64 = t.random_range(0.52..0.62);
        let semi_w = self.heart_width_ratio * self.thorax_width * s / 2.0;
        let semi_h = height_frac * self.thorax_height * s / 2.0;
        (cy, cx, semi_h, semi_w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// P(label = normal); the complement is cardiomegaly.
    pub prior_normal: f64,
    /// Training image side; stored images carry 5% crop margin on top.
    pub image_size: usize,
    pub ctr_normal: (f64, f64),
    pub ctr_cardiomegaly: (f64, f64),
    pub master_seed: u64,
    /// Threshold for vocabulary construction over the templated captions.
    pub min_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 500,
            prior_normal: 0.84,
            image_size: 64,
            ctr_normal: (0.30, 0.45),
            ctr_cardiomegaly: (0.55, 0.75),
            master_seed: 7,
            min_count: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size {} below minimum 32",
                self.image_size
            )));
        }
        if self.n_patients < 10 {
            return Err(Error::Config("need at least 10 patients".into()));
        }
        if !(0.0..=1.0).contains(&self.prior_normal) {
            return Err(Error::Config("prior must be in [0,1]".into()));
        }
        let ok = |r: (f64, f64)| r.0 < r.1;
        if !ok(self.ctr_normal) || !ok(self.ctr_cardiomegaly) {
            return Err(Error::Config("CTR ranges must be increasing".into()));
        }
        if self.ctr_normal.1 >= CTR_THRESHOLD || self.ctr_cardiomegaly.0 <= CTR_THRESHOLD {
            return Err(Error::Config("CTR ranges must not straddle 0.5".into()));
        }
        Ok(())
    }

    /// Stored/rendered canvas side (image_size plus crop margin).
    pub fn render_size(&self) -> usize {
        corpus::canvas_size(self.image_size)
    }
}

/// Caption template bank. Every template mentions only findings consistent
/// with its label; see [`finding_markers`].
pub fn caption_templates(label: &str) -> &'static [&'static str] {
    match label {
        LABEL_NORMAL => &[
            "heart size within normal limits .",
            "the heart is normal in size .",
            "cardiac silhouette is within normal limits .",
            "no evidence of cardiomegaly .",
            "the lungs are clear and heart size is unremarkable .",
            "mediastinal contour is within normal limits .",
            "no acute cardiopulmonary abnormality is seen .",
            "the cardiac silhouette is normal in size and contour .",
        ],
        LABEL_CARDIOMEGALY => &[
            "heart size slightly elevated .",
            "the heart is enlarged .",
            "cardiac silhouette is enlarged .",
            "moderate enlargement of the cardiac silhouette is seen .",
            "the heart size is disproportionally increased .",
            "stable enlargement of the heart is present .",
            "the cardiac silhouette remains enlarged .",
            "heart size is elevated compared to prior examination .",
        ],
        _ => &[],
    }
}

/// Finding words that commit a caption to one label.
pub fn finding_markers(label: &str) -> &'static [&'static str] {
    match label {
        LABEL_NORMAL => &["normal", "unremarkable", "clear"],
        LABEL_CARDIOMEGALY => &["enlarged", "enlargement", "elevated", "increased"],
        _ => &[],
    }
}

/// Render a phantom at the requested square size, grayscale [0,1].
pub fn render_phantom(params: &PhantomParams, size: usize) -> Result<Array2<f64>> {
    params.validate()?;
    let s = size as f64 / params.canvas as f64;
    let cx = size as f64 / 2.0;
    let cy = size as f64 / 2.0;
    let tw2 = params.thorax_width * s / 2.0;
    let th2 = params.thorax_height * s / 2.0;
    let (hcy, hcx, hh2, hw2) = params.heart_ellipse(size);

    let mut tex = derive_rng(params.texture_seed, "texture");
    let rib_freq: f64 = tex.random_range(5.5..8.5);
    let rib_phase: f64 = tex.random_range(0.0..std::f64::consts::TAU);
    let noise_amp: f64 = 0.012;
    let mut noise_rng = derive_rng(params.texture_seed, "noise");

    // Soft ellipse membership: sigmoid over the normalized radial excess,
    // edge width ~1px so thresholds land on the geometric boundary.
    let edge = 1.2 * s.max(1.0);
    let soft = |d: f64, scale: f64| 1.0 / (1.0 + ((d - 1.0) * scale / edge).exp());

    let mut img = Array2::from_elem((size, size), BG);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 + 0.5;
            let fx = x as f64 + 0.5;
            let dt = (((fx - cx) / tw2).powi(2) + ((fy - cy) / th2).powi(2)).sqrt();
            let t_mask = soft(dt, 2.0 * tw2.min(th2));
            let rib = RIB_AMP * (std::f64::consts::TAU * rib_freq * fy / size as f64 + rib_phase).sin();
            let lung = LUNG + rib;
            let dh = (((fx - hcx) / hw2).powi(2) + ((fy - hcy) / hh2).powi(2)).sqrt();
            let h_mask = soft(dh, 2.0 * hw2.min(hh2));
            let mut v = BG + t_mask * (lung - BG);
            v += h_mask * (HEART - v) * t_mask;
            v += noise_amp * (noise_rng.random::<f64>() * 2.0 - 1.0);
            img[[y, x]] = v.clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Longest bright run in a column profile that overlaps the central half of
/// the image; returns (start, len).
fn central_run(profile: &[bool], size: usize) -> Option<(usize, usize)> {
    let mid_lo = size / 4;
    let mid_hi = size * 3 / 4;
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < profile.len() {
        if profile[i] {
            let start = i;
            while i < profile.len() && profile[i] {
                i += 1;
            }
            let len = i - start;
            let overlaps = start < mid_hi && i > mid_lo;
            if overlaps && best.map(|(_, bl)| len > bl).unwrap_or(true) {
                best = Some((start, len));
            }
        } else {
            i += 1;
        }
    }
    best
}

/// Measure the cardiothoracic ratio of a rendered (or generated) phantom in
/// [0,1] grayscale: width of the brightest central component over the thorax
/// width, both taken as column runs of the band max around the vertical
/// center.
pub fn measure_ctr(image: &Array2<f64>) -> Result<f64> {
    let (h, w) = image.dim();
    let band_lo = (h as f64 * 0.34) as usize;
    let band_hi = (h as f64 * 0.66) as usize;
    let colmax = |threshold: f64| -> Vec<bool> {
        (0..w)
            .map(|x| {
                (band_lo..band_hi)
                    .map(|y| image[[y, x]])
                    .fold(f64::NEG_INFINITY, f64::max)
                    > threshold
            })
            .collect()
    };
    let heart = central_run(&colmax(HEART_THRESH), w)
        .ok_or_else(|| Error::Measure("no bright central component".into()))?;
    let thorax = central_run(&colmax(THORAX_THRESH), w)
        .ok_or_else(|| Error::Measure("no thorax region".into()))?;
    if thorax.1 == 0 {
        return Err(Error::Measure("degenerate thorax width".into()));
    }
    Ok(heart.1 as f64 / thorax.1 as f64)
}

/// The generated dataset: training-format samples plus the ground truth
/// geometry for every image (keyed by image_id order).
pub struct SynthDataset {
    pub samples: Vec<Sample>,
    pub ground_truth: Vec<PhantomParams>,
    pub vocab: Vocabulary,
    pub records: Vec<corpus::IndexRecord>,
}

/// Deterministically generate a phantom dataset: stratified patient labels
/// matching the class prior, 1-2 images per patient with slightly jittered
/// geometry, and 1-4 label-consistent templated captions per image.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let render = config.render_size();
    let mut label_rng = derive_rng(config.master_seed, "labels");
    let n = config.n_patients;
    let n_normal = (config.prior_normal * n as f64).round() as usize;
    let mut labels: Vec<&str> = (0..n)
        .map(|i| {
            if i < n_normal {
                LABEL_NORMAL
            } else {
                LABEL_CARDIOMEGALY
            }
        })
        .collect();
    labels.shuffle(&mut label_rng);

    let mut ground_truth = Vec::new();
    let mut raw: Vec<(corpus::IndexRecord, Array2<f64>)> = Vec::new();
    for (p, label) in labels.iter().enumerate() {
        let pid = format!("p{p:04}");
        let mut prng = derive_rng(config.master_seed, &format!("patient/{pid}"));
        let range = if *label == LABEL_NORMAL {
            config.ctr_normal
        } else {
            config.ctr_cardiomegaly
        };
        let jitter = 0.01;
        let base_ctr: f64 = prng.random_range(range.0 + jitter..range.1 - jitter);
        let n_images = if prng.random::<f64>() < 0.5 { 1 } else { 2 };
        for i in 0..n_images {
            let params = PhantomParams {
                canvas: render,
                thorax_width: prng.random_range(0.78..0.90) * render as f64,
                thorax_height: prng.random_range(0.86..0.96) * render as f64,
                heart_width_ratio: (base_ctr + prng.random_range(-jitter..jitter))
                    .clamp(range.0, range.1),
                heart_center_dx: prng.random_range(-1.5..1.5) * render as f64 / 64.0,
                heart_center_dy: prng.random_range(-1.0..1.0) * render as f64 / 64.0,
                texture_seed: prng.random(),
                label: label.to_string(),
            };
            let img = render_phantom(&params, render)?;
            let report = sample_report(label, &mut prng);
            let image_id = format!("{pid}_i{i}");
            raw.push((
                corpus::IndexRecord {
                    patient_id: pid.clone(),
                    image_id: image_id.clone(),
                    image_file: format!("images/{image_id}.png"),
                    label: label.to_string(),
                    report_text: report,
                },
                img,
            ));
            ground_truth.push(params);
        }
    }

    let (samples, vocab) = build_samples(&raw, config.min_count)?;
    Ok(SynthDataset {
        samples,
        ground_truth,
        vocab,
        records: raw.into_iter().map(|(r, _)| r).collect(),
    })
}

/// 1-4 distinct template sentences joined into a report.
fn sample_report(label: &str, rng: &mut ChaCha12Rng) -> String {
    let bank = caption_templates(label);
    let k = match rng.random_range(0.0..1.0f64) {
        p if p < 0.30 => 1,
        p if p < 0.65 => 2,
        p if p < 0.88 => 3,
        _ => 4,
    };
    let mut idx: Vec<usize> = (0..bank.len()).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx.iter().map(|&i| bank[i]).collect::<Vec<_>>().join(" ")
}

/// Turn on-disk style records plus images into encoded samples and the
/// vocabulary that covers them.
pub fn build_samples(
    raw: &[(corpus::IndexRecord, Array2<f64>)],
    min_count: usize,
) -> Result<(Vec<Sample>, Vocabulary)> {
    let mut desc_texts = Vec::new();
    for (rec, _) in raw {
        for cap in corpus::make_caption_texts(&rec.report_text, &rec.label) {
            desc_texts.push(format!("{} : {}", rec.label, cap.join(" ")));
        }
    }
    let vocab = corpus::build_vocabulary(&desc_texts, min_count)?;
    let mut samples = Vec::new();
    for (rec, img) in raw {
        let descriptions: Vec<Description> =
            corpus::make_captions(&rec.report_text, &rec.label, &vocab)?;
        if descriptions.is_empty() {
            eprintln!("corpus: dropping sample {} (no usable caption)", rec.image_id);
            continue;
        }
        samples.push(Sample {
            patient_id: rec.patient_id.clone(),
            image_id: rec.image_id.clone(),
            image: img.clone(),
            label: rec.label.clone(),
            descriptions,
        });
    }
    Ok((samples, vocab))
}

/// Manifest recording the generator config and ground-truth geometry.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub ground_truth: Vec<PhantomParams>,
}

/// Write the dataset in the on-disk format consumed by [`crate::corpus`]:
/// `images/*.png`, `index.jsonl`, `splits.json` and `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    data: &SynthDataset,
    config: &SynthConfig,
    split_seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for (rec, sample) in data.records.iter().zip(&data.samples) {
        imgutil::save_png(&dir.join(&rec.image_file), &sample.image)?;
    }
    corpus::write_index(dir, &data.records)?;
    let split = corpus::split_by_patient(data.samples.clone(), (0.8, 0.1, 0.1), split_seed)?;
    corpus::write_split_file(dir, &split)?;
    let manifest = SynthManifest {
        config: config.clone(),
        ground_truth: data.ground_truth.clone(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a dataset directory (synthetic or hand-made) back into samples.
pub fn load_dataset(dir: &Path, min_count: usize) -> Result<(Vec<Sample>, Vocabulary)> {
    let records = corpus::read_index(dir)?;
    let mut raw = Vec::new();
    for rec in records {
        let img = corpus::load_image(dir, &rec)?;
        raw.push((rec, img));
    }
    build_samples(&raw, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_params(ctr: f64) -> PhantomParams {
        PhantomParams {
            canvas: 70,
            thorax_width: 60.0,
            thorax_height: 64.0,
            heart_width_ratio: ctr,
            heart_center_dx: 0.0,
            heart_center_dy: 0.0,
            texture_seed: 11,
            label: if ctr > CTR_THRESHOLD {
                LABEL_CARDIOMEGALY.into()
            } else {
                LABEL_NORMAL.into()
            },
        }
    }

    #[test]
    fn bigger_ratio_means_wider_blob() {
        let a = render_phantom(&quick_params(0.70), 70).unwrap();
        let b = render_phantom(&quick_params(0.35), 70).unwrap();
        let width = |img: &Array2<f64>| {
            let row = 35;
            (0..70).filter(|&x| img[[row, x]] > HEART_THRESH).count()
        };
        assert!(width(&a) > width(&b));
    }

    #[test]
    fn measured_ctr_close_to_parameter() {
        for &ctr in &[0.32, 0.40, 0.58, 0.70] {
            let img = render_phantom(&quick_params(ctr), 70).unwrap();
            let m = measure_ctr(&img).unwrap();
            assert!(
                (m - ctr).abs() <= 0.03,
                "ctr {ctr}: measured {m}"
            );
        }
    }

    #[test]
    fn ctr_sweep_is_monotone() {
        let mut prev = 0.0;
        let mut ratios = Vec::new();
        let mut r = 0.30;
        while r <= 0.751 {
            ratios.push(r);
            r += 0.05;
        }
        for ctr in ratios {
            let img = render_phantom(&quick_params(ctr), 70).unwrap();
            let m = measure_ctr(&img).unwrap();
            assert!(m > prev, "sweep not monotone at {ctr}: {m} <= {prev}");
            prev = m;
        }
    }

    #[test]
    fn blank_image_errors() {
        let img = Array2::zeros((64, 64));
        assert!(measure_ctr(&img).is_err());
    }

    #[test]
    fn render_deterministic() {
        let a = render_phantom(&quick_params(0.6), 70).unwrap();
        let b = render_phantom(&quick_params(0.6), 70).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_determinism_and_prior() {
        let cfg = SynthConfig {
            n_patients: 200,
            ..Default::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image, "images differ for {}", x.image_id);
        }
        let n_normal = a
            .samples
            .iter()
            .map(|s| &s.patient_id)
            .collect::<std::collections::BTreeSet<_>>()
            .iter()
            .filter(|pid| {
                a.samples
                    .iter()
                    .find(|s| &&s.patient_id == *pid)
                    .unwrap()
                    .label
                    == LABEL_NORMAL
            })
            .count();
        let frac = n_normal as f64 / 200.0;
        assert!((frac - 0.84).abs() <= 0.03, "prior off: {frac}");
    }

    #[test]
    fn labels_match_measured_ctr() {
        let cfg = SynthConfig {
            n_patients: 30,
            ..Default::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        for (sample, params) in data.samples.iter().zip(&data.ground_truth) {
            let m = measure_ctr(&sample.image).unwrap();
            assert_eq!(
                m > CTR_THRESHOLD,
                sample.label == LABEL_CARDIOMEGALY,
                "sample {} measured {m} labeled {} (param {})",
                sample.image_id,
                sample.label,
                params.heart_width_ratio
            );
        }
    }

    #[test]
    fn captions_are_label_consistent() {
        let cfg = SynthConfig {
            n_patients: 40,
            ..Default::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        for s in &data.samples {
            assert!(!s.descriptions.is_empty() && s.descriptions.len() <= 4);
            let other = if s.label == LABEL_NORMAL {
                LABEL_CARDIOMEGALY
            } else {
                LABEL_NORMAL
            };
            for d in &s.descriptions {
                assert_eq!(data.vocab.word_of(d.label_token), s.label);
                let text = d.token_string(&data.vocab);
                for marker in finding_markers(other) {
                    assert!(
                        !text.split_whitespace().any(|w| w == *marker),
                        "caption `{text}` mentions `{marker}` inconsistent with {}",
                        s.label
                    );
                }
            }
        }
    }

    #[test]
    fn template_bank_is_valid() {
        for label in [LABEL_NORMAL, LABEL_CARDIOMEGALY] {
            let bank = caption_templates(label);
            assert!(bank.len() >= 6);
            for t in bank {
                let n = crate::corpus::tokenize(t).len();
                assert!((5..=15).contains(&n), "template `{t}` has {n} words");
            }
        }
    }

    #[test]
    fn image_size_floor() {
        let cfg = SynthConfig {
            image_size: 16,
            ..Default::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }
}
