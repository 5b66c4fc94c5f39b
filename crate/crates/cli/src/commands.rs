//! Command implementations: stage wiring, checkpoint dependency checks,
//! artifact layout and the run manifest.
//!
//! Artifact layout under `out_dir`:
//!   checkpoints/<stage>.ckpt, curves/<stage>.{csv,png},
//!   reports/ (justification output), metrics/ (evaluation output),
//!   manifest.jsonl (append-only command log).

use cxrjust_core::arae::{self, AraeModel};
use cxrjust_core::checkpoint::{
    load_checkpoint, save_checkpoint, sha256_file, sha256_str, CheckpointMeta, FORMAT_VERSION,
};
use cxrjust_core::config::PipelineConfig;
use cxrjust_core::corpus::{self, AugmentMode, Sample, SplitSet};
use cxrjust_core::counterfactual::{self, CounterfactualSearchConfig};
use cxrjust_core::error::{Error, Result};
use cxrjust_core::evalsuite::{self, SaliencyLayer};
use cxrjust_core::imgutil;
use cxrjust_core::invmap::{self, InverseMapper};
use cxrjust_core::manifest::{ManifestEntry, RunManifest};
use cxrjust_core::synthdata;
use cxrjust_core::t2igan::{self, Stage1Gan, Stage2Gan};
use cxrjust_nn::rng::derive_rng;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

fn out_dir(cfg: &PipelineConfig) -> PathBuf {
    PathBuf::from(&cfg.out_dir)
}

fn ckpt_path(cfg: &PipelineConfig, stage: &str) -> PathBuf {
    out_dir(cfg).join("checkpoints").join(format!("{stage}.ckpt"))
}

fn require_ckpt(cfg: &PipelineConfig, stage: &str, wanted_by: &str) -> Result<PathBuf> {
    let p = ckpt_path(cfg, stage);
    if !p.exists() {
        return Err(Error::MissingDependency {
            missing: stage.to_string(),
            wanted_by: wanted_by.to_string(),
        });
    }
    Ok(p)
}

fn config_toml(cfg: &PipelineConfig) -> String {
    toml::to_string(cfg).unwrap_or_default()
}

fn append_manifest(
    cfg: &PipelineConfig,
    command: &str,
    args: &[String],
    artifacts: &[PathBuf],
) -> Result<()> {
    RunManifest::in_dir(&out_dir(cfg)).append(
        ManifestEntry {
            command: command.to_string(),
            args: args.to_vec(),
            config_sha256: sha256_str(&config_toml(cfg)),
            seed: cfg.seed,
            outputs: vec![],
        },
        artifacts,
    )
}

fn load_split(cfg: &PipelineConfig) -> Result<(SplitSet, corpus::Vocabulary)> {
    let dir = PathBuf::from(&cfg.data.path);
    if !dir.join("index.jsonl").exists() {
        return Err(Error::MissingDependency {
            missing: "synth".into(),
            wanted_by: "dataset loading".into(),
        });
    }
    let (samples, vocab) = synthdata::load_dataset(&dir, cfg.data.min_count)?;
    let split_file = corpus::read_split_file(&dir)?;
    let split = corpus::apply_split(samples, &split_file)?;
    Ok((split, vocab))
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    let scfg = cfg.synth_config();
    let data = synthdata::generate_dataset(&scfg)?;
    let dir = PathBuf::from(&cfg.data.path);
    synthdata::write_dataset(&dir, &data, &scfg, cfg.seed)?;
    println!(
        "wrote {} samples from {} patients to {}",
        data.samples.len(),
        scfg.n_patients,
        dir.display()
    );
    append_manifest(
        cfg,
        "synth",
        &[],
        &[dir.join("index.jsonl"), dir.join("manifest.json"), dir.join("splits.json")],
    )
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &PipelineConfig, stage: &str) -> Result<()> {
    match stage {
        "arae" => train_arae(cfg),
        "gan1" => train_gan1(cfg, false),
        "gan1-baseline" => train_gan1(cfg, true),
        "gan2" => train_gan2(cfg),
        "invmap" => train_invmap(cfg),
        "refcnn" => train_refcnn(cfg),
        other => Err(Error::Config(format!(
            "unknown stage `{other}` (expected arae|gan1|gan1-baseline|gan2|invmap|refcnn)"
        ))),
    }
}

fn descriptions_of(samples: &[Sample]) -> Vec<&corpus::Description> {
    samples.iter().flat_map(|s| s.descriptions.iter()).collect()
}

fn train_arae(cfg: &PipelineConfig) -> Result<()> {
    let (split, vocab) = load_split(cfg)?;
    let mut model = AraeModel::new(vocab, cfg.arae_config());
    let train = descriptions_of(&split.train);
    let val = descriptions_of(&split.validation);
    let report = arae::train_arae(&mut model, &train, &val, |l| {
        println!(
            "epoch {:>4}  train_ce {:.4}  val_ce {:.4}  val_token_acc {:.4}",
            l.epoch, l.train_ce, l.val_ce, l.val_token_accuracy
        );
    })?;
    println!(
        "selected epoch {} with validation reconstruction error {:.4}",
        report.best_epoch, report.best_val_ce
    );
    let path = ckpt_path(cfg, "arae");
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage: "arae".into(),
        config_toml: config_toml(cfg),
        vocab: Some(model.vocab.clone()),
        embedding_dim: model.cfg.embedding_dim,
        noise_dim: cfg.gan1.noise_dim,
        upstream: BTreeMap::new(),
        tensors: vec![],
    };
    save_checkpoint(&path, &meta, &arae::arae_state(&model))?;

    let curves = out_dir(cfg).join("curves");
    let csv_path = curves.join("arae.csv");
    write_csv(
        &csv_path,
        "epoch,train_ce,val_ce,val_token_accuracy,critic_gap_mean_abs",
        &report
            .log
            .iter()
            .map(|l| {
                vec![
                    l.epoch as f64,
                    l.train_ce,
                    l.val_ce,
                    l.val_token_accuracy,
                    l.critic_gap_mean_abs,
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    let val_ce: Vec<f64> = report.log.iter().map(|l| l.val_ce).collect();
    let train_ce: Vec<f64> = report.log.iter().map(|l| l.train_ce).collect();
    let plot_path = curves.join("arae.png");
    imgutil::save_line_plot(
        &plot_path,
        &[("train_ce", &train_ce), ("val_ce", &val_ce)],
        "reconstruction error",
    )?;
    append_manifest(cfg, "train", &["arae".into()], &[path, csv_path, plot_path])
}

fn load_arae(cfg: &PipelineConfig, wanted_by: &str) -> Result<(AraeModel, String)> {
    let path = require_ckpt(cfg, "arae", wanted_by)?;
    let (meta, state) = load_checkpoint(&path)?;
    let vocab = meta
        .vocab
        .ok_or_else(|| Error::Checkpoint("arae checkpoint is missing its vocabulary".into()))?;
    let mut acfg = cfg.arae_config();
    acfg.embedding_dim = meta.embedding_dim;
    let mut model = AraeModel::new(vocab, acfg);
    arae::arae_load_state(&mut model, &state)?;
    Ok((model, sha256_file(&path)?))
}

fn train_gan1(cfg: &PipelineConfig, baseline: bool) -> Result<()> {
    let stage = if baseline { "gan1-baseline" } else { "gan1" };
    let (split, _) = load_split(cfg)?;
    let (arae_model, arae_hash) = load_arae(cfg, &format!("train {stage}"))?;
    let data = t2igan::gan_samples(&split.train, &arae_model)?;
    let mut gcfg = cfg.gan1_config(arae_model.vocab.size());
    if baseline {
        gcfg.cond_mode = t2igan::CondMode::Learned;
    }
    let mut gan = Stage1Gan::new(gcfg);
    let report = t2igan::train_stage1(&mut gan, &data)?;
    for l in report.log.iter().rev().take(1) {
        println!("final epoch {}: d_loss {:.4} g_loss {:.4}", l.epoch, l.d_loss, l.g_loss);
    }
    let path = ckpt_path(cfg, stage);
    let mut upstream = BTreeMap::new();
    upstream.insert("arae".to_string(), arae_hash);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage: stage.into(),
        config_toml: config_toml(cfg),
        vocab: None,
        embedding_dim: gan.cfg.cond_dim,
        noise_dim: gan.cfg.noise_dim,
        upstream,
        tensors: vec![],
    };
    save_checkpoint(&path, &meta, &gan.state())?;
    let curves = out_dir(cfg).join("curves");
    let csv_path = curves.join(format!("{stage}.csv"));
    write_csv(
        &csv_path,
        "epoch,d_loss,g_loss",
        &report
            .log
            .iter()
            .map(|l| vec![l.epoch as f64, l.d_loss, l.g_loss])
            .collect::<Vec<_>>(),
    )?;
    append_manifest(cfg, "train", &[stage.into()], &[path, csv_path])
}

fn load_gan1(cfg: &PipelineConfig, stage: &str, wanted_by: &str) -> Result<(Stage1Gan, String)> {
    let path = require_ckpt(cfg, stage, wanted_by)?;
    let (meta, state) = load_checkpoint(&path)?;
    let mut gcfg = cfg.gan1_config(0);
    if stage == "gan1-baseline" {
        // vocab size is recoverable from the stored table shape
        let table = state
            .iter()
            .find(|(n, _)| n == "g.cond_table")
            .ok_or_else(|| Error::Checkpoint("baseline checkpoint lacks cond table".into()))?;
        gcfg.cond_mode = t2igan::CondMode::Learned;
        gcfg.vocab_size = table.1.shape()[0];
    }
    gcfg.cond_dim = meta.embedding_dim;
    gcfg.noise_dim = meta.noise_dim;
    let mut gan = Stage1Gan::new(gcfg);
    gan.load_state(&state)?;
    Ok((gan, sha256_file(&path)?))
}

/// Upstream compatibility guard: the hash recorded at training time must
/// match the checkpoint on disk now.
fn check_upstream(meta_upstream: &BTreeMap<String, String>, stage: &str, hash: &str) -> Result<()> {
    if let Some(recorded) = meta_upstream.get(stage) {
        if recorded != hash {
            return Err(Error::Checkpoint(format!(
                "{stage} checkpoint changed since this model was trained (expected {recorded}, found {hash})"
            )));
        }
    }
    Ok(())
}

fn train_gan2(cfg: &PipelineConfig) -> Result<()> {
    let (split, _) = load_split(cfg)?;
    let (arae_model, arae_hash) = load_arae(cfg, "train gan2")?;
    let (gan1, gan1_hash) = load_gan1(cfg, "gan1", "train gan2")?;
    if cfg.data.image_size < t2igan::STAGE2_SIZE {
        println!(
            "note: dataset images are {}px; stage-2 trains against 256px crops upscaled from them",
            cfg.data.image_size
        );
    }
    let data = t2igan::gan_samples(&split.train, &arae_model)?;
    let mut gan2 = Stage2Gan::new(cfg.gan2_config());
    let report = t2igan::train_stage2(&mut gan2, &gan1, &data)?;
    for l in report.log.iter().rev().take(1) {
        println!("final epoch {}: d_loss {:.4} g_loss {:.4}", l.epoch, l.d_loss, l.g_loss);
    }
    let path = ckpt_path(cfg, "gan2");
    let mut upstream = BTreeMap::new();
    upstream.insert("arae".to_string(), arae_hash);
    upstream.insert("gan1".to_string(), gan1_hash);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage: "gan2".into(),
        config_toml: config_toml(cfg),
        vocab: None,
        embedding_dim: gan2.cfg.cond_dim,
        noise_dim: gan2.cfg.noise_dim,
        upstream,
        tensors: vec![],
    };
    save_checkpoint(&path, &meta, &gan2.vs.state_dict())?;
    append_manifest(cfg, "train", &["gan2".into()], &[path])
}

fn train_invmap(cfg: &PipelineConfig) -> Result<()> {
    let (split, _) = load_split(cfg)?;
    let (arae_model, arae_hash) = load_arae(cfg, "train invmap")?;
    let (gan1, gan1_hash) = load_gan1(cfg, "gan1", "train invmap")?;
    let mut mapper = InverseMapper::new(cfg.invmap_config());
    let report = invmap::train_invmap(
        &mut mapper,
        &arae_model,
        &gan1,
        &split.train,
        &split.validation,
        |l| {
            println!(
                "epoch {:>4}  w {:.2}  diag {:.4}  cyc_img {:.4}  cyc_emb {:.4}  val_acc {:.4}",
                l.epoch, l.diagnosis_weight, l.diagnosis_loss, l.cycle_img_loss, l.cycle_emb_loss,
                l.val_accuracy
            );
        },
    )?;
    println!(
        "selected epoch {} with validation diagnosis accuracy {:.4}",
        report.best_epoch, report.best_val_accuracy
    );
    let path = ckpt_path(cfg, "invmap");
    let mut upstream = BTreeMap::new();
    upstream.insert("arae".to_string(), arae_hash);
    upstream.insert("gan1".to_string(), gan1_hash);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage: "invmap".into(),
        config_toml: config_toml(cfg),
        vocab: None,
        embedding_dim: mapper.cfg.cond_dim,
        noise_dim: mapper.cfg.noise_dim,
        upstream,
        tensors: vec![],
    };
    save_checkpoint(&path, &meta, &mapper.state())?;
    let curves = out_dir(cfg).join("curves");
    let csv_path = curves.join("invmap.csv");
    write_csv(
        &csv_path,
        "epoch,diagnosis_weight,diagnosis_loss,cycle_img_loss,cycle_emb_loss,val_accuracy",
        &report
            .log
            .iter()
            .map(|l| {
                vec![
                    l.epoch as f64,
                    l.diagnosis_weight,
                    l.diagnosis_loss,
                    l.cycle_img_loss,
                    l.cycle_emb_loss,
                    l.val_accuracy,
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    // smoothed accuracy curve (10-point moving average)
    let acc: Vec<f64> = report.log.iter().map(|l| l.val_accuracy).collect();
    let smoothed = imgutil::moving_average(&acc, 10);
    let plot_path = curves.join("invmap_accuracy.png");
    imgutil::save_line_plot(
        &plot_path,
        &[("val_accuracy", &acc), ("smoothed", &smoothed)],
        "diagnosis accuracy",
    )?;
    append_manifest(cfg, "train", &["invmap".into()], &[path, csv_path, plot_path])
}

fn load_invmap(cfg: &PipelineConfig, wanted_by: &str) -> Result<(InverseMapper, BTreeMap<String, String>)> {
    let path = require_ckpt(cfg, "invmap", wanted_by)?;
    let (meta, state) = load_checkpoint(&path)?;
    let mut icfg = cfg.invmap_config();
    icfg.cond_dim = meta.embedding_dim;
    icfg.noise_dim = meta.noise_dim;
    let mut mapper = InverseMapper::new(icfg);
    mapper.load_state(&state)?;
    Ok((mapper, meta.upstream))
}

fn train_refcnn(cfg: &PipelineConfig) -> Result<()> {
    let (split, _) = load_split(cfg)?;
    let mut labels: Vec<String> = split
        .train
        .iter()
        .map(|s| s.label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.sort();
    let rcfg = cfg.refcnn_config();
    let mut cnn = evalsuite::ReferenceCnn::new(labels, &rcfg);
    evalsuite::train_reference_cnn(&mut cnn, &rcfg, &split.train)?;
    let acc = evaluate_cnn(&cnn, &split.validation)?;
    println!("reference CNN validation accuracy {:.4}", acc.accuracy);
    let path = ckpt_path(cfg, "refcnn");
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage: "refcnn".into(),
        config_toml: config_toml(cfg),
        vocab: None,
        embedding_dim: 0,
        noise_dim: 0,
        upstream: BTreeMap::new(),
        tensors: vec![],
    };
    save_checkpoint(&path, &meta, &cnn.state())?;
    append_manifest(cfg, "train", &["refcnn".into()], &[path])
}

fn load_refcnn(cfg: &PipelineConfig, wanted_by: &str) -> Result<evalsuite::ReferenceCnn> {
    let path = require_ckpt(cfg, "refcnn", wanted_by)?;
    let (_, state) = load_checkpoint(&path)?;
    // label order is the sorted label set of the dataset
    let (split, _) = load_split(cfg)?;
    let labels: Vec<String> = split
        .train
        .iter()
        .map(|s| s.label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cnn = evalsuite::ReferenceCnn::new(labels, &cfg.refcnn_config());
    cnn.load_state(&state)?;
    Ok(cnn)
}

fn evaluate_cnn(
    cnn: &evalsuite::ReferenceCnn,
    samples: &[Sample],
) -> Result<evalsuite::AccuracyReport> {
    evalsuite::diagnosis_accuracy(
        |s| {
            let mut rng = derive_rng(0, "cli-cnn-eval");
            let img = corpus::augment_image(&s.image, 64, AugmentMode::Eval, &mut rng)?;
            cnn.predict(&img)
        },
        samples,
    )
}

// ---------------------------------------------------------------------------
// justify
// ---------------------------------------------------------------------------

pub fn cmd_justify(cfg: &PipelineConfig, image: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let (arae_model, arae_hash) = load_arae(cfg, "justify")?;
    let (gan1, gan1_hash) = load_gan1(cfg, "gan1", "justify")?;
    let (mapper, upstream) = load_invmap(cfg, "justify")?;
    check_upstream(&upstream, "arae", &arae_hash)?;
    check_upstream(&upstream, "gan1", &gan1_hash)?;
    let search_cfg = CounterfactualSearchConfig {
        seed: cfg.seed.wrapping_add(5),
        ..cfg.counterfactual_config()
    };
    let reports_dir = out_dir(cfg).join("reports");
    std::fs::create_dir_all(&reports_dir)?;

    let inputs: Vec<(String, Array2<f64>)> = match image {
        Some(path) => {
            let raw = imgutil::load_png(path)?;
            let mut rng = derive_rng(cfg.seed, "justify-single");
            let img = corpus::augment_image(&raw, 64, AugmentMode::Eval, &mut rng)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "image".into());
            vec![(stem, img)]
        }
        None => {
            let (split, _) = load_split(cfg)?;
            let mut rng = derive_rng(cfg.seed, "justify-test");
            let n = limit.unwrap_or(split.test.len()).min(split.test.len());
            split.test[..n]
                .iter()
                .map(|s| {
                    let img =
                        corpus::augment_image(&s.image, 64, AugmentMode::Eval, &mut rng)?;
                    Ok((s.image_id.clone(), img))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let results: Vec<(String, counterfactual::JustificationReport)> = inputs
        .par_iter()
        .map(|(id, img)| {
            let r = counterfactual::justify(img, &mapper, &arae_model, &gan1, &search_cfg)?;
            Ok((id.clone(), r))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut artifacts = Vec::new();
    for (id, report) in &results {
        counterfactual::save_report(&reports_dir, id, report)?;
        artifacts.push(reports_dir.join(format!("{id}.json")));
        println!(
            "{id}: {} ({:.0}%) -> alternative {} | counterfactual {}",
            report.diagnosis.label,
            report.diagnosis.certainty[&report.diagnosis.label] * 100.0,
            report.alternative_label,
            if report.counterfactual_failed { "FAILED" } else { "ok" }
        );
    }
    let manifest_csv = reports_dir.join("batch_manifest.csv");
    let rows: Vec<(String, &counterfactual::JustificationReport)> = results
        .iter()
        .map(|(id, r)| (id.clone(), r))
        .collect();
    counterfactual::write_batch_manifest(&manifest_csv, &rows)?;
    artifacts.push(manifest_csv);
    let n_ok = results.iter().filter(|(_, r)| !r.counterfactual_failed).count();
    println!("{}/{} counterfactual searches succeeded", n_ok, results.len());
    append_manifest(cfg, "justify", &[], &artifacts)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn cmd_evaluate(cfg: &PipelineConfig, which: &str) -> Result<()> {
    match which {
        "wasserstein" | "alignment" | "captions" | "accuracy" | "saliency" | "all" => {}
        other => {
            return Err(Error::Config(format!(
                "unknown evaluation `{other}` (expected wasserstein|alignment|captions|accuracy|saliency|all)"
            )))
        }
    }
    let metrics_dir = out_dir(cfg).join("metrics");
    std::fs::create_dir_all(&metrics_dir)?;
    let mut artifacts = Vec::new();
    let mut summary = serde_json::Map::new();

    if which == "wasserstein" || which == "alignment" || which == "all" {
        let (arae_model, _) = load_arae(cfg, "evaluate")?;
        let (gan1, _) = load_gan1(cfg, "gan1", "evaluate")?;
        let (split, _) = load_split(cfg)?;
        let val = eval_images(&split.validation)?;
        let test = eval_images(&split.test)?;
        let train_data = t2igan::gan_samples(&split.train, &arae_model)?;
        let (gen, gen_cond) =
            generate_set(&gan1, &train_data, cfg.eval.n_generated, cfg.seed)?;
        let ccfg = cfg.critic_config();
        if which != "alignment" {
            let w = evalsuite::wasserstein_estimate(&gen, &val, &test, &ccfg)?;
            println!("wasserstein estimate {:.4} +- {:.4} over {} runs", w.value, w.std, w.runs.len());
            summary.insert("wasserstein".into(), serde_json::to_value(&w)?);
        }
        if which != "wasserstein" {
            let val_cond = cond_of(&gan1, &t2igan::gan_samples(&split.validation, &arae_model)?);
            let test_cond = cond_of(&gan1, &t2igan::gan_samples(&split.test, &arae_model)?);
            let a = evalsuite::alignment_estimate(
                &gen, &gen_cond, &val, &val_cond, &test, &test_cond, &ccfg,
            )?;
            println!("alignment estimate {:.4} +- {:.4} over {} runs", a.value, a.std, a.runs.len());
            summary.insert("alignment".into(), serde_json::to_value(&a)?);
        }
    }

    if which == "captions" || which == "all" {
        let (arae_model, _) = load_arae(cfg, "evaluate captions")?;
        let (mapper, _) = load_invmap(cfg, "evaluate captions")?;
        let (split, _) = load_split(cfg)?;
        let mut rng = derive_rng(cfg.seed, "eval-captions");
        let mut candidates = Vec::new();
        let mut references = Vec::new();
        for s in &split.test {
            let img = corpus::augment_image(&s.image, 64, AugmentMode::Eval, &mut rng)?;
            let result = invmap::infer(&mapper, &arae_model, &img)?;
            candidates.push(strip_markers(&result.tokens, &arae_model.vocab));
            references.push(
                s.descriptions
                    .iter()
                    .map(|d| {
                        strip_markers(&d.sequence(&arae_model.vocab), &arae_model.vocab)
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let scores = evalsuite::caption_metrics(&candidates, &references)?;
        println!(
            "captions: B1 {:.3} B2 {:.3} B3 {:.3} B4 {:.3} R {:.3} C {:.3}",
            scores.bleu[0], scores.bleu[1], scores.bleu[2], scores.bleu[3],
            scores.rouge_l, scores.cider
        );
        summary.insert("captions".into(), serde_json::to_value(&scores)?);
    }

    if which == "accuracy" || which == "all" {
        let (arae_model, _) = load_arae(cfg, "evaluate accuracy")?;
        let (mapper, _) = load_invmap(cfg, "evaluate accuracy")?;
        let (split, _) = load_split(cfg)?;
        let mut rng = derive_rng(cfg.seed, "eval-acc");
        let acc = evalsuite::diagnosis_accuracy(
            |s| {
                let img = corpus::augment_image(&s.image, 64, AugmentMode::Eval, &mut rng)?;
                Ok(invmap::infer(&mapper, &arae_model, &img)?.label)
            },
            &split.test,
        )?;
        println!(
            "inverse-mapping test accuracy {:.4} (per-class recall {:?})",
            acc.accuracy, acc.per_class_recall
        );
        summary.insert("accuracy_invmap".into(), serde_json::to_value(&acc)?);
        if ckpt_path(cfg, "refcnn").exists() {
            let cnn = load_refcnn(cfg, "evaluate accuracy")?;
            let cnn_acc = evaluate_cnn(&cnn, &split.test)?;
            println!("reference CNN test accuracy {:.4}", cnn_acc.accuracy);
            summary.insert("accuracy_refcnn".into(), serde_json::to_value(&cnn_acc)?);
        }
    }

    if which == "saliency" || which == "all" {
        let cnn = load_refcnn(cfg, "evaluate saliency")?;
        let (split, _) = load_split(cfg)?;
        let mut rng = derive_rng(cfg.seed, "eval-sal");
        let dir = metrics_dir.join("saliency");
        std::fs::create_dir_all(&dir)?;
        for s in split.test.iter().take(8) {
            let img = corpus::augment_image(&s.image, 64, AugmentMode::Eval, &mut rng)?;
            for (tag, layer) in [
                ("intermediate", SaliencyLayer::Intermediate),
                ("abstract", SaliencyLayer::Abstract),
            ] {
                let heat = evalsuite::saliency_baseline(&cnn, &img, layer)?;
                let p = dir.join(format!("{}_{tag}.png", s.image_id));
                imgutil::save_png(&p, &heat)?;
                artifacts.push(p);
            }
        }
        println!("saliency heatmaps written to {}", dir.display());
    }

    let summary_path = metrics_dir.join(format!("{which}.json"));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    artifacts.push(summary_path);
    append_manifest(cfg, "evaluate", &[which.into()], &artifacts)
}

fn eval_images(samples: &[Sample]) -> Result<Array3<f64>> {
    let mut rng = derive_rng(0, "cli-eval-images");
    let mut out = Array3::zeros((samples.len(), 64, 64));
    for (i, s) in samples.iter().enumerate() {
        let img = corpus::augment_image(&s.image, 64, AugmentMode::Eval, &mut rng)?;
        out.index_axis_mut(ndarray::Axis(0), i).assign(&img);
    }
    Ok(out)
}

fn cond_of(gan: &Stage1Gan, samples: &[t2igan::GanSample]) -> Array2<f64> {
    let refs: Vec<&t2igan::GanSample> = samples.iter().collect();
    gan.cond_vectors(&refs)
}

fn generate_set(
    gan: &Stage1Gan,
    data: &[t2igan::GanSample],
    n: usize,
    seed: u64,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let mut rng = derive_rng(seed, "cli-generate");
    let conds = cond_of(gan, data);
    let v = conds.ncols();
    let noise = gan.cfg.noise_dim;
    let mut r = Array2::zeros((n, v + noise));
    let mut cond_out = Array2::zeros((n, v));
    for i in 0..n {
        let j = i % data.len();
        cond_out.row_mut(i).assign(&conds.row(j));
        r.row_mut(i).slice_mut(ndarray::s![..v]).assign(&conds.row(j));
        let z = arae::sample_noise(noise, arae::NoiseDistribution::Normal, &mut rng);
        r.row_mut(i).slice_mut(ndarray::s![v..]).assign(&z);
    }
    let mut imgs = Array3::zeros((n, 64, 64));
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let batch = gan.generate_batch(&r.slice(ndarray::s![start..end, ..]).to_owned())?;
        for (k, i) in (start..end).enumerate() {
            imgs.index_axis_mut(ndarray::Axis(0), i)
                .assign(&batch.index_axis(ndarray::Axis(0), k));
        }
    }
    Ok((imgs, cond_out))
}

/// Drop reserved tokens for caption scoring.
fn strip_markers(tokens: &[usize], vocab: &corpus::Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .filter(|&&t| t >= corpus::RESERVED.len())
        .map(|&t| vocab.word_of(t).to_string())
        .collect()
}
