//! Pipeline configuration: a flat TOML document of typed sections, with
//! environment-variable overrides (`CXRJUST_<SECTION>_<KEY>`). Precedence is
//! flag > environment > file > default; flags are applied by the CLI on top
//! of what this module returns. The full config is serialized verbatim into
//! every checkpoint for provenance.

use crate::arae::AraeConfig;
use crate::counterfactual::CounterfactualSearchConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{CriticConfig, RefCnnConfig};
use crate::invmap::InvMapConfig;
use crate::synthdata::SynthConfig;
use crate::t2igan::{CondMode, Gan1Config, Gan2Config};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// "synthetic" or "disk".
    pub source: String,
    /// Dataset directory (written by `synth`, read by everything else).
    pub path: String,
    pub n_patients: usize,
    pub prior_normal: f64,
    pub image_size: usize,
    pub min_count: usize,
    pub split_weights: (f64, f64, f64),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            path: "data/synthetic".into(),
            n_patients: 500,
            prior_normal: 0.84,
            image_size: 64,
            min_count: 2,
            split_weights: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AraeSection {
    pub embedding_dim: usize,
    pub word_dim: usize,
    pub adv_hidden: usize,
    pub gen_noise_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_ae: f64,
    pub lr_adv: f64,
    pub critic_clip: f64,
}

impl Default for AraeSection {
    fn default() -> Self {
        let d = AraeConfig::default();
        AraeSection {
            embedding_dim: d.embedding_dim,
            word_dim: d.word_dim,
            adv_hidden: d.adv_hidden,
            gen_noise_dim: d.gen_noise_dim,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_ae: d.lr_ae,
            lr_adv: d.lr_adv,
            critic_clip: d.critic_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GanSection {
    pub noise_dim: usize,
    pub noise_distribution: String,
    pub ng: usize,
    pub nd: usize,
    pub emb_proj: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    /// "external" (ARAE embeddings) or "learned" (embedding layer).
    pub conditioning: String,
}

impl Default for GanSection {
    fn default() -> Self {
        let d = Gan1Config::default();
        GanSection {
            noise_dim: d.noise_dim,
            noise_distribution: "normal".into(),
            ng: d.ng,
            nd: d.nd,
            emb_proj: d.emb_proj,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            checkpoint_every: d.checkpoint_every,
            conditioning: "external".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Gan2Section {
    pub ng: usize,
    pub nd: usize,
    pub emb_proj: usize,
    pub res_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for Gan2Section {
    fn default() -> Self {
        let d = Gan2Config::default();
        Gan2Section {
            ng: d.ng,
            nd: d.nd,
            emb_proj: d.emb_proj,
            res_blocks: d.res_blocks,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InvMapSection {
    pub nc: usize,
    pub fc_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub diagnosis_only: bool,
}

impl Default for InvMapSection {
    fn default() -> Self {
        let d = InvMapConfig::default();
        InvMapSection {
            nc: d.nc,
            fc_hidden: d.fc_hidden,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            diagnosis_only: d.diagnosis_only,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualSection {
    pub learning_rate: f64,
    pub outer_steps: usize,
    pub max_inner: usize,
    pub max_tries: usize,
    pub sigma_z_scale: f64,
    pub eps_rel: f64,
}

impl Default for CounterfactualSection {
    fn default() -> Self {
        let d = CounterfactualSearchConfig::default();
        CounterfactualSection {
            learning_rate: d.learning_rate,
            outer_steps: d.outer_steps,
            max_inner: d.max_inner,
            max_tries: d.max_tries,
            sigma_z_scale: d.sigma_z_scale,
            eps_rel: d.eps_rel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub critic_channels: usize,
    pub critic_iters: usize,
    pub critic_batch: usize,
    pub critic_runs: usize,
    pub gp_lambda: f64,
    pub n_generated: usize,
    pub refcnn_channels: usize,
    pub refcnn_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = CriticConfig::default();
        let r = RefCnnConfig::default();
        EvalSection {
            critic_channels: d.channels,
            critic_iters: d.iters,
            critic_batch: d.batch_size,
            critic_runs: d.runs,
            gp_lambda: d.gp_lambda,
            n_generated: 600,
            refcnn_channels: r.channels,
            refcnn_epochs: r.epochs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataSection,
    pub arae: AraeSection,
    pub gan1: GanSection,
    pub gan2: Gan2Section,
    pub invmap: InvMapSection,
    pub counterfactual: CounterfactualSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.source != "synthetic" && self.data.source != "disk" {
            return Err(Error::Config(format!(
                "data.source must be synthetic|disk, got `{}`",
                self.data.source
            )));
        }
        let (a, b, c) = self.data.split_weights;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("data.split_weights must sum to 1".into()));
        }
        self.gan1
            .noise_distribution
            .parse::<crate::arae::NoiseDistribution>()?;
        if self.gan1.conditioning != "external" && self.gan1.conditioning != "learned" {
            return Err(Error::Config(format!(
                "gan1.conditioning must be external|learned, got `{}`",
                self.gan1.conditioning
            )));
        }
        if self.arae.epochs == 0 || self.gan1.epochs == 0 || self.invmap.epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_patients: self.data.n_patients,
            prior_normal: self.data.prior_normal,
            image_size: self.data.image_size,
            master_seed: self.seed,
            min_count: self.data.min_count,
            ..Default::default()
        }
    }

    pub fn arae_config(&self) -> AraeConfig {
        AraeConfig {
            embedding_dim: self.arae.embedding_dim,
            word_dim: self.arae.word_dim,
            adv_hidden: self.arae.adv_hidden,
            gen_noise_dim: self.arae.gen_noise_dim,
            epochs: self.arae.epochs,
            batch_size: self.arae.batch_size,
            lr_ae: self.arae.lr_ae,
            lr_adv: self.arae.lr_adv,
            critic_clip: self.arae.critic_clip,
            seed: self.seed.wrapping_add(1),
            ..Default::default()
        }
    }

    pub fn gan1_config(&self, vocab_size: usize) -> Gan1Config {
        Gan1Config {
            cond_dim: self.arae.embedding_dim,
            noise_dim: self.gan1.noise_dim,
            ng: self.gan1.ng,
            nd: self.gan1.nd,
            emb_proj: self.gan1.emb_proj,
            cond_mode: if self.gan1.conditioning == "learned" {
                CondMode::Learned
            } else {
                CondMode::External
            },
            vocab_size,
            epochs: self.gan1.epochs,
            batch_size: self.gan1.batch_size,
            lr: self.gan1.lr,
            checkpoint_every: self.gan1.checkpoint_every,
            seed: self.seed.wrapping_add(2),
            ..Default::default()
        }
    }

    pub fn gan2_config(&self) -> Gan2Config {
        Gan2Config {
            cond_dim: self.arae.embedding_dim,
            noise_dim: self.gan1.noise_dim,
            ng: self.gan2.ng,
            nd: self.gan2.nd,
            emb_proj: self.gan2.emb_proj,
            res_blocks: self.gan2.res_blocks,
            epochs: self.gan2.epochs,
            batch_size: self.gan2.batch_size,
            lr: self.gan2.lr,
            seed: self.seed.wrapping_add(3),
            ..Default::default()
        }
    }

    pub fn invmap_config(&self) -> InvMapConfig {
        InvMapConfig {
            cond_dim: self.arae.embedding_dim,
            noise_dim: self.gan1.noise_dim,
            nc: self.invmap.nc,
            fc_hidden: self.invmap.fc_hidden,
            epochs: self.invmap.epochs,
            batch_size: self.invmap.batch_size,
            lr: self.invmap.lr,
            diagnosis_only: self.invmap.diagnosis_only,
            seed: self.seed.wrapping_add(4),
            ..Default::default()
        }
    }

    pub fn counterfactual_config(&self) -> CounterfactualSearchConfig {
        CounterfactualSearchConfig {
            learning_rate: self.counterfactual.learning_rate,
            outer_steps: self.counterfactual.outer_steps,
            max_inner: self.counterfactual.max_inner,
            max_tries: self.counterfactual.max_tries,
            sigma_z_scale: self.counterfactual.sigma_z_scale,
            eps_rel: self.counterfactual.eps_rel,
            seed: self.seed.wrapping_add(5),
            ..Default::default()
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            channels: self.eval.critic_channels,
            cond_dim: self.arae.embedding_dim,
            iters: self.eval.critic_iters,
            batch_size: self.eval.critic_batch,
            runs: self.eval.critic_runs,
            gp_lambda: self.eval.gp_lambda,
            seed: self.seed.wrapping_add(6),
            ..Default::default()
        }
    }

    pub fn refcnn_config(&self) -> RefCnnConfig {
        RefCnnConfig {
            channels: self.eval.refcnn_channels,
            epochs: self.eval.refcnn_epochs,
            seed: self.seed.wrapping_add(7),
            ..Default::default()
        }
    }
}

/// Load a config file, then apply `CXRJUST_<SECTION>_<KEY>` environment
/// overrides (`CXRJUST_SEED` / `CXRJUST_OUT_DIR` for top-level keys).
pub fn load_config(path: Option<&Path>, env: &[(String, String)]) -> Result<PipelineConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| Error::Config(format!("bad TOML in {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_env_overrides(&mut table, env)?;
    let cfg: PipelineConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_env_overrides(table: &mut toml::Table, env: &[(String, String)]) -> Result<()> {
    for (key, value) in env {
        let Some(rest) = key.strip_prefix("CXRJUST_") else {
            continue;
        };
        let lower = rest.to_lowercase();
        // top-level keys have no section part
        let (section, field) = match lower.split_once('_') {
            Some((s, f))
                if [
                    "data",
                    "arae",
                    "gan1",
                    "gan2",
                    "invmap",
                    "counterfactual",
                    "eval",
                ]
                .contains(&s) =>
            {
                (Some(s.to_string()), f.to_string())
            }
            _ => (None, lower.clone()),
        };
        let parsed = parse_toml_value(value);
        match section {
            None => {
                table.insert(field, parsed);
            }
            Some(sec) => {
                let entry = table
                    .entry(sec.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                match entry.as_table_mut() {
                    Some(t) => {
                        t.insert(field, parsed);
                    }
                    None => {
                        return Err(Error::Config(format!("config section `{sec}` is not a table")))
                    }
                }
            }
        }
    }
    Ok(())
}

fn parse_toml_value(s: &str) -> toml::Value {
    if let Ok(i) = s.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = s.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(s.to_string())
}
