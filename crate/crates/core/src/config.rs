//! Run configuration: a flat `section.key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key has a default and
//! unknown keys are rejected. [`RunConfig::canonical_text`] lists every key
//! in a fixed order; its hash identifies the configuration in reports.

use std::path::PathBuf;

use crate::agents::{BcConfig, DwbcConfig, NetConfig};
use crate::augment::{AugmentConfig, LatentSource};
use crate::datagen::PolicyMixture;
use crate::error::{Error, Result};
use crate::ivae::{CvaeConfig, CvaeTrainConfig};
use crate::numkit::mlp::Activation;
use crate::toyenv::{short_hash, EnvParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DatagenConfig {
    pub episodes_per_class: usize,
    pub top_frac: f64,
    pub expert_prob: f64,
    pub mixture: PolicyMixture,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { episodes_per_class: 1000, top_frac: 0.2, expert_prob: 0.1, mixture: PolicyMixture::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub model: CvaeConfig,
    pub train: CvaeTrainConfig,
    /// Size of the seeded subsample of D_all the CVAE is fit on; 0 uses everything.
    pub train_transitions: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { model: CvaeConfig::default(), train: CvaeTrainConfig::default(), train_transitions: 30_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    pub sweep_ratios: Vec<f64>,
    pub plateau_ratio: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 1000, seeds: vec![0, 1, 2, 3, 4], sweep_ratios: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0], plateau_ratio: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub env: EnvParams,
    pub datagen: DatagenConfig,
    pub vae: VaeConfig,
    pub sampler: BcConfig,
    pub augment: AugmentConfig,
    pub policy: NetConfig,
    pub bc: BcConfig,
    pub dwbc: DwbcConfig,
    pub eval: EvalConfig,
    pub workdir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            env: EnvParams::default(),
            datagen: DatagenConfig::default(),
            vae: VaeConfig::default(),
            sampler: BcConfig::default(),
            augment: AugmentConfig::default(),
            policy: NetConfig::default(),
            bc: BcConfig::default(),
            dwbc: DwbcConfig::default(),
            eval: EvalConfig::default(),
            workdir: PathBuf::from("work"),
        }
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| parse_num(x.trim())).collect()
}

fn parse_vec2(v: &str) -> std::result::Result<[f64; 2], String> {
    let xs: Vec<f64> = parse_list(v)?;
    <[f64; 2]>::try_from(xs).map_err(|_| format!("expected two comma-separated numbers, got `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.env;
        let d = &self.datagen;
        let v = &self.vae;
        let a = &self.augment;
        let w = &self.dwbc;
        vec![
            ("master_seed", self.master_seed.to_string()),
            ("env.seed", e.seed.to_string()),
            ("env.n_classes", e.n_classes.to_string()),
            ("env.alpha", e.alpha.to_string()),
            ("env.step_size", e.step_size.to_string()),
            ("env.low", list(&e.low)),
            ("env.high", list(&e.high)),
            ("env.target", list(&e.target)),
            ("env.episode_len", e.episode_len.to_string()),
            ("datagen.episodes_per_class", d.episodes_per_class.to_string()),
            ("datagen.top_frac", d.top_frac.to_string()),
            ("datagen.expert_prob", d.expert_prob.to_string()),
            ("datagen.greedy", d.mixture.greedy.to_string()),
            ("datagen.eps_random", d.mixture.eps_random.to_string()),
            ("datagen.uniform", d.mixture.uniform.to_string()),
            ("datagen.eps", d.mixture.eps.to_string()),
            ("vae.latent_dim", v.model.latent_dim.to_string()),
            ("vae.hidden", v.model.hidden.to_string()),
            ("vae.hidden_layers", v.model.hidden_layers.to_string()),
            ("vae.activation", v.model.activation.name().to_string()),
            ("vae.state_scale", v.model.state_scale.to_string()),
            ("vae.init_decoder_logvar", v.model.init_decoder_logvar.to_string()),
            ("vae.epochs", v.train.epochs.to_string()),
            ("vae.batch_size", v.train.batch_size.to_string()),
            ("vae.lr", v.train.lr.to_string()),
            ("vae.kl_warmup_epochs", v.train.kl_warmup_epochs.to_string()),
            ("vae.cosine_lr", v.train.cosine_lr.to_string()),
            ("vae.train_transitions", v.train_transitions.to_string()),
            ("sampler.steps", self.sampler.steps.to_string()),
            ("sampler.batch_size", self.sampler.batch_size.to_string()),
            ("sampler.lr", self.sampler.lr.to_string()),
            ("augment.batches", a.batches.to_string()),
            ("augment.batch_size", a.batch_size.to_string()),
            ("augment.target_ratio", a.target_ratio.map_or("none".to_string(), |r| r.to_string())),
            ("augment.noise_scale", a.noise_scale.to_string()),
            ("augment.latent", match a.latent {
                LatentSource::Posterior => "posterior".to_string(),
                LatentSource::Prior => "prior".to_string(),
            }),
            ("policy.hidden", self.policy.hidden.to_string()),
            ("policy.hidden_layers", self.policy.hidden_layers.to_string()),
            ("policy.state_scale", self.policy.state_scale.to_string()),
            ("bc.steps", self.bc.steps.to_string()),
            ("bc.batch_size", self.bc.batch_size.to_string()),
            ("bc.lr", self.bc.lr.to_string()),
            ("bc.cosine_lr", self.bc.cosine_lr.to_string()),
            ("dwbc.eta", w.eta.to_string()),
            ("dwbc.alpha", w.alpha.to_string()),
            ("dwbc.d_min", w.d_min.to_string()),
            ("dwbc.d_max", w.d_max.to_string()),
            ("dwbc.disc_update_period", w.disc_update_period.to_string()),
            ("dwbc.policy_update_period", w.policy_update_period.to_string()),
            ("dwbc.lr_disc", w.lr_disc.to_string()),
            ("dwbc.lr_policy", w.lr_policy.to_string()),
            ("dwbc.total_steps", w.total_steps.to_string()),
            ("dwbc.batch_size", w.batch_size.to_string()),
            ("dwbc.cosine_lr", w.cosine_lr.to_string()),
            ("eval.n_episodes", self.eval.n_episodes.to_string()),
            ("eval.seeds", list(&self.eval.seeds)),
            ("eval.sweep_ratios", list(&self.eval.sweep_ratios)),
            ("eval.plateau_ratio", self.eval.plateau_ratio.to_string()),
            ("paths.workdir", self.workdir.display().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match key {
            "master_seed" => self.master_seed = parse_num(v)?,
            "env.seed" => self.env.seed = parse_num(v)?,
            "env.n_classes" => self.env.n_classes = parse_num(v)?,
            "env.alpha" => self.env.alpha = parse_num(v)?,
            "env.step_size" => self.env.step_size = parse_num(v)?,
            "env.low" => self.env.low = parse_vec2(v)?,
            "env.high" => self.env.high = parse_vec2(v)?,
            "env.target" => self.env.target = parse_vec2(v)?,
            "env.episode_len" => self.env.episode_len = parse_num(v)?,
            "datagen.episodes_per_class" => self.datagen.episodes_per_class = parse_num(v)?,
            "datagen.top_frac" => self.datagen.top_frac = parse_num(v)?,
            "datagen.expert_prob" => self.datagen.expert_prob = parse_num(v)?,
            "datagen.greedy" => self.datagen.mixture.greedy = parse_num(v)?,
            "datagen.eps_random" => self.datagen.mixture.eps_random = parse_num(v)?,
            "datagen.uniform" => self.datagen.mixture.uniform = parse_num(v)?,
            "datagen.eps" => self.datagen.mixture.eps = parse_num(v)?,
            "vae.latent_dim" => self.vae.model.latent_dim = parse_num(v)?,
            "vae.hidden" => self.vae.model.hidden = parse_num(v)?,
            "vae.hidden_layers" => self.vae.model.hidden_layers = parse_num(v)?,
            "vae.activation" => self.vae.model.activation = Activation::parse(v).ok_or_else(|| format!("unknown activation `{v}`"))?,
            "vae.state_scale" => self.vae.model.state_scale = parse_num(v)?,
            "vae.init_decoder_logvar" => self.vae.model.init_decoder_logvar = parse_num(v)?,
            "vae.epochs" => self.vae.train.epochs = parse_num(v)?,
            "vae.batch_size" => self.vae.train.batch_size = parse_num(v)?,
            "vae.lr" => self.vae.train.lr = parse_num(v)?,
            "vae.kl_warmup_epochs" => self.vae.train.kl_warmup_epochs = parse_num(v)?,
            "vae.cosine_lr" => self.vae.train.cosine_lr = parse_bool(v)?,
            "vae.train_transitions" => self.vae.train_transitions = parse_num(v)?,
            "sampler.steps" => self.sampler.steps = parse_num(v)?,
            "sampler.batch_size" => self.sampler.batch_size = parse_num(v)?,
            "sampler.lr" => self.sampler.lr = parse_num(v)?,
            "augment.batches" => self.augment.batches = parse_num(v)?,
            "augment.batch_size" => self.augment.batch_size = parse_num(v)?,
            "augment.target_ratio" => self.augment.target_ratio = if v == "none" { None } else { Some(parse_num(v)?) },
            "augment.noise_scale" => self.augment.noise_scale = parse_num(v)?,
            "augment.latent" => {
                self.augment.latent = match v {
                    "posterior" => LatentSource::Posterior,
                    "prior" => LatentSource::Prior,
                    _ => return Err(format!("expected posterior or prior, got `{v}`")),
                }
            }
            "policy.hidden" => self.policy.hidden = parse_num(v)?,
            "policy.hidden_layers" => self.policy.hidden_layers = parse_num(v)?,
            "policy.state_scale" => self.policy.state_scale = parse_num(v)?,
            "bc.steps" => self.bc.steps = parse_num(v)?,
            "bc.batch_size" => self.bc.batch_size = parse_num(v)?,
            "bc.lr" => self.bc.lr = parse_num(v)?,
            "bc.cosine_lr" => self.bc.cosine_lr = parse_bool(v)?,
            "dwbc.eta" => self.dwbc.eta = parse_num(v)?,
            "dwbc.alpha" => self.dwbc.alpha = parse_num(v)?,
            "dwbc.d_min" => self.dwbc.d_min = parse_num(v)?,
            "dwbc.d_max" => self.dwbc.d_max = parse_num(v)?,
            "dwbc.disc_update_period" => self.dwbc.disc_update_period = parse_num(v)?,
            "dwbc.policy_update_period" => self.dwbc.policy_update_period = parse_num(v)?,
            "dwbc.lr_disc" => self.dwbc.lr_disc = parse_num(v)?,
            "dwbc.lr_policy" => self.dwbc.lr_policy = parse_num(v)?,
            "dwbc.total_steps" => self.dwbc.total_steps = parse_num(v)?,
            "dwbc.batch_size" => self.dwbc.batch_size = parse_num(v)?,
            "dwbc.cosine_lr" => self.dwbc.cosine_lr = parse_bool(v)?,
            "eval.n_episodes" => self.eval.n_episodes = parse_num(v)?,
            "eval.seeds" => self.eval.seeds = parse_list(v)?,
            "eval.sweep_ratios" => self.eval.sweep_ratios = parse_list(v)?,
            "eval.plateau_ratio" => self.eval.plateau_ratio = parse_num(v)?,
            "paths.workdir" => self.workdir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn canonical_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of the canonical text with `paths.workdir` excluded, so moving a run does not change it.
    pub fn hash(&self) -> String {
        let text: String = self.entries().into_iter().filter(|(k, _)| *k != "paths.workdir").map(|(k, v)| format!("{k} = {v}\n")).collect();
        short_hash(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.datagen.episodes_per_class == 0 {
            return bad("datagen.episodes_per_class must be at least 1");
        }
        if self.datagen.mixture.greedy + self.datagen.mixture.eps_random + self.datagen.mixture.uniform == 0 {
            return bad("behavior mixture weights are all zero");
        }
        if self.vae.train.epochs == 0 || self.vae.train.batch_size == 0 || self.vae.model.hidden == 0 {
            return bad("vae.epochs, vae.batch_size and vae.hidden must be positive");
        }
        if self.sampler.batch_size == 0 || self.bc.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.eval.n_episodes == 0 {
            return bad("eval.n_episodes must be at least 1");
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds is empty");
        }
        if self.eval.sweep_ratios.iter().chain([&self.eval.plateau_ratio]).any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("sweep ratios must be positive");
        }
        self.augment.validate()?;
        self.dwbc.validate()?;
        Ok(())
    }

    /// CVAE settings with the class count taken from the env section.
    pub fn cvae_config(&self, conditional: bool) -> CvaeConfig {
        CvaeConfig { n_classes: self.env.n_classes, conditional, ..self.vae.model.clone() }
    }
}
