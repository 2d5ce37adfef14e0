//! Command-line front end.
//!
//! Workdir layout:
//!
//! ```text
//! data/dataset.bin(.latent)     gen-data
//! data/augmented.bin(.prov)     augment
//! ckpt/cvae.ckpt                train-vae
//! ckpt/sampler.ckpt             train-sampler
//! ckpt/policy-<algo>.ckpt       train-policy (plus disc-<algo>.ckpt for dwbc and oilca)
//! reports/*.csv                 train-policy, evaluate, exp-*
//! manifest                      one line per completed stage
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::agents::loss_curve_csv;
use crate::augment::{provenance_path, FrozenModels, Provenance};
use crate::config::RunConfig;
use crate::datagen::{self, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluate::{self, disentangle_csv, report_csv, scatter_csv, sweep_csv, EvalReport};
use crate::agents::Policy;
use crate::ivae::CvaeModel;
use crate::numkit::checkpoint::Checkpoint;
use crate::pipeline::{Algo, Pipeline};
use crate::toyenv::short_hash;

#[derive(Parser, Debug)]
#[command(name = "oilca", version, about = "Offline imitation learning with counterfactual augmentation on a toy causal MDP")]
pub struct Cli {
    /// Config file of `section.key = value` lines; defaults apply to missing keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Working directory; overrides `paths.workdir`.
    #[arg(long, env = "OILCA_WORKDIR")]
    pub workdir: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Collect episodes and split them into D_E and D_U.
    GenData,
    /// Fit the conditional VAE on the collected transitions.
    TrainVae,
    /// Fit the sampler policy on D_E by behavioral cloning.
    TrainSampler,
    /// Append counterfactual expert records to D_E.
    Augment,
    /// Train one policy.
    TrainPolicy {
        #[arg(long, value_parser = ["bc-exp", "bc-all", "dwbc", "oilca"])]
        algo: String,
    },
    /// Roll out trained policies and write reports/report.csv.
    Evaluate {
        /// Evaluate only this method; by default every trained policy is evaluated.
        #[arg(long, value_parser = ["bc-exp", "bc-all", "dwbc", "oilca"])]
        algo: Option<String>,
    },
    /// Conditional vs no-label CVAE MCC on every eval seed.
    ExpDisentangle,
    /// All four methods on every eval seed.
    ExpCompare,
    /// OILCA across augmentation ratios.
    ExpSweep,
    /// gen-data, train-vae, train-sampler, augment, train-policy --algo oilca, evaluate.
    RunAll,
    /// Print the effective configuration in canonical form.
    ShowConfig,
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(short_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Prerequisite { artifact: p, producer });
        }
        Ok(p)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(&self.cfg, 0)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn record(&self, stage: &str, inputs: &[&Path], outputs: &[&Path], started: Instant) -> Result<()> {
        let fmt = |ps: &[&Path]| -> Result<String> {
            ps.iter()
                .map(|p| Ok(format!("{}:{}", p.strip_prefix(&self.dir).unwrap_or(p).display(), file_hash(p)?)))
                .collect::<Result<Vec<_>>>()
                .map(|v| v.join(","))
        };
        let line = format!(
            "stage={stage} config={} inputs={} outputs={} wall_ms={}\n",
            self.cfg.hash(),
            fmt(inputs)?,
            fmt(outputs)?,
            started.elapsed().as_millis()
        );
        let p = self.path("manifest");
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&p, e))
    }

    fn load_dataset(&self) -> Result<(PathBuf, SplitDataset)> {
        let p = self.require("data/dataset.bin", "gen-data")?;
        Ok((p.clone(), datagen::load(&p)?))
    }

    fn load_model<T>(&self, rel: &str, producer: &'static str, data_hash: &str, parse: impl Fn(&Checkpoint) -> Result<T>) -> Result<(PathBuf, T)> {
        let p = self.require(rel, producer)?;
        let ck = Checkpoint::load(&p)?;
        if ck.meta("data_hash")? != data_hash {
            return Err(Error::Staleness(format!("{} was trained on different data; re-run `{producer}`", p.display())));
        }
        Ok((p, parse(&ck)?))
    }
}

fn gen_data(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let ds = c.pipeline()?.gen_data()?;
    let p = c.path("data/dataset.bin");
    datagen::save(&ds, &p)?;
    println!("gen-data: {} expert / {} unlabeled episodes", ds.expert.len(), ds.unlabeled.len());
    let lp = datagen::latent_path(&p);
    if lp.exists() {
        c.record("gen-data", &[], &[&p, &lp], t)
    } else {
        c.record("gen-data", &[], &[&p], t)
    }
}

fn train_vae(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let (dp, ds) = c.load_dataset()?;
    let pipe = c.pipeline()?;
    let model = pipe.train_vae(&pipe.vae_data(&ds)?, true)?;
    let mut ck = model.to_checkpoint(c.cfg.master_seed, c.cfg.vae.train.epochs as u64);
    ck.set_meta("data_hash", file_hash(&dp)?);
    let p = c.path("ckpt/cvae.ckpt");
    ck.save(&p)?;
    println!("train-vae: checksum {}", model.checksum());
    c.record("train-vae", &[&dp], &[&p], t)
}

fn train_sampler(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let (dp, ds) = c.load_dataset()?;
    let sampler = c.pipeline()?.train_sampler(&ds)?;
    let mut ck = sampler.to_checkpoint(c.cfg.master_seed, c.cfg.sampler.steps as u64);
    ck.set_meta("data_hash", file_hash(&dp)?);
    let p = c.path("ckpt/sampler.ckpt");
    ck.save(&p)?;
    println!("train-sampler: checksum {}", sampler.checksum());
    c.record("train-sampler", &[&dp], &[&p], t)
}

fn augment(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let (dp, ds) = c.load_dataset()?;
    let dh = file_hash(&dp)?;
    let (mp, model) = c.load_model("ckpt/cvae.ckpt", "train-vae", &dh, CvaeModel::from_checkpoint)?;
    let (sp, sampler) = c.load_model("ckpt/sampler.ckpt", "train-sampler", &dh, Policy::from_checkpoint)?;
    let frozen = FrozenModels::new(model, sampler);
    let mut out = c.pipeline()?.augment(&ds, &frozen, None)?;
    out.dataset.manifest.meta.insert("source_hash".into(), dh);
    let p = c.path("data/augmented.bin");
    datagen::save(&out.dataset, &p)?;
    let pp = provenance_path(&p);
    Provenance::from_pairs(&frozen, &out.pairs).save(&pp)?;
    println!("augment: {} counterfactual records", out.pairs.len());
    c.record("augment", &[&dp, &mp, &sp], &[&p, &pp], t)
}

fn train_policy(c: &Ctx, algo: Algo) -> Result<()> {
    let t = Instant::now();
    let (dp, ds) = c.load_dataset()?;
    let dh = file_hash(&dp)?;
    let (input, train_ds) = if algo == Algo::Oilca {
        let ap = c.require("data/augmented.bin", "augment")?;
        let aug = datagen::load(&ap)?;
        if aug.manifest.meta.get("source_hash") != Some(&dh) {
            return Err(Error::Staleness(format!("{} was built from different data; re-run `augment`", ap.display())));
        }
        (ap, aug)
    } else {
        (dp, ds)
    };
    let (policy, disc, curve) = c.pipeline()?.train_policy(algo, &train_ds)?;
    let name = algo.name();
    let mut ck = policy.to_checkpoint(c.cfg.master_seed, curve.len() as u64);
    ck.set_meta("algo", name);
    ck.set_meta("data_hash", file_hash(&input)?);
    let pp = c.path(&format!("ckpt/policy-{name}.ckpt"));
    ck.save(&pp)?;
    let lp = c.write(&format!("reports/loss-{name}.csv"), loss_curve_csv(&curve).as_bytes())?;
    let mut outs = vec![pp, lp];
    if let Some(d) = disc {
        let dpth = c.path(&format!("ckpt/disc-{name}.ckpt"));
        d.to_checkpoint(c.cfg.master_seed, c.cfg.dwbc.total_steps as u64).save(&dpth)?;
        outs.push(dpth);
    }
    println!("train-policy: {name} done ({} loss points)", curve.len());
    let refs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    c.record("train-policy", &[&input], &refs, t)
}

fn evaluate_cmd(c: &Ctx, only: Option<Algo>) -> Result<()> {
    let t = Instant::now();
    let algos: Vec<Algo> = match only {
        Some(a) => vec![a],
        None => Algo::ALL.into_iter().filter(|a| c.path(&format!("ckpt/policy-{}.ckpt", a.name())).exists()).collect(),
    };
    if algos.is_empty() {
        return Err(Error::Prerequisite { artifact: c.path("ckpt/policy-<algo>.ckpt"), producer: "train-policy" });
    }
    let pipe = c.pipeline()?;
    let mut reports = Vec::new();
    let mut inputs = Vec::new();
    for algo in algos {
        let p = c.require(&format!("ckpt/policy-{}.ckpt", algo.name()), "train-policy")?;
        let policy = Policy::from_checkpoint(&Checkpoint::load(&p)?)?;
        let returns = pipe.evaluate(&policy)?;
        let report = EvalReport::new(algo.name(), vec![(c.cfg.master_seed, evaluate::mean(&returns), evaluate::stderr(&returns))], &c.cfg);
        println!("evaluate: {:8} mean return {:.3} ± {:.3}", algo.name(), report.per_seed[0].1, report.per_seed[0].2);
        reports.push(report);
        inputs.push(p);
    }
    let out = c.write("reports/report.csv", report_csv(&reports).as_bytes())?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    c.record("evaluate", &refs, &[&out], t)
}

fn exp_disentangle(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let (rows, scatter) = evaluate::experiment_disentangle(&c.cfg)?;
    for r in &rows {
        println!("seed {}: conditional MCC {:.3}, no-label MCC {:.3}", r.seed, r.mcc_conditional, r.mcc_no_label);
    }
    let a = c.write("reports/disentangle.csv", disentangle_csv(&rows).as_bytes())?;
    let b = c.write("reports/scatter.csv", scatter_csv(&scatter).as_bytes())?;
    c.record("exp-disentangle", &[], &[&a, &b], t)
}

fn exp_compare(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let reports = evaluate::experiment_compare(&c.cfg)?;
    for r in &reports {
        println!("{:8} mean return {:.3} ± {:.3} over {} seeds", r.method, r.mean, r.stderr, r.per_seed.len());
    }
    let out = c.write("reports/compare.csv", report_csv(&reports).as_bytes())?;
    c.record("exp-compare", &[], &[&out], t)
}

fn exp_sweep(c: &Ctx) -> Result<()> {
    let t = Instant::now();
    let rows = evaluate::experiment_ratio_sweep(&c.cfg)?;
    for r in &rows {
        println!("ratio {:>5}%: mean return {:.3} ± {:.3}", r.ratio_pct, r.mean_return, r.stderr);
    }
    let out = c.write("reports/sweep.csv", sweep_csv(&rows).as_bytes())?;
    c.record("exp-sweep", &[], &[&out], t)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.canonical_text());
        return Ok(());
    }
    let dir = cfg.workdir.clone();
    for sub in ["data", "ckpt", "reports"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let c = Ctx { cfg, dir };
    let algo = |s: &str| Algo::parse(s).ok_or_else(|| Error::Config(format!("unknown algo `{s}`")));
    match &cli.command {
        Command::GenData => gen_data(&c),
        Command::TrainVae => train_vae(&c),
        Command::TrainSampler => train_sampler(&c),
        Command::Augment => augment(&c),
        Command::TrainPolicy { algo: a } => train_policy(&c, algo(a)?),
        Command::Evaluate { algo: a } => evaluate_cmd(&c, a.as_deref().map(algo).transpose()?),
        Command::ExpDisentangle => exp_disentangle(&c),
        Command::ExpCompare => exp_compare(&c),
        Command::ExpSweep => exp_sweep(&c),
        Command::RunAll => {
            gen_data(&c)?;
            train_vae(&c)?;
            train_sampler(&c)?;
            augment(&c)?;
            train_policy(&c, Algo::Oilca)?;
            evaluate_cmd(&c, Some(Algo::Oilca))
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
}
