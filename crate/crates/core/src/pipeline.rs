//! Stage functions shared by the command-line front end and the experiment drivers.
//!
//! A run seed `s` owns the seed tree `SeedTree::new(master_seed + s)` (wrapping), so a
//! single-run pipeline with `--seed k` and experiment seed `k` under master seed 0 draw
//! identical streams. Stream layout inside a tree:
//!
//! | stage | index | use |
//! |---|---|---|
//! | datagen | episode id | one rollout each |
//! | datagen | `SPLIT_STREAM` | expert/unlabeled coin flips |
//! | vae | 0 | training subsample |
//! | vae | 1 / 2 | conditional / no-label model |
//! | augment | 0 | sampler |
//! | augment | 1 | counterfactual generation |
//! | agent | 0 / 1 / 2 | BC-exp / BC-all / DWBC and OILCA |
//! | eval | episode index | one rollout each |

use rand::seq::index;

use crate::agents::{train_bc, train_dwbc, LossPoint, Policy, SaBatch};
use crate::augment::{augment_expert, pretrain_sampler, AugmentConfig, Augmented, FrozenModels};
use crate::config::RunConfig;
use crate::datagen::{collect, label_split, Episode, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluate::evaluate_policy;
use crate::ivae::{log_class_frequencies, train_cvae, CvaeModel, TransitionBatch};
use crate::numkit::rng::{SeedTree, Stage};
use crate::numkit::tensor::Tensor2;
use crate::toyenv::{EnvSpec, ToyEnv};

pub const SPLIT_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    BcExp,
    BcAll,
    Dwbc,
    Oilca,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::BcExp, Algo::BcAll, Algo::Dwbc, Algo::Oilca];

    pub fn name(self) -> &'static str {
        match self {
            Algo::BcExp => "bc-exp",
            Algo::BcAll => "bc-all",
            Algo::Dwbc => "dwbc",
            Algo::Oilca => "oilca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    fn agent_stream(self) -> u64 {
        match self {
            Algo::BcExp => 0,
            Algo::BcAll => 1,
            Algo::Dwbc | Algo::Oilca => 2,
        }
    }
}

/// Training set for the CVAE with the matching ground-truth latents when available.
#[derive(Clone, Debug)]
pub struct VaeData {
    pub batch: TransitionBatch,
    pub latents: Option<Tensor2>,
}

/// Everything one seed needs: the environment, its seed tree and the config.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub env: ToyEnv,
    pub tree: SeedTree,
    pub seed: u64,
}

fn real_pairs<'a>(eps: impl Iterator<Item = &'a Episode>, include_counterfactual: bool) -> Vec<([f64; 2], [f64; 2])> {
    eps.flat_map(|e| e.records.iter().filter(move |r| include_counterfactual || !r.is_counterfactual()).map(|r| (r.s, r.a))).collect()
}

impl Pipeline {
    /// The environment comes from `env.seed` and is shared by every run seed.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let env = ToyEnv::new(EnvSpec::generate(&cfg.env)?)?;
        Ok(Self { cfg: cfg.clone(), env, tree: SeedTree::new(cfg.master_seed.wrapping_add(seed)), seed })
    }

    pub fn gen_data(&self) -> Result<SplitDataset> {
        let d = &self.cfg.datagen;
        let policies = d.mixture.policies(self.env.spec.step_size, self.env.spec.target);
        let episodes = collect(&self.env, &policies, d.episodes_per_class, &self.tree)?;
        let mut ds = label_split(episodes, d.top_frac, d.expert_prob, &mut self.tree.stream(Stage::Datagen, SPLIT_STREAM))?;
        if !ds.expert.is_empty() && !ds.unlabeled.is_empty() {
            let mean = |v: &[Episode]| v.iter().map(Episode::ret).sum::<f64>() / v.len() as f64;
            if mean(&ds.expert) <= mean(&ds.unlabeled) {
                return Err(Error::Contract("expert episodes do not out-return unlabeled ones".into()));
            }
        }
        ds.manifest.env_hash = self.env.spec.hash();
        ds.manifest.seeds.insert("master".into(), self.tree.master());
        ds.manifest.seeds.insert("env".into(), self.cfg.env.seed);
        Ok(ds)
    }

    /// Seeded subsample of real D_all transitions whose next state is strictly inside the box.
    pub fn vae_data(&self, ds: &SplitDataset) -> Result<VaeData> {
        let (lo, hi) = (self.env.spec.low, self.env.spec.high);
        let inside = |v: [f64; 2]| (0..2).all(|d| lo[d] < v[d] && v[d] < hi[d]);
        let mut rows = Vec::new();
        let mut lat = Vec::new();
        let with_latents = ds.has_latents();
        for e in ds.all_episodes() {
            for (k, r) in e.records.iter().enumerate() {
                if r.is_counterfactual() || !inside(r.s_next) {
                    continue;
                }
                rows.push((r.s, r.a, r.s_next, e.class));
                if with_latents {
                    lat.push(e.latent.as_ref().expect("checked by has_latents")[k]);
                }
            }
        }
        let n = self.cfg.vae.train_transitions;
        if n > 0 && n < rows.len() {
            let mut keep = index::sample(&mut self.tree.stream(Stage::Vae, 0), rows.len(), n).into_vec();
            keep.sort_unstable();
            rows = keep.iter().map(|&i| rows[i]).collect();
            if with_latents {
                lat = keep.iter().map(|&i| lat[i]).collect();
            }
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData("no unclipped transitions for the CVAE".into()));
        }
        let latents = if with_latents { Some(Tensor2::new(lat.len(), 2, lat.into_iter().flatten().collect())?) } else { None };
        Ok(VaeData { batch: TransitionBatch::from_rows(&rows)?, latents })
    }

    pub fn train_vae(&self, data: &VaeData, conditional: bool) -> Result<CvaeModel> {
        let mut rng = self.tree.stream(Stage::Vae, if conditional { 1 } else { 2 });
        let cfg = self.cfg.cvae_config(conditional);
        let lcf = log_class_frequencies(&data.batch.class, cfg.n_classes);
        let mut model = CvaeModel::new(cfg, lcf, &mut rng)?;
        train_cvae(&mut model, &data.batch, &self.cfg.vae.train, &mut rng)?;
        Ok(model)
    }

    pub fn train_sampler(&self, ds: &SplitDataset) -> Result<Policy> {
        pretrain_sampler(&ds.expert, &self.cfg.policy, &self.cfg.sampler, &mut self.tree.stream(Stage::Augment, 0))
    }

    /// Augments with the configured settings, optionally overriding the target ratio.
    pub fn augment(&self, ds: &SplitDataset, frozen: &FrozenModels, ratio: Option<f64>) -> Result<Augmented> {
        let cfg = AugmentConfig { target_ratio: ratio.or(self.cfg.augment.target_ratio), ..self.cfg.augment.clone() };
        augment_expert(ds, frozen, &self.env.spec, &cfg, &mut self.tree.stream(Stage::Augment, 1))
    }

    /// Trains one method. OILCA expects `ds` to already carry counterfactual expert records;
    /// the other methods ignore them.
    pub fn train_policy(&self, algo: Algo, ds: &SplitDataset) -> Result<(Policy, Option<crate::agents::Discriminator>, Vec<LossPoint>)> {
        let mut rng = self.tree.stream(Stage::Agent, algo.agent_stream());
        let net = &self.cfg.policy;
        let batch = |pairs: Vec<_>| -> Result<SaBatch> {
            if pairs.is_empty() {
                return Err(Error::InsufficientData(format!("{} has no training pairs", algo.name())));
            }
            SaBatch::from_pairs(&pairs)
        };
        match algo {
            Algo::BcExp | Algo::BcAll => {
                let pairs = if algo == Algo::BcExp { real_pairs(ds.expert.iter(), false) } else { real_pairs(ds.all_episodes(), false) };
                let (p, curve) = train_bc(&batch(pairs)?, net, &self.cfg.bc, &mut rng)?;
                Ok((p, None, curve))
            }
            Algo::Dwbc | Algo::Oilca => {
                let expert = batch(real_pairs(ds.expert.iter(), algo == Algo::Oilca))?;
                let unlabeled = batch(real_pairs(ds.unlabeled.iter(), false))?;
                let out = train_dwbc(&expert, &unlabeled, net, &self.cfg.dwbc, &mut rng)?;
                Ok((out.policy, Some(out.disc), out.curve))
            }
        }
    }

    pub fn evaluate(&self, policy: &Policy) -> Result<Vec<f64>> {
        evaluate_policy(policy, &self.env, self.cfg.eval.n_episodes, &self.tree)
    }
}
