//! Online rollouts and the experiment drivers.

use crate::agents::Policy;
use crate::augment::FrozenModels;
use crate::config::RunConfig;
use crate::datagen::SplitDataset;
use crate::error::{Error, Result};
use crate::ivae::{mcc, CvaeModel};
use crate::numkit::rng::{Rng, SeedTree, Stage};
use crate::pipeline::{Algo, Pipeline, VaeData};
use crate::toyenv::{ToyEnv, Vec2};

/// Returns of `n_episodes` rollouts of the policy's mean action; episode `i` runs class
/// `i mod C` on its own `eval` substream.
pub fn evaluate_policy(policy: &Policy, env: &ToyEnv, n_episodes: usize, seeds: &SeedTree) -> Result<Vec<f64>> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let actor = |s: Vec2, _: &mut Rng| policy.act_mean(s);
    (0..n_episodes)
        .map(|i| {
            let mut rng = seeds.stream(Stage::Eval, i as u64);
            env.rollout_return(&actor, i % env.spec.n_classes, &mut rng)
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over √n); 0 for fewer than two values.
pub fn stderr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Per-seed artifacts reused across experiments.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub pipe: Pipeline,
    pub data: SplitDataset,
    pub vae_data: VaeData,
    pub conditional: CvaeModel,
    pub no_label: Option<CvaeModel>,
    pub sampler: Policy,
}

impl SeedContext {
    pub fn prepare(cfg: &RunConfig, seed: u64, with_no_label: bool) -> Result<Self> {
        let pipe = Pipeline::new(cfg, seed)?;
        let data = pipe.gen_data()?;
        let vae_data = pipe.vae_data(&data)?;
        let conditional = pipe.train_vae(&vae_data, true)?;
        let no_label = if with_no_label { Some(pipe.train_vae(&vae_data, false)?) } else { None };
        let sampler = pipe.train_sampler(&data)?;
        Ok(Self { pipe, data, vae_data, conditional, no_label, sampler })
    }

    pub fn frozen(&self) -> FrozenModels {
        FrozenModels::new(self.conditional.clone(), self.sampler.clone())
    }

    /// Trains and evaluates one method; OILCA augments to `ratio` (or the configured target) first.
    pub fn run_method(&self, algo: Algo, ratio: Option<f64>) -> Result<Vec<f64>> {
        let policy = if algo == Algo::Oilca {
            let aug = self.pipe.augment(&self.data, &self.frozen(), ratio)?;
            self.pipe.train_policy(algo, &aug.dataset)?.0
        } else {
            self.pipe.train_policy(algo, &self.data)?.0
        };
        self.pipe.evaluate(&policy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisentangleRow {
    pub seed: u64,
    pub mcc_true: f64,
    pub mcc_conditional: f64,
    pub mcc_no_label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub source: &'static str,
    pub class: usize,
    pub dim: Vec2,
}

/// MCC of both models on one seed plus scatter coordinates (at most `max_points` per source).
pub fn disentangle_seed(ctx: &SeedContext, max_points: usize) -> Result<(DisentangleRow, Vec<ScatterPoint>)> {
    let truth = ctx
        .vae_data
        .latents
        .as_ref()
        .ok_or_else(|| Error::Config("dataset has no latent sidecar; regenerate it with gen-data".into()))?;
    let no_label = ctx.no_label.as_ref().ok_or_else(|| Error::Contract("seed context was prepared without the no-label model".into()))?;
    let b = &ctx.vae_data.batch;
    let (mu_c, _) = ctx.conditional.encode(&b.s, &b.a, &b.s_next, &b.class)?;
    let (mu_n, _) = no_label.encode(&b.s, &b.a, &b.s_next, &b.class)?;
    let row = DisentangleRow { seed: ctx.pipe.seed, mcc_true: mcc(truth, truth)?, mcc_conditional: mcc(truth, &mu_c)?, mcc_no_label: mcc(truth, &mu_n)? };
    let stride = (b.len() / max_points.max(1)).max(1);
    let mut points = Vec::new();
    for (source, t) in [("true", truth), ("conditional", &mu_c), ("no_label", &mu_n)] {
        for i in (0..b.len()).step_by(stride).take(max_points) {
            points.push(ScatterPoint { source, class: b.class[i], dim: [t.get(i, 0), t.get(i, 1)] });
        }
    }
    Ok((row, points))
}

pub fn disentangle_csv(rows: &[DisentangleRow]) -> String {
    let mut out = String::from("seed,mcc_true,mcc_conditional,mcc_no_label\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.seed, r.mcc_true, r.mcc_conditional, r.mcc_no_label));
    }
    out
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("source,class,dim1,dim2\n");
    for p in points {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", p.source, p.class, p.dim[0], p.dim[1]));
    }
    out
}

/// Trains the conditional and no-label CVAEs on every configured seed.
pub fn experiment_disentangle(cfg: &RunConfig) -> Result<(Vec<DisentangleRow>, Vec<ScatterPoint>)> {
    let mut rows = Vec::new();
    let mut scatter = Vec::new();
    for &seed in &cfg.eval.seeds {
        let ctx = SeedContext::prepare(cfg, seed, true)?;
        let (row, pts) = disentangle_seed(&ctx, 1000)?;
        if scatter.is_empty() {
            scatter = pts;
        }
        rows.push(row);
    }
    Ok((rows, scatter))
}

/// Evaluation summary of one method across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// `(seed, mean return, standard error over episodes)`.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub mean: f64,
    /// Standard error of the per-seed means.
    pub stderr: f64,
    pub n_episodes: usize,
    pub episode_len: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(method: &str, per_seed: Vec<(u64, f64, f64)>, cfg: &RunConfig) -> Self {
        let means: Vec<f64> = per_seed.iter().map(|r| r.1).collect();
        Self {
            method: method.to_string(),
            mean: mean(&means),
            stderr: stderr(&means),
            per_seed,
            n_episodes: cfg.eval.n_episodes,
            episode_len: cfg.env.episode_len,
            config_hash: cfg.hash(),
        }
    }
}

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,seed,mean_return,stderr,n_episodes,config_hash\n");
    for r in reports {
        for (seed, m, se) in &r.per_seed {
            out.push_str(&format!("{},{},{:.6},{:.6},{},{}\n", r.method, seed, m, se, r.n_episodes, r.config_hash));
        }
    }
    out
}

fn seed_row(seed: u64, returns: &[f64]) -> (u64, f64, f64) {
    (seed, mean(returns), stderr(returns))
}

/// All four methods on prepared seeds, in the order BC-exp, BC-all, DWBC, OILCA.
pub fn compare_on(cfg: &RunConfig, contexts: &[SeedContext]) -> Result<Vec<EvalReport>> {
    Algo::ALL
        .iter()
        .map(|&algo| {
            let per_seed = contexts.iter().map(|c| Ok(seed_row(c.pipe.seed, &c.run_method(algo, None)?))).collect::<Result<Vec<_>>>()?;
            Ok(EvalReport::new(algo.name(), per_seed, cfg))
        })
        .collect()
}

pub fn experiment_compare(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let contexts = cfg.eval.seeds.iter().map(|&s| SeedContext::prepare(cfg, s, false)).collect::<Result<Vec<_>>>()?;
    compare_on(cfg, &contexts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio_pct: f64,
    pub mean_return: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio_pct,mean_return,stderr,n_seeds\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{}\n", r.ratio_pct, r.mean_return, r.stderr, r.n_seeds));
    }
    out
}

/// OILCA at each ratio in `ratios` on prepared seeds.
pub fn sweep_on(contexts: &[SeedContext], ratios: &[f64]) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&r| {
            let means = contexts.iter().map(|c| Ok(mean(&c.run_method(Algo::Oilca, Some(r))?))).collect::<Result<Vec<_>>>()?;
            Ok(SweepRow { ratio_pct: (r * 100.0 * 1e6).round() / 1e6, mean_return: mean(&means), stderr: stderr(&means), n_seeds: means.len() })
        })
        .collect()
}

/// Configured sweep ratios followed by the plateau ratio.
pub fn experiment_ratio_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let contexts = cfg.eval.seeds.iter().map(|&s| SeedContext::prepare(cfg, s, false)).collect::<Result<Vec<_>>>()?;
    let mut ratios = cfg.eval.sweep_ratios.clone();
    ratios.push(cfg.eval.plateau_ratio);
    sweep_on(&contexts, &ratios)
}
