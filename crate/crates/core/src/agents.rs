//! Gaussian policies, the positive-unlabeled discriminator, the
//! discriminator-weighted BC objectives, and plain BC.
//!
//! Discriminator loss on an expert batch `E` and an unlabeled batch `U`:
//!
//! `η·E_E[−log d] + E_U[−log(1−d′)] − η·E_E[−log(1−d)]`
//!
//! Policy loss:
//!
//! `α·E_E[−log π] − E_E[−log π · η/(d(1−d))] + E_U[−log π · 1/(1−d)]`
//!
//! `d` is the discriminator output on `(s, a, log π(a|s))`, clipped to
//! `[d_min, d_max]`. Each loss sees the other model as a constant.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numkit::checkpoint::Checkpoint;
use crate::numkit::gaussian::{gaussian_logpdf, gaussian_logpdf_var};
use crate::numkit::graph::{Graph, Var};
use crate::numkit::mlp::{Activation, Init, Mlp};
use crate::numkit::rng::Rng;
use crate::numkit::tensor::Tensor2;
use crate::numkit::{cosine_lr, AdamState};
use crate::toyenv::{Vec2, ACTION_DIM, STATE_DIM};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Range the `log π` discriminator feature is clamped to.
pub const LOGP_FEATURE_MIN: f64 = -30.0;
pub const LOGP_FEATURE_MAX: f64 = 10.0;

/// Column-stacked `(s, a)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SaBatch {
    pub s: Tensor2,
    pub a: Tensor2,
}

impl SaBatch {
    pub fn new(s: Tensor2, a: Tensor2) -> Result<Self> {
        if s.cols() != STATE_DIM || a.cols() != ACTION_DIM || s.rows() != a.rows() {
            return Err(Error::Dimension(format!("state {:?} / action {:?}", s.shape(), a.shape())));
        }
        Ok(Self { s, a })
    }

    pub fn from_pairs(pairs: &[(Vec2, Vec2)]) -> Result<Self> {
        let s = Tensor2::new(pairs.len(), STATE_DIM, pairs.iter().flat_map(|p| p.0).collect())?;
        let a = Tensor2::new(pairs.len(), ACTION_DIM, pairs.iter().flat_map(|p| p.1).collect())?;
        Ok(Self { s, a })
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { s: self.s.select_rows(idx), a: self.a.select_rows(idx) }
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Self {
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub state_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: 64, hidden_layers: 2, state_scale: 0.1 }
    }
}

impl NetConfig {
    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        d.push(output);
        d
    }

    fn acts(&self) -> Vec<Activation> {
        let mut a = vec![Activation::Tanh; self.hidden_layers];
        a.push(Activation::Identity);
        a
    }

    fn write(&self, ck: &mut Checkpoint) {
        ck.set_meta("hidden", self.hidden);
        ck.set_meta("hidden_layers", self.hidden_layers);
        ck.set_meta("state_scale", self.state_scale);
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { hidden: ck.meta_parse("hidden")?, hidden_layers: ck.meta_parse("hidden_layers")?, state_scale: ck.meta_parse("state_scale")? })
    }
}

/// State-conditioned diagonal Gaussian over actions with a state-independent log-std.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub cfg: NetConfig,
    pub mean: Mlp,
    /// `1 × ACTION_DIM`, clamped to `[LOG_STD_MIN, LOG_STD_MAX]` on use.
    pub log_std: Tensor2,
}

struct PolicyVars {
    mean: Vec<Var>,
    log_std: Var,
}

impl Policy {
    pub fn new(cfg: NetConfig, rng: &mut Rng) -> Self {
        let mean = Mlp::new(&cfg.dims(STATE_DIM, ACTION_DIM), Activation::Tanh, Activation::Identity, Init::default(), rng);
        Self { cfg, mean, log_std: Tensor2::zeros(1, ACTION_DIM) }
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut p = self.mean.params();
        p.push(&self.log_std);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut p = self.mean.params_mut();
        p.push(&mut self.log_std);
        p
    }

    fn bind(&self, g: &mut Graph, frozen: bool) -> PolicyVars {
        if frozen {
            PolicyVars { mean: self.mean.bind_frozen(g), log_std: g.constant(self.log_std.clone()) }
        } else {
            PolicyVars { mean: self.mean.bind(g), log_std: g.param(&self.log_std) }
        }
    }

    fn scaled(&self, s: &Tensor2) -> Tensor2 {
        s.map(|v| v * self.cfg.state_scale)
    }

    pub fn clamped_log_std(&self) -> Tensor2 {
        self.log_std.map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
    }

    /// Mean action per row.
    pub fn mean_action(&self, s: &Tensor2) -> Result<Tensor2> {
        self.mean.eval(&self.scaled(s))
    }

    pub fn act_mean(&self, s: Vec2) -> Vec2 {
        let out = self.mean.eval_row(&[s[0] * self.cfg.state_scale, s[1] * self.cfg.state_scale]);
        [out[0], out[1]]
    }

    /// Per-row `log π(a | s)`.
    pub fn log_prob(&self, s: &Tensor2, a: &Tensor2) -> Result<Vec<f64>> {
        let mean = self.mean_action(s)?;
        let lv = self.clamped_log_std().map(|v| 2.0 * v);
        let lv = Tensor2::from_rows(&vec![lv.row(0).to_vec(); s.rows()])?;
        gaussian_logpdf(a, &mean, &lv)
    }

    /// Taped `n × 1` log-density.
    fn log_prob_var(&self, g: &mut Graph, v: &PolicyVars, s: &Tensor2, a: &Tensor2) -> Result<Var> {
        let x = g.constant(self.scaled(s));
        let mean = self.mean.forward(g, &v.mean, x)?;
        let ls = g.clamp(v.log_std, LOG_STD_MIN, LOG_STD_MAX);
        let lv = g.scale(ls, 2.0);
        let lv = g.broadcast(lv, s.rows());
        let target = g.constant(a.clone());
        Ok(gaussian_logpdf_var(g, target, mean, lv))
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new("policy", seed, step);
        self.cfg.write(&mut ck);
        ck.push_mlp("mean", &self.mean);
        ck.push("log_std", &self.log_std);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("policy")?;
        let cfg = NetConfig::read(ck)?;
        Ok(Self {
            mean: ck.mlp("mean", &cfg.dims(STATE_DIM, ACTION_DIM), &cfg.acts())?,
            log_std: ck.tensor("log_std", 1, ACTION_DIM)?.clone(),
            cfg,
        })
    }

    /// Parameter fingerprint.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self.params().iter().flat_map(|p| p.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        crate::toyenv::short_hash(&bytes)
    }
}

/// MLP over `(s, a, log π(a|s))` producing a clipped probability of "expert".
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub cfg: NetConfig,
    pub net: Mlp,
    pub d_min: f64,
    pub d_max: f64,
}

impl Discriminator {
    pub fn new(cfg: NetConfig, d_min: f64, d_max: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0 < d_min && d_min < d_max && d_max < 1.0) {
            return Err(Error::Config(format!("discriminator clip [{d_min}, {d_max}] not inside (0, 1)")));
        }
        let net = Mlp::new(&cfg.dims(STATE_DIM + ACTION_DIM + 1, 1), Activation::Tanh, Activation::Identity, Init::default(), rng);
        Ok(Self { cfg, net, d_min, d_max })
    }

    fn features(&self, s: &Tensor2, a: &Tensor2, logp: &[f64]) -> Result<Tensor2> {
        let lp = Tensor2::new(logp.len(), 1, logp.iter().map(|v| v.clamp(LOGP_FEATURE_MIN, LOGP_FEATURE_MAX)).collect())?;
        Tensor2::hcat(&[&s.map(|v| v * self.cfg.state_scale), a, &lp])
    }

    /// Clipped `d` per row.
    pub fn prob(&self, s: &Tensor2, a: &Tensor2, logp: &[f64]) -> Result<Vec<f64>> {
        let logits = self.net.eval(&self.features(s, a, logp)?)?;
        Ok(logits.data().iter().map(|&z| crate::numkit::mlp::sigmoid(z).clamp(self.d_min, self.d_max)).collect())
    }

    fn prob_var(&self, g: &mut Graph, vars: &[Var], s: &Tensor2, a: &Tensor2, logp: &[f64]) -> Result<Var> {
        let x = g.constant(self.features(s, a, logp)?);
        let logit = self.net.forward(g, vars, x)?;
        let d = g.sigmoid(logit);
        Ok(g.clamp(d, self.d_min, self.d_max))
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new("disc", seed, step);
        self.cfg.write(&mut ck);
        ck.set_meta("d_min", self.d_min);
        ck.set_meta("d_max", self.d_max);
        ck.push_mlp("net", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("disc")?;
        let cfg = NetConfig::read(ck)?;
        Ok(Self {
            net: ck.mlp("net", &cfg.dims(STATE_DIM + ACTION_DIM + 1, 1), &cfg.acts())?,
            d_min: ck.meta_parse("d_min")?,
            d_max: ck.meta_parse("d_max")?,
            cfg,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwbcConfig {
    pub eta: f64,
    pub alpha: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub disc_update_period: usize,
    pub policy_update_period: usize,
    pub lr_disc: f64,
    pub lr_policy: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Cosine-decay the policy learning rate to zero over `total_steps`.
    pub cosine_lr: bool,
}

impl Default for DwbcConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            alpha: 7.5,
            d_min: 0.1,
            d_max: 0.9,
            disc_update_period: 100,
            policy_update_period: 1,
            lr_disc: 1e-3,
            lr_policy: 1e-3,
            total_steps: 5000,
            batch_size: 256,
            cosine_lr: true,
        }
    }
}

impl DwbcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta = {} outside (0, 1)", self.eta));
        }
        if !(self.alpha > 1.0) {
            return bad(format!("alpha = {} must exceed 1", self.alpha));
        }
        if !(0.0 < self.d_min && self.d_min < self.d_max && self.d_max < 1.0) {
            return bad(format!("d clip [{}, {}] not inside (0, 1)", self.d_min, self.d_max));
        }
        if self.disc_update_period == 0 || self.policy_update_period == 0 || self.batch_size == 0 {
            return bad("update periods and batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Expert and unlabeled weights of the policy loss at discriminator output `d`.
pub fn policy_weights(d: f64, eta: f64, alpha: f64) -> (f64, f64) {
    (alpha - eta / (d * (1.0 - d)), 1.0 / (1.0 - d))
}

fn nonempty(e: &SaBatch, u: &SaBatch) -> Result<()> {
    if e.is_empty() || u.is_empty() {
        return Err(Error::Contract("expert and unlabeled batches must be nonempty".into()));
    }
    Ok(())
}

/// Discriminator loss and its gradients w.r.t. the discriminator parameters.
pub fn disc_loss_and_grads(disc: &Discriminator, policy: &Policy, expert: &SaBatch, unlabeled: &SaBatch, eta: f64) -> Result<(f64, Vec<Tensor2>)> {
    nonempty(expert, unlabeled)?;
    let lp_e = policy.log_prob(&expert.s, &expert.a)?;
    let lp_u = policy.log_prob(&unlabeled.s, &unlabeled.a)?;
    let mut g = Graph::new();
    let vars = disc.net.bind(&mut g);
    let d_e = disc.prob_var(&mut g, &vars, &expert.s, &expert.a, &lp_e)?;
    let d_u = disc.prob_var(&mut g, &vars, &unlabeled.s, &unlabeled.a, &lp_u)?;

    let log_de = g.log(d_e);
    let t1 = g.mean(log_de);
    let t1 = g.scale(t1, -eta);
    let one_minus_du = g.scale(d_u, -1.0);
    let one_minus_du = g.add_scalar(one_minus_du, 1.0);
    let log_u = g.log(one_minus_du);
    let t2 = g.mean(log_u);
    let t2 = g.neg(t2);
    let one_minus_de = g.scale(d_e, -1.0);
    let one_minus_de = g.add_scalar(one_minus_de, 1.0);
    let log_e = g.log(one_minus_de);
    let t3 = g.mean(log_e);
    let t3 = g.scale(t3, eta);
    let sum = g.add(t1, t2);
    let loss = g.add(sum, t3);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads.collect(&vars)))
}

pub fn disc_loss(disc: &Discriminator, policy: &Policy, expert: &SaBatch, unlabeled: &SaBatch, eta: f64) -> Result<f64> {
    disc_loss_and_grads(disc, policy, expert, unlabeled, eta).map(|r| r.0)
}

/// Policy loss and its gradients w.r.t. the policy parameters (mean net, then log-std).
pub fn policy_loss_and_grads(policy: &Policy, disc: &Discriminator, expert: &SaBatch, unlabeled: &SaBatch, eta: f64, alpha: f64) -> Result<(f64, Vec<Tensor2>)> {
    nonempty(expert, unlabeled)?;
    let lp_e = policy.log_prob(&expert.s, &expert.a)?;
    let lp_u = policy.log_prob(&unlabeled.s, &unlabeled.a)?;
    let d_e = disc.prob(&expert.s, &expert.a, &lp_e)?;
    let d_u = disc.prob(&unlabeled.s, &unlabeled.a, &lp_u)?;
    debug_assert!(d_e.iter().chain(&d_u).all(|&d| d >= disc.d_min && d <= disc.d_max));
    let w_e: Vec<f64> = d_e.iter().map(|&d| policy_weights(d, eta, alpha).0).collect();
    let w_u: Vec<f64> = d_u.iter().map(|&d| policy_weights(d, eta, alpha).1).collect();

    let mut g = Graph::new();
    let v = policy.bind(&mut g, false);
    let lpe = policy.log_prob_var(&mut g, &v, &expert.s, &expert.a)?;
    let lpu = policy.log_prob_var(&mut g, &v, &unlabeled.s, &unlabeled.a)?;
    let we = g.constant(Tensor2::new(w_e.len(), 1, w_e)?);
    let wu = g.constant(Tensor2::new(w_u.len(), 1, w_u)?);
    let te = g.mul(lpe, we);
    let te = g.mean(te);
    let tu = g.mul(lpu, wu);
    let tu = g.mean(tu);
    let sum = g.add(te, tu);
    let loss = g.neg(sum);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let mut all = v.mean.clone();
    all.push(v.log_std);
    Ok((value, grads.collect(&all)))
}

pub fn policy_loss(policy: &Policy, disc: &Discriminator, expert: &SaBatch, unlabeled: &SaBatch, eta: f64, alpha: f64) -> Result<f64> {
    policy_loss_and_grads(policy, disc, expert, unlabeled, eta, alpha).map(|r| r.0)
}

/// Mean negative log-likelihood and its gradients.
pub fn bc_loss_and_grads(policy: &Policy, batch: &SaBatch) -> Result<(f64, Vec<Tensor2>)> {
    if batch.is_empty() {
        return Err(Error::Contract("BC batch must be nonempty".into()));
    }
    let mut g = Graph::new();
    let v = policy.bind(&mut g, false);
    let lp = policy.log_prob_var(&mut g, &v, &batch.s, &batch.a)?;
    let m = g.mean(lp);
    let loss = g.neg(m);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let mut all = v.mean.clone();
    all.push(v.log_std);
    Ok((value, grads.collect(&all)))
}

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub component: &'static str,
}

pub fn loss_curve_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,loss,component\n");
    for p in points {
        out.push_str(&format!("{},{:?},{}\n", p.step, p.loss, p.component));
    }
    out
}

#[derive(Clone, Debug)]
pub struct DwbcOutcome {
    pub policy: Policy,
    pub disc: Discriminator,
    pub curve: Vec<LossPoint>,
    pub disc_updates: usize,
    pub policy_updates: usize,
}

/// Alternating co-training: the discriminator steps every `disc_update_period`
/// steps (starting at step 0), the policy every `policy_update_period` steps.
pub fn train_dwbc(expert: &SaBatch, unlabeled: &SaBatch, net: &NetConfig, cfg: &DwbcConfig, rng: &mut Rng) -> Result<DwbcOutcome> {
    cfg.validate()?;
    if expert.is_empty() || unlabeled.is_empty() {
        return Err(Error::InsufficientData("DWBC needs nonempty expert and unlabeled data".into()));
    }
    let mut policy = Policy::new(net.clone(), rng);
    let mut disc = Discriminator::new(net.clone(), cfg.d_min, cfg.d_max, rng)?;
    let mut opt_pi = AdamState::new(&policy.params(), cfg.lr_policy);
    let mut opt_d = AdamState::new(&disc.net.params(), cfg.lr_disc);
    let mut curve = Vec::new();
    let (mut disc_updates, mut policy_updates) = (0, 0);
    for step in 0..cfg.total_steps {
        let be = expert.sample(cfg.batch_size, rng);
        let bu = unlabeled.sample(cfg.batch_size, rng);
        if step % cfg.disc_update_period == 0 {
            let (loss, grads) = disc_loss_and_grads(&disc, &policy, &be, &bu, cfg.eta)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { stage: "train-policy", step });
            }
            opt_d.update(disc.net.params_mut(), &grads)?;
            disc_updates += 1;
            curve.push(LossPoint { step, loss, component: "disc" });
        }
        if step % cfg.policy_update_period == 0 {
            if cfg.cosine_lr {
                opt_pi.lr = cosine_lr(cfg.lr_policy, step, cfg.total_steps);
            }
            let (loss, grads) = policy_loss_and_grads(&policy, &disc, &be, &bu, cfg.eta, cfg.alpha)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { stage: "train-policy", step });
            }
            opt_pi.update(policy.params_mut(), &grads)?;
            policy_updates += 1;
            curve.push(LossPoint { step, loss, component: "policy" });
        }
    }
    Ok(DwbcOutcome { policy, disc, curve, disc_updates, policy_updates })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over `steps`.
    pub cosine_lr: bool,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 256, lr: 1e-3, cosine_lr: true }
    }
}

/// Maximum-likelihood fit of a fresh Gaussian policy. Returns the policy and per-step loss.
pub fn train_bc(data: &SaBatch, net: &NetConfig, cfg: &BcConfig, rng: &mut Rng) -> Result<(Policy, Vec<LossPoint>)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("BC dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut policy = Policy::new(net.clone(), rng);
    let mut opt = AdamState::new(&policy.params(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.cosine_lr {
            opt.lr = cosine_lr(cfg.lr, step, cfg.steps);
        }
        let b = data.sample(cfg.batch_size, rng);
        let (loss, grads) = bc_loss_and_grads(&policy, &b)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { stage: "train-policy", step });
        }
        opt.update(policy.params_mut(), &grads)?;
        curve.push(LossPoint { step, loss, component: "bc" });
    }
    Ok((policy, curve))
}
