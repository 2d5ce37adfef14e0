//! Toy causal MDP: 2D navigation toward a target inside a box.
//!
//! Each class `c` owns a Gaussian over the exogenous variable
//! `u ~ N(μ(c), diag σ²(c))` with `μ(c) = (0, α·γ(c))`. A fresh `u` is drawn
//! every step and pushed through a frozen softplus MLP that perturbs the
//! commanded move:
//!
//! `s' = clip_box(s + clip_step(a) + net(s, clip_step(a), u))`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::mlp::{Activation, Layer, Mlp};
use crate::numkit::tensor::Tensor2;
use crate::numkit::rng::{standard_normal, Rng, SeedTree, Stage};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
pub const LATENT_DIM: usize = 2;

pub type Vec2 = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub n_classes: usize,
    pub alpha: f64,
    pub gamma: Vec<usize>,
    pub sigma2: Vec<Vec2>,
    pub step_size: f64,
    pub low: Vec2,
    pub high: Vec2,
    pub target: Vec2,
    pub episode_len: usize,
    pub transition_seed: u64,
}

/// Inputs for [`EnvSpec::generate`]; the class permutation and variances are drawn from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvParams {
    pub n_classes: usize,
    pub alpha: f64,
    pub step_size: f64,
    pub low: Vec2,
    pub high: Vec2,
    pub target: Vec2,
    pub episode_len: usize,
    pub seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            n_classes: 3,
            alpha: 2.0,
            step_size: 1.0,
            low: [-10.0, -10.0],
            high: [10.0, 10.0],
            target: [0.0, 0.0],
            episode_len: 500,
            seed: 0,
        }
    }
}

impl EnvSpec {
    pub fn generate(p: &EnvParams) -> Result<Self> {
        let tree = SeedTree::new(p.seed);
        let mut rng = tree.stream(Stage::Env, 0);
        let mut gamma: Vec<usize> = (0..p.n_classes).collect();
        gamma.shuffle(&mut rng);
        let sigma2 = (0..p.n_classes)
            .map(|_| [rng.gen_range(0.25..=2.0), rng.gen_range(0.25..=2.0)])
            .collect();
        let spec = Self {
            n_classes: p.n_classes,
            alpha: p.alpha,
            gamma,
            sigma2,
            step_size: p.step_size,
            low: p.low,
            high: p.high,
            target: p.target,
            episode_len: p.episode_len,
            transition_seed: tree.derive(Stage::Env, 1),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes = {} (need ≥ 2)", self.n_classes));
        }
        let mut sorted = self.gamma.clone();
        sorted.sort_unstable();
        if sorted != (0..self.n_classes).collect::<Vec<_>>() {
            return bad(format!("gamma {:?} is not a permutation of 0..{}", self.gamma, self.n_classes));
        }
        if self.sigma2.len() != self.n_classes || self.sigma2.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("sigma2 needs one positive 2-vector per class".into());
        }
        if !(self.step_size > 0.0) {
            return bad(format!("step_size = {}", self.step_size));
        }
        for d in 0..2 {
            if !(self.low[d] < self.high[d]) {
                return bad(format!("box low {:?} not below high {:?}", self.low, self.high));
            }
            if !(self.low[d..=d][0] <= self.target[d] && self.target[d] <= self.high[d]) {
                return bad(format!("target {:?} outside box", self.target));
            }
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if self.episode_len == 0 {
            return bad("episode_len = 0".into());
        }
        Ok(())
    }

    /// Mean of the class means, i.e. the pooled latent mean under balanced classes.
    pub fn latent_center(&self) -> Vec2 {
        [0.0, self.alpha * (self.n_classes - 1) as f64 / 2.0]
    }

    /// Per-dimension variance of `u` pooled over equally weighted classes.
    pub fn pooled_latent_var(&self) -> Vec2 {
        let n = self.n_classes as f64;
        let mut var = [0.0; 2];
        for d in 0..2 {
            var[d] = self.sigma2.iter().map(|v| v[d]).sum::<f64>() / n;
        }
        let means: Vec<f64> = (0..self.n_classes).map(|c| self.alpha * self.gamma[c] as f64).collect();
        let mu = means.iter().sum::<f64>() / n;
        var[1] += means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n;
        var
    }

    pub fn class_mean(&self, c: usize) -> Result<Vec2> {
        self.check_class(c)?;
        Ok([0.0, self.alpha * self.gamma[c] as f64])
    }

    pub fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.n_classes {
            return Err(Error::Category { class: c, n_classes: self.n_classes });
        }
        Ok(())
    }

    pub fn clip_to_box(&self, s: Vec2) -> Vec2 {
        [s[0].clamp(self.low[0], self.high[0]), s[1].clamp(self.low[1], self.high[1])]
    }

    pub fn clip_action(&self, a: Vec2) -> Vec2 {
        let h = self.step_size;
        [a[0].clamp(-h, h), a[1].clamp(-h, h)]
    }

    pub fn contains(&self, s: Vec2) -> bool {
        (0..2).all(|d| self.low[d] <= s[d] && s[d] <= self.high[d])
    }

    /// Canonical `key = value` lines; the config section and the spec hash both use them.
    pub fn canonical_text(&self) -> String {
        let v2 = |v: Vec2| format!("{},{}", v[0], v[1]);
        let mut s = String::new();
        s.push_str(&format!("n_classes = {}\n", self.n_classes));
        s.push_str(&format!("alpha = {}\n", self.alpha));
        let g: Vec<String> = self.gamma.iter().map(ToString::to_string).collect();
        s.push_str(&format!("gamma = {}\n", g.join(",")));
        let sg: Vec<String> = self.sigma2.iter().map(|&v| v2(v)).collect();
        s.push_str(&format!("sigma2 = {}\n", sg.join(";")));
        s.push_str(&format!("step_size = {}\n", self.step_size));
        s.push_str(&format!("low = {}\n", v2(self.low)));
        s.push_str(&format!("high = {}\n", v2(self.high)));
        s.push_str(&format!("target = {}\n", v2(self.target)));
        s.push_str(&format!("episode_len = {}\n", self.episode_len));
        s.push_str(&format!("transition_seed = {}\n", self.transition_seed));
        s
    }

    /// First 16 hex digits of SHA-256 over [`EnvSpec::canonical_text`].
    pub fn hash(&self) -> String {
        short_hash(self.canonical_text().as_bytes())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Frozen transition perturbation network, input `[s, a, u]`, output a 2D displacement.
///
/// `z = M (u − ū) + W_s s + W_a a + b`, `d = κ A (h(z) − h(b))` with the
/// strictly increasing `h(z) = softplus(z) + λ z`, realised as a softplus
/// hidden layer over `(z, −z)`. `M` whitens the pooled latent covariance and
/// rotates it by 45°, and `A = diag(1, ρ)`. For fixed `(s, a)` the map
/// `u ↦ d` is a composition of invertible maps, hence injective, and the
/// observed displacement carries no second-order hint of the latent axes.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionNet {
    net: Mlp,
}

/// Overall displacement gain κ.
pub const TRANSITION_GAIN: f64 = 0.3;
/// Linear leak λ of the hidden nonlinearity.
pub const TRANSITION_LEAK: f64 = 0.3;
/// Read-out anisotropy ρ.
pub const TRANSITION_READOUT_RATIO: f64 = 0.5;

impl TransitionNet {
    /// Builds the net for `spec`, drawing `W_s`, `W_a`, `b` from `spec.transition_seed`.
    pub fn new(spec: &EnvSpec) -> Self {
        let mut rng = Rng::seed_from_u64(spec.transition_seed);
        let center = spec.latent_center();
        let sd = spec.pooled_latent_var().map(f64::sqrt);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let m = [[r / sd[0], -r / sd[1]], [r / sd[0], r / sd[1]]];
        let mut w_sa = [[0.0; STATE_DIM + ACTION_DIM]; 2];
        for row in w_sa.iter_mut() {
            for (i, w) in row.iter_mut().enumerate() {
                let scale = if i < STATE_DIM { 0.05 } else { 0.3 };
                *w = scale * standard_normal(&mut rng);
            }
        }
        let b: Vec<f64> = (0..2).map(|_| 0.5 * standard_normal(&mut rng)).collect();

        // Hidden unit 2k sees z_k, unit 2k+1 sees −z_k.
        let input = STATE_DIM + ACTION_DIM + LATENT_DIM;
        let mut w1 = Tensor2::zeros(input, 4);
        let mut b1 = vec![0.0; 4];
        for k in 0..2 {
            let mut col = [0.0; STATE_DIM + ACTION_DIM + LATENT_DIM];
            col[..STATE_DIM + ACTION_DIM].copy_from_slice(&w_sa[k]);
            col[4] = m[k][0];
            col[5] = m[k][1];
            let bias = b[k] - m[k][0] * center[0] - m[k][1] * center[1];
            for (i, &v) in col.iter().enumerate() {
                w1.set(i, 2 * k, v);
                w1.set(i, 2 * k + 1, -v);
            }
            b1[2 * k] = bias;
            b1[2 * k + 1] = -bias;
        }
        let readout = [1.0, TRANSITION_READOUT_RATIO];
        let mut w2 = Tensor2::zeros(4, STATE_DIM);
        let mut b2 = vec![0.0; STATE_DIM];
        for k in 0..2 {
            let g = TRANSITION_GAIN * readout[k];
            // h(z) = (1 + λ) softplus(z) − λ softplus(−z)
            w2.set(2 * k, k, g * (1.0 + TRANSITION_LEAK));
            w2.set(2 * k + 1, k, -g * TRANSITION_LEAK);
            let h0 = Activation::Softplus.apply(b[k]) + TRANSITION_LEAK * b[k];
            b2[k] = -g * h0;
        }
        let net = Mlp::from_layers(vec![
            Layer { weight: w1, bias: Tensor2::raw(1, 4, b1), activation: Activation::Softplus },
            Layer { weight: w2, bias: Tensor2::raw(1, STATE_DIM, b2), activation: Activation::Identity },
        ])
        .expect("transition layers chain");
        Self { net }
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != STATE_DIM + ACTION_DIM + LATENT_DIM || net.output_dim() != STATE_DIM {
            return Err(Error::Dimension(format!("transition net dims {:?}", net.dims())));
        }
        Ok(Self { net })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn displacement(&self, s: Vec2, a: Vec2, u: Vec2) -> Vec2 {
        let out = self.net.eval_row(&[s[0], s[1], a[0], a[1], u[0], u[1]]);
        [out[0], out[1]]
    }
}

/// Environment instance: spec plus its frozen transition.
#[derive(Clone, Debug)]
pub struct ToyEnv {
    pub spec: EnvSpec,
    pub net: TransitionNet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub s: Vec2,
    pub t: usize,
    pub c: usize,
}

/// One stored transition. `u` is kept only for ground-truth logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub s: Vec2,
    pub a: Vec2,
    pub s_next: Vec2,
    pub r: f64,
    pub u: Vec2,
}

/// Anything mapping a state to an action.
pub trait Actor {
    fn act(&self, s: Vec2, rng: &mut Rng) -> Vec2;
}

impl<F: Fn(Vec2, &mut Rng) -> Vec2> Actor for F {
    fn act(&self, s: Vec2, rng: &mut Rng) -> Vec2 {
        self(s, rng)
    }
}

impl ToyEnv {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let net = TransitionNet::new(&spec);
        Ok(Self { spec, net })
    }

    pub fn sample_exogenous(&self, c: usize, rng: &mut Rng) -> Result<Vec2> {
        let mean = self.spec.class_mean(c)?;
        let var = self.spec.sigma2[c];
        Ok([
            mean[0] + var[0].sqrt() * standard_normal(rng),
            mean[1] + var[1].sqrt() * standard_normal(rng),
        ])
    }

    pub fn step(&self, s: Vec2, a: Vec2, u: Vec2) -> Result<Vec2> {
        if s.iter().chain(&a).chain(&u).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("step inputs s={s:?} a={a:?} u={u:?}")));
        }
        if !self.spec.contains(s) {
            return Err(Error::Contract(format!("state {s:?} outside box")));
        }
        let a = self.spec.clip_action(a);
        let d = self.net.displacement(s, a, u);
        Ok(self.spec.clip_to_box([s[0] + a[0] + d[0], s[1] + a[1] + d[1]]))
    }

    pub fn reward(&self, s: Vec2) -> f64 {
        let t = self.spec.target;
        -((s[0] - t[0]).powi(2) + (s[1] - t[1]).powi(2)).sqrt()
    }

    pub fn reset(&self, c: usize, rng: &mut Rng) -> Result<EnvState> {
        self.spec.check_class(c)?;
        let (lo, hi) = (self.spec.low, self.spec.high);
        Ok(EnvState { s: [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])], t: 0, c })
    }

    /// Runs one full episode; returns the transitions (with latent `u` attached).
    pub fn rollout(&self, actor: &dyn Actor, c: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
        let mut state = self.reset(c, rng)?;
        let mut out = Vec::with_capacity(self.spec.episode_len);
        while state.t < self.spec.episode_len {
            let a = actor.act(state.s, rng);
            let u = self.sample_exogenous(c, rng)?;
            let s_next = self.step(state.s, a, u)?;
            out.push(Transition { t: state.t, s: state.s, a, s_next, r: self.reward(s_next), u });
            state.s = s_next;
            state.t += 1;
        }
        Ok(out)
    }

    /// Episode return only, without storing transitions.
    pub fn rollout_return(&self, actor: &dyn Actor, c: usize, rng: &mut Rng) -> Result<f64> {
        let mut s = self.reset(c, rng)?.s;
        let mut ret = 0.0;
        for _ in 0..self.spec.episode_len {
            let a = actor.act(s, rng);
            let u = self.sample_exogenous(c, rng)?;
            s = self.step(s, a, u)?;
            ret += self.reward(s);
        }
        Ok(ret)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> ToyEnv {
        ToyEnv::new(EnvSpec::generate(&EnvParams { seed: 7, ..Default::default() }).unwrap()).unwrap()
    }

    #[test]
    fn generated_spec_is_valid_and_reproducible() {
        let p = EnvParams { seed: 3, ..Default::default() };
        let a = EnvSpec::generate(&p).unwrap();
        assert_eq!(a, EnvSpec::generate(&p).unwrap());
        assert!(a.sigma2.iter().flatten().all(|&v| (0.25..=2.0).contains(&v)));
        assert_eq!(a.hash(), EnvSpec::generate(&p).unwrap().hash());
        assert_ne!(a.hash(), EnvSpec::generate(&EnvParams { seed: 4, ..p }).unwrap().hash());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let good = env().spec;
        let mut s = good.clone();
        s.n_classes = 1;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.sigma2[0][1] = 0.0;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.target = [11.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = good;
        s.gamma = vec![0, 0, 1];
        assert!(s.validate().is_err());
    }

    #[test]
    fn exogenous_first_mean_coordinate_is_zero() {
        let e = env();
        for c in 0..3 {
            assert_eq!(e.spec.class_mean(c).unwrap()[0], 0.0);
        }
        assert!(matches!(e.sample_exogenous(3, &mut Rng::seed_from_u64(0)), Err(Error::Category { .. })));
    }

    #[test]
    fn zero_alpha_puts_every_mean_at_origin() {
        let spec = EnvSpec::generate(&EnvParams { alpha: 0.0, seed: 1, ..Default::default() }).unwrap();
        for c in 0..3 {
            assert_eq!(spec.class_mean(c).unwrap(), [0.0, 0.0]);
        }
    }

    #[test]
    fn step_is_deterministic_and_contained() {
        let e = env();
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let s = e.reset(rng.gen_range(0..3), &mut rng).unwrap().s;
            let a = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let u = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let n1 = e.step(s, a, u).unwrap();
            assert_eq!(n1, e.step(s, a, u).unwrap());
            assert!(e.spec.contains(n1));
        }
        assert!(matches!(e.step([0.0, f64::NAN], [0.0; 2], [0.0; 2]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reward_values() {
        let e = env();
        assert_eq!(e.reward(e.spec.target), 0.0);
        assert_eq!(e.reward([3.0, 4.0]), -5.0);
        assert_eq!(e.reward([-3.0, 4.0]), e.reward([4.0, -3.0]));
        assert_eq!(e.reward([3.0, -4.0]), -5.0);
    }

    #[test]
    fn reset_inside_box_and_reproducible() {
        let e = env();
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            assert!(e.spec.contains(e.reset(0, &mut rng).unwrap().s));
        }
        let a = e.reset(1, &mut Rng::seed_from_u64(8)).unwrap();
        let b = e.reset(1, &mut Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t, 0);
    }

    #[test]
    fn rollout_bookkeeping() {
        let e = env();
        let actor = |_s: Vec2, _r: &mut Rng| [1.0, 0.0];
        let ep = e.rollout(&actor, 2, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(ep.len(), 500);
        assert_eq!(ep, e.rollout(&actor, 2, &mut Rng::seed_from_u64(5)).unwrap());
        for w in ep.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
        let ret: f64 = ep.iter().map(|t| t.r).sum();
        let direct = e.rollout_return(&actor, 2, &mut Rng::seed_from_u64(5)).unwrap();
        assert!((ret - direct).abs() < 1e-9);
    }

    /// Direct evaluation of `κ A (h(z) − h(b))` from the same draws, without the MLP.
    fn scalar_displacement(spec: &EnvSpec, s: Vec2, a: Vec2, u: Vec2) -> Vec2 {
        let mut rng = Rng::seed_from_u64(spec.transition_seed);
        let mut w = [[0.0; 4]; 2];
        for row in w.iter_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = if i < 2 { 0.05 } else { 0.3 } * standard_normal(&mut rng);
            }
        }
        let b = [0.5 * standard_normal(&mut rng), 0.5 * standard_normal(&mut rng)];
        let var = spec.pooled_latent_var();
        let centered = [u[0] / var[0].sqrt(), (u[1] - spec.alpha) / var[1].sqrt()];
        let r = 0.5f64.sqrt();
        let rot = [r * (centered[0] - centered[1]), r * (centered[0] + centered[1])];
        let h = |z: f64| (1.0 + z.exp()).ln() + TRANSITION_LEAK * z;
        let mut d = [0.0; 2];
        for k in 0..2 {
            let z = rot[k] + w[k][0] * s[0] + w[k][1] * s[1] + w[k][2] * a[0] + w[k][3] * a[1] + b[k];
            let scale = if k == 0 { 1.0 } else { TRANSITION_READOUT_RATIO };
            d[k] = TRANSITION_GAIN * scale * (h(z) - h(b[k]));
        }
        d
    }

    #[test]
    fn transition_matches_scalar_formula() {
        let e = env();
        for (s, a, u) in [([1.0, -2.0], [0.0, 1.0], [0.3, 2.5]), ([-7.5, 4.0], [-1.0, 0.0], [-1.2, 5.1]), ([0.0, 0.0], [0.0, 0.0], [0.0, 2.0])] {
            let got = e.net.displacement(s, a, u);
            let want = scalar_displacement(&e.spec, s, a, u);
            for k in 0..2 {
                assert!((got[k] - want[k]).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
        let at_center = e.net.displacement([0.0; 2], [0.0; 2], e.spec.latent_center());
        assert!(at_center.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn displacement_is_injective_in_latent() {
        let e = env();
        let mut rng = Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..500 {
            let s = e.reset(0, &mut rng).unwrap().s;
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let u = [rng.gen_range(-4.0..4.0), rng.gen_range(-3.0..7.0)];
            let d = e.net.displacement(s, a, u);
            let d0 = e.net.displacement(s, a, [u[0] + h, u[1]]);
            let d1 = e.net.displacement(s, a, [u[0], u[1] + h]);
            let det = ((d0[0] - d[0]) * (d1[1] - d[1]) - (d0[1] - d[1]) * (d1[0] - d[0])) / (h * h);
            assert!(det.abs() > 1e-3, "near-singular latent Jacobian {det}");
        }
    }
}
