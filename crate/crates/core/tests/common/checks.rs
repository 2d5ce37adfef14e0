//! Oracle computations shared by the focused test targets and the acceptance report.

use oilca::agents::{
    bc_loss_and_grads, disc_loss, disc_loss_and_grads, policy_loss, policy_loss_and_grads, Discriminator, Policy, SaBatch, LOGP_FEATURE_MAX,
    LOGP_FEATURE_MIN, LOG_STD_MAX, LOG_STD_MIN,
};
use oilca::ivae::{log_class_frequencies, train_cvae, CvaeConfig, CvaeModel, CvaeTrainConfig, TransitionBatch};
use oilca::numkit::rng::standard_normal;
use oilca::numkit::{kl_diag_gaussians, Tensor2};
use rand::Rng as _;

use super::*;

pub const FD_POINTS: u64 = 10;
pub const FD_STEP: f64 = 1e-5;

fn perturbed_policy(seed: u64) -> Policy {
    let mut p = Policy::new(tiny_net(), &mut rng(seed));
    p.log_std = Tensor2::new(1, 2, vec![0.3 * (seed % 3) as f64 - 0.4, -0.2]).unwrap();
    p
}

/// Discriminator that ignores the `log π` feature, so its output is constant in the policy parameters.
fn logp_blind(seed: u64) -> Discriminator {
    let mut d = Discriminator::new(tiny_net(), 0.1, 0.9, &mut rng(seed)).unwrap();
    let w = &mut d.net.layers_mut()[0].weight;
    for c in 0..w.cols() {
        w.set(4, c, 0.0);
    }
    d
}

/// Worst relative error over the random points for the bound with KL weight `kl_weight`.
pub fn elbo_fd_error(kl_weight: f64, conditional: bool) -> f64 {
    (0..FD_POINTS)
        .map(|k| {
            let cfg = CvaeConfig { hidden: 5, hidden_layers: 1, conditional, ..Default::default() };
            let model = CvaeModel::new(cfg, vec![(1.0f64 / 3.0).ln(); 3], &mut rng(100 + k)).unwrap();
            let batch = random_transitions(6, 3, &mut rng(200 + k));
            let (_, grads) = model.loss_and_grads(&batch, kl_weight, &mut rng(300 + k)).unwrap();
            let loss = |m: &CvaeModel| -> f64 {
                let b = m.elbo(&batch, &mut rng(300 + k)).unwrap();
                kl_weight * b.kl - b.recon
            };
            fd_relative_error(&model, &grads, |m| m.params_mut(), loss, FD_STEP)
        })
        .fold(0.0, f64::max)
}

pub fn disc_fd_error() -> f64 {
    (0..FD_POINTS)
        .map(|k| {
            let policy = perturbed_policy(k);
            let disc = Discriminator::new(tiny_net(), 0.1, 0.9, &mut rng(50 + k)).unwrap();
            let e = random_sa(5, &mut rng(60 + k));
            let u = random_sa(7, &mut rng(70 + k));
            let (_, grads) = disc_loss_and_grads(&disc, &policy, &e, &u, 0.5).unwrap();
            let loss = |d: &Discriminator| disc_loss(d, &policy, &e, &u, 0.5).unwrap();
            fd_relative_error(&disc, &grads, |d| d.net.params_mut(), loss, FD_STEP)
        })
        .fold(0.0, f64::max)
}

pub fn policy_fd_error() -> f64 {
    (0..FD_POINTS)
        .map(|k| {
            let policy = perturbed_policy(k);
            let disc = logp_blind(80 + k);
            let e = random_sa(5, &mut rng(90 + k));
            let u = random_sa(7, &mut rng(95 + k));
            let (_, grads) = policy_loss_and_grads(&policy, &disc, &e, &u, 0.5, 7.5).unwrap();
            let loss = |p: &Policy| policy_loss(p, &disc, &e, &u, 0.5, 7.5).unwrap();
            fd_relative_error(&policy, &grads, |p| p.params_mut(), loss, FD_STEP)
        })
        .fold(0.0, f64::max)
}

pub fn bc_fd_error() -> f64 {
    (0..FD_POINTS)
        .map(|k| {
            let policy = perturbed_policy(20 + k);
            let b = random_sa(6, &mut rng(30 + k));
            let (_, grads) = bc_loss_and_grads(&policy, &b).unwrap();
            let loss = |p: &Policy| -p.log_prob(&b.s, &b.a).unwrap().iter().sum::<f64>() / b.len() as f64;
            fd_relative_error(&policy, &grads, |p| p.params_mut(), loss, FD_STEP)
        })
        .fold(0.0, f64::max)
}

pub fn scalar_logpi(p: &Policy, s: [f64; 2], a: [f64; 2]) -> f64 {
    let scale = p.cfg.state_scale;
    let mu = scalar_mlp(&p.mean, &[s[0] * scale, s[1] * scale]);
    (0..2).map(|d| scalar_logpdf(a[d], mu[d], 2.0 * p.log_std.get(0, d).clamp(LOG_STD_MIN, LOG_STD_MAX))).sum()
}

pub fn scalar_d(disc: &Discriminator, s: [f64; 2], a: [f64; 2], logp: f64) -> f64 {
    let k = disc.cfg.state_scale;
    let z = scalar_mlp(&disc.net, &[s[0] * k, s[1] * k, a[0], a[1], logp.clamp(LOGP_FEATURE_MIN, LOGP_FEATURE_MAX)])[0];
    (1.0 / (1.0 + (-z).exp())).clamp(disc.d_min, disc.d_max)
}

pub fn sa_rows(b: &SaBatch) -> Vec<([f64; 2], [f64; 2])> {
    (0..b.len()).map(|i| ([b.s.get(i, 0), b.s.get(i, 1)], [b.a.get(i, 0), b.a.get(i, 1)])).collect()
}

/// Two expert and two unlabeled pairs.
pub fn fixed_batches() -> (SaBatch, SaBatch) {
    let e = SaBatch::from_pairs(&[([1.0, -2.0], [0.5, 0.25]), ([-3.5, 4.0], [-1.0, 0.0])]).unwrap();
    let u = SaBatch::from_pairs(&[([6.0, 0.5], [0.0, 1.0]), ([-7.25, -1.5], [0.75, -0.5])]).unwrap();
    (e, u)
}

pub fn fixed_policy() -> Policy {
    let mut p = Policy::new(tiny_net(), &mut rng(11));
    p.log_std = Tensor2::new(1, 2, vec![-0.3, 0.2]).unwrap();
    p
}

pub fn fixed_disc() -> Discriminator {
    Discriminator::new(tiny_net(), 0.1, 0.9, &mut rng(12)).unwrap()
}

pub fn zero_disc() -> Discriminator {
    let mut d = fixed_disc();
    for t in d.net.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    d
}

/// `(library, scalar)` discriminator loss on the fixed batches.
pub fn disc_golden(eta: f64) -> (f64, f64) {
    let (e, u) = fixed_batches();
    let (p, disc) = (fixed_policy(), fixed_disc());
    let de: Vec<f64> = sa_rows(&e).into_iter().map(|(s, a)| scalar_d(&disc, s, a, scalar_logpi(&p, s, a))).collect();
    let du: Vec<f64> = sa_rows(&u).into_iter().map(|(s, a)| scalar_d(&disc, s, a, scalar_logpi(&p, s, a))).collect();
    let m = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let expected = eta * m(de.iter().map(|d| -d.ln()).collect()) + m(du.iter().map(|d| -(1.0 - d).ln()).collect())
        - eta * m(de.iter().map(|d| -(1.0 - d).ln()).collect());
    (disc_loss(&disc, &p, &e, &u, eta).unwrap(), expected)
}

/// `(library, scalar)` policy loss on the fixed batches.
pub fn policy_golden(eta: f64, alpha: f64) -> (f64, f64) {
    let (e, u) = fixed_batches();
    let (p, disc) = (fixed_policy(), fixed_disc());
    let mut expected = 0.0;
    for (s, a) in sa_rows(&e) {
        let lp = scalar_logpi(&p, s, a);
        let d = scalar_d(&disc, s, a, lp);
        expected += (alpha * -lp - (-lp) * eta / (d * (1.0 - d))) / 2.0;
    }
    for (s, a) in sa_rows(&u) {
        let lp = scalar_logpi(&p, s, a);
        let d = scalar_d(&disc, s, a, lp);
        expected += (-lp / (1.0 - d)) / 2.0;
    }
    (policy_loss(&p, &disc, &e, &u, eta, alpha).unwrap(), expected)
}

/// `(analytic, Monte-Carlo mean, Monte-Carlo standard error)` for one fixed 2-D case.
pub fn kl_monte_carlo(case: usize, n: usize) -> (f64, f64, f64) {
    let cases: [([f64; 2], [f64; 2], [f64; 2], [f64; 2]); 3] = [
        ([1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]),
        ([0.3, -1.2], [-0.5, 0.7], [1.0, 0.4], [0.2, -0.3]),
        ([2.0, 1.0], [1.5, -2.0], [-1.0, 0.5], [-0.4, 1.1]),
    ];
    let (mq, lq, mp, lp) = cases[case];
    let t = |v: [f64; 2]| Tensor2::new(1, 2, v.to_vec()).unwrap();
    let kl = kl_diag_gaussians(&t(mq), &t(lq), &t(mp), &t(lp)).unwrap()[0];
    let mut r = rng(40 + case as u64);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut w = 0.0;
        for d in 0..2 {
            let x = mq[d] + (0.5 * lq[d]).exp() * standard_normal(&mut r);
            w += scalar_logpdf(x, mq[d], lq[d]) - scalar_logpdf(x, mp[d], lp[d]);
        }
        sum += w;
        sq += w * w;
    }
    let mean = sum / n as f64;
    (kl, mean, ((sq / n as f64 - mean * mean) / n as f64).sqrt())
}

pub const KL_CASES: usize = 3;

/// `log N(x; m, S)` for a symmetric 2×2 covariance.
fn logpdf2(x: [f64; 2], m: [f64; 2], s: [[f64; 2]; 2]) -> f64 {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let (dx, dy) = (x[0] - m[0], x[1] - m[1]);
    let quad = (s[1][1] * dx * dx - 2.0 * s[0][1] * dx * dy + s[0][0] * dy * dy) / det;
    -0.5 * quad - 0.5 * det.ln() - 2.0 * HALF_LN_2PI
}

/// Exact `log p(s' | s, a, c)` of a CVAE whose decoder is a single affine layer.
fn linear_evidence(m: &CvaeModel, s: [f64; 2], a: [f64; 2], sn: [f64; 2], c: usize) -> f64 {
    let l = &m.decoder.layers()[0];
    let k = m.cfg.state_scale;
    let x = [s[0] * k, s[1] * k, a[0], a[1]];
    let mut mean = [0.0; 2];
    let mut cov = [[0.0; 2]; 2];
    for o in 0..2 {
        mean[o] = s[o]
            + l.bias.get(0, o)
            + (0..4).map(|p| x[p] * l.weight.get(p, o)).sum::<f64>()
            + (0..2).map(|j| m.prior_mean.get(c, j) * l.weight.get(4 + j, o)).sum::<f64>();
    }
    for o in 0..2 {
        for q in 0..2 {
            cov[o][q] = (0..2).map(|j| l.weight.get(4 + j, o) * m.prior_logvar.get(c, j).exp() * l.weight.get(4 + j, q)).sum::<f64>();
        }
        cov[o][o] += m.decoder_logvar.get(0, o).exp();
    }
    logpdf2(sn, mean, cov)
}

/// Trains a linear CVAE on linear-Gaussian data; returns `(exact evidence − bound, bound standard error)`.
pub fn linear_gaussian_gap() -> (f64, f64) {
    let mut r = rng(2024);
    let centers = [[-1.0, 0.5], [0.0, 0.0], [1.5, -1.0]];
    let rows: Vec<_> = (0..3000)
        .map(|i| {
            let c = i % 3;
            let s = [r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0)];
            let a = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let u = [centers[c][0] + 0.6 * standard_normal(&mut r), centers[c][1] + 0.4 * standard_normal(&mut r)];
            let sn = [
                s[0] + 0.5 * a[0] + u[0] + 0.3 * u[1] + 0.2 * standard_normal(&mut r),
                s[1] + a[1] - 0.4 * u[0] + u[1] + 0.2 * standard_normal(&mut r),
            ];
            (s, a, sn, c)
        })
        .collect();
    let batch = TransitionBatch::from_rows(&rows).unwrap();
    let cfg = CvaeConfig { hidden_layers: 0, ..Default::default() };
    let mut model = CvaeModel::new(cfg, log_class_frequencies(&batch.class, 3), &mut rng(1)).unwrap();
    let train = CvaeTrainConfig { epochs: 300, batch_size: 128, lr: 1e-2, kl_warmup_epochs: 0, cosine_lr: true };
    train_cvae(&mut model, &batch, &train, &mut rng(2)).unwrap();

    let evidence = rows.iter().map(|&(s, a, sn, c)| linear_evidence(&model, s, a, sn, c)).sum::<f64>() / rows.len() as f64;
    let draws: Vec<f64> = (0..20)
        .map(|k| {
            let b = model.elbo(&batch, &mut rng(500 + k)).unwrap();
            b.recon - b.kl
        })
        .collect();
    let bound = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = (draws.iter().map(|v| (v - bound).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
    (evidence - bound, sd / (draws.len() as f64).sqrt())
}
