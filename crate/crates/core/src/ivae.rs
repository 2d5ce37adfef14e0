//! Identifiable conditional VAE over transitions.
//!
//! Generative side: `u | c ~ N(μ_p(c), diag exp(λ_p(c)))` from a learned
//! per-class prior table, and `s' = s + g(s, a, u) + ε` with
//! `ε ~ N(0, diag exp(logvar_ε))`. Inference side:
//! `q(u | s, a, s', c) = N(μ_q, diag exp(logvar_q))`, where the encoder sees
//! every observable (position, action, displacement `s' − s`, one-hot class).
//!
//! Per-sample bound: `log p(s' | u, s, a) + log p̂(c) − KL(q ‖ p(u | c))`,
//! with the first term estimated from one reparameterized draw and the KL
//! in closed form. `log p̂(c)` is the frozen empirical class frequency.
//!
//! The unconditional ablation drops the one-hot input and shares a single
//! prior row across classes.

use rand::seq::SliceRandom;

use crate::datagen::Episode;
use crate::error::{Error, Result};
use crate::numkit::checkpoint::Checkpoint;
use crate::numkit::gaussian::{gaussian_logpdf_var, kl_diag_gaussians_var, reparam_sample, reparam_sample_var};
use crate::numkit::graph::{Graph, Var};
use crate::numkit::mlp::{Activation, Init, Mlp};
use crate::numkit::rng::{standard_normal, Rng};
use crate::numkit::tensor::Tensor2;
use crate::numkit::{cosine_lr, AdamState, LOGVAR_MAX, LOGVAR_MIN};
use crate::toyenv::{Vec2, ACTION_DIM, STATE_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    pub n_classes: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    /// False builds the ablation whose encoder and prior ignore the class.
    pub conditional: bool,
    /// Multiplier applied to positions before they enter either network.
    pub state_scale: f64,
    pub init_decoder_logvar: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            latent_dim: 2,
            hidden: 64,
            hidden_layers: 2,
            activation: Activation::Tanh,
            conditional: true,
            state_scale: 0.1,
            init_decoder_logvar: 0.01f64.ln(),
        }
    }
}

impl CvaeConfig {
    pub fn encoder_input(&self) -> usize {
        2 * STATE_DIM + ACTION_DIM + if self.conditional { self.n_classes } else { 0 }
    }

    pub fn decoder_input(&self) -> usize {
        STATE_DIM + ACTION_DIM + self.latent_dim
    }

    pub fn prior_rows(&self) -> usize {
        if self.conditional {
            self.n_classes
        } else {
            1
        }
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        d.push(output);
        d
    }

    fn acts(&self) -> Vec<Activation> {
        let mut a = vec![self.activation; self.hidden_layers];
        a.push(Activation::Identity);
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    pub cfg: CvaeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// `1 × STATE_DIM`.
    pub decoder_logvar: Tensor2,
    /// `prior_rows × latent_dim`.
    pub prior_mean: Tensor2,
    pub prior_logvar: Tensor2,
    /// Frozen `log p̂(c)`.
    pub log_class_freq: Vec<f64>,
}

/// Batch means of the bound's terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub logpc: f64,
    pub kl: f64,
    pub total: f64,
}

/// Column-stacked transitions `(s, a, s', c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub s: Tensor2,
    pub a: Tensor2,
    pub s_next: Tensor2,
    pub class: Vec<usize>,
}

impl TransitionBatch {
    pub fn from_rows(rows: &[(Vec2, Vec2, Vec2, usize)]) -> Result<Self> {
        let col = |f: &dyn Fn(&(Vec2, Vec2, Vec2, usize)) -> Vec2| {
            Tensor2::new(rows.len(), 2, rows.iter().flat_map(|r| f(r)).collect())
        };
        Ok(Self {
            s: col(&|r| r.0)?,
            a: col(&|r| r.1)?,
            s_next: col(&|r| r.2)?,
            class: rows.iter().map(|r| r.3).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            s: self.s.select_rows(idx),
            a: self.a.select_rows(idx),
            s_next: self.s_next.select_rows(idx),
            class: idx.iter().map(|&i| self.class[i]).collect(),
        }
    }
}

/// Every real (non-counterfactual) transition of the given episodes, in order.
pub fn transitions(episodes: &[&Episode]) -> Result<TransitionBatch> {
    let rows: Vec<_> = episodes
        .iter()
        .flat_map(|e| e.records.iter().filter(|r| !r.is_counterfactual()).map(move |r| (r.s, r.a, r.s_next, e.class)))
        .collect();
    TransitionBatch::from_rows(&rows)
}

/// Empirical `log p̂(c)` with add-one smoothing.
pub fn log_class_frequencies(classes: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![1.0; n_classes];
    for &c in classes {
        counts[c] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| (c / total).ln()).collect()
}

struct Bound {
    encoder: Vec<Var>,
    decoder: Vec<Var>,
    decoder_logvar: Var,
    prior_mean: Var,
    prior_logvar: Var,
}

impl Bound {
    fn all(&self) -> Vec<Var> {
        let mut v = self.encoder.clone();
        v.extend(&self.decoder);
        v.extend([self.decoder_logvar, self.prior_mean, self.prior_logvar]);
        v
    }
}

impl CvaeModel {
    pub fn new(cfg: CvaeConfig, log_class_freq: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        if cfg.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if log_class_freq.len() != cfg.n_classes {
            return Err(Error::Dimension(format!("{} class frequencies for {} classes", log_class_freq.len(), cfg.n_classes)));
        }
        let encoder = Mlp::new(&cfg.dims(cfg.encoder_input(), 2 * cfg.latent_dim), cfg.activation, Activation::Identity, Init::default(), rng);
        let decoder = Mlp::new(&cfg.dims(cfg.decoder_input(), STATE_DIM), cfg.activation, Activation::Identity, Init::default(), rng);
        let rows = cfg.prior_rows();
        let prior_mean = if cfg.conditional {
            Tensor2::raw(rows, cfg.latent_dim, (0..rows * cfg.latent_dim).map(|_| standard_normal(rng)).collect())
        } else {
            Tensor2::zeros(rows, cfg.latent_dim)
        };
        Ok(Self {
            decoder_logvar: Tensor2::filled(1, STATE_DIM, cfg.init_decoder_logvar),
            prior_logvar: Tensor2::zeros(rows, cfg.latent_dim),
            prior_mean,
            encoder,
            decoder,
            log_class_freq,
            cfg,
        })
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend([&self.decoder_logvar, &self.prior_mean, &self.prior_logvar]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend([&mut self.decoder_logvar, &mut self.prior_mean, &mut self.prior_logvar]);
        p
    }

    fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            encoder: self.encoder.bind(g),
            decoder: self.decoder.bind(g),
            decoder_logvar: g.param(&self.decoder_logvar),
            prior_mean: g.param(&self.prior_mean),
            prior_logvar: g.param(&self.prior_logvar),
        }
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.cfg.n_classes) {
            return Err(Error::Category { class: c, n_classes: self.cfg.n_classes });
        }
        Ok(())
    }

    fn prior_rows_for(&self, classes: &[usize]) -> Vec<usize> {
        if self.cfg.conditional {
            classes.to_vec()
        } else {
            vec![0; classes.len()]
        }
    }

    fn encoder_features(&self, s: &Tensor2, a: &Tensor2, s_next: &Tensor2, classes: &[usize]) -> Result<Tensor2> {
        let n = s.rows();
        if a.rows() != n || s_next.rows() != n || classes.len() != n {
            return Err(Error::Dimension("encoder inputs disagree on batch size".into()));
        }
        let scaled = s.map(|v| v * self.cfg.state_scale);
        let delta = s_next.zip_map(s, |x, y| x - y);
        if self.cfg.conditional {
            let mut onehot = Tensor2::zeros(n, self.cfg.n_classes);
            for (i, &c) in classes.iter().enumerate() {
                onehot.set(i, c, 1.0);
            }
            Tensor2::hcat(&[&scaled, a, &delta, &onehot])
        } else {
            Tensor2::hcat(&[&scaled, a, &delta])
        }
    }

    fn decoder_features(&self, s: &Tensor2, a: &Tensor2) -> Result<Tensor2> {
        let scaled = s.map(|v| v * self.cfg.state_scale);
        Tensor2::hcat(&[&scaled, a])
    }

    /// Posterior parameters `(μ_q, logvar_q)`, each `n × latent_dim`.
    pub fn encode(&self, s: &Tensor2, a: &Tensor2, s_next: &Tensor2, classes: &[usize]) -> Result<(Tensor2, Tensor2)> {
        self.check_classes(classes)?;
        let x = self.encoder_features(s, a, s_next, classes)?;
        if !x.all_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let out = self.encoder.eval(&x)?;
        let d = self.cfg.latent_dim;
        Ok((out.select_cols(0, d), out.select_cols(d, 2 * d).map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))))
    }

    /// Likelihood parameters `(μ_x, logvar_ε)`; `μ_x` is `n × 2`, `logvar_ε` is the shared `1 × 2` row.
    pub fn decode(&self, s: &Tensor2, a: &Tensor2, u: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        if u.cols() != self.cfg.latent_dim || u.rows() != s.rows() {
            return Err(Error::Dimension(format!("latent {:?} for {} states", u.shape(), s.rows())));
        }
        let x = Tensor2::hcat(&[&self.decoder_features(s, a)?, u])?;
        let disp = self.decoder.eval(&x)?;
        let mean = s.zip_map(&disp, |p, q| p + q);
        Ok((mean, self.decoder_logvar.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))))
    }

    /// Prior parameters for each class in `classes`.
    pub fn prior(&self, classes: &[usize]) -> Result<(Tensor2, Tensor2)> {
        self.check_classes(classes)?;
        let rows = self.prior_rows_for(classes);
        Ok((self.prior_mean.select_rows(&rows), self.prior_logvar.select_rows(&rows).map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))))
    }

    /// One reparameterized draw from `q(u | s, a, s', c)` per row.
    pub fn posterior_sample(&self, s: &Tensor2, a: &Tensor2, s_next: &Tensor2, classes: &[usize], rng: &mut Rng) -> Result<Tensor2> {
        let (mu, lv) = self.encode(s, a, s_next, classes)?;
        reparam_sample(&mu, &lv, rng)
    }

    /// Records the per-row `(recon, kl)` nodes.
    fn record(&self, g: &mut Graph, b: &Bound, batch: &TransitionBatch, rng: &mut Rng) -> Result<(Var, Var)> {
        let d = self.cfg.latent_dim;
        let n = batch.len();
        let enc_in = g.constant(self.encoder_features(&batch.s, &batch.a, &batch.s_next, &batch.class)?);
        let enc_out = self.encoder.forward(g, &b.encoder, enc_in)?;
        let mu_q = g.slice(enc_out, 0, d);
        let lv_q = g.slice(enc_out, d, 2 * d);
        let lv_q = g.clamp(lv_q, LOGVAR_MIN, LOGVAR_MAX);
        let u = reparam_sample_var(g, mu_q, lv_q, rng);

        let dec_feat = g.constant(self.decoder_features(&batch.s, &batch.a)?);
        let dec_in = g.concat(&[dec_feat, u]);
        let disp = self.decoder.forward(g, &b.decoder, dec_in)?;
        let s = g.constant(batch.s.clone());
        let mean_x = g.add(s, disp);
        let lv_eps = g.clamp(b.decoder_logvar, LOGVAR_MIN, LOGVAR_MAX);
        let lv_eps = g.broadcast(lv_eps, n);
        let target = g.constant(batch.s_next.clone());
        let recon = gaussian_logpdf_var(g, target, mean_x, lv_eps);

        let rows = self.prior_rows_for(&batch.class);
        let mu_p = g.gather(b.prior_mean, &rows);
        let lv_p = g.gather(b.prior_logvar, &rows);
        let lv_p = g.clamp(lv_p, LOGVAR_MIN, LOGVAR_MAX);
        let kl = kl_diag_gaussians_var(g, mu_q, lv_q, mu_p, lv_p);
        Ok((recon, kl))
    }

    fn breakdown(&self, recon: &Tensor2, kl: &Tensor2, classes: &[usize]) -> ElboBreakdown {
        let n = classes.len() as f64;
        let recon = recon.sum() / n;
        let kl = kl.sum() / n;
        let logpc = classes.iter().map(|&c| self.log_class_freq[c]).sum::<f64>() / n;
        ElboBreakdown { recon, logpc, kl, total: recon + logpc - kl }
    }

    /// Batch-mean bound, one Monte-Carlo draw per row.
    pub fn elbo(&self, batch: &TransitionBatch, rng: &mut Rng) -> Result<ElboBreakdown> {
        if batch.is_empty() {
            return Err(Error::Contract("elbo of an empty batch".into()));
        }
        self.check_classes(&batch.class)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let (recon, kl) = self.record(&mut g, &b, batch, rng)?;
        Ok(self.breakdown(g.value(recon), g.value(kl), &batch.class))
    }

    /// Bound value and gradients of `mean(kl_weight·KL − recon)`, in [`CvaeModel::params`] order.
    /// The reported breakdown is always the unweighted bound.
    pub fn loss_and_grads(&self, batch: &TransitionBatch, kl_weight: f64, rng: &mut Rng) -> Result<(ElboBreakdown, Vec<Tensor2>)> {
        if batch.is_empty() {
            return Err(Error::Contract("elbo of an empty batch".into()));
        }
        self.check_classes(&batch.class)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let (recon, kl) = self.record(&mut g, &b, batch, rng)?;
        let report = self.breakdown(g.value(recon), g.value(kl), &batch.class);
        let kl = g.scale(kl, kl_weight);
        let diff = g.sub(kl, recon);
        let loss = g.mean(diff);
        let grads = g.backward(loss)?;
        Ok((report, grads.collect(&b.all())))
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new("cvae", seed, step);
        ck.set_meta("n_classes", self.cfg.n_classes);
        ck.set_meta("latent_dim", self.cfg.latent_dim);
        ck.set_meta("hidden", self.cfg.hidden);
        ck.set_meta("hidden_layers", self.cfg.hidden_layers);
        ck.set_meta("activation", self.cfg.activation.name());
        ck.set_meta("conditional", self.cfg.conditional);
        ck.set_meta("state_scale", self.cfg.state_scale);
        ck.set_meta("init_decoder_logvar", self.cfg.init_decoder_logvar);
        let lcf: Vec<String> = self.log_class_freq.iter().map(|v| format!("{v:?}")).collect();
        ck.set_meta("log_class_freq", lcf.join(","));
        ck.push_mlp("encoder", &self.encoder);
        ck.push_mlp("decoder", &self.decoder);
        ck.push("decoder_logvar", &self.decoder_logvar);
        ck.push("prior_mean", &self.prior_mean);
        ck.push("prior_logvar", &self.prior_logvar);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("cvae")?;
        let activation = Activation::parse(ck.meta("activation")?)
            .ok_or_else(|| Error::Format { offset: 0, msg: "unknown activation".into() })?;
        let cfg = CvaeConfig {
            n_classes: ck.meta_parse("n_classes")?,
            latent_dim: ck.meta_parse("latent_dim")?,
            hidden: ck.meta_parse("hidden")?,
            hidden_layers: ck.meta_parse("hidden_layers")?,
            activation,
            conditional: ck.meta_parse("conditional")?,
            state_scale: ck.meta_parse("state_scale")?,
            init_decoder_logvar: ck.meta_parse("init_decoder_logvar")?,
        };
        let log_class_freq = ck
            .meta("log_class_freq")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format { offset: 0, msg: format!("bad class frequency `{v}`") }))
            .collect::<Result<Vec<f64>>>()?;
        if log_class_freq.len() != cfg.n_classes {
            return Err(Error::Dimension(format!("{} class frequencies for {} classes", log_class_freq.len(), cfg.n_classes)));
        }
        let rows = cfg.prior_rows();
        Ok(Self {
            encoder: ck.mlp("encoder", &cfg.dims(cfg.encoder_input(), 2 * cfg.latent_dim), &cfg.acts())?,
            decoder: ck.mlp("decoder", &cfg.dims(cfg.decoder_input(), STATE_DIM), &cfg.acts())?,
            decoder_logvar: ck.tensor("decoder_logvar", 1, STATE_DIM)?.clone(),
            prior_mean: ck.tensor("prior_mean", rows, cfg.latent_dim)?.clone(),
            prior_logvar: ck.tensor("prior_logvar", rows, cfg.latent_dim)?.clone(),
            log_class_freq,
            cfg,
        })
    }

    /// Order-sensitive fingerprint of every parameter, used to detect stale frozen models.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for p in self.params() {
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::toyenv::short_hash(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// The KL weight ramps linearly from 0 to 1 over this many epochs.
    pub kl_warmup_epochs: usize,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_lr: bool,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 150, batch_size: 256, lr: 2e-3, kl_warmup_epochs: 30, cosine_lr: true }
    }
}

/// Maximizes the bound with Adam over shuffled minibatches. Returns the per-epoch mean bound
/// (unweighted, so warm-up epochs report the true bound of the current parameters' draws).
pub fn train_cvae(model: &mut CvaeModel, data: &TransitionBatch, cfg: &CvaeTrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no transitions to fit the CVAE on".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut adam = AdamState::new(&model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let warm = (cfg.kl_warmup_epochs * per_epoch) as f64;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let kl_weight = if warm > 0.0 { (step as f64 / warm).min(1.0) } else { 1.0 };
            if cfg.cosine_lr {
                adam.lr = cosine_lr(cfg.lr, step, total);
            }
            step += 1;
            let (report, grads) = model.loss_and_grads(&batch, kl_weight, rng)?;
            if !report.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { stage: "train-vae", step: epoch });
            }
            adam.update(model.params_mut(), &grads)?;
            sum += report.total * chunk.len() as f64;
            count += chunk.len();
        }
        curve.push(sum / count as f64);
    }
    Ok(curve)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean absolute Pearson correlation between true and estimated latents under the
/// best column permutation.
pub fn mcc(u_true: &Tensor2, u_est: &Tensor2) -> Result<f64> {
    if u_true.shape() != u_est.shape() {
        return Err(Error::Dimension(format!("mcc shapes {:?} vs {:?}", u_true.shape(), u_est.shape())));
    }
    let d = u_true.cols();
    if d == 0 || d > 4 || u_true.rows() < 2 {
        return Err(Error::Dimension(format!("mcc needs 1..=4 columns and ≥ 2 rows, got {:?}", u_true.shape())));
    }
    let cols = |t: &Tensor2| -> Vec<Vec<f64>> { (0..d).map(|j| (0..t.rows()).map(|i| t.get(i, j)).collect()).collect() };
    let (ct, ce) = (cols(u_true), cols(u_est));
    for (name, cs) in [("true", &ct), ("estimated", &ce)] {
        for (j, c) in cs.iter().enumerate() {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            if c.iter().map(|v| (v - m).powi(2)).sum::<f64>() <= 1e-24 {
                return Err(Error::DegenerateVariance(format!("{name} column {j} is constant")));
            }
        }
    }
    let mut corr = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            corr[i][j] = pearson(&ct[i], &ce[j]).abs();
        }
    }
    let best = permutations(d)
        .iter()
        .map(|p| (0..d).map(|i| corr[i][p[i]]).sum::<f64>() / d as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}
