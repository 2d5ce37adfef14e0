//! Counterfactual expert augmentation.
//!
//! For each generated pair: infer `ũ` from an expert transition's
//! posterior, decode the next state under parents `(s̃, ã)` taken from
//! unlabeled data, then label it with the sampler policy's mean action.
//! Generated pairs are stored as counterfactual expert records
//! (`s = s̃_next`, `a = ã_next`, `NaN` in `s_next` and `r`).
//!
//! # Provenance sidecar
//!
//! ```text
//! oilca-provenance v1
//! n_records <N>
//! model_checksum <hex>
//! sampler_checksum <hex>
//! end
//! N × 24 bytes: expert episode u32 | expert t u32 | parent episode u32 | parent t u32 | seed u64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use rand::SeedableRng;

use crate::agents::{train_bc, BcConfig, NetConfig, Policy, SaBatch};
use crate::datagen::{Episode, Record, SplitDataset};
use crate::error::{Error, Result};
use crate::ivae::CvaeModel;
use crate::numkit::rng::{standard_normal, Rng};
use crate::numkit::tensor::Tensor2;
use crate::toyenv::{EnvSpec, Vec2};

const PROV_MAGIC: &str = "oilca-provenance v1";
const PROV_STRIDE: usize = 24;

/// Where `ũ` comes from. `Prior` exists for ablations only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Posterior,
    Prior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Number of augmentation batches when `target_ratio` is unset.
    pub batches: usize,
    pub batch_size: usize,
    /// Desired `|D_E| / |D_U|` in records; overrides `batches`.
    pub target_ratio: Option<f64>,
    /// Multiplier on the decoder noise draw; 0 returns the decoder mean.
    pub noise_scale: f64,
    pub latent: LatentSource,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { batches: 0, batch_size: 4096, target_ratio: Some(1.0), noise_scale: 1.0, latent: LatentSource::Posterior }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("augment batch_size must be at least 1".into()));
        }
        if let Some(r) = self.target_ratio {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("target_ratio = {r}")));
            }
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config(format!("noise_scale = {}", self.noise_scale)));
        }
        Ok(())
    }

    /// Sizes of the batches to generate given current expert and unlabeled record counts.
    /// A ratio target ends with one partial batch so the total lands on `round(ratio·n_u)`.
    pub fn plan(&self, n_expert: usize, n_unlabeled: usize) -> Vec<usize> {
        let total = match self.target_ratio {
            Some(r) => ((r * n_unlabeled as f64).round() as usize).saturating_sub(n_expert),
            None => self.batches * self.batch_size,
        };
        let mut out = vec![self.batch_size; total / self.batch_size];
        if total % self.batch_size > 0 {
            out.push(total % self.batch_size);
        }
        out
    }
}

/// Position of a record inside a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordRef {
    pub episode: u32,
    pub t: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedPair {
    pub s_next: Vec2,
    pub a_next: Vec2,
    pub class: usize,
    pub expert: RecordRef,
    pub parent: RecordRef,
    /// Seeds the `ũ` and decoder-noise draws of this pair.
    pub seed: u64,
}

/// Source transitions from D_E with their record ids.
#[derive(Clone, Debug)]
pub struct ExpertPool {
    pub rows: Vec<(RecordRef, Vec2, Vec2, Vec2, usize)>,
}

/// Candidate parents `(s̃, ã)` from D_U.
#[derive(Clone, Debug)]
pub struct ParentPool {
    pub rows: Vec<(RecordRef, Vec2, Vec2)>,
}

impl ExpertPool {
    pub fn from_episodes(eps: &[Episode]) -> Self {
        let rows = eps
            .iter()
            .flat_map(|e| {
                e.records
                    .iter()
                    .filter(|r| !r.is_counterfactual())
                    .map(move |r| (RecordRef { episode: e.id, t: r.t }, r.s, r.a, r.s_next, e.class))
            })
            .collect();
        Self { rows }
    }
}

impl ParentPool {
    pub fn from_episodes(eps: &[Episode]) -> Self {
        let rows = eps
            .iter()
            .flat_map(|e| e.records.iter().filter(|r| !r.is_counterfactual()).map(move |r| (RecordRef { episode: e.id, t: r.t }, r.s, r.a)))
            .collect();
        Self { rows }
    }
}

/// CVAE and sampler pinned to the checksums they had when frozen.
#[derive(Clone, Debug)]
pub struct FrozenModels {
    pub model: CvaeModel,
    pub sampler: Policy,
    pub model_checksum: String,
    pub sampler_checksum: String,
}

impl FrozenModels {
    pub fn new(model: CvaeModel, sampler: Policy) -> Self {
        let model_checksum = model.checksum();
        let sampler_checksum = sampler.checksum();
        Self { model, sampler, model_checksum, sampler_checksum }
    }

    pub fn verify(&self) -> Result<()> {
        if self.model.checksum() != self.model_checksum {
            return Err(Error::Staleness(format!("CVAE checksum {} != frozen {}", self.model.checksum(), self.model_checksum)));
        }
        if self.sampler.checksum() != self.sampler_checksum {
            return Err(Error::Staleness(format!("sampler checksum {} != frozen {}", self.sampler.checksum(), self.sampler_checksum)));
        }
        Ok(())
    }
}

/// BC fit of the sampler on the real expert pairs.
pub fn pretrain_sampler(expert: &[Episode], net: &NetConfig, cfg: &BcConfig, rng: &mut Rng) -> Result<Policy> {
    let pairs: Vec<(Vec2, Vec2)> = expert.iter().flat_map(|e| e.records.iter().filter(|r| !r.is_counterfactual()).map(|r| (r.s, r.a))).collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientData("sampler needs a nonempty D_E".into()));
    }
    Ok(train_bc(&SaBatch::from_pairs(&pairs)?, net, cfg, rng)?.0)
}

/// Latent noise first, then the two decoder-noise draws.
fn pair_normals(seed: u64, latent_dim: usize) -> Vec<f64> {
    let mut r = Rng::seed_from_u64(seed);
    (0..latent_dim + 2).map(|_| standard_normal(&mut r)).collect()
}

/// Generates one pair per index. `expert[i]` supplies `ũ`, `parents[i]` the intervened `(s̃, ã)`.
pub fn counterfactual_batch(
    frozen: &FrozenModels,
    spec: &EnvSpec,
    expert: &[(RecordRef, Vec2, Vec2, Vec2, usize)],
    parents: &[(RecordRef, Vec2, Vec2)],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Vec<AugmentedPair>> {
    frozen.verify()?;
    if expert.len() != parents.len() {
        return Err(Error::Contract(format!("{} expert rows vs {} parents", expert.len(), parents.len())));
    }
    let n = expert.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = frozen.model.cfg.latent_dim;
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let normals: Vec<Vec<f64>> = seeds.iter().map(|&s| pair_normals(s, d)).collect();
    let col = |f: &dyn Fn(usize) -> Vec2| Tensor2::new(n, 2, (0..n).flat_map(f).collect());
    let classes: Vec<usize> = expert.iter().map(|e| e.4).collect();
    let (mu, lv) = match cfg.latent {
        LatentSource::Posterior => frozen.model.encode(&col(&|i| expert[i].1)?, &col(&|i| expert[i].2)?, &col(&|i| expert[i].3)?, &classes)?,
        LatentSource::Prior => frozen.model.prior(&classes)?,
    };
    let mut u = Tensor2::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            u.set(i, k, mu.get(i, k) + (0.5 * lv.get(i, k)).exp() * normals[i][k]);
        }
    }
    let (mean, dec_lv) = frozen.model.decode(&col(&|i| parents[i].1)?, &col(&|i| parents[i].2)?, &u)?;
    let sd = [(0.5 * dec_lv.get(0, 0)).exp(), (0.5 * dec_lv.get(0, 1)).exp()];
    let mut s_next = Vec::with_capacity(n);
    for i in 0..n {
        let x = [mean.get(i, 0) + cfg.noise_scale * sd[0] * normals[i][d], mean.get(i, 1) + cfg.noise_scale * sd[1] * normals[i][d + 1]];
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::NonFinite(format!("counterfactual state at row {i}")));
        }
        s_next.push(spec.clip_to_box(x));
    }
    let actions = frozen.sampler.mean_action(&Tensor2::new(n, 2, s_next.iter().flatten().copied().collect())?)?;
    Ok((0..n)
        .map(|i| AugmentedPair {
            s_next: s_next[i],
            a_next: [actions.get(i, 0), actions.get(i, 1)],
            class: expert[i].4,
            expert: expert[i].0,
            parent: parents[i].0,
            seed: seeds[i],
        })
        .collect())
}

fn draw_indices(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= len {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Augmented dataset plus the generated pairs in storage order.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub dataset: SplitDataset,
    pub pairs: Vec<AugmentedPair>,
}

/// Extends D_E with counterfactual episodes, one per (batch, class). Original episodes are untouched.
pub fn augment_expert(ds: &SplitDataset, frozen: &FrozenModels, spec: &EnvSpec, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Augmented> {
    cfg.validate()?;
    frozen.verify()?;
    let experts = ExpertPool::from_episodes(&ds.expert);
    let parents = ParentPool::from_episodes(&ds.unlabeled);
    let plan = cfg.plan(ds.expert_records(), ds.unlabeled_records());
    let mut out = ds.clone();
    let mut pairs = Vec::new();
    if plan.is_empty() {
        return Ok(Augmented { dataset: out, pairs });
    }
    if experts.rows.is_empty() || parents.rows.is_empty() {
        return Err(Error::InsufficientData("augmentation needs real records in both D_E and D_U".into()));
    }
    let mut next_id = ds.all_episodes().map(|e| e.id + 1).max().unwrap_or(0);
    for &size in &plan {
        let ei = draw_indices(experts.rows.len(), size, rng);
        let pi = draw_indices(parents.rows.len(), size, rng);
        let e: Vec<_> = ei.iter().map(|&i| experts.rows[i]).collect();
        let p: Vec<_> = pi.iter().map(|&i| parents.rows[i]).collect();
        let mut batch = counterfactual_batch(frozen, spec, &e, &p, cfg, rng)?;
        batch.sort_by_key(|q| q.class);
        for class in 0..spec.n_classes {
            let group: Vec<&AugmentedPair> = batch.iter().filter(|q| q.class == class).collect();
            if group.is_empty() {
                continue;
            }
            let records = group
                .iter()
                .enumerate()
                .map(|(t, q)| Record { t: t as u32, s: q.s_next, a: q.a_next, s_next: [f64::NAN; 2], r: f64::NAN })
                .collect();
            out.expert.push(Episode { id: next_id, class, records, latent: None });
            next_id += 1;
        }
        pairs.extend(batch);
    }
    let meta = &mut out.manifest.meta;
    meta.insert("augmented_records".into(), pairs.len().to_string());
    meta.insert("model_checksum".into(), frozen.model_checksum.clone());
    meta.insert("sampler_checksum".into(), frozen.sampler_checksum.clone());
    Ok(Augmented { dataset: out, pairs })
}

/// Provenance sidecar contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub model_checksum: String,
    pub sampler_checksum: String,
    /// `(expert, parent, seed)` per augmented record, in storage order.
    pub entries: Vec<(RecordRef, RecordRef, u64)>,
}

impl Provenance {
    pub fn from_pairs(frozen: &FrozenModels, pairs: &[AugmentedPair]) -> Self {
        Self {
            model_checksum: frozen.model_checksum.clone(),
            sampler_checksum: frozen.sampler_checksum.clone(),
            entries: pairs.iter().map(|p| (p.expert, p.parent, p.seed)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{PROV_MAGIC}\nn_records {}\nmodel_checksum {}\nsampler_checksum {}\nend\n",
            self.entries.len(),
            self.model_checksum,
            self.sampler_checksum
        )
        .into_bytes();
        out.reserve(self.entries.len() * PROV_STRIDE);
        for (e, p, seed) in &self.entries {
            for v in [e.episode, e.t, p.episode, p.t] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&seed.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, msg: &str| Error::Format { offset: offset as u64, msg: msg.to_string() };
        let mut pos = 0;
        let mut lines = Vec::new();
        while lines.last().map(String::as_str) != Some("end") {
            let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad(pos, "unterminated header"))?;
            lines.push(String::from_utf8_lossy(&bytes[pos..pos + nl]).into_owned());
            pos += nl + 1;
        }
        if lines.len() != 5 || lines[0] != PROV_MAGIC {
            return Err(bad(0, "not a provenance sidecar"));
        }
        let field = |i: usize, key: &str| -> Result<String> {
            lines[i].strip_prefix(key).map(|v| v.trim().to_string()).ok_or_else(|| bad(0, &format!("missing {key}")))
        };
        let n: usize = field(1, "n_records")?.parse().map_err(|_| bad(0, "bad n_records"))?;
        if bytes.len() - pos != n * PROV_STRIDE {
            return Err(bad(pos, &format!("expected {} payload bytes, found {}", n * PROV_STRIDE, bytes.len() - pos)));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let entries = (0..n)
            .map(|i| {
                let o = pos + i * PROV_STRIDE;
                (
                    RecordRef { episode: u32_at(o), t: u32_at(o + 4) },
                    RecordRef { episode: u32_at(o + 8), t: u32_at(o + 12) },
                    u64::from_le_bytes(bytes[o + 16..o + 24].try_into().unwrap()),
                )
            })
            .collect();
        Ok(Self { model_checksum: field(2, "model_checksum")?, sampler_checksum: field(3, "sampler_checksum")?, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Checks every referenced record exists with the expected role.
    pub fn resolves_in(&self, ds: &SplitDataset) -> bool {
        let has = |eps: &[Episode], r: RecordRef| eps.iter().any(|e| e.id == r.episode && e.records.iter().any(|x| x.t == r.t && !x.is_counterfactual()));
        self.entries.iter().all(|&(e, p, _)| has(&ds.expert, e) && has(&ds.unlabeled, p))
    }
}

pub fn provenance_path(dataset: &Path) -> PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".prov");
    PathBuf::from(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Manifest;
    use crate::ivae::CvaeConfig;
    use crate::toyenv::EnvParams;

    fn spec() -> EnvSpec {
        EnvSpec::generate(&EnvParams { seed: 1, episode_len: 6, ..Default::default() }).unwrap()
    }

    fn episode(id: u32, class: usize, len: usize, rng: &mut Rng) -> Episode {
        let records = (0..len)
            .map(|t| {
                let s = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                let a = [1.0, 0.0];
                Record { t: t as u32, s, a, s_next: [s[0] + 1.0, s[1]], r: -1.0 }
            })
            .collect();
        Episode { id, class, records, latent: None }
    }

    fn dataset() -> SplitDataset {
        let mut rng = Rng::seed_from_u64(3);
        let expert = (0..2).map(|i| episode(i, i as usize % 3, 6, &mut rng)).collect();
        let unlabeled = (2..12).map(|i| episode(i, i as usize % 3, 6, &mut rng)).collect();
        SplitDataset { expert, unlabeled, manifest: Manifest { n_classes: 3, ..Default::default() } }
    }

    fn frozen() -> FrozenModels {
        let mut rng = Rng::seed_from_u64(4);
        let cfg = CvaeConfig { hidden: 8, hidden_layers: 1, ..Default::default() };
        let model = CvaeModel::new(cfg, vec![(1.0f64 / 3.0).ln(); 3], &mut rng).unwrap();
        let sampler = Policy::new(NetConfig { hidden: 8, hidden_layers: 1, state_scale: 0.1 }, &mut rng);
        FrozenModels::new(model, sampler)
    }

    #[test]
    fn plan_hits_ratio_exactly() {
        let cfg = AugmentConfig { batch_size: 7, ..Default::default() };
        for (ne, nu, r) in [(12, 60, 0.5), (12, 60, 1.0), (5, 1000, 0.3), (30, 1470, 0.9)] {
            let add: usize = AugmentConfig { target_ratio: Some(r), ..cfg.clone() }.plan(ne, nu).iter().sum();
            assert!(((ne + add) as f64 - r * nu as f64).abs() <= 1.0);
        }
        assert!(AugmentConfig { target_ratio: Some(0.1), ..cfg.clone() }.plan(12, 60).is_empty());
        let fixed = AugmentConfig { batches: 3, target_ratio: None, ..cfg };
        assert_eq!(fixed.plan(1, 1), vec![7, 7, 7]);
    }

    #[test]
    fn counts_and_originals() {
        let ds = dataset();
        let f = frozen();
        let cfg = AugmentConfig { batches: 3, batch_size: 5, target_ratio: None, ..Default::default() };
        let out = augment_expert(&ds, &f, &spec(), &cfg, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out.dataset.expert_records(), ds.expert_records() + 15);
        assert_eq!(out.pairs.len(), 15);
        assert_eq!(&out.dataset.expert[..2], &ds.expert[..]);
        assert_eq!(out.dataset.unlabeled, ds.unlabeled);
        for e in &out.dataset.expert[2..] {
            assert!(e.records.iter().all(|r| r.is_counterfactual() && spec().contains(r.s)));
        }
        let prov = Provenance::from_pairs(&f, &out.pairs);
        assert!(prov.resolves_in(&out.dataset));
        assert_eq!(Provenance::from_bytes(&prov.to_bytes()).unwrap(), prov);

        let none = AugmentConfig { batches: 0, ..cfg };
        let same = augment_expert(&ds, &f, &spec(), &none, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(same.dataset.expert, ds.expert);
    }

    #[test]
    fn deterministic_and_noise_free_limit() {
        let ds = dataset();
        let f = frozen();
        let e = ExpertPool::from_episodes(&ds.expert).rows[..4].to_vec();
        let p = ParentPool::from_episodes(&ds.unlabeled).rows[..4].to_vec();
        let cfg = AugmentConfig { noise_scale: 0.0, ..Default::default() };
        let a = counterfactual_batch(&f, &spec(), &e, &p, &cfg, &mut Rng::seed_from_u64(6)).unwrap();
        let b = counterfactual_batch(&f, &spec(), &e, &p, &cfg, &mut Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        for (q, (ex, par)) in a.iter().zip(e.iter().zip(&p)) {
            let t = |v: Vec2| Tensor2::new(1, 2, v.to_vec()).unwrap();
            let (mu, lv) = f.model.encode(&t(ex.1), &t(ex.2), &t(ex.3), &[ex.4]).unwrap();
            let n = pair_normals(q.seed, 2);
            let u = Tensor2::new(1, 2, vec![mu.get(0, 0) + (0.5 * lv.get(0, 0)).exp() * n[0], mu.get(0, 1) + (0.5 * lv.get(0, 1)).exp() * n[1]]).unwrap();
            let (mean, _) = f.model.decode(&t(par.1), &t(par.2), &u).unwrap();
            assert_eq!(q.s_next, spec().clip_to_box([mean.get(0, 0), mean.get(0, 1)]));
            assert_eq!(q.a_next, f.sampler.act_mean(q.s_next));
        }
    }

    #[test]
    fn stale_models_rejected() {
        let ds = dataset();
        let mut f = frozen();
        f.model.prior_mean.data_mut()[0] += 1e-3;
        let cfg = AugmentConfig { batches: 1, batch_size: 2, target_ratio: None, ..Default::default() };
        assert!(matches!(augment_expert(&ds, &f, &spec(), &cfg, &mut Rng::seed_from_u64(7)), Err(Error::Staleness(_))));
    }

    #[test]
    fn empty_expert_set_rejected_by_sampler() {
        let r = pretrain_sampler(&[], &NetConfig::default(), &BcConfig::default(), &mut Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }
}
