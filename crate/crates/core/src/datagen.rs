//! Behavior policies, offline collection, the expert/unlabeled split, and
//! the on-disk dataset format.
//!
//! # Dataset file
//!
//! ```text
//! oilca-dataset v1
//! state_dim 2
//! action_dim 2
//! n_classes <C>
//! n_episodes <E>
//! n_expert_episodes <K>        (the first K episodes in record order form D_E)
//! n_records <N>
//! env_hash <hex>
//! seeds <key>=<u64> ...
//! meta <key> <value>           (zero or more)
//! end
//! N × 65-byte records: episode_id u32 | t u32 | c u8 | s_t 2×f64 | a_t 2×f64 | s_next 2×f64 | r f64
//! ```
//!
//! All numbers are little-endian. Counterfactual records carry `NaN` in
//! `s_next` and `r`. The optional `.latent` sidecar holds the true `u`
//! (2×f64) for every record, in the same order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkit::rng::{Rng, SeedTree, Stage};
use crate::toyenv::{ToyEnv, Vec2, ACTION_DIM, STATE_DIM};

pub const RECORD_STRIDE: usize = 4 + 4 + 1 + 7 * 8;
const MAGIC: &str = "oilca-dataset v1";
const LATENT_MAGIC: &str = "oilca-latent v1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub t: u32,
    pub s: Vec2,
    pub a: Vec2,
    pub s_next: Vec2,
    pub r: f64,
}

impl Record {
    pub fn is_counterfactual(&self) -> bool {
        self.r.is_nan()
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub id: u32,
    pub class: usize,
    pub records: Vec<Record>,
    /// Ground-truth exogenous draws; never read by training code.
    pub latent: Option<Vec<Vec2>>,
}

impl Episode {
    /// Σ r_t (`NaN` for counterfactual episodes).
    pub fn ret(&self) -> f64 {
        self.records.iter().map(|r| r.r).sum()
    }

    pub fn is_counterfactual(&self) -> bool {
        self.records.iter().any(Record::is_counterfactual)
    }
}

// Equality ignores the latent sidecar and treats NaN fields as equal to NaN.
impl PartialEq for Episode {
    fn eq(&self, other: &Self) -> bool {
        fn same(a: f64, b: f64) -> bool {
            a.to_bits() == b.to_bits() || a == b
        }
        self.id == other.id
            && self.class == other.class
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(x, y)| {
                x.t == y.t
                    && [x.s, x.a, x.s_next].iter().flatten().zip([y.s, y.a, y.s_next].iter().flatten()).all(|(&p, &q)| same(p, q))
                    && same(x.r, y.r)
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BehaviorKind {
    Greedy,
    EpsRandom,
    Uniform,
}

/// Scripted data-collection policy; every action is an axis-aligned move of length `step_size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorPolicy {
    pub kind: BehaviorKind,
    pub eps: f64,
    pub step_size: f64,
    pub target: Vec2,
}

const AXIS_MOVES: [Vec2; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

impl BehaviorPolicy {
    pub fn greedy_move(&self, s: Vec2) -> Vec2 {
        let (dx, dy) = (self.target[0] - s[0], self.target[1] - s[1]);
        let h = self.step_size;
        if dx.abs() >= dy.abs() {
            [h.copysign(dx), 0.0]
        } else {
            [0.0, h.copysign(dy)]
        }
    }

    fn random_move(&self, rng: &mut Rng) -> Vec2 {
        let m = AXIS_MOVES[rng.gen_range(0..4)];
        [m[0] * self.step_size, m[1] * self.step_size]
    }

    pub fn act(&self, s: Vec2, rng: &mut Rng) -> Vec2 {
        match self.kind {
            BehaviorKind::Greedy => self.greedy_move(s),
            BehaviorKind::Uniform => self.random_move(rng),
            BehaviorKind::EpsRandom => {
                if rng.gen::<f64>() < self.eps {
                    self.random_move(rng)
                } else {
                    self.greedy_move(s)
                }
            }
        }
    }
}

/// Behavior mixture expressed as integer weights; each episode draws one policy with probability ∝ weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMixture {
    pub greedy: u32,
    pub eps_random: u32,
    pub uniform: u32,
    pub eps: f64,
}

impl Default for PolicyMixture {
    fn default() -> Self {
        Self { greedy: 5, eps_random: 4, uniform: 1, eps: 0.3 }
    }
}

impl PolicyMixture {
    /// Flat list in which uniform sampling reproduces the weights.
    pub fn policies(&self, step_size: f64, target: Vec2) -> Vec<BehaviorPolicy> {
        let mk = |kind| BehaviorPolicy { kind, eps: self.eps, step_size, target };
        let mut out = Vec::new();
        out.extend((0..self.greedy).map(|_| mk(BehaviorKind::Greedy)));
        out.extend((0..self.eps_random).map(|_| mk(BehaviorKind::EpsRandom)));
        out.extend((0..self.uniform).map(|_| mk(BehaviorKind::Uniform)));
        out
    }
}

/// Collects `C × episodes_per_class` episodes. Episode `i` has class `i / episodes_per_class`
/// and draws from its own `datagen` substream `i`, so collection parallelizes deterministically.
pub fn collect(env: &ToyEnv, policies: &[BehaviorPolicy], episodes_per_class: usize, seeds: &SeedTree) -> Result<Vec<Episode>> {
    if policies.is_empty() {
        return Err(Error::Config("behavior policy list is empty".into()));
    }
    if episodes_per_class == 0 {
        return Err(Error::Config("episodes_per_class must be at least 1".into()));
    }
    let n = env.spec.n_classes * episodes_per_class;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(Stage::Datagen, i as u64);
            let policy = policies[rng.gen_range(0..policies.len())];
            let class = i / episodes_per_class;
            let actor = |s: Vec2, r: &mut Rng| policy.act(s, r);
            let steps = env.rollout(&actor, class, &mut rng)?;
            Ok(Episode {
                id: i as u32,
                class,
                records: steps
                    .iter()
                    .map(|tr| Record { t: tr.t as u32, s: tr.s, a: tr.a, s_next: tr.s_next, r: tr.r })
                    .collect(),
                latent: Some(steps.iter().map(|tr| tr.u).collect()),
            })
        })
        .collect()
}

/// Seeds and settings recorded with a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub n_classes: usize,
    pub env_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub expert: Vec<Episode>,
    pub unlabeled: Vec<Episode>,
    pub manifest: Manifest,
}

impl SplitDataset {
    pub fn all_episodes(&self) -> impl Iterator<Item = &Episode> {
        self.expert.iter().chain(&self.unlabeled)
    }

    pub fn n_records(&self) -> usize {
        self.all_episodes().map(|e| e.records.len()).sum()
    }

    pub fn expert_records(&self) -> usize {
        self.expert.iter().map(|e| e.records.len()).sum()
    }

    pub fn unlabeled_records(&self) -> usize {
        self.unlabeled.iter().map(|e| e.records.len()).sum()
    }

    pub fn has_latents(&self) -> bool {
        self.all_episodes().all(|e| e.latent.as_ref().is_some_and(|l| l.len() == e.records.len()))
    }
}

/// Marks the top `round(top_frac·n)` episodes by return as positives (ties go to the lower id),
/// then admits each positive to D_E independently with probability `expert_prob`.
pub fn label_split(episodes: Vec<Episode>, top_frac: f64, expert_prob: f64, rng: &mut Rng) -> Result<SplitDataset> {
    if !(top_frac > 0.0 && top_frac < 1.0) {
        return Err(Error::Config(format!("top_frac = {top_frac} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&expert_prob) {
        return Err(Error::Config(format!("expert_prob = {expert_prob} outside [0, 1]")));
    }
    if episodes.len() < 5 {
        return Err(Error::InsufficientData(format!("{} episodes; label_split needs at least 5", episodes.len())));
    }
    let n_classes = episodes.iter().map(|e| e.class + 1).max().unwrap_or(0);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by(|&i, &j| {
        episodes[j].ret().total_cmp(&episodes[i].ret()).then(episodes[i].id.cmp(&episodes[j].id))
    });
    let k = ((top_frac * episodes.len() as f64).round() as usize).clamp(1, episodes.len() - 1);
    let mut positive = vec![false; episodes.len()];
    for &i in &order[..k] {
        positive[i] = true;
    }
    // Coin flips in id order so the outcome does not depend on input order.
    let mut by_id: Vec<usize> = (0..episodes.len()).collect();
    by_id.sort_by_key(|&i| episodes[i].id);
    let mut chosen = vec![false; episodes.len()];
    for &i in &by_id {
        let flip = rng.gen::<f64>();
        chosen[i] = positive[i] && flip < expert_prob;
    }
    let (mut expert, mut unlabeled) = (Vec::new(), Vec::new());
    for (i, e) in episodes.into_iter().enumerate() {
        if chosen[i] {
            expert.push(e);
        } else {
            unlabeled.push(e);
        }
    }
    expert.sort_by_key(|e| e.id);
    unlabeled.sort_by_key(|e| e.id);
    let mut manifest = Manifest { n_classes, ..Default::default() };
    manifest.meta.insert("top_frac".into(), top_frac.to_string());
    manifest.meta.insert("expert_prob".into(), expert_prob.to_string());
    manifest.meta.insert("n_positive".into(), k.to_string());
    Ok(SplitDataset { expert, unlabeled, manifest })
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

pub fn latent_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".latent");
    PathBuf::from(p)
}

fn header_text(ds: &SplitDataset) -> String {
    let m = &ds.manifest;
    let mut h = String::new();
    h.push_str(MAGIC);
    h.push('\n');
    h.push_str(&format!("state_dim {STATE_DIM}\naction_dim {ACTION_DIM}\n"));
    h.push_str(&format!("n_classes {}\n", m.n_classes));
    h.push_str(&format!("n_episodes {}\n", ds.expert.len() + ds.unlabeled.len()));
    h.push_str(&format!("n_expert_episodes {}\n", ds.expert.len()));
    h.push_str(&format!("n_records {}\n", ds.n_records()));
    h.push_str(&format!("env_hash {}\n", if m.env_hash.is_empty() { "-" } else { &m.env_hash }));
    let seeds: Vec<String> = m.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
    h.push_str(&format!("seeds {}\n", seeds.join(" ")).trim_end());
    h.push('\n');
    for (k, v) in &m.meta {
        h.push_str(&format!("meta {k} {v}\n"));
    }
    h.push_str("end\n");
    h
}

/// Byte length of the text header `save` would write.
pub fn header_len(ds: &SplitDataset) -> usize {
    header_text(ds).len()
}

pub fn to_bytes(ds: &SplitDataset) -> Vec<u8> {
    let mut out = header_text(ds).into_bytes();
    out.reserve(ds.n_records() * RECORD_STRIDE);
    for e in ds.all_episodes() {
        for r in &e.records {
            out.extend_from_slice(&e.id.to_le_bytes());
            out.extend_from_slice(&r.t.to_le_bytes());
            out.push(e.class as u8);
            for v in [r.s[0], r.s[1], r.a[0], r.a[1], r.s_next[0], r.s_next[1], r.r] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<SplitDataset> {
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let rel = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| fmt_err(pos, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + rel]).map_err(|_| fmt_err(pos, "header is not UTF-8"))?;
        lines.push((pos, line.to_string()));
        pos += rel + 1;
        if line == "end" {
            break;
        }
    }
    let (off0, magic) = &lines[0];
    if magic != MAGIC {
        return Err(fmt_err(*off0, format!("bad magic `{magic}`")));
    }
    let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut manifest = Manifest::default();
    for (off, line) in &lines[1..lines.len() - 1] {
        let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        match key {
            "meta" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| fmt_err(*off, format!("malformed meta `{line}`")))?;
                manifest.meta.insert(k.to_string(), v.to_string());
            }
            "seeds" => {
                for kv in rest.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| fmt_err(*off, format!("malformed seed `{kv}`")))?;
                    let v = v.parse().map_err(|_| fmt_err(*off, format!("malformed seed `{kv}`")))?;
                    manifest.seeds.insert(k.to_string(), v);
                }
            }
            "state_dim" | "action_dim" | "n_classes" | "n_episodes" | "n_expert_episodes" | "n_records" | "env_hash" => {
                fields.insert(key, (*off, rest));
            }
            _ => return Err(fmt_err(*off, format!("unknown header line `{line}`"))),
        }
    }
    let num = |k: &str| -> Result<usize> {
        let (off, v) = fields.get(k).ok_or_else(|| fmt_err(0, format!("header lacks `{k}`")))?;
        v.parse().map_err(|_| fmt_err(*off, format!("`{k}` = `{v}` is not a count")))
    };
    for (k, want) in [("state_dim", STATE_DIM), ("action_dim", ACTION_DIM)] {
        if num(k)? != want {
            return Err(fmt_err(fields[k].0, format!("{k} {} unsupported (expected {want})", num(k)?)));
        }
    }
    manifest.n_classes = num("n_classes")?;
    manifest.env_hash = fields.get("env_hash").map(|(_, v)| v.to_string()).unwrap_or_default();
    if manifest.env_hash == "-" {
        manifest.env_hash.clear();
    }
    let n_records = num("n_records")?;
    let n_episodes = num("n_episodes")?;
    let n_expert = num("n_expert_episodes")?;
    let payload = bytes.len() - pos;
    if payload != n_records * RECORD_STRIDE {
        return Err(fmt_err(
            pos,
            format!("payload is {payload} bytes; {n_records} records need {}", n_records * RECORD_STRIDE),
        ));
    }

    let mut episodes: Vec<Episode> = Vec::new();
    for i in 0..n_records {
        let off = pos + i * RECORD_STRIDE;
        let b = &bytes[off..off + RECORD_STRIDE];
        let id = u32::from_le_bytes(b[0..4].try_into().expect("4 bytes"));
        let t = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        let class = b[8] as usize;
        let f = |k: usize| f64::from_le_bytes(b[9 + 8 * k..17 + 8 * k].try_into().expect("8 bytes"));
        if class >= manifest.n_classes {
            return Err(fmt_err(off + 8, format!("record class {class} ≥ n_classes {}", manifest.n_classes)));
        }
        let rec = Record { t, s: [f(0), f(1)], a: [f(2), f(3)], s_next: [f(4), f(5)], r: f(6) };
        match episodes.last_mut() {
            Some(e) if e.id == id => {
                if e.class != class || rec.t != e.records.last().expect("nonempty").t + 1 {
                    return Err(fmt_err(off, format!("record breaks episode {id} continuity")));
                }
                e.records.push(rec);
            }
            _ => {
                if rec.t != 0 {
                    return Err(fmt_err(off, format!("episode {id} starts at t = {}", rec.t)));
                }
                episodes.push(Episode { id, class, records: vec![rec], latent: None });
            }
        }
    }
    if episodes.len() != n_episodes {
        return Err(fmt_err(pos, format!("header declares {n_episodes} episodes, records hold {}", episodes.len())));
    }
    if n_expert > n_episodes {
        return Err(fmt_err(pos, format!("n_expert_episodes {n_expert} > n_episodes {n_episodes}")));
    }
    let unlabeled = episodes.split_off(n_expert);
    Ok(SplitDataset { expert: episodes, unlabeled, manifest })
}

/// Writes the dataset and, when every episode carries latents, the `.latent` sidecar.
pub fn save(ds: &SplitDataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ds)).map_err(|e| Error::io(path, e))?;
    if ds.has_latents() {
        let mut out = format!("{LATENT_MAGIC}\nn_records {}\nend\n", ds.n_records()).into_bytes();
        for e in ds.all_episodes() {
            for u in e.latent.as_ref().expect("checked by has_latents") {
                out.extend_from_slice(&u[0].to_le_bytes());
                out.extend_from_slice(&u[1].to_le_bytes());
            }
        }
        let lp = latent_path(path);
        fs::write(&lp, out).map_err(|e| Error::io(lp, e))?;
    }
    Ok(())
}

/// Loads a dataset; the latent sidecar is not read (see [`load_latents`]).
pub fn load(path: &Path) -> Result<SplitDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads the ground-truth latent sidecar into `ds`; evaluation-only.
pub fn load_latents(ds: &mut SplitDataset, path: &Path) -> Result<()> {
    let lp = latent_path(path);
    let bytes = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
    let header = format!("{LATENT_MAGIC}\nn_records {}\nend\n", ds.n_records());
    if !bytes.starts_with(header.as_bytes()) {
        return Err(fmt_err(0, "latent sidecar header does not match the dataset"));
    }
    let body = &bytes[header.len()..];
    if body.len() != ds.n_records() * 16 {
        return Err(fmt_err(header.len(), format!("latent payload {} bytes, expected {}", body.len(), ds.n_records() * 16)));
    }
    let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for e in ds.expert.iter_mut().chain(ds.unlabeled.iter_mut()) {
        let n = e.records.len();
        e.latent = Some((0..n).map(|_| [vals.next().expect("sized"), vals.next().expect("sized")]).collect());
    }
    Ok(())
}
