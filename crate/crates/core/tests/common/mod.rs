#![allow(dead_code)]

use oilca::agents::{NetConfig, SaBatch};
use oilca::ivae::TransitionBatch;
use oilca::numkit::rng::standard_normal;
use oilca::numkit::{Rng, Tensor2};
use rand::{Rng as _, SeedableRng};

/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between `grads` and central differences of `loss` over every
/// parameter entry exposed by `params_mut`.
pub fn fd_relative_error<M: Clone>(
    model: &M,
    grads: &[Tensor2],
    params_mut: impl Fn(&mut M) -> Vec<&mut Tensor2>,
    loss: impl Fn(&M) -> f64,
    h: f64,
) -> f64 {
    let mut work = model.clone();
    let shapes: Vec<usize> = params_mut(&mut work).iter().map(|t| t.len()).collect();
    assert_eq!(shapes.len(), grads.len(), "gradient count");
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (k, &len) in shapes.iter().enumerate() {
        assert_eq!(grads[k].len(), len, "gradient shape {k}");
        for j in 0..len {
            let mut plus = model.clone();
            params_mut(&mut plus)[k].data_mut()[j] += h;
            let mut minus = model.clone();
            params_mut(&mut minus)[k].data_mut()[j] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let ad = grads[k].data()[j];
            diff += (ad - fd).powi(2);
            na += ad * ad;
            nf += fd * fd;
        }
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300)
}

pub fn tiny_net() -> NetConfig {
    NetConfig { hidden: 5, hidden_layers: 2, state_scale: 0.1 }
}

pub fn random_sa(n: usize, rng: &mut Rng) -> SaBatch {
    let pairs: Vec<_> = (0..n)
        .map(|_| {
            let s = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let a = [standard_normal(rng), standard_normal(rng)];
            (s, a)
        })
        .collect();
    SaBatch::from_pairs(&pairs).unwrap()
}

pub fn random_transitions(n: usize, n_classes: usize, rng: &mut Rng) -> TransitionBatch {
    let rows: Vec<_> = (0..n)
        .map(|_| {
            let s = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let sn = [s[0] + a[0] + 0.3 * standard_normal(rng), s[1] + a[1] + 0.3 * standard_normal(rng)];
            (s, a, sn, rng.gen_range(0..n_classes))
        })
        .collect();
    TransitionBatch::from_rows(&rows).unwrap()
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Re-evaluates an MLP one scalar at a time from its raw weights.
pub fn scalar_mlp(net: &oilca::numkit::Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in net.layers() {
        let mut next = Vec::with_capacity(l.weight.cols());
        for o in 0..l.weight.cols() {
            let mut z = l.bias.get(0, o);
            for (p, hv) in h.iter().enumerate() {
                z += hv * l.weight.get(p, o);
            }
            next.push(match l.activation.name() {
                "tanh" => z.tanh(),
                "identity" => z,
                other => panic!("oracle does not model activation {other}"),
            });
        }
        h = next;
    }
    h
}

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `log N(x; m, exp(lv))` for one coordinate.
pub fn scalar_logpdf(x: f64, m: f64, lv: f64) -> f64 {
    -0.5 * ((x - m).powi(2) / lv.exp() + lv) - HALF_LN_2PI
}

pub mod checks;
