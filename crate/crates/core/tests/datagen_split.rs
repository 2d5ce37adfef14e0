//! Collection and expert/unlabeled split semantics.

mod common;

use std::collections::BTreeSet;

use common::rng;
use oilca::config::RunConfig;
use oilca::datagen::{label_split, Episode, Record};
use oilca::pipeline::Pipeline;
use proptest::prelude::*;

#[test]
fn split_of_three_thousand_episodes() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.env.n_classes * cfg.datagen.episodes_per_class, 3000);
    let pipe = Pipeline::new(&cfg, 0).unwrap();
    let ds = pipe.gen_data().unwrap();

    let e_ids: BTreeSet<u32> = ds.expert.iter().map(|e| e.id).collect();
    let u_ids: BTreeSet<u32> = ds.unlabeled.iter().map(|e| e.id).collect();
    assert!(e_ids.is_disjoint(&u_ids));
    assert_eq!(e_ids.len() + u_ids.len(), 3000);
    assert_eq!(e_ids.union(&u_ids).copied().collect::<Vec<_>>(), (0..3000).collect::<Vec<_>>());

    let mut returns: Vec<f64> = ds.all_episodes().map(Episode::ret).collect();
    returns.sort_by(|a, b| b.total_cmp(a));
    let threshold = returns[599];
    assert!(ds.expert.iter().all(|e| e.ret() >= threshold));
    let mean = |v: &[Episode]| v.iter().map(Episode::ret).sum::<f64>() / v.len() as f64;
    assert!(mean(&ds.expert) > mean(&ds.unlabeled), "{} vs {}", mean(&ds.expert), mean(&ds.unlabeled));

    let expected = 0.2 * 0.1 * 3000.0;
    let sigma = (600.0f64 * 0.1 * 0.9).sqrt();
    let got = ds.expert.len() as f64;
    assert!((got - expected).abs() <= 3.0 * sigma, "|D_E| = {got}, expected {expected} ± {}", 3.0 * sigma);

    for e in ds.all_episodes() {
        assert_eq!(e.records.len(), cfg.env.episode_len);
        for (t, r) in e.records.iter().enumerate() {
            assert_eq!(r.t as usize, t);
            assert!(pipe.env.spec.contains(r.s));
        }
        for w in e.records.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
    }
}

fn one_step(id: u32, ret: f64) -> Episode {
    Episode { id, class: 0, records: vec![Record { t: 0, s: [0.0, 0.0], a: [1.0, 0.0], s_next: [1.0, 0.0], r: ret }], latent: None }
}

proptest! {
    #[test]
    fn split_partitions_and_respects_threshold(
        returns in proptest::collection::vec(-50i32..0, 5..200), top in 0.05f64..0.95, p in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let eps: Vec<_> = returns.iter().enumerate().map(|(i, &r)| one_step(i as u32, r as f64)).collect();
        let ds = label_split(eps, top, p, &mut rng(seed)).unwrap();
        let n = returns.len();
        prop_assert_eq!(ds.expert.len() + ds.unlabeled.len(), n);
        let mut ids: Vec<u32> = ds.all_episodes().map(|e| e.id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n as u32).collect::<Vec<_>>());
        let k = ((top * n as f64).round() as usize).clamp(1, n - 1);
        let mut sorted: Vec<f64> = returns.iter().map(|&r| r as f64).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assert!(ds.expert.len() <= k);
        prop_assert!(ds.expert.iter().all(|e| e.ret() >= sorted[k - 1]));
        if p == 1.0 {
            prop_assert_eq!(ds.expert.len(), k);
        }
    }
}
