//! Rollout evaluation and the summary statistics used in reports.

mod common;

use common::*;
use oilca::agents::Policy;
use oilca::config::RunConfig;
use oilca::datagen::{BehaviorKind, BehaviorPolicy};
use oilca::evaluate::{evaluate_policy, mean, report_csv, spearman, stderr, sweep_csv, EvalReport, SweepRow};
use oilca::numkit::rng::{SeedTree, Stage};
use oilca::numkit::Rng;
use oilca::toyenv::{EnvParams, EnvSpec, ToyEnv, Vec2};
use proptest::prelude::*;

fn env(len: usize) -> ToyEnv {
    ToyEnv::new(EnvSpec::generate(&EnvParams { episode_len: len, ..Default::default() }).unwrap()).unwrap()
}

#[test]
fn greedy_behavior_beats_uniform_behavior() {
    let env = env(200);
    let run = |kind| {
        let p = BehaviorPolicy { kind, eps: 0.3, step_size: 1.0, target: [0.0, 0.0] };
        let actor = move |s: Vec2, r: &mut Rng| p.act(s, r);
        (0..60).map(|i| env.rollout_return(&actor, i % 3, &mut rng(i as u64)).unwrap()).sum::<f64>() / 60.0
    };
    let (g, u) = (run(BehaviorKind::Greedy), run(BehaviorKind::Uniform));
    assert!(g > u, "greedy {g} vs uniform {u}");
}

#[test]
fn evaluation_cycles_classes_on_per_episode_streams() {
    let env = env(50);
    let policy = Policy::new(tiny_net(), &mut rng(1));
    let tree = SeedTree::new(9);
    let got = evaluate_policy(&policy, &env, 7, &tree).unwrap();
    let actor = |s: Vec2, _: &mut Rng| policy.act_mean(s);
    for (i, g) in got.iter().enumerate() {
        let want = env.rollout_return(&actor, i % 3, &mut tree.stream(Stage::Eval, i as u64)).unwrap();
        assert_eq!(*g, want);
    }
    assert_eq!(evaluate_policy(&policy, &env, 7, &tree).unwrap(), got);
    assert_eq!(evaluate_policy(&policy, &env, 1, &tree).unwrap(), got[..1].to_vec());
    assert!(evaluate_policy(&policy, &env, 0, &tree).is_err());
}

#[test]
fn standard_error_known_values() {
    assert_eq!(stderr(&[3.0]), 0.0);
    assert!((stderr(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    let sd = (32.0f64 / 7.0).sqrt();
    assert!((stderr(&xs) - sd / 8f64.sqrt()).abs() < 1e-14);
    assert_eq!(mean(&xs), 5.0);
}

#[test]
fn spearman_with_ties_matches_pearson_of_average_ranks() {
    let xs = [1.0, 2.0, 2.0, 3.0, 5.0];
    let ys = [10.0, 30.0, 20.0, 20.0, 50.0];
    let (rx, ry) = ([1.0, 2.5, 2.5, 4.0, 5.0], [1.0, 4.0, 2.5, 2.5, 5.0]);
    let m = 3.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let vx: f64 = rx.iter().map(|a| (a - m) * (a - m)).sum();
    let vy: f64 = ry.iter().map(|b| (b - m) * (b - m)).sum();
    assert!((spearman(&xs, &ys) - cov / (vx * vy).sqrt()).abs() < 1e-14);
}

#[test]
fn csv_layouts() {
    let cfg = RunConfig::default();
    let r = EvalReport::new("oilca", vec![(0, -10.0, 1.0), (1, -12.0, 1.5)], &cfg);
    assert_eq!(r.mean, -11.0);
    assert!((r.stderr - 1.0).abs() < 1e-15);
    let csv = report_csv(&[r]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,seed,mean_return,stderr,n_episodes,config_hash"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], &["oilca", "0", "-10.000000", "1.000000"]);
    assert_eq!(row[5], cfg.hash());
    let sweep = sweep_csv(&[SweepRow { ratio_pct: 30.0, mean_return: -5.0, stderr: 0.5, n_seeds: 5 }]);
    assert!(sweep.starts_with("ratio_pct,mean_return,stderr,n_seeds\n"));
}

proptest! {
    #[test]
    fn spearman_without_ties_matches_the_rank_difference_formula(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(), noise in proptest::collection::vec(0.0f64..0.4, 12)) {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 + noise[i]).collect();
        let ys: Vec<f64> = perm.iter().map(|&p| (p as f64).powi(3)).collect();
        let n = 12.0;
        let d2: f64 = perm.iter().enumerate().map(|(i, &p)| (i as f64 - p as f64).powi(2)).sum();
        let want = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        prop_assert!((spearman(&xs, &ys) - want).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(xs in proptest::collection::vec(-100.0f64..100.0, 3..30), k in 0.1f64..5.0) {
        let ys: Vec<f64> = xs.iter().map(|x| (x * k).exp().ln_1p()).collect();
        let s = spearman(&xs, &ys);
        prop_assume!(s.is_finite());
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
}
