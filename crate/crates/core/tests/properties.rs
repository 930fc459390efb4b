use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sec_core::numcore::{kmeans, nuclear_norm, svd, Matrix};
use sec_core::policy::{HeadKind, PolicyParams, PolicyShape, Tape};
use sec_core::select::{half_mean_pairwise, select_encoded, CentroidBank, LevelCentroids};
use sec_core::simenv::{Env, EnvAction, SimConfig, World};
use sec_core::stratify::{retention_score, stratify, Action, ActionTargets, RetentionMode, Step, Trajectory};
use sec_core::train::{adam_step, total_loss, AdamState, LevelBatch, TrainConfig};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(rows in 2usize..=16, cols in 2usize..=16, seed: u64) {
        let a = random_matrix(rows, cols, seed);
        let d = svd(&a).unwrap();
        prop_assert!(max_abs_diff(&d.reconstruct(), &a) < 1e-10);
        let r = d.singular_values.len();
        let utu = d.u.t_matmul(&d.u).unwrap();
        let vtv = d.v.t_matmul(&d.v).unwrap();
        prop_assert!(max_abs_diff(&utu, &Matrix::identity(r)) < 1e-10);
        prop_assert!(max_abs_diff(&vtv, &Matrix::identity(r)) < 1e-10);
        prop_assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(d.singular_values.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn nuclear_norm_dominates_frobenius(rows in 2usize..=12, cols in 2usize..=12, seed: u64) {
        let a = random_matrix(rows, cols, seed);
        let f = a.frobenius_norm();
        prop_assert!(nuclear_norm(&a).unwrap() > f * (1.0 + 1e-9));

        let u = random_matrix(rows, 1, seed ^ 1);
        let v = random_matrix(1, cols, seed ^ 2);
        let rank1 = u.matmul(&v).unwrap();
        let n1 = nuclear_norm(&rank1).unwrap();
        prop_assert!((n1 - rank1.frobenius_norm()).abs() <= 1e-10 * n1.max(1.0));
    }

    #[test]
    fn kmeans_inertia_never_increases(n in 8usize..80, c in 1usize..6, seed: u64) {
        let points = random_matrix(n, 3, seed);
        let m = kmeans(&points, c, seed).unwrap();
        for w in m.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        prop_assert!(m.assignments.iter().all(|&a| a < c));
    }
}

fn shape(levels: usize, head: HeadKind) -> PolicyShape {
    PolicyShape {
        state_dim: 5,
        hidden_dim: 6,
        output_dim: 4,
        levels,
        head,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn discrete_rows_are_distributions(seed: u64, rows in 1usize..20, scale in 0.1f64..50.0) {
        let p = PolicyParams::init(shape(2, HeadKind::Discrete), seed).unwrap();
        let s = random_matrix(rows, 5, seed ^ 7).scale(scale);
        for level in 1..=2 {
            let out = p.forward(&s, level, &mut Tape::default()).unwrap();
            for r in 0..rows {
                let row = out.row(r);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed: u64, rows in 1usize..10) {
        let p = PolicyParams::init(shape(3, HeadKind::Continuous), seed).unwrap();
        let s = random_matrix(rows, 5, seed ^ 3);
        let a = p.forward(&s, 2, &mut Tape::default()).unwrap();
        let b = p.clone().forward(&s, 2, &mut Tape::default()).unwrap();
        prop_assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn one_level_step_leaves_other_predictors_untouched(seed: u64, level in 0usize..3, lambda in 0.0f64..0.5) {
        let mut p = PolicyParams::init(shape(3, HeadKind::Continuous), seed).unwrap();
        let before = p.clone();
        let cfg = TrainConfig { lambda, learning_rate: 1e-2, ..TrainConfig::default() };
        let batches: Vec<Option<LevelBatch>> = (0..3)
            .map(|k| (k == level).then(|| LevelBatch {
                states: random_matrix(8, 5, seed ^ 11),
                targets: ActionTargets::Continuous(random_matrix(8, 4, seed ^ 13)),
            }))
            .collect();
        let (_, grads) = total_loss(&p, &batches, &cfg).unwrap();
        let mut adam = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut adam, &cfg).unwrap();
        prop_assert_ne!(&p.encoder, &before.encoder);
        prop_assert_ne!(&p.predictors[level], &before.predictors[level]);
        for j in (0..3).filter(|&j| j != level) {
            prop_assert_eq!(&p.predictors[j], &before.predictors[j]);
        }
    }

    #[test]
    fn total_loss_accounts_and_weights_aer_monotonically(seed: u64, l1 in 0.001f64..1.0, bump in 0.001f64..1.0, discrete: bool) {
        let head = if discrete { HeadKind::Discrete } else { HeadKind::Continuous };
        let p = PolicyParams::init(shape(2, head), seed).unwrap();
        let batches: Vec<Option<LevelBatch>> = (0..2u64)
            .map(|k| Some(LevelBatch {
                states: random_matrix(6, 5, seed ^ (20 + k)),
                targets: if discrete {
                    ActionTargets::Discrete((0..6).map(|i| (i + k as usize) % 4).collect())
                } else {
                    ActionTargets::Continuous(random_matrix(6, 4, seed ^ (30 + k)))
                },
            }))
            .collect();
        let kind = if discrete { HeadKind::Discrete } else { HeadKind::Continuous };
        let at = |lambda: f64| {
            let cfg = TrainConfig { lambda, action_kind: kind, n_classes: 4, ..TrainConfig::default() };
            total_loss(&p, &batches, &cfg).unwrap().0
        };
        let (a, b) = (at(l1), at(l1 + bump));
        for r in [&a, &b] {
            let sum: f64 = r.levels.iter().map(|l| l.total).sum();
            prop_assert!((r.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
            for l in &r.levels {
                prop_assert!((l.total - (l.bc + r.lambda * l.aer)).abs() <= 1e-12 * l.total.abs().max(1.0));
            }
        }
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            prop_assert_eq!(la.bc, lb.bc);
            prop_assert_eq!(la.aer, lb.aer);
            prop_assert!(la.aer < 0.0);
            prop_assert!((l1 + bump) * lb.aer < l1 * la.aer);
        }
    }
}

fn trajectory(id: usize, gaps: &[f64]) -> Trajectory {
    let mut signals = BTreeMap::new();
    signals.insert("click".to_string(), 1.0);
    Trajectory {
        user_id: format!("u{id:04}"),
        steps: (0..2)
            .map(|s| Step {
                state: vec![id as f64, s as f64],
                action: Action::Continuous(vec![s as f64]),
                signals: signals.clone(),
            })
            .collect(),
        return_times: gaps.to_vec(),
        active_days: gaps.len() as u32,
    }
}

fn population() -> impl Strategy<Value = Vec<Trajectory>> {
    prop::collection::vec(prop::collection::vec(1u8..6, 1..4), 3..60).prop_map(|users| {
        users
            .iter()
            .enumerate()
            .map(|(i, g)| trajectory(i, &g.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn levels_partition_experts_and_are_monotone(ts in population(), k in 1usize..4, shuffle_seed: u64) {
        prop_assume!(ts.len() >= k);
        let refs: Vec<&Trajectory> = ts.iter().collect();
        let ds = stratify(&refs, k, RetentionMode::ReturnTime).unwrap();

        let mut seen: Vec<&String> = ds.levels.iter().flat_map(|l| &l.users).collect();
        seen.sort();
        let mut all: Vec<&String> = ts.iter().map(|t| &t.user_id).collect();
        all.sort();
        prop_assert_eq!(seen, all);
        prop_assert_eq!(ds.levels.iter().map(|l| l.len()).sum::<usize>(), ts.iter().map(|t| t.steps.len()).sum::<usize>());

        let score = |id: &String| retention_score(ts.iter().find(|t| &t.user_id == id).unwrap(), RetentionMode::ReturnTime).unwrap();
        for w in ds.levels.windows(2) {
            let lo = w[0].users.iter().map(score).fold(f64::INFINITY, f64::min);
            let hi = w[1].users.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
            if !w[0].users.is_empty() && !w[1].users.is_empty() {
                prop_assert!(lo > hi, "ties must all sit in the better level");
            }
        }

        let mut shuffled = refs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let again = stratify(&shuffled, k, RetentionMode::ReturnTime).unwrap();
        prop_assert_eq!(again.level_of_user, ds.level_of_user);
        prop_assert_eq!(again.levels, ds.levels);
    }
}

fn bank(seed: u64, k: usize, c: usize, dim: usize) -> CentroidBank {
    let levels = (0..k)
        .map(|l| {
            let centroids = random_matrix(c, dim, seed ^ (l as u64 + 1));
            let delta = half_mean_pairwise(&centroids);
            LevelCentroids { centroids, delta }
        })
        .collect();
    CentroidBank::new(levels, None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn selection_caps_qualifies_and_is_scale_free(seed: u64, k in 1usize..5, r in 0usize..5, exp in -8i32..8) {
        let r_h = r % k + 1;
        let b = bank(seed, k, 4, 3);
        let h: Vec<f64> = random_matrix(1, 3, seed ^ 99).row(0).iter().map(|x| x * 1.2).collect();
        let t = select_encoded(&h, &b, r_h).unwrap();
        prop_assert!(t.final_level <= r_h);
        prop_assert_eq!(t.final_level, t.chosen_pre_cap.min(r_h));
        if !t.fallback_used {
            let pre = t.chosen_pre_cap - 1;
            prop_assert!(t.distances[pre] <= b.levels[pre].delta);
            for j in 0..pre {
                prop_assert!(t.distances[j] > b.levels[j].delta);
            }
        } else {
            prop_assert!(t.distances.iter().zip(&b.levels).all(|(d, l)| *d > l.delta));
        }
        prop_assert_eq!(&select_encoded(&h, &b, r_h).unwrap(), &t);

        let f = 2f64.powi(exp);
        let scaled = CentroidBank::new(
            b.levels
                .iter()
                .map(|l| {
                    let centroids = l.centroids.scale(f);
                    let delta = half_mean_pairwise(&centroids);
                    LevelCentroids { centroids, delta }
                })
                .collect(),
            None,
        );
        let hs: Vec<f64> = h.iter().map(|x| x * f).collect();
        let ts = select_encoded(&hs, &scaled, r_h).unwrap();
        prop_assert_eq!(ts.chosen_pre_cap, t.chosen_pre_cap);
        prop_assert_eq!(ts.fallback_used, t.fallback_used);
        for (a, b) in ts.distances.iter().zip(&t.distances) {
            prop_assert!((a - b * f).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulator_rates_stay_in_range(seed: u64, scale in 0.0f64..20.0) {
        let cfg = SimConfig { n_users: 4, seed, ..SimConfig::default() };
        let world = World::new(&cfg).unwrap();
        let users = world.sample_users(&cfg, 4, seed, "p");
        let mut env = Env::new(&cfg, world, users).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        for u in 0..4 {
            while !env.user(u).unwrap().is_finished() {
                env.begin_session(u).unwrap();
                loop {
                    let a: Vec<f64> = (0..cfg.action_dim).map(|_| rng.random_range(-scale..=scale)).collect();
                    let o = env.step(u, EnvAction::Vector(a)).unwrap();
                    for p in [o.click_prob, o.long_view_prob, o.like_prob, o.novelty, o.gain] {
                        prop_assert!((0.0..=1.0).contains(&p));
                    }
                    if o.leave {
                        break;
                    }
                }
                prop_assert!(env.end_of_session(u).unwrap() >= 1.0);
            }
        }
    }

    #[test]
    fn mean_gap_never_rises_with_satisfaction(a in 0.0f64..1.0, b in 0.0f64..1.0, loyalty in -0.2f64..0.2) {
        let cfg = SimConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(Env::mean_gap(&cfg, hi, loyalty) <= Env::mean_gap(&cfg, lo, loyalty));
        prop_assert!(Env::mean_gap(&cfg, lo, loyalty) >= 1.0);
    }
}
