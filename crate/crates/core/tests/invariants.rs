use pie_ope::deepsets::{Architecture, PieModel, RegionFeature};
use pie_ope::ope::FoldPlan;
use pie_ope::rng::{rng_from_seed, Rng};
use pie_ope::sim_dynamic::{advance, draw_orders, init_dynamic_env, transition_drivers, transition_flows, EnvConfig};
use pie_ope::sim_nondynamic::{gen_nondynamic, NondynamicConfig, Setting};
use pie_ope::spatial::{Adjacency, Grid};
use proptest::prelude::*;
use rand::Rng as _;

fn adjacency(queen: bool) -> Adjacency {
    if queen {
        Adjacency::Queen
    } else {
        Adjacency::Rook
    }
}

fn random_state(r: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = (0..r).map(|_| rng.random_range(0.0..300.0)).collect();
    let o = (0..r).map(|_| rng.random_range(0.0..300.0)).collect();
    let c = (0..r).map(|_| rng.random_range(0.1..1.0)).collect();
    (d, o, c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_neighbors_are_symmetric(l in 1usize..7, queen: bool, torus: bool) {
        prop_assume!(!torus || l >= 3);
        let g = Grid::build(l, adjacency(queen), torus).unwrap();
        for i in 0..g.n_regions() {
            prop_assert!(!g.neighbors[i].contains(&i));
            for &j in &g.neighbors[i] {
                prop_assert!(g.neighbors[j].contains(&i));
            }
        }
    }

    #[test]
    fn flows_net_to_zero_and_drivers_stay_nonnegative(l in 2usize..7, queen: bool, seed: u64) {
        let g = Grid::new(l, adjacency(queen)).unwrap();
        let (d, o, c) = random_state(g.n_regions(), &mut rng_from_seed(seed));
        let v = transition_flows(&d, &o, &c, &g);
        let scale: f64 = v.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!(v.iter().sum::<f64>().abs() <= 1e-12 * scale);
        prop_assert!(transition_drivers(&d, &o, &c, &g).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn torus_update_conserves_drivers(l in 3usize..7, queen: bool, seed: u64) {
        let g = Grid::torus(l, adjacency(queen)).unwrap();
        let (d, o, c) = random_state(g.n_regions(), &mut rng_from_seed(seed));
        let v = transition_flows(&d, &o, &c, &g);
        let before: f64 = d.iter().sum();
        let after: f64 = d.iter().zip(&v).enumerate().map(|(i, (d, v))| d + v / g.degree(i) as f64).sum();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
    }

    #[test]
    fn simulator_state_stays_in_range(l in 2usize..5, seed: u64, env_seed in 0u64..50) {
        let cfg = EnvConfig::new(l, 8, 1, 0.9, env_seed);
        let g = cfg.grid().unwrap();
        let mut state = init_dynamic_env(&cfg).unwrap();
        let mut rng = rng_from_seed(seed);
        for _ in 0..cfg.horizon {
            prop_assert!(state.connectivity.iter().all(|c| (0.1..=1.0).contains(c)));
            prop_assert!(state.mismatch.iter().all(|m| (0.0..=1.0).contains(m)));
            prop_assert!(state.drivers.iter().all(|&d| d >= 0.0));
            let orders = draw_orders(&state, &mut rng);
            let actions: Vec<u8> = (0..g.n_regions()).map(|_| rng.random_bool(0.5) as u8).collect();
            let (next, rewards) = advance(&cfg, &state, &orders, &actions, &g);
            prop_assert!(rewards.iter().all(|y| y.is_finite()));
            state = next;
        }
    }

    #[test]
    fn fold_plan_partitions_days(n in 2usize..200, m in 2usize..10) {
        prop_assume!(m <= n);
        let plan = FoldPlan::new(n, m).unwrap();
        let mut seen = vec![0; n];
        let mut sizes = Vec::new();
        for b in 0..m {
            let eval = plan.eval_days(b);
            sizes.push(eval.len());
            for &d in &eval {
                seen[d] += 1;
            }
            prop_assert_eq!(eval.len() + plan.train_days(b).len(), n);
        }
        prop_assert!(seen.iter().all(|&k| k == 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pie_output_ignores_neighbor_order(seed: u64, k in 1usize..8, shift in 0usize..8) {
        let arch = Architecture { hidden: 6, depth: 2, d_emb: 3 };
        let model = PieModel::new(2, arch, seed).unwrap();
        let mut rng = rng_from_seed(seed ^ 0x5eed);
        let mut feat = || RegionFeature::new(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], rng.random_range(0..2) as f64);
        let center = feat();
        let mut nbrs: Vec<_> = (0..k).map(|_| feat()).collect();
        let y = model.forward(&center, &nbrs).unwrap();
        nbrs.rotate_left(shift % k);
        nbrs.reverse();
        let z = model.forward(&center, &nbrs).unwrap();
        prop_assert!((y - z).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn nondynamic_data_has_consistent_shapes() {
    for setting in [Setting::Linear, Setting::Nonlinear1, Setting::Nonlinear2] {
        let d = gen_nondynamic(&NondynamicConfig::new(4, 7, setting, 3)).unwrap();
        assert_eq!((d.x.len(), d.a.len(), d.y.len()), (16, 16, 16));
        assert!(d.a.iter().flatten().all(|&a| a <= 1));
        assert!(d.x.iter().all(|r| r.len() == 7 && r.iter().all(|x| x.iter().all(|v| v.is_finite()))));
        assert_eq!(d, gen_nondynamic(&NondynamicConfig::new(4, 7, setting, 3)).unwrap());
    }
}

#[test]
fn fold_plan_rejects_degenerate_splits() {
    assert!(FoldPlan::new(10, 1).is_err());
    assert!(FoldPlan::new(3, 4).is_err());
}
