use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rntn::baselines::{cross_stitch_forward, soft_mixture_forward};
use rntn::rl::{returns, simplex_projection, wpl_update, WplState, WplVariant};
use rntn::routing::{FixedRouter, Step};
use rntn::tensor::{Graph, ParamStore};
use rntn::{
    route_forward, Action, BlockRegistry, Policy, PolicyKind, RoutingState, SelectMode,
    TabularPolicy, Tensor, Topology, Trace,
};

fn step(depth: usize, a: usize, reward: f64) -> Step {
    Step {
        state: RoutingState {
            v: Tensor::vector(vec![0.0]),
            t: 0,
            i: depth,
        },
        action: Action::block(depth - 1, a),
        action_index: a,
        agent: 0,
        value: 0.0,
        probs: vec![],
        reward,
    }
}

fn trace(rewards: &[f64], r_final: f64, actions: &[usize]) -> Trace {
    Trace {
        steps: rewards
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(i, (&r, &a))| step(i + 1, a, r))
            .collect(),
        r_final,
        prediction: Tensor::vector(vec![0.0]),
        dispatch: None,
    }
}

proptest! {
    #[test]
    fn projection_lands_on_simplex(v in prop::collection::vec(-3.0f64..3.0, 1..12)) {
        let p = simplex_projection(&v);
        prop_assert_eq!(p.len(), v.len());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        // monotone: larger raw entries never get less mass
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] >= v[j] {
                    prop_assert!(p[i] >= p[j] - 1e-15);
                }
            }
        }
    }

    #[test]
    fn projection_fixes_distributions(w in prop::collection::vec(0.01f64..1.0, 1..10)) {
        let s: f64 = w.iter().sum();
        let d: Vec<f64> = w.iter().map(|x| x / s).collect();
        for (a, b) in simplex_projection(&d).iter().zip(&d) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn returns_match_direct_sum(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..6),
        r_final in -1.0f64..1.0,
        gamma in 0.0f64..=1.0,
    ) {
        let actions = vec![0; rewards.len()];
        let got = returns(&trace(&rewards, r_final, &actions), gamma);
        for i in 0..rewards.len() {
            let want = r_final
                + (i..rewards.len()).map(|j| gamma.powi((j - i) as i32) * rewards[j]).sum::<f64>();
            prop_assert!((got[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn wpl_keeps_rows_on_simplex(
        updates in prop::collection::vec((0usize..3, -1.0f64..1.0), 1..40),
        a4 in any::<bool>(),
    ) {
        let variant = if a4 { WplVariant::AppendixA4 } else { WplVariant::Algorithm3 };
        let mut policy = Policy::Tabular(TabularPolicy::new(PolicyKind::Pg, &[3]));
        let mut st = WplState::new(0.2, 1.0, variant);
        for (a, r) in updates {
            wpl_update(&trace(&[0.0], r, &[a]), &mut policy, &mut st).unwrap();
            let Policy::Tabular(t) = &policy else { unreachable!() };
            prop_assert!((t.rows[0].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(t.rows[0].iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn wpl_with_zero_rate_is_inert(a in 0usize..3, r in -1.0f64..1.0) {
        let mut policy = Policy::Tabular(TabularPolicy {
            kind: PolicyKind::Pg,
            rows: vec![vec![0.2, 0.3, 0.5]],
        });
        let mut st = WplState::new(0.0, 1.0, WplVariant::AppendixA4);
        wpl_update(&trace(&[0.0], r, &[a]), &mut policy, &mut st).unwrap();
        let Policy::Tabular(t) = &policy else { unreachable!() };
        prop_assert_eq!(&t.rows[0], &vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn soft_mixture_is_permutation_equivariant(
        outs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..5),
        logits_seed in prop::collection::vec(-2.0f64..2.0, 5),
        shift in 1usize..4,
    ) {
        let k = outs.len();
        let logits = &logits_seed[..k];
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let run = |g: &mut Graph<'_>, order: &[usize]| {
            let nodes: Vec<_> = order.iter().map(|&i| g.input(Tensor::vector(outs[i].clone()))).collect();
            let l = g.input(Tensor::vector(order.iter().map(|&i| logits[i]).collect()));
            let y = soft_mixture_forward(g, &nodes, l).unwrap();
            g.value(y).data().to_vec()
        };
        let base = run(&mut g, &(0..k).collect::<Vec<_>>());
        let permuted = run(&mut g, &perm);
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_stitch_is_linear(
        xs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 3),
        w in prop::collection::vec(-1.0f64..1.0, 9),
        c in -2.0f64..2.0,
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let wn = g.input(Tensor::new(vec![3, 3], w.clone()).unwrap());
        let run = |g: &mut Graph<'_>, scale: f64| {
            let nodes: Vec<_> = xs
                .iter()
                .map(|x| g.input(Tensor::vector(x.iter().map(|v| v * scale).collect())))
                .collect();
            cross_stitch_forward(g, &nodes, wn)
                .unwrap()
                .into_iter()
                .map(|n| g.value(n).data().to_vec())
                .collect::<Vec<_>>()
        };
        let one = run(&mut g, 1.0);
        let scaled = run(&mut g, c);
        for i in 0..3 {
            for d in 0..2 {
                let want: f64 = (0..3).map(|j| w[i * 3 + j] * xs[j][d]).sum();
                prop_assert!((one[i][d] - want).abs() <= 1e-12);
                prop_assert!((scaled[i][d] - c * want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn routes_take_one_decision_per_depth(seed in 0u64..500, k in 1usize..4, pass in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let reg = BlockRegistry::new(Topology::layered(&[3, 3, 3, 2], k, pass), &mut store, &mut rng).unwrap();
        let actions: Vec<Action> = (1..=3)
            .map(|d| {
                let legal = reg.legal_actions(d).unwrap();
                legal[(seed as usize + d) % legal.len()]
            })
            .collect();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::vector(vec![0.1, -0.4, 0.7]));
        let out = route_forward(&mut g, &reg, x, 0, &FixedRouter { actions: actions.clone() }, SelectMode::Greedy, &mut rng).unwrap();
        prop_assert_eq!(out.trace.steps.len(), 3);
        prop_assert_eq!(out.trace.actions(), actions);
        for (i, s) in out.trace.steps.iter().enumerate() {
            prop_assert_eq!(s.state.i, i + 1);
        }
        prop_assert_eq!(out.trace.prediction.len(), 2);
    }
}
