use proptest::prelude::*;

use prefgrid::analysis::{loop_analysis, LoopSign};
use prefgrid::dp::{greedy_policy, value_iteration, Policy, SolverConfig};
use prefgrid::gridworld::{
    generate_mdp_100, generate_mdp_90, CellKind, GridSpec, Mdp, MdpClass90, DEFAULT_GAMMA,
    N_ACTIONS,
};
use prefgrid::learner::{dataset_loss, loss_gradient, train, GTable, TrainConfig};
use prefgrid::policies::{
    greedy_advantage_policy, policy_via_reward, q_learning, shifted_reward, QLearnConfig,
};
use prefgrid::preferences::{
    augment_reverse, build_dataset, pref_prob_general, sample_segment, segment_regret, Label,
    LabelNoise, PreferenceModel,
};
use prefgrid::seed;

fn spec_100(s: u64) -> GridSpec {
    generate_mdp_100(&mut seed::stream(s))
}

fn mdp_100(s: u64, absorbing: bool) -> Mdp {
    spec_100(s).compile(absorbing, DEFAULT_GAMMA).unwrap()
}

fn solve(mdp: &Mdp, reward: &[f64], gamma: f64) -> prefgrid::dp::ValueBundle {
    value_iteration(mdp, reward, gamma, &SolverConfig::default()).unwrap()
}

fn random_table(mdp: &Mdp, s: u64, scale: f64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seed::stream(s);
    (0..mdp.n_states() * N_ACTIONS)
        .map(|_| rng.gen_range(-scale..scale))
        .collect()
}

/// All actions attaining the row maximum.
fn argmax_set(row: &[f64], tol: f64) -> Vec<usize> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..row.len()).filter(|&a| row[a] >= m - tol).collect()
}

fn floor_counts(n: usize, pcts: &[usize]) -> Vec<usize> {
    pcts.iter().map(|p| p * n / 100).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn compiled_transitions_follow_the_grid(s in any::<u64>(), absorbing in any::<bool>()) {
        let spec = spec_100(s);
        let mdp = spec.compile(absorbing, DEFAULT_GAMMA).unwrap();
        let (h, w) = (spec.height, spec.width);
        prop_assert_eq!(mdp.n_states(), h * w + usize::from(absorbing));
        let moves = [(-1isize, 0isize), (0, 1), (1, 0), (0, -1)];
        for cell in 0..h * w {
            for (a, (dr, dc)) in moves.iter().enumerate() {
                let next = mdp.next(cell, a);
                prop_assert!(next < mdp.n_states());
                if spec.cells[cell].is_terminal() {
                    if absorbing {
                        prop_assert_eq!(next, h * w);
                    }
                    prop_assert_eq!(mdp.reward(cell, a), 0.0);
                    continue;
                }
                let (r, c) = ((cell / w) as isize + dr, (cell % w) as isize + dc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    prop_assert_eq!(next, cell);
                    prop_assert_eq!(mdp.reward(cell, a), -1.0);
                } else {
                    let dest = r as usize * w + c as usize;
                    prop_assert_eq!(next, dest);
                    let component = match spec.cells[dest] {
                        CellKind::Empty => 0.0,
                        CellKind::MildlyGood => 1.0,
                        CellKind::MildlyBad => spec.bad.unwrap(),
                        CellKind::TerminalSuccess => spec.success.unwrap(),
                        CellKind::TerminalFailure => spec.failure.unwrap(),
                    };
                    prop_assert_eq!(mdp.reward(cell, a), -1.0 + component);
                }
            }
        }
        if absorbing {
            for a in 0..N_ACTIONS {
                prop_assert_eq!(mdp.next(h * w, a), h * w);
                prop_assert_eq!(mdp.reward(h * w, a), 0.0);
            }
        }
    }

    #[test]
    fn general_generator_respects_its_sets(s in any::<u64>()) {
        let spec = spec_100(s);
        prop_assert!([5, 6, 10].contains(&spec.height));
        prop_assert!([3, 6, 10, 15].contains(&spec.width));
        prop_assert_eq!(spec.count(CellKind::TerminalSuccess), 1);
        prop_assert!([0.0, 1.0, 5.0, 10.0, 50.0].contains(&spec.success.unwrap()));
        if let Some(f) = spec.failure {
            prop_assert!([-5.0, -10.0, -50.0].contains(&f));
        }
        if let Some(b) = spec.bad {
            prop_assert!([-2.0, -5.0, -10.0].contains(&b));
        }
        prop_assert_eq!(spec.time_penalty, -1.0);
        let n = spec.height * spec.width;
        prop_assert!(spec.count(CellKind::Empty) >= 1);
        prop_assert!(floor_counts(n, &[0, 10, 30]).contains(&spec.count(CellKind::TerminalFailure)));
        let bad = spec.count(CellKind::MildlyBad);
        let good = spec.count(CellKind::MildlyGood);
        // later kinds may be cut short when the grid runs out of cells
        let full = spec.count(CellKind::Empty) > 1;
        prop_assert!(floor_counts(n, &[0, 10, 50, 80]).contains(&bad) || !full);
        prop_assert!(floor_counts(n, &[0, 10, 20]).contains(&good) || !full);
        prop_assert_eq!(spec_100(s), spec);
    }

    #[test]
    fn small_generator_respects_its_class(s in any::<u64>(), k in 0usize..3) {
        let class = MdpClass90::ALL[k];
        let spec = generate_mdp_90(&mut seed::stream(s), class);
        let (h, w) = (spec.height, spec.width);
        prop_assert!([3, 5].contains(&h) && [1, 2].contains(&w));
        let corner = |i: usize| [0, h - 1].contains(&(i / w)) && [0, w - 1].contains(&(i % w));
        let success: Vec<usize> = (0..h * w)
            .filter(|&i| spec.cells[i] == CellKind::TerminalSuccess)
            .collect();
        prop_assert_eq!(success.len(), 1);
        prop_assert!(corner(success[0]));
        prop_assert!([0.0, 1.5, 10.0].contains(&spec.success.unwrap()));
        let failures = spec.count(CellKind::TerminalFailure);
        match class {
            MdpClass90::MustTerminateAny => {
                prop_assert!(failures <= 1);
                prop_assert_eq!(spec.time_penalty, -1.0);
                if failures == 1 {
                    prop_assert!([-5.0, -10.0].contains(&spec.failure.unwrap()));
                }
            }
            MdpClass90::MustTerminateSuccess => {
                prop_assert_eq!(failures, 1);
                prop_assert_eq!(spec.failure, Some(-10.0));
                prop_assert_eq!(spec.time_penalty, -1.0);
            }
            MdpClass90::MustLoop => {
                prop_assert_eq!(failures, 1);
                prop_assert_eq!(spec.failure, Some(-10.0));
                let mdp = spec.compile(false, DEFAULT_GAMMA).unwrap();
                for st in mdp.start_states().iter().copied() {
                    for a in 0..N_ACTIONS {
                        let next = mdp.next(st, a);
                        if !mdp.is_terminal(next) {
                            prop_assert_eq!(mdp.reward(st, a), 1.0);
                        }
                    }
                }
            }
        }
        for i in (0..h * w).filter(|&i| spec.cells[i] == CellKind::TerminalFailure) {
            prop_assert!(corner(i));
        }
    }

    #[test]
    fn grid_text_round_trips(s in any::<u64>(), k in 0usize..4) {
        let spec = if k == 3 {
            spec_100(s)
        } else {
            generate_mdp_90(&mut seed::stream(s), MdpClass90::ALL[k])
        };
        prop_assert_eq!(GridSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn advantage_is_q_minus_v_with_zero_row_maxima(s in any::<u64>(), absorbing in any::<bool>()) {
        let mdp = mdp_100(s, absorbing);
        let b = solve(&mdp, mdp.reward_table(), DEFAULT_GAMMA);
        for st in 0..mdp.n_states() {
            for a in 0..N_ACTIONS {
                prop_assert!((b.a(st, a) - (b.q(st, a) - b.v(st))).abs() <= 1e-9);
            }
            if !mdp.value_pinned(st) {
                let m = b.a_star[st * N_ACTIONS..(st + 1) * N_ACTIONS]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn zero_max_rewards_are_solved_greedily(s in any::<u64>(), t in any::<u64>()) {
        let mdp = mdp_100(s, t % 2 == 0);
        let r = shifted_reward(&GTable::from_values(random_table(&mdp, t, 5.0)).unwrap());
        let mut policies = Vec::new();
        for gamma in [0.1, 0.5, 0.999] {
            let b = solve(&mdp, r.values(), gamma);
            prop_assert!(b.v_star.iter().all(|v| v.abs() <= 1e-8));
            for st in (0..mdp.n_states()).filter(|&st| !mdp.value_pinned(st)) {
                prop_assert_eq!(argmax_set(b.q_row(st), 1e-12), argmax_set(r.row(st), 1e-12));
            }
            policies.push(greedy_policy(&b));
        }
        prop_assert_eq!(&policies[0], &policies[1]);
        prop_assert_eq!(&policies[1], &policies[2]);
        let via = policy_via_reward(&mdp, &r, DEFAULT_GAMMA, &SolverConfig::default()).unwrap();
        let direct = greedy_advantage_policy(&r);
        for &st in mdp.start_states() {
            prop_assert_eq!(via.action(st), direct.action(st));
        }
    }

    #[test]
    fn true_advantage_as_reward_keeps_argmax_sets(s in any::<u64>(), absorbing in any::<bool>()) {
        let mdp = mdp_100(s, absorbing);
        let truth = solve(&mdp, mdp.reward_table(), DEFAULT_GAMMA);
        let shaped = solve(&mdp, &truth.a_star, DEFAULT_GAMMA);
        for st in (0..mdp.n_states()).filter(|&st| !mdp.value_pinned(st)) {
            let row = &truth.a_star[st * N_ACTIONS..(st + 1) * N_ACTIONS];
            prop_assert_eq!(argmax_set(shaped.q_row(st), 1e-9), argmax_set(row, 1e-9));
        }
        prop_assert!(shaped.v_star.iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn preference_probabilities_are_antisymmetric_and_shift_invariant(
        s in any::<u64>(),
        len in 1usize..6,
        c in -50.0f64..50.0,
    ) {
        let mdp = mdp_100(s, s % 2 == 0);
        let table = random_table(&mdp, s ^ 1, 20.0);
        let shifted: Vec<f64> = table.iter().map(|v| v + c).collect();
        let mut rng = seed::stream(s ^ 2);
        for _ in 0..10 {
            let x = sample_segment(&mdp, len, &mut rng).unwrap();
            let y = sample_segment(&mdp, len, &mut rng).unwrap();
            let p = pref_prob_general(&x, &y, &table);
            prop_assert_eq!(p + pref_prob_general(&y, &x, &table), 1.0);
            prop_assert!((pref_prob_general(&x, &y, &shifted) - p).abs() <= 1e-9);
        }
    }

    #[test]
    fn regret_is_nonnegative_and_zero_only_for_optimal_segments(s in any::<u64>(), len in 1usize..5) {
        let mdp = mdp_100(s, s % 2 == 1);
        let b = solve(&mdp, mdp.reward_table(), DEFAULT_GAMMA);
        let mut rng = seed::stream(s ^ 3);
        for _ in 0..20 {
            let seg = sample_segment(&mdp, len, &mut rng).unwrap();
            let regret = segment_regret(&seg, &mdp, &b).unwrap();
            prop_assert!(regret >= -1e-9);
            let optimal = seg
                .transitions()
                .all(|(st, a)| b.a(st, a) >= -1e-9);
            prop_assert_eq!(regret.abs() <= 1e-9, optimal);
        }
    }

    #[test]
    fn policy_rows_are_distributions(s in any::<u64>()) {
        let mdp = mdp_100(s, false);
        let b = solve(&mdp, mdp.reward_table(), DEFAULT_GAMMA);
        for p in [Policy::uniform(mdp.n_states()), greedy_policy(&b)] {
            for st in 0..mdp.n_states() {
                let total: f64 = p.probs(st).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_shift_invariant_and_augmentation_is_order_free(
        s in any::<u64>(),
        c in -20.0f64..20.0,
        stochastic in any::<bool>(),
    ) {
        let mdp = mdp_100(s, s % 2 == 0);
        let b = solve(&mdp, mdp.reward_table(), DEFAULT_GAMMA);
        let noise = if stochastic { LabelNoise::Stochastic } else { LabelNoise::Noiseless };
        let ds = build_dataset(&mdp, &b, 25, 3, PreferenceModel::Regret, noise, s).unwrap();
        let g = GTable::from_values(random_table(&mdp, s ^ 4, 3.0)).unwrap();
        let base = dataset_loss(&g, &ds).unwrap();
        prop_assert!((dataset_loss(&g.offset(c), &ds).unwrap() - base).abs() <= 1e-9);

        let mut reversed = ds.clone();
        reversed.samples.reverse();
        let (a, r) = (augment_reverse(&ds), augment_reverse(&reversed));
        prop_assert_eq!(dataset_loss(&g, &a).unwrap().to_bits(), dataset_loss(&g, &r).unwrap().to_bits());
        prop_assert_eq!(loss_gradient(&g, &a).unwrap(), loss_gradient(&g, &r).unwrap());
        for sample in &a.samples {
            let (m1, m2) = sample.label.mu();
            prop_assert_eq!(m1 + m2, 1.0);
            prop_assert_eq!(sample.seg1.len(), sample.seg2.len());
        }
        prop_assert_eq!(a.samples[1].label, a.samples[0].label.reversed());
        prop_assert_eq!(Label::Tie.reversed(), Label::Tie);
    }

    #[test]
    fn training_trace_has_one_loss_per_epoch(s in any::<u64>(), epochs in 1usize..40) {
        let mdp = mdp_100(s, s % 2 == 1);
        let b = solve(&mdp, mdp.reward_table(), DEFAULT_GAMMA);
        let ds = build_dataset(&mdp, &b, 20, 2, PreferenceModel::Regret, LabelNoise::Noiseless, s)
            .unwrap();
        let cfg = TrainConfig { epochs, ..Default::default() };
        let report = train(&mdp, &augment_reverse(&ds), &cfg).unwrap();
        prop_assert_eq!(report.loss_per_epoch.len(), epochs);
        prop_assert!(report.final_g.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn learning_curve_has_one_point_per_episode(s in any::<u64>(), episodes in 1usize..30) {
        let mdp = mdp_100(s, false);
        let baseline = prefgrid::dp::ReturnBaseline::new(&mdp, &SolverConfig::default()).unwrap();
        let cfg = QLearnConfig { episodes, max_steps: 50, ..Default::default() };
        let zero = vec![0.0; mdp.n_states() * N_ACTIONS];
        let (q, curve) = q_learning(&mdp, &zero, &cfg, &mut seed::stream(s), &baseline).unwrap();
        prop_assert_eq!(curve.len(), episodes);
        prop_assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loop_sign_agrees_with_simple_cycles(s in any::<u64>(), k in 0usize..3, scale in 0.1f64..10.0) {
        let mdp = generate_mdp_90(&mut seed::stream(s), MdpClass90::ALL[k])
            .compile(s % 2 == 0, DEFAULT_GAMMA)
            .unwrap();
        let w = random_table(&mdp, s ^ 5, scale);
        let report = loop_analysis(&mdp, &w).unwrap();
        prop_assert!(report.exhaustive);
        if report.no_cycles {
            prop_assert_eq!(report.sign, LoopSign::Negative);
        } else {
            prop_assert_eq!(report.sign, LoopSign::of(report.max_mean_cycle_weight));
            prop_assert_eq!(report.max_simple_cycle_return > 0.0, report.max_mean_cycle_weight > 0.0);
            prop_assert!(report.max_simple_cycle_return >= report.max_mean_cycle_weight - 1e-9);
        }
    }
}
