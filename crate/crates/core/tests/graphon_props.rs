use proptest::prelude::*;
use relperf_core::graphon::{cut_norm, cut_norm_or_heuristic, normalized_weights, project_step, sample_interaction_graph, Graphon, InteractionGraph, Kernel, StepGraphon};
use relperf_core::Error;

fn step_strategy(max_blocks: usize) -> impl Strategy<Value = StepGraphon> {
    (1..=max_blocks).prop_flat_map(|n| {
        proptest::collection::vec(0.0..=1.0f64, n * (n + 1) / 2).prop_map(move |upper| {
            let mut w = vec![vec![0.0; n]; n];
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    w[i][j] = upper[k];
                    w[j][i] = upper[k];
                    k += 1;
                }
            }
            StepGraphon::new(w).unwrap()
        })
    })
}

fn brute(a: &StepGraphon, b: &StepGraphon) -> f64 {
    let n = a.n_blocks();
    let cell = 1.0 / (n * n) as f64;
    let mut best: f64 = 0.0;
    for s in 0u32..1 << n {
        for t in 0u32..1 << n {
            let mut sum = 0.0;
            for i in (0..n).filter(|i| s >> i & 1 == 1) {
                for j in (0..n).filter(|j| t >> j & 1 == 1) {
                    sum += (a.block(i, j) - b.block(i, j)) * cell;
                }
            }
            best = best.max(sum.abs());
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_graphs_are_simple_and_reproducible(g in step_strategy(4), n in 3usize..40, seed in any::<u64>(), beta in 0.05..=1.0f64) {
        let a = sample_interaction_graph(&g, n, beta, seed).unwrap();
        let b = sample_interaction_graph(&g, n, beta, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..n {
            prop_assert!(!a.has_edge(i, i));
            for j in 0..n {
                prop_assert_eq!(a.has_edge(i, j), a.has_edge(j, i));
            }
        }
    }

    #[test]
    fn cut_norm_is_a_pseudometric(a in step_strategy(5), b in step_strategy(5), c in step_strategy(5)) {
        let d = |x: &StepGraphon, y: &StepGraphon| cut_norm_or_heuristic(x, y);
        prop_assert!(d(&a, &a).value.abs() < 1e-15);
        let (ab, ba) = (d(&a, &b), d(&b, &a));
        prop_assert!((ab.value - ba.value).abs() < 1e-14);
        prop_assert!(ab.value >= 0.0);
        if ab.exact && d(&b, &c).exact && d(&a, &c).exact {
            prop_assert!(d(&a, &c).value <= ab.value + d(&b, &c).value + 1e-14);
        }
    }

    #[test]
    fn exact_cut_norm_matches_brute_force(pair in (1usize..=6).prop_flat_map(|n| (step_with(n), step_with(n)))) {
        let (a, b) = pair;
        prop_assert!((cut_norm(&a, &b).unwrap().value - brute(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn cut_norm_ignores_refinement(a in step_strategy(3), b in step_strategy(3), f in 1usize..4) {
        let x = cut_norm(&a, &b).unwrap().value;
        let y = cut_norm(&a.refine(f), &b).unwrap().value;
        prop_assert!((x - y).abs() < 1e-13);
    }

    #[test]
    fn normalized_rows_never_exceed_one(n in 3usize..30, seed in any::<u64>(), beta in 0.1..=1.0f64) {
        let g = sample_interaction_graph(&StepGraphon::constant(1, 1.0).unwrap(), n, beta, seed).unwrap();
        match normalized_weights(&g) {
            Ok(w) => for i in 0..n { prop_assert!(w.row_sum(i) <= 1.0 + 1e-12) },
            Err(Error::RowSum { sum, .. }) => prop_assert!(sum > 1.0),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

fn step_with(n: usize) -> impl Strategy<Value = StepGraphon> {
    step_strategy(n).prop_filter("exact size", move |g| g.n_blocks() == n)
}

#[test]
fn step_projection_at_block_multiples_is_exact() {
    let g = StepGraphon::new(vec![vec![0.2, 0.7], vec![0.7, 0.4]]).unwrap();
    for n in [2, 4, 6, 8] {
        let p = project_step(&Graphon::Step(g.clone()), n).unwrap();
        assert!(cut_norm_or_heuristic(&p, &g).value < 1e-15, "n = {n}");
    }
}

#[test]
fn affine_projection_error_does_not_grow() {
    // corner sampling keeps n·cutnorm constant for affine kernels
    let g = Graphon::Analytic(Kernel::AffineMean { a: 0.5, b: 0.25 });
    let mut last = f64::INFINITY;
    for n in [2, 3, 4, 6] {
        let c = cut_norm(&project_step(&g, n).unwrap(), &project_step(&g, 4 * n).unwrap()).unwrap().value;
        assert!(n as f64 * c <= last + 1e-12);
        last = n as f64 * c;
    }
}

#[test]
fn graph_json_round_trip() {
    let g = sample_interaction_graph(&StepGraphon::constant(1, 0.5).unwrap(), 9, 1.0, 3).unwrap();
    let s = serde_json::to_string(&g).unwrap();
    let back: InteractionGraph = serde_json::from_str(&s).unwrap();
    assert_eq!(g, back);
    let step = StepGraphon::new(vec![vec![0.1, 0.2], vec![0.2, 0.3]]).unwrap();
    let back: StepGraphon = serde_json::from_str(&serde_json::to_string(&step).unwrap()).unwrap();
    assert_eq!(step, back);
}
