use proptest::prelude::*;
use streamcap_core::calibrator::{overprovision_factor, CalibrationRecord};
use streamcap_core::dag::{config_space_size, propagate_with};
use streamcap_core::metrics::{align, to_samples, AlignedSample};
use streamcap_core::regression::fit_linear;
use streamcap_core::trainer::{classify_node, estimate_gamma, Thresholds};
use streamcap_core::{EdgeSpec, Grouping, LogicalDag, NodeSpec};

fn chain(n: usize) -> LogicalDag {
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    LogicalDag::new(
        names.iter().map(NodeSpec::new).collect(),
        names
            .windows(2)
            .map(|w| EdgeSpec::new(&w[0], &w[1], Grouping::Shuffle))
            .collect(),
    )
    .unwrap()
}

fn diamond() -> LogicalDag {
    LogicalDag::new(
        ["s", "a", "b", "j"].into_iter().map(NodeSpec::new).collect(),
        vec![
            EdgeSpec::new("s", "a", Grouping::Shuffle),
            EdgeSpec::new("s", "b", Grouping::Fields),
            EdgeSpec::new("a", "j", Grouping::Shuffle),
            EdgeSpec::new("b", "j", Grouping::All),
        ],
    )
    .unwrap()
}

fn sample(i: usize, rate: f64, cpu: f64, cap: f64, gc: f64, bp: f64) -> AlignedSample {
    AlignedSample {
        node: "x".into(),
        instance: "x-0".into(),
        container: 0,
        window_start: 10.0 * i as f64,
        tuple_rate_in: rate,
        tuple_rate_out: rate,
        cputil: cpu,
        caputil: Some(cap),
        memutil: Some(1e6 + rate),
        gctime: gc,
        backpressure: bp,
    }
}

proptest! {
    #[test]
    fn propagation_is_linear(r in 0.0f64..1e6, k in 0.0f64..100.0, g in prop::collection::vec(0.0f64..2.0, 4)) {
        let dag = diamond();
        let gamma = |n: &str| Some(g[dag.node_index(n).unwrap()]);
        let base = propagate_with(&dag, gamma, r).unwrap();
        let scaled = propagate_with(&dag, gamma, k * r).unwrap();
        for (key, v) in &base.edges.0 {
            prop_assert!((scaled.edges.0[key] - k * v).abs() <= 1e-9 * (1.0 + k * v.abs()));
        }
    }

    #[test]
    fn chain_rates_are_prefix_products(r in 0.0f64..1e5, g in prop::collection::vec(0.0f64..1.5, 2..8)) {
        let dag = chain(g.len());
        let rates = propagate_with(&dag, |n| Some(g[dag.node_index(n).unwrap()]), r).unwrap();
        let mut expect = r;
        for i in 0..g.len() - 1 {
            expect *= g[i];
            let got = rates.edges.get(&format!("n{i}"), &format!("n{}", i + 1)).unwrap();
            prop_assert!((got - expect).abs() <= 1e-9 * (1.0 + expect));
        }
    }

    #[test]
    fn config_space_matches_naive_sum(n in 1u32..=4, m in 1u64..=20, k in 1u64..=4) {
        let mut naive: u128 = 0;
        for machines in 1..=m {
            let mut term: u128 = 1;
            for _ in 0..n {
                term *= (k * machines) as u128;
            }
            naive += term;
        }
        prop_assert_eq!(config_space_size(n, m, k).unwrap(), naive);
    }

    #[test]
    fn align_is_idempotent(rates in prop::collection::vec(0.0f64..5000.0, 1..20)) {
        let rows: Vec<_> = rates
            .iter()
            .enumerate()
            .map(|(i, r)| sample(i, *r, r / 1000.0, 0.5, 0.1, 0.0))
            .collect();
        let once = align(&to_samples(&rows, 10.0), 10.0).unwrap();
        let twice = align(&to_samples(&once, 10.0), 10.0).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn exact_lines_are_recovered(a in -10.0f64..10.0, b in -100.0f64..100.0, xs in prop::collection::btree_set(0u32..10_000, 8..40)) {
        let pts: Vec<_> = xs.iter().map(|x| (*x as f64, a * *x as f64 + b)).collect();
        let m = fit_linear(&pts).unwrap();
        prop_assert!((m.slope - a).abs() < 1e-9 * (1.0 + a.abs()));
        prop_assert!((m.intercept - b).abs() < 1e-7 * (1.0 + b.abs()));
        prop_assert!(m.is_extrapolation(m.x_max + 1.0));
        prop_assert!(m.is_extrapolation(m.x_min - 1.0));
        prop_assert!(!m.is_extrapolation((m.x_min + m.x_max) / 2.0));
    }

    #[test]
    fn gamma_is_scale_invariant(ratio in 0.0f64..3.0, k in 0.01f64..100.0, xs in prop::collection::vec(1.0f64..1e4, 8..20)) {
        let pts: Vec<_> = xs.iter().map(|x| (*x, ratio * x)).collect();
        let scaled: Vec<_> = pts.iter().map(|(i, o)| (k * i, k * o)).collect();
        let a = estimate_gamma(&pts).unwrap();
        let b = estimate_gamma(&scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn classification_ignores_sample_order(
        rows in prop::collection::vec((0.0f64..1000.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.2, prop::bool::weighted(0.1)), 8..20),
        seed in any::<u64>(),
    ) {
        let samples: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (r, c, cap, gc, bp))| sample(i, *r, *c, *cap, *gc, if *bp { 0.5 } else { 0.0 }))
            .collect();
        let mut shuffled = samples.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % n as u64) as usize);
        }
        let a = classify_node(&samples, 1.0, &Thresholds::default()).unwrap();
        let b = classify_node(&shuffled, 1.0, &Thresholds::default()).unwrap();
        prop_assert_eq!(a.classification, b.classification);
        prop_assert_eq!(a.saturation_rate, b.saturation_rate);
        prop_assert_eq!(a.usable.len(), b.usable.len());
    }

    #[test]
    fn overprovision_factor_is_scale_invariant(
        pairs in prop::collection::vec((1.0f64..1e4, 1.0f64..1e4), 1..20),
        k in 0.001f64..1000.0,
    ) {
        let rec = |s: f64| -> Vec<CalibrationRecord> {
            pairs
                .iter()
                .enumerate()
                .map(|(i, (p, m))| CalibrationRecord::new(format!("c{i}"), p * s, m * s, i as f64).unwrap())
                .collect()
        };
        let a = overprovision_factor(&rec(1.0)).unwrap();
        let b = overprovision_factor(&rec(k)).unwrap();
        prop_assert!(a >= 1.0);
        prop_assert!((a - b).abs() < 1e-9 * a);
    }
}
