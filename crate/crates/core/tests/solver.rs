use std::collections::BTreeMap;

use proptest::prelude::*;
use streamcap_core::network::VertexKind;
use streamcap_core::solver::{predict_with, solve_network, PredictOptions};
use streamcap_core::{
    predict_rate, BottleneckKind, Configuration, ContainerDims, EdgeSpec, Grouping, InstanceId,
    LogicalDag, ModelSet, NodeModel, NodeSpec, STREAM_MANAGER,
};

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

fn pipeline() -> LogicalDag {
    let mut fields = EdgeSpec::new("split", "count", Grouping::Fields);
    fields.bytes_per_tuple = 100.0;
    LogicalDag::new(
        vec![NodeSpec::new("spout"), NodeSpec::new("split"), NodeSpec::new("count")],
        vec![EdgeSpec::new("spout", "split", Grouping::Shuffle), fields],
    )
    .unwrap()
}

fn models() -> ModelSet {
    let mut m = ModelSet::new();
    m.insert(NodeModel::from_cpu_line("spout", 0.4e-3, 0.02, 1.0));
    m.insert(NodeModel::from_cpu_line("split", 0.8e-3, 0.02, 0.5));
    m.insert(NodeModel::from_cpu_line("count", 1.2e-3, 0.02, 1.0));
    m.insert(NodeModel::from_cpu_line(STREAM_MANAGER, 0.5e-3, 0.01, 1.0));
    m
}

fn config(par: [u32; 3], containers: u32, slots: &[u32], cpu: f64, link: Option<f64>) -> Configuration {
    let names = ["spout", "split", "count"];
    let mut parallelism = BTreeMap::new();
    let mut packing = BTreeMap::new();
    let mut k = 0;
    for (n, p) in names.iter().zip(par) {
        parallelism.insert(n.to_string(), p);
        for i in 0..p {
            packing.insert(InstanceId::new(*n, i).to_string(), slots[k] % containers);
            k += 1;
        }
    }
    // Fill empty containers from the front so every container is used.
    let mut used: Vec<bool> = vec![false; containers as usize];
    for c in packing.values() {
        used[*c as usize] = true;
    }
    let mut ids: Vec<String> = packing.keys().cloned().collect();
    for (c, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
        if let Some(id) = ids.pop() {
            packing.insert(id, c as u32);
        }
    }
    let mut dims = ContainerDims::new(cpu, 4.0 * GIB);
    dims.link = link;
    Configuration {
        parallelism,
        container: dims,
        containers,
        packing,
        container_overrides: BTreeMap::new(),
    }
}

fn config_strategy() -> impl Strategy<Value = Configuration> {
    (
        prop::array::uniform3(1u32..=3),
        1u32..=4,
        prop::collection::vec(0u32..4, 9),
        1.0f64..4.0,
    )
        .prop_map(|(par, m, slots, cpu)| config(par, m, &slots, cpu, None))
        .prop_filter("valid", |c| c.validate(&pipeline()).is_ok())
}

#[test]
fn flow_is_conserved_at_routers_and_scaled_at_instances() {
    let dag = pipeline();
    let m = models();
    let cfg = config([1, 2, 3], 3, &[0, 1, 2, 0, 1, 2], 2.0, None);
    let solved = solve_network(&dag, &cfg, &m, &PredictOptions::default()).unwrap();
    let flow = solved.arc_flows(&dag);
    let net = &solved.network;
    let mut inflow = vec![0.0; net.vertices.len()];
    let mut outflow = vec![0.0; net.vertices.len()];
    for (a, f) in net.arcs.iter().zip(&flow) {
        outflow[a.from] += f;
        inflow[a.to] += f;
    }
    let rate = solved.prediction.max_rate;
    for (v, vertex) in net.vertices.iter().enumerate() {
        match vertex.kind {
            VertexKind::Instance(i) => {
                let node = &net.instances[i].node;
                let gamma = m.get(node).unwrap().gamma;
                if dag.is_source(node) {
                    continue;
                }
                let fanout = dag.out_edges(node).count() as f64;
                assert!((outflow[v] - gamma * fanout * inflow[v]).abs() <= 1e-6 * rate);
            }
            _ => assert!(
                (inflow[v] - outflow[v]).abs() <= 1e-6 * rate,
                "{}: {} in, {} out",
                vertex.label,
                inflow[v],
                outflow[v]
            ),
        }
    }
}

#[test]
fn symmetric_fields_packing_feeds_consumers_equally() {
    let dag = pipeline();
    let cfg = Configuration::from_layout(
        ContainerDims::new(3.0, 4.0 * GIB),
        &[vec!["spout", "split", "count"], vec!["spout", "split", "count"]],
    );
    let p = predict_rate(&dag, &cfg, &models()).unwrap();
    let a = p.instance_rates["count-0"];
    let b = p.instance_rates["count-1"];
    assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
}

#[test]
fn crossing_tuples_are_counted_twice() {
    let dag = pipeline();
    let m = models();
    let cfg = config([2, 2, 2], 3, &[0, 1, 2, 0, 1, 2], 3.0, None);
    let p = predict_rate(&dag, &cfg, &m).unwrap();
    let solved = solve_network(&dag, &cfg, &m, &PredictOptions::default()).unwrap();
    let net = &solved.network;
    let flow = solved.arc_flows(&dag);
    let mut total = 0.0;
    let mut crossing = 0.0;
    for (a, f) in net.arcs.iter().zip(&flow) {
        if matches!(net.vertices[a.from].kind, VertexKind::Instance(_)) {
            total += f;
        }
        if net.vertices[a.to].kind == VertexKind::Switch {
            crossing += f;
        }
    }
    assert!(crossing > 0.0);
    assert!((p.total_sm_flux() - (total + crossing)).abs() <= 1e-6 * total);
}

#[test]
fn single_container_has_no_link_bottleneck() {
    let dag = pipeline();
    let mut dims = ContainerDims::new(4.0, 4.0 * GIB);
    dims.link = Some(1.0);
    let cfg = Configuration::from_layout(dims, &[vec!["spout", "split", "count", "count"]]);
    let p = predict_rate(&dag, &cfg, &models()).unwrap();
    assert!(!p.has_bottleneck(BottleneckKind::Link));
    assert!(p.max_rate > 0.0);
}

#[test]
fn narrow_link_binds() {
    let dag = pipeline();
    let cfg = config([1, 1, 1], 2, &[0, 0, 1], 3.0, Some(10_000.0));
    let p = predict_rate(&dag, &cfg, &models()).unwrap();
    assert!(p.has_bottleneck(BottleneckKind::Link));
    // 100 bytes per crossing tuple, half of the spout rate crosses.
    assert!((p.max_rate - 200.0).abs() < 1e-6, "{}", p.max_rate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relaxing_container_cpu_never_hurts(cfg in config_strategy(), extra in 0.1f64..4.0) {
        let dag = pipeline();
        let m = models();
        let Ok(base) = predict_rate(&dag, &cfg, &m) else { return Ok(()); };
        let mut bigger = cfg.clone();
        bigger.container.cpu += extra;
        let relaxed = predict_rate(&dag, &bigger, &m).unwrap();
        prop_assert!(relaxed.max_rate >= base.max_rate * (1.0 - 1e-9));
    }

    #[test]
    fn relaxing_the_link_never_hurts(cfg in config_strategy(), link in 1e3f64..1e6, factor in 1.0f64..10.0) {
        let dag = pipeline();
        let m = models();
        let mut tight = cfg.clone();
        tight.container.link = Some(link);
        let Ok(base) = predict_rate(&dag, &tight, &m) else { return Ok(()); };
        let mut loose = cfg.clone();
        loose.container.link = Some(link * factor);
        let relaxed = predict_rate(&dag, &loose, &m).unwrap();
        prop_assert!(relaxed.max_rate >= base.max_rate * (1.0 - 1e-9));
        let unlimited = predict_rate(&dag, &cfg, &m).unwrap();
        prop_assert!(unlimited.max_rate >= relaxed.max_rate * (1.0 - 1e-9));
    }

    #[test]
    fn locality_aware_shuffle_is_a_relaxation(cfg in config_strategy()) {
        let dag = pipeline();
        let m = models();
        let Ok(even) = predict_rate(&dag, &cfg, &m) else { return Ok(()); };
        let opts = PredictOptions { locality_aware_shuffle: true, ..PredictOptions::default() };
        let free = predict_with(&dag, &cfg, &m, &opts).unwrap();
        prop_assert!(free.max_rate >= even.max_rate * (1.0 - 1e-9));
    }
}
