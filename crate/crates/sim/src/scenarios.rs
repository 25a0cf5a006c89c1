//! Reference topologies with ground truth, layouts and random configurations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use streamcap_core::{
    Configuration, ContainerDims, EdgeSpec, Grouping, InstanceId, LogicalDag, NodeSpec,
};

use crate::truth::{GroundTruth, NodeTruth, SmTruth};

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// A topology together with the costs the simulator uses for it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub dag: LogicalDag,
    pub truth: GroundTruth,
    /// Layouts whose rate sweeps cover every node and the stream manager.
    pub training: Vec<Configuration>,
}

fn dag(nodes: &[&str], edges: &[(&str, &str, Grouping)]) -> LogicalDag {
    LogicalDag::new(
        nodes.iter().map(|n| NodeSpec::new(*n)).collect(),
        edges
            .iter()
            .map(|(a, b, g)| EdgeSpec::new(*a, *b, *g))
            .collect(),
    )
    .expect("built-in topology is valid")
}

/// One instance of every node, each in its own container.
pub fn spread_layout(dag: &LogicalDag, dims: ContainerDims, parallelism: &BTreeMap<&str, u32>) -> Configuration {
    let mut layout = Vec::new();
    for n in &dag.nodes {
        for _ in 0..parallelism.get(n.name.as_str()).copied().unwrap_or(1) {
            layout.push(vec![n.name.as_str()]);
        }
    }
    Configuration::from_layout(dims, &layout)
}

pub const WC_PEAK_W: f64 = 839.0;
pub const WC_PEAK_C: f64 = 658.0;
pub const WC_PEAK_SM: f64 = 790.0;

pub fn wordcount_dims() -> ContainerDims {
    ContainerDims::new(3.0, 4.0 * GIB)
}

/// Two-node word count: a source splitting sentences and a fields-grouped counter.
pub fn wordcount() -> Scenario {
    let dag = dag(&["W", "C"], &[("W", "C", Grouping::Fields)]);
    let truth = GroundTruth::new(
        SmTruth::new(0.99 / WC_PEAK_SM, 0.01).with_fanout(1.2e-4, 4),
    )
    .with_node("W", NodeTruth::cpu(0.98 / WC_PEAK_W, 0.02, 1.0))
    .with_node("C", NodeTruth::cpu(0.98 / WC_PEAK_C, 0.02, 1.0));
    let training = vec![wordcount_layout(1).expect("layout 1")];
    Scenario {
        name: "wordcount",
        dag,
        truth,
        training,
    }
}

/// Word-count packings by row of the sensitivity table; `None` for unknown ids.
pub fn wordcount_layout(id: u32) -> Option<Configuration> {
    let one = |n: &'static str| vec![n];
    let layout: Vec<Vec<&str>> = match id {
        1 => vec![one("W"), one("C")],
        2 => vec![vec!["W", "C"], vec!["W", "C"]],
        3 => vec![vec!["W", "W"], vec!["C", "C"]],
        5 => vec![one("W"), one("C"), one("C")],
        6..=9 => {
            let consumers = id - 4;
            let mut l = vec![one("W"), one("W")];
            l.extend((0..consumers).map(|_| one("C")));
            l
        }
        _ => return None,
    };
    Some(Configuration::from_layout(wordcount_dims(), &layout))
}

pub const ADS_NODES: [&str; 6] = [
    "ads",
    "event_deserializer",
    "event_filter",
    "event_projection",
    "redis_join",
    "campaign_processor",
];

/// Six-node advertising pipeline with an I/O-bound source.
pub fn ad_analytics() -> Scenario {
    let dag = dag(
        &ADS_NODES,
        &[
            ("ads", "event_deserializer", Grouping::Shuffle),
            ("event_deserializer", "event_filter", Grouping::Shuffle),
            ("event_filter", "event_projection", Grouping::Shuffle),
            ("event_projection", "redis_join", Grouping::Fields),
            ("redis_join", "campaign_processor", Grouping::Fields),
        ],
    );
    let ms = 1e-3;
    let truth = GroundTruth::new(SmTruth::new(0.02 * ms, 0.01))
        .with_node("ads", NodeTruth::cpu(0.1 * ms, 0.02, 1.0).with_io_wait(0.4 * ms))
        .with_node("event_deserializer", NodeTruth::cpu(0.9 * ms, 0.02, 1.0))
        .with_node("event_filter", NodeTruth::cpu(0.15 * ms, 0.02, 0.32))
        .with_node("event_projection", NodeTruth::cpu(0.2 * ms, 0.02, 1.0))
        .with_node("redis_join", NodeTruth::cpu(1.0 * ms, 0.02, 1.0))
        .with_node("campaign_processor", NodeTruth::cpu(1.5 * ms, 0.02, 1.0));
    let par = BTreeMap::from([("event_deserializer", 3), ("campaign_processor", 2)]);
    let training = vec![spread_layout(&dag, ContainerDims::new(2.0, 4.0 * GIB), &par)];
    Scenario {
        name: "ad_analytics",
        dag,
        truth,
        training,
    }
}

/// Nine-node branching analytics topology with a broadcast edge.
pub fn session_analytics() -> Scenario {
    let dag = dag(
        &[
            "ingest",
            "decode",
            "classify",
            "session_agg",
            "cell_agg",
            "anomaly",
            "merge",
            "kpi_store",
            "alert",
        ],
        &[
            ("ingest", "decode", Grouping::Shuffle),
            ("decode", "classify", Grouping::Fields),
            ("classify", "session_agg", Grouping::Fields),
            ("classify", "cell_agg", Grouping::Fields),
            ("session_agg", "merge", Grouping::Shuffle),
            ("cell_agg", "anomaly", Grouping::Fields),
            ("anomaly", "merge", Grouping::Shuffle),
            ("anomaly", "alert", Grouping::All),
            ("merge", "kpi_store", Grouping::Fields),
        ],
    );
    let ms = 1e-3;
    let truth = GroundTruth::new(SmTruth::new(0.05 * ms, 0.01))
        .with_node("ingest", NodeTruth::cpu(0.3 * ms, 0.02, 1.0))
        .with_node("decode", NodeTruth::cpu(0.8 * ms, 0.02, 1.0))
        .with_node("classify", NodeTruth::cpu(0.5 * ms, 0.02, 1.0))
        .with_node("session_agg", NodeTruth::cpu(0.9 * ms, 0.02, 0.2))
        .with_node("cell_agg", NodeTruth::cpu(0.6 * ms, 0.02, 0.1))
        .with_node("anomaly", NodeTruth::cpu(2.0 * ms, 0.02, 0.5))
        .with_node("merge", NodeTruth::cpu(1.0 * ms, 0.02, 1.0))
        .with_node("kpi_store", NodeTruth::cpu(1.2 * ms, 0.02, 1.0))
        .with_node("alert", NodeTruth::cpu(0.5 * ms, 0.02, 1.0));
    let training = vec![spread_layout(
        &dag,
        ContainerDims::new(2.0, 4.0 * GIB),
        &BTreeMap::new(),
    )];
    Scenario {
        name: "session_analytics",
        dag,
        truth,
        training,
    }
}

/// Random parallelism in `1..=max_parallelism` per node and random packing over up to
/// `max_containers` containers; every container receives at least one instance.
pub fn random_config<R: Rng>(
    dag: &LogicalDag,
    rng: &mut R,
    max_parallelism: u32,
    max_containers: u32,
    cpu_choices: &[f64],
) -> Configuration {
    let mut parallelism = BTreeMap::new();
    let mut ids = Vec::new();
    for n in &dag.nodes {
        let p = rng.random_range(1..=max_parallelism.max(1));
        parallelism.insert(n.name.clone(), p);
        ids.extend((0..p).map(|k| InstanceId::new(&n.name, k)));
    }
    let m = rng.random_range(1..=max_containers.clamp(1, ids.len() as u32));
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(rng);
    let mut packing = BTreeMap::new();
    for (k, &i) in order.iter().enumerate() {
        let c = if (k as u32) < m {
            k as u32
        } else {
            rng.random_range(0..m)
        };
        packing.insert(ids[i].to_string(), c);
    }
    let cpu = cpu_choices[rng.random_range(0..cpu_choices.len())];
    Configuration {
        parallelism,
        container: ContainerDims::new(cpu, 4.0 * GIB),
        containers: m,
        packing,
        container_overrides: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtins_are_consistent() {
        for s in [wordcount(), ad_analytics(), session_analytics()] {
            s.truth.validate(&s.dag).unwrap();
            for c in &s.training {
                c.validate(&s.dag).unwrap();
            }
        }
        assert_eq!(ad_analytics().dag.nodes.len(), 6);
        assert_eq!(session_analytics().dag.nodes.len(), 9);
    }

    #[test]
    fn table_layouts() {
        let dag = wordcount().dag;
        for id in [1, 2, 3, 5, 6, 7, 8, 9] {
            wordcount_layout(id).unwrap().validate(&dag).unwrap();
        }
        let c9 = wordcount_layout(9).unwrap();
        assert_eq!(c9.containers, 7);
        assert_eq!(c9.parallelism["C"], 5);
        assert!(wordcount_layout(4).is_none());
    }

    #[test]
    fn random_configs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = session_analytics();
        for _ in 0..50 {
            let c = random_config(&s.dag, &mut rng, 3, 6, &[2.0, 3.0, 4.0]);
            c.validate(&s.dag).unwrap();
            let mut used = vec![false; c.containers as usize];
            for &k in c.packing.values() {
                used[k as usize] = true;
            }
            assert!(used.iter().all(|&u| u));
        }
    }
}
