//! Ground-truth cost parameters of the simulated runtime.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use streamcap_core::LogicalDag;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTruth {
    /// CPU-seconds per input tuple.
    pub cpu_cost: f64,
    /// Cores consumed while idle.
    #[serde(default)]
    pub base_cpu: f64,
    /// Output tuples per input tuple.
    #[serde(default = "one")]
    pub gamma: f64,
    /// Bytes of live state per (tuple/s) of input.
    #[serde(default)]
    pub mem_per_rate: f64,
    #[serde(default)]
    pub mem_base: f64,
    /// Seconds per tuple spent blocked off-CPU.
    #[serde(default)]
    pub io_wait: f64,
}

fn one() -> f64 {
    1.0
}

fn default_fanout_free() -> u32 {
    u32::MAX
}

impl NodeTruth {
    pub fn cpu(cpu_cost: f64, base_cpu: f64, gamma: f64) -> Self {
        NodeTruth {
            cpu_cost,
            base_cpu,
            gamma,
            mem_per_rate: 0.0,
            mem_base: 0.0,
            io_wait: 0.0,
        }
    }

    pub fn with_memory(mut self, mem_base: f64, mem_per_rate: f64) -> Self {
        self.mem_base = mem_base;
        self.mem_per_rate = mem_per_rate;
        self
    }

    pub fn with_io_wait(mut self, io_wait: f64) -> Self {
        self.io_wait = io_wait;
        self
    }

    pub fn has_memory(&self) -> bool {
        self.mem_base > 0.0 || self.mem_per_rate > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmTruth {
    /// CPU-seconds per handled tuple.
    pub cpu_cost_route: f64,
    #[serde(default)]
    pub base: f64,
    /// Extra CPU-seconds per forwarded tuple for every remote peer beyond `fanout_free`.
    #[serde(default)]
    pub fanout_cost: f64,
    #[serde(default = "default_fanout_free")]
    pub fanout_free: u32,
}

impl SmTruth {
    pub fn new(cpu_cost_route: f64, base: f64) -> Self {
        SmTruth {
            cpu_cost_route,
            base,
            fanout_cost: 0.0,
            fanout_free: u32::MAX,
        }
    }

    pub fn with_fanout(mut self, fanout_cost: f64, fanout_free: u32) -> Self {
        self.fanout_cost = fanout_cost;
        self.fanout_free = fanout_free;
        self
    }

    /// CPU-seconds to forward one tuple from an SM that talks to `peers` remote containers.
    pub fn forward_cost(&self, peers: u32) -> f64 {
        self.cpu_cost_route + self.fanout_cost * peers.saturating_sub(self.fanout_free) as f64
    }
}

/// Garbage accumulation and collection, per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcTruth {
    /// Bytes of garbage per processed tuple.
    pub garbage_per_tuple: f64,
    /// Collection triggers once garbage reaches this many bytes (checked at window ends).
    pub threshold: f64,
    /// Seconds of pause per collection.
    pub pause: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub nodes: BTreeMap<String, NodeTruth>,
    pub stream_manager: SmTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gc: Option<GcTruth>,
    /// Cores lost per runnable server beyond the container's whole cores.
    #[serde(default)]
    pub context_switch_penalty: f64,
}

impl GroundTruth {
    pub fn new(stream_manager: SmTruth) -> Self {
        GroundTruth {
            nodes: BTreeMap::new(),
            stream_manager,
            gc: None,
            context_switch_penalty: 0.0,
        }
    }

    pub fn with_node(mut self, name: impl Into<String>, truth: NodeTruth) -> Self {
        self.nodes.insert(name.into(), truth);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn node(&self, name: &str) -> Result<&NodeTruth> {
        self.nodes
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for node `{name}`")))
    }

    /// Checks non-negativity and that every DAG node is covered.
    pub fn validate(&self, dag: &LogicalDag) -> Result<()> {
        for n in &dag.nodes {
            self.node(&n.name)?;
        }
        let bad = |what: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be finite and >= 0, got {v}")))
            }
        };
        for (name, t) in &self.nodes {
            bad(&format!("{name}.cpu_cost"), t.cpu_cost)?;
            bad(&format!("{name}.base_cpu"), t.base_cpu)?;
            bad(&format!("{name}.gamma"), t.gamma)?;
            bad(&format!("{name}.mem_per_rate"), t.mem_per_rate)?;
            bad(&format!("{name}.mem_base"), t.mem_base)?;
            bad(&format!("{name}.io_wait"), t.io_wait)?;
            if t.cpu_cost == 0.0 && t.io_wait == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "node `{name}` has neither cpu_cost nor io_wait"
                )));
            }
        }
        let sm = &self.stream_manager;
        bad("stream_manager.cpu_cost_route", sm.cpu_cost_route)?;
        bad("stream_manager.base", sm.base)?;
        bad("stream_manager.fanout_cost", sm.fanout_cost)?;
        if sm.cpu_cost_route == 0.0 {
            return Err(Error::InvalidArgument("stream_manager.cpu_cost_route must be > 0".into()));
        }
        if let Some(gc) = &self.gc {
            bad("gc.garbage_per_tuple", gc.garbage_per_tuple)?;
            bad("gc.pause", gc.pause)?;
            if !(gc.threshold > 0.0) {
                return Err(Error::InvalidArgument("gc.threshold must be > 0".into()));
            }
        }
        bad("context_switch_penalty", self.context_switch_penalty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fanout_cost_only_beyond_free_peers() {
        let sm = SmTruth::new(1e-3, 0.0).with_fanout(2e-4, 4);
        assert_eq!(sm.forward_cost(3), 1e-3);
        assert_eq!(sm.forward_cost(4), 1e-3);
        assert!((sm.forward_cost(6) - 1.4e-3).abs() < 1e-15);
        assert_eq!(SmTruth::new(1e-3, 0.0).forward_cost(100), 1e-3);
    }

    #[test]
    fn json_defaults() {
        let gt = GroundTruth::from_json(
            r#"{"nodes": {"A": {"cpu_cost": 0.001}}, "stream_manager": {"cpu_cost_route": 0.0005}}"#,
        )
        .unwrap();
        assert_eq!(gt.nodes["A"].gamma, 1.0);
        assert_eq!(gt.stream_manager.fanout_free, u32::MAX);
        assert!(gt.gc.is_none());
    }

    #[test]
    fn negative_cost_rejected() {
        let dag = LogicalDag::new(vec![streamcap_core::NodeSpec::new("A")], vec![]).unwrap();
        let gt = GroundTruth::new(SmTruth::new(1e-3, 0.0)).with_node("A", NodeTruth::cpu(-1.0, 0.0, 1.0));
        assert!(gt.validate(&dag).is_err());
        let gt = GroundTruth::new(SmTruth::new(1e-3, 0.0));
        assert!(gt.validate(&dag).is_err());
    }
}
