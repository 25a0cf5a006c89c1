//! Learned per-node performance models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dag::STREAM_MANAGER;
use crate::error::{Error, Result};
use crate::regression::LinearModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    CpuBound,
    IoBound,
    MemoryBound,
    Miscalibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub node: String,
    /// CPU cores per instance as a function of the instance input rate.
    pub cpu: LinearModel,
    /// Busy fraction per instance as a function of the instance input rate.
    pub capacity: Option<LinearModel>,
    /// Output-to-input tuple ratio.
    pub gamma: f64,
    /// Post-GC resident bytes per instance as a function of the instance input rate.
    pub memory: Option<LinearModel>,
    pub classification: Classification,
    /// Lowest input rate observed while the node was backpressuring.
    pub saturation_rate: Option<f64>,
    /// The CPU model was rewritten so that it saturates with the capacity model.
    #[serde(default)]
    pub normalized: bool,
    /// The fitted CPU line before normalization; what the instance actually burns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_cpu: Option<LinearModel>,
    /// CPU budget of one instance.
    #[serde(default = "one")]
    pub max_cpu: f64,
}

fn one() -> f64 {
    1.0
}

impl NodeModel {
    /// A model with a known CPU line and nothing else; handy for hand-built scenarios.
    pub fn from_cpu_line(node: impl Into<String>, slope: f64, intercept: f64, gamma: f64) -> Self {
        NodeModel {
            node: node.into(),
            cpu: LinearModel {
                slope,
                intercept,
                r_squared: 1.0,
                x_min: 0.0,
                x_max: f64::MAX,
            },
            capacity: None,
            gamma,
            memory: None,
            classification: Classification::CpuBound,
            saturation_rate: None,
            normalized: false,
            measured_cpu: None,
            max_cpu: 1.0,
        }
    }

    pub fn is_stream_manager(&self) -> bool {
        self.node == STREAM_MANAGER
    }

    /// Modeled CPU cores at an instance input rate.
    pub fn cpu_at(&self, rate: f64) -> f64 {
        self.cpu.predict(rate)
    }

    /// CPU line charged against shared container cores.
    pub fn consumed_cpu(&self) -> &LinearModel {
        self.measured_cpu.as_ref().unwrap_or(&self.cpu)
    }

    /// Modeled resident memory at an instance input rate (0 without a memory model).
    pub fn memory_at(&self, rate: f64) -> f64 {
        self.memory.map_or(0.0, |m| m.predict(rate).max(0.0))
    }

    /// Input rate at which modeled CPU reaches `budget`, capped by the saturation rate.
    /// Infinite when nothing limits the node.
    pub fn peak_rate(&self, budget: f64) -> f64 {
        let cpu_peak = if self.cpu.slope > 0.0 {
            ((budget - self.cpu.intercept) / self.cpu.slope).max(0.0)
        } else if budget >= self.cpu.intercept {
            f64::INFINITY
        } else {
            0.0
        };
        match self.saturation_rate {
            Some(s) => cpu_peak.min(s),
            None => cpu_peak,
        }
    }

    /// Peak rate of one instance at its full CPU budget.
    pub fn instance_peak(&self) -> f64 {
        self.peak_rate(self.max_cpu)
    }

    pub fn is_extrapolation(&self, rate: f64) -> bool {
        self.cpu.is_extrapolation(rate)
    }
}

/// Models for every node of a DAG plus the stream manager, keyed by node name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSet(pub BTreeMap<String, NodeModel>);

impl ModelSet {
    pub fn new() -> Self {
        ModelSet::default()
    }

    pub fn insert(&mut self, model: NodeModel) {
        self.0.insert(model.node.clone(), model);
    }

    pub fn get(&self, node: &str) -> Option<&NodeModel> {
        self.0.get(node)
    }

    pub fn require(&self, node: &str) -> Result<&NodeModel> {
        self.get(node)
            .ok_or_else(|| Error::MissingModel(node.to_string()))
    }

    pub fn stream_manager(&self) -> Result<&NodeModel> {
        self.require(STREAM_MANAGER)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeModel> {
        self.0.values()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl FromIterator<NodeModel> for ModelSet {
    fn from_iter<I: IntoIterator<Item = NodeModel>>(iter: I) -> Self {
        let mut set = ModelSet::new();
        for m in iter {
            set.insert(m);
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_rate_from_cpu_line() {
        let m = NodeModel::from_cpu_line("W", 0.001, 0.05, 1.0);
        assert!((m.peak_rate(1.0) - 950.0).abs() < 1e-9);
        assert_eq!(m.peak_rate(0.01), 0.0);
    }

    #[test]
    fn peak_rate_capped_by_saturation() {
        let mut m = NodeModel::from_cpu_line("W", 0.001, 0.0, 1.0);
        m.saturation_rate = Some(700.0);
        assert_eq!(m.peak_rate(1.0), 700.0);
        assert_eq!(m.peak_rate(0.5), 500.0);
    }

    #[test]
    fn flat_cpu_is_unbounded() {
        let m = NodeModel::from_cpu_line("X", 0.0, 0.1, 1.0);
        assert!(m.peak_rate(1.0).is_infinite());
    }

    #[test]
    fn model_file_layout() {
        let set: ModelSet = [NodeModel::from_cpu_line("W", 0.001, 0.0, 1.0)]
            .into_iter()
            .collect();
        let v = serde_json::to_value(&set).unwrap();
        assert_eq!(v["W"]["classification"], "cpu_bound");
        assert_eq!(v["W"]["cpu"]["slope"], 0.001);
        assert!(v["W"]["capacity"].is_null());
        let back = ModelSet::from_json(&v.to_string()).unwrap();
        assert_eq!(back.get("W").unwrap().gamma, 1.0);
    }
}
