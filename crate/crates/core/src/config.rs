//! Physical configurations: parallelism, container dimensions and packing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dag::LogicalDag;
use crate::error::{Error, Result};

/// One parallel copy of a DAG node, written `<node>-<k>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId {
    pub node: String,
    pub index: u32,
}

impl InstanceId {
    pub fn new(node: impl Into<String>, index: u32) -> Self {
        InstanceId {
            node: node.into(),
            index,
        }
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.node, self.index)
    }
}

impl FromStr for InstanceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (node, k) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::InvalidConfig(format!("instance id `{s}` is not <node>-<k>")))?;
        let index = k
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("instance id `{s}` has a bad index")))?;
        if node.is_empty() {
            return Err(Error::InvalidConfig(format!("instance id `{s}` has no node")));
        }
        Ok(InstanceId::new(node, index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainerDims {
    /// CPU cores.
    pub cpu: f64,
    /// Bytes.
    pub mem: f64,
    /// Bytes per second across the container boundary; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<f64>,
}

impl ContainerDims {
    pub fn new(cpu: f64, mem: f64) -> Self {
        ContainerDims {
            cpu,
            mem,
            link: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub parallelism: BTreeMap<String, u32>,
    pub container: ContainerDims,
    pub containers: u32,
    /// Instance id (`<node>-<k>`) to container index.
    pub packing: BTreeMap<String, u32>,
    /// Per-container dimensions that differ from `container`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub container_overrides: BTreeMap<u32, ContainerDims>,
}

impl Configuration {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Builds a configuration from an explicit layout: one list of node names per container.
    /// Instance indices are assigned per node in layout order.
    pub fn from_layout(dims: ContainerDims, layout: &[Vec<&str>]) -> Self {
        let mut parallelism: BTreeMap<String, u32> = BTreeMap::new();
        let mut packing = BTreeMap::new();
        for (c, nodes) in layout.iter().enumerate() {
            for node in nodes {
                let k = parallelism.entry(node.to_string()).or_insert(0);
                packing.insert(InstanceId::new(*node, *k).to_string(), c as u32);
                *k += 1;
            }
        }
        Configuration {
            parallelism,
            container: dims,
            containers: layout.len() as u32,
            packing,
            container_overrides: BTreeMap::new(),
        }
    }

    /// Round-robin packing of all instances (in DAG node order) over `containers` containers.
    pub fn round_robin(
        dag: &LogicalDag,
        parallelism: &BTreeMap<String, u32>,
        containers: u32,
        dims: ContainerDims,
    ) -> Self {
        let mut packing = BTreeMap::new();
        let mut next = 0u32;
        for node in &dag.nodes {
            for k in 0..parallelism.get(&node.name).copied().unwrap_or(0) {
                packing.insert(InstanceId::new(&node.name, k).to_string(), next % containers);
                next += 1;
            }
        }
        Configuration {
            parallelism: parallelism.clone(),
            container: dims,
            containers,
            packing,
            container_overrides: BTreeMap::new(),
        }
    }

    pub fn dims(&self, container: u32) -> &ContainerDims {
        self.container_overrides
            .get(&container)
            .unwrap_or(&self.container)
    }

    pub fn total_cpu(&self) -> f64 {
        (0..self.containers).map(|c| self.dims(c).cpu).sum()
    }

    pub fn total_instances(&self) -> u32 {
        self.parallelism.values().sum()
    }

    /// All instances in DAG node order, each with its container index.
    pub fn instances(&self, dag: &LogicalDag) -> Result<Vec<(InstanceId, u32)>> {
        let mut out = Vec::with_capacity(self.packing.len());
        for node in &dag.nodes {
            let p = self.parallelism.get(&node.name).copied().unwrap_or(0);
            for k in 0..p {
                let id = InstanceId::new(&node.name, k);
                let c = *self.packing.get(&id.to_string()).ok_or_else(|| {
                    Error::InvalidConfig(format!("instance {id} is not packed"))
                })?;
                out.push((id, c));
            }
        }
        Ok(out)
    }

    pub fn validate(&self, dag: &LogicalDag) -> Result<()> {
        if self.containers == 0 {
            return Err(Error::InvalidConfig("containers must be >= 1".into()));
        }
        for c in 0..self.containers {
            let d = self.dims(c);
            if !(d.cpu > 0.0) || !(d.mem > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "container {c} must have cpu > 0 and mem > 0"
                )));
            }
            if matches!(d.link, Some(l) if !(l > 0.0)) {
                return Err(Error::InvalidConfig(format!("container {c} has link <= 0")));
            }
        }
        if let Some(c) = self.container_overrides.keys().find(|&&c| c >= self.containers) {
            return Err(Error::InvalidConfig(format!(
                "override for nonexistent container {c}"
            )));
        }
        for node in &dag.nodes {
            match self.parallelism.get(&node.name) {
                Some(&p) if p >= 1 => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "node `{}` needs parallelism >= 1",
                        node.name
                    )))
                }
            }
        }
        if let Some(extra) = self.parallelism.keys().find(|n| dag.node(n).is_none()) {
            return Err(Error::InvalidConfig(format!(
                "parallelism given for unknown node `{extra}`"
            )));
        }
        let expected = self.instances(dag)?;
        if expected.len() != self.packing.len() {
            let known: std::collections::BTreeSet<String> =
                expected.iter().map(|(id, _)| id.to_string()).collect();
            let stray = self
                .packing
                .keys()
                .find(|k| !known.contains(*k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::InvalidConfig(format!(
                "packing lists instance `{stray}` not implied by parallelism"
            )));
        }
        if let Some((id, c)) = expected.iter().find(|(_, c)| *c >= self.containers) {
            return Err(Error::InvalidConfig(format!(
                "instance {id} packed to nonexistent container {c}"
            )));
        }
        Ok(())
    }
}
