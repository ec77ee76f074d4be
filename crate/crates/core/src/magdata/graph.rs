use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numerics::{MessageEdges, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

impl Modality {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Unassigned,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Unassigned => 0,
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Split::Unassigned,
            1 => Split::Train,
            2 => Split::Val,
            3 => Split::Test,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub values: Vec<usize>,
    pub num_classes: usize,
}

/// A multimodal attributed graph: undirected edges stored once, one feature
/// matrix per modality, one modality flagged as the alignment anchor.
///
/// Self-loops are never stored; message passing adds them logically.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    modalities: Vec<Modality>,
    anchor: usize,
    features: Vec<Tensor>,
    labels: Option<Labels>,
    node_splits: Option<Vec<Split>>,
    edge_splits: Option<Vec<Split>>,
    adjacency: Vec<Vec<usize>>,
}

impl MultimodalGraph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        modalities: Vec<Modality>,
        anchor: usize,
        features: Vec<Tensor>,
    ) -> Result<Self, DataError> {
        if modalities.is_empty() {
            return Err(DataError::Invalid("a graph needs at least one modality".into()));
        }
        if anchor >= modalities.len() {
            return Err(DataError::Invalid(format!(
                "anchor index {anchor} with {} modalities",
                modalities.len()
            )));
        }
        if features.len() != modalities.len() {
            return Err(DataError::Invalid("one feature matrix per modality".into()));
        }
        for (m, (x, spec)) in features.iter().zip(&modalities).enumerate() {
            if x.dims2() != (num_nodes, spec.dim) && !(num_nodes == 0 && x.is_empty()) {
                return Err(DataError::Record {
                    record: format!("features[{m}]"),
                    msg: format!("shape {:?}, expected {num_nodes}x{}", x.shape(), spec.dim),
                });
            }
        }
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for (i, &(u, v)) in edges.iter().enumerate() {
            let record = format!("edge {i}");
            if u >= num_nodes || v >= num_nodes {
                return Err(DataError::Record {
                    record,
                    msg: format!("endpoint ({u}, {v}) outside 0..{num_nodes}"),
                });
            }
            if u == v {
                return Err(DataError::Record { record, msg: "self-loop".into() });
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(DataError::Record { record, msg: format!("duplicate edge ({u}, {v})") });
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        adjacency.iter_mut().for_each(|a| a.sort_unstable());
        Ok(Self {
            num_nodes,
            edges,
            modalities,
            anchor,
            features,
            labels: None,
            node_splits: None,
            edge_splits: None,
            adjacency,
        })
    }

    pub fn with_labels(mut self, values: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if values.len() != self.num_nodes {
            return Err(DataError::Invalid("one label per node".into()));
        }
        if let Some(i) = values.iter().position(|&y| y >= num_classes) {
            return Err(DataError::Record {
                record: format!("label {i}"),
                msg: format!("class {} with {num_classes} classes", values[i]),
            });
        }
        self.labels = Some(Labels { values, num_classes });
        Ok(self)
    }

    pub fn with_node_splits(mut self, splits: Vec<Split>) -> Result<Self, DataError> {
        if splits.len() != self.num_nodes {
            return Err(DataError::Invalid("one split per node".into()));
        }
        self.node_splits = Some(splits);
        Ok(self)
    }

    pub fn with_edge_splits(mut self, splits: Vec<Split>) -> Result<Self, DataError> {
        if splits.len() != self.edges.len() {
            return Err(DataError::Invalid("one split per edge".into()));
        }
        self.edge_splits = Some(splits);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn node_splits(&self) -> Option<&[Split]> {
        self.node_splits.as_deref()
    }

    pub fn edge_splits(&self) -> Option<&[Split]> {
        self.edge_splits.as_deref()
    }

    /// Sorted undirected neighbours of `v`, excluding `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Modality names and dimensions, used to check schema compatibility.
    pub fn schema(&self) -> (Vec<Modality>, usize) {
        (self.modalities.clone(), self.anchor)
    }

    /// Whole-graph message edges: both directions of every edge plus self-loops.
    pub fn message_edges(&self) -> Arc<MessageEdges> {
        let pairs = self
            .edges
            .iter()
            .flat_map(|&(u, v)| [(u, v), (v, u)])
            .chain((0..self.num_nodes).map(|i| (i, i)));
        Arc::new(MessageEdges::new(self.num_nodes, pairs))
    }

    pub fn nodes_in_split(&self, split: Split) -> Vec<usize> {
        match &self.node_splits {
            Some(s) => (0..self.num_nodes).filter(|&i| s[i] == split).collect(),
            None => Vec::new(),
        }
    }
}
