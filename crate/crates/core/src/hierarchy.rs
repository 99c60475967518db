//! The three-level part graph: nodes, decomposition/composition/dependency
//! edges and the mapping from dataset label indices to leaf nodes.
//!
//! Composition edges are never stored; each decomposition edge `u -> v`
//! implies the composition edge `v -> u`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PASCAL6: &str = include_str!("../configs/pascal6.hierarchy");
pub const SYNTHETIC6: &str = include_str!("../configs/synthetic6.hierarchy");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub name: String,
    pub level: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub index: u32,
    pub node: String,
}

/// Hierarchy as written in a `.hierarchy` config file (TOML).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub background_index: u32,
    #[serde(default)]
    pub decomposition: Vec<(String, String)>,
    #[serde(default)]
    pub dependency: Vec<(String, String)>,
    #[serde(default)]
    pub labels: Vec<LabelEntry>,
    pub nodes: Vec<NodeSpec>,
}

impl HierarchySpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("hierarchy: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("hierarchy spec serializes")
    }
}

/// Index of a node inside a [`ValidatedHierarchy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeIdx(pub usize);

impl fmt::Display for NodeIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Decomposition,
    Composition,
    Dependency,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::Decomposition, RelationKind::Composition, RelationKind::Dependency];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Decomposition => "decomposition",
            RelationKind::Composition => "composition",
            RelationKind::Dependency => "dependency",
        }
    }
}

/// A directed, typed edge `from -> to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: NodeIdx,
    pub to: NodeIdx,
    pub kind: RelationKind,
}

/// Incoming neighbourhood of a node: the index sets summed over when
/// aggregating messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeNeighborhood {
    pub node: NodeIdx,
    pub parents: BTreeSet<NodeIdx>,
    pub children: BTreeSet<NodeIdx>,
    pub siblings: BTreeSet<NodeIdx>,
}

impl NodeNeighborhood {
    pub fn in_degree(&self) -> usize {
        self.parents.len() + self.children.len() + self.siblings.len()
    }
}

/// Frozen hierarchy with neighbourhood tables precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedHierarchy {
    spec: HierarchySpec,
    ids: Vec<String>,
    names: Vec<String>,
    levels: Vec<u8>,
    parent: Vec<Option<NodeIdx>>,
    children: Vec<Vec<NodeIdx>>,
    dep_out: Vec<Vec<NodeIdx>>,
    dep_in: Vec<Vec<NodeIdx>>,
    label_to_leaf: BTreeMap<u32, NodeIdx>,
    leaf_label: BTreeMap<NodeIdx, u32>,
}

impl ValidatedHierarchy {
    pub fn pascal6() -> Self {
        validate(HierarchySpec::parse(PASCAL6).expect("shipped config parses")).expect("shipped config is valid")
    }

    pub fn synthetic6() -> Self {
        validate(HierarchySpec::parse(SYNTHETIC6).expect("shipped config parses")).expect("shipped config is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        validate(HierarchySpec::load(path)?)
    }

    pub fn spec(&self) -> &HierarchySpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeIdx> {
        (0..self.ids.len()).map(NodeIdx)
    }

    pub fn id(&self, v: NodeIdx) -> &str {
        &self.ids[v.0]
    }

    pub fn name(&self, v: NodeIdx) -> &str {
        &self.names[v.0]
    }

    pub fn level(&self, v: NodeIdx) -> u8 {
        self.levels[v.0]
    }

    pub fn find(&self, id: &str) -> Result<NodeIdx> {
        self.ids
            .iter()
            .position(|s| s == id)
            .map(NodeIdx)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Nodes of level `l` in config order.
    pub fn level_nodes(&self, l: u8) -> Vec<NodeIdx> {
        self.nodes().filter(|&v| self.level(v) == l).collect()
    }

    pub fn parent(&self, v: NodeIdx) -> Option<NodeIdx> {
        self.parent[v.0]
    }

    pub fn children(&self, v: NodeIdx) -> &[NodeIdx] {
        &self.children[v.0]
    }

    /// Dependency targets of `u` (`u -> v` edges), the channels of `u`'s
    /// dependency attention.
    pub fn dependency_targets(&self, u: NodeIdx) -> &[NodeIdx] {
        &self.dep_out[u.0]
    }

    /// Dependency sources of `v` (`u -> v` edges).
    pub fn dependency_sources(&self, v: NodeIdx) -> &[NodeIdx] {
        &self.dep_in[v.0]
    }

    pub fn neighborhood(&self, v: NodeIdx) -> Result<NodeNeighborhood> {
        if v.0 >= self.len() {
            return Err(Error::UnknownNode(v.to_string()));
        }
        Ok(NodeNeighborhood {
            node: v,
            parents: self.parent[v.0].into_iter().collect(),
            children: self.children[v.0].iter().copied().collect(),
            siblings: self.dep_in[v.0].iter().copied().collect(),
        })
    }

    pub fn neighborhood_of(&self, id: &str) -> Result<NodeNeighborhood> {
        self.neighborhood(self.find(id)?)
    }

    pub fn decomposition_edges(&self) -> Vec<Edge> {
        self.nodes()
            .flat_map(|u| self.children(u).iter().map(move |&v| Edge { from: u, to: v, kind: RelationKind::Decomposition }))
            .collect()
    }

    pub fn composition_edges(&self) -> Vec<Edge> {
        self.decomposition_edges()
            .into_iter()
            .map(|e| Edge { from: e.to, to: e.from, kind: RelationKind::Composition })
            .collect()
    }

    pub fn dependency_edges(&self) -> Vec<Edge> {
        self.nodes()
            .flat_map(|u| {
                self.dependency_targets(u).iter().map(move |&v| Edge { from: u, to: v, kind: RelationKind::Dependency })
            })
            .collect()
    }

    /// Every directed edge of every kind, sorted.
    pub fn all_edges(&self) -> Vec<Edge> {
        let mut e = self.decomposition_edges();
        e.extend(self.composition_edges());
        e.extend(self.dependency_edges());
        e.sort();
        e
    }

    pub fn background_index(&self) -> u32 {
        self.spec.background_index
    }

    pub fn leaf_for_label(&self, label: u32) -> Option<NodeIdx> {
        self.label_to_leaf.get(&label).copied()
    }

    pub fn label_of_leaf(&self, v: NodeIdx) -> Option<u32> {
        self.leaf_label.get(&v).copied()
    }

    /// Labelled leaves in level order; position `k` is prediction channel `k+1`.
    pub fn leaves(&self) -> Vec<NodeIdx> {
        self.level_nodes(1)
    }

    /// Nodes with no edges at all (accessory labels).
    pub fn is_isolated(&self, v: NodeIdx) -> bool {
        self.parent[v.0].is_none()
            && self.children[v.0].is_empty()
            && self.dep_in[v.0].is_empty()
            && self.dep_out[v.0].is_empty()
    }

    /// Leaf masks from an integer label map, one per leaf in [`Self::leaves`] order.
    pub fn leaf_masks_from_labels(&self, labels: &LabelMap) -> Result<Vec<BinaryMask>> {
        self.check_labels(labels)?;
        Ok(self
            .leaves()
            .into_iter()
            .map(|leaf| {
                let want = self.leaf_label[&leaf];
                BinaryMask {
                    width: labels.width,
                    height: labels.height,
                    data: labels.data.iter().map(|&l| l == want).collect(),
                }
            })
            .collect())
    }

    pub fn check_labels(&self, labels: &LabelMap) -> Result<()> {
        let bad: BTreeSet<u32> = labels
            .data
            .iter()
            .copied()
            .filter(|&l| l != self.spec.background_index && !self.label_to_leaf.contains_key(&l))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownLabel(bad.into_iter().collect()))
        }
    }
}

/// Row-major `height × width` integer label map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u32>) -> Self {
        assert_eq!(width * height, data.len(), "label map size");
        LabelMap { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: u32) -> Self {
        LabelMap { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }
}

/// Row-major `height × width` binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask { width, height, data: vec![false; width * height] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }
}

/// Checks a parsed spec and builds the neighbourhood tables.
pub fn validate(spec: HierarchySpec) -> Result<ValidatedHierarchy> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if !(1..=3).contains(&n.level) {
            return Err(Error::InvalidHierarchy(format!("node {} has level {} (must be 1..=3)", n.id, n.level)));
        }
        if index.insert(n.id.as_str(), i).is_some() {
            return Err(Error::InvalidHierarchy(format!("duplicate node id {}", n.id)));
        }
    }
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownNode(id.to_string()));
    let n = spec.nodes.len();
    let levels: Vec<u8> = spec.nodes.iter().map(|s| s.level).collect();

    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (p, c) in &spec.decomposition {
        let (pi, ci) = (lookup(p)?, lookup(c)?);
        if pi == ci {
            return Err(Error::Cycle { parent: p.clone(), child: c.clone() });
        }
        if let Some(prev) = parent[ci] {
            return Err(Error::MultiParent {
                child: c.clone(),
                first: spec.nodes[prev].id.clone(),
                second: p.clone(),
            });
        }
        parent[ci] = Some(pi);
        children[pi].push(ci);
    }
    // With at most one parent per node, a cycle shows up as a parent chain
    // that returns to its start.
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while let Some(p) = parent[cur] {
            steps += 1;
            if p == start || steps > n {
                return Err(Error::Cycle {
                    parent: spec.nodes[p].id.clone(),
                    child: spec.nodes[cur].id.clone(),
                });
            }
            cur = p;
        }
    }
    for (c, p) in parent.iter().enumerate() {
        if let Some(p) = *p {
            if levels[p] != levels[c] + 1 {
                return Err(Error::InvalidHierarchy(format!(
                    "decomposition edge {} -> {} must go from level {} to level {}",
                    spec.nodes[p].id,
                    spec.nodes[c].id,
                    levels[c] + 1,
                    levels[c]
                )));
            }
        }
    }
    let roots = levels.iter().filter(|&&l| l == 3).count();
    if levels.contains(&2) && roots != 1 {
        return Err(Error::InvalidHierarchy(format!("expected exactly one level-3 root, found {roots}")));
    }

    let mut dep_out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dep_in: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (u, v) in &spec.dependency {
        let (ui, vi) = (lookup(u)?, lookup(v)?);
        if levels[ui] != levels[vi] {
            return Err(Error::CrossLevelDependency {
                u: u.clone(),
                v: v.clone(),
                u_level: levels[ui],
                v_level: levels[vi],
            });
        }
        if ui == vi {
            return Err(Error::InvalidHierarchy(format!("dependency self-loop on {u}")));
        }
        if dep_out[ui].contains(&vi) {
            return Err(Error::InvalidHierarchy(format!("duplicate dependency edge {u} -> {v}")));
        }
        if parent[ui] == Some(vi) || parent[vi] == Some(ui) {
            return Err(Error::InvalidHierarchy(format!("dependency edge {u} -> {v} duplicates a part-whole edge")));
        }
        dep_out[ui].push(vi);
        dep_in[vi].push(ui);
    }

    let mut label_to_leaf = BTreeMap::new();
    let mut leaf_label = BTreeMap::new();
    for entry in &spec.labels {
        let node = lookup(&entry.node).map_err(|_| {
            Error::LabelSchema(format!("label {} maps to unknown node {}", entry.index, entry.node))
        })?;
        if entry.index == spec.background_index {
            return Err(Error::LabelSchema(format!("label {} is the background index", entry.index)));
        }
        if levels[node] != 1 {
            return Err(Error::LabelSchema(format!(
                "label {} maps to {} at level {}, not a leaf",
                entry.index, entry.node, levels[node]
            )));
        }
        if label_to_leaf.insert(entry.index, NodeIdx(node)).is_some() {
            return Err(Error::LabelSchema(format!("label {} listed twice", entry.index)));
        }
        if leaf_label.insert(NodeIdx(node), entry.index).is_some() {
            return Err(Error::LabelSchema(format!("leaf {} has more than one label", entry.node)));
        }
    }
    for (i, &l) in levels.iter().enumerate() {
        if l == 1 && !leaf_label.contains_key(&NodeIdx(i)) {
            return Err(Error::LabelSchema(format!("leaf {} has no label index", spec.nodes[i].id)));
        }
    }

    let to_idx = |v: Vec<Vec<usize>>| -> Vec<Vec<NodeIdx>> {
        v.into_iter().map(|l| l.into_iter().map(NodeIdx).collect()).collect()
    };
    Ok(ValidatedHierarchy {
        ids: spec.nodes.iter().map(|s| s.id.clone()).collect(),
        names: spec.nodes.iter().map(|s| s.name.clone()).collect(),
        levels,
        parent: parent.into_iter().map(|p| p.map(NodeIdx)).collect(),
        children: to_idx(children),
        dep_out: to_idx(dep_out),
        dep_in: to_idx(dep_in),
        label_to_leaf,
        leaf_label,
        spec,
    })
}
