//! Class hierarchy trees and the label-set cuts datasets draw from them.
//!
//! A [`ClassTree`] owns the canonical leaf order: leaves are numbered
//! depth-first with children visited in declaration order. Every network
//! output channel except the last (background) corresponds to one leaf.
//!
//! A [`LabelSet`] is an antichain of tree nodes. Member `k` stands for the set
//! `S_k` of leaves in its subtree; cut-level probabilities are obtained by
//! summing leaf probabilities over `S_k`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Recursive node description, the in-memory form of a hierarchy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeSpec>,
}

impl NodeSpec {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self { name: name.into(), children: Vec::new() }
    }

    pub fn branch(name: impl Into<String>, children: Vec<NodeSpec>) -> Self {
        Self { name: name.into(), children }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// 64-bit content hash, printed as 16 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Fingerprint(pub u64);

impl Fingerprint {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Fingerprint(u64::from_be_bytes(head))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl From<Fingerprint> for String {
    fn from(fp: Fingerprint) -> String {
        fp.to_string()
    }
}

impl TryFrom<String> for Fingerprint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        u64::from_str_radix(&s, 16)
            .map(Fingerprint)
            .map_err(|_| alloc::format!("invalid fingerprint {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HierarchyError {
    #[error("hierarchy has no nodes")]
    Empty,
    #[error("node name {0:?} appears more than once")]
    DuplicateName(String),
    #[error("hierarchy has more than one root: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("hierarchy has no root (every node has a parent)")]
    NoRoot,
    #[error("node {name:?} refers to parent index {parent}, which does not exist")]
    UnknownParent { name: String, parent: usize },
    #[error("node {0:?} is not reachable from the root (cycle)")]
    Unreachable(String),
    #[error("node name must not be empty")]
    EmptyName,
    #[error("unknown class name {0:?}")]
    UnknownName(String),
    #[error("label set is empty")]
    EmptyCut,
    #[error("class {0:?} is listed twice in the label set")]
    DuplicateMember(String),
    #[error("label set is not mutually exclusive: {descendant:?} is a descendant of {ancestor:?}")]
    AncestorPair { ancestor: String, descendant: String },
    #[error("label set was built for tree {found}, expected tree {expected}")]
    FingerprintMismatch { expected: Fingerprint, found: Fingerprint },
    #[error("node {0:?} is not a leaf")]
    NotALeaf(String),
    #[error("node id {0} out of range")]
    BadNodeId(usize),
    #[error("expected {expected} leaf probabilities, got {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    name: String,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
}

/// Immutable coarse-to-fine class tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTree {
    nodes: Vec<Node>,
    root: NodeId,
    by_name: BTreeMap<String, NodeId>,
    leaf_order: Vec<NodeId>,
    leaf_slot: Vec<Option<usize>>,
    // leaf index ranges: subtree of node n covers leaf_order[span[n].0..span[n].1]
    span: Vec<(usize, usize)>,
    fingerprint: Fingerprint,
}

impl ClassTree {
    /// Builds a tree from `(name, parent index)` entries. Children keep the
    /// relative order of their entries.
    pub fn from_parents(entries: &[(String, Option<usize>)]) -> Result<Self, HierarchyError> {
        if entries.is_empty() {
            return Err(HierarchyError::Empty);
        }
        let mut by_name = BTreeMap::new();
        for (i, (name, _)) in entries.iter().enumerate() {
            if name.is_empty() {
                return Err(HierarchyError::EmptyName);
            }
            if by_name.insert(name.clone(), NodeId(i)).is_some() {
                return Err(HierarchyError::DuplicateName(name.clone()));
            }
        }
        let mut nodes: Vec<Node> = entries
            .iter()
            .map(|(name, parent)| Node { name: name.clone(), parent: parent.map(NodeId), children: Vec::new() })
            .collect();
        let mut roots = Vec::new();
        for (i, (name, parent)) in entries.iter().enumerate() {
            match parent {
                None => roots.push(i),
                Some(p) if *p >= entries.len() => {
                    return Err(HierarchyError::UnknownParent { name: name.clone(), parent: *p })
                }
                Some(p) => nodes[*p].children.push(NodeId(i)),
            }
        }
        let root = match roots.as_slice() {
            [] => return Err(HierarchyError::NoRoot),
            [r] => NodeId(*r),
            many => {
                return Err(HierarchyError::MultipleRoots(
                    many.iter().map(|&r| entries[r].0.clone()).collect(),
                ))
            }
        };

        // Depth-first walk from the root; anything not visited sits on a cycle.
        let mut visited = alloc::vec![false; nodes.len()];
        let mut leaf_order = Vec::new();
        let mut span = alloc::vec![(0usize, 0usize); nodes.len()];
        let mut preorder = Vec::with_capacity(nodes.len());
        // (node, next child cursor)
        let mut stack = alloc::vec![(root, 0usize)];
        visited[root.0] = true;
        preorder.push(root);
        while let Some(top) = stack.last_mut() {
            let (node, cursor) = *top;
            let children = &nodes[node.0].children;
            if cursor < children.len() {
                top.1 += 1;
                let child = children[cursor];
                visited[child.0] = true;
                span[child.0].0 = leaf_order.len();
                preorder.push(child);
                stack.push((child, 0));
            } else {
                if children.is_empty() {
                    leaf_order.push(node);
                }
                span[node.0].1 = leaf_order.len();
                stack.pop();
            }
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(HierarchyError::Unreachable(nodes[i].name.clone()));
        }
        let mut leaf_slot = alloc::vec![None; nodes.len()];
        for (slot, leaf) in leaf_order.iter().enumerate() {
            leaf_slot[leaf.0] = Some(slot);
        }
        let fingerprint = tree_fingerprint(&nodes, &preorder);
        Ok(Self { nodes, root, by_name, leaf_order, leaf_slot, span, fingerprint })
    }

    pub fn from_spec(spec: &NodeSpec) -> Result<Self, HierarchyError> {
        let mut entries = Vec::new();
        let mut stack: Vec<(&NodeSpec, Option<usize>)> = alloc::vec![(spec, None)];
        while let Some((node, parent)) = stack.pop() {
            let id = entries.len();
            entries.push((node.name.clone(), parent));
            for child in node.children.iter().rev() {
                stack.push((child, Some(id)));
            }
        }
        Self::from_parents(&entries)
    }

    pub fn to_spec(&self) -> NodeSpec {
        fn build(tree: &ClassTree, id: NodeId) -> NodeSpec {
            NodeSpec {
                name: tree.nodes[id.0].name.clone(),
                children: tree.nodes[id.0].children.iter().map(|&c| build(tree, c)).collect(),
            }
        }
        build(self, self.root)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Hash of the leaf names in canonical order; fixes the meaning of every
    /// output channel of a network.
    pub fn leaf_fingerprint(&self) -> Fingerprint {
        let mut bytes = Vec::new();
        for leaf in &self.leaf_order {
            bytes.extend_from_slice(self.nodes[leaf.0].name.as_bytes());
            bytes.push(b'\n');
        }
        Fingerprint::of_bytes(&bytes)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of leaves, `c`.
    pub fn leaf_count(&self) -> usize {
        self.leaf_order.len()
    }

    pub fn leaf_order(&self) -> &[NodeId] {
        &self.leaf_order
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    /// Dense leaf index of `id`, if it is a leaf.
    pub fn leaf_index(&self, id: NodeId) -> Option<usize> {
        self.leaf_slot.get(id.0).copied().flatten()
    }

    /// Leaf indices below `id` (itself, for a leaf), in canonical order.
    pub fn leaves_under(&self, id: NodeId) -> core::ops::Range<usize> {
        let (lo, hi) = self.span[id.0];
        lo..hi
    }

    /// True when `ancestor` is a strict ancestor of `node`.
    pub fn is_ancestor(&self, ancestor: NodeId, node: NodeId) -> bool {
        let mut cur = self.nodes[node.0].parent;
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.nodes[p.0].parent;
        }
        false
    }

    /// Ancestor of `id` that is a direct child of the root (or `id` itself).
    pub fn top_branch(&self, id: NodeId) -> NodeId {
        let mut cur = id;
        while let Some(p) = self.nodes[cur.0].parent {
            if p == self.root {
                return cur;
            }
            cur = p;
        }
        cur
    }

    fn check_id(&self, id: NodeId) -> Result<(), HierarchyError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(HierarchyError::BadNodeId(id.0))
        }
    }
}

fn tree_fingerprint(nodes: &[Node], preorder: &[NodeId]) -> Fingerprint {
    let mut pos = alloc::vec![0usize; nodes.len()];
    for (i, id) in preorder.iter().enumerate() {
        pos[id.0] = i;
    }
    let mut bytes = Vec::new();
    for id in preorder {
        let node = &nodes[id.0];
        bytes.extend_from_slice(node.name.as_bytes());
        bytes.push(0);
        match node.parent {
            Some(p) => bytes.extend_from_slice(&(pos[p.0] as u64).to_le_bytes()),
            None => bytes.extend_from_slice(&u64::MAX.to_le_bytes()),
        }
        bytes.push(b'\n');
    }
    Fingerprint::of_bytes(&bytes)
}

/// A validated cut of a [`ClassTree`]: the label vocabulary of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    tree_fingerprint: Fingerprint,
    members: Vec<NodeId>,
    names: Vec<String>,
    leaves: Vec<Vec<usize>>,
    leaf_member: Vec<Option<usize>>,
    leaf_members: bool,
    fingerprint: Fingerprint,
}

impl LabelSet {
    /// Validates `names` as an antichain of `tree` and materializes each `S_k`.
    pub fn new<S: AsRef<str>>(tree: &ClassTree, names: &[S]) -> Result<Self, HierarchyError> {
        if names.is_empty() {
            return Err(HierarchyError::EmptyCut);
        }
        let mut members = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let id = tree.find(name).ok_or_else(|| HierarchyError::UnknownName(name.into()))?;
            if members.contains(&id) {
                return Err(HierarchyError::DuplicateMember(name.into()));
            }
            members.push(id);
        }
        for &a in &members {
            for &b in &members {
                if tree.is_ancestor(a, b) {
                    return Err(HierarchyError::AncestorPair {
                        ancestor: tree.name(a).into(),
                        descendant: tree.name(b).into(),
                    });
                }
            }
        }
        let mut leaf_member = alloc::vec![None; tree.leaf_count()];
        let leaves: Vec<Vec<usize>> = members
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let set: Vec<usize> = tree.leaves_under(id).collect();
                for &j in &set {
                    leaf_member[j] = Some(k);
                }
                set
            })
            .collect();
        let names: Vec<String> = members.iter().map(|&id| tree.name(id).to_string()).collect();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&tree.fingerprint().0.to_le_bytes());
        for n in &names {
            bytes.extend_from_slice(n.as_bytes());
            bytes.push(0);
        }
        Ok(Self {
            tree_fingerprint: tree.fingerprint(),
            leaf_members: members.iter().all(|&id| tree.is_leaf(id)),
            members,
            names,
            leaves,
            leaf_member,
            fingerprint: Fingerprint::of_bytes(&bytes),
        })
    }

    /// The cut consisting of every leaf, in canonical order.
    pub fn all_leaves(tree: &ClassTree) -> Self {
        let names: Vec<&str> = tree.leaf_order().iter().map(|&id| tree.name(id)).collect();
        Self::new(tree, &names).expect("leaves always form a valid cut")
    }

    pub fn tree_fingerprint(&self) -> Fingerprint {
        self.tree_fingerprint
    }

    /// Identifies this cut on this tree; used to tag training log rows.
    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Number of members, `m`.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `S_k`: dense leaf indices under member `k`.
    pub fn leaves(&self, k: usize) -> &[usize] {
        &self.leaves[k]
    }

    /// Member covering dense leaf index `j`, if any.
    pub fn member_of_leaf(&self, j: usize) -> Option<usize> {
        self.leaf_member.get(j).copied().flatten()
    }

    /// True when every member is a leaf, so every `S_k` is a singleton.
    pub fn is_leaf_cut(&self) -> bool {
        self.leaf_members
    }

    pub fn check_tree(&self, tree: &ClassTree) -> Result<(), HierarchyError> {
        if self.tree_fingerprint == tree.fingerprint() {
            Ok(())
        } else {
            Err(HierarchyError::FingerprintMismatch {
                expected: tree.fingerprint(),
                found: self.tree_fingerprint,
            })
        }
    }

    /// Allocation-free projection; `out` must have `m` entries.
    pub fn project_into(&self, leaf_probs: &[f64], out: &mut [f64]) {
        for (k, set) in self.leaves.iter().enumerate() {
            let mut s = 0.0;
            for &j in set {
                s += leaf_probs[j];
            }
            out[k] = s;
        }
    }
}

/// Validates `names` as a cut of `tree`.
pub fn validate_cut<S: AsRef<str>>(tree: &ClassTree, names: &[S]) -> Result<LabelSet, HierarchyError> {
    LabelSet::new(tree, names)
}

/// Sums leaf probabilities over each `S_k`.
pub fn project_distribution(
    tree: &ClassTree,
    cut: &LabelSet,
    leaf_probs: &[f64],
) -> Result<Vec<f64>, HierarchyError> {
    cut.check_tree(tree)?;
    if leaf_probs.len() != tree.leaf_count() {
        return Err(HierarchyError::LengthMismatch { expected: tree.leaf_count(), found: leaf_probs.len() });
    }
    let mut out = alloc::vec![0.0; cut.len()];
    cut.project_into(leaf_probs, &mut out);
    Ok(out)
}

/// Cut member whose subtree contains `leaf`, or `None` when the cut does not
/// cover it.
pub fn project_label(tree: &ClassTree, cut: &LabelSet, leaf: NodeId) -> Result<Option<usize>, HierarchyError> {
    cut.check_tree(tree)?;
    tree.check_id(leaf)?;
    let j = tree.leaf_index(leaf).ok_or_else(|| HierarchyError::NotALeaf(tree.name(leaf).into()))?;
    Ok(cut.member_of_leaf(j))
}
