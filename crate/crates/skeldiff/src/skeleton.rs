//! Skeletal topology, topology-preserving pooling plans, and the left/right
//! counterpart map used by attention mirroring.
//!
//! A topology is a joint tree with per-joint feature widths: 7 channels for the
//! root joint, 13 for foot/toe joints (extra contact label), 12 otherwise.
//! Pooling plans contract connected groups of joints stage by stage down to the
//! 7 atomic joints (root, spine, head, both arms, both legs).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Default 22-joint skeleton with a two-stage pooling plan, in the same
/// key/value tree format accepted by [`load_skeleton_file`].
pub const DEFAULT_SKELETON_TOML: &str = include_str!("../assets/skeleton22.toml");

pub const ATOMIC_JOINTS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Center,
}

/// One joint in a topology description file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Parent joint name; empty string marks the root.
    #[serde(default)]
    pub parent: String,
    #[serde(default = "center")]
    pub side: Side,
    /// Foot/toe joints carry a contact-label channel (feature width 13).
    #[serde(default)]
    pub foot: bool,
}

fn center() -> Side {
    Side::Center
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub joint_names: Vec<String>,
    /// Per-joint parent index; `None` for the root.
    pub parent: Vec<Option<usize>>,
    /// Per-joint feature width D_j.
    pub feature_dim: Vec<usize>,
    pub side_tag: Vec<Side>,
    pub foot: Vec<bool>,
    /// Tree adjacency N(j), symmetric by construction.
    pub neighbors: Vec<Vec<usize>>,
}

impl SkeletonTopology {
    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Total width of a flattened pose vector (sum of D_j).
    pub fn flat_width(&self) -> usize {
        self.feature_dim.iter().sum()
    }

    pub fn root(&self) -> usize {
        self.parent.iter().position(|p| p.is_none()).expect("validated topology has a root")
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }
}

/// Builds a validated topology from a joint list.
///
/// Feature widths follow the fixed rule: 7 for the root, 13 for foot/toe
/// joints, 12 otherwise.
pub fn build_topology(spec: &[JointSpec]) -> Result<SkeletonTopology> {
    if spec.is_empty() {
        return Err(Error::Topology("joint list is empty".into()));
    }
    let mut index = BTreeMap::new();
    for (i, j) in spec.iter().enumerate() {
        if index.insert(j.name.clone(), i).is_some() {
            return Err(Error::Topology(format!("duplicate joint name '{}'", j.name)));
        }
    }
    let mut parent = Vec::with_capacity(spec.len());
    let mut roots = 0usize;
    for (i, j) in spec.iter().enumerate() {
        if j.parent.is_empty() {
            roots += 1;
            parent.push(None);
        } else {
            let p = *index.get(&j.parent).ok_or_else(|| {
                Error::Topology(format!("joint '{}' has unknown parent '{}'", j.name, j.parent))
            })?;
            if p == i {
                return Err(Error::Topology(format!("joint '{}' is its own parent", j.name)));
            }
            parent.push(Some(p));
        }
    }
    if roots == 0 {
        return Err(Error::Topology("no root joint (every joint has a parent)".into()));
    }
    if roots > 1 {
        return Err(Error::Topology(format!("{roots} root joints, expected exactly one")));
    }
    // Walking to the root from every joint both detects cycles and proves the
    // parent links form a single tree.
    for start in 0..spec.len() {
        let mut seen = vec![false; spec.len()];
        let mut cur = start;
        while let Some(p) = parent[cur] {
            if seen[p] {
                return Err(Error::Topology(format!(
                    "cycle in parent links through joint '{}'",
                    spec[cur].name
                )));
            }
            seen[p] = true;
            cur = p;
        }
    }
    build_topology_unchecked(spec, parent)
}

/// Shared tail of [`build_topology`]: derives adjacency and feature widths.
fn build_topology_unchecked(
    spec: &[JointSpec],
    parent: Vec<Option<usize>>,
) -> Result<SkeletonTopology> {
    let mut neighbors = vec![Vec::new(); spec.len()];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = *p {
            neighbors[i].push(p);
            neighbors[p].push(i);
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
    }
    let feature_dim = spec
        .iter()
        .zip(&parent)
        .map(|(j, p)| match (p, j.foot) {
            (None, _) => 7,
            (_, true) => 13,
            (_, false) => 12,
        })
        .collect();
    Ok(SkeletonTopology {
        joint_names: spec.iter().map(|j| j.name.clone()).collect(),
        parent,
        feature_dim,
        side_tag: spec.iter().map(|j| j.side).collect(),
        foot: spec.iter().map(|j| j.foot).collect(),
        neighbors,
    })
}

/// One group of a pooling stage, by member joint names of the incoming stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolingGroup {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolingStageSpec {
    #[serde(default)]
    pub name: String,
    pub groups: Vec<PoolingGroup>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolingPlan {
    pub stages: Vec<PoolingStageSpec>,
}

/// A pooling stage annotated with the contracted topology it produces.
#[derive(Debug, Clone)]
pub struct ValidatedStage {
    /// Incoming joint index -> group id.
    pub assignment: Vec<usize>,
    /// Group id -> member joint indices of the incoming topology.
    pub groups: Vec<Vec<usize>>,
    pub topology: SkeletonTopology,
}

#[derive(Debug, Clone)]
pub struct ValidatedPlan {
    pub base: SkeletonTopology,
    pub stages: Vec<ValidatedStage>,
}

impl ValidatedPlan {
    /// Topology after `n` stages; `n = 0` is the base skeleton.
    pub fn topology_at(&self, n: usize) -> &SkeletonTopology {
        if n == 0 {
            &self.base
        } else {
            &self.stages[n - 1].topology
        }
    }

    pub fn atomic(&self) -> &SkeletonTopology {
        self.topology_at(self.stages.len())
    }
}

/// Validates a pooling plan against a topology: every group must be a connected
/// subtree of the incoming skeleton, every incoming joint must land in exactly
/// one group, and the final stage must yield the 7 atomic joints.
pub fn validate_pooling_plan(
    topology: &SkeletonTopology,
    plan: &PoolingPlan,
) -> Result<ValidatedPlan> {
    if plan.stages.is_empty() {
        return Err(Error::PoolingPlan("plan has no stages".into()));
    }
    let mut current = topology.clone();
    let mut stages = Vec::new();
    for (si, stage) in plan.stages.iter().enumerate() {
        let validated = validate_stage(&current, stage)
            .map_err(|e| Error::PoolingPlan(format!("stage {si} ('{}'): {e}", stage.name)))?;
        current = validated.topology.clone();
        stages.push(validated);
    }
    if current.n_joints() != ATOMIC_JOINTS {
        return Err(Error::PoolingPlan(format!(
            "final stage yields {} joints, expected {ATOMIC_JOINTS}",
            current.n_joints()
        )));
    }
    let lefts = current.side_tag.iter().filter(|s| **s == Side::Left).count();
    let rights = current.side_tag.iter().filter(|s| **s == Side::Right).count();
    if lefts != 2 || rights != 2 {
        return Err(Error::PoolingPlan(format!(
            "atomic stage must have two left and two right groups (arms + legs), got {lefts} left / {rights} right"
        )));
    }
    Ok(ValidatedPlan { base: topology.clone(), stages })
}

fn validate_stage(incoming: &SkeletonTopology, stage: &PoolingStageSpec) -> Result<ValidatedStage> {
    let nj = incoming.n_joints();
    let mut assignment = vec![usize::MAX; nj];
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(stage.groups.len());
    for (gi, g) in stage.groups.iter().enumerate() {
        if g.members.is_empty() {
            return Err(Error::PoolingPlan(format!("group '{}' is empty", g.name)));
        }
        let mut members = Vec::with_capacity(g.members.len());
        for m in &g.members {
            let j = incoming
                .joint_index(m)
                .ok_or_else(|| Error::PoolingPlan(format!("group '{}': unknown joint '{m}'", g.name)))?;
            if assignment[j] != usize::MAX {
                return Err(Error::PoolingPlan(format!(
                    "joint '{m}' assigned to more than one group"
                )));
            }
            assignment[j] = gi;
            members.push(j);
        }
        if !is_connected_subtree(incoming, &members) {
            return Err(Error::PoolingPlan(format!(
                "group '{}' is not a connected subtree of the incoming skeleton",
                g.name
            )));
        }
        groups.push(members);
    }
    if let Some(j) = assignment.iter().position(|&a| a == usize::MAX) {
        return Err(Error::PoolingPlan(format!(
            "joint '{}' is not assigned to any group",
            incoming.joint_names[j]
        )));
    }
    // The contracted parent of a group is the group of the unique member whose
    // parent lies outside the group (the group's local root).
    let mut spec = Vec::with_capacity(groups.len());
    let mut parent = Vec::with_capacity(groups.len());
    for (gi, members) in groups.iter().enumerate() {
        let heads: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&j| match incoming.parent[j] {
                None => true,
                Some(p) => assignment[p] != gi,
            })
            .collect();
        if heads.len() != 1 {
            return Err(Error::PoolingPlan(format!(
                "group '{}' contracts to {} local roots, expected 1",
                stage.groups[gi].name,
                heads.len()
            )));
        }
        let head = heads[0];
        parent.push(incoming.parent[head].map(|p| assignment[p]));
        let sides: Vec<Side> = members.iter().map(|&j| incoming.side_tag[j]).collect();
        let side = if sides.iter().all(|s| *s == Side::Left) {
            Side::Left
        } else if sides.iter().all(|s| *s == Side::Right) {
            Side::Right
        } else {
            Side::Center
        };
        let is_root_group = incoming.parent[head].is_none();
        spec.push(JointSpec {
            name: stage.groups[gi].name.clone(),
            parent: String::new(), // filled via the parent vector below
            side,
            foot: !is_root_group && members.iter().any(|&j| incoming.foot[j]),
        });
    }
    let topology = build_topology_unchecked(&spec, parent)?;
    // Contracting connected subtrees of a tree always yields a tree; assert the
    // homeomorphism check anyway (single root, acyclic is implied by edge count).
    let roots = topology.parent.iter().filter(|p| p.is_none()).count();
    if roots != 1 {
        return Err(Error::PoolingPlan(format!("contracted graph has {roots} roots")));
    }
    Ok(ValidatedStage { assignment, groups, topology })
}

fn is_connected_subtree(topology: &SkeletonTopology, members: &[usize]) -> bool {
    let inside = |j: usize| members.contains(&j);
    let mut visited = vec![members[0]];
    let mut stack = vec![members[0]];
    while let Some(j) = stack.pop() {
        for &n in &topology.neighbors[j] {
            if inside(n) && !visited.contains(&n) {
                visited.push(n);
                stack.push(n);
            }
        }
    }
    visited.len() == members.len()
}

/// Involutive joint permutation exchanging left/right counterparts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterpartMap {
    pub mapping: Vec<usize>,
}

impl CounterpartMap {
    pub fn apply(&self, j: usize) -> usize {
        self.mapping[j]
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}

/// Derives the counterpart map from side tags and the `left`/`right` naming
/// convention. Center joints map to themselves; every left joint must pair
/// with exactly one right joint whose name differs only in the side marker.
pub fn counterpart_map(topology: &SkeletonTopology) -> Result<CounterpartMap> {
    let mut mapping = vec![usize::MAX; topology.n_joints()];
    let mut by_key: BTreeMap<String, usize> = BTreeMap::new();
    for (j, side) in topology.side_tag.iter().enumerate() {
        match side {
            Side::Center => mapping[j] = j,
            Side::Left | Side::Right => {
                let key = sided_key(&topology.joint_names[j], *side).ok_or_else(|| {
                    Error::Counterpart(format!(
                        "joint '{}' is tagged {:?} but its name carries no left/right marker",
                        topology.joint_names[j], side
                    ))
                })?;
                if let Some(&other) = by_key.get(&key) {
                    if topology.side_tag[other] == *side {
                        return Err(Error::Counterpart(format!(
                            "joints '{}' and '{}' resolve to the same side and key",
                            topology.joint_names[other], topology.joint_names[j]
                        )));
                    }
                    mapping[j] = other;
                    mapping[other] = j;
                } else {
                    by_key.insert(key, j);
                }
            }
        }
    }
    if let Some(j) = mapping.iter().position(|&m| m == usize::MAX) {
        return Err(Error::Counterpart(format!(
            "joint '{}' has no counterpart",
            topology.joint_names[j]
        )));
    }
    Ok(CounterpartMap { mapping })
}

/// Canonical pairing key: the joint name with its side marker removed.
fn sided_key(name: &str, side: Side) -> Option<String> {
    let lower = name.to_lowercase();
    let (this, _other) = match side {
        Side::Left => ("left", "right"),
        Side::Right => ("right", "left"),
        Side::Center => return None,
    };
    let short = &this[..1];
    for (pat, repl) in [
        (format!("{short}_"), "*_".to_string()),
        (format!("{this}_"), "*_".to_string()),
        (format!("_{short}"), "_*".to_string()),
        (format!("_{this}"), "_*".to_string()),
        (this.to_string(), "*".to_string()),
    ] {
        if lower.starts_with(&pat) {
            return Some(format!("{repl}{}", &lower[pat.len()..]));
        }
        if lower.ends_with(&pat) {
            return Some(format!("{}{repl}", &lower[..lower.len() - pat.len()]));
        }
    }
    lower.find(this).map(|pos| format!("{}*{}", &lower[..pos], &lower[pos + this.len()..]))
}

#[derive(Debug, Deserialize, Serialize)]
struct SkeletonFile {
    joints: Vec<JointSpec>,
    #[serde(default)]
    stages: Vec<PoolingStageSpec>,
}

/// Parses a topology + pooling plan from TOML text. See
/// `assets/skeleton22.toml` for the schema.
pub fn parse_skeleton_toml(text: &str) -> Result<(SkeletonTopology, PoolingPlan)> {
    let file: SkeletonFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("skeleton file: {e}")))?;
    let topology = build_topology(&file.joints)?;
    Ok((topology, PoolingPlan { stages: file.stages }))
}

pub fn load_skeleton_file(path: &Path) -> Result<(SkeletonTopology, PoolingPlan)> {
    parse_skeleton_toml(&std::fs::read_to_string(path)?)
}

/// The built-in 22-joint skeleton and its validated two-stage pooling plan.
pub fn default_skeleton() -> (SkeletonTopology, ValidatedPlan) {
    let (topology, plan) =
        parse_skeleton_toml(DEFAULT_SKELETON_TOML).expect("built-in skeleton parses");
    let validated = validate_pooling_plan(&topology, &plan).expect("built-in plan validates");
    (topology, validated)
}
