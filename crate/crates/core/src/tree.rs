//! Scenario trees: the observable parameter process Z and its filtration,
//! given as data.  A tree carries a shared time grid t_0 = 0 < ... < t_K = T,
//! z-values on nodes and transition probabilities on edges; conditional
//! expectations given the observations up to a node are probability-weighted
//! averages over that node's children.  No law of Z beyond the tree is
//! assumed anywhere in the solver; Z is held constant on [t_k, t_{k+1}).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BhjbError, Result};
use crate::report::ValidationReport;

#[derive(Debug, Clone)]
pub struct TreeNode {
    /// External id from the tree file; internal code uses vector indices.
    pub id: u64,
    pub level: usize,
    pub z: Vec<f64>,
    /// Internal index of the parent; `None` exactly for the root.
    pub parent: Option<usize>,
    /// Transition probability from the parent (1 for the root).
    pub prob: f64,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub times: Vec<f64>,
    pub nodes: Vec<TreeNode>,
    /// Internal node indices grouped by level.
    pub levels: Vec<Vec<usize>>,
    /// Product of edge probabilities from the root, per node.
    pub path_probs: Vec<f64>,
    /// Marker from the Markov-chain loader; the expanded path tree is the
    /// same either way, recombination only shares z-values.
    pub recombining_hint: bool,
}

/// One value per tree node, indexed by internal node index.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeIndexed<V> {
    pub values: Vec<V>,
}

impl<V: Clone + Default> NodeIndexed<V> {
    pub fn new_default(tree: &ScenarioTree) -> Self {
        NodeIndexed { values: vec![V::default(); tree.nodes.len()] }
    }
}

impl<V> NodeIndexed<V> {
    pub fn from_values(tree: &ScenarioTree, values: Vec<V>) -> Result<Self> {
        if values.len() != tree.nodes.len() {
            return Err(BhjbError::Dimension(format!(
                "node-indexed data has {} entries for {} nodes",
                values.len(),
                tree.nodes.len()
            )));
        }
        Ok(NodeIndexed { values })
    }
}

impl ScenarioTree {
    /// Builds the internal structure from flat node records
    /// (id, level, z, parent id, prob).  Structural errors (unknown parent,
    /// duplicate id) are hard errors; probabilistic invariants are left to
    /// `validate_tree` so they can be reported with node ids.
    pub fn from_records(
        times: Vec<f64>,
        records: Vec<(u64, usize, Vec<f64>, Option<u64>, f64)>,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(BhjbError::Config("tree: needs at least two time levels".into()));
        }
        let mut index_of = std::collections::HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if index_of.insert(r.0, i).is_some() {
                return Err(BhjbError::Config(format!("tree: duplicate node id {}", r.0)));
            }
        }
        let mut nodes: Vec<TreeNode> = Vec::with_capacity(records.len());
        for (id, level, z, parent_id, prob) in &records {
            let parent = match parent_id {
                None => None,
                Some(pid) => Some(*index_of.get(pid).ok_or_else(|| {
                    BhjbError::Config(format!("tree: node {id} references unknown parent {pid}"))
                })?),
            };
            nodes.push(TreeNode {
                id: *id,
                level: *level,
                z: z.clone(),
                parent,
                prob: if parent.is_none() { 1.0 } else { *prob },
                children: Vec::new(),
            });
        }
        for i in 0..nodes.len() {
            if let Some(p) = nodes[i].parent {
                nodes[p].children.push(i);
            }
        }
        let depth = times.len() - 1;
        let mut levels = vec![Vec::new(); depth + 1];
        for (i, n) in nodes.iter().enumerate() {
            if n.level > depth {
                return Err(BhjbError::Config(format!(
                    "tree: node {} at level {} beyond last time level {depth}",
                    n.id, n.level
                )));
            }
            levels[n.level].push(i);
        }
        let mut path_probs = vec![0.0; nodes.len()];
        // parents appear before their children in level order
        for level in &levels {
            for &i in level {
                path_probs[i] = match nodes[i].parent {
                    None => 1.0,
                    Some(p) => path_probs[p] * nodes[i].prob,
                };
            }
        }
        Ok(ScenarioTree { times, nodes, levels, path_probs, recombining_hint: false })
    }

    pub fn depth(&self) -> usize {
        self.times.len() - 1
    }

    pub fn root(&self) -> usize {
        self.levels[0][0]
    }

    pub fn z_dim(&self) -> usize {
        self.nodes.get(self.levels[0][0]).map_or(0, |n| n.z.len())
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.nodes[node].children.is_empty()
    }

    /// Distinct z-values over all nodes, for validation sampling.
    pub fn z_values(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for n in &self.nodes {
            if !out.iter().any(|z| z == &n.z) {
                out.push(n.z.clone());
            }
        }
        out
    }
}

/// Checks every tree invariant and reports violations with node ids.
pub fn validate_tree(tree: &ScenarioTree) -> ValidationReport {
    let mut report = ValidationReport::default();
    let depth = tree.depth();

    let times_ok = tree.times.windows(2).all(|w| w[1] > w[0]) && tree.times[0] == 0.0;
    report.push(
        "time_grid",
        times_ok,
        format!("{} levels, t0 = {}, T = {}", tree.times.len(), tree.times[0], tree.times[depth]),
        None,
    );

    let roots: Vec<u64> =
        tree.nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
    let root_ok = roots.len() == 1
        && tree.nodes.iter().find(|n| n.parent.is_none()).map_or(false, |n| n.level == 0);
    report.push("unique_root", root_ok, format!("roots at k=0: {roots:?}"), None);

    let mut level_bad: Vec<u64> = Vec::new();
    for n in &tree.nodes {
        if let Some(p) = n.parent {
            if n.level != tree.nodes[p].level + 1 {
                level_bad.push(n.id);
            }
        }
    }
    report.push(
        "level_structure",
        level_bad.is_empty(),
        if level_bad.is_empty() {
            "every child one level below its parent".into()
        } else {
            format!("nodes with broken level links: {level_bad:?}")
        },
        None,
    );

    let prob_neg: Vec<u64> =
        tree.nodes.iter().filter(|n| !(n.prob >= 0.0) || !n.prob.is_finite()).map(|n| n.id).collect();
    report.push(
        "probabilities_nonnegative",
        prob_neg.is_empty(),
        if prob_neg.is_empty() { "all edge probabilities >= 0".into() } else { format!("negative probabilities at {prob_neg:?}") },
        None,
    );

    let mut sum_bad: Vec<(u64, f64)> = Vec::new();
    for (i, n) in tree.nodes.iter().enumerate() {
        if n.children.is_empty() {
            continue;
        }
        let s = crate::linalg::kahan_sum(n.children.iter().map(|&c| tree.nodes[c].prob));
        if (s - 1.0).abs() > 1e-12 {
            sum_bad.push((n.id, s));
        }
        let _ = i;
    }
    report.push(
        "children_probabilities",
        sum_bad.is_empty(),
        if sum_bad.is_empty() {
            "children probabilities sum to 1 within 1e-12".into()
        } else {
            format!("nodes with bad child probability sums: {sum_bad:?}")
        },
        None,
    );

    let leaf_bad: Vec<u64> = tree
        .nodes
        .iter()
        .filter(|n| n.children.is_empty() && n.level != depth)
        .map(|n| n.id)
        .collect();
    report.push(
        "leaves_at_last_level",
        leaf_bad.is_empty(),
        if leaf_bad.is_empty() { format!("all leaves at level {depth}") } else { format!("early leaves: {leaf_bad:?}") },
        None,
    );

    let z_bad: Vec<u64> = tree
        .nodes
        .iter()
        .filter(|n| n.z.len() != tree.z_dim() || n.z.iter().any(|v| !v.is_finite()))
        .map(|n| n.id)
        .collect();
    report.push(
        "z_values",
        z_bad.is_empty(),
        if z_bad.is_empty() { format!("z dimension {} everywhere, finite", tree.z_dim()) } else { format!("bad z at {z_bad:?}") },
        None,
    );

    let leaf_mass = crate::linalg::kahan_sum(
        tree.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.children.is_empty() && n.level == depth)
            .map(|(i, _)| tree.path_probs[i]),
    );
    report.push(
        "path_probability_mass",
        (leaf_mass - 1.0).abs() <= 1e-10 || !leaf_bad.is_empty() || !sum_bad.is_empty(),
        format!("total leaf path probability {leaf_mass:.12}"),
        None,
    );

    report
}

/// Tree accepted by `validate_tree`; solver entry points require it.
#[derive(Debug, Clone)]
pub struct ValidatedTree {
    tree: ScenarioTree,
    pub report: ValidationReport,
}

impl ValidatedTree {
    pub fn new(tree: ScenarioTree) -> Result<Self> {
        let report = validate_tree(&tree);
        if !report.accepted() {
            return Err(BhjbError::Validation(
                report.first_failure().unwrap_or_else(|| "unknown tree check".into()),
            ));
        }
        Ok(ValidatedTree { tree, report })
    }
}

impl std::ops::Deref for ValidatedTree {
    type Target = ScenarioTree;

    fn deref(&self) -> &ScenarioTree {
        &self.tree
    }
}

/// E{values | node}: probability-weighted average of the children's slices,
/// component-wise over the spatial grid.
pub fn conditional_expectation(
    tree: &ScenarioTree,
    values: &NodeIndexed<Vec<f64>>,
    node: usize,
) -> Result<Vec<f64>> {
    let n = &tree.nodes[node];
    if n.children.is_empty() {
        return Err(BhjbError::IncompleteData(format!(
            "conditional expectation at leaf node {}",
            n.id
        )));
    }
    let width = values.values[n.children[0]].len();
    if width == 0 {
        return Err(BhjbError::IncompleteData(format!(
            "missing child value below node {}",
            n.id
        )));
    }
    let mut out = vec![0.0; width];
    for &c in &n.children {
        let child = &values.values[c];
        if child.len() != width {
            return Err(BhjbError::IncompleteData(format!(
                "missing or mismatched child value at node {}",
                tree.nodes[c].id
            )));
        }
        let p = tree.nodes[c].prob;
        for (o, v) in out.iter_mut().zip(child) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// Draws one root-to-leaf path; consecutive entries are parent and child.
pub fn sample_path<R: Rng>(tree: &ScenarioTree, rng: &mut R) -> Vec<usize> {
    let mut path = vec![tree.root()];
    let mut current = tree.root();
    while !tree.nodes[current].children.is_empty() {
        let children = &tree.nodes[current].children;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = children[children.len() - 1];
        for &c in children {
            acc += tree.nodes[c].prob;
            if u < acc {
                chosen = c;
                break;
            }
        }
        path.push(chosen);
        current = chosen;
    }
    path
}

/// Expands a finite-state Markov chain into a path tree with K levels.
/// Zero-probability transitions are pruned; with `recombine` set the result
/// is the same tree and the flag only records that z-values recur.
/// The chain starts in `states[initial_state]` at the root.
pub fn from_markov_chain(
    states: &[Vec<f64>],
    transition: &[Vec<f64>],
    times: Vec<f64>,
    initial_state: usize,
    recombine: bool,
) -> Result<ScenarioTree> {
    let s = states.len();
    if s == 0 {
        return Err(BhjbError::Config("markov chain: no states".into()));
    }
    if initial_state >= s {
        return Err(BhjbError::Config(format!(
            "markov chain: initial state {initial_state} out of range for {s} states"
        )));
    }
    if transition.len() != s || transition.iter().any(|row| row.len() != s) {
        return Err(BhjbError::Config(format!("markov chain: transition matrix must be {s}x{s}")));
    }
    for (i, row) in transition.iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(BhjbError::Config(format!("markov chain: negative entry in row {i}")));
        }
        let sum = crate::linalg::kahan_sum(row.iter().copied());
        if (sum - 1.0).abs() > 1e-12 {
            return Err(BhjbError::Config(format!(
                "markov chain: row {i} sums to {sum}, expected 1 within 1e-12"
            )));
        }
    }
    let k_levels = times.len().checked_sub(1).filter(|&k| k >= 1).ok_or_else(|| {
        BhjbError::Config("markov chain: needs at least two time levels".into())
    })?;

    // breadth-first expansion; state kept alongside to follow transitions
    let mut records: Vec<(u64, usize, Vec<f64>, Option<u64>, f64)> = Vec::new();
    let mut frontier: Vec<(u64, usize)> = Vec::new();
    let mut next_id = 0u64;
    records.push((next_id, 0, states[initial_state].clone(), None, 1.0));
    frontier.push((next_id, initial_state));
    next_id += 1;
    for level in 1..=k_levels {
        let mut next_frontier = Vec::new();
        for &(parent_id, state) in &frontier {
            for (j, &p) in transition[state].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                records.push((next_id, level, states[j].clone(), Some(parent_id), p));
                next_frontier.push((next_id, j));
                next_id += 1;
            }
        }
        frontier = next_frontier;
    }
    let mut tree = ScenarioTree::from_records(times, records)?;
    tree.recombining_hint = recombine;
    Ok(tree)
}

/// Deterministic single-chain tree (constant or per-level z).
pub fn chain_tree(times: Vec<f64>, z_per_level: Vec<Vec<f64>>) -> Result<ScenarioTree> {
    if z_per_level.len() != times.len() {
        return Err(BhjbError::Config(format!(
            "chain tree: {} z-values for {} levels",
            z_per_level.len(),
            times.len()
        )));
    }
    let records = z_per_level
        .into_iter()
        .enumerate()
        .map(|(k, z)| (k as u64, k, z, if k == 0 { None } else { Some(k as u64 - 1) }, 1.0))
        .collect();
    ScenarioTree::from_records(times, records)
}

// ---------------------------------------------------------------------------
// file format

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: u64,
    k: usize,
    z: Vec<f64>,
    parent: Option<u64>,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
struct MarkovShorthand {
    states: Vec<Vec<f64>>,
    transition: Vec<Vec<f64>>,
    #[serde(default)]
    initial_state: usize,
    #[serde(default)]
    recombine: bool,
}

/// On-disk tree: either explicit nodes or the Markov-chain shorthand,
/// always with the shared `times` grid.
#[derive(Serialize, Deserialize)]
pub struct TreeFile {
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    markov_chain: Option<MarkovShorthand>,
}

pub fn tree_from_json(text: &str) -> Result<ScenarioTree> {
    let file: TreeFile = serde_json::from_str(text)?;
    match (&file.markov_chain, file.nodes.is_empty()) {
        (Some(mc), true) => {
            from_markov_chain(&mc.states, &mc.transition, file.times, mc.initial_state, mc.recombine)
        }
        (None, false) => {
            let records = file
                .nodes
                .into_iter()
                .map(|n| (n.id, n.k, n.z, n.parent, n.prob))
                .collect();
            ScenarioTree::from_records(file.times, records)
        }
        _ => Err(BhjbError::Config(
            "tree file: provide exactly one of `nodes` or `markov_chain`".into(),
        )),
    }
}

pub fn tree_to_json(tree: &ScenarioTree) -> Result<String> {
    let nodes = tree
        .nodes
        .iter()
        .map(|n| NodeRecord {
            id: n.id,
            k: n.level,
            z: n.z.clone(),
            parent: n.parent.map(|p| tree.nodes[p].id),
            prob: n.prob,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&TreeFile {
        times: tree.times.clone(),
        nodes,
        markov_chain: None,
    })?)
}
