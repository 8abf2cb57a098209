//! Fields indexed by (grid point, time level, tree node).
//!
//! Each tree node lives at exactly one time level, so a field stores one
//! full-grid slice per node.  Value slices are zero on the boundary by
//! construction; density slices hold killed-diffusion conditional densities
//! given the node's observation path; policy slices hold control indices.
//! Adaptedness of policies is realized by the node indexing itself.

use std::io::{BufRead, Write};

use crate::error::{BhjbError, Result};
use crate::grid::SpatialGrid;
use crate::problem::RelaxedMeasure;
use crate::tree::{NodeIndexed, ScenarioTree};

#[derive(Debug, Clone)]
pub struct ValueField {
    pub data: NodeIndexed<Vec<f64>>,
    pub theta: f64,
    pub problem_id: String,
}

#[derive(Debug, Clone)]
pub struct DensityField {
    pub data: NodeIndexed<Vec<f64>>,
    pub theta: f64,
    pub problem_id: String,
}

#[derive(Debug, Clone)]
pub struct PolicyField {
    /// Control index per grid point; leaf-level slices are empty because no
    /// step starts there.
    pub data: NodeIndexed<Vec<u32>>,
    pub n_controls: usize,
}

/// Pointwise measures over the control set, for relaxed (chattering) runs.
#[derive(Debug, Clone)]
pub struct RelaxedPolicyField {
    pub data: NodeIndexed<Vec<RelaxedMeasure>>,
    pub n_controls: usize,
}

impl PolicyField {
    /// Constant policy using one control index everywhere.
    pub fn constant(tree: &ScenarioTree, grid: &SpatialGrid, n_controls: usize, j: u32) -> Self {
        assert!((j as usize) < n_controls);
        let depth = tree.depth();
        let values = tree
            .nodes
            .iter()
            .map(|n| if n.level < depth { vec![j; grid.len()] } else { Vec::new() })
            .collect();
        PolicyField { data: NodeIndexed { values }, n_controls }
    }

    pub fn validate(&self, tree: &ScenarioTree, grid: &SpatialGrid) -> Result<()> {
        let depth = tree.depth();
        for (i, n) in tree.nodes.iter().enumerate() {
            let slice = &self.data.values[i];
            if n.level < depth {
                if slice.len() != grid.len() {
                    return Err(BhjbError::Dimension(format!(
                        "policy slice at node {} has {} entries for {} grid nodes",
                        n.id,
                        slice.len(),
                        grid.len()
                    )));
                }
                if let Some(&bad) = slice.iter().find(|&&j| j as usize >= self.n_controls) {
                    return Err(BhjbError::Validation(format!(
                        "policy at node {} uses control index {bad} outside the control set",
                        n.id
                    )));
                }
            }
        }
        Ok(())
    }
}

impl ValueField {
    pub fn zeros(tree: &ScenarioTree, grid: &SpatialGrid, theta: f64, problem_id: &str) -> Self {
        ValueField {
            data: NodeIndexed { values: vec![vec![0.0; grid.len()]; tree.nodes.len()] },
            theta,
            problem_id: problem_id.to_string(),
        }
    }

    pub fn root_slice<'a>(&'a self, tree: &ScenarioTree) -> &'a [f64] {
        &self.data.values[tree.root()]
    }

    pub fn linf_diff(&self, other: &ValueField) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.data.values.iter().zip(&other.data.values) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    pub fn min_value(&self) -> f64 {
        self.data
            .values
            .iter()
            .flat_map(|s| s.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

impl DensityField {
    /// Quadrature mass of the slice at a node.
    pub fn mass(&self, grid: &SpatialGrid, node: usize) -> f64 {
        grid.integrate(&self.data.values[node])
    }

    pub fn min_value(&self) -> f64 {
        self.data
            .values
            .iter()
            .flat_map(|s| s.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// CSV: columns (k, node_id, x-index per axis, value)

fn write_csv_rows<W: Write, T: std::fmt::Display>(
    out: &mut W,
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    slices: &[Vec<T>],
    header_value: &str,
) -> Result<()> {
    if grid.dim == 1 {
        writeln!(out, "k,node_id,i,{header_value}")?;
    } else {
        writeln!(out, "k,node_id,i,j,{header_value}")?;
    }
    for (idx, node) in tree.nodes.iter().enumerate() {
        for (flat, v) in slices[idx].iter().enumerate() {
            let m = grid.multi(flat);
            if grid.dim == 1 {
                writeln!(out, "{},{},{},{}", node.level, node.id, m[0], v)?;
            } else {
                writeln!(out, "{},{},{},{},{}", node.level, node.id, m[0], m[1], v)?;
            }
        }
    }
    Ok(())
}

pub fn value_to_csv<W: Write>(out: &mut W, tree: &ScenarioTree, grid: &SpatialGrid, field: &ValueField) -> Result<()> {
    write_csv_rows(out, tree, grid, &field.data.values, "value")
}

pub fn density_to_csv<W: Write>(out: &mut W, tree: &ScenarioTree, grid: &SpatialGrid, field: &DensityField) -> Result<()> {
    write_csv_rows(out, tree, grid, &field.data.values, "value")
}

pub fn policy_to_csv<W: Write>(out: &mut W, tree: &ScenarioTree, grid: &SpatialGrid, field: &PolicyField) -> Result<()> {
    write_csv_rows(out, tree, grid, &field.data.values, "value")
}

/// Reads a policy CSV written by `policy_to_csv` back into a field.
pub fn policy_from_csv<R: BufRead>(
    input: R,
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    n_controls: usize,
) -> Result<PolicyField> {
    let mut id_to_index = std::collections::HashMap::new();
    for (i, n) in tree.nodes.iter().enumerate() {
        id_to_index.insert(n.id, i);
    }
    let depth = tree.depth();
    let mut values: Vec<Vec<u32>> = tree
        .nodes
        .iter()
        .map(|n| if n.level < depth { vec![u32::MAX; grid.len()] } else { Vec::new() })
        .collect();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        let want = if grid.dim == 1 { 4 } else { 5 };
        if parts.len() != want {
            return Err(BhjbError::Config(format!(
                "policy csv line {}: expected {want} columns, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| BhjbError::Config(format!("policy csv line {}: bad {what} `{s}`", lineno + 1)))
        };
        let node_id = parse_usize(parts[1], "node_id")? as u64;
        let ix = parse_usize(parts[2], "i")?;
        let iy = if grid.dim == 2 { parse_usize(parts[3], "j")? } else { 0 };
        let val = parse_usize(parts[want - 1], "value")? as u32;
        let &node = id_to_index
            .get(&node_id)
            .ok_or_else(|| BhjbError::Config(format!("policy csv: unknown node id {node_id}")))?;
        if tree.nodes[node].level >= depth {
            continue;
        }
        if ix >= grid.counts[0] || iy >= grid.counts[1] {
            return Err(BhjbError::Config(format!(
                "policy csv line {}: grid index ({ix},{iy}) out of range",
                lineno + 1
            )));
        }
        values[node][grid.flat(ix, iy)] = val;
    }
    for (i, n) in tree.nodes.iter().enumerate() {
        if n.level < depth {
            if let Some(pos) = values[i].iter().position(|&v| v == u32::MAX) {
                return Err(BhjbError::IncompleteData(format!(
                    "policy csv: node {} missing grid point {pos}",
                    n.id
                )));
            }
        }
    }
    let field = PolicyField { data: NodeIndexed { values }, n_controls };
    field.validate(tree, grid)?;
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::SpatialDomain;
    use crate::tree::chain_tree;

    #[test]
    fn policy_csv_round_trips() {
        let tree = chain_tree(vec![0.0, 0.5, 1.0], vec![vec![0.0]; 3]).unwrap();
        let domain = SpatialDomain::bounded(vec![0.0], vec![1.0]).unwrap();
        let grid = SpatialGrid::new(&domain, &[5]).unwrap();
        let mut policy = PolicyField::constant(&tree, &grid, 3, 1);
        policy.data.values[0][2] = 2;
        policy.data.values[1][4] = 0;

        let mut buf = Vec::new();
        policy_to_csv(&mut buf, &tree, &grid, &policy).unwrap();
        let back = policy_from_csv(std::io::Cursor::new(buf), &tree, &grid, 3).unwrap();
        assert_eq!(back.data.values, policy.data.values);
    }

    #[test]
    fn policy_validation_rejects_bad_indices() {
        let tree = chain_tree(vec![0.0, 1.0], vec![vec![0.0]; 2]).unwrap();
        let domain = SpatialDomain::bounded(vec![0.0], vec![1.0]).unwrap();
        let grid = SpatialGrid::new(&domain, &[4]).unwrap();
        let mut policy = PolicyField::constant(&tree, &grid, 2, 0);
        policy.data.values[0][1] = 9;
        assert!(policy.validate(&tree, &grid).is_err());
    }

    #[test]
    fn csv_emits_expected_columns_for_2d() {
        let tree = chain_tree(vec![0.0, 1.0], vec![vec![0.0]; 2]).unwrap();
        let domain = SpatialDomain::bounded(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let grid = SpatialGrid::new(&domain, &[3, 3]).unwrap();
        let field = ValueField::zeros(&tree, &grid, 1.0, "t");
        let mut buf = Vec::new();
        value_to_csv(&mut buf, &tree, &grid, &field).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k,node_id,i,j,value");
        assert_eq!(lines.next().unwrap(), "0,0,0,0,0");
    }
}
