//! Discrete Bayesian networks: representation, exact inference, and
//! parameter learning.
//!
//! A network is a DAG of finite-state variables, each with a conditional
//! probability table over its parents. Tables are stored densely, one row
//! per parent configuration in mixed-radix order (first parent slowest).

mod factor;
mod inference;
mod learn;

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use inference::{MapResult, Method, Posterior};
pub use learn::{learn_map, learn_mle, update_cpt, Dataset, Priors};

/// Tolerance used for probability-row normalization checks.
pub const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BnError {
    #[error("cycle detected through variable `{0}`")]
    CycleDetected(String),
    #[error("missing CPT row for `{variable}` given {given:?}")]
    MissingCptRow { variable: String, given: Vec<String> },
    #[error("duplicate CPT row for `{variable}` given {given:?}")]
    DuplicateCptRow { variable: String, given: Vec<String> },
    #[error("bad probability row for `{variable}`: {reason}")]
    BadProbabilityRow { variable: String, reason: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown state `{state}` for variable `{variable}`")]
    UnknownState { variable: String, state: String },
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("variable `{0}` must have at least two unique states")]
    BadStates(String),
    #[error("variable `{0}` has no CPT or more than one")]
    CptCount(String),
    #[error("assignment does not cover variable `{0}`")]
    IncompleteAssignment(String),
    #[error("query variable `{0}` is also observed")]
    QueryInEvidence(String),
    #[error("evidence has zero probability")]
    ImpossibleEvidence,
    #[error("no data for `{variable}` parent configuration {given:?} and smoothing is zero")]
    EmptyDataset { variable: String, given: Vec<String> },
    #[error("dataset row {0} is incomplete")]
    IncompleteRecord(usize),
    #[error("bad prior for `{variable}`: {reason}")]
    BadPrior { variable: String, reason: String },
    #[error("learning rate {0} outside (0, 1]")]
    BadLearningRate(f64),
    #[error("negative smoothing {0}")]
    BadSmoothing(f64),
}

pub type Result<T> = std::result::Result<T, BnError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub states: Vec<String>,
}

impl Variable {
    pub fn new(name: impl Into<String>, states: &[&str]) -> Self {
        Variable {
            name: name.into(),
            states: states.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn binary(name: impl Into<String>, off: &str, on: &str) -> Self {
        Self::new(name, &[off, on])
    }

    pub fn state_index(&self, state: &str) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }

    pub fn card(&self) -> usize {
        self.states.len()
    }
}

/// Conditional probability table of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpt {
    pub child: String,
    pub parents: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Cpt {
    /// Rows in mixed-radix order over the parents' states.
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Network shape without parameters: variables and their parent lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub variables: Vec<Variable>,
    /// Parent names per variable, aligned with `variables`.
    pub parents: Vec<Vec<String>>,
}

impl Structure {
    pub fn new(variables: Vec<Variable>, parents: Vec<Vec<String>>) -> Result<Self> {
        let s = Structure { variables, parents };
        s.resolve()?;
        Ok(s)
    }

    /// Validates names and acyclicity, returning parent indices and a
    /// topological order.
    fn resolve(&self) -> Result<(HashMap<String, usize>, Vec<Vec<usize>>, Vec<usize>)> {
        let mut index = HashMap::new();
        for (i, v) in self.variables.iter().enumerate() {
            if v.states.len() < 2 {
                return Err(BnError::BadStates(v.name.clone()));
            }
            let mut seen = std::collections::HashSet::new();
            if !v.states.iter().all(|s| seen.insert(s)) {
                return Err(BnError::BadStates(v.name.clone()));
            }
            if index.insert(v.name.clone(), i).is_some() {
                return Err(BnError::DuplicateVariable(v.name.clone()));
            }
        }
        if self.parents.len() != self.variables.len() {
            return Err(BnError::CptCount(
                self.variables
                    .get(self.parents.len())
                    .map(|v| v.name.clone())
                    .unwrap_or_default(),
            ));
        }
        let mut parent_idx = Vec::with_capacity(self.variables.len());
        for ps in &self.parents {
            let mut idx = Vec::with_capacity(ps.len());
            for p in ps {
                idx.push(*index.get(p).ok_or_else(|| BnError::UnknownVariable(p.clone()))?);
            }
            parent_idx.push(idx);
        }
        let topo = topological_order(&parent_idx).map_err(|i| {
            BnError::CycleDetected(self.variables[i].name.clone())
        })?;
        Ok((index, parent_idx, topo))
    }
}

/// Kahn's algorithm; on failure returns a variable that sits on a cycle.
fn topological_order(parents: &[Vec<usize>]) -> std::result::Result<Vec<usize>, usize> {
    let n = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut children = vec![Vec::new(); n];
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(c);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop() {
        order.push(v);
        for &c in children[v].iter().rev() {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).find(|&i| indegree[i] > 0).unwrap_or(0))
    }
}

/// Full or partial assignment of variable names to state labels.
pub type Assignment = BTreeMap<String, String>;

/// Hard evidence: observed states of a subset of variables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Evidence {
    pub assignments: BTreeMap<String, String>,
}

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: impl Into<String>, state: impl Into<String>) -> Self {
        self.assignments.insert(var.into(), state.into());
        self
    }

    pub fn insert(&mut self, var: impl Into<String>, state: impl Into<String>) {
        self.assignments.insert(var.into(), state.into());
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BayesNet {
    variables: Vec<Variable>,
    cpts: Vec<Cpt>,
    index: HashMap<String, usize>,
    parent_idx: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl PartialEq for BayesNet {
    fn eq(&self, other: &Self) -> bool {
        self.variables == other.variables && self.cpts == other.cpts
    }
}

// ---- JSON network description ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variables: Vec<Variable>,
    pub cpts: Vec<CptSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptSpec {
    pub child: String,
    #[serde(default)]
    pub parents: Vec<String>,
    pub rows: Vec<CptRowSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptRowSpec {
    #[serde(default)]
    pub given: Vec<String>,
    pub p: Vec<f64>,
}

pub fn build_network(spec: &NetworkSpec) -> Result<BayesNet> {
    let mut by_child: HashMap<&str, &CptSpec> = HashMap::new();
    for c in &spec.cpts {
        if by_child.insert(c.child.as_str(), c).is_some() {
            return Err(BnError::CptCount(c.child.clone()));
        }
    }
    let names: std::collections::HashSet<&str> =
        spec.variables.iter().map(|v| v.name.as_str()).collect();
    if let Some(c) = spec.cpts.iter().find(|c| !names.contains(c.child.as_str())) {
        return Err(BnError::UnknownVariable(c.child.clone()));
    }
    let mut parents = Vec::with_capacity(spec.variables.len());
    for v in &spec.variables {
        let c = by_child
            .get(v.name.as_str())
            .ok_or_else(|| BnError::CptCount(v.name.clone()))?;
        parents.push(c.parents.clone());
    }
    let structure = Structure {
        variables: spec.variables.clone(),
        parents,
    };
    let (index, parent_idx, _) = structure.resolve()?;

    let mut tables = Vec::with_capacity(spec.variables.len());
    for (i, v) in spec.variables.iter().enumerate() {
        let c = by_child[v.name.as_str()];
        let pcards: Vec<usize> = parent_idx[i].iter().map(|&p| spec.variables[p].card()).collect();
        let nrows: usize = pcards.iter().product();
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; nrows];
        for row in &c.rows {
            if row.given.len() != c.parents.len() {
                return Err(BnError::BadProbabilityRow {
                    variable: v.name.clone(),
                    reason: format!("row gives {} parent states, expected {}", row.given.len(), c.parents.len()),
                });
            }
            let mut r = 0usize;
            for (k, s) in row.given.iter().enumerate() {
                let pvar = &spec.variables[parent_idx[i][k]];
                let si = pvar.state_index(s).ok_or_else(|| BnError::UnknownState {
                    variable: pvar.name.clone(),
                    state: s.clone(),
                })?;
                r = r * pcards[k] + si;
            }
            if rows[r].is_some() {
                return Err(BnError::DuplicateCptRow {
                    variable: v.name.clone(),
                    given: row.given.clone(),
                });
            }
            check_row(&v.name, &row.p, v.card())?;
            rows[r] = Some(row.p.clone());
        }
        let mut filled = Vec::with_capacity(nrows);
        for (r, row) in rows.into_iter().enumerate() {
            match row {
                Some(p) => filled.push(p),
                None => {
                    return Err(BnError::MissingCptRow {
                        variable: v.name.clone(),
                        given: parent_labels(&spec.variables, &parent_idx[i], r),
                    })
                }
            }
        }
        tables.push(filled);
    }
    let _ = index;
    BayesNet::from_tables(structure, tables)
}

fn check_row(variable: &str, p: &[f64], card: usize) -> Result<()> {
    if p.len() != card {
        return Err(BnError::BadProbabilityRow {
            variable: variable.to_string(),
            reason: format!("expected {card} entries, got {}", p.len()),
        });
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(BnError::BadProbabilityRow {
            variable: variable.to_string(),
            reason: "negative or non-finite entry".into(),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(BnError::BadProbabilityRow {
            variable: variable.to_string(),
            reason: format!("row sums to {sum}"),
        });
    }
    Ok(())
}

fn parent_labels(vars: &[Variable], parents: &[usize], mut row: usize) -> Vec<String> {
    let mut labels = vec![String::new(); parents.len()];
    for k in (0..parents.len()).rev() {
        let v = &vars[parents[k]];
        labels[k] = v.states[row % v.card()].clone();
        row /= v.card();
    }
    labels
}

impl BayesNet {
    /// Builds a network from a structure and dense rows (mixed-radix order).
    pub fn from_tables(structure: Structure, tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let (index, parent_idx, topo) = structure.resolve()?;
        if tables.len() != structure.variables.len() {
            return Err(BnError::CptCount(String::new()));
        }
        let mut cpts = Vec::with_capacity(tables.len());
        for (i, rows) in tables.into_iter().enumerate() {
            let v = &structure.variables[i];
            let nrows: usize = parent_idx[i].iter().map(|&p| structure.variables[p].card()).product();
            if rows.len() != nrows {
                return Err(BnError::MissingCptRow {
                    variable: v.name.clone(),
                    given: parent_labels(&structure.variables, &parent_idx[i], rows.len().min(nrows.saturating_sub(1))),
                });
            }
            for r in &rows {
                check_row(&v.name, r, v.card())?;
            }
            cpts.push(Cpt {
                child: v.name.clone(),
                parents: structure.parents[i].clone(),
                rows,
            });
        }
        Ok(BayesNet {
            variables: structure.variables,
            cpts,
            index,
            parent_idx,
            topo,
        })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn cpts(&self) -> &[Cpt] {
        &self.cpts
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.index.get(name).map(|&i| &self.variables[i])
    }

    pub fn cpt(&self, name: &str) -> Option<&Cpt> {
        self.index.get(name).map(|&i| &self.cpts[i])
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| BnError::UnknownVariable(name.to_string()))
    }

    pub fn parents_of(&self, var: usize) -> &[usize] {
        &self.parent_idx[var]
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn structure(&self) -> Structure {
        Structure {
            variables: self.variables.clone(),
            parents: self.cpts.iter().map(|c| c.parents.clone()).collect(),
        }
    }

    /// Row of `child` for the given parent state labels.
    pub fn row(&self, child: &str, given: &[&str]) -> Result<&[f64]> {
        let i = self.var_index(child)?;
        let ps = &self.parent_idx[i];
        if given.len() != ps.len() {
            return Err(BnError::IncompleteAssignment(child.to_string()));
        }
        let mut r = 0;
        for (k, s) in given.iter().enumerate() {
            let pv = &self.variables[ps[k]];
            let si = pv.state_index(s).ok_or_else(|| BnError::UnknownState {
                variable: pv.name.clone(),
                state: s.to_string(),
            })?;
            r = r * pv.card() + si;
        }
        Ok(&self.cpts[i].rows[r])
    }

    pub(crate) fn row_index(&self, var: usize, states: &[usize]) -> usize {
        self.parent_idx[var]
            .iter()
            .fold(0, |r, &p| r * self.variables[p].card() + states[p])
    }

    pub(crate) fn table(&self, var: usize) -> &[Vec<f64>] {
        &self.cpts[var].rows
    }

    pub(crate) fn set_rows(&mut self, var: usize, rows: Vec<Vec<f64>>) {
        self.cpts[var].rows = rows;
    }

    pub fn to_spec(&self) -> NetworkSpec {
        let cpts = self
            .cpts
            .iter()
            .enumerate()
            .map(|(i, c)| CptSpec {
                child: c.child.clone(),
                parents: c.parents.clone(),
                rows: c
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(r, p)| CptRowSpec {
                        given: parent_labels(&self.variables, &self.parent_idx[i], r),
                        p: p.clone(),
                    })
                    .collect(),
            })
            .collect();
        NetworkSpec {
            variables: self.variables.clone(),
            cpts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("network spec serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, NetworkLoadError> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        Ok(build_network(&spec)?)
    }

    /// Resolves a named assignment to state indices; missing variables map to `None`.
    pub(crate) fn resolve_partial(&self, a: &BTreeMap<String, String>) -> Result<Vec<Option<usize>>> {
        let mut out = vec![None; self.variables.len()];
        for (name, state) in a {
            let i = self.var_index(name)?;
            let s = self.variables[i]
                .state_index(state)
                .ok_or_else(|| BnError::UnknownState {
                    variable: name.clone(),
                    state: state.clone(),
                })?;
            out[i] = Some(s);
        }
        Ok(out)
    }

    pub(crate) fn name_assignment(&self, states: &[usize]) -> Assignment {
        self.variables
            .iter()
            .zip(states)
            .map(|(v, &s)| (v.name.clone(), v.states[s].clone()))
            .collect()
    }

    /// Joint probability of a complete assignment, the product of every
    /// variable's CPT entry given its parents. Accumulated in log space.
    pub fn joint_probability(&self, assignment: &Assignment) -> Result<f64> {
        let partial = self.resolve_partial(assignment)?;
        let mut states = Vec::with_capacity(partial.len());
        for (i, s) in partial.iter().enumerate() {
            states.push(s.ok_or_else(|| BnError::IncompleteAssignment(self.variables[i].name.clone()))?);
        }
        Ok(self.joint_of_indices(&states))
    }

    pub(crate) fn log_joint_of_indices(&self, states: &[usize]) -> f64 {
        let mut acc = 0.0;
        for v in 0..self.variables.len() {
            let p = self.cpts[v].rows[self.row_index(v, states)][states[v]];
            if p == 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += p.ln();
        }
        acc
    }

    pub(crate) fn joint_of_indices(&self, states: &[usize]) -> f64 {
        let lp = self.log_joint_of_indices(states);
        if lp == f64::NEG_INFINITY {
            0.0
        } else {
            lp.exp()
        }
    }

    /// Ancestral sampling of `n` complete rows.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Dataset {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut states = vec![0usize; self.variables.len()];
            for &v in &self.topo {
                let row = &self.cpts[v].rows[self.row_index(v, &states)];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = row.len() - 1;
                for (k, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                states[v] = pick;
            }
            rows.push(states.into_iter().map(Some).collect());
        }
        Dataset::from_indices(rows)
    }
}

#[derive(Debug, Error)]
pub enum NetworkLoadError {
    #[error("malformed network JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] BnError),
}
