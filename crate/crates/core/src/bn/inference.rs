use serde::{Deserialize, Serialize};

use super::factor::{increment, Factor};
use super::{Assignment, BayesNet, BnError, Evidence, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Elimination,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub variable: String,
    pub states: Vec<String>,
    pub distribution: Vec<f64>,
    pub method: Method,
}

impl Posterior {
    pub fn probability(&self, state: &str) -> Option<f64> {
        self.states
            .iter()
            .position(|s| s == state)
            .map(|i| self.distribution[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub assignment: Assignment,
    pub probability: f64,
}

/// Picks the next variable to eliminate: fewest neighbours in the current
/// interaction graph, lowest index on ties.
fn min_degree_pick(factors: &[Factor], remaining: &[usize]) -> usize {
    let mut best = (usize::MAX, usize::MAX);
    for &v in remaining {
        let mut nbrs: Vec<usize> = factors
            .iter()
            .filter(|f| f.vars.contains(&v))
            .flat_map(|f| f.vars.iter().copied())
            .filter(|&u| u != v)
            .collect();
        nbrs.sort_unstable();
        nbrs.dedup();
        if (nbrs.len(), v) < best {
            best = (nbrs.len(), v);
        }
    }
    best.1
}

/// Runs elimination of `to_eliminate` over `factors` using `combine` as the
/// product and `reduce` as the marginalization, returning the product of
/// whatever remains.
fn eliminate_all(
    mut factors: Vec<Factor>,
    to_eliminate: &[usize],
    combine: &dyn Fn(&Factor, &Factor) -> Factor,
    reduce: &dyn Fn(&Factor, usize) -> Factor,
    unit: f64,
) -> Factor {
    let mut remaining: Vec<usize> = to_eliminate.to_vec();
    while !remaining.is_empty() {
        let v = min_degree_pick(&factors, &remaining);
        remaining.retain(|&u| u != v);
        let (touching, rest): (Vec<Factor>, Vec<Factor>) =
            factors.into_iter().partition(|f| f.vars.contains(&v));
        factors = rest;
        if touching.is_empty() {
            continue;
        }
        let mut prod = touching[0].clone();
        for f in &touching[1..] {
            prod = combine(&prod, f);
        }
        factors.push(reduce(&prod, v));
    }
    let mut result = Factor::scalar(unit);
    for f in &factors {
        result = combine(&result, f);
    }
    result
}

impl BayesNet {
    fn cpt_factor(&self, v: usize) -> Factor {
        let mut vars: Vec<usize> = self.parents_of(v).to_vec();
        vars.push(v);
        let cards: Vec<usize> = vars.iter().map(|&u| self.variables()[u].card()).collect();
        let values: Vec<f64> = self.table(v).iter().flatten().copied().collect();
        Factor::from_unsorted(&vars, &cards, &values)
    }

    fn reduced_factors(&self, observed: &[Option<usize>], log: bool) -> Vec<Factor> {
        (0..self.variables().len())
            .map(|v| {
                let mut f = self.cpt_factor(v);
                if log {
                    for x in f.values.iter_mut() {
                        *x = if *x == 0.0 { f64::NEG_INFINITY } else { x.ln() };
                    }
                }
                for (u, s) in observed.iter().enumerate() {
                    if let Some(s) = s {
                        f = f.reduce(u, *s);
                    }
                }
                f
            })
            .collect()
    }

    fn check_query(&self, query: &str, evidence: &Evidence) -> Result<(usize, Vec<Option<usize>>)> {
        let q = self.var_index(query)?;
        let observed = self.resolve_partial(&evidence.assignments)?;
        if observed[q].is_some() {
            return Err(BnError::QueryInEvidence(query.to_string()));
        }
        Ok((q, observed))
    }

    /// Exact posterior of `query` given hard evidence, by variable elimination
    /// with a min-degree ordering.
    pub fn infer_posterior(&self, query: &str, evidence: &Evidence) -> Result<Posterior> {
        let (q, observed) = self.check_query(query, evidence)?;
        let factors = self.reduced_factors(&observed, false);
        let hidden: Vec<usize> = (0..self.variables().len())
            .filter(|&v| v != q && observed[v].is_none())
            .collect();
        let result = eliminate_all(
            factors,
            &hidden,
            &|a, b| a.product(b),
            &|f, v| f.sum_out(v),
            1.0,
        );
        debug_assert_eq!(result.vars, vec![q]);
        self.finish(q, result.values, Method::Elimination)
    }

    /// Posterior by brute-force summation of the joint over every completion.
    pub fn infer_posterior_enumeration(&self, query: &str, evidence: &Evidence) -> Result<Posterior> {
        let (q, observed) = self.check_query(query, evidence)?;
        let cards: Vec<usize> = self.variables().iter().map(|v| v.card()).collect();
        let mut unnorm = vec![0.0; cards[q]];
        let mut states: Vec<usize> = observed.iter().map(|s| s.unwrap_or(0)).collect();
        let free: Vec<usize> = (0..cards.len()).filter(|&v| observed[v].is_none()).collect();
        let free_cards: Vec<usize> = free.iter().map(|&v| cards[v]).collect();
        let mut digits = vec![0usize; free.len()];
        loop {
            for (k, &v) in free.iter().enumerate() {
                states[v] = digits[k];
            }
            unnorm[states[q]] += self.joint_of_indices(&states);
            if !increment(&mut digits, &free_cards) {
                break;
            }
        }
        self.finish(q, unnorm, Method::Enumeration)
    }

    fn finish(&self, q: usize, unnorm: Vec<f64>, method: Method) -> Result<Posterior> {
        let z: f64 = unnorm.iter().sum();
        if !(z > 0.0) {
            return Err(BnError::ImpossibleEvidence);
        }
        let var = &self.variables()[q];
        Ok(Posterior {
            variable: var.name.clone(),
            states: var.states.clone(),
            distribution: unnorm.iter().map(|x| x / z).collect(),
            method,
        })
    }

    fn max_log_joint(&self, observed: &[Option<usize>]) -> f64 {
        let factors = self.reduced_factors(observed, true);
        let hidden: Vec<usize> = (0..self.variables().len())
            .filter(|&v| observed[v].is_none())
            .collect();
        let result = eliminate_all(
            factors,
            &hidden,
            &|a, b| a.combine(b, |x, y| x + y),
            &|f, v| f.eliminate(v, f64::max),
            0.0,
        );
        result.values[0]
    }

    /// Most probable completion of the evidence (belief revision).
    ///
    /// Among equally probable completions the lexicographically smallest is
    /// returned, comparing variables in name order and states by label.
    pub fn map_assignment(&self, evidence: &Evidence) -> Result<MapResult> {
        let mut observed = self.resolve_partial(&evidence.assignments)?;
        let best = self.max_log_joint(&observed);
        if best == f64::NEG_INFINITY {
            return Err(BnError::ImpossibleEvidence);
        }
        let tol = 1e-9 * best.abs().max(1.0);
        let mut order: Vec<usize> = (0..self.variables().len())
            .filter(|&v| observed[v].is_none())
            .collect();
        order.sort_by(|&a, &b| self.variables()[a].name.cmp(&self.variables()[b].name));
        for v in order {
            let var = &self.variables()[v];
            let mut labels: Vec<usize> = (0..var.card()).collect();
            labels.sort_by(|&a, &b| var.states[a].cmp(&var.states[b]));
            let mut chosen = None;
            for s in labels {
                observed[v] = Some(s);
                if self.max_log_joint(&observed) >= best - tol {
                    chosen = Some(s);
                    break;
                }
            }
            // the max over states equals `best`, so some state always qualifies
            observed[v] = Some(chosen.expect("some state attains the maximum"));
        }
        let states: Vec<usize> = observed.into_iter().map(|s| s.unwrap()).collect();
        Ok(MapResult {
            assignment: self.name_assignment(&states),
            probability: self.joint_of_indices(&states),
        })
    }
}
