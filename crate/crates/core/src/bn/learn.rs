use std::collections::BTreeMap;

use super::{parent_labels, Assignment, BayesNet, BnError, Result, Structure};

/// Rows of state indices aligned with a structure's variable order.
/// `None` marks an unobserved value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    rows: Vec<Vec<Option<usize>>>,
}

impl Dataset {
    pub fn from_indices(rows: Vec<Vec<Option<usize>>>) -> Self {
        Dataset { rows }
    }

    pub fn from_assignments(structure: &Structure, rows: &[Assignment]) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for a in rows {
            let mut row = vec![None; structure.variables.len()];
            for (name, state) in a {
                let i = structure
                    .variables
                    .iter()
                    .position(|v| &v.name == name)
                    .ok_or_else(|| BnError::UnknownVariable(name.clone()))?;
                let s = structure.variables[i]
                    .state_index(state)
                    .ok_or_else(|| BnError::UnknownState {
                        variable: name.clone(),
                        state: state.clone(),
                    })?;
                row[i] = Some(s);
            }
            out.push(row);
        }
        Ok(Dataset { rows: out })
    }

    pub fn rows(&self) -> &[Vec<Option<usize>>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.rows.extend(other.rows);
    }
}

/// Dirichlet pseudocounts per CPT row, keyed by child name. Each entry has
/// one vector per parent configuration (mixed-radix order).
pub type Priors = BTreeMap<String, Vec<Vec<f64>>>;

/// Sufficient statistics for one family: counts[row][state].
fn family_counts(
    structure: &Structure,
    parent_idx: &[Vec<usize>],
    data: &Dataset,
    var: usize,
    require_complete: bool,
) -> Result<Vec<Vec<f64>>> {
    let cards: Vec<usize> = structure.variables.iter().map(|v| v.card()).collect();
    let nrows: usize = parent_idx[var].iter().map(|&p| cards[p]).product();
    let mut counts = vec![vec![0.0; cards[var]]; nrows];
    'rows: for (n, row) in data.rows.iter().enumerate() {
        if require_complete && row.iter().any(|s| s.is_none()) {
            return Err(BnError::IncompleteRecord(n));
        }
        let Some(child) = row[var] else { continue };
        let mut r = 0;
        for &p in &parent_idx[var] {
            match row[p] {
                Some(s) => r = r * cards[p] + s,
                None => continue 'rows,
            }
        }
        counts[r][child] += 1.0;
    }
    Ok(counts)
}

fn resolve(structure: &Structure) -> Result<Vec<Vec<usize>>> {
    Ok(structure.resolve()?.1)
}

/// Maximum-likelihood CPTs with additive smoothing:
/// `(count + s) / (parent_count + s * |states|)`.
pub fn learn_mle(structure: &Structure, data: &Dataset, smoothing: f64) -> Result<BayesNet> {
    if !(smoothing >= 0.0) || !smoothing.is_finite() {
        return Err(BnError::BadSmoothing(smoothing));
    }
    let parent_idx = resolve(structure)?;
    let mut tables = Vec::with_capacity(structure.variables.len());
    for v in 0..structure.variables.len() {
        let counts = family_counts(structure, &parent_idx, data, v, true)?;
        let mut rows = Vec::with_capacity(counts.len());
        for (r, c) in counts.iter().enumerate() {
            let total: f64 = c.iter().sum::<f64>() + smoothing * c.len() as f64;
            if total == 0.0 {
                return Err(BnError::EmptyDataset {
                    variable: structure.variables[v].name.clone(),
                    given: parent_labels(&structure.variables, &parent_idx[v], r),
                });
            }
            rows.push(c.iter().map(|x| (x + smoothing) / total).collect());
        }
        tables.push(rows);
    }
    BayesNet::from_tables(structure.clone(), tables)
}

/// Bayesian estimate under per-row Dirichlet priors, using the posterior
/// mean `(count + prior) / (total + prior_total)`.
pub fn learn_map(structure: &Structure, data: &Dataset, priors: &Priors) -> Result<BayesNet> {
    let parent_idx = resolve(structure)?;
    let mut tables = Vec::with_capacity(structure.variables.len());
    for v in 0..structure.variables.len() {
        let name = &structure.variables[v].name;
        let counts = family_counts(structure, &parent_idx, data, v, true)?;
        let prior = priors.get(name).ok_or_else(|| BnError::BadPrior {
            variable: name.clone(),
            reason: "no prior rows".into(),
        })?;
        if prior.len() != counts.len() {
            return Err(BnError::BadPrior {
                variable: name.clone(),
                reason: format!("expected {} prior rows, got {}", counts.len(), prior.len()),
            });
        }
        let mut rows = Vec::with_capacity(counts.len());
        for (c, a) in counts.iter().zip(prior) {
            if a.len() != c.len() || a.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(BnError::BadPrior {
                    variable: name.clone(),
                    reason: "prior rows need one positive entry per state".into(),
                });
            }
            let total: f64 = c.iter().sum::<f64>() + a.iter().sum::<f64>();
            rows.push(c.iter().zip(a).map(|(n, a)| (n + a) / total).collect());
        }
        tables.push(rows);
    }
    BayesNet::from_tables(structure.clone(), tables)
}

/// Online update: each CPT row that the new records touch is replaced by
/// `(1 - rate) * old + rate * batch`, where `batch` is the Laplace-smoothed
/// MLE of that row over `records`. A row is touched when some record
/// observes the child and all of its parents in that configuration.
pub fn update_cpt(net: &BayesNet, records: &Dataset, rate: f64) -> Result<BayesNet> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(BnError::BadLearningRate(rate));
    }
    let structure = net.structure();
    let parent_idx = resolve(&structure)?;
    let mut out = net.clone();
    for v in 0..structure.variables.len() {
        let counts = family_counts(&structure, &parent_idx, records, v, false)?;
        let mut rows = net.table(v).to_vec();
        for (r, c) in counts.iter().enumerate() {
            let n: f64 = c.iter().sum();
            if n == 0.0 {
                continue;
            }
            let total = n + c.len() as f64;
            let updated: Vec<f64> = rows[r]
                .iter()
                .zip(c)
                .map(|(old, k)| (1.0 - rate) * old + rate * (k + 1.0) / total)
                .collect();
            let s: f64 = updated.iter().sum();
            rows[r] = updated.iter().map(|x| x / s).collect();
        }
        out.set_rows(v, rows);
    }
    Ok(out)
}

impl BayesNet {
    pub fn update_cpt(&self, records: &Dataset, rate: f64) -> Result<BayesNet> {
        update_cpt(self, records, rate)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::a_to_b;
    use super::super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(states: &[&str]) -> Structure {
        Structure::new(vec![Variable::new("A", states)], vec![vec![]]).unwrap()
    }

    #[test]
    fn mle_counts_single_node() {
        let s = single(&["f", "t"]);
        let data = Dataset::from_indices(vec![vec![Some(1)], vec![Some(1)], vec![Some(0)]]);
        let net = learn_mle(&s, &data, 0.0).unwrap();
        let row = net.row("A", &[]).unwrap();
        assert!((row[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn smoothing_only_gives_uniform_row() {
        let s = a_to_b(0.3, 0.9, 0.2).structure();
        // A is always f, so the A=t row of B is unobserved
        let data = Dataset::from_indices(vec![vec![Some(0), Some(1)]; 4]);
        let net = learn_mle(&s, &data, 1.0).unwrap();
        assert_eq!(net.row("B", &["t"]).unwrap(), &[0.5, 0.5][..]);
        assert!(matches!(learn_mle(&s, &data, 0.0), Err(BnError::EmptyDataset { .. })));
    }

    #[test]
    fn incomplete_rows_rejected_by_batch_learning() {
        let s = a_to_b(0.3, 0.9, 0.2).structure();
        let data = Dataset::from_indices(vec![vec![Some(0), None]]);
        assert!(matches!(learn_mle(&s, &data, 1.0), Err(BnError::IncompleteRecord(0))));
    }

    #[test]
    fn mle_recovers_generating_network() {
        let truth = a_to_b(0.3, 0.9, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = truth.sample(&mut rng, 50_000);
        let net = learn_mle(&truth.structure(), &data, 1.0).unwrap();
        for (c_true, c_learn) in truth.cpts().iter().zip(net.cpts()) {
            for (r0, r1) in c_true.rows().iter().zip(c_learn.rows()) {
                for (a, b) in r0.iter().zip(r1) {
                    assert!((a - b).abs() < 0.02, "{a} vs {b}");
                }
            }
        }
    }

    fn uniform_priors(net: &BayesNet, strength: f64) -> Priors {
        net.cpts()
            .iter()
            .map(|c| {
                let k = c.rows()[0].len();
                (c.child.clone(), vec![vec![strength; k]; c.rows().len()])
            })
            .collect()
    }

    #[test]
    fn map_with_uniform_priors_converges_to_mle() {
        let truth = a_to_b(0.3, 0.9, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = truth.sample(&mut rng, 20_000);
        let s = truth.structure();
        let mle = learn_mle(&s, &data, 0.0).unwrap();
        let map = learn_map(&s, &data, &uniform_priors(&truth, 1.0)).unwrap();
        for (a, b) in mle.cpts().iter().zip(map.cpts()) {
            for (r0, r1) in a.rows().iter().zip(b.rows()) {
                for (x, y) in r0.iter().zip(r1) {
                    assert!((x - y).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn map_without_data_returns_normalized_prior() {
        let s = single(&["new", "recycled"]);
        let mut priors = Priors::new();
        priors.insert("A".into(), vec![vec![1.0, 9.0]]);
        let net = learn_map(&s, &Dataset::default(), &priors).unwrap();
        assert_eq!(net.row("A", &[]).unwrap(), &[0.1, 0.9][..]);
        priors.insert("A".into(), vec![vec![0.0, 9.0]]);
        assert!(matches!(
            learn_map(&s, &Dataset::default(), &priors),
            Err(BnError::BadPrior { .. })
        ));
    }

    #[test]
    fn update_blends_rows() {
        let s = single(&["f", "t"]);
        let old = BayesNet::from_tables(s.clone(), vec![vec![vec![0.8, 0.2]]]).unwrap();
        // 8 rows: 1 f, 7 t -> smoothed batch (2/10, 8/10)
        let mut rows = vec![vec![Some(1)]; 7];
        rows.push(vec![Some(0)]);
        let data = Dataset::from_indices(rows);
        let new = old.update_cpt(&data, 0.5).unwrap();
        let r = new.row("A", &[]).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);

        let full = old.update_cpt(&data, 1.0).unwrap();
        let fresh = learn_mle(&s, &data, 1.0).unwrap();
        for (x, y) in full.row("A", &[]).unwrap().iter().zip(fresh.row("A", &[]).unwrap()) {
            assert!((x - y).abs() < 1e-15);
        }

        assert!(matches!(old.update_cpt(&data, 0.0), Err(BnError::BadLearningRate(_))));
        assert!(matches!(old.update_cpt(&data, 1.5), Err(BnError::BadLearningRate(_))));
    }

    #[test]
    fn update_leaves_untouched_rows_alone() {
        let net = a_to_b(0.3, 0.9, 0.2);
        let data = Dataset::from_indices(vec![vec![Some(0), Some(1)]]);
        let new = net.update_cpt(&data, 0.5).unwrap();
        assert_eq!(new.row("B", &["t"]).unwrap(), net.row("B", &["t"]).unwrap());
        assert_ne!(new.row("B", &["f"]).unwrap(), net.row("B", &["f"]).unwrap());
    }
}
