//! Discrete hidden Markov models: scaled forward likelihood, Viterbi
//! decoding, and Baum-Welch learning with entries pinned to zero by domain
//! knowledge.

mod learn;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use learn::{learn, learn_with_observer, sample_sequence, Init, LearnConfig, LearnOutcome};

const TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmmError {
    #[error("observation sequence is empty")]
    EmptySequence,
    #[error("symbol index {symbol} out of range for {alphabet} symbols")]
    SymbolOutOfRange { symbol: usize, alphabet: usize },
    #[error("observation sequence has zero probability under the model")]
    ImpossibleSequence,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("constraint mask leaves no free entry in {0}")]
    MaskTooRestrictive(String),
    #[error("initial model puts mass on masked entry {0}")]
    MaskViolated(String),
    #[error("no training sequences")]
    NoSequences,
    #[error("observation sequence carries no stage labels")]
    MissingStageLabels,
    #[error("stage labels ({labels}) do not match sequence length ({len})")]
    StageLabelLength { labels: usize, len: usize },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
}

pub type Result<T> = std::result::Result<T, HmmError>;

#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub states: Vec<String>,
    pub symbols: Vec<String>,
    /// N x N, row i = distribution of the next state given state i.
    pub transition: Vec<Vec<f64>>,
    /// N x M, row i = distribution of the emitted symbol in state i.
    pub emission: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

fn check_dist(what: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(HmmError::InvalidModel(format!("{what}: expected {len} entries, got {}", row.len())));
    }
    if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(HmmError::InvalidModel(format!("{what}: negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > TOL {
        return Err(HmmError::InvalidModel(format!("{what}: sums to {s}")));
    }
    Ok(())
}

impl HmmModel {
    pub fn new(
        states: Vec<String>,
        symbols: Vec<String>,
        transition: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let m = HmmModel {
            states,
            symbols,
            transition,
            emission,
            initial,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        let m = self.symbols.len();
        if n == 0 || m == 0 {
            return Err(HmmError::InvalidModel("need at least one state and one symbol".into()));
        }
        if self.transition.len() != n || self.emission.len() != n {
            return Err(HmmError::InvalidModel("matrix row count differs from state count".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_dist(&format!("A row {i}"), row, n)?;
        }
        for (i, row) in self.emission.iter().enumerate() {
            check_dist(&format!("B row {i}"), row, m)?;
        }
        check_dist("pi", &self.initial, n)
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol_index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub(crate) fn check_obs(&self, obs: &ObservationSeq) -> Result<()> {
        if obs.symbols.is_empty() {
            return Err(HmmError::EmptySequence);
        }
        if let Some(&s) = obs.symbols.iter().find(|&&s| s >= self.n_symbols()) {
            return Err(HmmError::SymbolOutOfRange {
                symbol: s,
                alphabet: self.n_symbols(),
            });
        }
        Ok(())
    }

    /// Scaled forward pass. Returns normalized alphas and the per-step scale
    /// factors (their logs sum to the sequence log-likelihood).
    pub(crate) fn forward_scaled(&self, obs: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let n = self.n_states();
        let mut alphas = Vec::with_capacity(obs.len());
        let mut scales = Vec::with_capacity(obs.len());
        let mut cur: Vec<f64> = (0..n).map(|i| self.initial[i] * self.emission[i][obs[0]]).collect();
        for (t, &o) in obs.iter().enumerate() {
            if t > 0 {
                let prev: &Vec<f64> = alphas.last().unwrap();
                cur = (0..n)
                    .map(|j| {
                        let mut acc = 0.0;
                        for i in 0..n {
                            let a = self.transition[i][j];
                            if a != 0.0 {
                                acc += prev[i] * a;
                            }
                        }
                        acc * self.emission[j][o]
                    })
                    .collect();
            }
            let c: f64 = cur.iter().sum();
            if !(c > 0.0) {
                return Err(HmmError::ImpossibleSequence);
            }
            for x in cur.iter_mut() {
                *x /= c;
            }
            alphas.push(cur.clone());
            scales.push(c);
        }
        Ok((alphas, scales))
    }

    /// Backward pass using the forward scale factors.
    pub(crate) fn backward_scaled(&self, obs: &[usize], scales: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let t_len = obs.len();
        let mut betas = vec![vec![1.0; n]; t_len];
        for t in (0..t_len - 1).rev() {
            let o = obs[t + 1];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += self.transition[i][j] * self.emission[j][o] * betas[t + 1][j];
                }
                betas[t][i] = acc / scales[t + 1];
            }
        }
        betas
    }

    /// Log-likelihood of the sequence, `log P(O | model)`.
    pub fn likelihood(&self, obs: &ObservationSeq) -> Result<f64> {
        self.check_obs(obs)?;
        let (_, scales) = self.forward_scaled(&obs.symbols)?;
        Ok(neumaier_sum(scales.iter().map(|c| c.ln())))
    }

    /// Most probable state path (Viterbi, log space). Ties go to the lower
    /// state index at every step.
    pub fn decode(&self, obs: &ObservationSeq) -> Result<DecodedPath> {
        self.check_obs(obs)?;
        let n = self.n_states();
        let ln = |x: f64| if x == 0.0 { f64::NEG_INFINITY } else { x.ln() };
        let la: Vec<Vec<f64>> = self.transition.iter().map(|r| r.iter().map(|&x| ln(x)).collect()).collect();
        let o0 = obs.symbols[0];
        let mut delta: Vec<f64> = (0..n).map(|i| ln(self.initial[i]) + ln(self.emission[i][o0])).collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(obs.symbols.len());
        for &o in &obs.symbols[1..] {
            let mut next = vec![f64::NEG_INFINITY; n];
            let mut ptr = vec![0usize; n];
            for j in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for i in 0..n {
                    let v = delta[i] + la[i][j];
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                next[j] = best + ln(self.emission[j][o]);
                ptr[j] = arg;
            }
            back.push(ptr);
            delta = next;
        }
        let mut last = 0;
        for i in 1..n {
            if delta[i] > delta[last] {
                last = i;
            }
        }
        let log_probability = delta[last];
        if log_probability == f64::NEG_INFINITY {
            return Err(HmmError::ImpossibleSequence);
        }
        let mut states = vec![last; obs.symbols.len()];
        for t in (0..back.len()).rev() {
            states[t] = back[t][states[t + 1]];
        }
        Ok(DecodedPath::new(states, log_probability))
    }

    /// Per-step state posteriors and pairwise transition posteriors.
    pub fn posteriors(&self, obs: &ObservationSeq) -> Result<StatePosteriors> {
        self.check_obs(obs)?;
        let o = &obs.symbols;
        let (alphas, scales) = self.forward_scaled(o)?;
        let betas = self.backward_scaled(o, &scales);
        let n = self.n_states();
        let gamma: Vec<Vec<f64>> = alphas
            .iter()
            .zip(&betas)
            .map(|(a, b)| {
                let g: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
                let s: f64 = g.iter().sum();
                g.iter().map(|x| x / s).collect()
            })
            .collect();
        let mut xi = Vec::with_capacity(o.len().saturating_sub(1));
        for t in 0..o.len() - 1 {
            let mut m = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    m[i][j] = alphas[t][i] * self.transition[i][j] * self.emission[j][o[t + 1]] * betas[t + 1][j]
                        / scales[t + 1];
                }
            }
            xi.push(m);
        }
        Ok(StatePosteriors { gamma, xi })
    }

    pub fn to_file(&self, mask: &ConstraintMask) -> HmmFile {
        HmmFile {
            states: self.states.clone(),
            symbols: self.symbols.clone(),
            a: self.transition.clone(),
            b: self.emission.clone(),
            pi: self.initial.clone(),
            mask: MaskFile {
                a_zero: mask.fixed_zero_transitions.iter().map(|&(i, j)| [i, j]).collect(),
                b_zero: mask.fixed_zero_emissions.iter().map(|&(i, k)| [i, k]).collect(),
                pi_zero: mask.fixed_zero_initial.iter().copied().collect(),
            },
        }
    }
}

/// Compensated summation, so long log-likelihood sums are insensitive to
/// rounding order.
pub(crate) fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePosteriors {
    /// gamma[t][i] = P(state_t = i | O)
    pub gamma: Vec<Vec<f64>>,
    /// xi[t][i][j] = P(state_t = i, state_{t+1} = j | O)
    pub xi: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSeq {
    pub symbols: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_labels: Option<Vec<String>>,
}

impl ObservationSeq {
    pub fn new(symbols: Vec<usize>) -> Self {
        ObservationSeq {
            symbols,
            stage_labels: None,
        }
    }

    pub fn with_stages(symbols: Vec<usize>, stages: Vec<String>) -> Result<Self> {
        if stages.len() != symbols.len() {
            return Err(HmmError::StageLabelLength {
                labels: stages.len(),
                len: symbols.len(),
            });
        }
        Ok(ObservationSeq {
            symbols,
            stage_labels: Some(stages),
        })
    }

    /// Maps symbol labels through the model alphabet.
    pub fn from_labels(model: &HmmModel, labels: &[&str]) -> Result<Self> {
        let symbols = labels
            .iter()
            .map(|l| model.symbol_index(l).ok_or_else(|| HmmError::UnknownSymbol(l.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(ObservationSeq::new(symbols))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Entries fixed to zero by domain knowledge.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintMask {
    pub fixed_zero_transitions: BTreeSet<(usize, usize)>,
    pub fixed_zero_emissions: BTreeSet<(usize, usize)>,
    pub fixed_zero_initial: BTreeSet<usize>,
}

impl ConstraintMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn zero_transition(mut self, from: usize, to: usize) -> Self {
        self.fixed_zero_transitions.insert((from, to));
        self
    }

    pub fn zero_emission(mut self, state: usize, symbol: usize) -> Self {
        self.fixed_zero_emissions.insert((state, symbol));
        self
    }

    pub fn zero_initial(mut self, state: usize) -> Self {
        self.fixed_zero_initial.insert(state);
        self
    }

    /// Checks that every row keeps at least one free entry.
    pub fn validate(&self, n_states: usize, n_symbols: usize) -> Result<()> {
        for i in 0..n_states {
            if (0..n_states).all(|j| self.fixed_zero_transitions.contains(&(i, j))) {
                return Err(HmmError::MaskTooRestrictive(format!("transition row {i}")));
            }
            if (0..n_symbols).all(|k| self.fixed_zero_emissions.contains(&(i, k))) {
                return Err(HmmError::MaskTooRestrictive(format!("emission row {i}")));
            }
        }
        if n_states > 0 && (0..n_states).all(|i| self.fixed_zero_initial.contains(&i)) {
            return Err(HmmError::MaskTooRestrictive("initial distribution".into()));
        }
        let oob = self.fixed_zero_transitions.iter().any(|&(i, j)| i >= n_states || j >= n_states)
            || self.fixed_zero_emissions.iter().any(|&(i, k)| i >= n_states || k >= n_symbols)
            || self.fixed_zero_initial.iter().any(|&i| i >= n_states);
        if oob {
            return Err(HmmError::InvalidModel("mask entry out of range".into()));
        }
        Ok(())
    }

    /// Whether the model has exactly zero at every masked entry.
    pub fn respected_by(&self, model: &HmmModel) -> bool {
        self.fixed_zero_transitions.iter().all(|&(i, j)| model.transition[i][j] == 0.0)
            && self.fixed_zero_emissions.iter().all(|&(i, k)| model.emission[i][k] == 0.0)
            && self.fixed_zero_initial.iter().all(|&i| model.initial[i] == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPath {
    pub states: Vec<usize>,
    pub log_probability: f64,
    pub change_points: Vec<usize>,
}

impl DecodedPath {
    pub fn new(states: Vec<usize>, log_probability: f64) -> Self {
        let change_points = (1..states.len()).filter(|&t| states[t] != states[t - 1]).collect();
        DecodedPath {
            states,
            log_probability,
            change_points,
        }
    }
}

fn stage_labels(obs: &ObservationSeq, len: usize) -> Result<&[String]> {
    let labels = obs.stage_labels.as_deref().ok_or(HmmError::MissingStageLabels)?;
    if labels.len() != len {
        return Err(HmmError::StageLabelLength {
            labels: labels.len(),
            len,
        });
    }
    Ok(labels)
}

/// Stage label at the earliest change point of the path, if any.
pub fn attribute_stage(path: &DecodedPath, obs: &ObservationSeq) -> Result<Option<String>> {
    let labels = stage_labels(obs, path.states.len())?;
    Ok(path.change_points.first().map(|&t| labels[t].clone()))
}

/// Stage at which the path first enters a state outside `clean_states`.
/// A path that is compromised from the first step is attributed to the
/// first stage.
pub fn attribute_compromise(
    path: &DecodedPath,
    obs: &ObservationSeq,
    clean_states: &[usize],
) -> Result<Option<(usize, String)>> {
    let labels = stage_labels(obs, path.states.len())?;
    Ok(path
        .states
        .iter()
        .position(|s| !clean_states.contains(s))
        .map(|t| (t, labels[t].clone())))
}

// ---- model file ----

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    #[serde(rename = "A_zero", default)]
    pub a_zero: Vec<[usize; 2]>,
    #[serde(rename = "B_zero", default)]
    pub b_zero: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pi_zero: Vec<usize>,
}

impl From<&MaskFile> for ConstraintMask {
    fn from(m: &MaskFile) -> Self {
        ConstraintMask {
            fixed_zero_transitions: m.a_zero.iter().map(|p| (p[0], p[1])).collect(),
            fixed_zero_emissions: m.b_zero.iter().map(|p| (p[0], p[1])).collect(),
            fixed_zero_initial: m.pi_zero.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmFile {
    pub states: Vec<String>,
    pub symbols: Vec<String>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    #[serde(default)]
    pub mask: MaskFile,
}

impl HmmFile {
    pub fn into_parts(self) -> Result<(HmmModel, ConstraintMask)> {
        let model = HmmModel::new(self.states, self.symbols, self.a, self.b, self.pi)?;
        let mask = ConstraintMask::from(&self.mask);
        mask.validate(model.n_states(), model.n_symbols())?;
        Ok((model, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    pub(crate) fn leak_model() -> HmmModel {
        // free / infested; symbols pass / leak
        HmmModel::new(
            labels(&["free", "infested"]),
            labels(&["pass", "leak"]),
            vec![vec![0.7, 0.3], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.8, 0.2]],
            vec![0.9, 0.1],
        )
        .unwrap()
    }

    #[test]
    fn single_state_likelihood() {
        let m = HmmModel::new(
            labels(&["s"]),
            labels(&["a", "b"]),
            vec![vec![1.0]],
            vec![vec![0.5, 0.5]],
            vec![1.0],
        )
        .unwrap();
        let ll = m.likelihood(&ObservationSeq::new(vec![0, 1, 0])).unwrap();
        assert!((ll - 0.125f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn impossible_and_empty_sequences() {
        let m = HmmModel::new(
            labels(&["x", "y"]),
            labels(&["a", "b", "never"]),
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![vec![0.5, 0.5, 0.0], vec![0.2, 0.8, 0.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        assert_eq!(m.likelihood(&ObservationSeq::new(vec![0, 2])), Err(HmmError::ImpossibleSequence));
        assert_eq!(m.decode(&ObservationSeq::new(vec![2])), Err(HmmError::ImpossibleSequence));
        assert_eq!(m.likelihood(&ObservationSeq::new(vec![])), Err(HmmError::EmptySequence));
        assert!(matches!(
            m.likelihood(&ObservationSeq::new(vec![7])),
            Err(HmmError::SymbolOutOfRange { .. })
        ));
    }

    #[test]
    fn forced_decoding_reads_off_observations() {
        let m = HmmModel::new(
            labels(&["x", "y", "z"]),
            labels(&["a", "b", "c"]),
            vec![vec![0.4, 0.3, 0.3], vec![0.3, 0.4, 0.3], vec![0.3, 0.3, 0.4]],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let obs = ObservationSeq::new(vec![2, 0, 0, 1, 2]);
        assert_eq!(m.decode(&obs).unwrap().states, vec![2, 0, 0, 1, 2]);
    }

    #[test]
    fn single_step_is_argmax_of_prior_times_emission() {
        let m = leak_model();
        // pi*b(pass): free 0.9, infested 0.08
        let p = m.decode(&ObservationSeq::new(vec![0])).unwrap();
        assert_eq!(p.states, vec![0]);
        assert!((p.log_probability - 0.9f64.ln()).abs() < 1e-12);
        let p = m.decode(&ObservationSeq::new(vec![1])).unwrap();
        assert_eq!(p.states, vec![1]);
    }

    #[test]
    fn leak_sequence_switches_at_earliest_step() {
        let m = leak_model();
        let obs = ObservationSeq::from_labels(&m, &["pass", "pass", "pass", "pass", "leak"]).unwrap();
        let path = m.decode(&obs).unwrap();
        // brute force over the 32 paths
        let mut best = (f64::NEG_INFINITY, vec![]);
        for code in 0..32u32 {
            let s: Vec<usize> = (0..5).map(|t| ((code >> (4 - t)) & 1) as usize).collect();
            let mut p = m.initial[s[0]] * m.emission[s[0]][obs.symbols[0]];
            for t in 1..5 {
                p *= m.transition[s[t - 1]][s[t]] * m.emission[s[t]][obs.symbols[t]];
            }
            if p > best.0 {
                best = (p, s);
            }
        }
        assert_eq!(path.states, best.1);
        assert_eq!(path.change_points, vec![1]);
    }

    #[test]
    fn stage_attribution() {
        let stages = labels(&["spec", "logic-design", "synthesis", "fab", "jtag"]);
        let obs = ObservationSeq::with_stages(vec![0; 5], stages.clone()).unwrap();
        let flat = DecodedPath::new(vec![0; 5], -1.0);
        assert_eq!(attribute_stage(&flat, &obs).unwrap(), None);
        let one = DecodedPath::new(vec![0, 1, 1, 1, 1], -1.0);
        assert_eq!(attribute_stage(&one, &obs).unwrap().as_deref(), Some("logic-design"));
        let two = DecodedPath::new(vec![0, 0, 1, 2, 2], -1.0);
        assert_eq!(attribute_stage(&two, &obs).unwrap().as_deref(), Some("synthesis"));
        let unlabeled = ObservationSeq::new(vec![0; 5]);
        assert_eq!(attribute_stage(&one, &unlabeled), Err(HmmError::MissingStageLabels));

        let from_start = DecodedPath::new(vec![1; 5], -1.0);
        assert_eq!(attribute_stage(&from_start, &obs).unwrap(), None);
        assert_eq!(
            attribute_compromise(&from_start, &obs, &[0]).unwrap(),
            Some((0, "spec".to_string()))
        );
        assert_eq!(attribute_compromise(&flat, &obs, &[0]).unwrap(), None);
    }

    #[test]
    fn mask_validation() {
        let full_row = ConstraintMask::none().zero_transition(0, 0).zero_transition(0, 1);
        assert!(matches!(full_row.validate(2, 2), Err(HmmError::MaskTooRestrictive(_))));
        assert!(ConstraintMask::none().zero_transition(1, 0).validate(2, 2).is_ok());
    }

    #[test]
    fn model_file_round_trip() {
        let m = leak_model();
        let mask = ConstraintMask::none().zero_transition(1, 0).zero_emission(0, 1);
        let text = serde_json::to_string(&m.to_file(&mask)).unwrap();
        assert!(text.contains("\"A_zero\":[[1,0]]"));
        let (m2, mask2) = serde_json::from_str::<HmmFile>(&text).unwrap().into_parts().unwrap();
        assert_eq!(m2, m);
        assert_eq!(mask2, mask);
    }
}
