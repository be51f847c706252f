use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{neumaier_sum, ConstraintMask, HmmError, HmmModel, ObservationSeq, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Model(HmmModel),
    /// Uniform over unmasked entries with ±5% seeded jitter.
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub states: Vec<String>,
    pub symbols: Vec<String>,
    pub mask: ConstraintMask,
    pub init: Init,
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub model: HmmModel,
    /// Total log-likelihood of the training data under the model at the
    /// start of each iteration, followed by the final model's value.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn jittered_row(rng: &mut ChaCha8Rng, len: usize, zero: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|k| if zero(k) { 0.0 } else { 1.0 + rng.random_range(-0.05..0.05) })
        .collect();
    let s: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= s;
    }
    row
}

fn seeded_model(cfg: &LearnConfig, seed: u64) -> HmmModel {
    let n = cfg.states.len();
    let m = cfg.symbols.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = &cfg.mask;
    let transition = (0..n)
        .map(|i| jittered_row(&mut rng, n, |j| mask.fixed_zero_transitions.contains(&(i, j))))
        .collect();
    let emission = (0..n)
        .map(|i| jittered_row(&mut rng, m, |k| mask.fixed_zero_emissions.contains(&(i, k))))
        .collect();
    let initial = jittered_row(&mut rng, n, |i| mask.fixed_zero_initial.contains(&i));
    HmmModel {
        states: cfg.states.clone(),
        symbols: cfg.symbols.clone(),
        transition,
        emission,
        initial,
    }
}

/// Normalizes expected counts over unmasked entries. A row that received no
/// expected mass keeps its previous values.
fn normalize_row(counts: &[f64], old: &[f64], zero: impl Fn(usize) -> bool) -> Vec<f64> {
    let s = neumaier_sum(counts.iter().enumerate().filter(|(k, _)| !zero(*k)).map(|(_, c)| *c));
    if !(s > 0.0) {
        return old.to_vec();
    }
    counts
        .iter()
        .enumerate()
        .map(|(k, c)| if zero(k) { 0.0 } else { c / s })
        .collect()
}

struct Counts {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    pi: Vec<f64>,
}

/// Expected counts under `model` and the total log-likelihood of `seqs`.
/// Zero transitions are skipped, which leaves every sum unchanged.
fn e_step(model: &HmmModel, seqs: &[ObservationSeq]) -> Result<(Counts, f64)> {
    let n = model.n_states();
    let m = model.n_symbols();
    let succ: Vec<Vec<usize>> = model
        .transition
        .iter()
        .map(|r| (0..n).filter(|&j| r[j] != 0.0).collect())
        .collect();
    let mut c = Counts {
        a: vec![vec![0.0; n]; n],
        b: vec![vec![0.0; m]; n],
        pi: vec![0.0; n],
    };
    let mut lls = Vec::with_capacity(seqs.len());
    // sequences are accumulated in input order so results are reproducible
    for seq in seqs {
        model.check_obs(seq)?;
        let o = &seq.symbols;
        let (alphas, scales) = model.forward_scaled(o)?;
        lls.push(neumaier_sum(scales.iter().map(|x| x.ln())));
        let t_len = o.len();
        let mut betas = vec![vec![1.0; n]; t_len];
        for t in (0..t_len - 1).rev() {
            let e = o[t + 1];
            for i in 0..n {
                let mut acc = 0.0;
                for &j in &succ[i] {
                    acc += model.transition[i][j] * model.emission[j][e] * betas[t + 1][j];
                }
                betas[t][i] = acc / scales[t + 1];
            }
        }
        for t in 0..t_len {
            let g: Vec<f64> = alphas[t].iter().zip(&betas[t]).map(|(x, y)| x * y).collect();
            let s: f64 = g.iter().sum();
            for i in 0..n {
                let gi = g[i] / s;
                if t == 0 {
                    c.pi[i] += gi;
                }
                c.b[i][o[t]] += gi;
            }
            if t + 1 < t_len {
                let e = o[t + 1];
                for i in 0..n {
                    for &j in &succ[i] {
                        c.a[i][j] += alphas[t][i] * model.transition[i][j] * model.emission[j][e] * betas[t + 1][j] / scales[t + 1];
                    }
                }
            }
        }
    }
    Ok((c, neumaier_sum(lls.into_iter())))
}

fn m_step(model: &HmmModel, c: &Counts, mask: &ConstraintMask) -> HmmModel {
    let n = model.n_states();
    let transition = (0..n)
        .map(|i| normalize_row(&c.a[i], &model.transition[i], |j| mask.fixed_zero_transitions.contains(&(i, j))))
        .collect();
    let emission = (0..n)
        .map(|i| normalize_row(&c.b[i], &model.emission[i], |k| mask.fixed_zero_emissions.contains(&(i, k))))
        .collect();
    let initial = normalize_row(&c.pi, &model.initial, |i| mask.fixed_zero_initial.contains(&i));
    HmmModel {
        states: model.states.clone(),
        symbols: model.symbols.clone(),
        transition,
        emission,
        initial,
    }
}

/// Baum-Welch with masked entries held at exactly zero.
pub fn learn(seqs: &[ObservationSeq], cfg: &LearnConfig) -> Result<LearnOutcome> {
    learn_with_observer(seqs, cfg, |_, _, _| {})
}

/// As [`learn`], calling `observer(iteration, model, log_likelihood)` after
/// every M-step.
pub fn learn_with_observer(
    seqs: &[ObservationSeq],
    cfg: &LearnConfig,
    mut observer: impl FnMut(usize, &HmmModel, f64),
) -> Result<LearnOutcome> {
    if seqs.is_empty() {
        return Err(HmmError::NoSequences);
    }
    let n = cfg.states.len();
    let m = cfg.symbols.len();
    cfg.mask.validate(n, m)?;
    let mut model = match &cfg.init {
        Init::Model(m0) => {
            m0.validate()?;
            if m0.states != cfg.states || m0.symbols != cfg.symbols {
                return Err(HmmError::InvalidModel("initial model labels differ from config".into()));
            }
            if !cfg.mask.respected_by(m0) {
                return Err(HmmError::MaskViolated("initial model".into()));
            }
            m0.clone()
        }
        Init::Seed(s) => seeded_model(cfg, *s),
    };
    let (mut counts, mut ll) = e_step(&model, seqs)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let next = m_step(&model, &counts, &cfg.mask);
        let (next_counts, next_ll) = e_step(&next, seqs)?;
        counts = next_counts;
        iterations += 1;
        observer(iterations, &next, next_ll);
        trace.push(next_ll);
        let gain = next_ll - ll;
        model = next;
        ll = next_ll;
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(LearnOutcome {
        model,
        log_likelihoods: trace,
        iterations,
        converged,
    })
}

/// Draws a state path and observation sequence of length `len`.
pub fn sample_sequence(model: &HmmModel, len: usize, rng: &mut impl Rng) -> (Vec<usize>, ObservationSeq) {
    fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &x) in p.iter().enumerate() {
            acc += x;
            if u < acc {
                return k;
            }
        }
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }
    let mut states = Vec::with_capacity(len);
    let mut obs = Vec::with_capacity(len);
    let mut s = draw(&model.initial, rng);
    for t in 0..len {
        if t > 0 {
            s = draw(&model.transition[s], rng);
        }
        states.push(s);
        obs.push(draw(&model.emission[s], rng));
    }
    (states, ObservationSeq::new(obs))
}
