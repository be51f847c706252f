//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siltwin_core::bn::{BayesNet, Evidence, Structure, Variable};
use siltwin_core::hmm::{sample_sequence, HmmModel, ObservationSeq};
use siltwin_core::mln::{Formula, GroundMrf, KnowledgeBase, Predicate, Weight};

fn stochastic(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Layered binary network: each node has up to two parents from the previous layer.
pub fn layered_net(layers: usize, width: usize, seed: u64) -> BayesNet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut vars = Vec::new();
    let mut parents = Vec::new();
    let mut tables = Vec::new();
    for l in 0..layers {
        for w in 0..width {
            vars.push(Variable::new(format!("n{l}_{w}"), &["f", "t"]));
            let ps: Vec<String> = if l == 0 {
                vec![]
            } else {
                let mut ps = vec![format!("n{}_{w}", l - 1)];
                if width > 1 {
                    ps.push(format!("n{}_{}", l - 1, (w + 1) % width));
                }
                ps
            };
            tables.push((0..1usize << ps.len()).map(|_| stochastic(&mut r, 2)).collect());
            parents.push(ps);
        }
    }
    BayesNet::from_tables(Structure::new(vars, parents).unwrap(), tables).unwrap()
}

/// Evidence on every node of the last layer.
pub fn leaf_evidence(net: &BayesNet, width: usize) -> Evidence {
    let vars = net.variables();
    let mut ev = Evidence::new();
    for v in &vars[vars.len() - width..] {
        ev.insert(v.name.clone(), "t".to_string());
    }
    ev
}

pub fn random_hmm(states: usize, symbols: usize, seed: u64) -> HmmModel {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..states).map(|_| stochastic(&mut r, states)).collect();
    let b = (0..states).map(|_| stochastic(&mut r, symbols)).collect();
    let pi = stochastic(&mut r, states);
    HmmModel::new(
        (0..states).map(|i| format!("s{i}")).collect(),
        (0..symbols).map(|k| format!("o{k}")).collect(),
        a,
        b,
        pi,
    )
    .unwrap()
}

pub fn sequences(model: &HmmModel, count: usize, len: usize, seed: u64) -> Vec<ObservationSeq> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_sequence(model, len, &mut r).1).collect()
}

/// Ground network over `consts` devices with chained implications between predicates.
pub fn chain_mrf(preds: usize, consts: usize, seed: u64) -> GroundMrf {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut kb = KnowledgeBase::default();
    kb.sorts.insert("D".into(), (0..consts).map(|c| format!("D{c}")).collect());
    kb.predicates = (0..preds).map(|p| Predicate::new(&format!("P{p}"), &["D"])).collect();
    for p in 0..preds {
        kb.formulas.push(Formula::new(Weight::Soft(r.random_range(-1.5..1.5)), &format!("P{p}(x)")));
        if p + 1 < preds {
            let w = r.random_range(0.5..2.5);
            kb.formulas.push(Formula::new(Weight::Soft(w), &format!("!P{p}(x) | P{}(x)", p + 1)));
        }
    }
    kb.ground_with_cap(preds * consts).unwrap()
}

/// Gaussian series with a mean shift at the midpoint.
pub fn shifted_series(len: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| {
            let z: f64 = (0..12).map(|_| r.random::<f64>()).sum::<f64>() - 6.0;
            z + if i >= len / 2 { shift } else { 0.0 }
        })
        .collect()
}
