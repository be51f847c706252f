use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GroundMrf, MlnError, Result, Weight, World, EXACT_CAP};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldProbability {
    pub probability: f64,
    pub hard_violated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    /// Free-atom limit for exact enumeration.
    pub exact_cap: usize,
    pub noise: f64,
    pub restarts: usize,
    /// Flips per restart, as a multiple of the atom count.
    pub flips_per_atom: usize,
    pub seed: u64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            exact_cap: EXACT_CAP,
            noise: 0.2,
            restarts: 10,
            flips_per_atom: 10,
            seed: 0,
        }
    }
}

fn check_exact(mrf: &GroundMrf) -> Result<()> {
    if mrf.n_atoms() > EXACT_CAP {
        return Err(MlnError::DomainTooLarge {
            atoms: mrf.n_atoms(),
            cap: EXACT_CAP,
        });
    }
    Ok(())
}

/// Visits every completion of `fixed`, free atoms enumerated in
/// lexicographic order (false before true, lowest index most significant).
fn for_each_completion(fixed: &[Option<bool>], mut f: impl FnMut(&[bool])) {
    let free: Vec<usize> = (0..fixed.len()).filter(|&i| fixed[i].is_none()).collect();
    let mut world: Vec<bool> = fixed.iter().map(|v| v.unwrap_or(false)).collect();
    let k = free.len();
    for code in 0u64..(1u64 << k) {
        for (j, &i) in free.iter().enumerate() {
            world[i] = (code >> (k - 1 - j)) & 1 == 1;
        }
        f(&world);
    }
}

fn log_partition(mrf: &GroundMrf, fixed: &[Option<bool>]) -> Option<f64> {
    let mut scores = Vec::new();
    for_each_completion(fixed, |w| {
        if mrf.satisfies_hard(w) {
            scores.push(mrf.soft_score(w));
        }
    });
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return None;
    }
    let s: f64 = scores.iter().map(|x| (x - max).exp()).sum();
    Some(max + s.ln())
}

/// P(X = x) = exp(Σ w_i n_i(x)) / Z, with Z summed over worlds that satisfy
/// every hard formula. A world violating a hard formula gets probability 0.
pub fn world_probability(mrf: &GroundMrf, world: &World) -> Result<WorldProbability> {
    check_exact(mrf)?;
    mrf.check_world(world)?;
    if !mrf.satisfies_hard(&world.0) {
        return Ok(WorldProbability {
            probability: 0.0,
            hard_violated: true,
        });
    }
    let log_z = log_partition(mrf, &vec![None; mrf.n_atoms()]).ok_or(MlnError::UnsatisfiableEvidence)?;
    Ok(WorldProbability {
        probability: (mrf.soft_score(&world.0) - log_z).exp(),
        hard_violated: false,
    })
}

/// Probability of every world, indexed by the truth vector read as a binary
/// number with atom 0 most significant.
pub fn world_distribution(mrf: &GroundMrf) -> Result<Vec<f64>> {
    check_exact(mrf)?;
    let fixed = vec![None; mrf.n_atoms()];
    let log_z = log_partition(mrf, &fixed).ok_or(MlnError::UnsatisfiableEvidence)?;
    let mut out = Vec::with_capacity(1 << mrf.n_atoms());
    for_each_completion(&fixed, |w| {
        out.push(if mrf.satisfies_hard(w) { (mrf.soft_score(w) - log_z).exp() } else { 0.0 });
    });
    Ok(out)
}

/// P(atom = true | evidence) for every atom, by enumeration.
pub fn marginals(mrf: &GroundMrf, evidence: &[Option<bool>]) -> Result<Vec<f64>> {
    check_exact(mrf)?;
    check_evidence(mrf, evidence)?;
    let log_z = log_partition(mrf, evidence).ok_or(MlnError::UnsatisfiableEvidence)?;
    let mut acc = vec![0.0; mrf.n_atoms()];
    for_each_completion(evidence, |w| {
        if mrf.satisfies_hard(w) {
            let p = (mrf.soft_score(w) - log_z).exp();
            for (a, &t) in acc.iter_mut().zip(w) {
                if t {
                    *a += p;
                }
            }
        }
    });
    Ok(acc)
}

fn check_evidence(mrf: &GroundMrf, evidence: &[Option<bool>]) -> Result<()> {
    if evidence.len() != mrf.n_atoms() {
        return Err(MlnError::WorldSize {
            got: evidence.len(),
            expected: mrf.n_atoms(),
        });
    }
    Ok(())
}

/// Most probable world consistent with `evidence`.
///
/// With at most `exact_cap` free atoms the answer is exact and ties go to
/// the lexicographically smallest truth vector. Larger problems use seeded
/// MaxWalkSAT with restarts.
pub fn map_inference(mrf: &GroundMrf, evidence: &[Option<bool>], opts: &MapOptions) -> Result<World> {
    check_evidence(mrf, evidence)?;
    let free = evidence.iter().filter(|e| e.is_none()).count();
    if free <= opts.exact_cap && free < 63 {
        exact_map(mrf, evidence)
    } else {
        walksat(mrf, evidence, opts)
    }
}

fn exact_map(mrf: &GroundMrf, evidence: &[Option<bool>]) -> Result<World> {
    let mut best: Option<(f64, Vec<bool>)> = None;
    for_each_completion(evidence, |w| {
        if !mrf.satisfies_hard(w) {
            return;
        }
        let s = mrf.soft_score(w);
        let better = match &best {
            None => true,
            Some((b, _)) => s > b + 1e-12 * b.abs().max(1.0),
        };
        if better {
            best = Some((s, w.to_vec()));
        }
    });
    best.map(|(_, w)| World(w)).ok_or(MlnError::UnsatisfiableEvidence)
}

/// Hard violations and soft cost of one ground clause in `world`.
fn clause_cost(weight: Weight, sat: bool) -> (usize, f64) {
    match weight {
        Weight::HardTrue => (usize::from(!sat), 0.0),
        Weight::HardFalse => (usize::from(sat), 0.0),
        Weight::Soft(w) if w >= 0.0 => (0, if sat { 0.0 } else { w }),
        Weight::Soft(w) => (0, if sat { -w } else { 0.0 }),
    }
}

fn walksat(mrf: &GroundMrf, evidence: &[Option<bool>], opts: &MapOptions) -> Result<World> {
    let n = mrf.n_atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let clause_atoms: Vec<Vec<usize>> = mrf
        .ground_clauses
        .iter()
        .map(|c| {
            let mut v = Vec::new();
            c.expr.atoms(&mut v);
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (ci, atoms) in clause_atoms.iter().enumerate() {
        for &a in atoms {
            touching[a].push(ci);
        }
    }
    let cost_of = |w: &[bool], ci: usize| {
        let c = &mrf.ground_clauses[ci];
        clause_cost(c.weight, c.expr.eval(w))
    };
    let total = |w: &[bool]| {
        let mut h = 0usize;
        let mut s = 0.0;
        for ci in 0..mrf.ground_clauses.len() {
            let (a, b) = cost_of(w, ci);
            h += a;
            s += b;
        }
        (h, s)
    };
    let better = |a: (usize, f64), b: (usize, f64)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1 - 1e-12);
    let flips = opts.flips_per_atom.max(1) * n.max(1);
    let mut best: Option<((usize, f64), Vec<bool>)> = None;
    for _ in 0..opts.restarts.max(1) {
        let mut w: Vec<bool> = evidence.iter().map(|e| e.unwrap_or_else(|| rng.random())).collect();
        let mut cost = total(&w);
        if best.as_ref().is_none_or(|(b, _)| better(cost, *b)) {
            best = Some((cost, w.clone()));
        }
        for _ in 0..flips {
            let unsat: Vec<usize> = (0..mrf.ground_clauses.len())
                .filter(|&ci| {
                    let (h, s) = cost_of(&w, ci);
                    (h > 0 || s > 0.0) && clause_atoms[ci].iter().any(|&a| evidence[a].is_none())
                })
                .collect();
            if unsat.is_empty() {
                break;
            }
            let ci = unsat[rng.random_range(0..unsat.len())];
            let candidates: Vec<usize> = clause_atoms[ci].iter().copied().filter(|&a| evidence[a].is_none()).collect();
            let atom = if rng.random::<f64>() < opts.noise {
                candidates[rng.random_range(0..candidates.len())]
            } else {
                let mut pick = candidates[0];
                let mut pick_delta = (i64::MAX, f64::INFINITY);
                for &a in &candidates {
                    let mut dh = 0i64;
                    let mut ds = 0.0;
                    for &cj in &touching[a] {
                        let before = cost_of(&w, cj);
                        w[a] = !w[a];
                        let after = cost_of(&w, cj);
                        w[a] = !w[a];
                        dh += after.0 as i64 - before.0 as i64;
                        ds += after.1 - before.1;
                    }
                    if (dh, ds) < pick_delta {
                        pick_delta = (dh, ds);
                        pick = a;
                    }
                }
                pick
            };
            w[atom] = !w[atom];
            cost = total(&w);
            if best.as_ref().is_none_or(|(b, _)| better(cost, *b)) {
                best = Some((cost, w.clone()));
            }
        }
    }
    match best {
        Some(((0, _), w)) => Ok(World(w)),
        _ => Err(MlnError::UnsatisfiableEvidence),
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::kb;
    use super::super::*;
    use super::*;

    fn two_atoms(formulas: &[(Weight, &str)]) -> GroundMrf {
        kb(&[("S", &["A", "B"])], &[Predicate::new("P", &["S"])], formulas).ground().unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_worlds() {
        let g = two_atoms(&[(Weight::Soft(0.0), "P(x)")]);
        for bits in 0..4 {
            let w = World(vec![bits & 2 != 0, bits & 1 != 0]);
            assert!((world_probability(&g, &w).unwrap().probability - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_unit_clause_is_logistic() {
        let g = kb(&[("S", &["A"])], &[Predicate::new("P", &["S"])], &[(Weight::Soft(1.3), "P(x)")])
            .ground()
            .unwrap();
        let p = world_probability(&g, &World(vec![true])).unwrap().probability;
        let want = 1.3f64.exp() / (1.3f64.exp() + 1.0);
        assert!((p - want).abs() < 1e-12);
        assert!((marginals(&g, &[None]).unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn hard_violation_has_zero_probability() {
        let g = two_atoms(&[(Weight::HardTrue, "P(A)"), (Weight::Soft(0.5), "P(x)")]);
        let r = world_probability(&g, &World(vec![false, true])).unwrap();
        assert_eq!(r.probability, 0.0);
        assert!(r.hard_violated);
        let ok = world_probability(&g, &World(vec![true, true])).unwrap();
        assert!(!ok.hard_violated && ok.probability > 0.5);
    }

    #[test]
    fn distribution_agrees_with_world_probability() {
        let g = two_atoms(&[(Weight::HardTrue, "P(A) | P(B)"), (Weight::Soft(0.7), "P(x)")]);
        let d = world_distribution(&g).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d[0], 0.0);
        for (code, &p) in d.iter().enumerate() {
            let w = World(vec![code & 2 != 0, code & 1 != 0]);
            assert!((world_probability(&g, &w).unwrap().probability - p).abs() < 1e-15);
        }
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn map_cases() {
        let g = two_atoms(&[(Weight::Soft(2.0), "P(A)"), (Weight::Soft(-1.0), "P(B)")]);
        let opts = MapOptions::default();
        assert_eq!(map_inference(&g, &[None, None], &opts).unwrap(), World(vec![true, false]));
        assert_eq!(
            map_inference(&g, &[Some(false), Some(true)], &opts).unwrap(),
            World(vec![false, true])
        );
        // tie between all worlds: all-false is lexicographically smallest
        let flat = two_atoms(&[(Weight::Soft(0.0), "P(x)")]);
        assert_eq!(map_inference(&flat, &[None, None], &opts).unwrap(), World(vec![false, false]));
        let hard = two_atoms(&[(Weight::HardTrue, "P(A)")]);
        assert_eq!(
            map_inference(&hard, &[Some(false), None], &opts),
            Err(MlnError::UnsatisfiableEvidence)
        );
    }

    #[test]
    fn local_search_solves_unit_clauses() {
        let consts: Vec<String> = (0..30).map(|i| format!("C{i}")).collect();
        let refs: Vec<&str> = consts.iter().map(String::as_str).collect();
        let k = kb(
            &[("S", &refs)],
            &[Predicate::new("P", &["S"]), Predicate::new("Q", &["S"])],
            &[(Weight::Soft(1.0), "P(x)"), (Weight::Soft(-1.0), "Q(x)"), (Weight::HardTrue, "P(x) => !Q(x)")],
        );
        let g = k.ground_with_cap(100).unwrap();
        let w = map_inference(&g, &vec![None; 60], &MapOptions { seed: 4, ..Default::default() }).unwrap();
        assert!(w.0[..30].iter().all(|&b| b));
        assert!(w.0[30..].iter().all(|&b| !b));
    }
}
