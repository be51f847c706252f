//! Markov logic networks over small finite domains: grounding, world
//! probabilities by enumeration, and MAP inference.

mod infer;
mod parse;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

pub use infer::{map_inference, marginals, world_distribution, world_probability, MapOptions, WorldProbability};
pub use parse::{parse_clause, Expr, Term};

/// Ground-atom limit for exact (enumerative) inference.
pub const EXACT_CAP: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlnError {
    #[error("formula {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("formula {index}: undeclared predicate `{predicate}`")]
    UndeclaredPredicate { index: usize, predicate: String },
    #[error("formula {index}: `{predicate}` expects {expected} arguments, got {got}")]
    Arity {
        index: usize,
        predicate: String,
        expected: usize,
        got: usize,
    },
    #[error("formula {index}: variable `{var}` used at sorts `{first}` and `{second}`")]
    SortConflict {
        index: usize,
        var: String,
        first: String,
        second: String,
    },
    #[error("formula {index}: constant `{constant}` is not in sort `{sort}`")]
    ConstantSort { index: usize, constant: String, sort: String },
    #[error("unknown sort `{0}`")]
    UnknownSort(String),
    #[error("constant `{0}` appears in more than one sort")]
    DuplicateConstant(String),
    #[error("duplicate predicate `{0}`")]
    DuplicatePredicate(String),
    #[error("{atoms} ground atoms exceed the cap of {cap}")]
    DomainTooLarge { atoms: usize, cap: usize },
    #[error("world has {got} atoms, expected {expected}")]
    WorldSize { got: usize, expected: usize },
    #[error("formula index {0} out of range")]
    UnknownFormula(usize),
    #[error("no world satisfies the hard formulas and evidence")]
    UnsatisfiableEvidence,
    #[error("unknown ground atom `{0}`")]
    UnknownAtom(String),
}

pub type Result<T> = std::result::Result<T, MlnError>;

/// Formula weight; infinite weights are hard constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Soft(f64),
    /// Every grounding must hold.
    HardTrue,
    /// No grounding may hold.
    HardFalse,
}

impl Weight {
    pub fn is_hard(&self) -> bool {
        !matches!(self, Weight::Soft(_))
    }
}

impl Serialize for Weight {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Weight::Soft(w) => s.serialize_f64(*w),
            Weight::HardTrue => s.serialize_str("inf"),
            Weight::HardFalse => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Weight;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number, \"inf\" or \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Weight, E> {
                if v.is_finite() {
                    Ok(Weight::Soft(v))
                } else {
                    Err(E::custom("non-finite numeric weight; use \"inf\" or \"-inf\""))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Weight, E> {
                Ok(Weight::Soft(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Weight, E> {
                Ok(Weight::Soft(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Weight, E> {
                match v {
                    "inf" | "+inf" => Ok(Weight::HardTrue),
                    "-inf" => Ok(Weight::HardFalse),
                    _ => Err(E::custom(format!("bad weight `{v}`"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub sorts: Vec<String>,
}

impl Predicate {
    pub fn new(name: &str, sorts: &[&str]) -> Self {
        Predicate {
            name: name.into(),
            sorts: sorts.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.sorts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub weight: Weight,
    pub clause: String,
}

impl Formula {
    pub fn new(weight: Weight, clause: &str) -> Self {
        Formula {
            weight,
            clause: clause.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub sorts: BTreeMap<String, Vec<String>>,
    pub predicates: Vec<Predicate>,
    pub formulas: Vec<Formula>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundAtom {
    pub predicate: String,
    pub args: Vec<String>,
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{}({})", self.predicate, self.args.join(","))
    }
}

/// A formula instance over ground-atom indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroundExpr {
    Atom(usize),
    Not(Box<GroundExpr>),
    And(Vec<GroundExpr>),
    Or(Vec<GroundExpr>),
    Implies(Box<GroundExpr>, Box<GroundExpr>),
}

impl GroundExpr {
    pub fn eval(&self, world: &[bool]) -> bool {
        match self {
            GroundExpr::Atom(i) => world[*i],
            GroundExpr::Not(e) => !e.eval(world),
            GroundExpr::And(es) => es.iter().all(|e| e.eval(world)),
            GroundExpr::Or(es) => es.iter().any(|e| e.eval(world)),
            GroundExpr::Implies(a, b) => !a.eval(world) || b.eval(world),
        }
    }

    pub fn atoms(&self, out: &mut Vec<usize>) {
        match self {
            GroundExpr::Atom(i) => out.push(*i),
            GroundExpr::Not(e) => e.atoms(out),
            GroundExpr::And(es) | GroundExpr::Or(es) => es.iter().for_each(|e| e.atoms(out)),
            GroundExpr::Implies(a, b) => {
                a.atoms(out);
                b.atoms(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundClause {
    pub formula: usize,
    pub weight: Weight,
    pub expr: GroundExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundMrf {
    pub ground_atoms: Vec<GroundAtom>,
    pub ground_clauses: Vec<GroundClause>,
    pub formula_weights: Vec<Weight>,
    index: HashMap<GroundAtom, usize>,
}

/// One truth value per ground atom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct World(pub Vec<bool>);

impl GroundMrf {
    pub fn atom_index(&self, predicate: &str, args: &[&str]) -> Option<usize> {
        let key = GroundAtom {
            predicate: predicate.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
        };
        self.index.get(&key).copied()
    }

    /// Looks up an atom written as `Pred(A,B)`.
    pub fn atom_by_name(&self, text: &str) -> Result<usize> {
        let unknown = || MlnError::UnknownAtom(text.to_string());
        let (pred, rest) = text.split_once('(').ok_or_else(unknown)?;
        let inner = rest.strip_suffix(')').ok_or_else(unknown)?;
        let args: Vec<&str> = inner.split(',').map(str::trim).collect();
        self.atom_index(pred.trim(), &args).ok_or_else(unknown)
    }

    pub fn n_atoms(&self) -> usize {
        self.ground_atoms.len()
    }

    pub(crate) fn check_world(&self, world: &World) -> Result<()> {
        if world.0.len() != self.n_atoms() {
            return Err(MlnError::WorldSize {
                got: world.0.len(),
                expected: self.n_atoms(),
            });
        }
        Ok(())
    }

    /// n_i(x): satisfied groundings of formula `formula` in `world`.
    pub fn count_true_groundings(&self, formula: usize, world: &World) -> Result<usize> {
        if formula >= self.formula_weights.len() {
            return Err(MlnError::UnknownFormula(formula));
        }
        self.check_world(world)?;
        Ok(self
            .ground_clauses
            .iter()
            .filter(|c| c.formula == formula && c.expr.eval(&world.0))
            .count())
    }

    /// Whether every hard formula is respected.
    pub fn satisfies_hard(&self, world: &[bool]) -> bool {
        self.ground_clauses.iter().all(|c| match c.weight {
            Weight::Soft(_) => true,
            Weight::HardTrue => c.expr.eval(world),
            Weight::HardFalse => !c.expr.eval(world),
        })
    }

    /// Σ_i w_i n_i(x) over soft formulas.
    pub fn soft_score(&self, world: &[bool]) -> f64 {
        let mut s = 0.0;
        for c in &self.ground_clauses {
            if let Weight::Soft(w) = c.weight {
                if c.expr.eval(world) {
                    s += w;
                }
            }
        }
        s
    }
}

struct Validated {
    exprs: Vec<Expr>,
    /// per formula: variables in first-appearance order, with their sorts
    vars: Vec<Vec<(String, String)>>,
}

impl KnowledgeBase {
    fn validate(&self) -> Result<Validated> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (sort, consts) in &self.sorts {
            for c in consts {
                if owner.insert(c, sort).is_some() {
                    return Err(MlnError::DuplicateConstant(c.clone()));
                }
            }
        }
        let mut preds: BTreeMap<&str, &Predicate> = BTreeMap::new();
        for p in &self.predicates {
            if preds.insert(&p.name, p).is_some() {
                return Err(MlnError::DuplicatePredicate(p.name.clone()));
            }
            for s in &p.sorts {
                if !self.sorts.contains_key(s) {
                    return Err(MlnError::UnknownSort(s.clone()));
                }
            }
        }
        let mut exprs = Vec::new();
        let mut vars = Vec::new();
        for (index, f) in self.formulas.iter().enumerate() {
            let e = parse_clause(&f.clause).map_err(|message| MlnError::Parse { index, message })?;
            let mut vs: Vec<(String, String)> = Vec::new();
            check_expr(&e, index, &preds, &owner, &mut vs)?;
            exprs.push(e);
            vars.push(vs);
        }
        Ok(Validated { exprs, vars })
    }

    pub fn atom_count(&self) -> usize {
        self.predicates
            .iter()
            .map(|p| p.sorts.iter().map(|s| self.sorts.get(s).map_or(0, |c| c.len())).product::<usize>())
            .sum()
    }

    /// Grounds the KB, refusing domains larger than [`EXACT_CAP`] atoms.
    pub fn ground(&self) -> Result<GroundMrf> {
        self.ground_with_cap(EXACT_CAP)
    }

    pub fn ground_with_cap(&self, cap: usize) -> Result<GroundMrf> {
        let v = self.validate()?;
        let atoms_total = self.atom_count();
        if atoms_total > cap {
            return Err(MlnError::DomainTooLarge { atoms: atoms_total, cap });
        }
        let mut ground_atoms = Vec::with_capacity(atoms_total);
        for p in &self.predicates {
            let domains: Vec<&Vec<String>> = p.sorts.iter().map(|s| &self.sorts[s]).collect();
            for tuple in cross_product(&domains) {
                ground_atoms.push(GroundAtom {
                    predicate: p.name.clone(),
                    args: tuple,
                });
            }
        }
        let index: HashMap<GroundAtom, usize> =
            ground_atoms.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();
        let mut ground_clauses = Vec::new();
        for (fi, (expr, vars)) in v.exprs.iter().zip(&v.vars).enumerate() {
            let domains: Vec<&Vec<String>> = vars.iter().map(|(_, s)| &self.sorts[s]).collect();
            for tuple in cross_product(&domains) {
                let binding: BTreeMap<&str, &str> =
                    vars.iter().map(|(n, _)| n.as_str()).zip(tuple.iter().map(String::as_str)).collect();
                ground_clauses.push(GroundClause {
                    formula: fi,
                    weight: self.formulas[fi].weight,
                    expr: ground_expr(expr, &binding, &index),
                });
            }
        }
        Ok(GroundMrf {
            ground_atoms,
            ground_clauses,
            formula_weights: self.formulas.iter().map(|f| f.weight).collect(),
            index,
        })
    }
}

fn check_expr(
    e: &Expr,
    index: usize,
    preds: &BTreeMap<&str, &Predicate>,
    owner: &BTreeMap<&str, &str>,
    vars: &mut Vec<(String, String)>,
) -> Result<()> {
    match e {
        Expr::Atom { predicate, args } => {
            let p = preds.get(predicate.as_str()).ok_or_else(|| MlnError::UndeclaredPredicate {
                index,
                predicate: predicate.clone(),
            })?;
            if p.arity() != args.len() {
                return Err(MlnError::Arity {
                    index,
                    predicate: predicate.clone(),
                    expected: p.arity(),
                    got: args.len(),
                });
            }
            for (arg, sort) in args.iter().zip(&p.sorts) {
                match arg {
                    Term::Var(name) => match vars.iter().find(|(n, _)| n == name) {
                        Some((_, s)) if s != sort => {
                            return Err(MlnError::SortConflict {
                                index,
                                var: name.clone(),
                                first: s.clone(),
                                second: sort.clone(),
                            })
                        }
                        Some(_) => {}
                        None => vars.push((name.clone(), sort.clone())),
                    },
                    Term::Const(c) => {
                        if owner.get(c.as_str()) != Some(&sort.as_str()) {
                            return Err(MlnError::ConstantSort {
                                index,
                                constant: c.clone(),
                                sort: sort.clone(),
                            });
                        }
                    }
                }
            }
            Ok(())
        }
        Expr::Not(x) => check_expr(x, index, preds, owner, vars),
        Expr::And(xs) | Expr::Or(xs) => xs.iter().try_for_each(|x| check_expr(x, index, preds, owner, vars)),
        Expr::Implies(a, b) => {
            check_expr(a, index, preds, owner, vars)?;
            check_expr(b, index, preds, owner, vars)
        }
    }
}

fn ground_expr(e: &Expr, binding: &BTreeMap<&str, &str>, index: &HashMap<GroundAtom, usize>) -> GroundExpr {
    match e {
        Expr::Atom { predicate, args } => {
            let atom = GroundAtom {
                predicate: predicate.clone(),
                args: args
                    .iter()
                    .map(|t| match t {
                        Term::Var(v) => binding[v.as_str()].to_string(),
                        Term::Const(c) => c.clone(),
                    })
                    .collect(),
            };
            GroundExpr::Atom(index[&atom])
        }
        Expr::Not(x) => GroundExpr::Not(Box::new(ground_expr(x, binding, index))),
        Expr::And(xs) => GroundExpr::And(xs.iter().map(|x| ground_expr(x, binding, index)).collect()),
        Expr::Or(xs) => GroundExpr::Or(xs.iter().map(|x| ground_expr(x, binding, index)).collect()),
        Expr::Implies(a, b) => GroundExpr::Implies(
            Box::new(ground_expr(a, binding, index)),
            Box::new(ground_expr(b, binding, index)),
        ),
    }
}

/// All tuples over the given domains, first position slowest.
fn cross_product(domains: &[&Vec<String>]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for d in domains {
        let mut next = Vec::with_capacity(out.len() * d.len());
        for prefix in &out {
            for c in d.iter() {
                let mut t = prefix.clone();
                t.push(c.clone());
                next.push(t);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn kb(sorts: &[(&str, &[&str])], preds: &[Predicate], formulas: &[(Weight, &str)]) -> KnowledgeBase {
        KnowledgeBase {
            sorts: sorts
                .iter()
                .map(|(s, cs)| (s.to_string(), cs.iter().map(|c| c.to_string()).collect()))
                .collect(),
            predicates: preds.to_vec(),
            formulas: formulas.iter().map(|(w, c)| Formula::new(*w, c)).collect(),
        }
    }

    #[test]
    fn unary_grounding_counts() {
        let k = kb(
            &[("Thing", &["A", "B", "C"])],
            &[Predicate::new("P", &["Thing"])],
            &[(Weight::Soft(1.0), "P(x)")],
        );
        let g = k.ground().unwrap();
        assert_eq!(g.n_atoms(), 3);
        assert_eq!(g.ground_clauses.len(), 3);
    }

    #[test]
    fn binary_predicate_product_rule() {
        let k = kb(
            &[("S", &["A", "B"]), ("T", &["X", "Y", "Z"])],
            &[Predicate::new("R", &["S", "T"])],
            &[],
        );
        let g = k.ground().unwrap();
        assert_eq!(g.n_atoms(), 6);
        assert_eq!(g.ground_atoms[1].to_string(), "R(A,Y)");
        assert_eq!(g.atom_by_name("R(B, Z)").unwrap(), 5);
    }

    #[test]
    fn validation_errors() {
        let preds = [Predicate::new("P", &["S"])];
        let bad = kb(&[("S", &["A"])], &preds, &[(Weight::Soft(1.0), "Q(x)")]);
        assert!(matches!(bad.ground(), Err(MlnError::UndeclaredPredicate { .. })));
        let bad = kb(&[("S", &["A"])], &preds, &[(Weight::Soft(1.0), "P(x, y)")]);
        assert!(matches!(bad.ground(), Err(MlnError::Arity { .. })));
        let bad = kb(&[("S", &["A"])], &preds, &[(Weight::Soft(1.0), "P(Zed)")]);
        assert!(matches!(bad.ground(), Err(MlnError::ConstantSort { .. })));
        let dup = kb(&[("S", &["A"]), ("T", &["A"])], &preds, &[]);
        assert!(matches!(dup.ground(), Err(MlnError::DuplicateConstant(_))));
        let big = kb(
            &[("S", &["A", "B", "C", "D", "E"])],
            &[Predicate::new("R", &["S", "S"])],
            &[],
        );
        assert_eq!(big.ground().unwrap_err(), MlnError::DomainTooLarge { atoms: 25, cap: 20 });
        assert_eq!(big.ground_with_cap(100).unwrap().n_atoms(), 25);
    }

    #[test]
    fn true_grounding_counts() {
        let k = kb(
            &[("S", &["A", "B"])],
            &[Predicate::new("P", &["S"]), Predicate::new("Q", &["S"])],
            &[
                (Weight::Soft(1.0), "P(x) | !P(x)"),
                (Weight::Soft(1.0), "P(x) & !P(x)"),
                (Weight::Soft(1.0), "P(x) => Q(x)"),
            ],
        );
        let g = k.ground().unwrap();
        // P all true, Q all false
        let w = World(vec![true, true, false, false]);
        assert_eq!(g.count_true_groundings(0, &w).unwrap(), 2);
        assert_eq!(g.count_true_groundings(1, &w).unwrap(), 0);
        assert_eq!(g.count_true_groundings(2, &w).unwrap(), 0);
        assert_eq!(g.count_true_groundings(3, &w), Err(MlnError::UnknownFormula(3)));
    }

    #[test]
    fn kb_json_weights() {
        let text = r#"{"sorts":{"Device":["Dut"],"Feature":["EtchDepth"]},
            "predicates":[{"name":"Anomalous","sorts":["Device","Feature"]},{"name":"ParametricTrojan","sorts":["Device"]}],
            "formulas":[{"weight":1.5,"clause":"Anomalous(d,EtchDepth) => ParametricTrojan(d)"},
                        {"weight":"inf","clause":"ParametricTrojan(Dut) | !ParametricTrojan(Dut)"},
                        {"weight":"-inf","clause":"Anomalous(d, EtchDepth) & !Anomalous(d, EtchDepth)"}]}"#;
        let k: KnowledgeBase = serde_json::from_str(text).unwrap();
        assert_eq!(k.formulas[0].weight, Weight::Soft(1.5));
        assert_eq!(k.formulas[1].weight, Weight::HardTrue);
        assert_eq!(k.formulas[2].weight, Weight::HardFalse);
        let back = serde_json::to_string(&k).unwrap();
        assert!(back.contains("\"weight\":\"inf\""));
        assert_eq!(serde_json::from_str::<KnowledgeBase>(&back).unwrap(), k);
        assert_eq!(k.ground().unwrap().n_atoms(), 2);
    }
}
