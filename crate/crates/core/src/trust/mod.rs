//! Root-cause analysis over lifecycle evidence (backward trust) and
//! threat-model extension (forward trust).

mod bn_engine;
mod forward;
mod hmm_engine;
mod mln_engine;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{AnomalyError, EvidenceVector};
use crate::bn::{BnError, Priors, Structure, Variable};
use crate::hmm::{HmmError, MaskFile};
use crate::mln::{Formula, KnowledgeBase, MlnError, Predicate, Weight};
use crate::sim::{Actor, AttackLabel, Catalog, SimError, StageId, StageTestPlan, TEST_SYMBOLS};

pub use bn_engine::{backward_trust_bn, BnRun, BnSettings, HistoricalDb, Learner};
pub use forward::{forward_trust_extend, FeatureDecl, KnowledgeUpdate, NewCause};
pub use hmm_engine::backward_trust_hmm;
pub use mln_engine::backward_trust_mln;
pub use scenario::{
    learn_lifecycle_hmm, run_scenario1, run_scenario2, scenario1_history, Scenario1Config, Scenario2Config, ScenarioOutcome, ScenarioSetup,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub const FEATURE_STATES: [&str; 2] = ["normal", "anomalous"];
pub const CAUSE_STATES: [&str; 2] = ["absent", "present"];
pub const OBSERVATION_STATES: [&str; 2] = ["false", "true"];
pub const CLEAN_STATUS: &str = "trojan-free";
pub const INFESTED_STATUS: &str = "trojan-infested";

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("unknown observation `{0}`")]
    UnknownObservation(String),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("invalid knowledge update: {0}")]
    InvalidUpdate(String),
    #[error("invalid threat model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Bn(#[from] BnError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Mln(#[from] MlnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
}

pub type Result<T> = std::result::Result<T, TrustError>;

/// Coarse failure category, stable enough to map onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or inconsistent inputs.
    Input,
    /// Valid inputs on which a computation could not complete.
    Runtime,
    /// A model, template or update that breaks its own invariants.
    Model,
}

impl TrustError {
    pub fn class(&self) -> ErrorClass {
        use ErrorClass::*;
        match self {
            TrustError::UnknownObservation(_) => Input,
            TrustError::InsufficientHistory(_) => Runtime,
            TrustError::InvalidUpdate(_) | TrustError::InvalidModel(_) => Model,
            TrustError::Bn(e) => match e {
                BnError::ImpossibleEvidence => Runtime,
                BnError::UnknownVariable(_)
                | BnError::UnknownState { .. }
                | BnError::IncompleteAssignment(_)
                | BnError::QueryInEvidence(_)
                | BnError::IncompleteRecord(_)
                | BnError::BadLearningRate(_)
                | BnError::BadSmoothing(_) => Input,
                BnError::EmptyDataset { .. } => Runtime,
                _ => Model,
            },
            TrustError::Hmm(e) => match e {
                HmmError::ImpossibleSequence => Runtime,
                HmmError::InvalidModel(_) | HmmError::MaskTooRestrictive(_) | HmmError::MaskViolated(_) => Model,
                _ => Input,
            },
            TrustError::Mln(e) => match e {
                MlnError::UnsatisfiableEvidence => Runtime,
                MlnError::UnknownAtom(_) | MlnError::WorldSize { .. } | MlnError::UnknownFormula(_) => Input,
                MlnError::DomainTooLarge { .. } => Runtime,
                _ => Model,
            },
            TrustError::Sim(_) => Input,
            TrustError::Anomaly(e) => match e {
                AnomalyError::SeriesTooShort { .. } | AnomalyError::TooFewPoints(_) => Runtime,
                AnomalyError::UnknownFeature(_) | AnomalyError::UncoveredFeature(_) => Model,
                AnomalyError::BadParameter(_) => Input,
            },
        }
    }

    /// Pipeline step the error most likely came from.
    pub fn stage(&self) -> &'static str {
        match self {
            TrustError::Sim(_) => "simulate",
            TrustError::Anomaly(_) => "detect",
            TrustError::InsufficientHistory(_) => "learn",
            TrustError::InvalidUpdate(_) => "extend",
            TrustError::InvalidModel(_) => "model",
            TrustError::UnknownObservation(_) | TrustError::Bn(_) | TrustError::Hmm(_) | TrustError::Mln(_) => "infer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cause {
    pub id: String,
    pub stage: StageId,
    pub actors: Vec<Actor>,
    /// Observations this cause can produce.
    pub explains: Vec<String>,
    /// Prior probability the cause is present with no anomalous feature.
    pub base_rate: f64,
    /// Related feature → noisy-OR link strength.
    pub features: BTreeMap<String, f64>,
    /// Chance the cause alone produces each observation it explains.
    pub observation_strength: f64,
}

impl Cause {
    pub fn attack(&self) -> Option<AttackLabel> {
        self.id.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNode {
    pub stage: StageId,
    /// Prior rate at which the feature's detectors fire.
    pub anomaly_rate: f64,
}

/// Three-tier network for one observation: feature roots, cause nodes with
/// feature parents, and the observation with cause parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTemplate {
    pub observation: String,
    pub causes: Vec<String>,
    pub features: Vec<String>,
    pub structure: Structure,
    /// Dirichlet pseudocounts from the noisy-OR priors.
    pub priors: Priors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmTemplate {
    pub states: Vec<String>,
    pub clean_states: Vec<String>,
    pub symbols: Vec<String>,
    pub mask: MaskFile,
    pub stages: Vec<StageId>,
}

impl HmmTemplate {
    /// One trojan-free and one trojan-infested state per stage. The mask
    /// lets a design only move forward one stage at a time, never return to
    /// the free chain once infested, and start clean at the first stage.
    /// Free states cannot emit anomalies or the key leak, and only in-field
    /// states can emit the key leak.
    pub fn staged(stages: &[StageId]) -> Self {
        let symbols: Vec<String> = TEST_SYMBOLS.iter().map(|s| s.to_string()).collect();
        let sym = |name: &str| symbols.iter().position(|s| s == name).expect("standard symbol");
        let (anomalous, leak) = (sym("anomalous"), sym("key-leak"));
        let n = 2 * stages.len();
        let mut states = Vec::with_capacity(n);
        for s in stages {
            states.push(format!("{s}/{CLEAN_STATUS}"));
            states.push(format!("{s}/{INFESTED_STATUS}"));
        }
        let mut mask = MaskFile::default();
        for (k, stage) in stages.iter().enumerate() {
            for infested in [0, 1] {
                let i = 2 * k + infested;
                let allowed: Vec<usize> = if k + 1 == stages.len() {
                    vec![i]
                } else if infested == 1 {
                    vec![2 * k + 3]
                } else {
                    vec![2 * k + 2, 2 * k + 3]
                };
                mask.a_zero.extend((0..n).filter(|j| !allowed.contains(j)).map(|j| [i, j]));
                if infested == 0 {
                    mask.b_zero.push([i, anomalous]);
                }
                if infested == 0 || *stage != StageId::InField {
                    mask.b_zero.push([i, leak]);
                }
            }
        }
        mask.pi_zero = (1..n).collect();
        HmmTemplate {
            states,
            clean_states: vec![CLEAN_STATUS.into()],
            symbols,
            mask,
            stages: stages.to_vec(),
        }
    }

    /// Indices of `model` states whose status (the part after the last `/`)
    /// is clean.
    pub fn clean_indices(&self, states: &[String]) -> Vec<usize> {
        states
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let status = s.rsplit('/').next().unwrap_or(s);
                self.clean_states.iter().any(|c| c == status)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

impl Default for HmmTemplate {
    fn default() -> Self {
        HmmTemplate::staged(&StageTestPlan::default().stages)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub bn: BTreeMap<String, CausalTemplate>,
    pub mln: BTreeMap<String, KnowledgeBase>,
    pub hmm: HmmTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub format_version: u32,
    pub causes: Vec<Cause>,
    pub features: BTreeMap<String, FeatureNode>,
    /// Chance of the observation with no cause present.
    pub observation_leak: f64,
    /// Equivalent sample size of the template priors.
    pub prior_strength: f64,
    pub templates: Templates,
}

fn standard_explains(attack: AttackLabel) -> &'static str {
    use AttackLabel::*;
    match attack {
        ParametricTrojan | Recycled | DefectiveShipped => "accelerated-failure",
        InfoLeakTrojan | UnintentionalLeak => "key-leak",
        FunctionalTrojan => "functional-failure",
        Remarked => "marking-mismatch",
        Overproduced => "unaccounted-parts",
        None => "",
    }
}

fn standard_base_rate(attack: AttackLabel) -> f64 {
    use AttackLabel::*;
    match attack {
        Recycled => 0.15,
        Remarked => 0.08,
        UnintentionalLeak => 0.06,
        DefectiveShipped | Overproduced => 0.05,
        InfoLeakTrojan => 0.04,
        _ => 0.03,
    }
}

fn standard_strength(feature: &str) -> f64 {
    match feature {
        "early_failure_rate" => 0.3,
        "shipped_parts_count" | "bin_counts" => 0.6,
        "hardware_bin" | "debug_port_leak" | "marking_valid" => 0.9,
        _ => 0.8,
    }
}

fn standard_actors(attack: AttackLabel, primary: Actor) -> Vec<Actor> {
    let mut out = vec![primary];
    let extra = match attack {
        AttackLabel::ParametricTrojan | AttackLabel::DefectiveShipped => Some(Actor::Foundry),
        AttackLabel::FunctionalTrojan | AttackLabel::Overproduced => Some(Actor::RogueEmployee),
        _ => None,
    };
    out.extend(extra.filter(|a| *a != primary));
    out
}

/// `lead_dimension` → `LeadDimension`, `key-leak` → `KeyLeak`.
pub fn camel(name: &str) -> String {
    name.split(['-', '_'])
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut c = s.chars();
            c.next().map_or(String::new(), |f| f.to_uppercase().collect::<String>() + c.as_str())
        })
        .collect()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(1e-3, 1.0 - 1e-3)
}

/// Noisy-OR rows over binary parents in mixed-radix order.
fn noisy_or_rows(leak: f64, strengths: &[f64], ess: f64) -> Vec<Vec<f64>> {
    let k = strengths.len();
    (0..1usize << k)
        .map(|r| {
            let mut off = 1.0 - leak;
            for (j, s) in strengths.iter().enumerate() {
                if (r >> (k - 1 - j)) & 1 == 1 {
                    off *= 1.0 - s;
                }
            }
            let p = clamp_p(1.0 - off);
            vec![ess * (1.0 - p), ess * p]
        })
        .collect()
}

impl ThreatModel {
    /// One cause per attack label, related to the catalog items it perturbs.
    pub fn standard(catalog: &Catalog) -> Self {
        let mut causes = Vec::new();
        let mut features = BTreeMap::new();
        for attack in AttackLabel::ALL.iter().copied().filter(|a| *a != AttackLabel::None) {
            let (stage, actor) = attack.default_origin().expect("attack label");
            let related: BTreeMap<String, f64> = catalog
                .related_items(attack)
                .into_iter()
                .map(|f| (f.to_string(), standard_strength(f)))
                .collect();
            for f in related.keys() {
                features.entry(f.clone()).or_insert_with(|| FeatureNode {
                    stage: catalog.items[f].stage,
                    anomaly_rate: 0.05,
                });
            }
            causes.push(Cause {
                id: attack.as_str().into(),
                stage,
                actors: standard_actors(attack, actor),
                explains: vec![standard_explains(attack).into()],
                base_rate: standard_base_rate(attack),
                features: related,
                observation_strength: 0.6,
            });
        }
        let mut m = ThreatModel {
            format_version: MODEL_FORMAT_VERSION,
            causes,
            features,
            observation_leak: 0.05,
            prior_strength: 10.0,
            templates: Templates {
                bn: BTreeMap::new(),
                mln: BTreeMap::new(),
                hmm: HmmTemplate::default(),
            },
        };
        m.regenerate().expect("standard model is valid");
        m
    }

    pub fn cause(&self, id: &str) -> Option<&Cause> {
        self.causes.iter().find(|c| c.id == id)
    }

    pub fn observations(&self) -> BTreeSet<&str> {
        self.causes.iter().flat_map(|c| c.explains.iter().map(String::as_str)).collect()
    }

    /// Checks structural invariants and that every feature is a catalog item.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        self.validate_structure()?;
        for f in self.features.keys() {
            if !catalog.items.contains_key(f) {
                return Err(TrustError::InvalidModel(format!("feature {f} is not in the catalog")));
            }
        }
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.causes {
            if !ids.insert(c.id.as_str()) {
                return Err(TrustError::InvalidModel(format!("duplicate cause {}", c.id)));
            }
            if c.features.is_empty() {
                return Err(TrustError::InvalidModel(format!("cause {} has no related features", c.id)));
            }
            if c.explains.is_empty() {
                return Err(TrustError::InvalidModel(format!("cause {} explains no observation", c.id)));
            }
            if !(c.base_rate > 0.0 && c.base_rate < 1.0) {
                return Err(TrustError::InvalidModel(format!("cause {} base rate {}", c.id, c.base_rate)));
            }
            for (f, s) in &c.features {
                if !self.features.contains_key(f) {
                    return Err(TrustError::InvalidModel(format!("cause {} names unknown feature {f}", c.id)));
                }
                if !(*s > 0.0 && *s < 1.0) {
                    return Err(TrustError::InvalidModel(format!("link {}→{f} strength {s}", c.id)));
                }
            }
        }
        if !(self.prior_strength >= 0.0) {
            return Err(TrustError::InvalidModel("negative prior strength".into()));
        }
        Ok(())
    }

    /// Rebuilds every template from the causes and features.
    pub fn regenerate(&mut self) -> Result<()> {
        self.validate_structure()?;
        let obs: Vec<String> = self.observations().into_iter().map(String::from).collect();
        let mut bn = BTreeMap::new();
        let mut mln = BTreeMap::new();
        for o in obs {
            bn.insert(o.clone(), self.causal_template(&o)?);
            let kb = self.mln_template(&o)?;
            kb.ground_with_cap(usize::MAX)?;
            mln.insert(o, kb);
        }
        self.templates.bn = bn;
        self.templates.mln = mln;
        Ok(())
    }

    fn template_parts(&self, observation: &str) -> Result<(Vec<&Cause>, Vec<String>)> {
        let causes = candidate_causes(observation, self)?;
        let features: BTreeSet<String> = causes.iter().flat_map(|c| c.features.keys().cloned()).collect();
        Ok((causes, features.into_iter().collect()))
    }

    fn causal_template(&self, observation: &str) -> Result<CausalTemplate> {
        let (causes, features) = self.template_parts(observation)?;
        let ess = self.prior_strength.max(1e-9);
        let mut vars = Vec::new();
        let mut parents = Vec::new();
        let mut priors = Priors::new();
        for f in &features {
            vars.push(Variable::new(f.clone(), &FEATURE_STATES));
            parents.push(vec![]);
            let p = clamp_p(self.features[f].anomaly_rate);
            priors.insert(f.clone(), vec![vec![ess * (1.0 - p), ess * p]]);
        }
        for c in &causes {
            vars.push(Variable::new(c.id.clone(), &CAUSE_STATES));
            parents.push(c.features.keys().cloned().collect());
            let s: Vec<f64> = c.features.values().copied().collect();
            priors.insert(c.id.clone(), noisy_or_rows(c.base_rate, &s, ess));
        }
        vars.push(Variable::new(observation.to_string(), &OBSERVATION_STATES));
        parents.push(causes.iter().map(|c| c.id.clone()).collect());
        let s: Vec<f64> = causes.iter().map(|c| c.observation_strength).collect();
        priors.insert(observation.to_string(), noisy_or_rows(self.observation_leak, &s, ess));
        let structure = Structure::new(vars, parents)?;
        Ok(CausalTemplate {
            observation: observation.into(),
            causes: causes.iter().map(|c| c.id.clone()).collect(),
            features,
            structure,
            priors,
        })
    }

    fn mln_template(&self, observation: &str) -> Result<KnowledgeBase> {
        let (causes, features) = self.template_parts(observation)?;
        let mut kb = KnowledgeBase::default();
        kb.sorts.insert("Device".into(), vec!["Dut".into()]);
        kb.sorts.insert("Feature".into(), features.iter().map(|f| camel(f)).collect());
        kb.predicates.push(Predicate::new("Anomalous", &["Device", "Feature"]));
        for c in &causes {
            kb.predicates.push(Predicate::new(&camel(&c.id), &["Device"]));
        }
        let obs = camel(observation);
        kb.predicates.push(Predicate::new(&obs, &["Device"]));
        for c in &causes {
            let p = camel(&c.id);
            let prior = c.base_rate.ln() - (1.0 - c.base_rate).ln();
            kb.formulas.push(Formula::new(Weight::Soft(prior), &format!("{p}(d)")));
            for (f, s) in &c.features {
                kb.formulas
                    .push(Formula::new(Weight::Soft(-(1.0 - s).ln()), &format!("Anomalous(d, {}) => {p}(d)", camel(f))));
            }
            kb.formulas.push(Formula::new(
                Weight::Soft(-(1.0 - c.observation_strength).ln()),
                &format!("{p}(d) => {obs}(d)"),
            ));
        }
        let any: Vec<String> = causes.iter().map(|c| format!("{}(d)", camel(&c.id))).collect();
        kb.formulas.push(Formula::new(
            Weight::Soft(-clamp_p(self.observation_leak).ln()),
            &format!("{obs}(d) => {}", any.join(" | ")),
        ));
        Ok(kb)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// Causes whose effects include the observation, in model order.
pub fn candidate_causes<'a>(observation: &str, model: &'a ThreatModel) -> Result<Vec<&'a Cause>> {
    let out: Vec<&Cause> = model.causes.iter().filter(|c| c.explains.iter().any(|e| e == observation)).collect();
    if out.is_empty() {
        return Err(TrustError::UnknownObservation(observation.into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Bn,
    Hmm,
    Mln,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCause {
    pub cause: String,
    pub posterior: f64,
    pub stage: StageId,
    pub actors: Vec<Actor>,
    /// Truth value in the MAP world, for the MLN engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_map_world: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAttribution {
    pub stage: StageId,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseReport {
    pub schema_version: u32,
    pub observation: String,
    pub subject: String,
    pub engine: Engine,
    pub ranked_causes: Vec<RankedCause>,
    /// True when the cause posteriors form one distribution.
    pub exclusive: bool,
    pub implicated_stage: Option<StageAttribution>,
    pub implicated_actor: Option<Actor>,
    pub evidence: EvidenceVector,
    /// P(feature anomalous | observation) per template feature, before the
    /// device evidence is applied. Filled by the BN engine only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_posteriors: Vec<FeaturePosterior>,
    pub confidence_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePosterior {
    pub feature: String,
    pub stage: StageId,
    pub posterior: f64,
}

impl RootCauseReport {
    pub fn top_cause(&self) -> Option<&str> {
        self.ranked_causes.first().map(|c| c.cause.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table of the ranking.
    pub fn summary(&self) -> String {
        let mut s = format!("observation: {}\nsubject: {}\nengine: {:?}\n", self.observation, self.subject, self.engine);
        s.push_str(&format!("{:<4} {:<22} {:>10}  {:<24} actors\n", "rank", "cause", "posterior", "stage"));
        for (i, c) in self.ranked_causes.iter().enumerate() {
            let actors: Vec<&str> = c.actors.iter().map(|a| a.as_str()).collect();
            s.push_str(&format!(
                "{:<4} {:<22} {:>10.6}  {:<24} {}\n",
                i + 1,
                c.cause,
                c.posterior,
                c.stage.as_str(),
                actors.join(",")
            ));
        }
        match &self.implicated_stage {
            Some(st) => s.push_str(&format!("implicated stage: {} ({:.6})\n", st.stage, st.posterior)),
            None => s.push_str("implicated stage: none\n"),
        }
        if let Some(a) = self.implicated_actor {
            s.push_str(&format!("implicated actor: {a}\n"));
        }
        if !self.feature_posteriors.is_empty() {
            s.push_str(&format!("{:<26} {:<24} {:>10}\n", "feature", "stage", "P(anom|obs)"));
            for f in &self.feature_posteriors {
                s.push_str(&format!("{:<26} {:<24} {:>10.6}\n", f.feature, f.stage.as_str(), f.posterior));
            }
        }
        s.push_str(&format!("note: {}\n", self.confidence_note));
        s
    }
}

/// Sorts by posterior descending, cause id ascending on ties.
fn rank(causes: &mut [RankedCause]) {
    causes.sort_by(|a, b| b.posterior.total_cmp(&a.posterior).then_with(|| a.cause.cmp(&b.cause)));
}

fn ranked(cause: &Cause, posterior: f64) -> RankedCause {
    RankedCause {
        cause: cause.id.clone(),
        posterior,
        stage: cause.stage,
        actors: cause.actors.clone(),
        in_map_world: None,
    }
}
