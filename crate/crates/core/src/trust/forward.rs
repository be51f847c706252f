use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Cause, FeatureNode, Result, ThreatModel, TrustError};
use crate::anomaly::{DetectorRegistry, FeatureInfo};
use crate::sim::{Actor, AttackLabel, Catalog, Effect, Nominal, ProcessParams, Scope, StageId, ValueKind};

/// A data item introduced by an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecl {
    pub name: String,
    pub stage: StageId,
    pub units: String,
    pub nominal: Nominal,
    /// Shift direction, in nominal sds per unit magnitude, under the cause.
    pub shift: f64,
    pub anomaly_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewCause {
    pub stage: StageId,
    pub actors: Vec<Actor>,
    pub explains: Vec<String>,
    pub base_rate: f64,
    pub observation_strength: f64,
}

/// New parent features for a cause, or a new cause with its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeUpdate {
    pub cause: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_cause: Option<NewCause>,
    #[serde(default)]
    pub features: Vec<FeatureDecl>,
    /// Feature → link strength into the cause.
    pub links: BTreeMap<String, f64>,
}

impl KnowledgeUpdate {
    /// Capacitive-crosstalk trojan: rerouted metal layers become a new
    /// parent of the parametric-trojan node.
    pub fn crosstalk_trojan() -> Self {
        KnowledgeUpdate {
            cause: AttackLabel::ParametricTrojan.as_str().into(),
            new_cause: None,
            features: vec![FeatureDecl {
                name: "metal_rerouting".into(),
                stage: StageId::Routing,
                units: "fF".into(),
                nominal: Nominal { mean: 1.5, sd: 0.03 },
                shift: 1.0,
                anomaly_rate: 0.05,
            }],
            links: [("metal_rerouting".to_string(), 0.8)].into(),
        }
    }

    /// Adds the declared items to the simulator and lets the cause perturb
    /// them when it maps to an attack label.
    pub fn apply_to_catalog(&self, params: &mut ProcessParams, catalog: &mut Catalog) {
        let attack: Option<AttackLabel> = self.cause.parse().ok();
        for d in &self.features {
            catalog.add_real_item(params, &d.name, d.stage, &d.units, d.nominal);
            if let Some(a) = attack {
                catalog.add_effect(a, &d.name, Effect::Shift(d.shift));
            }
        }
    }

    /// Registers the declared items and covers them with the spec-mismatch
    /// and change-point detectors.
    pub fn apply_to_registry(&self, registry: &mut DetectorRegistry) -> Result<()> {
        for d in &self.features {
            registry.add_feature(
                &d.name,
                FeatureInfo {
                    stage: d.stage,
                    kind: ValueKind::Real,
                    scope: Scope::Device,
                    nominal: Some(d.nominal),
                },
            );
            for det in ["spec_mismatch", "kde_kl_changepoint"] {
                if registry.detectors.contains_key(det) {
                    registry.cover(det, &d.name)?;
                }
            }
        }
        Ok(())
    }
}

fn invalid(msg: impl Into<String>) -> TrustError {
    TrustError::InvalidUpdate(msg.into())
}

/// Returns the model with the update applied and its templates rebuilt.
/// Re-applying an update yields an identical model.
pub fn forward_trust_extend(model: &ThreatModel, update: &KnowledgeUpdate) -> Result<ThreatModel> {
    let mut m = model.clone();
    for d in &update.features {
        if !(d.anomaly_rate > 0.0 && d.anomaly_rate < 1.0) || !(d.nominal.sd > 0.0) {
            return Err(invalid(format!("feature {} needs a rate in (0,1) and positive sd", d.name)));
        }
        let node = FeatureNode {
            stage: d.stage,
            anomaly_rate: d.anomaly_rate,
        };
        match m.features.get(&d.name) {
            Some(existing) if *existing != node => return Err(invalid(format!("conflicting declaration of {}", d.name))),
            Some(_) => {}
            None => {
                m.features.insert(d.name.clone(), node);
            }
        }
    }
    for (f, s) in &update.links {
        if !m.features.contains_key(f) {
            return Err(invalid(format!("link names unknown feature {f}")));
        }
        if !(*s > 0.0 && *s < 1.0) {
            return Err(invalid(format!("link strength {s} outside (0,1)")));
        }
    }
    let pos = m.causes.iter().position(|c| c.id == update.cause);
    let cause = match (pos, &update.new_cause) {
        (Some(i), None) => &mut m.causes[i],
        (Some(i), Some(nc)) => {
            let c = &m.causes[i];
            if c.stage != nc.stage || c.actors != nc.actors || c.explains != nc.explains || c.base_rate != nc.base_rate {
                return Err(invalid(format!("cause {} already exists with different attributes", update.cause)));
            }
            &mut m.causes[i]
        }
        (None, None) => return Err(invalid(format!("unknown cause {} and no definition given", update.cause))),
        (None, Some(nc)) => {
            if nc.explains.is_empty() {
                return Err(invalid(format!("new cause {} explains no observation", update.cause)));
            }
            m.causes.push(Cause {
                id: update.cause.clone(),
                stage: nc.stage,
                actors: nc.actors.clone(),
                explains: nc.explains.clone(),
                base_rate: nc.base_rate,
                features: BTreeMap::new(),
                observation_strength: nc.observation_strength,
            });
            m.causes.last_mut().expect("just pushed")
        }
    };
    for (f, s) in &update.links {
        cause.features.insert(f.clone(), *s);
    }
    if cause.features.is_empty() {
        return Err(invalid(format!("cause {} has no related features", update.cause)));
    }
    m.regenerate().map_err(|e| match e {
        TrustError::InvalidModel(msg) => invalid(msg),
        other => other,
    })?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::{learn_map, Dataset};

    #[test]
    fn crosstalk_update_adds_one_root_parent() {
        let mut catalog = Catalog::standard();
        let mut params = ProcessParams::default();
        let m = ThreatModel::standard(&catalog);
        let up = KnowledgeUpdate::crosstalk_trojan();
        let ext = forward_trust_extend(&m, &up).unwrap();
        up.apply_to_catalog(&mut params, &mut catalog);
        ext.validate(&catalog).unwrap();
        let before = &m.templates.bn["accelerated-failure"];
        let after = &ext.templates.bn["accelerated-failure"];
        assert_eq!(after.structure.variables.len(), before.structure.variables.len() + 1);
        let i = after.structure.variables.iter().position(|v| v.name == "metal_rerouting").unwrap();
        assert!(after.structure.parents[i].is_empty());
        let p = after.structure.variables.iter().position(|v| v.name == "parametric-trojan").unwrap();
        assert!(after.structure.parents[p].contains(&"metal_rerouting".to_string()));
        for c in ["recycled", "defective-shipped", "accelerated-failure"] {
            assert_eq!(before.priors[c], after.priors[c], "{c}");
        }
        let net = learn_map(&after.structure, &Dataset::default(), &after.priors).unwrap();
        for cpt in net.cpts() {
            for row in cpt.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(ext.templates.mln["accelerated-failure"].sorts["Feature"].contains(&"MetalRerouting".to_string()));
    }

    #[test]
    fn reapplying_is_a_byte_identical_no_op() {
        let m = ThreatModel::standard(&Catalog::standard());
        let up = KnowledgeUpdate::crosstalk_trojan();
        let once = forward_trust_extend(&m, &up).unwrap();
        let twice = forward_trust_extend(&once, &up).unwrap();
        assert_eq!(once.to_json(), twice.to_json());
    }

    #[test]
    fn cause_without_features_is_invalid() {
        let m = ThreatModel::standard(&Catalog::standard());
        let up = KnowledgeUpdate {
            cause: "cloned".into(),
            new_cause: Some(NewCause {
                stage: StageId::InField,
                actors: vec![Actor::Distributor],
                explains: vec!["accelerated-failure".into()],
                base_rate: 0.02,
                observation_strength: 0.5,
            }),
            features: vec![],
            links: BTreeMap::new(),
        };
        assert!(matches!(forward_trust_extend(&m, &up), Err(TrustError::InvalidUpdate(_))));
        let unknown = KnowledgeUpdate {
            cause: "cloned".into(),
            new_cause: None,
            features: vec![],
            links: [("lead_dimension".to_string(), 0.5)].into(),
        };
        assert!(matches!(forward_trust_extend(&m, &unknown), Err(TrustError::InvalidUpdate(_))));
    }

    #[test]
    fn registry_covers_new_feature() {
        let catalog = Catalog::standard();
        let params = ProcessParams::default();
        let mut reg = DetectorRegistry::standard(&params, &catalog);
        let up = KnowledgeUpdate::crosstalk_trojan();
        up.apply_to_registry(&mut reg).unwrap();
        assert!(reg.covers("metal_rerouting"));
        up.apply_to_registry(&mut reg).unwrap();
        assert_eq!(reg.detectors["spec_mismatch"].features.iter().filter(|f| *f == "metal_rerouting").count(), 1);
    }
}
