use std::collections::BTreeMap;

use super::{camel, rank, Engine, RankedCause, Result, RootCauseReport, StageAttribution, ThreatModel, TrustError, REPORT_SCHEMA_VERSION};
use crate::anomaly::EvidenceVector;
use crate::mln::{map_inference, marginals, KnowledgeBase, MapOptions, MlnError, EXACT_CAP};

/// Asserts the evidence as ground atoms, finds the most probable world and
/// reads the cause atoms back. Marginals fill the posterior column when the
/// grounding is small enough to enumerate.
pub fn backward_trust_mln(
    observation: &str,
    evidence: &EvidenceVector,
    kb: &KnowledgeBase,
    model: &ThreatModel,
    opts: &MapOptions,
) -> Result<RootCauseReport> {
    let device = match kb.sorts.get("Device").map(Vec::as_slice) {
        Some([d]) => d.clone(),
        _ => return Err(TrustError::InvalidModel("MLN knowledge base needs exactly one Device constant".into())),
    };
    let exact = kb.atom_count() <= EXACT_CAP;
    let mrf = if exact { kb.ground()? } else { kb.ground_with_cap(usize::MAX)? };
    let mut fixed = vec![None; mrf.n_atoms()];

    let mut anomalous: BTreeMap<&str, bool> = BTreeMap::new();
    for item in &evidence.items {
        *anomalous.entry(item.feature.as_str()).or_default() |= item.anomalous;
    }
    for (feature, value) in anomalous {
        let atom = format!("Anomalous({device},{})", camel(feature));
        let i = mrf.atom_by_name(&atom)?;
        fixed[i] = Some(value);
    }
    let obs_atom = format!("{}({device})", camel(observation));
    let i = mrf
        .atom_by_name(&obs_atom)
        .map_err(|_| TrustError::UnknownObservation(observation.into()))?;
    fixed[i] = Some(true);

    let world = map_inference(&mrf, &fixed, opts)?;
    let probs = if exact { Some(marginals(&mrf, &fixed)?) } else { None };
    let mut out = Vec::new();
    for c in &model.causes {
        let Ok(i) = mrf.atom_by_name(&format!("{}({device})", camel(&c.id))) else { continue };
        out.push(RankedCause {
            cause: c.id.clone(),
            posterior: probs.as_ref().map_or(if world.0[i] { 1.0 } else { 0.0 }, |p| p[i]),
            stage: c.stage,
            actors: c.actors.clone(),
            in_map_world: Some(world.0[i]),
        });
    }
    if out.is_empty() {
        return Err(MlnError::UnknownAtom(format!("no cause atoms for {device}")).into());
    }
    rank(&mut out);
    out.sort_by_key(|c| !c.in_map_world.unwrap_or(false));
    let top = out.iter().find(|c| c.in_map_world == Some(true));
    let note = if exact {
        "MAP world with enumerated marginals; causes are not exclusive".to_string()
    } else {
        format!("MAP-only: {} ground atoms exceed the enumeration cap of {EXACT_CAP}", mrf.n_atoms())
    };
    Ok(RootCauseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        observation: observation.into(),
        subject: evidence.subject.clone(),
        engine: Engine::Mln,
        implicated_stage: top.map(|c| StageAttribution {
            stage: c.stage,
            posterior: c.posterior,
        }),
        implicated_actor: top.and_then(|c| c.actors.first().copied()),
        ranked_causes: out,
        exclusive: false,
        evidence: evidence.clone(),
        feature_posteriors: vec![],
        confidence_note: note,
    })
}
