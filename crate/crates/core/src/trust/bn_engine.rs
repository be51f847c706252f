use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{candidate_causes, rank, ranked, CausalTemplate, Engine, FeaturePosterior, Result, RootCauseReport, StageAttribution, ThreatModel, TrustError, REPORT_SCHEMA_VERSION};
use crate::anomaly::{extract_evidence, DetectorRegistry, EvidenceVector, Subject};
use crate::bn::{learn_map, learn_mle, BayesNet, Dataset, Evidence};
use crate::sim::{emit_infield, DeviceRecord, Fleet, InFieldObservation, ProcessParams, TestRecordSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Learner {
    Mle { smoothing: f64 },
    /// Posterior mean under the template's noisy-OR priors.
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnSettings {
    pub learner: Learner,
    /// Weight of the device under test in the online CPT update.
    pub rate: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        BnSettings {
            learner: Learner::Map,
            rate: 0.1,
        }
    }
}

/// Labelled fleets with the field behaviour of their shipped devices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoricalDb {
    pub fleets: Vec<Fleet>,
    pub infield: BTreeMap<String, InFieldObservation>,
}

impl HistoricalDb {
    /// Samples field observations for every shipped device.
    pub fn observe(fleets: Vec<Fleet>, params: &ProcessParams, seed: u64) -> Result<Self> {
        let mut infield = BTreeMap::new();
        let mut index = 0u64;
        for f in &fleets {
            for d in f.shipped() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index);
                index += 1;
                infield.insert(d.device_id.clone(), emit_infield(d, params, &mut rng)?);
            }
        }
        Ok(HistoricalDb { fleets, infield })
    }
}

#[derive(Debug, Clone)]
pub struct BnRun {
    pub report: RootCauseReport,
    /// Network after learning and the online update.
    pub network: BayesNet,
    /// Evidence used for every cause query.
    pub evidence: Evidence,
}

fn observed(kind: &str, obs: &InFieldObservation, record: &DeviceRecord, causes: &[String]) -> bool {
    match kind {
        "accelerated-failure" => obs.accelerated_failure,
        "key-leak" => obs.jtag_leak,
        "functional-failure" => !obs.bist_pass,
        _ => causes.iter().any(|c| c == record.ground_truth.attack.as_str()),
    }
}

fn feature_states(t: &CausalTemplate, ev: &EvidenceVector) -> Vec<usize> {
    t.features.iter().map(|f| usize::from(ev.is_anomalous(f))).collect()
}

/// Row in template variable order: features, causes, observation.
fn row(t: &CausalTemplate, ev: &EvidenceVector, label: Option<&str>, obs: Option<bool>) -> Vec<Option<usize>> {
    let mut r: Vec<Option<usize>> = feature_states(t, ev).into_iter().map(Some).collect();
    r.extend(t.causes.iter().map(|c| label.map(|l| usize::from(l == c))));
    r.push(obs.map(usize::from));
    r
}

fn history_rows(
    t: &CausalTemplate,
    history: &HistoricalDb,
    registry: &DetectorRegistry,
    relevant: &BTreeSet<String>,
) -> Result<Dataset> {
    let mut rows = Vec::new();
    for f in &history.fleets {
        for d in f.shipped() {
            let Some(obs) = history.infield.get(&d.device_id) else { continue };
            let ev = extract_evidence(
                Subject::Device {
                    record: d,
                    records: &f.records,
                },
                registry,
                relevant,
            )?;
            let o = observed(&t.observation, obs, d, &t.causes);
            rows.push(row(t, &ev, Some(d.ground_truth.attack.as_str()), Some(o)));
        }
    }
    Ok(Dataset::from_indices(rows))
}

/// Ranks the candidate causes of `observation` for one device by learning
/// the three-tier network from history, folding in the device, and
/// querying each cause given the observation and the device evidence.
pub fn backward_trust_bn(
    observation: &str,
    device: &DeviceRecord,
    records: &TestRecordSet,
    history: &HistoricalDb,
    model: &ThreatModel,
    registry: &DetectorRegistry,
    settings: &BnSettings,
) -> Result<BnRun> {
    let causes = candidate_causes(observation, model)?;
    let t = model
        .templates
        .bn
        .get(observation)
        .ok_or_else(|| TrustError::UnknownObservation(observation.into()))?;
    let relevant: BTreeSet<String> = t.features.iter().cloned().collect();
    let ev = extract_evidence(Subject::Device { record: device, records }, registry, &relevant)?;

    let data = history_rows(t, history, registry, &relevant)?;
    let missing: Vec<&str> = t
        .causes
        .iter()
        .enumerate()
        .filter(|(i, _)| !data.rows().iter().any(|r| r[t.features.len() + i] == Some(1)))
        .map(|(_, c)| c.as_str())
        .collect();
    let mut note = String::from("per-cause marginals; causes may co-occur, so posteriors need not sum to 1");
    let net = match settings.learner {
        Learner::Mle { smoothing } if missing.is_empty() => learn_mle(&t.structure, &data, smoothing)?,
        Learner::Mle { .. } => {
            if model.prior_strength <= 0.0 {
                return Err(TrustError::InsufficientHistory(format!("no labelled examples of {}", missing.join(", "))));
            }
            note.push_str(&format!(
                "; no labelled examples of {}, fell back to MAP learning with template priors",
                missing.join(", ")
            ));
            learn_map(&t.structure, &data, &t.priors)?
        }
        Learner::Map => {
            if model.prior_strength <= 0.0 {
                return Err(TrustError::InsufficientHistory("MAP learning needs positive prior strength".into()));
            }
            learn_map(&t.structure, &data, &t.priors)?
        }
    };
    let dut = Dataset::from_indices(vec![row(t, &ev, None, Some(true))]);
    let net = net.update_cpt(&dut, settings.rate)?;

    let mut evidence = Evidence::new().with(observation, "true");
    for (f, s) in t.features.iter().zip(feature_states(t, &ev)) {
        evidence.insert(f.clone(), super::FEATURE_STATES[s]);
    }
    let mut out = Vec::with_capacity(causes.len());
    for c in &causes {
        let p = net.infer_posterior(&c.id, &evidence)?.probability("present").unwrap_or(0.0);
        out.push(ranked(c, p));
    }
    rank(&mut out);
    let total: f64 = out.iter().map(|c| c.posterior).sum();
    let implicated_stage = out.first().map(|top| StageAttribution {
        stage: top.stage,
        posterior: if total > 0.0 {
            out.iter().filter(|c| c.stage == top.stage).map(|c| c.posterior).sum::<f64>() / total
        } else {
            0.0
        },
    });
    let prior_evidence = Evidence::new().with(observation, "true");
    let mut feature_posteriors = Vec::with_capacity(t.features.len());
    for f in &t.features {
        let Some(node) = model.features.get(f) else { continue };
        let p = net.infer_posterior(f, &prior_evidence)?.probability(super::FEATURE_STATES[1]).unwrap_or(0.0);
        feature_posteriors.push(FeaturePosterior {
            feature: f.clone(),
            stage: node.stage,
            posterior: p,
        });
    }
    let report = RootCauseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        observation: observation.into(),
        subject: device.device_id.clone(),
        engine: Engine::Bn,
        implicated_actor: out.first().and_then(|c| c.actors.first().copied()),
        ranked_causes: out,
        exclusive: false,
        implicated_stage,
        evidence: ev,
        feature_posteriors,
        confidence_note: note,
    };
    Ok(BnRun {
        report,
        network: net,
        evidence,
    })
}
