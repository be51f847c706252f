use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::normal;
use super::{AttackLabel, DeviceRecord, ProcessParams, Result, StageId, Value};
use crate::hmm::ObservationSeq;

/// Hardware performance counters reported in the field.
pub const HPC_COUNTERS: [(&str, f64, f64); 5] = [
    ("branch-misses", 2.0e4, 1.0e3),
    ("bus-cycles", 5.0e5, 1.0e4),
    ("cache-misses", 6.0e4, 2.0e3),
    ("cache-references", 1.2e6, 3.0e4),
    ("cpu-cycles", 3.0e7, 5.0e5),
];

/// Per-stage test outcome alphabet. Only the in-field debug-port test
/// reports `key-leak`.
pub const TEST_SYMBOLS: [&str; 5] = ["passed", "failed", "anomalous", "not-run", "key-leak"];

/// Failure before this fraction of the nominal median lifetime counts as
/// accelerated aging.
const ACCELERATED_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InFieldObservation {
    pub device_id: String,
    /// Years until failure.
    pub failure_time: f64,
    pub accelerated_failure: bool,
    pub jtag_leak: bool,
    pub bist_pass: bool,
    pub hpc: BTreeMap<String, f64>,
}

/// Rate multiplier of the exponential aging model.
pub(crate) fn aging_factor(efr: f64, nominal_efr: f64) -> f64 {
    let r = (efr.max(0.0) / nominal_efr).max(1e-6);
    r * r
}

/// Samples field behaviour for a record that has been through burn-in.
pub fn emit_infield(record: &DeviceRecord, params: &ProcessParams, rng: &mut impl Rng) -> Result<InFieldObservation> {
    let efr = record
        .require("early_failure_rate")?
        .value
        .as_real()
        .unwrap_or(0.0);
    record.require("marking_valid")?;
    let leak = record.require("debug_port_leak")?.value.as_bool().unwrap_or(false);
    let nominal_efr = params.nominal("early_failure_rate").map_or(0.01, |n| n.mean);
    let rate = std::f64::consts::LN_2 / params.lifetime_median * aging_factor(efr, nominal_efr);
    let u: f64 = rng.random();
    let failure_time = -(1.0 - u).ln() / rate;
    let bin = record.item("hardware_bin").and_then(|i| i.value.as_count()).unwrap_or(1);
    let fail_p = match (bin, record.ground_truth.attack) {
        (b, _) if b != 1 => 0.5,
        (_, AttackLabel::FunctionalTrojan) => 0.2,
        _ => 0.0,
    };
    let bist_pass = rng.random::<f64>() >= fail_p;
    let hpc = HPC_COUNTERS
        .iter()
        .map(|&(name, mean, sd)| {
            let mut v = normal(rng, mean, sd);
            if leak && name == "bus-cycles" {
                v *= 1.05;
            }
            (name.to_string(), v)
        })
        .collect();
    Ok(InFieldObservation {
        device_id: record.device_id.clone(),
        failure_time,
        accelerated_failure: failure_time < ACCELERATED_FRACTION * params.lifetime_median,
        jtag_leak: leak,
        bist_pass,
        hpc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTestPlan {
    pub stages: Vec<StageId>,
    /// Chance a test at or after the origin stage flags the compromise.
    pub detect_prob: f64,
    pub false_alarm: f64,
    pub not_run_prob: f64,
}

impl Default for StageTestPlan {
    fn default() -> Self {
        StageTestPlan {
            stages: vec![
                StageId::Spec,
                StageId::LogicDesign,
                StageId::FunctionalVerification,
                StageId::Synthesis,
                StageId::FormalCheck,
                StageId::Signoff,
                StageId::PackageTest,
                StageId::InField,
            ],
            detect_prob: 0.05,
            false_alarm: 0.01,
            not_run_prob: 0.0,
        }
    }
}

/// Stage-labelled test outcomes for one design. The in-field step reports
/// the debug-port observation.
pub fn stage_test_sequence(record: &DeviceRecord, plan: &StageTestPlan, rng: &mut impl Rng) -> ObservationSeq {
    let origin = record.ground_truth.origin;
    let leak = matches!(record.item("debug_port_leak").map(|i| &i.value), Some(Value::Bool(true)));
    let mut symbols = Vec::with_capacity(plan.stages.len());
    for &stage in &plan.stages {
        let present = record.ground_truth.attack != AttackLabel::None && origin.is_some_and(|o| o <= stage);
        let sym = if stage == StageId::InField {
            if leak {
                4
            } else {
                0
            }
        } else if rng.random::<f64>() < plan.not_run_prob {
            3
        } else {
            let u: f64 = rng.random();
            if present && u < plan.detect_prob {
                2
            } else if u > 1.0 - plan.false_alarm {
                1
            } else {
                0
            }
        };
        symbols.push(sym);
    }
    ObservationSeq {
        symbols,
        stage_labels: Some(plan.stages.iter().map(|s| s.to_string()).collect()),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{generate_fleet, inject_attack, Catalog, FleetConfig, Injection};
    use super::*;

    fn median(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    }

    #[test]
    fn recycled_parts_age_faster() {
        let cfg = FleetConfig::new(100, 5);
        let f = generate_fleet(&cfg).unwrap();
        let ids: Vec<String> = f.devices.iter().map(|d| d.device_id.clone()).collect();
        let g = inject_attack(&f, &Injection::new(AttackLabel::Recycled, ids, 3.0), &cfg.params, &Catalog::standard()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean: Vec<f64> = f.devices.iter().map(|d| emit_infield(d, &cfg.params, &mut rng).unwrap().failure_time).collect();
        let aged: Vec<f64> = g.devices.iter().map(|d| emit_infield(d, &cfg.params, &mut rng).unwrap().failure_time).collect();
        assert!(median(aged) < 0.5 * cfg.params.lifetime_median);
        assert!(median(clean) > 0.5 * cfg.params.lifetime_median);
        for d in &f.devices {
            assert!(!emit_infield(d, &cfg.params, &mut rng).unwrap().jtag_leak);
        }
    }

    #[test]
    fn leak_flag_and_incomplete_records() {
        let cfg = FleetConfig::new(3, 5);
        let f = generate_fleet(&cfg).unwrap();
        let g = inject_attack(&f, &Injection::new(AttackLabel::InfoLeakTrojan, vec!["D00000".into()], 1.0), &cfg.params, &cfg.catalog)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = emit_infield(&g.devices[0], &cfg.params, &mut rng).unwrap();
        assert!(obs.jtag_leak);
        assert_eq!(obs.hpc.len(), 5);
        let mut partial = f.devices[1].clone();
        partial.items.retain(|i| i.name != "early_failure_rate");
        assert!(emit_infield(&partial, &cfg.params, &mut rng).is_err());

        let seq = stage_test_sequence(&g.devices[0], &StageTestPlan::default(), &mut rng);
        let leak = TEST_SYMBOLS.iter().position(|s| *s == "key-leak").unwrap();
        assert_eq!(*seq.symbols.last().unwrap(), leak);
        assert_eq!(seq.stage_labels.as_ref().unwrap()[1], "logic-design");
        let clean = stage_test_sequence(&f.devices[2], &StageTestPlan::default(), &mut rng);
        assert!(!clean.symbols.contains(&2) && !clean.symbols.contains(&leak));
    }
}
