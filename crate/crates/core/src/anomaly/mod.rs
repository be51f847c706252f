//! Detectors that turn lifecycle data into evidence items for the trust
//! engine.

mod kde;
mod meanshift;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{AttackLabel, Catalog, DeviceRecord, Fleet, Nominal, ProcessParams, Scope, StageId, TestRecordSet, Value, ValueKind};

pub use kde::{kde_kl_changepoint, kde_kl_score, kde_kl_scores};
pub use meanshift::{meanshift_outlier, Cluster, MeanShiftResult};

/// Change-point threshold for standardized series of length 100 with the
/// default window and bandwidth; 97th percentile of clean maxima.
pub const KDE_DEFAULT_THRESHOLD: f64 = 0.27;
pub const KDE_DEFAULT_WINDOW: usize = 30;
pub const KDE_DEFAULT_BANDWIDTH: f64 = 1.2;
/// Real-valued spec tolerance in nominal standard deviations.
pub const SPEC_TOLERANCE_SIGMAS: f64 = 2.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnomalyError {
    #[error("series of length {len} is shorter than two windows of {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("mean shift needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("no registered detector covers feature `{0}`")]
    UncoveredFeature(String),
}

pub type Result<T> = std::result::Result<T, AnomalyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub feature: String,
    pub stage: StageId,
    pub anomalous: bool,
    pub score: f64,
    pub detector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector {
    pub subject: String,
    pub items: Vec<EvidenceItem>,
}

impl EvidenceVector {
    /// True when any detector flagged the feature.
    pub fn is_anomalous(&self, feature: &str) -> bool {
        self.items.iter().any(|i| i.feature == feature && i.anomalous)
    }

    pub fn anomalous_features(&self) -> BTreeSet<&str> {
        self.items.iter().filter(|i| i.anomalous).map(|i| i.feature.as_str()).collect()
    }

    fn sort(&mut self) {
        self.items.sort_by(|a, b| {
            (a.feature.as_str(), a.stage, a.detector.as_str()).cmp(&(b.feature.as_str(), b.stage, b.detector.as_str()))
        });
    }
}

/// Expected value a measurement is checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureSpec {
    Real { nominal: f64, tolerance: f64 },
    Bool { expected: bool },
    Count { expected: u64 },
}

/// Compares one measurement with its specification. Reals score
/// |measured − nominal| / tolerance; booleans and counts score the mismatch.
pub fn spec_mismatch(feature: &str, stage: StageId, measured: &Value, spec: &FeatureSpec, detector: &str) -> EvidenceItem {
    let (score, anomalous) = match (measured, spec) {
        (Value::Real(x), FeatureSpec::Real { nominal, tolerance }) => {
            let dev = (x - nominal).abs();
            let score = if *tolerance > 0.0 {
                dev / tolerance
            } else if dev > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            (score, dev > *tolerance)
        }
        (Value::Bool(b), FeatureSpec::Bool { expected }) => {
            let bad = b != expected;
            (if bad { 1.0 } else { 0.0 }, bad)
        }
        (Value::Count(c), FeatureSpec::Count { expected }) => {
            let d = c.abs_diff(*expected) as f64;
            (d, d > 0.0)
        }
        _ => (0.0, false),
    };
    EvidenceItem {
        feature: feature.into(),
        stage,
        anomalous,
        score,
        detector: detector.into(),
    }
}

fn lot_item(feature: &str, score: f64, detector: &str) -> EvidenceItem {
    EvidenceItem {
        feature: feature.into(),
        stage: StageId::WaferSort,
        anomalous: score > 0.0,
        score,
        detector: detector.into(),
    }
}

pub const COUNT_FEATURES: [&str; 3] = ["bin_counts", "good_parts_count", "shipped_parts_count"];

fn count_discrepancies(records: &TestRecordSet) -> BTreeMap<&'static str, f64> {
    let mut out: BTreeMap<&'static str, f64> = COUNT_FEATURES.iter().map(|f| (*f, 0.0)).collect();
    for lot in &records.master_results {
        if lot.shipped > lot.good {
            *out.get_mut("shipped_parts_count").unwrap() += (lot.shipped - lot.good) as f64;
        }
        let bins = records.hardware_bins.get(&lot.lot_id);
        let binned: u64 = bins.map_or(0, |b| b.values().sum());
        let passing = bins.and_then(|b| b.get(&1).copied()).unwrap_or(0);
        *out.get_mut("bin_counts").unwrap() +=
            (binned.abs_diff(lot.tested) + lot.shipped.saturating_sub(passing.max(lot.good))) as f64;
        let wafer_good: u64 = records.wafer_results.iter().filter(|w| w.lot_id == lot.lot_id).map(|w| w.good).sum();
        *out.get_mut("good_parts_count").unwrap() += wafer_good.abs_diff(lot.good) as f64;
    }
    out
}

fn audit_edits(records: &TestRecordSet) -> BTreeMap<&'static str, f64> {
    let mut out: BTreeMap<&'static str, f64> = COUNT_FEATURES.iter().map(|f| (*f, 0.0)).collect();
    for e in &records.audit_trail {
        if let Some(v) = out.get_mut(e.field.as_str()) {
            *v += 1.0;
        }
    }
    out
}

/// Anomalous count and audit evidence: shipped above good, bins that do not
/// account for the tested or shipped parts, wafer totals that disagree with
/// the master record, and audit edits to count fields.
pub fn reconcile_counts(records: &TestRecordSet) -> Vec<EvidenceItem> {
    let mut out: Vec<EvidenceItem> = count_discrepancies(records)
        .into_iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(f, s)| lot_item(f, s, "count_reconcile"))
        .collect();
    out.extend(
        audit_edits(records)
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(f, s)| lot_item(f, s, "audit_trail")),
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorKind {
    /// Real values against nominal ± k·sd.
    SpecMismatch { tolerance_sigmas: f64 },
    BoolRule { expected: bool },
    /// Shipped parts must carry the passing bin.
    BinCheck,
    MeanShift { bandwidth: f64 },
    CountReconcile,
    AuditTrail,
    /// Fleet series, standardized by the nominal distribution.
    KdeKl { window: usize, bandwidth: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(flatten)]
    pub kind: DetectorKind,
    pub features: Vec<String>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub stage: StageId,
    pub kind: ValueKind,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<Nominal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRegistry {
    pub features: BTreeMap<String, FeatureInfo>,
    pub detectors: BTreeMap<String, DetectorConfig>,
}

/// What evidence is extracted from.
#[derive(Debug, Clone, Copy)]
pub enum Subject<'a> {
    Device {
        record: &'a DeviceRecord,
        records: &'a TestRecordSet,
    },
    Fleet {
        id: &'a str,
        fleet: &'a Fleet,
    },
}

impl DetectorRegistry {
    /// Default detectors covering every catalog feature.
    pub fn standard(params: &ProcessParams, catalog: &Catalog) -> Self {
        let features: BTreeMap<String, FeatureInfo> = catalog
            .items
            .iter()
            .map(|(n, s)| {
                (
                    n.clone(),
                    FeatureInfo {
                        stage: s.stage,
                        kind: s.kind,
                        scope: s.scope,
                        nominal: if s.kind == ValueKind::Real { params.nominal(n) } else { None },
                    },
                )
            })
            .collect();
        let reals: Vec<String> = features
            .iter()
            .filter(|(_, f)| f.kind == ValueKind::Real && f.scope == Scope::Device)
            .map(|(n, _)| n.clone())
            .collect();
        let counts: Vec<String> = COUNT_FEATURES.iter().map(|s| s.to_string()).collect();
        let mut detectors = BTreeMap::new();
        let mut add = |name: &str, kind, features: Vec<String>, threshold| {
            detectors.insert(
                name.to_string(),
                DetectorConfig {
                    kind,
                    features,
                    threshold,
                },
            );
        };
        add(
            "spec_mismatch",
            DetectorKind::SpecMismatch {
                tolerance_sigmas: SPEC_TOLERANCE_SIGMAS,
            },
            reals.clone(),
            1.0,
        );
        add("marking_check", DetectorKind::BoolRule { expected: true }, vec!["marking_valid".into()], 1.0);
        add("leak_monitor", DetectorKind::BoolRule { expected: false }, vec!["debug_port_leak".into()], 1.0);
        add("bin_check", DetectorKind::BinCheck, vec!["hardware_bin".into()], 1.0);
        add(
            "branching_meanshift",
            DetectorKind::MeanShift { bandwidth: 0.15 },
            vec!["branching_points".into()],
            1.0,
        );
        add("count_reconcile", DetectorKind::CountReconcile, counts.clone(), 1.0);
        add("audit_trail", DetectorKind::AuditTrail, counts, 1.0);
        add(
            "kde_kl_changepoint",
            DetectorKind::KdeKl {
                window: KDE_DEFAULT_WINDOW,
                bandwidth: KDE_DEFAULT_BANDWIDTH,
            },
            reals,
            KDE_DEFAULT_THRESHOLD,
        );
        DetectorRegistry { features, detectors }
    }

    /// Adds or replaces a detector; every feature it names must be known.
    pub fn register_detector(&mut self, name: &str, config: DetectorConfig) -> Result<()> {
        if let Some(f) = config.features.iter().find(|f| !self.features.contains_key(*f)) {
            return Err(AnomalyError::UnknownFeature(f.clone()));
        }
        self.detectors.insert(name.into(), config);
        Ok(())
    }

    pub fn add_feature(&mut self, name: &str, info: FeatureInfo) {
        self.features.insert(name.into(), info);
    }

    /// Appends `feature` to an existing detector's list; no-op if present.
    pub fn cover(&mut self, detector: &str, feature: &str) -> Result<()> {
        if !self.features.contains_key(feature) {
            return Err(AnomalyError::UnknownFeature(feature.into()));
        }
        let d = self
            .detectors
            .get_mut(detector)
            .ok_or_else(|| AnomalyError::BadParameter(format!("unknown detector {detector}")))?;
        if !d.features.iter().any(|f| f == feature) {
            d.features.push(feature.into());
        }
        Ok(())
    }

    pub fn covers(&self, feature: &str) -> bool {
        self.detectors.values().any(|d| d.features.iter().any(|f| f == feature))
    }

    fn real_spec(&self, feature: &str, sigmas: f64) -> Option<FeatureSpec> {
        let n = self.features.get(feature)?.nominal?;
        Some(FeatureSpec::Real {
            nominal: n.mean,
            tolerance: sigmas * n.sd,
        })
    }

    fn stage_of(&self, feature: &str) -> StageId {
        self.features.get(feature).map_or(StageId::WaferSort, |f| f.stage)
    }
}

/// Catalog features related to any of the causes.
pub fn features_for_causes(catalog: &Catalog, causes: &[AttackLabel]) -> BTreeSet<String> {
    causes
        .iter()
        .flat_map(|c| catalog.related_items(*c))
        .map(String::from)
        .collect()
}

fn run_device(
    name: &str,
    cfg: &DetectorConfig,
    feature: &str,
    reg: &DetectorRegistry,
    record: &DeviceRecord,
    records: &TestRecordSet,
) -> Option<EvidenceItem> {
    let stage = reg.stage_of(feature);
    let silent = || EvidenceItem {
        feature: feature.into(),
        stage,
        anomalous: false,
        score: 0.0,
        detector: name.into(),
    };
    match &cfg.kind {
        DetectorKind::SpecMismatch { tolerance_sigmas } => {
            let spec = reg.real_spec(feature, *tolerance_sigmas)?;
            Some(match record.item(feature) {
                Some(item) => {
                    let mut e = spec_mismatch(feature, stage, &item.value, &spec, name);
                    e.anomalous = e.anomalous && e.score >= cfg.threshold;
                    e
                }
                None => silent(),
            })
        }
        DetectorKind::BoolRule { expected } => Some(match record.item(feature) {
            Some(item) => {
                let mut e = spec_mismatch(feature, stage, &item.value, &FeatureSpec::Bool { expected: *expected }, name);
                e.anomalous = e.anomalous && e.score >= cfg.threshold;
                e
            }
            None => silent(),
        }),
        DetectorKind::BinCheck => {
            let bin = record.item(feature).and_then(|i| i.value.as_count()).unwrap_or(1);
            let score = if record.shipped && bin != 1 { 1.0 } else { 0.0 };
            Some(EvidenceItem {
                anomalous: score >= cfg.threshold && score > 0.0,
                score,
                ..silent()
            })
        }
        DetectorKind::MeanShift { bandwidth } => {
            let pts = record.item(feature).and_then(|i| i.value.as_points()).unwrap_or(&[]);
            if pts.len() < 2 {
                return Some(silent());
            }
            let r = meanshift_outlier(pts, *bandwidth).ok()?;
            Some(EvidenceItem {
                anomalous: r.minority_flag && r.score >= cfg.threshold,
                score: r.score,
                ..silent()
            })
        }
        DetectorKind::CountReconcile | DetectorKind::AuditTrail => {
            let lot = records.for_lot(&record.lot_id);
            Some(lot_detector(name, cfg, feature, &lot))
        }
        DetectorKind::KdeKl { .. } => None,
    }
}

fn lot_detector(name: &str, cfg: &DetectorConfig, feature: &str, records: &TestRecordSet) -> EvidenceItem {
    let table = match cfg.kind {
        DetectorKind::AuditTrail => audit_edits(records),
        _ => count_discrepancies(records),
    };
    let score = table.get(feature).copied().unwrap_or(0.0);
    EvidenceItem {
        anomalous: score > 0.0 && score >= cfg.threshold,
        ..lot_item(feature, score, name)
    }
}

fn run_fleet(name: &str, cfg: &DetectorConfig, feature: &str, reg: &DetectorRegistry, fleet: &Fleet) -> Option<EvidenceItem> {
    match &cfg.kind {
        DetectorKind::KdeKl { window, bandwidth } => {
            let nominal = reg.features.get(feature)?.nominal?;
            let sd = if nominal.sd > 0.0 { nominal.sd } else { 1.0 };
            let series: Vec<f64> = fleet.shipped().filter_map(|d| d.real(feature)).map(|x| (x - nominal.mean) / sd).collect();
            let scores = kde_kl_scores(&series, *window, *bandwidth).ok()?;
            let score = scores.iter().map(|s| s.1).fold(0.0, f64::max);
            Some(EvidenceItem {
                feature: feature.into(),
                stage: reg.stage_of(feature),
                anomalous: score > cfg.threshold,
                score,
                detector: name.into(),
            })
        }
        DetectorKind::CountReconcile | DetectorKind::AuditTrail => Some(lot_detector(name, cfg, feature, &fleet.records)),
        _ => None,
    }
}

/// Runs the detectors whose features are in `relevant`, one item per
/// (feature, stage, detector), sorted in that order.
pub fn extract_evidence(subject: Subject, registry: &DetectorRegistry, relevant: &BTreeSet<String>) -> Result<EvidenceVector> {
    for f in relevant {
        if !registry.covers(f) {
            return Err(AnomalyError::UncoveredFeature(f.clone()));
        }
    }
    let id = match subject {
        Subject::Device { record, .. } => record.device_id.clone(),
        Subject::Fleet { id, .. } => id.to_string(),
    };
    let mut out = EvidenceVector {
        subject: id,
        items: Vec::new(),
    };
    for (name, cfg) in &registry.detectors {
        for feature in cfg.features.iter().filter(|f| relevant.contains(*f)) {
            let item = match subject {
                Subject::Device { record, records } => run_device(name, cfg, feature, registry, record, records),
                Subject::Fleet { fleet, .. } => run_fleet(name, cfg, feature, registry, fleet),
            };
            out.items.extend(item);
        }
    }
    out.sort();
    Ok(out)
}
