//! Synthetic lifecycle data for device fleets, with seeded ground-truth
//! attack injection.

mod catalog;
mod generate;
mod infield;
mod inject;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{Catalog, Effect, ItemSpec, Scope, ValueKind};
pub use generate::{generate_fleet, shot_time, shot_time_sd, FleetConfig};
pub use infield::{emit_infield, stage_test_sequence, InFieldObservation, StageTestPlan, HPC_COUNTERS, TEST_SYMBOLS};
pub use inject::{inject_attack, Injection};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("unknown attack `{0}`")]
    UnknownAttack(String),
    #[error("no targets: {0}")]
    NoTargets(String),
    #[error("magnitude must be positive, got {0}")]
    BadMagnitude(f64),
    #[error("record {device} is missing item `{item}`")]
    IncompleteRecord { device: String, item: String },
    #[error("unknown data item `{0}`")]
    UnknownItem(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

macro_rules! labelled_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? } $err:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $label)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = SimError;
            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| SimError::$err(s.to_string()))
            }
        }
    };
}

labelled_enum! {
    /// Lifecycle stages in production order.
    StageId {
        Spec => "spec",
        LogicDesign => "logic-design",
        FunctionalVerification => "functional-verification",
        Synthesis => "synthesis",
        DftInsertion => "dft-insertion",
        FormalCheck => "formal-check",
        Floorplan => "floorplan",
        Cts => "cts",
        Routing => "routing",
        Signoff => "signoff",
        Tapeout => "tapeout",
        MaskWriting => "mask-writing",
        Oxidation => "oxidation",
        IonImplantation => "ion-implantation",
        GateDefinition => "gate-definition",
        Etching => "etching",
        Deposition => "deposition",
        WaferSort => "wafer-sort",
        Dicing => "dicing",
        Bumping => "bumping",
        Underfill => "underfill",
        WireBonding => "wire-bonding",
        PackageTest => "package-test",
        BurnIn => "burn-in",
        InField => "in-field",
    } UnknownStage
}

labelled_enum! {
    AttackLabel {
        None => "none",
        ParametricTrojan => "parametric-trojan",
        FunctionalTrojan => "functional-trojan",
        InfoLeakTrojan => "info-leak-trojan",
        UnintentionalLeak => "unintentional-leak",
        Recycled => "recycled",
        Remarked => "remarked",
        DefectiveShipped => "defective-shipped",
        Overproduced => "overproduced",
    } UnknownAttack
}

labelled_enum! {
    Actor {
        Foundry => "foundry",
        RogueEmployee => "rogue-employee",
        ThirdPartyIpVendor => "3pip-vendor",
        Designer => "designer",
        Distributor => "distributor",
    } UnknownAttack
}

impl AttackLabel {
    /// Default origin stage and actor for an injected attack.
    pub fn default_origin(&self) -> Option<(StageId, Actor)> {
        use AttackLabel::*;
        match self {
            None => Option::None,
            ParametricTrojan => Some((StageId::IonImplantation, Actor::RogueEmployee)),
            FunctionalTrojan => Some((StageId::MaskWriting, Actor::Foundry)),
            InfoLeakTrojan => Some((StageId::LogicDesign, Actor::ThirdPartyIpVendor)),
            UnintentionalLeak => Some((StageId::LogicDesign, Actor::Designer)),
            Recycled => Some((StageId::InField, Actor::Distributor)),
            Remarked => Some((StageId::BurnIn, Actor::Distributor)),
            DefectiveShipped => Some((StageId::WaferSort, Actor::RogueEmployee)),
            Overproduced => Some((StageId::WaferSort, Actor::Foundry)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Value {
    Real(f64),
    Bool(bool),
    Count(u64),
    Points(Vec<[f64; 2]>),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_count(&self) -> Option<u64> {
        match self {
            Value::Count(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_points(&self) -> Option<&[[f64; 2]]> {
        match self {
            Value::Points(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub name: String,
    pub stage: StageId,
    pub value: Value,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attack: AttackLabel,
    pub origin: Option<StageId>,
    pub actor: Option<Actor>,
}

impl GroundTruth {
    pub fn clean() -> Self {
        GroundTruth {
            attack: AttackLabel::None,
            origin: None,
            actor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub wafer_id: String,
    pub lot_id: String,
    /// Whether the die left the test floor.
    pub shipped: bool,
    pub items: Vec<DataItem>,
    pub ground_truth: GroundTruth,
}

impl DeviceRecord {
    pub fn item(&self, name: &str) -> Option<&DataItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub(crate) fn item_mut(&mut self, name: &str) -> Option<&mut DataItem> {
        self.items.iter_mut().find(|i| i.name == name)
    }

    pub fn real(&self, name: &str) -> Option<f64> {
        self.item(name).and_then(|i| i.value.as_real())
    }

    pub(crate) fn require(&self, name: &str) -> Result<&DataItem> {
        self.item(name).ok_or_else(|| SimError::IncompleteRecord {
            device: self.device_id.clone(),
            item: name.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nominal {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub center: [f64; 2],
    pub spread: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    /// Shot time at zero pattern density.
    pub t0: f64,
    /// Nominal pattern area density.
    pub alpha: f64,
    /// Proximity (backscatter) coefficient.
    pub eta: f64,
    pub nominals: BTreeMap<String, Nominal>,
    pub branching: ClusterParams,
    pub trojan_branching: ClusterParams,
    /// Median device lifetime in years at nominal early-failure rate.
    pub lifetime_median: f64,
    /// Fraction of tested dies that pass wafer sort.
    pub yield_fraction: f64,
}

impl Default for ProcessParams {
    fn default() -> Self {
        let nominals = [
            ("opc_filesize", 120.0, 2.0),
            ("opc_runtime", 8.0, 0.2),
            ("pattern_density", 0.5, 0.01),
            ("oxide_thickness", 2.0, 0.05),
            ("doping_density", 1.0e17, 2.0e15),
            ("gate_dimension", 45.0, 0.9),
            ("etch_depth", 300.0, 5.0),
            ("etch_rate", 50.0, 1.0),
            ("lead_dimension", 0.30, 0.005),
            ("ball_composition_score", 1.0, 0.01),
            ("early_failure_rate", 0.01, 0.002),
        ]
        .into_iter()
        .map(|(n, mean, sd)| (n.to_string(), Nominal { mean, sd }))
        .collect();
        ProcessParams {
            t0: 1.0,
            alpha: 0.5,
            eta: 0.5,
            nominals,
            branching: ClusterParams {
                center: [0.5, 0.5],
                spread: 0.05,
                points: 40,
            },
            trojan_branching: ClusterParams {
                center: [0.95, 0.05],
                spread: 0.01,
                points: 5,
            },
            lifetime_median: 10.0,
            yield_fraction: 0.9,
        }
    }
}

impl ProcessParams {
    pub fn nominal(&self, item: &str) -> Option<Nominal> {
        if item == "shot_time" {
            return Some(Nominal {
                mean: shot_time(self.t0, self.alpha, self.eta),
                sd: shot_time_sd(self),
            });
        }
        self.nominals.get(item).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::BadConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0,1]", self.alpha));
        }
        if !(self.eta >= 0.0) || !(self.t0 > 0.0) {
            return bad("t0 must be positive and eta non-negative".into());
        }
        for (k, n) in &self.nominals {
            if !(n.sd >= 0.0) || !n.mean.is_finite() {
                return bad(format!("nominal for {k} has negative sd or non-finite mean"));
            }
        }
        if !(self.branching.spread >= 0.0) || !(self.trojan_branching.spread >= 0.0) {
            return bad("cluster spread must be non-negative".into());
        }
        if !(self.lifetime_median > 0.0) {
            return bad("lifetime_median must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.yield_fraction) {
            return bad("yield_fraction outside [0,1]".into());
        }
        Ok(())
    }
}

/// Master result record for one lot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LotResult {
    pub lot_id: String,
    pub tested: u64,
    pub good: u64,
    pub shipped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaferResult {
    pub wafer_id: String,
    pub lot_id: String,
    pub tested: u64,
    pub good: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// Logical clock, strictly increasing along the trail.
    pub timestamp: u64,
    pub record: String,
    pub field: String,
    pub old: u64,
    pub new: u64,
}

/// JSON analogue of the STDF master, wafer, hardware-bin and audit records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRecordSet {
    pub format_version: u32,
    pub master_results: Vec<LotResult>,
    pub wafer_results: Vec<WaferResult>,
    /// lot id -> bin number -> part count; bin 1 is the passing bin.
    pub hardware_bins: BTreeMap<String, BTreeMap<u32, u64>>,
    pub audit_trail: Vec<AuditEntry>,
}

impl TestRecordSet {
    pub fn lot(&self, lot_id: &str) -> Option<&LotResult> {
        self.master_results.iter().find(|l| l.lot_id == lot_id)
    }

    pub(crate) fn lot_mut(&mut self, lot_id: &str) -> Option<&mut LotResult> {
        self.master_results.iter_mut().find(|l| l.lot_id == lot_id)
    }

    pub(crate) fn append_audit(&mut self, record: String, field: &str, old: u64, new: u64) {
        let timestamp = self.audit_trail.last().map_or(1, |e| e.timestamp + 1);
        self.audit_trail.push(AuditEntry {
            timestamp,
            record,
            field: field.into(),
            old,
            new,
        });
    }

    /// Restricts the record set to the given lots.
    pub fn for_lot(&self, lot_id: &str) -> TestRecordSet {
        TestRecordSet {
            format_version: self.format_version,
            master_results: self.master_results.iter().filter(|l| l.lot_id == lot_id).cloned().collect(),
            wafer_results: self.wafer_results.iter().filter(|w| w.lot_id == lot_id).cloned().collect(),
            hardware_bins: self
                .hardware_bins
                .iter()
                .filter(|(k, _)| k.as_str() == lot_id)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            audit_trail: self
                .audit_trail
                .iter()
                .filter(|e| e.record.ends_with(&format!(":{lot_id}")))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub devices: Vec<DeviceRecord>,
    pub records: TestRecordSet,
}

impl Fleet {
    pub fn device(&self, id: &str) -> Option<&DeviceRecord> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    pub fn shipped(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.iter().filter(|d| d.shipped)
    }

    /// One JSON object per line, devices in fleet order.
    pub fn devices_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.devices {
            out.push_str(&serde_json::to_string(d).expect("device records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(devices: &str, records: TestRecordSet) -> std::result::Result<Self, serde_json::Error> {
        let devices = devices
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<DeviceRecord>, _>>()?;
        Ok(Fleet { devices, records })
    }

    pub fn append(&mut self, other: Fleet) {
        self.devices.extend(other.devices);
        let r = other.records;
        self.records.master_results.extend(r.master_results);
        self.records.wafer_results.extend(r.wafer_results);
        self.records.hardware_bins.extend(r.hardware_bins);
        for e in r.audit_trail {
            self.records.append_audit(e.record, &e.field, e.old, e.new);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for s in StageId::ALL {
            assert_eq!(s.as_str().parse::<StageId>().unwrap(), *s);
            assert_eq!(serde_json::to_string(s).unwrap(), format!("\"{s}\""));
        }
        assert!(StageId::Spec < StageId::LogicDesign && StageId::BurnIn < StageId::InField);
        assert_eq!("3pip-vendor".parse::<Actor>().unwrap(), Actor::ThirdPartyIpVendor);
        assert_eq!("trojan".parse::<AttackLabel>(), Err(SimError::UnknownAttack("trojan".into())));
    }

    #[test]
    fn value_serialization_is_tagged() {
        let v = serde_json::to_string(&Value::Count(3)).unwrap();
        assert_eq!(v, r#"{"kind":"count","value":3}"#);
    }
}
