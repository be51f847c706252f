use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    Catalog, ClusterParams, DataItem, DeviceRecord, Fleet, GroundTruth, LotResult, ProcessParams, Result,
    SimError, TestRecordSet, Value, ValueKind, WaferResult, FORMAT_VERSION,
};

/// E-beam shot time at pattern density `alpha`: T = T0 / (1 + 2·alpha·eta).
pub fn shot_time(t0: f64, alpha: f64, eta: f64) -> f64 {
    t0 / (1.0 + 2.0 * alpha * eta)
}

/// Shot-time spread induced by pattern-density variation (first order).
pub fn shot_time_sd(p: &ProcessParams) -> f64 {
    let sd_alpha = p.nominals.get("pattern_density").map_or(0.0, |n| n.sd);
    let d = 1.0 + 2.0 * p.alpha * p.eta;
    p.t0 * 2.0 * p.eta / (d * d) * sd_alpha
}

fn default_dpw() -> usize {
    25
}

fn default_wpl() -> usize {
    4
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_dpw")]
    pub devices_per_wafer: usize,
    #[serde(default = "default_wpl")]
    pub wafers_per_lot: usize,
    #[serde(default)]
    pub params: ProcessParams,
    #[serde(default)]
    pub catalog: Catalog,
    /// Prefix for device, wafer and lot ids, so fleets can be merged.
    #[serde(default)]
    pub id_prefix: String,
}

impl FleetConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        FleetConfig {
            format_version: FORMAT_VERSION,
            size,
            seed,
            devices_per_wafer: default_dpw(),
            wafers_per_lot: default_wpl(),
            params: ProcessParams::default(),
            catalog: Catalog::standard(),
            id_prefix: String::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(SimError::BadConfig("fleet size must be at least 1".into()));
        }
        if self.devices_per_wafer == 0 || self.wafers_per_lot == 0 {
            return Err(SimError::BadConfig("wafer and lot sizes must be positive".into()));
        }
        self.params.validate()?;
        for (name, spec) in self.catalog.device_items() {
            if spec.kind == ValueKind::Real && self.params.nominal(name).is_none() {
                return Err(SimError::BadConfig(format!("no nominal for real item {name}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

pub(crate) fn cluster(rng: &mut impl Rng, c: &ClusterParams) -> Vec<[f64; 2]> {
    (0..c.points)
        .map(|_| {
            [
                normal(rng, c.center[0], c.spread).clamp(0.0, 1.0),
                normal(rng, c.center[1], c.spread).clamp(0.0, 1.0),
            ]
        })
        .collect()
}

/// Per-device stream so generation order does not affect values.
pub(crate) fn device_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn device_items(cfg: &FleetConfig, rng: &mut ChaCha8Rng) -> Vec<DataItem> {
    let p = &cfg.params;
    let mut items: Vec<DataItem> = cfg
        .catalog
        .device_items()
        .into_iter()
        .map(|(name, spec)| {
            let value = match (name, spec.kind) {
                ("shot_time", _) => Value::Real(0.0),
                ("pattern_density", _) => {
                    let n = p.nominals["pattern_density"];
                    Value::Real(normal(rng, p.alpha, n.sd).clamp(0.0, 1.0))
                }
                (_, ValueKind::Real) => {
                    let n = p.nominal(name).expect("validated");
                    Value::Real(normal(rng, n.mean, n.sd))
                }
                ("marking_valid", ValueKind::Bool) => Value::Bool(true),
                (_, ValueKind::Bool) => Value::Bool(false),
                ("hardware_bin", ValueKind::Count) => Value::Count(1),
                (_, ValueKind::Count) => Value::Count(0),
                ("branching_points", ValueKind::Points) => Value::Points(cluster(rng, &p.branching)),
                (_, ValueKind::Points) => Value::Points(Vec::new()),
            };
            DataItem {
                name: name.to_string(),
                stage: spec.stage,
                value,
                units: spec.units.clone(),
            }
        })
        .collect();
    let alpha = items
        .iter()
        .find(|i| i.name == "pattern_density")
        .and_then(|i| i.value.as_real())
        .unwrap_or(p.alpha);
    if let Some(t) = items.iter_mut().find(|i| i.name == "shot_time") {
        t.value = Value::Real(shot_time(p.t0, alpha, p.eta));
    }
    items
}

/// Clean fleet with independent Gaussian process variation per item.
pub fn generate_fleet(cfg: &FleetConfig) -> Result<Fleet> {
    cfg.validate()?;
    let per_lot = cfg.devices_per_wafer * cfg.wafers_per_lot;
    let px = &cfg.id_prefix;
    let mut devices: Vec<DeviceRecord> = (0..cfg.size)
        .map(|i| {
            let mut rng = device_rng(cfg.seed, i);
            DeviceRecord {
                device_id: format!("{px}D{i:05}"),
                wafer_id: format!("{px}W{:04}", i / cfg.devices_per_wafer),
                lot_id: format!("{px}L{:03}", i / per_lot),
                shipped: true,
                items: device_items(cfg, &mut rng),
                ground_truth: GroundTruth::clean(),
            }
        })
        .collect();

    let mut records = TestRecordSet {
        format_version: FORMAT_VERSION,
        master_results: Vec::new(),
        wafer_results: Vec::new(),
        hardware_bins: BTreeMap::new(),
        audit_trail: Vec::new(),
    };
    let has_bin = cfg.catalog.items.contains_key("hardware_bin");
    for (lot_index, chunk) in (0..cfg.size).collect::<Vec<_>>().chunks(per_lot).enumerate() {
        let mut rng = device_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, lot_index);
        let n = chunk.len();
        let failing = ((1.0 - cfg.params.yield_fraction) * n as f64).round() as usize;
        let mut order: Vec<usize> = chunk.to_vec();
        order.shuffle(&mut rng);
        let mut bins: BTreeMap<u32, u64> = BTreeMap::new();
        for (k, &d) in order.iter().enumerate() {
            let bin: u32 = if k < failing { rng.random_range(2..=3) } else { 1 };
            *bins.entry(bin).or_default() += 1;
            if bin != 1 {
                devices[d].shipped = false;
            }
            if has_bin {
                if let Some(item) = devices[d].item_mut("hardware_bin") {
                    item.value = Value::Count(bin as u64);
                }
            }
        }
        let lot_id = devices[chunk[0]].lot_id.clone();
        let good = (n - failing) as u64;
        records.master_results.push(LotResult {
            lot_id: lot_id.clone(),
            tested: n as u64,
            good,
            shipped: good,
        });
        records.hardware_bins.insert(lot_id.clone(), bins);
        for wchunk in chunk.chunks(cfg.devices_per_wafer) {
            let wafer_id = devices[wchunk[0]].wafer_id.clone();
            let good = wchunk.iter().filter(|&&d| devices[d].shipped).count() as u64;
            records.wafer_results.push(WaferResult {
                wafer_id,
                lot_id: lot_id.clone(),
                tested: wchunk.len() as u64,
                good,
            });
        }
    }
    Ok(Fleet { devices, records })
}
