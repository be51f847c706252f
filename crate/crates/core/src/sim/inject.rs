use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::generate::{cluster, device_rng, shot_time};
use super::{Actor, AttackLabel, Catalog, Effect, Fleet, GroundTruth, ProcessParams, Result, SimError, StageId, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub attack: AttackLabel,
    pub targets: Vec<String>,
    /// In units of each item's nominal standard deviation.
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub origin: Option<StageId>,
    #[serde(default)]
    pub actor: Option<Actor>,
    /// Restricts or extends the perturbed items; defaults to the catalog
    /// relationships for the attack.
    #[serde(default)]
    pub items: Option<Vec<String>>,
}

impl Injection {
    pub fn new(attack: AttackLabel, targets: Vec<String>, magnitude: f64) -> Self {
        Injection {
            attack,
            targets,
            magnitude,
            seed: 0,
            origin: None,
            actor: None,
            items: None,
        }
    }
}

fn effects_for(inj: &Injection, catalog: &Catalog) -> Result<Vec<(String, Effect)>> {
    let defaults = catalog.effects.get(&inj.attack).cloned().unwrap_or_default();
    match &inj.items {
        None => Ok(defaults),
        Some(items) => items
            .iter()
            .map(|name| {
                catalog.spec(name)?;
                let effect = defaults
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, e)| *e)
                    .unwrap_or(Effect::Shift(1.0));
                Ok((name.clone(), effect))
            })
            .collect(),
    }
}

/// Applies an attack to the target devices, returning the modified fleet.
pub fn inject_attack(fleet: &Fleet, inj: &Injection, params: &ProcessParams, catalog: &Catalog) -> Result<Fleet> {
    if inj.attack == AttackLabel::None {
        return Err(SimError::UnknownAttack("none".into()));
    }
    if !(inj.magnitude > 0.0) || !inj.magnitude.is_finite() {
        return Err(SimError::BadMagnitude(inj.magnitude));
    }
    if inj.targets.is_empty() {
        return Err(SimError::NoTargets("target list is empty".into()));
    }
    let positions: BTreeMap<&str, usize> =
        fleet.devices.iter().enumerate().map(|(i, d)| (d.device_id.as_str(), i)).collect();
    let mut targets = Vec::with_capacity(inj.targets.len());
    for t in &inj.targets {
        let &i = positions.get(t.as_str()).ok_or_else(|| SimError::NoTargets(format!("unknown device {t}")))?;
        if !targets.contains(&i) {
            targets.push(i);
        }
    }
    let effects = effects_for(inj, catalog)?;
    let (default_origin, default_actor) = inj.attack.default_origin().expect("not the clean label");
    let truth = GroundTruth {
        attack: inj.attack,
        origin: Some(inj.origin.unwrap_or(default_origin)),
        actor: Some(inj.actor.unwrap_or(default_actor)),
    };

    let mut out = fleet.clone();
    let mut lot_deltas: BTreeMap<String, u64> = BTreeMap::new();
    for &i in &targets {
        let mut rng = device_rng(inj.seed, i);
        let dev = &mut out.devices[i];
        for (name, effect) in &effects {
            match effect {
                Effect::Shift(sign) => {
                    let sd = params.nominal(name).map_or(0.0, |n| n.sd);
                    let item = dev.item_mut(name).ok_or_else(|| SimError::IncompleteRecord {
                        device: fleet.devices[i].device_id.clone(),
                        item: name.clone(),
                    })?;
                    if let Value::Real(x) = &mut item.value {
                        *x += sign * inj.magnitude * sd;
                    }
                }
                Effect::RecomputeShotTime => {
                    let alpha = dev.real("pattern_density").unwrap_or(params.alpha);
                    if let Some(item) = dev.item_mut(name) {
                        item.value = Value::Real(shot_time(params.t0, alpha, params.eta));
                    }
                }
                Effect::SetBool(b) => {
                    if let Some(item) = dev.item_mut(name) {
                        item.value = Value::Bool(*b);
                    }
                }
                Effect::AddCluster => {
                    if let Some(item) = dev.item_mut(name) {
                        if let Value::Points(pts) = &mut item.value {
                            pts.extend(cluster(&mut rng, &params.trojan_branching));
                        }
                    }
                }
                Effect::LotRecords => {}
            }
        }
        if inj.attack == AttackLabel::DefectiveShipped {
            if dev.shipped {
                return Err(SimError::NoTargets(format!("{} passed wafer sort and is already shipped", dev.device_id)));
            }
            dev.shipped = true;
        }
        dev.ground_truth = truth.clone();
        *lot_deltas.entry(dev.lot_id.clone()).or_default() += 1;
    }

    let touches_lot = effects.iter().any(|(_, e)| *e == Effect::LotRecords);
    if touches_lot {
        for (lot_id, n) in lot_deltas {
            let lot = out.records.lot_mut(&lot_id).expect("every device lot has a master record");
            match inj.attack {
                AttackLabel::DefectiveShipped => {
                    let old = lot.shipped;
                    lot.shipped += n;
                    let new = lot.shipped;
                    out.records.append_audit(format!("master:{lot_id}"), "shipped_parts_count", old, new);
                }
                AttackLabel::Overproduced => {
                    lot.good = lot.good.saturating_sub(n);
                    lot.shipped = lot.shipped.saturating_sub(n);
                }
                _ => {}
            }
        }
    }
    Ok(out)
}
