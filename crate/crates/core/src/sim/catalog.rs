use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AttackLabel, Nominal, ProcessParams, Result, SimError, StageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Real,
    Bool,
    Count,
    Points,
}

/// Where an item lives: on every device record or on the lot's test records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Device,
    Lot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub stage: StageId,
    pub kind: ValueKind,
    pub units: String,
    pub scope: Scope,
}

/// How an attack perturbs one data item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "arg")]
pub enum Effect {
    /// Shift by sign · magnitude · nominal sd.
    Shift(f64),
    /// Re-derive from the pattern density through the shot-time formula.
    RecomputeShotTime,
    SetBool(bool),
    /// Add the distant branching cluster.
    AddCluster,
    /// Falsified lot-level test records.
    LotRecords,
}

/// Data items and the attack → item relationships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: BTreeMap<String, ItemSpec>,
    pub effects: BTreeMap<AttackLabel, Vec<(String, Effect)>>,
}

impl Default for Catalog {
    fn default() -> Self {
        Self::standard()
    }
}

impl Catalog {
    /// The default catalog: lifecycle data items and the attacks they reveal.
    pub fn standard() -> Self {
        use StageId::*;
        use ValueKind::*;
        let dev = |stage, kind, units: &str| ItemSpec {
            stage,
            kind,
            units: units.into(),
            scope: Scope::Device,
        };
        let lot = |units: &str| ItemSpec {
            stage: WaferSort,
            kind: Count,
            units: units.into(),
            scope: Scope::Lot,
        };
        let items: BTreeMap<String, ItemSpec> = [
            ("branching_points", dev(LogicDesign, Points, "(R_p,P_eff)")),
            ("pattern_density", dev(MaskWriting, Real, "fraction")),
            ("shot_time", dev(MaskWriting, Real, "us")),
            ("opc_filesize", dev(MaskWriting, Real, "MB")),
            ("opc_runtime", dev(MaskWriting, Real, "h")),
            ("oxide_thickness", dev(Oxidation, Real, "nm")),
            ("doping_density", dev(IonImplantation, Real, "cm^-3")),
            ("gate_dimension", dev(GateDefinition, Real, "nm")),
            ("etch_depth", dev(Etching, Real, "nm")),
            ("etch_rate", dev(Etching, Real, "nm/min")),
            ("hardware_bin", dev(WaferSort, Count, "bin")),
            ("lead_dimension", dev(WireBonding, Real, "mm")),
            ("ball_composition_score", dev(WireBonding, Real, "score")),
            ("marking_valid", dev(BurnIn, Bool, "")),
            ("early_failure_rate", dev(BurnIn, Real, "fraction")),
            ("debug_port_leak", dev(InField, Bool, "")),
            ("good_parts_count", lot("parts")),
            ("shipped_parts_count", lot("parts")),
            ("bin_counts", lot("parts")),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();

        let e = |xs: &[(&str, Effect)]| xs.iter().map(|(n, f)| (n.to_string(), *f)).collect::<Vec<_>>();
        let effects = [
            (
                AttackLabel::ParametricTrojan,
                e(&[
                    ("doping_density", Effect::Shift(1.0)),
                    ("etch_depth", Effect::Shift(1.0)),
                    ("oxide_thickness", Effect::Shift(-1.0)),
                    ("gate_dimension", Effect::Shift(-1.0)),
                    ("early_failure_rate", Effect::Shift(1.0)),
                ]),
            ),
            (
                AttackLabel::FunctionalTrojan,
                e(&[
                    ("pattern_density", Effect::Shift(1.0)),
                    ("shot_time", Effect::RecomputeShotTime),
                    ("opc_filesize", Effect::Shift(1.0)),
                    ("opc_runtime", Effect::Shift(1.0)),
                    ("etch_rate", Effect::Shift(-1.0)),
                ]),
            ),
            (
                AttackLabel::InfoLeakTrojan,
                e(&[("branching_points", Effect::AddCluster), ("debug_port_leak", Effect::SetBool(true))]),
            ),
            (AttackLabel::UnintentionalLeak, e(&[("debug_port_leak", Effect::SetBool(true))])),
            (
                AttackLabel::Recycled,
                e(&[
                    ("lead_dimension", Effect::Shift(-1.0)),
                    ("ball_composition_score", Effect::Shift(-1.0)),
                    ("early_failure_rate", Effect::Shift(1.0)),
                ]),
            ),
            (AttackLabel::Remarked, e(&[("marking_valid", Effect::SetBool(false))])),
            (
                AttackLabel::DefectiveShipped,
                e(&[
                    ("hardware_bin", Effect::LotRecords),
                    ("early_failure_rate", Effect::Shift(1.0)),
                    ("shipped_parts_count", Effect::LotRecords),
                    ("bin_counts", Effect::LotRecords),
                ]),
            ),
            (
                AttackLabel::Overproduced,
                e(&[("good_parts_count", Effect::LotRecords), ("shipped_parts_count", Effect::LotRecords)]),
            ),
        ]
        .into_iter()
        .collect();
        Catalog { items, effects }
    }

    pub fn spec(&self, item: &str) -> Result<&ItemSpec> {
        self.items.get(item).ok_or_else(|| SimError::UnknownItem(item.into()))
    }

    /// Device-scope items in lifecycle order (stage, then name).
    pub fn device_items(&self) -> Vec<(&str, &ItemSpec)> {
        let mut v: Vec<(&str, &ItemSpec)> = self
            .items
            .iter()
            .filter(|(_, s)| s.scope == Scope::Device)
            .map(|(n, s)| (n.as_str(), s))
            .collect();
        v.sort_by_key(|(n, s)| (s.stage, *n));
        v
    }

    /// Items an attack perturbs.
    pub fn related_items(&self, attack: AttackLabel) -> Vec<&str> {
        self.effects
            .get(&attack)
            .map(|es| es.iter().map(|(n, _)| n.as_str()).collect())
            .unwrap_or_default()
    }

    /// Adds a real-valued device item with its nominal distribution.
    pub fn add_real_item(
        &mut self,
        params: &mut ProcessParams,
        name: &str,
        stage: StageId,
        units: &str,
        nominal: Nominal,
    ) {
        self.items.insert(
            name.into(),
            ItemSpec {
                stage,
                kind: ValueKind::Real,
                units: units.into(),
                scope: Scope::Device,
            },
        );
        params.nominals.insert(name.into(), nominal);
    }

    /// Registers an extra effect for an attack; re-adding is a no-op.
    pub fn add_effect(&mut self, attack: AttackLabel, item: &str, effect: Effect) {
        let es = self.effects.entry(attack).or_default();
        if !es.iter().any(|(n, _)| n == item) {
            es.push((item.into(), effect));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_effect_names_a_catalog_item() {
        let c = Catalog::standard();
        for (attack, es) in &c.effects {
            assert!(!es.is_empty(), "{attack}");
            for (n, _) in es {
                assert!(c.items.contains_key(n), "{n}");
            }
        }
        assert_eq!(c.related_items(AttackLabel::Remarked), vec!["marking_valid"]);
    }

    #[test]
    fn device_items_follow_lifecycle_order() {
        let c = Catalog::standard();
        let order = c.device_items();
        assert_eq!(order[0].0, "branching_points");
        assert_eq!(order.last().unwrap().0, "debug_port_leak");
        assert!(order.windows(2).all(|w| w[0].1.stage <= w[1].1.stage));
    }
}
