use std::collections::BTreeSet;

use proptest::prelude::*;
use siltwin_core::anomaly::{extract_evidence, AnomalyError, DetectorConfig, DetectorKind, DetectorRegistry, FeatureInfo, Subject};
use siltwin_core::bn::{build_network, CptRowSpec, CptSpec, Evidence, NetworkSpec, Variable};
use siltwin_core::sim::{generate_fleet, inject_attack, Catalog, FleetConfig, Injection, ProcessParams, Scope, ValueKind};
use siltwin_core::trust::{forward_trust_extend, FeatureDecl, KnowledgeUpdate, NewCause, ThreatModel};
use siltwin_core::{Actor, AttackLabel, StageId, TrustError};

#[test]
fn deterministic_cpt_gives_certain_posterior() {
    let spec = NetworkSpec {
        variables: vec![Variable::binary("Trojan", "absent", "present"), Variable::binary("Leak", "false", "true")],
        cpts: vec![
            CptSpec {
                child: "Trojan".into(),
                parents: vec![],
                rows: vec![CptRowSpec { given: vec![], p: vec![0.99, 0.01] }],
            },
            CptSpec {
                child: "Leak".into(),
                parents: vec!["Trojan".into()],
                rows: vec![
                    CptRowSpec { given: vec!["absent".into()], p: vec![1.0, 0.0] },
                    CptRowSpec { given: vec!["present".into()], p: vec![0.0, 1.0] },
                ],
            },
        ],
    };
    let net = build_network(&spec).unwrap();
    let ev = Evidence::new().with("Leak", "true");
    assert_eq!(net.infer_posterior("Trojan", &ev).unwrap().probability("present"), Some(1.0));
    assert_eq!(net.infer_posterior_enumeration("Trojan", &ev).unwrap().probability("present"), Some(1.0));
}

#[test]
fn register_detector_rejects_unknown_features_and_replaces_by_name() {
    let params = ProcessParams::default();
    let mut reg = DetectorRegistry::standard(&params, &Catalog::standard());
    let cfg = |features: Vec<String>, threshold| DetectorConfig {
        kind: DetectorKind::SpecMismatch { tolerance_sigmas: 3.0 },
        features,
        threshold,
    };
    assert_eq!(
        reg.register_detector("strict", cfg(vec!["nope".into()], 1.0)),
        Err(AnomalyError::UnknownFeature("nope".into()))
    );
    assert!(!reg.detectors.contains_key("strict"));
    reg.register_detector("strict", cfg(vec!["etch_depth".into()], 1.0)).unwrap();
    reg.register_detector("strict", cfg(vec!["etch_rate".into()], 2.0)).unwrap();
    assert_eq!(reg.detectors["strict"].features, ["etch_rate"]);
    assert_eq!(reg.detectors["strict"].threshold, 2.0);

    reg.add_feature(
        "probe_current",
        FeatureInfo {
            stage: StageId::WaferSort,
            kind: ValueKind::Real,
            scope: Scope::Device,
            nominal: None,
        },
    );
    assert!(!reg.covers("probe_current"));
    reg.cover("strict", "probe_current").unwrap();
    reg.cover("strict", "probe_current").unwrap();
    assert!(reg.covers("probe_current"));
    assert_eq!(reg.detectors["strict"].features, ["etch_rate", "probe_current"]);
}

#[test]
fn uncovered_relevant_feature_is_an_error() {
    let params = ProcessParams::default();
    let fleet = generate_fleet(&FleetConfig::new(5, 1)).unwrap();
    let mut reg = DetectorRegistry::standard(&params, &Catalog::standard());
    reg.detectors.remove("leak_monitor");
    let relevant: BTreeSet<String> = ["debug_port_leak".to_string()].into();
    let r = extract_evidence(
        Subject::Device {
            record: &fleet.devices[0],
            records: &fleet.records,
        },
        &reg,
        &relevant,
    );
    assert_eq!(r, Err(AnomalyError::UncoveredFeature("debug_port_leak".into())));
}

#[test]
fn injection_leaves_other_devices_untouched() {
    let params = ProcessParams::default();
    let catalog = Catalog::standard();
    let fleet = generate_fleet(&FleetConfig::new(60, 4)).unwrap();
    let target = fleet.shipped().nth(3).unwrap().device_id.clone();
    let out = inject_attack(&fleet, &Injection::new(AttackLabel::Recycled, vec![target.clone()], 4.0), &params, &catalog).unwrap();
    for (a, b) in fleet.devices.iter().zip(&out.devices) {
        if a.device_id == target {
            assert_ne!(a, b);
            assert_eq!(b.ground_truth.attack, AttackLabel::Recycled);
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn new_cause_update_reaches_its_observation() {
    let base = ThreatModel::standard(&Catalog::standard());
    let update = KnowledgeUpdate {
        cause: "thermal-trojan".into(),
        new_cause: Some(NewCause {
            stage: StageId::Routing,
            actors: vec![Actor::RogueEmployee],
            explains: vec!["accelerated-failure".into()],
            base_rate: 0.02,
            observation_strength: 0.7,
        }),
        features: vec![],
        links: [("etch_depth".to_string(), 0.6)].into(),
    };
    let m = forward_trust_extend(&base, &update).unwrap();
    let t = &m.templates.bn["accelerated-failure"];
    assert!(t.causes.iter().any(|c| c == "thermal-trojan"));
    assert_eq!(forward_trust_extend(&m, &update).unwrap(), m);

    let mut orphan = update.clone();
    orphan.new_cause = None;
    orphan.cause = "ghost".into();
    assert!(matches!(forward_trust_extend(&base, &orphan), Err(TrustError::InvalidUpdate(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fleets_are_reproducible(size in 1usize..80, seed in any::<u64>()) {
        let cfg = FleetConfig::new(size, seed);
        let a = generate_fleet(&cfg).unwrap();
        let b = generate_fleet(&cfg).unwrap();
        prop_assert_eq!(a.devices_jsonl(), b.devices_jsonl());
        prop_assert_eq!(a.devices.len(), size);
        prop_assert!(a.devices.iter().all(|d| d.ground_truth.attack == AttackLabel::None));
    }

    #[test]
    fn forward_updates_preserve_the_model(strength in 0.05f64..0.95, rate in 0.01f64..0.5, cause in 0usize..3) {
        let causes = ["parametric-trojan", "recycled", "defective-shipped"];
        let base = ThreatModel::standard(&Catalog::standard());
        let update = KnowledgeUpdate {
            cause: causes[cause].into(),
            new_cause: None,
            features: vec![FeatureDecl {
                name: "via_resistance".into(),
                stage: StageId::Routing,
                units: "ohm".into(),
                nominal: siltwin_core::sim::Nominal { mean: 2.0, sd: 0.1 },
                shift: 1.0,
                anomaly_rate: rate,
            }],
            links: [("via_resistance".to_string(), strength)].into(),
        };
        let m = forward_trust_extend(&base, &update).unwrap();
        let mut params = ProcessParams::default();
        let mut catalog = Catalog::standard();
        update.apply_to_catalog(&mut params, &mut catalog);
        prop_assert!(m.validate(&catalog).is_ok());
        for c in &base.causes {
            let now = m.cause(&c.id).unwrap();
            for f in c.features.keys() {
                prop_assert!(now.features.contains_key(f));
            }
        }
        prop_assert_eq!(m.cause(causes[cause]).unwrap().features.get("via_resistance"), Some(&strength));
        prop_assert_eq!(forward_trust_extend(&m, &update).unwrap(), m);
    }
}
