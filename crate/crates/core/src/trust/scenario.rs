use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_trust_bn, backward_trust_hmm, forward_trust_extend, BnSettings, HistoricalDb, KnowledgeUpdate, Result, RootCauseReport, ThreatModel, TrustError};
use crate::anomaly::DetectorRegistry;
use crate::hmm::{learn, ConstraintMask, HmmFile, HmmModel, Init, LearnConfig, ObservationSeq};
use crate::sim::{generate_fleet, inject_attack, stage_test_sequence, AttackLabel, Catalog, Fleet, FleetConfig, Injection, ProcessParams, StageId, StageTestPlan};

/// Simulator, detectors and threat model, with an optional forward-trust
/// update applied to all of them.
#[derive(Debug, Clone)]
pub struct ScenarioSetup {
    pub params: ProcessParams,
    pub catalog: Catalog,
    pub registry: DetectorRegistry,
    pub model: ThreatModel,
}

impl ScenarioSetup {
    pub fn new(update: Option<&KnowledgeUpdate>) -> Result<Self> {
        let mut params = ProcessParams::default();
        let mut catalog = Catalog::standard();
        let mut model = ThreatModel::standard(&catalog);
        if let Some(u) = update {
            model = forward_trust_extend(&model, u)?;
            u.apply_to_catalog(&mut params, &mut catalog);
        }
        let mut registry = DetectorRegistry::standard(&params, &catalog);
        if let Some(u) = update {
            u.apply_to_registry(&mut registry)?;
        }
        model.validate(&catalog)?;
        Ok(ScenarioSetup {
            params,
            catalog,
            registry,
            model,
        })
    }

    fn fleet_config(&self, size: usize, seed: u64, prefix: &str) -> FleetConfig {
        let mut c = FleetConfig::new(size, seed);
        c.params = self.params.clone();
        c.catalog = self.catalog.clone();
        c.id_prefix = prefix.into();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub report: RootCauseReport,
    pub device: String,
    /// Injected cause of the device under test.
    pub truth: AttackLabel,
    pub origin: Option<StageId>,
    /// Learned lifecycle HMM and the decoded test sequence (key-leak only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmm: Option<HmmFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<ObservationSeq>,
}

/// Accelerated-failure pipeline: labelled history with a share of each
/// candidate cause, then one freshly injected device under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario1Config {
    pub seed: u64,
    pub cause: AttackLabel,
    /// In nominal sds.
    pub magnitude: f64,
    pub history_size: usize,
    /// Fraction of the history devices injected with each cause.
    pub history_fraction: f64,
    pub fleet_size: usize,
    pub settings: BnSettings,
    pub update: Option<KnowledgeUpdate>,
    /// Items perturbed on the device under test; default is the catalog set.
    pub dut_items: Option<Vec<String>>,
}

impl Scenario1Config {
    pub fn new(seed: u64, cause: AttackLabel) -> Self {
        Scenario1Config {
            seed,
            cause,
            magnitude: 4.0,
            history_size: 600,
            history_fraction: 0.05,
            fleet_size: 100,
            settings: BnSettings::default(),
            update: None,
            dut_items: None,
        }
    }
}

pub(crate) const SCENARIO1_CAUSES: [AttackLabel; 3] =
    [AttackLabel::ParametricTrojan, AttackLabel::Recycled, AttackLabel::DefectiveShipped];

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ids<'a>(devices: impl Iterator<Item = &'a crate::sim::DeviceRecord>) -> Vec<String> {
    devices.map(|d| d.device_id.clone()).collect()
}

impl Default for Scenario1Config {
    fn default() -> Self {
        Scenario1Config::new(0, AttackLabel::Recycled)
    }
}

/// Labelled history for scenario 1. When the config carries an update for
/// one of the causes, half of that cause's devices show only the update's
/// features plus the accelerated aging.
pub fn scenario1_history(cfg: &Scenario1Config, setup: &ScenarioSetup) -> Result<HistoricalDb> {
    let fc = setup.fleet_config(cfg.history_size, cfg.seed ^ 0x5eed_0001, "H");
    let mut fleet = generate_fleet(&fc)?;
    let mut rng = rng_for(cfg.seed, 1);
    let mut shipped = ids(fleet.shipped());
    let mut failing = ids(fleet.devices.iter().filter(|d| !d.shipped));
    shipped.shuffle(&mut rng);
    failing.shuffle(&mut rng);
    let n = ((cfg.history_fraction * cfg.history_size as f64).round() as usize).max(1);
    let mut next = 0;
    for (k, attack) in SCENARIO1_CAUSES.iter().copied().enumerate() {
        let targets: Vec<String> = if attack == AttackLabel::DefectiveShipped {
            failing.iter().take(n).cloned().collect()
        } else {
            let t = shipped.iter().skip(next).take(n).cloned().collect();
            next += n;
            t
        };
        if targets.is_empty() {
            continue;
        }
        let variant = cfg
            .update
            .as_ref()
            .filter(|u| u.cause == attack.as_str() && !u.features.is_empty());
        let (classic, novel) = match variant {
            Some(_) => targets.split_at(targets.len() / 2),
            None => (&targets[..], &targets[..0]),
        };
        let mut inj = Injection::new(attack, classic.to_vec(), cfg.magnitude);
        inj.seed = cfg.seed.wrapping_add(k as u64);
        if !classic.is_empty() {
            fleet = inject_attack(&fleet, &inj, &setup.params, &setup.catalog)?;
        }
        if let Some(u) = variant {
            let mut items: Vec<String> = u.features.iter().map(|d| d.name.clone()).collect();
            items.push("early_failure_rate".into());
            inj.targets = novel.to_vec();
            inj.items = Some(items);
            fleet = inject_attack(&fleet, &inj, &setup.params, &setup.catalog)?;
        }
    }
    HistoricalDb::observe(vec![fleet], &setup.params, cfg.seed ^ 0x5eed_0002)
}

fn pick(rng: &mut ChaCha8Rng, pool: Vec<String>) -> Result<String> {
    pool.choose(rng)
        .cloned()
        .ok_or_else(|| TrustError::InsufficientHistory("no eligible device under test".into()))
}

pub fn run_scenario1(cfg: &Scenario1Config) -> Result<ScenarioOutcome> {
    let setup = ScenarioSetup::new(cfg.update.as_ref())?;
    let history = scenario1_history(cfg, &setup)?;
    let fc = setup.fleet_config(cfg.fleet_size, cfg.seed ^ 0x5eed_0003, "F");
    let fleet = generate_fleet(&fc)?;
    let mut rng = rng_for(cfg.seed, 2);
    let pool = if cfg.cause == AttackLabel::DefectiveShipped {
        ids(fleet.devices.iter().filter(|d| !d.shipped))
    } else {
        ids(fleet.shipped())
    };
    let target = pick(&mut rng, pool)?;
    let mut inj = Injection::new(cfg.cause, vec![target.clone()], cfg.magnitude);
    inj.seed = cfg.seed ^ 0x5eed_0004;
    inj.items = cfg.dut_items.clone();
    let fleet = inject_attack(&fleet, &inj, &setup.params, &setup.catalog)?;
    let dut = fleet.device(&target).expect("target exists");
    let run = backward_trust_bn(
        "accelerated-failure",
        dut,
        &fleet.records.for_lot(&dut.lot_id),
        &history,
        &setup.model,
        &setup.registry,
        &cfg.settings,
    )?;
    Ok(ScenarioOutcome {
        report: run.report,
        device: target,
        truth: cfg.cause,
        origin: dut.ground_truth.origin,
        hmm: None,
        sequence: None,
    })
}

/// Key-leak pipeline: learn the constrained HMM from stage-test sequences
/// of a partly infested training fleet, then decode a design that passed
/// every pre-silicon test and leaked its key in the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario2Config {
    pub seed: u64,
    pub training_size: usize,
    pub trojan_fraction: f64,
    pub origin: StageId,
    pub plan: StageTestPlan,
    pub max_iters: usize,
    pub tol: f64,
}

impl Scenario2Config {
    pub fn new(seed: u64) -> Self {
        Scenario2Config {
            seed,
            training_size: 1000,
            trojan_fraction: 0.8,
            origin: StageId::LogicDesign,
            plan: StageTestPlan {
                detect_prob: 0.2,
                ..StageTestPlan::default()
            },
            max_iters: 500,
            tol: 1e-9,
        }
    }
}

impl Default for Scenario2Config {
    fn default() -> Self {
        Scenario2Config::new(0)
    }
}

fn infested(setup: &ScenarioSetup, fleet: &Fleet, targets: Vec<String>, origin: StageId, seed: u64) -> Result<Fleet> {
    if targets.is_empty() {
        return Ok(fleet.clone());
    }
    let mut inj = Injection::new(AttackLabel::InfoLeakTrojan, targets, 1.0);
    inj.origin = Some(origin);
    inj.seed = seed;
    Ok(inject_attack(fleet, &inj, &setup.params, &setup.catalog)?)
}

/// Learns the stage-expanded lifecycle HMM under the template mask.
pub fn learn_lifecycle_hmm(cfg: &Scenario2Config, setup: &ScenarioSetup) -> Result<(HmmModel, ConstraintMask)> {
    let t = &setup.model.templates.hmm;
    let mask = ConstraintMask::from(&t.mask);
    let fc = setup.fleet_config(cfg.training_size, cfg.seed ^ 0x5eed_0011, "H");
    let fleet = generate_fleet(&fc)?;
    let mut all = ids(fleet.devices.iter());
    all.shuffle(&mut rng_for(cfg.seed, 11));
    let k = (cfg.trojan_fraction * cfg.training_size as f64).round() as usize;
    let fleet = infested(setup, &fleet, all[..k.min(all.len())].to_vec(), cfg.origin, cfg.seed)?;
    let seqs: Vec<_> = fleet
        .devices
        .iter()
        .enumerate()
        .map(|(i, d)| stage_test_sequence(d, &cfg.plan, &mut rng_for(cfg.seed ^ 0x5eed_0012, i as u64)))
        .collect();
    let lc = LearnConfig {
        states: t.states.clone(),
        symbols: t.symbols.clone(),
        mask: mask.clone(),
        init: Init::Seed(cfg.seed),
        max_iters: cfg.max_iters,
        tol: cfg.tol,
    };
    Ok((learn(&seqs, &lc)?.model, mask))
}

pub fn run_scenario2(cfg: &Scenario2Config) -> Result<ScenarioOutcome> {
    let setup = ScenarioSetup::new(None)?;
    let (hmm, mask) = learn_lifecycle_hmm(cfg, &setup)?;
    let fc = setup.fleet_config(1, cfg.seed ^ 0x5eed_0013, "F");
    let fleet = generate_fleet(&fc)?;
    let target = fleet.devices[0].device_id.clone();
    let fleet = infested(&setup, &fleet, vec![target.clone()], cfg.origin, cfg.seed ^ 0x5eed_0014)?;
    let dut = fleet.device(&target).expect("target exists");
    let quiet = StageTestPlan {
        detect_prob: 0.0,
        false_alarm: 0.0,
        not_run_prob: 0.0,
        ..cfg.plan.clone()
    };
    let seq = stage_test_sequence(dut, &quiet, &mut rng_for(cfg.seed ^ 0x5eed_0015, 0));
    let report = backward_trust_hmm("key-leak", &target, &seq, &hmm, &mask, &setup.model)?;
    Ok(ScenarioOutcome {
        report,
        device: target,
        truth: AttackLabel::InfoLeakTrojan,
        origin: Some(cfg.origin),
        hmm: Some(hmm.to_file(&mask)),
        sequence: Some(seq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario1_ranks_each_cause_first_for_a_seed() {
        for cause in SCENARIO1_CAUSES {
            let out = run_scenario1(&Scenario1Config::new(7, cause)).unwrap();
            assert_eq!(out.report.top_cause(), Some(cause.as_str()), "{}", out.report.summary());
        }
    }

    #[test]
    fn scenario2_attributes_logic_design() {
        let out = run_scenario2(&Scenario2Config::new(3)).unwrap();
        let st = out.report.implicated_stage.as_ref().expect("compromise found");
        assert_eq!(st.stage, StageId::LogicDesign, "{}", out.report.summary());
    }

    #[test]
    fn scenarios_are_deterministic() {
        let a = run_scenario1(&Scenario1Config::new(5, AttackLabel::Recycled)).unwrap();
        let b = run_scenario1(&Scenario1Config::new(5, AttackLabel::Recycled)).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
    }
}
