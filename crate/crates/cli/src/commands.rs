use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use siltwin_core::anomaly::{extract_evidence, DetectorRegistry, EvidenceVector, Subject};
use siltwin_core::hmm::{HmmFile, ObservationSeq};
use siltwin_core::mln::{KnowledgeBase, MapOptions};
use siltwin_core::sim::{generate_fleet, inject_attack, Catalog, Fleet, FleetConfig, Injection, ProcessParams, TestRecordSet};
use siltwin_core::trust::{
    backward_trust_bn, backward_trust_hmm, backward_trust_mln, forward_trust_extend, run_scenario1, run_scenario2,
    HistoricalDb, KnowledgeUpdate, Scenario1Config, Scenario2Config, ThreatModel,
};
use siltwin_core::{AttackLabel, RootCauseReport};

use crate::config::{read_json, read_text, EngineChoice, LoadedConfig};
use crate::error::{CliError, CliResult, Stage};
use crate::output::Outputs;

pub const FLEET_FILE: &str = "fleet.jsonl";
pub const RECORDS_FILE: &str = "fleet.records.json";

/// Where a command reads from and writes to.
pub struct Ctx {
    pub cfg: LoadedConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Ctx {
    fn outputs(&self) -> Outputs {
        Outputs::new(self.out.clone(), self.force)
    }
}

/// The test-record sidecar that travels with a `.jsonl` fleet file.
pub fn records_path(fleet: &Path) -> PathBuf {
    fleet.with_extension("records.json")
}

pub fn load_fleet(path: &Path) -> CliResult<Fleet> {
    let devices = read_text(path, "fleet")?;
    let records: TestRecordSet = read_json(&records_path(path), "test records")?;
    Fleet::from_jsonl(&devices, records).map_err(|e| CliError::input(format!("malformed fleet {}: {e}", path.display())))
}

fn stage_fleet(out: &mut Outputs, fleet: &Fleet) {
    out.add(FLEET_FILE, fleet.devices_jsonl());
    out.add_json(RECORDS_FILE, &fleet.records);
}

fn registry(ctx: &Ctx, params: &ProcessParams, catalog: &Catalog, update: Option<&KnowledgeUpdate>) -> CliResult<DetectorRegistry> {
    match ctx.cfg.optional_input(&ctx.cfg.config.paths.registry, "registry")? {
        Some(p) => read_json(&p, "detector registry"),
        None => {
            let mut reg = DetectorRegistry::standard(params, catalog);
            if let Some(u) = update {
                u.apply_to_registry(&mut reg).at("registry")?;
            }
            Ok(reg)
        }
    }
}

fn threat_model(ctx: &Ctx, catalog: &Catalog, update: Option<&KnowledgeUpdate>) -> CliResult<ThreatModel> {
    match ctx.cfg.optional_input(&ctx.cfg.config.paths.model, "model")? {
        Some(p) => {
            let m: ThreatModel = read_json(&p, "threat model")?;
            m.validate(catalog).at("model").map_err(|mut e| {
                e.message.push_str(" (an extended model needs its knowledge update in paths.update)");
                e
            })?;
            Ok(m)
        }
        None => {
            let m = ThreatModel::standard(catalog);
            match update {
                Some(u) => forward_trust_extend(&m, u).at("extend"),
                None => Ok(m),
            }
        }
    }
}

pub fn simulate(ctx: &Ctx) -> CliResult<String> {
    let f = ctx
        .cfg
        .config
        .fleet
        .as_ref()
        .ok_or_else(|| CliError::input("config has no `fleet` section"))?;
    let (params, catalog, _) = ctx.cfg.simulator()?;
    let mut fc = FleetConfig::new(f.size, ctx.cfg.seed);
    fc.params = params;
    fc.catalog = catalog;
    fc.id_prefix = f.id_prefix.clone();
    if let Some(d) = f.devices_per_wafer {
        fc.devices_per_wafer = d;
    }
    if let Some(w) = f.wafers_per_lot {
        fc.wafers_per_lot = w;
    }
    let fleet = generate_fleet(&fc).at("simulate")?;
    let mut out = ctx.outputs();
    stage_fleet(&mut out, &fleet);
    let sum = out.checksum(FLEET_FILE).expect("staged");
    let dir = out.commit("simulate", &ctx.cfg)?;
    Ok(format!("devices: {}\nchecksum: sha256:{sum}\nwritten: {}\n", fleet.devices.len(), dir.display()))
}

pub fn inject(ctx: &Ctx) -> CliResult<String> {
    let path = ctx.cfg.input(&ctx.cfg.config.paths.fleet, "fleet")?;
    let mut fleet = load_fleet(&path)?;
    let blocks = &ctx.cfg.config.injections;
    if blocks.is_empty() {
        return Err(CliError::input("config has no `injections`"));
    }
    let (params, catalog, _) = ctx.cfg.simulator()?;
    let mut report = String::new();
    for (i, b) in blocks.iter().enumerate() {
        let targets = match (b.targets.is_empty(), b.count) {
            (false, None) => b.targets.clone(),
            (true, Some(n)) => {
                let want_shipped = b.attack != AttackLabel::DefectiveShipped;
                let mut ids: Vec<String> = fleet
                    .devices
                    .iter()
                    .filter(|d| d.shipped == want_shipped && d.ground_truth.attack == AttackLabel::None)
                    .map(|d| d.device_id.clone())
                    .collect();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                if n > ids.len() {
                    return Err(CliError::input(format!("injection {i}: count {n} exceeds {} eligible clean devices", ids.len())));
                }
                ids.truncate(n);
                ids.sort();
                ids
            }
            _ => return Err(CliError::input(format!("injection {i}: give exactly one of `targets` or `count`"))),
        };
        let inj = Injection {
            attack: b.attack,
            targets,
            magnitude: b.magnitude,
            seed: ctx.cfg.seed.wrapping_add(i as u64),
            origin: b.origin,
            actor: b.actor,
            items: b.items.clone(),
        };
        fleet = inject_attack(&fleet, &inj, &params, &catalog).at("inject")?;
        let _ = writeln!(report, "{}: {} devices", b.attack, inj.targets.len());
    }
    let mut out = ctx.outputs();
    stage_fleet(&mut out, &fleet);
    let sum = out.checksum(FLEET_FILE).expect("staged");
    let dir = out.commit("inject", &ctx.cfg)?;
    let _ = write!(report, "checksum: sha256:{sum}\nwritten: {}\n", dir.display());
    Ok(report)
}

pub fn detect(ctx: &Ctx) -> CliResult<String> {
    let path = ctx.cfg.input(&ctx.cfg.config.paths.fleet, "fleet")?;
    let fleet = load_fleet(&path)?;
    let (params, catalog, update) = ctx.cfg.simulator()?;
    let reg = registry(ctx, &params, &catalog, update.as_ref())?;
    let relevant: BTreeSet<String> = reg.features.keys().filter(|f| reg.covers(f)).cloned().collect();
    let mut lines = String::new();
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut push = |ev: &EvidenceVector, lines: &mut String| {
        for item in ev.items.iter().filter(|i| i.anomalous) {
            *counts.entry((item.detector.clone(), item.feature.clone())).or_default() += 1;
        }
        lines.push_str(&serde_json::to_string(ev).expect("evidence serializes"));
        lines.push('\n');
    };
    for d in &fleet.devices {
        let ev = extract_evidence(
            Subject::Device {
                record: d,
                records: &fleet.records,
            },
            &reg,
            &relevant,
        )
        .at("detect")?;
        push(&ev, &mut lines);
    }
    let ev = extract_evidence(Subject::Fleet { id: "fleet", fleet: &fleet }, &reg, &relevant).at("detect")?;
    push(&ev, &mut lines);
    let mut csv = String::from("detector,feature,anomalous\n");
    let mut total = 0;
    for ((det, feat), n) in &counts {
        let _ = writeln!(csv, "{det},{feat},{n}");
        total += n;
    }
    let mut out = ctx.outputs();
    out.add("evidence.jsonl", lines);
    out.add("evidence-summary.csv", csv.clone());
    let dir = out.commit("detect", &ctx.cfg)?;
    Ok(format!(
        "subjects: {}\nanomalous items: {total}\n{csv}written: {}\n",
        fleet.devices.len() + 1,
        dir.display()
    ))
}

/// Stage-labelled test outcomes for the HMM engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub symbols: Vec<String>,
    pub stages: Vec<String>,
}

fn stage_report(out: &mut Outputs, report: &RootCauseReport) {
    out.add("report.json", report.to_json() + "\n");
    out.add("report.txt", report.summary());
}

pub fn infer(ctx: &Ctx, engine: Option<EngineChoice>) -> CliResult<String> {
    let c = &ctx.cfg.config;
    let engine = engine.or(c.engine).unwrap_or(EngineChoice::Bn);
    let observation = c
        .observation
        .clone()
        .ok_or_else(|| CliError::input("config is missing `observation`"))?;
    let (params, catalog, update) = ctx.cfg.simulator()?;
    let model = threat_model(ctx, &catalog, update.as_ref())?;
    let mut out = ctx.outputs();
    let report = match engine {
        EngineChoice::Bn => {
            let fleet = load_fleet(&ctx.cfg.input(&c.paths.fleet, "fleet")?)?;
            let reg = registry(ctx, &params, &catalog, update.as_ref())?;
            let id = c.device.as_ref().ok_or_else(|| CliError::input("config is missing `device`"))?;
            let dut = fleet
                .device(id)
                .ok_or_else(|| CliError::input(format!("device {id} is not in the fleet")))?;
            let mut fleets = Vec::with_capacity(c.paths.history.len());
            for (i, h) in c.paths.history.iter().enumerate() {
                fleets.push(load_fleet(&ctx.cfg.input(&Some(h.clone()), &format!("history[{i}]"))?)?);
            }
            let history = HistoricalDb::observe(fleets, &params, ctx.cfg.seed).at("history")?;
            let run = backward_trust_bn(&observation, dut, &fleet.records, &history, &model, &reg, &c.learner).at("infer")?;
            out.add("network.json", run.network.to_json() + "\n");
            run.report
        }
        EngineChoice::Hmm => {
            let file: HmmFile = read_json(&ctx.cfg.input(&c.paths.hmm, "hmm")?, "HMM model")?;
            let (hmm, mask) = file.into_parts().at("model")?;
            let sf: SequenceFile = read_json(&ctx.cfg.input(&c.paths.sequence, "sequence")?, "test sequence")?;
            let labels: Vec<&str> = sf.symbols.iter().map(String::as_str).collect();
            let mut seq = ObservationSeq::from_labels(&hmm, &labels).at("sequence")?;
            seq = ObservationSeq::with_stages(seq.symbols, sf.stages).at("sequence")?;
            let subject = c.device.clone().unwrap_or_else(|| "sequence".into());
            backward_trust_hmm(&observation, &subject, &seq, &hmm, &mask, &model).at("infer")?
        }
        EngineChoice::Mln => {
            let kb: KnowledgeBase = match ctx.cfg.optional_input(&c.paths.kb, "kb")? {
                Some(p) => read_json(&p, "knowledge base")?,
                None => model
                    .templates
                    .mln
                    .get(&observation)
                    .cloned()
                    .ok_or_else(|| CliError::input(format!("no MLN template for observation `{observation}`")))?,
            };
            let evidence: EvidenceVector = match ctx.cfg.optional_input(&c.paths.evidence, "evidence")? {
                Some(p) => read_json(&p, "evidence")?,
                None => {
                    let fleet = load_fleet(&ctx.cfg.input(&c.paths.fleet, "fleet")?)?;
                    let reg = registry(ctx, &params, &catalog, update.as_ref())?;
                    let id = c.device.as_ref().ok_or_else(|| CliError::input("config is missing `device` or `paths.evidence`"))?;
                    let dut = fleet
                        .device(id)
                        .ok_or_else(|| CliError::input(format!("device {id} is not in the fleet")))?;
                    let relevant: BTreeSet<String> = model
                        .templates
                        .bn
                        .get(&observation)
                        .map(|t| t.features.iter().cloned().collect())
                        .unwrap_or_default();
                    extract_evidence(
                        Subject::Device {
                            record: dut,
                            records: &fleet.records,
                        },
                        &reg,
                        &relevant,
                    )
                    .at("detect")?
                }
            };
            backward_trust_mln(&observation, &evidence, &kb, &model, &MapOptions::default()).at("infer")?
        }
    };
    stage_report(&mut out, &report);
    let dir = out.commit("infer", &ctx.cfg)?;
    Ok(format!("{}written: {}\n", report.summary(), dir.display()))
}

pub fn extend(ctx: &Ctx) -> CliResult<String> {
    let update = ctx.cfg.update()?.ok_or_else(|| CliError::input("config is missing paths.update"))?;
    let mut params = ProcessParams::default();
    let mut catalog = Catalog::standard();
    let base = match ctx.cfg.optional_input(&ctx.cfg.config.paths.model, "model")? {
        Some(p) => read_json(&p, "threat model")?,
        None => ThreatModel::standard(&catalog),
    };
    let model = forward_trust_extend(&base, &update).at("extend")?;
    update.apply_to_catalog(&mut params, &mut catalog);
    model.validate(&catalog).at("extend")?;
    let mut reg = match ctx.cfg.optional_input(&ctx.cfg.config.paths.registry, "registry")? {
        Some(p) => read_json(&p, "detector registry")?,
        None => DetectorRegistry::standard(&params, &catalog),
    };
    update.apply_to_registry(&mut reg).at("extend")?;
    let before: BTreeSet<&String> = base.features.keys().collect();
    let added: Vec<&String> = model.features.keys().filter(|f| !before.contains(f)).collect();
    let mut out = ctx.outputs();
    out.add("model.json", model.to_json() + "\n");
    out.add_json("registry.json", &reg);
    let dir = out.commit("extend", &ctx.cfg)?;
    let names: Vec<&str> = added.iter().map(|s| s.as_str()).collect();
    Ok(format!(
        "cause: {}\nnew features: {}\nwritten: {}\n",
        update.cause,
        if names.is_empty() { "none".to_string() } else { names.join(", ") },
        dir.display()
    ))
}

pub fn run_scenario(ctx: &Ctx, scenario: Option<u8>) -> CliResult<String> {
    let c = &ctx.cfg.config;
    let which = scenario
        .or(c.scenario)
        .ok_or_else(|| CliError::usage("no scenario given: pass --scenario 1|2"))?;
    let outcome = match which {
        1 => {
            let mut s = c.scenario1.clone().unwrap_or_else(Scenario1Config::default);
            s.seed = ctx.cfg.seed;
            if let Some(u) = ctx.cfg.update()? {
                s.update = Some(u);
            }
            run_scenario1(&s).at("run-scenario 1")?
        }
        2 => {
            let mut s = c.scenario2.clone().unwrap_or_else(Scenario2Config::default);
            s.seed = ctx.cfg.seed;
            run_scenario2(&s).at("run-scenario 2")?
        }
        n => return Err(CliError::usage(format!("unknown scenario {n}; expected 1 or 2"))),
    };
    let mut out = ctx.outputs();
    stage_report(&mut out, &outcome.report);
    if let (Some(hmm), Some(seq)) = (&outcome.hmm, &outcome.sequence) {
        out.add_json("hmm.json", hmm);
        out.add_json(
            "sequence.json",
            &SequenceFile {
                symbols: seq.symbols.iter().map(|&k| hmm.symbols[k].clone()).collect(),
                stages: seq.stage_labels.clone().unwrap_or_default(),
            },
        );
    }
    let dir = out.commit("run-scenario", &ctx.cfg)?;
    Ok(format!(
        "{}ground truth: {}{}\nwritten: {}\n",
        outcome.report.summary(),
        outcome.truth,
        outcome.origin.map(|o| format!(" at {o}")).unwrap_or_default(),
        dir.display()
    ))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report(ctx: &Ctx) -> CliResult<String> {
    let r: RootCauseReport = read_json(&ctx.cfg.input(&ctx.cfg.config.paths.report, "report")?, "report")?;
    let mut csv = String::from("rank,cause,posterior,stage,actors,in_map_world\n");
    for (i, c) in r.ranked_causes.iter().enumerate() {
        let actors: Vec<&str> = c.actors.iter().map(|a| a.as_str()).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            i + 1,
            csv_field(&c.cause),
            c.posterior,
            c.stage,
            csv_field(&actors.join(";")),
            c.in_map_world.map(|b| b.to_string()).unwrap_or_default()
        );
    }
    let mut out = ctx.outputs();
    out.add("report.txt", r.summary());
    out.add("report.csv", csv);
    let dir = out.commit("report", &ctx.cfg)?;
    Ok(format!("{}written: {}\n", r.summary(), dir.display()))
}
