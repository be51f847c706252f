use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use siltwin_core::mln::KnowledgeBase;
use siltwin_core::sim::Catalog;
use siltwin_core::trust::{camel, ThreatModel};
use siltwin_core::{EvidenceVector, RootCauseReport};
use tempfile::TempDir;

fn siltwin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siltwin"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = siltwin(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn first_infected(fleet: &Path) -> String {
    for line in fs::read_to_string(fleet).unwrap().lines() {
        let d: Value = serde_json::from_str(line).unwrap();
        if d["ground_truth"]["attack"] != "none" {
            return d["device_id"].as_str().unwrap().to_string();
        }
    }
    panic!("no infected device");
}

/// simulate → inject → detect for a small fleet with history.
fn pipeline(dir: &Path) {
    write(dir, "sim.json", &json!({"seed": 7, "fleet": {"size": 150}}));
    write(dir, "hsim.json", &json!({"seed": 8, "fleet": {"size": 250, "id_prefix": "H"}}));
    write(
        dir,
        "inj.json",
        &json!({"seed": 9, "paths": {"fleet": "sim/fleet.jsonl"},
                "injections": [{"attack": "recycled", "count": 4, "magnitude": 4.0}]}),
    );
    write(
        dir,
        "hinj.json",
        &json!({"seed": 10, "paths": {"fleet": "hsim/fleet.jsonl"},
                "injections": [{"attack": "recycled", "count": 25, "magnitude": 4.0},
                               {"attack": "parametric-trojan", "count": 25, "magnitude": 4.0},
                               {"attack": "defective-shipped", "count": 15, "magnitude": 4.0}]}),
    );
    write(dir, "det.json", &json!({"seed": 1, "paths": {"fleet": "inj/fleet.jsonl"}}));
    ok(dir, &["simulate", "--config", "sim.json", "--out", "sim"]);
    ok(dir, &["simulate", "--config", "hsim.json", "--out", "hsim"]);
    ok(dir, &["inject", "--config", "inj.json", "--out", "inj"]);
    ok(dir, &["inject", "--config", "hinj.json", "--out", "hinj"]);
    ok(dir, &["detect", "--config", "det.json", "--out", "det"]);
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        if sub.is_dir() {
            for f in fs::read_dir(&sub).unwrap() {
                let f = f.unwrap().path();
                let key = format!("{}/{}", sub.file_name().unwrap().to_string_lossy(), f.file_name().unwrap().to_string_lossy());
                out.insert(key, fs::read(&f).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.contains_key("det/evidence.jsonl"));
    assert_eq!(ta, tb);
}

#[test]
fn seed_flag_overrides_config_and_changes_output() {
    let d = TempDir::new().unwrap();
    write(d.path(), "sim.json", &json!({"seed": 7, "fleet": {"size": 30}}));
    ok(d.path(), &["simulate", "--config", "sim.json", "--out", "a"]);
    ok(d.path(), &["simulate", "--config", "sim.json", "--seed", "8", "--out", "b"]);
    let a = fs::read(d.path().join("a/fleet.jsonl")).unwrap();
    let b = fs::read(d.path().join("b/fleet.jsonl")).unwrap();
    assert_ne!(a, b);
    let m: Value = read_json(&d.path().join("b/manifest.json"));
    assert_eq!(m["seed"], 8);
}

#[test]
fn manifest_hashes_match_outputs() {
    let d = TempDir::new().unwrap();
    write(d.path(), "sim.json", &json!({"seed": 3, "fleet": {"size": 20}}));
    let stdout = ok(d.path(), &["simulate", "--config", "sim.json", "--out", "o"]);
    let m: Value = read_json(&d.path().join("o/manifest.json"));
    let outputs = m["outputs"].as_object().unwrap();
    assert_eq!(outputs.len(), 2);
    for (name, sum) in outputs {
        let bytes = fs::read(d.path().join("o").join(name)).unwrap();
        use sha2::Digest;
        let hex: String = sha2::Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(sum.as_str().unwrap(), hex, "{name}");
    }
    assert!(stdout.contains(&format!("sha256:{}", outputs["fleet.jsonl"].as_str().unwrap())));
    assert!(stdout.contains("devices: 20"));
}

#[test]
fn exit_codes() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    assert_eq!(code(&siltwin(p, &["--help"])), 0);
    assert_eq!(code(&siltwin(p, &["--version"])), 0);
    assert_eq!(code(&siltwin(p, &["no-such-command"])), 1);
    assert_eq!(code(&siltwin(p, &["simulate", "--bogus"])), 1);
    assert_eq!(code(&siltwin(p, &["infer", "--seed", "1", "--engine", "svm"])), 1);
    assert_eq!(code(&siltwin(p, &["run-scenario", "--seed", "1", "--scenario", "9"])), 1);
    assert_eq!(code(&siltwin(p, &["simulate", "--config", "missing.json", "--seed", "1"])), 2);

    fs::write(p.join("bad.json"), "{ not json").unwrap();
    assert_eq!(code(&siltwin(p, &["simulate", "--config", "bad.json", "--seed", "1"])), 2);
    write(p, "unknown.json", &json!({"seed": 1, "fleet": {"size": 3}, "colour": "red"}));
    assert_eq!(code(&siltwin(p, &["simulate", "--config", "unknown.json"])), 2);

    write(p, "noseed.json", &json!({"fleet": {"size": 3}}));
    let o = siltwin(p, &["simulate", "--config", "noseed.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    write(p, "zero.json", &json!({"seed": 1, "fleet": {"size": 0}}));
    let o = siltwin(p, &["simulate", "--config", "zero.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate"));
}

#[test]
fn existing_outputs_need_force() {
    let d = TempDir::new().unwrap();
    write(d.path(), "sim.json", &json!({"seed": 1, "fleet": {"size": 5}}));
    ok(d.path(), &["simulate", "--config", "sim.json", "--out", "o"]);
    assert_eq!(code(&siltwin(d.path(), &["simulate", "--config", "sim.json", "--out", "o"])), 2);
    ok(d.path(), &["simulate", "--config", "sim.json", "--out", "o", "--force"]);
}

#[test]
fn infer_bn_then_report() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    pipeline(p);
    let dut = first_infected(&p.join("inj/fleet.jsonl"));
    write(
        p,
        "inf.json",
        &json!({"seed": 2, "observation": "accelerated-failure", "device": dut,
                "paths": {"fleet": "inj/fleet.jsonl", "history": ["hinj/fleet.jsonl"]}}),
    );
    ok(p, &["infer", "--config", "inf.json", "--engine", "bn", "--out", "inf"]);
    let r: RootCauseReport = read_json(&p.join("inf/report.json"));
    assert_eq!(r.subject, dut);
    assert_eq!(r.ranked_causes.len(), 3);
    assert!(r.ranked_causes.windows(2).all(|w| w[0].posterior >= w[1].posterior));
    assert!(p.join("inf/network.json").exists());

    write(p, "rep.json", &json!({"seed": 2, "paths": {"report": "inf/report.json"}}));
    ok(p, &["report", "--config", "rep.json", "--out", "rep"]);
    let csv = fs::read_to_string(p.join("rep/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with(&format!("1,{},", r.ranked_causes[0].cause)));
}

#[test]
fn unknown_observation_is_an_input_error() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    write(
        p,
        "ev.json",
        &json!({"subject": "X", "items": []}),
    );
    write(p, "inf.json", &json!({"seed": 1, "observation": "spontaneous-combustion", "paths": {"evidence": "ev.json"}}));
    let o = siltwin(p, &["infer", "--config", "inf.json", "--engine", "mln"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn extend_then_infer_uses_the_new_feature() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    pipeline(p);
    write(
        p,
        "update.json",
        &json!({"cause": "parametric-trojan",
                "features": [{"name": "metal_rerouting", "stage": "routing", "units": "fF",
                              "nominal": {"mean": 1.5, "sd": 0.03}, "shift": 1.0, "anomaly_rate": 0.05}],
                "links": {"metal_rerouting": 0.8}}),
    );
    write(p, "ext.json", &json!({"seed": 1, "paths": {"update": "update.json"}}));
    let stdout = ok(p, &["extend", "--config", "ext.json", "--out", "ext"]);
    assert!(stdout.contains("metal_rerouting"));
    let model: ThreatModel = read_json(&p.join("ext/model.json"));
    assert!(model.features.contains_key("metal_rerouting"));

    let dut = first_infected(&p.join("inj/fleet.jsonl"));
    let paths = json!({"fleet": "inj/fleet.jsonl", "history": ["hinj/fleet.jsonl"],
                       "model": "ext/model.json", "registry": "ext/registry.json"});
    write(p, "bad.json", &json!({"seed": 2, "observation": "accelerated-failure", "device": dut, "paths": paths}));
    let o = siltwin(p, &["infer", "--config", "bad.json", "--out", "bad"]);
    assert_eq!(code(&o), 4, "model without its update is inconsistent");

    let mut paths = paths;
    paths["update"] = json!("update.json");
    write(p, "inf.json", &json!({"seed": 2, "observation": "accelerated-failure", "device": dut, "paths": paths}));
    ok(p, &["infer", "--config", "inf.json", "--out", "inf"]);
    let r: RootCauseReport = read_json(&p.join("inf/report.json"));
    assert!(r.feature_posteriors.iter().any(|f| f.feature == "metal_rerouting"));
    let net = fs::read_to_string(p.join("inf/network.json")).unwrap();
    assert!(net.contains("metal_rerouting"));
}

/// Cause marginals by summing exp(score) over every world that agrees with
/// the evidence.
fn enumerate_marginals(kb: &KnowledgeBase, evidence: &EvidenceVector, observation: &str) -> BTreeMap<String, f64> {
    let mrf = kb.ground().unwrap();
    let device = kb.sorts["Device"][0].clone();
    let n = mrf.n_atoms();
    let mut fixed: Vec<Option<bool>> = vec![None; n];
    for item in &evidence.items {
        let i = mrf.atom_by_name(&format!("Anomalous({device},{})", camel(&item.feature))).unwrap();
        fixed[i] = Some(fixed[i].unwrap_or(false) | item.anomalous);
    }
    fixed[mrf.atom_by_name(&format!("{}({device})", camel(observation))).unwrap()] = Some(true);
    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    assert!(free.len() <= 20);
    let mut z = 0.0;
    let mut mass = vec![0.0; n];
    for bits in 0u32..(1 << free.len()) {
        let mut w: Vec<bool> = fixed.iter().map(|f| f.unwrap_or(false)).collect();
        for (k, &i) in free.iter().enumerate() {
            w[i] = bits >> k & 1 == 1;
        }
        if !mrf.satisfies_hard(&w) {
            continue;
        }
        let p = mrf.soft_score(&w).exp();
        z += p;
        for i in 0..n {
            if w[i] {
                mass[i] += p;
            }
        }
    }
    mrf.ground_atoms
        .iter()
        .enumerate()
        .map(|(i, a)| (format!("{}({})", a.predicate, a.args.join(",")), mass[i] / z))
        .collect()
}

#[test]
fn mln_engine_matches_enumeration() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    pipeline(p);
    let dut = first_infected(&p.join("inj/fleet.jsonl"));
    write(
        p,
        "inf.json",
        &json!({"seed": 2, "observation": "accelerated-failure", "device": dut, "paths": {"fleet": "inj/fleet.jsonl"}}),
    );
    ok(p, &["infer", "--config", "inf.json", "--engine", "mln", "--out", "mln"]);
    let r: RootCauseReport = read_json(&p.join("mln/report.json"));
    let model = ThreatModel::standard(&Catalog::standard());
    let kb = &model.templates.mln["accelerated-failure"];
    let oracle = enumerate_marginals(kb, &r.evidence, "accelerated-failure");
    let device = &kb.sorts["Device"][0];
    assert_eq!(r.ranked_causes.len(), 3);
    for c in &r.ranked_causes {
        let want = oracle[&format!("{}({device})", camel(&c.cause))];
        assert!((c.posterior - want).abs() < 1e-9, "{}: {} vs {want}", c.cause, c.posterior);
    }
}

#[test]
fn impossible_hmm_sequence_is_a_runtime_error() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    write(
        p,
        "hmm.json",
        &json!({"states": ["x/trojan-free", "x/trojan-infested"], "symbols": ["passed", "key-leak"],
                "A": [[0.9, 0.1], [0.0, 1.0]], "B": [[1.0, 0.0], [1.0, 0.0]], "pi": [1.0, 0.0]}),
    );
    write(p, "seq.json", &json!({"symbols": ["passed", "key-leak"], "stages": ["spec", "in-field"]}));
    write(
        p,
        "inf.json",
        &json!({"seed": 1, "observation": "key-leak", "paths": {"hmm": "hmm.json", "sequence": "seq.json"}}),
    );
    let o = siltwin(p, &["infer", "--config", "inf.json", "--engine", "hmm"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    write(p, "seq.json", &json!({"symbols": ["passed", "shrug"], "stages": ["spec", "in-field"]}));
    assert_eq!(code(&siltwin(p, &["infer", "--config", "inf.json", "--engine", "hmm", "--force"])), 2);
}

#[test]
fn hmm_engine_on_a_hand_built_model() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    write(
        p,
        "hmm.json",
        &json!({"states": ["spec/trojan-free", "spec/trojan-infested",
                           "logic-design/trojan-free", "logic-design/trojan-infested",
                           "in-field/trojan-free", "in-field/trojan-infested"],
                "symbols": ["passed", "key-leak"],
                "A": [[0.0, 0.0, 0.9, 0.1, 0.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                      [0.0, 0.0, 0.0, 0.0, 0.9, 0.1],
                      [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                      [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]],
                "B": [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.2, 0.8]],
                "pi": [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]}),
    );
    write(
        p,
        "seq.json",
        &json!({"symbols": ["passed", "passed", "key-leak"], "stages": ["spec", "logic-design", "in-field"]}),
    );
    write(
        p,
        "inf.json",
        &json!({"seed": 1, "observation": "key-leak", "device": "chip",
                "paths": {"hmm": "hmm.json", "sequence": "seq.json"}}),
    );
    ok(p, &["infer", "--config", "inf.json", "--engine", "hmm", "--out", "o"]);
    let r: RootCauseReport = read_json(&p.join("o/report.json"));
    assert_eq!(r.subject, "chip");
    let st = r.implicated_stage.expect("compromise found");
    assert_eq!(st.stage.as_str(), "logic-design");
}

#[test]
fn run_scenario_one_writes_a_report() {
    let d = TempDir::new().unwrap();
    let stdout = ok(d.path(), &["run-scenario", "--scenario", "1", "--seed", "5", "--out", "s1"]);
    assert!(stdout.contains("ground truth"));
    let r: RootCauseReport = read_json(&d.path().join("s1/report.json"));
    assert_eq!(r.observation, "accelerated-failure");
    let m: Value = read_json(&d.path().join("s1/manifest.json"));
    assert_eq!(m["command"], "run-scenario");
}
