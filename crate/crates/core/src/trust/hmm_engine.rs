use super::{candidate_causes, rank, ranked, Engine, Result, RootCauseReport, StageAttribution, ThreatModel, TrustError, REPORT_SCHEMA_VERSION};
use crate::anomaly::EvidenceVector;
use crate::hmm::{attribute_compromise, ConstraintMask, HmmError, HmmModel, ObservationSeq};
use crate::sim::StageId;

/// P(first compromised step = t) for each t, from the smoothed posteriors.
fn first_compromise(model: &HmmModel, seq: &ObservationSeq, clean: &[usize]) -> Result<Vec<f64>> {
    let post = model.posteriors(seq)?;
    let n = model.n_states();
    let dirty: Vec<usize> = (0..n).filter(|s| !clean.contains(s)).collect();
    let mut out = Vec::with_capacity(seq.len());
    out.push(dirty.iter().map(|&d| post.gamma[0][d]).sum());
    for xi in &post.xi {
        out.push(clean.iter().flat_map(|&c| dirty.iter().map(move |&d| xi[c][d])).sum());
    }
    Ok(out)
}

/// Decodes a stage-labelled test sequence and attributes the compromise to
/// the stage where the path first leaves the clean states. Candidate causes
/// originating at a stage share that stage's posterior.
pub fn backward_trust_hmm(
    observation: &str,
    subject: &str,
    seq: &ObservationSeq,
    hmm: &HmmModel,
    mask: &ConstraintMask,
    model: &ThreatModel,
) -> Result<RootCauseReport> {
    let causes = candidate_causes(observation, model)?;
    mask.validate(hmm.n_states(), hmm.n_symbols())?;
    if !mask.respected_by(hmm) {
        return Err(HmmError::MaskViolated("model has mass on a masked entry".into()).into());
    }
    let labels = seq.stage_labels.as_ref().ok_or(HmmError::MissingStageLabels)?;
    let clean = model.templates.hmm.clean_indices(&hmm.states);
    if clean.is_empty() {
        return Err(TrustError::InvalidModel("no clean state of the template is in the HMM".into()));
    }
    let path = hmm.decode(seq)?;
    let first = first_compromise(hmm, seq, &clean)?;
    let stages: Vec<Option<StageId>> = labels.iter().map(|l| l.parse().ok()).collect();
    let stage_mass = |s: StageId| -> f64 {
        stages
            .iter()
            .zip(&first)
            .filter(|(st, _)| **st == Some(s))
            .map(|(_, p)| p)
            .sum()
    };
    let evidence = EvidenceVector {
        subject: subject.into(),
        items: vec![],
    };
    let mut report = RootCauseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        observation: observation.into(),
        subject: subject.into(),
        engine: Engine::Hmm,
        ranked_causes: vec![],
        exclusive: true,
        implicated_stage: None,
        implicated_actor: None,
        evidence,
        feature_posteriors: vec![],
        confidence_note: String::new(),
    };
    let Some((t, label)) = attribute_compromise(&path, seq, &clean)? else {
        report.confidence_note = "no compromise detected: decoded path never leaves the clean states".into();
        return Ok(report);
    };
    let stage = stages[t];
    let mut out = Vec::with_capacity(causes.len());
    for c in &causes {
        let sharing = causes.iter().filter(|o| o.stage == c.stage).count() as f64;
        out.push(ranked(c, stage_mass(c.stage) / sharing));
    }
    rank(&mut out);
    report.implicated_actor = out
        .iter()
        .find(|c| Some(c.stage) == stage)
        .and_then(|c| c.actors.first().copied());
    report.ranked_causes = out;
    report.implicated_stage = stage.map(|s| StageAttribution {
        stage: s,
        posterior: stage_mass(s),
    });
    report.confidence_note = format!(
        "first compromised step {t} ({label}); causes sharing an origin stage are not separated by the decoder"
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Catalog;

    fn fig8_model() -> (HmmModel, ConstraintMask) {
        let m = HmmModel::new(
            vec!["trojan-free".into(), "trojan-infested".into()],
            vec!["passed".into(), "failed".into(), "anomalous".into(), "not-run".into()],
            vec![vec![0.9, 0.1], vec![0.0, 1.0]],
            vec![vec![0.95, 0.04, 0.0, 0.01], vec![0.7, 0.05, 0.24, 0.01]],
            vec![1.0, 0.0],
        )
        .unwrap();
        (m, ConstraintMask::none().zero_transition(1, 0).zero_emission(0, 2).zero_initial(1))
    }

    fn seq(m: &HmmModel, syms: &[&str]) -> ObservationSeq {
        let stages = ["spec", "logic-design", "functional-verification", "synthesis", "formal-check", "signoff", "package-test", "in-field"];
        let mut s = ObservationSeq::from_labels(m, syms).unwrap();
        s.stage_labels = Some(stages[..syms.len()].iter().map(|x| x.to_string()).collect());
        s
    }

    #[test]
    fn all_pass_sequence_reports_no_compromise() {
        let (m, mask) = fig8_model();
        let tm = ThreatModel::standard(&Catalog::standard());
        let s = seq(&m, &["passed"; 8]);
        let r = backward_trust_hmm("key-leak", "D", &s, &m, &mask, &tm).unwrap();
        assert!(r.ranked_causes.is_empty() && r.implicated_stage.is_none());
        assert!(r.confidence_note.starts_with("no compromise"));
    }

    #[test]
    fn stage_posteriors_sum_to_at_most_one() {
        let (m, mask) = fig8_model();
        let tm = ThreatModel::standard(&Catalog::standard());
        let s = seq(&m, &["passed", "passed", "passed", "passed", "passed", "passed", "passed", "anomalous"]);
        let first = first_compromise(&m, &s, &[0]).unwrap();
        assert!((first.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let r = backward_trust_hmm("key-leak", "D", &s, &m, &mask, &tm).unwrap();
        let total: f64 = r.ranked_causes.iter().map(|c| c.posterior).sum();
        assert!(total <= 1.0 + 1e-9);
    }

    #[test]
    fn leak_at_first_step_implicates_first_stage() {
        let (mut m, _) = fig8_model();
        m.initial = vec![0.5, 0.5];
        let mask = ConstraintMask::none().zero_transition(1, 0).zero_emission(0, 2);
        let tm = ThreatModel::standard(&Catalog::standard());
        let s = seq(&m, &["anomalous", "passed", "passed"]);
        let r = backward_trust_hmm("key-leak", "D", &s, &m, &mask, &tm).unwrap();
        let st = r.implicated_stage.unwrap();
        assert_eq!(st.stage, StageId::Spec);
        assert!((st.posterior - 1.0).abs() < 1e-12);
    }

    #[test]
    fn staged_template_decodes_the_fig8b_pattern() {
        let tm = ThreatModel::standard(&Catalog::standard());
        let t = &tm.templates.hmm;
        let mask = ConstraintMask::from(&t.mask);
        let n = t.states.len();
        let leak = t.symbols.iter().position(|s| s == "key-leak").unwrap();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![vec![0.0; t.symbols.len()]; n];
        for k in 0..t.stages.len() {
            let (f, i) = (2 * k, 2 * k + 1);
            if k + 1 == t.stages.len() {
                a[f][f] = 1.0;
                a[i][i] = 1.0;
            } else {
                let p = if t.stages[k + 1] == StageId::LogicDesign { 0.8 } else { 0.0 };
                a[f][f + 2] = 1.0 - p;
                a[f][f + 3] = p;
                a[i][i + 2] = 1.0;
            }
            if t.stages[k] == StageId::InField {
                b[f][0] = 1.0;
                b[i][leak] = 1.0;
            } else {
                b[f][0] = 1.0;
                b[i][0] = 0.8;
                b[i][2] = 0.2;
            }
        }
        let mut pi = vec![0.0; n];
        pi[0] = 1.0;
        let m = HmmModel::new(t.states.clone(), t.symbols.clone(), a, b, pi).unwrap();
        assert!(mask.respected_by(&m));
        let mut syms = vec!["passed"; t.stages.len()];
        *syms.last_mut().unwrap() = "key-leak";
        let labels: Vec<String> = t.stages.iter().map(|s| s.to_string()).collect();
        let mut s = ObservationSeq::from_labels(&m, &syms).unwrap();
        s.stage_labels = Some(labels);
        let r = backward_trust_hmm("key-leak", "D", &s, &m, &mask, &tm).unwrap();
        assert_eq!(r.implicated_stage.as_ref().unwrap().stage, StageId::LogicDesign);
        assert_eq!(r.ranked_causes.len(), 2);
        assert_eq!(r.top_cause(), Some("info-leak-trojan"));
    }

    #[test]
    fn masked_entry_with_mass_is_rejected() {
        let (mut m, mask) = fig8_model();
        m.transition[1] = vec![0.1, 0.9];
        let tm = ThreatModel::standard(&Catalog::standard());
        let s = seq(&m, &["passed", "anomalous"]);
        assert!(matches!(
            backward_trust_hmm("key-leak", "D", &s, &m, &mask, &tm),
            Err(TrustError::Hmm(HmmError::MaskViolated(_)))
        ));
    }
}
