//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lfd_core::agreement::{cohen_kappa, eta_bound, expected_kappa, simulate_annotators, NoiseModelParams};
use lfd_core::corpus::{make_splits, LabeledDataset, Partition, SplitAssignment, DEFAULT_FRACTIONS};
use lfd_core::evalkit::{audit_concept_set, disentanglement_report, is_near_paraphrase, render_report, ReportFormat, RunReport};
use lfd_core::features::{
    apply_lexical, codebook_json, AdmittedKappa, FeatureMatrix, FeatureRule, NamedFeature, Provenance,
};
use lfd_core::fixtures::{
    fixture_roles, generate_planted_corpus, paraphrase_first_script, scripted_gateway_fixture, two_cue_script,
    two_cue_spec, CueSampling, LabelRule, PlantedCue, PARAPHRASE_ALT_REGEX, PARAPHRASE_REGEX,
};
use lfd_core::gateway::Gateway;
use lfd_core::head::{fit_and_score, HeadSpec};
use lfd_core::rng;
use lfd_core::selection::{apply_basis, prune, run_discovery, DiscoveryContext, RunConfig, RunState, Verdict};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Kappa of two raters from their 2x2 joint distribution, computed cell by
/// cell with no shortcuts.
fn oracle_kappa(eta: f64, pi: f64) -> f64 {
    let mut joint = [[0.0f64; 2]; 2];
    for (z, pz) in [(0usize, 1.0 - pi), (1, pi)] {
        for (a, row) in joint.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                let pa = if a == z { 1.0 - eta } else { eta };
                let pb = if b == z { 1.0 - eta } else { eta };
                *cell += pz * pa * pb;
            }
        }
    }
    let p_o = joint[0][0] + joint[1][1];
    let qa = joint[1][0] + joint[1][1];
    let qb = joint[0][1] + joint[1][1];
    let p_e = qa * qb + (1.0 - qa) * (1.0 - qb);
    (p_o - p_e) / (1.0 - p_e)
}

fn noise_bound_constants() -> Outcome {
    let r = eta_bound(0.70).map_err(|e| e.to_string())?;
    check((r.eta_bar - 0.081670).abs() <= 1e-6, format!("eta_bar = {:.7}", r.eta_bar))?;
    check((r.inflation - 1.195229).abs() <= 1e-6, format!("inflation = {:.7}", r.inflation))?;
    check((r.inflation * 100.0).round() / 100.0 == 1.20, "inflation does not round to 1.20")?;
    let oracle_eta = (1.0 - 0.7f64.sqrt()) / 2.0;
    check((1.0 / (1.0 - 2.0 * oracle_eta) - r.inflation).abs() < 1e-12, "inflation != 1/(1-2 eta_bar)")?;
    Ok(format!("eta_bar = {:.6}, inflation = {:.6}", r.eta_bar, r.inflation))
}

fn noise_model_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cell = 0u64;
    for eta in [0.0, 0.05, 0.1, 0.2] {
        for pi in [0.2, 0.35, 0.5] {
            let closed = expected_kappa(eta, pi).map_err(|e| e.to_string())?;
            let oracle = oracle_kappa(eta, pi);
            check((closed - oracle).abs() < 1e-12, format!("closed form {closed} vs joint table {oracle} at eta={eta}, pi={pi}"))?;
            let sim = simulate_annotators(&NoiseModelParams {
                eta,
                pi,
                zeta: 0.0,
                n: 20_000,
                seed: rng::derive_seed(2024, "acceptance-grid", cell),
            })
            .map_err(|e| e.to_string())?;
            cell += 1;
            let k = cohen_kappa(&sim.rater_a, &sim.rater_b)
                .map_err(|e| e.to_string())?
                .kappa
                .ok_or("degenerate simulated cell")?;
            check((k - oracle).abs() <= 0.02, format!("eta={eta}, pi={pi}: empirical {k:.4} vs {oracle:.4}"))?;
            check(k <= (1.0 - 2.0 * eta).powi(2) + 0.02, format!("eta={eta}, pi={pi}: {k:.4} above cap"))?;
            worst = worst.max((k - oracle).abs());
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(60), format!("took {took:?}"))?;
    Ok(format!("12 cells, max |empirical - closed form| = {worst:.4}, {took:.2?}"))
}

fn shared_bias_direction() -> Outcome {
    let start = Instant::now();
    let mut kappas = Vec::new();
    for (i, zeta) in [0.0, 0.025, 0.05, 0.075, 0.1].into_iter().enumerate() {
        let sim = simulate_annotators(&NoiseModelParams {
            eta: 0.1,
            pi: 0.5,
            zeta,
            n: 20_000,
            seed: rng::derive_seed(7, "acceptance-zeta", i as u64),
        })
        .map_err(|e| e.to_string())?;
        kappas.push(cohen_kappa(&sim.rater_a, &sim.rater_b).map_err(|e| e.to_string())?.kappa_or_zero());
    }
    check(kappas.windows(2).all(|w| w[1] > w[0]), format!("not increasing: {kappas:?}"))?;
    check(start.elapsed() < Duration::from_secs(60), "too slow")?;
    let shown: Vec<String> = kappas.iter().map(|k| format!("{k:.3}")).collect();
    Ok(format!("kappa over zeta 0..0.1: {}", shown.join(" < ")))
}

fn kappa_exactness() -> Outcome {
    let r = cohen_kappa(&[1, 1, 0, 0], &[1, 0, 0, 0]).map_err(|e| e.to_string())?;
    check(r.kappa == Some(0.5), format!("hand example gave {:?}", r.kappa))?;
    let mut g = rng::seeded(99);
    for i in 0..1000 {
        let n = g.gen_range(2..60);
        let a: Vec<u8> = (0..n).map(|_| g.gen_range(0..2)).collect();
        let b: Vec<u8> = (0..n).map(|_| g.gen_range(0..2)).collect();
        let ab = cohen_kappa(&a, &b).map_err(|e| e.to_string())?;
        let ba = cohen_kappa(&b, &a).map_err(|e| e.to_string())?;
        check(ab.kappa == ba.kappa, format!("pair {i}: asymmetric {:?} vs {:?}", ab.kappa, ba.kappa))?;
        let na: Vec<u8> = a.iter().map(|v| 1 - v).collect();
        let nb: Vec<u8> = b.iter().map(|v| 1 - v).collect();
        let swapped = cohen_kappa(&na, &nb).map_err(|e| e.to_string())?;
        match (ab.kappa, swapped.kappa) {
            (Some(x), Some(y)) => check((x - y).abs() < 1e-12, format!("pair {i}: swap {x} vs {y}"))?,
            (None, None) => {}
            other => return Err(format!("pair {i}: degeneracy differs {other:?}")),
        }
    }
    Ok("[1,1,0,0] vs [1,0,0,0] = 0.5; symmetry and label swap hold on 1000 random pairs".into())
}

struct Fixture {
    dataset: LabeledDataset,
    splits: SplitAssignment,
}

fn two_cue_fixture() -> Fixture {
    let (dataset, _) = generate_planted_corpus(&two_cue_spec(500, 11)).expect("fixture");
    let splits = make_splits(&dataset, DEFAULT_FRACTIONS, 11).expect("splits");
    Fixture { dataset, splits }
}

fn discover(fx: &Fixture, gw: &Gateway, cfg: &RunConfig, cache: &std::path::Path) -> Result<RunState, String> {
    let ctx = DiscoveryContext::new(gw, fixture_roles(), &fx.dataset, &fx.splits, cfg, cache).map_err(|e| e.to_string())?;
    run_discovery(&ctx, cfg, None, |_| Ok(())).map_err(|e| e.to_string())
}

fn regex_of(rule: &FeatureRule) -> &str {
    match rule {
        FeatureRule::Regex { regex, .. } => regex,
        FeatureRule::Steps { .. } => "",
    }
}

fn verdicts_for(state: &RunState, regex: &str) -> Vec<Verdict> {
    state
        .history
        .iter()
        .filter(|r| regex_of(&r.feature.rule) == regex)
        .map(|r| r.verdict)
        .collect()
}

fn lexical_determinism() -> Outcome {
    let fx = two_cue_fixture();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (gw, _) = scripted_gateway_fixture(two_cue_script(), dir.path());
    let state = discover(&fx, &gw, &RunConfig::default(), dir.path())?;
    let lexical: Vec<NamedFeature> = state
        .history
        .iter()
        .filter(|r| !regex_of(&r.feature.rule).is_empty())
        .enumerate()
        .map(|(i, r)| {
            let provenance = Provenance {
                round: r.round,
                phase: r.phase.as_str().into(),
                template_version: r.template_version.clone(),
            };
            NamedFeature::from_candidate(format!("g{i}"), &r.feature, provenance, AdmittedKappa::EXACT, None)
        })
        .collect();
    check(!lexical.is_empty(), "no lexical features generated")?;
    for f in &lexical {
        let first = apply_lexical(f, &fx.dataset.documents).map_err(|e| e.to_string())?;
        let second = apply_lexical(f, &fx.dataset.documents).map_err(|e| e.to_string())?;
        check(first == second, format!("{} differs between applications", f.name))?;
        let k = cohen_kappa(&first, &second).map_err(|e| e.to_string())?;
        check(k.kappa == Some(1.0), format!("{}: kappa {:?}", f.name, k.kappa))?;
    }
    let empty = tempfile::tempdir().map_err(|e| e.to_string())?;
    let offline = Gateway::replay(empty.path());
    let roles = fixture_roles();
    let audit = audit_concept_set(&lexical, &fx.dataset.documents, &offline, &roles.labeler, &roles.examiner, 0.7, 10)
        .map_err(|e| e.to_string())?;
    check(offline.stats.total() == 0, format!("audit issued {} requests", offline.stats.total()))?;
    check(audit.mean_kappa == Some(1.0), format!("audit mean kappa {:?}", audit.mean_kappa))?;
    Ok(format!(
        "{} lexical features on {} docs: kappa = 1; audit made 0 LLM calls",
        lexical.len(),
        fx.dataset.len()
    ))
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let fx = two_cue_fixture();
    let mut notes = Vec::new();
    for (tau, expected) in [(1.0, Verdict::FailGain), (0.6, Verdict::FailGate)] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (gw, _) = scripted_gateway_fixture(two_cue_script(), dir.path());
        let cfg = RunConfig {
            tau,
            ..RunConfig::default()
        };
        discover(&fx, &gw, &cfg, dir.path())?;
        // the graded run is served from the cache alone
        let replay = Gateway::replay(dir.path());
        let state = discover(&fx, &replay, &cfg, dir.path())?;
        check(replay.stats.network() == 0, "replay reached the network")?;
        let names: Vec<&str> = state.admitted.iter().map(|f| f.name.as_str()).collect();
        check(names == ["final score", "overtime winner"], format!("tau={tau}: admitted {names:?}"))?;
        let v = verdicts_for(&state, PARAPHRASE_REGEX);
        check(v == [expected], format!("tau={tau}: paraphrase verdicts {v:?}"))?;
        notes.push(format!("tau={tau}: paraphrase {expected:?}"));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (gw, _) = scripted_gateway_fixture(paraphrase_first_script(), dir.path());
    let state = discover(&fx, &gw, &RunConfig::default(), dir.path())?;
    check(verdicts_for(&state, PARAPHRASE_REGEX) == [Verdict::Admitted], "first paraphrase not admitted")?;
    let later = verdicts_for(&state, PARAPHRASE_ALT_REGEX);
    check(!later.is_empty() && later.iter().all(|v| *v == Verdict::FailGain), format!("restatement verdicts {later:?}"))?;
    let took = start.elapsed();
    check(took < Duration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!(
        "two cues admitted; {}; restatement after a label-equal admission FailGain; {took:.2?}",
        notes.join(", ")
    ))
}

fn full_report(fx: &Fixture, gw: &Gateway, cfg: &RunConfig, cache: &std::path::Path) -> Result<(String, String), String> {
    let ctx = DiscoveryContext::new(gw, fixture_roles(), &fx.dataset, &fx.splits, cfg, cache).map_err(|e| e.to_string())?;
    let state = run_discovery(&ctx, cfg, None, |_| Ok(())).map_err(|e| e.to_string())?;
    let state = prune(&state, &ctx.y_train, &ctx.y_val, cfg).map_err(|e| e.to_string())?;
    let test = fx.splits.dataset(&fx.dataset, Partition::Test);
    let m = apply_basis(&ctx, &state.admitted, &test.documents, cfg).map_err(|e| e.to_string())?;
    let y = test.labels();
    let ba = fit_and_score(&state.matrix_train, &ctx.y_train, &m, &y, &cfg.run_head()).map_err(|e| e.to_string())?;
    let d = disentanglement_report(&state.admitted, &m, &y, &fx.dataset.label_question, None).map_err(|e| e.to_string())?;
    let report = RunReport::from_state(&fx.dataset.name, &state, Some(ba), Some(d));
    Ok((codebook_json(&state.admitted), render_report(&report, ReportFormat::Json)))
}

fn determinism() -> Outcome {
    let fx = two_cue_fixture();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let (gw, _) = scripted_gateway_fixture(two_cue_script(), dir.path());
    full_report(&fx, &gw, &cfg, dir.path())?;
    let a = full_report(&fx, &Gateway::replay(dir.path()), &cfg, dir.path())?;
    let b = full_report(&fx, &Gateway::replay(dir.path()), &cfg, dir.path())?;
    check(a.0 == b.0, "codebook.json differs")?;
    check(a.1 == b.1, "report.json differs")?;
    Ok(format!("codebook {} bytes and report {} bytes identical across runs", a.0.len(), a.1.len()))
}

fn retrain_stability() -> Outcome {
    // three independent cues, label = any; the basis omits one of them
    let mut spec = two_cue_spec(1200, 5);
    spec.sampling = CueSampling::Independent;
    spec.cues[0].rate = 0.25;
    spec.cues[1].rate = 0.25;
    spec.cues.push(PlantedCue {
        name: "penalty shootout".into(),
        phrases: vec!["decided by a penalty shootout".into()],
        regex: "penalty shootout".into(),
        rate: 0.2,
    });
    spec.label_rule = LabelRule::AnyOf(vec![0, 1, 2]);
    let (ds, truth) = generate_planted_corpus(&spec).map_err(|e| e.to_string())?;
    let splits = make_splits(&ds, DEFAULT_FRACTIONS, 5).map_err(|e| e.to_string())?;
    let pick = |part: Partition| -> Result<(FeatureMatrix, Vec<u8>), String> {
        let ids = splits.ids(part);
        let rows: Vec<usize> = ids
            .iter()
            .map(|id| truth.row_ids.iter().position(|r| r == id).unwrap())
            .collect();
        let mut m = FeatureMatrix::empty(ids.to_vec());
        for k in 0..2 {
            m.push_column(truth.column_ids[k].clone(), rows.iter().map(|&r| truth.columns[k][r]).collect())
                .map_err(|e| e.to_string())?;
        }
        Ok((m, splits.dataset(&ds, part).labels()))
    };
    let (train, y_train) = pick(Partition::Train)?;
    let (test, y_test) = pick(Partition::Test)?;
    let mut bas = Vec::new();
    for seed in 0..5 {
        let spec = HeadSpec {
            seed: rng::derive_seed(seed, "head", 0),
            ..HeadSpec::default()
        };
        bas.push(fit_and_score(&train, &y_train, &test, &y_test, &spec).map_err(|e| e.to_string())?);
    }
    let spread = bas.iter().cloned().fold(f64::MIN, f64::max) - bas.iter().cloned().fold(f64::MAX, f64::min);
    check(spread < 0.005, format!("test BA spread {spread:.4} over seeds: {bas:?}"))?;
    check(bas[0] > 0.5 && bas[0] < 1.0, format!("basis should be informative but incomplete, BA {}", bas[0]))?;
    Ok(format!("test BA {:.4} across 5 head seeds, spread {spread:.4}", bas[0]))
}

/// A label vector with `ny` ones in `n` and a feature with `nf` ones, `both` of them shared.
fn counts_to_vectors(n: usize, nf: usize, ny: usize, both: usize) -> (Vec<u8>, Vec<u8>) {
    let y: Vec<u8> = (0..n).map(|i| (i < ny) as u8).collect();
    let f: Vec<u8> = (0..n).map(|i| ((i < both) || (i >= ny && i < ny + nf - both)) as u8).collect();
    (f, y)
}

fn oracle_pearson(f: &[u8], y: &[u8]) -> f64 {
    let n = f.len() as f64;
    let mf = f.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let cov: f64 = f.iter().zip(y).map(|(&a, &b)| (a as f64 - mf) * (b as f64 - my)).sum();
    let vf: f64 = f.iter().map(|&a| (a as f64 - mf).powi(2)).sum();
    let vy: f64 = y.iter().map(|&b| (b as f64 - my).powi(2)).sum();
    cov / (vf * vy).sqrt()
}

fn single_feature_flag(f: Vec<u8>, y: &[u8]) -> Result<(bool, f64), String> {
    let feature: NamedFeature = serde_json::from_value(serde_json::json!({
        "id": "f001", "name": "probe", "lane": "lexical", "definition": "probe feature",
        "rule": {"regex": "probe"}, "provenance": {"round": 0, "phase": "bootstrap", "template_version": "t"},
        "admitted_kappa": "exact", "rho_to_label": null
    }))
    .map_err(|e| e.to_string())?;
    let mut m = FeatureMatrix::empty((0..y.len()).map(|i| format!("d{i}")).collect());
    m.push_column("f001", f).map_err(|e| e.to_string())?;
    let r = disentanglement_report(&[feature], &m, y, "question", None).map_err(|e| e.to_string())?;
    Ok((r.rows[0].flagged, r.rows[0].abs_rho.unwrap_or(f64::NAN)))
}

fn dagger_rule() -> Outcome {
    check(!is_near_paraphrase(0.60), "0.60 flagged")?;
    check(is_near_paraphrase(0.600001), "0.600001 not flagged")?;
    let (f, y) = counts_to_vectors(10, 5, 5, 4);
    check((oracle_pearson(&f, &y) - 0.6).abs() < 1e-12, "fixture is not at 0.6")?;
    let (flag, rho) = single_feature_flag(f, &y)?;
    check(!flag && rho == 0.6, format!("rho {rho} flagged={flag}"))?;
    let (f, y) = counts_to_vectors(45, 21, 22, 17);
    let above = oracle_pearson(&f, &y);
    check(above > 0.6 && above < 0.600002, format!("fixture at {above}"))?;
    let (flag, rho) = single_feature_flag(f, &y)?;
    check(flag, format!("rho {rho} not flagged"))?;
    let (f, y) = counts_to_vectors(65, 45, 32, 31);
    let rho59 = oracle_pearson(&f, &y);
    check((rho59 - 0.59).abs() < 5e-3, format!("fixture at {rho59}"))?;
    let (flag, _) = single_feature_flag(f, &y)?;
    check(!flag, "basis with max |rho| 0.59 has a flag")?;
    Ok(format!("0.6 not flagged, {above:.7} flagged, max |rho| {rho59:.4} basis has 0 flags"))
}

fn non_reproducible() -> Outcome {
    Ok("published BA table, human-rater kappa table and rubric scores need live multi-vendor LLMs, \
        restricted corpora and human raters; not reproduced here, replaced by the oracle checks above"
        .into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("noise bound constants at kappa* = 0.70", noise_bound_constants),
        ("Monte-Carlo kappa matches the closed form on the eta x pi grid", noise_model_oracle),
        ("shared errors raise cross-rater kappa", shared_bias_direction),
        ("Cohen's kappa exactness and invariances", kappa_exactness),
        ("lexical features are deterministic; lexical audit is offline", lexical_determinism),
        ("two planted cues recovered; label paraphrase rejected", planted_recovery),
        ("identical seed and warm cache give identical artifacts", determinism),
        ("test BA stable across head seeds", retrain_stability),
        ("near-paraphrase flag is strict at 0.60", dagger_rule),
        ("published human and live-LLM numbers are out of reach (documented)", non_reproducible),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
