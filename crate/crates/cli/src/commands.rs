use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lfd_core::agreement::{eta_bound, simulate_grid};
use lfd_core::corpus::{
    balance_subsample, load_dataset, make_splits, DatasetFormat, LabeledDataset, Partition,
};
use lfd_core::evalkit::{
    audit_concept_set, audit_sample, disentanglement_report, render_report, AuditReport, ReportFormat,
    RunReport,
};
use lfd_core::features::{apply_lexical, codebook_json, label_semantic, load_codebook, FeatureMatrix, SemanticLabelCache};
use lfd_core::gateway::{Gateway, RateLimit, Role, RoleConfig, DEFAULT_CHUNK_SIZE, LABEL_TEMPLATE_VERSION, PROPOSE_TEMPLATE_VERSION};
use lfd_core::head::fit_and_score;
use lfd_core::pairing::Lane;
use lfd_core::selection::{apply_basis, prune, run_discovery, DiscoveryContext, RunState};
use lfd_core::vectorize::{embed, write_atomic, EmbeddingCache, EmbeddingProvider};
use lfd_core::{rng, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{self, LoadedConfig};
use crate::GlobalArgs;

type EmbedFn<'a> = dyn Fn(&[String]) -> Result<Vec<Vec<f64>>> + 'a;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_dataset(path: &Path) -> Result<(LabeledDataset, String)> {
    let format = DatasetFormat::from_path(path).ok_or_else(|| {
        Error::Data(format!("{}: expected a .jsonl or .csv file", path.display()))
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((load_dataset(path, format)?, sha256_hex(&bytes)))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref())
}

/// Live gateway over HTTP, or a cache-only replay gateway.
fn build_gateway(loaded: &LoadedConfig, replay: bool, providers: &[&str]) -> Result<Gateway> {
    if replay {
        return Ok(Gateway::replay(&loaded.cache_root));
    }
    #[cfg(feature = "http")]
    {
        let mut ids: Vec<&str> = providers.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let urls = loaded.provider_urls(&ids)?;
        let transport = lfd_core::gateway::HttpTransport::from_env(&urls)?;
        let mut gateway = Gateway::live(Arc::new(transport), &loaded.cache_root);
        for id in ids {
            let entry = &loaded.file.providers[id];
            if let Some(rate) = entry.rate {
                gateway = gateway.with_rate_limit(
                    id,
                    RateLimit {
                        requests_per_second: rate,
                        burst: entry.burst.unwrap_or(rate.max(1.0)),
                    },
                );
            }
        }
        Ok(gateway)
    }
    #[cfg(not(feature = "http"))]
    {
        let _ = providers;
        Err(Error::Config("built without HTTP support; use --replay".into()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    run_id: String,
    state: RunState,
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("round-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    Ok(files.pop())
}

pub fn discover(g: &GlobalArgs, config_path: &Path, data: &Path) -> Result<()> {
    let loaded = config::load(config_path)?;
    let mut run = loaded.file.run.clone();
    if let Some(seed) = g.seed {
        run.seed = seed;
    }
    run.validate()?;
    let roles = loaded.roles()?;
    let (mut dataset, dataset_hash) = read_dataset(data)?;
    if let Some(name) = &loaded.file.dataset.name {
        dataset.name = name.clone();
    }
    if let Some(q) = &loaded.file.dataset.label_question {
        dataset.label_question = q.clone();
    }
    if let Some(n) = loaded.file.dataset.balance_n {
        dataset = balance_subsample(&dataset, n, rng::derive_seed(run.seed, "balance", 0))?;
    }
    let splits = make_splits(&dataset, loaded.file.dataset.split, run.seed)?;

    let mut providers = vec![
        roles.proposer.provider_id.as_str(),
        roles.labeler.provider_id.as_str(),
        roles.examiner.provider_id.as_str(),
    ];
    if let Some(e) = &run.embedding {
        providers.push(e.provider_id.as_str());
    }
    let gateway = build_gateway(&loaded, g.replay, &providers)?;

    let snapshot = json!({
        "run": run,
        "roles": roles,
        "dataset": loaded.file.dataset,
        "providers": loaded.file.providers.keys().collect::<Vec<_>>(),
        "template_versions": [PROPOSE_TEMPLATE_VERSION, LABEL_TEMPLATE_VERSION],
    });
    let run_id = sha256_hex(format!("{snapshot}\n{dataset_hash}").as_bytes());

    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("lfd-out"));
    let checkpoint_dir = out.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir).map_err(|e| Error::io(&checkpoint_dir, e))?;

    let resume = if g.resume {
        let path = latest_checkpoint(&checkpoint_dir)?
            .ok_or_else(|| Error::Config(format!("--resume: no checkpoint in {}", checkpoint_dir.display())))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        if cp.run_id != run_id {
            return Err(Error::Config(format!(
                "--resume: {} belongs to a different config or dataset",
                path.display()
            )));
        }
        eprintln!("resuming from {} at round {}", path.display(), cp.state.round + 1);
        Some(cp.state)
    } else {
        None
    };

    let ctx = DiscoveryContext::new(&gateway, roles.clone(), &dataset, &splits, &run, &loaded.cache_root)?;
    let state = run_discovery(&ctx, &run, resume, |s| {
        let cp = Checkpoint {
            run_id: run_id.clone(),
            state: s.clone(),
        };
        eprintln!(
            "round {} done: {} admitted, phase {}",
            s.round,
            s.admitted.len(),
            s.phase.as_str()
        );
        write(
            &checkpoint_dir.join(format!("round-{:03}.json", s.round)),
            serde_json::to_vec_pretty(&cp)?,
        )
    })?;
    let state = prune(&state, &ctx.y_train, &ctx.y_val, &run)?;

    let test = splits.dataset(&dataset, Partition::Test);
    let test_matrix = apply_basis(&ctx, &state.admitted, &test.documents, &run)?;
    let y_test = test.labels();
    let test_ready = test.require_both_classes().is_ok();
    let test_ba = if test_ready {
        Some(fit_and_score(&state.matrix_train, &ctx.y_train, &test_matrix, &y_test, &run.run_head())?)
    } else {
        None
    };
    let disentanglement = if test_ready {
        let cache = EmbeddingCache::new(&loaded.cache_root);
        let embedder = run.embedding.as_ref().and_then(|e| gateway.embedder(&e.provider_id));
        let embed_fn = |texts: &[String]| -> Result<Vec<Vec<f64>>> {
            let model = &run.embedding.as_ref().expect("checked").model_id;
            let provider = embedder.as_ref().map(|e| e as &dyn EmbeddingProvider);
            Ok(embed(provider, &cache, texts, model)?.into_iter().map(|v| v.values).collect())
        };
        let f: Option<&EmbedFn<'_>> =
            run.embedding.as_ref().map(|_| &embed_fn as _);
        Some(disentanglement_report(
            &state.admitted,
            &test_matrix,
            &y_test,
            &dataset.label_question,
            f,
        )?)
    } else {
        None
    };
    let report = RunReport::from_state(&dataset.name, &state, test_ba, disentanglement);

    let artifacts: Vec<(&str, String)> = vec![
        ("codebook.json", codebook_json(&state.admitted)),
        ("matrix_train.csv", state.matrix_train.to_csv()),
        ("matrix_validation.csv", state.matrix_val.to_csv()),
        ("matrix_test.csv", test_matrix.to_csv()),
        ("splits.json", serde_json::to_string_pretty(&splits)? + "\n"),
        ("state.json", serde_json::to_string_pretty(&state)? + "\n"),
        ("report.json", render_report(&report, ReportFormat::Json)),
        ("report.md", render_report(&report, ReportFormat::Markdown)),
        ("config.toml", loaded.raw.clone()),
    ];
    for (name, body) in &artifacts {
        write(&out.join(name), body)?;
    }
    let manifest = json!({
        "run_id": run_id,
        "mode": if g.replay { "replay" } else { "live" },
        "config": snapshot,
        "dataset": {
            "file": data.file_name().map(|n| n.to_string_lossy().into_owned()),
            "sha256": dataset_hash,
            "n_docs": dataset.len(),
        },
        "artifacts": artifacts
            .iter()
            .map(|(name, body)| json!({"path": name, "sha256": sha256_hex(body.as_bytes())}))
            .collect::<Vec<_>>(),
    });
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    println!(
        "K = {}, validation BA = {:.3}, test BA = {}",
        report.k,
        report.val_ba,
        report.test_ba.map_or("n/a".into(), |b| format!("{b:.3}"))
    );
    println!("artifacts written to {}", out.display());
    Ok(())
}

pub fn apply(g: &GlobalArgs, codebook: &Path, data: &Path, config_path: Option<&Path>) -> Result<()> {
    let features = load_codebook(codebook, None)?;
    let (dataset, _) = read_dataset(data)?;
    let semantic = features.iter().any(|f| f.lane == Lane::Semantic);
    let labeling = if semantic {
        let path = config_path
            .ok_or_else(|| Error::Config("semantic features need --config with a [roles.labeler] entry".into()))?;
        let loaded = config::load(path)?;
        let labeler = loaded.labeler()?;
        labeler.validate()?;
        let gateway = build_gateway(&loaded, g.replay, &[labeler.provider_id.as_str()])?;
        Some((gateway, labeler, loaded.file.run.chunk_size))
    } else {
        None
    };
    let cache = SemanticLabelCache::default();
    let refs: Vec<_> = dataset.documents.iter().collect();
    let mut matrix = FeatureMatrix::empty(dataset.ids());
    for f in &features {
        let column = match (&labeling, f.lane) {
            (_, Lane::Lexical) => apply_lexical(f, &dataset.documents)?,
            (Some((gateway, labeler, chunk)), Lane::Semantic) => {
                label_semantic(gateway, &cache, &f.as_candidate(), &refs, labeler, *chunk)?
            }
            (None, Lane::Semantic) => unreachable!("semantic codebooks require a labeler"),
        };
        matrix.push_column(f.id.clone(), column)?;
    }
    match &g.out {
        Some(path) => {
            write(path, matrix.to_csv())?;
            eprintln!("{} x {} matrix written to {}", matrix.n_rows(), matrix.n_cols(), path.display());
        }
        None => print!("{}", matrix.to_csv()),
    }
    Ok(())
}

fn audit_markdown(r: &AuditReport) -> String {
    let num = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    let mut s = format!(
        "# Agreement audit\n\n{} documents, kappa threshold {:.2}. Mean kappa {}, fraction clear {}, {} degenerate, {} errors.\n\n",
        r.n_docs,
        r.kappa_star,
        num(r.mean_kappa),
        num(r.fraction_clear),
        r.degenerate,
        r.errors
    );
    s.push_str("| feature | lane | kappa | clear | note |\n|---|---|---|---|---|\n");
    for row in &r.rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            row.feature_id,
            row.lane.as_str(),
            num(row.report.as_ref().and_then(|k| k.kappa)),
            if row.clear { "yes" } else { "no" },
            row.error.as_deref().unwrap_or("")
        ));
    }
    s
}

pub fn audit(
    g: &GlobalArgs,
    codebook: &Path,
    data: &Path,
    config_path: Option<&Path>,
    kappa_star: f64,
    sample: usize,
) -> Result<()> {
    let features = load_codebook(codebook, None)?;
    let (dataset, _) = read_dataset(data)?;
    let semantic = features.iter().any(|f| f.lane == Lane::Semantic);
    let loaded = config_path.map(config::load).transpose()?;
    let seed = g
        .seed
        .or_else(|| loaded.as_ref().map(|l| l.file.run.seed))
        .unwrap_or(0);
    let docs = audit_sample(&dataset.documents, sample, seed);
    let (gateway, labeler, examiner, chunk) = match (&loaded, semantic) {
        (Some(l), true) => {
            let labeler = l.labeler()?;
            let examiner = l.examiner()?;
            let gateway = build_gateway(l, g.replay, &[&labeler.provider_id, &examiner.provider_id])?;
            (gateway, labeler, examiner, l.file.run.chunk_size)
        }
        (None, true) => {
            return Err(Error::Config(
                "semantic features need --config with [roles.labeler] and [roles.examiner]".into(),
            ))
        }
        // lexical rules never reach the gateway, so an empty replay cache suffices
        (_, false) => (
            Gateway::replay(std::env::temp_dir().join("lfd-unused-cache")),
            RoleConfig::new(Role::Labeler, "local", "regex"),
            RoleConfig::new(Role::Examiner, "local-2", "regex"),
            DEFAULT_CHUNK_SIZE,
        ),
    };
    let report = audit_concept_set(&features, &docs, &gateway, &labeler, &examiner, kappa_star, chunk)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("lfd-audit"));
    write(&out.join("audit.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write(&out.join("audit.md"), audit_markdown(&report))?;
    println!(
        "{} features audited on {} documents; mean kappa {}; {} LLM requests",
        report.rows.len(),
        report.n_docs,
        report.mean_kappa.map_or("n/a".into(), |k| format!("{k:.3}")),
        gateway.stats.total()
    );
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn simulate(g: &GlobalArgs, etas: &[f64], pis: &[f64], zetas: &[f64], ns: &[usize]) -> Result<()> {
    let cells = simulate_grid(etas, pis, zetas, ns, g.seed.unwrap_or(0))?;
    let mut csv = String::from(
        "eta,pi,zeta,n,empirical_kappa,expected_kappa,infeasible,eta_bar_empirical,inflation_empirical,eta_bar_expected,inflation_expected\n",
    );
    for c in &cells {
        let bound = |k: Option<f64>| k.and_then(|k| eta_bound(k).ok());
        let emp = bound(c.empirical_kappa);
        let exp = bound(c.expected_kappa);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.eta,
            c.pi,
            c.zeta,
            c.n,
            opt(c.empirical_kappa),
            opt(c.expected_kappa),
            c.infeasible,
            opt(emp.as_ref().map(|b| b.eta_bar)),
            opt(emp.as_ref().map(|b| b.inflation)),
            opt(exp.as_ref().map(|b| b.eta_bar)),
            opt(exp.as_ref().map(|b| b.inflation)),
        ));
    }
    match &g.out {
        Some(path) => write(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn report(g: &GlobalArgs, run_dir: &Path, format: ReportFormat) -> Result<()> {
    let path = run_dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: RunReport = serde_json::from_str(&text)?;
    let rendered = render_report(&report, format);
    match &g.out {
        Some(out) => write(out, rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}
