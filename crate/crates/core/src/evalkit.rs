//! Diagnostics: label disentanglement, cross-rater audits, pairwise kappa
//! tables, and run reports.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::agreement::{cohen_kappa, screen_report, AgreementReport};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::features::{apply_lexical, label_semantic, FeatureMatrix, NamedFeature, SemanticLabelCache};
use crate::gateway::{check_cross_vendor, Gateway, RoleConfig};
use crate::pairing::Lane;
use crate::rng;
use crate::selection::{CandidateRecord, RunState, Verdict};
use crate::vectorize::cosine;

/// Features with `|rho(f, y)|` strictly above this are near-paraphrases of the label.
pub const NEAR_PARAPHRASE_RHO: f64 = 0.60;

pub fn is_near_paraphrase(abs_rho: f64) -> bool {
    abs_rho > NEAR_PARAPHRASE_RHO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementRow {
    pub feature_id: String,
    /// `None` for columns that are constant on the evaluation set.
    pub abs_rho: Option<f64>,
    pub def_cosine: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub rows: Vec<DisentanglementRow>,
    pub max_abs_rho: Option<f64>,
    pub median_abs_rho: Option<f64>,
    pub max_def_cosine: Option<f64>,
    pub median_def_cosine: Option<f64>,
    pub flagged: usize,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

fn max(values: &[f64]) -> Option<f64> {
    values.iter().copied().reduce(f64::max)
}

/// Text embedder used for definition-level similarity.
pub type EmbedFn<'a> = &'a dyn Fn(&[String]) -> Result<Vec<Vec<f64>>>;

/// Labeling-vector correlation with the label and definition-to-question
/// cosine for every codebook feature.
pub fn disentanglement_report(
    codebook: &[NamedFeature],
    matrix: &FeatureMatrix,
    y: &[u8],
    label_question: &str,
    embed_fn: Option<EmbedFn<'_>>,
) -> Result<DisentanglementReport> {
    if matrix.n_rows() != y.len() {
        return Err(Error::LengthMismatch {
            expected: matrix.n_rows(),
            actual: y.len(),
        });
    }
    let def_cosines: Vec<Option<f64>> = match embed_fn {
        Some(f) if !codebook.is_empty() => {
            let mut texts: Vec<String> = codebook.iter().map(|c| c.definition.clone()).collect();
            texts.push(label_question.to_string());
            let vectors = f(&texts)?;
            if vectors.len() != texts.len() {
                return Err(Error::LengthMismatch {
                    expected: texts.len(),
                    actual: vectors.len(),
                });
            }
            let question = &vectors[codebook.len()];
            vectors[..codebook.len()]
                .iter()
                .map(|v| cosine(v, question).map(Some))
                .collect::<Result<_>>()?
        }
        _ => vec![None; codebook.len()],
    };
    let mut rows = Vec::with_capacity(codebook.len());
    for (feature, def_cosine) in codebook.iter().zip(def_cosines) {
        let column = matrix.column(&feature.id).ok_or_else(|| {
            Error::Data(format!("matrix has no column for feature {}", feature.id))
        })?;
        let abs_rho = crate::selection::pearson_binary(column, y).ok().map(f64::abs);
        rows.push(DisentanglementRow {
            feature_id: feature.id.clone(),
            flagged: abs_rho.is_some_and(is_near_paraphrase),
            abs_rho,
            def_cosine,
        });
    }
    let mut rhos: Vec<f64> = rows.iter().filter_map(|r| r.abs_rho).collect();
    let mut cosines: Vec<f64> = rows.iter().filter_map(|r| r.def_cosine).collect();
    Ok(DisentanglementReport {
        flagged: rows.iter().filter(|r| r.flagged).count(),
        max_abs_rho: max(&rhos),
        median_abs_rho: median(&mut rhos),
        max_def_cosine: max(&cosines),
        median_def_cosine: median(&mut cosines),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub feature_id: String,
    pub lane: Lane,
    pub report: Option<AgreementReport>,
    pub clear: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub kappa_star: f64,
    pub n_docs: usize,
    pub rows: Vec<AuditRow>,
    /// Mean over non-degenerate, error-free rows; `None` when there are none.
    pub mean_kappa: Option<f64>,
    pub fraction_clear: Option<f64>,
    pub degenerate: usize,
    pub errors: usize,
}

/// Seeded document sample of at most `size` for audits.
pub fn audit_sample(docs: &[Document], size: usize, seed: u64) -> Vec<Document> {
    let take = size.min(docs.len());
    let mut picks = index::sample(&mut rng::stream(seed, "audit", 0), docs.len(), take).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| docs[i].clone()).collect()
}

/// Cross-rater audit of any codebook. Lexical rules are applied twice locally
/// and never reach the gateway; semantic definitions are relabeled by both
/// roles. Gateway failures are recorded per feature.
pub fn audit_concept_set(
    codebook: &[NamedFeature],
    docs: &[Document],
    gateway: &Gateway,
    labeler: &RoleConfig,
    examiner: &RoleConfig,
    kappa_star: f64,
    chunk_size: usize,
) -> Result<AuditReport> {
    if codebook.iter().any(|f| f.lane == Lane::Semantic) {
        check_cross_vendor(labeler, examiner)?;
    }
    let cache = SemanticLabelCache::default();
    let refs: Vec<&Document> = docs.iter().collect();
    let mut rows = Vec::with_capacity(codebook.len());
    for feature in codebook {
        let outcome: Result<AgreementReport> = match feature.lane {
            Lane::Lexical => {
                let first = apply_lexical(feature, docs)?;
                let second = apply_lexical(feature, docs)?;
                cohen_kappa(&first, &second)
            }
            Lane::Semantic => {
                let candidate = feature.as_candidate();
                label_semantic(gateway, &cache, &candidate, &refs, labeler, chunk_size).and_then(|a| {
                    let b = label_semantic(gateway, &cache, &candidate, &refs, examiner, chunk_size)?;
                    cohen_kappa(&a, &b)
                })
            }
        };
        rows.push(match outcome {
            Ok(report) => AuditRow {
                feature_id: feature.id.clone(),
                lane: feature.lane,
                clear: screen_report(&report, kappa_star).passed(),
                report: Some(report),
                error: None,
            },
            Err(e) => AuditRow {
                feature_id: feature.id.clone(),
                lane: feature.lane,
                report: None,
                clear: false,
                error: Some(e.to_string()),
            },
        });
    }
    let kappas: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.report.as_ref().and_then(|k| k.kappa))
        .collect();
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let degenerate = rows
        .iter()
        .filter(|r| r.report.as_ref().is_some_and(|k| k.degenerate))
        .count();
    Ok(AuditReport {
        kappa_star,
        n_docs: docs.len(),
        mean_kappa: (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64),
        fraction_clear: (!rows.is_empty())
            .then(|| rows.iter().filter(|r| r.clear).count() as f64 / rows.len() as f64),
        degenerate,
        errors,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub a: usize,
    pub b: usize,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseKappaTable {
    pub pairs: Vec<PairKappa>,
    /// Mean over non-degenerate pairs.
    pub mean: Option<f64>,
    pub degenerate_pairs: usize,
}

/// Kappa for every pair of raters and their mean.
pub fn pairwise_kappa_table(vectors: &[Vec<u8>]) -> Result<PairwiseKappaTable> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument("need at least two raters".into()));
    }
    let mut pairs = Vec::new();
    for a in 0..vectors.len() {
        for b in a + 1..vectors.len() {
            pairs.push(PairKappa {
                a,
                b,
                kappa: cohen_kappa(&vectors[a], &vectors[b])?.kappa,
            });
        }
    }
    let valid: Vec<f64> = pairs.iter().filter_map(|p| p.kappa).collect();
    Ok(PairwiseKappaTable {
        degenerate_pairs: pairs.len() - valid.len(),
        mean: (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub phase: String,
    pub lane: Lane,
    pub name: String,
    pub kappa: Option<f64>,
    pub rho_to_label: Option<f64>,
    pub gain: Option<f64>,
    pub verdict: Verdict,
    pub feature_id: Option<String>,
}

impl From<&CandidateRecord> for HistoryRow {
    fn from(r: &CandidateRecord) -> Self {
        Self {
            round: r.round,
            phase: r.phase.as_str().into(),
            lane: r.feature.lane,
            name: r.feature.name.clone(),
            kappa: match r.feature.lane {
                Lane::Lexical => Some(1.0),
                Lane::Semantic => r.kappa.as_ref().and_then(|k| k.kappa),
            },
            rho_to_label: r.rho_to_label,
            gain: r.gain,
            verdict: r.verdict,
            feature_id: r.feature_id.clone(),
        }
    }
}

/// Everything a run report shows, computed once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub k: usize,
    pub val_ba: f64,
    pub test_ba: Option<f64>,
    pub max_abs_rho: Option<f64>,
    pub median_abs_rho: Option<f64>,
    pub mean_kappa: Option<f64>,
    pub flagged: usize,
    pub codebook: Vec<NamedFeature>,
    pub pruned: Vec<String>,
    pub history: Vec<HistoryRow>,
    pub disentanglement: Option<DisentanglementReport>,
}

impl RunReport {
    pub fn from_state(
        dataset: &str,
        state: &RunState,
        test_ba: Option<f64>,
        disentanglement: Option<DisentanglementReport>,
    ) -> Self {
        let kappas: Vec<f64> = state.admitted.iter().map(|f| f.admitted_kappa.value()).collect();
        Self {
            dataset: dataset.to_string(),
            k: state.admitted.len(),
            val_ba: state.current_val_ba,
            test_ba,
            max_abs_rho: disentanglement.as_ref().and_then(|d| d.max_abs_rho),
            median_abs_rho: disentanglement.as_ref().and_then(|d| d.median_abs_rho),
            mean_kappa: (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64),
            flagged: disentanglement.as_ref().map_or(0, |d| d.flagged),
            codebook: state.admitted.clone(),
            pruned: state.pruned.clone(),
            history: state.history.iter().map(HistoryRow::from).collect(),
            disentanglement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Json,
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => render_markdown(report),
    }
}

fn render_markdown(r: &RunReport) -> String {
    let mut s = format!("# Discovery report: {}\n\n", r.dataset);
    s.push_str("| K | val BA | test BA | max abs rho | median abs rho | mean kappa | flagged |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    s.push_str(&format!(
        "| {} | {:.3} | {} | {} | {} | {} | {} |\n\n",
        r.k,
        r.val_ba,
        num(r.test_ba),
        num(r.max_abs_rho),
        num(r.median_abs_rho),
        num(r.mean_kappa),
        r.flagged
    ));
    s.push_str("## Codebook\n\n");
    if r.codebook.is_empty() {
        s.push_str("No features admitted (0 admitted features).\n\n");
    } else {
        for f in &r.codebook {
            let rule = match &f.rule {
                crate::features::FeatureRule::Regex { regex, .. } => format!("regex `{regex}`"),
                crate::features::FeatureRule::Steps { steps } => {
                    format!("{} steps: {}", steps.len(), steps.join(" / "))
                }
            };
            s.push_str(&format!(
                "- **{}** `{}` ({}): {}. Rule: {}. kappa {}.\n",
                f.name,
                f.id,
                f.lane.as_str(),
                f.definition,
                rule,
                match f.admitted_kappa {
                    crate::features::AdmittedKappa::Marked(_) => "exact".to_string(),
                    crate::features::AdmittedKappa::Measured(k) => format!("{k:.3}"),
                }
            ));
        }
        s.push('\n');
    }
    if !r.pruned.is_empty() {
        s.push_str(&format!("Pruned after discovery: {}\n\n", r.pruned.join(", ")));
    }
    if let Some(d) = &r.disentanglement {
        s.push_str("## Disentanglement\n\n| feature | abs rho | def cosine | flagged |\n|---|---|---|---|\n");
        for row in &d.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                row.feature_id,
                num(row.abs_rho),
                num(row.def_cosine),
                if row.flagged { "yes" } else { "no" }
            ));
        }
        s.push('\n');
    }
    s.push_str("## Candidate history\n\n| round | phase | lane | name | kappa | abs rho | gain | verdict |\n|---|---|---|---|---|---|---|---|\n");
    for h in &r.history {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:?} |\n",
            h.round,
            h.phase,
            h.lane.as_str(),
            h.name.replace('|', "\\|"),
            num(h.kappa),
            num(h.rho_to_label),
            num(h.gain),
            h.verdict
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{AdmittedKappa, FeatureRule, Provenance};

    fn feature(id: &str) -> NamedFeature {
        NamedFeature {
            id: id.into(),
            name: id.into(),
            lane: Lane::Lexical,
            definition: format!("definition of {id}"),
            rule: FeatureRule::Regex {
                regex: id.into(),
                case_sensitive: false,
            },
            positive_example: String::new(),
            negative_example: String::new(),
            provenance: Provenance {
                round: 0,
                phase: "bootstrap".into(),
                template_version: "t".into(),
            },
            admitted_kappa: AdmittedKappa::EXACT,
            rho_to_label: None,
        }
    }

    fn matrix(cols: &[(&str, Vec<u8>)]) -> FeatureMatrix {
        let n = cols[0].1.len();
        let mut m = FeatureMatrix::empty((0..n).map(|i| i.to_string()).collect());
        for (id, c) in cols {
            m.push_column(*id, c.clone()).unwrap();
        }
        m
    }

    #[test]
    fn dagger_boundary() {
        assert!(!is_near_paraphrase(0.60));
        assert!(is_near_paraphrase(0.600001));
    }

    #[test]
    fn identity_column_is_flagged_and_constant_is_not() {
        let y = vec![1, 0, 1, 0, 1, 0];
        let m = matrix(&[("same", y.clone()), ("flat", vec![1; 6])]);
        let r = disentanglement_report(&[feature("same"), feature("flat")], &m, &y, "q", None).unwrap();
        assert_eq!(r.rows[0].abs_rho, Some(1.0));
        assert!(r.rows[0].flagged);
        assert_eq!(r.rows[1].abs_rho, None);
        assert!(!r.rows[1].flagged);
        assert_eq!(r.flagged, 1);
    }

    #[test]
    fn exact_point_six_is_not_flagged() {
        // 10 rows, balanced, agreement on 8 => rho = 15 / 25 = 0.6
        let y = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let f = vec![1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let m = matrix(&[("f", f)]);
        let r = disentanglement_report(&[feature("f")], &m, &y, "q", None).unwrap();
        assert_eq!(r.rows[0].abs_rho, Some(0.6));
        assert!(!r.rows[0].flagged);
    }

    #[test]
    fn identical_definition_has_unit_cosine() {
        let y = vec![1, 0, 1, 0];
        let mut f = feature("f");
        f.definition = "Is the review positive?".into();
        let m = matrix(&[("f", vec![1, 0, 0, 0])]);
        let embed = |texts: &[String]| -> Result<Vec<Vec<f64>>> {
            Ok(texts
                .iter()
                .map(|t| t.bytes().take(8).map(|b| b as f64).collect::<Vec<f64>>())
                .map(|mut v| {
                    v.resize(8, 0.0);
                    v
                })
                .collect())
        };
        let r = disentanglement_report(&[f], &m, &y, "Is the review positive?", Some(&embed)).unwrap();
        assert!((r.rows[0].def_cosine.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pairwise_table_examples() {
        let a = vec![1, 1, 0, 0];
        let b = vec![1, 0, 0, 0];
        let t = pairwise_kappa_table(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(t.mean, Some(1.0));
        let t = pairwise_kappa_table(&[a.clone(), b.clone(), a.clone()]).unwrap();
        let ks: Vec<Option<f64>> = t.pairs.iter().map(|p| p.kappa).collect();
        assert_eq!(ks, vec![Some(0.5), Some(1.0), Some(0.5)]);
        assert!((t.mean.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let d = pairwise_kappa_table(&[vec![1, 1, 1], vec![1, 1, 1]]).unwrap();
        assert_eq!(d.degenerate_pairs, 1);
        assert_eq!(d.mean, None);
        assert!(pairwise_kappa_table(&[a]).is_err());
        assert!(pairwise_kappa_table(&[vec![1, 0], vec![1]]).is_err());
    }

    #[test]
    fn empty_audit_has_undefined_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gateway::replay(dir.path());
        let l = RoleConfig::new(crate::gateway::Role::Labeler, "a", "m");
        let e = RoleConfig::new(crate::gateway::Role::Examiner, "b", "m");
        let r = audit_concept_set(&[], &[], &g, &l, &e, 0.7, 10).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.mean_kappa, None);
        assert_eq!(r.fraction_clear, None);
    }
}
