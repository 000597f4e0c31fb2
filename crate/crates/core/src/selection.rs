//! Admission engine: kappa screen, disentanglement gate, residual-gain
//! scoring, the discovery loop, and final pruning.

use std::cmp::Ordering;
use std::path::PathBuf;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::agreement::{cohen_kappa, screen_report, AgreementReport, ScreenVerdict};
use crate::corpus::{Document, LabeledDataset, Partition, SplitAssignment};
use crate::error::{Error, Result};
use crate::features::{
    apply_candidate_lexical, label_semantic, AdmittedKappa, FeatureMatrix, NamedFeature, Provenance,
    SemanticLabelCache,
};
use crate::gateway::{
    propose_features, CandidateDefinition, Evidence, Gateway, RoleConfig, DEFAULT_CHUNK_SIZE,
    DEFAULT_MAX_CANDIDATES, LABEL_TEMPLATE_VERSION, PROPOSE_TEMPLATE_VERSION,
};
use crate::head::{fit_and_score, HeadSpec};
use crate::pairing::{
    bootstrap_groups, sample_band_pairs, uncovered_positives, update_coverage, BandSpec,
    CoverageState, EmbeddingSimilarity, Lane, PairSimilarity, TfidfSimilarity,
};
use crate::rng;
use crate::vectorize::{embed, tfidf_fit, EmbeddingCache};
use crate::BinaryVec;

/// Pearson correlation of two 0/1 vectors. Errors when either is constant.
///
/// Computed from integer cell counts, so values such as 0.6 come out exact
/// whenever the denominator is a perfect square.
pub fn pearson_binary(f: &[u8], y: &[u8]) -> Result<f64> {
    if f.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            actual: f.len(),
        });
    }
    let n = f.len() as i128;
    let nf = f.iter().filter(|&&v| v != 0).count() as i128;
    let ny = y.iter().filter(|&&v| v != 0).count() as i128;
    let both = f.iter().zip(y).filter(|(a, b)| **a != 0 && **b != 0).count() as i128;
    let var_f = nf * (n - nf);
    let var_y = ny * (n - ny);
    if var_f == 0 || var_y == 0 {
        return Err(Error::InvalidArgument(
            "correlation undefined for a constant vector".into(),
        ));
    }
    let num = (n * both - nf * ny) as f64;
    let den = ((var_f * var_y) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Bootstrap,
    Residual,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Bootstrap => "bootstrap",
            Phase::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Admitted,
    FailKappa,
    FailDegenerate,
    FailGate,
    FailGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub provider_id: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub kappa_star: f64,
    pub tau: f64,
    pub delta_gain: f64,
    pub max_rounds: usize,
    pub max_bootstrap_rounds: usize,
    pub k_per_class: usize,
    pub pairs_per_call: usize,
    pub max_candidates: usize,
    pub diversity_sample: usize,
    pub screen_size: usize,
    pub chunk_size: usize,
    pub prune_epsilon: f64,
    pub band_lexical: BandSpec,
    pub band_semantic: BandSpec,
    pub head: HeadSpec,
    /// Semantic-lane pair matching uses TF-IDF when unset.
    pub embedding: Option<EmbeddingConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kappa_star: 0.70,
            tau: 1.0,
            delta_gain: 0.005,
            max_rounds: 10,
            max_bootstrap_rounds: 3,
            k_per_class: 8,
            pairs_per_call: 4,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            diversity_sample: 6,
            screen_size: 100,
            chunk_size: DEFAULT_CHUNK_SIZE,
            prune_epsilon: 1e-9,
            band_lexical: BandSpec::default(),
            band_semantic: BandSpec::default(),
            head: HeadSpec::default(),
            embedding: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_star > 0.0 && self.kappa_star <= 1.0) {
            return Err(Error::Config(format!("kappa_star must be in (0, 1], got {}", self.kappa_star)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if self.delta_gain.is_nan() || self.delta_gain < 0.0 {
            return Err(Error::Config("delta_gain must be non-negative".into()));
        }
        if self.k_per_class == 0 || self.pairs_per_call == 0 || self.max_candidates == 0 {
            return Err(Error::Config("k_per_class, pairs_per_call and max_candidates must be positive".into()));
        }
        self.band_lexical.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.band_semantic.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Head spec with its seed drawn from the run seed.
    pub fn run_head(&self) -> HeadSpec {
        HeadSpec {
            seed: rng::derive_seed(self.seed, "head", 0),
            ..self.head.clone()
        }
    }

    fn band(&self, lane: Lane) -> BandSpec {
        match lane {
            Lane::Lexical => self.band_lexical,
            Lane::Semantic => self.band_semantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub proposer: RoleConfig,
    pub labeler: RoleConfig,
    pub examiner: RoleConfig,
}

impl Roles {
    pub fn validate(&self) -> Result<()> {
        self.labeler.validate()?;
        crate::gateway::check_cross_vendor(&self.proposer, &self.examiner)
    }
}

/// Audit trail of one proposed feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub feature: CandidateDefinition,
    pub round: usize,
    pub phase: Phase,
    pub proposal_index: usize,
    pub template_version: String,
    /// Screen-subset verdicts; empty for lexical rules, which agree exactly.
    pub labeler_vec: BinaryVec,
    pub examiner_vec: BinaryVec,
    pub kappa: Option<AgreementReport>,
    pub rho_to_label: Option<f64>,
    pub gain: Option<f64>,
    pub verdict: Verdict,
    pub feature_id: Option<String>,
}

impl CandidateRecord {
    pub fn kappa_value(&self) -> f64 {
        match (&self.kappa, self.feature.lane) {
            (Some(r), _) => r.kappa_or_zero(),
            (None, Lane::Lexical) => 1.0,
            (None, Lane::Semantic) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub admitted: Vec<NamedFeature>,
    pub matrix_train: FeatureMatrix,
    pub matrix_val: FeatureMatrix,
    pub coverage: CoverageState,
    pub phase: Phase,
    pub history: Vec<CandidateRecord>,
    pub current_val_ba: f64,
    /// Index of the next round to run.
    pub round: usize,
    pub bootstrap_rounds: usize,
    pub finished: bool,
    pub pruned: Vec<String>,
}

impl RunState {
    pub fn initial(ctx: &DiscoveryContext<'_>, cfg: &RunConfig) -> Result<Self> {
        let matrix_train = FeatureMatrix::empty(ctx.train.ids());
        let matrix_val = FeatureMatrix::empty(ctx.val.ids());
        let current_val_ba = fit_and_score(
            &matrix_train,
            &ctx.y_train,
            &matrix_val,
            &ctx.y_val,
            &cfg.run_head(),
        )?;
        Ok(Self {
            admitted: Vec::new(),
            matrix_train,
            matrix_val,
            coverage: CoverageState::default(),
            phase: Phase::Bootstrap,
            history: Vec::new(),
            current_val_ba,
            round: 0,
            bootstrap_rounds: 0,
            finished: false,
            pruned: Vec::new(),
        })
    }

    pub fn admitted_count(&self) -> usize {
        self.history
            .iter()
            .filter(|r| r.verdict == Verdict::Admitted)
            .count()
    }
}

/// Candidate columns and agreement, ready for the gates.
#[derive(Debug, Clone)]
pub struct CandidateInputs {
    pub candidate: CandidateDefinition,
    pub train_col: BinaryVec,
    pub val_col: BinaryVec,
    pub labeler_vec: BinaryVec,
    pub examiner_vec: BinaryVec,
    pub kappa: Option<AgreementReport>,
}

/// Gain and label correlation of one candidate against the current basis.
pub fn score_candidate(
    state: &RunState,
    train_col: &[u8],
    val_col: &[u8],
    y_train: &[u8],
    y_val: &[u8],
    cfg: &RunConfig,
) -> Result<(f64, Option<f64>)> {
    let train = state.matrix_train.with_column("__candidate", train_col.to_vec())?;
    let val = state.matrix_val.with_column("__candidate", val_col.to_vec())?;
    let with = fit_and_score(&train, y_train, &val, y_val, &cfg.run_head())?;
    let rho = pearson_binary(val_col, y_val).ok().map(f64::abs);
    Ok((with - state.current_val_ba, rho))
}

fn gate_passes(rho: Option<f64>, tau: f64) -> bool {
    match rho {
        Some(r) => r <= tau,
        None => tau >= 1.0,
    }
}

fn is_constant(v: &[u8]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Screen verdict for a candidate before scoring, if it fails early.
fn pre_gate_verdict(inputs: &CandidateInputs, kappa_star: f64) -> Option<Verdict> {
    if let Some(report) = &inputs.kappa {
        match screen_report(report, kappa_star) {
            ScreenVerdict::FailKappa { .. } => return Some(Verdict::FailKappa),
            ScreenVerdict::FailDegenerate => return Some(Verdict::FailDegenerate),
            ScreenVerdict::Pass { .. } => {}
        }
    }
    if inputs.train_col.is_empty() || is_constant(&inputs.train_col) {
        return Some(Verdict::FailDegenerate);
    }
    None
}

/// Read-only inputs shared by every round.
pub struct DiscoveryContext<'a> {
    pub gateway: &'a Gateway,
    pub roles: Roles,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub y_train: Vec<u8>,
    pub y_val: Vec<u8>,
    /// Indices into `train` used for the kappa screen.
    pub screen_idx: Vec<usize>,
    pub label_cache: SemanticLabelCache,
    pub cache_root: PathBuf,
    lexical_sim: TfidfSimilarity,
    semantic_sim: std::sync::OnceLock<Box<dyn PairSimilarity + Send + Sync>>,
}

impl<'a> DiscoveryContext<'a> {
    pub fn new(
        gateway: &'a Gateway,
        roles: Roles,
        dataset: &LabeledDataset,
        splits: &SplitAssignment,
        cfg: &RunConfig,
        cache_root: impl Into<PathBuf>,
    ) -> Result<Self> {
        cfg.validate()?;
        roles.validate()?;
        splits.require_discovery_ready(dataset)?;
        let train = splits.dataset(dataset, Partition::Train);
        let val = splits.dataset(dataset, Partition::Validation);
        let n_screen = cfg.screen_size.min(train.len());
        let mut screen_idx =
            index::sample(&mut rng::stream(cfg.seed, "screen", 0), train.len(), n_screen).into_vec();
        screen_idx.sort_unstable();
        let model = tfidf_fit(&train.documents)?;
        let lexical_sim = TfidfSimilarity::new(&model, &train.documents);
        Ok(Self {
            gateway,
            roles,
            y_train: train.labels(),
            y_val: val.labels(),
            train,
            val,
            screen_idx,
            label_cache: SemanticLabelCache::default(),
            cache_root: cache_root.into(),
            lexical_sim,
            semantic_sim: std::sync::OnceLock::new(),
        })
    }

    fn similarity(&self, lane: Lane, cfg: &RunConfig) -> Result<&dyn PairSimilarity> {
        if lane == Lane::Lexical {
            return Ok(&self.lexical_sim);
        }
        let Some(emb) = &cfg.embedding else {
            return Ok(&self.lexical_sim);
        };
        if self.semantic_sim.get().is_none() {
            let cache = EmbeddingCache::new(&self.cache_root);
            let texts: Vec<String> = self.train.documents.iter().map(|d| d.text.clone()).collect();
            let embedder = self.gateway.embedder(&emb.provider_id);
            let provider = embedder
                .as_ref()
                .map(|e| e as &dyn crate::vectorize::EmbeddingProvider);
            let vectors = embed(provider, &cache, &texts, &emb.model_id)?;
            let _ = self
                .semantic_sim
                .set(Box::new(EmbeddingSimilarity::new(vectors)));
        }
        Ok(self.semantic_sim.get().expect("initialized").as_ref())
    }

    fn docs_by_ids(&self, ids: &[String]) -> Vec<Document> {
        ids.iter()
            .filter_map(|id| self.train.documents.iter().find(|d| &d.id == id).cloned())
            .collect()
    }

    /// Label any documents with a candidate through the labeler role.
    pub fn label_docs(&self, candidate: &CandidateDefinition, docs: &[&Document], cfg: &RunConfig) -> Result<BinaryVec> {
        match candidate.lane {
            Lane::Lexical => apply_candidate_lexical(candidate, docs),
            Lane::Semantic => label_semantic(
                self.gateway,
                &self.label_cache,
                candidate,
                docs,
                &self.roles.labeler,
                cfg.chunk_size,
            ),
        }
    }

    /// Produce train/validation columns and, for semantic candidates, the
    /// labeler-vs-examiner agreement on the screen subset. Columns are only
    /// labeled in full when the screen passes.
    pub fn evaluate(&self, candidate: &CandidateDefinition, cfg: &RunConfig) -> Result<CandidateInputs> {
        let train_refs: Vec<&Document> = self.train.documents.iter().collect();
        let val_refs: Vec<&Document> = self.val.documents.iter().collect();
        match candidate.lane {
            Lane::Lexical => Ok(CandidateInputs {
                candidate: candidate.clone(),
                train_col: apply_candidate_lexical(candidate, &train_refs)?,
                val_col: apply_candidate_lexical(candidate, &val_refs)?,
                labeler_vec: Vec::new(),
                examiner_vec: Vec::new(),
                kappa: None,
            }),
            Lane::Semantic => {
                let screen: Vec<&Document> = self.screen_idx.iter().map(|&i| &self.train.documents[i]).collect();
                let labeler_vec = self.label_docs(candidate, &screen, cfg)?;
                let examiner_vec = label_semantic(
                    self.gateway,
                    &self.label_cache,
                    candidate,
                    &screen,
                    &self.roles.examiner,
                    cfg.chunk_size,
                )?;
                let report = cohen_kappa(&labeler_vec, &examiner_vec)?;
                let passed = screen_report(&report, cfg.kappa_star).passed();
                let (train_col, val_col) = if passed {
                    (
                        self.label_docs(candidate, &train_refs, cfg)?,
                        self.label_docs(candidate, &val_refs, cfg)?,
                    )
                } else {
                    (Vec::new(), Vec::new())
                };
                Ok(CandidateInputs {
                    candidate: candidate.clone(),
                    train_col,
                    val_col,
                    labeler_vec,
                    examiner_vec,
                    kappa: Some(report),
                })
            }
        }
    }
}

fn template_version() -> String {
    format!("{PROPOSE_TEMPLATE_VERSION}+{LABEL_TEMPLATE_VERSION}")
}

fn record(
    inputs: &CandidateInputs,
    round: usize,
    phase: Phase,
    proposal_index: usize,
    rho: Option<f64>,
    gain: Option<f64>,
    verdict: Verdict,
) -> CandidateRecord {
    CandidateRecord {
        feature: inputs.candidate.clone(),
        round,
        phase,
        proposal_index,
        template_version: template_version(),
        labeler_vec: inputs.labeler_vec.clone(),
        examiner_vec: inputs.examiner_vec.clone(),
        kappa: inputs.kappa.clone(),
        rho_to_label: rho,
        gain,
        verdict,
        feature_id: None,
    }
}

/// Grow the basis with an admitted candidate.
fn admit(
    state: &mut RunState,
    ctx: &DiscoveryContext<'_>,
    inputs: &CandidateInputs,
    mut rec: CandidateRecord,
    new_val_ba: f64,
) -> Result<()> {
    let id = format!("f{:03}", state.admitted_count() + 1);
    let admitted_kappa = match inputs.candidate.lane {
        Lane::Lexical => AdmittedKappa::EXACT,
        Lane::Semantic => AdmittedKappa::Measured(inputs.kappa.as_ref().map_or(0.0, |k| k.kappa_or_zero())),
    };
    let feature = NamedFeature::from_candidate(
        id.clone(),
        &inputs.candidate,
        Provenance {
            round: rec.round,
            phase: rec.phase.as_str().into(),
            template_version: rec.template_version.clone(),
        },
        admitted_kappa,
        rec.rho_to_label,
    );
    state.matrix_train.push_column(id.clone(), inputs.train_col.clone())?;
    state.matrix_val.push_column(id.clone(), inputs.val_col.clone())?;
    state.coverage = update_coverage(&state.coverage, &inputs.train_col, &ctx.train)?;
    state.admitted.push(feature);
    state.current_val_ba = new_val_ba;
    rec.feature_id = Some(id);
    state.history.push(rec);
    Ok(())
}

/// Run the ordered gates on one candidate against the current basis:
/// kappa screen, then disentanglement gate, then residual gain.
pub fn admission_step(
    state: &RunState,
    ctx: &DiscoveryContext<'_>,
    inputs: &CandidateInputs,
    round: usize,
    proposal_index: usize,
    cfg: &RunConfig,
) -> Result<(Verdict, RunState)> {
    let mut next = state.clone();
    if let Some(v) = pre_gate_verdict(inputs, cfg.kappa_star) {
        next.history.push(record(inputs, round, state.phase, proposal_index, None, None, v));
        return Ok((v, next));
    }
    let (gain, rho) = score_candidate(state, &inputs.train_col, &inputs.val_col, &ctx.y_train, &ctx.y_val, cfg)?;
    let verdict = if !gate_passes(rho, cfg.tau) {
        Verdict::FailGate
    } else if gain > cfg.delta_gain {
        Verdict::Admitted
    } else {
        Verdict::FailGain
    };
    let gain_field = (verdict != Verdict::FailGate).then_some(gain);
    let rec = record(inputs, round, state.phase, proposal_index, rho, gain_field, verdict);
    if verdict == Verdict::Admitted {
        admit(&mut next, ctx, inputs, rec, state.current_val_ba + gain)?;
    } else {
        next.history.push(rec);
    }
    Ok((verdict, next))
}

/// Admit within one round: screen failures are recorded first, gate failures
/// next, then the best remaining candidate is admitted and the rest are
/// re-scored against the grown basis until none clears the gain threshold.
fn admit_round(
    state: &mut RunState,
    ctx: &DiscoveryContext<'_>,
    pool: Vec<(usize, CandidateInputs)>,
    cfg: &RunConfig,
) -> Result<usize> {
    let round = state.round;
    let phase = state.phase;
    let mut pending: Vec<(usize, CandidateInputs)> = Vec::new();
    for (idx, inputs) in pool {
        match pre_gate_verdict(&inputs, cfg.kappa_star) {
            Some(v) => state.history.push(record(&inputs, round, phase, idx, None, None, v)),
            None => pending.push((idx, inputs)),
        }
    }
    let mut admitted = 0;
    loop {
        let mut scored = Vec::with_capacity(pending.len());
        let mut survivors = Vec::with_capacity(pending.len());
        for (idx, inputs) in pending {
            let (gain, rho) = score_candidate(state, &inputs.train_col, &inputs.val_col, &ctx.y_train, &ctx.y_val, cfg)?;
            if !gate_passes(rho, cfg.tau) {
                state
                    .history
                    .push(record(&inputs, round, phase, idx, rho, None, Verdict::FailGate));
            } else {
                scored.push((idx, gain, rho));
                survivors.push((idx, inputs));
            }
        }
        pending = survivors;
        if pending.is_empty() {
            break;
        }
        scored.sort_by(|a, b| {
            let lane = |i: usize| pending.iter().find(|(j, _)| *j == i).unwrap().1.candidate.lane;
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(lane(a.0).cmp(&lane(b.0)))
                .then(
                    a.2.unwrap_or(1.0)
                        .partial_cmp(&b.2.unwrap_or(1.0))
                        .unwrap_or(Ordering::Equal),
                )
                .then(a.0.cmp(&b.0))
        });
        let (best_idx, best_gain, best_rho) = scored[0];
        if best_gain > cfg.delta_gain {
            let pos = pending.iter().position(|(i, _)| *i == best_idx).unwrap();
            let (_, inputs) = pending.remove(pos);
            let rec = record(&inputs, round, phase, best_idx, best_rho, Some(best_gain), Verdict::Admitted);
            let new_ba = state.current_val_ba + best_gain;
            admit(state, ctx, &inputs, rec, new_ba)?;
            admitted += 1;
            continue;
        }
        for (idx, gain, rho) in scored {
            let inputs = &pending.iter().find(|(i, _)| *i == idx).unwrap().1;
            state
                .history
                .push(record(inputs, round, phase, idx, rho, Some(gain), Verdict::FailGain));
        }
        break;
    }
    Ok(admitted)
}

fn evidence_for(
    ctx: &DiscoveryContext<'_>,
    state: &RunState,
    lane: Lane,
    cfg: &RunConfig,
) -> Result<Option<Evidence>> {
    let seed = rng::derive_seed(cfg.seed, "round", state.round as u64);
    match state.phase {
        Phase::Bootstrap => {
            let (a, b) = bootstrap_groups(&ctx.train, cfg.k_per_class, rng::derive_seed(seed, lane.as_str(), 0))?;
            Ok(Some(Evidence::Groups {
                group_a: ctx.docs_by_ids(&a),
                group_b: ctx.docs_by_ids(&b),
            }))
        }
        Phase::Residual => {
            let sim = ctx.similarity(lane, cfg)?;
            match sample_band_pairs(
                &ctx.train,
                sim,
                lane,
                cfg.band(lane),
                cfg.pairs_per_call,
                rng::derive_seed(seed, lane.as_str(), 1),
            ) {
                Ok(sample) => {
                    let pairs = sample
                        .pairs
                        .iter()
                        .map(|p| {
                            let pos = ctx.docs_by_ids(std::slice::from_ref(&p.pos_id)).remove(0);
                            let neg = ctx.docs_by_ids(std::slice::from_ref(&p.neg_id)).remove(0);
                            (pos, neg)
                        })
                        .collect();
                    Ok(Some(Evidence::Pairs(pairs)))
                }
                Err(Error::EmptyBand) => Ok(None),
                Err(e) => Err(e),
            }
        }
    }
}

/// One proposal-screen-admission round over both lanes.
pub fn run_round(ctx: &DiscoveryContext<'_>, state: &mut RunState, cfg: &RunConfig) -> Result<usize> {
    let summaries: Vec<(String, String)> = state
        .admitted
        .iter()
        .map(|f| (f.name.clone(), f.definition.clone()))
        .collect();
    let round_seed = rng::derive_seed(cfg.seed, "round", state.round as u64);
    let uncovered = if state.phase == Phase::Residual {
        uncovered_positives(&state.coverage, &ctx.train, cfg.diversity_sample, round_seed)
    } else {
        Vec::new()
    };
    let mut pool: Vec<(usize, CandidateInputs)> = Vec::new();
    let mut next_index = 0;
    for lane in Lane::ALL {
        let Some(evidence) = evidence_for(ctx, state, lane, cfg)? else {
            continue;
        };
        let proposals = match propose_features(
            ctx.gateway,
            &ctx.roles.proposer,
            &evidence,
            lane,
            &summaries,
            &uncovered,
            cfg.max_candidates,
        ) {
            Ok(p) => p,
            // an unusable proposer reply skips the lane for this round
            Err(Error::Unparseable(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        for candidate in proposals {
            let inputs = ctx.evaluate(&candidate, cfg)?;
            pool.push((next_index, inputs));
            next_index += 1;
        }
    }
    admit_round(state, ctx, pool, cfg)
}

/// Run (or resume) discovery until a residual round admits nothing or
/// `max_rounds` is reached. `checkpoint` sees the state after every round.
pub fn run_discovery(
    ctx: &DiscoveryContext<'_>,
    cfg: &RunConfig,
    resume: Option<RunState>,
    mut checkpoint: impl FnMut(&RunState) -> Result<()>,
) -> Result<RunState> {
    let mut state = match resume {
        Some(s) => s,
        None => RunState::initial(ctx, cfg)?,
    };
    while !state.finished && state.round < cfg.max_rounds {
        let admitted = run_round(ctx, &mut state, cfg)?;
        state.round += 1;
        match state.phase {
            Phase::Bootstrap => {
                state.bootstrap_rounds += 1;
                if admitted == 0 || state.bootstrap_rounds >= cfg.max_bootstrap_rounds {
                    state.phase = Phase::Residual;
                }
            }
            Phase::Residual => {
                if admitted == 0 {
                    state.finished = true;
                }
            }
        }
        checkpoint(&state)?;
    }
    state.finished = true;
    Ok(state)
}

/// Single reverse-admission-order pass dropping features whose removal
/// leaves validation balanced accuracy unchanged or better.
pub fn prune(state: &RunState, y_train: &[u8], y_val: &[u8], cfg: &RunConfig) -> Result<RunState> {
    let mut next = state.clone();
    let head = cfg.run_head();
    let mut current = fit_and_score(&next.matrix_train, y_train, &next.matrix_val, y_val, &head)?;
    for k in (0..next.admitted.len()).rev() {
        let train = next.matrix_train.without_column(k);
        let val = next.matrix_val.without_column(k);
        let without = fit_and_score(&train, y_train, &val, y_val, &head)?;
        if without >= current - cfg.prune_epsilon {
            let removed = next.admitted.remove(k);
            next.pruned.push(removed.id);
            next.matrix_train = train;
            next.matrix_val = val;
            current = without;
        }
    }
    next.current_val_ba = current;
    Ok(next)
}

/// Apply an admitted basis to any documents through the labeler role.
pub fn apply_basis(
    ctx: &DiscoveryContext<'_>,
    features: &[NamedFeature],
    docs: &[Document],
    cfg: &RunConfig,
) -> Result<FeatureMatrix> {
    let refs: Vec<&Document> = docs.iter().collect();
    let mut m = FeatureMatrix::empty(docs.iter().map(|d| d.id.clone()).collect());
    for f in features {
        m.push_column(f.id.clone(), ctx.label_docs(&f.as_candidate(), &refs, cfg)?)?;
    }
    Ok(m)
}
