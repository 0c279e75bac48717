//! The three stages over an output directory. Every stage reads only the
//! artifacts of earlier stages, so any suffix of the pipeline can be re-run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rgalign_core::align::{align_train, query_embedding, AlignData, AlignMode, SftExample};
use rgalign_core::bestofn::{
    build_preference_dataset, reward_score, select, selection_stats, CandidateSet, PreferencePair, SelectionStats,
    Strategy,
};
use rgalign_core::diffcore::ops::{cosine_sim, normalize};
use rgalign_core::metrics::MetricReport;
use rgalign_core::qerec::{evaluate_model, train_stage1, QERecConfig, QERecModel, Scorer};
use rgalign_core::reasoner::{baseline_candidate, default_teachers, teacher_generate, ReasonerModel, TeacherSpec};
use rgalign_core::rng::Rng;
use rgalign_core::synthgen::{
    generate, impressions_from_records, users_from_records, DatasetRecord, ImpressionRecord, KnowledgeBase,
    OracleRecord, Split, UserRecord,
};
use rgalign_core::verbalizer::{verbalize, FeatureDictionary};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{AppError, AppResult};
use crate::io::{
    align_log_csv, file_hash, load_checkpoint, metrics_csv, parse_metrics_csv, ranker_log_csv, read_json, read_jsonl,
    read_text, save_checkpoint, write_json, write_jsonl, write_text,
};
use crate::par::par_map;
use crate::report::{render_report, ReportTable};

pub const CONFIG: &str = "config.json";
pub const KB: &str = "data/kb.json";
pub const TRAIN: &str = "data/train.jsonl";
pub const EVAL: &str = "data/eval.jsonl";
pub const ORACLE: &str = "data/oracle.jsonl";
pub const BASELINE: &str = "stage1/baseline.json";
pub const REWARD_MODEL: &str = "stage1/reward_model.json";
pub const QEREC: &str = "stage1/qerec.json";
pub const REASONER: &str = "stage1/reasoner.json";
pub const INDEX: &str = "stage1/qerec_index.json";
pub const STAGE1_METRICS: &str = "stage1/metrics.csv";
pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

const RANKER: &str = "qerec";
const REASONER_KIND: &str = "reasoner";

/// Where a ranker's query embeddings come from; stored with the checkpoint
/// so evaluation can rebuild them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuerySource {
    None,
    Oracle { noise: f64, seed: u64 },
    Reasoner { checkpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerArtifact {
    pub label: String,
    pub queries: QuerySource,
    pub model: QERecModel,
}

/// Directory names of one closed-loop round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Round(pub usize);

impl Round {
    pub fn stage2(self) -> String {
        if self.0 <= 1 {
            "stage2".into()
        } else {
            format!("stage2_iter{}", self.0)
        }
    }

    pub fn stage3(self) -> String {
        if self.0 <= 1 {
            "stage3".into()
        } else {
            format!("stage3_iter{}", self.0)
        }
    }

    pub fn candidates(self) -> String {
        format!("{}/candidates.jsonl", self.stage2())
    }

    pub fn selection(self, s: Strategy) -> String {
        format!("{}/selection_{}.json", self.stage2(), s.as_str())
    }

    pub fn preferences(self, s: Strategy) -> String {
        format!("{}/preferences_{}.jsonl", self.stage2(), s.as_str())
    }

    pub fn sft(self, s: Strategy) -> String {
        format!("{}/sft_{}.jsonl", self.stage2(), s.as_str())
    }

    pub fn aligned(self, m: AlignMode) -> String {
        format!("{}/{}/reasoner.json", self.stage2(), m.as_str())
    }

    pub fn align_summary(self, m: AlignMode) -> String {
        format!("{}/{}/summary.json", self.stage2(), m.as_str())
    }

    pub fn align_log(self, m: AlignMode) -> String {
        format!("{}/{}/align_log.csv", self.stage2(), m.as_str())
    }

    pub fn recalibrated(self, m: AlignMode) -> String {
        format!("{}/{}/qerec.json", self.stage3(), m.as_str())
    }

    pub fn stage3_metrics(self, m: AlignMode) -> String {
        format!("{}/{}/metrics.csv", self.stage3(), m.as_str())
    }
}

/// One invocation's context.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub workers: usize,
}

/// Loaded datasets plus the derived prompts.
pub struct Data {
    pub kb: KnowledgeBase,
    pub users: Vec<UserRecord>,
    pub train: Vec<ImpressionRecord>,
    pub eval: Vec<ImpressionRecord>,
    pub oracle: BTreeMap<u64, OracleRecord>,
    pub contexts: BTreeMap<u64, Vec<u32>>,
}

impl Data {
    pub fn truth(&self) -> BTreeMap<u64, u64> {
        self.oracle.iter().map(|(u, o)| (*u, o.true_intent_id)).collect()
    }

    pub fn context(&self, user_id: u64) -> AppResult<&[u32]> {
        self.contexts
            .get(&user_id)
            .map(Vec::as_slice)
            .ok_or_else(|| AppError::Invalid(format!("no context for user {user_id}")))
    }

    pub fn user(&self, user_id: u64) -> AppResult<&UserRecord> {
        self.users
            .binary_search_by_key(&user_id, |u| u.user_id)
            .map(|i| &self.users[i])
            .map_err(|_| AppError::Invalid(format!("unknown user {user_id}")))
    }
}

/// Stage-2 effect of one alignment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub mode: AlignMode,
    pub strategy: Strategy,
    pub n_sft: usize,
    pub n_pairs: usize,
    /// Phase 2 was skipped for lack of preference pairs.
    pub fallback: bool,
    pub phase2_first_loss: Option<f64>,
    pub reference_fingerprint: String,
    /// Mean reward NDCG of the reasoner's own query embedding on held-out
    /// users, before and after alignment.
    pub reward_eval_before: f64,
    pub reward_eval_after: f64,
    /// The same on the Stage-2 training samples.
    pub reward_train_before: f64,
    pub reward_train_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub strategy: Strategy,
    pub n_samples: usize,
    pub stats: SelectionStats,
    pub n_pairs: usize,
}

impl Run {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>, workers: usize) -> AppResult<Self> {
        cfg.validate()?;
        Ok(Run {
            cfg,
            out: out.into(),
            workers: workers.max(1),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn teachers(&self) -> Vec<TeacherSpec> {
        let mut t = default_teachers(self.cfg.seed);
        for (spec, q) in t.iter_mut().zip(&self.cfg.teacher_qualities) {
            spec.quality = *q;
        }
        t
    }

    /// Writes the datasets, the oracle file, the knowledge base and the
    /// effective configuration.
    pub fn gen_data(&self) -> AppResult<()> {
        let world = generate(&self.cfg.generator)?;
        let records = world.dataset_records();
        let (train, eval): (Vec<DatasetRecord>, Vec<DatasetRecord>) =
            records.into_iter().partition(|r| r.split == Split::Train);
        write_json(&self.path(CONFIG), &self.cfg)?;
        write_json(&self.path(KB), &world.kb)?;
        write_jsonl(&self.path(TRAIN), &train)?;
        write_jsonl(&self.path(EVAL), &eval)?;
        write_jsonl(&self.path(ORACLE), &world.oracle_records()?)
    }

    pub fn load_data(&self) -> AppResult<Data> {
        let kb: KnowledgeBase = read_json(&self.path(KB))?;
        let train_rec: Vec<DatasetRecord> = read_jsonl(&self.path(TRAIN))?;
        let eval_rec: Vec<DatasetRecord> = read_jsonl(&self.path(EVAL))?;
        let oracle: Vec<OracleRecord> = read_jsonl(&self.path(ORACLE))?;
        let all: Vec<DatasetRecord> = train_rec.iter().chain(&eval_rec).cloned().collect();
        let mut users = users_from_records(&all);
        users.sort_by_key(|u| u.user_id);
        let dict = FeatureDictionary::with_intents(&kb, self.cfg.generator.reference_time);
        let tokens = par_map(&users, self.workers, |u| verbalize(u, &dict, self.cfg.vocab).map(|v| v.tokens))?;
        let contexts = users.iter().map(|u| u.user_id).zip(tokens).collect();
        Ok(Data {
            kb,
            users,
            train: impressions_from_records(&train_rec),
            eval: impressions_from_records(&eval_rec),
            oracle: oracle.into_iter().map(|o| (o.user_id, o)).collect(),
            contexts,
        })
    }

    /// `normalize(latent_need + noise)` per user.
    pub fn oracle_queries(&self, data: &Data, noise: f64, seed: u64) -> AppResult<BTreeMap<u64, Vec<f64>>> {
        let root = Rng::new(seed).fork(0x0AC1E);
        data.oracle
            .values()
            .map(|o| {
                let mut r = root.fork(o.user_id);
                let v: Vec<f64> = o.latent_need.iter().map(|x| x + noise * r.normal()).collect();
                Ok((o.user_id, normalize(&v)?))
            })
            .collect()
    }

    pub fn reasoner_queries(&self, data: &Data, reasoner: &ReasonerModel) -> AppResult<BTreeMap<u64, Vec<f64>>> {
        let ids: Vec<u64> = data.users.iter().map(|u| u.user_id).collect();
        let qs = par_map(&ids, self.workers, |id| Ok::<_, AppError>(query_embedding(reasoner, data.context(*id)?)?))?;
        Ok(ids.into_iter().zip(qs).collect())
    }

    pub fn queries_for(&self, data: &Data, source: &QuerySource) -> AppResult<Option<BTreeMap<u64, Vec<f64>>>> {
        Ok(match source {
            QuerySource::None => None,
            QuerySource::Oracle { noise, seed } => Some(self.oracle_queries(data, *noise, *seed)?),
            QuerySource::Reasoner { checkpoint } => {
                let r: ReasonerModel = load_checkpoint(&self.path(checkpoint), REASONER_KIND)?;
                Some(self.reasoner_queries(data, &r)?)
            }
        })
    }

    fn evaluate(&self, data: &Data, model: &QERecModel, queries: Option<&BTreeMap<u64, Vec<f64>>>, label: &str) -> AppResult<MetricReport> {
        Ok(evaluate_model(model, &data.kb, &data.users, &data.eval, queries, Some(&data.truth()), self.cfg.seed, label)?)
    }

    fn train_ranker(
        &self,
        data: &Data,
        cfg: &QERecConfig,
        label: &str,
        source: QuerySource,
        log_path: &str,
    ) -> AppResult<(RankerArtifact, MetricReport)> {
        let queries = self.queries_for(data, &source)?;
        let (model, log) = train_stage1(cfg, &data.kb, &data.users, &data.train, queries.as_ref())?;
        write_text(&self.path(log_path), &ranker_log_csv(&log))?;
        let report = self.evaluate(data, &model, queries.as_ref(), label)?;
        Ok((
            RankerArtifact {
                label: label.into(),
                queries: source,
                model,
            },
            report,
        ))
    }

    /// Trains the query-free baseline, the oracle-query reward model and
    /// the QE-Rec ranker over the frozen initial reasoner.
    pub fn stage1(&self) -> AppResult<Vec<MetricReport>> {
        let data = self.load_data()?;
        let reasoner = ReasonerModel::new(self.cfg.vocab, self.cfg.generator.dim, self.cfg.seed ^ 0x5EA5_0000)?;
        save_checkpoint(&self.path(REASONER), REASONER_KIND, &reasoner)?;
        let base_cfg = QERecConfig {
            omega: 1.0,
            ..self.cfg.qerec.clone()
        };
        let (baseline, r0) = self.train_ranker(&data, &base_cfg, "baseline", QuerySource::None, "stage1/log_baseline.csv")?;
        let oracle = QuerySource::Oracle {
            noise: self.cfg.oracle_query_noise,
            seed: self.cfg.seed,
        };
        let (reward, r1) = self.train_ranker(&data, &self.cfg.qerec, "reward_model", oracle, "stage1/log_reward_model.csv")?;
        let frozen = QuerySource::Reasoner {
            checkpoint: REASONER.into(),
        };
        let (qerec, r2) = self.train_ranker(&data, &self.cfg.qerec, "qerec", frozen, "stage1/log_qerec.csv")?;
        if reasoner.fingerprint() != load_checkpoint::<ReasonerModel>(&self.path(REASONER), REASONER_KIND)?.fingerprint() {
            return Err(AppError::Invalid("reasoner changed during Stage 1".into()));
        }
        save_checkpoint(&self.path(BASELINE), RANKER, &baseline)?;
        save_checkpoint(&self.path(REWARD_MODEL), RANKER, &reward)?;
        save_checkpoint(&self.path(QEREC), RANKER, &qerec)?;
        write_json(&self.path(INDEX), &qerec.model.build_offline_index(&data.kb)?)?;
        let reports = vec![r0, r1, r2];
        write_text(&self.path(STAGE1_METRICS), &metrics_csv(&reports))?;
        Ok(reports)
    }

    fn input_reasoner(&self, round: Round) -> AppResult<ReasonerModel> {
        let path = if round.0 <= 1 {
            REASONER.to_string()
        } else {
            Round(round.0 - 1).aligned(self.cfg.align.mode)
        };
        load_checkpoint(&self.path(&path), REASONER_KIND)
    }

    fn reward_model(&self) -> AppResult<RankerArtifact> {
        load_checkpoint(&self.path(REWARD_MODEL), RANKER)
    }

    /// The clicked intent with the highest latent affinity.
    fn golden_intent(&self, data: &Data, imp: &ImpressionRecord) -> AppResult<Option<u64>> {
        let need = &data
            .oracle
            .get(&imp.user_id)
            .ok_or_else(|| AppError::Invalid(format!("no oracle record for user {}", imp.user_id)))?
            .latent_need;
        let mut best: Option<(f64, u64)> = None;
        for id in imp.clicked() {
            let a = cosine_sim(need, &data.kb.get(id)?.topic_vector)?;
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, id));
            }
        }
        Ok(best.map(|(_, id)| id))
    }

    fn stage2_samples<'d>(&self, data: &'d Data) -> Vec<&'d ImpressionRecord> {
        let usable = data.train.iter().filter(|i| i.clicked().next().is_some());
        match self.cfg.stage2_samples {
            0 => usable.collect(),
            n => usable.take(n).collect(),
        }
    }

    /// Teacher and baseline candidates for every Stage-2 sample, each scored
    /// by the frozen reward model.
    pub fn gen_candidates(&self, round: Round) -> AppResult<usize> {
        let data = self.load_data()?;
        let reasoner = self.input_reasoner(round)?;
        let reward = self.reward_model()?;
        let index = reward.model.build_offline_index(&data.kb)?;
        let scorer = Scorer::new(&reward.model, &index)?;
        let teachers = self.teachers();
        let samples = self.stage2_samples(&data);
        let sets = par_map(&samples, self.workers, |imp| -> AppResult<CandidateSet> {
            let golden_id = self
                .golden_intent(&data, imp)?
                .ok_or_else(|| AppError::Invalid(format!("impression of user {} has no click", imp.user_id)))?;
            let golden = data.kb.get(golden_id)?;
            let ctx = data.context(imp.user_id)?;
            let mut candidates = teachers
                .iter()
                .map(|t| teacher_generate(t, imp.user_id, golden, self.cfg.vocab))
                .collect::<Result<Vec<_>, _>>()?;
            candidates.push(baseline_candidate(&reasoner, ctx)?);
            let z_u = reward.model.user_tower(data.user(imp.user_id)?)?;
            for c in &mut candidates {
                c.ndcg = Some(reward_score(&scorer, &z_u, imp, &c.embedding, self.cfg.reward_k)?);
            }
            Ok(CandidateSet {
                user_id: imp.user_id,
                context: ctx.to_vec(),
                golden_intent: golden_id,
                golden_embedding: golden.semantic_embedding.clone(),
                candidates,
            })
        })?;
        write_jsonl(&self.path(&round.candidates()), &sets)?;
        Ok(sets.len())
    }

    /// Applies `strategy` and writes the SFT winners and preference pairs.
    pub fn select(&self, round: Round, strategy: Strategy) -> AppResult<SelectionSummary> {
        let sets: Vec<CandidateSet> = read_jsonl(&self.path(&round.candidates()))?;
        let outcomes = sets
            .iter()
            .map(|s| select(s, strategy, self.cfg.v4_preference))
            .collect::<Result<Vec<_>, _>>()?;
        let stats = selection_stats(&sets, &outcomes);
        let sft: Vec<SftExample> = sets
            .iter()
            .zip(&outcomes)
            .filter_map(|(s, o)| {
                o.winner.as_ref().filter(|_| o.kept).map(|w| SftExample {
                    user_id: s.user_id,
                    context: s.context.clone(),
                    query: w.tokens.clone(),
                    positive: w.embedding.clone(),
                })
            })
            .collect();
        let paired: Vec<(CandidateSet, _)> = sets.iter().cloned().zip(outcomes).collect();
        let pairs = build_preference_dataset(&paired);
        write_jsonl(&self.path(&round.sft(strategy)), &sft)?;
        write_jsonl(&self.path(&round.preferences(strategy)), &pairs)?;
        let summary = SelectionSummary {
            strategy,
            n_samples: sets.len(),
            stats,
            n_pairs: pairs.len(),
        };
        write_json(&self.path(&round.selection(strategy)), &summary)?;
        Ok(summary)
    }

    /// Mean reward NDCG of the reasoner's own query embedding.
    pub fn mean_reward(&self, data: &Data, reward: &RankerArtifact, reasoner: &ReasonerModel, imps: &[&ImpressionRecord]) -> AppResult<f64> {
        let index = reward.model.build_offline_index(&data.kb)?;
        let scorer = Scorer::new(&reward.model, &index)?;
        let scores = par_map(imps, self.workers, |imp| -> AppResult<f64> {
            let e = query_embedding(reasoner, data.context(imp.user_id)?)?;
            let z_u = reward.model.user_tower(data.user(imp.user_id)?)?;
            Ok(reward_score(&scorer, &z_u, imp, &e, self.cfg.reward_k)?)
        })?;
        if scores.is_empty() {
            return Err(AppError::Invalid("no impressions to score".into()));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    pub fn align(&self, round: Round, mode: AlignMode) -> AppResult<AlignSummary> {
        let strategy = self.cfg.strategy;
        let sft: Vec<SftExample> = read_jsonl(&self.path(&round.sft(strategy)))?;
        let pairs: Vec<PreferencePair> = read_jsonl(&self.path(&round.preferences(strategy)))?;
        if sft.is_empty() {
            return Err(AppError::Invalid(format!("strategy {} kept no samples", strategy.as_str())));
        }
        let data = self.load_data()?;
        let reward = self.reward_model()?;
        let start = self.input_reasoner(round)?;
        let eval: Vec<&ImpressionRecord> = data.eval.iter().filter(|i| i.clicked().next().is_some()).collect();
        let trained: Vec<&ImpressionRecord> = self.stage2_samples(&data);
        let reward_eval_before = self.mean_reward(&data, &reward, &start, &eval)?;
        let reward_train_before = self.mean_reward(&data, &reward, &start, &trained)?;
        let mut policy = start;
        let cfg = rgalign_core::align::AlignConfig {
            mode,
            ..self.cfg.align.clone()
        };
        let (n_sft, n_pairs) = (sft.len(), pairs.len());
        let outcome = align_train(&mut policy, &AlignData { sft, pairs }, &cfg)?;
        let summary = AlignSummary {
            mode,
            strategy,
            n_sft,
            n_pairs,
            fallback: outcome.fallback,
            phase2_first_loss: outcome.phase2_first_loss,
            reference_fingerprint: format!("{:016x}", outcome.reference.fingerprint()),
            reward_eval_before,
            reward_eval_after: self.mean_reward(&data, &reward, &policy, &eval)?,
            reward_train_before,
            reward_train_after: self.mean_reward(&data, &reward, &policy, &trained)?,
        };
        save_checkpoint(&self.path(&round.aligned(mode)), REASONER_KIND, &policy)?;
        write_text(&self.path(&round.align_log(mode)), &align_log_csv(&outcome.log))?;
        write_json(&self.path(&round.align_summary(mode)), &summary)?;
        Ok(summary)
    }

    /// Scores the Stage-1 ranker on the aligned reasoner's queries, then
    /// retrains the ranker from scratch on them.
    pub fn calibrate(&self, round: Round, mode: AlignMode) -> AppResult<Vec<MetricReport>> {
        let data = self.load_data()?;
        let source = QuerySource::Reasoner {
            checkpoint: round.aligned(mode),
        };
        let queries = self.queries_for(&data, &source)?;
        let stage1: RankerArtifact = load_checkpoint(&self.path(QEREC), RANKER)?;
        let drift = self.evaluate(&data, &stage1.model, queries.as_ref(), &format!("{}_aligned", mode.as_str()))?;
        let label = format!("{}_recalibrated", mode.as_str());
        let log = format!("{}/{}/log.csv", round.stage3(), mode.as_str());
        let (ranker, recal) = self.train_ranker(&data, &self.cfg.qerec, &label, source, &log)?;
        save_checkpoint(&self.path(&round.recalibrated(mode)), RANKER, &ranker)?;
        let reports = vec![drift, recal];
        write_text(&self.path(&round.stage3_metrics(mode)), &metrics_csv(&reports))?;
        Ok(reports)
    }

    /// Evaluates a ranker checkpoint on the eval split.
    pub fn eval_checkpoint(&self, checkpoint: &Path) -> AppResult<MetricReport> {
        let art: RankerArtifact = load_checkpoint(checkpoint, RANKER)?;
        let data = self.load_data()?;
        let queries = self.queries_for(&data, &art.queries)?;
        self.evaluate(&data, &art.model, queries.as_ref(), &art.label)
    }

    pub fn rounds(&self) -> impl Iterator<Item = Round> {
        (1..=self.cfg.iterations).map(Round)
    }

    fn modes_for(&self, round: Round) -> Vec<AlignMode> {
        if round.0 <= 1 {
            self.cfg.modes.clone()
        } else {
            vec![self.cfg.align.mode]
        }
    }

    /// Collects the metric rows for the comparison table.
    pub fn report(&self) -> AppResult<ReportTable> {
        let stage1 = parse_metrics_csv(&read_text(&self.path(STAGE1_METRICS))?)?;
        let find = |rows: &[MetricReport], label: &str| {
            rows.iter()
                .find(|r| r.label == label)
                .cloned()
                .ok_or_else(|| AppError::Invalid(format!("missing metric row {label}")))
        };
        let mut rows = vec![
            ("Baseline".to_string(), find(&stage1, "baseline")?),
            ("QE-Rec".to_string(), find(&stage1, "qerec")?),
        ];
        let first = Round(1);
        for (mode, name) in [(AlignMode::SftCl, "RGAlign SFT+CL"), (AlignMode::SftDpo, "RGAlign SFT+DPO")] {
            if self.cfg.modes.contains(&mode) {
                let m = parse_metrics_csv(&read_text(&self.path(&first.stage3_metrics(mode)))?)?;
                rows.push((name.to_string(), find(&m, &format!("{}_aligned", mode.as_str()))?));
            }
        }
        let last = Round(self.cfg.iterations);
        let primary = self.cfg.align.mode;
        let m = parse_metrics_csv(&read_text(&self.path(&last.stage3_metrics(primary)))?)?;
        rows.push(("RGAlign Full".to_string(), find(&m, &format!("{}_recalibrated", primary.as_str()))?));
        rows.push(("Reward model (oracle query)".to_string(), find(&stage1, "reward_model")?));
        let table = ReportTable::new(rows)?;
        let (csv, txt) = render_report(&table);
        write_text(&self.path(REPORT_CSV), &csv)?;
        write_text(&self.path(REPORT_TXT), &txt)?;
        Ok(table)
    }

    /// All stages, the report and the manifest.
    pub fn run_all(&self) -> AppResult<RunManifest> {
        let mut timings = BTreeMap::new();
        let mut timed = |name: String, f: &mut dyn FnMut() -> AppResult<()>| -> AppResult<()> {
            let t = Instant::now();
            f()?;
            timings.insert(name, t.elapsed().as_secs_f64());
            Ok(())
        };
        timed("gen-data".into(), &mut || self.gen_data())?;
        timed("stage1".into(), &mut || self.stage1().map(drop))?;
        for round in self.rounds() {
            let r = round.0;
            timed(format!("stage2-{r}-candidates"), &mut || self.gen_candidates(round).map(drop))?;
            timed(format!("stage2-{r}-select"), &mut || self.select(round, self.cfg.strategy).map(drop))?;
            for mode in self.modes_for(round) {
                timed(format!("stage2-{r}-align-{}", mode.as_str()), &mut || self.align(round, mode).map(drop))?;
                timed(format!("stage3-{r}-{}", mode.as_str()), &mut || self.calibrate(round, mode).map(drop))?;
            }
        }
        timed("report".into(), &mut || self.report().map(drop))?;
        let manifest = self.write_manifest()?;
        write_json(&self.path(TIMINGS), &timings)?;
        Ok(manifest)
    }

    pub fn write_manifest(&self) -> AppResult<RunManifest> {
        let mut files = Vec::new();
        collect_files(&self.out, &self.out, &mut files)?;
        files.sort();
        let mut stages: BTreeMap<String, Vec<Artifact>> = BTreeMap::new();
        for rel in files {
            if rel == MANIFEST || rel == TIMINGS {
                continue;
            }
            let stage = rel.split('/').next().filter(|_| rel.contains('/')).unwrap_or("run").to_string();
            let hash = file_hash(&self.path(&rel))?;
            stages.entry(stage).or_default().push(Artifact { path: rel, hash });
        }
        let mut reports = parse_metrics_csv(&read_text(&self.path(STAGE1_METRICS))?)?;
        for round in self.rounds() {
            for mode in self.modes_for(round) {
                reports.extend(parse_metrics_csv(&read_text(&self.path(&round.stage3_metrics(mode)))?)?);
            }
        }
        let manifest = RunManifest {
            format_version: crate::io::FORMAT_VERSION,
            seed: self.cfg.seed,
            stages,
            reports,
        };
        write_json(&self.path(MANIFEST), &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub hash: String,
}

/// Artifact hashes grouped by top-level directory plus every metric row.
/// Wall-clock times go to a separate file so manifests stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    pub stages: BTreeMap<String, Vec<Artifact>>,
    pub reports: Vec<MetricReport>,
}

impl RunManifest {
    /// Fails on the first artifact whose bytes no longer match.
    pub fn verify(&self, out: &Path) -> AppResult<()> {
        for a in self.stages.values().flatten() {
            if file_hash(&out.join(&a.path))? != a.hash {
                return Err(AppError::HashMismatch { path: a.path.clone() });
            }
        }
        Ok(())
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> AppResult<()> {
    for entry in std::fs::read_dir(dir).map_err(AppError::io(dir))? {
        let path = entry.map_err(AppError::io(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}
