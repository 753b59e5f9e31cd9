//! Stage implementations. Each stage checks the manifest, skips when already
//! current (same config hash, unless forced), reconstructs deterministic
//! inputs from the config, writes its artifacts, and records them.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{sha256_bytes, RunManifest};
use crate::corpus::{
    build_desk_corpus, default_templates, entity_swap, render, write_jsonl, CorpusRecord,
    DeskCorpus, EvalRecord,
};
use crate::error::{Error, Result};
use crate::inversion::{
    annotate, load_inverter, precompute_logits, save_inverter, synthesize_pseudo, train_inverter,
    Inverter, InverterReport, LogitRecord, PseudoSample,
};
use crate::metrics::{evaluate, PrivacyReport, UtilityEval};
use crate::model::{
    load_checkpoint, save_checkpoint, train_lm, Checkpoint, LoraAdapter, Parameters,
};
use crate::rng::derive_seed_indexed;
use crate::tokenizer;
use crate::unlearn::{unlearn, write_trace, UnlearnMode, UnlearnRun};
use crate::TokenSequence;

pub struct Pipeline {
    pub config: ExperimentConfig,
    config_hash: String,
    out: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOutcome {
    pub ran: bool,
    pub elapsed_secs: f64,
}

/// Persisted summary of one unlearning run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: UnlearnMode,
    pub stop: crate::unlearn::StopReason,
    pub checksum_pre: String,
    pub checksum_post: String,
    pub skipped_batches: usize,
    pub data_len: usize,
    pub unlearn_config: crate::unlearn::UnlearnConfig,
    pub baseline: PrivacyReport,
    pub final_report: Option<PrivacyReport>,
}

impl Pipeline {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        let config_hash = sha256_bytes(config.to_toml()?.as_bytes());
        let manifest = RunManifest::load(&out)?;
        Ok(Pipeline {
            config,
            config_hash,
            out,
            manifest,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn out_dir(&self) -> &PathBuf {
        &self.out
    }

    fn desk(&self) -> Result<DeskCorpus> {
        build_desk_corpus(&self.config.corpus, self.config.seed("corpus"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    pub fn inverter_path(&self) -> PathBuf {
        self.out.join("inverter.ckpt")
    }

    fn pseudo_raw_path(&self) -> PathBuf {
        self.out.join("pseudo_raw.jsonl")
    }

    fn pseudo_annotated_path(&self) -> PathBuf {
        self.out.join("pseudo_annotated.jsonl")
    }

    pub fn report_path(&self, snapshot: &str) -> PathBuf {
        self.out.join(format!("report_{snapshot}.json"))
    }

    fn unlearn_dir(&self, mode: UnlearnMode) -> PathBuf {
        self.out.join(format!("unlearn_{}", mode.name()))
    }

    fn skip_or_run(&self, stage: &str, force: bool) -> bool {
        force || !self.manifest.is_current(stage, &self.config_hash)
    }

    /// Stage 0: build and persist the injected corpus and eval split.
    pub fn stage_inject(&mut self, force: bool) -> Result<StageOutcome> {
        if !self.skip_or_run("inject", force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        let desk = self.desk()?;
        desk.private_pool.verify_disjoint(&desk.public_pool)?;

        let mut records: Vec<CorpusRecord> = Vec::new();
        for (s, group) in desk.corpus.unique_samples() {
            records.push(CorpusRecord {
                text: s.text.clone(),
                entities: s.entities.clone(),
                group,
                replication: 10 * group,
            });
        }
        for b in &desk.corpus.background {
            records.push(CorpusRecord {
                text: b.clone(),
                entities: vec![],
                group: 0,
                replication: 1,
            });
        }
        let corpus_path = self.out.join("corpus.jsonl");
        write_jsonl(&corpus_path, &records)?;

        let eval_path = self.out.join("eval_set.jsonl");
        write_jsonl(&eval_path, &desk.eval_set.records)?;

        let bg_eval_path = self.out.join("background_eval.jsonl");
        let bg_records: Vec<CorpusRecord> = desk
            .background_eval
            .iter()
            .map(|b| CorpusRecord {
                text: b.clone(),
                entities: vec![],
                group: 0,
                replication: 1,
            })
            .collect();
        write_jsonl(&bg_eval_path, &bg_records)?;

        let pools_path = self.out.join("pools.json");
        std::fs::write(
            &pools_path,
            serde_json::to_string_pretty(&(&desk.private_pool, &desk.public_pool))?,
        )?;

        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest.record_stage(
            &self.out,
            "inject",
            &self.config_hash,
            &[corpus_path, eval_path, bg_eval_path, pools_path],
            elapsed,
        )?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    /// Stage 1 precondition: memorization induction on the injected corpus.
    pub fn stage_train(&mut self, force: bool) -> Result<StageOutcome> {
        self.manifest.require_stage("inject", &self.config_hash)?;
        if !self.skip_or_run("train", force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        let desk = self.desk()?;
        let mut params: Parameters<f32> = crate::model::init_model(&self.config.effective_model())?;
        let corpus_tokens: Vec<Vec<u32>> = desk
            .corpus
            .sequences
            .iter()
            .map(|s| tokenizer::encode(s))
            .collect();
        let report = train_lm(&mut params, &corpus_tokens, &self.config.effective_train())?;
        params.frozen = true;

        let path = self.model_path();
        save_checkpoint(&path, &Checkpoint { params, adapters: vec![] })?;
        std::fs::write(
            self.out.join("train_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;

        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest.record_stage(
            &self.out,
            "train",
            &self.config_hash,
            &[path, self.out.join("train_report.json")],
            elapsed,
        )?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    pub fn load_model(&self) -> Result<Checkpoint> {
        self.manifest.require_stage("train", &self.config_hash)?;
        load_checkpoint(&self.model_path())
    }

    /// Defender-side inverter training texts: template renders over the
    /// public pool (the defender never sees injected samples).
    pub fn inverter_texts(&self, desk: &DeskCorpus) -> Vec<String> {
        let templates = default_templates();
        let n = self.config.inverter.training_records;
        let seed = self.config.seed("inverter-texts");
        let mut texts = Vec::with_capacity(n);
        for i in 0..n {
            let template = &templates[i % templates.len()];
            let sample = render(
                template,
                &desk.public_pool,
                derive_seed_indexed(seed, "render", i as u64),
            )
            .expect("public pool covers all slot types");
            texts.push(sample.text);
        }
        texts
    }

    /// Stage 1: train the inverter on (text, final-position log-probs) pairs.
    pub fn stage_invert_train(&mut self, force: bool) -> Result<StageOutcome> {
        self.manifest.require_stage("train", &self.config_hash)?;
        if !self.skip_or_run("invert-train", force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        let target = self.load_model()?.params;
        let desk = self.desk()?;
        let texts = self.inverter_texts(&desk);
        let records = precompute_logits(&target, &texts)?;
        let (inverter, report) = train_inverter(
            &records,
            &self.config.effective_inverter(),
            target.config.vocab_size,
        )?;
        let path = self.inverter_path();
        save_inverter(&path, &inverter)?;
        let report_path = self.out.join("inverter_report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest.record_stage(
            &self.out,
            "invert-train",
            &self.config_hash,
            &[path, report_path],
            elapsed,
        )?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    pub fn load_inverter_artifact(&self) -> Result<Inverter> {
        self.manifest.require_stage("invert-train", &self.config_hash)?;
        load_inverter(&self.inverter_path())
    }

    /// Entity-swapped query candidates, `swaps_per_sample` per unique sample.
    pub fn candidates(&self, desk: &DeskCorpus) -> Result<Vec<String>> {
        let seed = self.config.seed("swap");
        let mut out = Vec::new();
        for (idx, (sample, _)) in desk.corpus.unique_samples().iter().enumerate() {
            for k in 0..self.config.corpus.swaps_per_sample {
                let s = entity_swap(
                    sample,
                    &desk.public_pool,
                    derive_seed_indexed(seed, "candidate", (idx * 1000 + k) as u64),
                )?;
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Stage 2a: decode pseudo texts from the target's distributions on
    /// entity-swapped candidates.
    pub fn stage_synthesize(&mut self, force: bool) -> Result<StageOutcome> {
        self.manifest.require_stage("invert-train", &self.config_hash)?;
        if !self.skip_or_run("synthesize", force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        let target = self.load_model()?.params;
        let inverter = self.load_inverter_artifact()?;
        let desk = self.desk()?;
        let candidates = self.candidates(&desk)?;
        let decoded = synthesize_pseudo(&target, &inverter, &candidates)?;

        #[derive(Serialize)]
        struct RawRow<'a> {
            candidate_id: usize,
            candidate: &'a str,
            decoded: &'a str,
        }
        let rows: Vec<RawRow> = candidates
            .iter()
            .zip(&decoded)
            .enumerate()
            .map(|(i, (c, d))| RawRow {
                candidate_id: i,
                candidate: c,
                decoded: d,
            })
            .collect();
        let path = self.pseudo_raw_path();
        write_jsonl(&path, &rows)?;

        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest
            .record_stage(&self.out, "synthesize", &self.config_hash, &[path], elapsed)?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    /// Stage 2b: per-token privacy masks for the decoded pseudo texts. Only
    /// defender-visible knowledge feeds the matcher: the public pool and the
    /// slot-type patterns.
    pub fn stage_annotate(&mut self, force: bool) -> Result<StageOutcome> {
        self.manifest.require_stage("synthesize", &self.config_hash)?;
        if !self.skip_or_run("annotate", force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        #[derive(Deserialize)]
        struct RawRow {
            candidate_id: usize,
            decoded: String,
        }
        let rows: Vec<RawRow> = crate::corpus::read_jsonl(&self.pseudo_raw_path())?;
        let desk = self.desk()?;
        let spec = self.config.effective_annotator();

        let mut samples = Vec::new();
        let mut rejected = 0usize;
        let mut fallbacks = 0usize;
        for row in &rows {
            if row.decoded.is_empty() {
                rejected += 1;
                continue;
            }
            let a = annotate(&row.decoded, &spec, &[&desk.public_pool])?;
            fallbacks += usize::from(a.used_fallback);
            let sample = PseudoSample {
                text: row.decoded.clone(),
                mask: a.mask,
                candidate_id: row.candidate_id,
                annotator_id: a.annotator_id,
            };
            match sample.validate() {
                Ok(()) => samples.push(sample),
                Err(_) => rejected += 1,
            }
        }
        let path = self.pseudo_annotated_path();
        write_jsonl(&path, &samples)?;
        let summary_path = self.out.join("annotate_summary.json");
        std::fs::write(
            &summary_path,
            serde_json::to_string_pretty(&serde_json::json!({
                "total": rows.len(),
                "kept": samples.len(),
                "rejected": rejected,
                "external_fallbacks": fallbacks,
            }))?,
        )?;

        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest.record_stage(
            &self.out,
            "annotate",
            &self.config_hash,
            &[path, summary_path],
            elapsed,
        )?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    pub fn load_pseudo_samples(&self) -> Result<Vec<PseudoSample>> {
        self.manifest.require_stage("annotate", &self.config_hash)?;
        crate::corpus::read_jsonl(&self.pseudo_annotated_path())
    }

    /// Unlearning data per mode: pseudo samples for the data-free run,
    /// ground-truth samples for the oracle and the GA baseline.
    pub fn unlearn_data(&self, mode: UnlearnMode, desk: &DeskCorpus) -> Result<Vec<TokenSequence>> {
        match mode {
            UnlearnMode::Pseudo => {
                let samples = self.load_pseudo_samples()?;
                let data: Vec<TokenSequence> =
                    samples.iter().map(|s| s.to_token_sequence()).collect();
                if data.is_empty() {
                    return Err(Error::Contract("no usable pseudo samples".into()));
                }
                let masked: usize = data
                    .iter()
                    .map(|d| d.mask.iter().filter(|&&m| m == 1).count())
                    .sum();
                if masked == 0 {
                    return Err(Error::Contract(
                        "pseudo samples carry no masked entity tokens".into(),
                    ));
                }
                Ok(data)
            }
            UnlearnMode::Oracle | UnlearnMode::Ga => {
                self.manifest.require_stage("train", &self.config_hash)?;
                Ok(desk
                    .corpus
                    .unique_samples()
                    .iter()
                    .map(|(s, _)| {
                        let spans: Vec<(usize, usize)> =
                            s.entities.iter().map(|e| (e.start, e.end)).collect();
                        TokenSequence::from_text_and_spans(&s.text, &spans)
                    })
                    .collect())
            }
        }
    }

    /// Stage 3: unlearning in the adapter subspace (or the GA baseline).
    pub fn stage_unlearn(&mut self, mode: UnlearnMode, force: bool) -> Result<StageOutcome> {
        let stage = format!("unlearn:{}", mode.name());
        self.manifest.require_stage("train", &self.config_hash)?;
        if mode == UnlearnMode::Pseudo {
            self.manifest.require_stage("annotate", &self.config_hash)?;
        }
        if !self.skip_or_run(&stage, force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        let target = self.load_model()?.params;
        let desk = self.desk()?;
        let data = self.unlearn_data(mode, &desk)?;
        let cfg = self.config.effective_unlearn(mode);
        let decode = self.config.effective_decode();
        let utility = UtilityEval::Perplexity {
            texts: desk.background_eval.clone(),
        };
        let eval_set = desk.eval_set.clone();
        let hook = |adapter: &LoraAdapter<f32>| {
            evaluate(&target, Some(adapter), &eval_set, &decode, &utility, mode.name())
        };
        let run = unlearn(&target, &data, &cfg, &hook)?;
        self.persist_unlearn_run(mode, &target, &run, data.len(), &cfg)?;

        let elapsed = t0.elapsed().as_secs_f64();
        let dir = self.unlearn_dir(mode);
        self.manifest.record_stage(
            &self.out,
            &stage,
            &self.config_hash,
            &[
                dir.join("checkpoint.ckpt"),
                dir.join("trace.jsonl"),
                dir.join("run.json"),
            ],
            elapsed,
        )?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    fn persist_unlearn_run(
        &self,
        mode: UnlearnMode,
        target: &Parameters<f32>,
        run: &UnlearnRun,
        data_len: usize,
        cfg: &crate::unlearn::UnlearnConfig,
    ) -> Result<()> {
        let dir = self.unlearn_dir(mode);
        std::fs::create_dir_all(&dir)?;
        save_checkpoint(
            &dir.join("checkpoint.ckpt"),
            &Checkpoint {
                params: target.clone(),
                adapters: vec![(mode.name().to_string(), run.adapter.clone())],
            },
        )?;
        write_trace(&dir.join("trace.jsonl"), &run.trace)?;
        let summary = RunSummary {
            mode,
            stop: run.stop,
            checksum_pre: run.checksum_pre.clone(),
            checksum_post: run.checksum_post.clone(),
            skipped_batches: run.skipped_batches,
            data_len,
            unlearn_config: cfg.clone(),
            baseline: run.baseline.clone(),
            final_report: run.trace.last().map(|s| s.report.clone()),
        };
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }

    pub fn load_unlearned(&self, mode: UnlearnMode) -> Result<(Parameters<f32>, LoraAdapter<f32>)> {
        self.manifest
            .require_stage(&format!("unlearn:{}", mode.name()), &self.config_hash)?;
        let ckpt = load_checkpoint(&self.unlearn_dir(mode).join("checkpoint.ckpt"))?;
        let adapter = ckpt
            .adapters
            .into_iter()
            .find(|(label, _)| label == mode.name())
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Artifact(format!("no '{}' adapter in checkpoint", mode.name())))?;
        Ok((ckpt.params, adapter))
    }

    /// Stage 4: privacy reports before and after unlearning.
    pub fn stage_eval(&mut self, mode: Option<UnlearnMode>, force: bool) -> Result<StageOutcome> {
        let stage = match mode {
            None => "eval".to_string(),
            Some(m) => format!("eval:{}", m.name()),
        };
        self.manifest.require_stage("train", &self.config_hash)?;
        if !self.skip_or_run(&stage, force) {
            return Ok(StageOutcome { ran: false, elapsed_secs: 0.0 });
        }
        let t0 = Instant::now();
        let target = self.load_model()?.params;
        let desk = self.desk()?;
        let decode = self.config.effective_decode();
        let utility = UtilityEval::Perplexity {
            texts: desk.background_eval.clone(),
        };

        let mut artifacts = Vec::new();
        let base = evaluate(&target, None, &desk.eval_set, &decode, &utility, "base")?;
        let base_path = self.report_path("base");
        std::fs::write(&base_path, serde_json::to_string_pretty(&base)?)?;
        artifacts.push(base_path);

        let modes: Vec<UnlearnMode> = match mode {
            Some(m) => vec![m],
            None => [UnlearnMode::Pseudo, UnlearnMode::Oracle, UnlearnMode::Ga]
                .into_iter()
                .filter(|m| {
                    self.manifest
                        .is_current(&format!("unlearn:{}", m.name()), &self.config_hash)
                })
                .collect(),
        };
        for m in modes {
            let (params, adapter) = self.load_unlearned(m)?;
            let report = evaluate(
                &params,
                Some(&adapter),
                &desk.eval_set,
                &decode,
                &utility,
                m.name(),
            )?;
            let path = self.report_path(m.name());
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            artifacts.push(path);
        }

        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest
            .record_stage(&self.out, &stage, &self.config_hash, &artifacts, elapsed)?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    /// Stage 5: Markdown comparison across this run (and any extra run dirs).
    pub fn stage_report(&mut self, extra_runs: &[PathBuf]) -> Result<StageOutcome> {
        let has_eval = self
            .manifest
            .stages
            .keys()
            .any(|k| k == "eval" || k.starts_with("eval:"));
        if !has_eval {
            return Err(Error::MissingStage("eval".into()));
        }
        let t0 = Instant::now();
        let mut dirs = vec![self.out.clone()];
        dirs.extend_from_slice(extra_runs);
        let markdown = super::report::render_report(&dirs)?;
        let path = self.out.join("report.md");
        std::fs::write(&path, markdown)?;
        let elapsed = t0.elapsed().as_secs_f64();
        self.manifest
            .record_stage(&self.out, "report", &self.config_hash, &[path], elapsed)?;
        Ok(StageOutcome { ran: true, elapsed_secs: elapsed })
    }

    /// Reconstructed eval set (exposed for tooling and tests).
    pub fn eval_records(&self) -> Result<Vec<EvalRecord>> {
        Ok(self.desk()?.eval_set.records)
    }

    /// Inverter quality probe on freshly rendered held-out defender texts.
    pub fn inverter_quality_probe(&self, n: usize) -> Result<crate::inversion::QualityReport> {
        let target = self.load_model()?.params;
        let inverter = self.load_inverter_artifact()?;
        let desk = self.desk()?;
        let templates = default_templates();
        let seed = self.config.seed("inverter-quality");
        let mut texts = Vec::with_capacity(n);
        for i in 0..n {
            let template = &templates[i % templates.len()];
            let sample = render(
                template,
                &desk.public_pool,
                derive_seed_indexed(seed, "probe", i as u64),
            )?;
            texts.push(sample.text);
        }
        let records: Vec<LogitRecord> = precompute_logits(&target, &texts)?;
        let pairs: Vec<(String, String)> = records
            .iter()
            .map(|r| {
                crate::inversion::invert(&inverter, &r.log_probs, inverter.config.max_len)
                    .map(|decoded| (r.text.clone(), decoded))
            })
            .collect::<Result<Vec<_>>>()?;
        crate::inversion::inversion_quality(&pairs)
    }

    /// Reports persisted by eval, keyed by snapshot id, if present on disk.
    pub fn load_report(&self, snapshot: &str) -> Result<PrivacyReport> {
        let path = self.report_path(snapshot);
        if !path.exists() {
            return Err(Error::MissingStage(format!("eval ({snapshot})")));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn load_inverter_report(&self) -> Result<InverterReport> {
        let path = self.out.join("inverter_report.json");
        if !path.exists() {
            return Err(Error::MissingStage("invert-train".into()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
