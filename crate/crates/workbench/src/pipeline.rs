//! The workflows behind each subcommand.
//!
//! Every training workflow runs once per configured seed and writes one
//! report per seed plus a mean/std aggregate per experiment cell. Paths in
//! the config may contain `{seed}`, which is replaced by the current seed.

use std::fs;
use std::path::{Path, PathBuf};

use sdcw_core::data::{
    build_vocab, encode_sentences, parse_conll, preprocess_corpus, synth_ner_corpus,
    synth_text_corpus, write_conll, Example, Sentence, TagSet, Vocabulary, IGNORE_INDEX,
};
use sdcw_core::distill::{
    compression_ratio, distill_task_agnostic, distill_task_specific, distillation_grid,
    init_student, DistillMode, DistillSpec, StudentSpec,
};
use sdcw_core::model::{finetune, pretrain_mlm, MlmMasking, TrainTrace};
use sdcw_core::prune::{
    apply_mask, compute_mask, gradual_prune_finetune, masked_finetune, prunable_scope, PruneMask,
    PruneSchedule,
};
use sdcw_core::quant::{quantize_model_dynamic, quantize_model_int8_mixed};
use sdcw_core::EncoderModel;

use crate::config::{ExperimentConfig, QuantKind, ScheduleKind};
use crate::error::{WbError, WbResult};
use crate::eval::{
    bench_quantized, compare, eval_batches, evaluate, measure_inference_time, BatchSpec, EvalReport,
};
use crate::persist::{load_bundle, save_bundle, serialized_size, ModelFile, Weights};
use crate::report::{
    aggregate_runs, latency_rows, load_reports, prune_rows, run_rows, write_csv, write_json,
    RunReport,
};

/// Seed stream for classifier heads re-initialized on a new tag set.
const HEAD_STREAM: u64 = 0x4ead;

pub fn seeded(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

/// File stem with any `{seed}` placeholder (and its separator) removed.
fn model_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    stem.replace("-seed{seed}", "").replace("{seed}", "")
}

fn read_text(path: &Path) -> WbResult<String> {
    fs::read_to_string(path).map_err(|e| WbError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> WbResult<()> {
    fs::write(path, text).map_err(|e| WbError::io(path, e))
}

/// A model to train from: loaded from `model` or freshly initialized.
struct Base {
    model: EncoderModel,
    vocab: Vocabulary,
    tags: TagSet,
    mask: Option<PruneMask>,
}

/// One experiment run writing into an output directory.
pub struct Session<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: &'a Path,
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out: &'a Path) -> Self {
        Self {
            cfg,
            out,
            written: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn tagset(&self) -> TagSet {
        TagSet::new(&self.cfg.entity_types())
    }

    fn spec(&self) -> BatchSpec {
        BatchSpec {
            max_seq_len: self.cfg.train.max_seq_len,
            batch_size: self.cfg.eval_batch_size,
        }
    }

    fn seeds(&self) -> Vec<u64> {
        self.cfg.train.seeds.clone()
    }

    /// Seeds for workflows that only transform a given model: all of them
    /// when the model path is per-seed, otherwise just the first.
    fn model_seeds(&self, path: &Path) -> Vec<u64> {
        if path.to_string_lossy().contains("{seed}") {
            self.seeds()
        } else {
            vec![self.cfg.train.seeds[0]]
        }
    }

    fn load_split(&mut self, key: &str, path: &Option<PathBuf>) -> WbResult<Vec<Sentence>> {
        let path = self.cfg.require(path, key)?;
        let corpus = parse_conll(&read_text(path)?, &self.cfg.entity_types())
            .map_err(|e| WbError::Input(format!("{}: {e}", path.display())))?;
        if corpus.sentences.is_empty() {
            return Err(WbError::Input(format!("{}: no sentences", path.display())));
        }
        if !corpus.issues.is_empty() {
            self.warnings.push(format!(
                "{}: {} I- tags without a preceding B-/I- of the same type",
                file_name(path),
                corpus.issues.len()
            ));
        }
        Ok(corpus.sentences)
    }

    fn load_dense(
        &self,
        path: &Path,
    ) -> WbResult<(EncoderModel, Option<PruneMask>, Vocabulary, TagSet)> {
        let (file, vocab, tags) = load_bundle(path)?;
        match file.weights {
            Weights::Dense(m) => Ok((m, file.mask, vocab, tags)),
            Weights::Quantized(_) => Err(WbError::config(format!(
                "{} is quantized; this command needs an fp32 model",
                path.display()
            ))),
        }
    }

    fn base_model(&mut self, train: &[Sentence], seed: u64) -> WbResult<Base> {
        let tags = self.tagset();
        match &self.cfg.model_path {
            Some(path) => {
                let path = seeded(path, seed);
                let (mut model, mask, vocab, model_tags) = self.load_dense(&path)?;
                if model_tags != tags {
                    model.reset_head(tags.len(), seed ^ HEAD_STREAM)?;
                    self.warnings.push(format!(
                        "{}: tag set differs from entity_types; classifier re-initialized",
                        file_name(&path)
                    ));
                }
                Ok(Base {
                    model,
                    vocab,
                    tags,
                    mask,
                })
            }
            None => {
                let vocab = build_vocab(
                    train
                        .iter()
                        .flat_map(|s| s.tokens.iter().map(String::as_str)),
                    self.cfg.max_vocab,
                )?;
                let config = sdcw_core::EncoderConfig {
                    vocab_size: vocab.len(),
                    num_classes: tags.len(),
                    ..self.cfg.encoder
                };
                Ok(Base {
                    model: EncoderModel::init(config, seed)?,
                    vocab,
                    tags,
                    mask: None,
                })
            }
        }
    }

    /// Evaluate on the test split with timing.
    fn score(
        &self,
        file: &ModelFile,
        vocab: &Vocabulary,
        tags: &TagSet,
        data: &[Sentence],
    ) -> WbResult<EvalReport> {
        let spec = self.spec();
        let mut report = evaluate(file, vocab, tags, &self.cfg.dataset_name(), data, spec)?;
        let batches = eval_batches(data, vocab, tags, spec)?;
        report.timing = Some(measure_inference_time(
            file.weights.classifier(),
            &batches,
            self.cfg.reps,
            self.cfg.warmup,
        )?);
        Ok(report)
    }

    fn save(
        &mut self,
        stem: &str,
        file: &ModelFile,
        vocab: &Vocabulary,
        tags: &TagSet,
    ) -> WbResult<String> {
        let path = self.out.join(format!("{stem}.sdcw"));
        save_bundle(file, &path, vocab, tags)?;
        self.written.push(path.clone());
        Ok(file_name(&path))
    }

    fn write_report(&mut self, report: &RunReport) -> WbResult<()> {
        let path = self.out.join(format!("{}.json", report.stem()));
        write_json(&path, report)?;
        self.written.push(path);
        Ok(())
    }

    /// Write one cell's per-seed reports and their aggregate.
    fn emit_cell(&mut self, mut reports: Vec<RunReport>, seeds: &[u64]) -> WbResult<()> {
        for r in &mut reports {
            r.warnings.append(&mut self.warnings);
            self.write_report(r)?;
        }
        let agg = aggregate_runs(&reports, seeds)?;
        let path = self.out.join(format!("{}.json", agg.stem()));
        write_json(&path, &agg)?;
        self.written.push(path);
        Ok(())
    }

    fn report(&self, command: &str, tag: &str, seed: u64) -> RunReport {
        RunReport::new(
            command,
            self.cfg.preset.name(),
            tag,
            seed,
            &self.cfg.dataset_name(),
        )
    }

    fn dev_metric(
        &self,
        report: &mut RunReport,
        file: &ModelFile,
        base: (&Vocabulary, &TagSet),
        dev: &Option<Vec<Sentence>>,
    ) -> WbResult<()> {
        if let Some(dev) = dev {
            let e = evaluate(file, base.0, base.1, "dev", dev, self.spec())?;
            report.metrics.insert("dev_f1".into(), e.f1 as f64);
        }
        Ok(())
    }

    fn optional_dev(&mut self) -> WbResult<Option<Vec<Sentence>>> {
        match self.cfg.dev_path.clone() {
            Some(p) => self.load_split("dev", &Some(p)).map(Some),
            None => Ok(None),
        }
    }
}

fn fine_tune(
    base: &mut Base,
    examples: &[Example],
    cfg: &ExperimentConfig,
    seed: u64,
) -> WbResult<TrainTrace> {
    Ok(match &base.mask {
        Some(mask) => masked_finetune(&mut base.model, mask, examples, &cfg.train, seed)?,
        None => finetune(&mut base.model, examples, &cfg.train, seed)?,
    })
}

fn dense_file(model: EncoderModel, mask: Option<PruneMask>) -> ModelFile {
    let file = ModelFile::dense(model);
    match mask {
        Some(m) => file.with_mask(m),
        None => file,
    }
}

/// Generated train/dev/test CoNLL splits and a raw pretraining corpus.
pub fn synth_data(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let types = cfg.entity_types();
    let splits = synth_ner_corpus(cfg.data_seed, cfg.n_sentences, &types)?;
    fs::create_dir_all(s.out).map_err(|e| WbError::io(s.out, e))?;
    let mut report = RunReport::new(
        "synth-data",
        cfg.preset.name(),
        "",
        cfg.data_seed,
        "synthetic",
    );
    for (name, part) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        let path = s.out.join(format!("{name}.conll"));
        write_text(&path, &write_conll(part))?;
        s.written.push(path);
        report
            .metrics
            .insert(format!("{name}_sentences"), part.len() as f64);
    }
    let lines = synth_text_corpus(cfg.data_seed, cfg.corpus_lines, &types)?;
    let path = s.out.join("corpus.txt");
    write_text(&path, &(lines.join("\n") + "\n"))?;
    s.written.push(path);
    report
        .metrics
        .insert("corpus_lines".into(), lines.len() as f64);
    report.set("entity_types", types.join(","));
    s.write_report(&report)
}

/// Raw text lines, cleaned and mapped to masked-LM examples.
fn corpus_examples(
    path: &Path,
    vocab: Option<&Vocabulary>,
    max_vocab: usize,
) -> WbResult<(Vec<Example>, Vocabulary, usize)> {
    let text = read_text(path)?;
    let kept = preprocess_corpus(text.lines());
    if kept.is_empty() {
        return Err(WbError::Input(format!(
            "{}: no lines survive cleaning",
            path.display()
        )));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(kept.iter().flat_map(|l| l.split_whitespace()), max_vocab)?,
    };
    let examples = kept
        .iter()
        .map(|l| {
            let token_ids = vocab.encode(l.split_whitespace());
            Example {
                label_ids: vec![IGNORE_INDEX; token_ids.len()],
                token_ids,
            }
        })
        .collect();
    Ok((examples, vocab, kept.len()))
}

pub fn pretrain(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let corpus = cfg.require(&cfg.corpus_path, "corpus")?;
    let (examples, vocab, kept) = corpus_examples(corpus, None, cfg.max_vocab)?;
    let tags = s.tagset();
    let config = sdcw_core::EncoderConfig {
        vocab_size: vocab.len(),
        num_classes: tags.len(),
        ..cfg.encoder
    };
    let mut reports = Vec::new();
    for seed in s.seeds() {
        let mut model = EncoderModel::init(config, seed)?;
        let trace = pretrain_mlm(
            &mut model,
            &examples,
            &cfg.train,
            MlmMasking::default(),
            seed,
        )?;
        let mut report = s.report("pretrain", "mlm", seed);
        report.dataset = model_label(corpus);
        report.train_losses = trace.epoch_losses;
        report.metrics.insert("corpus_lines".into(), kept as f64);
        report
            .metrics
            .insert("params".into(), model.count_params() as f64);
        report.model_file =
            Some(s.save(&report.stem(), &ModelFile::dense(model), &vocab, &tags)?);
        reports.push(report);
    }
    s.emit_cell(reports, &cfg.train.seeds)
}

pub fn finetune_cmd(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let train = s.load_split("train", &cfg.train_path)?;
    let test = s.load_split("test", &cfg.test_path)?;
    let dev = s.optional_dev()?;
    let tag = cfg
        .model_path
        .as_deref()
        .map_or_else(|| "scratch".to_string(), model_label);
    let mut reports = Vec::new();
    for seed in s.seeds() {
        let mut base = s.base_model(&train, seed)?;
        let examples = encode_sentences(&train, &base.vocab, &base.tags)?;
        let trace = fine_tune(&mut base, &examples, cfg, seed)?;
        let file = dense_file(base.model, base.mask);
        let mut report = s.report("finetune", &tag, seed);
        report.train_losses = trace.epoch_losses;
        report.eval = Some(s.score(&file, &base.vocab, &base.tags, &test)?);
        s.dev_metric(&mut report, &file, (&base.vocab, &base.tags), &dev)?;
        report.model_file = Some(s.save(&report.stem(), &file, &base.vocab, &base.tags)?);
        reports.push(report);
    }
    s.emit_cell(reports, &cfg.train.seeds)
}

fn schedule(cfg: &ExperimentConfig) -> Option<PruneSchedule> {
    match cfg.schedule {
        ScheduleKind::Before => Some(PruneSchedule::BeforeFinetune),
        ScheduleKind::After => Some(PruneSchedule::AfterFinetune),
        ScheduleKind::During => Some(PruneSchedule::DuringFinetune {
            start_epoch: cfg.prune_start_epoch,
            end_epoch: cfg.prune_end_epoch.unwrap_or(cfg.train.epochs),
            steps: cfg.prune_steps,
        }),
        ScheduleKind::OneShot => None,
    }
}

pub fn prune(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    if cfg.schedule == ScheduleKind::OneShot && cfg.model_path.is_none() {
        return Err(WbError::config("schedule = oneshot needs a trained model"));
    }
    let train = s.load_split("train", &cfg.train_path)?;
    let test = s.load_split("test", &cfg.test_path)?;
    for &p in &cfg.sparsity {
        let tag = format!("p{p}-{}", cfg.schedule.name());
        let mut reports = Vec::new();
        for seed in s.seeds() {
            let mut base = s.base_model(&train, seed)?;
            let scope = prunable_scope(&base.model);
            let mut report = s.report("prune", &tag, seed);
            report
                .set("sparsity", p)
                .set("schedule", cfg.schedule.name());
            let mask = match schedule(cfg) {
                Some(sched) => {
                    let examples = encode_sentences(&train, &base.vocab, &base.tags)?;
                    let outcome = gradual_prune_finetune(
                        &mut base.model,
                        p,
                        sched,
                        &scope,
                        &examples,
                        &cfg.train,
                        seed,
                    )?;
                    report.train_losses = outcome.trace.epoch_losses;
                    report
                        .metrics
                        .insert("mask_updates".into(), outcome.sparsity_trace.len() as f64);
                    outcome.mask
                }
                None => {
                    let before = ModelFile::dense(base.model.clone());
                    report.baseline = Some(s.score(&before, &base.vocab, &base.tags, &test)?);
                    let mask = compute_mask(&base.model, p, &scope)?;
                    apply_mask(&mut base.model, &mask)?;
                    mask
                }
            };
            report
                .metrics
                .insert("mask_threshold".into(), mask.threshold as f64);
            let file = dense_file(base.model, Some(mask));
            let eval = s.score(&file, &base.vocab, &base.tags, &test)?;
            if let Some(b) = &report.baseline {
                report.comparison = Some(compare(b, &eval)?);
            }
            report.eval = Some(eval);
            report.model_file = Some(s.save(&report.stem(), &file, &base.vocab, &base.tags)?);
            reports.push(report);
        }
        s.emit_cell(reports, &cfg.train.seeds)?;
    }
    Ok(())
}

fn distill_spec(cfg: &ExperimentConfig, temperature: f32) -> DistillSpec {
    let base = match cfg.distill_mode {
        DistillMode::TaskAgnostic => DistillSpec::task_agnostic(temperature),
        DistillMode::TaskSpecific => DistillSpec::task_specific(),
    };
    DistillSpec {
        temperature,
        alpha_soft: cfg.alpha_soft,
        alpha_hard: 1.0 - cfg.alpha_soft,
        ..base
    }
}

pub fn distill(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let teacher_path = cfg.require(&cfg.teacher_path, "teacher")?.to_path_buf();
    let teacher_name = model_label(&teacher_path);
    let first = cfg.train.seeds[0];
    let (teacher0, ..) = s.load_dense(&seeded(&teacher_path, first))?;
    let students: Vec<StudentSpec> = match (&cfg.student_init_path, cfg.distill_mode) {
        (Some(p), DistillMode::TaskSpecific) => {
            let (m, ..) = s.load_dense(&seeded(p, first))?;
            vec![StudentSpec {
                num_layers: m.config().num_layers,
                num_heads: m.config().num_heads,
            }]
        }
        (Some(_), DistillMode::TaskAgnostic) => {
            return Err(WbError::config(
                "student_init only applies to mode = specific",
            ))
        }
        (None, _) => cfg
            .student_layers
            .iter()
            .flat_map(|&l| {
                cfg.student_heads.iter().map(move |&h| StudentSpec {
                    num_layers: l,
                    num_heads: h,
                })
            })
            .collect(),
    };
    let grid = distillation_grid(
        cfg.distill_mode,
        &[(teacher_name.as_str(), *teacher0.config())],
        &students,
        &cfg.temperature,
    )
    .map_err(|e| WbError::config(format!("student grid: {e}")))?;
    drop(teacher0);

    let tags = s.tagset();
    let (train, test) = match cfg.distill_mode {
        DistillMode::TaskSpecific => (
            Some(s.load_split("train", &cfg.train_path)?),
            Some(s.load_split("test", &cfg.test_path)?),
        ),
        DistillMode::TaskAgnostic => (
            cfg.train_path
                .clone()
                .map(|p| s.load_split("train", &Some(p)))
                .transpose()?,
            cfg.test_path
                .clone()
                .map(|p| s.load_split("test", &Some(p)))
                .transpose()?,
        ),
    };

    for cell in &grid {
        let mut reports = Vec::new();
        for seed in s.seeds() {
            let (teacher, _, vocab, teacher_tags) = s.load_dense(&seeded(&teacher_path, seed))?;
            let mut report = s.report("distill", &cell.name(), seed);
            report
                .set("mode", cfg.distill_mode.name())
                .set("temperature", cell.temperature)
                .set("student", cell.student.label())
                .set("teacher", &teacher_name);
            let spec = distill_spec(cfg, cell.temperature);
            let mut student = match &cfg.student_init_path {
                Some(p) => {
                    let path = seeded(p, seed);
                    let (mut m, _, student_vocab, _) = s.load_dense(&path)?;
                    if student_vocab != vocab {
                        return Err(WbError::config(format!(
                            "{} and the teacher use different vocabularies",
                            file_name(&path)
                        )));
                    }
                    if m.config().num_classes != tags.len() {
                        m.reset_head(tags.len(), seed ^ HEAD_STREAM)?;
                    }
                    m
                }
                None => init_student(&teacher, cell.student, seed)?,
            };
            let student_stem = report.stem();
            match cfg.distill_mode {
                DistillMode::TaskAgnostic => {
                    let corpus = cfg.require(&cfg.corpus_path, "corpus")?;
                    let (examples, ..) = corpus_examples(corpus, Some(&vocab), cfg.max_vocab)?;
                    let trace = distill_task_agnostic(
                        &teacher,
                        &mut student,
                        &examples,
                        &spec,
                        &cfg.train,
                        seed,
                    )?;
                    report.train_losses = trace.epoch_losses;
                    report.model_file = Some(s.save(
                        &student_stem,
                        &ModelFile::dense(student.clone()),
                        &vocab,
                        &teacher_tags,
                    )?);
                    if let (Some(train), Some(test)) = (&train, &test) {
                        student.reset_head(tags.len(), seed ^ HEAD_STREAM)?;
                        let examples = encode_sentences(train, &vocab, &tags)?;
                        let trace = finetune(&mut student, &examples, &cfg.train, seed)?;
                        report.metrics.insert(
                            "downstream_final_loss".into(),
                            trace.epoch_losses.last().copied().unwrap_or(0.0) as f64,
                        );
                        report.eval = Some(s.score(
                            &ModelFile::dense(student.clone()),
                            &vocab,
                            &tags,
                            test,
                        )?);
                    }
                }
                DistillMode::TaskSpecific => {
                    if teacher_tags != tags {
                        return Err(WbError::config(format!(
                            "teacher tags {:?} differ from entity_types {:?}",
                            teacher_tags.labels(),
                            tags.labels()
                        )));
                    }
                    let (train, test) = (
                        train.as_deref().unwrap_or_default(),
                        test.as_deref().unwrap_or_default(),
                    );
                    let examples = encode_sentences(train, &vocab, &tags)?;
                    let trace = distill_task_specific(
                        &teacher,
                        &mut student,
                        &examples,
                        &spec,
                        &cfg.train,
                        seed,
                    )?;
                    report.train_losses = trace.epoch_losses;
                    let teacher_eval =
                        s.score(&ModelFile::dense(teacher.clone()), &vocab, &tags, test)?;
                    let file = ModelFile::dense(student.clone());
                    let eval = s.score(&file, &vocab, &tags, test)?;
                    report.comparison = Some(compare(&teacher_eval, &eval)?);
                    report.baseline = Some(teacher_eval);
                    report.eval = Some(eval);
                    report.model_file = Some(s.save(&student_stem, &file, &vocab, &tags)?);
                }
            }
            report
                .metrics
                .insert("teacher_params".into(), teacher.count_params() as f64);
            report
                .metrics
                .insert("student_params".into(), student.count_params() as f64);
            report.metrics.insert(
                "compression_ratio".into(),
                compression_ratio(teacher.config(), student.config()),
            );
            reports.push(report);
        }
        s.emit_cell(reports, &cfg.train.seeds)?;
    }
    Ok(())
}

pub fn quantize(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let model_path = cfg.require(&cfg.model_path, "model")?.to_path_buf();
    let test = match cfg.test_path.clone() {
        Some(p) => Some(s.load_split("test", &Some(p))?),
        None => None,
    };
    let tag = match cfg.quant_mode {
        QuantKind::Dynamic => QuantKind::Dynamic.name().to_string(),
        QuantKind::Mixed => format!("{}-t{}", QuantKind::Mixed.name(), cfg.outlier_threshold),
    };
    let seeds = s.model_seeds(&model_path);
    let mut reports = Vec::new();
    for &seed in &seeds {
        let (model, _, vocab, tags) = s.load_dense(&seeded(&model_path, seed))?;
        let quantized = match cfg.quant_mode {
            QuantKind::Dynamic => quantize_model_dynamic(&model)?,
            QuantKind::Mixed => quantize_model_int8_mixed(&model, cfg.outlier_threshold)?,
        };
        let baseline = ModelFile::dense(model);
        let file = ModelFile::quantized(quantized);
        let mut report = s.report("quantize", &tag, seed);
        report.set("quant_mode", cfg.quant_mode.name());
        if cfg.quant_mode == QuantKind::Mixed {
            report.set("outlier_threshold", cfg.outlier_threshold);
        }
        let (before, after) = (serialized_size(&baseline)?, serialized_size(&file)?);
        report
            .metrics
            .insert("baseline_bytes".into(), before as f64);
        report.metrics.insert("model_bytes".into(), after as f64);
        report.metrics.insert(
            "size_reduction_pct".into(),
            100.0 * (before as f64 - after as f64) / before as f64,
        );
        if let Some(test) = &test {
            let b = s.score(&baseline, &vocab, &tags, test)?;
            let e = s.score(&file, &vocab, &tags, test)?;
            report.comparison = Some(compare(&b, &e)?);
            report.baseline = Some(b);
            report.eval = Some(e);
        }
        report.model_file = Some(s.save(&report.stem(), &file, &vocab, &tags)?);
        reports.push(report);
    }
    s.emit_cell(reports, &seeds)
}

pub fn eval(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let model_path = cfg.require(&cfg.model_path, "model")?.to_path_buf();
    let test = s.load_split("test", &cfg.test_path)?;
    let seeds = s.model_seeds(&model_path);
    let mut reports = Vec::new();
    for &seed in &seeds {
        let (file, vocab, tags) = load_bundle(&seeded(&model_path, seed))?;
        let mut report = s.report("eval", &model_label(&model_path), seed);
        report.eval = Some(s.score(&file, &vocab, &tags, &test)?);
        reports.push(report);
    }
    s.emit_cell(reports, &seeds)
}

pub fn bench(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let model_path = cfg.require(&cfg.model_path, "model")?.to_path_buf();
    let test = s.load_split("test", &cfg.test_path)?;
    let seeds = s.model_seeds(&model_path);
    let mut reports = Vec::new();
    for &seed in &seeds {
        let (model, _, vocab, tags) = s.load_dense(&seeded(&model_path, seed))?;
        let mut report = s.report("bench", &model_label(&model_path), seed);
        report.set("outlier_threshold", cfg.outlier_threshold);
        report.bench = Some(bench_quantized(
            &model,
            cfg.outlier_threshold,
            &cfg.dataset_name(),
            &test,
            &vocab,
            &tags,
            s.spec(),
            cfg.reps,
            cfg.warmup,
        )?);
        reports.push(report);
    }
    s.emit_cell(reports, &seeds)
}

/// Zero-shot evaluation (when the tag sets agree), then fine-tuning on the new data.
pub fn transfer(s: &mut Session) -> WbResult<()> {
    let cfg = s.cfg;
    let model_path = cfg.require(&cfg.model_path, "model")?.to_path_buf();
    let train = s.load_split("train", &cfg.train_path)?;
    let test = s.load_split("test", &cfg.test_path)?;
    let mut reports = Vec::new();
    for seed in s.seeds() {
        let mut report = s.report("transfer", &model_label(&model_path), seed);
        let (file, vocab, model_tags) = load_bundle(&seeded(&model_path, seed))?;
        if model_tags == s.tagset() {
            report.baseline = Some(s.score(&file, &vocab, &model_tags, &test)?);
        } else {
            report
                .warnings
                .push("tag sets differ; zero-shot evaluation skipped".into());
        }
        let mut base = s.base_model(&train, seed)?;
        let unknown = train
            .iter()
            .flat_map(|x| &x.tokens)
            .filter(|t| !base.vocab.contains(t))
            .count();
        let total: usize = train.iter().map(Sentence::len).sum();
        report
            .metrics
            .insert("train_oov_rate".into(), unknown as f64 / total as f64);
        let examples = encode_sentences(&train, &base.vocab, &base.tags)?;
        let trace = fine_tune(&mut base, &examples, cfg, seed)?;
        report.train_losses = trace.epoch_losses;
        let file = dense_file(base.model, base.mask);
        let eval = s.score(&file, &base.vocab, &base.tags, &test)?;
        if let Some(b) = &report.baseline {
            report.comparison = Some(compare(b, &eval)?);
        }
        report.eval = Some(eval);
        report.model_file = Some(s.save(&report.stem(), &file, &base.vocab, &base.tags)?);
        reports.push(report);
    }
    s.emit_cell(reports, &cfg.train.seeds)
}

/// CSV tables regenerated from a directory of run reports.
pub fn report_tables(input: &Path, out: &Path) -> WbResult<Vec<PathBuf>> {
    let reports = load_reports(input)?;
    if reports.is_empty() {
        return Err(WbError::Input(format!(
            "{}: no run reports",
            input.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| WbError::io(out, e))?;
    let mut written = Vec::new();
    let runs = out.join("runs.csv");
    write_csv(&runs, &run_rows(&reports))?;
    written.push(runs);
    let pruning = prune_rows(&reports);
    if !pruning.is_empty() {
        let path = out.join("pruning.csv");
        write_csv(&path, &pruning)?;
        written.push(path);
    }
    let latency = latency_rows(&reports);
    if !latency.is_empty() {
        let path = out.join("latency.csv");
        write_csv(&path, &latency)?;
        written.push(path);
    }
    Ok(written)
}
