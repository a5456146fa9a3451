//! Knowledge distillation from a larger teacher encoder into a student.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Example, TokenizedBatch, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{
    classify, encode, mlm_logits, mlm_mask_batch, train_with, BoundParams, Dropout, EncoderConfig,
    EncoderModel, MlmMasking, NoHooks, TrainSpec, TrainTrace,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const AGNOSTIC_TEMPERATURES: [f32; 3] = [2.0, 3.0, 6.0];
pub const TASK_SPECIFIC_TEMPERATURE: f32 = 8.0;

/// Student layer and head counts; other dimensions come from the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudentSpec {
    pub num_layers: usize,
    pub num_heads: usize,
}

impl StudentSpec {
    /// The four (layers, heads) cells of the published student grid.
    pub const GRID: [StudentSpec; 4] = [
        StudentSpec {
            num_layers: 4,
            num_heads: 4,
        },
        StudentSpec {
            num_layers: 4,
            num_heads: 6,
        },
        StudentSpec {
            num_layers: 6,
            num_heads: 4,
        },
        StudentSpec {
            num_layers: 6,
            num_heads: 6,
        },
    ];

    pub fn validate(&self, teacher: &EncoderConfig) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Parameter("student needs at least one layer".into()));
        }
        if self.num_layers > teacher.num_layers {
            return Err(Error::Parameter(format!(
                "student has {} layers but the teacher only {}",
                self.num_layers, teacher.num_layers
            )));
        }
        self.config(teacher).validate()
    }

    pub fn config(&self, teacher: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ..*teacher
        }
    }

    pub fn label(&self) -> String {
        format!("l{}h{}", self.num_layers, self.num_heads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    TaskAgnostic,
    TaskSpecific,
}

impl DistillMode {
    pub fn name(&self) -> &'static str {
        match self {
            DistillMode::TaskAgnostic => "agnostic",
            DistillMode::TaskSpecific => "specific",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSpec {
    pub mode: DistillMode,
    pub temperature: f32,
    pub alpha_soft: f32,
    pub alpha_hard: f32,
    /// Only used in task-agnostic mode.
    pub masking: MlmMasking,
}

impl DistillSpec {
    pub fn task_agnostic(temperature: f32) -> Self {
        Self {
            mode: DistillMode::TaskAgnostic,
            temperature,
            alpha_soft: 0.5,
            alpha_hard: 0.5,
            masking: MlmMasking::default(),
        }
    }

    pub fn task_specific() -> Self {
        Self {
            mode: DistillMode::TaskSpecific,
            temperature: TASK_SPECIFIC_TEMPERATURE,
            ..Self::task_agnostic(TASK_SPECIFIC_TEMPERATURE)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha_soft >= 0.0 && self.alpha_hard >= 0.0) {
            return Err(Error::Parameter("loss weights must be non-negative".into()));
        }
        if libm::fabsf(self.alpha_soft + self.alpha_hard - 1.0) > 1e-6 {
            return Err(Error::Parameter(format!(
                "loss weights must sum to 1, got {} + {}",
                self.alpha_soft, self.alpha_hard
            )));
        }
        Ok(())
    }
}

/// Student layer `i` starts from teacher layer `floor(i * T / S)`.
pub fn teacher_layer_for(
    student_layer: usize,
    student_layers: usize,
    teacher_layers: usize,
) -> usize {
    student_layer * teacher_layers / student_layers
}

/// Whether attention weights can be carried over between head layouts.
fn heads_compatible(teacher: usize, student: usize) -> bool {
    teacher.is_multiple_of(student) || student.is_multiple_of(teacher)
}

/// Student copied from the teacher where layouts allow.
///
/// Embeddings are always copied; encoder layers are copied from the mapped
/// teacher layer when head counts divide evenly, else keep their random
/// init. The classifier head is always fresh.
pub fn init_student(teacher: &EncoderModel, spec: StudentSpec, seed: u64) -> Result<EncoderModel> {
    let tc = teacher.config();
    spec.validate(tc)?;
    let mut student = EncoderModel::init(spec.config(tc), seed)?;
    let copy_layers = heads_compatible(tc.num_heads, spec.num_heads);
    for p in student.params_mut() {
        let source = if p.name.starts_with("embeddings.") {
            Some(p.name.clone())
        } else if let (true, Some(rest)) = (copy_layers, p.name.strip_prefix("layers.")) {
            let (layer, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Data(format!("malformed parameter name {}", p.name)))?;
            let layer: usize = layer
                .parse()
                .map_err(|_| Error::Data(format!("malformed parameter name {}", p.name)))?;
            let from = teacher_layer_for(layer, spec.num_layers, tc.num_layers);
            Some(format!("layers.{from}.{field}"))
        } else {
            None
        };
        if let Some(name) = source {
            let value = teacher
                .get(&name)
                .ok_or_else(|| Error::Data(format!("teacher has no parameter {name}")))?;
            p.value = value.clone();
        }
    }
    Ok(student)
}

/// `1 - params(student) / params(teacher)`.
pub fn compression_ratio(teacher: &EncoderConfig, student: &EncoderConfig) -> f64 {
    1.0 - student.param_count() as f64 / teacher.param_count() as f64
}

fn check_pair(
    teacher: &EncoderModel,
    student: &EncoderModel,
    spec: &DistillSpec,
    mode: DistillMode,
) -> Result<()> {
    spec.validate()?;
    if spec.mode != mode {
        return Err(Error::Parameter(format!(
            "spec is for {} distillation, not {}",
            spec.mode.name(),
            mode.name()
        )));
    }
    let (t, s) = (teacher.config(), student.config());
    if t.hidden_size != s.hidden_size || t.vocab_size != s.vocab_size {
        return Err(Error::Dimension(format!(
            "teacher (hidden {}, vocab {}) and student (hidden {}, vocab {}) are incompatible",
            t.hidden_size, t.vocab_size, s.hidden_size, s.vocab_size
        )));
    }
    Ok(())
}

/// `alpha_soft * soft + alpha_hard * hard`, skipping zero-weight terms.
fn combine(
    tape: &mut Tape,
    spec: &DistillSpec,
    soft: &mut dyn FnMut(&mut Tape) -> Result<Var>,
    hard: &mut dyn FnMut(&mut Tape) -> Result<Var>,
) -> Result<Var> {
    match (spec.alpha_soft > 0.0, spec.alpha_hard > 0.0) {
        (true, true) => {
            let s = soft(tape)?;
            let s = tape.scale(s, spec.alpha_soft)?;
            let h = hard(tape)?;
            let h = tape.scale(h, spec.alpha_hard)?;
            tape.add(s, h)
        }
        (true, false) => {
            let s = soft(tape)?;
            tape.scale(s, spec.alpha_soft)
        }
        _ => {
            let h = hard(tape)?;
            tape.scale(h, spec.alpha_hard)
        }
    }
}

/// Masked-LM distillation on unlabeled text.
///
/// Teacher and student see the same corrupted batch; soft and hard losses
/// are taken on the masked positions only.
pub fn distill_task_agnostic(
    teacher: &EncoderModel,
    student: &mut EncoderModel,
    corpus: &[Example],
    spec: &DistillSpec,
    train: &TrainSpec,
    seed: u64,
) -> Result<TrainTrace> {
    check_pair(teacher, student, spec, DistillMode::TaskAgnostic)?;
    let vocab_size = student.config().vocab_size;
    let spec = *spec;
    train_with(
        student,
        corpus,
        train,
        seed,
        &mut |tape, bound, batch, dropout, rng: &mut Rng| {
            let (ids, rows, targets) = mlm_mask_batch(
                &batch.token_ids,
                &batch.attention_mask,
                &spec.masking,
                vocab_size,
                rng,
            );
            let mut inputs = batch.inputs();
            inputs.token_ids = &ids;
            let (hidden, _) = encode(bound, tape, &inputs, dropout)?;
            let logits = mlm_logits(bound, tape, hidden, &rows)?;
            combine(
                tape,
                &spec,
                &mut |tape| {
                    let target = teacher.mlm_logits(&inputs, &rows)?;
                    tape.kl_soft_targets(logits, &target, spec.temperature)
                },
                &mut |tape| tape.cross_entropy(logits, &targets, IGNORE_INDEX),
            )
        },
        &mut NoHooks,
    )
}

/// Token-classification distillation from a fine-tuned teacher.
pub fn distill_task_specific(
    teacher: &EncoderModel,
    student: &mut EncoderModel,
    examples: &[Example],
    spec: &DistillSpec,
    train: &TrainSpec,
    seed: u64,
) -> Result<TrainTrace> {
    check_pair(teacher, student, spec, DistillMode::TaskSpecific)?;
    let (tc, sc) = (teacher.config().num_classes, student.config().num_classes);
    if tc != sc {
        return Err(Error::Data(format!(
            "teacher predicts {tc} tags but the student {sc}"
        )));
    }
    let spec = *spec;
    train_with(
        student,
        examples,
        train,
        seed,
        &mut |tape, bound, batch, dropout, _| {
            specific_loss(teacher, &spec, tape, bound, batch, dropout)
        },
        &mut NoHooks,
    )
}

fn specific_loss(
    teacher: &EncoderModel,
    spec: &DistillSpec,
    tape: &mut Tape,
    bound: &mut BoundParams<'_>,
    batch: &TokenizedBatch,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let inputs = batch.inputs();
    let (hidden, _) = encode(bound, tape, &inputs, dropout)?;
    let logits = classify(bound, tape, hidden)?;
    let real: Vec<usize> = (0..batch.attention_mask.len())
        .filter(|&i| batch.attention_mask[i])
        .collect();
    combine(
        tape,
        spec,
        &mut |tape| {
            let c = teacher.config().num_classes;
            let all = teacher
                .forward(&inputs)?
                .reshape(&[batch.batch * batch.seq, c])?;
            let mut target = Vec::with_capacity(real.len() * c);
            for &r in &real {
                target.extend_from_slice(all.row(r));
            }
            let target = Tensor::new(vec![real.len(), c], target)?;
            let student_rows = tape.select_rows(logits, &real)?;
            tape.kl_soft_targets(student_rows, &target, spec.temperature)
        },
        &mut |tape| tape.cross_entropy(logits, &batch.label_ids, IGNORE_INDEX),
    )
}

/// One student to produce in a distillation grid run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub mode: DistillMode,
    pub teacher: String,
    pub student: StudentSpec,
    pub temperature: f32,
}

impl GridCell {
    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}-t{}",
            self.mode.name(),
            self.teacher,
            self.student.label(),
            self.temperature
        )
    }
}

/// Every (teacher, student, temperature) combination, validated up front.
pub fn distillation_grid(
    mode: DistillMode,
    teachers: &[(&str, EncoderConfig)],
    students: &[StudentSpec],
    temperatures: &[f32],
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (name, config) in teachers {
        for student in students {
            student.validate(config)?;
            for &temperature in temperatures {
                cells.push(GridCell {
                    mode,
                    teacher: String::from(*name),
                    student: *student,
                    temperature,
                });
            }
        }
    }
    Ok(cells)
}
