//! Teacher-student perceptual distillation and the shared training step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::{Detector, FeatureMap};
use crate::error::{Error, Result};
use crate::fogsim::{Annotation, Image};
use crate::optim::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// 1-based backbone stage indices.
    pub layers: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            layers: vec![2, 3],
            lambda: vec![0.5, 1.0],
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("perceptual layer set is empty".into()));
        }
        if self.layers.len() != self.lambda.len() {
            return Err(Error::Config(format!(
                "{} perceptual layers but {} weights",
                self.layers.len(),
                self.lambda.len()
            )));
        }
        let mut seen = [false; 3];
        for &l in &self.layers {
            if !(1..=3).contains(&l) || std::mem::replace(&mut seen[l - 1], true) {
                return Err(Error::Config(format!("invalid or repeated perceptual layer {l}")));
            }
        }
        if self.lambda.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("perceptual weights must be finite and non-negative".into()));
        }
        if self.lambda.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one perceptual weight must be positive".into()));
        }
        Ok(())
    }

    /// Same layers with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        PerceptualConfig {
            layers: self.layers.clone(),
            lambda: self.lambda.iter().map(|w| w * c).collect(),
        }
    }
}

/// A frozen teacher and a trainable student with matching backbones.
#[derive(Clone, Debug)]
pub struct TeacherStudentPair {
    pub teacher: Detector,
    pub student: Detector,
    pub perceptual: PerceptualConfig,
}

impl TeacherStudentPair {
    pub fn new(teacher: Detector, student: Detector, perceptual: PerceptualConfig) -> Result<Self> {
        perceptual.validate()?;
        let (t, s) = (&teacher.config, &student.config);
        if t.channels != s.channels || t.image_size != s.image_size {
            return Err(Error::Architecture(format!(
                "teacher backbone {:?}@{} differs from student {:?}@{}",
                t.channels, t.image_size, s.channels, s.image_size
            )));
        }
        Ok(TeacherStudentPair {
            teacher,
            student,
            perceptual,
        })
    }

    /// Teacher stage activations on `image`, computed on a private tape so no
    /// teacher parameter can ever receive a gradient.
    pub fn teacher_features(&self, image: &Image) -> Result<Vec<Tensor>> {
        frozen_features(&self.teacher, image)
    }
}

fn frozen_features(det: &Detector, image: &Image) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let b = det.bind(&mut tape, false);
    let maps = det.features(&mut tape, &b, image)?;
    Ok(maps.iter().map(|m| tape.value(m.var).clone()).collect())
}

/// `sum_l lambda_l * mean((teacher_l - student_l)^2)` over the configured
/// stages. Teacher values enter as constants.
pub fn perceptual_from_features(
    tape: &mut Tape,
    teacher: &[Tensor],
    student: &[Var],
    cfg: &PerceptualConfig,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&layer, &lambda) in cfg.layers.iter().zip(&cfg.lambda) {
        let (t, s) = match (teacher.get(layer - 1), student.get(layer - 1)) {
            (Some(t), Some(&s)) => (t, s),
            _ => return Err(Error::Architecture(format!("stage {layer} missing from feature stack"))),
        };
        if t.shape() != tape.shape(s) {
            return Err(Error::Architecture(format!(
                "stage {layer}: teacher {:?} vs student {:?}",
                t.shape(),
                tape.shape(s)
            )));
        }
        let tc = tape.constant(t.clone());
        let diff = tape.sub(s, tc)?;
        let sq = tape.sum_squares(diff);
        let term = tape.scale(sq, lambda / t.numel() as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("perceptual layer set is empty".into()))
}

fn stage_vars(maps: &[FeatureMap]) -> Vec<Var> {
    maps.iter().map(|m| m.var).collect()
}

/// Perceptual loss between the teacher on `clear` and the student on `foggy`.
pub fn perceptual_loss(clear: &Image, foggy: &Image, pair: &TeacherStudentPair) -> Result<f64> {
    let teacher = pair.teacher_features(clear)?;
    let mut tape = Tape::new();
    let b = pair.student.bind(&mut tape, false);
    let maps = pair.student.features(&mut tape, &b, foggy)?;
    let l = perceptual_from_features(&mut tape, &teacher, &stage_vars(&maps), &pair.perceptual)?;
    Ok(tape.value(l).item())
}

/// `L = L_obj + weight * L_perc`.
pub fn total_loss(tape: &mut Tape, obj: Var, perc: Var, perc_weight: f64) -> Result<Var> {
    let scaled = tape.scale(perc, perc_weight);
    tape.add(obj, scaled)
}

/// One training example. `input` is what the student sees (foggy for
/// distillation); `clear` feeds the teacher.
#[derive(Clone, Copy, Debug)]
pub struct StepSample<'a> {
    pub clear: &'a Image,
    pub input: &'a Image,
    pub aux: Option<&'a Image>,
    pub annotation: &'a Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_obj: f64,
    pub l_perc: f64,
    pub l_total: f64,
    pub grad_norm: Option<f64>,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        self.l_obj.is_finite()
            && self.l_perc.is_finite()
            && self.l_total.is_finite()
            && self.grad_norm.is_none_or(f64::is_finite)
    }
}

struct Teacher<'a> {
    det: &'a Detector,
    perceptual: &'a PerceptualConfig,
    weight: f64,
}

fn run_step(
    student: &mut Detector,
    teacher: Option<Teacher<'_>>,
    batch: &[StepSample<'_>],
    opt: &mut Sgd,
    step: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let b = student.bind(&mut tape, true);
    let (mut obj, mut perc): (Option<Var>, Option<Var>) = (None, None);
    let accumulate = |tape: &mut Tape, acc: Option<Var>, v: Var| -> Result<Var> {
        match acc {
            Some(a) => tape.add(a, v),
            None => Ok(v),
        }
    };
    for s in batch {
        let sl = match student.sample_loss(&mut tape, &b, s.input, s.aux, s.annotation) {
            Ok(sl) => sl,
            // Non-finite predictions already break the matching costs.
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged(Box::new(StepMetrics {
                    step,
                    l_obj: f64::NAN,
                    l_perc: f64::NAN,
                    l_total: f64::NAN,
                    grad_norm: None,
                })))
            }
            Err(e) => return Err(e),
        };
        obj = Some(accumulate(&mut tape, obj, sl.terms.total)?);
        if let Some(t) = &teacher {
            let tf = frozen_features(t.det, s.clear)?;
            let p = perceptual_from_features(&mut tape, &tf, &stage_vars(&sl.forward.features), t.perceptual)?;
            perc = Some(accumulate(&mut tape, perc, p)?);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let obj = tape.scale(obj.expect("non-empty batch"), inv);
    let perc = match perc {
        Some(p) => tape.scale(p, inv),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = total_loss(&mut tape, obj, perc, teacher.as_ref().map_or(0.0, |t| t.weight))?;
    let mut metrics = StepMetrics {
        step,
        l_obj: tape.value(obj).item(),
        l_perc: tape.value(perc).item(),
        l_total: tape.value(total).item(),
        grad_norm: None,
    };
    if !metrics.is_finite() {
        return Err(Error::Diverged(Box::new(metrics)));
    }
    let grads = tape.backward(total)?;
    let grads = b.collect_grads(&grads);
    match opt.step(&mut student.params, &grads) {
        Ok(norm) => metrics.grad_norm = Some(norm),
        Err(Error::NonFinite(_)) => {
            metrics.grad_norm = Some(f64::NAN);
            return Err(Error::Diverged(Box::new(metrics)));
        }
        Err(e) => return Err(e),
    }
    Ok(metrics)
}

/// Plain supervised step on the detection loss; `l_perc` is reported as 0.
pub fn supervised_step(det: &mut Detector, batch: &[StepSample<'_>], opt: &mut Sgd, step: usize) -> Result<StepMetrics> {
    run_step(det, None, batch, opt, step)
}

/// Teacher on clear images, student on `input`, update of the student only.
pub fn distill_step(
    pair: &mut TeacherStudentPair,
    batch: &[StepSample<'_>],
    opt: &mut Sgd,
    step: usize,
    perc_weight: f64,
) -> Result<StepMetrics> {
    let teacher = Teacher {
        det: &pair.teacher,
        perceptual: &pair.perceptual,
        weight: perc_weight,
    };
    run_step(&mut pair.student, Some(teacher), batch, opt, step)
}
