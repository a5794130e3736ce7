//! Runtime invariant suites behind `verify`.
//!
//! Each suite checks one property on freshly sampled inputs and reports a
//! pass/fail line. Suites that need files work under a scratch directory that
//! is removed afterwards.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_weights, fog_aware_attention, fusion_encoder_layer, multi_head_attention, self_attention,
    weather_scalar, AttentionParams, FusionParams, ScaleAxis, WeatherActivation, WeatherScalarParams, LAYER_NORM_EPS,
};
use crate::autodiff::{fault, gradient_check, GradCheckOptions, Tape, Tensor, Var};
use crate::boxes::iou;
use crate::detector::{
    backbone_forward, detection_loss, solve_assignment, BackboneParams, DetectionOutput, Detector, DetectorConfig,
    LossWeights, MatchResult, Variant,
};
use crate::distill::{perceptual_from_features, perceptual_loss, PerceptualConfig, TeacherStudentPair};
use crate::error::{Error, Result};
use crate::evalkit::{average_precision, map50, EvalPrediction, IOU_THRESHOLD};
use crate::fogsim::{
    apply_fog, random_scene, render_scene, snapshot_files, transmission, write_json, Annotation, DepthMap,
    FogParams, Image, SceneSampler, CHANNELS, DEFAULT_ATMOSPHERIC_LIGHT, MANIFEST_FILE,
};
use crate::harness::config::RunConfig;
use crate::harness::oracles::{brute_force_assignment, exhaustive_map50, random_eval_instance};
use crate::harness::{cmd_eval, cmd_generate, cmd_train, RunManifest, RunStatus, CHECKPOINT_DIR, METRICS_FILE, REPORT_JSON, REPORT_TXT};
use crate::rng::{Rng, SeedStream};

type Outcome = std::result::Result<(), String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub module: String,
    pub invariant: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub passed: usize,
    pub failed: usize,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag} [{}] {}", r.module, r.invariant));
            if !r.passed {
                s.push_str(&format!(": {}", r.detail));
            }
            s.push('\n');
        }
        s.push_str(&format!("{} passed, {} failed\n", self.passed, self.failed));
        s
    }
}

struct Ctx {
    seed: u64,
    cases: usize,
    scratch: PathBuf,
    gradients: OnceCell<std::result::Result<Vec<(String, f64)>, String>>,
}

impl Ctx {
    fn rng(&self, name: &str) -> Rng {
        SeedStream::new(self.seed).fork("verify").fork(name).rng()
    }

    fn gradients(&self) -> std::result::Result<&[(String, f64)], String> {
        self.gradients
            .get_or_init(|| gradient_suite(self.seed))
            .as_deref()
            .map_err(Clone::clone)
    }

    fn dir(&self, name: &str) -> std::result::Result<PathBuf, String> {
        let d = self.scratch.join(name);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| format!("{}: {e}", d.display()))?;
        }
        Ok(d)
    }
}

type SuiteFn = fn(&Ctx) -> Outcome;

const SUITES: &[(&str, &str, SuiteFn)] = &[
    ("autodiff", "every differentiable op passes gradient_check below 1e-4 at 100 probes", autodiff_gradients),
    ("autodiff", "softmax rows sum to 1 and ignore per-row shifts", softmax_rows),
    ("autodiff", "matmul is associative within 1e-9 relative", matmul_associative),
    ("autodiff", "replayed forward/backward is bit-identical", replay_is_bit_identical),
    ("fogsim", "fog is monotone in beta toward the atmospheric light", fog_monotone_in_beta),
    ("fogsim", "fog treats channels independently", fog_channels_independent),
    ("fogsim", "transmission is multiplicative in beta within 1e-12", transmission_multiplicative),
    ("fogsim", "annotation boxes match pixel footprints (IoU >= 0.95)", annotations_match_footprints),
    ("fogsim", "beta = 0 leaves images unchanged", zero_beta_identity),
    ("fogsim", "far depth approaches the atmospheric light within 1e-6", far_depth_limit),
    ("attention", "attention matrices of every variant are row-stochastic within 1e-12", attention_row_stochastic),
    ("attention", "fog-aware attention with V_w = 1 matches self-attention within 1e-12", neutral_weather),
    ("attention", "multi-head attention with h = 1 and W_O = I equals self-attention exactly", single_head_reduction),
    ("attention", "self-attention is permutation-equivariant within 1e-12", permutation_equivariance),
    ("attention", "fusion layer with identical streams and tied params reduces to LN(E + SA(E))", fusion_collapse),
    ("attention", "attention variants pass gradient_check below 1e-4", attention_gradients),
    ("detector", "Hungarian matching equals brute force on 1000 matrices up to 7x7", hungarian_matches_brute_force),
    ("detector", "detection loss ignores ground-truth order", loss_ignores_gt_order),
    ("detector", "one small SGD step decreases the loss in at least 9 of 10 seeds", sgd_step_decreases_loss),
    ("detector", "baseline and PL forward passes are identical", baseline_equals_pl),
    ("distill", "perceptual loss is zero for tied parameters on identical input", perceptual_zero_when_tied),
    ("distill", "perceptual loss is non-negative", perceptual_non_negative),
    ("distill", "perceptual loss is symmetric under tied parameters", perceptual_symmetric),
    ("distill", "teacher parameters never receive gradient", teacher_gets_no_gradient),
    ("distill", "perceptual loss is homogeneous in lambda", perceptual_homogeneous),
    ("evalkit", "IoU is symmetric", iou_symmetric),
    ("evalkit", "AP depends only on confidence order", ap_monotone_invariant),
    ("evalkit", "a top-ranked false positive never raises AP", ap_top_false_positive),
    ("evalkit", "mAP ignores prediction list order", map_order_invariant),
    ("evalkit", "mAP@50 equals the exhaustive evaluator on 500 scenes within 1e-9", map_matches_exhaustive),
    ("harness", "identical runs give identical metrics and checkpoint hashes", train_is_deterministic),
    ("harness", "evaluation leaves dataset and checkpoint untouched", eval_is_read_only),
    ("harness", "fog-stream variants fail fast without depth maps", fog_variants_need_depth),
];

/// Runs every suite; `scratch` is used by the file-based ones.
pub fn run_suites(cfg: &RunConfig, scratch: &Path) -> VerifyReport {
    let ctx = Ctx {
        seed: cfg.seed,
        cases: cfg.verify.oracle_cases.max(1),
        scratch: scratch.to_path_buf(),
        gradients: OnceCell::new(),
    };
    let mut suites = Vec::new();
    for &(module, invariant, f) in SUITES {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        log::info!("{module}: {invariant}: {}", if outcome.is_ok() { "pass" } else { "FAIL" });
        suites.push(SuiteResult {
            module: module.into(),
            invariant: invariant.into(),
            passed: outcome.is_ok(),
            detail: outcome.err().unwrap_or_default(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let failed = suites.iter().filter(|s| !s.passed).count();
    VerifyReport {
        passed: suites.len() - failed,
        failed,
        suites,
    }
}

/// Number of suites `run_suites` executes.
pub fn suite_count() -> usize {
    SUITES.len()
}

/// Runs the suites and writes `report.json`, `report.txt` and `manifest.json`
/// under `out`.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<VerifyReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scratch = out.join("scratch");
    if let Some(offset) = cfg.verify.softmax_fault {
        fault::arm_softmax_fault(offset);
    }
    let report = run_suites(cfg, &scratch);
    fault::disarm();
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    write_json(&out.join(REPORT_JSON), &report)?;
    fs::write(out.join(REPORT_TXT), report.render()).map_err(|e| Error::io(out.join(REPORT_TXT), e))?;
    write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest {
            command: "verify".into(),
            seed: cfg.seed,
            variant: cfg.model.variant,
            files: vec![REPORT_JSON.into(), REPORT_TXT.into()],
        },
    )?;
    Ok(report)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn max_row_error(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn scene(seed: u64) -> std::result::Result<(Image, DepthMap, Annotation), String> {
    lift(render_scene(&random_scene(&SceneSampler::default(), seed)))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let data = perm.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![perm.len(), t.cols()], data).expect("row permutation keeps the shape")
}
/// Gradient check over every differentiable building block, 100 probes each.
pub fn gradient_suite(seed: u64) -> std::result::Result<Vec<(String, f64)>, String> {
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let root = SeedStream::new(seed);
    let mut rng = root.fork("inputs").rng();
    let t = |shape: &[usize], rng: &mut Rng| Tensor::randn(shape, 0.7, rng);
    let proj = t(&[4, 3], &mut rng);
    // Reduces a matrix to a scalar through a fixed random projection so every
    // entry gets a distinct weight.
    let reduce = move |tape: &mut Tape, y: Var| -> Result<Var> {
        let (r, c) = (tape.shape(y)[0], tape.shape(y)[1]);
        let w = Tensor::new(vec![r, c], (0..r * c).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect())?;
        let wv = tape.constant(w);
        let m = tape.mul(y, wv)?;
        Ok(tape.sum(m))
    };
    let mut cases: Vec<(&str, Vec<Tensor>, Op)> = Vec::new();
    let r = reduce;
    cases.push(("matmul", vec![t(&[3, 4], &mut rng), t(&[4, 3], &mut rng)], Box::new(move |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        r(tp, y)
    })));
    // denominators kept away from zero
    let denom = Tensor::new(vec![3, 3], t(&[3, 3], &mut rng).data().iter().map(|x| x.abs() + 0.5).collect())
        .map_err(|e| e.to_string())?;
    cases.push(("add/sub/mul/div", vec![t(&[3, 3], &mut rng), denom], Box::new(move |tp, v| {
        let a = tp.add(v[0], v[1])?;
        let s = tp.sub(a, v[0])?;
        let m = tp.mul(s, v[0])?;
        let y = tp.div(m, v[1])?;
        r(tp, y)
    })));
    cases.push(("exp/relu/sigmoid/abs/scale", vec![t(&[3, 3], &mut rng)], Box::new(move |tp, v| {
        let e = tp.exp(v[0]);
        let s = tp.sigmoid(v[0]);
        let a = tp.add_scalar(v[0], 0.05);
        let rl = tp.relu(a);
        let ab = tp.abs(a);
        let x = tp.add(e, s)?;
        let x = tp.add(x, rl)?;
        let x = tp.add(x, ab)?;
        let y = tp.scale(x, 0.5);
        r(tp, y)
    })));
    cases.push(("concat/slice/transpose/reshape/gather", vec![t(&[3, 2], &mut rng), t(&[3, 2], &mut rng)], Box::new(move |tp, v| {
        let c = tp.concat(&[v[0], v[1]], 1)?;
        let s = tp.slice_cols(c, 1, 3)?;
        let tr = tp.transpose(s)?;
        let rs = tp.reshape(tr, &[3, 3])?;
        let g = tp.gather_rows(rs, &[2, 0, 2])?;
        r(tp, g)
    })));
    cases.push(("mean/sum_squares/row-vector/scale axes", vec![t(&[3, 3], &mut rng), t(&[3], &mut rng), t(&[3, 1], &mut rng)], Box::new(move |tp, v| {
        let b = tp.add_row_vector(v[0], v[1])?;
        let c = tp.scale_columns(b, v[2])?;
        let d = tp.scale_rows(c, v[2])?;
        let m = tp.mean(d);
        let q = tp.sum_squares(d);
        tp.add(m, q)
    })));
    cases.push(("maximum/minimum", vec![t(&[3, 3], &mut rng), t(&[3, 3], &mut rng)], Box::new(move |tp, v| {
        let a = tp.maximum(v[0], v[1])?;
        let b = tp.minimum(v[0], v[1])?;
        let y = tp.sub(a, b)?;
        r(tp, y)
    })));
    cases.push(("softmax_rows", vec![t(&[3, 4], &mut rng)], Box::new(move |tp, v| {
        let s = tp.softmax_rows(v[0])?;
        let p = tp.constant(proj.clone());
        let y = tp.matmul(s, p)?;
        r(tp, y)
    })));
    cases.push(("layer_norm", vec![t(&[3, 4], &mut rng), t(&[4], &mut rng), t(&[4], &mut rng)], Box::new(move |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        r(tp, y)
    })));
    cases.push(("cross_entropy", vec![t(&[4, 3], &mut rng)], Box::new(|tp, v| tp.cross_entropy(v[0], &[0, 2, 1, 2], &[1.0, 0.5, 2.0, 0.1]))));
    cases.push(("im2col backbone", vec![t(&[64, 3], &mut rng), t(&[27, 2], &mut rng), t(&[2], &mut rng), t(&[18, 3], &mut rng), t(&[3], &mut rng), t(&[27, 2], &mut rng), t(&[2], &mut rng)], Box::new(move |tp, v| {
        let p = BackboneParams { stages: vec![(v[1], v[2]), (v[3], v[4]), (v[5], v[6])] };
        let maps = backbone_forward(tp, v[0], 8, 8, &p)?;
        let a = tp.sum_squares(maps[0].var);
        let b = tp.sum_squares(maps[2].var);
        tp.add(a, b)
    })));
    cases.push(("multi-head attention", vec![t(&[4, 4], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[4, 4], &mut rng)], Box::new(move |tp, v| {
        let p = AttentionParams { wq: vec![v[1], v[4]], wk: vec![v[2], v[5]], wv: vec![v[3], v[6]], wo: v[7] };
        let y = multi_head_attention(tp, v[0], v[0], v[0], &p)?;
        r(tp, y)
    })));
    for (name, act, axis) in [
        ("fog-aware attention (sigmoid, key axis)", WeatherActivation::Sigmoid, ScaleAxis::Key),
        ("fog-aware attention (raw, query axis)", WeatherActivation::Raw, ScaleAxis::Query),
    ] {
        cases.push((name, vec![t(&[4, 4], &mut rng), t(&[4, 4], &mut rng), t(&[4, 1], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[4, 2], &mut rng), t(&[2, 4], &mut rng)], Box::new(move |tp, v| {
            let vw = weather_scalar(tp, v[1], &WeatherScalarParams { wt: v[2] }, act)?;
            let p = AttentionParams { wq: vec![v[3]], wk: vec![v[4]], wv: vec![v[5]], wo: v[6] };
            let y = fog_aware_attention(tp, v[0], vw, &p, axis)?;
            r(tp, y)
        })));
    }
    let mut fusion = vec![t(&[4, 4], &mut rng), t(&[4, 4], &mut rng)];
    for _ in 0..3 {
        for _ in 0..3 {
            fusion.push(t(&[4, 2], &mut rng));
        }
        fusion.push(t(&[2, 4], &mut rng));
    }
    fusion.push(t(&[4], &mut rng));
    fusion.push(t(&[4], &mut rng));
    cases.push(("fusion encoder layer", fusion, Box::new(move |tp, v| {
        let ap = |o: usize| AttentionParams { wq: vec![v[o]], wk: vec![v[o + 1]], wv: vec![v[o + 2]], wo: v[o + 3] };
        let p = FusionParams { image: ap(2), fog: ap(6), cross: ap(10), norm_gain: v[14], norm_bias: v[15] };
        let y = fusion_encoder_layer(tp, v[0], v[1], &p)?;
        r(tp, y)
    })));
    let teacher = vec![t(&[16, 2], &mut rng), t(&[4, 3], &mut rng), t(&[1, 2], &mut rng)];
    cases.push(("perceptual loss", vec![t(&[64, 3], &mut rng), t(&[27, 2], &mut rng), t(&[2], &mut rng), t(&[18, 3], &mut rng), t(&[3], &mut rng), t(&[27, 2], &mut rng), t(&[2], &mut rng)], Box::new(move |tp, v| {
        let p = BackboneParams { stages: vec![(v[1], v[2]), (v[3], v[4]), (v[5], v[6])] };
        let maps = backbone_forward(tp, v[0], 8, 8, &p)?;
        let stack: Vec<Var> = maps.iter().map(|m| m.var).collect();
        let cfg = PerceptualConfig { layers: vec![1, 2, 3], lambda: vec![0.2, 0.5, 1.0] };
        perceptual_from_features(tp, &teacher, &stack, &cfg)
    })));
    let gt = Annotation { boxes: vec![[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.2]], labels: vec![1, 0] };
    cases.push(("detection loss", vec![t(&[3, 4], &mut rng), t(&[3, 3], &mut rng)], Box::new(move |tp, v| {
        let boxes = tp.sigmoid(v[0]);
        let out = DetectionOutput { boxes, class_logits: v[1] };
        let m = MatchResult { pairs: vec![(0, 1), (2, 0)] };
        Ok(detection_loss(tp, &out, &gt, &m, &LossWeights::default())?.total)
    })));

    let mut results = Vec::new();
    for (i, (name, params, f)) in cases.into_iter().enumerate() {
        let opts = GradCheckOptions { step: 1e-6, probes: Some(100), seed: root.index(i as u64).rng().random() };
        let err = gradient_check(|tp, v| f(tp, v), &params, opts).map_err(|e| format!("{name}: {e}"))?;
        results.push((name.to_string(), err));
    }
    Ok(results)
}

fn gradient_bound(ctx: &Ctx, pick: impl Fn(&str) -> bool) -> Outcome {
    let picked: Vec<_> = ctx.gradients()?.iter().filter(|(n, _)| pick(n)).collect();
    ensure(!picked.is_empty(), || "no gradient cases selected".into())?;
    for (name, err) in picked {
        ensure(*err < 1e-4, || format!("{name}: max relative error {err:.3e}"))?;
    }
    Ok(())
}

fn autodiff_gradients(ctx: &Ctx) -> Outcome {
    gradient_bound(ctx, |_| true)
}

fn softmax_rows(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("softmax");
    for _ in 0..ctx.cases {
        let x = Tensor::randn(&[5, 7], 3.0, &mut rng);
        let shift: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
        let shifted = Tensor::new(vec![5, 7], x.data().iter().enumerate().map(|(i, v)| v + shift[i / 7]).collect());
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(lift(shifted)?);
        let sa = lift(tape.softmax_rows(a))?;
        let sb = lift(tape.softmax_rows(b))?;
        let row = max_row_error(tape.value(sa));
        ensure(row <= 1e-12, || format!("row sum off by {row:.3e}"))?;
        let d = tape.value(sa).max_abs_diff(tape.value(sb));
        ensure(d <= 1e-12, || format!("row shift changed the output by {d:.3e}"))?;
    }
    Ok(())
}

fn matmul_associative(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("matmul");
    for _ in 0..ctx.cases {
        let d: Vec<usize> = (0..4).map(|_| rng.random_range(1..=6)).collect();
        let mut tape = Tape::new();
        let a = tape.constant(randn(&[d[0], d[1]], &mut rng));
        let b = tape.constant(randn(&[d[1], d[2]], &mut rng));
        let c = tape.constant(randn(&[d[2], d[3]], &mut rng));
        let ab = lift(tape.matmul(a, b))?;
        let left = lift(tape.matmul(ab, c))?;
        let bc = lift(tape.matmul(b, c))?;
        let right = lift(tape.matmul(a, bc))?;
        let scale = tape.value(left).data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let rel = tape.value(left).max_abs_diff(tape.value(right)) / scale;
        ensure(rel <= 1e-9, || format!("dims {d:?}: relative difference {rel:.3e}"))?;
    }
    Ok(())
}

fn replay_is_bit_identical(ctx: &Ctx) -> Outcome {
    let det = lift(Detector::new(DetectorConfig::default(), ctx.seed))?;
    let (img, _, gt) = scene(ctx.seed)?;
    let run = || -> Result<(u64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let b = det.bind(&mut tape, true);
        let s = det.sample_loss(&mut tape, &b, &img, None, &gt)?;
        let g = tape.backward(s.terms.total)?;
        Ok((tape.value(s.terms.total).item().to_bits(), b.collect_grads(&g)))
    };
    let first = lift(run())?;
    ensure(first == lift(run())?, || "second pass differs".into())
}

fn fog_monotone_in_beta(ctx: &Ctx) -> Outcome {
    let a = DEFAULT_ATMOSPHERIC_LIGHT;
    let betas = [0.0, 0.02, 0.04, 0.06, 0.08, 0.2, 1.0];
    for k in 0..ctx.cases.min(50) as u64 {
        let (img, depth, _) = scene(ctx.seed.wrapping_add(k))?;
        let mut prev: Option<Vec<f64>> = None;
        for beta in betas {
            let out = lift(apply_fog(&img, &depth, lift(FogParams::new(beta, a))?))?;
            let gap: Vec<f64> = out.pixels.iter().map(|v| (v - a).abs()).collect();
            if let Some(p) = &prev {
                if let Some(i) = gap.iter().zip(p).position(|(g, q)| *g > q + 1e-12) {
                    return Err(format!("pixel {i} moved away from A at beta {beta}"));
                }
            }
            prev = Some(gap);
        }
    }
    Ok(())
}

fn rotate_channels(img: &Image) -> Image {
    let mut pixels = img.pixels.clone();
    for (dst, src) in pixels.chunks_exact_mut(CHANNELS).zip(img.pixels.chunks_exact(CHANNELS)) {
        for c in 0..CHANNELS {
            dst[c] = src[(c + 1) % CHANNELS];
        }
    }
    Image {
        height: img.height,
        width: img.width,
        pixels,
    }
}

fn fog_channels_independent(ctx: &Ctx) -> Outcome {
    for k in 0..ctx.cases.min(50) as u64 {
        let (img, depth, _) = scene(ctx.seed.wrapping_add(k))?;
        let fog = FogParams::high();
        let a = lift(apply_fog(&rotate_channels(&img), &depth, fog))?;
        let b = rotate_channels(&lift(apply_fog(&img, &depth, fog))?);
        ensure(a.pixels == b.pixels, || format!("scene {k}: channel rotation does not commute with fog"))?;
    }
    Ok(())
}

fn transmission_multiplicative(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("transmission");
    for k in 0..ctx.cases.min(50) as u64 {
        let (_, depth, _) = scene(ctx.seed.wrapping_add(k))?;
        let (b1, b2) = (rng.random_range(0.0..0.2), rng.random_range(0.0..0.2));
        let joint = lift(transmission(&depth, b1 + b2))?;
        let t1 = lift(transmission(&depth, b1))?;
        let t2 = lift(transmission(&depth, b2))?;
        let err = joint
            .iter()
            .zip(t1.iter().zip(&t2))
            .map(|(j, (x, y))| (j - x * y).abs())
            .fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("betas {b1}, {b2}: error {err:.3e}"))?;
    }
    Ok(())
}

fn mask_box(img: &Image, color: [f64; 3]) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            if (0..CHANNELS).all(|c| img.get(y, x, c) == color[c]) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let (w, h) = (img.width as f64, img.height as f64);
    (x1 > 0).then(|| {
        [
            (x0 + x1) as f64 / 2.0 / w,
            (y0 + y1) as f64 / 2.0 / h,
            (x1 - x0) as f64 / w,
            (y1 - y0) as f64 / h,
        ]
    })
}

fn annotations_match_footprints(ctx: &Ctx) -> Outcome {
    for k in 0..ctx.cases as u64 {
        let mut spec = random_scene(&SceneSampler::default(), ctx.seed.wrapping_add(k));
        spec.noise = 0.0;
        // marker colours make each footprint recoverable from the pixels
        for (i, o) in spec.objects.iter_mut().enumerate() {
            o.color = [0.1 * (i + 1) as f64, 0.97, 0.03];
        }
        let (img, _, ann) = lift(render_scene(&spec))?;
        ensure(!ann.is_empty(), || format!("scene {k} has no objects"))?;
        for (i, o) in spec.objects.iter().enumerate() {
            let mask = mask_box(&img, o.color).ok_or_else(|| format!("scene {k}: object {i} is not visible"))?;
            let v = iou(ann.boxes[i], mask);
            ensure(v >= 0.95, || format!("scene {k}, object {i}: IoU {v:.3}"))?;
        }
    }
    Ok(())
}

fn zero_beta_identity(ctx: &Ctx) -> Outcome {
    for k in 0..ctx.cases.min(50) as u64 {
        let (img, depth, _) = scene(ctx.seed.wrapping_add(k))?;
        let out = lift(apply_fog(&img, &depth, FogParams::clear()))?;
        ensure(out.pixels == img.pixels, || format!("scene {k} changed"))?;
    }
    Ok(())
}

fn far_depth_limit(ctx: &Ctx) -> Outcome {
    let far = DepthMap::uniform(32, 32, 1e3);
    for k in 0..ctx.cases.min(20) as u64 {
        let (img, _, _) = scene(ctx.seed.wrapping_add(k))?;
        for fog in [FogParams::low(), FogParams::mid(), FogParams::high()] {
            let out = lift(apply_fog(&img, &far, fog))?;
            let err = out.pixels.iter().map(|v| (v - fog.atmospheric_light).abs()).fold(0.0, f64::max);
            ensure(err <= 1e-6, || format!("beta {}: max distance from A {err:.3e}", fog.beta))?;
        }
    }
    Ok(())
}

fn head_params(tape: &mut Tape, d: usize, heads: usize, d_k: usize, identity_out: bool, rng: &mut Rng) -> AttentionParams {
    let mut each = |tape: &mut Tape| (0..heads).map(|_| tape.constant(randn(&[d, d_k], rng))).collect::<Vec<_>>();
    let (wq, wk, wv) = (each(tape), each(tape), each(tape));
    let wo = if identity_out {
        tape.constant(Tensor::eye(d))
    } else {
        tape.constant(randn(&[heads * d_k, d], rng))
    };
    AttentionParams { wq, wk, wv, wo }
}

fn attention_row_stochastic(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("attention-rows");
    let d = 4;
    for _ in 0..ctx.cases {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[n, d], 2.0, &mut rng));
        let y = tape.constant(Tensor::randn(&[m, d], 2.0, &mut rng));
        let zk = tape.constant(randn(&[m, d], &mut rng));
        let zq = tape.constant(randn(&[n, d], &mut rng));
        let w = WeatherScalarParams {
            wt: tape.constant(Tensor::randn(&[d, 1], 2.0, &mut rng)),
        };
        let wq = tape.constant(randn(&[d, 3], &mut rng));
        let wk = tape.constant(randn(&[d, 3], &mut rng));
        let sig = lift(weather_scalar(&mut tape, zk, &w, WeatherActivation::Sigmoid))?;
        let raw = lift(weather_scalar(&mut tape, zq, &w, WeatherActivation::Raw))?;
        let variants = [
            ("self", lift(attention_weights(&mut tape, x, x, wq, wk, None))?),
            ("cross", lift(attention_weights(&mut tape, x, y, wq, wk, None))?),
            ("fog-aware sigmoid/key", lift(attention_weights(&mut tape, x, y, wq, wk, Some((sig, ScaleAxis::Key))))?),
            ("fog-aware raw/query", lift(attention_weights(&mut tape, x, y, wq, wk, Some((raw, ScaleAxis::Query))))?),
        ];
        for (name, a) in variants {
            let e = max_row_error(tape.value(a));
            ensure(e <= 1e-12, || format!("{name}: row sum off by {e:.3e}"))?;
        }
    }
    Ok(())
}

fn neutral_weather(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("neutral-weather");
    let d = 4;
    for _ in 0..ctx.cases {
        let n = rng.random_range(1..=6);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[n, d], &mut rng));
        let p = head_params(&mut tape, d, 1, d, true, &mut rng);
        let sa = lift(self_attention(&mut tape, x, &p))?;
        let ones = tape.constant(Tensor::ones(&[n, 1]));
        for axis in [ScaleAxis::Key, ScaleAxis::Query] {
            let fa = lift(fog_aware_attention(&mut tape, x, ones, &p, axis))?;
            let e = tape.value(fa).max_abs_diff(tape.value(sa));
            ensure(e <= 1e-12, || format!("{axis:?} axis: difference {e:.3e}"))?;
        }
    }
    Ok(())
}

fn single_head_reduction(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("single-head");
    let d = 4;
    for _ in 0..ctx.cases {
        let n = rng.random_range(1..=6);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[n, d], &mut rng));
        let p = head_params(&mut tape, d, 1, d, true, &mut rng);
        let sa = lift(self_attention(&mut tape, x, &p))?;
        let mha = lift(multi_head_attention(&mut tape, x, x, x, &p))?;
        ensure(tape.value(sa) == tape.value(mha), || {
            format!("difference {:.3e}", tape.value(sa).max_abs_diff(tape.value(mha)))
        })?;
    }
    Ok(())
}

fn permutation_equivariance(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("permutation");
    let d = 4;
    for _ in 0..ctx.cases {
        let n = rng.random_range(1..=6);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (xt, zt) = (randn(&[n, d], &mut rng), randn(&[n, d], &mut rng));
        let mut tape = Tape::new();
        let p = head_params(&mut tape, d, 2, 2, false, &mut rng);
        let w = WeatherScalarParams {
            wt: tape.constant(randn(&[d, 1], &mut rng)),
        };
        let mut run = |x: &Tensor, z: &Tensor| -> Result<(Tensor, Tensor)> {
            let x = tape.constant(x.clone());
            let z = tape.constant(z.clone());
            let sa = multi_head_attention(&mut tape, x, x, x, &p)?;
            let vw = weather_scalar(&mut tape, z, &w, WeatherActivation::Sigmoid)?;
            let fa = fog_aware_attention(&mut tape, x, vw, &p, ScaleAxis::Key)?;
            Ok((tape.value(sa).clone(), tape.value(fa).clone()))
        };
        let (sa, fa) = lift(run(&xt, &zt))?;
        let (sa_p, fa_p) = lift(run(&permute_rows(&xt, &perm), &permute_rows(&zt, &perm)))?;
        let e1 = sa_p.max_abs_diff(&permute_rows(&sa, &perm));
        let e2 = fa_p.max_abs_diff(&permute_rows(&fa, &perm));
        ensure(e1 <= 1e-12 && e2 <= 1e-12, || format!("self {e1:.3e}, fog-aware {e2:.3e}"))?;
    }
    Ok(())
}

// Plain-loop reference attention used as an independent oracle.
fn ref_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let data = (0..n * m)
        .map(|ij| (0..k).map(|l| a.at(ij / m, l) * b.at(l, ij % m)).sum())
        .collect();
    Tensor::new(vec![n, m], data).expect("matmul shape")
}

fn ref_mha(q: &Tensor, kv: &Tensor, w: &[Tensor], heads: usize) -> Tensor {
    let (n, d) = (q.rows(), q.cols());
    let mut cat: Vec<Vec<f64>> = vec![Vec::new(); n];
    for h in 0..heads {
        let qh = ref_matmul(q, &w[h]);
        let kh = ref_matmul(kv, &w[heads + h]);
        let vh = ref_matmul(kv, &w[2 * heads + h]);
        let d_k = qh.cols() as f64;
        for (i, out) in cat.iter_mut().enumerate() {
            let logits: Vec<f64> = (0..kh.rows())
                .map(|j| qh.row(i).iter().zip(kh.row(j)).map(|(a, b)| a * b).sum::<f64>() / d_k.sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..vh.cols() {
                out.push((0..vh.rows()).map(|j| e[j] / z * vh.at(j, c)).sum());
            }
        }
    }
    let width = cat[0].len();
    let cat = Tensor::new(vec![n, width], cat.concat()).expect("concat shape");
    let out = ref_matmul(&cat, &w[3 * heads]);
    debug_assert_eq!(out.cols(), d);
    out
}

fn ref_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let d = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let sd = (var + LAYER_NORM_EPS).sqrt();
        data.extend(row.iter().enumerate().map(|(j, v)| (v - mean) / sd * gain.data()[j] + bias.data()[j]));
    }
    Tensor::new(x.shape().to_vec(), data).expect("layer norm shape")
}

fn fusion_collapse(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("fusion");
    let (d, heads, d_k) = (4, 2, 2);
    for _ in 0..ctx.cases {
        let n = rng.random_range(1..=6);
        let xt = randn(&[n, d], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let p = head_params(&mut tape, d, heads, d_k, false, &mut rng);
        let gain = tape.constant(randn(&[d], &mut rng));
        let bias = tape.constant(randn(&[d], &mut rng));
        let fp = FusionParams {
            image: p.clone(),
            fog: p.clone(),
            cross: p.clone(),
            norm_gain: gain,
            norm_bias: bias,
        };
        let out = lift(fusion_encoder_layer(&mut tape, x, x, &fp))?;
        let w: Vec<Tensor> = p.wq.iter().chain(&p.wk).chain(&p.wv).chain([&p.wo]).map(|&v| tape.value(v).clone()).collect();
        let e = ref_mha(&xt, &xt, &w, heads);
        let sa = ref_mha(&e, &e, &w, heads);
        let sum = Tensor::new(e.shape().to_vec(), e.data().iter().zip(sa.data()).map(|(a, b)| a + b).collect());
        let expect = ref_layer_norm(&lift(sum)?, tape.value(gain), tape.value(bias));
        let err = tape.value(out).max_abs_diff(&expect);
        ensure(err <= 1e-12, || format!("n={n}: difference {err:.3e}"))?;
    }
    Ok(())
}

fn attention_gradients(ctx: &Ctx) -> Outcome {
    gradient_bound(ctx, |n| n.contains("attention") || n.contains("fusion"))
}

fn hungarian_matches_brute_force(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("hungarian");
    for k in 0..1000 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(rows..=7);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let (assign, _) = lift(solve_assignment(&cost))?;
        let mut seen = assign.clone();
        seen.sort_unstable();
        seen.dedup();
        ensure(assign.len() == rows && seen.len() == rows, || format!("case {k}: invalid assignment {assign:?}"))?;
        // summed in row order, like the brute-force search
        let total = assign.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + cost[i][j]);
        let best = brute_force_assignment(&cost);
        ensure(total == best, || format!("case {k} ({rows}x{cols}): {total} vs brute force {best}"))?;
    }
    Ok(())
}

fn loss_of(det: &Detector, img: &Image, gt: &Annotation) -> Result<f64> {
    let mut tape = Tape::new();
    let b = det.bind(&mut tape, false);
    let s = det.sample_loss(&mut tape, &b, img, None, gt)?;
    Ok(tape.value(s.terms.total).item())
}

fn loss_ignores_gt_order(ctx: &Ctx) -> Outcome {
    let mut checked = 0;
    for k in 0..40u64 {
        let (img, _, gt) = scene(ctx.seed.wrapping_add(k))?;
        if gt.len() < 2 {
            continue;
        }
        let rev = Annotation {
            boxes: gt.boxes.iter().rev().cloned().collect(),
            labels: gt.labels.iter().rev().cloned().collect(),
        };
        let det = lift(Detector::new(DetectorConfig::default(), ctx.seed.wrapping_add(k)))?;
        let (a, b) = (lift(loss_of(&det, &img, &gt))?, lift(loss_of(&det, &img, &rev))?);
        ensure((a - b).abs() <= 1e-12, || format!("scene {k}: {a} vs {b}"))?;
        checked += 1;
        if checked == 10 {
            return Ok(());
        }
    }
    ensure(checked > 0, || "no multi-object scenes sampled".into())
}

fn sgd_step_decreases_loss(ctx: &Ctx) -> Outcome {
    let mut decreased = 0;
    for k in 0..10u64 {
        let seed = ctx.seed.wrapping_add(k);
        let (img, _, gt) = scene(seed)?;
        let mut det = lift(Detector::new(DetectorConfig::default(), seed))?;
        let mut tape = Tape::new();
        let b = det.bind(&mut tape, true);
        let s = lift(det.sample_loss(&mut tape, &b, &img, None, &gt))?;
        let before = tape.value(s.terms.total).item();
        let grads = b.collect_grads(&lift(tape.backward(s.terms.total))?);
        for (name, g) in &grads {
            let p = det.params.get_mut(name).ok_or_else(|| format!("missing parameter {name}"))?;
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= 1e-3 * gv;
            }
        }
        if lift(loss_of(&det, &img, &gt))? < before {
            decreased += 1;
        }
    }
    ensure(decreased >= 9, || format!("loss decreased in {decreased}/10 seeds"))
}

fn baseline_equals_pl(ctx: &Ctx) -> Outcome {
    for k in 0..5u64 {
        let seed = ctx.seed.wrapping_add(k);
        let base = lift(Detector::new(DetectorConfig::default(), seed))?;
        let pl_cfg = DetectorConfig {
            variant: Variant::Pl,
            ..DetectorConfig::default()
        };
        let pl = lift(Detector::from_params(pl_cfg, base.params.clone()))?;
        let (img, _, _) = scene(seed)?;
        let run = |det: &Detector| -> Result<(Tensor, Tensor, Tensor)> {
            let mut tape = Tape::new();
            let b = det.bind(&mut tape, false);
            let f = det.forward(&mut tape, &b, &img, None)?;
            Ok((
                tape.value(f.memory).clone(),
                tape.value(f.output.boxes).clone(),
                tape.value(f.output.class_logits).clone(),
            ))
        };
        ensure(lift(run(&base))? == lift(run(&pl))?, || format!("seed {seed}: activations differ"))?;
    }
    Ok(())
}

fn pair(teacher_seed: u64, student_seed: u64) -> std::result::Result<TeacherStudentPair, String> {
    let cfg = DetectorConfig {
        variant: Variant::Pl,
        ..Default::default()
    };
    lift(TeacherStudentPair::new(
        lift(Detector::new(cfg.clone(), teacher_seed))?,
        lift(Detector::new(cfg, student_seed))?,
        PerceptualConfig::default(),
    ))
}

fn random_image(rng: &mut Rng) -> Image {
    let t = Tensor::randn(&[32 * 32, CHANNELS], 0.3, rng);
    Image {
        height: 32,
        width: 32,
        pixels: t.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect(),
    }
}

fn perceptual_zero_when_tied(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("perceptual-zero");
    for k in 0..5u64 {
        let p = pair(ctx.seed.wrapping_add(k), ctx.seed.wrapping_add(k))?;
        let img = random_image(&mut rng);
        let l = lift(perceptual_loss(&img, &img, &p))?;
        ensure(l == 0.0, || format!("tied loss {l:e}"))?;
    }
    Ok(())
}

fn perceptual_non_negative(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("perceptual-sign");
    let pairs = [pair(ctx.seed, ctx.seed.wrapping_add(1))?, pair(ctx.seed, ctx.seed)?];
    for k in 0..ctx.cases.min(100) {
        let (a, b) = (random_image(&mut rng), random_image(&mut rng));
        let l = lift(perceptual_loss(&a, &b, &pairs[k % 2]))?;
        ensure(l >= 0.0, || format!("case {k}: loss {l}"))?;
    }
    Ok(())
}

fn perceptual_symmetric(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("perceptual-symmetry");
    let p = pair(ctx.seed, ctx.seed)?;
    for k in 0..ctx.cases.min(20) {
        let (a, b) = (random_image(&mut rng), random_image(&mut rng));
        let (ab, ba) = (lift(perceptual_loss(&a, &b, &p))?, lift(perceptual_loss(&b, &a, &p))?);
        ensure(ab == ba, || format!("case {k}: {ab} vs {ba}"))?;
    }
    Ok(())
}

fn teacher_gets_no_gradient(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("teacher-grad");
    let p = pair(ctx.seed, ctx.seed.wrapping_add(1))?;
    let (clear, foggy) = (random_image(&mut rng), random_image(&mut rng));
    let mut tape = Tape::new();
    let tb = p.teacher.bind(&mut tape, true);
    let sb = p.student.bind(&mut tape, true);
    let tf = lift(p.teacher_features(&clear))?;
    let maps = lift(p.student.features(&mut tape, &sb, &foggy))?;
    let stack: Vec<Var> = maps.iter().map(|m| m.var).collect();
    let l = lift(perceptual_from_features(&mut tape, &tf, &stack, &p.perceptual))?;
    let g = lift(tape.backward(l))?;
    for (name, &v) in tb.iter() {
        let clean = g.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0));
        ensure(clean, || format!("teacher parameter {name} received gradient"))?;
    }
    let student = sb.collect_grads(&g);
    ensure(student.values().any(|t| t.data().iter().any(|&x| x != 0.0)), || "student got no gradient either".into())
}

fn perceptual_homogeneous(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("perceptual-lambda");
    let mut p = pair(ctx.seed, ctx.seed.wrapping_add(1))?;
    let base = p.perceptual.clone();
    for k in 0..ctx.cases.min(10) {
        let (a, b) = (random_image(&mut rng), random_image(&mut rng));
        p.perceptual = base.clone();
        let l = lift(perceptual_loss(&a, &b, &p))?;
        // power-of-two factors keep the scaling free of rounding
        for c in [0.25, 0.5, 2.0, 8.0] {
            p.perceptual = base.scaled(c);
            let lc = lift(perceptual_loss(&a, &b, &p))?;
            ensure(lc == c * l, || format!("case {k}, c={c}: {lc} vs {}", c * l))?;
        }
    }
    Ok(())
}

fn random_box(rng: &mut Rng) -> [f64; 4] {
    let (w, h) = (rng.random_range(0.01..0.6), rng.random_range(0.01..0.6));
    [
        rng.random_range(w / 2.0..=1.0 - w / 2.0),
        rng.random_range(h / 2.0..=1.0 - h / 2.0),
        w,
        h,
    ]
}

fn iou_symmetric(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("iou");
    for k in 0..ctx.cases * 10 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        ensure(iou(a, b) == iou(b, a), || format!("case {k}: {a:?} / {b:?}"))?;
    }
    Ok(())
}

const CATEGORIES: usize = 5;

fn ap_monotone_invariant(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("ap-monotone");
    for k in 0..ctx.cases {
        let (preds, gts) = random_eval_instance(&mut rng, CATEGORIES);
        let squashed: Vec<EvalPrediction> = preds
            .iter()
            .map(|p| EvalPrediction {
                confidence: 0.25 + 0.5 * p.confidence.powi(3),
                ..p.clone()
            })
            .collect();
        for c in 0..CATEGORIES {
            let (a, b) = (
                average_precision(&preds, &gts, c, IOU_THRESHOLD),
                average_precision(&squashed, &gts, c, IOU_THRESHOLD),
            );
            ensure(a == b, || format!("case {k}, category {c}: {a:?} vs {b:?}"))?;
        }
    }
    Ok(())
}

fn ap_top_false_positive(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("ap-false-positive");
    let fp_box = [0.02, 0.02, 0.02, 0.02];
    for k in 0..ctx.cases {
        let (preds, gts) = random_eval_instance(&mut rng, CATEGORIES);
        if preds.iter().any(|p| p.confidence >= 1.0) || gts.iter().flat_map(|g| &g.boxes).any(|b| iou(*b, fp_box) >= IOU_THRESHOLD) {
            continue;
        }
        for c in 0..CATEGORIES {
            let Some(before) = average_precision(&preds, &gts, c, IOU_THRESHOLD) else {
                continue;
            };
            let mut with_fp = preds.clone();
            with_fp.push(EvalPrediction {
                image: 0,
                bbox: fp_box,
                category: c,
                confidence: 1.0,
            });
            let after = average_precision(&with_fp, &gts, c, IOU_THRESHOLD).unwrap_or(f64::NAN);
            ensure(after <= before, || format!("case {k}, category {c}: {before} rose to {after}"))?;
        }
    }
    Ok(())
}

fn map_order_invariant(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("map-order");
    for k in 0..ctx.cases {
        let (preds, gts) = random_eval_instance(&mut rng, CATEGORIES);
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        let (a, b) = (map50(&preds, &gts, CATEGORIES), map50(&shuffled, &gts, CATEGORIES));
        let same = match (&a, &b) {
            (Ok(x), Ok(y)) => x == y,
            (Err(_), Err(_)) => true,
            _ => false,
        };
        ensure(same, || format!("case {k}: {a:?} vs {b:?}"))?;
    }
    Ok(())
}

fn map_matches_exhaustive(ctx: &Ctx) -> Outcome {
    let mut rng = ctx.rng("map-oracle");
    for k in 0..500 {
        let (preds, gts) = random_eval_instance(&mut rng, CATEGORIES);
        let fast = map50(&preds, &gts, CATEGORIES).ok().map(|r| r.map50);
        let slow = exhaustive_map50(&preds, &gts, CATEGORIES);
        let agree = match (fast, slow) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
            (None, None) => true,
            _ => false,
        };
        ensure(agree, || format!("case {k}: {fast:?} vs exhaustive {slow:?}"))?;
    }
    Ok(())
}

fn tiny_config(seed: u64, data: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.data.dir = data;
    cfg.data.train_count = 4;
    cfg.data.eval_count = 2;
    cfg.train.steps = 3;
    cfg.train.batch_size = 2;
    cfg
}

fn train_is_deterministic(ctx: &Ctx) -> Outcome {
    let root = ctx.dir("determinism")?;
    let cfg = tiny_config(ctx.seed, root.join("data"));
    lift(cmd_generate(&cfg, &cfg.data.dir))?;
    let (a, b) = (root.join("a"), root.join("b"));
    let ra = lift(cmd_train(&cfg, &a))?;
    let rb = lift(cmd_train(&cfg, &b))?;
    ensure(ra.status == RunStatus::Completed, || format!("run ended as {:?}", ra.status))?;
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    ensure(read(a.join(METRICS_FILE))? == read(b.join(METRICS_FILE))?, || "metrics differ".into())?;
    ensure(ra.checkpoint_hash == rb.checkpoint_hash, || {
        format!("checkpoint hashes {} vs {}", ra.checkpoint_hash, rb.checkpoint_hash)
    })
}

fn eval_is_read_only(ctx: &Ctx) -> Outcome {
    let root = ctx.dir("read-only")?;
    let cfg = tiny_config(ctx.seed, root.join("data"));
    lift(cmd_generate(&cfg, &cfg.data.dir))?;
    lift(cmd_train(&cfg, &root.join("run")))?;
    let ckpt = root.join("run").join(CHECKPOINT_DIR);
    let data_before = lift(snapshot_files(&cfg.data.dir))?;
    let ckpt_before = lift(snapshot_files(&ckpt))?;
    lift(cmd_eval(&cfg, &ckpt, &root.join("eval")))?;
    ensure(lift(snapshot_files(&cfg.data.dir))? == data_before, || "dataset changed".into())?;
    ensure(lift(snapshot_files(&ckpt))? == ckpt_before, || "checkpoint changed".into())
}

fn fog_variants_need_depth(ctx: &Ctx) -> Outcome {
    let root = ctx.dir("no-depth")?;
    let mut cfg = tiny_config(ctx.seed, root.join("data"));
    cfg.data.write_depth = false;
    lift(cmd_generate(&cfg, &cfg.data.dir))?;
    for variant in [Variant::Waa, Variant::Wfe] {
        cfg.model.variant = variant;
        let out = root.join(variant.name());
        match cmd_train(&cfg, &out) {
            Err(Error::Config(_)) => {}
            other => return Err(format!("{variant:?}: expected a config error, got {:?}", other.map(|r| r.status))),
        }
        ensure(!out.join(CHECKPOINT_DIR).exists(), || format!("{variant:?} wrote a checkpoint"))?;
    }
    Ok(())
}
