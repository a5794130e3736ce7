//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 are empirical claims about training outcomes. They are
//! measured and reported like the rest but do not set the exit status; every
//! other criterion does.

use std::fs;
use std::path::Path;
use std::time::Instant;

use fogdetr::attention::{
    attention_weights, fog_aware_attention, fusion_encoder_layer, multi_head_attention, self_attention,
    weather_scalar, AttentionParams, FusionParams, ScaleAxis, WeatherActivation, WeatherScalarParams, LAYER_NORM_EPS,
};
use fogdetr::autodiff::{Tape, Tensor};
use fogdetr::detector::{solve_assignment, Detector, DetectorConfig, Variant};
use fogdetr::distill::{perceptual_loss, PerceptualConfig, StepMetrics, TeacherStudentPair};
use fogdetr::evalkit::map50;
use fogdetr::fogsim::{
    apply_fog, random_scene, render_scene, snapshot_files, transmission, DepthMap, FogParams, Image, SceneSampler,
};
use fogdetr::harness::oracles::{brute_force_assignment, exhaustive_map50, random_eval_instance};
use fogdetr::harness::{
    cmd_generate, cmd_train, gradient_suite, RunConfig, RunReport, RunStatus, CHECKPOINT_DIR, METRICS_FILE, REPORT_JSON,
};
use fogdetr::rng::{Rng, SeedStream};
use rand::seq::SliceRandom;
use rand::Rng as _;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn rng(name: &str) -> Rng {
    SeedStream::new(2024).fork("acceptance").fork(name).rng()
}

fn scene(seed: u64) -> (Image, DepthMap) {
    let (img, depth, _) = render_scene(&random_scene(&SceneSampler::default(), seed)).unwrap();
    (img, depth)
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let results = match gradient_suite(7) {
        Ok(r) => r,
        Err(e) => return verdict(false, e),
    };
    let secs = start.elapsed().as_secs_f64();
    let (worst_op, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("{} ops, max relative error {worst:.2e} ({worst_op}), {secs:.1}s", results.len()),
    )
}

fn fog_identities() -> Verdict {
    let mut r = rng("fog");
    let (mut identity, mut mult, mut far) = (true, 0.0f64, 0.0f64);
    let deep = DepthMap::uniform(32, 32, 1e3);
    for k in 0..100 {
        let (img, depth) = scene(k);
        identity &= apply_fog(&img, &depth, FogParams::clear()).unwrap().pixels == img.pixels;
        let (b1, b2) = (r.random_range(0.0..0.2), r.random_range(0.0..0.2));
        let joint = transmission(&depth, b1 + b2).unwrap();
        let (t1, t2) = (transmission(&depth, b1).unwrap(), transmission(&depth, b2).unwrap());
        for (j, (x, y)) in joint.iter().zip(t1.iter().zip(&t2)) {
            mult = mult.max((j - x * y).abs());
        }
        for fog in [FogParams::low(), FogParams::mid(), FogParams::high()] {
            let out = apply_fog(&img, &deep, fog).unwrap();
            for v in out.pixels {
                far = far.max((v - fog.atmospheric_light).abs());
            }
        }
    }
    verdict(
        identity && mult <= 1e-12 && far <= 1e-6,
        format!("beta=0 exact: {identity}, multiplicativity {mult:.1e}, far-depth gap {far:.1e}"),
    )
}

fn params(tape: &mut Tape, d: usize, heads: usize, d_k: usize, identity_out: bool, r: &mut Rng) -> AttentionParams {
    let mut each = |tape: &mut Tape| {
        (0..heads)
            .map(|_| tape.constant(Tensor::randn(&[d, d_k], 1.0, r)))
            .collect::<Vec<_>>()
    };
    let (wq, wk, wv) = (each(tape), each(tape), each(tape));
    let wo = if identity_out {
        tape.constant(Tensor::eye(d))
    } else {
        tape.constant(Tensor::randn(&[heads * d_k, d], 1.0, r))
    };
    AttentionParams { wq, wk, wv, wo }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::new(vec![perm.len(), t.cols()], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
}

fn attention_invariants() -> Verdict {
    let mut r = rng("attention");
    let d = 4;
    let (mut rows, mut neutral, mut exact, mut perm_err) = (0.0f64, 0.0f64, true, 0.0f64);
    for _ in 0..500 {
        let n = r.random_range(1..=6);
        let xt = Tensor::randn(&[n, d], 1.5, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let z = tape.constant(Tensor::randn(&[n, d], 1.0, &mut r));
        let w = WeatherScalarParams {
            wt: tape.constant(Tensor::randn(&[d, 1], 2.0, &mut r)),
        };
        let single = params(&mut tape, d, 1, d, true, &mut r);
        let multi = params(&mut tape, d, 2, 2, false, &mut r);

        let sig = weather_scalar(&mut tape, z, &w, WeatherActivation::Sigmoid).unwrap();
        let raw = weather_scalar(&mut tape, z, &w, WeatherActivation::Raw).unwrap();
        for weather in [None, Some((sig, ScaleAxis::Key)), Some((raw, ScaleAxis::Query))] {
            let a = attention_weights(&mut tape, x, x, multi.wq[0], multi.wk[0], weather).unwrap();
            let t = tape.value(a);
            for i in 0..t.rows() {
                rows = rows.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }

        let sa = self_attention(&mut tape, x, &single).unwrap();
        let ones = tape.constant(Tensor::ones(&[n, 1]));
        for axis in [ScaleAxis::Key, ScaleAxis::Query] {
            let fa = fog_aware_attention(&mut tape, x, ones, &single, axis).unwrap();
            neutral = neutral.max(tape.value(fa).max_abs_diff(tape.value(sa)));
        }
        let mha = multi_head_attention(&mut tape, x, x, x, &single).unwrap();
        exact &= tape.value(mha) == tape.value(sa);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let out = multi_head_attention(&mut tape, x, x, x, &multi).unwrap();
        let xp = tape.constant(permute_rows(&xt, &perm));
        let out_p = multi_head_attention(&mut tape, xp, xp, xp, &multi).unwrap();
        perm_err = perm_err.max(tape.value(out_p).max_abs_diff(&permute_rows(tape.value(out), &perm)));
    }
    verdict(
        rows <= 1e-12 && neutral <= 1e-12 && exact && perm_err <= 1e-12,
        format!(
            "row sums {rows:.1e}, V_w=1 gap {neutral:.1e}, h=1/W_O=I exact: {exact}, permutation gap {perm_err:.1e}"
        ),
    )
}

// Straight-loop attention and layer norm, independent of the tape.
fn ref_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let data = (0..n * m)
        .map(|ij| (0..k).map(|l| a.at(ij / m, l) * b.at(l, ij % m)).sum())
        .collect();
    Tensor::new(vec![n, m], data).unwrap()
}

fn ref_attention(x: &Tensor, w: &[Tensor], heads: usize) -> Tensor {
    let n = x.rows();
    let mut cat = vec![Vec::new(); n];
    for h in 0..heads {
        let (q, k, v) = (ref_matmul(x, &w[h]), ref_matmul(x, &w[heads + h]), ref_matmul(x, &w[2 * heads + h]));
        for (i, row) in cat.iter_mut().enumerate() {
            let logits: Vec<f64> = (0..n)
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / (q.cols() as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let s: f64 = e.iter().sum();
            row.extend((0..v.cols()).map(|c| (0..n).map(|j| e[j] / s * v.at(j, c)).sum::<f64>()));
        }
    }
    let width = cat[0].len();
    ref_matmul(&Tensor::new(vec![n, width], cat.concat()).unwrap(), &w[3 * heads])
}

fn fusion_collapse() -> Verdict {
    let mut r = rng("fusion");
    let (d, heads) = (4, 2);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(1..=6);
        let xt = Tensor::randn(&[n, d], 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let p = params(&mut tape, d, heads, 2, false, &mut r);
        let gain = tape.constant(Tensor::randn(&[d], 1.0, &mut r));
        let bias = tape.constant(Tensor::randn(&[d], 1.0, &mut r));
        let fp = FusionParams {
            image: p.clone(),
            fog: p.clone(),
            cross: p.clone(),
            norm_gain: gain,
            norm_bias: bias,
        };
        let out = fusion_encoder_layer(&mut tape, x, x, &fp).unwrap();
        let w: Vec<Tensor> = p.wq.iter().chain(&p.wk).chain(&p.wv).chain([&p.wo]).map(|&v| tape.value(v).clone()).collect();
        let e = ref_attention(&xt, &w, heads);
        let sa = ref_attention(&e, &w, heads);
        let (g, b) = (tape.value(gain).data(), tape.value(bias).data());
        let mut expect = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = e.row(i).iter().zip(sa.row(i)).map(|(a, b)| a + b).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            expect.extend(row.iter().enumerate().map(|(j, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[j] + b[j]));
        }
        worst = worst.max(tape.value(out).max_abs_diff(&Tensor::new(vec![n, d], expect).unwrap()));
    }
    verdict(worst <= 1e-12, format!("max gap to LN(E + SA(E)) {worst:.1e} over 500 cases"))
}

fn oracles() -> Verdict {
    let mut r = rng("oracles");
    let mut hungarian_ok = 0;
    for _ in 0..1000 {
        let rows = r.random_range(1..=7);
        let cols = r.random_range(rows..=7);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| r.random_range(0.0..10.0)).collect()).collect();
        let (assign, _) = solve_assignment(&cost).unwrap();
        let total = assign.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + cost[i][j]);
        hungarian_ok += usize::from(total == brute_force_assignment(&cost));
    }
    let (mut map_ok, mut worst) = (0, 0.0f64);
    for _ in 0..500 {
        let (preds, gts) = random_eval_instance(&mut r, 5);
        let fast = map50(&preds, &gts, 5).ok().map(|m| m.map50);
        match (fast, exhaustive_map50(&preds, &gts, 5)) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                map_ok += usize::from((a - b).abs() <= 1e-9);
            }
            (None, None) => map_ok += 1,
            _ => {}
        }
    }
    verdict(
        hungarian_ok == 1000 && map_ok == 500,
        format!("Hungarian exact on {hungarian_ok}/1000, mAP@50 within 1e-9 on {map_ok}/500 (max gap {worst:.1e})"),
    )
}

fn pl_pair(teacher: u64, student: u64) -> TeacherStudentPair {
    let cfg = DetectorConfig {
        variant: Variant::Pl,
        ..Default::default()
    };
    TeacherStudentPair::new(
        Detector::new(cfg.clone(), teacher).unwrap(),
        Detector::new(cfg, student).unwrap(),
        PerceptualConfig::default(),
    )
    .unwrap()
}

fn noise_image(r: &mut Rng) -> Image {
    let t = Tensor::randn(&[32 * 32, 3], 0.3, r);
    Image {
        height: 32,
        width: 32,
        pixels: t.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect(),
    }
}

fn perceptual() -> Verdict {
    let mut r = rng("perceptual");
    let tied = pl_pair(1, 1);
    let mut zero = true;
    for k in 0..20 {
        let img = if k % 2 == 0 { noise_image(&mut r) } else { scene(k).0 };
        zero &= perceptual_loss(&img, &img, &tied).unwrap() == 0.0;
    }
    let mut untied = pl_pair(1, 2);
    let mut negative = 0;
    for _ in 0..1000 {
        let (a, b) = (noise_image(&mut r), noise_image(&mut r));
        negative += usize::from(perceptual_loss(&a, &b, &untied).unwrap() < 0.0);
    }
    let base = untied.perceptual.clone();
    let mut homogeneous = true;
    for _ in 0..10 {
        let (a, b) = (noise_image(&mut r), noise_image(&mut r));
        untied.perceptual = base.clone();
        let l = perceptual_loss(&a, &b, &untied).unwrap();
        for c in [0.125, 0.5, 2.0, 4.0] {
            untied.perceptual = base.scaled(c);
            homogeneous &= perceptual_loss(&a, &b, &untied).unwrap() == c * l;
        }
    }
    verdict(
        zero && negative == 0 && homogeneous,
        format!("tied zero: {zero}, negative on {negative}/1000 pairs, lambda-homogeneity exact: {homogeneous}"),
    )
}

fn losses(run: &Path) -> Vec<f64> {
    fs::read_to_string(run.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<StepMetrics>(l).unwrap().l_total)
        .collect()
}

fn overfit_config(seed: u64, data: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.data.dir = data.to_path_buf();
    cfg.train.subset = Some(2);
    cfg.train.batch_size = 2;
    cfg.train.steps = 200;
    cfg.train.fog_levels = vec!["high".into()];
    cfg
}

struct Overfit {
    ratio: f64,
    report: RunReport,
    seconds: f64,
}

fn overfit(cfg: &RunConfig, out: &Path) -> Overfit {
    let start = Instant::now();
    let report = cmd_train(cfg, out).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let l = losses(out);
    let early = l.iter().take(5).sum::<f64>() / 5.0;
    let ratio = match l.get(199) {
        Some(last) if report.status == RunStatus::Completed => last / early,
        _ => f64::INFINITY,
    };
    Overfit { ratio, report, seconds }
}

fn ratios(runs: &[Overfit]) -> String {
    runs.iter().map(|o| format!("{:.2}", o.ratio)).collect::<Vec<_>>().join(" ")
}

fn overfit_data(root: &Path) -> std::path::PathBuf {
    let data = root.join("overfit-data");
    let mut cfg = RunConfig::with_seed(0);
    cfg.data.train_count = 8;
    cfg.data.eval_count = 1;
    cmd_generate(&cfg, &data).unwrap();
    data
}

fn baseline_overfits(root: &Path, data: &Path) -> Verdict {
    let runs: Vec<Overfit> = (0..10)
        .map(|s| overfit(&overfit_config(s, data), &root.join(format!("overfit-{s}"))))
        .collect();
    let ok = runs.iter().filter(|o| o.ratio <= 0.5 && o.seconds < 120.0).count();
    let slowest = runs.iter().map(|o| o.seconds).fold(0.0, f64::max);
    verdict(
        ok == 10,
        format!("{ok}/10 seeds at <= 50% (ratios {}), slowest {slowest:.1}s", ratios(&runs)),
    )
}

fn pl_beats_baseline(root: &Path) -> Verdict {
    let start = Instant::now();
    let data = root.join("fog-data");
    let mut gen = RunConfig::with_seed(0);
    gen.data.eval_splits = vec!["high".into()];
    cmd_generate(&gen, &data).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let score = |variant: Variant| {
            let mut cfg = RunConfig::with_seed(seed);
            cfg.data.dir = data.clone();
            cfg.data.eval_splits = vec!["high".into()];
            cfg.model.variant = variant;
            cfg.train.eval_splits = vec!["high".into()];
            let r = cmd_train(&cfg, &root.join(format!("{}-{seed}", variant.name()))).unwrap();
            r.evaluations.first().map_or(0.0, |e| e.map50)
        };
        let (base, pl) = (score(Variant::Baseline), score(Variant::Pl));
        wins += usize::from(pl >= base);
        rows.push(format!("{pl:.3}/{base:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        wins >= 4 && secs < 1800.0,
        format!("PL >= baseline on high fog in {wins}/5 seeds (PL/baseline mAP@50: {}), {secs:.0}s", rows.join(" ")),
    )
}

fn unsquashed_waa(root: &Path, data: &Path) -> Verdict {
    let raw = |seed: u64, clip: Option<f64>, variant: Variant| {
        let mut cfg = overfit_config(seed, data);
        cfg.model.variant = variant;
        cfg.model.weather_activation = WeatherActivation::Raw;
        cfg.optimizer.grad_clip = clip;
        let tag = clip.map_or("noclip", |_| "clip");
        overfit(&cfg, &root.join(format!("raw-{}-{tag}-{seed}", variant.name())))
    };
    let runs: Vec<Overfit> = (0..5).map(|s| raw(s, Some(1.0), Variant::Waa)).collect();
    let failed = runs.iter().filter(|o| o.ratio > 0.5).count();
    // every run must leave its diagnostics behind, diverged or not
    let recorded = runs.iter().all(|o| {
        let on_disk: Result<RunReport, _> = fs::read(root.join(format!("raw-waa-clip-{}", o.report.config.seed)).join(REPORT_JSON))
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()));
        match on_disk {
            Ok(r) => r.status == o.report.status && (r.status == RunStatus::Completed || r.divergence.is_some()),
            Err(_) => false,
        }
    });
    let diverged = runs.iter().filter(|o| o.report.status == RunStatus::Diverged).count();
    // same protocol without gradient clipping, for context only
    let noclip: Vec<Overfit> = (0..5).map(|s| raw(s, None, Variant::Waa)).collect();
    let base_noclip: Vec<Overfit> = (0..5)
        .map(|s| {
            let mut cfg = overfit_config(s, data);
            cfg.optimizer.grad_clip = None;
            overfit(&cfg, &root.join(format!("base-noclip-{s}")))
        })
        .collect();
    verdict(
        failed >= 3 && recorded,
        format!(
            "{failed}/5 seeds diverged or missed the bar ({diverged} diverged; ratios {}), diagnostics recorded: {recorded}; \
             without clipping: raw WAA {} vs baseline {}",
            ratios(&runs),
            ratios(&noclip),
            ratios(&base_noclip)
        ),
    )
}

fn determinism(root: &Path) -> Verdict {
    let data = root.join("det-data");
    let mut cfg = RunConfig::with_seed(11);
    cfg.data.dir = data.clone();
    cfg.data.train_count = 16;
    cfg.data.eval_count = 8;
    cfg.train.steps = 40;
    cfg.train.batch_size = 4;
    cfg.distill.teacher_steps = 20;
    cfg.train.eval_splits = vec!["clear".into(), "high".into()];
    cmd_generate(&cfg, &data).unwrap();
    let mut same = Vec::new();
    for variant in [Variant::Baseline, Variant::Pl, Variant::Waa, Variant::Wfe] {
        cfg.model.variant = variant;
        let a = root.join(format!("det-{}-a", variant.name()));
        let b = root.join(format!("det-{}-b", variant.name()));
        let (ra, rb) = (cmd_train(&cfg, &a).unwrap(), cmd_train(&cfg, &b).unwrap());
        let identical = fs::read(a.join(METRICS_FILE)).unwrap() == fs::read(b.join(METRICS_FILE)).unwrap()
            && snapshot_files(&a.join(CHECKPOINT_DIR)).unwrap() == snapshot_files(&b.join(CHECKPOINT_DIR)).unwrap()
            && ra.checkpoint_hash == rb.checkpoint_hash
            && ra.teacher_checkpoint_hash == rb.teacher_checkpoint_hash
            && ra.evaluations == rb.evaluations;
        same.push((variant.name(), identical));
    }
    let all = same.iter().all(|(_, s)| *s);
    let list: Vec<String> = same.iter().map(|(v, s)| format!("{v}={s}")).collect();
    verdict(all, format!("byte-identical metrics, checkpoints and evaluations: {}", list.join(" ")))
}

fn main() {
    // `cargo test -- --list` and friends pass flags meant for the default harness
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = overfit_data(root);
    let criteria: Vec<(u32, bool, Box<dyn Fn() -> Verdict + '_>)> = vec![
        (1, true, Box::new(gradients)),
        (2, true, Box::new(fog_identities)),
        (3, true, Box::new(attention_invariants)),
        (4, true, Box::new(fusion_collapse)),
        (5, true, Box::new(oracles)),
        (6, true, Box::new(perceptual)),
        (7, true, Box::new(|| baseline_overfits(root, &data))),
        (8, false, Box::new(|| pl_beats_baseline(root))),
        (9, false, Box::new(|| unsquashed_waa(root, &data))),
        (10, true, Box::new(|| determinism(root))),
    ];
    let mut gating_failures = 0;
    for (n, gating, check) in criteria {
        let start = Instant::now();
        let v = check();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        let note = if gating || v.passed { "" } else { " [empirical, not gating]" };
        println!("criterion {n:>2}: {tag}{note} ({:.1}s) {}", start.elapsed().as_secs_f64(), v.detail);
        if gating && !v.passed {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        eprintln!("{gating_failures} gating criteria failed");
        std::process::exit(1);
    }
}
