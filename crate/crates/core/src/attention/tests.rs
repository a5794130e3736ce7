use proptest::prelude::*;

use super::*;
use crate::autodiff::{gradient_check, GradCheckOptions};
use crate::rng::SeedStream;

type Mat = Vec<Vec<f64>>;

// Straight-line reference math, independent of the tape.
fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn oracle_head(x_q: &Mat, x_kv: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, col_scale: Option<&[f64]>) -> Mat {
    let (q, k, v) = (mm(x_q, wq), mm(x_kv, wk), mm(x_kv, wv));
    let dk = wq[0].len() as f64;
    let mut out = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt();
                s * col_scale.map_or(1.0, |c| c[j])
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        out.push((0..v[0].len()).map(|c| w.iter().zip(&v).map(|(a, vr)| a * vr[c]).sum()).collect());
    }
    out
}

fn close(a: &Mat, b: &Tensor, tol: f64) -> bool {
    a.len() == b.rows() && a.iter().enumerate().all(|(i, r)| r.iter().zip(b.row(i)).all(|(x, y)| (x - y).abs() <= tol))
}

struct Fixture {
    store: ParamStore,
    heads: usize,
}

impl Fixture {
    fn new(d: usize, heads: usize, d_k: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).rng();
        AttentionParams::init(&mut store, "att", d, heads, d_k, &mut rng);
        Fixture { store, heads }
    }

    fn bind(&self, tape: &mut Tape) -> AttentionParams {
        AttentionParams::bind(&self.store.bind(tape, false), "att", self.heads).unwrap()
    }

    fn mat(&self, name: &str) -> Mat {
        to_mat(self.store.get(name).unwrap())
    }
}

fn tokens(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], 1.0, &mut SeedStream::new(seed).rng())
}

#[test]
fn single_token_returns_its_value_vector() {
    let f = Fixture::new(4, 1, 3, 1);
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let x = tape.constant(tokens(1, 4, 2));
    let y = self_attention(&mut tape, x, &p).unwrap();
    let v = tape.matmul(x, p.wv[0]).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(v)) < 1e-15);
}

#[test]
fn zero_query_key_weights_average_values() {
    let mut f = Fixture::new(4, 1, 3, 3);
    f.store.insert("att.wq0", Tensor::zeros(&[4, 3]));
    f.store.insert("att.wk0", Tensor::zeros(&[4, 3]));
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let x = tape.constant(tokens(5, 4, 4));
    let y = self_attention(&mut tape, x, &p).unwrap();
    let v = tape.matmul(x, p.wv[0]).unwrap();
    let vv = tape.value(v);
    for i in 0..5 {
        for c in 0..3 {
            let mean = (0..5).map(|r| vv.at(r, c)).sum::<f64>() / 5.0;
            assert!((tape.value(y).at(i, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn self_attention_matches_reference() {
    let f = Fixture::new(4, 1, 4, 5);
    let x = tokens(3, 4, 6);
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = self_attention(&mut tape, xv, &p).unwrap();
    let xm = to_mat(&x);
    let expected = oracle_head(&xm, &xm, &f.mat("att.wq0"), &f.mat("att.wk0"), &f.mat("att.wv0"), None);
    assert!(close(&expected, tape.value(y), 1e-12));
}

#[test]
fn multi_head_reductions() {
    // h=1 with identity output projection equals self_attention exactly.
    let mut f = Fixture::new(4, 1, 4, 7);
    f.store.insert("att.wo", Tensor::eye(4));
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let x = tape.constant(tokens(6, 4, 8));
    let a = self_attention(&mut tape, x, &p).unwrap();
    let b = multi_head_attention(&mut tape, x, x, x, &p).unwrap();
    assert_eq!(tape.value(a), tape.value(b));

    // h=2 equals the concatenation oracle of two single-head evaluations.
    let f = Fixture::new(4, 2, 3, 9);
    let x = tokens(5, 4, 10);
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = multi_head_attention(&mut tape, xv, xv, xv, &p).unwrap();
    let xm = to_mat(&x);
    let h0 = oracle_head(&xm, &xm, &f.mat("att.wq0"), &f.mat("att.wk0"), &f.mat("att.wv0"), None);
    let h1 = oracle_head(&xm, &xm, &f.mat("att.wq1"), &f.mat("att.wk1"), &f.mat("att.wv1"), None);
    let cat: Mat = h0.iter().zip(&h1).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    assert!(close(&mm(&cat, &f.mat("att.wo")), tape.value(y), 1e-12));
}

#[test]
fn parameter_mismatch_is_reported() {
    let mut f = Fixture::new(4, 2, 3, 11);
    f.store.insert("att.wo", Tensor::zeros(&[5, 4]));
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let x = tape.constant(tokens(2, 4, 1));
    assert!(matches!(multi_head_attention(&mut tape, x, x, x, &p), Err(Error::Param(_))));
    let bad = tape.constant(tokens(2, 5, 1));
    assert!(self_attention(&mut tape, bad, &p).is_err());
}

#[test]
fn weather_scalar_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(tokens(4, 6, 12));
    let zero = WeatherScalarParams {
        wt: tape.constant(Tensor::zeros(&[6, 1])),
    };
    let v = weather_scalar(&mut tape, z, &zero, WeatherActivation::Sigmoid).unwrap();
    assert!(tape.value(v).data().iter().all(|&x| x == 0.5));

    let ones = tape.constant(Tensor::ones(&[4, 6]));
    let neg = WeatherScalarParams {
        wt: tape.constant(Tensor::full(&[6, 1], -100.0)),
    };
    let v = weather_scalar(&mut tape, ones, &neg, WeatherActivation::Sigmoid).unwrap();
    assert!(tape.value(v).data().iter().all(|&x| x < 1e-100));

    let wt = tokens(6, 1, 13);
    let w = WeatherScalarParams {
        wt: tape.constant(wt.clone()),
    };
    let v = weather_scalar(&mut tape, z, &w, WeatherActivation::Sigmoid).unwrap();
    let raw = weather_scalar(&mut tape, z, &w, WeatherActivation::Raw).unwrap();
    let zt = tape.value(z).clone();
    for i in 0..4 {
        let dot: f64 = zt.row(i).iter().zip(wt.data()).map(|(a, b)| a * b).sum();
        assert!((tape.value(raw).data()[i] - dot).abs() < 1e-12);
        assert!((tape.value(v).data()[i] - 1.0 / (1.0 + (-dot).exp())).abs() < 1e-12);
    }
}

#[test]
fn fog_aware_attention_examples() {
    let f = Fixture::new(4, 1, 4, 14);
    let x = tokens(5, 4, 15);
    let mut tape = Tape::new();
    let p = f.bind(&mut tape);
    let xv = tape.constant(x.clone());

    let ones = tape.constant(Tensor::ones(&[5, 1]));
    let fa = fog_aware_attention(&mut tape, xv, ones, &p, ScaleAxis::Key).unwrap();
    let sa = multi_head_attention(&mut tape, xv, xv, xv, &p).unwrap();
    assert!(tape.value(fa).max_abs_diff(tape.value(sa)) <= 1e-12);

    let zeros = tape.constant(Tensor::zeros(&[5, 1]));
    for axis in [ScaleAxis::Key, ScaleAxis::Query] {
        let w = attention_weights(&mut tape, xv, xv, p.wq[0], p.wk[0], Some((zeros, axis))).unwrap();
        assert!(tape.value(w).data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
    }

    let scale = vec![0.3, 1.0, 6.0, 0.5, 1.0];
    let vw = tape.constant(Tensor::new(vec![5, 1], scale.clone()).unwrap());
    let y = fog_aware_attention(&mut tape, xv, vw, &p, ScaleAxis::Key).unwrap();
    let xm = to_mat(&x);
    let head = oracle_head(&xm, &xm, &f.mat("att.wq0"), &f.mat("att.wk0"), &f.mat("att.wv0"), Some(&scale));
    assert!(close(&mm(&head, &f.mat("att.wo")), tape.value(y), 1e-12));

    let short = tape.constant(Tensor::ones(&[4, 1]));
    assert!(matches!(
        fog_aware_attention(&mut tape, xv, short, &p, ScaleAxis::Key),
        Err(Error::Shape { .. })
    ));
}

fn fusion_fixture(seed: u64, d: usize, heads: usize) -> ParamStore {
    let mut store = ParamStore::new();
    FusionParams::init(&mut store, "wfe", d, heads, d / heads, &mut SeedStream::new(seed).rng());
    store
}

fn tie_fusion(store: &mut ParamStore, heads: usize) {
    for i in 0..heads {
        for w in ["wq", "wk", "wv"] {
            let t = store.get(&format!("wfe.image.{w}{i}")).unwrap().clone();
            store.insert(format!("wfe.fog.{w}{i}"), t.clone());
            store.insert(format!("wfe.cross.{w}{i}"), t);
        }
    }
    let wo = store.get("wfe.image.wo").unwrap().clone();
    store.insert("wfe.fog.wo", wo.clone());
    store.insert("wfe.cross.wo", wo);
}

#[test]
fn fusion_collapses_to_self_attention_on_identical_streams() {
    let mut store = fusion_fixture(16, 6, 2);
    tie_fusion(&mut store, 2);
    let mut tape = Tape::new();
    let p = FusionParams::bind(&store.bind(&mut tape, false), "wfe", 2).unwrap();
    let x = tape.constant(tokens(7, 6, 17));
    let out = fusion_encoder_layer(&mut tape, x, x, &p).unwrap();
    let e = multi_head_attention(&mut tape, x, x, x, &p.image).unwrap();
    let se = multi_head_attention(&mut tape, e, e, e, &p.image).unwrap();
    let sum = tape.add(e, se).unwrap();
    let expected = tape.layer_norm(sum, p.norm_gain, p.norm_bias, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(expected)) <= 1e-12);
}

#[test]
fn fusion_with_silent_fog_stream_is_normalized_image_stream() {
    let mut store = fusion_fixture(18, 4, 1);
    store.insert("wfe.cross.wv0", Tensor::zeros(&[4, 4]));
    let mut tape = Tape::new();
    let p = FusionParams::bind(&store.bind(&mut tape, false), "wfe", 1).unwrap();
    let x = tape.constant(tokens(5, 4, 19));
    let fog = tape.constant(Tensor::zeros(&[5, 4]));
    let out = fusion_encoder_layer(&mut tape, x, fog, &p).unwrap();
    let e = multi_head_attention(&mut tape, x, x, x, &p.image).unwrap();
    let expected = tape.layer_norm(e, p.norm_gain, p.norm_bias, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(expected)) <= 1e-12);

    let other = tape.constant(tokens(4, 4, 1));
    assert!(fusion_encoder_layer(&mut tape, x, other, &p).is_err());
}

#[test]
fn fusion_matches_composed_reference() {
    let store = fusion_fixture(20, 4, 1);
    let (xi, xf) = (tokens(3, 4, 21), tokens(3, 4, 22));
    let mut tape = Tape::new();
    let p = FusionParams::bind(&store.bind(&mut tape, false), "wfe", 1).unwrap();
    let (a, b) = (tape.constant(xi.clone()), tape.constant(xf.clone()));
    let out = fusion_encoder_layer(&mut tape, a, b, &p).unwrap();

    let m = |n: &str| to_mat(store.get(n).unwrap());
    let sa = |x: &Mat, pre: &str| {
        let h = oracle_head(x, x, &m(&format!("{pre}.wq0")), &m(&format!("{pre}.wk0")), &m(&format!("{pre}.wv0")), None);
        mm(&h, &m(&format!("{pre}.wo")))
    };
    let e_img = sa(&to_mat(&xi), "wfe.image");
    let e_fog = sa(&to_mat(&xf), "wfe.fog");
    let cross = mm(
        &oracle_head(&e_img, &e_fog, &m("wfe.cross.wq0"), &m("wfe.cross.wk0"), &m("wfe.cross.wv0"), None),
        &m("wfe.cross.wo"),
    );
    let expected: Mat = e_img
        .iter()
        .zip(&cross)
        .map(|(r, c)| {
            let s: Vec<f64> = r.iter().zip(c).map(|(a, b)| a + b).collect();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
            s.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
        })
        .collect();
    assert!(close(&expected, tape.value(out), 1e-12));
}

#[test]
fn sinusoidal_positions_examples() {
    let t = sinusoidal_positions(8, 6).unwrap();
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let long = sinusoidal_positions(16, 6).unwrap();
    assert_eq!(&long.data()[..t.numel()], t.data());
    assert!(matches!(sinusoidal_positions(4, 5), Err(Error::Param(_))));
}

fn named_attention(names: &[String], v: &[Var], pre: &str, heads: usize) -> AttentionParams {
    let lookup = |name: String| v[names.iter().position(|n| *n == name).unwrap()];
    AttentionParams {
        wq: (0..heads).map(|i| lookup(format!("{pre}.wq{i}"))).collect(),
        wk: (0..heads).map(|i| lookup(format!("{pre}.wk{i}"))).collect(),
        wv: (0..heads).map(|i| lookup(format!("{pre}.wv{i}"))).collect(),
        wo: lookup(format!("{pre}.wo")),
    }
}

fn flatten(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(k, t)| (k.clone(), t.clone())).unzip()
}

fn projected(t: &mut Tape, y: Var, proj: &Tensor) -> crate::Result<Var> {
    let w = t.constant(proj.clone());
    let s = t.mul(y, w)?;
    Ok(t.sum(s))
}

#[test]
fn all_variants_pass_gradient_check() {
    let opts = GradCheckOptions {
        step: 1e-6,
        probes: Some(100),
        seed: 1,
    };
    let (x, xf, proj) = (tokens(4, 4, 30), tokens(4, 4, 31), tokens(4, 4, 33));
    let f = Fixture::new(4, 2, 2, 32);
    let (names, params) = flatten(&f.store);
    let k = params.len();

    let mut all = params.clone();
    all.push(x.clone());
    let err = gradient_check(
        |t, v| {
            let p = named_attention(&names, v, "att", 2);
            let y = multi_head_attention(t, v[k], v[k], v[k], &p)?;
            projected(t, y, &proj)
        },
        &all,
        opts,
    )
    .unwrap();
    assert!(err < 1e-4, "mha {err}");

    let mut all = params.clone();
    all.extend([x.clone(), xf.clone(), tokens(4, 1, 34)]);
    for activation in [WeatherActivation::Sigmoid, WeatherActivation::Raw] {
        for axis in [ScaleAxis::Key, ScaleAxis::Query] {
            let err = gradient_check(
                |t, v| {
                    let p = named_attention(&names, v, "att", 2);
                    let vw = weather_scalar(t, v[k + 1], &WeatherScalarParams { wt: v[k + 2] }, activation)?;
                    let y = fog_aware_attention(t, v[k], vw, &p, axis)?;
                    projected(t, y, &proj)
                },
                &all,
                opts,
            )
            .unwrap();
            assert!(err < 1e-4, "fog-aware {activation:?} {axis:?}: {err}");
        }
    }

    let (fnames, mut fparams) = flatten(&fusion_fixture(35, 4, 2));
    let nf = fparams.len();
    fparams.extend([x, xf]);
    let err = gradient_check(
        |t, v| {
            let p = FusionParams {
                image: named_attention(&fnames, v, "wfe.image", 2),
                fog: named_attention(&fnames, v, "wfe.fog", 2),
                cross: named_attention(&fnames, v, "wfe.cross", 2),
                norm_gain: v[fnames.iter().position(|n| n == "wfe.norm.gain").unwrap()],
                norm_bias: v[fnames.iter().position(|n| n == "wfe.norm.bias").unwrap()],
            };
            let y = fusion_encoder_layer(t, v[nf], v[nf + 1], &p)?;
            projected(t, y, &proj)
        },
        &fparams,
        opts,
    )
    .unwrap();
    assert!(err < 1e-4, "fusion {err}");
}

proptest! {
    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), n in 1usize..7, scale in 0.0f64..5.0) {
        let f = Fixture::new(4, 1, 3, seed);
        let mut tape = Tape::new();
        let p = f.bind(&mut tape);
        let x = tape.constant(Tensor::randn(&[n, 4], 2.0, &mut SeedStream::new(seed ^ 1).rng()));
        let vw = tape.constant(Tensor::full(&[n, 1], scale));
        for weather in [None, Some((vw, ScaleAxis::Key)), Some((vw, ScaleAxis::Query))] {
            let w = attention_weights(&mut tape, x, x, p.wq[0], p.wk[0], weather).unwrap();
            for i in 0..n {
                prop_assert!((tape.value(w).row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7) {
        let f = Fixture::new(4, 2, 2, seed);
        let x = Tensor::randn(&[n, 4], 1.0, &mut SeedStream::new(seed ^ 2).rng());
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        perm.swap(0, n - 1);
        let mut tape = Tape::new();
        let p = f.bind(&mut tape);
        let xv = tape.constant(x);
        let px = tape.gather_rows(xv, &perm).unwrap();
        let y = multi_head_attention(&mut tape, xv, xv, xv, &p).unwrap();
        let py = tape.gather_rows(y, &perm).unwrap();
        let ypx = multi_head_attention(&mut tape, px, px, px, &p).unwrap();
        prop_assert!(tape.value(py).max_abs_diff(tape.value(ypx)) <= 1e-12);
    }
}
