//! Scaled dot-product attention and its fog-aware variants.
//!
//! All functions record onto a [`Tape`], so the same code serves forward
//! evaluation, training and gradient checking.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;

/// Per-head projections plus the shared output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    /// `[(heads * d_k) x d]`
    pub wo: Var,
}

/// Linear map from auxiliary-stream tokens to one weather scalar per token.
#[derive(Clone, Copy, Debug)]
pub struct WeatherScalarParams {
    /// `[d x 1]`
    pub wt: Var,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub image: AttentionParams,
    pub fog: AttentionParams,
    pub cross: AttentionParams,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

/// Which logit axis a per-token weather scalar multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleAxis {
    /// Column `j` of the logits is scaled by `v_w[j]`: attended-to tokens in
    /// dense fog receive less weight.
    #[default]
    Key,
    /// Row `i` is scaled by `v_w[i]`: sharpens or flattens each query's
    /// distribution instead.
    Query,
}

/// Squashing applied to the raw projection `W_t z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherActivation {
    #[default]
    Sigmoid,
    /// Unbounded scalar, reproduces the unstable formulation.
    Raw,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    /// Returns `(d_in, d_k, d_out)` after checking all shapes agree.
    pub fn dims(&self, tape: &Tape) -> Result<(usize, usize, usize)> {
        let h = self.heads();
        if h == 0 || self.wk.len() != h || self.wv.len() != h {
            return Err(Error::Param(format!(
                "attention needs matching head counts, got q={} k={} v={}",
                h,
                self.wk.len(),
                self.wv.len()
            )));
        }
        let first = tape.shape(self.wq[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::shape("attention params", &first, &[0, 0]));
        }
        for &w in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            if tape.shape(w) != first.as_slice() {
                return Err(Error::shape("attention params", &first, tape.shape(w)));
            }
        }
        let (d_in, d_k) = (first[0], first[1]);
        let wo = tape.shape(self.wo);
        if wo.len() != 2 || wo[0] != h * d_k {
            return Err(Error::Param(format!(
                "output projection has shape {wo:?} but {h} heads of width {d_k} need {} rows",
                h * d_k
            )));
        }
        Ok((d_in, d_k, wo[1]))
    }

    /// Registers fresh weights under `prefix` in `store`.
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, d_k: usize, rng: &mut Rng) {
        for i in 0..heads {
            for w in ["wq", "wk", "wv"] {
                store.init_normal(format!("{prefix}.{w}{i}"), &[d, d_k], d, rng);
            }
        }
        store.init_normal(format!("{prefix}.wo"), &[heads * d_k, d], heads * d_k, rng);
    }

    pub fn bind(b: &Binding, prefix: &str, heads: usize) -> Result<Self> {
        let each = |w: &str| -> Result<Vec<Var>> { (0..heads).map(|i| b.get(&format!("{prefix}.{w}{i}"))).collect() };
        Ok(AttentionParams {
            wq: each("wq")?,
            wk: each("wk")?,
            wv: each("wv")?,
            wo: b.get(&format!("{prefix}.wo"))?,
        })
    }
}

impl WeatherScalarParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) {
        store.init_normal(format!("{prefix}.wt"), &[d, 1], d, rng);
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(WeatherScalarParams {
            wt: b.get(&format!("{prefix}.wt"))?,
        })
    }
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, d_k: usize, rng: &mut Rng) {
        for part in ["image", "fog", "cross"] {
            AttentionParams::init(store, &format!("{prefix}.{part}"), d, heads, d_k, rng);
        }
        store.insert(format!("{prefix}.norm.gain"), Tensor::ones(&[d]));
        store.insert(format!("{prefix}.norm.bias"), Tensor::zeros(&[d]));
    }

    pub fn bind(b: &Binding, prefix: &str, heads: usize) -> Result<Self> {
        Ok(FusionParams {
            image: AttentionParams::bind(b, &format!("{prefix}.image"), heads)?,
            fog: AttentionParams::bind(b, &format!("{prefix}.fog"), heads)?,
            cross: AttentionParams::bind(b, &format!("{prefix}.cross"), heads)?,
            norm_gain: b.get(&format!("{prefix}.norm.gain"))?,
            norm_bias: b.get(&format!("{prefix}.norm.bias"))?,
        })
    }
}

fn check_tokens(tape: &Tape, op: &'static str, x: Var, d: usize) -> Result<usize> {
    match *tape.shape(x) {
        [n, cols] if n >= 1 && cols == d => Ok(n),
        _ => Err(Error::shape(op, tape.shape(x), &[0, d])),
    }
}

/// Row-stochastic attention matrix `softmax(scale(Q K^T / sqrt(d_k)))`.
pub fn attention_weights(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    wq: Var,
    wk: Var,
    weather: Option<(Var, ScaleAxis)>,
) -> Result<Var> {
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(k_in, wk)?;
    let d_k = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let mut logits = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    if let Some((v_w, axis)) = weather {
        logits = match axis {
            ScaleAxis::Key => tape.scale_columns(logits, v_w)?,
            ScaleAxis::Query => tape.scale_rows(logits, v_w)?,
        };
    }
    tape.softmax_rows(logits)
}

fn head(
    tape: &mut Tape,
    q_in: Var,
    kv_in: (Var, Var),
    w: (Var, Var, Var),
    weather: Option<(Var, ScaleAxis)>,
) -> Result<Var> {
    let a = attention_weights(tape, q_in, kv_in.0, w.0, w.1, weather)?;
    let v = tape.matmul(kv_in.1, w.2)?;
    tape.matmul(a, v)
}

fn multi_head(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttentionParams,
    weather: Option<(Var, ScaleAxis)>,
) -> Result<Var> {
    let (d, _, _) = p.dims(tape)?;
    let n_q = check_tokens(tape, "attention query", q_in, d)?;
    let n_k = check_tokens(tape, "attention key", k_in, d)?;
    let n_v = check_tokens(tape, "attention value", v_in, d)?;
    if n_k != n_v {
        return Err(Error::shape("attention key/value", tape.shape(k_in), tape.shape(v_in)));
    }
    if let Some((v_w, axis)) = weather {
        let expected = if axis == ScaleAxis::Key { n_k } else { n_q };
        if tape.value(v_w).numel() != expected {
            return Err(Error::shape("weather scalar", tape.shape(v_w), &[expected, 1]));
        }
    }
    let heads = (0..p.heads())
        .map(|i| head(tape, q_in, (k_in, v_in), (p.wq[i], p.wk[i], p.wv[i]), weather))
        .collect::<Result<Vec<_>>>()?;
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    tape.matmul(cat, p.wo)
}

/// Single-head `softmax(Q K^T / sqrt(d_k)) V` without output projection.
pub fn self_attention(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<Var> {
    if p.heads() != 1 {
        return Err(Error::Param(format!("self_attention is single-head, got {} heads", p.heads())));
    }
    let (d, _, _) = p.dims(tape)?;
    check_tokens(tape, "self_attention", x, d)?;
    head(tape, x, (x, x), (p.wq[0], p.wk[0], p.wv[0]), None)
}

/// `Concat(head_1..head_h) W_O`; self-attention when all inputs coincide,
/// cross-attention when the query stream differs.
pub fn multi_head_attention(tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var, p: &AttentionParams) -> Result<Var> {
    multi_head(tape, q_in, k_in, v_in, p, None)
}

/// Per-token weather scalar `act(z W_t)`, shape `[n x 1]`.
pub fn weather_scalar(
    tape: &mut Tape,
    fog_stream: Var,
    w: &WeatherScalarParams,
    activation: WeatherActivation,
) -> Result<Var> {
    let raw = tape.matmul(fog_stream, w.wt)?;
    if tape.shape(raw)[1] != 1 {
        return Err(Error::shape("weather_scalar", tape.shape(w.wt), &[tape.shape(fog_stream)[1], 1]));
    }
    Ok(match activation {
        WeatherActivation::Sigmoid => tape.sigmoid(raw),
        WeatherActivation::Raw => raw,
    })
}

/// Multi-head self-attention whose logits are multiplied element-wise by the
/// broadcast weather scalar before the softmax.
pub fn fog_aware_attention(tape: &mut Tape, x: Var, v_w: Var, p: &AttentionParams, axis: ScaleAxis) -> Result<Var> {
    multi_head(tape, x, x, x, p, Some((v_w, axis)))
}

/// Dual-stream encoder layer: both streams self-attend, clear features query
/// the fog stream, and the result is fused by residual plus layer norm.
pub fn fusion_encoder_layer(tape: &mut Tape, x_img: Var, x_fog: Var, p: &FusionParams) -> Result<Var> {
    if tape.shape(x_img) != tape.shape(x_fog) {
        return Err(Error::shape("fusion_encoder_layer", tape.shape(x_img), tape.shape(x_fog)));
    }
    let e_img = multi_head_attention(tape, x_img, x_img, x_img, &p.image)?;
    let e_fog = multi_head_attention(tape, x_fog, x_fog, x_fog, &p.fog)?;
    let e_cross = multi_head_attention(tape, e_img, e_fog, e_fog, &p.cross)?;
    let sum = tape.add(e_img, e_cross)?;
    tape.layer_norm(sum, p.norm_gain, p.norm_bias, LAYER_NORM_EPS)
}

/// Fixed sine/cosine table: even columns `sin(pos / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Param(format!("positional encoding needs an even width, got {d}")));
    }
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, d], data)
}

#[cfg(test)]
mod tests;
