use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-6, 1e-4]`.
    pub step: f64,
    /// Number of randomly chosen coordinates to probe; `None` probes all.
    pub probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            probes: None,
            seed: 0,
        }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("probe evaluated to {x}")));
    }
    Ok(x)
}

/// Compares tape gradients of the scalar function `f` against central
/// differences and returns the largest `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::Param(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("function value at probe point".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).expect("parameters require grad"))
        .collect();

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let coords = match opts.probes {
        Some(k) if k < all.len() => {
            let mut rng = SeedStream::new(opts.seed).fork("gradcheck").rng();
            (0..k).map(|_| all[rng.random_range(0..all.len())]).collect()
        }
        _ => all,
    };

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, i) in coords {
        let orig = probe[p].data()[i];
        probe[p].data_mut()[i] = orig + opts.step;
        let plus = evaluate(&f, &probe)?;
        probe[p].data_mut()[i] = orig - opts.step;
        let minus = evaluate(&f, &probe)?;
        probe[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[p].data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
