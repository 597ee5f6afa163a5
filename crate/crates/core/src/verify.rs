//! Finite-difference verification of the autodiff engine: every op on its
//! own, then a full conditional pair model (encoder, generator, pair
//! discriminator) through its discriminator loss.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{grad_check, BnMode, Graph, Var};
use crate::error::Result;
use crate::models::{sample_priors, ArchConfig, Network};
use crate::objectives::{self, Bound};
use crate::rng;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Relative disagreement of the one-sided slopes that marks a kink.
const KINK_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub entries: usize,
    /// Probed entries dropped because a kink fell inside the stencil.
    pub skipped: usize,
}

fn uniform(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "verify");
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// Reduce to a scalar through a fixed random probe so every output
/// entry carries a distinct weight.
fn probe_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let p = g.constant(uniform(g.shape(y), seed, 1.0));
    let y = g.mul(y, p)?;
    Ok(g.sum(y))
}

fn op_cases() -> Vec<(&'static str, Tensor<f64>, OpFn)> {
    let x4 = uniform(&[2, 3, 5, 5], 1, 1.0);
    let k = uniform(&[4, 3, 3, 3], 2, 0.5);
    let kt = uniform(&[3, 2, 4, 4], 3, 0.5);
    let xt = uniform(&[2, 3, 3, 3], 4, 1.0);
    let mat = uniform(&[3, 5], 5, 1.0);
    let w = uniform(&[4, 5], 6, 0.5);
    let b = uniform(&[4], 7, 0.5);
    let gamma = uniform(&[3], 8, 1.0).map(|v| v + 1.5);
    let beta = uniform(&[3], 9, 0.5);
    let (k1, kt1, x1, xt1, m1, w1, b1, g1, be1) =
        (k.clone(), kt.clone(), x4.clone(), xt.clone(), mat.clone(), w.clone(), b.clone(), gamma.clone(), beta.clone());
    let (g2, be2, x2, g3, x3) = (gamma.clone(), beta.clone(), x4.clone(), gamma.clone(), x4.clone());
    let (m2, w2, m3) = (mat.clone(), w.clone(), mat.clone());
    let labels: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
    vec![
        ("conv2d/input", x4.clone(), Box::new(move |g, x| {
            let kv = g.constant(k1.clone());
            let y = g.conv2d(x, kv, 2, 1)?;
            probe_sum(g, y, 10)
        })),
        ("conv2d/kernel", k.clone(), Box::new(move |g, kv| {
            let x = g.constant(x1.clone());
            let y = g.conv2d(x, kv, 1, 1)?;
            probe_sum(g, y, 11)
        })),
        ("conv_transpose2d/input", xt.clone(), Box::new(move |g, x| {
            let kv = g.constant(kt1.clone());
            let y = g.conv_transpose2d(x, kv, 2, 1)?;
            probe_sum(g, y, 12)
        })),
        ("conv_transpose2d/kernel", kt.clone(), Box::new(move |g, kv| {
            let x = g.constant(xt1.clone());
            let y = g.conv_transpose2d(x, kv, 2, 1)?;
            probe_sum(g, y, 13)
        })),
        ("batchnorm2d/input", x4.clone(), Box::new(move |g, x| {
            let (gv, bv) = (g.constant(g1.clone()), g.constant(be1.clone()));
            let (y, _) = g.batchnorm2d(x, gv, bv, 1e-5, BnMode::Train)?;
            probe_sum(g, y, 14)
        })),
        ("batchnorm2d/gamma", gamma.clone(), Box::new(move |g, gv| {
            let (x, bv) = (g.constant(x2.clone()), g.constant(be2.clone()));
            let (y, _) = g.batchnorm2d(x, gv, bv, 1e-5, BnMode::Train)?;
            probe_sum(g, y, 15)
        })),
        ("batchnorm2d/beta", beta.clone(), Box::new(move |g, bv| {
            let (x, gv) = (g.constant(x3.clone()), g.constant(g2.clone()));
            let (y, _) = g.batchnorm2d(x, gv, bv, 1e-5, BnMode::Train)?;
            probe_sum(g, y, 16)
        })),
        ("batchnorm2d/eval", x4.clone(), Box::new(move |g, x| {
            let (gv, bv) = (g.constant(g3.clone()), g.constant(beta.clone()));
            let (y, _) = g.batchnorm2d(x, gv, bv, 1e-5, BnMode::Eval { mean: &[0.1, -0.2, 0.3], var: &[1.2, 0.5, 2.0] })?;
            probe_sum(g, y, 17)
        })),
        ("leaky_relu", mat.clone(), Box::new(|g, x| {
            let y = g.leaky_relu(x, 0.2);
            probe_sum(g, y, 18)
        })),
        ("relu", mat.clone(), Box::new(|g, x| {
            let y = g.relu(x);
            probe_sum(g, y, 19)
        })),
        ("tanh", mat.clone(), Box::new(|g, x| {
            let y = g.tanh(x);
            probe_sum(g, y, 20)
        })),
        ("sigmoid", mat.clone(), Box::new(|g, x| {
            let y = g.sigmoid(x);
            probe_sum(g, y, 21)
        })),
        ("add", mat.clone(), Box::new(|g, x| {
            let s = g.constant(Tensor::scalar(0.4));
            let y = g.add(x, s)?;
            let y = g.add(y, x)?;
            probe_sum(g, y, 22)
        })),
        ("mul", mat.clone(), Box::new(|g, x| {
            let y = g.mul(x, x)?;
            probe_sum(g, y, 23)
        })),
        ("scale", mat.clone(), Box::new(|g, x| {
            let y = g.scale(x, -1.7);
            probe_sum(g, y, 24)
        })),
        ("channel_bias", b.map(|v| v * 2.0), Box::new(|g, bv| {
            let x = g.constant(uniform(&[2, 4, 3, 3], 25, 1.0));
            let y = g.channel_bias(x, bv)?;
            let y = g.tanh(y);
            probe_sum(g, y, 26)
        })),
        ("concat", x4.clone(), Box::new(|g, x| {
            let y = g.concat(&[x, x], 1)?;
            probe_sum(g, y, 27)
        })),
        ("narrow", x4.clone(), Box::new(|g, x| {
            let y = g.narrow(x, 2, 1, 3)?;
            probe_sum(g, y, 28)
        })),
        ("reshape", x4.clone(), Box::new(|g, x| {
            let y = g.reshape(x, &[2, 75])?;
            probe_sum(g, y, 29)
        })),
        ("sum", mat.clone(), Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        })),
        ("mean", mat.clone(), Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.mean(y))
        })),
        ("dense/input", mat.clone(), Box::new(move |g, x| {
            let (wv, bv) = (g.constant(w1.clone()), g.constant(b1.clone()));
            let y = g.dense(x, wv, Some(bv))?;
            probe_sum(g, y, 30)
        })),
        ("dense/weight", w.clone(), Box::new(move |g, wv| {
            let x = g.constant(m1.clone());
            let y = g.dense(x, wv, None)?;
            probe_sum(g, y, 31)
        })),
        ("dense/bias", b.clone(), Box::new(move |g, bv| {
            let (x, wv) = (g.constant(m2.clone()), g.constant(w2.clone()));
            let y = g.dense(x, wv, Some(bv))?;
            probe_sum(g, y, 32)
        })),
        ("bce_loss", mat.clone(), Box::new(move |g, x| {
            let p = g.sigmoid(x);
            g.bce_loss(p, &labels)
        })),
        ("softmax_cross_entropy", m3, Box::new(move |g, x| {
            g.softmax_cross_entropy(x, &[4, 0, 2])
        })),
    ]
}

/// Gradient of every parameter of a small conditional pair model
/// through its discriminator loss, against central differences on up to
/// `per_param` entries of each parameter tensor.
pub fn composed_model_check(per_param: usize) -> Result<Vec<CheckResult>> {
    let arch = ArchConfig { image_size: 16, content_dim: 3, view_dim: 2, width: 2, ..ArchConfig::default() };
    let nets = [
        Network::<f32>::generator(&arch, 1)?.cast::<f64>(),
        Network::<f32>::pair_discriminator(&arch, 2)?.cast::<f64>(),
        Network::<f32>::encoder(&arch, 3)?.cast::<f64>(),
    ];
    let n = 3;
    let img = |seed| uniform(&[n, 3, 16, 16], seed, 0.9);
    let (x1, x2) = (img(40), img(41));
    let mut r = rng::stream(42, "verify/latents");
    let v: Vec<Tensor<f64>> = (0..3).map(|_| sample_priors(&mut r, n, 1, 2).1.cast()).collect();

    let loss = |nets: &[Network<f64>; 3], track: bool| -> Result<(f64, Option<[Network<f64>; 3]>)> {
        let mut g = Graph::new();
        let mut m = Bound::new(&mut g, &nets[0], &nets[1], Some(&nets[2]), track, track);
        let (a, b) = (g.constant(x1.clone()), g.constant(x2.clone()));
        let vv = [0, 1, 2].map(|i| g.constant(v[i].clone()));
        let s = objectives::cgmv_scores(&mut g, &mut m, Some((a, b)), b, vv)?;
        let l = objectives::discriminator_loss(&mut g, &s)?;
        let value = g.value(l).item();
        if !track {
            return Ok((value, None));
        }
        g.backward(l)?;
        let (gb, db, eb) = (m.gb, m.db, m.e.expect("encoder bound").1);
        let mut out = nets.clone();
        for net in &mut out {
            net.params.zero_grads();
        }
        out[0].absorb(&g, gb);
        out[1].absorb(&g, db);
        out[2].absorb(&g, eb);
        Ok((value, Some(out)))
    };

    let analytic = loss(&nets, true)?.1.expect("tracked");
    let mut results = Vec::new();
    for (role, k) in [("generator", 0), ("discriminator", 1), ("encoder", 2)] {
        for (name, p) in analytic[k].params.iter() {
            if !p.trainable {
                continue;
            }
            let len = p.value.numel();
            let stride = (len / per_param.max(1)).max(1);
            let mut worst = 0.0f64;
            let (mut count, mut skipped) = (0, 0);
            for i in (0..len).step_by(stride).take(per_param) {
                let at = |delta: f64| -> Result<f64> {
                    let mut probe = nets.clone();
                    probe[k].params.get_mut(name).expect("same names").value.data_mut()[i] += delta;
                    Ok(loss(&probe, false)?.0)
                };
                let (plus, zero, minus) = (at(STEP)?, at(0.0)?, at(-STEP)?);
                let (fwd, bwd) = ((plus - zero) / STEP, (zero - minus) / STEP);
                // a ReLU kink inside the stencil makes the one-sided slopes disagree
                if (fwd - bwd).abs() > KINK_TOLERANCE * fwd.abs().max(bwd.abs()).max(1e-6) {
                    skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * STEP);
                let a = p.grad[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
                count += 1;
            }
            results.push(CheckResult { name: format!("model/{role}/{name}"), max_rel_error: worst, entries: count, skipped });
        }
    }
    Ok(results)
}

/// Every op, then the composed model.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, x, f) in op_cases() {
        let entries = x.numel();
        out.push(CheckResult { name: name.into(), max_rel_error: grad_check(f, &x, STEP)?, entries, skipped: 0 });
    }
    out.extend(composed_model_check(12)?);
    Ok(out)
}
