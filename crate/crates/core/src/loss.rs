//! InfoNCE over in-batch negatives, the fused and crossmodal contrastive
//! terms, and a central-difference gradient checker.
//!
//! Values and gradients are computed in f64 regardless of the tensor type;
//! keys are always treated as constants.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{RepVars, Reps};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_rgbd: f64,
    pub lambda_rgb_d: f64,
    pub lambda_d_rgb: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda_rgbd: 1.0,
            lambda_rgb_d: 1.0,
            lambda_d_rgb: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("loss: tau must be positive, got {}", self.tau)));
        }
        if [self.lambda_rgbd, self.lambda_rgb_d, self.lambda_d_rgb].iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss: weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Zeroes both crossmodal weights.
    pub fn without_crossmodal(mut self) -> Self {
        self.lambda_rgb_d = 0.0;
        self.lambda_d_rgb = 0.0;
        self
    }
}

/// Value of one InfoNCE term and its gradient with respect to the queries.
#[derive(Clone, Debug)]
pub struct NceOutput {
    pub value: f64,
    /// `[N, d]`, row-major.
    pub grad: Vec<f64>,
}

fn rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            name: what.into(),
            expected: vec![0, 0],
            found: t.shape().to_vec(),
        });
    }
    Ok(t.dims2())
}

/// Batch mean of `−log softmax_j(q_i·k_j / τ)[i]`.
pub fn info_nce<T: Real>(queries: &Tensor<T>, keys: &Tensor<T>, tau: f64) -> Result<NceOutput> {
    let (n, d) = rows(queries, "queries")?;
    let (nk, dk) = rows(keys, "keys")?;
    if n == 0 {
        return Err(Error::Config("info_nce on an empty batch".into()));
    }
    if (n, d) != (nk, dk) {
        return Err(Error::Shape {
            name: "keys".into(),
            expected: vec![n, d],
            found: vec![nk, dk],
        });
    }
    let q: Vec<f64> = queries.data().iter().map(|v| v.as_f64()).collect();
    let k: Vec<f64> = keys.data().iter().map(|v| v.as_f64()).collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; n * d];
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        value += max + z.ln() - logits[i];
        let gi = &mut grad[i * d..(i + 1) * d];
        for j in 0..n {
            let p = (logits[j] - max).exp() / z - if j == i { 1.0 } else { 0.0 };
            let c = p / (tau * n as f64);
            for (g, kv) in gi.iter_mut().zip(&k[j * d..(j + 1) * d]) {
                *g += c * kv;
            }
        }
    }
    let value = value / n as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("info_nce value".into()));
    }
    Ok(NceOutput { value, grad })
}

/// Representations of both views through both encoders.
#[derive(Clone, Debug)]
pub struct RepBatch<T: Real = f32> {
    pub q1: Reps<T>,
    pub q2: Reps<T>,
    pub k1: Reps<T>,
    pub k2: Reps<T>,
}

/// Component values of the full objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgbd: f64,
    pub rgb_d: f64,
    pub d_rgb: f64,
    pub mcl: f64,
}

/// Gradients with respect to the query representations of both views.
#[derive(Clone, Debug)]
pub struct QueryGrads {
    pub q1: [Vec<f64>; 3],
    pub q2: [Vec<f64>; 3],
}

pub fn loss_rgbd<T: Real>(b: &RepBatch<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(info_nce(&b.q1.rgbd, &b.k2.rgbd, cfg.tau)?.value + info_nce(&b.q2.rgbd, &b.k1.rgbd, cfg.tau)?.value)
}

/// `(L_RGB,D, L_D,RGB)`.
pub fn loss_crossmodal<T: Real>(b: &RepBatch<T>, cfg: &LossConfig) -> Result<(f64, f64)> {
    let rgb_d = info_nce(&b.q1.rgb, &b.k2.d, cfg.tau)?.value + info_nce(&b.q2.rgb, &b.k1.d, cfg.tau)?.value;
    let d_rgb = info_nce(&b.q1.d, &b.k2.rgb, cfg.tau)?.value + info_nce(&b.q2.d, &b.k1.rgb, cfg.tau)?.value;
    Ok((rgb_d, d_rgb))
}

pub fn loss_mcl<T: Real>(b: &RepBatch<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_mcl_grad(b, cfg)?.0.mcl)
}

/// All terms plus the gradient of the weighted total.
pub fn loss_mcl_grad<T: Real>(b: &RepBatch<T>, cfg: &LossConfig) -> Result<(LossTerms, QueryGrads)> {
    cfg.validate()?;
    let tau = cfg.tau;
    // (query, key) pairs in the order rgbd, rgb_d, d_rgb for view 1 then view 2
    let f1 = info_nce(&b.q1.rgbd, &b.k2.rgbd, tau)?;
    let f2 = info_nce(&b.q2.rgbd, &b.k1.rgbd, tau)?;
    let a1 = info_nce(&b.q1.rgb, &b.k2.d, tau)?;
    let a2 = info_nce(&b.q2.rgb, &b.k1.d, tau)?;
    let c1 = info_nce(&b.q1.d, &b.k2.rgb, tau)?;
    let c2 = info_nce(&b.q2.d, &b.k1.rgb, tau)?;
    let rgbd = f1.value + f2.value;
    let rgb_d = a1.value + a2.value;
    let d_rgb = c1.value + c2.value;
    let mcl = cfg.lambda_rgbd * rgbd + cfg.lambda_rgb_d * rgb_d + cfg.lambda_d_rgb * d_rgb;
    let scaled = |o: NceOutput, l: f64| o.grad.into_iter().map(|g| g * l).collect::<Vec<_>>();
    let grads = QueryGrads {
        q1: [scaled(f1, cfg.lambda_rgbd), scaled(a1, cfg.lambda_rgb_d), scaled(c1, cfg.lambda_d_rgb)],
        q2: [scaled(f2, cfg.lambda_rgbd), scaled(a2, cfg.lambda_rgb_d), scaled(c2, cfg.lambda_d_rgb)],
    };
    Ok((LossTerms { rgbd, rgb_d, d_rgb, mcl }, grads))
}

/// Appends the full objective to `g` as a scalar node whose inputs are the
/// query representation nodes; keys enter as plain values.
pub fn mcl_node<T: Real>(g: &mut Graph<T>, q1: RepVars, q2: RepVars, k1: &Reps<T>, k2: &Reps<T>, cfg: &LossConfig) -> Result<(Var, LossTerms)> {
    let reps = |r: RepVars, g: &Graph<T>| Reps {
        rgbd: g.value(r.rgbd).clone(),
        rgb: g.value(r.rgb).clone(),
        d: g.value(r.d).clone(),
    };
    let batch = RepBatch {
        q1: reps(q1, g),
        q2: reps(q2, g),
        k1: k1.clone(),
        k2: k2.clone(),
    };
    let (terms, grads) = loss_mcl_grad(&batch, cfg)?;
    let shape = batch.q1.rgbd.shape().to_vec();
    let tensor = |v: &[f64]| Tensor::from_vec(&shape, v.iter().map(|&x| T::lit(x)).collect());
    let mut inputs = Vec::with_capacity(6);
    for (vars, gs) in [(q1, &grads.q1), (q2, &grads.q2)] {
        inputs.push((vars.rgbd, tensor(&gs[0])));
        inputs.push((vars.rgb, tensor(&gs[1])));
        inputs.push((vars.d, tensor(&gs[2])));
    }
    Ok((g.custom_scalar(T::lit(terms.mcl), inputs), terms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked; all of them when the vector is shorter.
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            samples: 200,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Checked coordinates with a numeric derivative above 1e-10 in magnitude.
    pub nonzero: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares `analytic` against central differences of `f` at `params` on a
/// random subset of coordinates. Relative error uses the denominator
/// `max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::Config(format!("grad_check: eps must be positive, got {}", cfg.eps)));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape {
            name: "analytic gradient".into(),
            expected: vec![params.len()],
            found: vec![analytic.len()],
        });
    }
    let n = params.len();
    let coords: Vec<usize> = if n <= cfg.samples {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut c = sample(&mut rng, n, cfg.samples).into_vec();
        c.sort_unstable();
        c
    };
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        nonzero: 0,
        tolerance: cfg.tolerance,
    };
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + cfg.eps;
        let plus = f(&p);
        p[i] = orig - cfg.eps;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
        }
        let num = (plus - minus) / (2.0 * cfg.eps);
        report.nonzero += (num.abs() > 1e-10) as usize;
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = num;
        }
    }
    Ok(report)
}
