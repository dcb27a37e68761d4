use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{kmeans_pp_indices, rng_from};

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `K × d`, row per component.
    pub means: Vec<f64>,
    /// `K × d`, row per component.
    pub variances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop when the relative log-likelihood gain drops below this.
    pub tolerance: f64,
    pub variance_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tolerance: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

/// Diagnostics from an EM run.
#[derive(Clone, Debug, Default)]
pub struct GmmFitReport {
    /// Mean per-sample log-likelihood evaluated before each M-step.
    pub log_likelihood: Vec<f64>,
    /// Iterations after which at least one component was re-seeded.
    pub reseeded_at: Vec<usize>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 1024;
/// Components whose responsibility mass falls below this are re-seeded.
const COLLAPSE_MASS: f64 = 1e-8;

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.len() / self.weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.means[k * d..(k + 1) * d]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.variances[k * d..(k + 1) * d]
    }

    /// Per-component log normalizers: ln w_k − ½ Σ ln(2π σ²).
    fn log_norms(&self) -> Vec<f64> {
        (0..self.components())
            .map(|k| {
                let logdet: f64 = self.variance(k).iter().map(|v| v.ln()).sum();
                self.weights[k].ln() - 0.5 * (self.dim() as f64 * LN_2PI + logdet)
            })
            .collect()
    }

    /// Writes posteriors into `post` and returns ln p(x).
    fn posteriors_with(&self, x: &[f64], log_norms: &[f64], post: &mut [f64]) -> f64 {
        let d = self.dim();
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.components() {
            let m = &self.means[k * d..(k + 1) * d];
            let v = &self.variances[k * d..(k + 1) * d];
            let mut q = 0.0;
            for i in 0..d {
                let diff = x[i] - m[i];
                q += diff * diff / v[i];
            }
            let lp = log_norms[k] - 0.5 * q;
            post[k] = lp;
            if lp > max {
                max = lp;
            }
        }
        if !max.is_finite() {
            let u = 1.0 / self.components() as f64;
            post.iter_mut().for_each(|p| *p = u);
            return max;
        }
        let mut s = 0.0;
        for p in post.iter_mut() {
            *p = (*p - max).exp();
            s += *p;
        }
        for p in post.iter_mut() {
            *p /= s;
        }
        max + s.ln()
    }

    /// Soft assignments of `x`; returns ln p(x) alongside.
    pub fn posteriors(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut post = vec![0.0; self.components()];
        let ll = self.posteriors_with(x, &self.log_norms(), &mut post);
        (post, ll)
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.posteriors(x).1
    }

    /// Mean log-likelihood over row-major samples.
    pub fn mean_log_likelihood(&self, data: &[f64]) -> f64 {
        let d = self.dim();
        let ln = self.log_norms();
        let mut post = vec![0.0; self.components()];
        let n = data.len() / d;
        data.chunks_exact(d)
            .map(|x| self.posteriors_with(x, &ln, &mut post))
            .sum::<f64>()
            / n as f64
    }

    pub(crate) fn prepared(&self) -> PreparedGmm<'_> {
        PreparedGmm {
            gmm: self,
            log_norms: self.log_norms(),
        }
    }
}

/// GMM with cached log normalizers, for repeated posterior evaluation.
pub(crate) struct PreparedGmm<'a> {
    gmm: &'a GmmModel,
    log_norms: Vec<f64>,
}

impl PreparedGmm<'_> {
    pub fn posteriors(&self, x: &[f64], post: &mut [f64]) -> f64 {
        self.gmm.posteriors_with(x, &self.log_norms, post)
    }
}

struct Stats {
    ll: f64,
    mass: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    /// Lowest per-sample log-likelihood in the chunk and its index.
    worst: (f64, usize),
}

/// Fits a diagonal GMM by EM from a k-means++ initialization.
///
/// `data` is row-major with `dim` columns. Deterministic for a given seed:
/// E-step statistics are accumulated per fixed-size chunk and reduced in
/// chunk order.
pub fn fit_gmm(
    data: &[f64],
    dim: usize,
    components: usize,
    seed: u64,
    cfg: &GmmConfig,
) -> Result<(GmmModel, GmmFitReport)> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::dims(format!("multiple of {dim}"), data.len()));
    }
    let n = data.len() / dim;
    if components == 0 {
        return Err(Error::InvalidArgument("GMM needs at least one component".into()));
    }
    if n < 10 * components {
        return Err(Error::InsufficientSamples {
            needed: 10 * components,
            got: n,
        });
    }
    let rows: Vec<&[f64]> = data.chunks_exact(dim).collect();

    let mut global_mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in global_mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    global_mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut global_var = vec![0.0; dim];
    for r in &rows {
        for i in 0..dim {
            let d = r[i] - global_mean[i];
            global_var[i] += d * d;
        }
    }
    global_var
        .iter_mut()
        .for_each(|v| *v = (*v / n as f64).max(cfg.variance_floor));

    let mut rng = rng_from(seed);
    let seeds = kmeans_pp_indices(&rows, components, &mut rng);
    let mut model = GmmModel {
        weights: vec![1.0 / components as f64; components],
        means: seeds.iter().flat_map(|&i| rows[i].iter().copied()).collect(),
        variances: (0..components).flat_map(|_| global_var.iter().copied()).collect(),
    };

    let mut report = GmmFitReport::default();
    for iter in 0..cfg.max_iter {
        let stats = e_step(&model, data, dim);
        let ll = stats.ll / n as f64;
        let prev = report.log_likelihood.last().copied();
        report.log_likelihood.push(ll);
        if let Some(p) = prev {
            if (ll - p) / p.abs().max(f64::MIN_POSITIVE) < cfg.tolerance {
                break;
            }
        }
        // M-step.
        let mut reseeded = false;
        for k in 0..components {
            let nk = stats.mass[k];
            if nk < COLLAPSE_MASS {
                warn!("GMM component {k} collapsed at iteration {iter}; re-seeding");
                reseeded = true;
                model.means[k * dim..(k + 1) * dim].copy_from_slice(rows[stats.worst.1]);
                model.variances[k * dim..(k + 1) * dim].copy_from_slice(&global_var);
                model.weights[k] = 1.0 / components as f64;
                continue;
            }
            model.weights[k] = nk / n as f64;
            for i in 0..dim {
                let mu = stats.s1[k * dim + i] / nk;
                let var = stats.s2[k * dim + i] / nk - mu * mu;
                model.means[k * dim + i] = mu;
                model.variances[k * dim + i] = var.max(cfg.variance_floor);
            }
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
        if reseeded {
            report.reseeded_at.push(iter);
        }
    }
    Ok((model, report))
}

fn e_step(model: &GmmModel, data: &[f64], dim: usize) -> Stats {
    let k = model.components();
    let prepared = model.prepared();
    let partials: Vec<Stats> = data
        .par_chunks(CHUNK * dim)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut st = Stats {
                ll: 0.0,
                mass: vec![0.0; k],
                s1: vec![0.0; k * dim],
                s2: vec![0.0; k * dim],
                worst: (f64::INFINITY, 0),
            };
            let mut post = vec![0.0; k];
            for (ri, x) in chunk.chunks_exact(dim).enumerate() {
                let lp = prepared.posteriors(x, &mut post);
                st.ll += lp;
                if lp < st.worst.0 {
                    st.worst = (lp, ci * CHUNK + ri);
                }
                for c in 0..k {
                    let g = post[c];
                    if g == 0.0 {
                        continue;
                    }
                    st.mass[c] += g;
                    let s1 = &mut st.s1[c * dim..(c + 1) * dim];
                    let s2 = &mut st.s2[c * dim..(c + 1) * dim];
                    for i in 0..dim {
                        let gx = g * x[i];
                        s1[i] += gx;
                        s2[i] += gx * x[i];
                    }
                }
            }
            st
        })
        .collect();
    let mut out = Stats {
        ll: 0.0,
        mass: vec![0.0; k],
        s1: vec![0.0; k * dim],
        s2: vec![0.0; k * dim],
        worst: (f64::INFINITY, 0),
    };
    for p in partials {
        out.ll += p.ll;
        for (a, b) in out.mass.iter_mut().zip(&p.mass) {
            *a += b;
        }
        for (a, b) in out.s1.iter_mut().zip(&p.s1) {
            *a += b;
        }
        for (a, b) in out.s2.iter_mut().zip(&p.s2) {
            *a += b;
        }
        if p.worst.0 < out.worst.0 {
            out.worst = p.worst;
        }
    }
    out
}
