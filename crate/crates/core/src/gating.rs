//! Situation probabilities from global descriptors: one-vs-rest linear SVMs
//! trained by SGD, a softmax with a fitted temperature, and top-n selection.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::situations::SituationPartition;
use crate::util::{derive_seed, dot, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

/// Hyperparameters picked for one situation and the cross-validated AP they reached.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedHyper {
    pub lambda: f64,
    pub pos_freq: f64,
    pub cv_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub lambdas: Vec<f64>,
    pub pos_freqs: Vec<f64>,
    pub epochs: usize,
    pub folds: usize,
    /// Fraction of the training split held out to fit the temperature.
    pub holdout: f64,
    /// Fixed temperature instead of fitting one.
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
            pos_freqs: vec![0.1, 0.25, 0.5],
            epochs: 10,
            folds: 3,
            holdout: 0.2,
            temperature: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingModel {
    pub models: Vec<LinearModel>,
    pub temperature: f64,
    pub hyper: Vec<SelectedHyper>,
}

impl GatingModel {
    /// The trivial gate of a one-situation partition: always probability 1.
    pub fn single(dim: usize) -> Self {
        GatingModel {
            models: vec![LinearModel {
                weights: vec![0.0; dim],
                bias: 0.0,
            }],
            temperature: 1.0,
            hyper: vec![SelectedHyper {
                lambda: f64::NAN,
                pos_freq: f64::NAN,
                cv_ap: 1.0,
            }],
        }
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.weights.len())
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        Ok(self.models.iter().map(|m| m.score(x)).collect())
    }
}

/// softmax(s / T), computed with the maximum subtracted.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// P(S_j | x) for every situation.
pub fn gate_probabilities(model: &GatingModel, x: &GlobalDescriptor) -> Result<Vec<f64>> {
    if model.k() == 1 {
        if x.dim() != model.dim() {
            return Err(Error::dims(model.dim(), x.dim()));
        }
        return Ok(vec![1.0]);
    }
    Ok(softmax(&model.scores(x.as_slice())?, model.temperature))
}

/// Probability spread evenly over the situations of the image's true classes.
pub fn oracle_probabilities(partition: &SituationPartition, classes: &BTreeSet<u32>) -> Result<Vec<f64>> {
    let hits: Vec<bool> = partition
        .situations
        .iter()
        .map(|s| s.class_id.is_some_and(|c| classes.contains(&c)))
        .collect();
    let n = hits.iter().filter(|&&h| h).count();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "oracle gate: no situation for classes {classes:?}"
        )));
    }
    Ok(hits.iter().map(|&h| if h { 1.0 / n as f64 } else { 0.0 }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    Fixed(usize),
    Mass(f64),
}

/// Highest-probability situations in descending order, ties by ascending id.
///
/// `Mass(m)` keeps the shortest prefix whose cumulative probability exceeds
/// `m`; `m = 1` keeps everything.
pub fn top_n_situations(probs: &[f64], sel: Selection) -> Result<Vec<(usize, f64)>> {
    let k = probs.len();
    let mut order: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    match sel {
        Selection::Fixed(n) => {
            if n == 0 || n > k {
                return Err(Error::InvalidArgument(format!("n must be in 1..={k}, got {n}")));
            }
            order.truncate(n);
        }
        Selection::Mass(m) => {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::InvalidArgument(format!("mass must be in (0, 1], got {m}")));
            }
            if m < 1.0 {
                let mut acc = 0.0;
                let mut keep = k;
                for (i, (_, p)) in order.iter().enumerate() {
                    acc += p;
                    if acc > m {
                        keep = i + 1;
                        break;
                    }
                }
                order.truncate(keep);
            }
        }
    }
    Ok(order)
}

/// Ranking AP: mean over positives of the precision at their rank.
pub fn ranking_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / total as f64
}

/// Hinge-loss SGD with L2 regularization on the samples in `subset`.
///
/// Each step draws a positive with probability `pos_freq`, else a negative.
/// Step size 1/(λ(t + 1/λ)); the returned weights average the last epoch.
pub fn train_svm(
    xs: &[&[f64]],
    labels: &[bool],
    subset: &[usize],
    lambda: f64,
    pos_freq: f64,
    epochs: usize,
    seed: u64,
) -> LinearModel {
    let dim = xs.first().map_or(0, |x| x.len());
    let pos: Vec<usize> = subset.iter().copied().filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = subset.iter().copied().filter(|&i| !labels[i]).collect();
    let mut rng = rng_from(seed);
    let mut v = vec![0.0; dim];
    let mut scale = 1.0;
    let mut b = 0.0;
    let mut avg = vec![0.0; dim];
    let mut avg_b = 0.0;
    let mut avg_n = 0usize;
    let steps = subset.len().max(1);
    let mut t = 0.0f64;
    for epoch in 0..epochs.max(1) {
        let last = epoch + 1 == epochs.max(1);
        for _ in 0..steps {
            let take_pos = neg.is_empty() || (!pos.is_empty() && rng.random::<f64>() < pos_freq);
            let i = if take_pos {
                pos[rng.random_range(0..pos.len())]
            } else {
                neg[rng.random_range(0..neg.len())]
            };
            let y = if labels[i] { 1.0 } else { -1.0 };
            let eta = 1.0 / (lambda * t + 1.0);
            let margin = y * (scale * dot(&v, xs[i]) + b);
            scale *= 1.0 - eta * lambda;
            if margin < 1.0 {
                let c = eta * y / scale;
                for (w, x) in v.iter_mut().zip(xs[i]) {
                    *w += c * x;
                }
                b += eta * y;
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
            if last {
                for (a, w) in avg.iter_mut().zip(&v) {
                    *a += scale * w;
                }
                avg_b += b;
                avg_n += 1;
            }
            t += 1.0;
        }
    }
    let inv = 1.0 / avg_n.max(1) as f64;
    LinearModel {
        weights: avg.into_iter().map(|w| w * inv).collect(),
        bias: avg_b * inv,
    }
}

/// Stratified fold id for every sample in `subset` order.
fn stratified_folds(labels: &[bool], subset: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed);
    let mut pos: Vec<usize> = (0..subset.len()).filter(|&i| labels[subset[i]]).collect();
    let mut neg: Vec<usize> = (0..subset.len()).filter(|&i| !labels[subset[i]]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out = vec![0; subset.len()];
    for (r, &i) in pos.iter().chain(&neg).enumerate() {
        out[i] = r % folds;
    }
    out
}

fn cross_validate(
    xs: &[&[f64]],
    labels: &[bool],
    subset: &[usize],
    cfg: &GateConfig,
    seed: u64,
) -> SelectedHyper {
    let folds = cfg.folds.max(2);
    let fold_of = stratified_folds(labels, subset, folds, derive_seed(seed, &[0xF0]));
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let mut pos_freqs = cfg.pos_freqs.clone();
    pos_freqs.sort_by(f64::total_cmp);
    let mut best: Option<SelectedHyper> = None;
    for (li, &lambda) in lambdas.iter().enumerate() {
        for (pi, &pos_freq) in pos_freqs.iter().enumerate() {
            let mut scores = vec![0.0; subset.len()];
            for f in 0..folds {
                let train: Vec<usize> = (0..subset.len())
                    .filter(|&i| fold_of[i] != f)
                    .map(|i| subset[i])
                    .collect();
                let m = train_svm(
                    xs,
                    labels,
                    &train,
                    lambda,
                    pos_freq,
                    cfg.epochs,
                    derive_seed(seed, &[li as u64, pi as u64, f as u64]),
                );
                for i in (0..subset.len()).filter(|&i| fold_of[i] == f) {
                    scores[i] = m.score(xs[subset[i]]);
                }
            }
            let sub_labels: Vec<bool> = subset.iter().map(|&i| labels[i]).collect();
            let ap = ranking_ap(&scores, &sub_labels);
            if best.map_or(true, |b| ap > b.cv_ap) {
                best = Some(SelectedHyper {
                    lambda,
                    pos_freq,
                    cv_ap: ap,
                });
            }
        }
    }
    best.expect("non-empty hyperparameter grid")
}

/// Mean negative log of the probability mass put on each sample's positive set.
pub fn calibration_nll(scores: &[Vec<f64>], positives: &[Vec<usize>], temperature: f64) -> f64 {
    let mut total = 0.0;
    for (s, pos) in scores.iter().zip(positives) {
        let p = softmax(s, temperature);
        let mass: f64 = pos.iter().map(|&j| p[j]).sum();
        total -= mass.max(1e-300).ln();
    }
    total / scores.len().max(1) as f64
}

/// Temperature minimizing the held-out NLL: coarse log grid, then golden section.
pub fn fit_temperature(scores: &[Vec<f64>], positives: &[Vec<usize>]) -> f64 {
    let f = |lt: f64| calibration_nll(scores, positives, lt.exp());
    let (lo, hi) = (-7.0f64, 7.0f64);
    let steps = 56;
    let h = (hi - lo) / steps as f64;
    let mut best: usize = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..=steps {
        let v = f(lo + h * i as f64);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    let (mut a, mut b) = (lo + h * best.saturating_sub(1) as f64, lo + h * (best + 1).min(steps) as f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    ((a + b) / 2.0).exp()
}

/// Trains one-vs-rest models over `xs` where `positives[i]` lists the
/// situations sample `i` belongs to.
///
/// Hyperparameters are cross-validated on all samples. The temperature is
/// fitted on a held-out fraction using models trained on the rest; the
/// returned models are then retrained on every sample.
pub fn train_gate_on(xs: &[&[f64]], positives: &[Vec<usize>], k: usize, cfg: &GateConfig) -> Result<GatingModel> {
    if xs.is_empty() || xs.len() != positives.len() {
        return Err(Error::InvalidArgument(format!(
            "{} descriptors for {} label sets",
            xs.len(),
            positives.len()
        )));
    }
    let dim = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::dims(dim, x.len()));
    }
    if cfg.lambdas.is_empty() || cfg.pos_freqs.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let labels: Vec<Vec<bool>> = (0..k)
        .map(|j| positives.iter().map(|p| p.contains(&j)).collect())
        .collect();
    if let Some(j) = labels.iter().position(|l| !l.iter().any(|&b| b)) {
        return Err(Error::InvalidArgument(format!("situation {j} has no positive descriptors")));
    }
    if k == 1 {
        return Ok(GatingModel::single(dim));
    }
    let all: Vec<usize> = (0..xs.len()).collect();
    let hyper: Vec<SelectedHyper> = (0..k)
        .into_par_iter()
        .map(|j| cross_validate(xs, &labels[j], &all, cfg, derive_seed(cfg.seed, &[j as u64, 0xC7])))
        .collect();
    for (j, h) in hyper.iter().enumerate() {
        debug!(
            "situation {j}: lambda {:e}, pos_freq {}, cv AP {:.4}",
            h.lambda, h.pos_freq, h.cv_ap
        );
    }

    let temperature = match cfg.temperature {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}"))),
        None => {
            let mut order = all.clone();
            order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[0x7E])));
            let n_hold = (xs.len() as f64 * cfg.holdout).ceil() as usize;
            if n_hold == 0 || n_hold >= xs.len() {
                1.0
            } else {
                let (held, rest) = order.split_at(n_hold);
                let mut rest = rest.to_vec();
                rest.sort_unstable();
                let partial: Vec<LinearModel> = (0..k)
                    .into_par_iter()
                    .map(|j| {
                        train_svm(
                            xs,
                            &labels[j],
                            &rest,
                            hyper[j].lambda,
                            hyper[j].pos_freq,
                            cfg.epochs,
                            derive_seed(cfg.seed, &[j as u64, 0x4D]),
                        )
                    })
                    .collect();
                let scores: Vec<Vec<f64>> = held
                    .iter()
                    .map(|&i| partial.iter().map(|m| m.score(xs[i])).collect())
                    .collect();
                let pos: Vec<Vec<usize>> = held.iter().map(|&i| positives[i].clone()).collect();
                fit_temperature(&scores, &pos)
            }
        }
    };
    let models: Vec<LinearModel> = (0..k)
        .into_par_iter()
        .map(|j| {
            train_svm(
                xs,
                &labels[j],
                &all,
                hyper[j].lambda,
                hyper[j].pos_freq,
                cfg.epochs,
                derive_seed(cfg.seed, &[j as u64, 0xF1]),
            )
        })
        .collect();
    info!("gate trained for {k} situations, temperature {temperature:.4}");
    Ok(GatingModel {
        models,
        temperature,
        hyper,
    })
}

/// Trains the gate for a partition; `descriptors` is indexed by manifest entry.
pub fn train_gate(
    partition: &SituationPartition,
    descriptors: &[GlobalDescriptor],
    cfg: &GateConfig,
) -> Result<GatingModel> {
    let memberships = partition.memberships();
    let mut xs = Vec::with_capacity(memberships.len());
    let mut pos = Vec::with_capacity(memberships.len());
    for (&entry, sits) in &memberships {
        let d = descriptors.get(entry).ok_or_else(|| {
            Error::InvalidArgument(format!("no descriptor for manifest entry {entry}"))
        })?;
        xs.push(d.as_slice());
        pos.push(sits.clone());
    }
    train_gate_on(&xs, &pos, partition.k(), cfg)
}
