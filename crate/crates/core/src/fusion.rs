//! Weighted fusion of situational boundary maps and per-class semantic contours.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::descriptor::{FisherEncoder, GlobalFeatures};
use crate::error::{Error, Result};
use crate::forest::{compute_channels, ChannelStack, EdgeForest};
use crate::gating::{gate_probabilities, oracle_probabilities, top_n_situations, GatingModel, Selection};
use crate::raster::{BoundaryMap, Image, MIN_FOREST_SIDE};
use crate::situations::{SituationKind, SituationPartition};

#[derive(Clone, Debug, PartialEq)]
pub struct SituationalPrediction {
    pub situation_id: usize,
    pub probability: f64,
    pub map: BoundaryMap,
}

/// (Σ pⱼ·Dⱼ) / Z with Z = Σ pⱼ, accumulated in ascending situation order.
pub fn fuse(preds: &[SituationalPrediction]) -> Result<BoundaryMap> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let mut order: Vec<&SituationalPrediction> = preds.iter().collect();
    order.sort_by_key(|p| p.situation_id);
    for p in &order {
        if !p.map.same_shape(&first.map) {
            return Err(Error::dims(
                format!("{}x{}", first.map.width(), first.map.height()),
                format!("{}x{}", p.map.width(), p.map.height()),
            ));
        }
        if !(p.probability >= 0.0 && p.probability.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "situation {} has invalid probability {}",
                p.situation_id, p.probability
            )));
        }
    }
    let z: f64 = order.iter().map(|p| p.probability).sum();
    if !(z > 0.0) {
        return Err(Error::InvalidArgument("total probability Z is zero".into()));
    }
    let mut out = vec![0.0; first.map.values().len()];
    for p in order {
        let w = p.probability / z;
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(p.map.values()) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    BoundaryMap::new(first.map.width(), first.map.height(), out)
}

/// Fuses the situations chosen by `sel` from precomputed per-situation maps.
pub fn fuse_selected(probs: &[f64], maps: &[BoundaryMap], sel: Selection) -> Result<(BoundaryMap, Vec<(usize, f64)>)> {
    if probs.len() != maps.len() {
        return Err(Error::dims(probs.len(), maps.len()));
    }
    let chosen = top_n_situations(probs, sel)?;
    let preds: Vec<SituationalPrediction> = chosen
        .iter()
        .map(|&(j, p)| SituationalPrediction {
            situation_id: j,
            probability: p,
            map: maps[j].clone(),
        })
        .collect();
    Ok((fuse(&preds)?, chosen))
}

/// Where situation probabilities come from at prediction time.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    Learned,
    /// Probability spread over the situations of the image's true classes.
    Oracle(&'a BTreeSet<u32>),
}

/// Everything needed to go from an image to a fused boundary map.
#[derive(Clone, Debug, PartialEq)]
pub struct SituationModel {
    /// Absent only when a single situation makes the gate trivial.
    pub encoder: Option<FisherEncoder>,
    pub partition: SituationPartition,
    pub gate: GatingModel,
    pub forests: Vec<EdgeForest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    pub map: BoundaryMap,
    pub probabilities: Vec<f64>,
    pub selected: Vec<(usize, f64)>,
    pub z: f64,
}

impl SituationModel {
    pub fn validate(&self) -> Result<()> {
        let k = self.partition.k();
        if self.gate.k() != k || self.forests.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{k} situations but {} gate models and {} forests",
                self.gate.k(),
                self.forests.len()
            )));
        }
        if k > 1 && self.encoder.is_none() {
            return Err(Error::InvalidArgument("gate needs a descriptor encoder".into()));
        }
        if let Some(e) = &self.encoder {
            if e.dim() != self.gate.dim() {
                return Err(Error::dims(self.gate.dim(), e.dim()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.partition.k()
    }

    pub fn probabilities(&self, img: &Image, gate: GateMode) -> Result<Vec<f64>> {
        match gate {
            GateMode::Oracle(classes) => oracle_probabilities(&self.partition, classes),
            GateMode::Learned if self.k() == 1 => Ok(vec![1.0]),
            GateMode::Learned => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("gate needs a descriptor encoder".into()))?;
                gate_probabilities(&self.gate, &enc.describe(img)?)
            }
        }
    }

    fn channels_for(&self, img: &Image, ids: &[usize]) -> Vec<(usize, ChannelStack)> {
        let mut shrinks: Vec<usize> = ids.iter().map(|&j| self.forests[j].config.shrink).collect();
        shrinks.sort_unstable();
        shrinks.dedup();
        shrinks.into_iter().map(|s| (s, compute_channels(img, s))).collect()
    }

    /// Boundary maps of the listed situations' forests, in the given order.
    pub fn situation_maps(&self, img: &Image, ids: &[usize]) -> Result<Vec<BoundaryMap>> {
        img.ensure_min_side(MIN_FOREST_SIDE)?;
        if let Some(&bad) = ids.iter().find(|&&j| j >= self.forests.len()) {
            return Err(Error::InvalidArgument(format!("no situation {bad}")));
        }
        let chans = self.channels_for(img, ids);
        ids.par_iter()
            .map(|&j| {
                let f = &self.forests[j];
                let ch = &chans.iter().find(|c| c.0 == f.config.shrink).expect("computed").1;
                f.predict_channels(ch)
            })
            .collect()
    }

    /// Gate, keep the top situations, run only their forests, fuse.
    pub fn predict(&self, img: &Image, sel: Selection, gate: GateMode) -> Result<FusedPrediction> {
        let probabilities = self.probabilities(img, gate)?;
        let selected = top_n_situations(&probabilities, sel)?;
        let ids: Vec<usize> = selected.iter().map(|s| s.0).collect();
        let maps = self.situation_maps(img, &ids)?;
        let preds: Vec<SituationalPrediction> = selected
            .iter()
            .zip(maps)
            .map(|(&(j, p), map)| SituationalPrediction {
                situation_id: j,
                probability: p,
                map,
            })
            .collect();
        let map = fuse(&preds)?;
        let z = selected.iter().map(|s| s.1).sum();
        Ok(FusedPrediction {
            map,
            probabilities,
            selected,
            z,
        })
    }

    /// P(S_c | I) · D_c(I) for a class-kind model, not renormalized.
    pub fn semantic_contour(&self, img: &Image, class: u32, gate: GateMode) -> Result<BoundaryMap> {
        let j = self.class_index(class)?;
        let p = self.probabilities(img, gate)?[j];
        semantic_contour_from(p, || Ok(self.situation_maps(img, &[j])?.remove(0)), img)
    }

    /// Semantic contours for every class of a class-kind model, ascending class id.
    pub fn semantic_contours(&self, img: &Image, gate: GateMode) -> Result<Vec<(u32, BoundaryMap)>> {
        if self.partition.kind != SituationKind::Class {
            return Err(Error::InvalidArgument("semantic contours need a class partition".into()));
        }
        let probs = self.probabilities(img, gate)?;
        let ids: Vec<usize> = (0..self.k()).collect();
        let maps = self.situation_maps(img, &ids)?;
        Ok(self
            .partition
            .situations
            .iter()
            .zip(maps)
            .map(|(s, m)| (s.class_id.expect("class situation"), scale(&m, probs[s.id])))
            .collect())
    }

    fn class_index(&self, class: u32) -> Result<usize> {
        if self.partition.kind != SituationKind::Class {
            return Err(Error::InvalidArgument("semantic contours need a class partition".into()));
        }
        self.partition
            .class_situation(class)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class id {class}")))
    }
}

fn scale(m: &BoundaryMap, p: f64) -> BoundaryMap {
    let v = m.values().iter().map(|v| (p * v).clamp(0.0, 1.0)).collect();
    BoundaryMap::new(m.width(), m.height(), v).expect("scaled values stay in range")
}

fn semantic_contour_from(
    p: f64,
    map: impl FnOnce() -> Result<BoundaryMap>,
    img: &Image,
) -> Result<BoundaryMap> {
    if p == 0.0 {
        return Ok(BoundaryMap::zeros(img.width(), img.height()));
    }
    Ok(scale(&map()?, p))
}

/// P · D for an already computed class map.
pub fn semantic_contour(probability: f64, class_map: &BoundaryMap) -> Result<BoundaryMap> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::InvalidArgument(format!("probability {probability} outside [0, 1]")));
    }
    Ok(scale(class_map, probability))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> BoundaryMap {
        BoundaryMap::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn pred(id: usize, p: f64, v: &[f64]) -> SituationalPrediction {
        SituationalPrediction {
            situation_id: id,
            probability: p,
            map: map(v),
        }
    }

    #[test]
    fn single_prediction_is_identity() {
        let m = [0.1, 0.37, 0.9, 0.0];
        assert_eq!(fuse(&[pred(3, 0.37, &m)]).unwrap().values(), &m);
    }

    #[test]
    fn two_maps_weighted() {
        let out = fuse(&[pred(0, 0.6, &[1.0, 0.0]), pred(1, 0.2, &[0.0, 1.0])]).unwrap();
        assert!((out.values()[0] - 0.75).abs() < 1e-15);
        assert!((out.values()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_and_mismatch_rejected() {
        assert!(fuse(&[pred(0, 0.0, &[1.0])]).is_err());
        assert!(fuse(&[pred(0, 0.5, &[1.0]), pred(1, 0.5, &[1.0, 0.0])]).is_err());
        assert!(fuse(&[]).is_err());
    }

    #[test]
    fn semantic_contour_scales() {
        let m = map(&[0.8, 0.8]);
        let out = semantic_contour(0.5, &m).unwrap();
        assert!(out.values().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(semantic_contour(0.0, &m).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(semantic_contour(1.0, &m).unwrap(), m);
    }
}
