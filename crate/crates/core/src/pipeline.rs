//! End-to-end training and evaluation on a dataset manifest, shared by the
//! command-line tool and the test suites.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{fit_fisher_encoder, DescriptorConfig, FisherEncoder, GlobalDescriptor, GlobalFeatures};
use crate::error::{Error, Result};
use crate::eval::{dataset_eval, match_masks, sbd_eval, DatasetEval, EvalConfig, PrCurve, SbdEval};
use crate::forest::{compute_channels, train_forest, ChannelStack, EdgeForest, ForestConfig, TrainingImage};
use crate::fusion::{fuse_selected, GateMode, SituationModel};
use crate::gating::{train_gate, GateConfig, GatingModel, Selection};
use crate::persist::{ModelContainer, ModelMeta};
use crate::raster::{
    boundary_thin, extract_gt_boundaries, BoundaryMap, DatasetManifest, GtMode, Image, LabeledSegmentation, Split,
};
use crate::situations::{
    build_agnostic_situations, build_class_situations, build_monolithic_situation, build_subclass_situations,
    merge_small_situations, SituationKind, SituationPartition, MIN_SITUATION_SIZE,
};
use crate::util::derive_seed;

/// A manifest with every image, segmentation and all-classes ground truth in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub segs: Vec<LabeledSegmentation>,
    pub gts: Vec<BoundaryMap>,
}

impl Corpus {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let samples = (0..manifest.len())
            .into_par_iter()
            .map(|i| manifest.load_sample(i))
            .collect::<Result<Vec<_>>>()?;
        let (images, segs): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
        let gts = segs
            .par_iter()
            .map(|s| extract_gt_boundaries(s, GtMode::AllClasses))
            .collect();
        Ok(Self {
            manifest,
            images,
            segs,
            gts,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    pub fn classes_of(&self, i: usize) -> &BTreeSet<u32> {
        &self.manifest.entries[i].class_labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PartitionSpec {
    Monolithic,
    Class,
    Subclass { per_class: usize },
    Agnostic { k: usize },
}

impl PartitionSpec {
    pub fn kind(&self) -> SituationKind {
        match self {
            PartitionSpec::Monolithic => SituationKind::Monolithic,
            PartitionSpec::Class => SituationKind::Class,
            PartitionSpec::Subclass { .. } => SituationKind::Subclass,
            PartitionSpec::Agnostic { .. } => SituationKind::Agnostic,
        }
    }

    pub fn needs_descriptors(&self) -> bool {
        matches!(self, PartitionSpec::Subclass { .. } | PartitionSpec::Agnostic { .. })
    }
}

/// Per-stage seeds derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub features: u64,
    pub cluster: u64,
    pub gate: u64,
    pub forests: u64,
}

impl StageSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            features: derive_seed(seed, &[1]),
            cluster: derive_seed(seed, &[2]),
            gate: derive_seed(seed, &[3]),
            forests: derive_seed(seed, &[4]),
        }
    }

    pub fn to_map(self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("features".to_string(), self.features),
            ("cluster".to_string(), self.cluster),
            ("gate".to_string(), self.gate),
            ("forests".to_string(), self.forests),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub descriptor: DescriptorConfig,
    pub partition: PartitionSpec,
    /// `seed` is overwritten by the gate stage seed.
    pub gate: GateConfig,
    /// `seed` is overwritten by the forest stage seed.
    pub forest: ForestConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(partition: PartitionSpec, seed: u64) -> Self {
        Self {
            descriptor: DescriptorConfig::default(),
            partition,
            gate: GateConfig::default(),
            forest: ForestConfig::default(),
            seed,
        }
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::from_master(self.seed)
    }
}

/// Fits the Fisher encoder on the training split.
pub fn fit_encoder(corpus: &Corpus, cfg: &DescriptorConfig, seed: u64) -> Result<FisherEncoder> {
    let imgs: Vec<&Image> = corpus.indices(Split::Train).iter().map(|&i| &corpus.images[i]).collect();
    fit_fisher_encoder(&imgs, cfg, seed)
}

/// Global descriptors of every manifest entry, in manifest order.
pub fn describe_all(encoder: &dyn GlobalFeatures, images: &[Image]) -> Result<Vec<GlobalDescriptor>> {
    images.par_iter().map(|img| encoder.describe(img)).collect()
}

/// Builds the situations of `spec`; clustered kinds then fold situations
/// smaller than the minimum size into their nearest same-class neighbour.
pub fn build_partition(
    manifest: &DatasetManifest,
    spec: PartitionSpec,
    descriptors: Option<&[GlobalDescriptor]>,
    seed: u64,
) -> Result<SituationPartition> {
    let need = || {
        descriptors.ok_or_else(|| Error::InvalidArgument(format!("{} situations need global descriptors", spec.kind())))
    };
    match spec {
        PartitionSpec::Monolithic => build_monolithic_situation(manifest),
        PartitionSpec::Class => build_class_situations(manifest),
        PartitionSpec::Subclass { per_class } => {
            let d = need()?;
            Ok(merge_small_situations(&build_subclass_situations(manifest, d, per_class, seed)?, d, MIN_SITUATION_SIZE))
        }
        PartitionSpec::Agnostic { k } => {
            let d = need()?;
            Ok(merge_small_situations(&build_agnostic_situations(manifest, d, k, seed)?, d, MIN_SITUATION_SIZE))
        }
    }
}

/// Trains the gate for `partition`; one-situation partitions get the trivial gate.
pub fn fit_gate(
    partition: &SituationPartition,
    descriptors: Option<&[GlobalDescriptor]>,
    cfg: &GateConfig,
) -> Result<GatingModel> {
    if partition.k() == 1 {
        return Ok(GatingModel::single(descriptors.and_then(|d| d.first()).map_or(0, GlobalDescriptor::dim)));
    }
    let d = descriptors.ok_or_else(|| Error::InvalidArgument("a learned gate needs global descriptors".into()))?;
    train_gate(partition, d, cfg)
}

/// One forest per situation, trained on its members. The forest of situation
/// `j` uses seed `derive_seed(cfg.seed, [j])`.
pub fn train_situation_forests(
    corpus: &Corpus,
    partition: &SituationPartition,
    cfg: &ForestConfig,
) -> Result<Vec<EdgeForest>> {
    cfg.validate()?;
    let needed: BTreeSet<usize> = partition.situations.iter().flat_map(|s| s.members.iter().copied()).collect();
    if let Some(&bad) = needed.iter().find(|&&i| i >= corpus.len()) {
        return Err(Error::InvalidArgument(format!("situation member {bad} is not in the corpus")));
    }
    let order: Vec<usize> = needed.into_iter().collect();
    let stacks: Vec<ChannelStack> = order
        .par_iter()
        .map(|&i| compute_channels(&corpus.images[i], cfg.shrink))
        .collect();
    let slot: BTreeMap<usize, usize> = order.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    partition
        .situations
        .iter()
        .map(|s| {
            let imgs: Vec<TrainingImage> = s
                .members
                .iter()
                .map(|&i| TrainingImage {
                    channels: &stacks[slot[&i]],
                    seg: &corpus.segs[i],
                    gt: &corpus.gts[i],
                })
                .collect();
            let fcfg = ForestConfig {
                seed: derive_seed(cfg.seed, &[s.id as u64]),
                ..cfg.clone()
            };
            info!("training forest {} on {} images", s.id, imgs.len());
            train_forest(&imgs, &fcfg)
        })
        .collect()
}

/// Result of [`train_model`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: SituationModel,
    /// Manifest-aligned, present when an encoder was fitted.
    pub descriptors: Option<Vec<GlobalDescriptor>>,
    pub meta: ModelMeta,
}

impl Trained {
    pub fn container(&self) -> ModelContainer {
        ModelContainer::from_model(self.model.clone(), self.meta.clone())
    }
}

/// Encoder (unless there is a single situation), situations, gate and forests.
pub fn train_model(corpus: &Corpus, cfg: &TrainConfig) -> Result<Trained> {
    let seeds = cfg.seeds();
    let single = cfg.partition == PartitionSpec::Monolithic;
    let (encoder, descriptors) = if single {
        (None, None)
    } else {
        info!("fitting descriptor encoder");
        let enc = fit_encoder(corpus, &cfg.descriptor, seeds.features)?;
        let d = describe_all(&enc, &corpus.images)?;
        (Some(enc), Some(d))
    };
    let partition = build_partition(&corpus.manifest, cfg.partition, descriptors.as_deref(), seeds.cluster)?;
    info!("{} {} situation(s)", partition.k(), partition.kind);
    let gate_cfg = GateConfig {
        seed: seeds.gate,
        ..cfg.gate.clone()
    };
    let gate = fit_gate(&partition, descriptors.as_deref(), &gate_cfg)?;
    let forest_cfg = ForestConfig {
        seed: seeds.forests,
        ..cfg.forest.clone()
    };
    let forests = train_situation_forests(corpus, &partition, &forest_cfg)?;
    let model = SituationModel {
        encoder,
        partition,
        gate,
        forests,
    };
    model.validate()?;
    let mut meta = ModelMeta {
        descriptor: (!single).then(|| cfg.descriptor.clone()),
        seeds: seeds.to_map(),
        ..ModelMeta::default()
    };
    meta.seeds.insert("master".into(), cfg.seed);
    meta.params.insert("partition".into(), serde_json::to_value(cfg.partition)?);
    meta.params.insert("gate".into(), serde_json::to_value(&gate_cfg)?);
    meta.params.insert("forest".into(), serde_json::to_value(&forest_cfg)?);
    Ok(Trained {
        model,
        descriptors,
        meta,
    })
}

/// The single-detector baseline: the situational path with one situation
/// holding the whole training split.
pub fn train_monolithic(corpus: &Corpus, cfg: &TrainConfig) -> Result<Trained> {
    train_model(
        corpus,
        &TrainConfig {
            partition: PartitionSpec::Monolithic,
            ..cfg.clone()
        },
    )
}

/// Gate probabilities and every situation's boundary map for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SituationOutputs {
    pub probabilities: Vec<f64>,
    pub maps: Vec<BoundaryMap>,
}

impl SituationOutputs {
    pub fn fuse(&self, sel: Selection) -> Result<BoundaryMap> {
        Ok(fuse_selected(&self.probabilities, &self.maps, sel)?.0)
    }
}

fn gate_for<'a>(corpus: &'a Corpus, i: usize, oracle: bool) -> GateMode<'a> {
    if oracle {
        GateMode::Oracle(corpus.classes_of(i))
    } else {
        GateMode::Learned
    }
}

/// Runs every forest on each listed image so that any top-n can be fused afterwards.
pub fn situation_outputs(
    model: &SituationModel,
    corpus: &Corpus,
    indices: &[usize],
    oracle: bool,
) -> Result<Vec<SituationOutputs>> {
    let all: Vec<usize> = (0..model.k()).collect();
    indices
        .par_iter()
        .map(|&i| {
            let img = &corpus.images[i];
            Ok(SituationOutputs {
                probabilities: model.probabilities(img, gate_for(corpus, i, oracle))?,
                maps: model.situation_maps(img, &all)?,
            })
        })
        .collect()
}

/// Fused predictions for the listed images, running only the selected forests.
pub fn predict_indices(
    model: &SituationModel,
    corpus: &Corpus,
    indices: &[usize],
    sel: Selection,
    oracle: bool,
) -> Result<Vec<BoundaryMap>> {
    indices
        .par_iter()
        .map(|&i| Ok(model.predict(&corpus.images[i], sel, gate_for(corpus, i, oracle))?.map))
        .collect()
}

/// Dataset evaluation of `preds` against the all-classes ground truth of `indices`.
pub fn evaluate_indices(
    preds: &[BoundaryMap],
    corpus: &Corpus,
    indices: &[usize],
    cfg: &EvalConfig,
) -> Result<DatasetEval> {
    let gts: Vec<BoundaryMap> = indices.iter().map(|&i| corpus.gts[i].clone()).collect();
    dataset_eval(preds, &gts, cfg)
}

/// Highest threshold whose recall reaches `target`, else the lowest threshold.
pub fn threshold_at_recall(curve: &PrCurve, target: f64) -> f64 {
    curve
        .thresholds
        .iter()
        .zip(&curve.recall)
        .find(|(_, &r)| r >= target)
        .map_or(*curve.thresholds.last().expect("non-empty curve"), |(&t, _)| t)
}

/// Unmatched thinned predictions at `threshold` that fall inside objects of `class`.
pub fn interior_false_positives(
    pred: &BoundaryMap,
    gt: &BoundaryMap,
    seg: &LabeledSegmentation,
    class: u32,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<usize> {
    let (w, h) = (gt.width(), gt.height());
    let p: Vec<bool> = boundary_thin(pred, threshold).values().iter().map(|&v| v > 0.5).collect();
    let g: Vec<bool> = boundary_thin(gt, 0.5).values().iter().map(|&v| v > 0.5).collect();
    let m = match_masks(&p, &g, w, h, cfg.tolerance(w, h), cfg.method)?;
    let mut matched = vec![false; w * h];
    for &(pi, _) in &m.pairs {
        matched[pi] = true;
    }
    Ok((0..w * h)
        .filter(|&i| p[i] && !matched[i] && seg.segments()[i] != 0 && seg.classes()[i] == class)
        .count())
}

/// Per-class semantic contours of a class model, evaluated against
/// single-class ground truth with counts pooled over `indices`.
pub fn semantic_eval(
    model: &SituationModel,
    corpus: &Corpus,
    indices: &[usize],
    oracle: bool,
    cfg: &EvalConfig,
) -> Result<SbdEval> {
    let per_image: Vec<Vec<(u32, BoundaryMap)>> = indices
        .par_iter()
        .map(|&i| model.semantic_contours(&corpus.images[i], gate_for(corpus, i, oracle)))
        .collect::<Result<_>>()?;
    let mut maps: BTreeMap<u32, Vec<BoundaryMap>> = BTreeMap::new();
    let mut gts: BTreeMap<u32, Vec<BoundaryMap>> = BTreeMap::new();
    for (contours, &i) in per_image.into_iter().zip(indices) {
        for (c, m) in contours {
            maps.entry(c).or_default().push(m);
            gts.entry(c)
                .or_default()
                .push(extract_gt_boundaries(&corpus.segs[i], GtMode::SingleClass(c)));
        }
    }
    sbd_eval(&maps, &gts, cfg)
}

/// Serializable summary of a dataset evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub skipped: usize,
    pub ap: f64,
    pub p_at_20: f64,
    pub p_at_50: f64,
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl From<&DatasetEval> for EvalReport {
    fn from(e: &DatasetEval) -> Self {
        Self {
            images: e.per_image.len(),
            skipped: e.skipped,
            ap: e.curve.ap,
            p_at_20: e.curve.p_at_20,
            p_at_50: e.curve.p_at_50,
            thresholds: e.curve.thresholds.clone(),
            precision: e.curve.precision.clone(),
            recall: e.curve.recall.clone(),
        }
    }
}

impl EvalReport {
    /// Fixed-width precision/recall table.
    pub fn table(&self) -> String {
        let mut s = format!("{:>9}  {:>9}  {:>9}\n", "threshold", "precision", "recall");
        for ((t, p), r) in self.thresholds.iter().zip(&self.precision).zip(&self.recall) {
            s.push_str(&format!("{t:>9.3}  {p:>9.4}  {r:>9.4}\n"));
        }
        s.push_str(&format!(
            "AP {:.4}  P@20 {:.4}  P@50 {:.4}  ({} images, {} skipped)\n",
            self.ap, self.p_at_20, self.p_at_50, self.images, self.skipped
        ));
        s
    }
}
