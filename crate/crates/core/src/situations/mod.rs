//! Partitions of the training split into situations: one per class, k-means
//! subclusters within each class, or k-means clusters over all images.

mod kmeans;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, nearest, KMeansResult, MAX_ITER as KMEANS_MAX_ITER};

use crate::descriptor::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::raster::{DatasetManifest, Split};
use crate::util::{derive_seed, sq_dist};

/// Smallest situation a forest is trained on.
pub const MIN_SITUATION_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SituationKind {
    /// Single situation holding the whole training split.
    Monolithic,
    Class,
    Subclass,
    Agnostic,
}

impl fmt::Display for SituationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SituationKind::Monolithic => "monolithic",
            SituationKind::Class => "class",
            SituationKind::Subclass => "subclass",
            SituationKind::Agnostic => "agnostic",
        })
    }
}

impl FromStr for SituationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "monolithic" => Ok(SituationKind::Monolithic),
            "class" => Ok(SituationKind::Class),
            "subclass" => Ok(SituationKind::Subclass),
            "agnostic" => Ok(SituationKind::Agnostic),
            other => Err(format!("unknown situation kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Situation {
    pub id: usize,
    pub kind: SituationKind,
    pub class_id: Option<u32>,
    /// Manifest entry indices, ascending.
    pub members: Vec<usize>,
    pub centroid: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SituationPartition {
    pub kind: SituationKind,
    pub situations: Vec<Situation>,
}

fn cmp_centroid(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> Ordering {
    match (a, b) {
        (Some(a), Some(b)) => a
            .iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal),
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
    }
}

impl SituationPartition {
    /// Sorts by (kind, class, centroid) and renumbers ids from 0.
    fn canonical(kind: SituationKind, mut situations: Vec<Situation>) -> Self {
        for s in &mut situations {
            s.members.sort_unstable();
        }
        situations.sort_by(|a, b| {
            a.kind
                .cmp(&b.kind)
                .then(a.class_id.cmp(&b.class_id))
                .then_with(|| cmp_centroid(&a.centroid, &b.centroid))
                .then_with(|| a.members.cmp(&b.members))
        });
        for (i, s) in situations.iter_mut().enumerate() {
            s.id = i;
        }
        Self { kind, situations }
    }

    pub fn k(&self) -> usize {
        self.situations.len()
    }

    /// Situation ids each manifest entry belongs to.
    pub fn memberships(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for s in &self.situations {
            for &e in &s.members {
                m.entry(e).or_default().push(s.id);
            }
        }
        m
    }

    /// Id of the class-kind situation for `class`.
    pub fn class_situation(&self, class: u32) -> Option<usize> {
        self.situations
            .iter()
            .find(|s| s.class_id == Some(class))
            .map(|s| s.id)
    }

    /// Text form: `<id>\t<kind>\t<class|->\t<comma-separated entries>` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.situations {
            let members: Vec<String> = s.members.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                s.id,
                s.kind,
                s.class_id.map_or("-".to_string(), |c| c.to_string()),
                members.join(",")
            ));
        }
        out
    }

    /// Parses the text form. Centroids are not part of it.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut situations = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let id: usize = f[0].parse().map_err(|_| err("bad id".into()))?;
            let kind: SituationKind = f[1].parse().map_err(err)?;
            let class_id = match f[2] {
                "-" => None,
                c => Some(c.parse().map_err(|_| err("bad class id".into()))?),
            };
            let members = f[3]
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| err(format!("bad entry index `{t}`"))))
                .collect::<Result<Vec<usize>>>()?;
            if members.is_empty() {
                return Err(err("situation without members".into()));
            }
            if id != situations.len() {
                return Err(err(format!("ids must be consecutive from 0, got {id}")));
            }
            situations.push(Situation {
                id,
                kind,
                class_id,
                members,
                centroid: None,
            });
        }
        let kind = situations
            .first()
            .map(|s| s.kind)
            .ok_or_else(|| Error::InvalidArgument("empty partition".into()))?;
        if situations.iter().any(|s| s.kind != kind) {
            return Err(Error::InvalidArgument("mixed situation kinds".into()));
        }
        Ok(Self { kind, situations })
    }
}

fn check_descriptors(manifest: &DatasetManifest, descriptors: &[GlobalDescriptor]) -> Result<()> {
    if descriptors.len() != manifest.len() {
        return Err(Error::dims(
            format!("{} descriptors (one per manifest entry)", manifest.len()),
            descriptors.len(),
        ));
    }
    Ok(())
}

/// One situation holding every training image.
pub fn build_monolithic_situation(manifest: &DatasetManifest) -> Result<SituationPartition> {
    let members = manifest.indices(Split::Train);
    if members.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok(SituationPartition::canonical(
        SituationKind::Monolithic,
        vec![Situation {
            id: 0,
            kind: SituationKind::Monolithic,
            class_id: None,
            members,
            centroid: None,
        }],
    ))
}

/// One situation per class; multi-label images join each of their classes.
pub fn build_class_situations(manifest: &DatasetManifest) -> Result<SituationPartition> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in manifest.indices(Split::Train) {
        for &c in &manifest.entries[i].class_labels {
            by_class.entry(c).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let situations = by_class
        .into_iter()
        .map(|(c, members)| Situation {
            id: 0,
            kind: SituationKind::Class,
            class_id: Some(c),
            members,
            centroid: None,
        })
        .collect();
    Ok(SituationPartition::canonical(SituationKind::Class, situations))
}

fn cluster_members(
    members: &[usize],
    descriptors: &[GlobalDescriptor],
    k: usize,
    seed: u64,
    kind: SituationKind,
    class_id: Option<u32>,
) -> Result<Vec<Situation>> {
    let pts: Vec<&[f64]> = members.iter().map(|&i| descriptors[i].as_slice()).collect();
    let r = kmeans(&pts, k, seed)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (&m, &a) in members.iter().zip(&r.assignments) {
        groups[a].push(m);
    }
    Ok(groups
        .into_iter()
        .zip(r.centroids)
        .filter(|(g, _)| !g.is_empty())
        .map(|(members, c)| Situation {
            id: 0,
            kind,
            class_id,
            members,
            centroid: Some(c),
        })
        .collect())
}

/// k-means with `per_class` clusters inside each class (capped at the class
/// size, so small classes yield one situation per image).
pub fn build_subclass_situations(
    manifest: &DatasetManifest,
    descriptors: &[GlobalDescriptor],
    per_class: usize,
    seed: u64,
) -> Result<SituationPartition> {
    check_descriptors(manifest, descriptors)?;
    if per_class == 0 {
        return Err(Error::InvalidArgument("subclasses per class must be positive".into()));
    }
    let classes = build_class_situations(manifest)?;
    let mut situations = Vec::new();
    for s in &classes.situations {
        let class = s.class_id.expect("class situations carry a class");
        let k = per_class.min(s.members.len());
        situations.extend(cluster_members(
            &s.members,
            descriptors,
            k,
            derive_seed(seed, &[class as u64]),
            SituationKind::Subclass,
            Some(class),
        )?);
    }
    Ok(SituationPartition::canonical(SituationKind::Subclass, situations))
}

/// k-means over every training image, ignoring labels.
pub fn build_agnostic_situations(
    manifest: &DatasetManifest,
    descriptors: &[GlobalDescriptor],
    k: usize,
    seed: u64,
) -> Result<SituationPartition> {
    check_descriptors(manifest, descriptors)?;
    let members = manifest.indices(Split::Train);
    if members.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let situations = cluster_members(&members, descriptors, k, seed, SituationKind::Agnostic, None)?;
    Ok(SituationPartition::canonical(SituationKind::Agnostic, situations))
}

/// Folds situations smaller than `min_size` into the situation with the
/// nearest centroid (restricted to the same class for subclass partitions).
/// Class and monolithic partitions have no centroids and are returned as is.
pub fn merge_small_situations(
    partition: &SituationPartition,
    descriptors: &[GlobalDescriptor],
    min_size: usize,
) -> SituationPartition {
    if !matches!(partition.kind, SituationKind::Subclass | SituationKind::Agnostic) {
        for s in &partition.situations {
            if s.members.len() < min_size {
                warn!(
                    "situation {} has only {} images (minimum {min_size})",
                    s.id,
                    s.members.len()
                );
            }
        }
        return partition.clone();
    }
    let mut sits = partition.situations.clone();
    // Small situations with no merge partner, keyed by their first member.
    let mut stuck: BTreeSet<usize> = BTreeSet::new();
    loop {
        let Some(small) = sits
            .iter()
            .enumerate()
            .filter(|(_, s)| s.members.len() < min_size && !stuck.contains(&s.members[0]))
            .min_by_key(|(_, s)| (s.members.len(), s.id))
            .map(|(i, _)| i)
        else {
            break;
        };
        let target = sits
            .iter()
            .enumerate()
            .filter(|&(i, s)| i != small && s.class_id == sits[small].class_id)
            .min_by(|(_, a), (_, b)| {
                let c = sits[small].centroid.as_deref().unwrap_or_default();
                let da = a.centroid.as_deref().map_or(f64::INFINITY, |x| sq_dist(x, c));
                let db = b.centroid.as_deref().map_or(f64::INFINITY, |x| sq_dist(x, c));
                da.total_cmp(&db).then(a.id.cmp(&b.id))
            })
            .map(|(i, _)| i);
        let Some(target) = target else {
            // Nothing to merge into (e.g. a class with too few images).
            warn!(
                "situation {} has only {} images and no merge partner",
                sits[small].id,
                sits[small].members.len()
            );
            stuck.insert(sits[small].members[0]);
            continue;
        };
        warn!(
            "merging situation {} ({} images) into situation {}",
            sits[small].id,
            sits[small].members.len(),
            sits[target].id
        );
        let moved = sits.remove(small);
        let target = if target > small { target - 1 } else { target };
        sits[target].members.extend(moved.members);
        let members = &sits[target].members;
        let dim = descriptors[members[0]].dim();
        let mut c = vec![0.0; dim];
        for &m in members {
            for (a, b) in c.iter_mut().zip(descriptors[m].as_slice()) {
                *a += b;
            }
        }
        c.iter_mut().for_each(|v| *v /= members.len() as f64);
        sits[target].centroid = Some(c);
    }
    SituationPartition::canonical(partition.kind, sits)
}

/// Checks the partition against the manifest's training split.
pub fn validate_partition(partition: &SituationPartition, manifest: &DatasetManifest) -> Result<()> {
    let train: BTreeSet<usize> = manifest.indices(Split::Train).into_iter().collect();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &partition.situations {
        if s.members.is_empty() {
            return Err(Error::InvalidArgument(format!("situation {} is empty", s.id)));
        }
        for &m in &s.members {
            if !train.contains(&m) {
                return Err(Error::InvalidArgument(format!(
                    "situation {} references non-training entry {m}",
                    s.id
                )));
            }
            *seen.entry(m).or_default() += 1;
        }
    }
    if let Some(missing) = train.iter().find(|i| !seen.contains_key(i)) {
        return Err(Error::InvalidArgument(format!(
            "training entry {missing} belongs to no situation"
        )));
    }
    if partition.kind != SituationKind::Class {
        if let Some((e, _)) = seen.iter().find(|(_, &c)| c > 1) {
            return Err(Error::InvalidArgument(format!(
                "entry {e} belongs to several situations"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ManifestEntry;
    use std::path::PathBuf;

    fn manifest(labels: &[&[u32]]) -> DatasetManifest {
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ManifestEntry {
                image_path: PathBuf::from(format!("{i}.png")),
                seg_path: PathBuf::from(format!("{i}_s.png")),
                class_labels: l.iter().copied().collect(),
                split: Split::Train,
            })
            .collect();
        DatasetManifest::new("", entries).unwrap()
    }

    fn desc(v: &[f64]) -> GlobalDescriptor {
        GlobalDescriptor(v.to_vec())
    }

    #[test]
    fn one_situation_per_class() {
        let m = manifest(&[&[1], &[2], &[3], &[1]]);
        let p = build_class_situations(&m).unwrap();
        assert_eq!(p.k(), 3);
        assert_eq!(p.situations[0].members, vec![0, 3]);
        validate_partition(&p, &m).unwrap();
    }

    #[test]
    fn single_class_corpus() {
        let m = manifest(&[&[4], &[4], &[4]]);
        let p = build_class_situations(&m).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.situations[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn multi_label_joins_each_class() {
        let m = manifest(&[&[1, 2], &[1], &[2]]);
        let p = build_class_situations(&m).unwrap();
        assert!(p.situations.iter().all(|s| s.members.contains(&0)));
        validate_partition(&p, &m).unwrap();
    }

    #[test]
    fn small_class_gets_singleton_subclasses() {
        let m = manifest(&[&[1], &[1], &[1], &[2], &[2], &[2], &[2], &[2], &[2]]);
        let d: Vec<GlobalDescriptor> = (0..9).map(|i| desc(&[i as f64 * 10.0, 0.0])).collect();
        let p = build_subclass_situations(&m, &d, 5, 1).unwrap();
        let c1 = p.situations.iter().filter(|s| s.class_id == Some(1)).count();
        let c2 = p.situations.iter().filter(|s| s.class_id == Some(2)).count();
        assert_eq!((c1, c2), (3, 5));
        validate_partition(&p, &m).unwrap();
    }

    #[test]
    fn one_subclass_equals_class_partition() {
        let m = manifest(&[&[1], &[2], &[1], &[3], &[2]]);
        let d: Vec<GlobalDescriptor> = (0..5).map(|i| desc(&[i as f64])).collect();
        let sub = build_subclass_situations(&m, &d, 1, 3).unwrap();
        let cls = build_class_situations(&m).unwrap();
        let a: Vec<_> = sub.situations.iter().map(|s| (s.class_id, s.members.clone())).collect();
        let b: Vec<_> = cls.situations.iter().map(|s| (s.class_id, s.members.clone())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn agnostic_k1_is_whole_corpus() {
        let m = manifest(&[&[1], &[2], &[1]]);
        let d: Vec<GlobalDescriptor> = (0..3).map(|i| desc(&[i as f64])).collect();
        let p = build_agnostic_situations(&m, &d, 1, 0).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.situations[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn small_situations_merge_into_nearest() {
        let m = manifest(&[&[1u32][..]; 8]);
        let d: Vec<GlobalDescriptor> = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2, 10.3, 4.0]
            .iter()
            .map(|&v| desc(&[v]))
            .collect();
        let p = build_agnostic_situations(&m, &d, 3, 2).unwrap();
        assert_eq!(p.k(), 3);
        let merged = merge_small_situations(&p, &d, 3);
        validate_partition(&merged, &m).unwrap();
        assert!(merged.situations.iter().all(|s| s.members.len() >= 3));
    }

    #[test]
    fn text_round_trip() {
        let m = manifest(&[&[1], &[2], &[1]]);
        let p = build_class_situations(&m).unwrap();
        let back = SituationPartition::from_text(&p.to_text(), Path::new("p")).unwrap();
        assert_eq!(back, p);
        assert!(SituationPartition::from_text("0\tclass\t1\t\n", Path::new("p")).is_err());
    }
}
