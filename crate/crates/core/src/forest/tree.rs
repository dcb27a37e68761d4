use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::label::{pixel_pairs, Bits256, NodeVectors, SegPatch};
use crate::util::{derive_seed, rng_from};

/// Structured training target: the target-window segmentation (for split
/// labels) and its ground-truth boundary mask (stored at leaves).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredTarget {
    pub seg: SegPatch,
    pub mask: Bits256,
}

/// Feature values of the training samples, addressed by (sample, feature).
pub trait FeatureSource: Sync {
    fn n_features(&self) -> usize;
    fn value(&self, sample: usize, feature: usize) -> f32;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features drawn per node; 0 means ⌊√F⌉.
    pub features_per_node: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 64,
            min_leaf: 8,
            features_per_node: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Samples with `value < threshold` go left.
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
        gain: f64,
    },
    Leaf {
        mask: Bits256,
        count: u32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Leaf mask reached by a sample whose feature `f` has value `value(f)`.
    #[inline]
    pub fn leaf_mask(&self, value: impl Fn(usize) -> f32) -> &Bits256 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if value(*feature as usize) < *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { mask, .. } => return mask,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left as usize).max(go(t, *right as usize)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Binary Shannon entropy (bits) of `pos` positives among `n`.
pub fn entropy(pos: usize, n: usize) -> f64 {
    if n == 0 || pos == 0 || pos == n {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// Seed of the node reached from the root by `path` (bit d set = right at depth d).
pub fn node_seed(tree_seed: u64, depth: usize, path: u64) -> u64 {
    derive_seed(tree_seed, &[depth as u64, path])
}

struct Builder<'a, F: FeatureSource> {
    features: &'a F,
    targets: &'a [StructuredTarget],
    cfg: &'a TreeConfig,
    per_node: usize,
    seed: u64,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f32,
    gain: f64,
}

impl<F: FeatureSource> Builder<'_, F> {
    fn leaf(&mut self, idx: &[usize], nv: &NodeVectors) -> u32 {
        // Medoid: the sample whose pair vector is closest to the node mean;
        // ties go to the lexicographically smallest boundary mask.
        let dists: Vec<f64> = (0..nv.unique.len()).map(|u| nv.dist_to_mean(u)).collect();
        let best = idx
            .iter()
            .zip(&nv.of_sample)
            .map(|(&i, &u)| (dists[u], self.targets[i].mask))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("non-empty node");
        self.nodes.push(Node::Leaf {
            mask: best.1,
            count: idx.len() as u32,
        });
        (self.nodes.len() - 1) as u32
    }

    fn best_split(&self, idx: &[usize], labels: &[bool], seed: u64) -> Option<BestSplit> {
        let n = idx.len();
        let total_pos = labels.iter().filter(|&&l| l).count();
        let parent = entropy(total_pos, n);
        let nf = self.features.n_features();
        let mut rng = rng_from(derive_seed(seed, &[2]));
        let candidates = index::sample(&mut rng, nf, self.per_node.min(nf));
        let min_leaf = self.cfg.min_leaf.max(1);
        let mut best: Option<BestSplit> = None;
        let mut vals: Vec<(f32, bool)> = Vec::with_capacity(n);
        for f in candidates.iter() {
            vals.clear();
            vals.extend(idx.iter().zip(labels).map(|(&i, &l)| (self.features.value(i, f), l)));
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for j in 1..n {
                left_pos += vals[j - 1].1 as usize;
                if vals[j].0 <= vals[j - 1].0 || j < min_leaf || n - j < min_leaf {
                    continue;
                }
                let h = (j as f64 * entropy(left_pos, j)
                    + (n - j) as f64 * entropy(total_pos - left_pos, n - j))
                    / n as f64;
                let gain = parent - h;
                if best.as_ref().map_or(true, |b| gain > b.gain) {
                    let (a, b) = (vals[j - 1].0, vals[j].0);
                    let mut t = a + (b - a) * 0.5;
                    if t <= a || !t.is_finite() {
                        t = b;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold: t,
                        gain,
                    });
                }
            }
        }
        best.filter(|b| b.gain > 1e-12)
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize, path: u64) -> u32 {
        let seed = node_seed(self.seed, depth, path);
        let segs: Vec<&SegPatch> = idx.iter().map(|&i| &self.targets[i].seg).collect();
        let nv = NodeVectors::new(&segs, &pixel_pairs(seed));
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf.max(1) {
            return self.leaf(&idx, &nv);
        }
        let Some(unique_labels) = nv.unique_labels(seed) else {
            return self.leaf(&idx, &nv);
        };
        let labels: Vec<bool> = nv.of_sample.iter().map(|&u| unique_labels[u]).collect();
        let Some(split) = self.best_split(&idx, &labels, seed) else {
            return self.leaf(&idx, &nv);
        };
        drop(segs);
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &idx {
            if self.features.value(i, split.feature) < split.threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { mask: [0; 4], count: 0 });
        let l = self.build(left, depth + 1, path);
        let r = self.build(right, depth + 1, path | (1u64 << depth.min(63)));
        self.nodes[slot] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: l,
            right: r,
            gain: split.gain,
        };
        slot as u32
    }
}

/// Grows one tree over `targets` (all of them) using features from `features`.
///
/// Splits maximize information gain on the structured binary labels over
/// node-seeded candidate features; the result depends only on the set of
/// samples, not their order.
pub fn train_tree<F: FeatureSource>(
    features: &F,
    targets: &[StructuredTarget],
    cfg: &TreeConfig,
    seed: u64,
) -> Tree {
    let per_node = if cfg.features_per_node == 0 {
        ((features.n_features() as f64).sqrt().round() as usize).max(1)
    } else {
        cfg.features_per_node
    };
    let mut b = Builder {
        features,
        targets,
        cfg,
        per_node,
        seed,
        nodes: Vec::new(),
    };
    b.build((0..targets.len()).collect(), 0, 0);
    Tree { nodes: b.nodes }
}

#[cfg(test)]
mod tests {
    use super::super::label::{relabel, TARGET_PIXELS};
    use super::*;

    struct Table(Vec<Vec<f32>>);

    impl FeatureSource for Table {
        fn n_features(&self) -> usize {
            self.0[0].len()
        }
        fn value(&self, s: usize, f: usize) -> f32 {
            self.0[s][f]
        }
    }

    fn target(split: bool) -> StructuredTarget {
        let ids: Vec<u32> = (0..TARGET_PIXELS)
            .map(|i| if split && i % 16 >= 8 { 2 } else { 1 })
            .collect();
        let mut mask = [0u64; 4];
        if split {
            for r in 0..16 {
                super::super::label::set_bit(&mut mask, r * 16 + 7);
                super::super::label::set_bit(&mut mask, r * 16 + 8);
            }
        }
        StructuredTarget {
            seg: relabel(&ids),
            mask,
        }
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(0, 4), 0.0);
        assert!((entropy(2, 4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pure_node_is_a_leaf() {
        let targets = vec![target(true); 20];
        let feats = Table((0..20).map(|i| vec![i as f32]).collect());
        let t = train_tree(&feats, &targets, &TreeConfig::default(), 1);
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn separable_structures_give_depth_one() {
        let targets: Vec<StructuredTarget> = (0..40).map(|i| target(i % 2 == 0)).collect();
        let feats = Table((0..40).map(|i| vec![(i % 2) as f32, 0.5]).collect());
        let cfg = TreeConfig {
            features_per_node: 2,
            ..TreeConfig::default()
        };
        let t = train_tree(&feats, &targets, &cfg, 3);
        assert_eq!(t.depth(), 1);
        for (i, tg) in targets.iter().enumerate() {
            assert_eq!(t.leaf_mask(|f| feats.0[i][f]), &tg.mask);
        }
    }
}
