mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use sitedge::forest::{
    compute_channels, relabel, sample_patches, train_forest, train_tree, ChannelStack, EdgeForest,
    FeatureLayout, FeatureSource, ForestConfig, Node, StructuredTarget, TrainingImage, Tree, TreeConfig,
    TARGET_PIXELS,
};
use sitedge::pipeline::Corpus;
use sitedge::raster::{Image, Split};
use sitedge::util::derive_seed;
use sitedge::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    channels: Vec<ChannelStack>,
    cfg: ForestConfig,
    forest: EdgeForest,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = common::tiny_corpus(dir.path(), 3, 5);
        let channels: Vec<ChannelStack> = corpus.images.iter().map(|im| compute_channels(im, 2)).collect();
        let cfg = ForestConfig {
            trees: 2,
            budget: 600,
            tree: TreeConfig {
                max_depth: 20,
                min_leaf: 4,
                features_per_node: 0,
            },
            seed: 99,
            ..ForestConfig::default()
        };
        let forest = {
            let imgs = training_images(&corpus, &channels);
            train_forest(&imgs, &cfg).unwrap()
        };
        Fixture {
            _dir: dir,
            corpus,
            channels,
            cfg,
            forest,
        }
    })
}

fn training_images<'a>(corpus: &'a Corpus, channels: &'a [ChannelStack]) -> Vec<TrainingImage<'a>> {
    corpus
        .indices(Split::Train)
        .into_iter()
        .map(|i| TrainingImage {
            channels: &channels[i],
            seg: &corpus.segs[i],
            gt: &corpus.gts[i],
        })
        .collect()
}

fn check_structure(tree: &Tree, cfg: &TreeConfig, n: usize) {
    let mut total = 0;
    let mut reached = vec![false; tree.nodes.len()];
    reached[0] = true;
    for (i, node) in tree.nodes.iter().enumerate() {
        assert!(reached[i], "node {i} is unreachable");
        match node {
            Node::Split { left, right, gain, threshold, .. } => {
                assert!(*gain > 0.0, "split {i} has gain {gain}");
                assert!(threshold.is_finite());
                let (l, r) = (*left as usize, *right as usize);
                assert!(i < l && i < r && l != r && r < tree.nodes.len());
                assert!(!reached[l] && !reached[r], "node shared by two parents");
                reached[l] = true;
                reached[r] = true;
            }
            Node::Leaf { count, .. } => {
                assert!(*count as usize >= cfg.min_leaf.max(1).min(n));
                total += *count as usize;
            }
        }
    }
    assert_eq!(total, n);
    assert!(tree.depth() <= cfg.max_depth);
}

#[test]
fn trained_trees_are_well_formed() {
    let f = fixture();
    assert_eq!(f.forest.trees.len(), 2);
    for t in &f.forest.trees {
        check_structure(t, &f.cfg.tree, f.cfg.budget);
        assert!(t.leaves() > 1);
    }
}

#[test]
fn training_samples_route_to_leaves_holding_their_medoid() {
    let f = fixture();
    let imgs = training_images(&f.corpus, &f.channels);
    let layout = FeatureLayout::new(f.cfg.shrink);
    for (t, tree) in f.forest.trees.iter().enumerate() {
        let tseed = derive_seed(f.cfg.seed, &[t as u64]);
        let samples = sample_patches(&imgs, f.cfg.budget, f.cfg.shrink, derive_seed(tseed, &[0x5A])).unwrap();
        assert_eq!(samples.len(), f.cfg.budget);
        let mut hits = vec![0u32; tree.nodes.len()];
        let mut masks_at: Vec<BTreeSet<[u64; 4]>> = vec![BTreeSet::new(); tree.nodes.len()];
        for s in &samples {
            let ch = imgs[s.image as usize].channels;
            let (xs, ys) = (s.x0 as usize / 2, s.y0 as usize / 2);
            let mut i = 0;
            while let Node::Split { feature, threshold, left, right, .. } = &tree.nodes[i] {
                i = if layout.value(ch, *feature as usize, xs, ys) < *threshold { *left } else { *right } as usize;
            }
            hits[i] += 1;
            masks_at[i].insert(s.target.mask);
        }
        for (i, node) in tree.nodes.iter().enumerate() {
            if let Node::Leaf { count, mask } = node {
                assert_eq!(hits[i], *count, "tree {t} leaf {i}");
                assert!(masks_at[i].contains(mask), "tree {t} leaf {i} mask is not a training mask");
            }
        }
    }
}

#[test]
fn training_is_reproducible() {
    let f = fixture();
    let imgs = training_images(&f.corpus, &f.channels);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let again = pool.install(|| train_forest(&imgs, &f.cfg).unwrap());
    assert_eq!(again, f.forest);
    let other = train_forest(&imgs, &ForestConfig { seed: 100, ..f.cfg.clone() }).unwrap();
    assert_ne!(other, f.forest);
}

#[test]
fn predictions_are_probabilities() {
    let f = fixture();
    for i in f.corpus.indices(Split::Test) {
        let m = f.forest.predict(&f.corpus.images[i]).unwrap();
        assert_eq!((m.width(), m.height()), (96, 96));
        assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.values().iter().any(|&v| v > 0.0));
    }
}

#[test]
fn small_images_are_rejected() {
    let f = fixture();
    let img = Image::from_fn(31, 64, |_, _| [0, 0, 0]);
    assert!(matches!(f.forest.predict(&img), Err(Error::ImageTooSmall { .. })));
}

struct Table(Vec<Vec<f32>>);

impl FeatureSource for Table {
    fn n_features(&self) -> usize {
        self.0[0].len()
    }
    fn value(&self, s: usize, f: usize) -> f32 {
        self.0[s][f]
    }
}

fn target(kind: u8) -> StructuredTarget {
    let ids: Vec<u32> = (0..TARGET_PIXELS)
        .map(|i| {
            let (x, y) = (i % 16, i / 16);
            match kind % 4 {
                0 => 0,
                1 => (x >= 8) as u32,
                2 => (y >= 5) as u32,
                _ => (x + y >= 16) as u32,
            }
        })
        .collect();
    let mut mask = [0u64; 4];
    mask[(kind % 4) as usize] = 1 << kind;
    StructuredTarget {
        seg: relabel(&ids),
        mask,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_trees_satisfy_invariants(
        rows in proptest::collection::vec((0u8..4, proptest::collection::vec(-4i8..4, 5)), 2..80),
        min_leaf in 1usize..5,
        max_depth in 1usize..8,
        seed in any::<u64>(),
    ) {
        let targets: Vec<StructuredTarget> = rows.iter().map(|r| target(r.0)).collect();
        let feats = Table(rows.iter().map(|r| r.1.iter().map(|&v| v as f32).collect()).collect());
        let cfg = TreeConfig { max_depth, min_leaf, features_per_node: 3 };
        let tree = train_tree(&feats, &targets, &cfg, seed);
        check_structure(&tree, &cfg, rows.len());

        // Sample order does not matter.
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.reverse();
        let t2: Vec<StructuredTarget> = perm.iter().map(|&i| targets[i].clone()).collect();
        let f2 = Table(perm.iter().map(|&i| feats.0[i].clone()).collect());
        prop_assert_eq!(train_tree(&f2, &t2, &cfg, seed), tree);
    }
}
