#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use sitedge::descriptor::{DescriptorConfig, GmmConfig};
use sitedge::forest::{pixel_pairs, ForestConfig, SegPatch, TreeConfig, PAIR_TESTS, TARGET_PIXELS};
use sitedge::gating::GateConfig;
use sitedge::pipeline::{Corpus, PartitionSpec, TrainConfig};
use sitedge::raster::load_manifest;
use sitedge::synth::{generate, SynthSpec};

/// Small synthetic corpus (four classes, 96×96) written to `dir` and loaded.
pub fn tiny_corpus(dir: &Path, per_class: usize, seed: u64) -> Corpus {
    let spec = SynthSpec {
        images_per_class: per_class,
        width: 96,
        height: 96,
        seed,
        ..SynthSpec::default()
    };
    generate(&spec, dir).unwrap();
    Corpus::load(load_manifest(dir.join("manifest.tsv")).unwrap()).unwrap()
}

pub fn tiny_descriptor() -> DescriptorConfig {
    DescriptorConfig {
        pca_dim: 8,
        components: 4,
        max_samples: 4000,
        gmm: GmmConfig {
            max_iter: 30,
            ..GmmConfig::default()
        },
        ..DescriptorConfig::default()
    }
}

/// Cheap settings that still exercise every stage.
pub fn tiny_config(partition: PartitionSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        descriptor: tiny_descriptor(),
        partition,
        gate: GateConfig {
            lambdas: vec![1e-4, 1e-2],
            pos_freqs: vec![0.5],
            epochs: 3,
            ..GateConfig::default()
        },
        forest: ForestConfig {
            trees: 2,
            budget: 400,
            tree: TreeConfig {
                max_depth: 12,
                ..TreeConfig::default()
            },
            ..ForestConfig::default()
        },
        seed,
    }
}

/// Maximum bipartite matching size by Edmonds-Karp on the flow network
/// source → predicted pixel → ground-truth pixel (within `tol`) → sink.
pub fn max_flow_matching(pred: &[bool], gt: &[bool], w: usize, h: usize, tol: f64) -> usize {
    let ps: Vec<usize> = (0..w * h).filter(|&i| pred[i]).collect();
    let gs: Vec<usize> = (0..w * h).filter(|&i| gt[i]).collect();
    let n = ps.len() + gs.len() + 2;
    let (s, t) = (n - 2, n - 1);
    let mut cap = vec![vec![0i32; n]; n];
    for (a, &p) in ps.iter().enumerate() {
        cap[s][a] = 1;
        for (b, &g) in gs.iter().enumerate() {
            let dx = (p % w) as f64 - (g % w) as f64;
            let dy = (p / w) as f64 - (g / w) as f64;
            if dx * dx + dy * dy <= tol * tol {
                cap[a][ps.len() + b] = 1;
            }
        }
    }
    for b in 0..gs.len() {
        cap[ps.len() + b][t] = 1;
    }
    let mut flow = 0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[s] = s;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    q.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            return flow;
        }
        let mut v = t;
        while v != s {
            let u = prev[v];
            cap[u][v] -= 1;
            cap[v][u] += 1;
            v = u;
        }
        flow += 1;
    }
}

/// Split labels from explicit 0/1 pair vectors and a dense eigensolver, plus
/// the relative gap between the two largest covariance eigenvalues.
pub fn brute_force_split_label(segs: &[&SegPatch], node_seed: u64) -> Option<(Vec<bool>, f64)> {
    let pairs = pixel_pairs(node_seed);
    let n = segs.len();
    let rows: Vec<Vec<f64>> = segs
        .iter()
        .map(|s| {
            pairs
                .iter()
                .map(|&(a, b)| if s[a as usize] == s[b as usize] { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    if rows.iter().all(|r| r == &rows[0]) {
        return None;
    }
    let mut mean = vec![0.0; PAIR_TESTS];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, PAIR_TESTS, |i, j| rows[i][j] - mean[j]);
    // Dual form: the n×n Gram matrix shares the covariance's nonzero spectrum,
    // and sample i projects onto the top direction as √λ·u_i.
    let gram = &centred * centred.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvectors.column(order[0]);
    let second = if n > 1 { eig.eigenvalues[order[1]].max(0.0) } else { 0.0 };
    let gap = (eig.eigenvalues[order[0]] - second) / eig.eigenvalues[order[0]];
    let labels = (0..n).map(|i| top[i] >= 0.0).collect();
    Some((labels, gap))
}

/// Equal as partitions, i.e. equal or complementary.
pub fn same_partition(a: &[bool], b: &[bool]) -> bool {
    a == b || a.iter().zip(b).all(|(x, y)| x != y)
}

/// Segmentation patch with a straight boundary: vertical at column `c` when
/// `vertical`, else horizontal at row `c`.
pub fn line_patch(c: usize, vertical: bool) -> SegPatch {
    let mut s = [0u8; TARGET_PIXELS];
    for (i, v) in s.iter_mut().enumerate() {
        let (x, y) = (i % 16, i / 16);
        *v = if vertical { (x >= c) as u8 } else { (y >= c) as u8 };
    }
    s
}

/// Disc of radius `r` centred at (`cx`, `cy`) on a background.
pub fn disc_patch(cx: f64, cy: f64, r: f64) -> SegPatch {
    let mut s = [0u8; TARGET_PIXELS];
    for (i, v) in s.iter_mut().enumerate() {
        let (x, y) = ((i % 16) as f64, (i / 16) as f64);
        *v = ((x - cx).powi(2) + (y - cy).powi(2) <= r * r) as u8;
    }
    s
}
