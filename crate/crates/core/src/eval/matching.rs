use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BoundaryMap;

/// Above this many pixels on either side the greedy matcher is used.
pub const EXACT_LIMIT: usize = 2500;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchMethod {
    #[default]
    Auto,
    Exact,
    Greedy,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// (predicted pixel, ground-truth pixel) as row-major indices.
    pub pairs: Vec<(usize, usize)>,
}

/// Bipartite graph between predicted (left) and ground-truth (right) pixels
/// within the tolerance radius, neighbours sorted by (distance, index).
struct Graph {
    left: Vec<usize>,
    right: Vec<usize>,
    adj: Vec<Vec<(u32, u32)>>,
}

fn build_graph(pred: &[bool], gt: &[bool], w: usize, h: usize, tol: f64) -> Graph {
    let left: Vec<usize> = (0..w * h).filter(|&i| pred[i]).collect();
    let right: Vec<usize> = (0..w * h).filter(|&i| gt[i]).collect();
    let mut right_id = vec![u32::MAX; w * h];
    for (k, &i) in right.iter().enumerate() {
        right_id[i] = k as u32;
    }
    let r = tol.floor() as isize;
    let t2 = tol * tol;
    let mut offsets: Vec<(u32, isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= t2 {
                offsets.push(((dx * dx + dy * dy) as u32, dx, dy));
            }
        }
    }
    let adj = left
        .iter()
        .map(|&p| {
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            let mut n: Vec<(u32, u32)> = offsets
                .iter()
                .filter_map(|&(d2, dx, dy)| {
                    let (x, y) = (px + dx, py + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        return None;
                    }
                    let id = right_id[y as usize * w + x as usize];
                    (id != u32::MAX).then_some((d2, id))
                })
                .collect();
            n.sort_unstable();
            n
        })
        .collect();
    Graph { left, right, adj }
}

const FREE: u32 = u32::MAX;

/// Hopcroft-Karp maximum-cardinality matching.
fn hopcroft_karp(g: &Graph) -> Vec<u32> {
    let (nl, nr) = (g.left.len(), g.right.len());
    let mut match_l = vec![FREE; nl];
    let mut match_r = vec![FREE; nr];
    let mut dist = vec![u32::MAX; nl];
    loop {
        // Layered BFS from free left vertices.
        let mut q = VecDeque::new();
        for u in 0..nl {
            if match_l[u] == FREE {
                dist[u] = 0;
                q.push_back(u);
            } else {
                dist[u] = u32::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = q.pop_front() {
            for &(_, v) in &g.adj[u] {
                let m = match_r[v as usize];
                if m == FREE {
                    found = true;
                } else if dist[m as usize] == u32::MAX {
                    dist[m as usize] = dist[u] + 1;
                    q.push_back(m as usize);
                }
            }
        }
        if !found {
            break;
        }
        // Iterative DFS along the layers.
        let mut it = vec![0usize; nl];
        for root in 0..nl {
            if match_l[root] != FREE {
                continue;
            }
            let mut stack: Vec<usize> = vec![root];
            while let Some(&u) = stack.last() {
                if it[u] >= g.adj[u].len() {
                    dist[u] = u32::MAX;
                    stack.pop();
                    continue;
                }
                let v = g.adj[u][it[u]].1 as usize;
                it[u] += 1;
                let m = match_r[v];
                if m == FREE {
                    // Augment along the stack.
                    let mut v = v;
                    for &x in stack.iter().rev() {
                        let prev = match_l[x];
                        match_l[x] = v as u32;
                        match_r[v] = x as u32;
                        if prev == FREE {
                            break;
                        }
                        v = prev as usize;
                    }
                    break;
                } else if dist[m as usize] == dist[u] + 1 {
                    stack.push(m as usize);
                }
            }
        }
    }
    match_l
}

/// Longest augmenting path tried after the greedy pass, in matched edges.
const AUGMENT_DEPTH: usize = 12;

/// Distance-sorted greedy matching, then breadth-first augmenting paths of
/// bounded length until none remain.
fn greedy(g: &Graph) -> Vec<u32> {
    let (nl, nr) = (g.left.len(), g.right.len());
    let mut edges: Vec<(u32, u32, u32)> = g
        .adj
        .iter()
        .enumerate()
        .flat_map(|(u, n)| n.iter().map(move |&(d, v)| (d, u as u32, v)))
        .collect();
    edges.sort_unstable();
    let mut match_l = vec![FREE; nl];
    let mut match_r = vec![FREE; nr];
    for (_, u, v) in edges {
        if match_l[u as usize] == FREE && match_r[v as usize] == FREE {
            match_l[u as usize] = v;
            match_r[v as usize] = u;
        }
    }
    let mut search = Search {
        seen: vec![0; nr],
        stamp: 0,
        via: vec![FREE; nr],
        queue: Vec::new(),
    };
    loop {
        let mut improved = false;
        for u in 0..nl {
            if match_l[u] == FREE && search.augment(g, u, &mut match_l, &mut match_r) {
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    match_l
}

struct Search {
    seen: Vec<u32>,
    stamp: u32,
    /// Left vertex from which each right vertex was reached.
    via: Vec<u32>,
    queue: Vec<(u32, usize)>,
}

impl Search {
    /// Shortest augmenting path from free left vertex `root`, if one exists
    /// within [`AUGMENT_DEPTH`] matched edges; applies it.
    fn augment(&mut self, g: &Graph, root: usize, match_l: &mut [u32], match_r: &mut [u32]) -> bool {
        self.stamp += 1;
        self.queue.clear();
        self.queue.push((root as u32, 0));
        let mut head = 0;
        while head < self.queue.len() {
            let (x, depth) = self.queue[head];
            head += 1;
            for &(_, v) in &g.adj[x as usize] {
                let vi = v as usize;
                if self.seen[vi] == self.stamp {
                    continue;
                }
                self.seen[vi] = self.stamp;
                self.via[vi] = x;
                if match_r[vi] == FREE {
                    // Flip the path back to the root.
                    let mut v = v;
                    loop {
                        let u = self.via[v as usize];
                        let next = match_l[u as usize];
                        match_l[u as usize] = v;
                        match_r[v as usize] = u;
                        if u as usize == root {
                            return true;
                        }
                        v = next;
                    }
                }
                if depth < AUGMENT_DEPTH {
                    self.queue.push((match_r[vi], depth + 1));
                }
            }
        }
        false
    }
}

/// One-to-one matching of predicted to ground-truth pixels within `tol`.
pub fn match_masks(pred: &[bool], gt: &[bool], w: usize, h: usize, tol: f64, method: MatchMethod) -> Result<MatchResult> {
    if pred.len() != w * h || gt.len() != w * h {
        return Err(Error::dims(w * h, format!("{} / {}", pred.len(), gt.len())));
    }
    let g = build_graph(pred, gt, w, h, tol);
    let exact = match method {
        MatchMethod::Exact => true,
        MatchMethod::Greedy => false,
        MatchMethod::Auto => g.left.len().max(g.right.len()) <= EXACT_LIMIT,
    };
    let m = if exact { hopcroft_karp(&g) } else { greedy(&g) };
    let pairs: Vec<(usize, usize)> = m
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != FREE)
        .map(|(u, &v)| (g.left[u], g.right[v as usize]))
        .collect();
    let tp = pairs.len();
    Ok(MatchResult {
        true_positives: tp,
        false_positives: g.left.len() - tp,
        false_negatives: g.right.len() - tp,
        pairs,
    })
}

/// [`match_masks`] on binary boundary maps.
pub fn match_boundaries(pred: &BoundaryMap, gt: &BoundaryMap, tol: f64, method: MatchMethod) -> Result<MatchResult> {
    if !pred.same_shape(gt) {
        return Err(Error::dims(
            format!("{}x{}", gt.width(), gt.height()),
            format!("{}x{}", pred.width(), pred.height()),
        ));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::InvalidArgument("matching needs binary maps".into()));
    }
    let p: Vec<bool> = pred.values().iter().map(|&v| v > 0.5).collect();
    let g: Vec<bool> = gt.values().iter().map(|&v| v > 0.5).collect();
    match_masks(&p, &g, pred.width(), pred.height(), tol, method)
}
