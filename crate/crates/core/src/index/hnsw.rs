//! Hierarchical navigable small-world graph over unit vectors.
//!
//! Layer assignment is `floor(-ln(U) / ln(M))`. Upper layers keep at most `M`
//! links per node, layer 0 keeps `2M`. Neighbor selection uses the diversity
//! heuristic, topping up with pruned candidates when it yields fewer than
//! the limit.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HnswParams;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    // higher similarity is "greater"; lower node id wins ties
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.fill(0);
            self.epoch = 1;
        }
    }

    /// True if `i` was not yet visited in this epoch.
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HnswGraph {
    pub(crate) params: HnswParams,
    pub(crate) entry: Option<u32>,
    pub(crate) max_level: usize,
    /// `links[node][layer]` for `layer in 0..=level(node)`.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct View<'a> {
    data: &'a [f32],
    dim: usize,
}

impl View<'_> {
    fn row(&self, i: u32) -> &[f32] {
        let i = i as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn sim(&self, q: &[f32], i: u32) -> f32 {
        dot(q, self.row(i))
    }
}

impl HnswGraph {
    pub(crate) fn build(data: &[f32], dim: usize, params: HnswParams) -> Self {
        let n = if dim == 0 { 0 } else { data.len() / dim };
        let mut g = HnswGraph {
            params,
            entry: None,
            max_level: 0,
            links: Vec::with_capacity(n),
        };
        let view = View { data, dim };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let mut visited = Visited::new(n);
        for i in 0..n as u32 {
            let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            let level = (-u.ln() * ml).floor() as usize;
            g.insert(&view, i, level, &mut visited);
        }
        g
    }

    pub(crate) fn edge_count(&self) -> u64 {
        self.links
            .iter()
            .flat_map(|layers| layers.iter())
            .map(|l| l.len() as u64)
            .sum()
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, view: &View, node: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return;
        };
        let q = view.row(node).to_vec();
        let top = self.max_level;
        for layer in (level + 1..=top).rev() {
            ep = self.greedy(view, &q, ep, layer);
        }
        let mut eps = vec![Scored {
            sim: view.sim(&q, ep),
            node: ep,
        }];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(view, &q, &eps, self.params.ef_construction, layer, visited);
            let limit = self.max_links(layer);
            let chosen = select_neighbors(view, &found, limit);
            self.links[node as usize][layer] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                self.connect(view, s.node, node, layer);
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(node);
            self.max_level = level;
        }
    }

    /// Adds `to` to `from`'s layer list, pruning if over the limit.
    fn connect(&mut self, view: &View, from: u32, to: u32, layer: usize) {
        let limit = self.max_links(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= limit {
            return;
        }
        let base = view.row(from);
        let mut cands: Vec<Scored> = list
            .iter()
            .map(|&c| Scored {
                sim: view.sim(base, c),
                node: c,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = select_neighbors(view, &cands, limit);
        self.links[from as usize][layer] = kept.into_iter().map(|s| s.node).collect();
    }

    fn greedy(&self, view: &View, q: &[f32], mut ep: u32, layer: usize) -> u32 {
        let mut best = view.sim(q, ep);
        loop {
            let mut moved = false;
            for &nb in &self.links[ep as usize][layer] {
                let s = view.sim(q, nb);
                if s > best || (s == best && nb < ep) {
                    best = s;
                    ep = nb;
                    moved = true;
                }
            }
            if !moved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        view: &View,
        q: &[f32],
        entry: &[Scored],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        visited.reset();
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.node) {
                candidates.push(e);
                results.push(Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && c < w {
                    break;
                }
            }
            for &nb in &self.links[c.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = Scored {
                    sim: view.sim(q, nb),
                    node: nb,
                };
                if results.len() < ef || s > results.peek().unwrap().0 {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Candidate node indices for `q`, best first, at least `k` when available.
    pub(crate) fn search(&self, data: &[f32], dim: usize, q: &[f32], k: usize) -> Vec<usize> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        let view = View { data, dim };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(&view, q, ep, layer);
        }
        let mut visited = Visited::new(self.links.len());
        let entry = [Scored {
            sim: view.sim(q, ep),
            node: ep,
        }];
        self.search_layer(&view, q, &entry, self.params.ef_search.max(k), 0, &mut visited)
            .into_iter()
            .map(|s| s.node as usize)
            .collect()
    }
}

/// Diversity heuristic over candidates sorted best-first: keep a candidate
/// only if it is closer to the base than to every neighbor kept so far.
fn select_neighbors(view: &View, sorted: &[Scored], limit: usize) -> Vec<Scored> {
    let mut kept: Vec<Scored> = Vec::with_capacity(limit);
    let mut pruned: Vec<Scored> = Vec::new();
    for &c in sorted {
        if kept.len() >= limit {
            break;
        }
        let row = view.row(c.node);
        if kept.iter().all(|k| view.sim(row, k.node) < c.sim) {
            kept.push(c);
        } else {
            pruned.push(c);
        }
    }
    for c in pruned {
        if kept.len() >= limit {
            break;
        }
        kept.push(c);
    }
    kept
}
