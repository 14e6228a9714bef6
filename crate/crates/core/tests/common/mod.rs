//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use facaid_core::eval::LabeledTree;

/// Ordered tree over small integer labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct T {
    pub label: u8,
    pub kids: Vec<T>,
}

pub type Forest = Vec<T>;

fn forest_size(f: &[T]) -> usize {
    f.iter().map(|t| 1 + forest_size(&t.kids)).sum()
}

/// Every forest one unit-cost edit away from `list`. Inserts are only
/// generated while the result stays within `max_nodes`.
fn edits(list: &[T], room: bool, labels: u8) -> Vec<Forest> {
    let mut out = Vec::new();
    if room {
        // Insert a node adopting the consecutive siblings i..j.
        for i in 0..=list.len() {
            for j in i..=list.len() {
                for label in 0..labels {
                    let mut f = list[..i].to_vec();
                    f.push(T { label, kids: list[i..j].to_vec() });
                    f.extend_from_slice(&list[j..]);
                    out.push(f);
                }
            }
        }
    }
    for (k, node) in list.iter().enumerate() {
        for label in (0..labels).filter(|&l| l != node.label) {
            let mut f = list.to_vec();
            f[k].label = label;
            out.push(f);
        }
        // Delete: children take the node's place.
        let mut f = list[..k].to_vec();
        f.extend_from_slice(&node.kids);
        f.extend_from_slice(&list[k + 1..]);
        out.push(f);
        for kids in edits(&node.kids, room, labels) {
            let mut f = list.to_vec();
            f[k].kids = kids;
            out.push(f);
        }
    }
    out
}

/// The graph of all forests with at most `max_nodes` nodes whose edges are
/// single unit-cost edits; shortest paths are edit distances.
pub struct EditGraph {
    pub forests: Vec<Forest>,
    pub index: HashMap<Forest, usize>,
    adj: Vec<Vec<u32>>,
}

impl EditGraph {
    pub fn build(max_nodes: usize, labels: u8) -> Self {
        let mut forests: Vec<Forest> = vec![Vec::new()];
        let mut index = HashMap::from([(Vec::new(), 0usize)]);
        let mut adj: Vec<Vec<u32>> = Vec::new();
        let mut i = 0;
        while i < forests.len() {
            let f = forests[i].clone();
            let room = forest_size(&f) < max_nodes;
            let mut nb = Vec::new();
            for g in edits(&f, room, labels) {
                let id = *index.entry(g.clone()).or_insert_with(|| {
                    forests.push(g);
                    forests.len() - 1
                });
                nb.push(id as u32);
            }
            nb.sort_unstable();
            nb.dedup();
            adj.push(nb);
            i += 1;
        }
        Self { forests, index, adj }
    }

    /// Breadth-first distances from `src` to every forest.
    pub fn distances(&self, src: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.forests.len()];
        dist[src] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for &v in &self.adj[u] {
                if dist[v as usize] == u32::MAX {
                    dist[v as usize] = dist[u] + 1;
                    q.push_back(v as usize);
                }
            }
        }
        dist
    }

    /// Ids of the single-rooted forests, i.e. trees.
    pub fn trees(&self) -> Vec<usize> {
        (0..self.forests.len()).filter(|&i| self.forests[i].len() == 1).collect()
    }
}

pub fn to_labeled(t: &T) -> LabeledTree<u8> {
    LabeledTree::new(t.label, t.kids.iter().map(to_labeled).collect())
}
