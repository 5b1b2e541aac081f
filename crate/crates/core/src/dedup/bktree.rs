//! BK-tree over 64-bit hashes under Hamming distance.

use std::ops::ControlFlow;

use super::phash::{hamming, PHash};

#[derive(Debug)]
struct Node {
    hash: PHash,
    /// Payload indices sharing exactly this hash.
    items: Vec<usize>,
    children: Vec<(u32, usize)>,
}

#[derive(Debug, Default)]
pub struct BkTree {
    nodes: Vec<Node>,
    len: usize,
}

impl BkTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_hashes(hashes: impl IntoIterator<Item = PHash>) -> Self {
        let mut t = Self::new();
        for (i, h) in hashes.into_iter().enumerate() {
            t.insert(h, i);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, hash: PHash, item: usize) {
        self.len += 1;
        if self.nodes.is_empty() {
            self.nodes.push(Node { hash, items: vec![item], children: Vec::new() });
            return;
        }
        let mut cur = 0;
        loop {
            let d = hamming(self.nodes[cur].hash, hash);
            if d == 0 {
                self.nodes[cur].items.push(item);
                return;
            }
            match self.nodes[cur].children.iter().find(|(cd, _)| *cd == d) {
                Some(&(_, child)) => cur = child,
                None => {
                    let idx = self.nodes.len();
                    self.nodes.push(Node { hash, items: vec![item], children: Vec::new() });
                    self.nodes[cur].children.push((d, idx));
                    return;
                }
            }
        }
    }

    fn walk(&self, hash: PHash, max_distance: u32, mut f: impl FnMut(usize, u32) -> ControlFlow<()>) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let d = hamming(node.hash, hash);
            if d <= max_distance {
                for &i in &node.items {
                    if f(i, d).is_break() {
                        return;
                    }
                }
            }
            let lo = d.saturating_sub(max_distance);
            let hi = d + max_distance;
            stack.extend(
                node.children
                    .iter()
                    .filter(|(cd, _)| *cd >= lo && *cd <= hi)
                    .map(|&(_, c)| c),
            );
        }
    }

    /// Every stored `(item, distance)` within `max_distance` (inclusive) of
    /// `hash`, sorted by item.
    pub fn within(&self, hash: PHash, max_distance: u32) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        self.walk(hash, max_distance, |i, d| {
            out.push((i, d));
            ControlFlow::Continue(())
        });
        out.sort_unstable();
        out
    }

    pub fn any_within(&self, hash: PHash, max_distance: u32) -> bool {
        let mut found = false;
        self.walk(hash, max_distance, |_, _| {
            found = true;
            ControlFlow::Break(())
        });
        found
    }
}
