//! Indexed max-heap over message residuals with O(log n) update-key.
//!
//! Every edge is present exactly once for the lifetime of the queue; updates
//! never insert or remove, they re-key in place. Ties are broken toward the
//! lowest edge id so replays are deterministic.

use crate::model::EdgeId;

#[derive(Debug, Clone)]
pub struct ResidualQueue {
    heap: Vec<EdgeId>,
    /// Position of each edge inside `heap`.
    pos: Vec<usize>,
    key: Vec<f64>,
}

impl ResidualQueue {
    pub fn new(keys: Vec<f64>) -> Self {
        let n = keys.len();
        let mut q = ResidualQueue {
            heap: (0..n).collect(),
            pos: (0..n).collect(),
            key: keys,
        };
        for i in (0..n / 2).rev() {
            q.sift_down(i);
        }
        q
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn key(&self, edge: EdgeId) -> f64 {
        self.key[edge]
    }

    /// Edge with the maximal residual (lowest id on ties).
    pub fn peek(&self) -> Option<(EdgeId, f64)> {
        self.heap.first().map(|&e| (e, self.key[e]))
    }

    /// Re-keys an edge, restoring the heap property.
    pub fn update(&mut self, edge: EdgeId, key: f64) {
        let old = self.key[edge];
        self.key[edge] = key;
        let i = self.pos[edge];
        if Self::beats(key, edge, old, edge) {
            self.sift_up(i);
        } else {
            self.sift_down(i);
        }
    }

    /// Max-heap order: higher key wins, lower edge id wins ties.
    fn beats(ka: f64, ea: EdgeId, kb: f64, eb: EdgeId) -> bool {
        ka > kb || (ka == kb && ea < eb)
    }

    fn better(&self, i: usize, j: usize) -> bool {
        let (a, b) = (self.heap[i], self.heap[j]);
        Self::beats(self.key[a], a, self.key[b], b)
    }

    fn swap(&mut self, i: usize, j: usize) {
        self.heap.swap(i, j);
        self.pos[self.heap[i]] = i;
        self.pos[self.heap[j]] = j;
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if self.better(i, parent) {
                self.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.heap.len();
        loop {
            let mut best = i;
            for child in [2 * i + 1, 2 * i + 2] {
                if child < n && self.better(child, best) {
                    best = child;
                }
            }
            if best == i {
                break;
            }
            self.swap(i, best);
            i = best;
        }
    }

    #[cfg(test)]
    fn check_invariants(&self) {
        for i in 1..self.heap.len() {
            let parent = (i - 1) / 2;
            assert!(!self.better(i, parent), "heap property violated at {i}");
        }
        for (e, &p) in self.pos.iter().enumerate() {
            assert_eq!(self.heap[p], e);
        }
    }
}
