//! Graph-based segmentation over the 4-connected pixel grid.

use crate::frame::Frame;

/// Partition of a frame into `count` labelled segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major segment label per pixel, in `0..count`.
    pub labels: Vec<usize>,
    pub count: usize,
}

impl LabelMap {
    #[inline]
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Largest internal edge weight of each component.
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots; the lower index becomes the new root.
    fn join(&mut self, a: usize, b: usize, weight: f64) {
        let (root, child) = if a < b { (a, b) } else { (b, a) };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        self.internal[root] = self.internal[root].max(self.internal[child]).max(weight);
    }
}

/// Segments `frame` with threshold function `k / |C|`, then merges
/// components smaller than `min_size` into a neighbour.
///
/// Edge weights are Euclidean distances between pixel channel values on the
/// 0–255 scale. Labels are numbered in row-major order of first appearance.
pub fn felzenszwalb_segment(frame: &Frame, k: f64, min_size: usize) -> LabelMap {
    assert!(k > 0.0, "segmentation scale k must be positive");
    let (w, h) = (frame.width(), frame.height());
    let dist = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (frame.pixel(a % w, a / w), frame.pixel(b % w, b / w));
        pa.iter()
            .zip(pb)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };

    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((dist(i, i + 1), i, i + 1));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i, i + w));
            }
        }
    }
    // stable sort keeps generation order among equal weights
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut set = DisjointSet::new(w * h);
    for &(weight, a, b) in &edges {
        let (ra, rb) = (set.find(a), set.find(b));
        if ra == rb {
            continue;
        }
        let ta = set.internal[ra] + k / set.size[ra] as f64;
        let tb = set.internal[rb] + k / set.size[rb] as f64;
        if weight <= ta.min(tb) {
            set.join(ra, rb, weight);
        }
    }
    for &(weight, a, b) in &edges {
        let (ra, rb) = (set.find(a), set.find(b));
        if ra != rb && (set.size[ra] < min_size || set.size[rb] < min_size) {
            set.join(ra, rb, weight);
        }
    }

    let mut remap = vec![usize::MAX; w * h];
    let mut labels = Vec::with_capacity(w * h);
    let mut count = 0;
    for i in 0..w * h {
        let r = set.find(i);
        if remap[r] == usize::MAX {
            remap[r] = count;
            count += 1;
        }
        labels.push(remap[r]);
    }
    LabelMap {
        width: w,
        height: h,
        labels,
        count,
    }
}
