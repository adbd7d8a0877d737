//! Selective-search style proposals: over-segmentation followed by greedy
//! hierarchical grouping, emitting the bounding box of every region in the
//! merge tree.

use serde::{Deserialize, Serialize};

use super::segment::felzenszwalb_segment;
use super::{BoundingBox, ProposalSet};
use crate::frame::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectiveSearchParams {
    /// Segmentation scale `k`.
    pub k: f64,
    pub min_size: usize,
    /// Histogram bins per channel for colour similarity.
    pub color_bins: usize,
    pub color_weight: f64,
    pub size_weight: f64,
    pub fill_weight: f64,
}

impl Default for SelectiveSearchParams {
    fn default() -> Self {
        SelectiveSearchParams {
            k: 150.0,
            min_size: 20,
            color_bins: 25,
            color_weight: 1.0,
            size_weight: 1.0,
            fill_weight: 1.0,
        }
    }
}

struct Region {
    size: usize,
    bbox: BoundingBox,
    hist: Vec<f64>,
    neighbours: Vec<usize>,
}

fn similarity(a: &Region, b: &Region, image_size: f64, p: &SelectiveSearchParams) -> f64 {
    let color: f64 = a.hist.iter().zip(&b.hist).map(|(x, y)| x.min(*y)).sum();
    let joint = (a.size + b.size) as f64;
    let size = 1.0 - joint / image_size;
    let fill = 1.0 - (a.bbox.bounding_union(&b.bbox).area() as f64 - joint) / image_size;
    p.color_weight * color + p.size_weight * size + p.fill_weight * fill
}

/// Proposals for one frame, deduplicated and in canonical order.
pub fn selective_search(
    frame: &Frame,
    frame_id: usize,
    params: &SelectiveSearchParams,
) -> ProposalSet {
    let (w, h) = (frame.width(), frame.height());
    let seg = felzenszwalb_segment(frame, params.k, params.min_size);
    let bins = params.color_bins.max(1);
    let channels = frame.channels();

    let mut regions: Vec<Region> = (0..seg.count)
        .map(|_| Region {
            size: 0,
            bbox: BoundingBox {
                x_min: i32::MAX,
                y_min: i32::MAX,
                x_max: i32::MIN,
                y_max: i32::MIN,
            },
            hist: vec![0.0; bins * channels],
            neighbours: Vec::new(),
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let l = seg.label(x, y);
            let r = &mut regions[l];
            r.size += 1;
            r.bbox.x_min = r.bbox.x_min.min(x as i32);
            r.bbox.y_min = r.bbox.y_min.min(y as i32);
            r.bbox.x_max = r.bbox.x_max.max(x as i32 + 1);
            r.bbox.y_max = r.bbox.y_max.max(y as i32 + 1);
            for (c, &v) in frame.pixel(x, y).iter().enumerate() {
                let bin = (v as usize * bins / 256).min(bins - 1);
                r.hist[c * bins + bin] += 1.0;
            }
            let mut link = |other: usize| {
                if other != l {
                    regions[l].neighbours.push(other);
                    regions[other].neighbours.push(l);
                }
            };
            if x + 1 < w {
                link(seg.label(x + 1, y));
            }
            if y + 1 < h {
                link(seg.label(x, y + 1));
            }
        }
    }
    for r in &mut regions {
        let total = r.hist.iter().sum::<f64>();
        r.hist.iter_mut().for_each(|v| *v /= total);
        r.neighbours.sort_unstable();
        r.neighbours.dedup();
    }

    let image_size = (w * h) as f64;
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        for &j in r.neighbours.iter().filter(|&&j| j > i) {
            pairs.push((i, j, similarity(r, &regions[j], image_size, params)));
        }
    }

    let mut proposals: Vec<BoundingBox> = regions.iter().map(|r| r.bbox).collect();
    while !pairs.is_empty() {
        // highest similarity; ties go to the smallest (i, j)
        let mut best = 0;
        for (idx, p) in pairs.iter().enumerate().skip(1) {
            let b = &pairs[best];
            if p.2 > b.2 || (p.2 == b.2 && (p.0, p.1) < (b.0, b.1)) {
                best = idx;
            }
        }
        let (i, j, _) = pairs[best];
        let t = regions.len();
        let (ri, rj) = (&regions[i], &regions[j]);
        let size = ri.size + rj.size;
        let hist = ri
            .hist
            .iter()
            .zip(&rj.hist)
            .map(|(a, b)| (a * ri.size as f64 + b * rj.size as f64) / size as f64)
            .collect();
        let mut neighbours: Vec<usize> = ri
            .neighbours
            .iter()
            .chain(&rj.neighbours)
            .copied()
            .filter(|&n| n != i && n != j)
            .collect();
        neighbours.sort_unstable();
        neighbours.dedup();
        let merged = Region {
            size,
            bbox: ri.bbox.bounding_union(&rj.bbox),
            hist,
            neighbours,
        };

        pairs.retain(|p| p.0 != i && p.0 != j && p.1 != i && p.1 != j);
        for &n in &merged.neighbours {
            let r = &mut regions[n];
            r.neighbours.retain(|&m| m != i && m != j);
            r.neighbours.push(t);
            pairs.push((n, t, similarity(&regions[n], &merged, image_size, params)));
        }
        proposals.push(merged.bbox);
        regions.push(merged);
    }

    ProposalSet::new(proposals, frame_id, w, h)
}
