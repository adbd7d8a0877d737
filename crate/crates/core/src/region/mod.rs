//! Box algebra, proposal filtering, flow-region transfer and detection
//! ingestion.
//!
//! Boxes use half-open integer pixel coordinates, so areas are exact
//! integers and IoU is a ratio of integers.

mod search;
mod segment;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;

pub use search::{selective_search, SelectiveSearchParams};
pub use segment::{felzenszwalb_segment, LabelMap};

/// Axis-aligned box covering `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BoundingBox {
    pub fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::input(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// The whole `width × height` frame.
    pub fn full(width: usize, height: usize) -> Self {
        BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: width as i32,
            y_max: height as i32,
        }
    }

    pub fn width(&self) -> i64 {
        (self.x_max - self.x_min) as i64
    }

    pub fn height(&self) -> i64 {
        (self.y_max - self.y_min) as i64
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> i64 {
        self.intersection(other).map_or(0, |b| b.area())
    }

    pub fn union_area(&self, other: &BoundingBox) -> i64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    /// Smallest box containing both.
    pub fn bounding_union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Clip to a `width × height` frame; `None` if nothing is left.
    pub fn clamp(&self, width: usize, height: usize) -> Option<BoundingBox> {
        self.intersection(&BoundingBox::full(width, height))
    }

    pub fn translate(&self, dx: i32, dy: i32) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Canonical proposal order: area descending, then `x_min`, `y_min`.
    fn proposal_order(&self, other: &BoundingBox) -> std::cmp::Ordering {
        other
            .area()
            .cmp(&self.area())
            .then(self.x_min.cmp(&other.x_min))
            .then(self.y_min.cmp(&other.y_min))
            .then(self.x_max.cmp(&other.x_max))
            .then(self.y_max.cmp(&other.y_max))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Deduplicated, canonically ordered boxes proposed for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalSet {
    boxes: Vec<BoundingBox>,
    pub frame_id: usize,
    pub width: usize,
    pub height: usize,
}

impl ProposalSet {
    pub fn new(boxes: Vec<BoundingBox>, frame_id: usize, width: usize, height: usize) -> Self {
        ProposalSet {
            boxes: canonical(boxes),
            frame_id,
            width,
            height,
        }
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn canonical(mut boxes: Vec<BoundingBox>) -> Vec<BoundingBox> {
    boxes.sort_by(|a, b| a.proposal_order(b));
    boxes.dedup();
    boxes
}

/// Primary region plus the context regions retained for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub primary: BoundingBox,
    pub secondary: Vec<BoundingBox>,
    pub frame_id: usize,
}

/// IoU band `[l, u]` and cap for secondary regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalFilterConfig {
    pub l: f64,
    pub u: f64,
    pub max_secondary: usize,
}

impl Default for ProposalFilterConfig {
    fn default() -> Self {
        ProposalFilterConfig {
            l: 0.1,
            u: 0.9,
            max_secondary: 10,
        }
    }
}

impl ProposalFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.l && self.l <= self.u && self.u <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= l <= u <= 1, got l={} u={}",
                self.l, self.u
            )));
        }
        if self.max_secondary == 0 {
            return Err(Error::config("max_secondary must be positive"));
        }
        Ok(())
    }
}

/// Keeps the proposals whose IoU with `primary` lies in the closed band
/// `[l, u]`, best IoU first, at most `max_secondary` of them. When nothing
/// survives the whole frame becomes the single secondary region.
pub fn filter_secondary(
    proposals: &ProposalSet,
    primary: &BoundingBox,
    cfg: &ProposalFilterConfig,
) -> RegionAnnotation {
    let mut kept: Vec<(f64, BoundingBox)> = proposals
        .boxes()
        .iter()
        .map(|b| (iou(b, primary), *b))
        .filter(|(v, _)| *v >= cfg.l && *v <= cfg.u)
        .collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.proposal_order(&b.1)));
    kept.truncate(cfg.max_secondary);
    let mut secondary: Vec<BoundingBox> = kept.into_iter().map(|(_, b)| b).collect();
    if secondary.is_empty() {
        secondary.push(BoundingBox::full(proposals.width, proposals.height));
    }
    RegionAnnotation {
        primary: *primary,
        secondary,
        frame_id: proposals.frame_id,
    }
}

/// Secondary regions of the flow field between two consecutive frames:
/// the set union of both frames' secondary lists, canonically ordered.
pub fn flow_secondary_regions(
    current: &RegionAnnotation,
    next: &RegionAnnotation,
) -> Vec<BoundingBox> {
    let mut all = current.secondary.clone();
    all.extend_from_slice(&next.secondary);
    canonical(all)
}

/// Primary region of a flow field from the two RGB primaries: their
/// bounding union.
pub fn flow_primary_from_rgb(current: &BoundingBox, next: &BoundingBox) -> BoundingBox {
    current.bounding_union(next)
}

/// `window_w × window_h` window with the largest mean flow magnitude.
pub fn flow_primary_max_magnitude(
    flow: &FlowField,
    window_w: usize,
    window_h: usize,
) -> Result<BoundingBox> {
    max_mean_window(
        &flow.magnitude(),
        flow.width(),
        flow.height(),
        window_w,
        window_h,
    )
}

/// Exhaustive window search over a scalar map using an integral image.
/// Ties (within rounding of the integral sums) go to the smallest `(y, x)`.
pub fn max_mean_window(
    values: &[f64],
    width: usize,
    height: usize,
    window_w: usize,
    window_h: usize,
) -> Result<BoundingBox> {
    if window_w == 0 || window_h == 0 || window_w > width || window_h > height {
        return Err(Error::config(format!(
            "window {window_w}×{window_h} does not fit a {width}×{height} field"
        )));
    }
    debug_assert_eq!(values.len(), width * height);
    let stride = width + 1;
    let mut integral = vec![0.0f64; (height + 1) * stride];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += values[y * width + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let total = integral[height * stride + width].abs();
    let tol = 1e-12 * total.max(1.0);
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for y in 0..=height - window_h {
        for x in 0..=width - window_w {
            let s = integral[(y + window_h) * stride + x + window_w]
                - integral[y * stride + x + window_w]
                - integral[(y + window_h) * stride + x]
                + integral[y * stride + x];
            if s > best.0 + tol {
                best = (s, x, y);
            }
        }
    }
    let (_, x, y) = best;
    BoundingBox::new(
        x as i32,
        y as i32,
        (x + window_w) as i32,
        (y + window_h) as i32,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionClass {
    Background,
    Person,
}

/// A scored box from an external person detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: DetectionClass,
}

/// Highest-scoring person detection; ties go to the larger box, then to the
/// earlier entry.
pub fn select_primary(detections: &[Detection]) -> Result<BoundingBox> {
    let mut best: Option<&Detection> = None;
    for d in detections
        .iter()
        .filter(|d| d.class_id == DetectionClass::Person)
    {
        best = match best {
            None => Some(d),
            Some(b)
                if d.score > b.score || (d.score == b.score && d.bbox.area() > b.bbox.area()) =>
            {
                Some(d)
            }
            keep => keep,
        };
    }
    best.map(|d| d.bbox)
        .ok_or_else(|| Error::input("no primary: no person detection"))
}

/// [`select_primary`] with the whole-frame fallback.
pub fn primary_or_frame(detections: &[Detection], width: usize, height: usize) -> BoundingBox {
    select_primary(detections).unwrap_or_else(|_| BoundingBox::full(width, height))
}

fn parse_fields<'a, const N: usize>(
    line: &'a str,
    lineno: usize,
    what: &str,
) -> Result<[&'a str; N]> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    fields.try_into().map_err(|f: Vec<&str>| {
        Error::parse(
            format!("line {lineno}"),
            format!("{what} needs {N} fields, found {}", f.len()),
        )
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, lineno: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(format!("line {lineno}"), format!("bad {what} {s:?}")))
}

fn parse_box(f: &[&str], lineno: usize) -> Result<BoundingBox> {
    let c: Vec<i32> = f
        .iter()
        .map(|s| parse_num(s, lineno, "coordinate"))
        .collect::<Result<_>>()?;
    BoundingBox::new(c[0], c[1], c[2], c[3])
        .map_err(|e| Error::parse(format!("line {lineno}"), e.to_string()))
}

fn check_frame(frame_id: usize, known_frames: usize, lineno: usize) -> Result<()> {
    if frame_id >= known_frames {
        return Err(Error::parse(
            format!("line {lineno}"),
            format!("unknown frame_id {frame_id} (video has {known_frames} frames)"),
        ));
    }
    Ok(())
}

/// Parses `frame_id x_min y_min x_max y_max score` lines. Blank lines are
/// skipped; every detection is a person detection.
pub fn parse_detections(
    text: &str,
    known_frames: usize,
) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let mut out: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields::<6>(line, lineno, "detection")?;
        let frame_id: usize = parse_num(f[0], lineno, "frame_id")?;
        check_frame(frame_id, known_frames, lineno)?;
        let bbox = parse_box(&f[1..5], lineno)?;
        let score: f64 = parse_num(f[5], lineno, "score")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::parse(
                format!("line {lineno}"),
                format!("score {score} outside [0,1]"),
            ));
        }
        out.entry(frame_id).or_default().push(Detection {
            bbox,
            score,
            class_id: DetectionClass::Person,
        });
    }
    Ok(out)
}

pub fn load_detections(
    path: &Path,
    known_frames: usize,
) -> Result<BTreeMap<usize, Vec<Detection>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_detections(&fs::read_to_string(path)?, known_frames).map_err(|e| match e {
        Error::Parse { location, message } => {
            Error::parse(format!("{}:{location}", path.display()), message)
        }
        other => other,
    })
}

pub fn format_detections(detections: &BTreeMap<usize, Vec<Detection>>) -> String {
    let mut out = String::new();
    for (frame, list) in detections {
        for d in list {
            let b = d.bbox;
            out.push_str(&format!(
                "{frame} {} {} {} {} {}\n",
                b.x_min, b.y_min, b.x_max, b.y_max, d.score
            ));
        }
    }
    out
}

/// Proposal dump: one `frame_id x_min y_min x_max y_max` line per box.
pub fn format_proposals<'a>(sets: impl IntoIterator<Item = (usize, &'a [BoundingBox])>) -> String {
    let mut out = String::new();
    for (frame, boxes) in sets {
        for b in boxes {
            out.push_str(&format!(
                "{frame} {} {} {} {}\n",
                b.x_min, b.y_min, b.x_max, b.y_max
            ));
        }
    }
    out
}

pub fn parse_proposals(text: &str) -> Result<BTreeMap<usize, Vec<BoundingBox>>> {
    let mut out: BTreeMap<usize, Vec<BoundingBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields::<5>(line, lineno, "proposal")?;
        let frame_id: usize = parse_num(f[0], lineno, "frame_id")?;
        out.entry(frame_id)
            .or_default()
            .push(parse_box(&f[1..], lineno)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: i32, y0: i32, x1: i32, y1: i32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bbox: BoundingBox, score: f64) -> Detection {
        Detection {
            bbox,
            score,
            class_id: DetectionClass::Person,
        }
    }

    #[test]
    fn iou_examples() {
        let a = b(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(10, 0, 20, 10)), 0.0);
        assert_eq!(iou(&a, &b(5, 5, 15, 15)), 25.0 / 175.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(3, 0, 3, 5).is_err());
        assert!(BoundingBox::new(0, 5, 3, 4).is_err());
    }

    #[test]
    fn proposal_set_is_canonical() {
        let set = ProposalSet::new(
            vec![b(0, 0, 2, 2), b(1, 1, 9, 9), b(0, 0, 2, 2), b(0, 0, 8, 8)],
            0,
            10,
            10,
        );
        assert_eq!(set.boxes(), &[b(0, 0, 8, 8), b(1, 1, 9, 9), b(0, 0, 2, 2)]);
    }

    #[test]
    fn band_filter_keeps_closed_interval() {
        // widths chosen so IoU with the 100×10 primary is exactly w / 100
        let primary = b(0, 0, 100, 10);
        let cands: Vec<_> = [5, 10, 50, 90, 95]
            .iter()
            .map(|&w| b(0, 0, w, 10))
            .collect();
        let set = ProposalSet::new(cands, 3, 100, 10);
        let ann = filter_secondary(&set, &primary, &ProposalFilterConfig::default());
        assert_eq!(
            ann.secondary,
            vec![b(0, 0, 90, 10), b(0, 0, 50, 10), b(0, 0, 10, 10)]
        );
        assert_eq!(ann.frame_id, 3);

        let all = ProposalFilterConfig {
            l: 0.0,
            u: 1.0,
            max_secondary: 10,
        };
        assert_eq!(filter_secondary(&set, &primary, &all).secondary.len(), 5);
        let capped = ProposalFilterConfig {
            max_secondary: 2,
            ..all
        };
        assert_eq!(
            filter_secondary(&set, &primary, &capped).secondary,
            vec![b(0, 0, 95, 10), b(0, 0, 90, 10)]
        );
    }

    #[test]
    fn empty_band_falls_back_to_frame() {
        let set = ProposalSet::new(vec![b(50, 50, 60, 60)], 0, 64, 64);
        let ann = filter_secondary(&set, &b(0, 0, 10, 10), &ProposalFilterConfig::default());
        assert_eq!(ann.secondary, vec![BoundingBox::full(64, 64)]);
    }

    #[test]
    fn flow_secondary_union() {
        let ann = |s: Vec<BoundingBox>| RegionAnnotation {
            primary: b(0, 0, 1, 1),
            secondary: s,
            frame_id: 0,
        };
        let x = ann(vec![b(0, 0, 4, 4), b(1, 1, 3, 3), b(2, 2, 8, 8)]);
        assert_eq!(flow_secondary_regions(&x, &x).len(), 3);
        let y = ann(vec![b(10, 10, 12, 12), b(20, 20, 21, 21)]);
        assert_eq!(flow_secondary_regions(&x, &y).len(), 5);
        let z = ann(vec![b(1, 1, 3, 3), b(30, 30, 31, 31)]);
        assert_eq!(flow_secondary_regions(&x, &z).len(), 4);
        assert_eq!(
            flow_secondary_regions(&x, &z),
            flow_secondary_regions(&z, &x)
        );
    }

    #[test]
    fn flow_primary_union() {
        let a = b(0, 0, 4, 4);
        assert_eq!(flow_primary_from_rgb(&a, &a), a);
        assert_eq!(flow_primary_from_rgb(&a, &b(6, 6, 8, 8)), b(0, 0, 8, 8));
        assert_eq!(
            flow_primary_from_rgb(&b(0, 0, 10, 10), &b(2, 2, 5, 5)),
            b(0, 0, 10, 10)
        );
    }

    #[test]
    fn window_search() {
        let (w, h) = (10, 8);
        let mut m = vec![0.0; w * h];
        for y in 3..6 {
            for x in 4..7 {
                m[y * w + x] = 1.0;
            }
        }
        assert_eq!(max_mean_window(&m, w, h, 3, 3).unwrap(), b(4, 3, 7, 6));
        let c = vec![0.7; w * h];
        assert_eq!(max_mean_window(&c, w, h, 3, 2).unwrap(), b(0, 0, 3, 2));
        assert!(max_mean_window(&c, w, h, 11, 2).is_err());
    }

    #[test]
    fn primary_selection() {
        let one = [det(b(0, 0, 5, 5), 0.3)];
        assert_eq!(select_primary(&one).unwrap(), b(0, 0, 5, 5));
        let two = [det(b(0, 0, 5, 5), 0.7), det(b(1, 1, 4, 4), 0.9)];
        assert_eq!(select_primary(&two).unwrap(), b(1, 1, 4, 4));
        let tie = [det(b(0, 0, 10, 10), 0.5), det(b(0, 0, 20, 20), 0.5)];
        assert_eq!(select_primary(&tie).unwrap(), b(0, 0, 20, 20));
        let same = [det(b(0, 0, 10, 10), 0.5), det(b(5, 5, 15, 15), 0.5)];
        assert_eq!(select_primary(&same).unwrap(), b(0, 0, 10, 10));
        assert!(select_primary(&[]).is_err());
        let bg = [Detection {
            class_id: DetectionClass::Background,
            ..det(b(0, 0, 2, 2), 1.0)
        }];
        assert!(select_primary(&bg).is_err());
        assert_eq!(primary_or_frame(&bg, 8, 6), BoundingBox::full(8, 6));
    }

    #[test]
    fn detection_file() {
        assert!(parse_detections("", 5).unwrap().is_empty());
        let m = parse_detections("2 1 2 10 12 0.75\n", 5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[&2][0].bbox, b(1, 2, 10, 12));
        let err = parse_detections("0 1 1 2 2 0.5\n1 5 0 5 4 0.5\n", 5).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 2"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_detections("9 0 0 1 1 0.5\n", 5).is_err());
        assert!(parse_detections("0 0 0 1 1 1.5\n", 5).is_err());
        assert!(parse_detections("0 0 0 1 1\n", 5).is_err());
    }

    #[test]
    fn proposal_dump_round_trip() {
        let boxes = vec![b(0, 0, 4, 4), b(1, 2, 3, 4)];
        let text = format_proposals([(7, boxes.as_slice())]);
        assert_eq!(parse_proposals(&text).unwrap()[&7], boxes);
    }
}
