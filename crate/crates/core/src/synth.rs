//! Synthetic videos whose four classes factor into actor motion (circular or
//! linear) and static background texture (striped or checkered).
//!
//! The actor moves on a flat, static stage of fixed size that covers its
//! whole trajectory plus a margin, so the pixels in and around the actor box
//! (and the motion they produce) carry no texture information; the texture
//! fills the rest of the frame. Trajectories depend only on the seed and the motion
//! kind, so classes that share a motion produce identical actor crops.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::region::{format_detections, BoundingBox, Detection, DetectionClass};
use crate::runtime::VideoSample;
use crate::WmrRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub class_count: usize,
    pub frames_per_video: usize,
    pub size: usize,
    pub actor_size: usize,
    /// Flat border between the actor's trajectory and the texture.
    pub stage_margin: usize,
    pub noise_sigma: f64,
    pub circle_radius: f64,
    /// Frames per revolution of the circular motion.
    pub circle_period: f64,
    /// Pixels per frame of the linear motion.
    pub linear_speed: f64,
    /// Side of one stripe or checker cell.
    pub texture_period: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub fps: f64,
    /// Maximum per-axis offset of the simulated person detector's box.
    pub detector_jitter: i32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 4,
            frames_per_video: 16,
            size: 64,
            actor_size: 16,
            stage_margin: 8,
            noise_sigma: 5.0,
            circle_radius: 6.0,
            circle_period: 14.0,
            linear_speed: 1.2,
            texture_period: 4,
            train_videos: 200,
            test_videos: 100,
            fps: 30.0,
            detector_jitter: 2,
            seed: 0,
        }
    }
}

const ACTOR_LEVEL: f64 = 230.0;
const STAGE_LEVEL: f64 = 128.0;
const TEXTURE_LOW: f64 = 80.0;
const TEXTURE_HIGH: f64 = 176.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count != 4 {
            return Err(Error::config("the generator defines exactly 4 classes"));
        }
        if self.frames_per_video < 11 {
            return Err(Error::config("frames_per_video must be at least 11"));
        }
        if self.actor_size == 0 || self.texture_period == 0 {
            return Err(Error::config(
                "actor_size and texture_period must be positive",
            ));
        }
        if self.stage_size() > self.size {
            return Err(Error::config(format!(
                "stage of {} pixels does not fit a {}-pixel frame",
                self.stage_size(),
                self.size
            )));
        }
        let step = self.max_step();
        if !(step <= 3.0 + 1e-9) {
            return Err(Error::config(format!(
                "per-frame motion {step:.2} px exceeds 3 px"
            )));
        }
        if self.detector_jitter < 0 {
            return Err(Error::config("detector_jitter must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0 && self.fps > 0.0) {
            return Err(Error::config("noise_sigma must be >= 0 and fps > 0"));
        }
        Ok(())
    }

    /// Range of the actor's top-left corner along either axis.
    fn motion_extent(&self) -> usize {
        let linear = self.linear_speed * (self.frames_per_video - 1) as f64;
        (2.0 * self.circle_radius).max(linear).ceil() as usize
    }

    /// Side of the square stage.
    pub fn stage_size(&self) -> usize {
        self.actor_size + 2 * self.stage_margin + self.motion_extent()
    }

    fn max_step(&self) -> f64 {
        let chord = 2.0 * self.circle_radius * (TAU / self.circle_period / 2.0).sin();
        chord.max(self.linear_speed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Circular,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Striped,
    Checkered,
}

/// Class layout: 0 circular/striped, 1 circular/checkered, 2 linear/striped,
/// 3 linear/checkered.
pub fn class_factors(class_id: usize) -> (Motion, Texture) {
    let motion = if class_id / 2 == 0 {
        Motion::Circular
    } else {
        Motion::Linear
    };
    let texture = if class_id % 2 == 0 {
        Texture::Striped
    } else {
        Texture::Checkered
    };
    (motion, texture)
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Stage top-left corner and actor top-left corners for every frame.
fn trajectory(motion: Motion, cfg: &SynthConfig, seed: u64) -> ((i32, i32), Vec<(f64, f64)>) {
    let mut rng = WmrRng::seed_from_u64(stream_seed(seed, 1 + motion as u64));
    let free = (cfg.size - cfg.stage_size()) as i32;
    let stage = (rng.random_range(0..=free), rng.random_range(0..=free));
    let extent = cfg.motion_extent() as f64;
    let n = cfg.frames_per_video;
    let path = match motion {
        Motion::Circular => {
            let r = cfg.circle_radius;
            let cx = r + rng.random::<f64>() * (extent - 2.0 * r);
            let cy = r + rng.random::<f64>() * (extent - 2.0 * r);
            let phase = rng.random::<f64>() * TAU;
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let omega = dir * TAU / cfg.circle_period;
            (0..n)
                .map(|t| {
                    let a = phase + omega * t as f64;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect()
        }
        Motion::Linear => {
            let theta = rng.random::<f64>() * TAU;
            let (dx, dy) = (
                theta.cos() * cfg.linear_speed,
                theta.sin() * cfg.linear_speed,
            );
            let start = |d: f64, u: f64| {
                let span = (d * (n - 1) as f64).abs();
                let s = u * (extent - span).max(0.0);
                if d < 0.0 {
                    s + span
                } else {
                    s
                }
            };
            let (x0, y0) = (start(dx, rng.random()), start(dy, rng.random()));
            (0..n)
                .map(|t| (x0 + dx * t as f64, y0 + dy * t as f64))
                .collect()
        }
    };
    (stage, path)
}

fn texture_value(
    texture: Texture,
    x: usize,
    y: usize,
    period: usize,
    phase: (usize, usize),
) -> f64 {
    let cx = (x + phase.0) / period;
    let cy = (y + phase.1) / period;
    let on = match texture {
        Texture::Striped => cx % 2 == 0,
        Texture::Checkered => (cx + cy) % 2 == 0,
    };
    if on {
        TEXTURE_HIGH
    } else {
        TEXTURE_LOW
    }
}

/// Renders one video of `class_id` and its per-frame ground-truth actor box.
pub fn generate_video(
    class_id: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(VideoSample, Vec<BoundingBox>)> {
    cfg.validate()?;
    if class_id >= cfg.class_count {
        return Err(Error::input(format!(
            "class {class_id} out of range for {} classes",
            cfg.class_count
        )));
    }
    let (motion, texture) = class_factors(class_id);
    let (stage_origin, path) = trajectory(motion, cfg, seed);
    let mut tex_rng = WmrRng::seed_from_u64(stream_seed(seed, 10 + texture as u64));
    let phase = (
        tex_rng.random_range(0..2 * cfg.texture_period),
        tex_rng.random_range(0..2 * cfg.texture_period),
    );
    let mut noise_rng = WmrRng::seed_from_u64(stream_seed(seed, 20 + class_id as u64));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;

    let s = cfg.size;
    let a = cfg.actor_size as i32;
    let m = cfg.stage_margin as i32;
    let side = cfg.stage_size() as i32;
    let stage = BoundingBox::new(
        stage_origin.0,
        stage_origin.1,
        stage_origin.0 + side,
        stage_origin.1 + side,
    )?;
    let mut frames = Vec::with_capacity(path.len());
    let mut boxes = Vec::with_capacity(path.len());
    for &(fx, fy) in &path {
        let x0 = stage.x_min + m + fx.round() as i32;
        let y0 = stage.y_min + m + fy.round() as i32;
        let actor = BoundingBox::new(x0, y0, x0 + a, y0 + a)?;
        let mut data = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let (xi, yi) = (x as i32, y as i32);
                let inside = |b: &BoundingBox| {
                    xi >= b.x_min && xi < b.x_max && yi >= b.y_min && yi < b.y_max
                };
                let base = if inside(&actor) {
                    ACTOR_LEVEL
                } else if inside(&stage) {
                    STAGE_LEVEL
                } else {
                    texture_value(texture, x, y, cfg.texture_period, phase)
                };
                let n = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                data.push((base + n).round().clamp(0.0, 255.0) as u8);
            }
        }
        frames.push(Frame::gray(s, s, data)?);
        boxes.push(actor);
    }
    let video = VideoSample {
        frames,
        label: class_id,
        fps: cfg.fps,
        id: format!("c{class_id}_s{seed}"),
    };
    Ok((video, boxes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One video of a manifest. `path` is the frame directory, relative to the
/// manifest file; frames are `0000.pgm`, `0001.pgm`, … in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub split: Split,
    pub boxes: Vec<[i32; 5]>,
}

impl ManifestEntry {
    /// Ground-truth boxes in frame order.
    pub fn frame_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.boxes
            .iter()
            .map(|b| BoundingBox::new(b[1], b[2], b[3], b[4]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:04}.pgm")
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn video_dir(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Reads the frames of `entry`.
    pub fn load_video(&self, entry: &ManifestEntry, fps: f64) -> Result<VideoSample> {
        let dir = self.video_dir(entry);
        let frames = (0..entry.boxes.len())
            .map(|i| Frame::read_pnm(&dir.join(frame_file_name(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoSample {
            frames,
            label: entry.label,
            fps,
            id: entry.path.clone(),
        })
    }

    /// Checks structure, box validity, split disjointness and that every
    /// frame file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let loc = format!("entry {i} ({})", e.path);
            if !seen.insert(e.path.as_str()) {
                return Err(Error::parse(loc, "path listed more than once"));
            }
            for (j, b) in e.boxes.iter().enumerate() {
                if b[0] != j as i32 {
                    return Err(Error::parse(&loc, format!("box {j} names frame {}", b[0])));
                }
                BoundingBox::new(b[1], b[2], b[3], b[4])
                    .map_err(|err| Error::parse(&loc, format!("box {j}: {err}")))?;
            }
            let dir = self.video_dir(e);
            for j in 0..e.boxes.len() {
                let f = dir.join(frame_file_name(j));
                if !f.is_file() {
                    return Err(Error::MissingFile(f));
                }
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&manifest.entries)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Parses and validates a manifest; entry paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            format!("{}:{}:{}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let manifest = Manifest {
        entries,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Name of the per-video detection file written next to the frames.
pub const DETECTIONS_FILE: &str = "detections.txt";

/// Simulated person detector: one detection per frame, the ground-truth box
/// shifted by up to `jitter` pixels per axis and kept inside the frame.
pub fn simulated_detections(
    truth: &[BoundingBox],
    jitter: i32,
    seed: u64,
    width: usize,
    height: usize,
) -> BTreeMap<usize, Vec<Detection>> {
    let mut rng = WmrRng::seed_from_u64(stream_seed(seed, 30));
    let mut out = BTreeMap::new();
    for (i, b) in truth.iter().enumerate() {
        let dx = rng.random_range(-jitter..=jitter);
        let dy = rng.random_range(-jitter..=jitter);
        let shifted = b.translate(dx, dy);
        let bbox = BoundingBox::clamp(&shifted, width, height).unwrap_or(*b);
        let score = 0.9 + 0.01 * rng.random::<f64>();
        out.insert(
            i,
            vec![Detection {
                bbox,
                score: (score * 1e4).round() / 1e4,
                class_id: DetectionClass::Person,
            }],
        );
    }
    out
}

/// Seed of video `index` in a dataset generated from `seed`.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    stream_seed(seed, 1_000 + index as u64)
}

/// Generates the train and test videos under `dir` and writes
/// `dir/manifest.json`. Labels cycle through the classes.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let total = cfg.train_videos + cfg.test_videos;
    for i in 0..total {
        let (split, name) = if i < cfg.train_videos {
            (Split::Train, format!("train/{i:04}"))
        } else {
            (Split::Test, format!("test/{:04}", i - cfg.train_videos))
        };
        let label = i % cfg.class_count;
        let (video, boxes) = generate_video(label, cfg, video_seed(cfg.seed, i))?;
        let vdir = dir.join(&name);
        std::fs::create_dir_all(&vdir)?;
        for (j, f) in video.frames.iter().enumerate() {
            f.write_pnm(&vdir.join(frame_file_name(j)))?;
        }
        let dets = simulated_detections(
            &boxes,
            cfg.detector_jitter,
            video_seed(cfg.seed, i),
            cfg.size,
            cfg.size,
        );
        std::fs::write(vdir.join(DETECTIONS_FILE), format_detections(&dets))?;
        entries.push(ManifestEntry {
            path: name,
            label,
            split,
            boxes: boxes
                .iter()
                .enumerate()
                .map(|(j, b)| [j as i32, b.x_min, b.y_min, b.x_max, b.y_max])
                .collect(),
        });
    }
    let manifest = Manifest {
        entries,
        root: dir.to_path_buf(),
    };
    write_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_classes_share_actor_crops() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        for (a, b) in [(0, 1), (2, 3)] {
            let (va, ba) = generate_video(a, &cfg, 42).unwrap();
            let (vb, bb) = generate_video(b, &cfg, 42).unwrap();
            assert_eq!(ba, bb);
            for ((fa, fb), bx) in va.frames.iter().zip(&vb.frames).zip(&ba) {
                assert_eq!(fa.crop(bx).unwrap(), fb.crop(bx).unwrap());
                assert_ne!(fa, fb);
            }
        }
    }

    #[test]
    fn truth_box_is_the_actor() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        for class in 0..4 {
            let (v, boxes) = generate_video(class, &cfg, 3).unwrap();
            for (f, b) in v.frames.iter().zip(&boxes) {
                assert_eq!(b.width(), 16);
                let crop = f.crop(b).unwrap();
                assert!(crop.data().iter().all(|&p| p == ACTOR_LEVEL as u8));
                let grown =
                    BoundingBox::new(b.x_min - 1, b.y_min - 1, b.x_max + 1, b.y_max + 1).unwrap();
                let ring = f.crop(&grown).unwrap();
                assert!(ring.data().contains(&(STAGE_LEVEL as u8)));
            }
        }
    }

    #[test]
    fn deterministic_and_bounded_motion() {
        let cfg = SynthConfig::default();
        let (a, ba) = generate_video(2, &cfg, 9).unwrap();
        let (b, _) = generate_video(2, &cfg, 9).unwrap();
        assert_eq!(a, b);
        for w in ba.windows(2) {
            let (dx, dy) = (w[1].x_min - w[0].x_min, w[1].y_min - w[0].y_min);
            assert!(((dx * dx + dy * dy) as f64).sqrt() <= 4.0);
        }
    }

    #[test]
    fn invalid_class_is_rejected() {
        assert!(matches!(
            generate_video(4, &SynthConfig::default(), 0),
            Err(Error::Input(_))
        ));
    }
}
