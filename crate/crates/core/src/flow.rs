//! Dense Horn–Schunck optical flow, stacked flow inputs and the binary flow
//! cache format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flow cache magic bytes.
pub const FLOW_MAGIC: &[u8; 4] = b"WFLO";

/// Per-pixel displacement `(u, v)` from frame `frame_index` to the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub frame_index: usize,
}

impl FlowField {
    pub fn new(
        width: usize,
        height: usize,
        u: Vec<f32>,
        v: Vec<f32>,
        frame_index: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 || u.len() != width * height || v.len() != width * height {
            return Err(Error::input(format!(
                "flow planes do not match {width}×{height}"
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite flow"));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
            frame_index,
        })
    }

    pub fn zeros(width: usize, height: usize, frame_index: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            frame_index,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `sqrt(u² + v²)` per pixel.
    pub fn magnitude(&self) -> Vec<f64> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&a, &b)| (a as f64).hypot(b as f64))
            .collect()
    }

    /// Cache encoding: magic, width and height as u32 LE, then the u and v
    /// planes as row-major f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for x in self.u.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], frame_index: usize) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
            return Err(Error::parse("flow cache", "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (w, h) = (word(4), word(8));
        let n = w * h;
        if bytes.len() != 12 + 8 * n {
            return Err(Error::parse(
                "flow cache",
                format!(
                    "expected {} bytes for {w}×{h}, found {}",
                    12 + 8 * n,
                    bytes.len()
                ),
            ));
        }
        let plane = |start: usize| -> Vec<f32> {
            bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        FlowField::new(w, h, plane(12), plane(12 + 4 * n), frame_index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, frame_index: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, frame_index).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HornSchunckParams {
    /// Smoothness weight.
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for HornSchunckParams {
    fn default() -> Self {
        HornSchunckParams {
            lambda: 0.1,
            iterations: 100,
        }
    }
}

/// Horn–Schunck flow from `frame_a` to `frame_b`.
///
/// Frames are converted to grayscale intensities in `[0, 1]`. Spatial
/// derivatives are central differences of the mean of both frames, the
/// temporal derivative is `b - a`, borders replicate. A fixed number of
/// Jacobi sweeps is run from zero flow.
pub fn estimate_flow(
    frame_a: &Frame,
    frame_b: &Frame,
    params: &HornSchunckParams,
) -> Result<FlowField> {
    let (w, h) = (frame_a.width(), frame_a.height());
    if frame_b.width() != w || frame_b.height() != h {
        return Err(Error::input(format!(
            "frame sizes differ: {w}×{h} vs {}×{}",
            frame_b.width(),
            frame_b.height()
        )));
    }
    let a = frame_a.grayscale();
    let b = frame_b.grayscale();
    let mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let at = |img: &[f64], x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        img[yc * w + xc]
    };

    let n = w * h;
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    let mut denom = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let i = y * w + x;
            ix[i] = 0.5 * (at(&mean, xi + 1, yi) - at(&mean, xi - 1, yi));
            iy[i] = 0.5 * (at(&mean, xi, yi + 1) - at(&mean, xi, yi - 1));
            it[i] = b[i] - a[i];
            denom[i] = params.lambda + ix[i] * ix[i] + iy[i] * iy[i];
        }
    }

    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut u_next = vec![0.0f64; n];
    let mut v_next = vec![0.0f64; n];
    let local_mean = |f: &[f64], x: isize, y: isize| -> f64 {
        (at(f, x - 1, y) + at(f, x + 1, y) + at(f, x, y - 1) + at(f, x, y + 1)) / 6.0
            + (at(f, x - 1, y - 1)
                + at(f, x + 1, y - 1)
                + at(f, x - 1, y + 1)
                + at(f, x + 1, y + 1))
                / 12.0
    };
    for _ in 0..params.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (ub, vb) = (
                    local_mean(&u, x as isize, y as isize),
                    local_mean(&v, x as isize, y as isize),
                );
                let t = (ix[i] * ub + iy[i] * vb + it[i]) / denom[i];
                u_next[i] = ub - ix[i] * t;
                v_next[i] = vb - iy[i] * t;
            }
        }
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
    }
    FlowField::new(
        w,
        h,
        u.iter().map(|&x| x as f32).collect(),
        v.iter().map(|&x| x as f32).collect(),
        0,
    )
}

/// Default flow clamp bound in pixels.
pub const DEFAULT_FLOW_BOUND: f64 = 20.0;

/// `2L` interleaved flow channels `(u₁, v₁, …, u_L, v_L)`, clamped to
/// `±bound` and mapped affinely to `[0, 1]` via `x * scale + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack<T> {
    pub channels: Tensor<T>,
    pub scale: f64,
    pub offset: f64,
    pub bound: f64,
}

pub fn stack_flow<T: Scalar>(flows: &[&FlowField], len: usize, bound: f64) -> Result<FlowStack<T>> {
    if flows.len() != len || len == 0 {
        return Err(Error::input(format!(
            "stack needs exactly {len} flow fields, got {}",
            flows.len()
        )));
    }
    if !(bound > 0.0) {
        return Err(Error::config("flow bound must be positive"));
    }
    let (w, h) = (flows[0].width, flows[0].height);
    if flows.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::input("flow fields differ in size"));
    }
    let scale = 1.0 / (2.0 * bound);
    let offset = 0.5;
    let mut data = Vec::with_capacity(2 * len * w * h);
    for f in flows {
        for plane in [&f.u, &f.v] {
            data.extend(
                plane
                    .iter()
                    .map(|&x| T::of((x as f64).clamp(-bound, bound) * scale + offset)),
            );
        }
    }
    Ok(FlowStack {
        channels: Tensor::from_vec(&[2 * len, h, w], data)?,
        scale,
        offset,
        bound,
    })
}

impl<T: Scalar> FlowStack<T> {
    pub fn len(&self) -> usize {
        self.channels.shape()[0] / 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inverts the affine map; values outside `±bound` come back clamped.
    pub fn unstack(&self) -> Vec<FlowField> {
        let (c, h, w) = self.channels.chw().expect("stack is C×H×W");
        let plane = |ch: usize| -> Vec<f32> {
            self.channels.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|&y| ((y.as_f64() - self.offset) / self.scale) as f32)
                .collect()
        };
        (0..c / 2)
            .map(|i| FlowField {
                width: w,
                height: h,
                u: plane(2 * i),
                v: plane(2 * i + 1),
                frame_index: i,
            })
            .collect()
    }
}
