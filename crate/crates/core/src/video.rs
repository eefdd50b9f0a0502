//! Frames and clips: dense `H x W x 3` and `T x H x W x 3` arrays of values in `[0, 1]`.

use crate::error::{Error, Result};

/// One RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "frame {height}x{width}x3 given {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A video clip of `frames` RGB images sharing one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::Shape(format!(
                "clip {frames}x{height}x{width}x3 given {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("clip needs at least one frame".into()))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for (i, f) in frames.iter().enumerate() {
            if !f.same_shape(first) {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}, expected {}x{}",
                    f.height, f.width, first.height, first.width
                )));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Self {
            frames: frames.len(),
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            data: self.frame_slice(t).to_vec(),
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.frames).map(|t| self.frame(t))
    }

    /// Frames `start..start + len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::Shape(format!(
                "window {start}+{len} outside clip of {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(Self {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// The clip with its time axis reversed.
    pub fn reversed(&self) -> Self {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.frames).rev() {
            data.extend_from_slice(&self.data[t * n..(t + 1) * n]);
        }
        Self { data, ..*self }
    }

    pub fn spatial_matches(&self, frame: &Frame) -> bool {
        self.height == frame.height && self.width == frame.width
    }
}

/// Maps `[0, 1]` values to the `[-1, 1]` range the network works in.
pub fn normalize(v: f32) -> f32 {
    v * 2.0 - 1.0
}

/// Inverse of [`normalize`], clamped to `[0, 1]`.
pub fn denormalize(v: f64) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0) as f32
}
