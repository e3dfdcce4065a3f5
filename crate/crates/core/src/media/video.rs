use crate::tensor::{matmul_into, Real, Tensor};

use super::MediaError;

/// `T x H x W x C` frames of 8-bit pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub clip_id: String,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

pub const CHANNELS: usize = 3;

impl VideoClip {
    pub fn new(
        clip_id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self, MediaError> {
        let clip_id = clip_id.into();
        if frames == 0 || height == 0 || width == 0 {
            return Err(MediaError::EmptyClip(clip_id));
        }
        if channels != CHANNELS {
            return Err(MediaError::Format {
                path: clip_id,
                detail: format!("expected {CHANNELS} channels, got {channels}"),
            });
        }
        if pixels.len() != frames * height * width * channels {
            return Err(MediaError::Format {
                path: clip_id,
                detail: format!(
                    "{} bytes for {frames}x{height}x{width}x{channels}",
                    pixels.len()
                ),
            });
        }
        Ok(Self {
            clip_id,
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Concatenates equally sized frames.
    pub fn from_frames(clip_id: impl Into<String>, frames: &[Vec<u8>], height: usize, width: usize) -> Result<Self, MediaError> {
        let pixels = frames.concat();
        Self::new(clip_id, frames.len(), height, width, CHANNELS, pixels)
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Frames at `indices`, in that order (repeats allowed).
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self, MediaError> {
        let mut pixels = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.frames {
                return Err(MediaError::Format {
                    path: self.clip_id.clone(),
                    detail: format!("frame index {i} out of {}", self.frames),
                });
            }
            pixels.extend_from_slice(self.frame(i));
        }
        Self::new(self.clip_id.clone(), indices.len(), self.height, self.width, self.channels, pixels)
    }

    pub fn reversed(&self) -> Self {
        let idx: Vec<usize> = (0..self.frames).rev().collect();
        self.select_frames(&idx).expect("indices in range")
    }
}

/// Frame indices `floor(i * T / n)` for `i in 0..n`.
pub fn linear_indices(total: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| ((i * total) / n).min(total.saturating_sub(1)))
        .collect()
}

pub fn sample_frames_linear(clip: &VideoClip, n: usize) -> Result<VideoClip, MediaError> {
    if n == 0 {
        return Err(MediaError::InvalidArgument("sample_frames_linear needs n >= 1".into()));
    }
    clip.select_frames(&linear_indices(clip.num_frames(), n))
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(clip: &VideoClip, out_h: usize, out_w: usize) -> Result<VideoClip, MediaError> {
    if out_h == 0 || out_w == 0 {
        return Err(MediaError::InvalidArgument(format!("resize to {out_h}x{out_w}")));
    }
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut pixels = Vec::with_capacity(clip.frames * out_h * out_w * c);
    for t in 0..clip.frames {
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                for ch in 0..c {
                    let p = |y: usize, x: usize| clip.pixel(t, y, x, ch) as f64;
                    let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    let v = top * (1.0 - wy) + bottom * wy;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    VideoClip::new(clip.clip_id.clone(), clip.frames, out_h, out_w, c, pixels)
}

pub fn center_crop(clip: &VideoClip, size: usize) -> Result<VideoClip, MediaError> {
    if size == 0 || size > clip.height || size > clip.width {
        return Err(MediaError::InvalidArgument(format!(
            "crop {size} from {}x{}",
            clip.height, clip.width
        )));
    }
    let oy = (clip.height - size) / 2;
    let ox = (clip.width - size) / 2;
    let c = clip.channels;
    let mut pixels = Vec::with_capacity(clip.frames * size * size * c);
    for t in 0..clip.frames {
        for y in oy..oy + size {
            let start = ((t * clip.height + y) * clip.width + ox) * c;
            pixels.extend_from_slice(&clip.pixels[start..start + size * c]);
        }
    }
    VideoClip::new(clip.clip_id.clone(), clip.frames, size, size, c, pixels)
}

/// Scales so the shorter side equals `target_px` (aspect preserved), then
/// center-crops to a `target_px` square.
pub fn resize_shorter_side(clip: &VideoClip, target_px: usize) -> Result<VideoClip, MediaError> {
    if target_px == 0 {
        return Err(MediaError::InvalidArgument("target_px must be positive".into()));
    }
    let (h, w) = (clip.height, clip.width);
    let (out_h, out_w) = if h <= w {
        (target_px, ((w * target_px) as f64 / h as f64).round() as usize)
    } else {
        (((h * target_px) as f64 / w as f64).round() as usize, target_px)
    };
    let resized = if (out_h, out_w) == (h, w) {
        clip.clone()
    } else {
        resize_bilinear(clip, out_h, out_w)?
    };
    center_crop(&resized, target_px)
}

/// Flattens every `patch x patch` square of every frame into a row of
/// `patch * patch * C` values in `[0, 1]`; rows are frame-major, then
/// row-major over the patch grid.
pub fn patch_pixels<F: Real>(clip: &VideoClip, patch: usize) -> Result<Tensor<F>, MediaError> {
    if patch == 0 || !clip.height.is_multiple_of(patch) || !clip.width.is_multiple_of(patch) {
        return Err(MediaError::IndivisiblePatch {
            height: clip.height,
            width: clip.width,
            patch,
        });
    }
    let (gh, gw) = (clip.height / patch, clip.width / patch);
    let dim = patch * patch * clip.channels;
    let rows = clip.frames * gh * gw;
    let inv = F::lit(1.0 / 255.0);
    let mut data = Vec::with_capacity(rows * dim);
    for t in 0..clip.frames {
        for py in 0..gh {
            for px in 0..gw {
                for y in py * patch..(py + 1) * patch {
                    let start = ((t * clip.height + y) * clip.width + px * patch) * clip.channels;
                    data.extend(
                        clip.pixels[start..start + patch * clip.channels]
                            .iter()
                            .map(|&v| F::lit(v as f64) * inv),
                    );
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows, dim], data).expect("patch layout"))
}

/// Linear map from flattened patches to embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProjection {
    /// `[patch * patch * C, D]`
    pub weight: Tensor<f32>,
    /// `[D]`
    pub bias: Tensor<f32>,
}

/// Per-frame patch-token embeddings, `tokens` is `[T, P, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub tokens: Tensor<f32>,
    pub patches_per_frame: usize,
    pub patch_size: usize,
}

pub fn patchify(clip: &VideoClip, patch_size: usize, projection: &PatchProjection) -> Result<PatchGrid, MediaError> {
    let rows = patch_pixels::<f32>(clip, patch_size)?;
    let (n, dim) = (rows.shape()[0], rows.shape()[1]);
    if projection.weight.shape()[0] != dim {
        return Err(MediaError::InvalidArgument(format!(
            "projection expects {} inputs, patches have {dim}",
            projection.weight.shape()[0]
        )));
    }
    let d = projection.weight.shape()[1];
    let mut out = vec![0.0f32; n * d];
    for row in out.chunks_exact_mut(d) {
        row.copy_from_slice(projection.bias.data());
    }
    matmul_into(rows.data(), projection.weight.data(), &mut out, n, dim, d);
    let per_frame = n / clip.num_frames();
    Ok(PatchGrid {
        tokens: Tensor::new(vec![clip.num_frames(), per_frame, d], out).expect("grid layout"),
        patches_per_frame: per_frame,
        patch_size,
    })
}
