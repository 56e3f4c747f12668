//! Seeded, geometry-consistent data augmentation.
//!
//! One [`AugmentParams`] draw is applied jointly to a frame, its mask, and
//! any flow/depth maps: horizontal flip (with class-id swap and flow
//! u-negation), crop-and-resize to a net scale in [0.9, 1.1], and a
//! brightness/contrast jitter on the frame only.

use rand::Rng;

use crate::dataio::{ClassTaxonomy, SegMap};
use crate::error::Result;
use crate::tensor::{kernels, Tensor};

pub const SCALE_RANGE: (f32, f32) = (0.9, 1.1);
pub const JITTER: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f32,
    /// Offset of the output window inside the resized image, in output
    /// pixels. Negative when the resized image is smaller (padding).
    pub crop_x: i32,
    pub crop_y: i32,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { flip: false, scale: 1.0, crop_x: 0, crop_y: 0, brightness: 0.0, contrast: 1.0 }
    }

    /// Draws one joint transform. `h`/`w` fix the crop-offset ranges.
    pub fn sample(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(0.5);
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let (rh, rw) = resized_dims(h, w, scale);
        let range_x = rw as i32 - w as i32;
        let range_y = rh as i32 - h as i32;
        let crop_x = sample_offset(range_x, rng);
        let crop_y = sample_offset(range_y, rng);
        let brightness = rng.gen_range(-JITTER..=JITTER);
        let contrast = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
        AugmentParams { flip, scale, crop_x, crop_y, brightness, contrast }
    }

    fn resized(&self, h: usize, w: usize) -> (usize, usize) {
        resized_dims(h, w, self.scale)
    }

    /// Maps an original keypoint position through the geometric transform.
    pub fn map_point(&self, x: f32, y: f32, h: usize, w: usize) -> (f32, f32) {
        let (mut x, mut y) = (x, y);
        if self.flip {
            x = (w - 1) as f32 - x;
        }
        let (rh, rw) = self.resized(h, w);
        let sx = rw as f32 / w as f32;
        let sy = rh as f32 / h as f32;
        // align-corners-false resize mapping
        x = (x + 0.5) * sx - 0.5 - self.crop_x as f32;
        y = (y + 0.5) * sy - 0.5 - self.crop_y as f32;
        (x, y)
    }

    /// Full transform for an RGB frame: geometry plus photometric jitter.
    pub fn apply_frame(&self, frame: &Tensor) -> Result<Tensor> {
        let mut t = self.apply_geometry(frame, EdgeFill::Clamp)?;
        // v*c + offset == (v - 0.5)*c + 0.5 + b, arranged so the identity
        // draw (c = 1, b = 0) is bit-exact.
        let offset = 0.5 - 0.5 * self.contrast + self.brightness;
        for v in t.data_mut() {
            *v = (*v * self.contrast + offset).clamp(0.0, 1.0);
        }
        Ok(t)
    }

    /// Geometry for a flow map: mirrored u is negated, and displacement
    /// values scale with the resize.
    pub fn apply_flow(&self, flow: &Tensor) -> Result<Tensor> {
        let (_, h, w) = flow.chw()?;
        let mut f = flow.clone();
        if self.flip {
            f = kernels::flip_horizontal(&f)?;
            for v in f.channel_mut(0) {
                *v = -*v;
            }
        }
        let (rh, rw) = self.resized(h, w);
        let sx = rw as f32 / w as f32;
        let sy = rh as f32 / h as f32;
        let mut f = self.crop_or_pad(&kernels::bilinear_resize(&f, rh, rw)?, h, w, EdgeFill::Clamp)?;
        for v in f.channel_mut(0) {
            *v *= sx;
        }
        for v in f.channel_mut(1) {
            *v *= sy;
        }
        Ok(f)
    }

    /// Geometry only (depth maps and other scalar fields).
    pub fn apply_depth(&self, depth: &Tensor) -> Result<Tensor> {
        self.apply_geometry(depth, EdgeFill::Clamp)
    }

    /// Nearest-neighbor geometry for a label map; flipping swaps paired
    /// classes; padding fills with background.
    pub fn apply_mask(&self, mask: &SegMap, taxonomy: &ClassTaxonomy) -> SegMap {
        let (h, w) = (mask.h, mask.w);
        let (rh, rw) = self.resized(h, w);
        let mut out = SegMap::zeros(h, w);
        for oy in 0..h {
            for ox in 0..w {
                // invert: output pixel -> resized pixel -> source pixel
                let ry = oy as i32 + self.crop_y;
                let rx = ox as i32 + self.crop_x;
                if ry < 0 || rx < 0 || ry >= rh as i32 || rx >= rw as i32 {
                    continue; // background padding
                }
                let sy = ((ry as f32 + 0.5) * h as f32 / rh as f32 - 0.5).round();
                let sx = ((rx as f32 + 0.5) * w as f32 / rw as f32 - 0.5).round();
                let sy = sy.clamp(0.0, (h - 1) as f32) as usize;
                let sx = sx.clamp(0.0, (w - 1) as f32) as usize;
                let sx = if self.flip { w - 1 - sx } else { sx };
                let mut label = mask.labels[sy * w + sx];
                if self.flip {
                    label = taxonomy.flip_class(label as usize) as u32;
                }
                out.labels[oy * w + ox] = label;
            }
        }
        out
    }

    fn apply_geometry(&self, t: &Tensor, fill: EdgeFill) -> Result<Tensor> {
        let (_, h, w) = t.chw()?;
        let mut cur = t.clone();
        if self.flip {
            cur = kernels::flip_horizontal(&cur)?;
        }
        let (rh, rw) = self.resized(h, w);
        let resized = kernels::bilinear_resize(&cur, rh, rw)?;
        self.crop_or_pad(&resized, h, w, fill)
    }

    fn crop_or_pad(&self, t: &Tensor, th: usize, tw: usize, fill: EdgeFill) -> Result<Tensor> {
        let (c, h, w) = t.chw()?;
        if (h, w) == (th, tw) && self.crop_x == 0 && self.crop_y == 0 {
            return Ok(t.clone());
        }
        let mut out = vec![0.0f32; c * th * tw];
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
            for oy in 0..th {
                let sy = oy as i32 + self.crop_y;
                for ox in 0..tw {
                    let sx = ox as i32 + self.crop_x;
                    let v = match fill {
                        EdgeFill::Clamp => {
                            let cy = sy.clamp(0, h as i32 - 1) as usize;
                            let cx = sx.clamp(0, w as i32 - 1) as usize;
                            src[cy * w + cx]
                        }
                    };
                    dst[oy * tw + ox] = v;
                }
            }
        }
        Tensor::from_vec(vec![c, th, tw], out)
    }
}

#[derive(Clone, Copy)]
enum EdgeFill {
    Clamp,
}

fn resized_dims(h: usize, w: usize, scale: f32) -> (usize, usize) {
    (((h as f32 * scale).round() as usize).max(1), ((w as f32 * scale).round() as usize).max(1))
}

fn sample_offset(range: i32, rng: &mut impl Rng) -> i32 {
    if range > 0 {
        rng.gen_range(0..=range)
    } else if range < 0 {
        -rng.gen_range(0..=-range)
    } else {
        0
    }
}

/// Spec-shaped convenience wrapper: one frame with optional flow/depth.
#[allow(clippy::too_many_arguments)]
pub fn augment(
    frame: &Tensor,
    mask: &SegMap,
    flow: Option<&Tensor>,
    depth: Option<&Tensor>,
    taxonomy: &ClassTaxonomy,
    params: &AugmentParams,
) -> Result<(Tensor, SegMap, Option<Tensor>, Option<Tensor>)> {
    let f = params.apply_frame(frame)?;
    let m = params.apply_mask(mask, taxonomy);
    let fl = flow.map(|t| params.apply_flow(t)).transpose()?;
    let d = depth.map(|t| params.apply_depth(t)).transpose()?;
    Ok((f, m, fl, d))
}
