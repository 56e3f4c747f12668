//! Optical-flow and depth providers.
//!
//! Flow and depth come from outside the tracker (precomputed files from
//! pretrained estimators, or the synthetic oracle); this module makes the
//! two sources interchangeable behind [`FlowDepthSource`] and adds the
//! K-window retrieval rules plus half-resolution flow rescaling.
//!
//! Conventions: flow maps hold current-to-past pixel displacement at full
//! resolution; depth maps are min-max normalized to [0,1] per frame, with a
//! constant map normalizing to all zeros.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataio::{window_indices, FlowDepthSource};
use crate::error::{Error, Result};
use crate::synth::SynthClip;
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Files,
    Oracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub root: PathBuf,
    /// Flow files may be stored at a reduced scale; displacements are
    /// upsampled and rescaled by this factor on read.
    pub downsample_factor: usize,
}

impl ProviderConfig {
    pub fn files(root: impl Into<PathBuf>) -> Self {
        ProviderConfig { mode: ProviderMode::Files, root: root.into(), downsample_factor: 1 }
    }
}

/// Min-max normalization to [0,1]; a constant map becomes all zeros.
pub fn normalize_depth(depth: &Tensor) -> Tensor {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in depth.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let mut out = depth.clone();
    if range <= 0.0 {
        out.data_mut().fill(0.0);
    } else {
        for v in out.data_mut() {
            *v = (*v - lo) / range;
        }
    }
    out
}

/// Bilinear upsample of a reduced-scale flow map; displacement values are
/// multiplied by the factor to stay in full-resolution pixels.
pub fn upscale_flow(flow_low: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = flow_low.chw()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow must be [2,H,W], got {:?}", flow_low.shape())));
    }
    if factor < 1 {
        return Err(Error::Shape("upscale factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(flow_low.clone());
    }
    let up = kernels::bilinear_upsample_forward(flow_low.data(), 2, h, w, factor);
    let mut out = Tensor::from_vec(vec![2, h * factor, w * factor], up)?;
    for v in out.data_mut() {
        *v *= factor as f32;
    }
    Ok(out)
}

/// Flow channels scaled into roughly [-1,1] for fusion-network input: u by
/// 1/W, v by 1/H. The warp path keeps raw pixel units.
pub fn normalize_flow_for_net(flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = flow.chw()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow must be [2,H,W], got {:?}", flow.shape())));
    }
    let mut out = flow.clone();
    for v in out.channel_mut(0) {
        *v /= w as f32;
    }
    for v in out.channel_mut(1) {
        *v /= h as f32;
    }
    Ok(out)
}

/// Reads `.flo`/`.pfm` files from the dataset layout.
pub struct FilesProvider {
    root: PathBuf,
    downsample_factor: usize,
}

impl FilesProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self> {
        if cfg.downsample_factor < 1 {
            return Err(Error::Validation("downsample_factor must be >= 1".into()));
        }
        Ok(FilesProvider { root: cfg.root.clone(), downsample_factor: cfg.downsample_factor })
    }

    fn video_dir(&self, video: &str) -> PathBuf {
        self.root.join("videos").join(video)
    }
}

impl FlowDepthSource for FilesProvider {
    fn flow(&self, video: &str, t: usize, past: usize) -> Result<Tensor> {
        let path = self.video_dir(video).join("flow").join(format!("{t:06}_to_{past:06}.flo"));
        if !path.exists() {
            return Err(Error::Validation(format!(
                "missing flow file {}",
                path.display()
            )));
        }
        let flow = crate::dataio::formats::read_flo(&path)?;
        upscale_flow(&flow, self.downsample_factor)
    }

    fn depth(&self, video: &str, t: usize) -> Result<Tensor> {
        let path = self.video_dir(video).join("depth").join(format!("{t:06}.pfm"));
        if !path.exists() {
            return Err(Error::Validation(format!(
                "missing depth file {}",
                path.display()
            )));
        }
        Ok(normalize_depth(&crate::dataio::formats::read_pfm(&path)?))
    }

    fn frame_size(&self, video: &str) -> Result<(usize, usize)> {
        let path = self.video_dir(video).join("frames").join("000000.png");
        let img = crate::dataio::formats::read_image(&path)?;
        let (_, h, w) = img.chw()?;
        Ok((h, w))
    }
}

/// Serves analytic maps straight from an in-memory synthetic clip.
pub struct OracleProvider {
    clip: SynthClip,
}

impl OracleProvider {
    pub fn new(clip: SynthClip) -> Self {
        OracleProvider { clip }
    }

    pub fn clip(&self) -> &SynthClip {
        &self.clip
    }
}

impl FlowDepthSource for OracleProvider {
    fn flow(&self, _video: &str, t: usize, past: usize) -> Result<Tensor> {
        if t >= self.clip.frames.len() || past >= self.clip.frames.len() {
            return Err(Error::Validation(format!(
                "flow pair ({t}, {past}) beyond clip of {} frames",
                self.clip.frames.len()
            )));
        }
        Ok(self.clip.flow(t, past))
    }

    fn depth(&self, _video: &str, t: usize) -> Result<Tensor> {
        if t >= self.clip.depths.len() {
            return Err(Error::Validation(format!(
                "depth index {t} beyond clip of {} frames",
                self.clip.depths.len()
            )));
        }
        Ok(normalize_depth(&self.clip.depths[t]))
    }

    fn frame_size(&self, _video: &str) -> Result<(usize, usize)> {
        Ok((self.clip.cfg.h, self.clip.cfg.w))
    }
}

/// K-1 flow maps for the window at `t`, ordered current->t-1 first. Past
/// indices clamp to frame 0; a flow onto a clamped duplicate of the current
/// frame is the zero map.
pub fn get_flows(src: &dyn FlowDepthSource, video: &str, t: usize, k: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(k - 1);
    for i in 1..k {
        let past = t.saturating_sub(i);
        if past == t {
            let (h, w) = src.frame_size(video)?;
            out.push(Tensor::zeros(&[2, h, w]));
        } else {
            out.push(src.flow(video, t, past)?);
        }
    }
    Ok(out)
}

/// K depth maps for the window at `t`, ordered past to current, normalized
/// per frame.
pub fn get_depths(src: &dyn FlowDepthSource, video: &str, t: usize, k: usize) -> Result<Vec<Tensor>> {
    window_indices(t, k).iter().map(|&i| src.depth(video, i)).collect()
}
