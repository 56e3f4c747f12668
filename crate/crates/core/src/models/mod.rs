//! Segmentation models and the composite training loss.
//!
//! - `MiniSeg`: a small encoder-decoder that serves as the single-frame
//!   keypoint-ROI segmenter (four encoder convs with stride 2 at stages
//!   2-4, three decoder convs with 2x bilinear upsampling).
//! - `MfcNet`: the 4-layer fusion CNN refining K per-frame probability maps
//!   together with flow and depth context, in two variants: B concatenates
//!   everything, W warps past maps onto the current frame first.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ClassTaxonomy, ClipWindow, SegMap};
use crate::error::{Error, Result};
use crate::flowdepth::normalize_flow_for_net;
use crate::tensor::optim::ParamSet;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const BACKGROUND_WEIGHT: f32 = 0.01;
pub const LOSS_H_WEIGHT: f32 = 0.7;
pub const LOSS_J_WEIGHT: f32 = 0.3;
/// Fusion net hidden width.
pub const MFC_WIDTH: usize = 64;
/// Passthrough gain on the current frame's probabilities at init.
const MFC_INIT_GAIN: f32 = 4.0;

fn he_std(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

// ---------------------------------------------------------------------------
// MiniSeg (single-frame context model)
// ---------------------------------------------------------------------------

/// (out_channels, in_channels, stride) per layer; decoder layers are
/// preceded by a 2x bilinear upsample.
const ENC: [(usize, usize, usize); 4] = [(16, 3, 1), (32, 16, 2), (64, 32, 2), (64, 64, 2)];

#[derive(Debug, Clone)]
pub struct MiniSeg {
    pub params: ParamSet,
    pub num_classes: usize,
}

impl MiniSeg {
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!("need >= 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, (co, ci, _)) in ENC.iter().enumerate() {
            let w = Tensor::randn(&[*co, *ci, 3, 3], he_std(ci * 9), &mut rng);
            params.add(format!("sfc.enc{}.w", i + 1), w);
            params.add(format!("sfc.enc{}.b", i + 1), Tensor::zeros(&[*co]));
        }
        let dec = [(32usize, 64usize), (16, 32), (num_classes, 16)];
        for (i, (co, ci)) in dec.iter().enumerate() {
            let w = Tensor::randn(&[*co, *ci, 3, 3], he_std(ci * 9), &mut rng);
            params.add(format!("sfc.dec{}.w", i + 1), w);
            params.add(format!("sfc.dec{}.b", i + 1), Tensor::zeros(&[*co]));
        }
        Ok(MiniSeg { params, num_classes })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.bind(tape)
    }

    /// Per-pixel class probabilities for one frame already on the tape.
    pub fn forward_node(&self, tape: &mut Tape, bound: &[NodeId], frame: NodeId) -> Result<NodeId> {
        let logits = self.forward_logits(tape, bound, frame)?;
        tape.softmax_channels(logits)
    }

    pub fn forward_logits(&self, tape: &mut Tape, bound: &[NodeId], frame: NodeId) -> Result<NodeId> {
        let (c, h, w) = tape.value(frame).chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB frame, got {c} channels")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "frame {h}x{w} not divisible by 8; pad before the forward pass"
            )));
        }
        let mut x = frame;
        for (i, (_, _, stride)) in ENC.iter().enumerate() {
            x = tape.conv2d(x, bound[2 * i], bound[2 * i + 1], *stride, 1)?;
            x = tape.relu(x);
        }
        for i in 0..3 {
            x = tape.bilinear_upsample(x, 2)?;
            x = tape.conv2d(x, bound[8 + 2 * i], bound[8 + 2 * i + 1], 1, 1)?;
            if i < 2 {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Softmax probabilities for a raw frame, constant-leaf convenience.
    pub fn forward(&self, tape: &mut Tape, bound: &[NodeId], frame: &Tensor) -> Result<NodeId> {
        let f = tape.constant(frame.clone());
        self.forward_node(tape, bound, f)
    }

    /// Inference without gradient bookkeeping.
    pub fn infer(&self, frame: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound: Vec<NodeId> =
            self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let prob = self.forward(&mut tape, &bound, frame)?;
        Ok(tape.value(prob).clone())
    }
}

// ---------------------------------------------------------------------------
// MFC fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MfcVariant {
    /// Concatenation fusion: probability maps, normalized flows, depths.
    B,
    /// Warp fusion: past maps and depths warped onto the current frame.
    W,
}

impl std::fmt::Display for MfcVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MfcVariant::B => write!(f, "B"),
            MfcVariant::W => write!(f, "W"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfcConfig {
    pub k: usize,
    pub use_depth: bool,
    pub variant: MfcVariant,
    pub num_classes: usize,
}

impl MfcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Validation(format!("K must be >= 2, got {}", self.k)));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need >= 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Fusion input channel count: K*C + 2(K-1) + K·use_depth for variant
    /// B, K*C + K·use_depth for variant W.
    pub fn in_channels(&self) -> usize {
        let d = if self.use_depth { self.k } else { 0 };
        match self.variant {
            MfcVariant::B => self.k * self.num_classes + 2 * (self.k - 1) + d,
            MfcVariant::W => self.k * self.num_classes + d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MfcNet {
    pub params: ParamSet,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl MfcNet {
    /// Builds the 4-layer fusion CNN, initialized as a passthrough of the
    /// current frame's probability channels so fusion starts no worse than
    /// the single-frame model; remaining channels get small random weights
    /// to give training signal paths. Final bias is zero-initialized.
    pub fn new(cfg: &MfcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.num_classes;
        let in_ch = cfg.in_channels();
        if MFC_WIDTH < c {
            return Err(Error::Validation(format!(
                "fusion width {MFC_WIDTH} below class count {c}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        // current frame's probability block sits last among the K prob maps
        let cur_off = (cfg.k - 1) * c;
        let mut w1 = Tensor::zeros(&[MFC_WIDTH, in_ch, 3, 3]);
        let mut b1 = Tensor::zeros(&[MFC_WIDTH]);
        fill_passthrough(&mut w1, &mut b1, c, in_ch, cur_off, &mut rng);
        params.add("mfc.conv1.w", w1);
        params.add("mfc.conv1.b", b1);

        for li in 2..=3 {
            let mut w = Tensor::zeros(&[MFC_WIDTH, MFC_WIDTH, 3, 3]);
            let mut b = Tensor::zeros(&[MFC_WIDTH]);
            fill_passthrough(&mut w, &mut b, c, MFC_WIDTH, 0, &mut rng);
            params.add(format!("mfc.conv{li}.w"), w);
            params.add(format!("mfc.conv{li}.b"), b);
        }

        let mut w4 = Tensor::zeros(&[c, MFC_WIDTH, 3, 3]);
        {
            let d = w4.data_mut();
            let std = 0.005;
            for co in 0..c {
                for ci in 0..MFC_WIDTH {
                    for k in 0..9 {
                        let idx = (co * MFC_WIDTH + ci) * 9 + k;
                        if ci == co && k == 4 {
                            d[idx] = MFC_INIT_GAIN;
                        } else if ci >= c {
                            // weak coupling to the fresh feature channels
                            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                            let u2: f64 = rng.gen();
                            let z = (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos();
                            d[idx] = z as f32 * std;
                        }
                    }
                }
            }
        }
        params.add("mfc.conv4.w", w4);
        params.add("mfc.conv4.b", Tensor::zeros(&[c]));

        Ok(MfcNet { params, in_channels: in_ch, num_classes: c })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.bind(tape)
    }

    pub fn forward_node(&self, tape: &mut Tape, bound: &[NodeId], input: NodeId) -> Result<NodeId> {
        let (c, _, _) = tape.value(input).chw()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "fusion input has {c} channels, net expects {}",
                self.in_channels
            )));
        }
        let mut x = input;
        for li in 0..4 {
            x = tape.conv2d(x, bound[2 * li], bound[2 * li + 1], 1, 1)?;
            if li < 3 {
                x = tape.relu(x);
            }
        }
        tape.softmax_channels(x)
    }
}

/// Identity-plus-noise init for a hidden fusion layer: the first `c` output
/// channels copy input channels `src_off..src_off+c`; the rest are He-init.
fn fill_passthrough(w: &mut Tensor, b: &mut Tensor, c: usize, in_ch: usize, src_off: usize, rng: &mut ChaCha8Rng) {
    let cout = w.shape()[0];
    let std = he_std(in_ch * 9);
    let d = w.data_mut();
    for co in 0..cout {
        for ci in 0..in_ch {
            for k in 0..9 {
                let idx = (co * in_ch + ci) * 9 + k;
                if co < c {
                    if ci == src_off + co && k == 4 {
                        d[idx] = 1.0;
                    }
                } else {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    let z =
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    d[idx] = z as f32 * std * 0.5;
                }
            }
        }
    }
    let bd = b.data_mut();
    for (co, v) in bd.iter_mut().enumerate() {
        if co >= c {
            *v = 0.01;
        }
    }
}

/// Stacks fusion input channels. Probability maps arrive oldest to current;
/// `flows[i]` is current->t-(i+1); `depths` align with the frames.
///
/// Variant B: [probs .. | normalized flows .. | depths ..]
/// Variant W: past probs and depths are warped onto the current frame by
/// their flow; no flow channels. Depths are dropped when `use_depth` is
/// false.
pub fn assemble_mfc_input(
    tape: &mut Tape,
    probmaps: &[NodeId],
    flows: &[Tensor],
    depths: &[Tensor],
    cfg: &MfcConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let k = cfg.k;
    if probmaps.len() != k || flows.len() != k - 1 || depths.len() != k {
        return Err(Error::Shape(format!(
            "expected {k} probmaps, {} flows, {k} depths; got {}, {}, {}",
            k - 1,
            probmaps.len(),
            flows.len(),
            depths.len()
        )));
    }
    for &pm in probmaps {
        let (c, _, _) = tape.value(pm).chw()?;
        if c != cfg.num_classes {
            return Err(Error::Shape(format!(
                "probmap has {c} channels, config says {}",
                cfg.num_classes
            )));
        }
    }
    let mut parts: Vec<NodeId> = Vec::new();
    match cfg.variant {
        MfcVariant::B => {
            parts.extend_from_slice(probmaps);
            for flow in flows {
                let n = normalize_flow_for_net(flow)?;
                parts.push(tape.constant(n));
            }
            if cfg.use_depth {
                for d in depths {
                    parts.push(tape.constant(d.clone()));
                }
            }
        }
        MfcVariant::W => {
            for (j, &pm) in probmaps.iter().enumerate() {
                if j + 1 < k {
                    // frame j is the (k-1-j)-th past frame; its flow index
                    let fi = k - 2 - j;
                    parts.push(tape.grid_sample_flow(pm, &flows[fi])?);
                } else {
                    parts.push(pm);
                }
            }
            if cfg.use_depth {
                for (j, d) in depths.iter().enumerate() {
                    let node = tape.constant(d.clone());
                    if j + 1 < k {
                        let fi = k - 2 - j;
                        parts.push(tape.grid_sample_flow(node, &flows[fi])?);
                    } else {
                        parts.push(node);
                    }
                }
            }
        }
    }
    tape.concat_channels(&parts)
}

/// Full multi-frame forward: per-frame probabilities from the single-frame
/// model, fusion input assembly, then the 4-layer refinement CNN.
pub fn mfc_forward(
    tape: &mut Tape,
    sfc: &MiniSeg,
    sfc_bound: &[NodeId],
    net: &MfcNet,
    net_bound: &[NodeId],
    window: &ClipWindow,
    cfg: &MfcConfig,
) -> Result<NodeId> {
    if window.k() != cfg.k {
        return Err(Error::Shape(format!(
            "window has K={}, config says K={}",
            window.k(),
            cfg.k
        )));
    }
    let mut probs = Vec::with_capacity(cfg.k);
    for frame in &window.frames {
        probs.push(sfc.forward(tape, sfc_bound, frame)?);
    }
    let fused = assemble_mfc_input(tape, &probs, &window.flows, &window.depths, cfg)?;
    net.forward_node(tape, net_bound, fused)
}

/// Paired single-frame + fusion model.
#[derive(Debug, Clone)]
pub struct MfcModel {
    pub sfc: MiniSeg,
    pub net: MfcNet,
    pub cfg: MfcConfig,
}

impl MfcModel {
    pub fn new(sfc: MiniSeg, cfg: MfcConfig, seed: u64) -> Result<Self> {
        if sfc.num_classes != cfg.num_classes {
            return Err(Error::Shape(format!(
                "single-frame model has {} classes, fusion config {}",
                sfc.num_classes, cfg.num_classes
            )));
        }
        let net = MfcNet::new(&cfg, seed)?;
        Ok(MfcModel { sfc, net, cfg })
    }

    pub fn infer(&self, window: &ClipWindow) -> Result<Tensor> {
        let mut tape = Tape::new();
        let sfc_bound: Vec<NodeId> =
            self.sfc.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let net_bound: Vec<NodeId> =
            self.net.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = mfc_forward(&mut tape, &self.sfc, &sfc_bound, &self.net, &net_bound, window, &self.cfg)?;
        Ok(tape.value(out).clone())
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Weighted per-pixel negative log-likelihood.
    pub h: f32,
    /// Mean soft Jaccard over keypoint classes.
    pub j: f32,
    /// 0.7*H - 0.3*ln(J)
    pub total: f32,
}

/// Class-weight vector: background down-weighted, keypoint classes 1.
pub fn class_weights(num_classes: usize, background_weight: f32) -> Vec<f32> {
    let mut w = vec![1.0f32; num_classes];
    w[0] = background_weight;
    w
}

/// Composite segmentation loss on a probability-map node. Returns the
/// scalar total node plus the term values.
pub fn composite_loss(
    tape: &mut Tape,
    prob: NodeId,
    target: &SegMap,
    taxonomy: &ClassTaxonomy,
    background_weight: f32,
) -> Result<(NodeId, LossTerms)> {
    let (c, h, w) = tape.value(prob).chw()?;
    if c != taxonomy.num_classes() {
        return Err(Error::Shape(format!(
            "probmap has {c} channels, taxonomy {} classes",
            taxonomy.num_classes()
        )));
    }
    if (target.h, target.w) != (h, w) {
        return Err(Error::Shape(format!(
            "target {}x{} vs probmap {h}x{w}",
            target.h, target.w
        )));
    }
    let weights = class_weights(c, background_weight);
    let hn = tape.nll_weighted(prob, &target.labels, &weights)?;
    let jn = tape.soft_jaccard(prob, &target.labels, &taxonomy.keypoint_classes())?;
    let total = tape.combine_loss(hn, jn, LOSS_H_WEIGHT, LOSS_J_WEIGHT)?;
    Ok((
        total,
        LossTerms {
            h: tape.value_scalar(hn)?,
            j: tape.value_scalar(jn)?,
            total: tape.value_scalar(total)?,
        },
    ))
}

/// Loss values without gradient bookkeeping (validation passes).
pub fn loss_values(
    prob: &Tensor,
    target: &SegMap,
    taxonomy: &ClassTaxonomy,
    background_weight: f32,
) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let p = tape.constant(prob.clone());
    let (_, terms) = composite_loss(&mut tape, p, target, taxonomy, background_weight)?;
    Ok(terms)
}
