//! Deterministic synthetic scene generator.
//!
//! Renders articulated tool-like shapes (a shaft ending in two clasper
//! segments) over a value-noise background, with exact analytic keypoint
//! positions, analytic current-to-past optical flow, and analytic depth.
//! Everything is a pure function of (config, seed), so generated datasets
//! are byte-identical across runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{formats, write_annotations, ClassTaxonomy, Keypoint, KeypointAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KEYPOINT_MARGIN: f32 = 6.0;
const EDGE_WIDTH: f32 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyStyle {
    /// Five keypoint classes per tool (end, shaft, head, two clasper tips).
    Endovis,
    /// Tip class (two instances) plus jaw-base class per tool.
    Jigsaws,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub num_tools: usize,
    pub frames_per_clip: usize,
    /// Translation speed bound, px/frame.
    pub motion_amplitude: f32,
    /// Axis rotation speed bound, rad/frame.
    pub rotation_amplitude: f32,
    /// Clasper opening oscillation, rad.
    pub clasper_amplitude: f32,
    pub texture_seed: u64,
    pub taxonomy_style: TaxonomyStyle,
    /// Flow files are written for lags 1..=max_flow_lag (supports K up to
    /// max_flow_lag + 1).
    pub max_flow_lag: usize,
    /// Exact linear translation overrides the smooth wander when set.
    pub linear_velocity: Option<(f32, f32)>,
    /// Hard mode: temporal supersampling smears fast-moving parts.
    pub motion_blur: bool,
    /// Hard mode: background texture drifts, giving nonzero background flow.
    pub background_drift: (f32, f32),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            h: 128,
            w: 160,
            num_tools: 1,
            frames_per_clip: 20,
            motion_amplitude: 2.5,
            rotation_amplitude: 0.02,
            clasper_amplitude: 0.35,
            texture_seed: 0,
            taxonomy_style: TaxonomyStyle::Endovis,
            max_flow_lag: 3,
            linear_velocity: None,
            motion_blur: false,
            background_drift: (0.0, 0.0),
        }
    }
}

impl SceneConfig {
    pub fn taxonomy(&self) -> ClassTaxonomy {
        match self.taxonomy_style {
            TaxonomyStyle::Endovis => ClassTaxonomy::endovis(self.num_tools),
            TaxonomyStyle::Jigsaws => ClassTaxonomy::jigsaws(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_tools == 0 || self.num_tools > 2 {
            return Err(Error::Validation(format!(
                "num_tools must be 1 or 2, got {}",
                self.num_tools
            )));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Validation("frames_per_clip must be >= 1".into()));
        }
        if self.h < 32 || self.w < 32 {
            return Err(Error::Validation(format!(
                "scene {}x{} too small (min 32x32)",
                self.h, self.w
            )));
        }
        if self.max_flow_lag == 0 {
            return Err(Error::Validation("max_flow_lag must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Vec2 {
    x: f32,
    y: f32,
}

impl Vec2 {
    fn new(x: f32, y: f32) -> Self {
        Vec2 { x, y }
    }

    fn rot(self, a: f32) -> Self {
        let (s, c) = a.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    fn add(self, o: Vec2) -> Self {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    fn sub(self, o: Vec2) -> Self {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Distance from p to the segment (0,0)-(len,0) in local coordinates, and
/// the clamped axial position.
fn capsule_local(p: Vec2, len: f32) -> (f32, f32) {
    let u = p.x.clamp(0.0, len);
    let dx = p.x - u;
    ((dx * dx + p.y * p.y).sqrt(), u)
}

/// Smooth per-clip motion of one tool.
#[derive(Debug, Clone)]
struct ToolMotion {
    center: Vec2,
    theta0: f32,
    shaft_len: f32,
    shaft_r: f32,
    clasp_len: f32,
    clasp_r: f32,
    lin_vel: Option<(f32, f32)>,
    amp1: Vec2,
    om1: f32,
    ph1: f32,
    amp2: Vec2,
    om2: f32,
    ph2: f32,
    rot_amp: f32,
    rot_om: f32,
    rot_ph: f32,
    phi_base: f32,
    phi_amp: f32,
    phi_om: f32,
    phi_ph: f32,
    tint: [f32; 3],
}

#[derive(Debug, Clone, Copy)]
struct ToolPose {
    s: Vec2,
    theta: f32,
    phi: f32,
}

impl ToolMotion {
    fn pose(&self, t: f32) -> ToolPose {
        let s = match self.lin_vel {
            Some((vx, vy)) => self.center.add(Vec2::new(vx * t, vy * t)),
            None => self
                .center
                .add(Vec2::new(
                    self.amp1.x * (self.om1 * t + self.ph1).sin(),
                    self.amp1.y * (self.om1 * t + self.ph1 + 1.3).sin(),
                ))
                .add(Vec2::new(
                    self.amp2.x * (self.om2 * t + self.ph2).sin(),
                    self.amp2.y * (self.om2 * t + self.ph2 + 0.7).sin(),
                )),
        };
        let theta = self.theta0 + self.rot_amp * (self.rot_om * t + self.rot_ph).sin();
        let phi =
            self.phi_base + self.phi_amp * 0.5 * (1.0 + (self.phi_om * t + self.phi_ph).sin());
        ToolPose { s, theta, phi }
    }

    fn head(&self, pose: &ToolPose) -> Vec2 {
        pose.s.add(Vec2::new(self.shaft_len, 0.0).rot(pose.theta))
    }

    /// World position of a local point on one part (0 = shaft, 1 = left
    /// clasper at +phi, 2 = right clasper at -phi).
    fn part_to_world(&self, pose: &ToolPose, part: usize, q: Vec2) -> Vec2 {
        match part {
            0 => pose.s.add(q.rot(pose.theta)),
            1 => self.head(pose).add(q.rot(pose.theta + pose.phi)),
            _ => self.head(pose).add(q.rot(pose.theta - pose.phi)),
        }
    }

    fn world_to_part(&self, pose: &ToolPose, part: usize, p: Vec2) -> Vec2 {
        match part {
            0 => p.sub(pose.s).rot(-pose.theta),
            1 => p.sub(self.head(pose)).rot(-(pose.theta + pose.phi)),
            _ => p.sub(self.head(pose)).rot(-(pose.theta - pose.phi)),
        }
    }

    fn part_len(&self, part: usize) -> f32 {
        if part == 0 {
            self.shaft_len
        } else {
            self.clasp_len
        }
    }

    fn part_radius(&self, part: usize) -> f32 {
        if part == 0 {
            self.shaft_r
        } else {
            self.clasp_r
        }
    }

    /// Relative depth of a point on a part; claspers sit on top (nearer).
    fn part_depth(&self, part: usize, u: f32, tool_offset: f32) -> f32 {
        let frac = u / self.part_len(part);
        let d = if part == 0 { 0.52 + 0.22 * frac } else { 0.34 + 0.10 * frac };
        d + tool_offset
    }

    fn part_color(&self, part: usize, u: f32) -> [f32; 3] {
        match part {
            0 => {
                let frac = u / self.shaft_len;
                let mut g = 0.34 + 0.50 * frac;
                // dark ring marks the mid-shaft keypoint
                if (u - 0.5 * self.shaft_len).abs() <= 2.5 {
                    g *= 0.45;
                }
                [g * self.tint[0], g * self.tint[1], g * self.tint[2]]
            }
            1 => {
                let g = 0.88 - 0.12 * (u / self.clasp_len);
                [g * self.tint[0], g * self.tint[1], g * self.tint[2]]
            }
            _ => {
                let g = 0.60 - 0.10 * (u / self.clasp_len);
                [g * self.tint[0], g * self.tint[1], g * self.tint[2]]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Background noise
// ---------------------------------------------------------------------------

fn hash01(ix: i64, iy: i64, seed: u64) -> f32 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn value_noise(x: f32, y: f32, cell: f32, seed: u64) -> f32 {
    let gx = x / cell;
    let gy = y / cell;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = hash01(ix, iy, seed);
    let v01 = hash01(ix + 1, iy, seed);
    let v10 = hash01(ix, iy + 1, seed);
    let v11 = hash01(ix + 1, iy + 1, seed);
    (v00 * (1.0 - sx) + v01 * sx) * (1.0 - sy) + (v10 * (1.0 - sx) + v11 * sx) * sy
}

fn background_intensity(x: f32, y: f32, seed: u64) -> f32 {
    0.5 * value_noise(x, y, 31.0, seed)
        + 0.3 * value_noise(x, y, 13.0, seed ^ 0xA5A5)
        + 0.2 * value_noise(x, y, 5.0, seed ^ 0x5A5A)
}

fn background_color(x: f32, y: f32, t: f32, drift: (f32, f32), seed: u64) -> [f32; 3] {
    let base = 0.16 + 0.34 * background_intensity(x - t * drift.0, y - t * drift.1, seed);
    [base * 0.80, base, base * 0.88]
}

// ---------------------------------------------------------------------------
// Clip generation
// ---------------------------------------------------------------------------

/// A generated clip with analytic ground truth.
pub struct SynthClip {
    pub cfg: SceneConfig,
    pub taxonomy: ClassTaxonomy,
    pub frames: Vec<Tensor>,
    pub annotations: Vec<KeypointAnnotation>,
    /// Analytic depth per frame, background exactly 1.0.
    pub depths: Vec<Tensor>,
    /// Tool occupancy per frame (pixel covered by any part).
    pub occupancy: Vec<Vec<bool>>,
    tools: Vec<ToolMotion>,
    /// Per frame, per pixel: 0 = background, else tool*3 + part + 1.
    part_maps: Vec<Vec<u8>>,
}

impl SynthClip {
    /// Exact analytic flow (current to past) between two frames of the
    /// clip: for tool pixels, the rigid/articulated part displacement; for
    /// background pixels, the texture drift.
    pub fn flow(&self, t: usize, past: usize) -> Tensor {
        let (h, w) = (self.cfg.h, self.cfg.w);
        let mut data = vec![0.0f32; 2 * h * w];
        let lag = t as f32 - past as f32;
        let drift = self.cfg.background_drift;
        let parts = &self.part_maps[t];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let (u, v) = match parts[p] {
                    0 => (-lag * drift.0, -lag * drift.1),
                    code => {
                        let tool = (code as usize - 1) / 3;
                        let part = (code as usize - 1) % 3;
                        let tm = &self.tools[tool];
                        let pose_t = tm.pose(t as f32);
                        let pose_p = tm.pose(past as f32);
                        let stationary = pose_t.s.x == pose_p.s.x
                            && pose_t.s.y == pose_p.s.y
                            && pose_t.theta == pose_p.theta
                            && pose_t.phi == pose_p.phi;
                        if stationary {
                            (0.0, 0.0)
                        } else {
                            let world = Vec2::new(px as f32, py as f32);
                            let q = tm.world_to_part(&pose_t, part, world);
                            let back = tm.part_to_world(&pose_p, part, q);
                            (back.x - world.x, back.y - world.y)
                        }
                    }
                };
                data[p] = u;
                data[h * w + p] = v;
            }
        }
        Tensor::from_vec(vec![2, h, w], data).expect("flow shape")
    }
}

fn tool_tint(tool: usize) -> [f32; 3] {
    if tool == 0 {
        [0.90, 0.94, 1.0]
    } else {
        [1.0, 0.93, 0.84]
    }
}

fn make_tools(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<ToolMotion> {
    let hm = cfg.h as f32;
    let wm = cfg.w as f32;
    let scale = hm.min(wm);
    let shaft_len = (scale * 0.50).clamp(24.0, 80.0);
    let shaft_r = (shaft_len * 0.060).max(2.6);
    let clasp_len = (shaft_len * 0.30).max(9.0);
    let clasp_r = (shaft_r * 0.62).max(1.8);

    let mut tools = Vec::new();
    for tool in 0..cfg.num_tools {
        // Tool 0 enters from the left, tool 1 from the right.
        let from_left = tool == 0;
        let theta0 = if from_left {
            rng.gen_range(-0.30..0.30)
        } else {
            std::f32::consts::PI + rng.gen_range(-0.30..0.30)
        };
        let wander = if cfg.linear_velocity.is_some() {
            0.0
        } else {
            (cfg.motion_amplitude * 4.0).min(scale * 0.08)
        };
        // Linear paths shift the anchor by travel over the clip; shrink the
        // placement window accordingly so the whole path stays inside.
        let steps = (cfg.frames_per_clip.max(1) - 1) as f32;
        let (travel_x, travel_y) = match cfg.linear_velocity {
            Some((vx, vy)) => (vx * steps, vy * steps),
            None => (0.0, 0.0),
        };
        let margin = KEYPOINT_MARGIN + wander + 2.0;
        let x_lo = margin + (-travel_x).max(0.0);
        let x_hi = wm - 1.0 - margin - travel_x.max(0.0);
        let mut safe_range = |lo: f32, hi: f32| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                // degenerate window; bounds validation rejects it later
                0.5 * (lo + hi)
            }
        };
        let cx = if from_left {
            safe_range(x_lo, (x_lo + 6.0).min(x_hi))
        } else {
            safe_range((x_hi - 6.0).max(x_lo), x_hi)
        };
        // keep the swept arc of the far end inside vertically
        let reach = shaft_len + clasp_len;
        let max_tilt = 0.30 + cfg.rotation_amplitude * 8.0 + 0.40 + cfg.clasper_amplitude;
        let tip_span = reach * max_tilt.min(1.2).sin().abs();
        let cy_lo = (margin + tip_span + (-travel_y).max(0.0)).min(hm * 0.45);
        let cy_hi = (hm - 1.0 - margin - tip_span - travel_y.max(0.0)).max(hm * 0.55);
        let cy = safe_range(cy_lo, cy_hi);

        let om1 = rng.gen_range(0.20..0.45);
        let om2 = rng.gen_range(0.50..0.90);
        let a1 = (0.6 * cfg.motion_amplitude / om1).min(wander.max(0.001));
        let a2 = (0.4 * cfg.motion_amplitude / om2).min(wander.max(0.001));
        tools.push(ToolMotion {
            center: Vec2::new(cx, cy),
            theta0,
            shaft_len,
            shaft_r,
            clasp_len,
            clasp_r,
            lin_vel: cfg.linear_velocity,
            amp1: Vec2::new(a1, a1 * rng.gen_range(0.5..1.0)),
            om1,
            ph1: rng.gen_range(0.0..std::f32::consts::TAU),
            amp2: Vec2::new(a2, a2 * rng.gen_range(0.5..1.0)),
            om2,
            ph2: rng.gen_range(0.0..std::f32::consts::TAU),
            rot_amp: if cfg.rotation_amplitude > 0.0 {
                rng.gen_range(0.5..1.0) * cfg.rotation_amplitude * 8.0
            } else {
                0.0
            },
            rot_om: 0.125,
            rot_ph: rng.gen_range(0.0..std::f32::consts::TAU),
            phi_base: 0.40,
            phi_amp: cfg.clasper_amplitude,
            phi_om: rng.gen_range(0.3..0.6),
            phi_ph: rng.gen_range(0.0..std::f32::consts::TAU),
            tint: tool_tint(tool),
        });
    }
    tools
}

/// Keypoints of one tool at one pose: end, mid-shaft, head, right tip, left
/// tip (taxonomy order).
fn tool_keypoints(tm: &ToolMotion, pose: &ToolPose) -> Vec<Vec2> {
    let head = tm.head(pose);
    let shaft_mid = tm.part_to_world(pose, 0, Vec2::new(0.5 * tm.shaft_len, 0.0));
    let tip_l = tm.part_to_world(pose, 1, Vec2::new(tm.clasp_len, 0.0));
    let tip_r = tm.part_to_world(pose, 2, Vec2::new(tm.clasp_len, 0.0));
    vec![pose.s, shaft_mid, head, tip_r, tip_l]
}

fn annotation_for(
    cfg: &SceneConfig,
    taxonomy: &ClassTaxonomy,
    tools: &[ToolMotion],
    video_id: &str,
    t: usize,
) -> Result<KeypointAnnotation> {
    let mut keypoints = Vec::new();
    for (ti, tm) in tools.iter().enumerate() {
        let pose = tm.pose(t as f32);
        let kps = tool_keypoints(tm, &pose);
        match cfg.taxonomy_style {
            TaxonomyStyle::Endovis => {
                let names =
                    ["EndPoint", "ShaftPoint", "HeadPoint", "RightClasperPoint", "LeftClasperPoint"];
                for (name, p) in names.iter().zip(&kps) {
                    let full = if cfg.num_tools == 1 {
                        name.to_string()
                    } else {
                        format!("{}{}", if ti == 0 { "L_" } else { "R_" }, name)
                    };
                    let class_id = taxonomy.id_of(&full).expect("taxonomy covers synth classes");
                    keypoints.push(Keypoint { class_id, x: p.x, y: p.y, visible: true });
                }
            }
            TaxonomyStyle::Jigsaws => {
                let side = if ti == 0 { "L_" } else { "R_" };
                let tip = taxonomy.id_of(&format!("{side}TipPoint")).expect("tip class");
                let base = taxonomy.id_of(&format!("{side}JawBasePoint")).expect("base class");
                keypoints.push(Keypoint { class_id: tip, x: kps[4].x, y: kps[4].y, visible: true });
                keypoints.push(Keypoint { class_id: tip, x: kps[3].x, y: kps[3].y, visible: true });
                keypoints.push(Keypoint { class_id: base, x: kps[2].x, y: kps[2].y, visible: true });
            }
        }
    }
    for kp in &keypoints {
        if kp.x < KEYPOINT_MARGIN
            || kp.y < KEYPOINT_MARGIN
            || kp.x > cfg.w as f32 - 1.0 - KEYPOINT_MARGIN
            || kp.y > cfg.h as f32 - 1.0 - KEYPOINT_MARGIN
        {
            return Err(Error::Validation(format!(
                "config pushes a keypoint to ({:.1}, {:.1}), outside the {}x{} safe area at frame {t}",
                kp.x, kp.y, cfg.w, cfg.h
            )));
        }
    }
    Ok(KeypointAnnotation { video_id: video_id.to_string(), frame_index: t, keypoints })
}

struct RenderedFrame {
    rgb: Vec<f32>,
    depth: Vec<f32>,
    parts: Vec<u8>,
    occupancy: Vec<bool>,
}

fn render_frame(cfg: &SceneConfig, tools: &[ToolMotion], noise_seed: u64, t: usize) -> RenderedFrame {
    let (h, w) = (cfg.h, cfg.w);
    let plane = h * w;
    let mut rgb = vec![0.0f32; 3 * plane];
    let mut depth = vec![1.0f32; plane];
    let mut parts = vec![0u8; plane];
    let mut occupancy = vec![false; plane];

    // Temporal supersampling offsets for motion blur.
    let times: Vec<f32> = if cfg.motion_blur {
        vec![t as f32 - 0.3, t as f32, t as f32 + 0.3]
    } else {
        vec![t as f32]
    };
    let tool_offsets: Vec<f32> = (0..tools.len()).map(|i| -0.06 * i as f32).collect();

    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let world = Vec2::new(px as f32, py as f32);

            let mut acc = [0.0f32; 3];
            for &time in &times {
                let mut color =
                    background_color(px as f32, py as f32, time, cfg.background_drift, noise_seed);
                // Paint covering parts far-to-near.
                let mut hits: Vec<(f32, f32, [f32; 3])> = Vec::new();
                for (ti, tm) in tools.iter().enumerate() {
                    let pose = tm.pose(time);
                    for part in 0..3 {
                        let q = tm.world_to_part(&pose, part, world);
                        let (d, u) = capsule_local(q, tm.part_len(part));
                        let sd = d - tm.part_radius(part);
                        if sd < EDGE_WIDTH * 0.5 {
                            let cov = (0.5 - sd / EDGE_WIDTH).clamp(0.0, 1.0);
                            hits.push((
                                tm.part_depth(part, u, tool_offsets[ti]),
                                cov,
                                tm.part_color(part, u),
                            ));
                        }
                    }
                }
                hits.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite depths"));
                for (_, cov, c) in &hits {
                    for ch in 0..3 {
                        color[ch] = color[ch] * (1.0 - cov) + c[ch] * cov;
                    }
                }
                for ch in 0..3 {
                    acc[ch] += color[ch];
                }
            }
            let inv = 1.0 / times.len() as f32;
            for ch in 0..3 {
                rgb[ch * plane + p] = (acc[ch] * inv).clamp(0.0, 1.0);
            }

            // Hard occupancy, depth, and part id at the nominal time.
            let mut best: Option<(usize, usize, f32)> = None;
            for (ti, tm) in tools.iter().enumerate() {
                let pose = tm.pose(t as f32);
                for part in 0..3 {
                    let q = tm.world_to_part(&pose, part, world);
                    let (d, u) = capsule_local(q, tm.part_len(part));
                    if d <= tm.part_radius(part) {
                        let dep = tm.part_depth(part, u, tool_offsets[ti]);
                        if best.map_or(true, |(_, _, bd)| dep < bd) {
                            best = Some((ti, part, dep));
                        }
                    }
                }
            }
            if let Some((ti, part, dep)) = best {
                depth[p] = dep;
                parts[p] = (ti * 3 + part + 1) as u8;
                occupancy[p] = true;
            }
        }
    }
    RenderedFrame { rgb, depth, parts, occupancy }
}

/// Generates one clip: frames, exact annotations, analytic depth, and the
/// pose record needed to evaluate analytic flow between any frame pair.
pub fn gen_clip(cfg: &SceneConfig, seed: u64) -> Result<SynthClip> {
    cfg.validate()?;
    let taxonomy = cfg.taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.texture_seed.rotate_left(17));
    let tools = make_tools(cfg, &mut rng);
    let noise_seed = rng.gen::<u64>();

    // Validate keypoint bounds over the whole clip before rendering.
    let mut annotations = Vec::with_capacity(cfg.frames_per_clip);
    for t in 0..cfg.frames_per_clip {
        annotations.push(annotation_for(cfg, &taxonomy, &tools, "clip", t)?);
    }

    let rendered: Vec<RenderedFrame> = (0..cfg.frames_per_clip)
        .into_par_iter()
        .map(|t| render_frame(cfg, &tools, noise_seed, t))
        .collect();

    let mut frames = Vec::with_capacity(rendered.len());
    let mut depths = Vec::with_capacity(rendered.len());
    let mut part_maps = Vec::with_capacity(rendered.len());
    let mut occupancy = Vec::with_capacity(rendered.len());
    for r in rendered {
        frames.push(Tensor::from_vec(vec![3, cfg.h, cfg.w], r.rgb)?);
        depths.push(Tensor::from_vec(vec![1, cfg.h, cfg.w], r.depth)?);
        part_maps.push(r.parts);
        occupancy.push(r.occupancy);
    }
    Ok(SynthClip {
        cfg: cfg.clone(),
        taxonomy,
        frames,
        annotations,
        depths,
        occupancy,
        tools,
        part_maps,
    })
}

/// Writes `n_clips` clips in the on-disk dataset layout. Returns the number
/// of annotated frames written.
pub fn gen_dataset(
    cfg: &SceneConfig,
    n_clips: usize,
    seed: u64,
    root: impl AsRef<std::path::Path>,
) -> Result<usize> {
    cfg.validate()?;
    let root = root.as_ref();
    let taxonomy = cfg.taxonomy();
    std::fs::create_dir_all(root.join("annotations")).map_err(|e| Error::io(root, e))?;
    taxonomy.save(root.join("taxonomy.json"))?;
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(root.join("synth_config.json"), cfg_json)
        .map_err(|e| Error::io(root.join("synth_config.json"), e))?;

    let mut total = 0;
    for clip in 0..n_clips {
        let video_id = format!("clip{clip:03}");
        let clip_seed = seed.wrapping_add(0x9E37_79B9u64.wrapping_mul(clip as u64 + 1));
        let sc = gen_clip(cfg, clip_seed)?;
        let vdir = root.join("videos").join(&video_id);
        let fdir = vdir.join("frames");
        let flowdir = vdir.join("flow");
        let ddir = vdir.join("depth");
        for d in [&fdir, &flowdir, &ddir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d.clone(), e))?;
        }
        for (t, frame) in sc.frames.iter().enumerate() {
            formats::write_image(fdir.join(format!("{t:06}.png")), frame)?;
            formats::write_pfm(ddir.join(format!("{t:06}.pfm")), &sc.depths[t])?;
        }
        let mut written = std::collections::BTreeSet::new();
        for t in 0..sc.frames.len() {
            for lag in 1..=cfg.max_flow_lag {
                let past = t.saturating_sub(lag);
                if past == t || !written.insert((t, past)) {
                    continue;
                }
                let flow = sc.flow(t, past);
                formats::write_flo(flowdir.join(format!("{t:06}_to_{past:06}.flo")), &flow)?;
            }
        }
        let anns: Vec<KeypointAnnotation> = sc
            .annotations
            .iter()
            .map(|a| KeypointAnnotation { video_id: video_id.clone(), ..a.clone() })
            .collect();
        write_annotations(
            root.join("annotations").join(format!("{video_id}.json")),
            &video_id,
            &anns,
            &taxonomy,
        )?;
        total += sc.frames.len();
    }
    Ok(total)
}
