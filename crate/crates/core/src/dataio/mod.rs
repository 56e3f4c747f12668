//! Annotation ingestion, keypoint-ROI mask rasterization, augmentation, and
//! clip-window assembly.
//!
//! Dataset layout on disk:
//! ```text
//! <root>/taxonomy.json
//! <root>/videos/<vid>/frames/%06d.png
//! <root>/videos/<vid>/flow/%06d_to_%06d.flo     (current_to_past)
//! <root>/videos/<vid>/depth/%06d.pfm
//! <root>/annotations/<vid>.json
//! ```

pub mod augment;
pub mod formats;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROI_RADIUS: f32 = 5.0;

// ---------------------------------------------------------------------------
// Taxonomy
// ---------------------------------------------------------------------------

/// Ordered keypoint class taxonomy. Class 0 is always the background; the
/// keypoint classes occupy ids 1..C in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    max_instances: Vec<u32>,
    flip_map: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    classes: Vec<TaxonomyEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TaxonomyEntry {
    Name(String),
    Full {
        name: String,
        #[serde(default = "default_one")]
        max_instances: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        flip_to: Option<String>,
    },
}

fn default_one() -> u32 {
    1
}

/// Left/right mirror of a class name: swaps an `L_`/`R_` tool prefix and any
/// `Left`/`Right` substring (clasper side), so `L_LeftClasperPoint` maps to
/// `R_RightClasperPoint`.
fn mirror_name(name: &str) -> String {
    let (prefix, rest) = if let Some(r) = name.strip_prefix("L_") {
        ("R_", r)
    } else if let Some(r) = name.strip_prefix("R_") {
        ("L_", r)
    } else {
        ("", name)
    };
    let rest = if let Some(i) = rest.find("Left") {
        format!("{}Right{}", &rest[..i], &rest[i + 4..])
    } else if let Some(i) = rest.find("Right") {
        format!("{}Left{}", &rest[..i], &rest[i + 5..])
    } else {
        rest.to_string()
    };
    format!("{prefix}{rest}")
}

impl ClassTaxonomy {
    pub fn new(entries: &[(&str, u32, Option<&str>)]) -> Result<Self> {
        let mut names = vec!["background".to_string()];
        let mut max_instances = vec![0u32];
        for (name, mi, _) in entries {
            if *mi == 0 {
                return Err(Error::Validation(format!("class {name}: max_instances must be >= 1")));
            }
            if names.iter().any(|n| n == name) {
                return Err(Error::Validation(format!("duplicate class name {name}")));
            }
            names.push(name.to_string());
            max_instances.push(*mi);
        }
        let mut flip_map: Vec<u32> = (0..names.len() as u32).collect();
        for (i, (name, _, flip_to)) in entries.iter().enumerate() {
            let id = i + 1;
            let target = match flip_to {
                Some(t) => t.to_string(),
                None => mirror_name(name),
            };
            if let Some(tid) = names.iter().position(|n| *n == target) {
                flip_map[id] = tid as u32;
            }
        }
        Ok(ClassTaxonomy { names, max_instances, flip_map })
    }

    /// EndoVis-style taxonomy: five keypoints per tool. With two tools the
    /// names carry `L_`/`R_` prefixes, giving C = 11; one tool gives C = 6.
    pub fn endovis(num_tools: usize) -> Self {
        let kps = ["EndPoint", "ShaftPoint", "HeadPoint", "RightClasperPoint", "LeftClasperPoint"];
        let mut entries: Vec<String> = Vec::new();
        match num_tools {
            1 => entries.extend(kps.iter().map(|k| k.to_string())),
            _ => {
                for side in ["L_", "R_"] {
                    entries.extend(kps.iter().map(|k| format!("{side}{k}")));
                }
            }
        }
        let refs: Vec<(&str, u32, Option<&str>)> =
            entries.iter().map(|n| (n.as_str(), 1, None)).collect();
        ClassTaxonomy::new(&refs).expect("built-in taxonomy is valid")
    }

    /// JIGSAWS-style taxonomy: per tool one tip class (up to two instances,
    /// one per jaw) and one jaw-base class; C = 5.
    pub fn jigsaws() -> Self {
        ClassTaxonomy::new(&[
            ("L_TipPoint", 2, None),
            ("L_JawBasePoint", 1, None),
            ("R_TipPoint", 2, None),
            ("R_JawBasePoint", 1, None),
        ])
        .expect("built-in taxonomy is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// Keypoint class ids (everything except background).
    pub fn keypoint_classes(&self) -> Vec<usize> {
        (1..self.names.len()).collect()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn max_instances(&self, id: usize) -> u32 {
        self.max_instances[id]
    }

    pub fn flip_class(&self, id: usize) -> usize {
        self.flip_map[id] as usize
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_file_repr()).expect("taxonomy serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TaxonomyFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        Self::from_file_repr(file).map_err(|e| Error::parse(path, e.to_string()))
    }

    fn to_file_repr(&self) -> TaxonomyFile {
        TaxonomyFile {
            classes: self.names[1..]
                .iter()
                .enumerate()
                .map(|(i, n)| TaxonomyEntry::Full {
                    name: n.clone(),
                    max_instances: self.max_instances[i + 1],
                    flip_to: Some(self.names[self.flip_map[i + 1] as usize].clone()),
                })
                .collect(),
        }
    }

    fn from_file_repr(file: TaxonomyFile) -> Result<Self> {
        let owned: Vec<(String, u32, Option<String>)> = file
            .classes
            .into_iter()
            .map(|e| match e {
                TaxonomyEntry::Name(n) => (n, 1, None),
                TaxonomyEntry::Full { name, max_instances, flip_to } => {
                    (name, max_instances, flip_to)
                }
            })
            .collect();
        let refs: Vec<(&str, u32, Option<&str>)> =
            owned.iter().map(|(n, m, f)| (n.as_str(), *m, f.as_deref())).collect();
        ClassTaxonomy::new(&refs)
    }
}

impl Serialize for ClassTaxonomy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file_repr().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassTaxonomy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = TaxonomyFile::deserialize(d)?;
        Self::from_file_repr(file).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub class_id: usize,
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointAnnotation {
    pub video_id: String,
    pub frame_index: usize,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    video: String,
    frames: Vec<AnnotationFrame>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFrame {
    index: usize,
    keypoints: Vec<AnnotationKeypoint>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationKeypoint {
    class: String,
    x: f32,
    y: f32,
    visible: bool,
}

/// Parses and validates an annotation file against a taxonomy. Invisible
/// keypoints are retained with `visible = false`.
pub fn load_annotations(
    path: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<KeypointAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::with_capacity(file.frames.len());
    for frame in &file.frames {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        let mut kps = Vec::with_capacity(frame.keypoints.len());
        for kp in &frame.keypoints {
            let class_id = taxonomy.id_of(&kp.class).ok_or_else(|| {
                Error::parse(
                    path,
                    format!("frame {}: unknown class name {:?}", frame.index, kp.class),
                )
            })?;
            if class_id == 0 {
                return Err(Error::parse(
                    path,
                    format!("frame {}: keypoints may not use the background class", frame.index),
                ));
            }
            if !kp.x.is_finite() || !kp.y.is_finite() || kp.x < 0.0 || kp.y < 0.0 {
                return Err(Error::parse(
                    path,
                    format!(
                        "frame {}: class {} has out-of-range coordinates ({}, {})",
                        frame.index, kp.class, kp.x, kp.y
                    ),
                ));
            }
            if kp.visible {
                let c = counts.entry(class_id).or_insert(0);
                *c += 1;
                if *c > taxonomy.max_instances(class_id) {
                    return Err(Error::parse(
                        path,
                        format!(
                            "frame {}: class {} exceeds max_instances {}",
                            frame.index,
                            kp.class,
                            taxonomy.max_instances(class_id)
                        ),
                    ));
                }
            }
            kps.push(Keypoint { class_id, x: kp.x, y: kp.y, visible: kp.visible });
        }
        out.push(KeypointAnnotation {
            video_id: file.video.clone(),
            frame_index: frame.index,
            keypoints: kps,
        });
    }
    Ok(out)
}

pub fn write_annotations(
    path: impl AsRef<Path>,
    video_id: &str,
    annotations: &[KeypointAnnotation],
    taxonomy: &ClassTaxonomy,
) -> Result<()> {
    let path = path.as_ref();
    let file = AnnotationFile {
        video: video_id.to_string(),
        frames: annotations
            .iter()
            .map(|a| AnnotationFrame {
                index: a.frame_index,
                keypoints: a
                    .keypoints
                    .iter()
                    .map(|k| AnnotationKeypoint {
                        class: taxonomy.name(k.class_id).to_string(),
                        x: k.x,
                        y: k.y,
                        visible: k.visible,
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).expect("annotations serialize");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Checks that every visible keypoint lies inside a WxH frame.
pub fn validate_bounds(
    anns: &[KeypointAnnotation],
    taxonomy: &ClassTaxonomy,
    h: usize,
    w: usize,
) -> Result<()> {
    for a in anns {
        for kp in &a.keypoints {
            if kp.visible && (kp.x >= w as f32 || kp.y >= h as f32) {
                return Err(Error::Validation(format!(
                    "video {} frame {}: class {} at ({}, {}) outside {w}x{h} frame",
                    a.video_id,
                    a.frame_index,
                    taxonomy.name(kp.class_id),
                    kp.x,
                    kp.y
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Segmentation maps
// ---------------------------------------------------------------------------

/// Per-pixel hard class labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl SegMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        SegMap { h, w, labels: vec![0; h * w] }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    /// One-hot [C,H,W] probability tensor for this map.
    pub fn to_onehot(&self, num_classes: usize) -> Tensor {
        let plane = self.h * self.w;
        let mut data = vec![0.0f32; num_classes * plane];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + p] = 1.0;
        }
        Tensor::from_vec(vec![num_classes, self.h, self.w], data).expect("onehot shape")
    }
}

/// ROI rasterization settings: disk radius around each keypoint.
#[derive(Debug, Clone, Copy)]
pub struct MaskSpec {
    pub radius: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { radius: DEFAULT_ROI_RADIUS }
    }
}

impl MaskSpec {
    pub fn new(radius: f32) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Validation(format!("ROI radius must be > 0, got {radius}")));
        }
        Ok(MaskSpec { radius })
    }
}

/// Rasterizes circular keypoint regions into a class-label map. A pixel
/// (px, py) gets class c iff its Euclidean distance to a visible keypoint of
/// class c is <= radius; where disks overlap the higher class id wins.
/// Centers keep full float precision.
pub fn rasterize_masks(
    ann: &KeypointAnnotation,
    spec: &MaskSpec,
    taxonomy: &ClassTaxonomy,
    h: usize,
    w: usize,
) -> Result<SegMap> {
    let mut map = SegMap::zeros(h, w);
    let r = spec.radius;
    let r2 = r * r;
    for kp in &ann.keypoints {
        if !kp.visible {
            continue;
        }
        if kp.x >= w as f32 || kp.y >= h as f32 {
            return Err(Error::Validation(format!(
                "video {} frame {}: class {} at ({}, {}) outside {w}x{h} frame",
                ann.video_id,
                ann.frame_index,
                taxonomy.name(kp.class_id),
                kp.x,
                kp.y
            )));
        }
        let x0 = ((kp.x - r).ceil().max(0.0)) as usize;
        let x1 = ((kp.x + r).floor().min((w - 1) as f32)) as usize;
        let y0 = ((kp.y - r).ceil().max(0.0)) as usize;
        let y1 = ((kp.y + r).floor().min((h - 1) as f32)) as usize;
        for py in y0..=y1 {
            let dy = py as f32 - kp.y;
            for px in x0..=x1 {
                let dx = px as f32 - kp.x;
                if dx * dx + dy * dy <= r2 {
                    let cur = &mut map.labels[py * w + px];
                    if kp.class_id as u32 > *cur {
                        *cur = kp.class_id as u32;
                    }
                }
            }
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Clip windows
// ---------------------------------------------------------------------------

/// K consecutive frames with their flow/depth context, targeting the last
/// (current) frame.
///
/// - `frames[j]` runs oldest to current; `frames[K-1]` is the current frame.
/// - `flows[i]` is the displacement from the current frame to the (i+1)-th
///   past frame (current -> t-1 first), so `flows[i]` aligns with
///   `frames[K-2-i]`.
/// - `depths[j]` aligns with `frames[j]`.
#[derive(Debug, Clone)]
pub struct ClipWindow {
    pub frames: Vec<Tensor>,
    pub flows: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    pub target: SegMap,
}

impl ClipWindow {
    pub fn k(&self) -> usize {
        self.frames.len()
    }
}

/// Frame indices for the window ending at annotated frame `t`: indices
/// before the start of the video clamp to frame 0. Last entry is `t`.
pub fn window_indices(t: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| t.saturating_sub(k - 1 - j)).collect()
}

/// Pair-level source of precomputed flow and depth maps. `flow(v, t, past)`
/// follows the current-to-past displacement convention.
pub trait FlowDepthSource {
    fn flow(&self, video: &str, t: usize, past: usize) -> Result<Tensor>;
    fn depth(&self, video: &str, t: usize) -> Result<Tensor>;
    fn frame_size(&self, video: &str) -> Result<(usize, usize)>;
}

/// Builds the window for one annotated frame.
pub fn assemble_window(
    video_id: &str,
    frames: &[Tensor],
    target: SegMap,
    t: usize,
    k: usize,
    src: &dyn FlowDepthSource,
) -> Result<ClipWindow> {
    if k < 2 {
        return Err(Error::Validation(format!("window length K must be >= 2, got {k}")));
    }
    if frames.is_empty() {
        return Err(Error::Validation("empty video".into()));
    }
    if t >= frames.len() {
        return Err(Error::Validation(format!(
            "annotated frame {t} beyond video of {} frames",
            frames.len()
        )));
    }
    let idx = window_indices(t, k);
    let wframes: Vec<Tensor> = idx.iter().map(|&i| frames[i].clone()).collect();
    let mut flows = Vec::with_capacity(k - 1);
    for i in 1..k {
        let past = t.saturating_sub(i);
        if past == t {
            let (h, w) = src.frame_size(video_id)?;
            flows.push(Tensor::zeros(&[2, h, w]));
        } else {
            flows.push(src.flow(video_id, t, past)?);
        }
    }
    let depths: Vec<Tensor> = idx
        .iter()
        .map(|&i| src.depth(video_id, i))
        .collect::<Result<_>>()?;
    Ok(ClipWindow { frames: wframes, flows, depths, target })
}

/// One window per annotated frame, in annotation order.
pub fn make_windows(
    video_id: &str,
    frames: &[Tensor],
    annotated: &[(usize, SegMap)],
    k: usize,
    src: &dyn FlowDepthSource,
) -> Result<Vec<ClipWindow>> {
    annotated
        .iter()
        .map(|(t, target)| assemble_window(video_id, frames, target.clone(), *t, k, src))
        .collect()
}
