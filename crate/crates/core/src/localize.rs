//! Blob analysis: segmentation maps to keypoint coordinates.
//!
//! Connected components are found with a two-pass union-find labeling under
//! 8-connectivity; per class the largest blobs (up to the taxonomy's
//! max_instances) yield centroid detections.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{ClassTaxonomy, SegMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MIN_AREA: usize = 3;

/// A maximal 8-connected component of same-class pixels.
#[derive(Debug, Clone)]
pub struct Blob {
    pub class_id: usize,
    /// Linear (row-major) pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub area: usize,
    /// Arithmetic mean of member pixel centers (x, y).
    pub centroid: (f32, f32),
}

/// One localized keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub x: f32,
    pub y: f32,
    /// Mean predicted probability of the class over the blob (1.0 when
    /// extracted from a hard label map).
    pub confidence: f32,
}

/// Per-frame localization output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // smaller root wins, keeping labels ordered by first pixel
            if ra < rb {
                self.parent[rb as usize] = ra;
            } else {
                self.parent[ra as usize] = rb;
            }
        }
    }
}

/// 8-connected components of a binary mask. Blobs come out ordered by their
/// first (row-major) pixel; `class_id` is left 0 for the caller to fill.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Blob> {
    assert_eq!(mask.len(), h * w, "mask length must match dimensions");
    let mut uf = UnionFind::new(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask[p] {
                continue;
            }
            // union with already-visited neighbors: W, NW, N, NE
            if x > 0 && mask[p - 1] {
                uf.union(p as u32, (p - 1) as u32);
            }
            if y > 0 {
                let up = p - w;
                if x > 0 && mask[up - 1] {
                    uf.union(p as u32, (up - 1) as u32);
                }
                if mask[up] {
                    uf.union(p as u32, up as u32);
                }
                if x + 1 < w && mask[up + 1] {
                    uf.union(p as u32, (up + 1) as u32);
                }
            }
        }
    }
    let mut blobs: Vec<Blob> = Vec::new();
    let mut root_to_blob: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for p in 0..h * w {
        if !mask[p] {
            continue;
        }
        let root = uf.find(p as u32);
        let idx = *root_to_blob.entry(root).or_insert_with(|| {
            blobs.push(Blob { class_id: 0, pixels: Vec::new(), area: 0, centroid: (0.0, 0.0) });
            blobs.len() - 1
        });
        blobs[idx].pixels.push(p);
    }
    for b in &mut blobs {
        b.area = b.pixels.len();
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        for &p in &b.pixels {
            sx += (p % w) as f64;
            sy += (p / w) as f64;
        }
        b.centroid = ((sx / b.area as f64) as f32, (sy / b.area as f64) as f32);
    }
    blobs
}

/// Hard labels from a [C,H,W] probability map by per-pixel argmax (ties to
/// the lower class index).
pub fn argmax_segmap(probmap: &Tensor) -> Result<SegMap> {
    let (c, h, w) = probmap.chw()?;
    let plane = h * w;
    let mut labels = vec![0u32; plane];
    let data = probmap.data();
    for p in 0..plane {
        let mut best = 0usize;
        let mut bestv = data[p];
        for ch in 1..c {
            let v = data[ch * plane + p];
            if v > bestv {
                bestv = v;
                best = ch;
            }
        }
        labels[p] = best as u32;
    }
    Ok(SegMap { h, w, labels })
}

/// Keypoints from a hard label map: per class, blobs sorted by area
/// descending (ties by smaller first-pixel index), top max_instances blobs
/// with area >= min_area become centroid detections. `probmap` supplies
/// blob confidences when available.
pub fn extract_keypoints(
    segmap: &SegMap,
    probmap: Option<&Tensor>,
    taxonomy: &ClassTaxonomy,
    min_area: usize,
    frame_index: usize,
) -> TrackResult {
    let (h, w) = (segmap.h, segmap.w);
    let plane = h * w;
    let mut detections = Vec::new();
    let mut mask = vec![false; plane];
    for class_id in taxonomy.keypoint_classes() {
        for (m, &l) in mask.iter_mut().zip(&segmap.labels) {
            *m = l == class_id as u32;
        }
        let mut blobs = connected_components(&mask, h, w);
        if blobs.is_empty() {
            continue;
        }
        // area descending; equal areas by smaller first-pixel index
        blobs.sort_by(|a, b| b.area.cmp(&a.area).then(a.pixels[0].cmp(&b.pixels[0])));
        for blob in blobs.iter().take(taxonomy.max_instances(class_id) as usize) {
            if blob.area < min_area {
                continue;
            }
            let confidence = match probmap {
                Some(pm) => {
                    let pc = pm.channel(class_id);
                    let s: f64 = blob.pixels.iter().map(|&p| pc[p] as f64).sum();
                    (s / blob.area as f64) as f32
                }
                None => 1.0,
            };
            detections.push(Detection {
                class_id,
                x: blob.centroid.0,
                y: blob.centroid.1,
                confidence,
            });
        }
    }
    TrackResult { frame_index, detections }
}

/// Probability-map front end: argmax, then blob extraction.
pub fn extract_keypoints_from_probmap(
    probmap: &Tensor,
    taxonomy: &ClassTaxonomy,
    min_area: usize,
    frame_index: usize,
) -> Result<TrackResult> {
    let segmap = argmax_segmap(probmap)?;
    Ok(extract_keypoints(&segmap, Some(probmap), taxonomy, min_area, frame_index))
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrackLine {
    frame: usize,
    detections: Vec<DetLine>,
}

#[derive(Serialize, Deserialize)]
struct DetLine {
    class: String,
    x: f32,
    y: f32,
    conf: f32,
}

/// One JSON object per frame:
/// `{"frame": int, "detections": [{"class", "x", "y", "conf"}]}`.
pub fn write_track_results(
    path: impl AsRef<Path>,
    results: &[TrackResult],
    taxonomy: &ClassTaxonomy,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in results {
        let line = TrackLine {
            frame: r.frame_index,
            detections: r
                .detections
                .iter()
                .map(|d| DetLine {
                    class: taxonomy.name(d.class_id).to_string(),
                    x: d.x,
                    y: d.y,
                    conf: d.confidence,
                })
                .collect(),
        };
        let json = serde_json::to_string(&line).expect("track line serializes");
        writeln!(f, "{json}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_track_results(
    path: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<TrackResult>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrackLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", ln + 1)))?;
        let detections = parsed
            .detections
            .iter()
            .map(|d| {
                let class_id = taxonomy.id_of(&d.class).ok_or_else(|| {
                    Error::parse(path, format!("line {}: unknown class {:?}", ln + 1, d.class))
                })?;
                Ok(Detection { class_id, x: d.x, y: d.y, confidence: d.conf })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(TrackResult { frame_index: parsed.frame, detections });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{rasterize_masks, Keypoint, KeypointAnnotation, MaskSpec};

    fn taxo() -> ClassTaxonomy {
        ClassTaxonomy::endovis(2)
    }

    /// BFS flood-fill oracle for component equivalence.
    fn flood_fill_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
        let mut seen = vec![false; h * w];
        let mut comps = Vec::new();
        for start in 0..h * w {
            if !mask[start] || seen[start] {
                continue;
            }
            let mut q = std::collections::VecDeque::new();
            let mut comp = Vec::new();
            q.push_back(start);
            seen[start] = true;
            while let Some(p) = q.pop_front() {
                comp.push(p);
                let (x, y) = (p % w, p / w);
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i32 + dx;
                        let ny = y as i32 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                            continue;
                        }
                        let np = ny as usize * w + nx as usize;
                        if mask[np] && !seen[np] {
                            seen[np] = true;
                            q.push_back(np);
                        }
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by_key(|c| c[0]);
        comps
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&[false; 16], 4, 4).is_empty());
    }

    #[test]
    fn diagonal_pixels_join_under_8_connectivity() {
        let mut mask = vec![false; 16];
        mask[0] = true; // (0,0)
        mask[5] = true; // (1,1)
        let blobs = connected_components(&mask, 4, 4);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area, 2);
    }

    #[test]
    fn components_match_flood_fill_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mask: Vec<bool> = (0..32 * 32).map(|_| rng.gen_bool(0.35)).collect();
            let blobs = connected_components(&mask, 32, 32);
            let oracle = flood_fill_components(&mask, 32, 32);
            assert_eq!(blobs.len(), oracle.len());
            for (b, o) in blobs.iter().zip(&oracle) {
                assert_eq!(&b.pixels, o);
            }
            // partition property: every foreground pixel in exactly one blob
            let total: usize = blobs.iter().map(|b| b.area).sum();
            assert_eq!(total, mask.iter().filter(|&&m| m).count());
        }
    }

    #[test]
    fn rasterized_disk_centroid_recovers_keypoint() {
        let t = taxo();
        let ann = KeypointAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            keypoints: vec![Keypoint { class_id: 1, x: 40.0, y: 60.0, visible: true }],
        };
        let map = rasterize_masks(&ann, &MaskSpec::default(), &t, 96, 96).unwrap();
        let res = extract_keypoints(&map, None, &t, DEFAULT_MIN_AREA, 0);
        assert_eq!(res.detections.len(), 1);
        let d = &res.detections[0];
        let err = ((d.x - 40.0).powi(2) + (d.y - 60.0).powi(2)).sqrt();
        assert!(err <= 0.51, "centroid off by {err}");
    }

    #[test]
    fn blobs_ordered_by_area_and_thresholded() {
        let t = ClassTaxonomy::jigsaws(); // L_TipPoint has max_instances 2
        let tip = t.id_of("L_TipPoint").unwrap() as u32;
        let mut map = SegMap::zeros(20, 40);
        // blob A: 30 px at left; blob B: 12 px at right; blob C: 2 px
        for y in 0..5 {
            for x in 0..6 {
                map.labels[(y + 2) * 40 + x + 1] = tip;
            }
        }
        for y in 0..3 {
            for x in 0..4 {
                map.labels[(y + 10) * 40 + x + 30] = tip;
            }
        }
        map.labels[19 * 40 + 20] = tip;
        map.labels[19 * 40 + 21] = tip;
        let res = extract_keypoints(&map, None, &t, 3, 0);
        let tips: Vec<_> = res.detections.iter().filter(|d| d.class_id == tip as usize).collect();
        assert_eq!(tips.len(), 2, "two largest blobs, third too small");
        assert!(tips[0].x < 10.0, "largest blob first");
        assert!(tips[1].x > 25.0);
    }

    #[test]
    fn small_blob_below_min_area_is_dropped() {
        let t = taxo();
        let mut map = SegMap::zeros(8, 8);
        map.labels[0] = 1;
        map.labels[1] = 1;
        let res = extract_keypoints(&map, None, &t, 3, 0);
        assert!(res.detections.is_empty());
    }

    #[test]
    fn centroid_is_translation_equivariant() {
        let t = taxo();
        let ann = KeypointAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            keypoints: vec![Keypoint { class_id: 2, x: 20.0, y: 20.0, visible: true }],
        };
        let m1 = rasterize_masks(&ann, &MaskSpec::default(), &t, 64, 64).unwrap();
        let ann2 = KeypointAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            keypoints: vec![Keypoint { class_id: 2, x: 27.0, y: 31.0, visible: true }],
        };
        let m2 = rasterize_masks(&ann2, &MaskSpec::default(), &t, 64, 64).unwrap();
        let d1 = &extract_keypoints(&m1, None, &t, 3, 0).detections[0];
        let d2 = &extract_keypoints(&m2, None, &t, 3, 0).detections[0];
        assert!((d2.x - d1.x - 7.0).abs() < 1e-5);
        assert!((d2.y - d1.y - 11.0).abs() < 1e-5);
    }

    #[test]
    fn track_results_round_trip_jsonl() {
        let t = taxo();
        let results = vec![
            TrackResult {
                frame_index: 0,
                detections: vec![Detection { class_id: 1, x: 4.5, y: 6.25, confidence: 0.9 }],
            },
            TrackResult { frame_index: 1, detections: vec![] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.jsonl");
        write_track_results(&p, &results, &t).unwrap();
        let back = read_track_results(&p, &t).unwrap();
        assert_eq!(results, back);
    }
}
