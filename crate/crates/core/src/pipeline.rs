//! Training loops, dataset loading, checkpointing, and batch inference.
//!
//! Single-frame training minimizes the composite loss over shuffled
//! minibatches with Adam and a step-decay schedule. Multi-frame training
//! finetunes the pretrained single-frame weights at a low rate while the
//! fusion net trains at a higher rate (two optimizer groups, one schedule).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::augment::AugmentParams;
use crate::dataio::{
    assemble_window, formats, load_annotations, rasterize_masks, validate_bounds, ClassTaxonomy,
    ClipWindow, FlowDepthSource, KeypointAnnotation, MaskSpec, SegMap,
};
use crate::error::{Error, Result};
use crate::localize::{extract_keypoints_from_probmap, TrackResult, DEFAULT_MIN_AREA};
use crate::models::checkpoint::{load_model, save_mfc, save_sfc, LoadedModel};
use crate::models::{composite_loss, loss_values, MfcConfig, MfcModel, MiniSeg};
use crate::tensor::kernels;
use crate::tensor::optim::{Adam, GradAccum, LrSchedule};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sfc_lr: f32,
    pub mfc_finetune_lr: f32,
    pub mfcnet_lr: f32,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub augment: bool,
    pub val_fraction: f32,
    pub background_weight: f32,
    pub roi_radius: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            sfc_lr: 3e-5,
            mfc_finetune_lr: 1e-6,
            mfcnet_lr: 1e-4,
            schedule: LrSchedule { base_lr: 3e-5, decay_gamma: 0.1, decay_epoch: 10 },
            seed: 0,
            augment: true,
            val_fraction: 0.1,
            background_weight: crate::models::BACKGROUND_WEIGHT,
            roi_radius: crate::dataio::DEFAULT_ROI_RADIUS,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.sfc_lr <= 0.0 || self.mfcnet_lr <= 0.0 {
            return Err(Error::Validation("learning rates must be > 0".into()));
        }
        if self.mfc_finetune_lr < 0.0 {
            return Err(Error::Validation("finetune rate must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VideoData {
    pub id: String,
    pub frames: Vec<Tensor>,
    /// Sorted by frame index.
    pub annotations: Vec<KeypointAnnotation>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub taxonomy: ClassTaxonomy,
    pub videos: Vec<VideoData>,
    pub h: usize,
    pub w: usize,
}

/// Loads a dataset in the standard layout, eagerly reading all frames.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let taxonomy = ClassTaxonomy::load(root.join("taxonomy.json"))?;
    let ann_dir = root.join("annotations");
    let mut ann_files: Vec<PathBuf> = std::fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    ann_files.sort();
    if ann_files.is_empty() {
        return Err(Error::Validation(format!("no annotation files in {}", ann_dir.display())));
    }
    let mut videos = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for af in &ann_files {
        let video_id = af
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::parse(af, "bad annotation filename"))?
            .to_string();
        let mut annotations = load_annotations(af, &taxonomy)?;
        annotations.sort_by_key(|a| a.frame_index);
        let fdir = root.join("videos").join(&video_id).join("frames");
        let mut frame_files: Vec<PathBuf> = std::fs::read_dir(&fdir)
            .map_err(|e| Error::io(&fdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        frame_files.sort();
        if frame_files.is_empty() {
            return Err(Error::Validation(format!("video {video_id} has no frames")));
        }
        let mut frames = Vec::with_capacity(frame_files.len());
        for (i, ff) in frame_files.iter().enumerate() {
            let expect = format!("{i:06}.png");
            if ff.file_name().and_then(|s| s.to_str()) != Some(expect.as_str()) {
                return Err(Error::Validation(format!(
                    "video {video_id}: frame files must be contiguous %06d.png, found {:?} at position {i}",
                    ff.file_name()
                )));
            }
            let t = formats::read_image(ff)?;
            let (_, h, w) = t.chw()?;
            match size {
                None => size = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::Validation(format!(
                        "frame size mismatch: {}x{} vs {}x{}",
                        s.0, s.1, h, w
                    )))
                }
                _ => {}
            }
            frames.push(t);
        }
        if let Some(a) = annotations.iter().find(|a| a.frame_index >= frames.len()) {
            return Err(Error::Validation(format!(
                "video {video_id}: annotation for frame {} but only {} frames",
                a.frame_index,
                frames.len()
            )));
        }
        videos.push(VideoData { id: video_id, frames, annotations });
    }
    let (h, w) = size.expect("at least one video");
    for v in &videos {
        validate_bounds(&v.annotations, &taxonomy, h, w)?;
    }
    Ok(Dataset { root: root.to_path_buf(), taxonomy, videos, h, w })
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoData> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn total_annotated(&self) -> usize {
        self.videos.iter().map(|v| v.annotations.len()).sum()
    }

    /// All ground-truth annotations, flattened per video, for evaluation.
    pub fn all_annotations(&self) -> Vec<(String, Vec<KeypointAnnotation>)> {
        self.videos.iter().map(|v| (v.id.clone(), v.annotations.clone())).collect()
    }
}

/// (video index, annotation index) pairs.
type SampleRef = (usize, usize);

/// Validation split: the last ~10% of videos in id order. With a single
/// video, it doubles as its own validation set.
fn split_train_val(n_videos: usize, val_fraction: f32) -> (Vec<usize>, Vec<usize>) {
    if n_videos == 1 {
        return (vec![0], vec![0]);
    }
    let n_val = ((n_videos as f32 * val_fraction).round() as usize).clamp(1, n_videos - 1);
    let train: Vec<usize> = (0..n_videos - n_val).collect();
    let val: Vec<usize> = (n_videos - n_val..n_videos).collect();
    (train, val)
}

fn samples_for(dataset: &Dataset, videos: &[usize]) -> Vec<SampleRef> {
    let mut out = Vec::new();
    for &vi in videos {
        for ai in 0..dataset.videos[vi].annotations.len() {
            out.push((vi, ai));
        }
    }
    out
}

fn rasterize_all(dataset: &Dataset, radius: f32) -> Result<Vec<Vec<SegMap>>> {
    let spec = MaskSpec::new(radius)?;
    dataset
        .videos
        .iter()
        .map(|v| {
            v.annotations
                .iter()
                .map(|a| rasterize_masks(a, &spec, &dataset.taxonomy, dataset.h, dataset.w))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lrs: Vec<f32>,
    pub h: f64,
    pub j: f64,
    pub total: f64,
    pub val_total: f64,
    pub wall_seconds: f64,
}

fn write_log_csv(path: &Path, logs: &[EpochLog], lr_names: &[&str]) -> Result<()> {
    let mut s = String::from("epoch");
    for n in lr_names {
        s.push_str(&format!(",{n}"));
    }
    s.push_str(",H,J,total,val_total,wall_seconds\n");
    for l in logs {
        s.push_str(&l.epoch.to_string());
        for lr in &l.lrs {
            s.push_str(&format!(",{lr:e}"));
        }
        s.push_str(&format!(
            ",{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            l.h, l.j, l.total, l.val_total, l.wall_seconds
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub struct TrainOutput {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub logs: Vec<EpochLog>,
    pub best_val_total: f64,
}

// ---------------------------------------------------------------------------
// SFC training
// ---------------------------------------------------------------------------

struct BatchStats {
    h: f64,
    j: f64,
    total: f64,
    n: usize,
}

impl BatchStats {
    fn new() -> Self {
        BatchStats { h: 0.0, j: 0.0, total: 0.0, n: 0 }
    }

    fn add(&mut self, terms: &crate::models::LossTerms) {
        self.h += terms.h as f64;
        self.j += terms.j as f64;
        self.total += terms.total as f64;
        self.n += 1;
    }
}

/// Forward + loss for one frame sample on a fresh tape. The frame is padded
/// to a multiple of 8 and the probability map cropped back before the loss.
fn sfc_sample_loss(
    model: &MiniSeg,
    bound: &[NodeId],
    tape: &mut Tape,
    frame: &Tensor,
    target: &SegMap,
    taxonomy: &ClassTaxonomy,
    background_weight: f32,
) -> Result<(NodeId, crate::models::LossTerms)> {
    let (padded, (h, w)) = kernels::pad_to_multiple(frame, 8)?;
    let mut prob = model.forward(tape, bound, &padded)?;
    let (_, ph, pw) = tape.value(prob).chw()?;
    if (ph, pw) != (h, w) {
        prob = tape.crop(prob, 0, 0, h, w)?;
    }
    composite_loss(tape, prob, target, taxonomy, background_weight)
}

pub fn train_sfc(dataset: &Dataset, cfg: &TrainConfig, run_dir: impl AsRef<Path>) -> Result<(MiniSeg, TrainOutput)> {
    cfg.validate()?;
    let run_dir = run_dir.as_ref();
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let taxonomy = &dataset.taxonomy;
    let segmaps = rasterize_all(dataset, cfg.roi_radius)?;
    let (train_videos, val_videos) = split_train_val(dataset.videos.len(), cfg.val_fraction);
    let train_samples = samples_for(dataset, &train_videos);
    let val_samples = samples_for(dataset, &val_videos);
    if train_samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }

    let mut model = MiniSeg::new(taxonomy.num_classes(), cfg.seed)?;
    let mut opt = Adam::new(&model.params);
    let n_params = model.params.len();
    let mut logs = Vec::new();
    let mut best_val = f64::INFINITY;
    let best_path = run_dir.join("best.mkpt");
    let mut last_path = PathBuf::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.sfc_lr * cfg.schedule.factor(epoch);
        let mut order = train_samples.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA6 ^ (epoch as u64) << 8);

        let mut stats = BatchStats::new();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut accum = GradAccum::new(&model.params);
            for &(vi, ai) in batch {
                let ann = &dataset.videos[vi].annotations[ai];
                let frame = &dataset.videos[vi].frames[ann.frame_index];
                let target = &segmaps[vi][ai];
                let (frame, target) = if cfg.augment {
                    let params = AugmentParams::sample(dataset.h, dataset.w, &mut aug_rng);
                    (params.apply_frame(frame)?, params.apply_mask(target, taxonomy))
                } else {
                    (frame.clone(), target.clone())
                };
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let (loss, terms) = sfc_sample_loss(
                    &model,
                    &bound,
                    &mut tape,
                    &frame,
                    &target,
                    taxonomy,
                    cfg.background_weight,
                )?;
                if !terms.total.is_finite() {
                    return Err(Error::Runtime(format!(
                        "non-finite loss at epoch {} batch {bi}: H={} J={} total={}",
                        epoch + 1,
                        terms.h,
                        terms.j,
                        terms.total
                    )));
                }
                tape.backward(loss)?;
                accum.add_from_tape(&tape, &bound);
                stats.add(&terms);
            }
            let grads = accum.take_mean();
            opt.step(&mut model.params, &grads, &vec![lr; n_params])?;
        }

        let mut val = BatchStats::new();
        for &(vi, ai) in &val_samples {
            let ann = &dataset.videos[vi].annotations[ai];
            let prob = sfc_infer(&model, &dataset.videos[vi].frames[ann.frame_index])?;
            let terms = loss_values(&prob, &segmaps[vi][ai], taxonomy, cfg.background_weight)?;
            val.add(&terms);
        }
        let val_total = if val.n > 0 { val.total / val.n as f64 } else { f64::NAN };

        let n = stats.n.max(1) as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            lrs: vec![lr],
            h: stats.h / n,
            j: stats.j / n,
            total: stats.total / n,
            val_total,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        eprintln!(
            "[sfc] epoch {:>3}/{} lr {:.2e} loss {:.4} val {:.4} ({:.1}s)",
            log.epoch, cfg.epochs, lr, log.total, log.val_total, log.wall_seconds
        );
        last_path = run_dir.join(format!("ckpt_epoch_{:03}.mkpt", epoch + 1));
        save_sfc(&last_path, &model, taxonomy)?;
        if val_total < best_val {
            best_val = val_total;
            save_sfc(&best_path, &model, taxonomy)?;
        }
        logs.push(log);
        write_log_csv(&run_dir.join("log.csv"), &logs, &["lr"])?;
    }

    // return the best model
    let best = match load_model(&best_path)? {
        LoadedModel::Sfc { model, .. } => model,
        _ => unreachable!("just saved an sfc checkpoint"),
    };
    Ok((
        best,
        TrainOutput { best_checkpoint: best_path, last_checkpoint: last_path, logs, best_val_total: best_val },
    ))
}

// ---------------------------------------------------------------------------
// MFC training
// ---------------------------------------------------------------------------

fn pad_window_inputs(window: &ClipWindow) -> Result<(ClipWindow, (usize, usize))> {
    let (_, h, w) = window.frames[0].chw()?;
    if h % 8 == 0 && w % 8 == 0 {
        return Ok((window.clone(), (h, w)));
    }
    let pad = |t: &Tensor| kernels::pad_to_multiple(t, 8).map(|(p, _)| p);
    Ok((
        ClipWindow {
            frames: window.frames.iter().map(pad).collect::<Result<_>>()?,
            flows: window.flows.iter().map(pad).collect::<Result<_>>()?,
            depths: window.depths.iter().map(pad).collect::<Result<_>>()?,
            target: window.target.clone(),
        },
        (h, w),
    ))
}

fn augment_window(
    window: &ClipWindow,
    taxonomy: &ClassTaxonomy,
    rng: &mut ChaCha8Rng,
) -> Result<ClipWindow> {
    let (_, h, w) = window.frames[0].chw()?;
    let params = AugmentParams::sample(h, w, rng);
    Ok(ClipWindow {
        frames: window.frames.iter().map(|f| params.apply_frame(f)).collect::<Result<_>>()?,
        flows: window.flows.iter().map(|f| params.apply_flow(f)).collect::<Result<_>>()?,
        depths: window.depths.iter().map(|d| params.apply_depth(d)).collect::<Result<_>>()?,
        target: params.apply_mask(&window.target, taxonomy),
    })
}

#[allow(clippy::too_many_arguments)]
fn mfc_sample_loss(
    model: &MfcModel,
    sfc_bound: &[NodeId],
    net_bound: &[NodeId],
    tape: &mut Tape,
    window: &ClipWindow,
    taxonomy: &ClassTaxonomy,
    background_weight: f32,
) -> Result<(NodeId, crate::models::LossTerms)> {
    let (padded, (h, w)) = pad_window_inputs(window)?;
    let mut prob =
        crate::models::mfc_forward(tape, &model.sfc, sfc_bound, &model.net, net_bound, &padded, &model.cfg)?;
    let (_, ph, pw) = tape.value(prob).chw()?;
    if (ph, pw) != (h, w) {
        prob = tape.crop(prob, 0, 0, h, w)?;
    }
    composite_loss(tape, prob, &window.target, taxonomy, background_weight)
}

pub fn train_mfc(
    dataset: &Dataset,
    sfc_checkpoint: impl AsRef<Path>,
    cfg: &TrainConfig,
    mfc_cfg: &MfcConfig,
    provider: &dyn FlowDepthSource,
    run_dir: impl AsRef<Path>,
) -> Result<(MfcModel, TrainOutput)> {
    cfg.validate()?;
    mfc_cfg.validate()?;
    let run_dir = run_dir.as_ref();
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let taxonomy = &dataset.taxonomy;
    if mfc_cfg.num_classes != taxonomy.num_classes() {
        return Err(Error::Validation(format!(
            "fusion config has {} classes, dataset taxonomy {}",
            mfc_cfg.num_classes,
            taxonomy.num_classes()
        )));
    }
    let sfc = match load_model(sfc_checkpoint.as_ref())? {
        LoadedModel::Sfc { model, taxonomy: ckpt_taxo } => {
            if &ckpt_taxo != taxonomy {
                return Err(Error::Validation(
                    "checkpoint taxonomy differs from dataset taxonomy".into(),
                ));
            }
            model
        }
        LoadedModel::Mfc { .. } => {
            return Err(Error::Validation(
                "expected a single-frame checkpoint to finetune, got a fusion checkpoint".into(),
            ))
        }
    };
    let mut model = MfcModel::new(sfc, *mfc_cfg, cfg.seed ^ 0x3546_287A)?;

    let segmaps = rasterize_all(dataset, cfg.roi_radius)?;
    let (train_videos, val_videos) = split_train_val(dataset.videos.len(), cfg.val_fraction);
    let train_samples = samples_for(dataset, &train_videos);
    let val_samples = samples_for(dataset, &val_videos);
    if train_samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }

    let build_window = |vi: usize, ai: usize, target: SegMap| -> Result<ClipWindow> {
        let v = &dataset.videos[vi];
        let t = v.annotations[ai].frame_index;
        assemble_window(&v.id, &v.frames, target, t, mfc_cfg.k, provider)
    };

    let mut opt_sfc = Adam::new(&model.sfc.params);
    let mut opt_net = Adam::new(&model.net.params);
    let n_sfc = model.sfc.params.len();
    let n_net = model.net.params.len();
    let mut logs = Vec::new();
    let mut best_val = f64::INFINITY;
    let best_path = run_dir.join("best.mkpt");
    let mut last_path = PathBuf::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let factor = cfg.schedule.factor(epoch);
        let lr_sfc = cfg.mfc_finetune_lr * factor;
        let lr_net = cfg.mfcnet_lr * factor;
        let mut order = train_samples.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA6 ^ (epoch as u64) << 8);

        let mut stats = BatchStats::new();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut accum_sfc = GradAccum::new(&model.sfc.params);
            let mut accum_net = GradAccum::new(&model.net.params);
            for &(vi, ai) in batch {
                let mut window = build_window(vi, ai, segmaps[vi][ai].clone())?;
                if cfg.augment {
                    window = augment_window(&window, taxonomy, &mut aug_rng)?;
                }
                let mut tape = Tape::new();
                let sfc_bound = model.sfc.bind(&mut tape);
                let net_bound = model.net.bind(&mut tape);
                let (loss, terms) = mfc_sample_loss(
                    &model,
                    &sfc_bound,
                    &net_bound,
                    &mut tape,
                    &window,
                    taxonomy,
                    cfg.background_weight,
                )?;
                if !terms.total.is_finite() {
                    return Err(Error::Runtime(format!(
                        "non-finite loss at epoch {} batch {bi}: H={} J={} total={}",
                        epoch + 1,
                        terms.h,
                        terms.j,
                        terms.total
                    )));
                }
                tape.backward(loss)?;
                accum_sfc.add_from_tape(&tape, &sfc_bound);
                accum_net.add_from_tape(&tape, &net_bound);
                stats.add(&terms);
            }
            let g_sfc = accum_sfc.take_mean();
            let g_net = accum_net.take_mean();
            opt_sfc.step(&mut model.sfc.params, &g_sfc, &vec![lr_sfc; n_sfc])?;
            opt_net.step(&mut model.net.params, &g_net, &vec![lr_net; n_net])?;
        }

        let mut val = BatchStats::new();
        for &(vi, ai) in &val_samples {
            let window = build_window(vi, ai, segmaps[vi][ai].clone())?;
            let prob = mfc_infer(&model, &window)?;
            let terms = loss_values(&prob, &window.target, taxonomy, cfg.background_weight)?;
            val.add(&terms);
        }
        let val_total = if val.n > 0 { val.total / val.n as f64 } else { f64::NAN };

        let n = stats.n.max(1) as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            lrs: vec![lr_sfc, lr_net],
            h: stats.h / n,
            j: stats.j / n,
            total: stats.total / n,
            val_total,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        eprintln!(
            "[mfc-{}] epoch {:>3}/{} lr ({:.1e},{:.1e}) loss {:.4} val {:.4} ({:.1}s)",
            model.cfg.variant, log.epoch, cfg.epochs, lr_sfc, lr_net, log.total, log.val_total, log.wall_seconds
        );
        last_path = run_dir.join(format!("ckpt_epoch_{:03}.mkpt", epoch + 1));
        save_mfc(&last_path, &model, taxonomy)?;
        if val_total < best_val {
            best_val = val_total;
            save_mfc(&best_path, &model, taxonomy)?;
        }
        logs.push(log);
        write_log_csv(&run_dir.join("log.csv"), &logs, &["lr_sfc", "lr_mfcnet"])?;
    }

    let best = match load_model(&best_path)? {
        LoadedModel::Mfc { model, .. } => model,
        _ => unreachable!("just saved a fusion checkpoint"),
    };
    Ok((
        best,
        TrainOutput { best_checkpoint: best_path, last_checkpoint: last_path, logs, best_val_total: best_val },
    ))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Single-frame probability map with pad/crop handling.
pub fn sfc_infer(model: &MiniSeg, frame: &Tensor) -> Result<Tensor> {
    let (padded, (h, w)) = kernels::pad_to_multiple(frame, 8)?;
    let prob = model.infer(&padded)?;
    let (_, ph, pw) = prob.chw()?;
    if (ph, pw) == (h, w) {
        Ok(prob)
    } else {
        crop_chw(&prob, h, w)
    }
}

/// Multi-frame probability map with pad/crop handling.
pub fn mfc_infer(model: &MfcModel, window: &ClipWindow) -> Result<Tensor> {
    let (padded, (h, w)) = pad_window_inputs(window)?;
    let prob = model.infer(&padded)?;
    let (_, ph, pw) = prob.chw()?;
    if (ph, pw) == (h, w) {
        Ok(prob)
    } else {
        crop_chw(&prob, h, w)
    }
}

fn crop_chw(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = t.chw()?;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = t.channel(ch);
        for y in 0..h {
            out.extend_from_slice(&plane[y * tw..y * tw + w]);
        }
    }
    let _ = th;
    Tensor::from_vec(vec![c, h, w], out)
}

pub struct InferOutput {
    pub results: Vec<TrackResult>,
    pub fps: f64,
    /// Argmax label maps per frame, for overlay rendering.
    pub segmaps: Vec<SegMap>,
}

/// Runs a loaded checkpoint over every frame of a video. Multi-frame models
/// assemble a clamped window per frame from the provider.
pub fn infer_video(
    loaded: &LoadedModel,
    video: &VideoData,
    provider: &dyn FlowDepthSource,
    min_area: usize,
) -> Result<InferOutput> {
    let t0 = Instant::now();
    let mut results = Vec::with_capacity(video.frames.len());
    let mut segmaps = Vec::with_capacity(video.frames.len());
    for (t, frame) in video.frames.iter().enumerate() {
        let (prob, taxonomy) = match loaded {
            LoadedModel::Sfc { model, taxonomy } => (sfc_infer(model, frame)?, taxonomy),
            LoadedModel::Mfc { model, taxonomy } => {
                let (_, h, w) = frame.chw()?;
                let window = assemble_window(
                    &video.id,
                    &video.frames,
                    SegMap::zeros(h, w),
                    t,
                    model.cfg.k,
                    provider,
                )?;
                (mfc_infer(model, &window)?, taxonomy)
            }
        };
        let res = extract_keypoints_from_probmap(&prob, taxonomy, min_area, t)?;
        segmaps.push(crate::localize::argmax_segmap(&prob)?);
        results.push(res);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    Ok(InferOutput { results, fps: video.frames.len() as f64 / elapsed.max(1e-9), segmaps })
}

/// Ground-truth one-hot injection: rasterize annotations and run them
/// through the localization stage, bypassing any model.
pub fn gt_injection_results(dataset: &Dataset, radius: f32) -> Result<Vec<(String, Vec<TrackResult>)>> {
    let spec = MaskSpec::new(radius)?;
    let mut out = Vec::new();
    for v in &dataset.videos {
        let mut results = Vec::new();
        for a in &v.annotations {
            let seg = rasterize_masks(a, &spec, &dataset.taxonomy, dataset.h, dataset.w)?;
            results.push(crate::localize::extract_keypoints(
                &seg,
                None,
                &dataset.taxonomy,
                DEFAULT_MIN_AREA,
                a.frame_index,
            ));
        }
        out.push((v.id.clone(), results));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowdepth::{FilesProvider, ProviderConfig};
    use crate::metrics;
    use crate::models::MfcVariant;
    use crate::synth::{gen_dataset, SceneConfig};

    fn small_synth(dir: &Path, clips: usize, frames: usize) -> Dataset {
        let cfg = SceneConfig {
            h: 48,
            w: 64,
            frames_per_clip: frames,
            max_flow_lag: 2,
            ..SceneConfig::default()
        };
        gen_dataset(&cfg, clips, 77, dir).unwrap();
        load_dataset(dir).unwrap()
    }

    #[test]
    fn dataset_loads_generated_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_synth(dir.path(), 2, 3);
        assert_eq!(ds.videos.len(), 2);
        assert_eq!(ds.total_annotated(), 6);
        assert_eq!((ds.h, ds.w), (48, 64));
    }

    #[test]
    fn split_reserves_last_videos_for_validation() {
        assert_eq!(split_train_val(10, 0.1), ((0..9).collect::<Vec<_>>(), vec![9]));
        assert_eq!(split_train_val(1, 0.1), (vec![0], vec![0]));
        let (t, v) = split_train_val(3, 0.1);
        assert_eq!(t.len() + v.len(), 3);
        assert!(!v.is_empty());
    }

    #[test]
    fn sfc_smoke_training_decreases_loss_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_synth(dir.path(), 2, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            sfc_lr: 1e-3,
            augment: false,
            seed: 5,
            ..TrainConfig::default()
        };
        let run1 = dir.path().join("run1");
        let run2 = dir.path().join("run2");
        let (_, out1) = train_sfc(&ds, &cfg, &run1).unwrap();
        let (_, out2) = train_sfc(&ds, &cfg, &run2).unwrap();
        assert!(out1.logs[1].total < out1.logs[0].total, "loss should drop in 2 epochs");
        // seed-fixed rerun reproduces the loss curve exactly
        for (a, b) in out1.logs.iter().zip(&out2.logs) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.val_total.to_bits(), b.val_total.to_bits());
        }
    }

    #[test]
    fn mfc_frozen_sfc_with_zero_finetune_lr() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_synth(dir.path(), 1, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            sfc_lr: 1e-3,
            mfc_finetune_lr: 0.0,
            augment: false,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, sfc_out) = train_sfc(&ds, &cfg, dir.path().join("sfc")).unwrap();
        let before = match load_model(&sfc_out.best_checkpoint).unwrap() {
            LoadedModel::Sfc { model, .. } => model,
            _ => panic!(),
        };
        let provider = FilesProvider::new(&ProviderConfig::files(dir.path())).unwrap();
        let mfc_cfg = MfcConfig {
            k: 3,
            use_depth: true,
            variant: MfcVariant::W,
            num_classes: ds.taxonomy.num_classes(),
        };
        let (model, _) = train_mfc(
            &ds,
            &sfc_out.best_checkpoint,
            &cfg,
            &mfc_cfg,
            &provider,
            dir.path().join("mfc"),
        )
        .unwrap();
        for i in 0..before.params.len() {
            assert_eq!(
                before.params.get(i).data(),
                model.sfc.params.get(i).data(),
                "sfc param {} changed under zero finetune lr",
                before.params.name(i)
            );
        }
    }

    #[test]
    fn dual_lr_groups_step_in_the_configured_ratio() {
        // Inject identical unit gradients into both groups; Adam's first
        // bias-corrected step moves each weight by ~lr, so the group deltas
        // must reflect the lr ratio.
        let sfc = MiniSeg::new(6, 1).unwrap();
        let mfc_cfg = MfcConfig { k: 2, use_depth: false, variant: MfcVariant::B, num_classes: 6 };
        let mut model = MfcModel::new(sfc, mfc_cfg, 2).unwrap();
        let mut opt_sfc = Adam::new(&model.sfc.params);
        let mut opt_net = Adam::new(&model.net.params);
        // biases start at exactly zero, so the measured deltas are free of
        // f32 cancellation error
        let before_sfc = model.sfc.params.get(1).data()[0];
        let before_net = model.net.params.get(1).data()[0];
        let g_sfc: Vec<Vec<f32>> =
            (0..model.sfc.params.len()).map(|i| vec![1.0; model.sfc.params.get(i).numel()]).collect();
        let g_net: Vec<Vec<f32>> =
            (0..model.net.params.len()).map(|i| vec![1.0; model.net.params.get(i).numel()]).collect();
        opt_sfc.step(&mut model.sfc.params, &g_sfc, &vec![1e-6; g_sfc.len()]).unwrap();
        opt_net.step(&mut model.net.params, &g_net, &vec![1e-4; g_net.len()]).unwrap();
        let d_sfc = (model.sfc.params.get(1).data()[0] - before_sfc).abs();
        let d_net = (model.net.params.get(1).data()[0] - before_net).abs();
        let ratio = d_net / d_sfc;
        assert!((ratio - 100.0).abs() / 100.0 < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn infer_yields_one_result_per_frame_including_clamped_windows() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_synth(dir.path(), 1, 5);
        let provider = FilesProvider::new(&ProviderConfig::files(dir.path())).unwrap();
        let sfc = MiniSeg::new(ds.taxonomy.num_classes(), 3).unwrap();
        let ckpt = dir.path().join("sfc.mkpt");
        save_sfc(&ckpt, &sfc, &ds.taxonomy).unwrap();
        let loaded = load_model(&ckpt).unwrap();
        let out = infer_video(&loaded, &ds.videos[0], &provider, 3).unwrap();
        assert_eq!(out.results.len(), 5);

        let mfc_cfg = MfcConfig {
            k: 3,
            use_depth: true,
            variant: MfcVariant::W,
            num_classes: ds.taxonomy.num_classes(),
        };
        let model = MfcModel::new(sfc, mfc_cfg, 4).unwrap();
        let mckpt = dir.path().join("mfc.mkpt");
        save_mfc(&mckpt, &model, &ds.taxonomy).unwrap();
        let loaded = load_model(&mckpt).unwrap();
        let out = infer_video(&loaded, &ds.videos[0], &provider, 3).unwrap();
        assert_eq!(out.results.len(), 5, "clamped early windows still yield results");
        assert!(out.fps > 0.0);
    }

    #[test]
    fn gt_injection_scores_perfectly_end_to_end() {
        // Large enough scene that keypoint disks never overlap at r = 5.
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            h: 96,
            w: 128,
            frames_per_clip: 4,
            max_flow_lag: 2,
            ..SceneConfig::default()
        };
        gen_dataset(&cfg, 1, 77, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let per_video = gt_injection_results(&ds, 5.0).unwrap();
        let mut all_records = Vec::new();
        for (vid, results) in &per_video {
            let v = ds.video(vid).unwrap();
            for (r, gt) in results.iter().zip(&v.annotations) {
                all_records
                    .extend(metrics::match_frame(r, gt, &ds.taxonomy, 6.0).unwrap());
            }
        }
        let report = metrics::aggregate(&all_records, &ds.taxonomy, 6.0).unwrap();
        assert_eq!(report.accuracy, Some(100.0));
        assert_eq!(report.avg_precision, Some(100.0));
        assert!(report.pooled_rmse.unwrap() < 0.51);
    }

    #[test]
    fn nan_seed_free_training_aborts_cleanly() {
        // force a NaN by training with an absurd learning rate
        let dir = tempfile::tempdir().unwrap();
        let ds = small_synth(dir.path(), 1, 3);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 1,
            sfc_lr: 1e20,
            augment: false,
            ..TrainConfig::default()
        };
        match train_sfc(&ds, &cfg, dir.path().join("run")) {
            Err(Error::Runtime(msg)) => {
                assert!(msg.contains("epoch"), "diagnostic should carry context: {msg}")
            }
            Ok(_) => { /* survived the blowup; acceptable for this lr on some seeds */ }
            Err(other) => panic!("unexpected error type: {other}"),
        }
    }
}
