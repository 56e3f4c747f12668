//! Evaluation: greedy keypoint matching at a pixel threshold, then
//! precision / recall / detection accuracy / localization RMSE.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{ClassTaxonomy, KeypointAnnotation};
use crate::error::{Error, Result};
use crate::localize::TrackResult;

/// Reference resolution for the default threshold: 20 px at a 576-row
/// frame, scaled by min(H, W)/576 elsewhere.
pub const BASE_TAU: f32 = 20.0;
pub const BASE_RESOLUTION: f32 = 576.0;

pub fn default_tau(h: usize, w: usize) -> f32 {
    BASE_TAU * (h.min(w) as f32) / BASE_RESOLUTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    FN,
}

/// One matched (or unmatched) keypoint instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchRecord {
    pub frame_index: usize,
    pub class_id: usize,
    pub gt: Option<(f32, f32)>,
    pub pred: Option<(f32, f32)>,
    /// Euclidean distance for TP matches.
    pub error: Option<f32>,
    pub outcome: Outcome,
}

/// Greedy per-class matching by ascending distance. Pairs farther than tau
/// stay unmatched: leftover predictions become FPs, leftover visible ground
/// truths become FNs. Invisible ground truth is excluded entirely.
pub fn match_frame(
    preds: &TrackResult,
    gt: &KeypointAnnotation,
    taxonomy: &ClassTaxonomy,
    tau: f32,
) -> Result<Vec<MatchRecord>> {
    for d in &preds.detections {
        if d.class_id == 0 || d.class_id >= taxonomy.num_classes() {
            return Err(Error::Validation(format!(
                "prediction class {} outside taxonomy of {} classes",
                d.class_id,
                taxonomy.num_classes()
            )));
        }
    }
    let mut records = Vec::new();
    for class_id in taxonomy.keypoint_classes() {
        let gts: Vec<(f32, f32)> = gt
            .keypoints
            .iter()
            .filter(|k| k.visible && k.class_id == class_id)
            .map(|k| (k.x, k.y))
            .collect();
        let ps: Vec<(f32, f32)> = preds
            .detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .map(|d| (d.x, d.y))
            .collect();
        // all candidate pairs, ascending distance; ties by (gt, pred) index
        let mut pairs: Vec<(f32, usize, usize)> = Vec::new();
        for (gi, g) in gts.iter().enumerate() {
            for (pi, p) in ps.iter().enumerate() {
                let d = ((g.0 - p.0).powi(2) + (g.1 - p.1).powi(2)).sqrt();
                pairs.push((d, gi, pi));
            }
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut gt_used = vec![false; gts.len()];
        let mut pred_used = vec![false; ps.len()];
        for (d, gi, pi) in pairs {
            if d > tau || gt_used[gi] || pred_used[pi] {
                continue;
            }
            gt_used[gi] = true;
            pred_used[pi] = true;
            records.push(MatchRecord {
                frame_index: gt.frame_index,
                class_id,
                gt: Some(gts[gi]),
                pred: Some(ps[pi]),
                error: Some(d),
                outcome: Outcome::TP,
            });
        }
        for (gi, used) in gt_used.iter().enumerate() {
            if !used {
                records.push(MatchRecord {
                    frame_index: gt.frame_index,
                    class_id,
                    gt: Some(gts[gi]),
                    pred: None,
                    error: None,
                    outcome: Outcome::FN,
                });
            }
        }
        for (pi, used) in pred_used.iter().enumerate() {
            if !used {
                records.push(MatchRecord {
                    frame_index: gt.frame_index,
                    class_id,
                    gt: None,
                    pred: Some(ps[pi]),
                    error: None,
                    outcome: Outcome::FP,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Percentages in [0,100]; absent when the denominator is empty.
    pub precision: Option<f32>,
    pub recall: Option<f32>,
    pub accuracy: Option<f32>,
    /// RMSE over TP matches; absent with zero TPs.
    pub rmse: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub tau: f32,
    pub per_class: Vec<ClassMetrics>,
    /// Averages over classes that have the corresponding denominator.
    pub avg_precision: Option<f32>,
    pub avg_recall: Option<f32>,
    /// Pooled detection accuracy: total TP / total visible GT.
    pub accuracy: Option<f32>,
    /// Mean and std of per-class RMSE values.
    pub rmse_mean: Option<f32>,
    pub rmse_std: Option<f32>,
    /// RMSE pooled over every TP match.
    pub pooled_rmse: Option<f32>,
    pub total_tp: usize,
    pub total_fp: usize,
    pub total_fn: usize,
}

/// Aggregates match records into the final report.
pub fn aggregate(records: &[MatchRecord], taxonomy: &ClassTaxonomy, tau: f32) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Validation("no match records to aggregate".into()));
    }
    let mut by_class: BTreeMap<usize, (usize, usize, usize, Vec<f32>)> = BTreeMap::new();
    for class_id in taxonomy.keypoint_classes() {
        by_class.insert(class_id, (0, 0, 0, Vec::new()));
    }
    for r in records {
        let e = by_class
            .get_mut(&r.class_id)
            .ok_or_else(|| Error::Validation(format!("record class {} not in taxonomy", r.class_id)))?;
        match r.outcome {
            Outcome::TP => {
                e.0 += 1;
                e.3.push(r.error.unwrap_or(0.0));
            }
            Outcome::FP => e.1 += 1,
            Outcome::FN => e.2 += 1,
        }
    }
    let mut per_class = Vec::new();
    let mut rmses = Vec::new();
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let (mut ttp, mut tfp, mut tfn) = (0usize, 0usize, 0usize);
    let mut pooled_sq = 0.0f64;
    for (class_id, (tp, fp, fnn, errors)) in &by_class {
        ttp += tp;
        tfp += fp;
        tfn += fnn;
        let precision = (tp + fp > 0).then(|| 100.0 * *tp as f32 / (tp + fp) as f32);
        let recall = (tp + fnn > 0).then(|| 100.0 * *tp as f32 / (tp + fnn) as f32);
        let accuracy = recall; // TP / visible GT count
        let rmse = (!errors.is_empty()).then(|| {
            let ms: f64 = errors.iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>()
                / errors.len() as f64;
            ms.sqrt() as f32
        });
        pooled_sq += errors.iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>();
        if let Some(p) = precision {
            precisions.push(p);
        }
        if let Some(r) = recall {
            recalls.push(r);
        }
        if let Some(r) = rmse {
            rmses.push(r);
        }
        per_class.push(ClassMetrics {
            class: taxonomy.name(*class_id).to_string(),
            tp: *tp,
            fp: *fp,
            fn_: *fnn,
            precision,
            recall,
            accuracy,
            rmse,
        });
    }
    let mean = |v: &[f32]| -> Option<f32> {
        (!v.is_empty()).then(|| v.iter().sum::<f32>() / v.len() as f32)
    };
    let rmse_mean = mean(&rmses);
    let rmse_std = rmse_mean.map(|m| {
        (rmses.iter().map(|r| (r - m) * (r - m)).sum::<f32>() / rmses.len() as f32).sqrt()
    });
    Ok(MetricReport {
        tau,
        per_class,
        avg_precision: mean(&precisions),
        avg_recall: mean(&recalls),
        accuracy: (ttp + tfn > 0).then(|| 100.0 * ttp as f32 / (ttp + tfn) as f32),
        rmse_mean,
        rmse_std,
        pooled_rmse: (ttp > 0).then(|| (pooled_sq / ttp as f64).sqrt() as f32),
        total_tp: ttp,
        total_fp: tfp,
        total_fn: tfn,
    })
}

/// Evaluates predictions against ground truth frame by frame. Annotated
/// frames with no prediction entry count as all-FN.
pub fn evaluate(
    preds: &[TrackResult],
    gts: &[KeypointAnnotation],
    taxonomy: &ClassTaxonomy,
    tau: f32,
) -> Result<(Vec<MatchRecord>, MetricReport)> {
    let empty = |frame_index| TrackResult { frame_index, detections: Vec::new() };
    let mut records = Vec::new();
    for gt in gts {
        let pred = preds
            .iter()
            .find(|p| p.frame_index == gt.frame_index)
            .cloned()
            .unwrap_or_else(|| empty(gt.frame_index));
        records.extend(match_frame(&pred, gt, taxonomy, tau)?);
    }
    let report = aggregate(&records, taxonomy, tau)?;
    Ok((records, report))
}

impl MetricReport {
    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f32>| match v {
            Some(x) => format!("{x:7.2}"),
            None => format!("{:>7}", "-"),
        };
        let mut s = String::new();
        s.push_str(&format!("tau = {:.2} px\n", self.tau));
        s.push_str(&format!(
            "{:<22} {:>5} {:>5} {:>5} {:>7} {:>7} {:>7} {:>9}\n",
            "class", "TP", "FP", "FN", "prec%", "rec%", "acc%", "RMSE(px)"
        ));
        for c in &self.per_class {
            s.push_str(&format!(
                "{:<22} {:>5} {:>5} {:>5} {} {} {} {}\n",
                c.class,
                c.tp,
                c.fp,
                c.fn_,
                fmt_opt(c.precision),
                fmt_opt(c.recall),
                fmt_opt(c.accuracy),
                fmt_opt(c.rmse),
            ));
        }
        let pm = match (self.rmse_mean, self.rmse_std) {
            (Some(m), Some(sd)) => format!("{m:.2} +/- {sd:.2} px"),
            _ => "-".to_string(),
        };
        s.push_str(&format!(
            "avg: precision {} | recall {} | accuracy {} | RMSE {} | pooled RMSE {}\n",
            fmt_opt(self.avg_precision).trim(),
            fmt_opt(self.avg_recall).trim(),
            fmt_opt(self.accuracy).trim(),
            pm,
            fmt_opt(self.pooled_rmse).trim(),
        ));
        s
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// CSV export of per-frame match records.
pub fn write_match_records_csv(
    path: impl AsRef<Path>,
    records: &[MatchRecord],
    taxonomy: &ClassTaxonomy,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    writeln!(f, "frame,class,outcome,gt_x,gt_y,pred_x,pred_y,error_px").map_err(io)?;
    let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        writeln!(
            f,
            "{},{},{:?},{},{},{},{},{}",
            r.frame_index,
            taxonomy.name(r.class_id),
            r.outcome,
            opt(r.gt.map(|g| g.0)),
            opt(r.gt.map(|g| g.1)),
            opt(r.pred.map(|p| p.0)),
            opt(r.pred.map(|p| p.1)),
            opt(r.error),
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Keypoint;
    use crate::localize::Detection;

    fn taxo() -> ClassTaxonomy {
        ClassTaxonomy::endovis(1)
    }

    fn ann(kps: Vec<(usize, f32, f32, bool)>) -> KeypointAnnotation {
        KeypointAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            keypoints: kps
                .into_iter()
                .map(|(c, x, y, v)| Keypoint { class_id: c, x, y, visible: v })
                .collect(),
        }
    }

    fn preds(ds: Vec<(usize, f32, f32)>) -> TrackResult {
        TrackResult {
            frame_index: 0,
            detections: ds
                .into_iter()
                .map(|(c, x, y)| Detection { class_id: c, x, y, confidence: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn exact_prediction_is_tp_with_zero_error() {
        let t = taxo();
        let records =
            match_frame(&preds(vec![(1, 10.0, 20.0)]), &ann(vec![(1, 10.0, 20.0, true)]), &t, 6.0)
                .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].outcome, Outcome::TP);
        assert_eq!(records[0].error, Some(0.0));
    }

    #[test]
    fn beyond_tau_gives_fp_and_fn() {
        let t = taxo();
        let records =
            match_frame(&preds(vec![(1, 17.0, 20.0)]), &ann(vec![(1, 10.0, 20.0, true)]), &t, 6.0)
                .unwrap();
        let tps = records.iter().filter(|r| r.outcome == Outcome::TP).count();
        let fps = records.iter().filter(|r| r.outcome == Outcome::FP).count();
        let fns = records.iter().filter(|r| r.outcome == Outcome::FN).count();
        assert_eq!((tps, fps, fns), (0, 1, 1));
    }

    #[test]
    fn invisible_gt_is_excluded() {
        let t = taxo();
        let records = match_frame(&preds(vec![]), &ann(vec![(1, 10.0, 20.0, false)]), &t, 6.0).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn greedy_matching_beats_index_pairing_on_crossed_pairs() {
        // Two GT and two preds of one class (max_instances 2 in jigsaws),
        // crossed: greedy total error must be <= the naive index pairing.
        let t = ClassTaxonomy::jigsaws();
        let tip = t.id_of("L_TipPoint").unwrap();
        let gt = ann(vec![(tip, 10.0, 10.0, true), (tip, 30.0, 10.0, true)]);
        let p = preds(vec![(tip, 29.0, 10.0), (tip, 11.0, 10.0)]);
        let records = match_frame(&p, &gt, &t, 50.0).unwrap();
        let greedy_total: f32 = records.iter().filter_map(|r| r.error).sum();
        // naive pairing by listed order: |10-29| + |30-11| = 38
        let naive_total = 38.0;
        assert!(records.iter().all(|r| r.outcome == Outcome::TP));
        assert!(greedy_total <= naive_total);
        assert!((greedy_total - 2.0).abs() < 1e-5);
    }

    #[test]
    fn all_tp_error_three_gives_rmse_three() {
        let t = taxo();
        let records = vec![
            MatchRecord {
                frame_index: 0,
                class_id: 1,
                gt: Some((0.0, 0.0)),
                pred: Some((3.0, 0.0)),
                error: Some(3.0),
                outcome: Outcome::TP,
            },
            MatchRecord {
                frame_index: 1,
                class_id: 1,
                gt: Some((0.0, 0.0)),
                pred: Some((0.0, 3.0)),
                error: Some(3.0),
                outcome: Outcome::TP,
            },
        ];
        let report = aggregate(&records, &t, 6.0).unwrap();
        assert_eq!(report.rmse_mean, Some(3.0));
        assert_eq!(report.rmse_std, Some(0.0));
        assert_eq!(report.pooled_rmse, Some(3.0));
    }

    #[test]
    fn pooled_rmse_of_three_and_four_px_errors() {
        let t = taxo();
        let make = |class_id, e| MatchRecord {
            frame_index: 0,
            class_id,
            gt: Some((0.0, 0.0)),
            pred: Some((e, 0.0)),
            error: Some(e),
            outcome: Outcome::TP,
        };
        let report = aggregate(&[make(1, 3.0), make(2, 4.0)], &t, 10.0).unwrap();
        let expected = ((9.0f64 + 16.0) / 2.0).sqrt() as f32;
        assert!((report.pooled_rmse.unwrap() - expected).abs() < 1e-5);
        assert!((expected - 3.536).abs() < 1e-3);
    }

    #[test]
    fn ground_truth_self_evaluation_is_perfect() {
        let t = taxo();
        let gts: Vec<KeypointAnnotation> = (0..5)
            .map(|i| KeypointAnnotation {
                video_id: "v".into(),
                frame_index: i,
                keypoints: vec![
                    Keypoint { class_id: 1, x: 10.0 + i as f32, y: 20.0, visible: true },
                    Keypoint { class_id: 3, x: 40.0, y: 30.0 + i as f32, visible: true },
                ],
            })
            .collect();
        let preds: Vec<TrackResult> = gts
            .iter()
            .map(|g| TrackResult {
                frame_index: g.frame_index,
                detections: g
                    .keypoints
                    .iter()
                    .map(|k| Detection { class_id: k.class_id, x: k.x, y: k.y, confidence: 1.0 })
                    .collect(),
            })
            .collect();
        let (_, report) = evaluate(&preds, &gts, &t, 6.0).unwrap();
        assert_eq!(report.avg_precision, Some(100.0));
        assert_eq!(report.avg_recall, Some(100.0));
        assert_eq!(report.accuracy, Some(100.0));
        assert_eq!(report.rmse_mean, Some(0.0));
        assert_eq!(report.rmse_std, Some(0.0));
        assert_eq!(report.total_fp, 0);
        assert_eq!(report.total_fn, 0);
    }

    #[test]
    fn shrinking_tau_never_increases_tp() {
        use rand::{Rng, SeedableRng};
        let t = taxo();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let gt = ann((1..=5)
                .map(|c| (c, rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0), true))
                .collect());
            let p = preds(
                (1..=5)
                    .map(|c| (c, rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0)))
                    .collect(),
            );
            let mut last_tp = usize::MAX;
            for tau in [40.0, 20.0, 10.0, 5.0, 2.0] {
                let records = match_frame(&p, &gt, &t, tau).unwrap();
                let tp = records.iter().filter(|r| r.outcome == Outcome::TP).count();
                assert!(tp <= last_tp, "tau {tau}: TP {tp} > previous {last_tp}");
                last_tp = tp;
            }
        }
    }

    #[test]
    fn default_tau_scales_with_resolution() {
        assert!((default_tau(576, 720) - 20.0).abs() < 1e-6);
        assert!((default_tau(128, 160) - 20.0 * 128.0 / 576.0).abs() < 1e-5);
    }

    #[test]
    fn metrics_are_frame_order_invariant() {
        let t = taxo();
        let gts: Vec<KeypointAnnotation> = (0..4)
            .map(|i| ann(vec![(1, 10.0 * i as f32 + 5.0, 12.0, true)]))
            .enumerate()
            .map(|(i, mut a)| {
                a.frame_index = i;
                a
            })
            .collect();
        let mut ps: Vec<TrackResult> = gts
            .iter()
            .map(|g| TrackResult {
                frame_index: g.frame_index,
                detections: vec![Detection {
                    class_id: 1,
                    x: g.keypoints[0].x + 1.0,
                    y: 12.0,
                    confidence: 1.0,
                }],
            })
            .collect();
        let (_, r1) = evaluate(&ps, &gts, &t, 6.0).unwrap();
        ps.reverse();
        let (_, r2) = evaluate(&ps, &gts, &t, 6.0).unwrap();
        assert_eq!(r1.pooled_rmse, r2.pooled_rmse);
        assert_eq!(r1.total_tp, r2.total_tp);
    }
}
