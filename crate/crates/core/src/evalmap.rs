//! Detection evaluation: greedy IoU matching, all-points AP, mAP reports and
//! a throughput benchmark for the decode + NMS stage.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, IouVariant};
use crate::gridcodec::{
    decode_masked, Detection, GridConfig, GroundTruth, PredictionTensor, ShieldMask,
};
use crate::nms::{nms_scale_synthesis, NmsConfig};
use crate::{Error, Result, NUM_ANCHORS, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// A detection matches when union-IoU is strictly greater than this.
    pub iou_match: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_match: 0.5 }
    }
}

/// Report column order: Person, Motor, Car, Bicycle, Bus, Truck (class ids).
pub const REPORT_COLUMNS: [(usize, &str); NUM_CLASSES] = [
    (0, "Person"),
    (2, "Motor"),
    (3, "Car"),
    (1, "Bicycle"),
    (5, "Bus"),
    (4, "Truck"),
];

/// Labels each detection TP (`true`) or FP.
///
/// `dets` must already be ordered by score. Each detection claims the
/// unmatched same-class ground truth with the highest IoU (ties to the lower
/// index) when that IoU exceeds `iou_match`.
pub fn match_and_label(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let r = iou(&d.bbox, &g.bbox, IouVariant::Union);
                if best.is_none_or(|(_, br)| r > br) {
                    best = Some((j, r));
                }
            }
            match best {
                Some((j, r)) if r > cfg.iou_match => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision/recall after each ranked detection.
pub fn pr_curve(labels: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-points interpolated AP; `None` when there is no ground truth.
pub fn average_precision(labels: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(labels, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_tp: usize,
    /// `(recall, precision)` after each ranked detection.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Indexed by class id.
    pub classes: Vec<ClassStats>,
    /// Mean AP over classes with at least one ground truth.
    pub map: f64,
}

impl MapReport {
    pub fn per_class_ap(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(|c| c.ap).collect()
    }

    /// Plain-text table followed by a `key=value` block.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "Metric");
        for (_, name) in REPORT_COLUMNS {
            let _ = write!(s, "{name:>9}");
        }
        let _ = writeln!(s, "{:>9}", "mAP");
        let cell =
            |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let _ = write!(s, "{:<8}", "AP");
        for (id, _) in REPORT_COLUMNS {
            let _ = write!(s, "{:>9}", cell(self.classes[id].ap));
        }
        let _ = writeln!(s, "{:>9}", format!("{:.2}", 100.0 * self.map));
        for (label, f) in [
            ("GT", (|c: &ClassStats| c.n_gt) as fn(&ClassStats) -> usize),
            ("Det", |c| c.n_det),
            ("TP", |c| c.n_tp),
        ] {
            let _ = write!(s, "{label:<8}");
            for (id, _) in REPORT_COLUMNS {
                let _ = write!(s, "{:>9}", f(&self.classes[id]));
            }
            s.push('\n');
        }
        s.push('\n');
        for (id, name) in REPORT_COLUMNS {
            let c = &self.classes[id];
            let ap =
                c.ap.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(s, "ap.{}={ap}", name.to_lowercase());
            let _ = writeln!(s, "gt.{}={}", name.to_lowercase(), c.n_gt);
            let _ = writeln!(s, "det.{}={}", name.to_lowercase(), c.n_det);
        }
        let _ = writeln!(s, "map={:.6}", self.map);
        s
    }

    /// Writes `pr_<class>.csv` (`recall,precision` rows) per class into `dir`.
    pub fn write_pr_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (id, name) in REPORT_COLUMNS {
            let mut csv = String::from("recall,precision\n");
            for (r, p) in &self.classes[id].pr {
                let _ = writeln!(csv, "{r:.6},{p:.6}");
            }
            fs::write(dir.join(format!("pr_{}.csv", name.to_lowercase())), csv)?;
        }
        Ok(())
    }
}

/// Pools detections across frames per class and averages the per-class AP.
///
/// Detections are ranked by score; ties keep (frame, input) order.
pub fn map_report(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    cfg: &EvalConfig,
) -> Result<MapReport> {
    if dets.len() != gts.len() {
        return Err(Error::Dimension {
            expected: format!("{} frames of detections", gts.len()),
            found: format!("{} frames", dets.len()),
        });
    }
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        // (score, frame, label)
        let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
        let mut n_gt = 0;
        for (frame, (fd, fg)) in dets.iter().zip(gts).enumerate() {
            let mut cd: Vec<Detection> =
                fd.iter().filter(|d| d.class_id == class).copied().collect();
            cd.sort_by(|a, b| b.score.total_cmp(&a.score));
            let cg: Vec<GroundTruth> = fg.iter().filter(|g| g.class_id == class).copied().collect();
            n_gt += cg.len();
            let labels = match_and_label(&cd, &cg, cfg);
            ranked.extend(cd.iter().zip(labels).map(|(d, l)| (d.score, frame, l)));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let labels: Vec<bool> = ranked.iter().map(|r| r.2).collect();
        classes.push(ClassStats {
            ap: average_precision(&labels, n_gt),
            n_gt,
            n_det: labels.len(),
            n_tp: labels.iter().filter(|&&l| l).count(),
            pr: if n_gt > 0 {
                pr_curve(&labels, n_gt)
            } else {
                Vec::new()
            },
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(MapReport { classes, map })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub repetitions: usize,
    pub mean_latency: Duration,
    pub median_latency: Duration,
    pub fps: f64,
    /// Detections left after NMS, summed over one pass of the frames.
    pub detections_per_pass: usize,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "frames={}\nrepetitions={}\nmean_latency_us={:.3}\nmedian_latency_us={:.3}\nfps={:.1}\ndetections_per_pass={}\n",
            self.frames,
            self.repetitions,
            self.mean_latency.as_secs_f64() * 1e6,
            self.median_latency.as_secs_f64() * 1e6,
            self.fps,
            self.detections_per_pass
        )
    }
}

/// Prediction tensors for throughput runs: every confidence is zero except
/// `hot` distinct slots per frame, whose scores land in `[0.54, 0.95]`.
pub fn synthetic_frames(
    grid: &GridConfig,
    frames: usize,
    hot: usize,
    seed: u64,
) -> Result<Vec<PredictionTensor>> {
    if hot > grid.num_slots() {
        return Err(Error::Config(format!(
            "{hot} hot slots requested but the grid has {}",
            grid.num_slots()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let mut t = PredictionTensor::zeros(grid);
            let v = t.values_mut();
            for cell in 0..grid.num_cells() {
                let top = rng.gen_range(0..NUM_CLASSES);
                for c in 0..NUM_CLASSES {
                    v[grid.class_index(cell, c)] = if c == top { 0.9 } else { 0.02 };
                }
                for a in 0..NUM_ANCHORS {
                    v[grid.coord_index(cell, a, 0)] = rng.gen_range(0.05..0.95);
                    v[grid.coord_index(cell, a, 1)] = rng.gen_range(0.05..0.95);
                    v[grid.coord_index(cell, a, 2)] = rng.gen_range(0.05..0.5);
                    v[grid.coord_index(cell, a, 3)] = rng.gen_range(0.05..0.5);
                }
            }
            for slot in rand::seq::index::sample(&mut rng, grid.num_slots(), hot) {
                let (cell, a) = grid.split_slot(slot);
                v[grid.conf_index(cell, a)] = rng.gen_range(0.6..=1.0 / 0.9 * 0.95);
            }
            Ok(t)
        })
        .collect()
}

/// Times decode + NMS per frame, single-threaded.
pub fn bench_pipeline(
    frames: &[PredictionTensor],
    grid: &GridConfig,
    threshold: f64,
    nms: &NmsConfig,
    skip: Option<&ShieldMask>,
    repetitions: usize,
) -> Result<BenchReport> {
    if frames.is_empty() || repetitions == 0 {
        return Err(Error::Config(
            "benchmark needs at least one frame and one repetition".into(),
        ));
    }
    let mut lat = Vec::with_capacity(frames.len() * repetitions);
    let mut kept = 0;
    for rep in 0..repetitions {
        for f in frames {
            let t0 = Instant::now();
            let dets = decode_masked(f, grid, threshold, skip)?;
            let out = nms_scale_synthesis(&dets, nms);
            lat.push(t0.elapsed());
            if rep == 0 {
                kept += out.len();
            }
            std::hint::black_box(out);
        }
    }
    let total: Duration = lat.iter().sum();
    lat.sort_unstable();
    let mean = total / lat.len() as u32;
    Ok(BenchReport {
        frames: frames.len(),
        repetitions,
        mean_latency: mean,
        median_latency: lat[lat.len() / 2],
        fps: lat.len() as f64 / total.as_secs_f64().max(1e-12),
        detections_per_pass: kept,
    })
}
