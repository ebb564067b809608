//! Probability decoding into events and event-based average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];

/// A detected (or annotated) event over `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSegment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// Per class, maximal runs of steps with `probs[t, k] ≥ threshold`; the
/// confidence is the mean probability over the run.
pub fn extract_segments(probs: &Tensor<f64>, threshold: f64) -> Result<Vec<DetectionSegment>> {
    let &[t, k] = probs.shape() else {
        return Err(Error::InvalidArgument(format!(
            "probabilities must be [T, K], got {:?}",
            probs.shape()
        )));
    };
    let mut out = Vec::new();
    for class in 0..k {
        let mut run: Option<(usize, f64)> = None;
        for step in 0..=t {
            let p = (step < t).then(|| probs.data()[step * k + class]);
            match (p.filter(|&p| p >= threshold), run) {
                (Some(p), Some((s, acc))) => run = Some((s, acc + p)),
                (Some(p), None) => run = Some((step, p)),
                (None, Some((s, acc))) => {
                    out.push(DetectionSegment {
                        class,
                        start: s,
                        end: step,
                        confidence: acc / (step - s) as f64,
                    });
                    run = None;
                }
                (None, None) => {}
            }
        }
    }
    Ok(out)
}

/// Intersection over union of half-open intervals.
pub fn interval_iou(a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    if a.0 >= a.1 || b.0 >= b.1 {
        return Err(Error::InvalidArgument(format!("degenerate interval {a:?} or {b:?}")));
    }
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter as f64 / union as f64)
}

/// One line of a detections or ground-truth JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: String,
    pub class: usize,
    pub start: usize,
    pub end: usize,
    #[serde(default = "one")]
    pub conf: f64,
}

fn one() -> f64 {
    1.0
}

pub fn write_events_jsonl(path: impl AsRef<Path>, events: &[EventRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_events_jsonl(path: impl AsRef<Path>) -> Result<Vec<EventRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EventRecord = serde_json::from_str(&line)
            .map_err(|err| Error::Format(format!("{}:{}: {err}", path.display(), i + 1)))?;
        if e.start >= e.end || !e.conf.is_finite() {
            return Err(Error::Format(format!(
                "{}:{}: invalid event [{}, {}) conf {}",
                path.display(),
                i + 1,
                e.start,
                e.end,
                e.conf
            )));
        }
        out.push(e);
    }
    Ok(out)
}

/// Outcome of matching one class's detections at one IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    /// `Some(ap)` when the class has ground truth.
    pub ap: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
}

/// Greedy matching in descending confidence: each detection takes the
/// highest-IoU unmatched ground-truth event of the same sequence (ties to the
/// earliest listed) and counts as a true positive when that IoU reaches
/// `iou`. AP is the area under the precision envelope.
pub fn match_class(dets: &[EventRecord], gts: &[EventRecord], class: usize, iou: f64) -> Result<ClassMatch> {
    let gts: Vec<&EventRecord> = gts.iter().filter(|g| g.class == class).collect();
    let mut dets: Vec<&EventRecord> = dets.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| b.conf.total_cmp(&a.conf));
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.seq != d.seq {
                continue;
            }
            let o = interval_iou((d.start, d.end), (g.start, g.end))?;
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, o)) if o >= iou => {
                taken[gi] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let tp = hits.iter().filter(|&&h| h).count();
    let ap = (!gts.is_empty()).then(|| average_precision(&hits, gts.len()));
    Ok(ClassMatch {
        ap,
        true_positives: tp,
        false_positives: hits.len() - tp,
        missed: gts.len() - tp,
    })
}

/// All-points interpolated AP from ranked hit flags.
fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP of one class, or `None` when it has no ground truth.
pub fn event_average_precision(
    dets: &[EventRecord],
    gts: &[EventRecord],
    class: usize,
    iou: f64,
) -> Result<Option<f64>> {
    Ok(match_class(dets, gts, class, iou)?.ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou: f64,
    /// Mean AP over classes that have ground truth.
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub thresholds: Vec<ThresholdReport>,
}

impl EvalReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou - iou).abs() < 1e-12)
            .map(|t| t.map)
    }

    /// Thresholds as columns (in percent), one row per metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for t in &self.thresholds {
            let _ = write!(s, ",{}", (t.iou * 100.0).round());
        }
        s.push('\n');
        let mut row = |name: &str, f: &dyn Fn(&ThresholdReport) -> String| {
            s.push_str(name);
            for t in &self.thresholds {
                s.push(',');
                s.push_str(&f(t));
            }
            s.push('\n');
        };
        row("mAP", &|t| format!("{:.6}", t.map));
        for (k, name) in self.class_names.iter().enumerate() {
            row(&format!("AP:{name}"), &|t| {
                t.per_class_ap[k].map_or(String::new(), |a| format!("{a:.6}"))
            });
        }
        row("TP", &|t| t.true_positives.to_string());
        row("FP", &|t| t.false_positives.to_string());
        row("missed", &|t| t.missed.to_string());
        s
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        fs::write(json_path, serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

/// Scores detections against ground truth pooled over all sequences.
pub fn evaluate(
    dets: &[EventRecord],
    gts: &[EventRecord],
    class_names: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth events to evaluate".into()));
    }
    let k = class_names.len();
    if let Some(bad) = dets.iter().chain(gts).find(|e| e.class >= k) {
        return Err(Error::InvalidArgument(format!(
            "event class {} outside the {k}-class vocabulary",
            bad.class
        )));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &iou in thresholds {
        if !(0.0..=1.0).contains(&iou) {
            return Err(Error::InvalidArgument(format!("IoU threshold {iou} outside [0, 1]")));
        }
        let matches = (0..k)
            .map(|c| match_class(dets, gts, c, iou))
            .collect::<Result<Vec<_>>>()?;
        let aps: Vec<f64> = matches.iter().filter_map(|m| m.ap).collect();
        out.push(ThresholdReport {
            iou,
            map: aps.iter().sum::<f64>() / aps.len() as f64,
            per_class_ap: matches.iter().map(|m| m.ap).collect(),
            true_positives: matches.iter().map(|m| m.true_positives).sum(),
            false_positives: matches.iter().map(|m| m.false_positives).sum(),
            missed: matches.iter().map(|m| m.missed).sum(),
        });
    }
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        thresholds: out,
    })
}

/// Decodes `[T, K]` window probabilities of one sequence into frame-level
/// events. Window `w` starts at frame `w·stride` and spans `frames` frames.
pub fn detections_in_frames(
    seq: &str,
    probs: &Tensor<f64>,
    threshold: f64,
    frames: usize,
    stride: usize,
    n_frames: usize,
) -> Result<Vec<EventRecord>> {
    Ok(extract_segments(probs, threshold)?
        .into_iter()
        .map(|d| {
            let (start, end) = crate::dataset::windows_to_frames(d.start, d.end, frames, stride, n_frames);
            EventRecord {
                seq: seq.to_string(),
                class: d.class,
                start,
                end,
                conf: d.confidence,
            }
        })
        .filter(|e| e.start < e.end)
        .collect())
}

/// Ground-truth events of a sequence, merged per class where they touch.
pub fn ground_truth_events(seq: &crate::dataset::SkeletonSequence) -> Vec<EventRecord> {
    let mut by_class: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for s in &seq.segments {
        by_class.entry(s.class).or_default().push((s.start, s.end));
    }
    let mut out = Vec::new();
    for (class, mut spans) in by_class {
        spans.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (s, e) in spans {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        out.extend(merged.into_iter().map(|(start, end)| EventRecord {
            seq: seq.id.clone(),
            class,
            start,
            end,
            conf: 1.0,
        }));
    }
    out
}
