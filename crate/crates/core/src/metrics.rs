//! Dataset-level mIoU and mask AP at IoU 0.5.
//!
//! mIoU counts background as a class and skips classes absent from both the
//! predictions and the ground truth. AP uses greedy matching in descending
//! confidence and all-point interpolation (the precision envelope), averaged
//! over classes with at least one ground-truth instance.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::synthdata::{Instance, Mask};

pub const AP_IOU: f64 = 0.5;

/// Per-class pixel intersections and unions, mergeable across shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl ConfusionAccumulator {
    /// `num_classes` includes background.
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.union.len()
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("miou", format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
        }
        let k = self.num_classes();
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= k) {
            return Err(Error::LabelRange(format!("class {bad} with {k} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.num_classes(), other.num_classes())));
        }
        for c in 0..self.num_classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        Ok(())
    }

    /// IoU per class, `None` where the class never occurs.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

pub fn miou(preds: &[Vec<u8>], gts: &[Vec<u8>], num_classes: usize) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape("miou", format!("{} predictions for {} images", preds.len(), gts.len())));
    }
    let mut acc = ConfusionAccumulator::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.miou())
}

/// One predicted instance with its ranking score.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub class_id: usize,
    pub confidence: f64,
    pub mask: Mask,
}

/// Outcome of one prediction after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub image: usize,
    pub confidence: f64,
    pub class_id: usize,
    pub matched: bool,
}

/// Matched predictions per class plus ground-truth counts per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSummary {
    pub records: BTreeMap<usize, Vec<DetectionRecord>>,
    pub gt_counts: BTreeMap<usize, usize>,
}

fn check_binary(mask: &Mask, height: usize, width: usize) -> Result<()> {
    if mask.data.iter().any(|&v| v > 1) {
        return Err(Error::Invalid("AP expects binary masks".into()));
    }
    if (mask.height, mask.width) != (height, width) || mask.data.len() != height * width {
        return Err(Error::shape("ap50", format!("{}x{} mask in a {height}x{width} image", mask.height, mask.width)));
    }
    Ok(())
}

/// Greedy matching: predictions of a class in descending confidence (ties by
/// image, then list position) each take the highest-IoU unmatched
/// ground-truth instance of that class in their image with IoU >= 0.5.
pub fn match_detections(images: &[(Vec<PredictedInstance>, Vec<Instance>)]) -> Result<DetectionSummary> {
    let mut summary = DetectionSummary::default();
    let mut order: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, (preds, gt)) in images.iter().enumerate() {
        let (h, w) = gt
            .first()
            .map(|g| (g.mask.height, g.mask.width))
            .or_else(|| preds.first().map(|p| (p.mask.height, p.mask.width)))
            .unwrap_or((0, 0));
        for g in gt {
            check_binary(&g.mask, h, w)?;
            *summary.gt_counts.entry(g.class_id).or_insert(0) += 1;
        }
        for (j, p) in preds.iter().enumerate() {
            check_binary(&p.mask, h, w)?;
            if !p.confidence.is_finite() {
                return Err(Error::Invalid("confidence must be finite".into()));
            }
            order.entry(p.class_id).or_default().push((i, j));
        }
    }
    for (class, mut list) in order {
        list.sort_by(|a, b| images[b.0].0[b.1].confidence.total_cmp(&images[a.0].0[a.1].confidence).then(a.cmp(b)));
        let mut taken: BTreeMap<(usize, usize), ()> = BTreeMap::new();
        let mut records = Vec::with_capacity(list.len());
        for (i, j) in list {
            let p = &images[i].0[j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in images[i].1.iter().enumerate() {
                if g.class_id != class || taken.contains_key(&(i, k)) {
                    continue;
                }
                let iou = p.mask.iou(&g.mask);
                if iou >= AP_IOU && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                taken.insert((i, k), ());
            }
            records.push(DetectionRecord {
                image: i,
                confidence: p.confidence,
                class_id: class,
                matched: best.is_some(),
            });
        }
        summary.records.insert(class, records);
    }
    Ok(summary)
}

/// All-point interpolated AP of records already in ranking order.
pub fn average_precision(records: &[DetectionRecord], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        tp += r.matched as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// AP per class with at least one ground-truth instance.
pub fn ap50_per_class(images: &[(Vec<PredictedInstance>, Vec<Instance>)]) -> Result<BTreeMap<usize, f64>> {
    let summary = match_detections(images)?;
    Ok(summary
        .gt_counts
        .iter()
        .map(|(&c, &n)| (c, average_precision(summary.records.get(&c).map_or(&[][..], Vec::as_slice), n)))
        .collect())
}

pub fn ap50(images: &[(Vec<PredictedInstance>, Vec<Instance>)]) -> Result<f64> {
    let per_class = ap50_per_class(images)?;
    if per_class.is_empty() {
        return Ok(0.0);
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// `metric,class,value` rows followed by a `mean` row.
pub fn write_report(out: &mut impl Write, metric: &str, per_class: &BTreeMap<usize, Option<f64>>, mean: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "class", "value"]).map_err(csv_error)?;
    for (c, v) in per_class {
        let value = v.map_or_else(String::new, |v| format!("{v:.6}"));
        w.write_record([metric, &c.to_string(), &value]).map_err(csv_error)?;
    }
    w.write_record([metric, "mean", &format!("{mean:.6}")]).map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format {
        path: "report".into(),
        detail: e.to_string(),
    }
}
