//! Training objectives for the semantic and sequential networks.
//!
//! Assignments are solved on values outside the tape; loss nodes are only
//! recorded for the pairs that end up matched.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::{hungarian, masked_hungarian, siou, Assignment, CostMatrix, Coverage};
use crate::models::TracedSequence;
use crate::synthdata::Instance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopTargets {
    /// 1 for steps matched to a ground-truth instance, 0 otherwise.
    Matched,
    /// 1 for the first `|gt|` steps.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub stop: f64,
    /// Weight of the per-class objectness map that steers step locations.
    pub objectness: f64,
    pub stop_targets: StopTargets,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            stop: 1.0,
            objectness: 1.0,
            stop_targets: StopTargets::Matched,
        }
    }
}

/// Matching used by the conditioned loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HungarianMode {
    Masked,
    Unmasked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mask_term: f64,
    pub class_term: f64,
    pub stop_term: f64,
    pub objectness_term: f64,
    pub assignment: Assignment,
}

/// Mean per-pixel cross-entropy of `(H, W, K)` logits against class ids.
pub fn semantic_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    let pixels: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    if shape.len() < 2 || pixels != labels.len() {
        return Err(Error::shape("semantic_loss", format!("logits {shape:?} vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelRange(format!("label {bad} with {k} classes")));
    }
    let mut onehot = vec![0.0; pixels * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l as usize] = 1.0;
    }
    let ls = tape.log_softmax(logits)?;
    let target = tape.constant(Tensor::new(&shape, onehot)?);
    let picked = tape.mul(ls, target)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / pixels as f64)
}

/// `1 - siou` as a tape node; `y` is binary with `sum_y > 0`.
fn siou_loss(tape: &mut Tape, mask: Var, y: &[f64], target: Var) -> Result<Var> {
    let sy: f64 = y.iter().sum();
    let inter = tape.mul(mask, target)?;
    let inter = tape.sum(inter)?;
    let sp = tape.sum(mask)?;
    let denom = tape.sub(sp, inter)?;
    let denom = tape.shift(denom, sy)?;
    let ratio = tape.div(inter, denom)?;
    tape.one_minus(ratio)
}

/// Mean binary cross-entropy of logits `(n, 1)` against 0/1 targets.
fn bce_logits(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    let zeros = tape.constant(Tensor::zeros(&[n, 1]));
    let pair = tape.concat(&[logits, zeros], 1)?;
    let ls = tape.log_softmax(pair)?;
    let t: Vec<f64> = targets.iter().flat_map(|&y| [y, 1.0 - y]).collect();
    let t = tape.constant(Tensor::new(&[n, 2], t)?);
    let picked = tape.mul(ls, t)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Binary cross-entropy of logits `(n, 1)` with per-element weights summing
/// to one.
fn weighted_bce_logits(tape: &mut Tape, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    let n = targets.len();
    let zeros = tape.constant(Tensor::zeros(&[n, 1]));
    let pair = tape.concat(&[logits, zeros], 1)?;
    let ls = tape.log_softmax(pair)?;
    let t: Vec<f64> = targets.iter().zip(weights).flat_map(|(&y, &w)| [w * y, w * (1.0 - y)]).collect();
    let t = tape.constant(Tensor::new(&[n, 2], t)?);
    let picked = tape.mul(ls, t)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0)
}

fn check_gt(seq: &TracedSequence, tape: &Tape, gt: &[Instance]) -> Result<usize> {
    let pixels = seq.steps.first().map_or(0, |s| tape.value(s.mask).numel());
    for inst in gt {
        if inst.mask.data.len() != pixels {
            return Err(Error::shape("sequence loss", format!("gt mask has {} pixels, prediction {pixels}", inst.mask.data.len())));
        }
        if inst.mask.is_empty() {
            return Err(Error::Invalid("ground-truth instance with an empty mask".into()));
        }
    }
    Ok(pixels)
}

fn cost_matrix(tape: &Tape, seq: &TracedSequence, targets: &[Vec<f64>]) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(seq.steps.len() * targets.len());
    for s in &seq.steps {
        let m = tape.value(s.mask).data();
        for y in targets {
            data.push(1.0 - siou(m, y)?);
        }
    }
    CostMatrix::new(seq.steps.len(), targets.len(), data)
}

/// Objectness target: per-class union of instance masks sampled at the
/// half-resolution grid.
fn objectness_term(tape: &mut Tape, seq: &TracedSequence, gt: &[Instance], height: usize, width: usize) -> Result<Var> {
    let shape = tape.shape(seq.objectness).to_vec();
    let (p, c) = (shape[0], shape[1]);
    let lw = width / 2;
    if p != (height / 2) * lw {
        return Err(Error::shape("objectness", format!("{shape:?} for a {height}x{width} target")));
    }
    let mut t = vec![0.0; p * c];
    for inst in gt {
        if inst.class_id == 0 || inst.class_id > c {
            return Err(Error::LabelRange(format!("instance class {} with {c} classes", inst.class_id)));
        }
        for i in 0..p {
            let (y, x) = (2 * (i / lw), 2 * (i % lw));
            if inst.mask.get(y, x) {
                t[i * c + inst.class_id - 1] = 1.0;
            }
        }
    }
    // positives and negatives each carry half the weight
    let pos = t.iter().filter(|&&v| v > 0.0).count();
    let neg = t.len() - pos;
    let w: Vec<f64> = t
        .iter()
        .map(|&v| if pos == 0 { 1.0 / neg as f64 } else if v > 0.0 { 0.5 / pos as f64 } else { 0.5 / neg as f64 })
        .collect();
    let flat = tape.reshape(seq.objectness, &[p * c, 1])?;
    weighted_bce_logits(tape, flat, &t, &w)
}

fn finish(tape: &mut Tape, terms: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(v, w) in terms {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let v = if w == 1.0 { v } else { tape.scale(v, w)? };
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

fn item(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

/// Mean of the matched `1 - siou` terms, or `None` without pairs.
fn mask_term(tape: &mut Tape, seq: &TracedSequence, targets: &[Vec<f64>], a: &Assignment) -> Result<Option<Var>> {
    let mut parts = Vec::with_capacity(a.pairs.len());
    for &(r, c) in &a.pairs {
        let y = tape.constant(Tensor::new(&[targets[c].len()], targets[c].clone())?);
        parts.push(siou_loss(tape, seq.steps[r].mask, &targets[c], y)?);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&parts, 0)?;
    Ok(Some(tape.mean(all)?))
}

/// Plain sequential loss: Hungarian matching on `1 - siou`, mask, class and
/// stop terms plus the objectness map.
pub fn rsis_loss(tape: &mut Tape, seq: &TracedSequence, gt: &[Instance], weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let pixels = check_gt(seq, tape, gt)?;
    let steps = seq.steps.len();
    if steps < gt.len() {
        return Err(Error::Invalid(format!("{steps} steps cannot cover {} instances", gt.len())));
    }
    let (height, width) = (gt.first().map_or(0, |i| i.mask.height), gt.first().map_or(0, |i| i.mask.width));
    let targets: Vec<Vec<f64>> = gt.iter().map(|i| i.mask.to_f64()).collect();

    let assignment = if gt.is_empty() {
        Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
            unmatched_rows: (0..steps).collect(),
            unmatched_cols: Vec::new(),
        }
    } else {
        hungarian(&cost_matrix(tape, seq, &targets)?)?
    };
    let mask = mask_term(tape, seq, &targets, &assignment)?;

    let mut class_parts = Vec::new();
    for &(r, c) in &assignment.pairs {
        let logits = seq.steps[r].class_logits.ok_or_else(|| Error::Invalid("sequence has no class head".into()))?;
        let k = tape.shape(logits)[1];
        if gt[c].class_id == 0 || gt[c].class_id > k {
            return Err(Error::LabelRange(format!("instance class {} with {k} classes", gt[c].class_id)));
        }
        let ls = tape.log_softmax(logits)?;
        class_parts.push(tape.slice(ls, &[(0, 1, 1), (gt[c].class_id - 1, gt[c].class_id, 1)])?);
    }
    let class = if class_parts.is_empty() {
        None
    } else {
        let all = tape.concat(&class_parts, 0)?;
        let m = tape.mean(all)?;
        Some(tape.scale(m, -1.0)?)
    };

    let stop_targets: Vec<f64> = (0..steps)
        .map(|r| match weights.stop_targets {
            StopTargets::Matched => assignment.col_for(r).is_some() as u8 as f64,
            StopTargets::Prefix => (r < gt.len()) as u8 as f64,
        })
        .collect();
    let stop_logits: Vec<Var> = seq
        .steps
        .iter()
        .map(|s| s.stop_logit.ok_or_else(|| Error::Invalid("sequence has no stop head".into())))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&stop_logits, 0)?;
    let stop = Some(bce_logits(tape, stacked, &stop_targets)?);

    let obj = if pixels > 0 && !gt.is_empty() {
        Some(objectness_term(tape, seq, gt, height, width)?)
    } else {
        None
    };
    let total = finish(
        tape,
        &[(mask, 1.0), (class, weights.class), (stop, weights.stop), (obj, weights.objectness)],
    )?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        mask_term: item(tape, mask),
        class_term: item(tape, class),
        stop_term: item(tape, stop),
        objectness_term: item(tape, obj),
        assignment,
    };
    Ok((total, breakdown))
}

/// Conditioned loss: steps tagged with class tokens are matched only to
/// ground truth of the same class (or to any instance under
/// [`HungarianMode::Unmasked`]); mask term plus the objectness map.
pub fn wrsis_loss(tape: &mut Tape, seq: &TracedSequence, gt: &[Instance], mode: HungarianMode, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    check_gt(seq, tape, gt)?;
    let tokens = seq.tokens.as_ref().ok_or_else(|| Error::Invalid("sequence was not decoded from tokens".into()))?;
    let mut a: Vec<usize> = tokens.clone();
    let mut b: Vec<usize> = gt.iter().map(|i| i.class_id).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::Invalid(format!("token classes {a:?} differ from ground-truth classes {b:?}")));
    }
    let first = &gt[0].mask;
    let targets: Vec<Vec<f64>> = gt.iter().map(|i| i.mask.to_f64()).collect();
    let costs = cost_matrix(tape, seq, &targets)?;
    let gt_classes: Vec<usize> = gt.iter().map(|i| i.class_id).collect();
    let assignment = match mode {
        HungarianMode::Masked => masked_hungarian(&costs, tokens, &gt_classes, Coverage::Complete)?,
        HungarianMode::Unmasked => hungarian(&costs)?,
    };
    let mask = mask_term(tape, seq, &targets, &assignment)?;
    let obj = Some(objectness_term(tape, seq, gt, first.height, first.width)?);
    let total = finish(tape, &[(mask, 1.0), (obj, weights.objectness)])?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        mask_term: item(tape, mask),
        class_term: 0.0,
        stop_term: 0.0,
        objectness_term: item(tape, obj),
        assignment,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::autodiff::ParamStore;
    use crate::models::{ConditionedInstanceNet, ModelConfig, RecurrentInstanceNet, TracedStep};
    use crate::synthdata::Mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TRIALS: u64 = 20;
    const TOL: f64 = 1e-4;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            height: 8,
            width: 8,
            features: 3,
            hidden: 4,
            max_steps: 3,
            stop_threshold: 0.5,
            distance_scale: 2.0,
        }
    }

    fn rect(class_id: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Instance {
        Instance {
            class_id,
            mask: Mask::from_fn(8, 8, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x)),
        }
    }

    /// Jitters every parameter so zero-initialised biases do not leave ReLUs
    /// sitting exactly on their kink.
    fn jitter(params: &mut ParamStore, rng: &mut impl Rng) {
        for id in 0..params.len() {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }

    fn random_image(rng: &mut impl Rng) -> Tensor {
        Tensor::new(&[8, 8, 3], (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    /// A sequence whose steps are constant leaves with the given masks.
    fn fixed_sequence(tape: &mut Tape, masks: &[Vec<f64>], classes: &[usize], stops: &[f64], tokens: Option<Vec<usize>>) -> TracedSequence {
        let steps = masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mask = tape.constant(Tensor::new(&[m.len()], m.clone()).unwrap());
                let class_logits = classes.get(i).map(|&c| {
                    let mut l = vec![-30.0; 2];
                    l[c - 1] = 30.0;
                    tape.constant(Tensor::new(&[1, 2], l).unwrap())
                });
                let stop_logit = stops.get(i).map(|&s| tape.constant(Tensor::new(&[1, 1], vec![s]).unwrap()));
                TracedStep {
                    mask,
                    class_logits,
                    stop_logit,
                }
            })
            .collect();
        TracedSequence {
            steps,
            tokens,
            anchors: vec![0; masks.len()],
            objectness: tape.constant(Tensor::zeros(&[16, 2])),
        }
    }

    fn no_obj() -> LossWeights {
        LossWeights {
            objectness: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn semantic_loss_examples() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 5) as u8).collect();
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[4, 4, 5]));
        let l = semantic_loss(&mut tape, uniform, &labels).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);

        let mut confident = vec![0.0; 80];
        for (i, &c) in labels.iter().enumerate() {
            confident[i * 5 + c as usize] = 60.0;
        }
        let v = tape.constant(Tensor::new(&[4, 4, 5], confident).unwrap());
        let l = semantic_loss(&mut tape, v, &labels).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        let mut bad = labels.clone();
        bad[3] = 5;
        assert!(matches!(semantic_loss(&mut tape, v, &bad), Err(Error::LabelRange(_))));
        assert!(semantic_loss(&mut tape, v, &labels[..15]).is_err());
    }

    #[test]
    fn semantic_loss_gradient_matches_finite_differences() {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..5)).collect();
            let mut store = ParamStore::new();
            store.add("logits", Tensor::new(&[4, 4, 5], (0..80).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap());
            let r = check_gradients(&store, |tape, s| {
                let v = tape.param(s, 0);
                semantic_loss(tape, v, &labels)
            })
            .unwrap();
            assert!(r.rel_error <= TOL, "trial {trial}: {}", r.rel_error);
        }
    }

    #[test]
    fn perfect_sequence_has_near_zero_loss() {
        let gt = vec![rect(1, 0, 0, 3, 3), rect(2, 4, 4, 8, 8)];
        let mut tape = Tape::new();
        let masks: Vec<Vec<f64>> = vec![gt[1].mask.to_f64(), gt[0].mask.to_f64(), vec![0.0; 64]];
        let seq = fixed_sequence(&mut tape, &masks, &[2, 1, 1], &[30.0, 30.0, -30.0], None);
        let (_, b) = rsis_loss(&mut tape, &seq, &gt, &no_obj()).unwrap();
        assert!(b.total < 1e-12, "{b:?}");
        assert_eq!(b.assignment.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn assignment_prefers_the_matching_step() {
        let gt = vec![rect(1, 2, 2, 6, 6)];
        let mut tape = Tape::new();
        let garbage: Vec<f64> = (0..64).map(|i| if i % 7 == 0 { 0.9 } else { 0.1 }).collect();
        let seq = fixed_sequence(&mut tape, &[gt[0].mask.to_f64(), garbage], &[1, 1], &[0.0, 0.0], None);
        let (_, b) = rsis_loss(&mut tape, &seq, &gt, &no_obj()).unwrap();
        assert_eq!(b.assignment.pairs, vec![(0, 0)]);
        assert!(b.mask_term.abs() < 1e-15);
    }

    #[test]
    fn rsis_requires_enough_steps() {
        let gt = vec![rect(1, 0, 0, 2, 2), rect(1, 4, 4, 6, 6)];
        let mut tape = Tape::new();
        let seq = fixed_sequence(&mut tape, &[vec![0.5; 64]], &[1], &[0.0], None);
        assert!(rsis_loss(&mut tape, &seq, &gt, &no_obj()).is_err());
    }

    #[test]
    fn rsis_is_invariant_to_gt_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = vec![rect(1, 0, 0, 3, 3), rect(2, 4, 4, 8, 8), rect(1, 0, 5, 3, 8)];
        let masks: Vec<Vec<f64>> = (0..4).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect();
        let mut tape = Tape::new();
        let seq = fixed_sequence(&mut tape, &masks, &[1, 2, 1, 2], &[1.0, 0.5, -0.2, -1.0], None);
        let (_, a) = rsis_loss(&mut tape, &seq, &gt, &LossWeights::default()).unwrap();
        let rev: Vec<Instance> = gt.iter().rev().cloned().collect();
        let (_, b) = rsis_loss(&mut tape, &seq, &rev, &LossWeights::default()).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!(a.mask_term >= 0.0 && a.class_term >= 0.0 && a.stop_term >= 0.0 && a.objectness_term >= 0.0);
    }

    #[test]
    fn objectness_balances_positives_and_negatives() {
        // one 4x4 instance covers 4 of 32 half-resolution cells
        let gt = vec![rect(1, 0, 0, 4, 4)];
        let mut tape = Tape::new();
        let mut seq = fixed_sequence(&mut tape, &[gt[0].mask.to_f64()], &[1], &[5.0], None);
        seq.objectness = tape.constant(Tensor::full(&[16, 2], -3.0));
        let (_, b) = rsis_loss(&mut tape, &seq, &gt, &LossWeights::default()).unwrap();
        let softplus = |x: f64| (1.0 + x.exp()).ln();
        let want = 0.5 * softplus(3.0) + 0.5 * softplus(-3.0);
        assert!((b.objectness_term - want).abs() < 1e-12, "{} vs {want}", b.objectness_term);
    }

    #[test]
    fn wrsis_examples() {
        // single instance: one feasible pair
        let gt = vec![rect(2, 1, 1, 5, 5)];
        let mut tape = Tape::new();
        let m: Vec<f64> = (0..64).map(|i| (i % 3) as f64 / 3.0).collect();
        let seq = fixed_sequence(&mut tape, std::slice::from_ref(&m), &[], &[], Some(vec![2]));
        let (_, b) = wrsis_loss(&mut tape, &seq, &gt, HungarianMode::Masked, &no_obj()).unwrap();
        assert!((b.total - (1.0 - siou(&m, &gt[0].mask.to_f64()).unwrap())).abs() < 1e-12);

        // classes force the anti-diagonal even though the diagonal is cheaper
        let gt = vec![rect(1, 0, 0, 4, 4), rect(2, 4, 4, 8, 8)];
        let seq = fixed_sequence(&mut tape, &[gt[0].mask.to_f64(), gt[1].mask.to_f64()], &[], &[], Some(vec![2, 1]));
        let (_, masked) = wrsis_loss(&mut tape, &seq, &gt, HungarianMode::Masked, &no_obj()).unwrap();
        assert_eq!(masked.assignment.pairs, vec![(0, 1), (1, 0)]);
        let (_, unmasked) = wrsis_loss(&mut tape, &seq, &gt, HungarianMode::Unmasked, &no_obj()).unwrap();
        assert_eq!(unmasked.assignment.pairs, vec![(0, 0), (1, 1)]);
        assert!(unmasked.mask_term < masked.mask_term);

        // corrupt weak label
        let seq = fixed_sequence(&mut tape, &[vec![0.5; 64], vec![0.5; 64]], &[], &[], Some(vec![1, 1]));
        assert!(wrsis_loss(&mut tape, &seq, &gt, HungarianMode::Masked, &no_obj()).is_err());
    }

    #[test]
    fn wrsis_is_invariant_to_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = vec![rect(1, 0, 0, 3, 3), rect(1, 4, 4, 8, 8), rect(2, 0, 5, 3, 8)];
        let masks: Vec<Vec<f64>> = (0..3).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect();
        let mut tape = Tape::new();
        let seq = fixed_sequence(&mut tape, &masks, &[], &[], Some(vec![1, 1, 2]));
        let (_, a) = wrsis_loss(&mut tape, &seq, &gt, HungarianMode::Masked, &no_obj()).unwrap();
        let perm = vec![gt[2].clone(), gt[1].clone(), gt[0].clone()];
        let (_, b) = wrsis_loss(&mut tape, &seq, &perm, HungarianMode::Masked, &no_obj()).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        // swap the two class-1 steps
        let swapped = fixed_sequence(&mut tape, &[masks[1].clone(), masks[0].clone(), masks[2].clone()], &[], &[], Some(vec![1, 1, 2]));
        let (_, c) = wrsis_loss(&mut tape, &swapped, &gt, HungarianMode::Masked, &no_obj()).unwrap();
        assert!((a.total - c.total).abs() < 1e-12);
    }

    /// Runs `TRIALS` finite-difference checks at random points inside a
    /// smooth piece of the loss: a draw is rejected when any probe changes a
    /// discrete decision (step anchors or the assignment), since the loss is
    /// only piecewise differentiable across those.
    fn check_piecewise<N>(label: &str, seed: u64, make: impl Fn(u64, &mut ChaCha8Rng) -> N, loss: impl Fn(&N, &mut Tape, &ParamStore) -> Result<(Var, Vec<usize>, Assignment)>, params: impl Fn(&N) -> &ParamStore) {
        let (mut accepted, mut rejected) = (0, 0);
        let mut draw = 0;
        while accepted < TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + draw);
            let net = make(draw, &mut rng);
            draw += 1;
            let base = {
                let mut tape = Tape::new();
                let (_, anchors, a) = loss(&net, &mut tape, params(&net)).unwrap();
                (anchors, a)
            };
            let stable = std::cell::Cell::new(true);
            let r = check_gradients(params(&net), |tape, s| {
                let (v, anchors, a) = loss(&net, tape, s)?;
                if anchors != base.0 || a.pairs != base.1.pairs {
                    stable.set(false);
                }
                Ok(v)
            })
            .unwrap();
            if !stable.get() {
                rejected += 1;
                assert!(rejected <= TRIALS, "{label}: too many draws near a discontinuity");
                continue;
            }
            assert!(r.rel_error <= TOL, "{label} draw {draw}: rel error {}", r.rel_error);
            accepted += 1;
        }
    }

    #[test]
    fn rsis_loss_gradient_matches_finite_differences() {
        let gt = vec![rect(1, 0, 0, 4, 3), rect(2, 5, 3, 8, 8)];
        check_piecewise(
            "rsis",
            100,
            |draw, rng| {
                let mut net = RecurrentInstanceNet::new(tiny_config(), draw).unwrap();
                jitter(&mut net.params, rng);
                (net, random_image(rng))
            },
            |(net, image), tape, s| {
                let seq = net.trace(tape, s, image, 3)?;
                let (v, b) = rsis_loss(tape, &seq, &gt, &LossWeights::default())?;
                Ok((v, seq.anchors.clone(), b.assignment))
            },
            |(net, _)| &net.params,
        );
    }

    #[test]
    fn wrsis_loss_gradient_matches_finite_differences() {
        let gt = vec![rect(2, 0, 0, 4, 3), rect(1, 5, 3, 8, 8), rect(2, 0, 5, 3, 8)];
        check_piecewise(
            "wrsis",
            200,
            |draw, rng| {
                let mut net = ConditionedInstanceNet::new(tiny_config(), draw).unwrap();
                jitter(&mut net.params, rng);
                (net, random_image(rng))
            },
            |(net, image), tape, s| {
                let seq = net.trace(tape, s, image, &[1, 2, 2])?;
                let (v, b) = wrsis_loss(tape, &seq, &gt, HungarianMode::Masked, &LossWeights::default())?;
                Ok((v, seq.anchors.clone(), b.assignment))
            },
            |(net, _)| &net.params,
        );
    }
}
