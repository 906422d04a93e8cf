//! Annotation network, pseudo-labelling and segmentation network.
//!
//! One repeat draws a fresh strong/weak split from a fixed scene pool, trains
//! the annotator `f` on the strong part, pseudo-labels the weak part and
//! trains the segmenter `g` on the union. Both are scored on a shared
//! held-out split.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Sgd, Tape, Tensor};
use crate::budget::{allocation_cost, seconds_to_days_display, Allocation, CostModel, SupervisionKind};
use crate::error::{Error, Result};
use crate::losses::{rsis_loss, semantic_loss, wrsis_loss, HungarianMode, LossWeights};
use crate::metrics::{ap50, ap50_per_class, ConfusionAccumulator, PredictedInstance};
use crate::models::{argmax_labels, image_tensor, tokens_from_counts, ModelConfig, NetKind, Network, SequencePrediction};
use crate::rng::{stream, Purpose};
use crate::synthdata::{generate_scenes, held_out_scenes, split_dataset, DataConfig, DatasetSplit, Instance, LabelSet, Mask, Scene, WeakLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AnnotatorVariant {
    /// Sequential network with class and stop heads.
    Plain,
    /// Plain, with the class argmax restricted to the image-level classes.
    PlainIL,
    /// PlainIL, keeping the first `n_c` steps of each class instead of
    /// truncating at the stop score.
    PlainILC,
    /// Decoder conditioned on class tokens built from the counts.
    Conditioned,
    /// Per-pixel semantic network.
    Semantic,
}

impl AnnotatorVariant {
    pub const ALL: [AnnotatorVariant; 5] = [
        AnnotatorVariant::Plain,
        AnnotatorVariant::PlainIL,
        AnnotatorVariant::PlainILC,
        AnnotatorVariant::Conditioned,
        AnnotatorVariant::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnotatorVariant::Plain => "plain",
            AnnotatorVariant::PlainIL => "plain-il",
            AnnotatorVariant::PlainILC => "plain-ilc",
            AnnotatorVariant::Conditioned => "wrsis",
            AnnotatorVariant::Semantic => "semantic",
        }
    }

    /// Weak supervision the variant reads at pseudo-labelling time.
    pub fn needs_weak(self) -> Option<SupervisionKind> {
        match self {
            AnnotatorVariant::PlainIL => Some(SupervisionKind::ImageLevel),
            AnnotatorVariant::PlainILC | AnnotatorVariant::Conditioned => Some(SupervisionKind::ImageLevelCounts),
            AnnotatorVariant::Plain | AnnotatorVariant::Semantic => None,
        }
    }

    pub fn annotator_kind(self) -> NetKind {
        match self {
            AnnotatorVariant::Semantic => NetKind::Semantic,
            AnnotatorVariant::Conditioned => NetKind::Conditioned,
            _ => NetKind::Recurrent,
        }
    }

    /// The segmenter never reads weak labels.
    pub fn segmenter_kind(self) -> NetKind {
        match self {
            AnnotatorVariant::Semantic => NetKind::Semantic,
            _ => NetKind::Recurrent,
        }
    }

    pub fn is_semantic(self) -> bool {
        self == AnnotatorVariant::Semantic
    }
}

impl fmt::Display for AnnotatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnotatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" | "rsis" => Ok(AnnotatorVariant::Plain),
            "plain-il" | "rsis+il" => Ok(AnnotatorVariant::PlainIL),
            "plain-ilc" | "rsis+il+c" => Ok(AnnotatorVariant::PlainILC),
            "wrsis" | "w-rsis" | "conditioned" => Ok(AnnotatorVariant::Conditioned),
            "semantic" => Ok(AnnotatorVariant::Semantic),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl From<AnnotatorVariant> for String {
    fn from(v: AnnotatorVariant) -> String {
        v.as_str().to_string()
    }
}

impl TryFrom<String> for AnnotatorVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// How a predicted instance is ranked for AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceSource {
    /// Stop score times the top class probability when both heads exist,
    /// otherwise the mean foreground probability.
    Auto,
    /// Mean mask probability over the pixels kept in the binary mask.
    MeanForeground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Samples per update; 0 means the whole training set.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 300,
            batch_size: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, which: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{which}.lr must be positive")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("{which}.momentum must lie in [0, 1)")));
        }
        if self.epochs == 0 {
            return Err(Error::Config(format!("{which}.epochs must be at least 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub variant: AnnotatorVariant,
    pub n_strong: usize,
    pub m_weak: usize,
    pub weak_kind: SupervisionKind,
    /// Scenes in the pool splits are drawn from; `n_strong + m_weak` when 0.
    pub pool_size: usize,
    pub test_size: usize,
    pub annotator: TrainConfig,
    pub segmenter: TrainConfig,
    pub loss: LossWeights,
    /// Matching used to train the conditioned annotator.
    pub hungarian: HungarianMode,
    /// Loss weight of pseudo-labelled samples relative to strong ones.
    pub pseudo_weight: f64,
    pub confidence: ConfidenceSource,
    pub seeds: Seeds,
    pub repeats: usize,
    pub cost_model: CostModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            variant: AnnotatorVariant::Plain,
            n_strong: 32,
            m_weak: 256,
            weak_kind: SupervisionKind::Unlabeled,
            pool_size: 0,
            test_size: 256,
            annotator: TrainConfig::default(),
            segmenter: TrainConfig::default(),
            loss: LossWeights::default(),
            hungarian: HungarianMode::Masked,
            pseudo_weight: 1.0,
            confidence: ConfidenceSource::Auto,
            seeds: Seeds { data: 0, split: 0, init: 0 },
            repeats: 5,
            cost_model: CostModel::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.cost_model.validate()?;
        self.annotator.validate("annotator")?;
        self.segmenter.validate("segmenter")?;
        if self.n_strong == 0 {
            return Err(Error::Config("n_strong must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test_size must be at least 1".into()));
        }
        if (self.model.num_classes, self.model.height, self.model.width) != (self.data.num_classes, self.data.height, self.data.width) {
            return Err(Error::Config("model and data disagree on classes or image size".into()));
        }
        if self.model.max_steps < self.data.max_instances {
            return Err(Error::Config("model.max_steps must cover data.max_instances".into()));
        }
        if self.pool_size != 0 && self.pool_size < self.n_strong + self.m_weak {
            return Err(Error::Config("pool_size must be at least n_strong + m_weak".into()));
        }
        if !(self.pseudo_weight >= 0.0 && self.pseudo_weight.is_finite()) {
            return Err(Error::Config("pseudo_weight must be non-negative".into()));
        }
        if self.weak_kind == SupervisionKind::FullMasks {
            return Err(Error::Config("weak_kind cannot be full masks".into()));
        }
        if let Some(need) = self.variant.needs_weak() {
            if self.m_weak > 0 && !provides(self.weak_kind, need) {
                return Err(Error::MissingWeakLabels(format!(
                    "variant {} needs {} labels on the weak set, weak_kind is {}",
                    self.variant, need, self.weak_kind
                )));
            }
        }
        Ok(())
    }

    pub fn allocation(&self) -> Allocation {
        Allocation::new(self.n_strong as u64, SupervisionKind::FullMasks, self.m_weak as u64, self.weak_kind)
    }

    pub fn budget_seconds(&self) -> f64 {
        allocation_cost(&self.allocation(), &self.cost_model)
    }

    /// Scenes in the shared pool.
    pub fn pool_len(&self) -> usize {
        if self.pool_size == 0 {
            self.n_strong + self.m_weak
        } else {
            self.pool_size
        }
    }

    /// Data config with the data seed applied.
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seed: self.seeds.data,
            ..self.data.clone()
        }
    }

    /// Seed of repeat `r`; it drives both the split and the initialisation.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.seeds.split.wrapping_add(r as u64)
    }
}

fn provides(have: SupervisionKind, need: SupervisionKind) -> bool {
    use SupervisionKind::*;
    match need {
        ImageLevel => matches!(have, ImageLevel | ImageLevelCounts | BoundingBoxes),
        ImageLevelCounts => matches!(have, ImageLevelCounts | BoundingBoxes),
        _ => have == need,
    }
}

/// Stable digest of the canonical JSON form of a config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serialises");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

/// One supervised example for any of the networks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub instances: Vec<Instance>,
    pub semantic: Vec<u8>,
    pub weight: f64,
}

impl Sample {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Ok(Sample {
            image: image_tensor(scene.height, scene.width, &scene.image)?,
            instances: scene.instances.clone(),
            semantic: scene.semantic.clone(),
            weight: 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Weighted mean loss per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

fn sample_loss(net: &Network, store: &crate::autodiff::ParamStore, tape: &mut Tape, s: &Sample, loss: &LossWeights, mode: HungarianMode) -> Result<crate::autodiff::Var> {
    match net {
        Network::Semantic(n) => {
            let logits = n.trace(tape, store, &s.image)?;
            semantic_loss(tape, logits, &s.semantic)
        }
        Network::Recurrent(n) => {
            let seq = n.trace(tape, store, &s.image, n.config().max_steps)?;
            Ok(rsis_loss(tape, &seq, &s.instances, loss)?.0)
        }
        Network::Conditioned(n) => {
            let mut classes: Vec<usize> = s.instances.iter().map(|i| i.class_id).collect();
            classes.sort_unstable();
            let seq = n.trace(tape, store, &s.image, &classes)?;
            Ok(wrsis_loss(tape, &seq, &s.instances, mode, loss)?.0)
        }
    }
}

/// Momentum SGD over `samples`; the order is reshuffled every epoch when
/// training in mini-batches.
pub fn train_network(net: &mut Network, samples: &[Sample], train: &TrainConfig, loss: &LossWeights, mode: HungarianMode, seed: u64) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let batch = if train.batch_size == 0 { samples.len() } else { train.batch_size.min(samples.len()) };
    let mut opt = Sgd::new(train.lr, train.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        if batch < samples.len() {
            order.shuffle(&mut stream(seed, epoch as u64, Purpose::Order));
        }
        let mut epoch_sum = 0.0;
        let mut epoch_weight = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = Gradients::default();
            let weight: f64 = chunk.iter().map(|&i| samples[i].weight).sum();
            if weight == 0.0 {
                continue;
            }
            for &i in chunk {
                let s = &samples[i];
                if s.weight == 0.0 {
                    continue;
                }
                let mut tape = Tape::new();
                let l = sample_loss(net, net.params(), &mut tape, s, loss, mode).map_err(|e| match e {
                    Error::NonFinite(op) => Error::Diverged(format!("epoch {epoch}: non-finite value in {op}")),
                    other => other,
                })?;
                let value = tape.value(l).item();
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("epoch {epoch}: loss {value}")));
                }
                epoch_sum += s.weight * value;
                epoch_weight += s.weight;
                grads.accumulate(&tape.backward(l)?, s.weight / weight);
            }
            opt.step(net.params_mut(), &grads)?;
            if !net.params().iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::Diverged(format!("epoch {epoch}: non-finite parameters")));
            }
        }
        epoch_losses.push(epoch_sum / epoch_weight.max(f64::MIN_POSITIVE));
    }
    Ok(TrainReport { epoch_losses })
}

/// Initialisation seed of the annotator or segmenter in repeat `seed`.
fn init_seed(config: &ExperimentConfig, repeat_seed: u64, role: u64) -> u64 {
    config.seeds.init ^ repeat_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ role
}

const ANNOTATOR_ROLE: u64 = 0xa11;
const SEGMENTER_ROLE: u64 = 0x5e6;

/// Trains `f` on the strong set. The conditioned variant reads the class
/// tokens of each strong image alongside its masks.
pub fn train_annotator(config: &ExperimentConfig, strong: &[(Scene, LabelSet)], repeat_seed: u64) -> Result<(Network, TrainReport)> {
    if strong.is_empty() {
        return Err(Error::Config("the annotator needs at least one strong sample".into()));
    }
    let samples = strong.iter().map(|(s, _)| Sample::from_scene(s)).collect::<Result<Vec<_>>>()?;
    let seed = init_seed(config, repeat_seed, ANNOTATOR_ROLE);
    let mut net = Network::new(config.variant.annotator_kind(), config.model.clone(), seed)?;
    let report = train_network(&mut net, &samples, &config.annotator, &config.loss, config.hungarian, seed)?;
    Ok((net, report))
}

/// Pseudo-label of one image.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoLabel {
    Instances(Vec<PredictedInstance>),
    Semantic(Vec<u8>),
}

impl PseudoLabel {
    pub fn is_empty(&self) -> bool {
        match self {
            PseudoLabel::Instances(v) => v.is_empty(),
            PseudoLabel::Semantic(s) => s.iter().all(|&c| c == 0),
        }
    }
}

fn binarize(height: usize, width: usize, soft: &[f64]) -> Mask {
    Mask {
        height,
        width,
        data: soft.iter().map(|&p| (p >= 0.5) as u8).collect(),
    }
}

fn mean_foreground(soft: &[f64]) -> f64 {
    let kept: Vec<f64> = soft.iter().copied().filter(|&p| p >= 0.5).collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

fn argmax_in(dist: &[f64], allowed: Option<&[usize]>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in dist.iter().enumerate() {
        let class = k + 1;
        if allowed.is_some_and(|a| !a.contains(&class)) {
            continue;
        }
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((class, p));
        }
    }
    best.unwrap_or((1, 0.0))
}

/// Turns raw decoded steps into binary instances for `variant`.
pub fn decode_instances(pred: &SequencePrediction, variant: AnnotatorVariant, weak: Option<&WeakLabels>, threshold: f64, confidence: ConfidenceSource) -> Result<Vec<PredictedInstance>> {
    let (h, w) = (pred.height, pred.width);
    let score = |stop: Option<f64>, top: f64, soft: &[f64]| match (confidence, stop) {
        (ConfidenceSource::Auto, Some(s)) => s * top,
        _ => mean_foreground(soft),
    };
    let mut out = Vec::new();
    match variant {
        AnnotatorVariant::Plain | AnnotatorVariant::PlainIL => {
            let allowed: Option<Vec<usize>> = match variant {
                AnnotatorVariant::PlainIL => Some(weak_classes(weak, variant)?),
                _ => None,
            };
            for step in &pred.steps[..pred.surviving_steps(threshold)] {
                let dist = step.class_dist.as_ref().ok_or_else(|| Error::Invalid("prediction has no class head".into()))?;
                let (class, top) = argmax_in(dist, allowed.as_deref());
                out.push(PredictedInstance {
                    class_id: class,
                    confidence: score(step.stop, top, &step.mask),
                    mask: binarize(h, w, &step.mask),
                });
            }
        }
        AnnotatorVariant::PlainILC => {
            let counts = weak_counts(weak, variant)?;
            let allowed: Vec<usize> = counts.keys().copied().collect();
            let mut used = BTreeMap::new();
            for step in &pred.steps {
                let dist = step.class_dist.as_ref().ok_or_else(|| Error::Invalid("prediction has no class head".into()))?;
                let (class, top) = argmax_in(dist, Some(&allowed));
                let n = used.entry(class).or_insert(0usize);
                if *n < counts.get(&class).copied().unwrap_or(0) {
                    *n += 1;
                    out.push(PredictedInstance {
                        class_id: class,
                        confidence: score(step.stop, top, &step.mask),
                        mask: binarize(h, w, &step.mask),
                    });
                }
            }
        }
        AnnotatorVariant::Conditioned => {
            let tokens = pred.tokens.as_ref().ok_or_else(|| Error::Invalid("prediction was not decoded from tokens".into()))?;
            for (step, &class) in pred.steps.iter().zip(tokens) {
                out.push(PredictedInstance {
                    class_id: class,
                    confidence: mean_foreground(&step.mask),
                    mask: binarize(h, w, &step.mask),
                });
            }
        }
        AnnotatorVariant::Semantic => return Err(Error::Invalid("semantic outputs have no instances".into())),
    }
    out.retain(|p| !p.mask.is_empty());
    Ok(out)
}

fn weak_classes(weak: Option<&WeakLabels>, variant: AnnotatorVariant) -> Result<Vec<usize>> {
    weak.map(|w| w.classes().into_iter().collect())
        .ok_or_else(|| Error::MissingWeakLabels(format!("variant {variant} needs image-level labels")))
}

fn weak_counts(weak: Option<&WeakLabels>, variant: AnnotatorVariant) -> Result<BTreeMap<usize, usize>> {
    weak.and_then(WeakLabels::counts)
        .ok_or_else(|| Error::MissingWeakLabels(format!("variant {variant} needs per-class counts")))
}

/// Runs `net` on one image the way `variant` prescribes.
pub fn annotate(net: &Network, image: &Tensor, variant: AnnotatorVariant, weak: Option<&WeakLabels>, threshold: f64, confidence: ConfidenceSource) -> Result<PseudoLabel> {
    match (net, variant) {
        (Network::Semantic(n), AnnotatorVariant::Semantic) => {
            let logits = crate::models::semantic_forward(n, image)?;
            Ok(PseudoLabel::Semantic(argmax_labels(&logits)))
        }
        (Network::Recurrent(n), AnnotatorVariant::Plain | AnnotatorVariant::PlainIL | AnnotatorVariant::PlainILC) => {
            let pred = crate::models::instance_forward(n, image, n.config().max_steps)?;
            Ok(PseudoLabel::Instances(decode_instances(&pred, variant, weak, threshold, confidence)?))
        }
        (Network::Conditioned(n), AnnotatorVariant::Conditioned) => {
            let tokens = tokens_from_counts(&weak_counts(weak, variant)?);
            if tokens.is_empty() {
                return Ok(PseudoLabel::Instances(Vec::new()));
            }
            let pred = crate::models::conditioned_forward(n, image, &tokens)?;
            Ok(PseudoLabel::Instances(decode_instances(&pred, variant, weak, threshold, confidence)?))
        }
        _ => Err(Error::Invalid(format!("a {:?} network cannot run variant {variant}", net.kind()))),
    }
}

/// Image plus whatever weak labels accompany it; the hidden masks of weak
/// scenes never enter here.
#[derive(Debug, Clone)]
pub struct WeakInput {
    pub image: Tensor,
    pub weak: Option<WeakLabels>,
}

/// Pseudo-labels every input, in order.
pub fn pseudo_label(net: &Network, inputs: &[WeakInput], variant: AnnotatorVariant, threshold: f64, confidence: ConfidenceSource) -> Result<Vec<PseudoLabel>> {
    inputs.iter().map(|i| annotate(net, &i.image, variant, i.weak.as_ref(), threshold, confidence)).collect()
}

/// Builds the union of strong samples and non-empty pseudo-labelled samples.
pub fn union_samples(strong: &[(Scene, LabelSet)], weak: &[WeakInput], pseudo: &[PseudoLabel], pseudo_weight: f64) -> Result<Vec<Sample>> {
    let mut out = strong.iter().map(|(s, _)| Sample::from_scene(s)).collect::<Result<Vec<_>>>()?;
    for (input, label) in weak.iter().zip(pseudo) {
        if label.is_empty() {
            continue;
        }
        let (h, w) = (input.image.shape()[0], input.image.shape()[1]);
        let (instances, semantic) = match label {
            PseudoLabel::Instances(list) => {
                let inst: Vec<Instance> = list
                    .iter()
                    .map(|p| Instance {
                        class_id: p.class_id,
                        mask: p.mask.clone(),
                    })
                    .collect();
                let sem = crate::synthdata::semantic_from_instances(h, w, &inst);
                (inst, sem)
            }
            PseudoLabel::Semantic(sem) => (Vec::new(), sem.clone()),
        };
        out.push(Sample {
            image: input.image.clone(),
            instances,
            semantic,
            weight: pseudo_weight,
        });
    }
    Ok(out)
}

/// Trains `g` (the unconditioned architecture) on the union.
pub fn train_segmenter(config: &ExperimentConfig, union: &[Sample], repeat_seed: u64) -> Result<(Network, TrainReport)> {
    if union.is_empty() {
        return Err(Error::Invalid("the segmenter needs a non-empty training union".into()));
    }
    let seed = init_seed(config, repeat_seed, SEGMENTER_ROLE);
    let mut net = Network::new(config.variant.segmenter_kind(), config.model.clone(), seed)?;
    let report = train_network(&mut net, union, &config.segmenter, &config.loss, config.hungarian, seed)?;
    Ok((net, report))
}

/// Held-out scene with the weak labels a weak variant may read at test time.
#[derive(Debug, Clone)]
pub struct TestItem {
    pub scene: Scene,
    pub image: Tensor,
    pub counts: WeakLabels,
}

pub fn test_items(scenes: &[Scene]) -> Result<Vec<TestItem>> {
    scenes
        .iter()
        .map(|s| {
            Ok(TestItem {
                image: image_tensor(s.height, s.width, &s.image)?,
                counts: crate::synthdata::derive_labels(s)
                    .restrict(SupervisionKind::ImageLevelCounts)
                    .expect("counts are always derivable"),
                scene: s.clone(),
            })
        })
        .collect()
}

/// Per-class scores and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metric: &'static str,
    pub per_class: BTreeMap<usize, Option<f64>>,
    pub mean: f64,
}

/// AP@0.5 (instance variants) or mIoU (semantic) of `net` run as `variant`.
pub fn evaluate(net: &Network, variant: AnnotatorVariant, test: &[TestItem], threshold: f64, confidence: ConfidenceSource) -> Result<f64> {
    Ok(evaluate_detail(net, variant, test, threshold, confidence)?.mean)
}

pub fn evaluate_detail(net: &Network, variant: AnnotatorVariant, test: &[TestItem], threshold: f64, confidence: ConfidenceSource) -> Result<Evaluation> {
    if variant.is_semantic() {
        let mut acc = ConfusionAccumulator::new(net.config().num_classes + 1);
        for t in test {
            match annotate(net, &t.image, variant, None, threshold, confidence)? {
                PseudoLabel::Semantic(p) => acc.add(&p, &t.scene.semantic)?,
                PseudoLabel::Instances(_) => unreachable!("semantic variant yields semantic labels"),
            }
        }
        return Ok(Evaluation {
            metric: "miou",
            per_class: acc.per_class_iou().into_iter().enumerate().collect(),
            mean: acc.miou(),
        });
    }
    let weak = variant.needs_weak().map(|_| ());
    let mut images = Vec::with_capacity(test.len());
    for t in test {
        let label = annotate(net, &t.image, variant, weak.map(|_| &t.counts), threshold, confidence)?;
        let PseudoLabel::Instances(preds) = label else { unreachable!("instance variants yield instances") };
        images.push((preds, t.scene.instances.clone()));
    }
    let per_class = ap50_per_class(&images)?;
    let mean = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    Ok(Evaluation {
        metric: "ap50",
        per_class: per_class.into_iter().map(|(c, v)| (c, Some(v))).collect(),
        mean,
    })
}

/// Outcome of one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub repeat_seed: u64,
    pub f_score: f64,
    pub g_score: f64,
    /// Pseudo-labels scored against the hidden masks of the weak pool.
    pub pseudo_score: f64,
    pub pseudo_images: usize,
    pub f_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
}

/// Everything a repeat needs besides the config.
pub struct Workspace {
    pub pool: Vec<Scene>,
    pub test: Vec<TestItem>,
}

impl Workspace {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let data = config.data_config();
        Workspace::with_pool(config, generate_scenes(&data, 0..config.pool_len() as u64)?)
    }

    /// Uses `pool` (for instance read back from disk) with the shared test split.
    pub fn with_pool(config: &ExperimentConfig, pool: Vec<Scene>) -> Result<Self> {
        Ok(Workspace {
            pool,
            test: test_items(&held_out_scenes(&config.data_config(), config.test_size)?)?,
        })
    }
}

/// Image tensors and weak labels of a split's weak and unlabeled scenes,
/// plus the scenes themselves for scoring.
pub fn split_weak_inputs(split: &DatasetSplit) -> Result<(Vec<WeakInput>, Vec<Scene>)> {
    let mut inputs = Vec::with_capacity(split.weak.len() + split.unlabeled.len());
    let mut hidden = Vec::with_capacity(inputs.capacity());
    for (scene, labels) in &split.weak {
        inputs.push(WeakInput {
            image: image_tensor(scene.height, scene.width, &scene.image)?,
            weak: Some(labels.clone()),
        });
        hidden.push(scene.clone());
    }
    for scene in &split.unlabeled {
        inputs.push(WeakInput {
            image: image_tensor(scene.height, scene.width, &scene.image)?,
            weak: None,
        });
        hidden.push(scene.clone());
    }
    Ok((inputs, hidden))
}

/// Trains and scores `f` on a fresh split and returns it with the split's
/// weak inputs, for callers that only need the annotator.
pub fn annotator_stage(config: &ExperimentConfig, ws: &Workspace, repeat_seed: u64) -> Result<AnnotatorStage> {
    config.validate()?;
    let split = split_dataset(&ws.pool, &config.allocation(), repeat_seed)?;
    let (f, f_report) = train_annotator(config, &split.strong, repeat_seed)?;
    let (weak_inputs, hidden) = split_weak_inputs(&split)?;
    Ok(AnnotatorStage {
        strong: split.strong,
        weak_inputs,
        hidden,
        f,
        f_report,
    })
}

pub struct AnnotatorStage {
    pub strong: Vec<(Scene, LabelSet)>,
    pub weak_inputs: Vec<WeakInput>,
    /// Weak-pool scenes with their hidden masks, used only for scoring.
    pub hidden: Vec<Scene>,
    pub f: Network,
    pub f_report: TrainReport,
}

/// Scores pseudo-labels against the hidden masks of the weak pool.
pub fn score_pseudo_labels(variant: AnnotatorVariant, hidden: &[Scene], pseudo: &[PseudoLabel], num_classes: usize) -> Result<f64> {
    if variant.is_semantic() {
        let mut acc = ConfusionAccumulator::new(num_classes + 1);
        for (s, p) in hidden.iter().zip(pseudo) {
            if let PseudoLabel::Semantic(sem) = p {
                acc.add(sem, &s.semantic)?;
            }
        }
        return Ok(acc.miou());
    }
    let images: Vec<_> = hidden
        .iter()
        .zip(pseudo)
        .map(|(s, p)| match p {
            PseudoLabel::Instances(v) => (v.clone(), s.instances.clone()),
            PseudoLabel::Semantic(_) => (Vec::new(), s.instances.clone()),
        })
        .collect();
    ap50(&images)
}

/// One full repeat: split, train `f`, pseudo-label, train `g`, evaluate.
pub fn run_repeat(config: &ExperimentConfig, ws: &Workspace, repeat: usize) -> Result<RepeatResult> {
    Ok(run_repeat_with_networks(config, ws, repeat)?.0)
}

/// As [`run_repeat`], also returning the trained `f` and `g`.
pub fn run_repeat_with_networks(config: &ExperimentConfig, ws: &Workspace, repeat: usize) -> Result<(RepeatResult, Network, Network)> {
    let repeat_seed = config.repeat_seed(repeat);
    let stage = annotator_stage(config, ws, repeat_seed)?;
    let threshold = config.model.stop_threshold;
    let f_score = evaluate(&stage.f, config.variant, &ws.test, threshold, config.confidence)?;
    let pseudo = pseudo_label(&stage.f, &stage.weak_inputs, config.variant, threshold, config.confidence)?;
    let pseudo_score = if stage.hidden.is_empty() {
        0.0
    } else {
        score_pseudo_labels(config.variant, &stage.hidden, &pseudo, config.model.num_classes)?
    };
    let union = union_samples(&stage.strong, &stage.weak_inputs, &pseudo, config.pseudo_weight)?;
    let pseudo_images = union.len() - stage.strong.len();
    let (g, g_report) = train_segmenter(config, &union, repeat_seed)?;
    let g_variant = if config.variant.is_semantic() { AnnotatorVariant::Semantic } else { AnnotatorVariant::Plain };
    let g_score = evaluate(&g, g_variant, &ws.test, threshold, config.confidence)?;
    log::info!(
        "repeat {repeat} (seed {repeat_seed}): f {f_score:.4}, g {g_score:.4}, pseudo {pseudo_score:.4} on {pseudo_images} images"
    );
    let result = RepeatResult {
        repeat_seed,
        f_score,
        g_score,
        pseudo_score,
        pseudo_images,
        f_losses: stage.f_report.epoch_losses,
        g_losses: g_report.epoch_losses,
    };
    Ok((result, stage.f, g))
}

/// One `results.csv` row; `repeat_seed` is `mean` for the aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub variant: String,
    pub n: usize,
    pub m: usize,
    pub weak_kind: String,
    pub repeat_seed: String,
    pub budget_seconds: String,
    pub budget_days_display: String,
    pub f_ap50: String,
    pub f_miou: String,
    pub g_ap50: String,
    pub g_miou: String,
    pub pseudo_score: String,
    pub pseudo_images: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub repeats: Vec<RepeatResult>,
    pub budget_seconds: f64,
}

impl ExperimentResult {
    pub fn mean_f(&self) -> f64 {
        mean(self.repeats.iter().map(|r| r.f_score))
    }

    pub fn mean_g(&self) -> f64 {
        mean(self.repeats.iter().map(|r| r.g_score))
    }

    pub fn mean_pseudo(&self) -> f64 {
        mean(self.repeats.iter().map(|r| r.pseudo_score))
    }

    /// Per-repeat rows followed by the mean row.
    pub fn rows(&self, config: &ExperimentConfig) -> Vec<ResultRow> {
        let semantic = config.variant.is_semantic();
        let fmt = |v: f64| format!("{v:.6}");
        let metric = |v: f64, want_semantic: bool| if semantic == want_semantic { fmt(v) } else { String::new() };
        let days = seconds_to_days_display(self.budget_seconds).to_string();
        let row = |seed: String, f: f64, g: f64, p: f64, images: String| ResultRow {
            config_hash: self.config_hash.clone(),
            variant: config.variant.to_string(),
            n: config.n_strong,
            m: config.m_weak,
            weak_kind: config.weak_kind.to_string(),
            repeat_seed: seed,
            budget_seconds: format!("{:.2}", self.budget_seconds),
            budget_days_display: days.clone(),
            f_ap50: metric(f, false),
            f_miou: metric(f, true),
            g_ap50: metric(g, false),
            g_miou: metric(g, true),
            pseudo_score: fmt(p),
            pseudo_images: images,
        };
        let mut rows: Vec<ResultRow> = self
            .repeats
            .iter()
            .map(|r| row(r.repeat_seed.to_string(), r.f_score, r.g_score, r.pseudo_score, r.pseudo_images.to_string()))
            .collect();
        let images = mean(self.repeats.iter().map(|r| r.pseudo_images as f64));
        rows.push(row("mean".into(), self.mean_f(), self.mean_g(), self.mean_pseudo(), format!("{images:.1}")));
        rows
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let ws = Workspace::new(config)?;
    run_experiment_in(config, &ws)
}

/// As [`run_experiment`], reusing a prepared pool and test split.
pub fn run_experiment_in(config: &ExperimentConfig, ws: &Workspace) -> Result<ExperimentResult> {
    config.validate()?;
    let repeats = (0..config.repeats)
        .map(|r| {
            run_repeat(config, ws, r).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("repeat seed {}: {msg}", config.repeat_seed(r))),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config_hash: config_hash(config),
        repeats,
        budget_seconds: config.budget_seconds(),
    })
}

pub fn write_results(out: impl Write, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            path: "results.csv".into(),
            detail: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PredictedInstance;
    use crate::models::StepPrediction;
    use std::collections::{BTreeMap, BTreeSet};

    fn small_config(variant: AnnotatorVariant) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                height: 16,
                width: 16,
                num_classes: 2,
                min_instances: 1,
                max_instances: 2,
                min_size: 4,
                max_size: 6,
                ..Default::default()
            },
            model: ModelConfig {
                num_classes: 2,
                height: 16,
                width: 16,
                features: 4,
                hidden: 6,
                max_steps: 3,
                distance_scale: 2.0,
                ..Default::default()
            },
            variant,
            n_strong: 6,
            m_weak: 10,
            weak_kind: variant.needs_weak().unwrap_or(SupervisionKind::Unlabeled),
            test_size: 8,
            annotator: TrainConfig { epochs: 4, ..Default::default() },
            segmenter: TrainConfig { epochs: 3, ..Default::default() },
            repeats: 2,
            ..Default::default()
        }
    }

    fn step(mask: Vec<f64>, dist: Option<Vec<f64>>, stop: Option<f64>) -> StepPrediction {
        StepPrediction { mask, class_dist: dist, stop }
    }

    fn blob(i: usize) -> Vec<f64> {
        (0..4).map(|j| if j == i { 0.9 } else { 0.1 }).collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AnnotatorVariant::ALL {
            assert_eq!(v.as_str().parse::<AnnotatorVariant>().unwrap(), v);
        }
        assert_eq!("rsis+il+c".parse::<AnnotatorVariant>().unwrap(), AnnotatorVariant::PlainILC);
        assert!("rsis+x".parse::<AnnotatorVariant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let mut c = ExperimentConfig { n_strong: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c.n_strong = 4;
        c.variant = AnnotatorVariant::Conditioned;
        assert!(matches!(c.validate(), Err(Error::MissingWeakLabels(_))));
        c.weak_kind = SupervisionKind::ImageLevelCounts;
        assert!(c.validate().is_ok());
        c.repeats = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        let b = ExperimentConfig { m_weak: 255, ..a.clone() };
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn conditioned_decoding_keeps_one_instance_per_token() {
        let pred = SequencePrediction {
            height: 2,
            width: 2,
            steps: vec![step(blob(0), None, None), step(blob(1), None, None)],
            tokens: Some(vec![1, 1]),
        };
        let weak = WeakLabels::ImageLevelCounts(BTreeMap::from([(1, 2)]));
        let out = decode_instances(&pred, AnnotatorVariant::Conditioned, Some(&weak), 0.5, ConfidenceSource::Auto).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|p| p.class_id == 1));
        assert!((out[0].confidence - 0.9).abs() < 1e-12);
    }

    #[test]
    fn plain_decoding_truncates_at_stop() {
        let pred = SequencePrediction {
            height: 2,
            width: 2,
            steps: vec![step(blob(0), Some(vec![0.2, 0.8]), Some(0.3)), step(blob(1), Some(vec![0.9, 0.1]), Some(0.9))],
            tokens: None,
        };
        let none = decode_instances(&pred, AnnotatorVariant::Plain, None, 0.5, ConfidenceSource::Auto).unwrap();
        assert!(none.is_empty());
        let pass = SequencePrediction {
            steps: pred.steps.iter().cloned().map(|mut s| {
                s.stop = Some(0.7);
                s
            }).collect(),
            ..pred.clone()
        };
        let all = decode_instances(&pass, AnnotatorVariant::Plain, None, 0.5, ConfidenceSource::Auto).unwrap();
        assert_eq!(all.iter().map(|p| p.class_id).collect::<Vec<_>>(), vec![2, 1]);
        assert!((all[0].confidence - 0.7 * 0.8).abs() < 1e-12);

        // image-level set {2}: every class becomes 2
        let il = WeakLabels::ImageLevel(BTreeSet::from([2]));
        let out = decode_instances(&pass, AnnotatorVariant::PlainIL, Some(&il), 0.5, ConfidenceSource::Auto).unwrap();
        assert!(out.iter().all(|p| p.class_id == 2));
        assert!(matches!(
            decode_instances(&pass, AnnotatorVariant::PlainIL, None, 0.5, ConfidenceSource::Auto),
            Err(Error::MissingWeakLabels(_))
        ));
    }

    #[test]
    fn counts_decoding_ignores_stop_and_caps_per_class() {
        let pred = SequencePrediction {
            height: 2,
            width: 2,
            steps: vec![
                step(blob(0), Some(vec![0.6, 0.4]), Some(0.1)),
                step(blob(1), Some(vec![0.7, 0.3]), Some(0.1)),
                step(blob(2), Some(vec![0.4, 0.6]), Some(0.1)),
            ],
            tokens: None,
        };
        let weak = WeakLabels::ImageLevelCounts(BTreeMap::from([(1, 1), (2, 1)]));
        let out = decode_instances(&pred, AnnotatorVariant::PlainILC, Some(&weak), 0.5, ConfidenceSource::Auto).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].class_id, out[1].class_id), (1, 2));
        assert_eq!(out[1].mask.data, vec![0, 0, 1, 0]);
    }

    #[test]
    fn annotator_needs_strong_samples() {
        let cfg = small_config(AnnotatorVariant::Plain);
        assert!(train_annotator(&cfg, &[], 0).is_err());
    }

    #[test]
    fn union_drops_empty_pseudo_labels() {
        let cfg = small_config(AnnotatorVariant::Plain);
        let ws = Workspace::new(&cfg).unwrap();
        let strong: Vec<(Scene, LabelSet)> = ws.pool[..2].iter().map(|s| (s.clone(), crate::synthdata::derive_labels(s))).collect();
        let weak: Vec<WeakInput> = ws.pool[2..5]
            .iter()
            .map(|s| WeakInput {
                image: image_tensor(s.height, s.width, &s.image).unwrap(),
                weak: None,
            })
            .collect();
        let inst = PredictedInstance {
            class_id: 1,
            confidence: 0.5,
            mask: ws.pool[3].instances[0].mask.clone(),
        };
        let pseudo = vec![PseudoLabel::Instances(vec![]), PseudoLabel::Instances(vec![inst]), PseudoLabel::Instances(vec![])];
        let union = union_samples(&strong, &weak, &pseudo, 1.0).unwrap();
        assert_eq!(union.len(), 3);
        let none: Vec<PseudoLabel> = vec![PseudoLabel::Instances(vec![]); 3];
        assert_eq!(union_samples(&strong, &weak, &none, 1.0).unwrap().len(), 2);
    }

    #[test]
    fn run_is_deterministic_and_budget_is_consistent() {
        let cfg = small_config(AnnotatorVariant::Conditioned);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        let rows = a.rows(&cfg);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].repeat_seed, "mean");
        let expect = allocation_cost(&cfg.allocation(), &cfg.cost_model);
        assert_eq!(a.budget_seconds, expect);
        assert_eq!(rows[0].budget_seconds, format!("{expect:.2}"));
        for r in &a.repeats {
            assert!(r.pseudo_images <= cfg.m_weak);
        }
    }

    #[test]
    fn semantic_variant_runs() {
        let cfg = small_config(AnnotatorVariant::Semantic);
        let res = run_experiment(&cfg).unwrap();
        let rows = res.rows(&cfg);
        assert!(rows[0].f_ap50.is_empty() && !rows[0].f_miou.is_empty());
    }

    #[test]
    fn pseudo_labels_ignore_hidden_masks() {
        let cfg = small_config(AnnotatorVariant::PlainILC);
        let ws = Workspace::new(&cfg).unwrap();
        let stage = annotator_stage(&cfg, &ws, 3).unwrap();
        let a = pseudo_label(&stage.f, &stage.weak_inputs, cfg.variant, 0.5, cfg.confidence).unwrap();
        // pseudo-labelling only sees images and weak labels; wiping the hidden
        // masks of the weak pool cannot change it
        let mut hidden = stage.hidden.clone();
        for s in hidden.iter_mut() {
            for inst in s.instances.iter_mut() {
                inst.mask.data.fill(0);
            }
        }
        let b = pseudo_label(&stage.f, &stage.weak_inputs, cfg.variant, 0.5, cfg.confidence).unwrap();
        assert_eq!(a, b);
        assert!(stage.weak_inputs.iter().all(|w| !matches!(w.weak, Some(WeakLabels::Full(_)))));
    }

    #[test]
    fn results_csv_has_expected_columns() {
        let cfg = small_config(AnnotatorVariant::Plain);
        let res = ExperimentResult {
            config_hash: config_hash(&cfg),
            repeats: vec![RepeatResult {
                repeat_seed: 0,
                f_score: 0.5,
                g_score: 0.25,
                pseudo_score: 0.1,
                pseudo_images: 3,
                f_losses: vec![],
                g_losses: vec![],
            }],
            budget_seconds: cfg.budget_seconds(),
        };
        let mut buf = Vec::new();
        write_results(&mut buf, &res.rows(&cfg)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "config_hash,variant,n,m,weak_kind,repeat_seed,budget_seconds,budget_days_display,f_ap50,f_miou,g_ap50,g_miou,pseudo_score,pseudo_images"
        );
        assert_eq!(text.lines().count(), 3);
    }
}
