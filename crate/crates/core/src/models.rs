//! Tiny semantic and sequential instance segmenters.
//!
//! All three networks share one encoder: the image is subsampled by two, passed
//! through a 3x3 and a 1x1 convolution and flattened to `P x F` pixel
//! features. The instance networks add a per-class objectness map. At each
//! decoding step the location with the highest remaining objectness (box
//! smoothed, times the product of `1 - mask` over earlier steps) is chosen
//! numerically; its features feed a GRU cell whose state produces the heads.
//! The mask head is a per-step linear query over the pixel features plus the
//! squared distance to the chosen location.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder channels.
    pub features: usize,
    /// GRU state size.
    pub hidden: usize,
    pub max_steps: usize,
    pub stop_threshold: f64,
    /// Low-resolution pixel distance that maps to a squared distance of 1 in
    /// the mask head.
    pub distance_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            height: 48,
            width: 48,
            features: 12,
            hidden: 24,
            max_steps: 5,
            stop_threshold: 0.5,
            distance_scale: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 || self.num_classes > 254 {
            return bad("num_classes must be in 1..=254");
        }
        if self.height < 2 || self.width < 2 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return bad("height and width must be even and at least 2");
        }
        if self.features == 0 || self.hidden == 0 {
            return bad("features and hidden must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            return bad("stop_threshold must lie in [0, 1]");
        }
        if self.distance_scale.is_nan() || self.distance_scale <= 0.0 {
            return bad("distance_scale must be positive");
        }
        Ok(())
    }

    fn low(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Semantic,
    Recurrent,
    Conditioned,
}

#[derive(Debug, Clone, Copy)]
struct EncoderIds {
    conv1: usize,
    bias1: usize,
    conv2: usize,
    bias2: usize,
}

impl EncoderIds {
    fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let f = cfg.features;
        EncoderIds {
            conv1: store.add_glorot("enc.conv1", &[3, 3, 3, f], 27, 9 * f, rng),
            bias1: store.add_zeros("enc.bias1", &[f]),
            conv2: store.add_glorot("enc.conv2", &[1, 1, f, f], f, f, rng),
            bias2: store.add_zeros("enc.bias2", &[f]),
        }
    }

    /// `(P, F)` pixel features at half resolution.
    fn trace(&self, tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<Var> {
        check_image(cfg, image)?;
        let (lh, lw) = cfg.low();
        let x = tape.constant(image.clone());
        let x = tape.slice(x, &[(0, cfg.height, 2), (0, cfg.width, 2), (0, 3, 1)])?;
        let (k1, b1, k2, b2) = (
            tape.param(store, self.conv1),
            tape.param(store, self.bias1),
            tape.param(store, self.conv2),
            tape.param(store, self.bias2),
        );
        let h = tape.conv2d(x, k1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, k2)?;
        let h = tape.add_row(h, b2)?;
        let h = tape.relu(h)?;
        tape.reshape(h, &[lh * lw, cfg.features])
    }
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    if image.shape() != [cfg.height, cfg.width, 3] {
        return Err(Error::shape(
            "forward",
            format!("image {:?}, expected [{}, {}, 3]", image.shape(), cfg.height, cfg.width),
        ));
    }
    Ok(())
}

/// Image bytes as a `(H, W, 3)` tensor in `[0, 1]`.
pub fn image_tensor(height: usize, width: usize, rgb: &[u8]) -> Result<Tensor> {
    Tensor::new(&[height, width, 3], rgb.iter().map(|&v| v as f64 / 255.0).collect())
}

/// Per-pixel classifier over background plus `num_classes`.
#[derive(Debug, Clone)]
pub struct SemanticNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    enc: EncoderIds,
    head_w: usize,
    head_b: usize,
}

impl SemanticNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0, Purpose::Init);
        let mut params = ParamStore::new();
        let enc = EncoderIds::build(&mut params, &config, &mut rng);
        let k = config.num_classes + 1;
        let head_w = params.add_glorot("sem.w", &[config.features, k], config.features, k, &mut rng);
        let head_b = params.add_zeros("sem.b", &[k]);
        Ok(SemanticNet {
            config,
            params,
            enc,
            head_w,
            head_b,
        })
    }

    /// `(H, W, C + 1)` logits.
    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let feats = self.enc.trace(tape, store, cfg, image)?;
        let (w, b) = (tape.param(store, self.head_w), tape.param(store, self.head_b));
        let logits = tape.matmul(feats, w)?;
        let logits = tape.add_row(logits, b)?;
        let (lh, lw) = cfg.low();
        let logits = tape.reshape(logits, &[lh, lw, cfg.num_classes + 1])?;
        tape.upsample(logits, 2)
    }

    /// Zeroes the output layer.
    pub fn zero_heads(&mut self) {
        for id in [self.head_w, self.head_b] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }
}

pub fn semantic_forward(net: &SemanticNet, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = net.trace(&mut tape, &net.params, image)?;
    Ok(tape.value(out).clone())
}

/// Per-pixel argmax of `(H, W, K)` logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct InstanceIds {
    enc: EncoderIds,
    obj_w: usize,
    obj_b: usize,
    gru_wx: usize,
    gru_bx: usize,
    gru_uzr: usize,
    gru_un: usize,
    query_w: usize,
    query_b: usize,
    token: Option<usize>,
    class_w: Option<usize>,
    class_b: Option<usize>,
    stop_w: Option<usize>,
    stop_b: Option<usize>,
}

impl InstanceIds {
    fn build(store: &mut ParamStore, cfg: &ModelConfig, conditioned: bool, rng: &mut impl rand::Rng) -> Self {
        let (f, d, c) = (cfg.features, cfg.hidden, cfg.num_classes);
        let enc = EncoderIds::build(store, cfg, rng);
        let obj_w = store.add_glorot("obj.w", &[f, c], f, c, rng);
        let obj_b = store.add_zeros("obj.b", &[c]);
        let token_dim = if conditioned { c } else { 0 };
        let din = step_input_dim(cfg) + token_dim;
        let gru_wx = store.add_glorot("gru.wx", &[din, 3 * d], din, d, rng);
        let gru_bx = store.add_zeros("gru.bx", &[3 * d]);
        let gru_uzr = store.add_glorot("gru.uzr", &[d, 2 * d], d, d, rng);
        let gru_un = store.add_glorot("gru.un", &[d, d], d, d, rng);
        let query_w = store.add_glorot("mask.w", &[d, f + 2], d, f + 2, rng);
        // prior: a disc around the chosen location
        let mut qb = vec![0.0; f + 2];
        qb[f] = -3.0;
        qb[f + 1] = 1.5;
        let query_b = store.add("mask.b", Tensor::new(&[f + 2], qb).expect("bias length"));
        let token = conditioned.then(|| store.add_glorot("token.embed", &[c, c], c, c, rng));
        let (class_w, class_b, stop_w, stop_b) = if conditioned {
            (None, None, None, None)
        } else {
            (
                Some(store.add_glorot("class.w", &[d, c], d, c, rng)),
                Some(store.add_zeros("class.b", &[c])),
                Some(store.add_glorot("stop.w", &[d, 1], d, 1, rng)),
                Some(store.add_zeros("stop.b", &[1])),
            )
        };
        InstanceIds {
            enc,
            obj_w,
            obj_b,
            gru_wx,
            gru_bx,
            gru_uzr,
            gru_un,
            query_w,
            query_b,
            token,
            class_w,
            class_b,
            stop_w,
            stop_b,
        }
    }

    fn heads(&self) -> Vec<usize> {
        let mut ids = vec![self.query_w, self.query_b];
        ids.extend([self.class_w, self.class_b, self.stop_w, self.stop_b].into_iter().flatten());
        ids
    }
}

/// Chosen-pixel features, position (2) and remaining objectness score (1).
fn step_input_dim(cfg: &ModelConfig) -> usize {
    cfg.features + 3
}

/// One recorded decoding step.
#[derive(Debug, Clone, Copy)]
pub struct TracedStep {
    /// Soft mask, `H * W` values in `(0, 1)`.
    pub mask: Var,
    /// `(1, C)` class logits.
    pub class_logits: Option<Var>,
    /// `(1, 1)` stop logit.
    pub stop_logit: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TracedSequence {
    pub steps: Vec<TracedStep>,
    /// Class id per step for conditioned decoding.
    pub tokens: Option<Vec<usize>>,
    /// Half-resolution pixel index each step was anchored at.
    pub anchors: Vec<usize>,
    /// `(P, C)` objectness logits at half resolution.
    pub objectness: Var,
}

/// Values of one decoded step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    pub mask: Vec<f64>,
    pub class_dist: Option<Vec<f64>>,
    pub stop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub height: usize,
    pub width: usize,
    pub steps: Vec<StepPrediction>,
    pub tokens: Option<Vec<usize>>,
}

impl SequencePrediction {
    /// Number of leading steps whose stop score is at least `threshold`;
    /// conditioned sequences have no stop head and keep every step.
    pub fn surviving_steps(&self, threshold: f64) -> usize {
        self.steps
            .iter()
            .position(|s| s.stop.is_some_and(|p| p < threshold))
            .unwrap_or(self.steps.len())
    }
}

impl TracedSequence {
    pub fn values(&self, tape: &Tape, cfg: &ModelConfig) -> SequencePrediction {
        let steps = self
            .steps
            .iter()
            .map(|s| StepPrediction {
                mask: tape.value(s.mask).data().to_vec(),
                class_dist: s.class_logits.map(|v| softmax_row(tape.value(v).data())),
                stop: s.stop_logit.map(|v| sigmoid(tape.value(v).item())),
            })
            .collect();
        SequencePrediction {
            height: cfg.height,
            width: cfg.width,
            steps,
            tokens: self.tokens.clone(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shared decoder of the plain and conditioned instance networks.
#[derive(Debug, Clone)]
struct InstanceCore {
    config: ModelConfig,
    ids: InstanceIds,
}

impl InstanceCore {
    fn trace(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, steps: usize, tokens: Option<&[usize]>) -> Result<TracedSequence> {
        let cfg = &self.config;
        let ids = &self.ids;
        let (lh, lw) = cfg.low();
        let p = lh * lw;
        let (f, d, c) = (cfg.features, cfg.hidden, cfg.num_classes);

        let feats = ids.enc.trace(tape, store, cfg, image)?;
        let (ow, ob) = (tape.param(store, ids.obj_w), tape.param(store, ids.obj_b));
        let obj = tape.matmul(feats, ow)?;
        let obj = tape.add_row(obj, ob)?;
        let obj_prob: Vec<f64> = tape.value(obj).data().iter().map(|&v| sigmoid(v)).collect();

        let wx = tape.param(store, ids.gru_wx);
        let bx = tape.param(store, ids.gru_bx);
        let uzr = tape.param(store, ids.gru_uzr);
        let un = tape.param(store, ids.gru_un);
        let qw = tape.param(store, ids.query_w);
        let qb = tape.param(store, ids.query_b);
        let heads = match (ids.class_w, ids.class_b, ids.stop_w, ids.stop_b) {
            (Some(cw), Some(cb), Some(sw), Some(sb)) => Some((
                tape.param(store, cw),
                tape.param(store, cb),
                tape.param(store, sw),
                tape.param(store, sb),
            )),
            _ => None,
        };
        let token_table = ids.token.map(|id| tape.param(store, id));

        let obj_sig = tape.sigmoid(obj)?;
        let ones_c = tape.constant(Tensor::full(&[c, 1], 1.0));
        let mut h = tape.constant(Tensor::zeros(&[1, d]));
        let mut remaining = tape.constant(Tensor::full(&[p, 1], 1.0));
        let mut out = Vec::with_capacity(steps);
        let mut anchors = Vec::with_capacity(steps);
        for t in 0..steps {
            let class = tokens.map(|tk| tk[t]);
            // channel used at each pixel: the token class, or the most likely class
            let mut select = vec![0.0; p * c];
            for i in 0..p {
                let row = &obj_prob[i * c..(i + 1) * c];
                let k = match class {
                    Some(k) => k - 1,
                    None => (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b }),
                };
                select[i * c + k] = 1.0;
            }
            let rem = tape.value(remaining).data();
            let score: Vec<f64> = (0..p).map(|i| (0..c).map(|k| select[i * c + k] * obj_prob[i * c + k]).sum::<f64>() * rem[i]).collect();
            let smooth = box_blur(&score, lh, lw);
            let mut best = 0;
            for (i, &v) in smooth.iter().enumerate() {
                if v > smooth[best] {
                    best = i;
                }
            }
            let (by, bx_) = (best / lw, best % lw);
            anchors.push(best);

            // smoothed remaining objectness at the chosen pixel, on the tape
            let select = tape.constant(Tensor::new(&[p, c], select)?);
            let chosen = tape.mul(obj_sig, select)?;
            let chosen = tape.matmul(chosen, ones_c)?;
            let chosen = tape.mul(chosen, remaining)?;
            let window = tape.constant(Tensor::new(&[1, p], blur_row(best, lh, lw))?);
            let level = tape.matmul(window, chosen)?;

            let picked = tape.slice(feats, &[(best, best + 1, 1), (0, f, 1)])?;
            let pos = tape.constant(Tensor::new(&[1, 2], vec![(bx_ as f64 + 0.5) / lw as f64, (by as f64 + 0.5) / lh as f64])?);
            let mut parts = vec![picked, pos, level];
            if let (Some(table), Some(k)) = (token_table, class) {
                parts.push(tape.embedding(table, &[k - 1])?);
            }
            let x = tape.concat(&parts, 1)?;

            // GRU: gates from one stacked input projection
            let gx = tape.matmul(x, wx)?;
            let gx = tape.add_row(gx, bx)?;
            let gh = tape.matmul(h, uzr)?;
            let xz = tape.slice(gx, &[(0, 1, 1), (0, d, 1)])?;
            let xr = tape.slice(gx, &[(0, 1, 1), (d, 2 * d, 1)])?;
            let xn = tape.slice(gx, &[(0, 1, 1), (2 * d, 3 * d, 1)])?;
            let hz = tape.slice(gh, &[(0, 1, 1), (0, d, 1)])?;
            let hr = tape.slice(gh, &[(0, 1, 1), (d, 2 * d, 1)])?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r)?;
            let rh = tape.mul(r, h)?;
            let hn = tape.matmul(rh, un)?;
            let n = tape.add(xn, hn)?;
            let n = tape.tanh(n)?;
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;

            let q = tape.matmul(h, qw)?;
            let q = tape.add_row(q, qb)?;
            let q = tape.transpose(q)?;
            let geom: Vec<f64> = (0..p)
                .flat_map(|i| {
                    let (y, x) = ((i / lw) as f64 - by as f64, (i % lw) as f64 - bx_ as f64);
                    [(x * x + y * y) / (cfg.distance_scale * cfg.distance_scale), 1.0]
                })
                .collect();
            let geom = tape.constant(Tensor::new(&[p, 2], geom)?);
            // [feats | geom] x q without materialising the concatenation
            let qf = tape.slice(q, &[(0, f, 1), (0, 1, 1)])?;
            let qg = tape.slice(q, &[(f, f + 2, 1), (0, 1, 1)])?;
            let lf = tape.matmul(feats, qf)?;
            let lg = tape.matmul(geom, qg)?;
            let logits = tape.add(lf, lg)?;
            let low = tape.sigmoid(logits)?;
            let free = tape.one_minus(low)?;
            remaining = tape.mul(remaining, free)?;
            let low = tape.reshape(low, &[lh, lw, 1])?;
            let up = tape.upsample(low, 2)?;
            let mask = tape.reshape(up, &[cfg.pixels()])?;

            let (class_logits, stop_logit) = match heads {
                Some((cw, cb, sw, sb)) => {
                    let cl = tape.matmul(h, cw)?;
                    let cl = tape.add_row(cl, cb)?;
                    let sl = tape.matmul(h, sw)?;
                    let sl = tape.add_row(sl, sb)?;
                    (Some(cl), Some(sl))
                }
                None => (None, None),
            };
            out.push(TracedStep {
                mask,
                class_logits,
                stop_logit,
            });
        }
        Ok(TracedSequence {
            steps: out,
            tokens: tokens.map(<[usize]>::to_vec),
            anchors,
            objectness: obj,
        })
    }

    fn zero_heads(&self, params: &mut ParamStore) {
        for id in self.ids.heads() {
            params.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Weights with which [`box_blur`] reads pixel `at`.
fn blur_row(at: usize, h: usize, w: usize) -> Vec<f64> {
    let mut row = vec![0.0; h * w];
    let (y, x) = (at / w, at % w);
    for dy in [-1i64, 0, 1] {
        for dx in [-1i64, 0, 1] {
            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            row[yy * w + xx] += 1.0 / 9.0;
        }
    }
    row
}

/// 3x3 mean filter with edge clamping.
fn box_blur(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    s += v[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

/// Sequential instance segmenter with mask, class and stop heads.
#[derive(Debug, Clone)]
pub struct RecurrentInstanceNet {
    pub params: ParamStore,
    core: InstanceCore,
}

impl RecurrentInstanceNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0, Purpose::Init);
        let mut params = ParamStore::new();
        let ids = InstanceIds::build(&mut params, &config, false, &mut rng);
        Ok(RecurrentInstanceNet {
            params,
            core: InstanceCore { config, ids },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.core.config
    }

    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, max_steps: usize) -> Result<TracedSequence> {
        if max_steps == 0 {
            return Err(Error::Invalid("max_steps must be at least 1".into()));
        }
        self.core.trace(tape, store, image, max_steps, None)
    }

    pub fn zero_heads(&mut self) {
        self.core.zero_heads(&mut self.params);
    }
}

pub fn instance_forward(net: &RecurrentInstanceNet, image: &Tensor, max_steps: usize) -> Result<SequencePrediction> {
    let mut tape = Tape::new();
    let seq = net.trace(&mut tape, &net.params, image, max_steps)?;
    Ok(seq.values(&tape, net.config()))
}

/// Instance segmenter decoding one mask per class token.
#[derive(Debug, Clone)]
pub struct ConditionedInstanceNet {
    pub params: ParamStore,
    core: InstanceCore,
}

impl ConditionedInstanceNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0, Purpose::Init);
        let mut params = ParamStore::new();
        let ids = InstanceIds::build(&mut params, &config, true, &mut rng);
        Ok(ConditionedInstanceNet {
            params,
            core: InstanceCore { config, ids },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.core.config
    }

    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, tokens: &[usize]) -> Result<TracedSequence> {
        if tokens.is_empty() {
            return Err(Error::Invalid("conditioned decoding needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&k| k == 0 || k > self.core.config.num_classes) {
            return Err(Error::LabelRange(format!("token class {bad} outside 1..={}", self.core.config.num_classes)));
        }
        self.core.trace(tape, store, image, tokens.len(), Some(tokens))
    }

    pub fn zero_heads(&mut self) {
        self.core.zero_heads(&mut self.params);
    }
}

pub fn conditioned_forward(net: &ConditionedInstanceNet, image: &Tensor, tokens: &[usize]) -> Result<SequencePrediction> {
    let mut tape = Tape::new();
    let seq = net.trace(&mut tape, &net.params, image, tokens)?;
    Ok(seq.values(&tape, net.config()))
}

/// Canonical token order: classes ascending, each repeated by its count.
pub fn tokens_from_counts(counts: &BTreeMap<usize, usize>) -> Vec<usize> {
    counts.iter().flat_map(|(&c, &n)| std::iter::repeat_n(c, n)).collect()
}

/// Any of the three networks, for checkpointing.
#[derive(Debug, Clone)]
pub enum Network {
    Semantic(SemanticNet),
    Recurrent(RecurrentInstanceNet),
    Conditioned(ConditionedInstanceNet),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    kind: NetKind,
    config: ModelConfig,
}

impl Network {
    pub fn new(kind: NetKind, config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            NetKind::Semantic => Network::Semantic(SemanticNet::new(config, seed)?),
            NetKind::Recurrent => Network::Recurrent(RecurrentInstanceNet::new(config, seed)?),
            NetKind::Conditioned => Network::Conditioned(ConditionedInstanceNet::new(config, seed)?),
        })
    }

    pub fn kind(&self) -> NetKind {
        match self {
            Network::Semantic(_) => NetKind::Semantic,
            Network::Recurrent(_) => NetKind::Recurrent,
            Network::Conditioned(_) => NetKind::Conditioned,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::Semantic(n) => &n.config,
            Network::Recurrent(n) => n.config(),
            Network::Conditioned(n) => n.config(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Network::Semantic(n) => &n.params,
            Network::Recurrent(n) => &n.params,
            Network::Conditioned(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Network::Semantic(n) => &mut n.params,
            Network::Recurrent(n) => &mut n.params,
            Network::Conditioned(n) => &mut n.params,
        }
    }

    /// Writes `<stem>.bin`, `<stem>.csv` and the `<stem>.jsonl` architecture
    /// sidecar.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.params().save(stem)?;
        let mut f = File::create(stem.with_extension("jsonl"))?;
        serde_json::to_writer(
            &mut f,
            &Sidecar {
                kind: self.kind(),
                config: self.config().clone(),
            },
        )?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let path = stem.with_extension("jsonl");
        let line = BufReader::new(File::open(&path)?)
            .lines()
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: "empty sidecar".into(),
            })?;
        let side: Sidecar = serde_json::from_str(&line)?;
        let mut net = Network::new(side.kind, side.config, 0)?;
        let loaded = ParamStore::load(stem)?;
        let fresh = net.params();
        let compatible = loaded.len() == fresh.len()
            && loaded
                .iter()
                .zip(fresh.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !compatible {
            return Err(Error::Format {
                path: stem.display().to_string(),
                detail: "parameters do not match the architecture in the sidecar".into(),
            });
        }
        *net.params_mut() = loaded;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, DataConfig};

    fn scene_image(seed: u64) -> Tensor {
        let s = generate_scene(&DataConfig { seed, ..Default::default() }, 0).unwrap();
        image_tensor(s.height, s.width, &s.image).unwrap()
    }

    #[test]
    fn semantic_zero_heads_give_uniform_output() {
        let mut net = SemanticNet::new(ModelConfig::default(), 3).unwrap();
        net.zero_heads();
        let out = semantic_forward(&net, &scene_image(1)).unwrap();
        assert_eq!(out.shape(), &[48, 48, 5]);
        for row in out.data().chunks(5) {
            let p = softmax_row(row);
            assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let net = SemanticNet::new(ModelConfig::default(), 0).unwrap();
        let bad = Tensor::zeros(&[32, 48, 3]);
        assert!(matches!(semantic_forward(&net, &bad), Err(Error::Shape { .. })));
        let inst = RecurrentInstanceNet::new(ModelConfig::default(), 0).unwrap();
        assert!(instance_forward(&inst, &bad, 2).is_err());
    }

    #[test]
    fn instance_forward_contract() {
        let mut net = RecurrentInstanceNet::new(ModelConfig::default(), 9).unwrap();
        let img = scene_image(2);
        let a = instance_forward(&net, &img, 5).unwrap();
        let b = instance_forward(&net, &img, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 5);
        for s in &a.steps {
            assert_eq!(s.mask.len(), 48 * 48);
            assert!(s.mask.iter().all(|&m| (0.0..=1.0).contains(&m)));
            let d = s.class_dist.as_ref().unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&s.stop.unwrap()));
        }
        assert_eq!(instance_forward(&net, &img, 1).unwrap().steps.len(), 1);
        assert!(instance_forward(&net, &img, 0).is_err());

        net.zero_heads();
        let z = instance_forward(&net, &img, 3).unwrap();
        for s in &z.steps {
            assert_eq!(s.stop, Some(0.5));
            assert!(s.mask.iter().all(|&m| m == 0.5));
            assert!(s.class_dist.as_ref().unwrap().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn truncation_follows_stop_scores() {
        let step = |stop| StepPrediction {
            mask: vec![0.5],
            class_dist: None,
            stop: Some(stop),
        };
        let seq = |stops: &[f64]| SequencePrediction {
            height: 1,
            width: 1,
            steps: stops.iter().map(|&s| step(s)).collect(),
            tokens: None,
        };
        assert_eq!(seq(&[0.9, 0.6, 0.5]).surviving_steps(0.5), 3);
        assert_eq!(seq(&[0.4, 0.9, 0.9]).surviving_steps(0.5), 0);
        assert_eq!(seq(&[0.9, 0.2, 0.9]).surviving_steps(0.5), 1);
    }

    #[test]
    fn conditioned_forward_contract() {
        let mut net = ConditionedInstanceNet::new(ModelConfig::default(), 4).unwrap();
        let img = scene_image(3);
        let out = conditioned_forward(&net, &img, &[1, 1, 2]).unwrap();
        assert_eq!(out.steps.len(), 3);
        assert_eq!(out.tokens, Some(vec![1, 1, 2]));
        assert!(out.steps.iter().all(|s| s.class_dist.is_none() && s.stop.is_none()));
        let permuted = conditioned_forward(&net, &img, &[2, 1, 1]).unwrap();
        assert_eq!(permuted.tokens, Some(vec![2, 1, 1]));
        assert!(conditioned_forward(&net, &img, &[]).is_err());
        assert!(matches!(conditioned_forward(&net, &img, &[5]), Err(Error::LabelRange(_))));
        assert!(conditioned_forward(&net, &img, &[0]).is_err());

        net.zero_heads();
        let z = conditioned_forward(&net, &img, &[3, 4]).unwrap();
        assert!(z.steps.iter().all(|s| s.mask.iter().all(|&m| m == 0.5)));
    }

    #[test]
    fn tokens_are_sorted_and_repeated() {
        let counts = BTreeMap::from([(3, 1), (1, 2)]);
        assert_eq!(tokens_from_counts(&counts), vec![1, 1, 3]);
    }

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        for kind in [NetKind::Semantic, NetKind::Recurrent, NetKind::Conditioned] {
            let net = Network::new(kind, ModelConfig::default(), 11).unwrap();
            net.save(&stem).unwrap();
            let back = Network::load(&stem).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(back.params(), net.params());
        }
    }
}
