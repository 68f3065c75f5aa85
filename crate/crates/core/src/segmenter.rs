//! Three-layer convolutional segmenter trained with L1 plus the directional
//! connectivity loss, with hand-written backpropagation.
//!
//! Channel 0 is the right frame scaled to [0,1]; the optional channel 1 is
//! the guidance mask. Parameters are stored flat, layer by layer, each layer
//! as weights `[out][in][3][3]` followed by biases `[out]`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dcl::{self, SoftMask};
use crate::error::{Error, Result};
use crate::eval::{self, Prf};
use crate::imagecore::{load_image, load_mask, BinaryMask, GrayImage};
use crate::synth::{DatasetManifest, ManifestRecord, Split};

pub const HIDDEN: usize = 8;
pub const PATCH: usize = 64;
const MODEL_MAGIC: &[u8; 8] = b"FGSEGNET";
const MODEL_VERSION: u32 = 1;

/// Channel-major planes of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Planes { channels, width, height, data: vec![0.0; channels * width * height] }
    }

    /// Image intensities divided by 255, plus the mask as a second channel
    /// when given.
    pub fn from_inputs(image: &GrayImage, fm: Option<&BinaryMask>) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        let mut data: Vec<f64> = image.data().iter().map(|&v| v as f64 / 255.0).collect();
        let channels = match fm {
            Some(m) => {
                if (m.width(), m.height()) != (w, h) {
                    return Err(Error::DimensionMismatch(w, h, m.width(), m.height()));
                }
                data.extend(m.data().iter().map(|&v| v as f64));
                2
            }
            None => 1,
        };
        Ok(Planes { channels, width: w, height: h, data })
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Copies a `size x size` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Planes {
        let mut out = Planes::zeros(self.channels, size, size);
        for ch in 0..self.channels {
            for r in 0..size {
                let src = ch * self.width * self.height + (row + r) * self.width + col;
                let dst = ch * size * size + r * size;
                out.data[dst..dst + size].copy_from_slice(&self.data[src..src + size]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * 9
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.c_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    c_in: usize,
    params: Vec<f64>,
}

fn layer_shapes(c_in: usize) -> [LayerShape; 3] {
    [
        LayerShape { c_in, c_out: HIDDEN },
        LayerShape { c_in: HIDDEN, c_out: HIDDEN },
        LayerShape { c_in: HIDDEN, c_out: 1 },
    ]
}

fn check_c_in(c_in: usize) -> Result<()> {
    if c_in == 1 || c_in == 2 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("input channels must be 1 or 2, got {c_in}")))
    }
}

impl SegModel {
    /// All parameters zero.
    pub fn zeros(c_in: usize) -> Result<Self> {
        check_c_in(c_in)?;
        let n = layer_shapes(c_in).iter().map(LayerShape::param_len).sum();
        Ok(SegModel { c_in, params: vec![0.0; n] })
    }

    pub fn from_params(c_in: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = SegModel::zeros(c_in)?;
        if params.len() != m.params.len() {
            return Err(Error::BadModel(format!("expected {} parameters, got {}", m.params.len(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::BadModel("non-finite parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn shapes(&self) -> [LayerShape; 3] {
        layer_shapes(self.c_in)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(weights, biases)` of layer `i`.
    fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let shapes = self.shapes();
        let start: usize = shapes[..i].iter().map(LayerShape::param_len).sum();
        let s = shapes[i];
        let w = &self.params[start..start + s.weight_len()];
        let b = &self.params[start + s.weight_len()..start + s.param_len()];
        (w, b)
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with
/// `fan_in = 9 * c_in` of the layer; biases zero.
pub fn init_model(c_in: usize, seed: u64) -> Result<SegModel> {
    let mut m = SegModel::zeros(c_in)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    for s in m.shapes() {
        let bound = 1.0 / ((9 * s.c_in) as f64).sqrt();
        for p in &mut m.params[start..start + s.weight_len()] {
            *p = rng.random_range(-bound..=bound);
        }
        start += s.param_len();
    }
    Ok(m)
}

/// Zero-padded 3x3 cross-correlation.
fn conv_forward(x: &Planes, shape: LayerShape, w: &[f64], b: &[f64]) -> Planes {
    let (wd, ht) = (x.width, x.height);
    let mut out = Planes::zeros(shape.c_out, wd, ht);
    for o in 0..shape.c_out {
        let dst = &mut out.data[o * wd * ht..(o + 1) * wd * ht];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..shape.c_in {
            let src = x.plane(i);
            for kr in 0..3 {
                for kc in 0..3 {
                    let k = w[((o * shape.c_in + i) * 3 + kr) * 3 + kc];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..ht {
                        let sr = r as isize + kr as isize - 1;
                        if sr < 0 || sr >= ht as isize {
                            continue;
                        }
                        let srow = &src[sr as usize * wd..(sr as usize + 1) * wd];
                        let drow = &mut dst[r * wd..(r + 1) * wd];
                        // output column c reads input column c + kc - 1
                        let (c0, c1) = (if kc == 0 { 1 } else { 0 }, if kc == 2 { wd - 1 } else { wd });
                        for c in c0..c1 {
                            drow[c] += k * srow[c + kc - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
fn conv_backward(
    x: &Planes,
    d_out: &Planes,
    shape: LayerShape,
    w: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
    need_input: bool,
) -> Option<Planes> {
    let (wd, ht) = (x.width, x.height);
    let mut d_x = need_input.then(|| Planes::zeros(shape.c_in, wd, ht));
    for o in 0..shape.c_out {
        let g = d_out.plane(o);
        d_b[o] += g.iter().sum::<f64>();
        for i in 0..shape.c_in {
            let src = x.plane(i);
            for kr in 0..3 {
                for kc in 0..3 {
                    let widx = ((o * shape.c_in + i) * 3 + kr) * 3 + kc;
                    let k = w[widx];
                    let (c0, c1) = (if kc == 0 { 1 } else { 0 }, if kc == 2 { wd - 1 } else { wd });
                    let mut acc = 0.0;
                    for r in 0..ht {
                        let sr = r as isize + kr as isize - 1;
                        if sr < 0 || sr >= ht as isize {
                            continue;
                        }
                        let sr = sr as usize;
                        let grow = &g[r * wd..(r + 1) * wd];
                        let srow = &src[sr * wd..(sr + 1) * wd];
                        for c in c0..c1 {
                            acc += grow[c] * srow[c + kc - 1];
                        }
                        if let Some(dx) = d_x.as_mut() {
                            let base = i * wd * ht + sr * wd;
                            let drow = &mut dx.data[base..base + wd];
                            for c in c0..c1 {
                                drow[c + kc - 1] += k * grow[c];
                            }
                        }
                    }
                    d_w[widx] += acc;
                }
            }
        }
    }
    d_x
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Activations {
    a1: Planes,
    a2: Planes,
    /// Pre-sigmoid output.
    logits: Vec<f64>,
}

fn forward_cached(model: &SegModel, x: &Planes) -> Result<Activations> {
    if x.channels != model.c_in {
        return Err(Error::ChannelMismatch { expected: model.c_in, got: x.channels });
    }
    if x.width < 3 || x.height < 3 {
        return Err(Error::TooSmall { width: x.width, height: x.height, min: 3 });
    }
    let shapes = model.shapes();
    let relu = |mut p: Planes| {
        p.data.iter_mut().for_each(|v| *v = v.max(0.0));
        p
    };
    let (w, b) = model.layer(0);
    let a1 = relu(conv_forward(x, shapes[0], w, b));
    let (w, b) = model.layer(1);
    let a2 = relu(conv_forward(&a1, shapes[1], w, b));
    let (w, b) = model.layer(2);
    let logits = conv_forward(&a2, shapes[2], w, b).data;
    Ok(Activations { a1, a2, logits })
}

/// Sigmoid output of the network, same spatial size as `x`.
pub fn forward(model: &SegModel, x: &Planes) -> Result<SoftMask> {
    let act = forward_cached(model, x)?;
    SoftMask::new(x.width, x.height, act.logits.iter().map(|&z| sigmoid(z)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    /// `lambda_l1 * mean|y - gt|`.
    pub l1: f64,
    /// `lambda_dcl * dcl(y)`.
    pub dcl: f64,
    /// `l1 + dcl`.
    pub total: f64,
}

impl LossBreakdown {
    fn new(l1: f64, dcl: f64) -> Self {
        LossBreakdown { l1, dcl, total: l1 + dcl }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_l1: f64,
    pub lambda_dcl: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 1 for the image alone, 2 for image plus guidance mask.
    pub channels: usize,
    pub patch: usize,
    /// Checkpoints and `history.csv` go here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0002,
            batch_size: 32,
            epochs: 30,
            lambda_l1: 1.0,
            lambda_dcl: 0.1,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            channels: 2,
            patch: PATCH,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.into()));
        check_c_in(self.channels)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_dcl >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.patch < 3 {
            return bad("patch size must be at least 3");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs beta1, beta2 in [0,1) and eps > 0");
        }
        Ok(())
    }
}

/// Loss and its gradient with respect to every parameter for one sample.
pub fn loss_and_grads(
    model: &SegModel,
    x: &Planes,
    gt: &BinaryMask,
    lambda_l1: f64,
    lambda_dcl: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if (gt.width(), gt.height()) != (x.width, x.height) {
        return Err(Error::DimensionMismatch(x.width, x.height, gt.width(), gt.height()));
    }
    let act = forward_cached(model, x)?;
    let n = (x.width * x.height) as f64;
    let y: Vec<f64> = act.logits.iter().map(|&z| sigmoid(z)).collect();

    let mut l1_sum = 0.0;
    let mut d_y = vec![0.0; y.len()];
    for (i, (&yi, &g)) in y.iter().zip(gt.data()).enumerate() {
        let diff = yi - g as f64;
        l1_sum += diff.abs();
        d_y[i] = lambda_l1 * diff.signum() / n;
    }
    let mut dcl_value = 0.0;
    if lambda_dcl != 0.0 {
        let soft = SoftMask::new(x.width, x.height, y.clone())?;
        let (v, g) = dcl::dcl_with_gradient(&soft);
        dcl_value = v;
        for (d, gv) in d_y.iter_mut().zip(&g.data) {
            *d += lambda_dcl * gv;
        }
    }
    let loss = LossBreakdown::new(lambda_l1 * l1_sum / n, lambda_dcl * dcl_value);

    let d_z = Planes {
        channels: 1,
        width: x.width,
        height: x.height,
        data: d_y.iter().zip(&y).map(|(d, &yi)| d * yi * (1.0 - yi)).collect(),
    };
    let shapes = model.shapes();
    let mut grads = vec![0.0; model.num_params()];
    let relu_mask = |d: &mut Planes, a: &Planes| {
        d.data.iter_mut().zip(&a.data).filter(|(_, &v)| v <= 0.0).for_each(|(g, _)| *g = 0.0)
    };
    // walk the layers backwards; each layer's gradients occupy a contiguous slice
    let mut end = grads.len();
    let mut upstream = d_z;
    for i in (0..3).rev() {
        let s = shapes[i];
        let start = end - s.param_len();
        let (dw, db) = grads[start..end].split_at_mut(s.weight_len());
        let input = match i {
            2 => &act.a2,
            1 => &act.a1,
            _ => x,
        };
        if let Some(mut d_in) = conv_backward(input, &upstream, s, model.layer(i).0, dw, db, i > 0) {
            relu_mask(&mut d_in, input);
            upstream = d_in;
        }
        end = start;
    }
    Ok((loss, grads))
}

/// Mean loss and gradient over a batch. Samples are evaluated in parallel
/// and reduced in sample order, so the sums do not depend on thread count.
pub fn batch_loss_and_grads(
    model: &SegModel,
    batch: &[(Planes, BinaryMask)],
    lambda_l1: f64,
    lambda_dcl: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let per_sample = batch
        .par_iter()
        .map(|(x, gt)| loss_and_grads(model, x, gt, lambda_l1, lambda_dcl))
        .collect::<Result<Vec<_>>>()?;
    let k = batch.len() as f64;
    let mut grads = vec![0.0; model.num_params()];
    let (mut l1, mut dcl_term) = (0.0, 0.0);
    for (loss, g) in &per_sample {
        l1 += loss.l1;
        dcl_term += loss.dcl;
        grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grads.iter_mut().for_each(|g| *g /= k);
    Ok((LossBreakdown::new(l1 / k, dcl_term / k), grads))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// One image of a split, loaded and ready for the network.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Planes,
    pub gt: BinaryMask,
}

/// Loads right frame, guidance mask (when `channels == 2`) and ground truth.
pub fn load_example(manifest: &DatasetManifest, rec: &ManifestRecord, channels: usize) -> Result<Example> {
    check_c_in(channels)?;
    let image = load_image(manifest.resolve(&rec.right_path))?;
    let gt = load_mask(manifest.resolve(&rec.gt_mask_path))?;
    let fm = if channels == 2 { Some(load_mask(manifest.resolve(&rec.fm_path))?) } else { None };
    let input = Planes::from_inputs(&image, fm.as_ref())?;
    if (gt.width(), gt.height()) != (input.width, input.height) {
        return Err(Error::DimensionMismatch(input.width, input.height, gt.width(), gt.height()));
    }
    Ok(Example { input, gt })
}

pub fn load_split(manifest: &DatasetManifest, split: Split, channels: usize) -> Result<Vec<Example>> {
    manifest.split(split).map(|r| load_example(manifest, r, channels)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val: Prf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub history: Vec<EpochStats>,
    /// Batch size actually used.
    pub batch_size: usize,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,l1,dcl,val_precision,val_recall,val_f_measure\n");
    for h in history {
        s.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.6},{:.6},{:.6}\n",
            h.epoch, h.loss.total, h.loss.l1, h.loss.dcl, h.val.precision, h.val.recall, h.val.f_measure
        ));
    }
    s
}

/// Mean per-image precision, recall and F-measure of thresholded predictions.
pub fn evaluate_examples(model: &SegModel, examples: &[Example], threshold: f64) -> Result<Prf> {
    let per_image = examples
        .par_iter()
        .map(|ex| {
            let pred = predict_planes(model, &ex.input, threshold)?;
            Ok(eval::prf(&eval::confusion(&pred, &ex.gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = eval::aggregate(&per_image)?;
    Ok(Prf {
        precision: s.precision.mean,
        recall: s.recall.mean,
        f_measure: s.f_measure.mean,
        degenerate: per_image.iter().any(|p| p.degenerate),
    })
}

/// Trains on in-memory examples; `val` may be empty.
///
/// Every epoch draws one random patch per training image and visits them in
/// a seeded shuffled order; batches are the consecutive chunks of that order.
pub fn train_examples(train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    for ex in train {
        if ex.input.channels != cfg.channels {
            return Err(Error::ChannelMismatch { expected: cfg.channels, got: ex.input.channels });
        }
        if ex.input.width < cfg.patch || ex.input.height < cfg.patch {
            return Err(Error::TooSmall { width: ex.input.width, height: ex.input.height, min: cfg.patch });
        }
    }
    let batch_size = cfg.batch_size.min(train.len());
    let mut model = init_model(cfg.channels, cfg.seed)?;
    let mut adam = Adam::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let patches: Vec<(Planes, BinaryMask)> = order
            .iter()
            .map(|&i| {
                let ex = &train[i];
                let r = rng.random_range(0..=ex.input.height - cfg.patch);
                let c = rng.random_range(0..=ex.input.width - cfg.patch);
                let gt = BinaryMask::from_fn(cfg.patch, cfg.patch, |pr, pc| ex.gt.is_set(r + pr, c + pc));
                (ex.input.crop(r, c, cfg.patch), gt)
            })
            .collect();
        let (mut l1, mut dcl_term, mut seen) = (0.0, 0.0, 0.0);
        for (b, batch) in patches.chunks(batch_size).enumerate() {
            let (loss, grads) = batch_loss_and_grads(&model, batch, cfg.lambda_l1, cfg.lambda_dcl)?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut model.params, &grads, cfg);
            let k = batch.len() as f64;
            l1 += loss.l1 * k;
            dcl_term += loss.dcl * k;
            seen += k;
        }
        let val_prf = if val.is_empty() { Prf::default() } else { evaluate_examples(&model, val, 0.5)? };
        history.push(EpochStats { epoch, loss: LossBreakdown::new(l1 / seen, dcl_term / seen), val: val_prf });
        if let Some(dir) = &cfg.checkpoint_dir {
            save_model(&model, dir.join(format!("checkpoint_{epoch:03}.bin")))?;
            fs::write(dir.join("history.csv"), history_csv(&history))?;
        }
    }
    Ok(TrainOutcome { model, history, batch_size })
}

/// Trains on the manifest's train split and validates on its test split.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if manifest.records.is_empty() {
        return Err(Error::Empty("manifest".into()));
    }
    let train_set = load_split(manifest, Split::Train, cfg.channels)?;
    let val_set = load_split(manifest, Split::Test, cfg.channels)?;
    train_examples(&train_set, &val_set, cfg)
}

/// Pixels whose sigmoid output exceeds `threshold`.
///
/// The comparison is made on logits, so `threshold = 1` yields an empty mask
/// and `threshold = 0` a full one even where the sigmoid saturates.
pub fn predict_planes(model: &SegModel, x: &Planes, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParam(format!("threshold {threshold} outside [0,1]")));
    }
    let act = forward_cached(model, x)?;
    let cut = (threshold / (1.0 - threshold)).ln();
    let data = act.logits.iter().map(|&z| u8::from(z > cut)).collect();
    BinaryMask::new(x.width, x.height, data)
}

pub fn predict(model: &SegModel, image: &GrayImage, fm: Option<&BinaryMask>, threshold: f64) -> Result<BinaryMask> {
    match (model.c_in, fm.is_some()) {
        (2, false) => return Err(Error::ChannelMismatch { expected: 2, got: 1 }),
        (1, true) => return Err(Error::ChannelMismatch { expected: 1, got: 2 }),
        _ => {}
    }
    predict_planes(model, &Planes::from_inputs(image, fm)?, threshold)
}

/// Magic, version, input channels, layer count, `(c_in, c_out, k)` per
/// layer, then the parameters; all integers `u32` and floats `f64`, little
/// endian.
pub fn model_to_bytes(model: &SegModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.params.len());
    out.extend_from_slice(MODEL_MAGIC);
    let shapes = model.shapes();
    for v in [MODEL_VERSION, model.c_in as u32, shapes.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in shapes {
        for v in [s.c_in as u32, s.c_out as u32, 3] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<SegModel> {
    let bad = |m: &str| Error::BadModel(m.into());
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated model file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MODEL_MAGIC {
        return Err(bad("not a segmenter model file"));
    }
    let mut u32_at = || -> Result<u32> { Ok(u32::from_le_bytes(take(4)?.try_into().unwrap())) };
    let version = u32_at()?;
    if version != MODEL_VERSION {
        return Err(Error::BadModel(format!("unsupported model version {version}")));
    }
    let c_in = u32_at()? as usize;
    check_c_in(c_in).map_err(|_| Error::BadModel(format!("bad input channel count {c_in}")))?;
    let layers = u32_at()? as usize;
    let expected = layer_shapes(c_in);
    if layers != expected.len() {
        return Err(Error::BadModel(format!("expected 3 layers, found {layers}")));
    }
    for s in expected {
        let got = (u32_at()? as usize, u32_at()? as usize, u32_at()?);
        if got != (s.c_in, s.c_out, 3) {
            return Err(Error::BadModel(format!("unexpected layer shape {got:?}")));
        }
    }
    let n: usize = expected.iter().map(LayerShape::param_len).sum();
    let body = take(8 * n)?;
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    SegModel::from_params(c_in, params)
}

pub fn save_model(model: &SegModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SegModel> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    model_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCheckReport {
    pub tested: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    /// Parameter index with the largest error.
    pub worst: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Distance of a sample from the loss's non-differentiable set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KinkMargins {
    /// Smallest `|pre-activation|` over both ReLU layers.
    pub relu: f64,
    /// Smallest best-minus-second-best feature response over all DCL windows.
    pub dcl: f64,
}

pub fn kink_margins(model: &SegModel, x: &Planes) -> Result<KinkMargins> {
    let act = forward_cached(model, x)?;
    let shapes = model.shapes();
    let (w, b) = model.layer(0);
    let z1 = conv_forward(x, shapes[0], w, b);
    let (w, b) = model.layer(1);
    let z2 = conv_forward(&act.a1, shapes[1], w, b);
    let relu = z1.data.iter().chain(&z2.data).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let y = SoftMask::new(x.width, x.height, act.logits.iter().map(|&z| sigmoid(z)).collect())?;
    let mut margin = f64::INFINITY;
    for r in 0..x.height {
        for c in 0..x.width {
            margin = margin.min(dcl::argmax_margin_at(&y, r, c));
        }
    }
    Ok(KinkMargins { relu, dcl: margin })
}

/// Denominator floor for parameter gradient checks. Central differences of a
/// loss of order 1 carry roundoff near `1e-16 / eps`, so gradients below this
/// floor are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn param_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central differences over every parameter against [`loss_and_grads`].
pub fn gradcheck_params(
    model: &SegModel,
    x: &Planes,
    gt: &BinaryMask,
    lambda_l1: f64,
    lambda_dcl: f64,
    eps: f64,
    tol: f64,
) -> Result<ParamCheckReport> {
    let (_, analytic) = loss_and_grads(model, x, gt, lambda_l1, lambda_dcl)?;
    let numeric = (0..model.num_params())
        .into_par_iter()
        .map(|i| {
            let mut m = model.clone();
            m.params[i] = model.params[i] + eps;
            let plus = loss_and_grads(&m, x, gt, lambda_l1, lambda_dcl)?.0.total;
            m.params[i] = model.params[i] - eps;
            let minus = loss_and_grads(&m, x, gt, lambda_l1, lambda_dcl)?.0.total;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    let errs: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| param_relative_error(a, n)).collect();
    let worst = (0..errs.len()).fold(0, |w, i| if errs[i] > errs[w] { i } else { w });
    Ok(ParamCheckReport {
        tested: errs.len(),
        passed: errs.iter().filter(|&&e| e <= tol).count(),
        max_rel_err: errs[worst],
        worst,
        worst_analytic: analytic[worst],
        worst_numeric: numeric[worst],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_planes(c: usize, w: usize, h: usize, seed: u64) -> Planes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Planes { channels: c, width: w, height: h, data: (0..c * w * h).map(|_| rng.random_range(0.0..1.0)).collect() }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(init_model(2, 0).unwrap().num_params(), 2 * 9 * 8 + 8 + 8 * 9 * 8 + 8 + 8 * 9 + 1);
        assert_eq!(init_model(2, 0).unwrap().num_params(), 809);
        assert_eq!(init_model(1, 0).unwrap().num_params(), 737);
        assert!(init_model(3, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_model(2, 5).unwrap(), init_model(2, 5).unwrap());
        assert_ne!(init_model(2, 5).unwrap(), init_model(2, 6).unwrap());
        let m = init_model(1, 1).unwrap();
        let (w, b) = m.layer(1);
        assert!(w.iter().all(|v| v.abs() <= 1.0 / 72f64.sqrt()));
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_model_outputs_half() {
        let y = forward(&SegModel::zeros(2).unwrap(), &random_planes(2, 64, 64, 1)).unwrap();
        assert_eq!((y.width(), y.height()), (64, 64));
        assert!(y.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch() {
        let m = init_model(2, 1).unwrap();
        assert!(matches!(forward(&m, &random_planes(1, 8, 8, 1)), Err(Error::ChannelMismatch { .. })));
        let img = GrayImage::filled(8, 8, 9);
        assert!(predict(&m, &img, None, 0.5).is_err());
    }

    // direct summation, independent of the row-sliced implementation
    fn naive_conv(x: &Planes, c_out: usize, w: &[f64], b: &[f64]) -> Planes {
        let mut out = Planes::zeros(c_out, x.width, x.height);
        for o in 0..c_out {
            for r in 0..x.height as isize {
                for c in 0..x.width as isize {
                    let mut s = b[o];
                    for i in 0..x.channels {
                        for kr in -1..=1isize {
                            for kc in -1..=1isize {
                                let (rr, cc) = (r + kr, c + kc);
                                if rr < 0 || cc < 0 || rr >= x.height as isize || cc >= x.width as isize {
                                    continue;
                                }
                                let wi = ((o * x.channels + i) * 3 + (kr + 1) as usize) * 3 + (kc + 1) as usize;
                                s += w[wi] * x.data[(i * x.height + rr as usize) * x.width + cc as usize];
                            }
                        }
                    }
                    out.data[(o * x.height + r as usize) * x.width + c as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_summation() {
        let mut m = init_model(2, 3).unwrap();
        m.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += 0.001 * (i % 7) as f64);
        let x = random_planes(2, 11, 7, 2);
        let relu = |mut p: Planes| {
            p.data.iter_mut().for_each(|v| *v = v.max(0.0));
            p
        };
        let shapes = m.shapes();
        let (w, b) = m.layer(0);
        let a1 = relu(naive_conv(&x, shapes[0].c_out, w, b));
        let (w, b) = m.layer(1);
        let a2 = relu(naive_conv(&a1, shapes[1].c_out, w, b));
        let (w, b) = m.layer(2);
        let z = naive_conv(&a2, 1, w, b);
        let y = forward(&m, &x).unwrap();
        for (a, &zv) in y.values().iter().zip(&z.data) {
            assert!((a - 1.0 / (1.0 + (-zv).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_zero_when_output_equals_target() {
        // a zero model outputs 0.5 everywhere; l1 to an all-zero target is 0.5
        let m = SegModel::zeros(1).unwrap();
        let x = random_planes(1, 6, 6, 4);
        let (loss, _) = loss_and_grads(&m, &x, &BinaryMask::zeros(6, 6), 1.0, 0.0).unwrap();
        assert_eq!(loss.l1, 0.5);
        assert_eq!(loss.dcl, 0.0);
    }

    #[test]
    fn dcl_term_matches_dcl_module() {
        let m = SegModel::zeros(2).unwrap();
        let x = random_planes(2, 12, 10, 5);
        let gt = BinaryMask::from_fn(12, 10, |r, c| (r + c) % 2 == 0);
        let (loss, _) = loss_and_grads(&m, &x, &gt, 0.0, 1.0).unwrap();
        let half = SoftMask::new(12, 10, vec![0.5; 120]).unwrap();
        assert_eq!(loss.dcl, dcl::dcl(&half));
        assert_eq!(loss.total, loss.l1 + loss.dcl);
    }

    #[test]
    fn all_parameter_gradients_match_finite_differences() {
        let m = init_model(2, 11).unwrap();
        let x = random_planes(2, 9, 9, 12);
        let gt = BinaryMask::from_fn(9, 9, |r, c| r == 4 || c == (r + 2) % 9);
        // the point must sit well clear of every kink for central differences
        let margins = kink_margins(&m, &x).unwrap();
        assert!(margins.relu > 1e-4 && margins.dcl > 1e-5, "{margins:?}");
        let rep = gradcheck_params(&m, &x, &gt, 1.0, 0.1, 1e-5, 1e-4).unwrap();
        assert_eq!(rep.tested, 809);
        assert_eq!(rep.passed, 809, "{rep:?}");
    }

    #[test]
    fn thresholds_at_extremes() {
        let m = init_model(1, 2).unwrap();
        let img = GrayImage::from_fn(10, 10, |r, c| (r * 25 + c) as u8);
        assert_eq!(predict(&m, &img, None, 1.0).unwrap().count_ones(), 0);
        assert_eq!(predict(&m, &img, None, 0.0).unwrap().count_ones(), 100);
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(2, 9).unwrap();
        let path = dir.path().join("m.bin");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let x = random_planes(2, 16, 16, 3);
        assert_eq!(forward(&back, &x).unwrap(), forward(&m, &x).unwrap());
        let mut bytes = model_to_bytes(&m);
        bytes[0] = b'X';
        assert!(model_from_bytes(&bytes).is_err());
        assert!(model_from_bytes(&model_to_bytes(&m)[..40]).is_err());
    }

    fn stripes(n: usize, seed: u64) -> Vec<Example> {
        (0..n)
            .map(|k| {
                let period = 6 + (k as u64 + seed) as usize % 5;
                let gt = BinaryMask::from_fn(72, 72, |_, c| c % period == 0);
                let img = GrayImage::from_fn(72, 72, |r, c| if gt.is_set(r, c) { 230 } else { ((r * 7 + c * 3) % 90) as u8 });
                let input = Planes::from_inputs(&img, Some(&gt)).unwrap();
                Example { input, gt }
            })
            .collect()
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let data = stripes(12, 0);
        let cfg = TrainConfig { epochs: 8, batch_size: 4, learning_rate: 0.01, ..Default::default() };
        let a = train_examples(&data, &data[..3], &cfg).unwrap();
        let b = train_examples(&data, &data[..3], &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.history.last().unwrap().loss.total < a.history[0].loss.total);
        for h in &a.history {
            assert_eq!(h.loss.total, h.loss.l1 + h.loss.dcl);
        }
    }

    #[test]
    fn batch_size_reduced_for_small_sets() {
        let data = stripes(3, 1);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert_eq!(train_examples(&data, &[], &cfg).unwrap().batch_size, 3);
        assert!(train_examples(&[], &[], &cfg).is_err());
    }
}
