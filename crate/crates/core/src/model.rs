//! Two-layer perceptron from feature rasters to prediction tensors, with a
//! hand-written backward pass, the training loop and parameter persistence.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledScene;
use crate::geometry::{iou, IouVariant};
use crate::gridcodec::{
    decode_masked, encode_with, shield_mask, AnchorAssignment, Detection, GridConfig, GroundTruth,
    PredictionTensor, ShieldMask, SlotLabel,
};
use crate::loss::{masked_loss_and_grad, slot_losses, LossBreakdown, LossConfig};
use crate::mining::{select_hard, MiningConfig};
use crate::nms::{competitive_filter, nms_scale_synthesis, NmsConfig};
use crate::optim::{AdamState, LrSchedule};
use crate::{Error, Result, NUM_ANCHORS, NUM_CLASSES};

pub const MODEL_MAGIC: &str = "gridsight-model v1";

/// Lower bound of the w,h head, keeping `√w` differentiable.
const WH_FLOOR: f64 = 1e-6;

/// Weights of `features → tanh(H) → n·n·36`.
///
/// `w1` is stored input-major (`w1[i·H + j]` links input `i` to hidden `j`) so
/// sparse rasters only touch the rows they need; `w2` is output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    feature_len: usize,
    hidden: usize,
    n: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Hidden,
    Output,
}

impl ModelParams {
    pub fn zeros(feature_len: usize, hidden: usize, grid: &GridConfig) -> Result<Self> {
        if feature_len == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "model needs positive feature length and hidden width, got {feature_len} and {hidden}"
            )));
        }
        let out = grid.tensor_len();
        Ok(Self {
            feature_len,
            hidden,
            n: grid.n(),
            w1: vec![0.0; feature_len * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out * hidden],
            b2: vec![0.0; out],
        })
    }

    /// Uniform in `±√(6 / (fan_in + fan_out))` per layer, zero biases.
    pub fn init(feature_len: usize, hidden: usize, grid: &GridConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(feature_len, hidden, grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = (6.0 / (feature_len + hidden) as f64).sqrt();
        for w in &mut p.w1 {
            *w = rng.gen_range(-r1..=r1);
        }
        let r2 = (6.0 / (hidden + grid.tensor_len()) as f64).sqrt();
        for w in &mut p.w2 {
            *w = rng.gen_range(-r2..=r2);
        }
        Ok(p)
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn grid_n(&self) -> usize {
        self.n
    }

    pub fn output_len(&self) -> usize {
        self.b2.len()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn shape(&self) -> String {
        format!(
            "features={} hidden={} n={}",
            self.feature_len, self.hidden, self.n
        )
    }

    /// Fails unless the model was built for this grid and feature length.
    pub fn ensure_shape(&self, grid: &GridConfig, feature_len: usize) -> Result<()> {
        if self.n != grid.n() || self.feature_len != feature_len {
            return Err(Error::Dimension {
                expected: format!("model with features={feature_len} n={}", grid.n()),
                found: format!("model with {}", self.shape()),
            });
        }
        Ok(())
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn layer_tensors(&self, layer: Layer) -> [&[f64]; 2] {
        match layer {
            Layer::Hidden => [&self.w1, &self.b1],
            Layer::Output => [&self.w2, &self.b2],
        }
    }

    /// Little-endian bytes of one layer's weights then biases.
    pub fn layer_bytes(&self, layer: Layer) -> Vec<u8> {
        self.layer_tensors(layer)
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    fn add_scaled(&mut self, other: &Self, k: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
}

/// Activations kept for the backward pass.
struct Trace {
    hidden: Vec<f64>,
    out: PredictionTensor,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_features(params: &ModelParams, features: &[f64]) -> Result<()> {
    if features.len() != params.feature_len {
        return Err(Error::Dimension {
            expected: format!("{} features", params.feature_len),
            found: format!("{} features", features.len()),
        });
    }
    Ok(())
}

fn forward_trace(params: &ModelParams, features: &[f64]) -> Result<Trace> {
    check_features(params, features)?;
    let grid = GridConfig::new(params.n)?;
    let h = params.hidden;

    let mut hidden = params.b1.clone();
    for (i, &x) in features.iter().enumerate() {
        if x != 0.0 {
            for (a, w) in hidden.iter_mut().zip(&params.w1[i * h..(i + 1) * h]) {
                *a += x * w;
            }
        }
    }
    for a in &mut hidden {
        *a = a.tanh();
    }

    let mut z = params.b2.clone();
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &params.w2[o * h..(o + 1) * h];
        *zo += row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>();
    }

    for cell in 0..grid.num_cells() {
        let base = grid.class_index(cell, 0);
        let row = &mut z[base..base + NUM_CLASSES];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        for anchor in 0..NUM_ANCHORS {
            for k in 0..4 {
                let i = grid.coord_index(cell, anchor, k);
                let s = sigmoid(z[i]);
                z[i] = if k < 2 {
                    s
                } else {
                    WH_FLOOR + (1.0 - WH_FLOOR) * s
                };
            }
            let i = grid.conf_index(cell, anchor);
            z[i] = sigmoid(z[i]);
        }
    }
    Ok(Trace {
        hidden,
        out: PredictionTensor::from_values(&grid, z)?,
    })
}

/// Maps a feature raster to a prediction tensor.
pub fn forward(params: &ModelParams, features: &[f64]) -> Result<PredictionTensor> {
    Ok(forward_trace(params, features)?.out)
}

/// Parameter gradients given `∂L/∂pred`; layers flagged in `freeze` get zeros.
pub fn backward(
    params: &ModelParams,
    features: &[f64],
    d_pred: &[f64],
    freeze: &[bool; 2],
) -> Result<ModelParams> {
    let trace = forward_trace(params, features)?;
    backward_from(params, features, &trace, d_pred, freeze)
}

fn backward_from(
    params: &ModelParams,
    features: &[f64],
    trace: &Trace,
    d_pred: &[f64],
    freeze: &[bool; 2],
) -> Result<ModelParams> {
    let grid = GridConfig::new(params.n)?;
    if d_pred.len() != grid.tensor_len() {
        return Err(Error::Dimension {
            expected: format!("{} output gradients", grid.tensor_len()),
            found: format!("{}", d_pred.len()),
        });
    }
    let y = trace.out.values();
    let h = params.hidden;

    // through the output squashings to the pre-activations
    let mut dz = vec![0.0; d_pred.len()];
    for cell in 0..grid.num_cells() {
        let base = grid.class_index(cell, 0);
        let p = &y[base..base + NUM_CLASSES];
        let g = &d_pred[base..base + NUM_CLASSES];
        let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
        for c in 0..NUM_CLASSES {
            dz[base + c] = p[c] * (g[c] - dot);
        }
        for anchor in 0..NUM_ANCHORS {
            for k in 0..4 {
                let i = grid.coord_index(cell, anchor, k);
                dz[i] = if k < 2 {
                    d_pred[i] * y[i] * (1.0 - y[i])
                } else {
                    let s = (y[i] - WH_FLOOR) / (1.0 - WH_FLOOR);
                    d_pred[i] * (1.0 - WH_FLOOR) * s * (1.0 - s)
                };
            }
            let i = grid.conf_index(cell, anchor);
            dz[i] = d_pred[i] * y[i] * (1.0 - y[i]);
        }
    }

    let mut g = ModelParams::zeros(params.feature_len, h, &grid)?;
    let mut d_hidden = vec![0.0; h];
    for (o, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &params.w2[o * h..(o + 1) * h];
        for (dh, w) in d_hidden.iter_mut().zip(row) {
            *dh += d * w;
        }
        if !freeze[1] {
            g.b2[o] = d;
            for (gw, a) in g.w2[o * h..(o + 1) * h].iter_mut().zip(&trace.hidden) {
                *gw = d * a;
            }
        }
    }
    if !freeze[0] {
        for (dh, a) in d_hidden.iter_mut().zip(&trace.hidden) {
            *dh *= 1.0 - a * a;
        }
        g.b1.copy_from_slice(&d_hidden);
        for (i, &x) in features.iter().enumerate() {
            if x != 0.0 {
                for (gw, dh) in g.w1[i * h..(i + 1) * h].iter_mut().zip(&d_hidden) {
                    *gw = x * dh;
                }
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    pub shielding: bool,
    pub competition_iou: f64,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    /// `[layer1, layer2]`; a frozen layer keeps its parameters.
    pub freeze: [bool; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            hidden: 64,
            seed: 0,
            shielding: true,
            competition_iou: 0.7,
            mining: MiningConfig::default(),
            loss: LossConfig::default(),
            schedule: LrSchedule::default(),
            freeze: [false, false],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "epochs, batch size and hidden width must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.competition_iou) {
            return Err(Error::Config(format!(
                "competition_iou {} outside [0, 1]",
                self.competition_iou
            )));
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "schedule spans {} epochs but training runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        self.mining.validate()?;
        self.loss.validate()?;
        self.schedule.validate()
    }
}

/// Prior IoU above which a background slot counts as a candidate for an object.
pub const CANDIDATE_IOU: f64 = 0.5;

/// Anchor competition for every object: unshielded slots whose prior matches
/// the object above [`CANDIDATE_IOU`] compete with the assigned slot by prior
/// IoU; background slots that lose are excluded from the loss instead of
/// being pushed to zero.
pub fn apply_competition(
    asg: &mut AnchorAssignment,
    gts: &[GroundTruth],
    grid: &GridConfig,
    shield: Option<&ShieldMask>,
    iou_threshold: f64,
) {
    let objects: Vec<(usize, usize)> = asg
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(s, l)| match l {
            SlotLabel::Object { gt } => Some((s, *gt)),
            _ => None,
        })
        .collect();
    if objects.is_empty() {
        return;
    }
    let priors: Vec<_> = (0..grid.num_slots())
        .map(|s| grid.slot_prior_box(s))
        .collect();
    for (obj_slot, gt) in objects {
        let gt_box = gts[gt].bbox;
        let mut slots = vec![obj_slot];
        let mut cands = vec![(priors[obj_slot], f64::INFINITY)];
        for (s, p) in priors.iter().enumerate() {
            if s == obj_slot
                || asg.label(s) != SlotLabel::NoObject
                || shield.is_some_and(|m| m.is_shielded(s))
            {
                continue;
            }
            let fit = iou(p, &gt_box, IouVariant::Union);
            if fit > CANDIDATE_IOU {
                slots.push(s);
                cands.push((*p, fit));
            }
        }
        let survivors = competitive_filter(&cands, iou_threshold);
        let mut alive = vec![false; cands.len()];
        for k in survivors {
            alive[k] = true;
        }
        for (k, &s) in slots.iter().enumerate() {
            if !alive[k] {
                asg.ignore(s);
            }
        }
    }
}

/// Training targets for one scene under the given configuration.
pub fn prepare_targets(
    scene: &LabeledScene,
    grid: &GridConfig,
    shield: Option<&ShieldMask>,
    competition_iou: f64,
) -> Result<(PredictionTensor, AnchorAssignment)> {
    let (target, mut asg) = encode_with(&scene.gts, grid, shield)?;
    apply_competition(&mut asg, &scene.gts, grid, shield, competition_iou);
    Ok((target, asg))
}

struct SceneStep {
    full: LossBreakdown,
    grad: ModelParams,
}

fn scene_step(
    params: &ModelParams,
    scene: &LabeledScene,
    target: &PredictionTensor,
    asg: &AnchorAssignment,
    cfg: &TrainConfig,
) -> Result<SceneStep> {
    let trace = forward_trace(params, &scene.features)?;
    let (full, per_slot) = slot_losses(&trace.out, target, asg, &cfg.loss)?;
    let keep_idx = select_hard(&per_slot, &asg.object_slots(), &cfg.mining)?;
    let mut keep = vec![false; per_slot.len()];
    for i in keep_idx {
        keep[i] = true;
    }
    let (_, d_pred) = masked_loss_and_grad(&trace.out, target, asg, &cfg.loss, &keep)?;
    let grad = backward_from(params, &scene.features, &trace, &d_pred, &cfg.freeze)?;
    Ok(SceneStep { full, grad })
}

/// Mean full (unmined) loss per scene.
pub fn evaluate_loss(
    params: &ModelParams,
    scenes: &[LabeledScene],
    grid: &GridConfig,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let shield = cfg.shielding.then(|| shield_mask(grid));
    let parts: Vec<LossBreakdown> = scenes
        .par_iter()
        .map(|s| {
            let (target, asg) = prepare_targets(s, grid, shield.as_ref(), cfg.competition_iou)?;
            Ok(slot_losses(&forward(params, &s.features)?, &target, &asg, &cfg.loss)?.0)
        })
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    for p in parts {
        total += p;
    }
    Ok(total.scaled(1.0 / scenes.len().max(1) as f64))
}

/// Mini-batch Adam training. Returns the parameters and the epoch-mean loss
/// recorded while each epoch ran.
pub fn train(
    dataset: &[LabeledScene],
    grid: &GridConfig,
    cfg: &TrainConfig,
    initial: Option<ModelParams>,
) -> Result<(ModelParams, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let feature_len = dataset[0].features.len();
    let mut params = match initial {
        Some(p) => p,
        None => ModelParams::init(feature_len, cfg.hidden, grid, cfg.seed)?,
    };
    params.ensure_shape(grid, feature_len)?;

    let shield = cfg.shielding.then(|| shield_mask(grid));
    let targets: Vec<(PredictionTensor, AnchorAssignment)> = dataset
        .par_iter()
        .map(|s| {
            check_features(&params, &s.features)?;
            prepare_targets(s, grid, shield.as_ref(), cfg.competition_iou)
        })
        .collect::<Result<_>>()?;

    let mut adam: Vec<AdamState> = params
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let eta = cfg.schedule.lr_at(epoch)?;
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let steps: Vec<SceneStep> = batch
                .par_iter()
                .map(|&i| scene_step(&params, &dataset[i], &targets[i].0, &targets[i].1, cfg))
                .collect::<Result<_>>()?;
            let mut grad = ModelParams::zeros(params.feature_len, params.hidden, grid)?;
            let k = 1.0 / batch.len() as f64;
            // summed in batch order so the result does not depend on scheduling
            for s in &steps {
                grad.add_scaled(&s.grad, k);
                epoch_loss += s.full;
            }
            for (idx, (state, (p, g))) in adam
                .iter_mut()
                .zip(params.tensors_mut().into_iter().zip(grad.tensors()))
                .enumerate()
            {
                if !cfg.freeze[idx / 2] {
                    state.step(g, p, eta)?;
                }
            }
        }
        let mean = epoch_loss.scaled(1.0 / dataset.len() as f64);
        log::info!(
            "epoch {}/{}: loss {:.6} (lr {eta:.6})",
            epoch + 1,
            cfg.epochs,
            mean.total
        );
        history.push(mean);
    }
    Ok((params, history))
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Forward pass, thresholded decode (skipping `skip` slots) and NMS.
pub fn detect(
    params: &ModelParams,
    features: &[f64],
    threshold: f64,
    nms: &NmsConfig,
    skip: Option<&ShieldMask>,
) -> Result<Vec<Detection>> {
    let grid = GridConfig::new(params.n)?;
    let pred = forward(params, features)?;
    Ok(nms_scale_synthesis(
        &decode_masked(&pred, &grid, threshold, skip)?,
        nms,
    ))
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("{MODEL_MAGIC} {}\n", params.shape()).into_bytes();
    out.reserve(params.num_params() * 8);
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad(format!("missing `{MODEL_MAGIC}` header")))?;
    let header =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8".into()))?;
    let rest = header
        .strip_prefix(MODEL_MAGIC)
        .ok_or_else(|| bad(format!("expected magic `{MODEL_MAGIC}`, found `{header}`")))?;
    let mut dims = [None; 3];
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field `{field}`")))?;
        let slot = match key {
            "features" => 0,
            "hidden" => 1,
            "n" => 2,
            _ => return Err(bad(format!("unknown header field `{key}`"))),
        };
        dims[slot] = Some(
            value
                .parse::<usize>()
                .map_err(|e| bad(format!("header field `{field}`: {e}")))?,
        );
    }
    let [Some(f), Some(h), Some(n)] = dims else {
        return Err(bad("header must give features, hidden and n".into()));
    };
    let grid = GridConfig::new(n)?;
    let mut params = ModelParams::zeros(f, h, &grid)?;
    let body = &bytes[nl + 1..];
    let want = params.num_params() * 8;
    if body.len() != want {
        return Err(bad(format!(
            "expected {want} bytes of parameters for {}, found {}",
            params.shape(),
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(8);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            let c = chunks.next().expect("length checked above");
            *v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
        }
    }
    if let Some(i) = params
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFinite { index: i });
    }
    Ok(params)
}

/// [`load_params`] followed by a shape check against the expected grid.
pub fn load_params_for(
    path: impl AsRef<Path>,
    grid: &GridConfig,
    feature_len: usize,
) -> Result<ModelParams> {
    let p = load_params(path)?;
    p.ensure_shape(grid, feature_len)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SceneSpec};
    use crate::loss::compound_loss;

    fn small_grid() -> GridConfig {
        GridConfig::new(9).unwrap()
    }

    #[test]
    fn zero_model_outputs_neutral_values() {
        let grid = small_grid();
        let p = ModelParams::zeros(16, 4, &grid).unwrap();
        let y = forward(&p, &[0.3; 16]).unwrap();
        assert_eq!(y.len(), 2916);
        for cell in 0..grid.num_cells() {
            for c in 0..NUM_CLASSES {
                assert!((y.values()[grid.class_index(cell, c)] - 1.0 / 6.0).abs() < 1e-15);
            }
            for a in 0..NUM_ANCHORS {
                assert_eq!(y.values()[grid.conf_index(cell, a)], 0.5);
                assert_eq!(y.values()[grid.coord_index(cell, a, 0)], 0.5);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let grid = GridConfig::new(13).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i % 5) as f64 / 4.0).collect();
        let a = forward(&ModelParams::init(64, 8, &grid, 7).unwrap(), &x).unwrap();
        let b = forward(&ModelParams::init(64, 8, &grid, 7).unwrap(), &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6084);
        for cell in 0..grid.num_cells() {
            let s: f64 = (0..6).map(|c| a.values()[grid.class_index(cell, c)]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for an in 0..6 {
                let w = a.values()[grid.coord_index(cell, an, 2)];
                assert!(w > 0.0 && w <= 1.0);
            }
        }
        assert!(forward(&ModelParams::init(64, 8, &grid, 7).unwrap(), &x[..10]).is_err());
    }

    #[test]
    fn zero_upstream_gradient_and_freeze() {
        let grid = small_grid();
        let p = ModelParams::init(16, 4, &grid, 1).unwrap();
        let x = vec![0.5; 16];
        let g = backward(&p, &x, &vec![0.0; 2916], &[false, false]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));

        let d: Vec<f64> = (0..2916).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let g = backward(&p, &x, &d, &[true, false]).unwrap();
        assert!(g.w1.iter().chain(&g.b1).all(|v| *v == 0.0));
        assert!(g.w2.iter().any(|v| *v != 0.0));
        assert!(backward(&p, &x, &d[..10], &[false, false]).is_err());
    }

    /// Loss of the full forward pass on one scene, used as the finite-difference oracle.
    fn scene_loss(
        p: &ModelParams,
        s: &LabeledScene,
        t: &PredictionTensor,
        a: &AnchorAssignment,
    ) -> f64 {
        compound_loss(
            &forward(p, &s.features).unwrap(),
            t,
            a,
            &LossConfig::default(),
        )
        .unwrap()
        .total
    }

    #[test]
    fn backward_matches_finite_differences() {
        let grid = small_grid();
        let spec = SceneSpec {
            feature_resolution: 6,
            objects_min: 2,
            objects_max: 2,
            ..SceneSpec::default()
        };
        let scene = &generate_dataset(&spec, 1, 3).unwrap()[0];
        let p = ModelParams::init(36, 3, &grid, 11).unwrap();
        let shield = shield_mask(&grid);
        let (t, a) = prepare_targets(scene, &grid, Some(&shield), 0.7).unwrap();
        let d_pred = crate::loss::compound_loss_grad(
            &forward(&p, &scene.features).unwrap(),
            &t,
            &a,
            &LossConfig::default(),
        )
        .unwrap();
        let g = backward(&p, &scene.features, &d_pred, &[false, false]).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for ti in 0..4 {
            let len = p.tensors()[ti].len();
            for k in (0..len).step_by(len / 40 + 1) {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][k] -= h;
                let fd = (scene_loss(&plus, scene, &t, &a) - scene_loss(&minus, scene, &t, &a))
                    / (2.0 * h);
                let an = g.tensors()[ti][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn competition_ignores_near_duplicate_priors() {
        let grid = small_grid();
        // a wide object matching the 4:2 prior, whose horizontal neighbours overlap it above 0.7
        let gt = crate::gridcodec::GroundTruth::new(
            crate::geometry::BoxCWH::new(0.5, 0.5, 6.0 / 9.0, 3.0 / 9.0),
            4,
        );
        let scene = LabeledScene {
            id: 0,
            features: vec![0.0; 4],
            gts: vec![gt],
        };
        let (_, asg) = prepare_targets(&scene, &grid, None, 0.7).unwrap();
        let ignored: Vec<usize> = (0..grid.num_slots())
            .filter(|&s| asg.label(s) == SlotLabel::Ignored)
            .collect();
        assert_eq!(ignored, vec![grid.slot(39, 5), grid.slot(41, 5)]);
        let (_, asg) = prepare_targets(&scene, &grid, None, 1.0).unwrap();
        assert!(asg.labels().iter().all(|l| *l != SlotLabel::Ignored));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let grid = small_grid();
        let spec = SceneSpec {
            feature_resolution: 12,
            ..SceneSpec::default()
        };
        let data = generate_dataset(&spec, 24, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            hidden: 8,
            seed: 3,
            schedule: LrSchedule {
                total_epochs: 6,
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&data, &grid, &cfg, None).unwrap();
        let (p2, h2) = train(&data, &grid, &cfg, None).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert!(h1.last().unwrap().total < h1[0].total);
    }

    #[test]
    fn frozen_layer_is_untouched() {
        let grid = small_grid();
        let spec = SceneSpec {
            feature_resolution: 12,
            ..SceneSpec::default()
        };
        let data = generate_dataset(&spec, 10, 2).unwrap();
        let base = ModelParams::init(144, 8, &grid, 9).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            hidden: 8,
            freeze: [true, false],
            schedule: LrSchedule {
                total_epochs: 2,
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        };
        let (tuned, _) = train(&data, &grid, &cfg, Some(base.clone())).unwrap();
        assert_eq!(
            tuned.layer_bytes(Layer::Hidden),
            base.layer_bytes(Layer::Hidden)
        );
        assert_ne!(
            tuned.layer_bytes(Layer::Output),
            base.layer_bytes(Layer::Output)
        );
    }

    #[test]
    fn config_validation() {
        let grid = small_grid();
        let data = generate_dataset(
            &SceneSpec {
                feature_resolution: 4,
                ..SceneSpec::default()
            },
            2,
            0,
        )
        .unwrap();
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&data, &grid, &bad, None).is_err());
        let mismatch = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(train(&data, &grid, &mismatch, None).is_err());
        assert!(train(&[], &grid, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn save_load_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let grid = small_grid();
        let p = ModelParams::init(20, 5, &grid, 4).unwrap();
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.layer_bytes(Layer::Output), q.layer_bytes(Layer::Output));

        let bytes = std::fs::read(&path).unwrap();
        for cut in [5, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(load_params(&path).is_err(), "cut {cut}");
        }
        std::fs::write(&path, b"not-a-model v1 features=1 hidden=1 n=9\n").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format { .. })));

        save_params(&p, &path).unwrap();
        for (n, f) in [(11, 20), (13, 20), (9, 21)] {
            match load_params_for(&path, &GridConfig::new(n).unwrap(), f) {
                Err(Error::Dimension { expected, found }) => {
                    assert!(
                        expected.contains(&format!("n={n}"))
                            && expected.contains(&format!("features={f}"))
                    );
                    assert!(found.contains("n=9") && found.contains("features=20"));
                }
                other => panic!("{other:?}"),
            }
        }
        assert!(load_params_for(&path, &grid, 20).is_ok());
    }
}
