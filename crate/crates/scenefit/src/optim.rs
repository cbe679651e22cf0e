//! Adam and the direct-variable fitting loop.
//!
//! [`fit_scene`] recovers per-pixel log-depth, mask logits, and K raw pose
//! 6-vectors per source view by minimizing the photometric-plus-smoothness
//! objective on one synthetic triplet. Depth is optimized in log space, so
//! positivity is structural rather than clipped; poses are optimized as the
//! raw vectors that [`crate::geometry::decode_pose_s`] scales by 0.01, so
//! the decoding convention sits on the gradient path.
//!
//! Every step rebuilds the tape from scratch (the allocation is reused), runs
//! one forward/backward pair, and applies a bias-corrected Adam update. The
//! loop is deterministic given the scene and config, including the seed that
//! draws the symmetry-breaking initial logit noise.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::field::{DepthMap, Field, Image};
use crate::geometry::{decode_pose_s, RigidTransform, POSE_SCALE};
use crate::losses::{total_loss_s, LossBreakdown, LossConfig};
use crate::masks::{normalize_masks, normalize_pixel, MaskLogits, MaskStack, OrderingWeights, TransformSet};
use crate::scene::{SyntheticScene, SOURCES};
use crate::warp::synthesize_view_s;
use crate::{Error, Result};

/// Bias-corrected Adam state over one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }
    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step length mismatch: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Optim {
            block: format!("parameter {i}"),
            detail: format!("non-finite gradient {}", grads[i]),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Step-schedule for the learning rate: `initial` until `drop_at` of the run
/// is done, then `drop_to`. The default mirrors dropping to 1e-5 for the
/// final quarter of a 1e-4 run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub drop_to: f64,
    pub drop_at: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-4,
            drop_to: 1e-5,
            drop_at: 0.75,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if (step as f64) < self.drop_at * total as f64 {
            self.initial
        } else {
            self.drop_to
        }
    }
}

/// How pose variables start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoseInit {
    Identity,
    /// Ground-truth ego pose of each source view, perturbed per component by
    /// noise of exactly the given rotation (radians) and translation (scene
    /// units) magnitudes.
    PerturbedTruth { rot: f64, trans: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    /// Constant initial depth; the log of this seeds every depth variable.
    pub depth: f64,
    /// Standard deviation of the initial mask-logit noise. Breaks the
    /// channel symmetry that plain softmax normalization would otherwise
    /// never escape.
    pub logit_noise: f64,
    pub pose: PoseInit,
}

/// Per-block multipliers on the scheduled learning rate. Depth is thousands
/// of fast parameters while each source has only 6K pose numbers; letting the
/// poses settle faster than the depth field stops the depth from deforming to
/// absorb early pose error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockLr {
    pub depth: f64,
    pub logits: f64,
    pub pose: f64,
}

impl Default for BlockLr {
    fn default() -> Self {
        BlockLr {
            depth: 1.0,
            logits: 1.0,
            pose: 1.0,
        }
    }
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            depth: 8.0,
            logit_noise: 1e-3,
            pose: PoseInit::Identity,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub k: usize,
    pub steps: usize,
    pub lr: LrSchedule,
    pub block_lr: BlockLr,
    pub loss: LossConfig,
    pub init: InitConfig,
    pub seed: u64,
    /// Snapshot interval; `None` keeps only the final state.
    pub checkpoint_every: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 1,
            steps: 500,
            lr: LrSchedule::default(),
            block_lr: BlockLr::default(),
            loss: LossConfig::default(),
            init: InitConfig::default(),
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("fit needs K >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("fit needs at least one step".into()));
        }
        if !(self.init.depth > 0.0) {
            return Err(Error::Config("initial depth must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn ordering(&self) -> OrderingWeights {
        if self.loss.use_depth_ordering {
            OrderingWeights::ordered(self.k)
        } else {
            OrderingWeights::uniform(self.k)
        }
    }
}

/// Mid-run snapshot of the optimized variables.
#[derive(Clone, Debug)]
pub struct FitSnapshot {
    pub step: usize,
    pub depth: DepthMap,
    pub masks: MaskStack<f64>,
    pub poses: [TransformSet<f64>; 2],
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub depth: DepthMap,
    pub masks: MaskStack<f64>,
    /// `[to_prev, to_next]`, matching the scene's source order.
    pub poses: [TransformSet<f64>; 2],
    pub loss_history: Vec<LossBreakdown>,
    pub checkpoints: Vec<FitSnapshot>,
    pub wall_time: Duration,
}

struct ParamLayout {
    n_px: usize,
    k: usize,
}

impl ParamLayout {
    fn depth(&self) -> std::ops::Range<usize> {
        0..self.n_px
    }
    fn logits(&self) -> std::ops::Range<usize> {
        self.n_px..self.n_px * (1 + self.k)
    }
    fn pose(&self, source: usize) -> std::ops::Range<usize> {
        let base = self.n_px * (1 + self.k) + source * 6 * self.k;
        base..base + 6 * self.k
    }
    fn total(&self) -> usize {
        self.n_px * (1 + self.k) + 12 * self.k
    }
    fn block_name(&self, index: usize) -> &'static str {
        if self.depth().contains(&index) {
            "log-depth"
        } else if self.logits().contains(&index) {
            "mask-logits"
        } else if self.pose(0).contains(&index) {
            "pose-prev"
        } else {
            "pose-next"
        }
    }
}

fn initial_params(scene: &SyntheticScene, cfg: &FitConfig, layout: &ParamLayout) -> Vec<f64> {
    let mut params = vec![0.0; layout.total()];
    for p in &mut params[layout.depth()] {
        *p = cfg.init.depth.ln();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.init.logit_noise > 0.0 {
        for p in &mut params[layout.logits()] {
            // Box-Muller keeps the dependency surface small and the stream
            // stable across rand versions.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            *p = cfg.init.logit_noise * (-2.0 * u1.ln()).sqrt() * u2.cos();
        }
    }
    if let PoseInit::PerturbedTruth { rot, trans } = cfg.init.pose {
        for (s, _) in SOURCES.iter().enumerate() {
            let ego = *scene.gt_transforms[s].0.last().expect("K >= 1");
            let range = layout.pose(s);
            let raw = &mut params[range];
            for comp in 0..layout.k {
                let dir_r = unit_vector(&mut rng);
                let dir_t = unit_vector(&mut rng);
                for axis in 0..3 {
                    raw[comp * 6 + axis] = (ego.axis_angle[axis] + rot * dir_r[axis]) / POSE_SCALE;
                    raw[comp * 6 + 3 + axis] =
                        (ego.translation[axis] + trans * dir_t[axis]) / POSE_SCALE;
                }
            }
        }
    }
    params
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn decode_state(
    params: &[f64],
    layout: &ParamLayout,
    scene: &SyntheticScene,
    cfg: &FitConfig,
) -> Result<(DepthMap, MaskStack<f64>, [TransformSet<f64>; 2])> {
    let (w, h) = (scene.width(), scene.height());
    let depth = DepthMap::new(w, h, params[layout.depth()].iter().map(|p| p.exp()).collect())?;
    let logits = MaskLogits::new(w, h, layout.k, params[layout.logits()].to_vec())?;
    let masks = normalize_masks(&logits, &cfg.ordering())?;
    let mut poses = Vec::with_capacity(2);
    for s in 0..2 {
        let raw = &params[layout.pose(s)];
        let ts: Vec<RigidTransform<f64>> = raw
            .chunks_exact(6)
            .map(|c| decode_pose_s(&[c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        poses.push(TransformSet::new(ts));
    }
    let poses: [TransformSet<f64>; 2] = poses.try_into().expect("two sources");
    Ok((depth, masks, poses))
}

/// Fits depth, masks, and per-source poses to one synthetic triplet.
pub fn fit_scene(scene: &SyntheticScene, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let (w, h) = (scene.width(), scene.height());
    let layout = ParamLayout {
        n_px: w * h,
        k: cfg.k,
    };
    let mut params = initial_params(scene, cfg, &layout);
    let mut depth_state = AdamState::new(layout.depth().len(), cfg.lr.initial);
    let mut logit_state = AdamState::new(layout.logits().len(), cfg.lr.initial);
    let mut pose_state = AdamState::new(12 * layout.k, cfg.lr.initial);
    let ordering = cfg.ordering();
    let d_weights = ordering.as_slice().to_vec();
    let stationary: Vec<&Image> = vec![&scene.prev, &scene.next];

    let tape = Tape::with_capacity(1 << 20);
    let mut grads: Vec<f64> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();

    for step in 0..cfg.steps {
        let base_lr = cfg.lr.at(step, cfg.steps);
        depth_state.lr = base_lr * cfg.block_lr.depth;
        logit_state.lr = base_lr * cfg.block_lr.logits;
        pose_state.lr = base_lr * cfg.block_lr.pose;
        tape.clear();
        let vars: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();

        let depth = Field::from_data(
            w,
            h,
            vars[layout.depth()].iter().map(|v| v.exp()).collect(),
        );
        let mask_stack = {
            let logit_vars = &vars[layout.logits()];
            let mut data = Vec::with_capacity(layout.n_px * layout.k);
            let mut px = Vec::with_capacity(layout.k);
            for pixel in logit_vars.chunks_exact(layout.k) {
                normalize_pixel(pixel, &d_weights, &mut px);
                data.extend_from_slice(&px);
            }
            MaskStack {
                width: w,
                height: h,
                k: layout.k,
                data,
            }
        };

        let mut warped = Vec::with_capacity(2);
        for (s, source) in SOURCES.iter().enumerate() {
            let raw = &vars[layout.pose(s)];
            let ts: Vec<RigidTransform<Var<'_>>> = raw
                .chunks_exact(6)
                .map(|c| decode_pose_s(&[c[0], c[1], c[2], c[3], c[4], c[5]]))
                .collect();
            let transforms = TransformSet::new(ts);
            let (src_img, _, _) = scene.source(*source);
            warped.push(synthesize_view_s(
                &depth,
                &mask_stack,
                &transforms,
                src_img,
                &scene.meta.config.intrinsics,
            )?);
        }
        let warped_refs: Vec<&_> = warped.iter().collect();
        let terms = total_loss_s(
            &scene.target,
            &warped_refs,
            &depth,
            Some(&mask_stack),
            Some(&stationary),
            &cfg.loss,
        )?;
        tape.backward_into(terms.total, 1.0, &mut grads)?;

        let param_grads = &grads[..layout.total()];
        if let Some(bad) = param_grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Optim {
                block: layout.block_name(bad).to_string(),
                detail: format!("non-finite gradient at step {step}"),
            });
        }
        let depth_range = layout.depth();
        adam_step(
            &mut params[depth_range.clone()],
            &param_grads[depth_range],
            &mut depth_state,
        )?;
        let logit_range = layout.logits();
        adam_step(
            &mut params[logit_range.clone()],
            &param_grads[logit_range],
            &mut logit_state,
        )?;
        let pose_range = layout.pose(0).start..layout.pose(1).end;
        adam_step(
            &mut params[pose_range.clone()],
            &param_grads[pose_range],
            &mut pose_state,
        )?;
        history.push(terms.breakdown());

        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.steps {
                let (depth, masks, poses) = decode_state(&params, &layout, scene, cfg)?;
                checkpoints.push(FitSnapshot {
                    step: step + 1,
                    depth,
                    masks,
                    poses,
                });
            }
        }
    }

    let (depth, masks, poses) = decode_state(&params, &layout, scene, cfg)?;
    Ok(FitResult {
        depth,
        masks,
        poses,
        loss_history: history,
        checkpoints,
        wall_time: start.elapsed(),
    })
}

/// Moving-average smoothing used by the loss-trajectory regression check.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if values.is_empty() || window == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len().saturating_sub(window) + 1);
    let mut sum: f64 = values[..window.min(values.len())].iter().sum();
    if values.len() < window {
        return vec![sum / values.len() as f64];
    }
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}
