//! Lower-layer policy: observation construction, expert networks, gating,
//! parameter-level fusion and the critic.
//!
//! Every network is a two-hidden-layer tanh MLP with a linear output. The
//! gating network maps an observation to four logits; their softmax weights
//! blend the four experts' weights and biases entry by entry into a single
//! network, which is then run on the same observation.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rect, Vec2};
use crate::occupancy::encode_pgm;
use crate::world::{Action, ActionLimits};

pub const BUNDLE_SCHEMA: u32 = 1;
pub const EXPERTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub beams: usize,
    pub max_range: f64,
    /// Number of past scans folded into the motion channel.
    pub history: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            beams: 72,
            max_range: 6.0,
            history: 3,
        }
    }
}

impl ObservationConfig {
    /// Network input width: two scan-sized channels, goal offset, velocity.
    pub fn dim(&self) -> usize {
        self.beams * 2 + 5
    }
}

/// `[O_L | O_m | O_g | O_v]`: ranges, scan motion, robot-frame goal offset,
/// robot velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub ranges: Vec<f64>,
    pub motion: Vec<f64>,
    pub goal: Vec2,
    pub velocity: Action,
}

impl Observation {
    pub fn min_range(&self) -> f64 {
        self.ranges.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn with_goal(&self, goal: Vec2) -> Observation {
        Observation {
            goal,
            ..self.clone()
        }
    }

    /// Raw vector in the fixed layout.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.ranges.len() * 2 + 5);
        v.extend_from_slice(&self.ranges);
        v.extend_from_slice(&self.motion);
        v.extend_from_slice(&[self.goal.x, self.goal.y]);
        v.extend_from_slice(&self.velocity.to_array());
        v
    }

    /// Network input, same layout as [`Observation::to_vec`]. Ranges become
    /// proximities `1 - r / max_range` (zero in open space) so the goal term is
    /// not drowned out, motion is divided by `max_range`, and the goal offset
    /// is scaled to unit length beyond 1 m.
    pub fn features(&self, max_range: f64) -> Vec<f64> {
        let inv = 1.0 / max_range;
        let mut v = Vec::with_capacity(self.ranges.len() * 2 + 5);
        v.extend(self.ranges.iter().map(|r| 1.0 - r * inv));
        v.extend(self.motion.iter().map(|m| m * inv));
        let g = 1.0 / self.goal.norm().max(1.0);
        v.extend_from_slice(&[self.goal.x * g, self.goal.y * g]);
        v.extend_from_slice(&self.velocity.to_array());
        v
    }
}

/// Sliding window of the most recent scans, newest first.
#[derive(Debug, Clone)]
pub struct ScanHistory {
    depth: usize,
    scans: VecDeque<Vec<f64>>,
}

impl ScanHistory {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            scans: VecDeque::with_capacity(depth + 1),
        }
    }

    pub fn push(&mut self, scan: Vec<f64>) {
        self.scans.push_front(scan);
        self.scans.truncate(self.depth + 1);
    }

    pub fn latest(&self) -> Option<&[f64]> {
        self.scans.front().map(Vec::as_slice)
    }

    pub fn scans(&self) -> impl Iterator<Item = &[f64]> {
        self.scans.iter().map(Vec::as_slice)
    }
}

/// Builds an observation from scans ordered newest first.
///
/// `O_m = sum_{k=1..n} (O_L^t - O_L^{t-k}) / k`; missing history is padded
/// with the current scan. The goal is expressed in the robot frame.
pub fn build_observation<'a>(
    scans: impl IntoIterator<Item = &'a [f64]>,
    history: usize,
    pose: Pose,
    goal_world: Vec2,
    velocity: Action,
) -> Observation {
    let mut it = scans.into_iter();
    let current = it.next().expect("observation needs at least one scan").to_vec();
    let mut motion = vec![0.0; current.len()];
    let mut past = it;
    for k in 1..=history {
        let old = past.next().unwrap_or(&current);
        for (m, (c, o)) in motion.iter_mut().zip(current.iter().zip(old)) {
            *m += (c - o) / k as f64;
        }
    }
    Observation {
        ranges: current,
        motion,
        goal: pose.to_local(goal_world),
        velocity,
    }
}

/// Weights and biases of a `input -> hidden1 -> hidden2 -> output` tanh MLP.
/// Matrices are row-major with shape `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
}

impl MlpShape {
    pub fn new(input: usize, hidden1: usize, hidden2: usize, output: usize) -> Self {
        Self {
            input,
            hidden1,
            hidden2,
            output,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden1
            + self.hidden1
            + self.hidden1 * self.hidden2
            + self.hidden2
            + self.hidden2 * self.output
            + self.output
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut Vec<f64>) {
    let n_out = b.len();
    out.clear();
    out.extend_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        Self {
            input: shape.input,
            hidden1: shape.hidden1,
            hidden2: shape.hidden2,
            output: shape.output,
            w0: vec![0.0; shape.input * shape.hidden1],
            b0: vec![0.0; shape.hidden1],
            w1: vec![0.0; shape.hidden1 * shape.hidden2],
            b1: vec![0.0; shape.hidden2],
            w2: vec![0.0; shape.hidden2 * shape.output],
            b2: vec![0.0; shape.output],
        }
    }

    /// Glorot-uniform hidden layers, zero biases; the output layer is scaled
    /// by `output_scale`.
    pub fn random(shape: MlpShape, output_scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize, scale: f64| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
            if limit > 0.0 {
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                w.iter_mut().for_each(|x| *x = dist.sample(rng));
            }
        };
        fill(&mut p.w0, shape.input, shape.hidden1, 1.0);
        fill(&mut p.w1, shape.hidden1, shape.hidden2, 1.0);
        fill(&mut p.w2, shape.hidden2, shape.output, output_scale);
        p
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape::new(self.input, self.hidden1, self.hidden2, self.output)
    }

    pub fn param_count(&self) -> usize {
        self.shape().param_count()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        let ok = self.w0.len() == s.input * s.hidden1
            && self.b0.len() == s.hidden1
            && self.w1.len() == s.hidden1 * s.hidden2
            && self.b1.len() == s.hidden2
            && self.w2.len() == s.hidden2 * s.output
            && self.b2.len() == s.output;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "parameter arrays do not match declared shape {s:?}"
            )));
        }
        if !self.is_finite() {
            return Err(Error::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w0, &self.b0, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w0,
            &mut self.b0,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// All parameters concatenated in `w0 b0 w1 b1 w2 b2` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            v.extend_from_slice(t);
        }
        v
    }

    pub fn from_flat(shape: MlpShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, shape needs {}",
                flat.len(),
                shape.param_count()
            )));
        }
        let mut p = Self::zeros(shape);
        let mut offset = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let mut h1 = Vec::with_capacity(self.hidden1);
        affine(x, &self.w0, &self.b0, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = Vec::with_capacity(self.hidden2);
        affine(&h1, &self.w1, &self.b1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = Vec::with_capacity(self.output);
        affine(&h2, &self.w2, &self.b2, &mut out);
        out
    }
}

/// Gating network: an MLP with four outputs, read through a softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GatingParams(pub MlpParams);

/// Critic network: an MLP with a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CriticParams(pub MlpParams);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub experts: [MlpParams; EXPERTS],
}

impl ExpertBank {
    pub fn new(experts: [MlpParams; EXPERTS]) -> Result<Self> {
        let bank = Self { experts };
        bank.validate()?;
        Ok(bank)
    }

    /// Two stage-one experts replicated as `[a, b, a, b]`.
    pub fn replicate(a: &MlpParams, b: &MlpParams) -> Result<Self> {
        Self::new([a.clone(), b.clone(), a.clone(), b.clone()])
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.experts[0].shape();
        for (n, e) in self.experts.iter().enumerate() {
            e.validate()?;
            if e.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "expert {n} has shape {:?}, expert 0 has {shape:?}",
                    e.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Expert weights `alpha` for an observation.
pub fn gate(gating: &GatingParams, features: &[f64]) -> [f64; EXPERTS] {
    let logits = gating.0.forward(features);
    let a = softmax(&logits);
    [a[0], a[1], a[2], a[3]]
}

/// Entry-wise convex combination of the experts' weights and biases.
pub fn fuse(bank: &ExpertBank, alpha: &[f64; EXPERTS]) -> Result<MlpParams> {
    bank.validate()?;
    Ok(fuse_unchecked(bank, alpha))
}

fn fuse_unchecked(bank: &ExpertBank, alpha: &[f64; EXPERTS]) -> MlpParams {
    let mut out = bank.experts[0].clone();
    let [e0, e1, e2, e3] = &bank.experts;
    let src = [e0.tensors(), e1.tensors(), e2.tensors(), e3.tensors()];
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        for (k, d) in dst.iter_mut().enumerate() {
            *d = alpha[0] * src[0][t][k]
                + alpha[1] * src[1][t][k]
                + alpha[2] * src[2][t][k]
                + alpha[3] * src[3][t][k];
        }
    }
    out
}

/// Maps raw network outputs into the action box: `tanh`, then scaled by the
/// upper limit for positive values and the lower limit for negative ones.
pub fn map_action(raw: &[f64], limits: &ActionLimits) -> Action {
    let ch = limits.channels();
    let m = |r: f64, [lo, hi]: [f64; 2]| {
        let t = r.tanh();
        if t >= 0.0 {
            t * hi
        } else {
            t * -lo
        }
    };
    limits.clamp(Action::new(m(raw[0], ch[0]), m(raw[1], ch[1]), m(raw[2], ch[2])))
}

pub fn add_exploration_noise(
    action: Action,
    sigma: f64,
    limits: &ActionLimits,
    rng: &mut impl Rng,
) -> Action {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    limits.clamp(Action::new(
        action.vx + normal.sample(rng),
        action.vy + normal.sample(rng),
        action.wz + normal.sample(rng),
    ))
}

/// Fused action for an observation, plus the gate weights used.
pub fn act(
    bank: &ExpertBank,
    gating: &GatingParams,
    features: &[f64],
    limits: &ActionLimits,
) -> (Action, [f64; EXPERTS]) {
    let alpha = gate(gating, features);
    (act_with_alpha(bank, &alpha, features, limits), alpha)
}

pub fn act_with_alpha(
    bank: &ExpertBank,
    alpha: &[f64; EXPERTS],
    features: &[f64],
    limits: &ActionLimits,
) -> Action {
    let fused = fuse_unchecked(bank, alpha);
    map_action(&fused.forward(features), limits)
}

pub fn critic_value(critic: &CriticParams, features: &[f64]) -> f64 {
    critic.0.forward(features)[0]
}

/// Hand-written controllers standing in for trained experts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    /// Proportional gain from goal distance to speed.
    pub speed_gain: f64,
    /// Proportional gain from goal bearing to yaw rate.
    pub turn_gain: f64,
    /// Beams shorter than this push the robot away.
    pub influence: f64,
    /// Range at which avoidance fully takes over.
    pub takeover: f64,
    pub repulsion_gain: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self {
            speed_gain: 1.2,
            turn_gain: 2.0,
            influence: 1.0,
            takeover: 0.45,
            repulsion_gain: 0.35,
        }
    }
}

impl ScriptedConfig {
    /// Drive straight at the goal, turning to face it.
    pub fn go_straight(&self, obs: &Observation) -> Action {
        let g = obs.goal;
        let dist = g.norm();
        if dist < 1e-9 {
            return Action::ZERO;
        }
        let speed = self.speed_gain * dist;
        let v = g * (speed / dist);
        Action::new(v.x, v.y, self.turn_gain * g.y.atan2(g.x))
    }

    /// Goal attraction plus repulsion from every beam inside the influence
    /// radius.
    pub fn avoid(&self, obs: &Observation) -> Action {
        let n = obs.ranges.len() as f64;
        let mut push = Vec2::ZERO;
        for (i, &r) in obs.ranges.iter().enumerate() {
            if r < self.influence {
                let dir = Vec2::from_angle(2.0 * PI * i as f64 / n);
                let w = self.repulsion_gain * (1.0 / r.max(0.05) - 1.0 / self.influence);
                push = push - dir * w;
            }
        }
        let g = obs.goal;
        let dist = g.norm().max(1e-9);
        let attract = g * (0.5 * self.speed_gain * dist.min(1.0) / dist);
        let v = attract + push;
        Action::new(v.x, v.y, self.turn_gain * 0.5 * g.y.atan2(g.x))
    }

    /// Blend weights over (go-straight, avoid, -, -).
    pub fn gate(&self, obs: &Observation) -> [f64; EXPERTS] {
        let s = ((self.influence - obs.min_range()) / (self.influence - self.takeover)).clamp(0.0, 1.0);
        [1.0 - s, s, 0.0, 0.0]
    }

    pub fn act(&self, obs: &Observation, limits: &ActionLimits) -> (Action, [f64; EXPERTS]) {
        let alpha = self.gate(obs);
        let a = self.go_straight(obs);
        let b = self.avoid(obs);
        let mix = Action::new(
            alpha[0] * a.vx + alpha[1] * b.vx,
            alpha[0] * a.vy + alpha[1] * b.vy,
            alpha[0] * a.wz + alpha[1] * b.wz,
        );
        (limits.clamp(mix), alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    Fusion {
        experts: ExpertBank,
        gating: GatingParams,
    },
    Single {
        expert: MlpParams,
    },
    Scripted(ScriptedConfig),
}

/// Everything the lower layer needs, persisted as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub schema: u32,
    pub observation: ObservationConfig,
    pub limits: ActionLimits,
    pub controller: Controller,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub alpha: Option<[f64; EXPERTS]>,
}

impl PolicyBundle {
    pub fn scripted() -> Self {
        Self {
            schema: BUNDLE_SCHEMA,
            observation: ObservationConfig::default(),
            limits: ActionLimits::default(),
            controller: Controller::Scripted(ScriptedConfig::default()),
            critic: None,
        }
    }

    pub fn single(observation: ObservationConfig, expert: MlpParams) -> Self {
        Self {
            schema: BUNDLE_SCHEMA,
            observation,
            limits: ActionLimits::default(),
            controller: Controller::Single { expert },
            critic: None,
        }
    }

    pub fn fusion(
        observation: ObservationConfig,
        experts: ExpertBank,
        gating: GatingParams,
        critic: CriticParams,
    ) -> Self {
        Self {
            schema: BUNDLE_SCHEMA,
            observation,
            limits: ActionLimits::default(),
            controller: Controller::Fusion { experts, gating },
            critic: Some(critic),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(Error::Schema {
                found: self.schema,
                expected: BUNDLE_SCHEMA,
            });
        }
        let x = self.observation.dim();
        let check = |p: &MlpParams, out: usize, what: &str| -> Result<()> {
            p.validate()?;
            if p.input != x || p.output != out {
                return Err(Error::ShapeMismatch(format!(
                    "{what}: expected {x} -> {out}, found {} -> {}",
                    p.input, p.output
                )));
            }
            Ok(())
        };
        match &self.controller {
            Controller::Fusion { experts, gating } => {
                experts.validate()?;
                check(&experts.experts[0], 3, "expert")?;
                check(&gating.0, EXPERTS, "gating")?;
            }
            Controller::Single { expert } => check(expert, 3, "expert")?,
            Controller::Scripted(_) => {}
        }
        if let Some(c) = &self.critic {
            check(&c.0, 1, "critic")?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bundle: PolicyBundle = serde_json::from_str(text)?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn decide(&self, obs: &Observation) -> Decision {
        match &self.controller {
            Controller::Scripted(cfg) => {
                let (action, alpha) = cfg.act(obs, &self.limits);
                Decision {
                    action,
                    alpha: Some(alpha),
                }
            }
            Controller::Single { expert } => {
                let raw = expert.forward(&obs.features(self.observation.max_range));
                Decision {
                    action: map_action(&raw, &self.limits),
                    alpha: None,
                }
            }
            Controller::Fusion { experts, gating } => {
                let f = obs.features(self.observation.max_range);
                let (action, alpha) = act(experts, gating, &f, &self.limits);
                Decision {
                    action,
                    alpha: Some(alpha),
                }
            }
        }
    }

    /// Critic value of `obs`; a bundle without a critic values everything at 0.
    pub fn value(&self, obs: &Observation) -> f64 {
        match &self.critic {
            Some(c) => critic_value(c, &obs.features(self.observation.max_range)),
            None => 0.0,
        }
    }
}

/// Critic values sampled on a robot-frame lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub cols: usize,
    pub rows: usize,
    pub origin: Vec2,
    pub stride: f64,
    /// Row-major, row 0 at the smallest y.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Values rescaled to `[0, 1]`; a flat map becomes uniformly 0.5.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; self.values.len()]
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// North-up 8-bit PGM of the normalized values.
    pub fn to_pgm(&self) -> Vec<u8> {
        let norm = self.normalized();
        let mut pixels = Vec::with_capacity(norm.len());
        for row in (0..self.rows).rev() {
            pixels.extend(
                norm[row * self.cols..(row + 1) * self.cols]
                    .iter()
                    .map(|v| (v * 255.0).round() as u8),
            );
        }
        encode_pgm(self.cols, self.rows, &pixels)
    }
}

/// Evaluates `value` with every lattice point of `region` (robot frame,
/// spacing `stride`) substituted as the goal offset.
pub fn safety_heatmap(
    value: impl Fn(&Observation) -> f64,
    base: &Observation,
    region: Rect,
    stride: f64,
) -> Heatmap {
    assert!(stride > 0.0, "stride must be positive");
    let cols = (region.width() / stride + 1e-9).floor() as usize + 1;
    let rows = (region.height() / stride + 1e-9).floor() as usize + 1;
    let mut values = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let p = Vec2::new(
                region.min.x + c as f64 * stride,
                region.min.y + r as f64 * stride,
            );
            values.push(value(&base.with_goal(p)));
        }
    }
    Heatmap {
        cols,
        rows,
        origin: region.min,
        stride,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> MlpShape {
        MlpShape::new(ObservationConfig::default().dim(), 8, 8, 3)
    }

    fn obs(rng: &mut ChaCha8Rng) -> Observation {
        let cfg = ObservationConfig::default();
        Observation {
            ranges: (0..cfg.beams).map(|_| rng.random_range(0.1..6.0)).collect(),
            motion: (0..cfg.beams).map(|_| rng.random_range(-1.0..1.0)).collect(),
            goal: Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            velocity: Action::new(0.2, 0.0, 0.1),
        }
    }

    #[test]
    fn motion_channel_formula() {
        let s0 = vec![3.0, 2.0];
        let s1 = vec![2.5, 2.0];
        let s2 = vec![1.0, 4.0];
        let o = build_observation(
            [s0.as_slice(), s1.as_slice(), s2.as_slice()],
            2,
            Pose::default(),
            Vec2::new(1.0, 0.0),
            Action::ZERO,
        );
        assert_eq!(o.motion, vec![(3.0 - 2.5) / 1.0 + (3.0 - 1.0) / 2.0, 0.0 + (2.0 - 4.0) / 2.0]);
    }

    #[test]
    fn padded_history_has_no_motion() {
        let s0 = vec![3.0, 2.0, 1.0];
        let o = build_observation([s0.as_slice()], 3, Pose::default(), Vec2::ZERO, Action::ZERO);
        assert!(o.motion.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn goal_in_robot_frame() {
        let o = build_observation(
            [[1.0].as_slice()],
            1,
            Pose::new(1.0, 1.0, PI / 2.0),
            Vec2::new(1.0, 3.0),
            Action::ZERO,
        );
        assert!((o.goal.x - 2.0).abs() < 1e-12 && o.goal.y.abs() < 1e-12);
    }

    #[test]
    fn scan_history_keeps_newest_first() {
        let mut h = ScanHistory::new(2);
        for k in 0..5 {
            h.push(vec![k as f64]);
        }
        let got: Vec<f64> = h.scans().map(|s| s[0]).collect();
        assert_eq!(got, vec![4.0, 3.0, 2.0]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::zeros(shape());
        assert_eq!(p.forward(&vec![0.7; shape().input]), vec![0.0; 3]);
    }

    #[test]
    fn tiny_net_hand_evaluation() {
        let mut p = MlpParams::zeros(MlpShape::new(1, 1, 1, 1));
        p.w0 = vec![1.0];
        p.w1 = vec![1.0];
        p.w2 = vec![1.0];
        assert_eq!(p.forward(&[0.5]), vec![0.5f64.tanh().tanh()]);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::random(shape(), 0.1, &mut rng);
        assert_eq!(MlpParams::from_flat(shape(), &p.flatten()).unwrap(), p);
        assert!(MlpParams::from_flat(shape(), &[0.0; 3]).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[2.0; 4]), vec![0.25; 4]);
        assert!(softmax(&[10.0, 0.0, 0.0, 0.0])[0] > 0.999);
    }

    #[test]
    fn fuse_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e: Vec<MlpParams> = (0..4).map(|_| MlpParams::random(shape(), 1.0, &mut rng)).collect();
        let bank = ExpertBank::new([e[0].clone(), e[1].clone(), e[2].clone(), e[3].clone()]).unwrap();
        assert_eq!(fuse(&bank, &[1.0, 0.0, 0.0, 0.0]).unwrap(), e[0]);
        let twin = ExpertBank::new([e[0].clone(), e[0].clone(), e[2].clone(), e[3].clone()]).unwrap();
        assert_eq!(fuse(&twin, &[0.5, 0.5, 0.0, 0.0]).unwrap(), e[0]);
    }

    #[test]
    fn fuse_rejects_mismatched_bank() {
        let a = MlpParams::zeros(shape());
        let b = MlpParams::zeros(MlpShape::new(shape().input, 8, 4, 3));
        assert!(matches!(
            ExpertBank::new([a.clone(), b, a.clone(), a.clone()]),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bank = ExpertBank::replicate(&a, &a).unwrap();
        bank.experts[3].w2.pop();
        assert!(fuse(&bank, &[0.25; 4]).is_err());
    }

    #[test]
    fn actions_inside_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let limits = ActionLimits::default();
        for _ in 0..200 {
            let raw = [
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ];
            assert!(limits.contains(map_action(&raw, &limits)));
        }
        assert_eq!(map_action(&[0.0; 3], &limits), Action::ZERO);
    }

    #[test]
    fn noisy_action_reproducible() {
        let limits = ActionLimits::default();
        let a = Action::new(0.5, 0.1, -0.2);
        let n1 = add_exploration_noise(a, 0.3, &limits, &mut ChaCha8Rng::seed_from_u64(9));
        let n2 = add_exploration_noise(a, 0.3, &limits, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(n1, n2);
        assert_ne!(n1, a);
        assert!(limits.contains(n1));
    }

    #[test]
    fn critic_hand_evaluation() {
        // 2-2-2-1 network evaluated by hand
        let mut p = MlpParams::zeros(MlpShape::new(2, 2, 2, 1));
        p.w0 = vec![0.5, -1.0, 0.25, 2.0];
        p.b0 = vec![0.1, 0.0];
        p.w1 = vec![1.0, 0.0, -1.0, 1.0];
        p.b1 = vec![0.0, 0.2];
        p.w2 = vec![2.0, -3.0];
        p.b2 = vec![0.5];
        let x = [0.4, -0.8];
        let h1a = (0.4 * 0.5 + -0.8 * 0.25 + 0.1f64).tanh();
        let h1b = (0.4 * -1.0 + -0.8 * 2.0 + 0.0f64).tanh();
        let h2a = (h1a * 1.0 + h1b * -1.0 + 0.0f64).tanh();
        let h2b = (h1a * 0.0 + h1b * 1.0 + 0.2f64).tanh();
        let expected = 2.0 * h2a - 3.0 * h2b + 0.5;
        let critic = CriticParams(p);
        assert!((critic_value(&critic, &x) - expected).abs() < 1e-15);
        assert_eq!(critic_value(&critic, &x), critic_value(&critic, &x));
        assert_eq!(critic_value(&CriticParams(MlpParams::zeros(MlpShape::new(2, 2, 2, 1))), &x), 0.0);
    }

    #[test]
    fn heatmap_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = obs(&mut rng);
        let flat = safety_heatmap(|_| 3.0, &base, Rect::new(-2.0, -2.0, 2.0, 2.0), 0.5);
        assert_eq!((flat.cols, flat.rows), (9, 9));
        assert!(flat.normalized().iter().all(|&v| v == 0.5));
        let single = safety_heatmap(|o| o.goal.x, &base, Rect::new(1.5, 1.5, 1.5, 1.5), 0.5);
        assert_eq!(single.values, vec![1.5]);
        assert!(single.to_pgm().starts_with(b"P5\n1 1\n255\n"));
    }

    #[test]
    fn scripted_controller_heads_to_goal() {
        let cfg = ScriptedConfig::default();
        let limits = ActionLimits::default();
        let o = Observation {
            ranges: vec![6.0; 72],
            motion: vec![0.0; 72],
            goal: Vec2::new(4.0, 0.0),
            velocity: Action::ZERO,
        };
        let (a, alpha) = cfg.act(&o, &limits);
        assert_eq!(alpha, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a, Action::new(1.0, 0.0, 0.0));
        // a wall dead ahead pushes back
        let mut near = o.clone();
        near.ranges[0] = 0.4;
        let (b, alpha) = cfg.act(&near, &limits);
        assert_eq!(alpha[1], 1.0);
        assert!(b.vx < a.vx);
    }

    #[test]
    fn bundle_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ObservationConfig::default();
        let e = MlpParams::random(MlpShape::new(cfg.dim(), 4, 4, 3), 0.1, &mut rng);
        let g = MlpParams::random(MlpShape::new(cfg.dim(), 4, 4, 4), 0.1, &mut rng);
        let c = MlpParams::random(MlpShape::new(cfg.dim(), 4, 4, 1), 0.1, &mut rng);
        let bundle = PolicyBundle::fusion(
            cfg,
            ExpertBank::replicate(&e, &e).unwrap(),
            GatingParams(g),
            CriticParams(c),
        );
        let text = bundle.to_json().unwrap();
        assert_eq!(PolicyBundle::from_json(&text).unwrap(), bundle);
        let wrong = PolicyBundle::single(ObservationConfig { beams: 10, ..cfg }, e);
        assert!(wrong.validate().is_err());
    }
}
