//! Two-stage desk-scale training with the cross-entropy method.
//!
//! Stage 1 trains the go-straight and obstacle-avoidance experts from a
//! shared initialization, each in its own scenarios under its own reward.
//! Stage 2 replicates them into a four-expert bank and searches bank and
//! gating jointly under the fusion reward; the critic is then regressed onto
//! discounted returns of the elite rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::derive_seed;
use crate::policy::{
    CriticParams, ExpertBank, GatingParams, MlpParams, MlpShape, Observation, ObservationConfig,
    PolicyBundle, EXPERTS,
};
use crate::reward::{step_reward, Outcome, RewardProfile};
use crate::stack::{run_episode_observed, EpisodeObserver, ScenarioSource, StackConfig, TickInfo};
use crate::world::ScenarioSpec;

pub const DISCOUNT: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticFitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Keep every `stride`-th step of a rollout.
    pub stride: usize,
    /// Replay buffer capacity in samples; oldest samples are dropped first.
    pub capacity: usize,
}

impl Default for CriticFitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            learning_rate: 1e-3,
            stride: 3,
            capacity: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub noise_std: f64,
    pub noise_decay: f64,
    pub generations: usize,
    pub episodes_per_eval: usize,
    pub seed: u64,
    pub hidden: (usize, usize),
    /// Simulated seconds per training episode.
    pub episode_timeout: f64,
    pub critic: CriticFitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_fraction: 0.125,
            noise_std: 0.05,
            noise_decay: 0.98,
            generations: 60,
            episodes_per_eval: 8,
            seed: 0,
            hidden: (64, 64),
            episode_timeout: 20.0,
            critic: CriticFitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::Config("population must be at least 4".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(Error::Config("elite_fraction must lie in (0, 1)".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return Err(Error::Config("noise_decay must lie in (0, 1]".into()));
        }
        if self.episodes_per_eval == 0 || self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(Error::Config(
                "episodes_per_eval and hidden sizes must be positive".into(),
            ));
        }
        if !(self.episode_timeout > 0.0) {
            return Err(Error::Config("episode_timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn elites(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).clamp(1, self.population)
    }

    fn stack(&self) -> StackConfig {
        StackConfig::lower_only(self.episode_timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertProfile {
    GoStraight,
    ObstacleAvoidance,
}

impl ExpertProfile {
    pub fn reward(self) -> RewardProfile {
        match self {
            ExpertProfile::GoStraight => RewardProfile::GO_STRAIGHT,
            ExpertProfile::ObstacleAvoidance => RewardProfile::OBSTACLE_AVOIDANCE,
        }
    }

    pub fn default_scenarios(self) -> Vec<ScenarioSource> {
        match self {
            ExpertProfile::GoStraight => vec![ScenarioSource::named("training-static")],
            ExpertProfile::ObstacleAvoidance => vec![ScenarioSource::named("training-dynamic")],
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub generation: usize,
    pub best_return: f64,
    pub mean_return: f64,
    pub elite_return: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Best return after each generation never decreases.
    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].best_return >= w[0].best_return)
    }
}

/// Observer that sums the reward of an episode and optionally records
/// (features, reward) pairs for critic regression.
struct Recorder {
    profile: RewardProfile,
    max_range: f64,
    total: f64,
    stride: usize,
    samples: Option<Vec<(Vec<f64>, f64)>>,
}

impl EpisodeObserver for Recorder {
    fn on_tick(&mut self, tick: &TickInfo<'_>) {
        let r = step_reward(&self.profile, &tick.transition);
        self.total += r;
        if let Some(s) = self.samples.as_mut() {
            s.push((tick.observation.features(self.max_range), r));
        }
    }
}

/// Result of one training rollout.
pub struct Rollout {
    pub total_return: f64,
    pub outcome: Outcome,
    /// Subsampled (features, discounted return) pairs, when recorded.
    pub samples: Vec<(Vec<f64>, f64)>,
}

/// Runs one lower-layer episode and scores it under `profile`.
pub fn rollout(
    spec: &ScenarioSpec,
    bundle: &PolicyBundle,
    profile: &RewardProfile,
    stack: &StackConfig,
    record: Option<usize>,
) -> Rollout {
    let mut rec = Recorder {
        profile: *profile,
        max_range: bundle.observation.max_range,
        total: 0.0,
        stride: record.unwrap_or(1).max(1),
        samples: record.map(|_| Vec::new()),
    };
    let result = run_episode_observed(spec, bundle, stack, &mut rec);
    let samples = match rec.samples {
        Some(steps) => {
            let mut g = 0.0;
            let mut returns = vec![0.0; steps.len()];
            for (k, (_, r)) in steps.iter().enumerate().rev() {
                g = r + DISCOUNT * g;
                returns[k] = g;
            }
            steps
                .into_iter()
                .zip(returns)
                .enumerate()
                .filter(|(k, _)| k % rec.stride == 0)
                .map(|(_, ((x, _), g))| (x, g))
                .collect()
        }
        None => Vec::new(),
    };
    Rollout {
        total_return: rec.total,
        outcome: result.outcome,
        samples,
    }
}

/// Mean undiscounted return of `bundle` over fixed scenario instances.
pub fn mean_return(
    bundle: &PolicyBundle,
    specs: &[ScenarioSpec],
    profile: &RewardProfile,
    stack: &StackConfig,
) -> f64 {
    let total: f64 = specs
        .iter()
        .map(|s| rollout(s, bundle, profile, stack, None).total_return)
        .sum();
    total / specs.len() as f64
}

/// Instantiates `count` episodes, cycling through `sources`.
pub fn scenario_instances(
    sources: &[ScenarioSource],
    base_seed: u64,
    count: usize,
) -> Result<Vec<ScenarioSpec>> {
    if sources.is_empty() {
        return Err(Error::Config("empty scenario set".into()));
    }
    (0..count)
        .map(|e| sources[e % sources.len()].instantiate(derive_seed(base_seed, e as u64)))
        .collect()
}

const TRAIN_STREAM: u64 = 0x0074_7261_696e;
const INIT_STREAM: u64 = 0x696e_6974;

/// The seeded initialization shared by both stage-1 experts.
pub fn initial_expert(obs: &ObservationConfig, hidden: (usize, usize), seed: u64) -> MlpParams {
    let shape = MlpShape::new(obs.dim(), hidden.0, hidden.1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
    MlpParams::random(shape, 0.1, &mut rng)
}

struct CemResult {
    best: Vec<f64>,
    best_fitness: f64,
    initial_fitness: f64,
    log: TrainLog,
    /// Elite parameter vectors of the final generation, best first.
    final_elites: Vec<Vec<f64>>,
}

/// Cross-entropy search around `init`. Candidate 0 of every generation is
/// the unperturbed mean; the others add isotropic Gaussian noise drawn from
/// a stream keyed by (seed, generation, index). Fitness is reduced in
/// candidate order, so the result does not depend on the thread count.
fn cem(
    stage: &str,
    init: Vec<f64>,
    cfg: &TrainConfig,
    fitness: impl Fn(&[f64]) -> f64 + Sync,
) -> CemResult {
    let n = init.len();
    let mut mean = init;
    let mut sigma = cfg.noise_std;
    let mut best = mean.clone();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut initial_fitness = f64::NAN;
    let mut log = TrainLog::default();
    let mut final_elites = vec![mean.clone()];
    let n_elite = cfg.elites();

    if cfg.generations == 0 {
        return CemResult {
            best_fitness: f64::NAN,
            best,
            initial_fitness,
            log,
            final_elites,
        };
    }

    for gen in 0..cfg.generations {
        let gen_seed = derive_seed(cfg.seed ^ TRAIN_STREAM, gen as u64);
        let candidates: Vec<Vec<f64>> = (0..cfg.population)
            .into_par_iter()
            .map(|i| {
                if i == 0 {
                    return mean.clone();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(gen_seed, i as u64));
                mean.iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + sigma * z
                    })
                    .collect()
            })
            .collect();
        let scores: Vec<f64> = candidates.par_iter().map(|c| fitness(c)).collect();
        if gen == 0 {
            initial_fitness = scores[0];
        }

        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = order[0];
        if scores[top] > best_fitness {
            best_fitness = scores[top];
            best = candidates[top].clone();
        }

        let elites = &order[..n_elite];
        let mut next = vec![0.0; n];
        for &e in elites {
            for (m, c) in next.iter_mut().zip(&candidates[e]) {
                *m += c;
            }
        }
        next.iter_mut().for_each(|m| *m /= n_elite as f64);
        let elite_return = elites.iter().map(|&e| scores[e]).sum::<f64>() / n_elite as f64;
        log.entries.push(LogEntry {
            stage: stage.to_string(),
            generation: gen,
            best_return: best_fitness,
            mean_return: scores.iter().sum::<f64>() / scores.len() as f64,
            elite_return,
            sigma,
        });
        log::info!(
            "{stage} gen {gen}: best {best_fitness:.4} elite {elite_return:.4} sigma {sigma:.4}"
        );
        if gen + 1 == cfg.generations {
            final_elites = elites.iter().map(|&e| candidates[e].clone()).collect();
        }
        mean = next;
        sigma *= cfg.noise_decay;
    }

    CemResult {
        best,
        best_fitness,
        initial_fitness,
        log,
        final_elites,
    }
}

fn check_improved(r: &CemResult) -> Result<()> {
    if r.best_fitness.is_nan() {
        return Ok(());
    }
    if !(r.best_fitness > r.initial_fitness) {
        return Err(Error::NoImprovement {
            initial: r.initial_fitness,
            best: r.best_fitness,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExpertOutcome {
    pub params: MlpParams,
    pub log: TrainLog,
}

/// Stage 1: trains one expert under its profile's reward.
pub fn train_expert(
    profile: ExpertProfile,
    scenarios: &[ScenarioSource],
    cfg: &TrainConfig,
) -> Result<ExpertOutcome> {
    cfg.validate()?;
    let obs = ObservationConfig::default();
    let specs = scenario_instances(scenarios, cfg.seed ^ TRAIN_STREAM, cfg.episodes_per_eval)?;
    let dynamic = specs.iter().any(|s| !s.obstacles.is_empty());
    match profile {
        ExpertProfile::GoStraight if dynamic => {
            return Err(Error::Config(
                "go-straight trains on static scenarios (no moving obstacles)".into(),
            ))
        }
        ExpertProfile::ObstacleAvoidance if specs.iter().any(|s| s.obstacles.is_empty()) => {
            return Err(Error::Config(
                "obstacle-avoidance trains on dynamic scenarios (moving obstacles)".into(),
            ))
        }
        _ => {}
    }
    let init = initial_expert(&obs, cfg.hidden, cfg.seed);
    let shape = init.shape();
    let reward = profile.reward();
    let stack = cfg.stack();
    let stage = match profile {
        ExpertProfile::GoStraight => "expert-gs",
        ExpertProfile::ObstacleAvoidance => "expert-oa",
    };
    let r = cem(stage, init.flatten(), cfg, |flat| {
        let params = MlpParams::from_flat(shape, flat).expect("shape is fixed");
        mean_return(&PolicyBundle::single(obs, params), &specs, &reward, &stack)
    });
    check_improved(&r)?;
    Ok(ExpertOutcome {
        params: MlpParams::from_flat(shape, &r.best)?,
        log: r.log,
    })
}

#[derive(Debug, Clone)]
pub struct FusionOutcome {
    pub bank: ExpertBank,
    pub gating: GatingParams,
    pub critic: CriticParams,
    pub log: TrainLog,
    /// Critic regression loss per epoch.
    pub critic_loss: Vec<f64>,
}

impl FusionOutcome {
    pub fn bundle(&self, observation: ObservationConfig) -> PolicyBundle {
        PolicyBundle::fusion(
            observation,
            self.bank.clone(),
            self.gating.clone(),
            self.critic.clone(),
        )
    }
}

fn fusion_split(
    shape: MlpShape,
    gating_shape: MlpShape,
    flat: &[f64],
) -> Result<(ExpertBank, GatingParams)> {
    let n = shape.param_count();
    let experts = [0, 1, 2, 3].map(|k| MlpParams::from_flat(shape, &flat[k * n..(k + 1) * n]));
    let [e0, e1, e2, e3] = experts;
    let bank = ExpertBank::new([e0?, e1?, e2?, e3?])?;
    let gating = GatingParams(MlpParams::from_flat(gating_shape, &flat[EXPERTS * n..])?);
    Ok((bank, gating))
}

pub fn default_fusion_mix() -> Vec<ScenarioSource> {
    vec![
        ScenarioSource::named("training-static"),
        ScenarioSource::named("training-dynamic"),
    ]
}

/// Stage 2: co-trains the replicated bank and the gating network under the
/// fusion reward, then fits the critic to discounted returns of elite
/// rollouts.
pub fn cotrain_fusion(
    expert_a: &MlpParams,
    expert_b: &MlpParams,
    scenarios: &[ScenarioSource],
    cfg: &TrainConfig,
) -> Result<FusionOutcome> {
    cfg.validate()?;
    let obs = ObservationConfig::default();
    let bank = ExpertBank::replicate(expert_a, expert_b)?;
    let shape = expert_a.shape();
    if shape.input != obs.dim() || shape.output != 3 {
        return Err(Error::ShapeMismatch(format!(
            "experts must map {} -> 3, found {} -> {}",
            obs.dim(),
            shape.input,
            shape.output
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM + 1));
    let gating_shape = MlpShape::new(obs.dim(), cfg.hidden.0, cfg.hidden.1, EXPERTS);
    let gating = GatingParams(MlpParams::random(gating_shape, 0.1, &mut rng));
    let critic_shape = MlpShape::new(obs.dim(), cfg.hidden.0, cfg.hidden.1, 1);
    let critic_init = CriticParams(MlpParams::random(critic_shape, 1.0, &mut rng));

    let mut init = Vec::with_capacity(EXPERTS * shape.param_count() + gating_shape.param_count());
    for e in &bank.experts {
        init.extend(e.flatten());
    }
    init.extend(gating.0.flatten());

    let specs = scenario_instances(scenarios, cfg.seed ^ TRAIN_STREAM, cfg.episodes_per_eval)?;
    let reward = RewardProfile::FUSION;
    let stack = cfg.stack();
    let to_bundle = |flat: &[f64]| -> PolicyBundle {
        let (bank, gating) = fusion_split(shape, gating_shape, flat).expect("shape is fixed");
        PolicyBundle::fusion(obs, bank, gating, critic_init.clone())
    };
    let r = cem("fusion", init, cfg, |flat| {
        mean_return(&to_bundle(flat), &specs, &reward, &stack)
    });
    check_improved(&r)?;
    let (bank, gating) = fusion_split(shape, gating_shape, &r.best)?;

    // Critic data: elite rollouts of the final generation, on fresh seeds so
    // the regression sees more than the training instances.
    let critic_specs = scenario_instances(
        scenarios,
        derive_seed(cfg.seed ^ TRAIN_STREAM, 0xc217),
        cfg.episodes_per_eval.max(8),
    )?;
    let jobs: Vec<(usize, usize)> = (0..r.final_elites.len())
        .flat_map(|e| (0..critic_specs.len()).map(move |s| (e, s)))
        .collect();
    let rollouts: Vec<Vec<(Vec<f64>, f64)>> = jobs
        .par_iter()
        .map(|&(e, s)| {
            rollout(
                &critic_specs[s],
                &to_bundle(&r.final_elites[e]),
                &reward,
                &stack,
                Some(cfg.critic.stride),
            )
            .samples
        })
        .collect();
    let mut samples: Vec<(Vec<f64>, f64)> = rollouts.into_iter().flatten().collect();
    if samples.len() > cfg.critic.capacity {
        samples.drain(..samples.len() - cfg.critic.capacity);
    }
    let (critic, critic_loss) = fit_critic(critic_init, &samples, &cfg.critic, cfg.seed);

    Ok(FusionOutcome {
        bank,
        gating,
        critic,
        log: r.log,
        critic_loss,
    })
}

/// Gradient of the mean squared error over `batch` with respect to every
/// parameter, in `w0 b0 w1 b1 w2 b2` order. Returns the batch loss too.
pub fn mse_gradient(p: &MlpParams, batch: &[(&[f64], f64)]) -> (MlpParams, f64) {
    assert_eq!(p.output, 1, "regression head must be scalar");
    let (h1n, h2n) = (p.hidden1, p.hidden2);
    let mut g = MlpParams::zeros(p.shape());
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let mut h1 = vec![0.0; h1n];
    let mut h2 = vec![0.0; h2n];
    let mut dz2 = vec![0.0; h2n];
    let mut dz1 = vec![0.0; h1n];
    for &(x, y) in batch {
        h1.copy_from_slice(&p.b0);
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                for (h, w) in h1.iter_mut().zip(&p.w0[k * h1n..(k + 1) * h1n]) {
                    *h += xk * w;
                }
            }
        }
        h1.iter_mut().for_each(|v| *v = v.tanh());
        h2.copy_from_slice(&p.b1);
        for (i, &hi) in h1.iter().enumerate() {
            for (h, w) in h2.iter_mut().zip(&p.w1[i * h2n..(i + 1) * h2n]) {
                *h += hi * w;
            }
        }
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let out = p.b2[0] + h2.iter().zip(&p.w2).map(|(h, w)| h * w).sum::<f64>();
        let err = out - y;
        loss += err * err * scale;

        let d = 2.0 * err * scale;
        g.b2[0] += d;
        for j in 0..h2n {
            g.w2[j] += d * h2[j];
            dz2[j] = d * p.w2[j] * (1.0 - h2[j] * h2[j]);
            g.b1[j] += dz2[j];
        }
        for i in 0..h1n {
            let row = i * h2n..(i + 1) * h2n;
            let mut acc = 0.0;
            for ((gw, w), dz) in g.w1[row.clone()].iter_mut().zip(&p.w1[row]).zip(&dz2) {
                *gw += h1[i] * dz;
                acc += w * dz;
            }
            dz1[i] = acc * (1.0 - h1[i] * h1[i]);
            g.b0[i] += dz1[i];
        }
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                for (gw, dz) in g.w0[k * h1n..(k + 1) * h1n].iter_mut().zip(&dz1) {
                    *gw += xk * dz;
                }
            }
        }
    }
    (g, loss)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &MlpParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, p: &mut MlpParams, g: &MlpParams) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (w, gt)) in p.tensors_mut().into_iter().zip(g.tensors()).enumerate() {
            for (i, (wi, gi)) in w.iter_mut().zip(gt).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = Self::B1 * *m + (1.0 - Self::B1) * gi;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gi * gi;
                *wi -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Fits the critic to (features, return) pairs by minibatch Adam. Returns the
/// fitted critic and the mean loss of each epoch.
pub fn fit_critic(
    init: CriticParams,
    samples: &[(Vec<f64>, f64)],
    cfg: &CriticFitConfig,
    seed: u64,
) -> (CriticParams, Vec<f64>) {
    let mut p = init.0;
    if samples.is_empty() {
        return (CriticParams(p), Vec::new());
    }
    let mut adam = Adam::new(&p, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xc71c));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<(&[f64], f64)> = chunk
                .iter()
                .map(|&i| (samples[i].0.as_slice(), samples[i].1))
                .collect();
            let (g, loss) = mse_gradient(&p, &batch);
            total += loss * chunk.len() as f64;
            adam.step(&mut p, &g);
        }
        losses.push(total / samples.len() as f64);
    }
    (CriticParams(p), losses)
}

/// Critic value of an observation (convenience for callers holding only params).
pub fn critic_on(critic: &CriticParams, obs: &Observation, max_range: f64) -> f64 {
    critic.0.forward(&obs.features(max_range))[0]
}
