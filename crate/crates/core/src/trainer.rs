//! Joint reasoner/verifier training.
//!
//! Each iteration samples a group of solutions per prompt, computes advantages
//! for the configured method, and runs `ppo_epochs` full-batch SGD passes on
//!
//! ```text
//! J = J_clip - β·KL(π_θ ‖ π_ref) - λ(step)·L_verify
//! ```
//!
//! where `L_verify` is the YES/NO negative log-likelihood on a class-balanced
//! batch built from the same iteration's episodes. Learning rate and λ follow
//! linear ramps. PPO additionally regresses a value head on returns, and the
//! BCE/REG verifier modes train a separate head instead of the generative loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::advantage::{gae_advantages, grpo_advantages, rloo_advantages, vineppo_advantages};
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap, SparseFeatures};
use crate::policy::{Decoding, Head, HeadSet, Policy, Reference, RowGrad};
use crate::rng;
use crate::scalar::{sigmoid, Scalar};
use crate::task::{
    generate_task, make_verification_input, reward, Domain, Episode, TaskInstance, Token, Vocab,
};
use crate::verifier::{verifier_accuracy, Scorer, ValueAggregation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grpo,
    Rloo,
    VinePpo,
    Ppo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Grpo, Method::Rloo, Method::VinePpo, Method::Ppo];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Grpo => "GRPO",
            Method::Rloo => "RLOO",
            Method::VinePpo => "VINEPPO",
            Method::Ppo => "PPO",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifierMode {
    Generative,
    BceHead,
    RegHead,
    None,
}

impl VerifierMode {
    pub const ALL: [VerifierMode; 4] =
        [VerifierMode::Generative, VerifierMode::BceHead, VerifierMode::RegHead, VerifierMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            VerifierMode::Generative => "GENERATIVE",
            VerifierMode::BceHead => "BCE_HEAD",
            VerifierMode::RegHead => "REG_HEAD",
            VerifierMode::None => "NONE",
        }
    }
}

impl FromStr for VerifierMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VerifierMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown verifier mode `{s}`")))
    }
}

impl fmt::Display for VerifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Supervised warm start that stands in for a pretrained base model: teacher
/// forcing on step-by-step demonstrations whose step values are replaced by a
/// random digit with probability `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub demos: usize,
    pub lr: f64,
    pub noise: f64,
    pub max_difficulty: u32,
    pub domain: Domain,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { demos: 4000, lr: 0.5, noise: 0.5, max_difficulty: 3, domain: Domain::Mixed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub verifier_mode: VerifierMode,
    pub beta: f64,
    pub clip_epsilon: f64,
    pub lambda_max: f64,
    /// G for GRPO, K for leave-one-out; also the samples per prompt for VinePPO/PPO.
    pub group_size: usize,
    /// Monte-Carlo rollouts per state for VinePPO.
    pub vine_samples: usize,
    pub ppo_epochs: usize,
    pub lr_max: f64,
    /// Learning-rate ceiling for the squared-error heads (REG and value).
    pub head_lr_max: f64,
    pub ramp_fraction: f64,
    pub batch_prompts: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub total_iterations: usize,
    pub seed: u64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub difficulty: u32,
    pub domain: Domain,
    pub modulus: u32,
    pub window: usize,
    pub structured_features: bool,
    /// Multiplicity of each structured indicator.
    pub structured_gain: usize,
    pub pretrain: PretrainConfig,
    /// Held-out tasks sampled once per iteration for the verifier probe.
    pub probe_tasks: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Grpo,
            verifier_mode: VerifierMode::Generative,
            beta: 0.01,
            clip_epsilon: 0.2,
            lambda_max: 1.0,
            group_size: 8,
            vine_samples: 4,
            ppo_epochs: 2,
            lr_max: 4.0,
            head_lr_max: 0.25,
            ramp_fraction: 0.75,
            batch_prompts: 16,
            max_len: 16,
            temperature: 1.0,
            total_iterations: 200,
            seed: 0,
            gae_gamma: 1.0,
            gae_lambda: 0.95,
            difficulty: 2,
            domain: Domain::AddOnly,
            modulus: 10,
            window: 3,
            structured_features: true,
            structured_gain: 2,
            pretrain: PretrainConfig::default(),
            probe_tasks: 64,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 12] = [
            (self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0, "clip_epsilon must be in (0, 1)"),
            (self.lambda_max >= 0.0, "lambda_max must be non-negative"),
            (self.beta >= 0.0, "beta must be non-negative"),
            (self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0, "ramp_fraction must be in (0, 1]"),
            (self.group_size >= 2, "group_size must be at least 2"),
            (self.ppo_epochs >= 1, "ppo_epochs must be at least 1"),
            (self.batch_prompts >= 1, "batch_prompts must be at least 1"),
            (self.max_len >= 1, "max_len must be at least 1"),
            (self.temperature > 0.0, "temperature must be positive"),
            (self.difficulty >= 1, "difficulty must be at least 1"),
            (self.window >= 1 && self.structured_gain >= 1, "window and structured_gain must be at least 1"),
            (self.lr_max >= 0.0 && self.head_lr_max >= 0.0 && self.pretrain.lr >= 0.0, "learning rates must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return invalid(msg);
            }
        }
        if self.method == Method::VinePpo && self.vine_samples == 0 {
            return invalid("vine_samples must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.pretrain.noise) {
            return invalid("pretrain noise must be in [0, 1]");
        }
        Vocab::new(self.modulus)?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.modulus).expect("validated modulus")
    }

    pub fn feature_map(&self) -> FeatureMap {
        if self.structured_features {
            FeatureMap::Structured { width: self.window, gain: self.structured_gain }
        } else {
            FeatureMap::Window { width: self.window }
        }
    }

    pub fn heads(&self) -> HeadSet {
        HeadSet {
            value: self.method == Method::Ppo,
            bce: self.verifier_mode == VerifierMode::BceHead,
            reg: self.verifier_mode == VerifierMode::RegHead,
        }
    }

    pub fn decoding(&self) -> Decoding {
        Decoding::Temperature(self.temperature)
    }

    /// Scorer reported in metrics: the trained head when there is one, the PPO
    /// value for value-based runs without a verifier, generative otherwise.
    pub fn native_scorer(&self) -> Scorer {
        match self.verifier_mode {
            VerifierMode::BceHead => Scorer::BceHead,
            VerifierMode::RegHead => Scorer::RegHead,
            VerifierMode::None if self.method == Method::Ppo => Scorer::PpoValue(ValueAggregation::Last),
            _ => Scorer::Generative,
        }
    }
}

/// `min(1, step / (ramp_fraction · total_steps)) · max_value`.
pub fn ramp(step: usize, total_steps: usize, max_value: f64, ramp_fraction: f64) -> f64 {
    let span = ramp_fraction * total_steps as f64;
    if span <= 0.0 {
        return max_value;
    }
    (step as f64 / span).min(1.0) * max_value
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationExample {
    pub input: Vec<Token>,
    pub label: Token,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerificationBatch {
    pub examples: Vec<VerificationExample>,
    pub skipped: bool,
}

/// One example per episode, then the minority class oversampled uniformly with
/// replacement until YES and NO counts match. A batch missing either class is
/// returned empty and marked skipped.
pub fn build_verification_batch<T>(episodes: &[Episode<T>], rng: &mut impl Rng) -> VerificationBatch {
    let mut yes = Vec::new();
    let mut no = Vec::new();
    let mut examples = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let label = if ep.reward == 1 { Token::YES } else { Token::NO };
        let ex = VerificationExample { input: make_verification_input(&ep.task, &ep.solution), label };
        if ep.reward == 1 { &mut yes } else { &mut no }.push(examples.len());
        examples.push(ex);
    }
    if yes.is_empty() || no.is_empty() {
        return VerificationBatch { examples: Vec::new(), skipped: true };
    }
    let (minority, deficit) =
        if yes.len() < no.len() { (&yes, no.len() - yes.len()) } else { (&no, yes.len() - no.len()) };
    let extra: Vec<VerificationExample> =
        (0..deficit).map(|_| examples[minority[rng.gen_range(0..minority.len())]].clone()).collect();
    examples.extend(extra);
    VerificationBatch { examples, skipped: false }
}

/// Dense gradient over every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub weights: Vec<T>,
    pub value: Vec<T>,
    pub bce: Vec<T>,
    pub reg: Vec<T>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros(policy: &Policy<T>) -> Self {
        let dim = policy.feature_dim();
        let head = |on: bool| if on { vec![T::zero(); dim] } else { Vec::new() };
        let heads = policy.heads();
        Gradient {
            weights: vec![T::zero(); policy.weights.len()],
            value: head(heads.value),
            bce: head(heads.bce),
            reg: head(heads.reg),
        }
    }

    fn head_mut(&mut self, head: Head) -> &mut Vec<T> {
        match head {
            Head::Value => &mut self.value,
            Head::Bce => &mut self.bce,
            Head::Reg => &mut self.reg,
        }
    }
}

fn add_features<T: Scalar>(dense: &mut [T], phi: &SparseFeatures, scale: T) {
    for &f in &phi.indices {
        dense[f] += scale;
    }
}

fn contexts<'a>(prompt: &'a [Token], solution: &'a [Token]) -> impl Iterator<Item = (Vec<Token>, Token)> + 'a {
    (0..solution.len()).map(move |t| ([prompt, &solution[..t]].concat(), solution[t]))
}

/// Clipped surrogate `mean_i (1/|y_i|) Σ_t min(ρ_t Â_t, clip(ρ_t, 1±ε) Â_t)`
/// and its derivative with respect to each new log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipObjective<T> {
    pub value: T,
    pub dlogp: Vec<Vec<T>>,
    pub clipped_tokens: usize,
}

pub fn ppo_clip_objective<T: Scalar>(
    new_logprobs: &[Vec<T>],
    old_logprobs: &[Vec<T>],
    advantages: &[Vec<T>],
    epsilon: T,
) -> Result<ClipObjective<T>> {
    if new_logprobs.len() != old_logprobs.len() || new_logprobs.len() != advantages.len() {
        return invalid("clip objective inputs differ in solution count");
    }
    let n = T::from_usize_lossy(new_logprobs.len().max(1));
    let mut value = T::zero();
    let mut clipped_tokens = 0;
    let mut dlogp = Vec::with_capacity(new_logprobs.len());
    for ((new, old), adv) in new_logprobs.iter().zip(old_logprobs).zip(advantages) {
        if new.len() != old.len() || new.len() != adv.len() {
            return invalid("clip objective inputs differ in token count");
        }
        let len = T::from_usize_lossy(new.len().max(1));
        let mut grads = Vec::with_capacity(new.len());
        for ((&lp, &olp), &a) in new.iter().zip(old).zip(adv) {
            let ratio = (lp - olp).exp();
            let clipped = ratio.max(T::one() - epsilon).min(T::one() + epsilon);
            let (unclipped_term, clipped_term) = (ratio * a, clipped * a);
            if unclipped_term <= clipped_term {
                value += unclipped_term / (len * n);
                grads.push(unclipped_term / (len * n));
            } else {
                value += clipped_term / (len * n);
                grads.push(T::zero());
                clipped_tokens += 1;
            }
        }
        dlogp.push(grads);
    }
    Ok(ClipObjective { value, dlogp, clipped_tokens })
}

/// Clipped objective evaluated through the policy, with its gradient w.r.t. `W`.
pub fn clip_objective_and_grad<T: Scalar>(
    policy: &Policy<T>,
    episodes: &[Episode<T>],
    advantages: &[Vec<T>],
    epsilon: T,
) -> Result<(T, Vec<T>, usize)> {
    let per_token: Vec<Vec<(T, RowGrad<T>)>> = episodes
        .par_iter()
        .map(|ep| contexts(&ep.task.prompt, &ep.solution).map(|(ctx, tok)| policy.logprob_and_grad(&ctx, tok)).collect())
        .collect();
    let new: Vec<Vec<T>> = per_token.iter().map(|v| v.iter().map(|(lp, _)| *lp).collect()).collect();
    let old: Vec<Vec<T>> = episodes.iter().map(|e| e.old_logprobs.clone()).collect();
    let obj = ppo_clip_objective(&new, &old, advantages, epsilon)?;
    let mut grad = vec![T::zero(); policy.weights.len()];
    for (tokens, coeffs) in per_token.iter().zip(&obj.dlogp) {
        for ((_, g), &c) in tokens.iter().zip(coeffs) {
            if c != T::zero() {
                g.add_to(&mut grad, c);
            }
        }
    }
    Ok((obj.value, grad, obj.clipped_tokens))
}

/// Mean per-solution, per-token exact KL to the reference, with gradient.
pub fn kl_penalty_and_grad<T: Scalar>(
    policy: &Policy<T>,
    reference: &Reference<T>,
    episodes: &[Episode<T>],
) -> (T, Vec<T>) {
    let per_token: Vec<Vec<(T, RowGrad<T>)>> = episodes
        .par_iter()
        .map(|ep| contexts(&ep.task.prompt, &ep.solution).map(|(ctx, _)| policy.kl_to_ref(reference, &ctx)).collect())
        .collect();
    let n = T::from_usize_lossy(episodes.len().max(1));
    let mut value = T::zero();
    let mut grad = vec![T::zero(); policy.weights.len()];
    for tokens in &per_token {
        let scale = T::one() / (T::from_usize_lossy(tokens.len().max(1)) * n);
        for (kl, g) in tokens {
            value += *kl * scale;
            g.add_to(&mut grad, scale);
        }
    }
    (value, grad)
}

/// Mean negative log-likelihood of the label token after VERIFY, with gradient.
pub fn verification_loss<T: Scalar>(policy: &Policy<T>, batch: &[VerificationExample]) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return invalid("verification batch is empty");
    }
    let per_example: Vec<(T, RowGrad<T>)> =
        batch.par_iter().map(|ex| policy.logprob_and_grad(&ex.input, ex.label)).collect();
    let n = T::from_usize_lossy(batch.len());
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); policy.weights.len()];
    for (lp, g) in &per_example {
        loss -= *lp / n;
        g.add_to(&mut grad, -T::one() / n);
    }
    Ok((loss, grad))
}

/// Loss of a separate verifier head on a balanced batch: log-loss through a
/// sigmoid for BCE, half squared error against {0, 1} for REG.
pub fn head_loss<T: Scalar>(policy: &Policy<T>, head: Head, batch: &[VerificationExample]) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return invalid("verification batch is empty");
    }
    let weights = policy.head(head).ok_or_else(|| Error::InvalidArgument(format!("policy lacks {head:?} head")))?;
    let n = T::from_usize_lossy(batch.len());
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); weights.len()];
    for ex in batch {
        let phi = policy.features(&ex.input);
        let z: T = phi.indices.iter().map(|&f| weights[f]).sum();
        let y = if ex.label == Token::YES { T::one() } else { T::zero() };
        let (l, dz) = match head {
            Head::Bce => {
                let p = sigmoid(z);
                let tiny = T::lit(1e-12);
                (-(y * (p + tiny).ln() + (T::one() - y) * (T::one() - p + tiny).ln()), p - y)
            }
            _ => ((z - y) * (z - y) * T::lit(0.5), z - y),
        };
        loss += l / n;
        add_features(&mut grad, &phi, dz / n);
    }
    Ok((loss, grad))
}

/// Half mean squared error of the value head against the episode return on
/// every prefix state `x ⊕ y_<t`, `t = 0..=|y|`.
pub fn value_loss<T: Scalar>(policy: &Policy<T>, episodes: &[Episode<T>]) -> (T, Vec<T>) {
    let Some(head) = policy.value_head.as_ref() else {
        return (T::zero(), Vec::new());
    };
    let mut grad = vec![T::zero(); head.len()];
    let mut loss = T::zero();
    let states: usize = episodes.iter().map(|e| e.solution.len() + 1).sum();
    let n = T::from_usize_lossy(states.max(1));
    for ep in episodes {
        let target = T::from_u8(ep.reward).unwrap();
        for t in 0..=ep.solution.len() {
            let ctx = [ep.task.prompt.as_slice(), &ep.solution[..t]].concat();
            let phi = policy.features(&ctx);
            let err = phi.indices.iter().map(|&f| head[f]).sum::<T>() - target;
            loss += err * err * T::lit(0.5) / n;
            add_features(&mut grad, &phi, err / n);
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepMetrics {
    pub rl_objective: f64,
    pub mean_kl: f64,
    pub verification_loss: f64,
    pub head_loss: f64,
    pub value_loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub verification_skipped: bool,
    pub zero_variance_groups: usize,
    pub clipped_tokens: usize,
}

fn group_rewards<T: Scalar>(episodes: &[Episode<T>], group_size: usize) -> Result<Vec<Vec<T>>> {
    if episodes.is_empty() || !episodes.len().is_multiple_of(group_size) {
        return invalid(format!("{} episodes do not form groups of {group_size}", episodes.len()));
    }
    episodes
        .chunks(group_size)
        .map(|group| {
            let id = group[0].group_id;
            if group.iter().any(|e| e.group_id != id || e.task != group[0].task) {
                return invalid(format!("group {id} mixes episodes from different prompts"));
            }
            Ok(group.iter().map(|e| T::from_u8(e.reward).unwrap()).collect())
        })
        .collect()
}

/// Per-token advantages for every episode under the configured method.
/// `advantage_seed` feeds the VinePPO rollouts (one stream per episode).
pub fn compute_advantages<T: Scalar>(
    policy: &Policy<T>,
    episodes: &[Episode<T>],
    config: &RunConfig,
    advantage_seed: u64,
) -> Result<(Vec<Vec<T>>, usize)> {
    let broadcast = |per_solution: Vec<T>| -> Vec<Vec<T>> {
        episodes.iter().zip(per_solution).map(|(e, a)| vec![a; e.solution.len()]).collect()
    };
    match config.method {
        Method::Grpo | Method::Rloo => {
            let groups = group_rewards(episodes, config.group_size)?;
            let uniform = groups.iter().filter(|g| g.iter().all(|&r| r == g[0])).count();
            let estimator = if config.method == Method::Grpo { grpo_advantages } else { rloo_advantages };
            let flat = groups.iter().map(|g| estimator(g)).collect::<Result<Vec<_>>>()?.concat();
            Ok((broadcast(flat), uniform))
        }
        Method::VinePpo => {
            let adv = episodes
                .par_iter()
                .enumerate()
                .map(|(i, ep)| {
                    if ep.solution.is_empty() {
                        return Ok(Vec::new());
                    }
                    let mut r = rng::stream(advantage_seed, &[i as u64]);
                    vineppo_advantages(
                        policy,
                        &ep.task,
                        &ep.solution,
                        T::from_u8(ep.reward).unwrap(),
                        config.vine_samples,
                        config.max_len,
                        config.decoding(),
                        &mut r,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((adv, 0))
        }
        Method::Ppo => {
            let (gamma, lambda) = (T::lit(config.gae_gamma), T::lit(config.gae_lambda));
            let adv = episodes
                .iter()
                .map(|ep| {
                    let n = ep.solution.len();
                    let mut values: Vec<T> = (0..n)
                        .map(|t| policy.value(&[ep.task.prompt.as_slice(), &ep.solution[..t]].concat()))
                        .collect();
                    values.push(T::zero());
                    let mut rewards = vec![T::zero(); n];
                    if let Some(last) = rewards.last_mut() {
                        *last = T::from_u8(ep.reward).unwrap();
                    }
                    gae_advantages(&rewards, &values, gamma, lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((adv, 0))
        }
    }
}

/// One iteration's update. `step_index` is 1-based so the final iteration
/// reaches the ramp ceiling when `ramp_fraction = 1`.
pub fn unified_step<T: Scalar>(
    policy: &mut Policy<T>,
    reference: &Reference<T>,
    episodes: &[Episode<T>],
    config: &RunConfig,
    step_index: usize,
) -> Result<StepMetrics> {
    let seed = rng::derive_seed(config.seed, &[STREAM_UPDATE, step_index as u64]);
    let (advantages, zero_variance_groups) = compute_advantages(policy, episodes, config, seed)?;
    let lr = ramp(step_index, config.total_iterations, config.lr_max, config.ramp_fraction);
    let head_lr = ramp(step_index, config.total_iterations, config.head_lr_max, config.ramp_fraction);
    let lambda = ramp(step_index, config.total_iterations, config.lambda_max, config.ramp_fraction);
    let verify_active = config.verifier_mode != VerifierMode::None && lambda > 0.0;
    let batch = if verify_active {
        build_verification_batch(episodes, &mut rng::stream(seed, &[1]))
    } else {
        VerificationBatch::default()
    };
    let mut metrics = StepMetrics {
        lambda,
        lr,
        verification_skipped: verify_active && batch.skipped,
        zero_variance_groups,
        ..StepMetrics::default()
    };
    let (lr_t, lambda_t, beta_t) = (T::lit(lr), T::lit(lambda), T::lit(config.beta));
    for epoch in 0..config.ppo_epochs {
        let (objective, mut direction, clipped) =
            clip_objective_and_grad(policy, episodes, &advantages, T::lit(config.clip_epsilon))?;
        let (kl, kl_grad) = if config.beta > 0.0 {
            kl_penalty_and_grad(policy, reference, episodes)
        } else {
            (T::zero(), Vec::new())
        };
        for (d, g) in direction.iter_mut().zip(&kl_grad) {
            *d -= beta_t * *g;
        }
        let mut grads = Gradient { weights: direction, ..Gradient::zeros(policy) };
        let mut ver_loss = T::zero();
        let mut aux_loss = T::zero();
        if verify_active && !batch.skipped {
            match config.verifier_mode {
                VerifierMode::Generative => {
                    let (loss, g) = verification_loss(policy, &batch.examples)?;
                    ver_loss = loss;
                    for (d, gv) in grads.weights.iter_mut().zip(&g) {
                        *d -= lambda_t * *gv;
                    }
                }
                VerifierMode::BceHead | VerifierMode::RegHead => {
                    let head = if config.verifier_mode == VerifierMode::BceHead { Head::Bce } else { Head::Reg };
                    let (loss, g) = head_loss(policy, head, &batch.examples)?;
                    aux_loss = loss;
                    *grads.head_mut(head) = g.into_iter().map(|x| -lambda_t * x).collect();
                }
                VerifierMode::None => {}
            }
        }
        let mut v_loss = T::zero();
        if policy.value_head.is_some() && config.method == Method::Ppo {
            let (loss, g) = value_loss(policy, episodes);
            v_loss = loss;
            grads.value = g.into_iter().map(|x| -x).collect();
        }
        apply_ascent(policy, &grads, lr_t, T::lit(head_lr));
        if epoch == 0 {
            metrics.rl_objective = objective.as_f64();
            metrics.mean_kl = kl.as_f64();
            metrics.verification_loss = ver_loss.as_f64();
            metrics.head_loss = aux_loss.as_f64();
            metrics.value_loss = v_loss.as_f64();
        }
        metrics.clipped_tokens += clipped;
    }
    if !policy.all_finite() {
        return Err(Error::Numeric(format!("non-finite parameters after step {step_index}")));
    }
    Ok(metrics)
}

fn apply_ascent<T: Scalar>(policy: &mut Policy<T>, grads: &Gradient<T>, lr: T, head_lr: T) {
    for (w, &g) in policy.weights.iter_mut().zip(&grads.weights) {
        *w += lr * g;
    }
    for head in [Head::Value, Head::Bce, Head::Reg] {
        let (g, lr) = match head {
            Head::Value => (&grads.value, head_lr),
            Head::Bce => (&grads.bce, lr),
            Head::Reg => (&grads.reg, head_lr),
        };
        if let Some(h) = policy.head_mut(head) {
            for (w, &gi) in h.iter_mut().zip(g) {
                *w += lr * gi;
            }
        }
    }
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_TASKS: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;
const STREAM_UPDATE: u64 = 4;
const STREAM_PROBE: u64 = 5;

/// Demonstration with each step value corrupted to a uniform digit w.p. `noise`.
/// Later steps build on the corrupted value, like a careless solver would.
pub fn noisy_demonstration(vocab: &Vocab, task: &TaskInstance, noise: f64, rng: &mut impl Rng) -> Vec<Token> {
    let chain = task.chain();
    let m = vocab.modulus();
    let mut running = chain.first % m;
    let mut out = Vec::with_capacity(2 * chain.steps.len() + 3);
    for &(op, d) in &chain.steps {
        let correct = op.apply(running, d, m);
        running = if rng.gen_bool(noise) { rng.gen_range(0..m) } else { correct };
        out.push(Token::digit(running));
        out.push(Token::STEP);
    }
    out.extend([Token::ANSWER, Token::digit(running), Token::EOS]);
    out
}

/// Builds the run's starting policy: zeros, then the supervised warm start.
pub fn initial_policy<T: Scalar>(config: &RunConfig) -> Result<Policy<T>> {
    config.validate()?;
    let vocab = config.vocab();
    let mut policy = Policy::zeros(vocab, config.feature_map(), config.heads());
    let pre = &config.pretrain;
    let lr = T::lit(pre.lr);
    for i in 0..pre.demos {
        let mut r = rng::stream(config.seed, &[STREAM_PRETRAIN, i as u64]);
        let difficulty = r.gen_range(1..=pre.max_difficulty.max(1));
        let task = generate_task(&vocab, difficulty, pre.domain, r.gen())?;
        let demo = noisy_demonstration(&vocab, &task, pre.noise, &mut r);
        for (ctx, tok) in contexts(&task.prompt, &demo) {
            let (_, g) = policy.logprob_and_grad(&ctx, tok);
            g.add_to(&mut policy.weights, lr);
        }
    }
    Ok(policy)
}

/// A logged episode with its iteration and verifier score at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedEpisode<T> {
    pub iteration: usize,
    pub episode: Episode<T>,
    pub verifier_score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub pass_at_1: f64,
    pub verifier_accuracy: f64,
    pub step: StepMetrics,
    pub skipped_total: usize,
    pub zero_variance_total: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts<T> {
    pub initial: Policy<T>,
    pub final_policy: Policy<T>,
    pub metrics: Vec<IterationMetrics>,
    pub episodes: Vec<LoggedEpisode<T>>,
}

/// Samples `group_size` solutions for each task with independent RNG streams.
pub fn rollouts<T: Scalar>(
    policy: &Policy<T>,
    tasks: &[TaskInstance],
    group_size: usize,
    max_len: usize,
    decoding: Decoding,
    seed: u64,
) -> Vec<Episode<T>> {
    let vocab = *policy.vocab();
    (0..tasks.len() * group_size)
        .into_par_iter()
        .map(|k| {
            let (j, g) = (k / group_size, k % group_size);
            let mut r = rng::stream(seed, &[j as u64, g as u64]);
            let task = &tasks[j];
            let (solution, old_logprobs) = policy.continue_from(&task.prompt, max_len, decoding, &mut r);
            Episode {
                reward: reward(&vocab, task, &solution),
                task: task.clone(),
                solution,
                old_logprobs,
                group_id: j,
            }
        })
        .collect()
}

pub fn sample_tasks(config: &RunConfig, stream: u64, iteration: usize, count: usize) -> Result<Vec<TaskInstance>> {
    let vocab = config.vocab();
    (0..count)
        .map(|j| {
            let seed = rng::derive_seed(config.seed, &[stream, iteration as u64, j as u64]);
            generate_task(&vocab, config.difficulty, config.domain, seed)
        })
        .collect()
}

/// A balanced probe: one sample per task, truncated to equal class counts.
pub fn build_probe<T: Scalar>(
    policy: &Policy<T>,
    tasks: &[TaskInstance],
    max_len: usize,
    decoding: Decoding,
    seed: u64,
) -> Vec<(TaskInstance, Vec<Token>, bool)> {
    let eps = rollouts(policy, tasks, 1, max_len, decoding, seed);
    balance(eps.into_iter().map(|e| (e.task, e.solution, e.reward == 1)).collect())
}

pub fn balance(items: Vec<(TaskInstance, Vec<Token>, bool)>) -> Vec<(TaskInstance, Vec<Token>, bool)> {
    let pos = items.iter().filter(|i| i.2).count();
    let keep = pos.min(items.len() - pos);
    let (mut p, mut n) = (0, 0);
    items
        .into_iter()
        .filter(|i| {
            let slot = if i.2 { &mut p } else { &mut n };
            *slot += 1;
            *slot <= keep
        })
        .collect()
}

/// Verifier accuracy on a balanced probe; NaN when the probe is empty.
pub fn probe_accuracy<T: Scalar>(policy: &Policy<T>, scorer: Scorer, probe: &[(TaskInstance, Vec<Token>, bool)]) -> f64 {
    if probe.is_empty() {
        return f64::NAN;
    }
    let scores: Vec<f64> = probe.iter().map(|(t, s, _)| scorer.score(policy, t, s).as_f64()).collect();
    let labels: Vec<bool> = probe.iter().map(|p| p.2).collect();
    verifier_accuracy(&scores, &labels, scorer.is_bounded()).unwrap_or(f64::NAN)
}

/// Mean correctness of `samples` draws per task.
pub fn pass_at_1<T: Scalar>(
    policy: &Policy<T>,
    tasks: &[TaskInstance],
    samples: usize,
    max_len: usize,
    decoding: Decoding,
    seed: u64,
) -> f64 {
    let eps = rollouts(policy, tasks, samples, max_len, decoding, seed);
    eps.iter().map(|e| e.reward as f64).sum::<f64>() / eps.len().max(1) as f64
}

pub fn train<T: Scalar>(config: &RunConfig) -> Result<RunArtifacts<T>> {
    train_with_observer(config, |_, _| {})
}

/// Runs training, calling `observe(iteration, &policy)` after every update.
pub fn train_with_observer<T: Scalar>(
    config: &RunConfig,
    mut observe: impl FnMut(usize, &Policy<T>),
) -> Result<RunArtifacts<T>> {
    let initial: Policy<T> = initial_policy(config)?;
    let reference = Reference::snapshot(&initial);
    let mut policy = initial.clone();
    let scorer = config.native_scorer();
    let mut metrics = Vec::with_capacity(config.total_iterations);
    let mut log = Vec::new();
    let (mut skipped_total, mut zero_variance_total) = (0, 0);
    for it in 0..config.total_iterations {
        let tasks = sample_tasks(config, STREAM_TASKS, it, config.batch_prompts)?;
        let rollout_seed = rng::derive_seed(config.seed, &[STREAM_ROLLOUT, it as u64]);
        let episodes = rollouts(&policy, &tasks, config.group_size, config.max_len, config.decoding(), rollout_seed);
        let pass = episodes.iter().map(|e| e.reward as f64).sum::<f64>() / episodes.len() as f64;
        for ep in &episodes {
            log.push(LoggedEpisode {
                iteration: it,
                verifier_score: scorer.score(&policy, &ep.task, &ep.solution),
                episode: ep.clone(),
            });
        }
        let step = unified_step(&mut policy, &reference, &episodes, config, it + 1)?;
        skipped_total += usize::from(step.verification_skipped);
        zero_variance_total += step.zero_variance_groups;
        let probe_tasks = sample_tasks(config, STREAM_PROBE, it, config.probe_tasks)?;
        let probe_seed = rng::derive_seed(config.seed, &[STREAM_PROBE, it as u64, u64::MAX]);
        let probe = build_probe(&policy, &probe_tasks, config.max_len, config.decoding(), probe_seed);
        metrics.push(IterationMetrics {
            iteration: it,
            pass_at_1: pass,
            verifier_accuracy: probe_accuracy(&policy, scorer, &probe),
            step,
            skipped_total,
            zero_variance_total,
        });
        observe(it, &policy);
    }
    Ok(RunArtifacts { initial, final_policy: policy, metrics, episodes: log })
}

/// The plain RL update of the configured method: clipped surrogate, KL
/// penalty and, for PPO, value regression. No verification term exists here.
pub fn base_rl_step<T: Scalar>(
    policy: &mut Policy<T>,
    reference: &Reference<T>,
    episodes: &[Episode<T>],
    config: &RunConfig,
    step_index: usize,
) -> Result<()> {
    let seed = rng::derive_seed(config.seed, &[STREAM_UPDATE, step_index as u64]);
    let (advantages, _) = compute_advantages(policy, episodes, config, seed)?;
    let lr = T::lit(ramp(step_index, config.total_iterations, config.lr_max, config.ramp_fraction));
    let head_lr = T::lit(ramp(step_index, config.total_iterations, config.head_lr_max, config.ramp_fraction));
    for _ in 0..config.ppo_epochs {
        let (_, mut grad, _) = clip_objective_and_grad(policy, episodes, &advantages, T::lit(config.clip_epsilon))?;
        if config.beta > 0.0 {
            let (_, kl_grad) = kl_penalty_and_grad(policy, reference, episodes);
            for (g, k) in grad.iter_mut().zip(&kl_grad) {
                *g -= T::lit(config.beta) * *k;
            }
        }
        let value_grad = (config.method == Method::Ppo).then(|| value_loss(policy, episodes).1);
        for (w, g) in policy.weights.iter_mut().zip(&grad) {
            *w += lr * *g;
        }
        if let (Some(head), Some(g)) = (policy.value_head.as_mut(), value_grad) {
            for (w, gi) in head.iter_mut().zip(&g) {
                *w += head_lr * -*gi;
            }
        }
    }
    Ok(())
}

/// The base RL loop: same task and rollout streams as [`train`], base update
/// only, no logging or probing.
pub fn train_base_with_observer<T: Scalar>(config: &RunConfig, mut observe: impl FnMut(usize, &Policy<T>)) -> Result<Policy<T>> {
    let mut policy: Policy<T> = initial_policy(config)?;
    let reference = Reference::snapshot(&policy);
    for it in 0..config.total_iterations {
        let tasks = sample_tasks(config, STREAM_TASKS, it, config.batch_prompts)?;
        let rollout_seed = rng::derive_seed(config.seed, &[STREAM_ROLLOUT, it as u64]);
        let episodes = rollouts(&policy, &tasks, config.group_size, config.max_len, config.decoding(), rollout_seed);
        base_rl_step(&mut policy, &reference, &episodes, config, it + 1)?;
        observe(it, &policy);
    }
    Ok(policy)
}

/// Held-out tasks from a stream disjoint from training and probing.
pub fn heldout_tasks(config: &RunConfig, difficulty: u32, domain: Domain, count: usize, salt: u64) -> Result<Vec<TaskInstance>> {
    let vocab = config.vocab();
    (0..count)
        .map(|j| generate_task(&vocab, difficulty, domain, rng::derive_seed(config.seed, &[0xE7A1, salt, j as u64])))
        .collect()
}
