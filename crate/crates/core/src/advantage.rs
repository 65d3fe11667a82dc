//! Advantage estimators: group-normalized (GRPO), leave-one-out, Monte-Carlo
//! value differences (VinePPO) and GAE over a learned value head.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::policy::{Decoding, Policy};
use crate::scalar::Scalar;
use crate::task::{reward, TaskInstance, Token};

/// Added to the group standard deviation so uniform groups map to zero.
pub const GRPO_STD_EPS: f64 = 1e-8;

/// `(r_i - mean) / (population_std + ε)`.
pub fn grpo_advantages<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return invalid(format!("GRPO needs a group of at least 2, got {}", rewards.len()));
    }
    let n = T::from_usize_lossy(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let denom = var.sqrt() + T::lit(GRPO_STD_EPS);
    Ok(rewards.iter().map(|&r| (r - mean) / denom).collect())
}

/// `r_i - mean of the other K-1 rewards`.
pub fn rloo_advantages<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return invalid(format!("leave-one-out needs at least 2 samples, got {}", rewards.len()));
    }
    let total: T = rewards.iter().copied().sum();
    let others = T::from_usize_lossy(rewards.len() - 1);
    Ok(rewards.iter().map(|&r| r - (total - r) / others).collect())
}

/// Generalized advantage estimation. `values` has one more entry than
/// `token_rewards`; the final entry is the bootstrap value after the last token.
pub fn gae_advantages<T: Scalar>(token_rewards: &[T], values: &[T], gamma: T, lambda: T) -> Result<Vec<T>> {
    if values.len() != token_rewards.len() + 1 {
        return invalid(format!(
            "GAE needs {} values for {} rewards, got {}",
            token_rewards.len() + 1,
            token_rewards.len(),
            values.len()
        ));
    }
    let mut out = vec![T::zero(); token_rewards.len()];
    let mut running = T::zero();
    for t in (0..token_rewards.len()).rev() {
        let delta = token_rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        out[t] = running;
    }
    Ok(out)
}

/// Monte-Carlo value of the state `prompt ⊕ partial`: mean reward of `samples`
/// completions drawn from the current policy. Terminal states (ending in EOS or
/// already at `max_len`) are scored as they are.
pub fn vineppo_value<T: Scalar>(
    policy: &Policy<T>,
    task: &TaskInstance,
    partial: &[Token],
    samples: usize,
    max_len: usize,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> T {
    let vocab = policy.vocab();
    if partial.last() == Some(&Token::EOS) || partial.len() >= max_len || samples == 0 {
        return T::from_u8(reward(vocab, task, partial)).unwrap();
    }
    let mut context = task.prompt.clone();
    context.extend_from_slice(partial);
    let budget = max_len - partial.len();
    let mut hits = 0usize;
    let mut full = partial.to_vec();
    for _ in 0..samples {
        let (tail, _) = policy.continue_from(&context, budget, decoding, rng);
        full.truncate(partial.len());
        full.extend_from_slice(&tail);
        hits += reward(vocab, task, &full) as usize;
    }
    T::from_usize_lossy(hits) / T::from_usize_lossy(samples)
}

/// Per-token `Â_t = r_t + V̂(s_{t+1}) - V̂(s_t)` with outcome-only reward on the
/// final token and `V̂ = 0` after it.
#[allow(clippy::too_many_arguments)]
pub fn vineppo_advantages<T: Scalar>(
    policy: &Policy<T>,
    task: &TaskInstance,
    solution: &[Token],
    final_reward: T,
    samples: usize,
    max_len: usize,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    if solution.is_empty() {
        return invalid("VinePPO advantages need a non-empty solution");
    }
    let n = solution.len();
    let mut values: Vec<T> = (0..n)
        .map(|t| vineppo_value(policy, task, &solution[..t], samples, max_len, decoding, rng))
        .collect();
    values.push(T::zero());
    Ok((0..n)
        .map(|t| {
            let r = if t + 1 == n { final_reward } else { T::zero() };
            r + values[t + 1] - values[t]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;
    use crate::policy::HeadSet;
    use crate::rng;
    use crate::task::{parse_tokens, Vocab};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grpo_hand_statistics() {
        let a = grpo_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(close(&a, &[1.0, -1.0, -1.0, 1.0], 1e-6));
        assert_eq!(grpo_advantages(&[1.0f64, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert!(grpo_advantages(&[1.0f64]).is_err());
    }

    #[test]
    fn rloo_hand_values() {
        assert!(close(&rloo_advantages(&[1.0, 0.0, 0.0]).unwrap(), &[1.0, -0.5, -0.5], 1e-15));
        assert_eq!(rloo_advantages(&[0.3f64; 4]).unwrap(), vec![0.0; 4]);
        assert!(rloo_advantages::<f64>(&[]).is_err());
    }

    #[test]
    fn gae_reductions() {
        let r = [0.0, 0.5, 1.0];
        let v = [0.2, 0.5, 0.9, 0.0];
        let one_step = gae_advantages(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(one_step[t], r[t] + 0.9 * v[t + 1] - v[t]);
        }
        let mc = gae_advantages(&r, &v, 1.0, 1.0).unwrap();
        for t in 0..3 {
            let ret: f64 = r[t..].iter().sum();
            assert!((mc[t] - (ret - v[t])).abs() < 1e-12);
        }
        assert!(gae_advantages(&r, &v[..3], 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_golden_direct_sum() {
        // δ = [0.3, 0.4, 0.1]; Â_t = Σ_l 0.5^l δ_{t+l}
        let a = gae_advantages(&[0.0, 0.0, 1.0], &[0.2, 0.5, 0.9, 0.0], 1.0, 0.5).unwrap();
        assert!(close(&a, &[0.525, 0.45, 0.1], 1e-12), "{a:?}");
    }

    /// Deterministic toy: after SEP always ANSWER, then digit 7 w.p. `p7`
    /// (else 5), then EOS.
    fn branching_policy(p7: f64) -> (Policy<f64>, TaskInstance) {
        let vocab = Vocab::default();
        let map = FeatureMap::Window { width: 1 };
        let mut p = Policy::zeros(vocab, map, HeadSet::NONE);
        let v = Vocab::SIZE;
        let mut set_row = |last: Token, logits: &[(Token, f64)]| {
            let f = map.features(&[last]).indices[0];
            for c in 0..v {
                p.weights[f * v + c] = -60.0;
            }
            for &(t, z) in logits {
                p.weights[f * v + t.id()] = z;
            }
        };
        set_row(Token::SEP, &[(Token::ANSWER, 0.0)]);
        set_row(Token::ANSWER, &[(Token::digit(7), (p7 / (1.0 - p7)).ln()), (Token::digit(5), 0.0)]);
        set_row(Token::digit(7), &[(Token::EOS, 0.0)]);
        set_row(Token::digit(5), &[(Token::EOS, 0.0)]);
        let task = TaskInstance::from_prompt(parse_tokens("3 + 4 SEP").unwrap(), &vocab).unwrap();
        (p, task)
    }

    /// Exact expected reward of a state by enumerating every continuation.
    fn exact_value(p: &Policy<f64>, task: &TaskInstance, partial: &[Token], max_len: usize) -> f64 {
        if partial.last() == Some(&Token::EOS) || partial.len() >= max_len {
            return reward(p.vocab(), task, partial) as f64;
        }
        let ctx = [task.prompt.as_slice(), partial].concat();
        let dist = p.next_token_dist(&ctx).unwrap();
        dist.iter()
            .enumerate()
            .filter(|(_, &pr)| pr > 1e-15)
            .map(|(c, &pr)| {
                let next = [partial, &[Token(c as u8)]].concat();
                pr * exact_value(p, task, &next, max_len)
            })
            .sum()
    }

    #[test]
    fn vineppo_value_bernoulli() {
        let (p, task) = branching_policy(0.75);
        let mut r = rng::stream(11, &[]);
        let v: f64 = vineppo_value(&p, &task, &[], 10_000, 8, Decoding::Temperature(1.0), &mut r);
        assert!((v - 0.75).abs() < 0.02, "{v}");
        assert!((exact_value(&p, &task, &[], 8) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn vineppo_terminal_state() {
        let (p, task) = branching_policy(0.5);
        let done = parse_tokens("ANSWER 7 EOS").unwrap();
        let mut r = rng::stream(0, &[]);
        assert_eq!(vineppo_value::<f64>(&p, &task, &done, 4, 8, Decoding::Temperature(1.0), &mut r), 1.0);
        let wrong = parse_tokens("ANSWER 5 EOS").unwrap();
        assert_eq!(vineppo_value::<f64>(&p, &task, &wrong, 4, 8, Decoding::Temperature(1.0), &mut r), 0.0);
    }

    #[test]
    fn vineppo_deterministic_policy_has_no_surprise() {
        let (p, task) = branching_policy(0.999_999_999);
        let mut r = rng::stream(1, &[]);
        let sol = parse_tokens("ANSWER 7 EOS").unwrap();
        let a: Vec<f64> = vineppo_advantages(&p, &task, &sol, 1.0, 16, 8, Decoding::Greedy, &mut r).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        assert!(vineppo_advantages::<f64>(&p, &task, &[], 1.0, 4, 8, Decoding::Greedy, &mut r).is_err());
    }

    #[test]
    fn vineppo_telescopes_and_matches_enumeration() {
        let (p, task) = branching_policy(0.75);
        let sol = parse_tokens("ANSWER 5 EOS").unwrap();
        let mut r = rng::stream(5, &[]);
        let k = 10_000;
        let a: Vec<f64> = vineppo_advantages(&p, &task, &sol, 0.0, k, 8, Decoding::Temperature(1.0), &mut r).unwrap();
        let mut exact_v: Vec<f64> = (0..sol.len()).map(|t| exact_value(&p, &task, &sol[..t], 8)).collect();
        exact_v.push(0.0);
        let exact_a: Vec<f64> = (0..sol.len())
            .map(|t| exact_v[t + 1] - exact_v[t])
            .collect();
        // Two MC estimates per entry, each with sd ≤ 0.5/sqrt(K).
        let tol = 3.0 * 2.0 * 0.5 / (k as f64).sqrt();
        assert!(close(&a, &exact_a, tol), "{a:?} vs {exact_a:?}");
        // Σ Â = r - V̂(s_0); a fresh identical stream reproduces V̂(s_0).
        let mut r2 = rng::stream(5, &[]);
        let v0: f64 = vineppo_value(&p, &task, &[], k, 8, Decoding::Temperature(1.0), &mut r2);
        let sum: f64 = a.iter().sum();
        assert!((sum - (0.0 - v0)).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn centered_estimators_sum_to_zero(rs in proptest::collection::vec(-5.0f64..5.0, 2..32)) {
                let g = grpo_advantages(&rs).unwrap();
                let l = rloo_advantages(&rs).unwrap();
                prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
                prop_assert!(l.iter().sum::<f64>().abs() < 1e-9);
            }

            #[test]
            fn shift_invariance(rs in proptest::collection::vec(0.0f64..1.0, 2..16), c in -3.0f64..3.0) {
                let shifted: Vec<f64> = rs.iter().map(|r| r + c).collect();
                let (a, b) = (rloo_advantages(&rs).unwrap(), rloo_advantages(&shifted).unwrap());
                prop_assert!(close(&a, &b, 1e-12));
                let (a, b) = (grpo_advantages(&rs).unwrap(), grpo_advantages(&shifted).unwrap());
                prop_assert!(close(&a, &b, 1e-6));
            }

            #[test]
            fn grpo_scale_invariance(rs in proptest::collection::vec(0.0f64..1.0, 2..16), c in 0.5f64..10.0) {
                let scaled: Vec<f64> = rs.iter().map(|r| r * c).collect();
                let (a, b) = (grpo_advantages(&rs).unwrap(), grpo_advantages(&scaled).unwrap());
                let spread = rs.iter().cloned().fold(f64::MIN, f64::max) - rs.iter().cloned().fold(f64::MAX, f64::min);
                prop_assume!(spread > 1e-3);
                prop_assert!(close(&a, &b, 1e-4));
            }
        }
    }
}
