//! Solution scoring under each verifier variant.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::policy::{Decoding, Head, Policy};
use crate::scalar::{sigmoid, Scalar};
use crate::task::{extract_answer, make_verification_input, TaskInstance, Token};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSolution<T> {
    pub solution: Vec<Token>,
    pub answer: Option<u32>,
    pub score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueAggregation {
    Mean,
    Last,
}

/// A verifier variant. Generative and BCE scores lie in `[0, 1]`; the REG head
/// and PPO value scores are unbounded ranking scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Generative,
    BceHead,
    RegHead,
    PpoValue(ValueAggregation),
}

impl Scorer {
    pub fn is_bounded(self) -> bool {
        matches!(self, Scorer::Generative | Scorer::BceHead)
    }

    pub fn score<T: Scalar>(self, policy: &Policy<T>, task: &TaskInstance, solution: &[Token]) -> T {
        match self {
            Scorer::Generative => score_generative(policy, task, solution),
            Scorer::BceHead => score_bce_head(policy, task, solution),
            Scorer::RegHead => score_reg_head(policy, task, solution),
            // An empty solution has no positions to aggregate; rank it as a zero value.
            Scorer::PpoValue(mode) => score_ppo_value(policy, task, solution, mode).unwrap_or_else(|_| T::zero()),
        }
    }
}

/// `π(YES | x ⊕ y ⊕ VERIFY)` over the full vocabulary, not renormalized.
pub fn score_generative<T: Scalar>(policy: &Policy<T>, task: &TaskInstance, solution: &[Token]) -> T {
    let input = make_verification_input(task, solution);
    policy.logprob(&input, Token::YES).exp()
}

pub fn score_bce_head<T: Scalar>(policy: &Policy<T>, task: &TaskInstance, solution: &[Token]) -> T {
    sigmoid(policy.head_output(Head::Bce, &make_verification_input(task, solution)))
}

pub fn score_reg_head<T: Scalar>(policy: &Policy<T>, task: &TaskInstance, solution: &[Token]) -> T {
    policy.head_output(Head::Reg, &make_verification_input(task, solution))
}

/// Value head evaluated after each solution token, aggregated by mean or last.
pub fn score_ppo_value<T: Scalar>(
    policy: &Policy<T>,
    task: &TaskInstance,
    solution: &[Token],
    mode: ValueAggregation,
) -> Result<T> {
    if solution.is_empty() {
        return invalid("value scoring needs a non-empty solution");
    }
    let mut context = task.prompt.clone();
    let mut values = Vec::with_capacity(solution.len());
    for &tok in solution {
        context.push(tok);
        values.push(policy.value(&context));
    }
    Ok(match mode {
        ValueAggregation::Mean => crate::scalar::mean(&values),
        ValueAggregation::Last => *values.last().unwrap(),
    })
}

/// Fraction of probe items whose thresholded score agrees with the label.
/// Bounded scores use 0.5; unbounded scores use the probe median.
pub fn verifier_accuracy(scores: &[f64], labels: &[bool], bounded: bool) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid("scores and labels differ in length");
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if scores.is_empty() || positives * 2 != labels.len() {
        return invalid(format!(
            "probe must be non-empty and balanced, got {positives} correct of {}",
            labels.len()
        ));
    }
    let threshold = if bounded { 0.5 } else { median(scores) };
    let agree = scores.iter().zip(labels).filter(|(&s, &l)| (s > threshold) == l).count();
    Ok(agree as f64 / labels.len() as f64)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Samples `n` solutions from `generator` and scores them generatively under `verifier`.
pub fn cross_score<T: Scalar>(
    verifier: &Policy<T>,
    generator: &Policy<T>,
    task: &TaskInstance,
    n: usize,
    max_len: usize,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> Result<Vec<ScoredSolution<T>>> {
    if n == 0 {
        return invalid("cross scoring needs at least one sample");
    }
    (0..n)
        .map(|_| {
            let (solution, _) = generator.sample_solution(&task.prompt, max_len, decoding, rng)?;
            Ok(ScoredSolution {
                answer: extract_answer(generator.vocab(), &solution),
                score: score_generative(verifier, task, &solution),
                solution,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;
    use crate::policy::HeadSet;
    use crate::rng;
    use crate::task::{generate_task, parse_tokens, Domain, Vocab};

    fn setup() -> (Policy<f64>, TaskInstance) {
        let p = Policy::zeros(Vocab::default(), FeatureMap::Structured { width: 3, gain: 1 }, HeadSet::ALL);
        let t = generate_task(&Vocab::default(), 2, Domain::AddOnly, 3).unwrap();
        (p, t)
    }

    fn set_verify_logit(p: &mut Policy<f64>, t: &TaskInstance, sol: &[Token], tok: Token, z: f64) {
        let ctx = make_verification_input(t, sol);
        let phi = p.features(&ctx);
        let each = z / phi.len() as f64;
        for &f in &phi.indices {
            p.weights[f * Vocab::SIZE + tok.id()] += each;
        }
    }

    #[test]
    fn uniform_generative_score() {
        let (p, t) = setup();
        let s = score_generative(&p, &t, &parse_tokens("1 STEP").unwrap());
        assert!((s - 1.0 / Vocab::SIZE as f64).abs() < 1e-15);
    }

    #[test]
    fn generative_hand_softmax_and_saturation() {
        let (mut p, t) = setup();
        let sol = parse_tokens("4 STEP 9 STEP ANSWER 9 EOS").unwrap();
        // P(YES) = e^z / (e^z + 21) = 0.7  =>  z = ln(0.7 * 21 / 0.3)
        set_verify_logit(&mut p, &t, &sol, Token::YES, (0.7f64 * 21.0 / 0.3).ln());
        assert!((score_generative(&p, &t, &sol) - 0.7).abs() < 1e-12);
        set_verify_logit(&mut p, &t, &sol, Token::YES, 800.0);
        assert!((score_generative(&p, &t, &sol) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_head_scores() {
        let (mut p, t) = setup();
        let sol = parse_tokens("5 EOS").unwrap();
        assert_eq!(score_bce_head(&p, &t, &sol), 0.5);
        let phi = p.features(&make_verification_input(&t, &sol));
        let head = p.bce_head.as_mut().unwrap();
        for &f in &phi.indices {
            head[f] += 2.0 / phi.len() as f64;
        }
        assert!((score_bce_head(&p, &t, &sol) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn ppo_value_aggregation() {
        let (mut p, t) = setup();
        let sol = parse_tokens("3 STEP 7").unwrap();
        assert!(score_ppo_value(&p, &t, &[], ValueAggregation::Mean).is_err());
        assert_eq!(score_ppo_value(&p, &t, &sol, ValueAggregation::Mean).unwrap(), 0.0);
        // Put the target values on the most recent window token, which is unique per position.
        let targets = [0.2, 0.4, 0.9];
        let map = p.feature_map();
        for (i, &target) in targets.iter().enumerate() {
            let mut ctx = t.prompt.clone();
            ctx.extend_from_slice(&sol[..=i]);
            let newest = *map.features(&ctx).indices.get(2).unwrap();
            p.value_head.as_mut().unwrap()[newest] = target;
        }
        let mean = score_ppo_value(&p, &t, &sol, ValueAggregation::Mean).unwrap();
        let last = score_ppo_value(&p, &t, &sol, ValueAggregation::Last).unwrap();
        assert!((mean - 0.5).abs() < 1e-12 && (last - 0.9).abs() < 1e-12);
    }

    #[test]
    fn accuracy_threshold_semantics() {
        let labels = [true, false, true, false];
        let perfect = [0.9, 0.1, 0.8, 0.3];
        assert_eq!(verifier_accuracy(&perfect, &labels, true).unwrap(), 1.0);
        let anti: Vec<f64> = perfect.iter().map(|s| 1.0 - s).collect();
        assert_eq!(verifier_accuracy(&anti, &labels, true).unwrap(), 0.0);
        // Unbounded: median threshold.
        assert_eq!(verifier_accuracy(&[5.0, -3.0, 4.0, 1.0], &labels, false).unwrap(), 1.0);
        assert!(verifier_accuracy(&[0.1, 0.2], &[true, true], true).is_err());
        assert!(verifier_accuracy(&[], &[], true).is_err());
    }

    #[test]
    fn random_scorer_is_chance() {
        let mut r = rng::stream(4, &[]);
        let n = 20_000;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.gen()).collect();
        let acc = verifier_accuracy(&scores, &labels, true).unwrap();
        assert!((acc - 0.5).abs() < 0.02, "{acc}");
    }

    #[test]
    fn cross_score_identity_and_determinism() {
        let (p, t) = setup();
        let mut r1 = rng::stream(8, &[]);
        let mut r2 = rng::stream(8, &[]);
        let a = cross_score(&p, &p, &t, 5, 8, Decoding::Temperature(1.0), &mut r1).unwrap();
        let b = cross_score(&p, &p, &t, 5, 8, Decoding::Temperature(1.0), &mut r2).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.score, score_generative(&p, &t, &s.solution));
        }
        assert_eq!(cross_score(&p, &p, &t, 1, 8, Decoding::Greedy, &mut r1).unwrap().len(), 1);
        assert!(cross_score(&p, &p, &t, 0, 8, Decoding::Greedy, &mut r1).is_err());
    }

    mod props {
        use super::{make_verification_input, score_generative, setup, verifier_accuracy, Decoding, Token};
        use crate::rng;
        use rand::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn complement_accuracies_sum_to_one(scores in proptest::collection::vec(0.0f64..1.0, 1..40)) {
                let scores: Vec<f64> = scores.iter().chain(scores.iter()).map(|s| (s * 1e6).round() / 1e6 + 1e-9).collect();
                let labels: Vec<bool> = (0..scores.len()).map(|i| i < scores.len() / 2).collect();
                prop_assume!(scores.iter().all(|&s| s != 0.5));
                let comp: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
                let a = verifier_accuracy(&scores, &labels, true).unwrap();
                let b = verifier_accuracy(&comp, &labels, true).unwrap();
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }

            #[test]
            fn generative_score_is_probability(seed: u64) {
                let (mut p, t) = setup();
                let mut r = rng::stream(seed, &[]);
                p.weights.iter_mut().for_each(|w| *w = r.gen_range(-4.0..4.0));
                let (sol, _) = p.sample_solution(&t.prompt, 10, Decoding::Temperature(1.0), &mut r).unwrap();
                let s = score_generative(&p, &t, &sol);
                let d = p.next_token_dist(&make_verification_input(&t, &sol)).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!((s - d[Token::YES.id()]).abs() < 1e-12);
            }
        }
    }
}
