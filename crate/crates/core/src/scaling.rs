//! Test-time compute scaling: voting, Best-of-N, the unbiased Best-of-k
//! estimator, budget forcing and confidence-thresholded length selection.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::task::{Token, Vocab};
use crate::verifier::ScoredSolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Majority,
    BestOfN,
    Weighted,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Majority, Strategy::BestOfN, Strategy::Weighted];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Majority => "majority",
            Strategy::BestOfN => "best_of_n",
            Strategy::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(Strategy::Majority),
            "best_of_n" | "best-of-n" | "bon" => Ok(Strategy::BestOfN),
            "weighted" => Ok(Strategy::Weighted),
            other => invalid(format!("unknown strategy `{other}`")),
        }
    }
}

/// Result of a vote. `chosen == None` is the NO_ANSWER outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome<T> {
    pub chosen: Option<u32>,
    pub per_answer_mass: BTreeMap<u32, T>,
    pub strategy: Strategy,
}

struct Tally<T> {
    count: usize,
    score: T,
}

fn tally<T: Scalar>(solutions: &[ScoredSolution<T>]) -> Result<BTreeMap<u32, Tally<T>>> {
    if solutions.is_empty() {
        return invalid("cannot vote over an empty solution list");
    }
    let mut out: BTreeMap<u32, Tally<T>> = BTreeMap::new();
    for s in solutions {
        if let Some(a) = s.answer {
            let e = out.entry(a).or_insert(Tally { count: 0, score: T::zero() });
            e.count += 1;
            e.score += s.score;
        }
    }
    Ok(out)
}

/// Picks the best answer under `(primary, secondary)` descending, then the
/// smaller answer. BTreeMap iteration is ascending, so strict `>` keeps the
/// smallest answer among ties.
fn argmax<T: Scalar>(tallies: &BTreeMap<u32, Tally<T>>, key: impl Fn(&Tally<T>) -> (T, T)) -> Option<u32> {
    let mut best: Option<(u32, (T, T))> = None;
    for (&a, t) in tallies {
        let k = key(t);
        let better = match &best {
            None => true,
            Some((_, bk)) => k.0 > bk.0 || (k.0 == bk.0 && k.1 > bk.1),
        };
        if better {
            best = Some((a, k));
        }
    }
    best.map(|(a, _)| a)
}

/// Most frequent answer; ties go to the higher cumulative score, then the smaller answer.
pub fn majority_vote<T: Scalar>(solutions: &[ScoredSolution<T>]) -> Result<VoteOutcome<T>> {
    let tallies = tally(solutions)?;
    let chosen = argmax(&tallies, |t| (T::from_usize_lossy(t.count), t.score));
    Ok(VoteOutcome {
        chosen,
        per_answer_mass: tallies.iter().map(|(&a, t)| (a, T::from_usize_lossy(t.count))).collect(),
        strategy: Strategy::Majority,
    })
}

/// Answer with the largest summed score; ties go to the higher count, then the smaller answer.
pub fn weighted_vote<T: Scalar>(solutions: &[ScoredSolution<T>]) -> Result<VoteOutcome<T>> {
    let tallies = tally(solutions)?;
    let chosen = argmax(&tallies, |t| (t.score, T::from_usize_lossy(t.count)));
    Ok(VoteOutcome {
        chosen,
        per_answer_mass: tallies.iter().map(|(&a, t)| (a, t.score)).collect(),
        strategy: Strategy::Weighted,
    })
}

/// Index of the highest-scoring solution; the earliest wins ties.
pub fn best_of_n<T: Scalar>(solutions: &[ScoredSolution<T>]) -> Result<usize> {
    if solutions.is_empty() {
        return invalid("best-of-n over an empty solution list");
    }
    let mut best = 0;
    for (i, s) in solutions.iter().enumerate() {
        if s.score > solutions[best].score {
            best = i;
        }
    }
    Ok(best)
}

/// Correctness flags reordered by descending score, ties broken by original index.
pub fn sort_by_score<T: Scalar>(scores: &[T], correct: &[bool]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.into_iter().map(|i| correct[i]).collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return invalid(format!("k must be in 1..={n}, got {k}"));
    }
    Ok(())
}

/// Unbiased Best-of-k accuracy from `N` samples whose correctness flags are
/// sorted by descending verifier score:
/// `Σ_i C(N-i-1, k-1) α_i / C(N, k)`.
///
/// The binomial ratio is carried by the recurrence
/// `w_0 = k/N`, `w_{i+1} = w_i (N-i-k) / (N-i-1)`, which never overflows.
pub fn best_of_k_estimate<T: Scalar>(sorted_correct: &[bool], k: usize) -> Result<T> {
    let n = sorted_correct.len();
    check_k(n, k)?;
    let mut w = T::from_usize_lossy(k) / T::from_usize_lossy(n);
    let mut total = T::zero();
    for i in 0..=n - k {
        if sorted_correct[i] {
            total += w;
        }
        if i < n - k {
            w = w * T::from_usize_lossy(n - i - k) / T::from_usize_lossy(n - i - 1);
        }
    }
    Ok(total)
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Exact rational evaluation of the same estimator with big-integer binomials.
pub fn best_of_k_exact(sorted_correct: &[bool], k: usize) -> Result<BigRational> {
    let n = sorted_correct.len();
    check_k(n, k)?;
    let mut num = BigUint::zero();
    for (i, &a) in sorted_correct.iter().enumerate().take(n - k + 1) {
        if a {
            num += binomial(n - i - 1, k - 1);
        }
    }
    Ok(BigRational::new(num.into(), binomial(n, k).into()))
}

/// Token-level continuation interface shared by the built-in policy and remote backends.
pub trait Generator {
    fn generate(&mut self, prompt: &[Token], max_new: usize) -> Result<Vec<Token>>;
}

impl<F> Generator for F
where
    F: FnMut(&[Token], usize) -> Result<Vec<Token>>,
{
    fn generate(&mut self, prompt: &[Token], max_new: usize) -> Result<Vec<Token>> {
        self(prompt, max_new)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetSpec {
    pub budget: usize,
    pub buffer: usize,
    pub conclusion: Vec<Token>,
}

impl BudgetSpec {
    pub fn new(budget: usize, buffer: usize, conclusion: Vec<Token>) -> Result<Self> {
        if buffer == 0 || buffer >= budget {
            return invalid(format!("buffer must satisfy 0 < buffer < budget, got {buffer} / {budget}"));
        }
        Ok(BudgetSpec { budget, buffer, conclusion })
    }

    /// Default conclusion: the end-of-thinking marker followed by a separator.
    pub fn default_conclusion() -> Vec<Token> {
        vec![Token::END_THINK, Token::SEP]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetForced {
    pub tokens: Vec<Token>,
    pub exhausted: bool,
}

/// Keeps `tokens` up to and including the last STEP; everything if there is none.
pub fn truncate_to_last_step(tokens: &[Token]) -> &[Token] {
    match tokens.iter().rposition(|&t| t == Token::STEP) {
        Some(i) => &tokens[..=i],
        None => tokens,
    }
}

/// Two-phase generation under a total budget: draft up to `budget - buffer`
/// tokens, cut back to the last completed step, splice the conclusion tokens,
/// then continue with whatever budget remains.
pub fn budget_force(generator: &mut impl Generator, prompt: &[Token], spec: &BudgetSpec) -> Result<BudgetForced> {
    let mut draft = generator.generate(prompt, spec.budget - spec.buffer)?;
    draft.truncate(spec.budget - spec.buffer);
    let kept = truncate_to_last_step(&draft);
    let mut out: Vec<Token> = kept.iter().chain(&spec.conclusion).copied().collect();
    if out.len() >= spec.budget {
        out.truncate(spec.budget);
        return Ok(BudgetForced { tokens: out, exhausted: true });
    }
    let remaining = spec.budget - out.len();
    let continuation_prompt: Vec<Token> = prompt.iter().chain(&out).copied().collect();
    let mut tail = generator.generate(&continuation_prompt, remaining)?;
    tail.truncate(remaining);
    out.extend(tail);
    Ok(BudgetForced { tokens: out, exhausted: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    pub answer: Option<u32>,
    pub length_used: usize,
    pub confidence: f64,
    pub threshold_met: bool,
    pub solutions: Vec<ScoredSolution<f64>>,
}

/// Winning answer's mass over the total mass of answered solutions.
pub fn vote_confidence<T: Scalar>(outcome: &VoteOutcome<T>) -> f64 {
    let total: f64 = outcome.per_answer_mass.values().map(|m| m.as_f64()).sum();
    match outcome.chosen {
        Some(a) if total > 0.0 => outcome.per_answer_mass[&a].as_f64() / total,
        _ => 0.0,
    }
}

/// Walks the budget ladder until the weighted-vote confidence reaches `tau`.
/// Each rung uses buffer `min(buffer, L - 1)`.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_length_select(
    generator: &mut impl Generator,
    scorer: &mut impl FnMut(&[Token]) -> f64,
    vocab: &Vocab,
    prompt: &[Token],
    ladder: &[usize],
    buffer: usize,
    conclusion: &[Token],
    tau: f64,
    samples: usize,
) -> Result<AdaptiveOutcome> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("length ladder must be non-empty and strictly increasing");
    }
    if samples == 0 {
        return invalid("need at least one sample per rung");
    }
    let mut last = None;
    for &len in ladder {
        let spec = BudgetSpec::new(len, buffer.min(len.saturating_sub(1)).max(1), conclusion.to_vec())?;
        let solutions = (0..samples)
            .map(|_| {
                let forced = budget_force(generator, prompt, &spec)?;
                Ok(ScoredSolution {
                    answer: crate::task::extract_answer(vocab, &forced.tokens),
                    score: scorer(&forced.tokens),
                    solution: forced.tokens,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let vote = weighted_vote(&solutions)?;
        let confidence = vote_confidence(&vote);
        let outcome = AdaptiveOutcome {
            answer: vote.chosen,
            length_used: len,
            confidence,
            threshold_met: confidence >= tau,
            solutions,
        };
        if outcome.threshold_met {
            return Ok(outcome);
        }
        last = Some(outcome);
    }
    Ok(last.expect("ladder is non-empty"))
}

/// Samples for one task, with the ground truth used to mark correctness.
#[derive(Debug, Clone)]
pub struct TaskSamples<T> {
    pub ground_truth: u32,
    pub solutions: Vec<ScoredSolution<T>>,
}

impl<T: Scalar> TaskSamples<T> {
    pub fn correct(&self) -> Vec<bool> {
        self.solutions.iter().map(|s| s.answer == Some(self.ground_truth)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub n: usize,
    pub accuracy: f64,
    pub stderr: f64,
}

fn for_each_subset(n: usize, k: usize, trials: usize, rng: &mut impl Rng, mut f: impl FnMut(&[usize])) -> usize {
    let total = binomial(n, k);
    if total <= BigUint::from(trials) {
        // Enumerate every k-subset in lexicographic order.
        let mut idx: Vec<usize> = (0..k).collect();
        let mut count = 0;
        loop {
            f(&idx);
            count += 1;
            let mut i = k;
            while i > 0 && idx[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                return count;
            }
            idx[i - 1] += 1;
            for j in i..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    for _ in 0..trials {
        let mut idx = sample_indices(rng, n, k).into_vec();
        idx.sort_unstable();
        f(&idx);
    }
    trials
}

fn vote_accuracy<T: Scalar>(
    task: &TaskSamples<T>,
    n: usize,
    trials: usize,
    rng: &mut impl Rng,
    vote: fn(&[ScoredSolution<T>]) -> Result<VoteOutcome<T>>,
) -> f64 {
    let mut hits = 0usize;
    let mut subset = Vec::with_capacity(n);
    let count = for_each_subset(task.solutions.len(), n, trials, rng, |idx| {
        subset.clear();
        subset.extend(idx.iter().map(|&i| task.solutions[i].clone()));
        let outcome = vote(&subset).expect("non-empty subset");
        hits += usize::from(outcome.chosen == Some(task.ground_truth));
    });
    hits as f64 / count as f64
}

/// Accuracy per `(strategy, N)`. Best-of-N uses the unbiased estimator; the
/// votes average over `trials` random N-subsets, or over all subsets when
/// there are at most `trials` of them.
pub fn sweep<T: Scalar>(
    tasks: &[TaskSamples<T>],
    n_grid: &[usize],
    strategies: &[Strategy],
    trials: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SweepRow>> {
    if tasks.is_empty() {
        return invalid("sweep needs at least one task");
    }
    let available = tasks.iter().map(|t| t.solutions.len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &n in n_grid {
            check_k(available, n)?;
            let per_task: Vec<f64> = tasks
                .iter()
                .map(|task| match strategy {
                    Strategy::BestOfN => {
                        let scores: Vec<T> = task.solutions.iter().map(|s| s.score).collect();
                        best_of_k_estimate::<f64>(&sort_by_score(&scores, &task.correct()), n).unwrap()
                    }
                    Strategy::Majority => vote_accuracy(task, n, trials, rng, majority_vote),
                    Strategy::Weighted => vote_accuracy(task, n, trials, rng, weighted_vote),
                })
                .collect();
            let (accuracy, stderr) = mean_and_stderr(&per_task);
            rows.push(SweepRow { strategy, n, accuracy, stderr });
        }
    }
    Ok(rows)
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
