//! Linear-softmax autoregressive policy with exact gradients.
//!
//! Logits are `Wᵀ·φ(context)` where `φ` is a sparse indicator vector from a
//! [`FeatureMap`]. Because features are indicators, the gradient of any
//! per-position quantity with respect to `W` touches only the active rows and
//! is the same column vector on each of them; [`RowGrad`] stores it that way.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureMap, SparseFeatures};
use crate::scalar::{sigmoid, softmax_in_place, Scalar};
use crate::task::{Token, Vocab};

/// Which auxiliary heads a policy carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadSet {
    pub value: bool,
    pub bce: bool,
    pub reg: bool,
}

impl HeadSet {
    pub const NONE: HeadSet = HeadSet { value: false, bce: false, reg: false };
    pub const ALL: HeadSet = HeadSet { value: true, bce: true, reg: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Value,
    Bce,
    Reg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

/// Gradient of a per-position scalar: `∂/∂W[f][c] = multiplicity(f) · column[c]`
/// for every active feature `f`, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad<T> {
    pub features: SparseFeatures,
    pub column: Vec<T>,
}

impl<T: Scalar> RowGrad<T> {
    pub fn add_to(&self, dense: &mut [T], scale: T) {
        let v = self.column.len();
        for &f in &self.features.indices {
            let row = &mut dense[f * v..(f + 1) * v];
            for (w, &g) in row.iter_mut().zip(&self.column) {
                *w += scale * g;
            }
        }
    }

    pub fn to_dense(&self, feature_dim: usize) -> Vec<T> {
        let mut out = vec![T::zero(); feature_dim * self.column.len()];
        self.add_to(&mut out, T::one());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    vocab: Vocab,
    feature_map: FeatureMap,
    /// Row-major `feature_dim × |V|`.
    pub weights: Vec<T>,
    pub value_head: Option<Vec<T>>,
    pub bce_head: Option<Vec<T>>,
    pub reg_head: Option<Vec<T>>,
}

/// Frozen snapshot of the logit weights, taken when a run starts.
#[derive(Debug, Clone)]
pub struct Reference<T> {
    feature_map: FeatureMap,
    weights: Arc<[T]>,
}

impl<T: Scalar> Reference<T> {
    pub fn snapshot(policy: &Policy<T>) -> Self {
        Reference { feature_map: policy.feature_map, weights: policy.weights.clone().into() }
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn log_probs(&self, context: &[Token]) -> Vec<T> {
        let phi = self.feature_map.features(context);
        let mut logits = logits_from(&self.weights, &phi);
        let lse = crate::scalar::log_sum_exp(&logits);
        logits.iter_mut().for_each(|z| *z -= lse);
        logits
    }
}

fn logits_from<T: Scalar>(weights: &[T], phi: &SparseFeatures) -> Vec<T> {
    let v = Vocab::SIZE;
    let mut logits = vec![T::zero(); v];
    for &f in &phi.indices {
        for (z, &w) in logits.iter_mut().zip(&weights[f * v..(f + 1) * v]) {
            *z += w;
        }
    }
    logits
}

fn dot<T: Scalar>(head: &[T], phi: &SparseFeatures) -> T {
    phi.indices.iter().map(|&f| head[f]).sum()
}

impl<T: Scalar> Policy<T> {
    pub fn zeros(vocab: Vocab, feature_map: FeatureMap, heads: HeadSet) -> Self {
        let dim = feature_map.dim();
        let head = |on: bool| on.then(|| vec![T::zero(); dim]);
        Policy {
            vocab,
            feature_map,
            weights: vec![T::zero(); dim * Vocab::SIZE],
            value_head: head(heads.value),
            bce_head: head(heads.bce),
            reg_head: head(heads.reg),
        }
    }

    pub fn from_parts(
        vocab: Vocab,
        feature_map: FeatureMap,
        weights: Vec<T>,
        value_head: Option<Vec<T>>,
        bce_head: Option<Vec<T>>,
        reg_head: Option<Vec<T>>,
    ) -> Result<Self> {
        let dim = feature_map.dim();
        if weights.len() != dim * Vocab::SIZE {
            return Err(Error::InvalidArgument(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                dim * Vocab::SIZE
            )));
        }
        for head in [&value_head, &bce_head, &reg_head].into_iter().flatten() {
            if head.len() != dim {
                return Err(Error::InvalidArgument(format!("head has {} entries, expected {dim}", head.len())));
            }
        }
        let p = Policy { vocab, feature_map, weights, value_head, bce_head, reg_head };
        if !p.all_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn feature_map(&self) -> FeatureMap {
        self.feature_map
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_map.dim()
    }

    pub fn heads(&self) -> HeadSet {
        HeadSet { value: self.value_head.is_some(), bce: self.bce_head.is_some(), reg: self.reg_head.is_some() }
    }

    pub fn all_finite(&self) -> bool {
        let heads = [&self.value_head, &self.bce_head, &self.reg_head];
        self.weights.iter().chain(heads.into_iter().flatten().flatten()).all(|x| x.is_finite())
    }

    pub fn features(&self, context: &[Token]) -> SparseFeatures {
        self.feature_map.features(context)
    }

    pub fn logits(&self, phi: &SparseFeatures) -> Vec<T> {
        logits_from(&self.weights, phi)
    }

    pub fn next_token_dist(&self, context: &[Token]) -> Result<Vec<T>> {
        let mut p = self.logits(&self.features(context));
        if p.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Log-probability of `token` after `context` and its gradient w.r.t. `W`.
    pub fn logprob_and_grad(&self, context: &[Token], token: Token) -> (T, RowGrad<T>) {
        let features = self.features(context);
        let mut p = self.logits(&features);
        let lse = softmax_in_place(&mut p);
        let logprob = self.logits(&features)[token.id()] - lse;
        let column = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| if c == token.id() { T::one() - pc } else { -pc })
            .collect();
        (logprob, RowGrad { features, column })
    }

    pub fn logprob(&self, context: &[Token], token: Token) -> T {
        let mut z = self.logits(&self.features(context));
        let lse = crate::scalar::log_sum_exp(&z);
        z.swap_remove(token.id()) - lse
    }

    /// Exact `KL(π_θ(·|ctx) ‖ π_ref(·|ctx))` with its gradient w.r.t. `W`.
    pub fn kl_to_ref(&self, reference: &Reference<T>, context: &[Token]) -> (T, RowGrad<T>) {
        let features = self.features(context);
        let mut logp = self.logits(&features);
        let lse = crate::scalar::log_sum_exp(&logp);
        logp.iter_mut().for_each(|z| *z -= lse);
        let logq = reference.log_probs(context);
        let mut kl = T::zero();
        for (&lp, &lq) in logp.iter().zip(&logq) {
            kl += lp.exp() * (lp - lq);
        }
        let kl = kl.max(T::zero());
        let column = logp.iter().zip(&logq).map(|(&lp, &lq)| lp.exp() * (lp - lq - kl)).collect();
        (kl, RowGrad { features, column })
    }

    pub fn value(&self, context: &[Token]) -> T {
        self.value_head.as_ref().map_or(T::zero(), |v| dot(v, &self.features(context)))
    }

    pub fn head(&self, head: Head) -> Option<&Vec<T>> {
        match head {
            Head::Value => self.value_head.as_ref(),
            Head::Bce => self.bce_head.as_ref(),
            Head::Reg => self.reg_head.as_ref(),
        }
    }

    pub fn head_mut(&mut self, head: Head) -> Option<&mut Vec<T>> {
        match head {
            Head::Value => self.value_head.as_mut(),
            Head::Bce => self.bce_head.as_mut(),
            Head::Reg => self.reg_head.as_mut(),
        }
    }

    /// Linear output of an auxiliary head; zero when the head is absent.
    pub fn head_output(&self, head: Head, context: &[Token]) -> T {
        self.head(head).map_or(T::zero(), |h| dot(h, &self.features(context)))
    }

    pub fn bce_probability(&self, context: &[Token]) -> T {
        sigmoid(self.head_output(Head::Bce, context))
    }

    fn pick(&self, logits: &[T], decoding: Decoding, rng: &mut impl Rng) -> usize {
        match decoding {
            Decoding::Greedy => {
                let mut best = 0;
                for (i, &z) in logits.iter().enumerate() {
                    if z > logits[best] {
                        best = i;
                    }
                }
                best
            }
            Decoding::Temperature(temp) => {
                let mut p: Vec<f64> = logits.iter().map(|z| z.as_f64() / temp).collect();
                softmax_in_place(&mut p);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
            }
        }
    }

    /// Samples up to `max_new` tokens after `prefix`, stopping after EOS.
    /// Log-probabilities are recorded under the un-tempered policy.
    pub fn continue_from(
        &self,
        prefix: &[Token],
        max_new: usize,
        decoding: Decoding,
        rng: &mut impl Rng,
    ) -> (Vec<Token>, Vec<T>) {
        let mut context = prefix.to_vec();
        let mut tokens = Vec::with_capacity(max_new);
        let mut logprobs = Vec::with_capacity(max_new);
        while tokens.len() < max_new {
            let logits = self.logits(&self.features(&context));
            let choice = self.pick(&logits, decoding, rng);
            let lse = crate::scalar::log_sum_exp(&logits);
            let tok = Token(choice as u8);
            tokens.push(tok);
            logprobs.push(logits[choice] - lse);
            context.push(tok);
            if tok == Token::EOS {
                break;
            }
        }
        (tokens, logprobs)
    }

    pub fn sample_solution(
        &self,
        prompt: &[Token],
        max_len: usize,
        decoding: Decoding,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Token>, Vec<T>)> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if let Decoding::Temperature(t) = decoding {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(self.continue_from(prompt, max_len, decoding, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::task::parse_tokens;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    fn random_policy(seed: u64, map: FeatureMap, scale: f64) -> Policy<f64> {
        let mut r = rng::stream(seed, &[1]);
        let mut p = Policy::zeros(Vocab::default(), map, HeadSet::ALL);
        p.weights.iter_mut().for_each(|w| *w = r.gen_range(-scale..scale));
        p
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p: Policy<f64> = Policy::zeros(Vocab::default(), FeatureMap::default(), HeadSet::NONE);
        let d = p.next_token_dist(&toks("1 + 2 SEP")).unwrap();
        for &x in &d {
            assert!((x - 1.0 / Vocab::SIZE as f64).abs() < 1e-15);
        }
        let (lp, _) = p.logprob_and_grad(&[], Token::YES);
        assert!((lp + (Vocab::SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn distributions_normalize() {
        for seed in 0..20 {
            let p = random_policy(seed, FeatureMap::Structured { width: 3, gain: 1 }, 3.0);
            let d = p.next_token_dist(&toks("4 * 2 - 1 SEP 8 STEP")).unwrap();
            assert!(d.iter().all(|&x| x > 0.0));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ln3_offset_triples_probability() {
        let mut p: Policy<f64> = Policy::zeros(Vocab::default(), FeatureMap::default(), HeadSet::NONE);
        let ctx = toks("1 2 3");
        let phi = p.features(&ctx);
        // Spread ln 3 over the three active rows of column 7.
        for &f in &phi.indices {
            p.weights[f * Vocab::SIZE + 7] = 3f64.ln() / 3.0;
        }
        let d = p.next_token_dist(&ctx).unwrap();
        assert!((d[7] / d[0] - 3.0).abs() < 1e-12);
        assert!((d[7] - 3.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_error() {
        let mut p: Policy<f64> = Policy::zeros(Vocab::default(), FeatureMap::default(), HeadSet::NONE);
        p.weights[0] = f64::INFINITY;
        let ctx = toks("0 0 0");
        assert!(matches!(p.next_token_dist(&ctx), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_columns_sum_to_zero() {
        let p = random_policy(3, FeatureMap::default(), 1.0);
        let (_, g) = p.logprob_and_grad(&toks("5 STEP"), Token::EOS);
        assert!(g.column.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn kl_identity_and_nonnegativity() {
        let p = random_policy(4, FeatureMap::Structured { width: 3, gain: 1 }, 2.0);
        let r = Reference::snapshot(&p);
        let ctx = toks("1 + 1 SEP 2 STEP");
        assert!(p.kl_to_ref(&r, &ctx).0.abs() < 1e-12);
        let q = random_policy(5, FeatureMap::Structured { width: 3, gain: 1 }, 2.0);
        assert!(q.kl_to_ref(&r, &ctx).0 >= 0.0);
    }

    #[test]
    fn kl_two_outcome_hand_value() {
        // Put all mass on tokens 0/1 for both policies: p=(0.9,0.1), q=(0.5,0.5).
        let map = FeatureMap::Window { width: 1 };
        let big = 60.0;
        let mut q: Policy<f64> = Policy::zeros(Vocab::default(), map, HeadSet::NONE);
        let ctx: Vec<Token> = vec![];
        let f = map.features(&ctx).indices[0];
        for c in 2..Vocab::SIZE {
            q.weights[f * Vocab::SIZE + c] = -big;
        }
        let reference = Reference::snapshot(&q);
        let mut p = q.clone();
        p.weights[f * Vocab::SIZE] = 9f64.ln();
        let (kl, _) = p.kl_to_ref(&reference, &ctx);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-9, "{kl} vs {expected}");
        assert!((expected - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn value_head_cases() {
        let mut p: Policy<f64> = Policy::zeros(Vocab::default(), FeatureMap::default(), HeadSet::ALL);
        let ctx = toks("3 + 4 SEP");
        assert_eq!(p.value(&ctx), 0.0);
        let phi = p.features(&ctx);
        let v = p.value_head.as_mut().unwrap();
        for &f in &phi.indices {
            v[f] = 1.0;
        }
        assert_eq!(p.value(&ctx), 3.0);
        p.value_head.as_mut().unwrap().iter_mut().for_each(|x| *x *= -2.5);
        assert_eq!(p.value(&ctx), -7.5);
    }

    #[test]
    fn sampling_contracts() {
        let p = random_policy(6, FeatureMap::Structured { width: 3, gain: 1 }, 2.0);
        let prompt = toks("2 + 2 SEP");
        let mut r1 = rng::stream(9, &[]);
        let mut r2 = rng::stream(9, &[]);
        let a = p.sample_solution(&prompt, 12, Decoding::Temperature(1.0), &mut r1).unwrap();
        let b = p.sample_solution(&prompt, 12, Decoding::Temperature(1.0), &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), a.1.len());
        let one = p.sample_solution(&prompt, 1, Decoding::Temperature(0.7), &mut r1).unwrap();
        assert_eq!(one.0.len(), 1);
        let g1 = p.sample_solution(&prompt, 12, Decoding::Greedy, &mut r1).unwrap();
        let g2 = p.sample_solution(&prompt, 12, Decoding::Greedy, &mut r2).unwrap();
        assert_eq!(g1, g2);
        assert!(p.sample_solution(&prompt, 0, Decoding::Greedy, &mut r1).is_err());
    }

    #[test]
    fn recorded_logprobs_are_untempered() {
        let p = random_policy(7, FeatureMap::default(), 1.5);
        let prompt = toks("1 + 1 SEP");
        let mut r = rng::stream(1, &[]);
        let (sol, lps) = p.sample_solution(&prompt, 6, Decoding::Temperature(0.3), &mut r).unwrap();
        let mut ctx = prompt.clone();
        for (&t, &lp) in sol.iter().zip(&lps) {
            assert!((p.logprob(&ctx, t) - lp).abs() < 1e-12);
            ctx.push(t);
        }
    }

    #[test]
    fn works_in_f32() {
        let p: Policy<f32> = Policy::zeros(Vocab::default(), FeatureMap::Structured { width: 3, gain: 1 }, HeadSet::NONE);
        let d = p.next_token_dist(&toks("1 + 1 SEP")).unwrap();
        assert!((d.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn greedy_ignores_temperature_scale(seed: u64, scale in 0.1f64..10.0) {
                let p = random_policy(seed, FeatureMap::Structured { width: 3, gain: 1 }, 2.0);
                let prompt = toks("3 * 3 SEP");
                let mut r = rng::stream(seed, &[2]);
                let a = p.sample_solution(&prompt, 8, Decoding::Greedy, &mut r).unwrap();
                let mut scaled = p.clone();
                scaled.weights.iter_mut().for_each(|w| *w *= scale);
                let b = scaled.sample_solution(&prompt, 8, Decoding::Greedy, &mut r).unwrap();
                prop_assert_eq!(a.0, b.0);
            }
        }
    }
}
