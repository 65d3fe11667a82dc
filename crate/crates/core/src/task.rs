//! Token vocabulary and synthetic modular-arithmetic tasks.
//!
//! A task prompt is a left-to-right operation chain `d0 op1 d1 ... opN dN SEP`
//! evaluated modulo `M`. A solution is any token sequence; its answer is the
//! digit run following the last `ANSWER` token.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng;

/// A vocabulary token. Ids are dense in `0..Vocab::SIZE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u8);

impl Token {
    pub const PLUS: Token = Token(10);
    pub const MINUS: Token = Token(11);
    pub const TIMES: Token = Token(12);
    pub const SEP: Token = Token(13);
    pub const STEP: Token = Token(14);
    pub const ANSWER: Token = Token(15);
    pub const EOS: Token = Token(16);
    pub const VERIFY: Token = Token(17);
    pub const YES: Token = Token(18);
    pub const NO: Token = Token(19);
    pub const PAD: Token = Token(20);
    /// Closing marker of the reasoning segment, spliced in by budget forcing.
    pub const END_THINK: Token = Token(21);

    pub fn digit(d: u32) -> Token {
        assert!(d < 10, "digit token out of range: {d}");
        Token(d as u8)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn as_digit(self) -> Option<u32> {
        (self.0 < 10).then_some(self.0 as u32)
    }

    pub fn as_op(self) -> Option<Op> {
        match self {
            Token::PLUS => Some(Op::Add),
            Token::MINUS => Some(Op::Sub),
            Token::TIMES => Some(Op::Mul),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; Vocab::SIZE] = [
            "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "SEP", "STEP", "ANSWER",
            "EOS", "VERIFY", "YES", "NO", "PAD", "END_THINK",
        ];
        NAMES[self.id()]
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        (0..Vocab::SIZE as u8)
            .map(Token)
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown token `{s}`")))
    }
}

/// Renders tokens as space-separated names.
pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.name()).collect::<Vec<_>>().join(" ")
}

/// Parses space-separated token names. The empty string is the empty sequence.
pub fn parse_tokens(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace().map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn token(self) -> Token {
        match self {
            Op::Add => Token::PLUS,
            Op::Sub => Token::MINUS,
            Op::Mul => Token::TIMES,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Op::Add => 0,
            Op::Sub => 1,
            Op::Mul => 2,
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as i64, b as i64, modulus as i64);
        let r = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        };
        r.rem_euclid(m) as u32
    }
}

/// The fixed token inventory plus the arithmetic modulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    modulus: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { modulus: 10 }
    }
}

impl Vocab {
    pub const SIZE: usize = 22;

    /// Operands are drawn from `0..modulus`, so the modulus must fit a digit token.
    pub fn new(modulus: u32) -> Result<Self> {
        if !(2..=10).contains(&modulus) {
            return invalid(format!("modulus must be in 2..=10, got {modulus}"));
        }
        Ok(Vocab { modulus })
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..Self::SIZE as u8).map(Token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    AddOnly,
    Mixed,
}

impl Domain {
    pub fn ops(self) -> &'static [Op] {
        match self {
            Domain::AddOnly => &[Op::Add],
            Domain::Mixed => &Op::ALL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::AddOnly => "ADD_ONLY",
            Domain::Mixed => "MIXED",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ADD_ONLY" => Ok(Domain::AddOnly),
            "MIXED" => Ok(Domain::Mixed),
            other => invalid(format!("unknown domain `{other}` (expected ADD_ONLY or MIXED)")),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A parsed operation chain `d0 op1 d1 ... opN dN`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub first: u32,
    pub steps: Vec<(Op, u32)>,
}

impl Chain {
    pub fn evaluate(&self, modulus: u32) -> u32 {
        self.steps.iter().fold(self.first % modulus, |acc, &(op, d)| op.apply(acc, d, modulus))
    }

    /// Running values `r_1..r_N` of the left-to-right evaluation.
    pub fn partial_values(&self, modulus: u32) -> Vec<u32> {
        let mut acc = self.first % modulus;
        self.steps
            .iter()
            .map(|&(op, d)| {
                acc = op.apply(acc, d, modulus);
                acc
            })
            .collect()
    }

    pub fn to_prompt(&self) -> Vec<Token> {
        let mut out = vec![Token::digit(self.first)];
        for &(op, d) in &self.steps {
            out.push(op.token());
            out.push(Token::digit(d));
        }
        out.push(Token::SEP);
        out
    }
}

/// Parses a prompt `d0 op1 d1 ... SEP`. Returns `None` when malformed.
pub fn parse_prompt(prompt: &[Token]) -> Option<Chain> {
    let (last, body) = prompt.split_last()?;
    if *last != Token::SEP || body.len() % 2 == 0 {
        return None;
    }
    let first = body[0].as_digit()?;
    let steps = body[1..]
        .chunks_exact(2)
        .map(|pair| Some((pair[0].as_op()?, pair[1].as_digit()?)))
        .collect::<Option<Vec<_>>>()?;
    Some(Chain { first, steps })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub prompt: Vec<Token>,
    pub ground_truth: u32,
    pub difficulty: u32,
    pub domain: Domain,
}

impl TaskInstance {
    /// Rebuilds a task from its prompt tokens, recomputing the ground truth.
    pub fn from_prompt(prompt: Vec<Token>, vocab: &Vocab) -> Result<Self> {
        let chain = parse_prompt(&prompt)
            .ok_or_else(|| Error::InvalidArgument(format!("malformed prompt `{}`", render(&prompt))))?;
        if chain.steps.is_empty() {
            return invalid("prompt has no operations");
        }
        let domain = if chain.steps.iter().all(|&(op, _)| op == Op::Add) {
            Domain::AddOnly
        } else {
            Domain::Mixed
        };
        Ok(TaskInstance {
            ground_truth: chain.evaluate(vocab.modulus()),
            difficulty: chain.steps.len() as u32,
            domain,
            prompt,
        })
    }

    pub fn chain(&self) -> Chain {
        parse_prompt(&self.prompt).expect("task prompts are well formed")
    }
}

/// One sampled solution together with its behavior-policy log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub task: TaskInstance,
    pub solution: Vec<Token>,
    pub old_logprobs: Vec<T>,
    pub reward: u8,
    pub group_id: usize,
}

pub fn generate_task(vocab: &Vocab, difficulty: u32, domain: Domain, seed: u64) -> Result<TaskInstance> {
    if difficulty == 0 {
        return invalid("difficulty must be at least 1");
    }
    let mut rng = rng::stream(seed, &[0x7a5c, difficulty as u64, domain as u64]);
    let m = vocab.modulus();
    let ops = domain.ops();
    let chain = Chain {
        first: rng.gen_range(0..m),
        steps: (0..difficulty)
            .map(|_| (ops[rng.gen_range(0..ops.len())], rng.gen_range(0..m)))
            .collect(),
    };
    Ok(TaskInstance {
        prompt: chain.to_prompt(),
        ground_truth: chain.evaluate(m),
        difficulty,
        domain,
    })
}

/// Digit run after the last `ANSWER`, decoded modulo `M`.
pub fn extract_answer(vocab: &Vocab, solution: &[Token]) -> Option<u32> {
    let pos = solution.iter().rposition(|&t| t == Token::ANSWER)?;
    let m = vocab.modulus() as u64;
    let mut value: Option<u64> = None;
    for d in solution[pos + 1..].iter().map_while(|t| t.as_digit()) {
        value = Some((value.unwrap_or(0) * 10 + d as u64) % m);
    }
    value.map(|v| v as u32)
}

pub fn reward(vocab: &Vocab, task: &TaskInstance, solution: &[Token]) -> u8 {
    u8::from(extract_answer(vocab, solution) == Some(task.ground_truth))
}

/// `x ⊕ y ⊕ [VERIFY]`; the YES/NO judgement is predicted right after VERIFY.
pub fn make_verification_input(task: &TaskInstance, solution: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(task.prompt.len() + solution.len() + 1);
    out.extend_from_slice(&task.prompt);
    out.extend_from_slice(solution);
    out.push(Token::VERIFY);
    out
}

/// Reference solution: `r1 STEP r2 STEP ... ANSWER rN EOS`.
pub fn reference_solution(vocab: &Vocab, task: &TaskInstance) -> Vec<Token> {
    let partials = task.chain().partial_values(vocab.modulus());
    let mut out = Vec::with_capacity(2 * partials.len() + 3);
    for &r in &partials {
        out.push(Token::digit(r));
        out.push(Token::STEP);
    }
    out.push(Token::ANSWER);
    out.push(Token::digit(task.ground_truth));
    out.push(Token::EOS);
    out
}
