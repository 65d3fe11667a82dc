//! Context featurization for the linear-softmax policy.
//!
//! Two maps are provided. [`FeatureMap::Window`] indexes `(position, token)`
//! pairs of the trailing window only. [`FeatureMap::Structured`] appends
//! indicator blocks derived from the arithmetic structure of the context:
//! the pending operation `(running value, op, operand)`, one quad per completed
//! `STEP` `(previous value, op, operand, claimed value)`, and the pair
//! `(running value, stated answer)` once `ANSWER` has been emitted. The running
//! value is always the policy's own claim, never the true partial result.
//! Structured indicators are emitted `gain` times each, so they carry weight
//! `gain` in the logits and a `gain²` larger effective step under SGD.

use crate::task::{parse_prompt, Op, Token, Vocab};

const VALUE_SLOTS: usize = 11; // digits 0-9 plus "none"
const OP_SLOTS: usize = 4; // + - * plus "none"
const PENDING_DIM: usize = VALUE_SLOTS * OP_SLOTS * VALUE_SLOTS;
const QUAD_DIM: usize = PENDING_DIM * VALUE_SLOTS;
const ANSWER_DIM: usize = VALUE_SLOTS * VALUE_SLOTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    Window { width: usize },
    Structured { width: usize, gain: usize },
}

impl Default for FeatureMap {
    fn default() -> Self {
        FeatureMap::Window { width: 3 }
    }
}

/// Active feature indices. Repeated indices count with multiplicity.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparseFeatures {
    pub indices: Vec<usize>,
}

impl SparseFeatures {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &i in &self.indices {
            out[i] += 1.0;
        }
        out
    }
}

fn value_slot(v: Option<u32>) -> usize {
    v.map_or(VALUE_SLOTS - 1, |d| d as usize)
}

fn op_slot(op: Option<Op>) -> usize {
    op.map_or(OP_SLOTS - 1, Op::index)
}

impl FeatureMap {
    pub fn width(&self) -> usize {
        match *self {
            FeatureMap::Window { width } | FeatureMap::Structured { width, .. } => width,
        }
    }

    pub fn is_structured(&self) -> bool {
        matches!(self, FeatureMap::Structured { .. })
    }

    fn window_dim(&self) -> usize {
        self.width() * Vocab::SIZE
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Window { .. } => self.window_dim(),
            FeatureMap::Structured { .. } => self.window_dim() + PENDING_DIM + QUAD_DIM + ANSWER_DIM,
        }
    }

    pub fn features(&self, context: &[Token]) -> SparseFeatures {
        let width = self.width();
        let mut indices = Vec::with_capacity(width + 8);
        // Position 0 is the oldest token of the window, `width - 1` the most recent.
        for pos in 0..width {
            let back = width - pos;
            let tok = if back <= context.len() { context[context.len() - back] } else { Token::PAD };
            indices.push(pos * Vocab::SIZE + tok.id());
        }
        if let FeatureMap::Structured { gain, .. } = *self {
            let start = indices.len();
            self.structural(context, &mut indices);
            let block = indices.split_off(start);
            indices.extend(block.iter().flat_map(|&i| std::iter::repeat_n(i, gain)));
        }
        SparseFeatures { indices }
    }

    fn structural(&self, context: &[Token], out: &mut Vec<usize>) {
        let Some(sep) = context.iter().position(|&t| t == Token::SEP) else {
            return;
        };
        let Some(chain) = parse_prompt(&context[..=sep]) else {
            return;
        };
        let pending_base = self.window_dim();
        let quad_base = pending_base + PENDING_DIM;
        let answer_base = quad_base + QUAD_DIM;

        let mut running = Some(chain.first);
        let mut last_digit = None;
        let mut steps_done = 0usize;
        let mut answer: Option<Option<u32>> = None;
        for &tok in &context[sep + 1..] {
            if let Some(d) = tok.as_digit() {
                last_digit = Some(d);
                if let Some(slot @ None) = answer.as_mut() {
                    *slot = Some(d);
                }
            } else if tok == Token::STEP {
                let (op, operand) = match chain.steps.get(steps_done) {
                    Some(&(op, d)) => (Some(op), Some(d)),
                    None => (None, None),
                };
                let pending = (value_slot(running) * OP_SLOTS + op_slot(op)) * VALUE_SLOTS + value_slot(operand);
                out.push(quad_base + pending * VALUE_SLOTS + value_slot(last_digit));
                running = last_digit;
                last_digit = None;
                steps_done += 1;
            } else if tok == Token::ANSWER {
                answer = Some(None);
            }
        }
        let (op, operand) = match chain.steps.get(steps_done) {
            Some(&(op, d)) => (Some(op), Some(d)),
            None => (None, None),
        };
        out.push(pending_base + (value_slot(running) * OP_SLOTS + op_slot(op)) * VALUE_SLOTS + value_slot(operand));
        if let Some(stated) = answer {
            out.push(answer_base + value_slot(running) * VALUE_SLOTS + value_slot(stated));
        }
    }
}
