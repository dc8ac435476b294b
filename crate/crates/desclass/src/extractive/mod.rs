//! Extractive description policy: per-class start/end pointers over the
//! dummy-prefixed input. Selecting a dummy position means "no suitable
//! span here" and falls back to the class template.
//!
//! Positions 0..N are the per-class dummy slots, position N+k is text
//! token k. A [`SpanAction`] stores real-text indices; the dummy flag
//! reroutes `start` to mean the chosen dummy slot.

mod train;

pub use train::{
    greedy_dummy_rate, init_policy, policy_loss_for_items, reinforce_step, ExtractiveStepOut,
    InitMode, RewardBaseline,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::TransformerEncoder;
use crate::templates::{Description, Provenance, TemplateRegistry};
use crate::tensor::{Graph, NodeId, ParamStore, Scalar};
use crate::text::{prepend_dummies, TokenSeq, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum ExtractiveError {
    #[error("end index {end} outside the window {win_start}..={win_end} for start {start}")]
    EndOutsideWindow { start: usize, end: usize, win_start: usize, win_end: usize },
    #[error("span ({start},{end}) out of range for text of {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("dummy slot {slot} out of range for {n} classes")]
    DummySlotOutOfRange { slot: usize, n: usize },
    #[error("need at least 1 sample per example, got {0}")]
    BadSampleCount(usize),
}

/// The policy's action: a text span or a dummy-slot fallback.
/// Non-dummy: `start <= end`, both indexing real text tokens.
/// Dummy: `start` is the chosen dummy slot, `end` ignored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpanAction {
    pub start: usize,
    pub end: usize,
    pub is_dummy: bool,
}

impl SpanAction {
    pub fn span(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start {start} > end {end}");
        SpanAction { start, end, is_dummy: false }
    }

    pub fn dummy(slot: usize) -> Self {
        SpanAction { start: slot, end: 0, is_dummy: true }
    }

    /// Does the span cover text position `pos`? Dummies cover nothing.
    pub fn covers(&self, pos: usize) -> bool {
        !self.is_dummy && self.start <= pos && pos <= self.end
    }
}

/// Per-class start/end score vectors cast as probability distributions,
/// plus everything needed to reason about the masked action space.
#[derive(Clone, Debug)]
pub struct SpanDists {
    /// P_start over positions (dummies first, then text tokens).
    pub start: Vec<f64>,
    /// P_end over the same position space, before window renormalization.
    pub end: Vec<f64>,
    pub n_dummies: usize,
    pub l_max: usize,
}

impl SpanDists {
    pub fn positions(&self) -> usize {
        self.start.len()
    }

    pub fn text_len(&self) -> usize {
        self.positions() - self.n_dummies
    }

    /// Inclusive end-position window for a span starting at text index `s`:
    /// spans run at most `l_max` tokens and never past the text.
    pub fn window(&self, s: usize) -> (usize, usize) {
        let lo = self.n_dummies + s;
        let hi = (lo + self.l_max - 1).min(self.positions() - 1);
        (lo, hi)
    }

    /// Probability of an action: start mass for dummies, start times
    /// window-renormalized end mass for spans.
    pub fn span_prob(&self, action: &SpanAction) -> Result<f64, ExtractiveError> {
        if action.is_dummy {
            if action.start >= self.n_dummies {
                return Err(ExtractiveError::DummySlotOutOfRange {
                    slot: action.start,
                    n: self.n_dummies,
                });
            }
            return Ok(self.start[action.start]);
        }
        let t = self.text_len();
        if action.end >= t || action.start > action.end {
            return Err(ExtractiveError::SpanOutOfRange {
                start: action.start,
                end: action.end,
                len: t,
            });
        }
        let (lo, hi) = self.window(action.start);
        let end_pos = self.n_dummies + action.end;
        if end_pos < lo || end_pos > hi {
            return Err(ExtractiveError::EndOutsideWindow {
                start: action.start,
                end: action.end,
                win_start: lo - self.n_dummies,
                win_end: hi - self.n_dummies,
            });
        }
        let denom: f64 = self.end[lo..=hi].iter().sum();
        Ok(self.start[self.n_dummies + action.start] * self.end[end_pos] / denom)
    }

    /// start ~ P_start; a dummy position ends the action, otherwise
    /// end ~ P_end renormalized over the start's window.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SpanAction {
        let start_pos = sample_index(&self.start, rng);
        if start_pos < self.n_dummies {
            return SpanAction::dummy(start_pos);
        }
        let s = start_pos - self.n_dummies;
        let (lo, hi) = self.window(s);
        let window = &self.end[lo..=hi];
        let end_off = sample_index(window, rng);
        SpanAction::span(s, s + end_off)
    }

    /// Highest-probability action: argmax start, then argmax end within
    /// the window (renormalization cannot change the argmax).
    pub fn greedy(&self) -> SpanAction {
        let start_pos = argmax(&self.start);
        if start_pos < self.n_dummies {
            return SpanAction::dummy(start_pos);
        }
        let s = start_pos - self.n_dummies;
        let (lo, hi) = self.window(s);
        let end_off = argmax(&self.end[lo..=hi]);
        SpanAction::span(s, s + end_off)
    }

    /// Every valid action (all dummy slots, all windowed spans).
    pub fn enumerate_actions(&self) -> Vec<SpanAction> {
        let mut out = Vec::new();
        for slot in 0..self.n_dummies {
            out.push(SpanAction::dummy(slot));
        }
        let t = self.text_len();
        for s in 0..t {
            let (lo, hi) = self.window(s);
            for end_pos in lo..=hi {
                out.push(SpanAction::span(s, end_pos - self.n_dummies));
            }
        }
        out
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Graph nodes behind one class's distributions; scores feed the stable
/// log-prob path, probs feed sampling.
#[derive(Clone, Copy, Debug)]
pub struct SpanDistNodes {
    pub start_scores: NodeId,
    pub end_scores: NodeId,
    pub start_probs: NodeId,
    pub end_probs: NodeId,
}

/// Class-specific start/end pointer heads over a (usually shared) encoder.
#[derive(Clone, Debug)]
pub struct SpanPolicy {
    pub encoder: TransformerEncoder,
    pub n_classes: usize,
    pub l_max: usize,
}

impl SpanPolicy {
    pub fn new(encoder: TransformerEncoder, n_classes: usize, l_max: usize) -> Self {
        assert!(l_max >= 1);
        SpanPolicy { encoder, n_classes, l_max }
    }

    fn start_name(&self, class: usize) -> String {
        format!("ext_policy/c{class}/start")
    }

    fn end_name(&self, class: usize) -> String {
        format!("ext_policy/c{class}/end")
    }

    /// Pointer vectors only; the encoder is initialized by its owner.
    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, std: f64) {
        let d = self.encoder.cfg.d_model;
        for c in 0..self.n_classes {
            store.insert_randn(&self.start_name(c), vec![d, 1], std, rng);
            store.insert_randn(&self.end_name(c), vec![d, 1], std, rng);
        }
    }

    /// Truncate text so the dummy prefix plus text fits the encoder.
    pub fn clip_text<'t>(&self, x: &'t [usize]) -> &'t [usize] {
        let budget = self.encoder.cfg.max_len - self.n_classes;
        &x[..x.len().min(budget)]
    }

    /// Encode `[DUM1..DUMN] ++ x`; dummies ride segment 0, text segment 1.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x: &TokenSeq,
        vocab: &Vocab,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let x = self.clip_text(x);
        let ids = prepend_dummies(&x.to_vec(), vocab).expect("text must not start with a dummy");
        let mut segments = vec![0usize; self.n_classes];
        segments.extend(std::iter::repeat(1).take(x.len()));
        self.encoder.forward(g, &ids, &segments, dropout_rng)
    }

    /// P_start(y,k) = softmax_k(W_ys . h_k), P_end likewise.
    pub fn class_dist_nodes<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        h: NodeId,
        class: usize,
    ) -> SpanDistNodes {
        let ws = g.param(&self.start_name(class));
        let we = g.param(&self.end_name(class));
        let s_col = g.tape.matmul(h, ws);
        let start_scores = g.tape.transpose(s_col);
        let e_col = g.tape.matmul(h, we);
        let end_scores = g.tape.transpose(e_col);
        let start_probs = g.tape.softmax_last(start_scores);
        let end_probs = g.tape.softmax_last(end_scores);
        SpanDistNodes { start_scores, end_scores, start_probs, end_probs }
    }

    pub fn dists_values<F: Scalar>(&self, g: &Graph<'_, F>, nodes: SpanDistNodes) -> SpanDists {
        SpanDists {
            start: g.value(nodes.start_probs).data().iter().map(|v| v.to_f64()).collect(),
            end: g.value(nodes.end_probs).data().iter().map(|v| v.to_f64()).collect(),
            n_dummies: self.n_classes,
            l_max: self.l_max,
        }
    }

    /// One encoder pass, one `SpanDists` per class.
    pub fn distributions<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &TokenSeq,
        vocab: &Vocab,
    ) -> Vec<SpanDists> {
        let mut g = Graph::new(store);
        let h = self.encode(&mut g, x, vocab, None);
        (0..self.n_classes)
            .map(|c| {
                let nodes = self.class_dist_nodes(&mut g, h, c);
                self.dists_values(&g, nodes)
            })
            .collect()
    }

    /// log pi(action) as a tape node: -CE(start_scores, pos) for the start,
    /// plus -CE(windowed end scores, offset) for non-dummy ends. The
    /// cross-entropy path keeps the log of tiny probabilities stable.
    pub fn log_prob_node<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        nodes: SpanDistNodes,
        action: &SpanAction,
    ) -> NodeId {
        let positions = g.value(nodes.start_scores).numel();
        let start_pos = if action.is_dummy {
            action.start
        } else {
            self.n_classes + action.start
        };
        assert!(start_pos < positions, "action start out of range");
        let ce_start = g.tape.cross_entropy(nodes.start_scores, &[start_pos]);
        let log_start = g.tape.scale(ce_start, -1.0);
        if action.is_dummy {
            return log_start;
        }
        let lo = self.n_classes + action.start;
        let hi = (lo + self.l_max - 1).min(positions - 1);
        let end_pos = self.n_classes + action.end;
        assert!(end_pos >= lo && end_pos <= hi, "end outside the masked window");
        let window = g.tape.slice_cols(nodes.end_scores, lo, hi + 1);
        let ce_end = g.tape.cross_entropy(window, &[end_pos - lo]);
        let log_end = g.tape.scale(ce_end, -1.0);
        g.tape.add(log_start, log_end)
    }
}

/// Turn an action into the description the classifier will see: the text
/// span itself, or the class template when a dummy was picked. Total for
/// every action either path can produce.
pub fn realize_description(
    action: &SpanAction,
    x: &TokenSeq,
    registry: &TemplateRegistry,
    class: usize,
) -> Description {
    if action.is_dummy {
        return registry.get(class).expect("registry covers every class").clone();
    }
    let end = action.end.min(x.len().saturating_sub(1));
    let start = action.start.min(end);
    Description {
        tokens: x[start..=end].to_vec(),
        provenance: Provenance::ExtractedSpan { start, end },
    }
}

/// Probability of the gold outcome, used directly as the reward
/// (probability, not log probability).
pub fn reward_multiclass(probs: &[f64], gold: usize) -> f64 {
    probs[gold]
}

/// Binary reward: p(assigned) for gold classes, 1 - p for the rest.
pub fn reward_binary(p: f64, assigned: bool) -> f64 {
    if assigned {
        p
    } else {
        1.0 - p
    }
}
