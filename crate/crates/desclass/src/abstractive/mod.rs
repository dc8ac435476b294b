//! Abstractive description policy: a class-conditioned encoder-decoder
//! with attention and a copy gate. The class embedding h_y is concatenated
//! to every source and target token embedding; the decoder is a single GRU
//! layer with bilinear attention over the encoded source, and the output
//! distribution mixes generation with copying source tokens back out
//! (copied tokens fold onto their vocabulary ids).

mod train;

pub use train::{partial_reward, pretrain_step, regs_rollout, regs_step, RegsStepOut, RolloutOut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::tensor::{Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::text::vocab::{BOS, EOS, UNK};
use crate::text::TokenSeq;

const EMB_STD: f64 = 0.1;
const P: &str = "abs_policy";

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Seq2SeqConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub max_src_len: usize,
    /// Hard cap on generated description length (excluding [EOS]).
    pub max_desc_len: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            d_model: 64,
            vocab_size: 0,
            n_classes: 0,
            max_src_len: 64,
            max_desc_len: 24,
        }
    }
}

/// Parameter namespace `abs_policy/*`: source embeddings + one transformer
/// layer, GRU decoder, attention, copy gate, output projection, class
/// embeddings, and the value head that baselines per-step rewards.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub cfg: Seq2SeqConfig,
    src_layer: TransformerEncoder,
}

impl Seq2SeqModel {
    pub fn new(cfg: Seq2SeqConfig) -> Self {
        assert!(cfg.vocab_size > 0 && cfg.n_classes >= 2);
        let enc_cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: cfg.d_model,
            d_ff: cfg.d_model * 2,
            max_len: cfg.max_src_len,
            dropout: 0.0,
            vocab_size: cfg.vocab_size,
            segment_count: 2,
        };
        Seq2SeqModel { cfg, src_layer: TransformerEncoder::new(&format!("{P}/enc"), enc_cfg) }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        store.insert_randn(&format!("{P}/src_tok_emb"), vec![v, d], EMB_STD, rng);
        store.insert_randn(&format!("{P}/src_pos_emb"), vec![self.cfg.max_src_len, d], EMB_STD, rng);
        store.insert_randn(&format!("{P}/class_emb"), vec![self.cfg.n_classes, d], EMB_STD, rng);
        store.insert_xavier(&format!("{P}/src_in_w"), vec![2 * d, d], rng);
        store.insert_zeros(&format!("{P}/src_in_b"), vec![d]);
        self.src_layer.init_layers(store, rng);

        store.insert_randn(&format!("{P}/dec_tok_emb"), vec![v, d], EMB_STD, rng);
        store.insert_xavier(&format!("{P}/dec_in_w"), vec![2 * d, d], rng);
        store.insert_zeros(&format!("{P}/dec_in_b"), vec![d]);
        for gate in ["z", "r", "h"] {
            store.insert_xavier(&format!("{P}/gru_w{gate}"), vec![2 * d, d], rng);
            store.insert_zeros(&format!("{P}/gru_b{gate}"), vec![d]);
        }
        store.insert_xavier(&format!("{P}/att_w"), vec![d, d], rng);
        store.insert_xavier(&format!("{P}/comb_w"), vec![2 * d, d], rng);
        store.insert_zeros(&format!("{P}/comb_b"), vec![d]);
        store.insert_xavier(&format!("{P}/vocab_w"), vec![d, v], rng);
        store.insert_zeros(&format!("{P}/vocab_b"), vec![v]);
        store.insert_xavier(&format!("{P}/gate_w"), vec![3 * d, 1], rng);
        store.insert_zeros(&format!("{P}/gate_b"), vec![1]);
        store.insert_xavier(&format!("{P}/value_w"), vec![d, 1], rng);
        store.insert_zeros(&format!("{P}/value_b"), vec![1]);
        store.insert_zeros(&format!("{P}/dec_h0"), vec![1, d]);
    }

    pub fn clip_src<'t>(&self, x: &'t [usize]) -> &'t [usize] {
        &x[..x.len().min(self.cfg.max_src_len)]
    }

    /// Encode the source with h_y concatenated to every token embedding:
    /// memory M of shape (src_len, d).
    fn encode_source<F: Scalar>(&self, g: &mut Graph<'_, F>, x: &[usize], class: usize) -> NodeId {
        assert!(!x.is_empty(), "empty source text");
        let tok_t = g.param(&format!("{P}/src_tok_emb"));
        let pos_t = g.param(&format!("{P}/src_pos_emb"));
        let cls_t = g.param(&format!("{P}/class_emb"));
        let tok = g.tape.embedding(tok_t, x);
        let positions: Vec<usize> = (0..x.len()).collect();
        let pos = g.tape.embedding(pos_t, &positions);
        let emb = g.tape.add(tok, pos);
        let hy_rows = g.tape.embedding(cls_t, &vec![class; x.len()]);
        let cat = g.tape.concat_last(&[emb, hy_rows]);
        let w = g.param(&format!("{P}/src_in_w"));
        let b = g.param(&format!("{P}/src_in_b"));
        let proj = g.tape.matmul(cat, w);
        let h = g.tape.add(proj, b);
        let mut no_rng = None;
        self.src_layer.layer(g, h, 0, &mut no_rng)
    }
}

/// One decoding step's tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    /// Mixture distribution over the vocabulary, shape (1, V).
    pub dist: NodeId,
    /// Value-head estimate b(q_{<i}) of the state this step decodes from.
    pub value: NodeId,
    /// Copy gate in (0,1); 1 means pure generation.
    pub gate: NodeId,
}

/// An in-flight decode over a borrowed graph: recurrent state plus the
/// per-step records needed to build losses afterwards.
pub struct DecodeSession<'g, 'a, F: Scalar> {
    pub graph: &'g mut Graph<'a, F>,
    model: Seq2SeqModel,
    memory: NodeId,
    h_y: NodeId,
    copy_matrix: NodeId,
    hidden: NodeId,
    prev_token: usize,
    pending: Option<(StepNodes, NodeId)>,
    /// Tokens committed so far (may end with [EOS]).
    pub prefix: TokenSeq,
    /// Probability of each committed token under its step distribution.
    pub step_probs: Vec<f64>,
    /// Step nodes for each committed token, in order.
    pub steps: Vec<StepNodes>,
}

impl<'g, 'a, F: Scalar> DecodeSession<'g, 'a, F> {
    pub fn start(
        model: &Seq2SeqModel,
        graph: &'g mut Graph<'a, F>,
        x: &TokenSeq,
        class: usize,
    ) -> Self {
        let x = model.clip_src(x).to_vec();
        let memory = model.encode_source(graph, &x, class);
        let cls_t = graph.param(&format!("{P}/class_emb"));
        let h_y = graph.tape.select_rows(cls_t, &[class]);
        // one-hot map from source positions to vocab ids: copying position j
        // puts its attention mass on vocab id x[j]
        let v = model.cfg.vocab_size;
        let mut c = vec![F::ZERO; x.len() * v];
        for (j, &id) in x.iter().enumerate() {
            c[j * v + id.min(v - 1)] = F::ONE;
        }
        let copy_matrix = graph.constant(Tensor::new(vec![x.len(), v], c));
        let hidden = graph.param(&format!("{P}/dec_h0"));
        DecodeSession {
            graph,
            model: model.clone(),
            memory,
            h_y,
            copy_matrix,
            hidden,
            prev_token: BOS,
            pending: None,
            prefix: Vec::new(),
            step_probs: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Distribution over the next token: g * P_generate + (1-g) * P_copy.
    /// Sums to 1 for any gate value and attention pattern. The recurrent
    /// update it computes is held until [`Self::commit`].
    pub fn next_dist(&mut self) -> StepNodes {
        if let Some((nodes, _)) = self.pending {
            return nodes;
        }
        let d = self.model.cfg.d_model;
        let g = &mut *self.graph;
        let emb_t = g.param(&format!("{P}/dec_tok_emb"));
        let emb = g.tape.embedding(emb_t, &[self.prev_token]);
        let cat = g.tape.concat_last(&[emb, self.h_y]);
        let in_w = g.param(&format!("{P}/dec_in_w"));
        let in_b = g.param(&format!("{P}/dec_in_b"));
        let e = g.tape.matmul(cat, in_w);
        let e = g.tape.add(e, in_b);

        // GRU cell
        let prev = self.hidden;
        let cat2 = g.tape.concat_last(&[e, prev]);
        let wz = g.param(&format!("{P}/gru_wz"));
        let bz = g.param(&format!("{P}/gru_bz"));
        let z_pre = g.tape.matmul(cat2, wz);
        let z_pre = g.tape.add(z_pre, bz);
        let z = g.tape.sigmoid(z_pre);
        let wr = g.param(&format!("{P}/gru_wr"));
        let br = g.param(&format!("{P}/gru_br"));
        let r_pre = g.tape.matmul(cat2, wr);
        let r_pre = g.tape.add(r_pre, br);
        let r = g.tape.sigmoid(r_pre);
        let gated_prev = g.tape.mul(prev, r);
        let cat3 = g.tape.concat_last(&[e, gated_prev]);
        let wh = g.param(&format!("{P}/gru_wh"));
        let bh = g.param(&format!("{P}/gru_bh"));
        let cand_pre = g.tape.matmul(cat3, wh);
        let cand_pre = g.tape.add(cand_pre, bh);
        let cand = g.tape.tanh(cand_pre);
        let neg_z = g.tape.scale(z, -1.0);
        let ones = g.constant(Tensor::new(vec![1, d], vec![F::ONE; d]));
        let one_m_z = g.tape.add(ones, neg_z);
        let keep = g.tape.mul(prev, one_m_z);
        let update = g.tape.mul(cand, z);
        let h_new = g.tape.add(keep, update);

        // bilinear attention over the source memory
        let att_w = g.param(&format!("{P}/att_w"));
        let query = g.tape.matmul(h_new, att_w);
        let mem_t = g.tape.transpose(self.memory);
        let scores = g.tape.matmul(query, mem_t);
        let attn = g.tape.softmax_last(scores);
        let ctx = g.tape.matmul(attn, self.memory);

        // generation distribution
        let comb_in = g.tape.concat_last(&[h_new, ctx]);
        let comb_w = g.param(&format!("{P}/comb_w"));
        let comb_b = g.param(&format!("{P}/comb_b"));
        let o = g.tape.matmul(comb_in, comb_w);
        let o = g.tape.add(o, comb_b);
        let o = g.tape.tanh(o);
        let vw = g.param(&format!("{P}/vocab_w"));
        let vb = g.param(&format!("{P}/vocab_b"));
        let logits = g.tape.matmul(o, vw);
        let logits = g.tape.add(logits, vb);
        let p_gen = g.tape.softmax_last(logits);

        // copy gate and folded copy distribution
        let gate_in = g.tape.concat_last(&[h_new, ctx, e]);
        let gw = g.param(&format!("{P}/gate_w"));
        let gb = g.param(&format!("{P}/gate_b"));
        let gate_pre = g.tape.matmul(gate_in, gw);
        let gate_pre = g.tape.add(gate_pre, gb);
        let gate = g.tape.sigmoid(gate_pre);
        let p_copy = g.tape.matmul(attn, self.copy_matrix);
        let gen_part = g.tape.mul(p_gen, gate);
        let neg_gate = g.tape.scale(gate, -1.0);
        let one = g.constant(Tensor::new(vec![1, 1], vec![F::ONE]));
        let inv_gate = g.tape.add(one, neg_gate);
        let copy_part = g.tape.mul(p_copy, inv_gate);
        let dist = g.tape.add(gen_part, copy_part);

        // value head reads a detached copy of the state: the baseline's
        // regression loss must not steer the policy parameters
        let h_detached = {
            let t = g.value(h_new).clone();
            g.constant(t)
        };
        let vw2 = g.param(&format!("{P}/value_w"));
        let vb2 = g.param(&format!("{P}/value_b"));
        let val = g.tape.matmul(h_detached, vw2);
        let value = g.tape.add(val, vb2);

        let nodes = StepNodes { dist, value, gate };
        self.pending = Some((nodes, h_new));
        nodes
    }

    /// Advance the state with the chosen token.
    pub fn commit(&mut self, token: usize) {
        let (nodes, h_new) = self.pending.take().expect("commit without next_dist");
        let p = self.graph.value(nodes.dist).data()[token].to_f64();
        self.hidden = h_new;
        self.prev_token = token;
        self.prefix.push(token);
        self.step_probs.push(p);
        self.steps.push(nodes);
    }

    pub fn dist_values(&self, nodes: StepNodes) -> Vec<f64> {
        self.graph.value(nodes.dist).data().iter().map(|v| v.to_f64()).collect()
    }

    /// Description tokens committed so far, [EOS] excluded.
    pub fn description(&self) -> TokenSeq {
        self.prefix.iter().copied().filter(|&t| t != EOS).collect()
    }
}

/// Teacher-forced mean negative log likelihood of `target` (which should
/// end with [EOS]) for input (x, y), built on the caller's graph.
pub fn teacher_forced_nll<F: Scalar>(
    model: &Seq2SeqModel,
    g: &mut Graph<'_, F>,
    x: &TokenSeq,
    class: usize,
    target: &TokenSeq,
) -> NodeId {
    assert!(!target.is_empty(), "empty teacher-forcing target");
    let mut session = DecodeSession::start(model, g, x, class);
    let mut terms: Vec<NodeId> = Vec::with_capacity(target.len());
    for &t in target {
        let nodes = session.next_dist();
        session.commit(t);
        let g = &mut *session.graph;
        let p_t = g.tape.slice_cols(nodes.dist, t, t + 1);
        let lp = g.tape.log(p_t);
        terms.push(lp);
    }
    let g = session.graph;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.tape.add(total, t);
    }
    let sum = g.tape.sum(total);
    g.tape.scale(sum, -1.0 / target.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Decode a description for (x, y): greedy argmax or ancestral sampling,
/// until [EOS] or the configured length cap. Returns the tokens (without
/// [EOS]) and the chosen-token probabilities (including [EOS]'s step).
pub fn generate<F: Scalar>(
    model: &Seq2SeqModel,
    store: &ParamStore<F>,
    x: &TokenSeq,
    class: usize,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> (TokenSeq, Vec<f64>) {
    let mut graph = Graph::new(store);
    let mut session = DecodeSession::start(model, &mut graph, x, class);
    for _ in 0..model.cfg.max_desc_len {
        let nodes = session.next_dist();
        let dist = session.dist_values(nodes);
        let token = match mode {
            DecodeMode::Greedy => argmax(&dist),
            DecodeMode::Sample => sample_index(&dist, rng),
        };
        session.commit(token);
        if token == EOS {
            break;
        }
    }
    (session.description(), session.step_probs.clone())
}

/// Teacher-forced probability of the whole sequence: the product of
/// per-step probabilities of `q` (which must end with [EOS]).
pub fn seq_prob<F: Scalar>(
    model: &Seq2SeqModel,
    store: &ParamStore<F>,
    q: &TokenSeq,
    x: &TokenSeq,
    class: usize,
) -> f64 {
    assert_eq!(q.last(), Some(&EOS), "seq_prob expects an [EOS]-terminated sequence");
    let mut graph = Graph::new(store);
    let mut session = DecodeSession::start(model, &mut graph, x, class);
    let mut p = 1.0;
    for &t in q {
        session.next_dist();
        session.commit(t);
        p *= *session.step_probs.last().unwrap();
    }
    p
}

/// Placeholder description for an empty decode prefix.
pub fn empty_prefix_placeholder() -> TokenSeq {
    vec![UNK]
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

pub(crate) fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
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
