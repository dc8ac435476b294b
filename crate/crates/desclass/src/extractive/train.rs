//! REINFORCE for the span policy: sampled actions are rewarded with the
//! classifier's gold-outcome probability, a running mean of all rewards so
//! far serves as the baseline, and the classifier trains on its own
//! supervised loss from the same forward passes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ClassifierModel, Formulation};
use crate::templates::TemplateRegistry;
use crate::tensor::{merge_grads, AdamConfig, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::text::{rouge_l, Example, TokenSeq, Vocab};

use super::{
    realize_description, reward_binary, reward_multiclass, ExtractiveError, SpanAction,
    SpanDistNodes, SpanPolicy,
};

/// Running mean of every reward observed so far, starting from 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct RewardBaseline {
    running_mean: f64,
    count: u64,
}

impl RewardBaseline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> f64 {
        self.running_mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, reward: f64) {
        self.count += 1;
        self.running_mean += (reward - self.running_mean) / self.count as f64;
    }
}

/// How the policy starts out before joint training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Pretrained so every class points at its own dummy slot.
    Dummy,
    /// Gold class points at the window with the best ROUGE-L against the
    /// class template; other classes point at their dummy slots.
    RougeL,
    /// Raw random pointer vectors.
    Random,
}

/// Sum of `coeff * log pi(action)` terms on one graph; the caller picks
/// coefficients (-advantage for REINFORCE, -P(a)(R-b) for the enumerated
/// exact gradient).
pub fn policy_loss_for_items<F: Scalar>(
    g: &mut Graph<'_, F>,
    policy: &SpanPolicy,
    nodes_per_class: &[SpanDistNodes],
    items: &[(usize, SpanAction, f64)],
) -> NodeId {
    assert!(!items.is_empty(), "no policy terms to build");
    let mut total: Option<NodeId> = None;
    for (class, action, coeff) in items {
        let lp = policy.log_prob_node(g, nodes_per_class[*class], action);
        let term = g.tape.scale(lp, *coeff);
        total = Some(match total {
            Some(t) => g.tape.add(t, term),
            None => term,
        });
    }
    total.unwrap()
}

/// Gradients and bookkeeping from one REINFORCE step over a batch.
#[derive(Debug)]
pub struct ExtractiveStepOut<F: Scalar> {
    pub policy_grads: BTreeMap<String, Tensor<F>>,
    pub classifier_grads: BTreeMap<String, Tensor<F>>,
    pub mean_reward: f64,
    pub mean_supervised_loss: f64,
    /// Last sampled action set per example, for inspection.
    pub sampled_actions: Vec<Vec<SpanAction>>,
}

/// One joint REINFORCE step over `examples`.
///
/// For each example and each of `b_samples` action sets: realize the
/// descriptions, score them with the classifier, take the gold-outcome
/// probability as the reward, and accumulate `-(R - b) grad log pi` into
/// the policy gradients. The classifier accumulates its supervised loss
/// from the same forward passes. The baseline sees every reward.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_step<F: Scalar>(
    model: &ClassifierModel,
    policy: &SpanPolicy,
    store: &ParamStore<F>,
    registry: &TemplateRegistry,
    vocab: &Vocab,
    examples: &[&Example],
    b_samples: usize,
    baseline: &mut RewardBaseline,
    rng: &mut ChaCha8Rng,
) -> Result<ExtractiveStepOut<F>, ExtractiveError> {
    use rand::Rng;
    use rayon::prelude::*;

    if b_samples < 1 {
        return Err(ExtractiveError::BadSampleCount(b_samples));
    }
    // The baseline is frozen for the whole step (the average of rewards
    // from previous steps) so examples can run in parallel and the result
    // is independent of scheduling; every reward observed here is folded
    // in afterwards, in example order.
    let b = baseline.value();
    let seeds: Vec<u64> = (0..examples.len()).map(|_| rng.gen()).collect();
    let per_example: Vec<_> = examples
        .par_iter()
        .zip(seeds)
        .map(|(ex, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            example_reinforce(model, policy, store, registry, vocab, ex, b_samples, b, &mut rng)
        })
        .collect();

    let mut policy_grads = BTreeMap::new();
    let mut classifier_grads = BTreeMap::new();
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;
    let mut sup_loss_sum = 0.0;
    let mut sampled_actions = Vec::with_capacity(examples.len());
    for out in per_example {
        merge_grads(&mut policy_grads, out.policy_grads);
        merge_grads(&mut classifier_grads, out.classifier_grads);
        for r in out.rewards {
            baseline.update(r);
            reward_sum += r;
            reward_count += 1;
        }
        sup_loss_sum += out.sup_loss;
        sampled_actions.push(out.actions);
    }

    Ok(ExtractiveStepOut {
        policy_grads,
        classifier_grads,
        mean_reward: reward_sum / reward_count.max(1) as f64,
        mean_supervised_loss: sup_loss_sum / examples.len().max(1) as f64,
        sampled_actions,
    })
}

struct ExampleOut<F: Scalar> {
    policy_grads: BTreeMap<String, Tensor<F>>,
    classifier_grads: BTreeMap<String, Tensor<F>>,
    rewards: Vec<f64>,
    sup_loss: f64,
    actions: Vec<SpanAction>,
}

#[allow(clippy::too_many_arguments)]
fn example_reinforce<F: Scalar>(
    model: &ClassifierModel,
    policy: &SpanPolicy,
    store: &ParamStore<F>,
    registry: &TemplateRegistry,
    vocab: &Vocab,
    ex: &Example,
    b_samples: usize,
    b: f64,
    rng: &mut ChaCha8Rng,
) -> ExampleOut<F> {
    let n = policy.n_classes;
    let mut g = Graph::new(store);
    let x = policy.clip_text(&ex.tokens).to_vec();
    let h = policy.encode(&mut g, &x, vocab, None);
    let nodes: Vec<SpanDistNodes> =
        (0..n).map(|c| policy.class_dist_nodes(&mut g, h, c)).collect();
    let dists: Vec<_> = nodes.iter().map(|&nd| policy.dists_values(&g, nd)).collect();

    let mut rl_items: Vec<(usize, SpanAction, f64)> = Vec::new();
    let mut sup_losses: Vec<NodeId> = Vec::new();
    let mut rewards = Vec::new();
    let mut last_actions = vec![SpanAction::dummy(0); n];

    for _ in 0..b_samples {
        let actions: Vec<SpanAction> = dists.iter().map(|d| d.sample(rng)).collect();
        let descs: Vec<TokenSeq> = actions
            .iter()
            .enumerate()
            .map(|(c, a)| realize_description(a, &x, registry, c).tokens)
            .collect();
        match model.formulation {
            Formulation::NClass => {
                let gold = *ex.labels.iter().next().expect("gold label");
                let out = model
                    .forward_multiclass(&mut g, &descs, &x, vocab, None)
                    .expect("packing fits by construction");
                let probs: Vec<f64> =
                    g.value(out.probs).data().iter().map(|v| v.to_f64()).collect();
                let r = reward_multiclass(&probs, gold);
                rewards.push(r);
                for (c, a) in actions.iter().enumerate() {
                    rl_items.push((c, *a, -(r - b)));
                }
                sup_losses.push(model.multiclass_loss(&mut g, out, gold));
            }
            Formulation::NBinary => {
                for (c, a) in actions.iter().enumerate() {
                    let assigned = ex.labels.contains(&c);
                    let out = model
                        .forward_binary(&mut g, &descs[c], &x, None)
                        .expect("packing fits by construction");
                    let p = g.value(out.prob).item().to_f64();
                    let r = reward_binary(p, assigned);
                    rewards.push(r);
                    rl_items.push((c, *a, -(r - b)));
                    sup_losses.push(model.binary_loss(&mut g, out, assigned));
                }
            }
        }
        last_actions = actions;
    }

    let rl_loss = policy_loss_for_items(&mut g, policy, &nodes, &rl_items);
    let policy_grads = g.grads_by_name_present(rl_loss);

    let mut sup_total = sup_losses[0];
    for &l in &sup_losses[1..] {
        sup_total = g.tape.add(sup_total, l);
    }
    let sup_mean = g.tape.scale(sup_total, 1.0 / sup_losses.len() as f64);
    let sup_loss = g.value(sup_mean).item().to_f64();
    let classifier_grads = g.grads_by_name_present(sup_mean);

    ExampleOut { policy_grads, classifier_grads, rewards, sup_loss, actions: last_actions }
}

/// Initialize the pointer heads. `Dummy` and `RougeL` run one supervised
/// epoch of cross-entropy toward their respective target positions;
/// `Random` leaves the raw random vectors in place.
#[allow(clippy::too_many_arguments)]
pub fn init_policy<F: Scalar>(
    mode: InitMode,
    policy: &SpanPolicy,
    store: &mut ParamStore<F>,
    data: &[Example],
    registry: &TemplateRegistry,
    vocab: &Vocab,
    adam: &AdamConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) {
    policy.init_params(store, rng, 0.02);
    if mode == InitMode::Random {
        return;
    }
    let n = policy.n_classes;
    let mut batch_grads: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    let mut in_batch = 0usize;
    for ex in data {
        let x = policy.clip_text(&ex.tokens).to_vec();
        if x.is_empty() {
            continue;
        }
        let mut g = Graph::new(store);
        let h = policy.encode(&mut g, &x, vocab, None);
        let mut loss_total: Option<NodeId> = None;
        for c in 0..n {
            let nodes = policy.class_dist_nodes(&mut g, h, c);
            let target = match (mode, ex.labels.contains(&c)) {
                (InitMode::Dummy, _) | (InitMode::RougeL, false) => InitTarget::Dummy(c),
                (InitMode::RougeL, true) =>

                    best_rouge_window(&x, registry.get_tokens(c).expect("registry class"), policy.l_max),
                (InitMode::Random, _) => unreachable!(),
            };
            let loss = match target {
                InitTarget::Dummy(slot) => {
                    g.tape.cross_entropy(nodes.start_scores, &[slot])
                }
                InitTarget::Span { start, end } => {
                    let ls = g.tape.cross_entropy(nodes.start_scores, &[n + start]);
                    let le = g.tape.cross_entropy(nodes.end_scores, &[n + end]);
                    g.tape.add(ls, le)
                }
            };
            loss_total = Some(match loss_total {
                Some(t) => g.tape.add(t, loss),
                None => loss,
            });
        }
        let loss = loss_total.expect("at least one class");
        merge_grads(&mut batch_grads, g.grads_by_name_present(loss));
        in_batch += 1;
        if in_batch >= batch_size {
            store.adam_step(&batch_grads, adam).expect("shapes match");
            batch_grads.clear();
            in_batch = 0;
        }
    }
    if in_batch > 0 {
        store.adam_step(&batch_grads, adam).expect("shapes match");
    }
}

enum InitTarget {
    Dummy(usize),
    Span { start: usize, end: usize },
}

/// The window (length <= l_max) of `x` with the highest ROUGE-L score
/// against the template; first window wins ties.
fn best_rouge_window(x: &[usize], template: &TokenSeq, l_max: usize) -> InitTarget {
    let mut best = (0usize, 0usize);
    let mut best_score = -1.0;
    for s in 0..x.len() {
        for e in s..x.len().min(s + l_max) {
            let score = rouge_l(&x[s..=e], template).expect("non-empty template");
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    InitTarget::Span { start: best.0, end: best.1 }
}

/// Fraction of examples whose greedy action is a dummy, per class average.
pub fn greedy_dummy_rate<F: Scalar>(
    policy: &SpanPolicy,
    store: &ParamStore<F>,
    data: &[Example],
    vocab: &Vocab,
) -> f64 {
    let mut dummies = 0usize;
    let mut total = 0usize;
    for ex in data {
        for d in policy.distributions(store, &ex.tokens, vocab) {
            if d.greedy().is_dummy {
                dummies += 1;
            }
            total += 1;
        }
    }
    dummies as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::encoder::TransformerEncoder;
    use crate::templates::{load_registry, TemplateVariant};
    use crate::text::{build_vocab, LabelSpace, TaskKind};
    use rand::SeedableRng;

    fn baseline_mean_is_arithmetic() -> RewardBaseline {
        let mut b = RewardBaseline::new();
        for r in [0.2, 0.4, 0.9] {
            b.update(r);
        }
        b
    }

    #[test]
    fn baseline_tracks_running_mean() {
        let b = baseline_mean_is_arithmetic();
        assert!((b.value() - 0.5).abs() < 1e-12);
        assert_eq!(b.count(), 3);
        assert_eq!(RewardBaseline::new().value(), 0.0);
    }

    #[test]
    fn centered_advantage_contributes_zero_gradient() {
        // coeff = -(R - b) = 0 must produce exactly zero policy grads
        let vocab = build_vocab(["a b c d"], 2, 1, 20).unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 16,
            dropout: 0.0,
            vocab_size: vocab.len(),
            segment_count: 2,
        };
        let policy = SpanPolicy::new(TransformerEncoder::new("enc", cfg), 2, 4);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        policy.encoder.init(&mut store, &mut rng);
        policy.init_params(&mut store, &mut rng, 0.1);
        let x = vocab.tokenize("a b c d");
        let mut g = Graph::new(&store);
        let h = policy.encode(&mut g, &x, &vocab, None);
        let nodes: Vec<_> = (0..2).map(|c| policy.class_dist_nodes(&mut g, h, c)).collect();
        let loss = policy_loss_for_items(
            &mut g,
            &policy,
            &nodes,
            &[(0, SpanAction::span(1, 2), 0.0), (1, SpanAction::dummy(1), 0.0)],
        );
        let grads = g.grads_by_name_present(loss);
        for (name, t) in &grads {
            for &v in t.data() {
                assert_eq!(v, 0.0, "nonzero grad in {name}");
            }
        }
    }

    #[test]
    fn reinforce_rejects_zero_samples() {
        let vocab = build_vocab(["a b"], 2, 1, 20).unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 16,
            dropout: 0.0,
            vocab_size: vocab.len(),
            segment_count: 2,
        };
        let model = ClassifierModel::new(Formulation::NClass, cfg.clone(), 2);
        let policy = SpanPolicy::new(TransformerEncoder::new("enc", cfg), 2, 4);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.init(&mut store, &mut rng);
        policy.init_params(&mut store, &mut rng, 0.02);
        let ls = LabelSpace::new(vec!["p".into(), "n".into()], TaskKind::SingleLabel).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(&tmp, r#"{"p": "a", "n": "b"}"#).unwrap();
        let reg = load_registry(TemplateVariant::WikiFile, Some(tmp.path()), &ls, &vocab).unwrap();
        let ex = Example {
            id: "1".into(),
            text: "a b".into(),
            tokens: vocab.tokenize("a b"),
            labels: std::iter::once(0).collect(),
        };
        let mut b = RewardBaseline::new();
        let err = reinforce_step(&model, &policy, &store, &reg, &vocab, &[&ex], 0, &mut b, &mut rng)
            .unwrap_err();
        assert!(matches!(err, ExtractiveError::BadSampleCount(0)));
    }

    #[test]
    fn policy_learns_to_cover_rewarded_position() {
        // Reward 1 iff the sampled span covers the middle position of a
        // 3-token input; the optimum is known by construction.
        let vocab = build_vocab(["a b c"], 2, 1, 20).unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 8,
            dropout: 0.0,
            vocab_size: vocab.len(),
            segment_count: 2,
        };
        let policy = SpanPolicy::new(TransformerEncoder::new("enc", cfg), 2, 3);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        policy.encoder.init(&mut store, &mut rng);
        policy.init_params(&mut store, &mut rng, 0.02);
        let x = vocab.tokenize("a b c");
        let adam = AdamConfig { lr: 5e-3, ..Default::default() };
        let mut baseline = RewardBaseline::new();
        let signal = 1usize;

        for _ in 0..500 {
            let mut g = Graph::new(&store);
            let h = policy.encode(&mut g, &x, &vocab, None);
            let nodes = policy.class_dist_nodes(&mut g, h, 0);
            let dists = policy.dists_values(&g, nodes);
            let mut items = Vec::new();
            for _ in 0..4 {
                let a = dists.sample(&mut rng);
                let r = if a.covers(signal) { 1.0 } else { 0.0 };
                let adv = r - baseline.value();
                baseline.update(r);
                items.push((0usize, a, -adv));
            }
            let loss = policy_loss_for_items(&mut g, &policy, &[nodes, nodes], &items);
            let grads = g.grads_by_name_present(loss);
            store.adam_step(&grads, &adam).unwrap();
        }

        let dists = policy.distributions(&store, &x, &vocab);
        let mass: f64 = dists[0]
            .enumerate_actions()
            .iter()
            .filter(|a| a.covers(signal))
            .map(|a| dists[0].span_prob(a).unwrap())
            .sum();
        assert!(mass > 0.95, "covering mass only {mass}");
        assert!(dists[0].greedy().covers(signal));
    }

    #[test]
    fn exact_gradient_is_baseline_invariant() {
        // sum_a P(a) grad log pi(a) = grad sum_a P(a) = 0, so the exact
        // enumerated gradient ignores any constant baseline.
        let vocab = build_vocab(["a b c d e"], 2, 1, 20).unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 10,
            dropout: 0.0,
            vocab_size: vocab.len(),
            segment_count: 2,
        };
        let policy = SpanPolicy::new(TransformerEncoder::new("enc", cfg), 2, 3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        policy.encoder.init(&mut store, &mut rng);
        policy.init_params(&mut store, &mut rng, 0.2);
        let x = vocab.tokenize("a b c d e");
        let dists = policy.distributions(&store, &x, &vocab);
        let actions = dists[0].enumerate_actions();
        // arbitrary deterministic rewards per action
        let reward = |a: &SpanAction| -> f64 {
            if a.is_dummy {
                0.3
            } else {
                0.1 + 0.8 * ((a.start * 3 + a.end) % 5) as f64 / 4.0
            }
        };
        let exact = |b: f64| -> BTreeMap<String, Tensor<f64>> {
            let mut g = Graph::new(&store);
            let h = policy.encode(&mut g, &x, &vocab, None);
            let nodes = policy.class_dist_nodes(&mut g, h, 0);
            let items: Vec<(usize, SpanAction, f64)> = actions
                .iter()
                .map(|a| (0usize, *a, -dists[0].span_prob(a).unwrap() * (reward(a) - b)))
                .collect();
            let loss = policy_loss_for_items(&mut g, &policy, &[nodes, nodes], &items);
            g.grads_by_name_present(loss)
        };
        let g0 = exact(0.0);
        let g7 = exact(0.7);
        for (name, t0) in &g0 {
            let t7 = &g7[name];
            for (a, b) in t0.data().iter().zip(t7.data()) {
                assert!((a - b).abs() < 1e-6, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rouge_window_finds_verbatim_template() {
        let vocab = build_vocab(["u v a good movie w"], 2, 1, 20).unwrap();
        let x = vocab.tokenize("u v a good movie w");
        let template = vocab.tokenize("a good movie");
        match best_rouge_window(&x, &template, 8) {
            InitTarget::Span { start, end } => {
                assert_eq!((start, end), (2, 4));
            }
            _ => panic!("expected a span"),
        }
    }
}
