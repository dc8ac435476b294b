//! Classification heads over the encoded [CLS] rows, and the decision
//! rules that turn probabilities into label sets.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::text::{TaskKind, TokenSeq, Vocab};

use super::pack::{pack_binary, pack_multiclass, pack_plain, PackLayout};
use super::transformer::TransformerEncoder;
use super::{EncoderConfig, EncoderError};

const INIT_STD: f64 = 0.02;

/// Which classifier shape the run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// N independent yes/no heads, one pack per class.
    NBinary,
    /// One pack carrying all N descriptions, one softmax over the [CLSn] rows.
    NClass,
}

/// Probabilities as the decision rules see them.
#[derive(Clone, Debug)]
pub enum ClassProbs {
    /// N independent probabilities, each in (0,1).
    BinarySet(Vec<f64>),
    /// One distribution over N classes (sums to 1).
    Multiclass(Vec<f64>),
}

/// Label set from probabilities: multi-label thresholds each class at 0.5,
/// single-label takes the argmax (ties to the lowest index). The one
/// N-class formulation cannot express independent per-class decisions, so
/// pairing it with a multi-label task is an error.
pub fn decide(probs: &ClassProbs, task: TaskKind) -> Result<BTreeSet<usize>, EncoderError> {
    match (probs, task) {
        (ClassProbs::BinarySet(ps), TaskKind::MultiLabel) => {
            Ok(ps.iter().enumerate().filter(|(_, &p)| p > 0.5).map(|(i, _)| i).collect())
        }
        (ClassProbs::BinarySet(ps), TaskKind::SingleLabel)
        | (ClassProbs::Multiclass(ps), TaskKind::SingleLabel) => {
            let mut best = 0;
            for (i, &p) in ps.iter().enumerate() {
                if p > ps[best] {
                    best = i;
                }
            }
            Ok(std::iter::once(best).collect())
        }
        (ClassProbs::Multiclass(_), TaskKind::MultiLabel) => {
            Err(EncoderError::MulticlassMultiLabel)
        }
    }
}

/// Output of a binary-head forward: the probability and the raw logit the
/// stable supervised loss is built from.
#[derive(Clone, Copy, Debug)]
pub struct BinaryOut {
    pub prob: NodeId,
    pub logit: NodeId,
}

/// Output of a multiclass forward: softmax probabilities and the scores
/// they came from.
#[derive(Clone, Copy, Debug)]
pub struct MulticlassOut {
    pub probs: NodeId,
    pub scores: NodeId,
}

/// The description-conditioned classifier: shared encoder plus either the
/// two-layer sigmoid head or the shared-vector softmax head.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub formulation: Formulation,
    pub encoder: TransformerEncoder,
    pub n_classes: usize,
}

impl ClassifierModel {
    pub fn new(formulation: Formulation, cfg: EncoderConfig, n_classes: usize) -> Self {
        ClassifierModel {
            formulation,
            encoder: TransformerEncoder::new("enc", cfg),
            n_classes,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.encoder.init(store, rng);
        let d = self.encoder.cfg.d_model;
        match self.formulation {
            Formulation::NBinary => {
                store.insert_randn("clf/bin/w1", vec![d, d], INIT_STD, rng);
                store.insert_zeros("clf/bin/b1", vec![d]);
                store.insert_randn("clf/bin/w2", vec![d, 1], INIT_STD, rng);
                store.insert_zeros("clf/bin/b2", vec![1]);
            }
            Formulation::NClass => {
                store.insert_randn("clf/mc/h_hat", vec![d, 1], INIT_STD, rng);
            }
        }
    }

    /// p(y|x) = sigmoid(W2 relu(W1 h_cls + b1) + b2) for one packed
    /// `[CLS] q_y [SEP] x`.
    pub fn forward_binary<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        desc: &TokenSeq,
        text: &TokenSeq,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BinaryOut, EncoderError> {
        assert_eq!(self.formulation, Formulation::NBinary, "binary forward on NClass model");
        let packed = pack_binary(desc, text, &self.encoder.cfg)?;
        let h = self.encoder.forward(g, &packed.ids, &packed.segments, dropout_rng);
        let cls = match packed.layout {
            PackLayout::Binary { cls_position } => cls_position,
            _ => unreachable!(),
        };
        Ok(self.binary_head(g, h, cls))
    }

    /// The Eq.-style two-layer head over one [CLS] row of `h`.
    pub fn binary_head<F: Scalar>(&self, g: &mut Graph<'_, F>, h: NodeId, cls_position: usize) -> BinaryOut {
        let h_cls = g.tape.select_rows(h, &[cls_position]);
        let w1 = g.param("clf/bin/w1");
        let b1 = g.param("clf/bin/b1");
        let w2 = g.param("clf/bin/w2");
        let b2 = g.param("clf/bin/b2");
        let a = g.tape.matmul(h_cls, w1);
        let a = g.tape.add(a, b1);
        let a = g.tape.relu(a);
        let z = g.tape.matmul(a, w2);
        let z = g.tape.add(z, b2);
        let p = g.tape.sigmoid(z);
        BinaryOut { prob: p, logit: z }
    }

    /// Stable binary cross-entropy on the head logit: sigmoid(z) equals
    /// softmax([z, 0])[0], so the loss reuses the log-sum-exp path.
    pub fn binary_loss<F: Scalar>(&self, g: &mut Graph<'_, F>, out: BinaryOut, assigned: bool) -> NodeId {
        let zero = g.constant(Tensor::new(vec![1, 1], vec![F::ZERO]));
        let logits = g.tape.concat_last(&[out.logit, zero]);
        g.tape.cross_entropy(logits, &[if assigned { 0 } else { 1 }])
    }

    /// a_n = h_hat . h\[CLSn\]; probs = softmax(a_1..a_N), for one packed
    /// `[CLS1] q_1 ... [CLSN] q_N [SEP] x`.
    pub fn forward_multiclass<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        descs: &[TokenSeq],
        text: &TokenSeq,
        vocab: &Vocab,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<MulticlassOut, EncoderError> {
        assert_eq!(self.formulation, Formulation::NClass, "multiclass forward on NBinary model");
        assert_eq!(descs.len(), self.n_classes, "need one description per class");
        let packed = pack_multiclass(descs, text, vocab, &self.encoder.cfg)?;
        let h = self.encoder.forward(g, &packed.ids, &packed.segments, dropout_rng);
        let cls_positions = match packed.layout {
            PackLayout::Multiclass { cls_positions } => cls_positions,
            _ => unreachable!(),
        };
        Ok(self.multiclass_head(g, h, &cls_positions))
    }

    pub fn multiclass_head<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        h: NodeId,
        cls_positions: &[usize],
    ) -> MulticlassOut {
        let rows = g.tape.select_rows(h, cls_positions);
        let h_hat = g.param("clf/mc/h_hat");
        let scores_col = g.tape.matmul(rows, h_hat);
        let scores = g.tape.transpose(scores_col);
        let probs = g.tape.softmax_last(scores);
        MulticlassOut { probs, scores }
    }

    pub fn multiclass_loss<F: Scalar>(&self, g: &mut Graph<'_, F>, out: MulticlassOut, gold: usize) -> NodeId {
        g.tape.cross_entropy(out.scores, &[gold])
    }
}

/// Same-capacity encoder with a plain softmax head and no descriptions:
/// the ablation baseline.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub encoder: TransformerEncoder,
    pub n_classes: usize,
}

impl BaselineModel {
    pub fn new(cfg: EncoderConfig, n_classes: usize) -> Self {
        BaselineModel { encoder: TransformerEncoder::new("enc", cfg), n_classes }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.encoder.init(store, rng);
        let d = self.encoder.cfg.d_model;
        store.insert_randn("clf/base/w", vec![d, self.n_classes], INIT_STD, rng);
        store.insert_zeros("clf/base/b", vec![self.n_classes]);
    }

    /// Softmax over N from the [CLS] row of `[CLS] x`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        text: &TokenSeq,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> MulticlassOut {
        let packed = pack_plain(text, &self.encoder.cfg);
        let h = self.encoder.forward(g, &packed.ids, &packed.segments, dropout_rng);
        let cls = g.tape.select_rows(h, &[0]);
        let w = g.param("clf/base/w");
        let b = g.param("clf/base/b");
        let scores = g.tape.matmul(cls, w);
        let scores = g.tape.add(scores, b);
        let probs = g.tape.softmax_last(scores);
        MulticlassOut { probs, scores }
    }

    pub fn loss<F: Scalar>(&self, g: &mut Graph<'_, F>, out: MulticlassOut, gold: usize) -> NodeId {
        g.tape.cross_entropy(out.scores, &[gold])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::text::build_vocab;
    use rand::SeedableRng;

    fn tiny_cfg(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 20,
            dropout: 0.0,
            vocab_size,
            segment_count: 2,
        }
    }

    #[test]
    fn zeroed_binary_head_outputs_half() {
        let v = build_vocab(["good movie fun"], 2, 1, 10).unwrap();
        let model = ClassifierModel::new(Formulation::NBinary, tiny_cfg(v.len()), 2);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.init(&mut store, &mut rng);
        store.insert_zeros("clf/bin/w1", vec![8, 8]);
        store.insert_zeros("clf/bin/w2", vec![8, 1]);
        let mut g = Graph::new(&store);
        let out = model
            .forward_binary(&mut g, &v.tokenize("good"), &v.tokenize("movie fun"), None)
            .unwrap();
        assert!((g.value(out.prob).item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn binary_prob_strictly_inside_unit_interval() {
        let v = build_vocab(["a b c d e"], 2, 1, 10).unwrap();
        let model = ClassifierModel::new(Formulation::NBinary, tiny_cfg(v.len()), 2);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        model.init(&mut store, &mut rng);
        for text in ["a b", "c d e", "e"] {
            let mut g = Graph::new(&store);
            let out = model
                .forward_binary(&mut g, &v.tokenize("a"), &v.tokenize(text), None)
                .unwrap();
            let p = g.value(out.prob).item();
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
    }

    #[test]
    fn zero_h_hat_gives_uniform_multiclass() {
        let v = build_vocab(["a b t"], 3, 1, 10).unwrap();
        let model = ClassifierModel::new(Formulation::NClass, tiny_cfg(v.len()), 3);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.init(&mut store, &mut rng);
        store.insert_zeros("clf/mc/h_hat", vec![8, 1]);
        let mut g = Graph::new(&store);
        let descs = vec![v.tokenize("a"), v.tokenize("b"), v.tokenize("t")];
        let out = model
            .forward_multiclass(&mut g, &descs, &v.tokenize("t"), &v, None)
            .unwrap();
        for &p in g.value(out.probs).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn multiclass_probs_sum_to_one_and_shift_invariant() {
        let v = build_vocab(["a b t u"], 2, 1, 10).unwrap();
        let model = ClassifierModel::new(Formulation::NClass, tiny_cfg(v.len()), 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.init(&mut store, &mut rng);
        let mut g = Graph::new(&store);
        let descs = vec![v.tokenize("a"), v.tokenize("b")];
        let out = model
            .forward_multiclass(&mut g, &descs, &v.tokenize("t u"), &v, None)
            .unwrap();
        let probs = g.value(out.probs).data().to_vec();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        // shifting every score by a constant leaves the softmax unchanged
        let scores = g.value(out.scores).data().to_vec();
        let mut g2 = Graph::new(&store);
        let shifted = g2.constant(Tensor::new(
            vec![1, 2],
            scores.iter().map(|s| s + 7.5).collect(),
        ));
        let s2 = g2.tape.softmax_last(shifted);
        for (a, b) in g2.value(s2).data().iter().zip(&probs) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn decide_binary_multilabel_thresholds_at_half() {
        let probs = ClassProbs::BinarySet(vec![0.6, 0.4, 0.51]);
        let set = decide(&probs, TaskKind::MultiLabel).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn decide_single_label_ties_to_lowest_index() {
        let probs = ClassProbs::BinarySet(vec![0.3, 0.3]);
        let set = decide(&probs, TaskKind::SingleLabel).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn decide_rejects_multiclass_multilabel() {
        let probs = ClassProbs::Multiclass(vec![0.5, 0.5]);
        assert!(matches!(
            decide(&probs, TaskKind::MultiLabel),
            Err(EncoderError::MulticlassMultiLabel)
        ));
    }

    #[test]
    fn decide_invariant_under_monotone_transforms() {
        // argmax and the 0.5 threshold depend only on order / sign of p-0.5,
        // so a strictly monotone map that fixes 0.5 changes nothing.
        let ps = vec![0.2, 0.7, 0.55, 0.31];
        let mono = |p: f64| 0.5 + (p - 0.5).tanh() * 0.49;
        let mapped: Vec<f64> = ps.iter().map(|&p| mono(p)).collect();
        for task in [TaskKind::SingleLabel, TaskKind::MultiLabel] {
            let a = decide(&ClassProbs::BinarySet(ps.clone()), task).unwrap();
            let b = decide(&ClassProbs::BinarySet(mapped.clone()), task).unwrap();
            assert_eq!(a, b);
        }
        let a = decide(&ClassProbs::Multiclass(ps.clone()), TaskKind::SingleLabel).unwrap();
        let b = decide(&ClassProbs::Multiclass(mapped), TaskKind::SingleLabel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_sums_to_one_and_matches_encoder_size() {
        let v = build_vocab(["t u w"], 3, 1, 10).unwrap();
        let cfg = tiny_cfg(v.len());
        let baseline = BaselineModel::new(cfg.clone(), 3);
        let mut bstore: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        baseline.init(&mut bstore, &mut rng);
        let mut g = Graph::new(&bstore);
        let out = baseline.forward(&mut g, &v.tokenize("t u w"), None);
        let total: f32 = g.value(out.probs).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);

        // encoder parameter count matches the description model's encoder
        let clf = ClassifierModel::new(Formulation::NClass, cfg, 3);
        let mut cstore: ParamStore<f32> = ParamStore::new();
        clf.init(&mut cstore, &mut rng);
        let b_enc = bstore.count_coords("enc/");
        let c_enc = cstore.count_coords("enc/");
        let rel = (b_enc as f64 - c_enc as f64).abs() / c_enc as f64;
        assert!(rel <= 0.05, "encoder sizes diverge: {b_enc} vs {c_enc}");
    }

    #[test]
    fn full_binary_model_gradient_check() {
        let v = build_vocab(["good bad movie show fine"], 2, 1, 20).unwrap();
        let model = ClassifierModel::new(Formulation::NBinary, tiny_cfg(v.len()), 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        model.init(&mut store, &mut rng);
        let desc = v.tokenize("good");
        let text = v.tokenize("movie show fine bad");
        let m2 = model.clone();
        let report = grad_check(
            &store,
            move |g| {
                let out = m2.forward_binary(g, &desc, &text, None).unwrap();
                m2.binary_loss(g, out, true)
            },
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn full_multiclass_model_gradient_check() {
        let v = build_vocab(["good bad movie show fine neutral"], 3, 1, 20).unwrap();
        let model = ClassifierModel::new(Formulation::NClass, tiny_cfg(v.len()), 3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        model.init(&mut store, &mut rng);
        let descs = vec![v.tokenize("good"), v.tokenize("bad"), v.tokenize("neutral")];
        let text = v.tokenize("movie show fine");
        let m2 = model.clone();
        let v2 = v.clone();
        let report = grad_check(
            &store,
            move |g| {
                let out = m2.forward_multiclass(g, &descs, &text, &v2, None).unwrap();
                m2.multiclass_loss(g, out, 1)
            },
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn pipeline_never_produces_nan_on_random_inputs() {
        use rand::Rng;
        let v = build_vocab(["a b c d e f g h i j k"], 3, 1, 30).unwrap();
        let model = ClassifierModel::new(Formulation::NClass, tiny_cfg(v.len()), 3);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.init(&mut store, &mut rng);
        let words = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"];
        for _ in 0..10_000 {
            let len = rng.gen_range(1..6);
            let text: Vec<usize> = (0..len)
                .map(|_| v.id_of(words[rng.gen_range(0..words.len())]).unwrap())
                .collect();
            let descs = vec![v.tokenize("a"), v.tokenize("b"), v.tokenize("c")];
            let mut g = Graph::new(&store);
            let out = model.forward_multiclass(&mut g, &descs, &text, &v, None).unwrap();
            for &p in g.value(out.probs).data() {
                assert!(p.is_finite());
            }
        }
    }
}
