//! Small post-norm transformer encoder built from tape primitives: learned
//! token/position/segment embeddings, multi-head self-attention, and a gelu
//! feed-forward block, residual + layer norm around each sublayer.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, ParamStore, Scalar, Tensor};

use super::EncoderConfig;

const INIT_STD: f64 = 0.02;

/// Parameter namespace plus config; the weights themselves live in a
/// [`ParamStore`] under `{prefix}/...`.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub prefix: String,
    pub cfg: EncoderConfig,
}

impl TransformerEncoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Self {
        cfg.validate().expect("invalid encoder config");
        TransformerEncoder { prefix: prefix.to_string(), cfg }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_model;
        let p = &self.prefix;
        store.insert_randn(&format!("{p}/tok_emb"), vec![self.cfg.vocab_size, d], INIT_STD, rng);
        store.insert_randn(&format!("{p}/pos_emb"), vec![self.cfg.max_len, d], INIT_STD, rng);
        store.insert_randn(&format!("{p}/seg_emb"), vec![self.cfg.segment_count, d], INIT_STD, rng);
        self.init_layers(store, rng);
    }

    /// Layer parameters only, for callers that supply their own embeddings.
    pub fn init_layers<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_model;
        let p = &self.prefix;
        for l in 0..self.cfg.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert_randn(&format!("{p}/l{l}/attn/{w}"), vec![d, d], INIT_STD, rng);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert_zeros(&format!("{p}/l{l}/attn/{b}"), vec![d]);
            }
            store.insert_randn(&format!("{p}/l{l}/ffn/w1"), vec![d, self.cfg.d_ff], INIT_STD, rng);
            store.insert_zeros(&format!("{p}/l{l}/ffn/b1"), vec![self.cfg.d_ff]);
            store.insert_randn(&format!("{p}/l{l}/ffn/w2"), vec![self.cfg.d_ff, d], INIT_STD, rng);
            store.insert_zeros(&format!("{p}/l{l}/ffn/b2"), vec![d]);
            for ln in ["ln1", "ln2"] {
                store.insert_full(&format!("{p}/l{l}/{ln}/gamma"), vec![d], 1.0);
                store.insert_zeros(&format!("{p}/l{l}/{ln}/beta"), vec![d]);
            }
        }
    }

    /// Hidden states for one packed sequence: (len, d_model). `dropout_rng`
    /// is consulted only in train mode with a nonzero dropout rate;
    /// evaluation is deterministic.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        ids: &[usize],
        segments: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let len = ids.len();
        assert_eq!(len, segments.len(), "ids and segments must align");
        assert!(
            len <= self.cfg.max_len,
            "input of {len} tokens exceeds max_len {}",
            self.cfg.max_len
        );
        let p = self.prefix.clone();
        let tok_table = g.param(&format!("{p}/tok_emb"));
        let pos_table = g.param(&format!("{p}/pos_emb"));
        let seg_table = g.param(&format!("{p}/seg_emb"));
        let tok = g.tape.embedding(tok_table, ids);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.tape.embedding(pos_table, &positions);
        let seg = g.tape.embedding(seg_table, segments);
        let sum = g.tape.add(tok, pos);
        let mut h = g.tape.add(sum, seg);

        let mut rng = dropout_rng;
        h = self.dropout(g, h, &mut rng);
        for l in 0..self.cfg.layers {
            h = self.layer(g, h, l, &mut rng);
        }
        h
    }

    /// One attention + feed-forward block over externally supplied hidden
    /// states (used by the seq2seq source encoder).
    pub fn layer<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        h: NodeId,
        l: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let p = self.prefix.clone();
        let attn = self.self_attention(g, h, l);
        let attn = self.dropout(g, attn, rng);
        let res = g.tape.add(h, attn);
        let gamma1 = g.param(&format!("{p}/l{l}/ln1/gamma"));
        let beta1 = g.param(&format!("{p}/l{l}/ln1/beta"));
        let h1 = g.tape.layer_norm(res, gamma1, beta1, 1e-5);

        let w1 = g.param(&format!("{p}/l{l}/ffn/w1"));
        let b1 = g.param(&format!("{p}/l{l}/ffn/b1"));
        let w2 = g.param(&format!("{p}/l{l}/ffn/w2"));
        let b2 = g.param(&format!("{p}/l{l}/ffn/b2"));
        let f = g.tape.matmul(h1, w1);
        let f = g.tape.add(f, b1);
        let f = g.tape.gelu(f);
        let f = g.tape.matmul(f, w2);
        let f = g.tape.add(f, b2);
        let f = self.dropout(g, f, rng);
        let res2 = g.tape.add(h1, f);
        let gamma2 = g.param(&format!("{p}/l{l}/ln2/gamma"));
        let beta2 = g.param(&format!("{p}/l{l}/ln2/beta"));
        g.tape.layer_norm(res2, gamma2, beta2, 1e-5)
    }

    fn self_attention<F: Scalar>(&self, g: &mut Graph<'_, F>, h: NodeId, l: usize) -> NodeId {
        let p = self.prefix.clone();
        let d = self.cfg.d_model;
        let nh = self.cfg.heads;
        let dk = d / nh;
        let wq = g.param(&format!("{p}/l{l}/attn/wq"));
        let bq = g.param(&format!("{p}/l{l}/attn/bq"));
        let wk = g.param(&format!("{p}/l{l}/attn/wk"));
        let bk = g.param(&format!("{p}/l{l}/attn/bk"));
        let wv = g.param(&format!("{p}/l{l}/attn/wv"));
        let bv = g.param(&format!("{p}/l{l}/attn/bv"));
        let wo = g.param(&format!("{p}/l{l}/attn/wo"));
        let bo = g.param(&format!("{p}/l{l}/attn/bo"));
        let q = g.tape.matmul(h, wq);
        let q = g.tape.add(q, bq);
        let k = g.tape.matmul(h, wk);
        let k = g.tape.add(k, bk);
        let v = g.tape.matmul(h, wv);
        let v = g.tape.add(v, bv);

        let mut ctx_heads = Vec::with_capacity(nh);
        for head in 0..nh {
            let (a, b) = (head * dk, (head + 1) * dk);
            let qh = g.tape.slice_cols(q, a, b);
            let kh = g.tape.slice_cols(k, a, b);
            let vh = g.tape.slice_cols(v, a, b);
            let kt = g.tape.transpose(kh);
            let scores = g.tape.matmul(qh, kt);
            let scaled = g.tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let attn = g.tape.softmax_last(scaled);
            ctx_heads.push(g.tape.matmul(attn, vh));
        }
        let ctx = if ctx_heads.len() == 1 {
            ctx_heads[0]
        } else {
            g.tape.concat_last(&ctx_heads)
        };
        let out = g.tape.matmul(ctx, wo);
        g.tape.add(out, bo)
    }

    fn dropout<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        if !g.train_mode || self.cfg.dropout <= 0.0 {
            return x;
        }
        let rng = match rng {
            Some(r) => r,
            None => return x,
        };
        use rand::Rng;
        let keep = 1.0 - self.cfg.dropout;
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    F::from_f64(1.0 / keep)
                } else {
                    F::ZERO
                }
            })
            .collect();
        let m = g.constant(Tensor::new(shape, mask));
        g.tape.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 16,
            dropout: 0.0,
            vocab_size: 24,
            segment_count: 2,
        }
    }

    #[test]
    fn output_shape_is_len_by_d_model() {
        let enc = TransformerEncoder::new("enc", tiny_cfg());
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        enc.init(&mut store, &mut rng);
        let mut g = Graph::new(&store);
        let h = enc.forward(&mut g, &[1, 5, 9, 2], &[0, 0, 1, 1], None);
        assert_eq!(g.value(h).shape(), &[4, 8]);
    }

    #[test]
    fn eval_mode_double_run_is_bit_identical() {
        let enc = TransformerEncoder::new("enc", tiny_cfg());
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        enc.init(&mut store, &mut rng);
        let run = || {
            let mut g = Graph::new(&store);
            let h = enc.forward(&mut g, &[3, 4, 5], &[0, 1, 1], None);
            g.value(h).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    #[should_panic(expected = "exceeds max_len")]
    fn over_length_input_panics() {
        let enc = TransformerEncoder::new("enc", tiny_cfg());
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        enc.init(&mut store, &mut rng);
        let mut g = Graph::new(&store);
        let ids = vec![1usize; 17];
        let segs = vec![0usize; 17];
        let _ = enc.forward(&mut g, &ids, &segs, None);
    }

    #[test]
    fn permutation_equivariant_with_positions_zeroed() {
        // With position embeddings zeroed, swapping two tokens permutes the
        // corresponding output rows exactly.
        let enc = TransformerEncoder::new("enc", tiny_cfg());
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.init(&mut store, &mut rng);
        store.insert_zeros("enc/pos_emb", vec![16, 8]);
        let run = |ids: &[usize]| {
            let mut g = Graph::new(&store);
            let h = enc.forward(&mut g, ids, &[0; 4], None);
            g.value(h).data().to_vec()
        };
        let a = run(&[7, 8, 9, 10]);
        let b = run(&[7, 9, 8, 10]);
        let d = 8;
        for j in 0..d {
            assert!((a[d + j] - b[2 * d + j]).abs() < 1e-9);
            assert!((a[2 * d + j] - b[d + j]).abs() < 1e-9);
            assert!((a[j] - b[j]).abs() < 1e-9);
            assert!((a[3 * d + j] - b[3 * d + j]).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let enc = TransformerEncoder::new("enc", tiny_cfg());
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        enc.init(&mut store, &mut rng);
        let enc2 = enc.clone();
        let report = grad_check(
            &store,
            move |g| {
                let h = enc2.forward(g, &[2, 7, 11, 3], &[0, 0, 1, 1], None);
                // weight rows asymmetrically so every row matters
                let w = g.constant(Tensor::new(
                    vec![4, 8],
                    (0..32).map(|i| ((i % 7) as f64) * 0.3 - 0.9).collect(),
                ));
                let p = g.tape.mul(h, w);
                g.tape.sum(p)
            },
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "{report}");
    }
}
