//! Training loops for the four strategies and strategy-aware evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::abstractive::{
    generate, pretrain_step, regs_step, DecodeMode, Seq2SeqConfig, Seq2SeqModel,
};
use crate::checkpoint;
use crate::encoder::{
    decide, BaselineModel, ClassProbs, ClassifierModel, EncoderConfig, Formulation,
    TransformerEncoder,
};
use crate::extractive::{init_policy, reinforce_step, RewardBaseline, SpanPolicy};
use crate::templates::{Provenance, RawRegistry, TemplateRegistry, TemplateVariant};
use crate::tensor::{merge_grads, scale_grads, Graph, ParamStore, Tensor};
use crate::text::{
    build_vocab, load_dataset, load_label_space, Example, LabelSpace, TaskKind, TokenSeq, Vocab,
};

use super::metrics::{score_predictions, Metrics};
use super::{HarnessError, RunConfig, Strategy};

/// One epoch's test-set snapshot.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_error: f64,
    pub test_micro_f1: f64,
    pub mean_train_loss: f64,
}

/// The trained models behind a run.
#[derive(Clone)]
pub enum ModelBundle {
    Baseline(BaselineModel),
    Template(ClassifierModel),
    Extractive { clf: ClassifierModel, policy: SpanPolicy },
    Abstractive { clf: ClassifierModel, abs: Seq2SeqModel },
}

pub struct TrainOutcome {
    pub cfg: RunConfig,
    pub store: ParamStore<f32>,
    pub vocab: Vocab,
    pub label_space: LabelSpace,
    pub registry: Option<TemplateRegistry>,
    pub bundle: ModelBundle,
    pub metrics: Metrics,
    pub epoch_log: Vec<EpochRecord>,
}

fn encoder_config(cfg: &RunConfig, vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        layers: cfg.encoder.layers,
        heads: cfg.encoder.heads,
        d_model: cfg.encoder.d_model,
        d_ff: cfg.encoder.d_ff,
        max_len: cfg.encoder.max_len,
        dropout: cfg.encoder.dropout,
        vocab_size,
        segment_count: 2,
    }
}

fn registry_variant_path(cfg: &RunConfig) -> Option<&std::path::Path> {
    match cfg.template_variant {
        TemplateVariant::LabelIndex => None,
        TemplateVariant::Keyword => cfg
            .data
            .registry_keyword
            .as_deref()
            .or(cfg.data.registry.as_deref()),
        TemplateVariant::KeywordExpansion => cfg
            .data
            .registry_expansion
            .as_deref()
            .or(cfg.data.registry.as_deref()),
        TemplateVariant::WikiFile => cfg.data.registry.as_deref(),
    }
}

/// Run one full training job as described by the config.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    let label_space = load_label_space(&cfg.data.labels)?;
    cfg.validate(label_space.task_kind)?;
    let mut train_set = load_dataset(&cfg.data.train, &label_space)?;
    let mut test_set = load_dataset(&cfg.data.test, &label_space)?;

    // seed-paired subsetting: the shuffle depends only on the run seed, so
    // grid points sharing a seed train on the identical subset
    if cfg.data_fraction < 1.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDA7A_5EED);
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        idx.shuffle(&mut rng);
        let keep = ((train_set.len() as f64) * cfg.data_fraction).ceil() as usize;
        let mut kept: Vec<Example> = idx[..keep.max(1)]
            .iter()
            .map(|&i| train_set[i].clone())
            .collect();
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        train_set = kept;
    }

    // registry text participates in vocabulary building so template words
    // are never [UNK]
    let raw_registry = if cfg.strategy == Strategy::Baseline {
        None
    } else {
        Some(RawRegistry::read(
            cfg.template_variant,
            registry_variant_path(cfg),
            &label_space,
        )?)
    };
    let registry_texts: Vec<&str> = raw_registry
        .as_ref()
        .map(|r| r.per_class.iter().map(|s| s.as_str()).collect())
        .unwrap_or_default();
    let vocab = build_vocab(
        train_set
            .iter()
            .map(|e| e.text.as_str())
            .chain(registry_texts),
        label_space.n,
        cfg.vocab.min_freq,
        cfg.vocab.max_size,
    )?;
    for ex in train_set.iter_mut().chain(test_set.iter_mut()) {
        ex.retokenize(&vocab);
    }
    let registry = raw_registry
        .map(|r| r.build(&vocab, &label_space))
        .transpose()?;

    let enc_cfg = encoder_config(cfg, vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore<f32> = ParamStore::new();

    let bundle = match cfg.strategy {
        Strategy::Baseline => {
            let model = BaselineModel::new(enc_cfg, label_space.n);
            model.init(&mut store, &mut rng);
            ModelBundle::Baseline(model)
        }
        Strategy::Template => {
            let model = ClassifierModel::new(cfg.formulation, enc_cfg, label_space.n);
            model.init(&mut store, &mut rng);
            ModelBundle::Template(model)
        }
        Strategy::Extractive => {
            let model = ClassifierModel::new(cfg.formulation, enc_cfg.clone(), label_space.n);
            model.init(&mut store, &mut rng);
            let policy = SpanPolicy::new(
                TransformerEncoder::new("enc", enc_cfg),
                label_space.n,
                cfg.l_max,
            );
            ModelBundle::Extractive { clf: model, policy }
        }
        Strategy::Abstractive => {
            let model = ClassifierModel::new(cfg.formulation, enc_cfg.clone(), label_space.n);
            model.init(&mut store, &mut rng);
            let abs = Seq2SeqModel::new(Seq2SeqConfig {
                d_model: cfg.encoder.d_model,
                vocab_size: vocab.len(),
                n_classes: label_space.n,
                max_src_len: cfg.encoder.max_len,
                max_desc_len: cfg.desc_max_len,
            });
            abs.init(&mut store, &mut rng);
            ModelBundle::Abstractive { clf: model, abs }
        }
    };

    let mut outcome = TrainOutcome {
        cfg: cfg.clone(),
        store,
        vocab,
        label_space,
        registry,
        bundle,
        metrics: Metrics::default(),
        epoch_log: Vec::new(),
    };
    run_epochs(&mut outcome, &train_set, &test_set, &mut rng)?;

    outcome.metrics = evaluate(&outcome, &test_set, cfg.eval_buckets.as_deref())?;
    if let Some(dir) = &cfg.out_dir {
        persist(&outcome, &test_set, dir)?;
    }
    Ok(outcome)
}

fn run_epochs(
    out: &mut TrainOutcome,
    train_set: &[Example],
    test_set: &[Example],
    rng: &mut ChaCha8Rng,
) -> Result<(), HarnessError> {
    let cfg = out.cfg.clone();

    // strategy-specific initialization phases
    match (&out.bundle, &out.registry) {
        (ModelBundle::Extractive { policy, .. }, Some(registry)) => {
            init_policy(
                cfg.init_mode,
                policy,
                &mut out.store,
                train_set,
                registry,
                &out.vocab,
                &cfg.optimizer,
                cfg.batch_size,
                rng,
            );
        }
        (ModelBundle::Abstractive { abs, .. }, Some(registry)) => {
            let abs = abs.clone();
            pretrain_abstractive(out, &abs, registry.clone(), train_set, rng)?;
        }
        _ => {}
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut baseline = RewardBaseline::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (grads, batch_loss) = batch_gradients(out, &batch, &mut baseline, rng)?;
            if !batch_loss.is_finite() {
                return Err(HarnessError::Diverged { epoch });
            }
            let mut grads = grads;
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            out.store
                .adam_step(&grads, &cfg.optimizer)
                .expect("gradient shapes match parameters");
            loss_sum += batch_loss;
            loss_batches += 1;
        }
        let m = evaluate(out, test_set, None)?;
        out.epoch_log.push(EpochRecord {
            epoch,
            test_error: m.error_rate,
            test_micro_f1: m.micro_f1,
            mean_train_loss: loss_sum / loss_batches.max(1) as f64,
        });
        if let Some(dir) = &cfg.out_dir {
            std::fs::create_dir_all(dir)?;
            checkpoint::save(&out.store, &dir.join("model.ckpt"))?;
        }
    }
    Ok(())
}

fn pretrain_abstractive(
    out: &mut TrainOutcome,
    abs: &Seq2SeqModel,
    registry: TemplateRegistry,
    train_set: &[Example],
    rng: &mut ChaCha8Rng,
) -> Result<(), HarnessError> {
    let cfg = out.cfg.clone();
    let n = out.label_space.n;
    let templates: Vec<TokenSeq> = (0..n)
        .map(|c| registry.get_tokens(c).expect("registry class").clone())
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let per: Vec<_> = batch
                .par_iter()
                .map(|ex| {
                    let x = abs.clip_src(&ex.tokens).to_vec();
                    let mut grads = BTreeMap::new();
                    let mut loss = 0.0;
                    if x.is_empty() {
                        return (grads, loss);
                    }
                    for (c, template) in templates.iter().enumerate() {
                        let (l, g) = pretrain_step(abs, &out.store, &x, c, template);
                        loss += l;
                        merge_grads(&mut grads, g);
                    }
                    (grads, loss / templates.len() as f64)
                })
                .collect();
            let mut grads = BTreeMap::new();
            let mut loss_sum = 0.0;
            for (g, l) in per {
                merge_grads(&mut grads, g);
                loss_sum += l;
            }
            if !loss_sum.is_finite() {
                return Err(HarnessError::Diverged { epoch: 0 });
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            out.store
                .adam_step(&grads, &cfg.optimizer)
                .expect("gradient shapes match parameters");
        }
    }
    Ok(())
}

/// One batch worth of gradients plus a scalar progress loss (strategy
/// specific: supervised loss, or negative reward for the RL strategies).
fn batch_gradients(
    out: &TrainOutcome,
    batch: &[&Example],
    baseline: &mut RewardBaseline,
    rng: &mut ChaCha8Rng,
) -> Result<(BTreeMap<String, Tensor<f32>>, f64), HarnessError> {
    let vocab = &out.vocab;
    let task = out.label_space.task_kind;
    match &out.bundle {
        ModelBundle::Baseline(model) => {
            let per: Vec<_> = batch
                .par_iter()
                .map(|ex| {
                    let mut g = Graph::new(&out.store);
                    let o = model.forward(&mut g, &ex.tokens, None);
                    let loss = match task {
                        TaskKind::SingleLabel => {
                            let gold = *ex.labels.iter().next().unwrap();
                            model.loss(&mut g, o, gold)
                        }
                        TaskKind::MultiLabel => {
                            multilabel_scores_loss(&mut g, o.scores, &ex.labels, model.n_classes)
                        }
                    };
                    (g.value(loss).item() as f64, g.grads_by_name_present(loss))
                })
                .collect();
            Ok(fold_losses(per))
        }
        ModelBundle::Template(model) => {
            let registry = out.registry.as_ref().expect("template strategy has a registry");
            let descs = registry.all_tokens();
            let per: Vec<_> = batch
                .par_iter()
                .map(|ex| {
                    let mut g = Graph::new(&out.store);
                    let loss = supervised_description_loss(
                        model, &mut g, &descs, &ex.tokens, &ex.labels, vocab,
                    );
                    (g.value(loss).item() as f64, g.grads_by_name_present(loss))
                })
                .collect();
            Ok(fold_losses(per))
        }
        ModelBundle::Extractive { clf, policy } => {
            let registry = out.registry.as_ref().expect("extractive strategy has a registry");
            let step = reinforce_step(
                clf,
                policy,
                &out.store,
                registry,
                vocab,
                batch,
                out.cfg.b_samples,
                baseline,
                rng,
            )
            .map_err(|e| HarnessError::Config(e.to_string()))?;
            let mut grads = step.policy_grads;
            merge_grads(&mut grads, step.classifier_grads);
            Ok((grads, step.mean_supervised_loss))
        }
        ModelBundle::Abstractive { clf, abs } => {
            let step = regs_step(abs, clf, &out.store, vocab, batch, rng);
            let mut grads = step.policy_grads;
            merge_grads(&mut grads, step.classifier_grads);
            // progress signal: distance from perfect reward
            Ok((grads, 1.0 - step.mean_final_reward))
        }
    }
}

fn fold_losses(
    per: Vec<(f64, BTreeMap<String, Tensor<f32>>)>,
) -> (BTreeMap<String, Tensor<f32>>, f64) {
    let mut grads = BTreeMap::new();
    let mut loss = 0.0;
    let n = per.len().max(1);
    for (l, g) in per {
        loss += l;
        merge_grads(&mut grads, g);
    }
    (grads, loss / n as f64)
}

/// Supervised loss for a description-conditioned model on one example.
fn supervised_description_loss(
    model: &ClassifierModel,
    g: &mut Graph<'_, f32>,
    descs: &[TokenSeq],
    text: &TokenSeq,
    labels: &BTreeSet<usize>,
    vocab: &Vocab,
) -> crate::tensor::NodeId {
    match model.formulation {
        Formulation::NClass => {
            let gold = *labels.iter().next().unwrap();
            let out = model
                .forward_multiclass(g, descs, text, vocab, None)
                .expect("packing fits");
            model.multiclass_loss(g, out, gold)
        }
        Formulation::NBinary => {
            let mut losses = Vec::with_capacity(descs.len());
            for (c, desc) in descs.iter().enumerate() {
                let out = model.forward_binary(g, desc, text, None).expect("packing fits");
                losses.push(model.binary_loss(g, out, labels.contains(&c)));
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.tape.add(total, l);
            }
            g.tape.scale(total, 1.0 / losses.len() as f64)
        }
    }
}

/// Per-class binary cross-entropy over the baseline's score vector, for
/// multi-label tasks (sigmoid per class via the two-logit trick).
fn multilabel_scores_loss(
    g: &mut Graph<'_, f32>,
    scores: crate::tensor::NodeId,
    labels: &BTreeSet<usize>,
    n_classes: usize,
) -> crate::tensor::NodeId {
    let mut losses = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let z = g.tape.slice_cols(scores, c, c + 1);
        let zero = g.constant(Tensor::new(vec![1, 1], vec![0.0f32]));
        let two = g.tape.concat_last(&[z, zero]);
        let target = if labels.contains(&c) { 0 } else { 1 };
        losses.push(g.tape.cross_entropy(two, &[target]));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.tape.add(total, l);
    }
    g.tape.scale(total, 1.0 / n_classes as f64)
}

/// Predicted label sets for a dataset under the outcome's strategy:
/// templates stay fixed, the extractive policy realizes its greedy spans,
/// the abstractive model decodes greedily.
pub fn predictions(
    out: &TrainOutcome,
    examples: &[Example],
) -> Result<Vec<BTreeSet<usize>>, HarnessError> {
    let task = out.label_space.task_kind;
    let vocab = &out.vocab;
    let results: Vec<Result<BTreeSet<usize>, HarnessError>> = examples
        .par_iter()
        .map(|ex| {
            let probs = example_probs(out, ex)?;
            decide(&probs, task).map_err(HarnessError::from)
        })
        .collect();
    results.into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| {
        let _ = vocab;
        e
    })
}

fn example_probs(out: &TrainOutcome, ex: &Example) -> Result<ClassProbs, HarnessError> {
    let vocab = &out.vocab;
    let task = out.label_space.task_kind;
    match &out.bundle {
        ModelBundle::Baseline(model) => {
            let mut g = Graph::new(&out.store);
            let o = model.forward(&mut g, &ex.tokens, None);
            match task {
                TaskKind::SingleLabel => Ok(ClassProbs::Multiclass(
                    g.value(o.probs).data().iter().map(|&v| v as f64).collect(),
                )),
                TaskKind::MultiLabel => {
                    let s = g.tape.sigmoid(o.scores);
                    Ok(ClassProbs::BinarySet(
                        g.value(s).data().iter().map(|&v| v as f64).collect(),
                    ))
                }
            }
        }
        ModelBundle::Template(model) => {
            let registry = out.registry.as_ref().expect("registry present");
            description_probs(model, out, &registry.all_tokens(), ex)
        }
        ModelBundle::Extractive { clf, policy } => {
            let registry = out.registry.as_ref().expect("registry present");
            let x = policy.clip_text(&ex.tokens).to_vec();
            let descs: Vec<TokenSeq> = policy
                .distributions(&out.store, &x, vocab)
                .iter()
                .enumerate()
                .map(|(c, d)| {
                    crate::extractive::realize_description(&d.greedy(), &x, registry, c).tokens
                })
                .collect();
            description_probs(clf, out, &descs, ex)
        }
        ModelBundle::Abstractive { clf, abs } => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = abs.clip_src(&ex.tokens).to_vec();
            if x.is_empty() {
                return Ok(match clf.formulation {
                    Formulation::NClass => ClassProbs::Multiclass(vec![
                        1.0 / out.label_space.n as f64;
                        out.label_space.n
                    ]),
                    Formulation::NBinary => ClassProbs::BinarySet(vec![0.5; out.label_space.n]),
                });
            }
            let descs: Vec<TokenSeq> = (0..out.label_space.n)
                .map(|c| {
                    let (tokens, _) = generate(abs, &out.store, &x, c, DecodeMode::Greedy, &mut rng);
                    if tokens.is_empty() {
                        crate::abstractive::empty_prefix_placeholder()
                    } else {
                        tokens
                    }
                })
                .collect();
            description_probs(clf, out, &descs, ex)
        }
    }
}

fn description_probs(
    model: &ClassifierModel,
    out: &TrainOutcome,
    descs: &[TokenSeq],
    ex: &Example,
) -> Result<ClassProbs, HarnessError> {
    let mut g = Graph::new(&out.store);
    match model.formulation {
        Formulation::NClass => {
            let o = model.forward_multiclass(&mut g, descs, &ex.tokens, &out.vocab, None)?;
            Ok(ClassProbs::Multiclass(
                g.value(o.probs).data().iter().map(|&v| v as f64).collect(),
            ))
        }
        Formulation::NBinary => {
            let mut ps = Vec::with_capacity(descs.len());
            for desc in descs {
                let o = model.forward_binary(&mut g, desc, &ex.tokens, None)?;
                ps.push(g.value(o.prob).item() as f64);
            }
            Ok(ClassProbs::BinarySet(ps))
        }
    }
}

/// Metrics for the outcome's model on a dataset, with optional length
/// buckets. Label spaces must match.
pub fn evaluate(
    out: &TrainOutcome,
    examples: &[Example],
    buckets: Option<&[usize]>,
) -> Result<Metrics, HarnessError> {
    for ex in examples {
        for &l in &ex.labels {
            if l >= out.label_space.n {
                return Err(HarnessError::Config(format!(
                    "example {} carries label {l} outside the model's {}-class space",
                    ex.id, out.label_space.n
                )));
            }
        }
    }
    let preds = predictions(out, examples)?;
    Ok(score_predictions(examples, &preds, buckets))
}

const RUN_CONFIG: &str = "config.json";
const RUN_VOCAB: &str = "vocab.json";
const RUN_LABELS: &str = "label_space.json";
const RUN_REGISTRY: &str = "registry.json";
const RUN_CKPT: &str = "model.ckpt";

#[derive(serde::Serialize, serde::Deserialize)]
struct RegistrySidecar {
    variant: TemplateVariant,
    per_class: Vec<String>,
}

fn persist(out: &TrainOutcome, test_set: &[Example], dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save(&out.store, &dir.join(RUN_CKPT))?;
    out.cfg.save(&dir.join(RUN_CONFIG))?;
    out.vocab.save(&dir.join(RUN_VOCAB))?;
    out.label_space.save(&dir.join(RUN_LABELS))?;
    if let Some(reg) = &out.registry {
        let sidecar = RegistrySidecar {
            variant: reg.variant,
            per_class: (0..reg.n_classes()).map(|c| reg.raw_text(c).to_string()).collect(),
        };
        let f = std::fs::File::create(dir.join(RUN_REGISTRY))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &sidecar)?;
    }
    // epoch log: CSV (epoch, split, metric, value)
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("epoch_log.csv"))?);
    writeln!(w, "epoch,split,metric,value")?;
    for rec in &out.epoch_log {
        writeln!(w, "{},test,error_rate,{}", rec.epoch, rec.test_error)?;
        writeln!(w, "{},test,micro_f1,{}", rec.epoch, rec.test_micro_f1)?;
        writeln!(w, "{},train,mean_loss,{}", rec.epoch, rec.mean_train_loss)?;
    }
    w.flush()?;
    dump_descriptions(out, test_set, &dir.join("descriptions.jsonl"))?;
    Ok(())
}

/// Qualitative dump of the descriptions a trained policy produces on a
/// dataset: JSONL with example_id, class, description, provenance.
pub fn dump_descriptions(
    out: &TrainOutcome,
    examples: &[Example],
    path: &Path,
) -> Result<(), HarnessError> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        example_id: &'a str,
        class: &'a str,
        description: String,
        provenance: &'static str,
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let vocab = &out.vocab;
    for ex in examples {
        let rows: Vec<(usize, TokenSeq, Provenance)> = match &out.bundle {
            ModelBundle::Template(_) => {
                let reg = out.registry.as_ref().unwrap();
                (0..out.label_space.n)
                    .map(|c| (c, reg.get_tokens(c).unwrap().clone(), Provenance::Template))
                    .collect()
            }
            ModelBundle::Extractive { policy, .. } => {
                let reg = out.registry.as_ref().unwrap();
                let x = policy.clip_text(&ex.tokens).to_vec();
                policy
                    .distributions(&out.store, &x, vocab)
                    .iter()
                    .enumerate()
                    .map(|(c, d)| {
                        let desc =
                            crate::extractive::realize_description(&d.greedy(), &x, reg, c);
                        (c, desc.tokens, desc.provenance)
                    })
                    .collect()
            }
            ModelBundle::Abstractive { abs, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let x = abs.clip_src(&ex.tokens).to_vec();
                if x.is_empty() {
                    continue;
                }
                (0..out.label_space.n)
                    .map(|c| {
                        let (tokens, _) =
                            generate(abs, &out.store, &x, c, DecodeMode::Greedy, &mut rng);
                        (c, tokens, Provenance::Generated)
                    })
                    .collect()
            }
            ModelBundle::Baseline(_) => Vec::new(),
        };
        for (c, tokens, provenance) in rows {
            let row = Row {
                example_id: &ex.id,
                class: &out.label_space.names[c],
                description: vocab.detokenize(&tokens),
                provenance: provenance.label(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild a run from its output directory (checkpoint + sidecars).
pub fn load_run(dir: &Path) -> Result<TrainOutcome, HarnessError> {
    let cfg = RunConfig::load(&dir.join(RUN_CONFIG))?;
    let store = checkpoint::load(&dir.join(RUN_CKPT))?;
    let vocab = Vocab::load(&dir.join(RUN_VOCAB))?;
    let label_space = load_label_space(&dir.join(RUN_LABELS))?;
    let registry_path = dir.join(RUN_REGISTRY);
    let registry = if registry_path.exists() {
        let f = std::fs::File::open(&registry_path)?;
        let sidecar: RegistrySidecar = serde_json::from_reader(std::io::BufReader::new(f))?;
        let raw = RawRegistry { variant: sidecar.variant, per_class: sidecar.per_class };
        Some(raw.build(&vocab, &label_space)?)
    } else {
        None
    };
    let enc_cfg = encoder_config(&cfg, vocab.len());
    let bundle = match cfg.strategy {
        Strategy::Baseline => ModelBundle::Baseline(BaselineModel::new(enc_cfg, label_space.n)),
        Strategy::Template => {
            ModelBundle::Template(ClassifierModel::new(cfg.formulation, enc_cfg, label_space.n))
        }
        Strategy::Extractive => ModelBundle::Extractive {
            clf: ClassifierModel::new(cfg.formulation, enc_cfg.clone(), label_space.n),
            policy: SpanPolicy::new(
                TransformerEncoder::new("enc", enc_cfg),
                label_space.n,
                cfg.l_max,
            ),
        },
        Strategy::Abstractive => ModelBundle::Abstractive {
            clf: ClassifierModel::new(cfg.formulation, enc_cfg.clone(), label_space.n),
            abs: Seq2SeqModel::new(Seq2SeqConfig {
                d_model: cfg.encoder.d_model,
                vocab_size: vocab.len(),
                n_classes: label_space.n,
                max_src_len: cfg.encoder.max_len,
                max_desc_len: cfg.desc_max_len,
            }),
        },
    };
    Ok(TrainOutcome {
        cfg,
        store,
        vocab,
        label_space,
        registry,
        bundle,
        metrics: Metrics::default(),
        epoch_log: Vec::new(),
    })
}

impl TrainOutcome {
    /// Epoch-indexed test error curve.
    pub fn error_curve(&self) -> Vec<f64> {
        self.epoch_log.iter().map(|r| r.test_error).collect()
    }
}
