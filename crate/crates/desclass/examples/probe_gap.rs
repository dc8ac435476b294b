use std::time::Instant;

use desclass::encoder::Formulation;
use desclass::harness::{
    gen_synthetic, train, DataPaths, EncoderSizes, RunConfig, Strategy, SyntheticSpec, VocabConfig,
};
use desclass::templates::TemplateVariant;
use desclass::text::save_dataset;

fn main() {
    let dir = std::env::temp_dir().join("desclass_probe");
    std::fs::create_dir_all(&dir).unwrap();
    let spec = SyntheticSpec::hotel_default();
    let data = gen_synthetic(&spec).unwrap();
    let ls = data.label_space.clone();
    let aspect = &data.per_aspect[0];
    save_dataset(&dir.join("train.jsonl"), &aspect.train, &ls).unwrap();
    save_dataset(&dir.join("test.jsonl"), &aspect.test, &ls).unwrap();
    ls.save(&dir.join("labels.json")).unwrap();
    let regs = spec.registries_for(&aspect.aspect);
    std::fs::write(dir.join("wiki.json"), serde_json::to_string(&regs.wiki).unwrap()).unwrap();
    std::fs::write(dir.join("keyword.json"), serde_json::to_string(&regs.keyword).unwrap()).unwrap();
    std::fs::write(dir.join("expansion.json"), serde_json::to_string(&regs.expansion).unwrap()).unwrap();

    let base = RunConfig {
        strategy: Strategy::Baseline,
        formulation: Formulation::NClass,
        template_variant: TemplateVariant::WikiFile,
        init_mode: desclass::extractive::InitMode::Dummy,
        encoder: EncoderSizes { layers: 2, heads: 2, d_model: 32, d_ff: 64, max_len: 64, dropout: 0.0 },
        optimizer: Default::default(),
        epochs: 20,
        batch_size: 32,
        b_samples: 2,
        seed: 1,
        l_max: 20,
        desc_max_len: 8,
        pretrain_epochs: 1,
        data: DataPaths {
            train: dir.join("train.jsonl"),
            test: dir.join("test.jsonl"),
            labels: dir.join("labels.json"),
            registry: Some(dir.join("wiki.json")),
            registry_keyword: Some(dir.join("keyword.json")),
            registry_expansion: Some(dir.join("expansion.json")),
        },
        data_fraction: 1.0,
        eval_buckets: None,
        out_dir: None,
        vocab: VocabConfig::default(),
    };

    for (name, strategy, variant, lr) in [
        ("baseline lr1e-3", Strategy::Baseline, TemplateVariant::WikiFile, 1e-3),
        ("baseline lr3e-3", Strategy::Baseline, TemplateVariant::WikiFile, 3e-3),
        ("template-wiki lr1e-3", Strategy::Template, TemplateVariant::WikiFile, 1e-3),
        ("template-wiki lr3e-3", Strategy::Template, TemplateVariant::WikiFile, 3e-3),
        ("template-exp lr3e-3", Strategy::Template, TemplateVariant::KeywordExpansion, 3e-3),
        ("template-labelidx lr3e-3", Strategy::Template, TemplateVariant::LabelIndex, 3e-3),
    ] {
        let mut cfg = base.clone();
        cfg.strategy = strategy;
        cfg.template_variant = variant;
        cfg.optimizer.lr = lr;
        let t0 = Instant::now();
        let out = train(&cfg).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let curve: Vec<String> = out.epoch_log.iter().map(|r| format!("{:.3}", r.test_error)).collect();
        println!(
            "{name}: final error {:.4}, {secs:.1}s\n  curve: {}",
            out.metrics.error_rate,
            curve.join(" ")
        );
    }
}
