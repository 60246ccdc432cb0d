use scope_core::model::{load_mlm, AdamConfig, MlmModel, Role};
use scope_core::pipeline::{finetune_mlm_stage, load_vocab, pretrain_mlm_stage, synth_data, ModelShape, PipelineConfig};
use scope_core::scoring::mlm_score;
use scope_core::text::{load_encoded, Vocabulary};
use scope_core::training::LmTrainConfig;

fn small(root: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        root: root.to_path_buf(),
        ..PipelineConfig::default()
    };
    cfg.data.docs_per_domain = 200;
    cfg.data.heldout_docs = 20;
    cfg.data.doc_len = 32;
    cfg.mlm = ModelShape {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        max_len: 32,
        dropout: 0.0,
        distance_bias: true,
    };
    let lm = |steps, lr| LmTrainConfig {
        steps,
        batch: 8,
        window: 32,
        mask_rate: 0.3,
        adam: AdamConfig { lr, ..AdamConfig::default() },
        ..LmTrainConfig::default()
    };
    cfg.pretrain = lm(300, 5e-3);
    cfg.finetune = lm(200, 2e-3);
    cfg.trainset.prefix_len = 16;
    cfg.generate.prefix_len = 16;
    cfg
}

fn mean_mlm(model: &MlmModel, cfg: &PipelineConfig, vocab: &Vocabulary, domain: &str) -> f64 {
    let docs = load_encoded(cfg.layout().heldout(domain), vocab).unwrap();
    let scores: Vec<f64> = docs.iter().flat_map(|d| mlm_score(model, d).unwrap().mlm_per_pos).collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn finetuned_scorer_prefers_the_target_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    synth_data(&cfg).unwrap();
    pretrain_mlm_stage(&cfg).unwrap();
    finetune_mlm_stage(&cfg).unwrap();
    let vocab = load_vocab(&cfg).unwrap();
    let (pretrained, _) = load_mlm(cfg.layout().model(Role::Pretrained), &vocab, Some(Role::Pretrained)).unwrap();
    let (scorer, _) = load_mlm(cfg.layout().model(Role::Scorer), &vocab, Some(Role::Scorer)).unwrap();

    let (scorer_a, scorer_b) = (mean_mlm(&scorer, &cfg, &vocab, "A"), mean_mlm(&scorer, &cfg, &vocab, "B"));
    let (pre_a, pre_b) = (mean_mlm(&pretrained, &cfg, &vocab, "A"), mean_mlm(&pretrained, &cfg, &vocab, "B"));
    assert!(scorer_a > scorer_b, "scorer: held-out A {scorer_a} vs B {scorer_b}");
    assert!(
        scorer_a - scorer_b > pre_a - pre_b,
        "fine-tuning did not widen the gap: {} vs {}",
        scorer_a - scorer_b,
        pre_a - pre_b
    );
}

#[test]
fn stages_are_reproducible_under_the_global_seed() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let digests: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let mut cfg = small(d.path());
            cfg.pretrain.steps = 5;
            synth_data(&cfg).unwrap();
            pretrain_mlm_stage(&cfg).unwrap();
            std::fs::read(cfg.layout().model(Role::Pretrained).join("weights.bin")).unwrap()
        })
        .collect();
    assert_eq!(digests[0], digests[1]);
}
