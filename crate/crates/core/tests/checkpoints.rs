use mpt_core::encoder::{EncoderLm, ModelConfig};
use mpt_core::nn::Module;
use mpt_core::prompt::{PromptArtifact, Template};
use mpt_core::synthlang::{DataConfig, Testbed};
use mpt_core::train::{evaluate, module_fingerprint, train_seed, Method, Pipeline, RunConfig, TrainConfig, TrainData};
use mpt_core::translator::{Translator, TranslatorTag};

fn bits(t: &mpt_core::tensor::Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn module_bits(m: &dyn Module) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    m.visit(&mut |n, t| out.push((n.to_string(), bits(t))));
    out
}

fn setup() -> (Testbed, mpt_core::dataio::Corpora, EncoderLm) {
    let bed = Testbed::new(DataConfig {
        n_languages: 3,
        train_pool: 60,
        test_per_lang: 20,
        parallel_pool: 40,
        parallel_size: 20,
        pretrain_per_lang: 10,
        pretrain_source: Some(10),
        ..DataConfig::default()
    })
    .unwrap();
    let c = bed.generate().unwrap();
    let model = EncoderLm::new(
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: bed.vocab.len(),
            max_seq_len: 24,
            ..ModelConfig::default()
        },
        4,
    )
    .unwrap();
    (bed, c, model)
}

fn trained(method: Method, tag: TranslatorTag) -> (Testbed, mpt_core::dataio::Corpora, mpt_core::train::SeedRun) {
    let (bed, c, model) = setup();
    let mut cfg = RunConfig {
        train: TrainConfig {
            method,
            k: 4,
            epochs: 2,
            batch_size: 6,
            parallel_batch_size: 4,
            seeds: vec![1],
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.translator.tag = tag;
    let data = TrainData {
        testbed: &bed,
        train_pool: &c.train_pool,
        test: &c.test,
        parallel: &c.parallel,
    };
    let run = train_seed(&model, data, &cfg, 1, &mut |_, _| true).unwrap();
    (bed, c, run)
}

#[test]
fn fine_tuned_backbone_round_trips_bit_exactly() {
    let (bed, c, run) = trained(Method::Ft, TranslatorTag::Linear2);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("backbone");
    run.learner.model.save(&stem, &bed.vocab.tokens, 7).unwrap();
    let (back, vocab, steps) = EncoderLm::load(&stem).unwrap();
    assert_eq!(vocab, bed.vocab.tokens);
    assert_eq!(steps, 7);
    assert_eq!(back.config, run.learner.model.config);
    assert_eq!(module_bits(&back), module_bits(&run.learner.model));
    assert_eq!(module_fingerprint(&back), module_fingerprint(&run.learner.model));
    let t = Template::new(run.learner.config.prompt.position, &bed.vocab);
    let again = evaluate(&back, &Pipeline::Promptless, &t, &run.learner.verbalizer, &c.test).unwrap();
    assert_eq!(again, run.accuracies);
}

#[test]
fn prompt_and_translator_round_trip_bit_exactly() {
    for tag in TranslatorTag::ALL {
        let (bed, c, run) = trained(Method::Mpt, tag);
        let dir = tempfile::tempdir().unwrap();
        let Pipeline::Translated { source, translator } = run.learner.pipeline().unwrap() else {
            panic!("mpt pipeline translates");
        };
        let art = PromptArtifact {
            position: run.learner.config.prompt.position,
            language: "multilingual".into(),
            prompt: source.clone(),
        };
        art.save(&dir.path().join("prompt")).unwrap();
        translator.save(&dir.path().join("translator")).unwrap();
        let p = PromptArtifact::load(&dir.path().join("prompt")).unwrap();
        let tr = Translator::load(&dir.path().join("translator")).unwrap();
        assert_eq!(bits(&p.prompt), bits(&source), "{tag:?}");
        assert_eq!(p.position, art.position);
        assert_eq!(tr.tag(), tag);
        assert_eq!(module_bits(&tr), module_bits(&translator), "{tag:?}");
        let (_, _, model) = setup();
        let pipe = Pipeline::Translated {
            source: p.prompt,
            translator: tr,
        };
        let t = Template::new(art.position, &bed.vocab);
        let again = evaluate(&model, &pipe, &t, &run.learner.verbalizer, &c.test).unwrap();
        assert_eq!(again, run.accuracies, "{tag:?}");
    }
}
