use std::collections::HashSet;

use mpt_core::dataio::{generate_data_dir, read_data_dir};
use mpt_core::synthlang::{few_shot_sample, label_oracle, AnswerMode, DataConfig, DataError, Distance, Label, Testbed, TokenId};
use proptest::prelude::*;

fn bed() -> Testbed {
    Testbed::new(DataConfig::default()).unwrap()
}

#[test]
fn render_round_trips_a_thousand_sentences_in_every_language() {
    let b = bed();
    let mut seen = HashSet::new();
    let base = b.gen_base_corpus(1000, 11, "roundtrip", &mut seen).unwrap();
    let sentences: Vec<&Vec<TokenId>> = base.iter().flat_map(|e| [&e.premise, &e.hypothesis]).collect();
    assert!(sentences.len() >= 1000);
    for lang in 0..b.n_languages() {
        for s in &sentences {
            let r = b.render(s, lang).unwrap();
            assert_eq!(r.len(), s.len());
            assert_eq!(&b.unrender(&r, lang).unwrap(), *s, "lang {lang}");
        }
    }
}

#[test]
fn rendering_is_injective_per_language() {
    let b = bed();
    for lang in 0..b.n_languages() {
        let images: HashSet<TokenId> = (0..b.config.content_per_lang)
            .map(|i| b.render(&[b.vocab.content(0, i)], lang).unwrap()[0])
            .collect();
        assert_eq!(images.len(), b.config.content_per_lang);
    }
}

fn base_sentence() -> impl Strategy<Value = Vec<usize>> {
    // indices into the base content block; 24 stands for the negation word
    proptest::collection::vec(0usize..25, 1..12)
}

proptest! {
    #[test]
    fn round_trip_holds_for_arbitrary_base_sentences(idx in base_sentence(), lang in 0usize..7) {
        let b = bed();
        let s: Vec<TokenId> = idx.iter().map(|&i| if i == 24 { b.vocab.neg } else { b.vocab.content(0, i) }).collect();
        let r = b.render(&s, lang).unwrap();
        prop_assert_eq!(b.unrender(&r, lang).unwrap(), s);
    }

    #[test]
    fn labels_survive_rendering(seed in 0u64..500, lang in 1usize..7) {
        let b = bed();
        let mut seen = HashSet::new();
        for e in b.gen_base_corpus(6, seed, "labels", &mut seen).unwrap() {
            let r = b.render_example(&e, lang).unwrap();
            prop_assert_eq!(label_oracle(&r.premise, &r.hypothesis, b.vocab.neg_words[lang]), e.label);
        }
    }
}

#[test]
fn few_shot_sampler_gives_exactly_three_k() {
    let b = bed();
    let mut seen = HashSet::new();
    let pool = b.gen_base_corpus(b.config.train_pool, b.config.seed, "train-pool", &mut seen).unwrap();
    for k in 1..=256 {
        let s = few_shot_sample(&pool, k, k as u64).unwrap();
        assert_eq!(s.len(), 3 * k);
        for label in Label::ALL {
            assert_eq!(s.iter().filter(|e| e.label == label).count(), k, "k={k}");
        }
        let distinct: HashSet<_> = s.iter().collect();
        assert_eq!(distinct.len(), 3 * k);
    }
    assert!(matches!(few_shot_sample(&pool, 1001, 1), Err(DataError::InsufficientSupport { .. })));
}

#[test]
fn parallel_targets_fall_inside_a_99_percent_multinomial_band() {
    let b = bed();
    let c = b.generate().unwrap();
    let n = c.parallel.len();
    assert_eq!(n, b.config.parallel_size);
    let targets = b.target_langs();
    let p = 1.0 / targets.len() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    // Bonferroni over the six languages: two-sided 99% overall
    let z = 3.14;
    for &lang in &targets {
        let count = c.parallel.iter().filter(|pp| pp.target_lang == lang).count() as f64;
        assert!((count - n as f64 * p).abs() <= z * sd, "lang {lang}: {count}");
    }
    assert!(c.parallel.iter().all(|pp| pp.target_lang != 0));
}

#[test]
fn parallel_pairs_are_renderings_of_their_source() {
    let b = bed();
    let c = b.generate().unwrap();
    for pp in &c.parallel {
        assert_eq!(b.render(&pp.source_premise, pp.target_lang).unwrap(), pp.target_premise);
        assert_eq!(b.render(&pp.source_hypothesis, pp.target_lang).unwrap(), pp.target_hypothesis);
    }
}

#[test]
fn test_split_hash_depends_only_on_the_data_config() {
    let cfg = DataConfig {
        train_pool: 150,
        test_per_lang: 40,
        parallel_pool: 60,
        parallel_size: 30,
        pretrain_per_lang: 20,
        pretrain_source: Some(40),
        ..DataConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generate_data_dir(a.path(), cfg.clone()).unwrap();
    let db = generate_data_dir(b.path(), cfg.clone()).unwrap();
    assert_eq!(da.test_hash(), db.test_hash());
    assert_eq!(da.hashes, db.hashes);
    let back = read_data_dir(a.path()).unwrap();
    assert_eq!(back.test_hash(), da.test_hash());
    assert_eq!(back.corpora, da.corpora);
    let other = tempfile::tempdir().unwrap();
    let dc = generate_data_dir(other.path(), DataConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(dc.test_hash(), da.test_hash());
}

#[test]
fn near_languages_share_cognates_and_far_languages_do_not() {
    let b = bed();
    let n = b.config.content_per_lang;
    let want = (b.config.near_shared * n as f64).round() as usize;
    assert!(want > 0);
    for spec in &b.languages {
        let shared = spec.shared.iter().filter(|&&s| s).count();
        match spec.distance {
            Distance::Source => assert_eq!(shared, n),
            Distance::Near => assert_eq!(shared, want, "{}", spec.name),
            Distance::Far => assert_eq!(shared, 0, "{}", spec.name),
        }
        for i in 0..n {
            let w = b.vocab.content(0, i);
            let r = b.render(&[w], spec.id).unwrap()[0];
            assert_eq!(r == w, spec.shared[i]);
        }
    }
}

#[test]
fn lexical_negation_gives_each_language_its_own_word() {
    let b = Testbed::new(DataConfig {
        lexical_neg: true,
        ..DataConfig::default()
    })
    .unwrap();
    let words: HashSet<TokenId> = b.vocab.neg_words.iter().copied().collect();
    assert_eq!(words.len(), b.n_languages());
    assert_eq!(b.vocab.neg_words[0], b.vocab.neg);
    let s = vec![b.vocab.content(0, 1), b.vocab.neg];
    for lang in 1..b.n_languages() {
        let r = b.render(&s, lang).unwrap();
        assert!(r.contains(&b.vocab.neg_words[lang]));
        assert!(!r.contains(&b.vocab.neg));
        let other = if lang == 1 { 2 } else { 1 };
        assert!(b.unrender(&r, other).is_err());
    }
}

#[test]
fn pretraining_mix_follows_source_size_and_answer_mode() {
    let cfg = DataConfig {
        pretrain_per_lang: 30,
        pretrain_source: Some(90),
        pretrain_answers: AnswerMode::SourceOnly,
        answer_rate: 1.0,
        train_pool: 60,
        test_per_lang: 20,
        parallel_pool: 30,
        parallel_size: 10,
        ..DataConfig::default()
    };
    let b = Testbed::new(cfg).unwrap();
    let c = b.generate().unwrap();
    for lang in 0..b.n_languages() {
        let items: Vec<_> = c.pretrain.iter().filter(|p| p.lang == lang).collect();
        assert_eq!(items.len(), if lang == 0 { 90 } else { 30 });
        let answered = items.iter().filter(|p| p.answer.is_some()).count();
        assert_eq!(answered, if lang == 0 { 90 } else { 0 });
    }
    for p in c.pretrain.iter().filter(|p| p.answer.is_some()) {
        let gold = b.label_of(&p.premise, &p.hypothesis);
        assert_eq!(p.answer, Some(b.vocab.label_words[gold.index()]));
    }
}

#[test]
fn target_answer_rate_applies_to_targets_only() {
    let b = Testbed::new(DataConfig {
        pretrain_per_lang: 40,
        pretrain_source: None,
        pretrain_answers: AnswerMode::PerLanguage,
        answer_rate: 1.0,
        target_answer_rate: Some(0.0),
        train_pool: 60,
        test_per_lang: 20,
        parallel_pool: 30,
        parallel_size: 10,
        ..DataConfig::default()
    })
    .unwrap();
    let c = b.generate().unwrap();
    for p in &c.pretrain {
        assert_eq!(p.answer.is_some(), p.lang == 0);
    }
}

#[test]
fn out_of_range_knobs_are_rejected() {
    for cfg in [
        DataConfig {
            near_shared: 1.5,
            ..DataConfig::default()
        },
        DataConfig {
            far_shared: -0.1,
            ..DataConfig::default()
        },
        DataConfig {
            target_answer_rate: Some(2.0),
            ..DataConfig::default()
        },
    ] {
        assert!(Testbed::new(cfg).is_err());
    }
}
