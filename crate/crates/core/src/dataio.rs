//! Corpus generation as a whole, JSONL storage and content hashing.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synthlang::{DataConfig, DataError, Label, NliExample, ParallelPair, PretrainItem, Sentence, Testbed};

pub const REGISTRY: &str = "languages.json";
pub const TRAIN_POOL: &str = "train_pool.jsonl";
pub const TEST: &str = "test.jsonl";
pub const PARALLEL_POOL: &str = "parallel_pool.jsonl";
pub const PARALLEL: &str = "parallel.jsonl";
pub const PRETRAIN: &str = "pretrain.jsonl";

/// Every split the experiments read.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub train_pool: Vec<NliExample>,
    /// Test examples per language; the same base pairs rendered everywhere.
    pub test: Vec<Vec<NliExample>>,
    pub parallel_pool: Vec<(Sentence, Sentence)>,
    pub parallel: Vec<ParallelPair>,
    pub pretrain: Vec<PretrainItem>,
}

impl Testbed {
    /// Draws all splits in a fixed order (test, train pool, parallel pool,
    /// pretraining) through one shared set of seen pairs, so no sentence
    /// pair appears in two splits.
    pub fn generate(&self) -> Result<Corpora, DataError> {
        let c = &self.config;
        let mut seen = HashSet::new();
        let base_test = self.gen_base_corpus(c.test_per_lang, c.seed, "test", &mut seen)?;
        let train_pool = self.gen_base_corpus(c.train_pool, c.seed, "train-pool", &mut seen)?;
        let parallel_pool = self.gen_parallel_pool(c.parallel_pool, c.seed, &mut seen)?;
        let pretrain = self.gen_pretrain_corpus(c.seed, &mut seen)?;
        let test = (0..self.n_languages())
            .map(|lang| base_test.iter().map(|e| self.render_example(e, lang)).collect())
            .collect::<Result<_, _>>()?;
        let parallel = if self.n_languages() > 1 {
            self.build_parallel_corpus(&parallel_pool, &self.target_langs(), c.parallel_size.min(parallel_pool.len()), c.seed)?
        } else {
            Vec::new()
        };
        Ok(Corpora {
            train_pool,
            test,
            parallel_pool,
            parallel,
            pretrain,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    split: String,
    lang: String,
    premise: Vec<String>,
    hypothesis: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    /// Links the two halves of a parallel pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io(format!("{}: {e}", path.display()))
}

fn write_jsonl(path: &Path, records: impl Iterator<Item = Record>) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_jsonl(path: &Path) -> Result<Vec<Record>, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Corpora plus the testbed that generated them, as loaded from disk.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub testbed: Testbed,
    pub corpora: Corpora,
    /// `(file name, sha256)` of every file read.
    pub hashes: Vec<(String, String)>,
}

impl DataDir {
    pub fn test_hash(&self) -> &str {
        self.hashes
            .iter()
            .find(|(n, _)| n == TEST)
            .map(|(_, h)| h.as_str())
            .unwrap_or("")
    }
}

/// Writes the registry and all splits into `dir`; returns the file hashes.
pub fn write_data_dir(dir: &Path, bed: &Testbed, c: &Corpora) -> Result<Vec<(String, String)>, DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let v = &bed.vocab;
    let name = |lang: usize| bed.languages[lang].name.clone();
    let reg = dir.join(REGISTRY);
    let json = serde_json::to_string_pretty(bed).map_err(|e| io_err(&reg, e))?;
    fs::write(&reg, json + "\n").map_err(|e| io_err(&reg, e))?;
    let labelled = |split: &'static str| {
        move |e: &NliExample| Record {
            split: split.into(),
            lang: name(e.lang),
            premise: v.decode(&e.premise),
            hypothesis: v.decode(&e.hypothesis),
            label: Some(e.label),
            pair: None,
            answer: None,
        }
    };
    write_jsonl(&dir.join(TRAIN_POOL), c.train_pool.iter().map(labelled("train_pool")))?;
    write_jsonl(&dir.join(TEST), c.test.iter().flatten().map(labelled("test")))?;
    write_jsonl(
        &dir.join(PARALLEL_POOL),
        c.parallel_pool.iter().map(|(p, h)| Record {
            split: "parallel_pool".into(),
            lang: name(0),
            premise: v.decode(p),
            hypothesis: v.decode(h),
            label: None,
            pair: None,
            answer: None,
        }),
    )?;
    write_jsonl(
        &dir.join(PARALLEL),
        c.parallel.iter().enumerate().flat_map(|(i, pp)| {
            [
                Record {
                    split: "parallel".into(),
                    lang: name(0),
                    premise: v.decode(&pp.source_premise),
                    hypothesis: v.decode(&pp.source_hypothesis),
                    label: None,
                    pair: Some(i),
                    answer: None,
                },
                Record {
                    split: "parallel".into(),
                    lang: name(pp.target_lang),
                    premise: v.decode(&pp.target_premise),
                    hypothesis: v.decode(&pp.target_hypothesis),
                    label: None,
                    pair: Some(i),
                    answer: None,
                },
            ]
        }),
    )?;
    write_jsonl(
        &dir.join(PRETRAIN),
        c.pretrain.iter().map(|it| Record {
            split: "pretrain".into(),
            lang: name(it.lang),
            premise: v.decode(&it.premise),
            hypothesis: v.decode(&it.hypothesis),
            label: None,
            pair: None,
            answer: it.answer.map(|a| v.name(a).to_string()),
        }),
    )?;
    data_hashes(dir)
}

pub fn data_files() -> [&'static str; 6] {
    [REGISTRY, TRAIN_POOL, TEST, PARALLEL_POOL, PARALLEL, PRETRAIN]
}

pub fn data_hashes(dir: &Path) -> Result<Vec<(String, String)>, DataError> {
    data_files()
        .iter()
        .map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?)))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_testbed(dir: &Path) -> Result<Testbed, DataError> {
    let reg = dir.join(REGISTRY);
    let text = fs::read_to_string(&reg).map_err(|e| io_err(&reg, e))?;
    let mut bed: Testbed = serde_json::from_str(&text).map_err(|e| io_err(&reg, e))?;
    bed.vocab.reindex();
    Ok(bed)
}

/// Reads a directory written by [`write_data_dir`].
pub fn read_data_dir(dir: &Path) -> Result<DataDir, DataError> {
    let testbed = load_testbed(dir)?;
    let v = &testbed.vocab;
    let lang = |r: &Record| testbed.lang_by_name(&r.lang);
    let example = |r: &Record, path: &PathBuf| -> Result<NliExample, DataError> {
        Ok(NliExample {
            premise: v.encode(&r.premise)?,
            hypothesis: v.encode(&r.hypothesis)?,
            label: r
                .label
                .ok_or_else(|| DataError::Io(format!("{}: labelled record without a label", path.display())))?,
            lang: lang(r)?,
        })
    };
    let p = dir.join(TRAIN_POOL);
    let train_pool = read_jsonl(&p)?.iter().map(|r| example(r, &p)).collect::<Result<Vec<_>, _>>()?;
    let p = dir.join(TEST);
    let mut test = vec![Vec::new(); testbed.n_languages()];
    for r in read_jsonl(&p)? {
        let e = example(&r, &p)?;
        test[e.lang].push(e);
    }
    let p = dir.join(PARALLEL_POOL);
    let parallel_pool = read_jsonl(&p)?
        .iter()
        .map(|r| Ok((v.encode(&r.premise)?, v.encode(&r.hypothesis)?)))
        .collect::<Result<Vec<_>, DataError>>()?;
    let p = dir.join(PARALLEL);
    let recs = read_jsonl(&p)?;
    if recs.len() % 2 != 0 {
        return Err(DataError::Io(format!("{}: odd number of parallel records", p.display())));
    }
    let mut parallel = Vec::with_capacity(recs.len() / 2);
    for (i, pair) in recs.chunks(2).enumerate() {
        let (s, t) = (&pair[0], &pair[1]);
        if s.pair != Some(i) || t.pair != Some(i) || lang(s)? != 0 {
            return Err(DataError::Parse {
                line: 2 * i + 1,
                msg: format!("{}: malformed parallel pair", p.display()),
            });
        }
        parallel.push(ParallelPair {
            source_premise: v.encode(&s.premise)?,
            source_hypothesis: v.encode(&s.hypothesis)?,
            target_lang: lang(t)?,
            target_premise: v.encode(&t.premise)?,
            target_hypothesis: v.encode(&t.hypothesis)?,
        });
    }
    let p = dir.join(PRETRAIN);
    let pretrain = read_jsonl(&p)?
        .iter()
        .map(|r| {
            Ok(PretrainItem {
                lang: lang(r)?,
                premise: v.encode(&r.premise)?,
                hypothesis: v.encode(&r.hypothesis)?,
                answer: r.answer.as_deref().map(|a| v.id(a)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let hashes = data_hashes(dir)?;
    Ok(DataDir {
        corpora: Corpora {
            train_pool,
            test,
            parallel_pool,
            parallel,
            pretrain,
        },
        testbed,
        hashes,
    })
}

/// Generates and writes a full data directory from a config.
pub fn generate_data_dir(dir: &Path, config: DataConfig) -> Result<DataDir, DataError> {
    let testbed = Testbed::new(config)?;
    let corpora = testbed.generate()?;
    let hashes = write_data_dir(dir, &testbed, &corpora)?;
    Ok(DataDir {
        testbed,
        corpora,
        hashes,
    })
}
