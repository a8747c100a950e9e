//! Experiment configs, multi-seed runs, result tables and ablation grids.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::sha256_hex;
use crate::encoder::{EncoderLm, ModelConfig, PretrainConfig};
use crate::nn::Module;
use crate::prompt::{Position, PromptConfig};
use crate::synthlang::{DataConfig, Distance, Testbed};
use crate::train::{macro_average, train_seed, Method, RunConfig, SeedRun, TrainConfig, TrainData, TrainError};
use crate::translator::{TranslatorConfig, TranslatorTag};

/// Environment variable capping how many seeds train concurrently.
pub const THREADS_ENV: &str = "MPT_THREADS";

/// Few-shot sizes accepted by the training command.
pub const K_GRID: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

/// One JSON document configuring every stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    pub translator: TranslatorConfig,
    pub train: TrainConfig,
}

/// A configuration problem, located by a dotted path into the document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config at `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn at(path: &str, message: impl fmt::Display) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.to_string(),
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| at(&e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        Testbed::new(self.data.clone()).map_err(|e| at("data", e))?;
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate().map_err(|e| at("model", e))?;
        let p = &self.pretrain;
        if p.batch_size == 0 {
            return Err(at("pretrain.batch_size", "must be positive"));
        }
        if !(p.mask_prob > 0.0 && p.mask_prob < 1.0) {
            return Err(at("pretrain.mask_prob", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&p.heldout_fraction) {
            return Err(at("pretrain.heldout_fraction", "must lie in [0, 1)"));
        }
        self.run_config().validate().map_err(|e| {
            let msg = e.to_string();
            let section = if msg.contains("prompt") {
                "prompt"
            } else if msg.contains("translator") {
                "translator"
            } else {
                "train"
            };
            at(section, msg)
        })
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            train: self.train.clone(),
            prompt: self.prompt.clone(),
            translator: self.translator.clone(),
        }
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

/// Worker threads for seed-level parallelism: `MPT_THREADS` if set and
/// positive, else the number of available cores.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates every configured seed, at most `threads` at a time.
/// Results come back in seed order and do not depend on `threads`.
pub fn run_seeds(backbone: &EncoderLm, data: TrainData<'_>, config: &RunConfig, threads: usize) -> Result<Vec<SeedRun>, TrainError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        config
            .train
            .seeds
            .par_iter()
            .map(|&seed| {
                log::debug!("{} seed {seed}: start", config.train.method);
                let run = train_seed(backbone, data, config, seed, &mut |_, _| true);
                log::debug!("{} seed {seed}: done", config.train.method);
                run
            })
            .collect()
    })
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub k: usize,
    pub lang: String,
    pub accuracy: f64,
    pub n_test: usize,
}

pub fn result_rows(run_id: &str, testbed: &Testbed, k: usize, method: Method, runs: &[SeedRun]) -> Vec<ResultRow> {
    runs.iter()
        .flat_map(|r| {
            r.accuracies.iter().map(move |a| ResultRow {
                run_id: run_id.to_string(),
                method,
                seed: r.seed,
                k,
                lang: testbed.languages[a.lang].name.clone(),
                accuracy: a.accuracy,
                n_test: a.n_test,
            })
        })
        .collect()
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["run_id", "method", "seed", "k", "lang", "accuracy", "n_test"])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Per-step losses of one seed as CSV `step,epoch,l_ce,l_kld,l_total`.
/// Steps without an alignment batch leave `l_kld` empty.
pub fn loss_csv(run: &SeedRun) -> String {
    let mut out = String::from("step,epoch,l_ce,l_kld,l_total\n");
    for s in &run.curve {
        let kld = s.l_kld.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", s.step, s.epoch, s.l_ce, kld, s.l_total));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangSummary {
    pub lang: String,
    pub distance: Distance,
    pub mean: f64,
    pub std: f64,
}

/// Seed-averaged view of one run, written next to the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: Method,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub languages: Vec<LangSummary>,
    /// Mean over every language column.
    pub avg: f64,
    pub avg_targets: f64,
    pub avg_near: f64,
    pub avg_far: f64,
    pub ce_clamps: usize,
    pub kld_clamps: usize,
    pub param_counts: BTreeMap<String, usize>,
    pub test_hash: String,
    /// Accuracies are taken after the last epoch; no dev-set selection.
    pub reporting: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_of<'a>(it: impl Iterator<Item = &'a LangSummary>) -> f64 {
    let v: Vec<f64> = it.map(|l| l.mean).collect();
    mean_std(&v).0
}

pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit(&mut |_, t| n += t.len());
    n
}

#[allow(clippy::too_many_arguments)]
pub fn summarize(run_id: &str, testbed: &Testbed, config_hash: &str, test_hash: &str, k: usize, method: Method, runs: &[SeedRun]) -> RunSummary {
    let languages: Vec<LangSummary> = testbed
        .languages
        .iter()
        .map(|spec| {
            let accs: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.accuracies.iter().find(|a| a.lang == spec.id).map(|a| a.accuracy))
                .collect();
            let (mean, std) = mean_std(&accs);
            LangSummary {
                lang: spec.name.clone(),
                distance: spec.distance,
                mean,
                std,
            }
        })
        .collect();
    let mut param_counts = BTreeMap::new();
    if let Some(r) = runs.first() {
        param_counts.insert("backbone".to_string(), param_count(&r.learner.model));
        if let Some(p) = &r.learner.prompt {
            param_counts.insert("prompt".to_string(), param_count(p));
        }
        if let Some(t) = &r.learner.translator {
            param_counts.insert("translator".to_string(), param_count(t));
        }
    }
    RunSummary {
        run_id: run_id.to_string(),
        method,
        k,
        seeds: runs.iter().map(|r| r.seed).collect(),
        config_hash: config_hash.to_string(),
        avg: mean_of(languages.iter()),
        avg_targets: mean_of(languages.iter().filter(|l| l.distance != Distance::Source)),
        avg_near: mean_of(languages.iter().filter(|l| l.distance == Distance::Near)),
        avg_far: mean_of(languages.iter().filter(|l| l.distance == Distance::Far)),
        languages,
        ce_clamps: runs.iter().map(|r| r.learner.ce_clamps).sum(),
        kld_clamps: runs.iter().map(|r| r.learner.kld_clamps).sum(),
        param_counts,
        test_hash: test_hash.to_string(),
        reporting: "final-epoch".to_string(),
    }
}

/// Methods × languages accuracy matrix plus an average column.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub languages: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Seed-mean accuracy per language, in `[0, 1]`.
    pub values: Vec<f64>,
    pub avg: f64,
}

impl Report {
    /// Groups `rows` by `(run_id, method)` in first-seen order and averages
    /// over seeds. Labels are the method name, qualified by run id when a
    /// method appears in several runs.
    pub fn from_results(rows: &[ResultRow], languages: &[String]) -> Report {
        let mut keys: Vec<(String, Method)> = Vec::new();
        for r in rows {
            let key = (r.run_id.clone(), r.method);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let ambiguous = |m: Method| keys.iter().filter(|(_, km)| *km == m).count() > 1;
        let out = keys
            .iter()
            .map(|(run, method)| {
                let values: Vec<f64> = languages
                    .iter()
                    .map(|lang| {
                        let accs: Vec<f64> = rows
                            .iter()
                            .filter(|r| &r.run_id == run && r.method == *method && &r.lang == lang)
                            .map(|r| r.accuracy)
                            .collect();
                        mean_std(&accs).0
                    })
                    .collect();
                let avg = mean_std(&values).0;
                let label = if ambiguous(*method) {
                    format!("{method}:{run}")
                } else {
                    method.to_string()
                };
                ReportRow { label, values, avg }
            })
            .collect();
        Report {
            languages: languages.to_vec(),
            rows: out,
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string()];
        h.extend(self.languages.iter().cloned());
        h.push("avg".to_string());
        h
    }

    fn cells(row: &ReportRow) -> Vec<String> {
        let mut c = vec![row.label.clone()];
        c.extend(row.values.iter().map(|v| format!("{:.2}", 100.0 * v)));
        c.push(format!("{:.2}", 100.0 * row.avg));
        c
    }

    /// Accuracies in percent with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::cells(r).join(","));
            out.push('\n');
        }
        out
    }

    /// The same numbers as [`Report::to_csv`], column-aligned.
    pub fn to_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows.iter().map(Self::cells));
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Parses the numbers back out of [`Report::to_text`] or [`Report::to_csv`].
pub fn report_numbers(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .skip(1)
                .map(String::from)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Alpha,
    PromptLength,
    Translator,
    Position,
    CorpusSize,
}

impl SweepKind {
    pub const ALL: [SweepKind; 5] = [
        SweepKind::Alpha,
        SweepKind::PromptLength,
        SweepKind::Translator,
        SweepKind::Position,
        SweepKind::CorpusSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Alpha => "alpha",
            SweepKind::PromptLength => "prompt_length",
            SweepKind::Translator => "translator",
            SweepKind::Position => "position",
            SweepKind::CorpusSize => "corpus_size",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            SweepKind::Alpha => strs(&["0", "0.25", "0.5", "0.75", "1"]),
            SweepKind::PromptLength => strs(&["1", "2", "4", "8", "16"]),
            SweepKind::Translator => TranslatorTag::ALL.iter().map(|t| t.name().to_string()).collect(),
            SweepKind::Position => Position::ALL.iter().map(|p| p.name().to_string()).collect(),
            SweepKind::CorpusSize => strs(&["0", "50", "125", "250", "500", "1000"]),
        }
    }

    /// Writes grid value `value` into `cfg`.
    pub fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<(), ConfigError> {
        let bad = |e: &dyn fmt::Display| at(self.name(), format!("bad grid value `{value}`: {e}"));
        match self {
            SweepKind::Alpha => cfg.train.alpha = value.parse().map_err(|e| bad(&e))?,
            SweepKind::PromptLength => cfg.prompt.length = value.parse().map_err(|e| bad(&e))?,
            SweepKind::Translator => cfg.translator.tag = value.parse().map_err(|e| bad(&e))?,
            SweepKind::Position => {
                cfg.prompt.position = *Position::ALL
                    .iter()
                    .find(|p| p.name() == value)
                    .ok_or_else(|| bad(&"expected prefix, midfix, suffix or endfix"))?
            }
            SweepKind::CorpusSize => cfg.data.parallel_size = value.parse().map_err(|e| bad(&e))?,
        }
        Ok(())
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| at("sweep", format!("unknown sweep `{s}`")))
    }
}

/// One line of a sweep CSV: a result row tagged with its grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub value: String,
    pub config_hash: String,
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub k: usize,
    pub lang: String,
    pub accuracy: f64,
    pub n_test: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Mean target-language accuracy of a set of seed runs.
pub fn target_mean(runs: &[SeedRun]) -> f64 {
    let per_seed: Vec<f64> = runs
        .iter()
        .map(|r| {
            let t: Vec<_> = r.accuracies.iter().filter(|a| a.lang != 0).cloned().collect();
            macro_average(&t)
        })
        .collect();
    mean_std(&per_seed).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let err = ExperimentConfig::from_json(r#"{"train": {"alpha": 0.5, "alhpa": 1}}"#).unwrap_err();
        assert!(err.path.starts_with("train"), "{err}");
        assert!(err.message.contains("alhpa"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_section() {
        let err = ExperimentConfig::from_json(r#"{"train": {"alpha": 1.5}}"#).unwrap_err();
        assert_eq!(err.path, "train");
        let err = ExperimentConfig::from_json(r#"{"prompt": {"length": 0}}"#).unwrap_err();
        assert_eq!(err.path, "prompt");
        let err = ExperimentConfig::from_json(r#"{"data": {"n_languages": 0}}"#).unwrap_err();
        assert_eq!(err.path, "data");
    }

    #[test]
    fn echo_is_fully_resolved_and_round_trips() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        let echo = cfg.to_json();
        for key in ["\"alpha\"", "\"length\"", "\"tag\"", "\"d_model\"", "\"parallel_size\"", "\"steps\""] {
            assert!(echo.contains(key), "{key} missing");
        }
        let back = ExperimentConfig::from_json(&echo).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.train.alpha = 0.25;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn grids_match_the_ablation_plan() {
        assert_eq!(SweepKind::Alpha.default_grid().len(), 5);
        assert_eq!(SweepKind::PromptLength.default_grid(), ["1", "2", "4", "8", "16"]);
        assert_eq!(SweepKind::Translator.default_grid().len(), 6);
        assert_eq!(SweepKind::Position.default_grid().len(), 4);
        assert_eq!(SweepKind::CorpusSize.default_grid(), ["0", "50", "125", "250", "500", "1000"]);
        let mut cfg = ExperimentConfig::default();
        for kind in SweepKind::ALL {
            for v in kind.default_grid() {
                kind.apply(&mut cfg, &v).unwrap();
            }
        }
        assert_eq!(cfg.data.parallel_size, 1000);
        assert_eq!(cfg.prompt.position, Position::Endfix);
        assert!(SweepKind::Alpha.apply(&mut cfg, "half").is_err());
        assert!("bogus".parse::<SweepKind>().is_err());
    }

    fn row(run: &str, method: Method, seed: u64, lang: &str, acc: f64) -> ResultRow {
        ResultRow {
            run_id: run.into(),
            method,
            seed,
            k: 4,
            lang: lang.into(),
            accuracy: acc,
            n_test: 300,
        }
    }

    #[test]
    fn report_layout_and_consistency() {
        let langs: Vec<String> = ["L0", "L1", "L2"].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (seed, base) in [(1, 0.5), (2, 0.6)] {
            for (i, l) in langs.iter().enumerate() {
                rows.push(row("a", Method::Sp, seed, l, base + 0.01 * i as f64));
                rows.push(row("b", Method::Mpt, seed, l, base + 0.1));
            }
        }
        let rep = Report::from_results(&rows, &langs);
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.rows[0].values.len() + 1, langs.len() + 1);
        for r in &rep.rows {
            let mean = r.values.iter().sum::<f64>() / r.values.len() as f64;
            assert!((r.avg - mean).abs() < 1e-9);
        }
        assert!((rep.rows[0].values[1] - 0.56).abs() < 1e-12);
        let csv = rep.to_csv();
        let txt = rep.to_text();
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 1 + langs.len() + 1);
        assert_eq!(report_numbers(&csv), report_numbers(&txt));
    }

    #[test]
    fn results_csv_round_trips() {
        let rows = vec![row("r", Method::Mpt, 3, "L4", 0.123456789), row("r", Method::Ft, 1, "L0", 1.0 / 3.0)];
        let text = results_csv(&rows).unwrap();
        assert!(text.starts_with("run_id,method,seed,k,lang,accuracy,n_test\n"));
        assert_eq!(parse_results_csv(&text).unwrap(), rows);
        assert_eq!(results_csv(&[]).unwrap(), "run_id,method,seed,k,lang,accuracy,n_test\n");
    }

    #[test]
    fn thread_cap_is_positive() {
        assert!(thread_cap() >= 1);
    }
}
