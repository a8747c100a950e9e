//! `mpt`: data generation, pretraining, prompt training, ablations and
//! reporting for the multilingual prompt translator experiments.
//!
//! Reports go to stdout; logs and errors go to stderr.

mod outdir;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use mpt_core::checkpoint;
use mpt_core::dataio::{self, DataDir};
use mpt_core::encoder::{pretrain_mlm, EncoderLm};
use mpt_core::experiment::{self, ExperimentConfig, Report, ResultRow, SweepKind, SweepRow};
use mpt_core::prompt::PromptArtifact;
use mpt_core::synthlang::{few_shot_sample, DataError, Sentence};
use mpt_core::train::{Method, Pipeline, RunConfig, SeedRun, TrainData, TrainError};

use outdir::{Inputs, OutDir, CONFIG_ECHO, INPUTS};

const BACKBONE: &str = "backbone";
const RESULTS: &str = "results.csv";
const SUMMARY: &str = "summary.json";

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub msg: String,
}

impl Fail {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NO_BACKBONE: u8 = 4;
    pub const INFEASIBLE: u8 = 5;
    pub const MISSING: u8 = 6;

    pub fn new(code: u8, msg: impl Into<String>) -> Fail {
        Fail { code, msg: msg.into() }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Fail {
        Fail::new(1, format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Fail {
        let code = match &e {
            TrainError::Config(_) => Fail::CONFIG,
            TrainError::Data(DataError::InsufficientSupport { .. }) => Fail::INFEASIBLE,
            TrainError::Data(_) => Fail::DATA,
            _ => 1,
        };
        Fail::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mpt", version, about = "Soft-prompt cross-lingual transfer on a synthetic multilingual testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the languages, NLI splits, parallel corpus and pretraining text.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder with masked language modelling.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Train one method on k examples per label for every configured seed.
    Train {
        #[arg(long)]
        method: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backbone: PathBuf,
        /// Defaults to the data directory the backbone was pretrained on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Sweep one setting over a grid and train at every point.
    Ablate {
        #[arg(long)]
        sweep: String,
        /// Comma-separated grid, overriding the default one.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Tabulate one or more train/ablate runs: methods by languages.
    Eval {
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { config, out } => gen_data(config.as_deref(), &out),
        Cmd::Pretrain { config, data, out, resume } => pretrain(config.as_deref(), &data, &out, resume),
        Cmd::Train {
            method,
            k,
            config,
            backbone,
            data,
            out,
            seeds,
        } => train(&method, k, config.as_deref(), &backbone, data.as_deref(), &out, seeds.as_deref()),
        Cmd::Ablate {
            sweep,
            values,
            k,
            config,
            backbone,
            data,
            out,
            seeds,
        } => ablate(&sweep, values.as_deref(), k, config.as_deref(), &backbone, data.as_deref(), &out, seeds.as_deref()),
        Cmd::Eval { run, out } => eval(&run, &out),
    };
    match result {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Fail> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Fail::new(Fail::CONFIG, format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).map_err(|e| Fail::new(Fail::CONFIG, format!("{}: {e}", path.display())))
}

fn config_fail(path: Option<&Path>, e: impl fmt::Display) -> Fail {
    let file = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
    Fail::new(Fail::CONFIG, format!("{file}: {e}"))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Fail> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| Fail::new(Fail::CONFIG, format!("--seeds `{x}`: {e}"))))
        .collect()
}

fn file_hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, Fail> {
    paths
        .iter()
        .map(|p| {
            let h = dataio::sha256_file(p).map_err(|e| Fail::new(Fail::MISSING, e.to_string()))?;
            Ok((p.display().to_string(), h))
        })
        .collect()
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    dataio::data_files().iter().map(|f| dir.join(f)).collect()
}

fn backbone_files(stem: &Path) -> Vec<PathBuf> {
    vec![checkpoint::manifest_path(stem), checkpoint::data_path(stem)]
}

fn load_data(dir: &Path) -> Result<DataDir, Fail> {
    for f in data_files(dir) {
        if !f.is_file() {
            return Err(Fail::new(Fail::MISSING, format!("missing data file {}", f.display())));
        }
    }
    dataio::read_data_dir(dir).map_err(|e| Fail::new(Fail::DATA, format!("{}: {e}", dir.display())))
}

fn check_data_config(cfg: &ExperimentConfig, data: &DataDir, dir: &Path) -> Result<(), Fail> {
    if cfg.data != data.testbed.config {
        return Err(Fail::new(
            Fail::DATA,
            format!("the config's data section does not match {}", dir.join(dataio::REGISTRY).display()),
        ));
    }
    Ok(())
}

fn load_backbone(dir: &Path, data: &DataDir) -> Result<(EncoderLm, u64), Fail> {
    let stem = dir.join(BACKBONE);
    if !checkpoint::manifest_path(&stem).is_file() {
        return Err(Fail::new(Fail::NO_BACKBONE, format!("no backbone checkpoint at {}", stem.display())));
    }
    let (model, vocab, steps) = EncoderLm::load(&stem).map_err(|e| Fail::new(Fail::NO_BACKBONE, format!("{}: {e}", stem.display())))?;
    if vocab != data.testbed.vocab.tokens {
        return Err(Fail::new(
            Fail::DATA,
            format!("vocabulary of {} differs from the data directory's", stem.display()),
        ));
    }
    Ok((model, steps))
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<String, Fail> {
    let cfg = load_config(config)?;
    let dir = OutDir::claim(out)?;
    let data = dataio::generate_data_dir(out, cfg.data.clone()).map_err(|e| Fail::new(Fail::DATA, e.to_string()))?;
    dir.write(CONFIG_ECHO, cfg.to_json() + "\n")?;
    let inputs = Inputs {
        command: "gen-data".into(),
        config_hash: cfg.hash(),
        ..Inputs::default()
    };
    dir.write(INPUTS, inputs.to_json())?;
    let c = &data.corpora;
    let mut report = format!(
        "languages {}\nvocab {}\ntrain_pool {}\ntest_per_lang {}\nparallel {}\npretrain {}\n",
        data.testbed.n_languages(),
        data.testbed.vocab.len(),
        c.train_pool.len(),
        c.test.first().map_or(0, Vec::len),
        c.parallel.len(),
        c.pretrain.len()
    );
    for (name, hash) in &data.hashes {
        report.push_str(&format!("sha256 {name} {hash}\n"));
    }
    Ok(report)
}

fn pretrain(config: Option<&Path>, data_dir: &Path, out: &Path, resume: bool) -> Result<String, Fail> {
    let mut cfg = load_config(config)?;
    let data = load_data(data_dir)?;
    check_data_config(&cfg, &data, data_dir)?;
    let vocab = &data.testbed.vocab;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size != vocab.len() {
        return Err(Fail::new(
            Fail::DATA,
            format!("model.vocab_size {} but the data vocabulary has {} tokens", cfg.model.vocab_size, vocab.len()),
        ));
    }
    let dir = OutDir::claim(out)?;
    let stem = dir.join(BACKBONE);
    let (mut model, start) = if resume {
        let (m, steps) = load_backbone(out, &data)?;
        if m.config != cfg.model {
            return Err(config_fail(config, format!("model section differs from the checkpoint at {}", stem.display())));
        }
        info!("resuming from step {steps}");
        (m, steps)
    } else {
        (EncoderLm::new(cfg.model.clone(), cfg.pretrain.seed).map_err(|e| config_fail(config, e))?, 0)
    };
    let corpus: Vec<Sentence> = data.corpora.pretrain.iter().map(|p| p.tokens(vocab)).collect();
    let rep = pretrain_mlm(&mut model, &corpus, &cfg.pretrain, vocab.mask, start).map_err(|e| Fail::new(1, e.to_string()))?;
    model.save(&stem, &vocab.tokens, rep.steps).map_err(|e| Fail::io(&stem, e))?;
    let mut log_csv = String::from("step,loss\n");
    for (s, l) in &rep.losses {
        log_csv.push_str(&format!("{s},{l}\n"));
    }
    let log_name = if resume { format!("pretrain_log_from_{start}.csv") } else { "pretrain_log.csv".into() };
    dir.write(&log_name, log_csv)?;
    dir.write("pretrain.json", serde_json::to_string_pretty(&rep).expect("report serializes") + "\n")?;
    dir.write(CONFIG_ECHO, cfg.to_json() + "\n")?;
    let inputs = Inputs {
        command: if resume { "pretrain --resume" } else { "pretrain" }.into(),
        config_hash: cfg.hash(),
        data_dir: Some(data_dir.display().to_string()),
        files: file_hashes(&data_files(data_dir))?,
        ..Inputs::default()
    };
    dir.write(INPUTS, inputs.to_json())?;
    Ok(format!(
        "steps {}\nheldout_accuracy {:.4}\nchance_rate {:.4}\nmajority_rate {:.4}\n",
        rep.steps, rep.heldout_accuracy, rep.chance_rate, rep.majority_rate
    ))
}

/// Everything a training command needs, loaded and cross-checked.
struct Setup {
    cfg: ExperimentConfig,
    data_dir: PathBuf,
    data: DataDir,
    model: EncoderLm,
}

fn setup(config: Option<&Path>, backbone: &Path, data: Option<&Path>, k: Option<usize>, seeds: Option<&str>) -> Result<Setup, Fail> {
    let mut cfg = load_config(config)?;
    if let Some(k) = k {
        cfg.train.k = k;
    }
    if let Some(s) = seeds {
        cfg.train.seeds = parse_seeds(s)?;
    }
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => Inputs::read(backbone)
            .and_then(|i| i.data_dir)
            .map(PathBuf::from)
            .ok_or_else(|| Fail::new(Fail::MISSING, format!("no --data given and {} records no data directory", backbone.join(INPUTS).display())))?,
    };
    let data = load_data(&data_dir)?;
    check_data_config(&cfg, &data, &data_dir)?;
    if data.testbed.n_languages() < 2 {
        return Err(Fail::new(Fail::DATA, "the testbed has no target languages; cross-lingual runs need n_languages >= 2"));
    }
    let (model, _) = load_backbone(backbone, &data)?;
    if cfg.model.vocab_size != 0 && cfg.model.vocab_size != model.config.vocab_size {
        return Err(Fail::new(Fail::DATA, "model.vocab_size disagrees with the backbone"));
    }
    Ok(Setup { cfg, data_dir, data, model })
}

fn check_feasible(s: &Setup, run: &RunConfig) -> Result<(), Fail> {
    for &seed in &run.train.seeds {
        few_shot_sample(&s.data.corpora.train_pool, run.train.k, seed).map_err(|e| {
            let code = if matches!(e, DataError::InsufficientSupport { .. }) { Fail::INFEASIBLE } else { Fail::DATA };
            Fail::new(code, format!("cannot draw k={} per label: {e}", run.train.k))
        })?;
    }
    Ok(())
}

fn notices(run: &RunConfig, parallel: usize) {
    match run.train.method {
        Method::Sp if run.translator != Default::default() => info!("sp trains no translator; the translator section is ignored"),
        Method::Sp => info!("sp trains no translator"),
        Method::Ft => info!("ft tunes the backbone with a head-free cloze; prompt and translator sections are ignored"),
        Method::Mpt if parallel == 0 => info!("parallel corpus is empty: the alignment loss never fires, as with alpha = 1"),
        Method::Mpt if !run.translator.enabled => info!("translator disabled: target languages reuse the source prompt"),
        Method::Mpt => {}
    }
}

fn common_inputs(command: &str, s: &Setup, backbone: &Path, hash: String) -> Result<Inputs, Fail> {
    let mut files = file_hashes(&data_files(&s.data_dir))?;
    files.extend(file_hashes(&backbone_files(&backbone.join(BACKBONE)))?);
    Ok(Inputs {
        command: command.into(),
        config_hash: hash,
        data_dir: Some(s.data_dir.display().to_string()),
        files,
        ..Inputs::default()
    })
}

fn run_id(method: Method, k: usize, hash: &str) -> String {
    format!("{method}-k{k}-{}", &hash[..8])
}

fn save_seed(dir: &OutDir, s: &Setup, run: &SeedRun) -> Result<(), Fail> {
    let sub = format!("seed-{}", run.seed);
    let l = &run.learner;
    let stem = |name: &str| dir.join(&format!("{sub}/{name}"));
    fs::create_dir_all(dir.join(&sub)).map_err(|e| Fail::io(&dir.join(&sub), e))?;
    let source = match l.pipeline()? {
        Pipeline::Promptless => None,
        Pipeline::Fixed(t) => Some((t, s.data.testbed.languages[0].name.clone())),
        Pipeline::Translated { source, .. } => Some((source, "multilingual".to_string())),
    };
    if let Some((prompt, language)) = source {
        let art = PromptArtifact {
            position: l.config.prompt.position,
            language,
            prompt,
        };
        art.save(&stem("prompt")).map_err(|e| Fail::io(&stem("prompt"), e))?;
    }
    if let Some(t) = &l.translator {
        if l.config.translates() {
            t.save(&stem("translator")).map_err(|e| Fail::io(&stem("translator"), e))?;
        }
    }
    if l.config.train.backbone_trains() {
        l.model
            .save(&stem(BACKBONE), &s.data.testbed.vocab.tokens, l.steps as u64)
            .map_err(|e| Fail::io(&stem(BACKBONE), e))?;
    }
    dir.write(&format!("{sub}/losses.csv"), experiment::loss_csv(run))
}

fn train(method: &str, k: Option<usize>, config: Option<&Path>, backbone: &Path, data: Option<&Path>, out: &Path, seeds: Option<&str>) -> Result<String, Fail> {
    let method: Method = method.parse().map_err(|e: TrainError| Fail::new(Fail::CONFIG, e.to_string()))?;
    let mut s = setup(config, backbone, data, k, seeds)?;
    s.cfg.train.method = method;
    s.cfg.validate().map_err(|e| config_fail(config, e))?;
    let run_cfg = s.cfg.run_config();
    check_feasible(&s, &run_cfg)?;
    let dir = OutDir::claim(out)?;
    let hash = s.cfg.hash();
    dir.write(CONFIG_ECHO, s.cfg.to_json() + "\n")?;
    let mut inputs = common_inputs("train", &s, backbone, hash.clone())?;
    inputs.args.insert("method".into(), method.to_string());
    inputs.args.insert("k".into(), run_cfg.train.k.to_string());
    dir.write(INPUTS, inputs.to_json())?;
    notices(&run_cfg, s.data.corpora.parallel.len());

    let c = &s.data.corpora;
    let td = TrainData {
        testbed: &s.data.testbed,
        train_pool: &c.train_pool,
        test: &c.test,
        parallel: &c.parallel,
    };
    let threads = experiment::thread_cap();
    info!("training {method} with k={} on {} seeds ({threads} threads)", run_cfg.train.k, run_cfg.train.seeds.len());
    let runs = experiment::run_seeds(&s.model, td, &run_cfg, threads)?;
    for r in &runs {
        save_seed(&dir, &s, r)?;
    }
    let id = run_id(method, run_cfg.train.k, &hash);
    let rows = experiment::result_rows(&id, &s.data.testbed, run_cfg.train.k, method, &runs);
    dir.write(RESULTS, experiment::results_csv(&rows).map_err(|e| Fail::io(&dir.join(RESULTS), e))?)?;
    let summary = experiment::summarize(&id, &s.data.testbed, &hash, s.data.test_hash(), run_cfg.train.k, method, &runs);
    if summary.ce_clamps + summary.kld_clamps > 0 {
        warn!("probability clamp engaged {} times (task) and {} times (alignment)", summary.ce_clamps, summary.kld_clamps);
    }
    dir.write(SUMMARY, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok(Report::from_results(&rows, &languages(&rows)).to_text())
}

#[allow(clippy::too_many_arguments)]
fn ablate(sweep: &str, values: Option<&str>, k: Option<usize>, config: Option<&Path>, backbone: &Path, data: Option<&Path>, out: &Path, seeds: Option<&str>) -> Result<String, Fail> {
    let kind: SweepKind = sweep.parse().map_err(|e| Fail::new(Fail::CONFIG, format!("--sweep: {e}")))?;
    let s = setup(config, backbone, data, k, seeds)?;
    s.cfg.validate().map_err(|e| config_fail(config, e))?;
    let grid: Vec<String> = match values {
        Some(v) => v.split(',').map(|x| x.trim().to_string()).collect(),
        None => kind.default_grid(),
    };
    let mut points = Vec::new();
    for v in &grid {
        let mut c = s.cfg.clone();
        kind.apply(&mut c, v).map_err(|e| config_fail(config, e))?;
        c.validate().map_err(|e| config_fail(config, format!("{kind}={v}: {e}")))?;
        check_feasible(&s, &c.run_config())?;
        points.push((v.clone(), c));
    }
    let dir = OutDir::claim(out)?;
    dir.write(CONFIG_ECHO, s.cfg.to_json() + "\n")?;
    let mut inputs = common_inputs("ablate", &s, backbone, s.cfg.hash())?;
    inputs.args.insert("sweep".into(), kind.to_string());
    inputs.args.insert("values".into(), grid.join(","));
    dir.write(INPUTS, inputs.to_json())?;

    let bed = &s.data.testbed;
    let corp = &s.data.corpora;
    let threads = experiment::thread_cap();
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut summaries = Vec::new();
    for (value, c) in &points {
        let run_cfg = c.run_config();
        let rebuilt;
        let parallel = if kind == SweepKind::CorpusSize {
            let n = c.data.parallel_size.min(corp.parallel_pool.len());
            rebuilt = if n == 0 {
                Vec::new()
            } else {
                bed.build_parallel_corpus(&corp.parallel_pool, &bed.target_langs(), n, bed.config.seed)
                    .map_err(|e| Fail::new(Fail::DATA, e.to_string()))?
            };
            if n == 0 {
                info!("corpus_size=0: no parallel data, the run behaves as alpha = 1");
            }
            &rebuilt[..]
        } else {
            &corp.parallel[..]
        };
        notices(&run_cfg, parallel.len());
        info!("{kind}={value}: training {} seeds", run_cfg.train.seeds.len());
        let td = TrainData {
            testbed: bed,
            train_pool: &corp.train_pool,
            test: &corp.test,
            parallel,
        };
        let runs = experiment::run_seeds(&s.model, td, &run_cfg, threads)?;
        let hash = c.hash();
        let id = format!("{kind}={value}");
        let method = run_cfg.train.method;
        let point_rows = experiment::result_rows(&id, bed, run_cfg.train.k, method, &runs);
        for r in &point_rows {
            sweep_rows.push(SweepRow {
                sweep: kind.to_string(),
                value: value.clone(),
                config_hash: hash.clone(),
                run_id: r.run_id.clone(),
                method: r.method,
                seed: r.seed,
                k: r.k,
                lang: r.lang.clone(),
                accuracy: r.accuracy,
                n_test: r.n_test,
            });
        }
        rows.extend(point_rows);
        summaries.push(experiment::summarize(&id, bed, &hash, s.data.test_hash(), run_cfg.train.k, method, &runs));
    }
    dir.write("sweep.csv", experiment::sweep_csv(&sweep_rows).map_err(|e| Fail::io(&dir.join("sweep.csv"), e))?)?;
    dir.write(RESULTS, experiment::results_csv(&rows).map_err(|e| Fail::io(&dir.join(RESULTS), e))?)?;
    dir.write(SUMMARY, serde_json::to_string_pretty(&summaries).expect("summary serializes") + "\n")?;
    Ok(Report::from_results(&rows, &languages(&rows)).to_text())
}

/// Languages in order of first appearance.
fn languages(rows: &[ResultRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.lang) {
            out.push(r.lang.clone());
        }
    }
    out
}

fn eval(runs: &[PathBuf], out: &Path) -> Result<String, Fail> {
    let mut rows = Vec::new();
    for run in runs {
        let p = run.join(RESULTS);
        let text = fs::read_to_string(&p).map_err(|e| Fail::new(Fail::MISSING, format!("{}: {e}", p.display())))?;
        let parsed = experiment::parse_results_csv(&text).map_err(|e| Fail::new(Fail::DATA, format!("{}: {e}", p.display())))?;
        if parsed.is_empty() {
            return Err(Fail::new(Fail::MISSING, format!("{} has no result rows", p.display())));
        }
        rows.extend(parsed);
    }
    let report = Report::from_results(&rows, &languages(&rows));
    let dir = OutDir::claim(out)?;
    let text = report.to_text();
    dir.write("report.csv", report.to_csv())?;
    dir.write("report.txt", &text)?;
    let inputs = Inputs {
        command: "eval".into(),
        config_hash: experiment::config_hash(&runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>()),
        files: file_hashes(&runs.iter().map(|r| r.join(RESULTS)).collect::<Vec<_>>())?,
        ..Inputs::default()
    };
    dir.write(INPUTS, inputs.to_json())?;
    Ok(text)
}
