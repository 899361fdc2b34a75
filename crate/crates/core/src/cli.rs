//! Command-line front end. Exit codes: 0 on success, 2 for configuration,
//! parsing or I/O problems, 3 for numeric failures during a run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::load_config;
use crate::datagen::{synthesize, SimSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::learn::{train, TrainConfig, TrainReport};
use crate::metrics;
use crate::pipeline::{detect_rare_events, encode_signal, EncodeOptions, PipelineConfig};
use crate::sparse;
use crate::tensor::SignalTensor;

#[derive(Parser)]
#[command(
    name = "cdl",
    about = "Convolutional dictionary learning with inline outlier trimming",
    version
)]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth
    Simulate(SimulateArgs),
    /// Learn a dictionary from signals
    Train(TrainArgs),
    /// Sparse-code a signal with a trained dictionary
    Encode(EncodeArgs),
    /// Two-stage detection: common dictionary, outlier masks, rare dictionary
    Detect(DetectArgs),
    /// Compare a learned dictionary (or masks) against a reference
    Score(ScoreArgs),
    /// Runtime scaling and window-width studies
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config with a [simulate] section
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config with a [train] section
    #[arg(long)]
    config: PathBuf,
    /// Signal files (.rst or .csv) or directories of signal_*.rst
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_frac: Option<f64>,
    #[arg(long)]
    n_iter: Option<usize>,
    /// Disable inline trimming regardless of the config
    #[arg(long)]
    no_trim: bool,
    /// Comma-separated lambda fractions; runs one training per value
    #[arg(long)]
    lambda_sweep: Option<String>,
    /// Reference dictionary; adds a recovery column to the report
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    dictionary: PathBuf,
    /// Signal file (.rst or .csv)
    #[arg(long)]
    signal: PathBuf,
    /// Output activation file
    #[arg(long)]
    out: PathBuf,
    /// Absolute penalty; defaults to the value stored beside the dictionary
    #[arg(long)]
    lambda: Option<f64>,
    /// Penalty as a fraction of this signal's lambda_max (overrides stored)
    #[arg(long)]
    lambda_frac: Option<f64>,
    #[arg(long)]
    n_fista: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DetectArgs {
    /// TOML config with [train] (stage 1, needs a threshold) and [stage2]
    #[arg(long)]
    config: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference dictionary
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Learned dictionary
    #[arg(long)]
    learned: Option<PathBuf>,
    /// Ground-truth sample flags (u8 tensor); paired with --pred-mask
    #[arg(long)]
    truth_mask: Option<PathBuf>,
    #[arg(long)]
    pred_mask: Option<PathBuf>,
    /// Per-sample scores (f64 tensor); with --truth-mask, reports ROC AUC
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write results as JSON instead of just printing them
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated signal lengths for the runtime scaling study
    #[arg(long)]
    sizes: Option<String>,
    /// Comma-separated window widths (in atom lengths) for the objective
    /// study at a shared penalty
    #[arg(long)]
    window_factors: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version through this path with code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // a pool may already exist (tests call run() repeatedly); that is
        // fine, determinism does not depend on the pool size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Score(a) => cmd_score(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn make_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))
}

/// Expands --data arguments: directories contribute their signal_*.rst
/// files in name order, plain files are taken as-is (.rst or .csv).
fn collect_signals(paths: &[PathBuf]) -> Result<Vec<SignalTensor>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut in_dir: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p.clone(), e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| n.starts_with("signal_") && n.ends_with(".rst"))
                        .unwrap_or(false)
                })
                .collect();
            in_dir.sort();
            if in_dir.is_empty() {
                return Err(Error::Config(format!(
                    "{}: no signal_*.rst files found",
                    p.display()
                )));
            }
            files.extend(in_dir);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| match f.extension().and_then(|e| e.to_str()) {
            Some("csv") => io::read_signal_csv(f),
            _ => io::read_signal(f),
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let vals: std::result::Result<Vec<T>, _> =
        s.split(',').map(|t| t.trim().parse::<T>()).collect();
    let vals = vals.map_err(|_| Error::Parse(format!("bad {what} list: {s:?}")))?;
    if vals.is_empty() {
        return Err(Error::Parse(format!("empty {what} list")));
    }
    Ok(vals)
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let (cfg, hash) = load_config(&a.config)?;
    let mut spec: SimSpec = cfg.require_simulate()?.clone();
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    make_out_dir(&a.out_dir)?;
    let (signals, truth) = synthesize(&spec)?;

    for (i, x) in signals.iter().enumerate() {
        let p = a.out_dir.join(format!("signal_{i:03}.rst"));
        ensure_writable(&p, a.force)?;
        io::write_signal(&p, x)?;
    }
    // Common and rare truth go to separate files so each can be scored
    // against the matching learned dictionary.
    let dict_path = a.out_dir.join("truth_dictionary.rst");
    ensure_writable(&dict_path, a.force)?;
    io::write_dictionary(&dict_path, &truth.common_dictionary())?;
    let mut meta = io::DictionaryMeta::for_dictionary(&truth.common_dictionary());
    meta.seed = Some(spec.seed);
    meta.config_sha256 = Some(hash.clone());
    io::write_json(&a.out_dir.join("truth_dictionary.json"), &meta)?;
    if let Some(rare) = truth.rare_dictionary() {
        io::write_dictionary(&a.out_dir.join("truth_rare_dictionary.rst"), &rare)?;
    }

    for (i, z) in truth.activations.iter().enumerate() {
        io::write_activations(&a.out_dir.join(format!("truth_activations_{i:03}.rst")), z)?;
    }
    if spec.rare.is_some() {
        for (i, m) in truth.anomaly_masks().iter().enumerate() {
            io::write_sample_flags(&a.out_dir.join(format!("anomaly_mask_{i:03}.rst")), m)?;
        }
    }
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        spec: &'a SimSpec,
        n_signals: usize,
        n_common_atoms: usize,
        config_sha256: &'a str,
    }
    io::write_json(
        &a.out_dir.join("simulate.json"),
        &Manifest {
            spec: &spec,
            n_signals: signals.len(),
            n_common_atoms: truth.n_common_atoms,
            config_sha256: &hash,
        },
    )?;
    println!(
        "wrote {} signals of {}x{} to {}",
        signals.len(),
        spec.channels,
        spec.length,
        a.out_dir.display()
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(f) = a.lambda_frac {
        cfg.lambda_frac = f;
    }
    if let Some(n) = a.n_iter {
        cfg.n_iter = n;
    }
    if a.no_trim {
        cfg.threshold = None;
    }
}

fn write_train_outputs(
    dir: &Path,
    report: &TrainReport,
    cfg: &TrainConfig,
    hash: &str,
    force: bool,
) -> Result<()> {
    make_out_dir(dir)?;
    let dict_path = dir.join("dictionary.rst");
    ensure_writable(&dict_path, force)?;
    io::write_dictionary(&dict_path, &report.dictionary)?;
    let mut meta = io::DictionaryMeta::for_dictionary(&report.dictionary);
    meta.lambda = Some(report.lambda);
    meta.seed = Some(cfg.seed);
    meta.config_sha256 = Some(hash.to_string());
    io::write_json(&dir.join("dictionary.json"), &meta)?;
    io::write_report_csv(&dir.join("report.csv"), &report.records)?;

    #[derive(serde::Serialize)]
    struct Summary<'a> {
        lambda: f64,
        iterations_completed: usize,
        failure: Option<&'a String>,
        final_trimmed_objective: Option<f64>,
        final_recovery_score: Option<f64>,
    }
    io::write_json(
        &dir.join("train.json"),
        &Summary {
            lambda: report.lambda,
            iterations_completed: report.records.len(),
            failure: report.failure.as_ref(),
            final_trimmed_objective: report.records.last().map(|r| r.trimmed_objective),
            final_recovery_score: report.records.last().and_then(|r| r.recovery_score),
        },
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (cfg, hash) = load_config(&a.config)?;
    let mut tc: TrainConfig = cfg.require_train()?.clone();
    apply_train_overrides(&mut tc, &a);
    let corpus = collect_signals(&a.data)?;
    let reference = a.reference.as_deref().map(io::read_dictionary).transpose()?;

    match &a.lambda_sweep {
        None => {
            let report = train(&corpus, &tc, reference.as_ref())?;
            write_train_outputs(&a.out_dir, &report, &tc, &hash, a.force)?;
            if let Some(msg) = &report.failure {
                return Err(Error::Numeric(format!(
                    "training aborted after {} iterations: {msg}",
                    report.records.len()
                )));
            }
            println!(
                "trained {} atoms in {} iterations, lambda {}, outputs in {}",
                report.dictionary.n_atoms(),
                report.records.len(),
                report.lambda,
                a.out_dir.display()
            );
        }
        Some(list) => {
            let fracs: Vec<f64> = parse_list(list, "lambda fraction")?;
            make_out_dir(&a.out_dir)?;
            let mut lines =
                vec!["lambda_frac,lambda,final_trimmed_objective,final_recovery_score".to_string()];
            for frac in &fracs {
                let mut cfg_i = tc.clone();
                cfg_i.lambda_frac = *frac;
                let sub = a.out_dir.join(format!("sweep_{frac}"));
                let report = train(&corpus, &cfg_i, reference.as_ref())?;
                write_train_outputs(&sub, &report, &cfg_i, &hash, a.force)?;
                if let Some(msg) = &report.failure {
                    return Err(Error::Numeric(format!("sweep at {frac} aborted: {msg}")));
                }
                let last = report.records.last();
                lines.push(format!(
                    "{frac},{},{},{}",
                    report.lambda,
                    last.map(|r| r.trimmed_objective.to_string()).unwrap_or_default(),
                    last.and_then(|r| r.recovery_score)
                        .map(|s| s.to_string())
                        .unwrap_or_default()
                ));
                println!("sweep {frac}: lambda {}", report.lambda);
            }
            let sweep_path = a.out_dir.join("sweep.csv");
            ensure_writable(&sweep_path, a.force)?;
            std::fs::write(&sweep_path, lines.join("\n") + "\n")
                .map_err(|e| Error::io(sweep_path.clone(), e))?;
            println!("swept {} fractions, summary in {}", fracs.len(), sweep_path.display());
        }
    }
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let d = io::read_dictionary(&a.dictionary)?;
    let x = match a.signal.extension().and_then(|e| e.to_str()) {
        Some("csv") => io::read_signal_csv(&a.signal)?,
        _ => io::read_signal(&a.signal)?,
    };
    let lambda = match (a.lambda, a.lambda_frac) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--lambda and --lambda-frac are mutually exclusive".into(),
            ))
        }
        (Some(l), None) => l,
        (None, Some(f)) => {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::Config(format!("bad lambda fraction {f}")));
            }
            f * sparse::lambda_max(&x, &d)?
        }
        (None, None) => {
            let meta_path = a.dictionary.with_extension("json");
            let meta: io::DictionaryMeta = io::read_json(&meta_path).map_err(|_| {
                Error::Config(format!(
                    "no --lambda given and {} has no stored value",
                    meta_path.display()
                ))
            })?;
            meta.lambda.ok_or_else(|| {
                Error::Config("no --lambda given and none stored with the dictionary".into())
            })?
        }
    };
    let mut opts = EncodeOptions::default();
    if let Some(n) = a.n_fista {
        opts.n_fista = n;
    }
    if let Some(c) = a.chunk_size {
        opts.chunk_size = c;
    }
    ensure_writable(&a.out, a.force)?;
    let z = encode_signal(&x, &d, lambda, &opts)?;
    io::write_activations(&a.out, &z)?;
    let obj = sparse::objective(&x, &d, &z, lambda)?;
    println!(
        "encoded {} samples: objective {} (data {}, penalty {}), support {}",
        x.length(),
        obj.total,
        obj.data_term,
        obj.l1_term,
        z.support_count(0.0)
    );
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let (cfg, hash) = load_config(&a.config)?;
    let mut stage1 = cfg.require_train()?.clone();
    let mut stage2 = cfg.require_stage2()?.clone();
    if let Some(seed) = a.seed {
        stage1.seed = seed;
        stage2.seed = seed.wrapping_add(1);
    }
    let pcfg = PipelineConfig {
        stage1,
        stage2,
        encode: cfg.encode.clone().unwrap_or_default(),
    };
    let corpus = collect_signals(&a.data)?;
    make_out_dir(&a.out_dir)?;
    let common_path = a.out_dir.join("common_dictionary.rst");
    ensure_writable(&common_path, a.force)?;

    let result = detect_rare_events(&corpus, &pcfg)?;

    io::write_dictionary(&common_path, &result.common_dictionary)?;
    let mut meta = io::DictionaryMeta::for_dictionary(&result.common_dictionary);
    meta.lambda = Some(result.lambda1);
    meta.seed = Some(pcfg.stage1.seed);
    meta.config_sha256 = Some(hash.clone());
    io::write_json(&a.out_dir.join("common_dictionary.json"), &meta)?;
    io::write_report_csv(&a.out_dir.join("stage1_report.csv"), &result.stage1_report.records)?;

    if let Some(rare) = &result.rare_dictionary {
        io::write_dictionary(&a.out_dir.join("rare_dictionary.rst"), rare)?;
        let mut meta = io::DictionaryMeta::for_dictionary(rare);
        meta.lambda = result.lambda2;
        meta.seed = Some(pcfg.stage2.seed);
        meta.config_sha256 = Some(hash.clone());
        io::write_json(&a.out_dir.join("rare_dictionary.json"), &meta)?;
    }
    if let Some(report) = &result.stage2_report {
        io::write_report_csv(&a.out_dir.join("stage2_report.csv"), &report.records)?;
    }
    for (i, mask) in result.masks.iter().enumerate() {
        io::write_sample_flags(
            &a.out_dir.join(format!("mask_{i:03}.rst")),
            &mask.sample_flags(),
        )?;
        io::write_mask_csv(&a.out_dir.join(format!("mask_{i:03}.csv")), mask)?;
    }
    for (i, s) in result.scores.iter().enumerate() {
        io::write_f64_tensor(
            &a.out_dir.join(format!("scores_{i:03}.rst")),
            &[s.len() as u64],
            s,
        )?;
    }
    for (i, z) in result.rare_activations.iter().enumerate() {
        io::write_activations(&a.out_dir.join(format!("rare_activations_{i:03}.rst")), z)?;
    }

    #[derive(serde::Serialize)]
    struct Summary<'a> {
        threshold: f64,
        lambda1: f64,
        lambda2: Option<f64>,
        flagged_patches: Vec<usize>,
        empty_mask_warning: bool,
        rare_atoms: usize,
        config_sha256: &'a str,
    }
    io::write_json(
        &a.out_dir.join("detect.json"),
        &Summary {
            threshold: result.threshold,
            lambda1: result.lambda1,
            lambda2: result.lambda2,
            flagged_patches: result.masks.iter().map(|m| m.n_flagged()).collect(),
            empty_mask_warning: result.empty_mask_warning,
            rare_atoms: result
                .rare_dictionary
                .as_ref()
                .map(|d| d.n_atoms())
                .unwrap_or(0),
            config_sha256: &hash,
        },
    )?;
    if result.empty_mask_warning {
        eprintln!("warning: no patch crossed the residual threshold; rare stage skipped");
    }
    println!(
        "detection done: threshold {}, {} patches flagged, outputs in {}",
        result.threshold,
        result.masks.iter().map(|m| m.n_flagged()).sum::<usize>(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    #[derive(Default, serde::Serialize)]
    struct Scores {
        #[serde(skip_serializing_if = "Option::is_none")]
        recovery_score: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        assignment: Option<Vec<(usize, usize)>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        mask_f1: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        roc_auc: Option<f64>,
    }
    let mut out = Scores::default();

    match (&a.truth, &a.learned) {
        (Some(t), Some(l)) => {
            let truth = io::read_dictionary(t)?;
            let learned = io::read_dictionary(l)?;
            let r = metrics::recovery_score(&truth, &learned)?;
            println!("recovery_score {}", r.score);
            for (i, j) in &r.assignment {
                println!("  reference atom {i} -> learned atom {j}");
            }
            out.recovery_score = Some(r.score);
            out.assignment = Some(r.assignment);
        }
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "--truth and --learned must be given together".into(),
            ))
        }
    }

    if let Some(pm) = &a.pred_mask {
        let tm = a.truth_mask.as_ref().ok_or_else(|| {
            Error::Config("--pred-mask needs --truth-mask for labels".into())
        })?;
        let truth_flags = io::read_sample_flags(tm)?;
        let pred_flags = io::read_sample_flags(pm)?;
        let f1 = metrics::binary_f1(&pred_flags, &truth_flags)?;
        println!("mask_f1 {f1}");
        out.mask_f1 = Some(f1);
    }

    if let Some(sp) = &a.scores {
        let tm = a.truth_mask.as_ref().ok_or_else(|| {
            Error::Config("--scores needs --truth-mask for labels".into())
        })?;
        let labels = io::read_sample_flags(tm)?;
        let (dims, scores) = io::read_f64_tensor(sp)?;
        if dims.len() != 1 || dims[0] as usize != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "scores shape {dims:?} does not match {} labels",
                labels.len()
            )));
        }
        let auc = metrics::roc_auc(&scores, &labels)?;
        println!("roc_auc {auc}");
        out.roc_auc = Some(auc);
    }

    if out.recovery_score.is_none() && out.mask_f1.is_none() && out.roc_auc.is_none() {
        return Err(Error::Config(
            "nothing to score; pass --truth/--learned, --truth-mask/--pred-mask, or --scores/--truth-mask".into(),
        ));
    }
    if let Some(path) = &a.out {
        ensure_writable(path, a.force)?;
        io::write_json(path, &out)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.sizes.is_none() && a.window_factors.is_none() {
        return Err(Error::Config(
            "bench needs --sizes and/or --window-factors".into(),
        ));
    }
    make_out_dir(&a.out_dir)?;

    // fixed problem shape; only the axis under study varies
    let atom_len = 64;
    let base = SimSpec {
        channels: 1,
        n_atoms: 2,
        atom_len,
        sparsity: 0.002,
        noise_sigma: 0.05,
        n_signals: 1,
        seed: a.seed,
        amplitude_range: (1.0, 2.0),
        min_separation: true,
        rare: None,
        length: 0,
    };
    let train_base = TrainConfig {
        n_atoms: 2,
        atom_len,
        n_iter: 30,
        n_windows: 8,
        window_width: 10 * atom_len,
        n_fista: 50,
        seed: a.seed,
        ..Default::default()
    };

    if let Some(list) = &a.sizes {
        let sizes: Vec<usize> = parse_list(list, "size")?;
        let path = a.out_dir.join("bench.csv");
        ensure_writable(&path, a.force)?;
        let mut lines = vec!["length,iterations,wall_ms".to_string()];
        for &t in &sizes {
            let spec = SimSpec { length: t, ..base.clone() };
            spec.validate()?;
            let (signals, _) = synthesize(&spec)?;
            let t0 = Instant::now();
            let report = train(&signals, &train_base, None)?;
            let wall = t0.elapsed().as_secs_f64() * 1e3;
            if let Some(msg) = &report.failure {
                return Err(Error::Numeric(format!("bench at length {t} failed: {msg}")));
            }
            println!("length {t}: {wall:.1} ms for {} iterations", report.records.len());
            lines.push(format!("{t},{},{wall}", report.records.len()));
        }
        std::fs::write(&path, lines.join("\n") + "\n")
            .map_err(|e| Error::io(path.clone(), e))?;
    }

    if let Some(list) = &a.window_factors {
        let mut factors: Vec<usize> = parse_list(list, "window factor")?;
        factors.sort_unstable();
        factors.dedup();
        let path = a.out_dir.join("windows.csv");
        ensure_writable(&path, a.force)?;
        let spec = SimSpec { length: 200_000, ..base.clone() };
        let (signals, _) = synthesize(&spec)?;
        let eval_opts = EncodeOptions { n_fista: 300, chunk_size: 10_000_000 };

        // the largest window anchors the penalty; every other run reuses
        // it so all dictionaries are judged on the same objective
        let largest = *factors.last().expect("nonempty");
        let anchor_cfg =
            TrainConfig { window_width: largest * atom_len, ..train_base.clone() };
        let anchor = train(&signals, &anchor_cfg, None)?;
        if let Some(msg) = &anchor.failure {
            return Err(Error::Numeric(format!("window study failed: {msg}")));
        }
        let shared = anchor.lambda;

        let mut rows = vec![window_study_row(largest, atom_len, shared, anchor, &signals, &eval_opts)?];
        for &f in factors.iter().rev().skip(1) {
            let cfg = TrainConfig { window_width: f * atom_len, ..train_base.clone() };
            let report = crate::learn::train_with_lambda(&signals, &cfg, shared, None)?;
            if let Some(msg) = &report.failure {
                return Err(Error::Numeric(format!("window study failed: {msg}")));
            }
            rows.push(window_study_row(f, atom_len, shared, report, &signals, &eval_opts)?);
        }
        rows.sort_by_key(|r| r.0);

        let mut lines =
            vec!["factor,window_width,lambda,objective_per_sample,train_wall_ms".to_string()];
        for (f, width, obj, wall) in rows {
            println!("window factor {f}: objective/sample {obj} in {wall:.1} ms");
            lines.push(format!("{f},{width},{shared},{obj},{wall}"));
        }
        std::fs::write(&path, lines.join("\n") + "\n")
            .map_err(|e| Error::io(path.clone(), e))?;
    }
    Ok(())
}

/// Scores one window-study run: the trained dictionary is applied to the
/// full signal at the shared penalty, and the objective is normalized per
/// sample so widths are comparable.
fn window_study_row(
    factor: usize,
    atom_len: usize,
    shared_lambda: f64,
    report: TrainReport,
    signals: &[SignalTensor],
    opts: &EncodeOptions,
) -> Result<(usize, usize, f64, f64)> {
    let x = &signals[0];
    let z = encode_signal(x, &report.dictionary, shared_lambda, opts)?;
    let obj = sparse::objective(x, &report.dictionary, &z, shared_lambda)?;
    let per_sample = obj.total / x.length() as f64;
    let wall: f64 = report.records.iter().map(|r| r.wall_ms).sum();
    Ok((factor, factor * atom_len, per_sample, wall))
}
