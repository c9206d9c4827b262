//! Command-line surface: corpus ingestion, subcommand dispatch, artifact and
//! report emission.
//!
//! Exit codes: 0 success, 1 validation findings (from `verify`), 2 errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::forward::{self, CalibrationBatch};
use crate::pruner::{self, PruneError, PruneSpec};
use crate::scoring::{self, ScorerKind};
use crate::tensorstore::{self, ModelConfig};
use crate::tokenizer::{self, BpeTokenizer, RareTokenSet, TokenizerError};

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("calibration file {0} is empty")]
    EmptyCorpusFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] tensorstore::TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Forward(#[from] forward::ForwardError),
    #[error(transparent)]
    Score(#[from] scoring::ScoreError),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a newline-delimited text corpus and deterministically sample, encode,
/// and truncate documents into a calibration batch.
pub fn load_corpus(
    path: &Path,
    tokenizer: &BpeTokenizer,
    n_samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationBatch, CliError> {
    let docs = read_documents(path)?;
    Ok(pruner::build_calibration(
        tokenizer, &docs, n_samples, seq_len, seed,
    )?)
}

fn read_documents(path: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let raw = read_file(path)?;
    let docs: Vec<Vec<u8>> = raw
        .split(|&b| b == b'\n')
        .map(|line| line.strip_suffix(b"\r").unwrap_or(line))
        .filter(|line| !line.is_empty())
        .map(<[u8]>::to_vec)
        .collect();
    if docs.is_empty() {
        return Err(CliError::EmptyCorpusFile(path.to_path_buf()));
    }
    Ok(docs)
}

#[derive(Parser, Debug)]
#[command(
    name = "compact",
    version,
    about = "Joint vocabulary + FFN-channel pruning for transformer checkpoints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CalibArgs {
    /// Newline-delimited text corpus for calibration
    #[arg(long)]
    pub calib: PathBuf,
    /// Number of calibration documents to sample
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Maximum tokens per calibration sequence
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for scoring (the COMPACT_THREADS variable applies when
    /// the flag is absent)
    #[arg(long)]
    pub threads: Option<usize>,
}

impl CalibArgs {
    fn resolve_threads(&self) -> usize {
        self.threads
            .or_else(|| {
                std::env::var("COMPACT_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(1)
            .max(1)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the parameter census for a model config
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Also write the census as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Enumerate (V', I') pairs achieving a target pruning ratio
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target_ratio: f64,
        #[arg(long, default_value_t = 256)]
        vocab_step: usize,
        #[arg(long, default_value_t = 128)]
        inter_step: usize,
        #[arg(long, default_value_t = 0.005)]
        tolerance: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Prune a checkpoint and write the result into a directory
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Retained vocabulary size (requires --inter-size)
        #[arg(long)]
        vocab_size: Option<usize>,
        /// Retained FFN intermediate size (requires --vocab-size)
        #[arg(long)]
        inter_size: Option<usize>,
        /// Plan (V', I') automatically for this ratio instead
        #[arg(long)]
        target_ratio: Option<f64>,
        #[arg(long, default_value = "common-act2")]
        scorer: String,
        #[arg(long, default_value_t = 256)]
        vocab_step: usize,
        #[arg(long, default_value_t = 128)]
        inter_step: usize,
        #[arg(long, default_value_t = 0.005)]
        tolerance: f64,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Score FFN channels and write the importance table
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Retained vocabulary size defining the rare-token mask
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long, default_value = "common-act2")]
        scorer: String,
        #[arg(long, default_value = "importance.json")]
        report: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Measure retokenization churn at a retained vocabulary size
    RetokStats {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a pruned output directory: structure, tokenizer closure,
    /// encode/decode round trips, and a forward smoke test
    Verify {
        /// Directory produced by `prune`
        dir: PathBuf,
    },
}

/// Run a parsed command; the return value is the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Analyze { config, report } => analyze(&config, report.as_deref()),
        Command::Sweep {
            config,
            target_ratio,
            vocab_step,
            inter_step,
            tolerance,
            report,
        } => sweep(
            &config,
            target_ratio,
            vocab_step,
            inter_step,
            tolerance,
            report.as_deref(),
        ),
        Command::Prune {
            model,
            tokenizer,
            config,
            out,
            vocab_size,
            inter_size,
            target_ratio,
            scorer,
            vocab_step,
            inter_step,
            tolerance,
            calib,
        } => prune(PruneArgs {
            model,
            tokenizer,
            config,
            out,
            vocab_size,
            inter_size,
            target_ratio,
            scorer,
            vocab_step,
            inter_step,
            tolerance,
            calib,
        }),
        Command::Score {
            model,
            tokenizer,
            config,
            vocab_size,
            scorer,
            report,
            calib,
        } => score(
            &model, &tokenizer, &config, vocab_size, &scorer, &report, &calib,
        ),
        Command::RetokStats {
            tokenizer,
            vocab_size,
            calib,
            report,
        } => retok_stats(&tokenizer, vocab_size, &calib, report.as_deref()),
        Command::Verify { dir } => verify(&dir),
    }
}

fn analyze(config_path: &Path, report: Option<&Path>) -> Result<i32, CliError> {
    let config = ModelConfig::load(config_path)?;
    let census = pruner::param_counts(&config);
    println!("{:<12} {:>16} {:>10}", "group", "parameters", "fraction");
    for (name, n, frac) in [
        ("vocab", census.n_vocab, census.vocab_fraction),
        ("ffn", census.n_ffn, census.ffn_fraction),
        ("attention", census.n_attention, census.attention_fraction),
        ("other", census.n_other, census.other_fraction),
    ] {
        println!("{name:<12} {n:>16} {frac:>10.4}");
    }
    println!("{:<12} {:>16} {:>10.4}", "total", census.n_total, 1.0);
    if let Some(path) = report {
        write_file(path, format!("{}\n", census.to_json()).as_bytes())?;
    }
    Ok(0)
}

fn sweep(
    config_path: &Path,
    target_ratio: f64,
    vocab_step: usize,
    inter_step: usize,
    tolerance: f64,
    report: Option<&Path>,
) -> Result<i32, CliError> {
    let config = ModelConfig::load(config_path)?;
    let points =
        pruner::enumerate_configs(&config, target_ratio, vocab_step, inter_step, tolerance)?;
    if points.is_empty() {
        println!("no (V', I') pair within {tolerance} of ratio {target_ratio} on this grid");
    } else {
        println!("{:>10} {:>8} {:>9}", "V'", "I'", "ratio");
        for p in &points {
            println!(
                "{:>10} {:>8} {:>8.2}%",
                p.v_prime,
                p.i_prime,
                p.ratio * 100.0
            );
        }
    }
    if let Some(path) = report {
        let json = serde_json::to_string_pretty(&points).expect("plan serialization");
        write_file(path, format!("{json}\n").as_bytes())?;
    }
    Ok(0)
}

struct PruneArgs {
    model: PathBuf,
    tokenizer: PathBuf,
    config: PathBuf,
    out: PathBuf,
    vocab_size: Option<usize>,
    inter_size: Option<usize>,
    target_ratio: Option<f64>,
    scorer: String,
    vocab_step: usize,
    inter_step: usize,
    tolerance: f64,
    calib: CalibArgs,
}

fn prune(args: PruneArgs) -> Result<i32, CliError> {
    let config = ModelConfig::load(&args.config)?;
    let (v_prime, i_prime) = match (args.vocab_size, args.inter_size, args.target_ratio) {
        (Some(v), Some(i), None) => (v, i),
        (None, None, Some(target)) => {
            let points = pruner::enumerate_configs(
                &config,
                target,
                args.vocab_step,
                args.inter_step,
                args.tolerance,
            )?;
            // closest achievable ratio; prefer the larger vocabulary on ties
            let best = points
                .iter()
                .min_by(|a, b| {
                    (a.ratio - target)
                        .abs()
                        .total_cmp(&(b.ratio - target).abs())
                        .then(b.v_prime.cmp(&a.v_prime))
                })
                .copied()
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "no (V', I') pair within {} of ratio {target}; widen --tolerance",
                        args.tolerance
                    ))
                })?;
            eprintln!(
                "planned V'={} I'={} (ratio {:.2}%)",
                best.v_prime,
                best.i_prime,
                best.ratio * 100.0
            );
            (best.v_prime, best.i_prime)
        }
        _ => {
            return Err(CliError::Usage(
                "pass either --vocab-size with --inter-size, or --target-ratio alone".into(),
            ))
        }
    };

    let weights = tensorstore::load_container(&args.model)?;
    let tok = tokenizer::load_tokenizer(&args.tokenizer)?;
    let docs = read_documents(&args.calib.calib)?;
    let spec = PruneSpec {
        v_prime,
        i_prime,
        scorer: args.scorer.parse()?,
        calibration: args.calib.calib.display().to_string(),
        n_samples: args.calib.samples,
        seq_len: args.calib.seq_len,
        seed: args.calib.seed,
        threads: args.calib.resolve_threads(),
    };

    let outcome = pruner::compact(&weights, &config, &tok, &docs, &spec)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }

    fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    tensorstore::save_container(&outcome.weights, &args.out.join("model.safetensors"))?;
    outcome.config.save(&args.out.join("config.json"))?;
    outcome.tokenizer.save(&args.out.join("tokenizer.json"))?;
    outcome.importance.save(&args.out.join("importance.json"))?;
    outcome
        .report
        .save(&args.out.join("report.json"))
        .map_err(|source| CliError::Io {
            path: args.out.join("report.json"),
            source,
        })?;

    println!(
        "pruned to V'={} I'={}: removed {:.2}% of parameters ({} positions scored) -> {}",
        outcome.report.v_prime,
        outcome.report.i_prime,
        outcome.report.achieved_ratio * 100.0,
        outcome.report.positions_used,
        args.out.display()
    );
    Ok(0)
}

fn score(
    model: &Path,
    tokenizer_path: &Path,
    config_path: &Path,
    vocab_size: Option<usize>,
    scorer: &str,
    report: &Path,
    calib: &CalibArgs,
) -> Result<i32, CliError> {
    let config = ModelConfig::load(config_path)?;
    let weights = tensorstore::load_container(model)?;
    let tok = tokenizer::load_tokenizer(tokenizer_path)?;
    let scorer: ScorerKind = scorer.parse()?;
    let rare = match vocab_size {
        Some(v_prime) => tok.rare_set(v_prime)?,
        None => RareTokenSet::empty(tok.vocab_size()),
    };
    let batch = load_corpus(&calib.calib, &tok, calib.samples, calib.seq_len, calib.seed)?;
    let table = scoring::score(
        &weights,
        &config,
        &batch,
        &rare,
        scorer,
        calib.resolve_threads(),
    )?;
    table.save(report)?;
    println!(
        "scored {} layers x {} channels over {} positions -> {}",
        table.layers.len(),
        table.layers.first().map_or(0, Vec::len),
        table.positions_used,
        report.display()
    );
    Ok(0)
}

fn retok_stats(
    tokenizer_path: &Path,
    vocab_size: usize,
    calib: &Path,
    report: Option<&Path>,
) -> Result<i32, CliError> {
    let tok = tokenizer::load_tokenizer(tokenizer_path)?;
    let rare = tok.rare_set(vocab_size)?;
    let pruned = tok.prune(&rare)?;
    let docs = read_documents(calib)?;
    let name = calib
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let churn = tokenizer::retok_stats(&tok, &pruned, &[(name, docs)])?;
    println!(
        "{:<20} {:>10} {:>10} {:>10} {:>10}",
        "source", "words", "changed", "frac", "inflation"
    );
    for s in &churn.sources {
        println!(
            "{:<20} {:>10} {:>10} {:>9.2}% {:>10.4}",
            s.name,
            s.words,
            s.changed_words,
            s.changed_fraction * 100.0,
            s.token_inflation
        );
    }
    if let Some(path) = report {
        write_file(path, format!("{}\n", churn.to_json()).as_bytes())?;
    }
    Ok(0)
}

fn verify(dir: &Path) -> Result<i32, CliError> {
    let mut findings: Vec<String> = Vec::new();

    let config = ModelConfig::load(&dir.join("config.json"))?;
    let weights = tensorstore::load_container(&dir.join("model.safetensors"))?;

    let report = tensorstore::validate(&weights, &config);
    for f in &report.findings {
        findings.push(f.to_string());
    }

    // tokenizer closure: construction re-checks every invariant
    match tokenizer::load_tokenizer(&dir.join("tokenizer.json")) {
        Err(TokenizerError::Io(source)) => {
            return Err(CliError::Io {
                path: dir.join("tokenizer.json"),
                source,
            })
        }
        Err(e) => findings.push(format!("tokenizer: {e}")),
        Ok(tok) => {
            if tok.vocab_size() != config.vocab_size {
                findings.push(format!(
                    "tokenizer has {} tokens but config.vocab_size is {}",
                    tok.vocab_size(),
                    config.vocab_size
                ));
            }
            findings.extend(fuzz_tokenizer(&tok, config.vocab_size));
        }
    }

    if findings.is_empty() {
        // forward smoke test: two tokens through the whole stack
        let ids = [0u32, (config.vocab_size - 1).min(1) as u32];
        match forward::forward_logits(&weights, &config, &ids) {
            Ok(logits) => {
                if logits.data.iter().any(|x| !x.is_finite()) {
                    findings.push("forward pass produced non-finite logits".into());
                }
            }
            Err(e) => findings.push(format!("forward pass failed: {e}")),
        }
    }

    if let Ok(text) = fs::read_to_string(dir.join("report.json")) {
        if serde_json::from_str::<pruner::PruneReport>(&text).is_err() {
            findings.push("report.json does not parse".into());
        }
    }

    if findings.is_empty() {
        println!("ok: {}", dir.display());
        Ok(0)
    } else {
        for f in &findings {
            println!("finding: {f}");
        }
        println!("{} finding(s) in {}", findings.len(), dir.display());
        Ok(1)
    }
}

/// Seeded encode/decode fuzz over the tokenizer's own alphabet: every id must
/// stay under the vocabulary size and decoding must restore the input.
fn fuzz_tokenizer(tok: &BpeTokenizer, vocab_size: usize) -> Vec<String> {
    let mut present = [false; 256];
    for id in 0..tok.vocab_size() as u32 {
        if let Some([b]) = tok.token_bytes(id) {
            present[*b as usize] = true;
        }
    }
    let alphabet: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
    if alphabet.is_empty() {
        return vec!["tokenizer has no single-byte tokens".into()];
    }
    let mut findings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for _ in 0..200 {
        let len = rng.gen_range(0..40);
        let text: Vec<u8> = (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        match tok.encode(&text) {
            Err(e) => {
                findings.push(format!("encode failed: {e}"));
                break;
            }
            Ok(ids) => {
                if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
                    findings.push(format!("encode produced id {bad} >= {vocab_size}"));
                    break;
                }
                if tok.decode(&ids).ok().as_deref() != Some(&text[..]) {
                    findings.push("decode(encode(x)) != x".into());
                    break;
                }
            }
        }
    }
    findings
}

/// Parse argv and run; maps errors to exit code 2 with a one-line diagnostic.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
