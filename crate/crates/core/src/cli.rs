//! The `textirl` command line.
//!
//! Every command reads a JSON [`RunConfig`] (`--config`, optional) and
//! accepts `--seed`, `--out` and `--steps` overrides. Outputs go to the
//! output directory together with the effective configuration. Failures print
//! one JSON object `{"error": kind, "message": text}` on stderr and exit
//! with status 1 (2 for usage errors).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RunConfig, SampleFormat};
use crate::corpus::{read_token_file, write_token_file, Vocab};
use crate::metrics::evaluate_bleu;
use crate::numerics::RngStream;
use crate::oracle::{generate_dataset, make_oracle, nll_oracle, OracleModel};
use crate::policy::{sample_batch, GeneratorDims, GeneratorParams, SeqMode};
use crate::reward::{RewardDims, RewardParams};
use crate::trainer::{pretrain_mle, run_irl_with};
use crate::{Error, Result, EOS, NUM_RESERVED};

#[derive(Parser, Debug)]
#[command(name = "textirl", version, about = "Maximum-entropy IRL for text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random oracle LSTM and write its checkpoint plus train/test token files.
    OracleGen(Common),
    /// MLE-pretrain a generator on `data.train` (`--steps` = epochs).
    Pretrain(Common),
    /// Run alternating r-steps and g-steps (`--steps` = iterations).
    Train(Common),
    /// Write sequences sampled from a generator (`--steps` = count).
    Sample(Common),
    /// Print the oracle's per-token NLL of generated sequences (`--steps` = count).
    EvalNll(Common),
    /// Print forward, backward and harmonic BLEU against `data.test` (`--steps` = count).
    EvalBleu(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::OracleGen(_) => "oracle-gen",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::EvalNll(_) => "eval-nll",
            Command::EvalBleu(_) => "eval-bleu",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::OracleGen(c)
            | Command::Pretrain(c)
            | Command::Train(c)
            | Command::Sample(c)
            | Command::EvalNll(c)
            | Command::EvalBleu(c) => c,
        }
    }
}

/// Entry point used by the binary; returns the process exit status.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_json("usage", first));
            return 2;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            1
        }
    }
}

/// Parses `args` (program name first) and runs the command, writing JSON
/// results to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli, stdout)
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let name = cli.command.name();
    let common = cli.command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = common.steps {
        match cli.command {
            Command::OracleGen(_) => return Err(Error::Config("oracle-gen takes no --steps".into())),
            Command::Pretrain(_) => cfg.train.pretrain_epochs = n,
            Command::Train(_) => cfg.train.total_iterations = n,
            Command::Sample(_) | Command::EvalNll(_) | Command::EvalBleu(_) => cfg.sample.n = n,
        }
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        // A second call in the same process keeps the first pool; results do
        // not depend on the thread count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let echo = cfg.out_dir.join(format!("config.{name}.json"));
    std::fs::write(&echo, cfg.to_json_pretty()).map_err(|e| Error::io(&echo, e))?;

    match cli.command {
        Command::OracleGen(_) => oracle_gen(&cfg),
        Command::Pretrain(_) => pretrain(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Sample(_) => sample(&cfg),
        Command::EvalNll(_) => eval_nll(&cfg, stdout),
        Command::EvalBleu(_) => eval_bleu(&cfg, stdout),
    }
}

fn out(cfg: &RunConfig, file: &str) -> PathBuf {
    cfg.out_dir.join(file)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{what} is not set")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn oracle_gen(cfg: &RunConfig) -> Result<()> {
    let o = &cfg.oracle;
    let oracle = make_oracle(cfg.seed, o.v_content, o.d_emb, o.d_hid)?;
    save_checkpoint(&out(cfg, "oracle.ckpt"), &Checkpoint::from_oracle(&oracle))?;
    let data = RngStream::new(cfg.seed).child("oracle-data");
    let train = generate_dataset(&oracle, o.train_samples, o.seq_len, &data.child("train"))?;
    let test = generate_dataset(&oracle, o.test_samples, o.seq_len, &data.child("test"))?;
    write_token_file(&out(cfg, "train.txt"), &train)?;
    write_token_file(&out(cfg, "test.txt"), &test)
}

/// Total vocabulary size: from `data.vocab` when given, else the oracle's.
fn v_total(cfg: &RunConfig) -> Result<usize> {
    match &cfg.data.vocab {
        Some(p) => Ok(Vocab::read(p)?.len()),
        None => Ok(cfg.oracle.v_content + NUM_RESERVED),
    }
}

/// Reads `data.train`; in eos-terminated mode EOS is appended to sequences
/// shorter than `max_len` that lack it.
fn load_trainset(cfg: &RunConfig, v_total: usize) -> Result<Vec<Vec<usize>>> {
    let path = require(&cfg.data.train, "data.train")?;
    let mut seqs = read_token_file(path)?;
    let (mode, max_len) = (cfg.train.mode, cfg.train.max_len);
    for (i, s) in seqs.iter_mut().enumerate() {
        if mode == SeqMode::EosTerminated && s.last() != Some(&EOS) && s.len() < max_len {
            s.push(EOS);
        }
        if s.len() > max_len || s.is_empty() {
            return Err(Error::arg(format!(
                "{}: sequence {} has length {} (allowed 1..={max_len})",
                path.display(),
                i + 1,
                s.len()
            )));
        }
        if mode == SeqMode::FixedLength && s.len() != max_len {
            return Err(Error::arg(format!(
                "{}: sequence {} has length {} but fixed-length mode needs {max_len}",
                path.display(),
                i + 1,
                s.len()
            )));
        }
        mode.validate(s, v_total).map_err(|e| Error::arg(format!("{}: sequence {}: {e}", path.display(), i + 1)))?;
    }
    if seqs.is_empty() {
        return Err(Error::arg(format!("{} holds no sequences", path.display())));
    }
    Ok(seqs)
}

fn initial_generator(cfg: &RunConfig, v_total: usize) -> Result<GeneratorParams> {
    match &cfg.init.generator {
        Some(p) => {
            let g = load_checkpoint(p)?.into_generator()?;
            if g.dims().v_total != v_total {
                return Err(Error::Config(format!(
                    "generator checkpoint has {} ids but the data needs {v_total}",
                    g.dims().v_total
                )));
            }
            Ok(g)
        }
        None => {
            let dims = GeneratorDims::new(v_total, cfg.model.d_emb, cfg.model.d_hid)?;
            Ok(GeneratorParams::init_default(dims, &RngStream::new(cfg.seed).child("init").child("generator")))
        }
    }
}

fn initial_reward(cfg: &RunConfig, v_total: usize) -> Result<RewardParams> {
    match &cfg.init.reward {
        Some(p) => load_checkpoint(p)?.into_reward(),
        None => {
            let dims = RewardDims::new(v_total, cfg.model.d_emb, cfg.model.d_hid, cfg.d_mlp())?;
            RewardParams::init_default(dims, cfg.model.keep_prob, &RngStream::new(cfg.seed).child("init").child("reward"))
        }
    }
}

fn load_oracle(cfg: &RunConfig) -> Result<Option<OracleModel>> {
    cfg.oracle
        .checkpoint
        .as_deref()
        .map(|p| load_checkpoint(p)?.into_oracle())
        .transpose()
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let v = v_total(cfg)?;
    let trainset = load_trainset(cfg, v)?;
    let mut g = initial_generator(cfg, v)?;
    let log_path = out(cfg, "pretrain_log.jsonl");
    let mut log = String::new();
    let rng = RngStream::new(cfg.seed).child("pretrain");
    pretrain_mle(&mut g, &trainset, cfg.train.pretrain_epochs, &cfg.train, &rng, |epoch, loss| {
        log.push_str(&serde_json::json!({ "epoch": epoch, "loss": loss }).to_string());
        log.push('\n');
        Ok(())
    })?;
    write_text(&log_path, &log)?;
    save_checkpoint(&out(cfg, "generator.ckpt"), &Checkpoint::from_generator(&g))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let v = v_total(cfg)?;
    let trainset = load_trainset(cfg, v)?;
    let g = initial_generator(cfg, v)?;
    let r = initial_reward(cfg, v)?;
    let oracle = load_oracle(cfg)?;
    let ck_dir = out(cfg, "checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let log_path = out(cfg, "train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let (g, r, _) = run_irl_with(g, r, &trainset, &cfg.train, oracle.as_ref(), |rec, g, r| {
        let i = rec.iteration;
        save_checkpoint(&ck_dir.join(format!("generator_{i:05}.ckpt")), &Checkpoint::from_generator(g))?;
        save_checkpoint(&ck_dir.join(format!("reward_{i:05}.ckpt")), &Checkpoint::from_reward(r))?;
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    })?;
    save_checkpoint(&out(cfg, "generator.ckpt"), &Checkpoint::from_generator(&g))?;
    save_checkpoint(&out(cfg, "reward.ckpt"), &Checkpoint::from_reward(&r))
}

/// Generator named by `init.generator`, else `<out>/generator.ckpt`.
fn trained_generator(cfg: &RunConfig) -> Result<GeneratorParams> {
    let path = cfg.init.generator.clone().unwrap_or_else(|| out(cfg, "generator.ckpt"));
    load_checkpoint(&path)?.into_generator()
}

/// Content tokens of `sample.n` generated sequences (EOS removed), or the
/// token file named by `init.samples`.
fn generated(cfg: &RunConfig, label: &str) -> Result<Vec<Vec<usize>>> {
    if let Some(p) = &cfg.init.samples {
        return read_token_file(p);
    }
    let g = trained_generator(cfg)?;
    let rng = RngStream::new(cfg.seed).child(label);
    Ok(sample_batch(&g, cfg.sample.n, cfg.train.max_len, cfg.train.mode, &rng)?
        .into_iter()
        .map(|t| t.tokens.into_iter().filter(|&a| a != EOS).collect())
        .collect())
}

fn sample(cfg: &RunConfig) -> Result<()> {
    let seqs = generated(cfg, "sample")?;
    let path = out(cfg, "samples.txt");
    match cfg.sample.format {
        SampleFormat::Ids => write_token_file(&path, &seqs),
        SampleFormat::Text => {
            let vocab = Vocab::read(require(&cfg.data.vocab, "data.vocab")?)?;
            let mut text = String::new();
            for s in &seqs {
                text.push_str(&vocab.decode(s, cfg.train.mode)?.join(" "));
                text.push('\n');
            }
            write_text(&path, &text)
        }
    }
}

fn eval_nll(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let oracle = match load_oracle(cfg)? {
        Some(o) => o,
        None => load_checkpoint(&out(cfg, "oracle.ckpt"))?.into_oracle()?,
    };
    let seqs = generated(cfg, "eval")?;
    let nll = nll_oracle(&oracle, &seqs)?;
    let line = serde_json::json!({ "nll_oracle": nll, "samples": seqs.len() });
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn eval_bleu(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let test = read_token_file(require(&cfg.data.test, "data.test")?)?;
    let test: Vec<Vec<usize>> = test.into_iter().map(|s| s.into_iter().filter(|&a| a != EOS).collect()).collect();
    let seqs = generated(cfg, "eval")?;
    let m = &cfg.metrics;
    let report = evaluate_bleu(&seqs, &test, &m.orders, &m.bleu, m.sample_sizes, cfg.seed)?;
    let line = serde_json::to_string(&report).expect("report serializes");
    write_text(&out(cfg, "metrics.json"), &format!("{line}\n"))?;
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}
