use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use seqdiff::data::{self, SampleRecord, SynthConfig, SynthTask};
use seqdiff::decoding::{generate_candidates, mbr_select, SampleConfig};
use seqdiff::metrics::{evaluate, EvalItem};
use seqdiff::tokenizer::{train_bpe, Vocab, DEFAULT_VOCAB_SIZE};
use seqdiff::training::{Checkpoint, TrainConfig, Trainer};
use seqdiff::{Error, Result};

const SEED_ENV: &str = "SEQDIFF_SEED";

#[derive(Parser)]
#[command(name = "seqdiff", version, about = "Sequence-to-sequence text diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE vocab on the src and trg sides of a dataset.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and metrics.jsonl into the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config seed (falls back to SEQDIFF_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate candidates and the MBR choice for every source line.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Plain text, one source per line, or JSONL with a `src` field.
        #[arg(long)]
        src_file: PathBuf,
        /// Inference steps (defaults to the trained step count).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        #[arg(long)]
        clamp: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Vocab file to check against the checkpoint; the embedded vocab is used otherwise.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Eval {
        /// Sampler output, dataset JSONL (trg) or plain text.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// JSON report path; per-example scores go next to it with a .tsv extension.
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a synthetic paired dataset.
    GenSynth {
        /// copy, reverse or one-to-many
        #[arg(long)]
        task: SynthTask,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 12)]
        vocab: usize,
        #[arg(long, default_value_t = 1)]
        min_len: usize,
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn seed_or_env(seed: Option<u64>) -> Result<Option<u64>> {
    if seed.is_some() {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::from_text(&read(path)?)
}

fn build_vocab(data: &Path, vocab_size: usize, out: &Path) -> Result<()> {
    let pairs = data::load_pairs(data)?;
    let corpus: Vec<&str> = pairs.iter().flat_map(|p| [p.src.as_str(), p.trg.as_str()]).collect();
    let vocab = train_bpe(&corpus, vocab_size)?;
    fs::write(out, vocab.to_text()).map_err(|e| Error::io(out, e))?;
    info!("wrote {} tokens to {}", vocab.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    data_path: &Path,
    valid: Option<&Path>,
    vocab_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let vocab = load_vocab(vocab_path)?;
    let load_split = |path: &Path, max_len: usize| -> Result<_> {
        Ok(data::encode_pairs(&data::load_pairs(path)?, &vocab, max_len))
    };
    let mut trainer = if let Some(ckpt_path) = resume {
        let ckpt = Checkpoint::load(ckpt_path)?;
        ckpt.verify_vocab(&vocab)?;
        let max_len = ckpt.params.config.max_len;
        let valid = valid.map(|p| load_split(p, max_len)).transpose()?.unwrap_or_default();
        Trainer::resume(ckpt, load_split(data_path, max_len)?, valid)?
    } else {
        let mut cfg = match config {
            Some(p) => TrainConfig::parse(&read(p)?).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                e => e,
            })?,
            None => TrainConfig::default(),
        };
        if let Some(s) = seed_or_env(seed)? {
            cfg.seed = s;
        }
        let valid = valid.map(|p| load_split(p, cfg.max_len)).transpose()?.unwrap_or_default();
        let train = load_split(data_path, cfg.max_len)?;
        Trainer::new(cfg, &vocab, train, valid)?
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    info!(
        "training {} parameters for {} steps",
        trainer.params().num_trainable(),
        trainer.config().steps
    );
    trainer.run(Some(out_dir), Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    info!("final checkpoint in {}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt_path: &Path,
    src_file: &Path,
    steps: Option<usize>,
    candidates: usize,
    clamp: bool,
    seed: Option<u64>,
    out: &Path,
    vocab_path: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let vocab = match vocab_path {
        Some(p) => {
            let v = load_vocab(p)?;
            ckpt.verify_vocab(&v)?;
            v
        }
        None => ckpt.vocab()?,
    };
    let schedule = ckpt.meta.schedule.build()?;
    let cfg = SampleConfig {
        steps: steps.unwrap_or(schedule.steps()),
        clamp,
        candidates,
        seed: seed_or_env(seed)?.unwrap_or(0),
    };
    let sources = data::parse_sources(&read(src_file)?)?;
    let ids: Vec<Vec<u32>> = sources.iter().map(|s| vocab.encode(s)).collect();
    let outputs = generate_candidates(&ckpt.params, &schedule, &ids, &cfg)?;
    let mut text = String::new();
    for (src, cands) in sources.iter().zip(outputs) {
        let (choice, _) = mbr_select(&cands)?;
        let rec = SampleRecord {
            src: src.clone(),
            candidates: cands.iter().map(|c| vocab.decode(c)).collect(),
            mbr_choice: choice,
            seed: cfg.seed,
            steps: cfg.steps,
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    info!("wrote {} samples to {}", sources.len(), out.display());
    Ok(())
}

fn eval(hyp: &Path, refs: &Path, report: &Path) -> Result<()> {
    let hyps = data::load_text_lines(hyp)?;
    let refs = data::load_text_lines(refs)?;
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let items: Vec<EvalItem<'_>> = hyps
        .iter()
        .zip(&refs)
        .map(|(h, r)| EvalItem {
            hyp: &h.text,
            refs: vec![r.text.as_str()],
            candidates: if h.candidates.is_empty() {
                vec![h.text.as_str()]
            } else {
                h.candidates.iter().map(String::as_str).collect()
            },
        })
        .collect();
    let (summary, per_example) = evaluate(&items);
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(report, json + "\n").map_err(|e| Error::io(report, e))?;
    let tsv_path = report.with_extension("tsv");
    let mut tsv = String::from("index\tbleu\trouge_l\tdist1\tself_bleu\tdiv4\tlen\thyp\n");
    for (i, (s, h)) in per_example.iter().zip(&hyps).enumerate() {
        tsv.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.bleu, s.rouge_l, s.dist1, s.self_bleu, s.div4, s.len, h.text
        ));
    }
    fs::write(&tsv_path, tsv).map_err(|e| Error::io(&tsv_path, e))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { data, vocab_size, out } => build_vocab(&data, vocab_size, &out),
        Command::Train {
            config,
            data,
            valid,
            vocab,
            out_dir,
            seed,
            resume,
        } => train(
            config.as_deref(),
            &data,
            valid.as_deref(),
            &vocab,
            &out_dir,
            seed,
            resume.as_deref(),
        ),
        Command::Sample {
            ckpt,
            src_file,
            steps,
            candidates,
            clamp,
            seed,
            out,
            vocab,
        } => sample(&ckpt, &src_file, steps, candidates, clamp, seed, &out, vocab.as_deref()),
        Command::Eval { hyp, refs, report } => eval(&hyp, &refs, &report),
        Command::GenSynth {
            task,
            pairs,
            vocab,
            min_len,
            max_len,
            seed,
            out,
        } => {
            let synth = SynthConfig {
                task,
                pairs,
                vocab,
                min_len,
                max_len,
                seed: seed_or_env(seed)?.unwrap_or(0),
            };
            data::write_pairs(&out, &data::generate_synth(&synth)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
