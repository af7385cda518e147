use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seq2seq_asr::pipeline::{self, DecodeMode, DecodeOptions, PipelineError, Run, RunConfig};
use seq2seq_asr::trainer::INGREDIENTS;

/// Attention encoder-decoder speech recognition: data, training, decoding and scoring.
#[derive(Parser)]
#[command(name = "s2s-asr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled config: full, small, lm-large or toy.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory holding configs/, checkpoints/, logs/ and reports/.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Worker threads; defaults to S2S_WORKERS or the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the data directory.
    GenData,
    /// Log-mel features from a list of `utterance_id speaker_id wav_path` lines.
    Prep {
        #[arg(long)]
        wav_list: PathBuf,
        /// Split name of the written feature corpus.
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Train the subword model on the training transcripts.
    TrainBpe,
    /// Train the acoustic model.
    Train,
    /// Train the external language model.
    TrainLm,
    /// Decode a split.
    Decode {
        /// Greedy decoding instead of beam search.
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
        /// Beam width (overrides `beam_width`).
        #[arg(long)]
        beam: Option<usize>,
        /// Decode without the external LM.
        #[arg(long)]
        no_lm: bool,
        /// Split to decode (overrides `decode_split`).
        #[arg(long)]
        split: Option<String>,
        /// Hypotheses kept per utterance (overrides `nbest`).
        #[arg(long)]
        nbest: Option<usize>,
    },
    /// Word error rate of a hypothesis file.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// WER over beam widths with and without the LM.
    SweepBeam {
        /// Comma-separated widths (overrides `sweep_beams`).
        #[arg(long)]
        beams: Option<String>,
    },
    /// Parameter counts of the configured model and LM.
    CountParams,
    /// Baseline plus one run per discarded ingredient.
    Ablate {
        /// Ingredient to discard; repeatable. Default: all of them.
        #[arg(long)]
        off: Vec<String>,
        /// Print the ingredient names and exit.
        #[arg(long)]
        ingredients: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(PipelineError::Config(format!("config file not found: {}", path.display())));
            }
            RunConfig::from_file(path)?
        }
        (None, Some(name)) => RunConfig::bundled(name)?,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn set_workers(n: Option<usize>) -> Result<(), PipelineError> {
    let n = match n {
        Some(n) => Some(n),
        None => match std::env::var("S2S_WORKERS") {
            Ok(v) => Some(v.parse().map_err(|_| PipelineError::Config(format!("S2S_WORKERS: bad worker count `{}`", v)))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(PipelineError::Config("workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| PipelineError::Other(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    set_workers(cli.common.workers)?;
    let mut cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::Decode { beam, split, nbest, greedy, .. } => {
            if let Some(b) = beam {
                cfg.set("beam_width", &b.to_string())?;
            }
            if *greedy {
                cfg.set("beam_width", "1")?;
            }
            if let Some(s) = split {
                cfg.set("decode_split", s)?;
            }
            if let Some(n) = nbest {
                cfg.set("nbest", &n.to_string())?;
            }
        }
        Command::SweepBeam { beams: Some(b) } => cfg.set("sweep_beams", b)?,
        Command::CountParams => {
            print!("{}", pipeline::count_params(&cfg));
            return Ok(());
        }
        Command::Ablate { ingredients: true, .. } => {
            for (name, key) in INGREDIENTS {
                println!("{}\t{}", name, key);
            }
            return Ok(());
        }
        _ => {}
    }
    let mut run = Run::open(&cli.common.run_dir, cfg)?;
    match cli.command {
        Command::GenData => {
            let paths = pipeline::gen_data(&run)?;
            println!("corpus written to {}", paths.dir.display());
        }
        Command::Prep { wav_list, name } => {
            let m = pipeline::prep(&run, &wav_list, &name)?;
            println!("features written to {}", m.display());
        }
        Command::TrainBpe => {
            let bpe = pipeline::train_bpe(&mut run)?;
            println!("{} subword units", bpe.vocab.len());
        }
        Command::Train => {
            let s = pipeline::train_model(&mut run)?;
            if let Some(last) = s.log.last() {
                println!("epoch {} train_loss {:.4} heldout_loss {:.4} token_error {:.4}", last.schedule.epoch, last.train_loss, last.heldout_loss, last.token_error_rate);
            }
        }
        Command::TrainLm => {
            let s = pipeline::train_lm_cmd(&mut run)?;
            println!("dev perplexity: reset {:.3}  cross-utterance {:.3}", s.reset_ppl, s.cross_ppl);
        }
        Command::Decode { greedy, no_lm, .. } => {
            let opts = DecodeOptions { mode: if greedy { DecodeMode::Greedy } else { DecodeMode::Beam }, use_lm: !no_lm };
            let s = pipeline::decode(&mut run, &opts)?;
            print!("token_error_rate {:.6}\n{}", s.token_error_rate, s.score.summary());
        }
        Command::Score { hyp, split } => {
            let r = pipeline::score(&mut run, &split, &hyp)?;
            print!("{}", r.summary());
        }
        Command::SweepBeam { .. } => {
            let rows = pipeline::sweep(&mut run)?;
            println!("{}", seq2seq_asr::search::SWEEP_HEADER);
            for r in rows {
                println!("{}", r);
            }
        }
        Command::Ablate { off, .. } => {
            let names: Vec<String> = if off.is_empty() { INGREDIENTS.iter().map(|(n, _)| n.to_string()).collect() } else { off };
            let rows = pipeline::ablate(&mut run, &names)?;
            println!("{}", pipeline::ABLATION_HEADER);
            for r in rows {
                println!("{}", r);
            }
        }
        Command::CountParams => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
