//! `s2st`: data generation, training, inference, evaluation and plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2st_core::config::Preset;
use s2st_core::corpus::{generate, read_shard, write_shard, Split, SPLIT_NAMES};
use s2st_core::evaluation::{evaluate, plot, write_report, EvalOptions};
use s2st_core::kv;
use s2st_core::model::{InferOptions, Model};
use s2st_core::signal::{griffin_lim, invert_mel, mel_spectrogram, read_mel, read_wav, write_mel, write_wav, MelFilterbank};
use s2st_core::training::{train, Checkpoint, RunOptions};
use s2st_core::Error;

const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "s2st", version, about = "Direct speech-to-speech translation on a synthetic toy corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Base preset: fisher, covost2, conversational or toy. Defaults to the
    /// `preset=` line of `--config`, then `toy`.
    #[arg(long)]
    preset: Option<String>,
    /// Flat `key=value` file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, applied after `--config`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus split 90/5/5 into train/valid/test shards.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on `<data>/train`, validating on `<data>/valid`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Translate one utterance given as WAV or `T2MEL1` mel file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Writes `<out>.phonemes.txt`, `<out>.mel` and `<out>.wav`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        duration_scale: f64,
    },
    /// Score a checkpoint on a shard directory.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        duration_scale: f64,
        /// Score the reference targets instead of model output.
        #[arg(long)]
        references: bool,
        #[arg(long)]
        max_items: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render eval outputs as PGM images.
    Plot {
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    PresetDump {
        name: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn resolve(args: &ConfigArgs) -> Result<Preset, Error> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        pairs.extend(kv::parse(&text)?);
    }
    for s in &args.set {
        pairs.push(kv::parse_override(s)?);
    }
    let from_file = pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone());
    let base = args.preset.clone().or(from_file).unwrap_or_else(|| "toy".into());
    Preset::named(&base)?.with_overrides(pairs.iter().filter(|(k, _)| k != "preset").map(|(k, v)| (k.as_str(), v.as_str())))
}

fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint), Error> {
    let ckpt = Checkpoint::load(path)?;
    let (model, _) = Model::build(&ckpt.preset)?;
    Ok((model, ckpt))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, out, count, seed } => {
            let preset = resolve(&config)?;
            let all = generate(&preset.corpus, &preset.input_mel, &preset.output_mel, seed, 0, count)?;
            let mut splits: [Vec<_>; 3] = Default::default();
            for (i, ex) in all.into_iter().enumerate() {
                splits[Split::of(i, count) as usize].push(ex);
            }
            for (name, examples) in SPLIT_NAMES.iter().zip(&splits) {
                write_shard(&out.join(name), examples)?;
            }
            std::fs::write(out.join(CONFIG_FILE), preset.dump())?;
            eprintln!("wrote {} train, {} valid, {} test examples to {}", splits[0].len(), splits[1].len(), splits[2].len(), out.display());
        }
        Command::Train { config, data, out, resume, log_every } => {
            let preset = resolve(&config)?;
            let pool = read_shard(&data.join("train"))?;
            if pool.is_empty() {
                return Err(Error::Data(format!("{} has no training examples", data.display())));
            }
            let valid_dir = data.join("valid");
            let valid = if valid_dir.exists() { read_shard(&valid_dir)? } else { Vec::new() };
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join(CONFIG_FILE), preset.dump())?;
            let summary = train(&preset, Arc::new(pool), &valid, &RunOptions { out_dir: out, resume, log_every })?;
            eprintln!(
                "finished at step {} ({} skipped, {} clipped); last checkpoint {}",
                summary.steps,
                summary.skipped_steps,
                summary.clipped_steps,
                summary.last_checkpoint.display()
            );
        }
        Command::Infer { checkpoint, input, out, seed, duration_scale } => {
            let (model, ckpt) = load_checkpoint(&checkpoint)?;
            let preset = &ckpt.preset;
            let is_wav = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            let source = if is_wav {
                let wave = read_wav(&input)?;
                if wave.sample_rate != preset.input_mel.sample_rate {
                    return Err(Error::Signal(format!(
                        "input is {} Hz but the model expects {} Hz",
                        wave.sample_rate, preset.input_mel.sample_rate
                    )));
                }
                mel_spectrogram(&wave, &preset.input_mel)?
            } else {
                read_mel(&input)?
            };
            if source.config != preset.input_mel {
                return Err(Error::Signal("input mel configuration does not match the model".into()));
            }
            let opts = InferOptions { seed, duration_scale, max_decode_len: None };
            let t = model.translate(&ckpt.params, &source, &opts)?;
            let text: Vec<String> = t.phonemes.iter().map(|p| p.to_string()).collect();
            let with_ext = |ext: &str| {
                let mut s = out.clone().into_os_string();
                s.push(ext);
                PathBuf::from(s)
            };
            if let Some(dir) = with_ext("").parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(with_ext(".phonemes.txt"), text.join(" ") + "\n")?;
            write_mel(&with_ext(".mel"), &t.mel)?;
            let fb = MelFilterbank::new(&t.mel.config)?;
            let mag = invert_mel(&t.mel, &fb)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gl = griffin_lim(&mag, preset.eval.griffin_lim_iters, &mut rng)?;
            write_wav(&with_ext(".wav"), &gl.wave)?;
            if t.truncated {
                eprintln!("decoding hit the length limit without EOS");
            }
            eprintln!("{} phonemes, {} frames", t.phonemes.len(), t.mel.num_frames);
        }
        Command::Eval { checkpoint, data, out, seed, duration_scale, references, max_items, config } => {
            let (model, params) = match &checkpoint {
                Some(path) => {
                    let (m, c) = load_checkpoint(path)?;
                    (m, c.params)
                }
                None if references => Model::build(&resolve(&config)?)?,
                None => return Err(Error::Config("--checkpoint is required unless --references is given".into())),
            };
            let examples = read_shard(&data)?;
            let opts = EvalOptions { seed, duration_scale, use_references: references, max_items, ..EvalOptions::default() };
            let report = evaluate(&model, &params, &examples, &opts)?;
            write_report(&out, &report)?;
            eprintln!(
                "{} items: BLEU {:.4}, UDR {:.4}, matched {:.4}, mismatched {:.4}",
                report.items.len(),
                report.bleu.bleu,
                report.udr.pooled,
                report.mean_matched(),
                report.mean_mismatched()
            );
        }
        Command::Plot { eval_dir, out } => {
            let written = plot(&eval_dir, &out)?;
            eprintln!("wrote {} images to {}", written.len(), out.display());
        }
        Command::PresetDump { name, config, set } => {
            let preset = resolve(&ConfigArgs { preset: name, config, set })?;
            print!("{}", preset.dump());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
