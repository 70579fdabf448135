//! End-to-end evaluation of a trained model on a held-out shard.

use std::path::Path;

use s2st_numerics::ParamStore;

use crate::corpus::{concat_aug, TrainingExample, EOS};
use crate::error::{Error, Result};
use crate::eval::{
    affinity_matrix, affinity_stats, corpus_udr, phoneme_bleu, speaker_embedding, speaker_turn_similarity, udr, write_affinity_pgm,
    write_csv, write_pgm, weight_byte, AffinityStats, BleuScore, CorpusUdr, SpeakerTurn, UdrReport,
};
use crate::model::{InferOptions, Model, Translation};
use crate::signal::MelSpectrogram;
use crate::training::{validate, ValidationMetrics};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub duration_scale: f64,
    /// Score the reference targets instead of model output.
    pub use_references: bool,
    pub max_items: Option<usize>,
    pub affinity_items: usize,
    /// Scored speaker-turn pairs to collect; discarded pairs are replaced
    /// by further candidates.
    pub speaker_turn_pairs: usize,
    /// Candidate pairs tried before giving up.
    pub max_turn_candidates: usize,
    /// Items whose attention weights are kept for plotting.
    pub attention_items: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            duration_scale: 1.0,
            use_references: false,
            max_items: None,
            affinity_items: 100,
            speaker_turn_pairs: 100,
            max_turn_candidates: 2000,
            attention_items: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ItemResult {
    pub id: String,
    pub predicted: Vec<usize>,
    pub reference: Vec<usize>,
    pub udr: UdrReport,
    pub truncated: bool,
    pub degenerate: bool,
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct TurnResult {
    pub id: String,
    pub turn: SpeakerTurn,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub items: Vec<ItemResult>,
    pub bleu: BleuScore,
    pub teacher_forced: Option<ValidationMetrics>,
    pub udr: CorpusUdr,
    pub affinity: Vec<Vec<f64>>,
    pub affinity_stats: Option<AffinityStats>,
    pub speaker_turns: Vec<TurnResult>,
    /// Pairs dropped because the prediction was too short.
    pub discarded_turns: usize,
    /// `(id, per phoneme per head weights)`.
    pub attention: Vec<(String, Vec<Vec<Vec<f64>>>)>,
}

impl EvalReport {
    pub fn mean_matched(&self) -> f64 {
        mean(self.speaker_turns.iter().map(|t| t.turn.matched()))
    }

    pub fn mean_mismatched(&self) -> f64 {
        mean(self.speaker_turns.iter().map(|t| t.turn.mismatched()))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn strip_eos(p: &[usize]) -> Vec<usize> {
    p.iter().copied().filter(|&x| x != EOS).collect()
}

/// Model output, or the reference itself in reference mode.
fn predict(model: &Model, store: &ParamStore<f32>, ex: &TrainingExample, opts: &EvalOptions, seed: u64) -> Result<Translation> {
    if opts.use_references {
        return Ok(Translation {
            phonemes: strip_eos(&ex.target_phonemes),
            mel: ex.target_mel.clone(),
            before_postnet: ex.target_mel.clone(),
            attention: Vec::new(),
            durations: Vec::new(),
            truncated: false,
            degenerate: false,
        });
    }
    let io = InferOptions { seed, duration_scale: opts.duration_scale, max_decode_len: None };
    model.translate(store, &ex.source_mel, &io)
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let per = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let hs: Vec<_> = items
            .chunks(per)
            .enumerate()
            .map(|(c, chunk)| s.spawn(move || chunk.iter().enumerate().map(|(i, x)| f(c * per + i, x)).collect()))
            .collect();
        hs.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Cross-speaker pairs `(i, (i + k) mod n)` ordered by offset `k`, then `i`.
pub fn speaker_turn_pairs(examples: &[TrainingExample], count: usize) -> Vec<(usize, usize)> {
    let n = examples.len();
    (1..n)
        .flat_map(|k| (0..n).map(move |i| (i, (i + k) % n)))
        .filter(|&(i, j)| examples[j].speakers.first() != examples[i].speakers.first())
        .take(count)
        .collect()
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, examples: &[TrainingExample], opts: &EvalOptions) -> Result<EvalReport> {
    let examples = &examples[..opts.max_items.unwrap_or(examples.len()).min(examples.len())];
    if examples.is_empty() {
        return Err(Error::Eval("no evaluation items".into()));
    }
    let threshold = model.preset.eval.udr_threshold_seconds;
    let outputs = par_map(examples, |i, ex| {
        let t = predict(model, store, ex, opts, opts.seed.wrapping_add(i as u64))?;
        let u = udr(&t.mel, &ex.target_mel, threshold)?;
        Ok((t, u))
    })?;
    let items: Vec<ItemResult> = examples
        .iter()
        .zip(&outputs)
        .map(|(ex, (t, u))| ItemResult {
            id: ex.id.clone(),
            predicted: t.phonemes.clone(),
            reference: strip_eos(&ex.target_phonemes),
            udr: *u,
            truncated: t.truncated,
            degenerate: t.degenerate,
            frames: t.mel.num_frames,
        })
        .collect();
    let preds: Vec<Vec<usize>> = items.iter().map(|r| r.predicted.clone()).collect();
    let refs: Vec<Vec<usize>> = items.iter().map(|r| r.reference.clone()).collect();
    let bleu = phoneme_bleu(&preds, &refs, model.preset.eval.bleu_order)?;
    let udr = corpus_udr(&items.iter().map(|r| r.udr).collect::<Vec<_>>())?;
    let teacher_forced = if opts.use_references { None } else { Some(validate(model, store, examples, model.preset.train.batch_size)?) };

    // predictions against sources for single-speaker items
    let (mut pe, mut se) = (Vec::new(), Vec::new());
    for (ex, (t, _)) in examples.iter().zip(&outputs) {
        if pe.len() == opts.affinity_items {
            break;
        }
        if ex.speakers.len() != 1 {
            continue;
        }
        if let (Ok(p), Ok(s)) = (speaker_embedding(&t.mel), speaker_embedding(&ex.source_mel)) {
            if p.len() == s.len() {
                pe.push(p);
                se.push(s);
            }
        }
    }
    let affinity = affinity_matrix(&pe, &se)?;
    let affinity_stats = affinity_stats(&affinity).ok();

    let candidates = speaker_turn_pairs(examples, opts.max_turn_candidates.max(opts.speaker_turn_pairs));
    let (mut speaker_turns, mut discarded_turns, mut next) = (Vec::new(), 0, 0);
    while speaker_turns.len() < opts.speaker_turn_pairs && next < candidates.len() {
        let end = (next + opts.speaker_turn_pairs - speaker_turns.len()).min(candidates.len());
        let round = par_map(&candidates[next..end], |k, &(i, j)| {
            let (a, b) = (&examples[i], &examples[j]);
            let joined = concat_aug(a, b)?;
            let t = predict(model, store, &joined, opts, opts.seed.wrapping_add(1_000_003 + (next + k) as u64))?;
            match speaker_turn_similarity(&t.mel, &a.source_mel, &b.source_mel, model.preset.eval.segment_seconds) {
                Ok(turn) => Ok(Some(TurnResult { id: joined.id, turn })),
                Err(Error::Eval(m)) if m.starts_with("discard-rule") => Ok(None),
                Err(e) => Err(e),
            }
        })?;
        next = end;
        discarded_turns += round.iter().filter(|t| t.is_none()).count();
        speaker_turns.extend(round.into_iter().flatten());
    }

    let attention = examples
        .iter()
        .zip(&outputs)
        .filter(|(_, (t, _))| !t.attention.is_empty())
        .take(opts.attention_items)
        .map(|(ex, (t, _))| (ex.id.clone(), t.attention.clone()))
        .collect();

    Ok(EvalReport { items, bleu, teacher_forced, udr, affinity, affinity_stats, speaker_turns, discarded_turns, attention })
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const ITEMS_FILE: &str = "items.csv";
pub const TURNS_FILE: &str = "speaker_turns.csv";
pub const AFFINITY_FILE: &str = "affinity.csv";

fn join_ids(p: &[usize]) -> String {
    p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes the summary, per-item, speaker-turn, affinity and attention CSVs.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = vec![
        ("phoneme_bleu", report.bleu.bleu),
        ("bleu_brevity_penalty", report.bleu.brevity_penalty),
        ("bleu_zero_precision", report.bleu.zero_precision as u8 as f64),
        ("udr_pooled", report.udr.pooled),
        ("udr_per_utterance_mean", report.udr.per_utterance_mean),
        ("items", report.items.len() as f64),
        ("truncated_items", report.items.iter().filter(|r| r.truncated).count() as f64),
        ("speaker_turn_pairs", report.speaker_turns.len() as f64),
        ("speaker_turn_discarded", report.discarded_turns as f64),
        ("speaker_turn_matched", report.mean_matched()),
        ("speaker_turn_mismatched", report.mean_mismatched()),
    ];
    for (n, p) in report.bleu.precisions.iter().enumerate() {
        summary.push((["bleu_p1", "bleu_p2", "bleu_p3", "bleu_p4", "bleu_p5", "bleu_p6"].get(n).copied().unwrap_or("bleu_pn"), *p));
    }
    if let Some(v) = &report.teacher_forced {
        summary.push(("teacher_forced_accuracy", v.accuracy));
        summary.push(("spec_mse", v.spec_mse));
        summary.push(("duration_error_frames", v.duration_error_frames));
    }
    if let Some(s) = &report.affinity_stats {
        summary.push(("affinity_mean_diagonal", s.mean_diagonal));
        summary.push(("affinity_mean_off_diagonal", s.mean_off_diagonal));
    }
    let rows: Vec<Vec<String>> = summary.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
    write_csv(&dir.join(SUMMARY_FILE), &["metric", "value"], &rows)?;

    let rows: Vec<Vec<String>> = report
        .items
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                join_ids(&r.predicted),
                join_ids(&r.reference),
                r.udr.udr.to_string(),
                r.frames.to_string(),
                r.truncated.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.join(ITEMS_FILE), &["id", "predicted", "reference", "udr", "frames", "truncated"], &rows)?;

    let rows: Vec<Vec<String>> = report
        .speaker_turns
        .iter()
        .map(|t| {
            let s = t.turn;
            vec![t.id.clone(), s.lead_a.to_string(), s.lead_b.to_string(), s.trail_a.to_string(), s.trail_b.to_string()]
        })
        .collect();
    write_csv(&dir.join(TURNS_FILE), &["id", "lead_a", "lead_b", "trail_a", "trail_b"], &rows)?;

    write_matrix_csv(&dir.join(AFFINITY_FILE), &report.affinity)?;
    for (id, att) in &report.attention {
        let heads = att.first().map_or(0, |r| r.len());
        for h in 0..heads {
            let m: Vec<Vec<f64>> = att.iter().map(|row| row[h].clone()).collect();
            write_matrix_csv(&dir.join(format!("attention_{id}_h{h}.csv")), &m)?;
        }
    }
    Ok(())
}

pub fn write_matrix_csv(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut s = String::new();
    for row in m {
        s.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("{}: bad number {v:?}", path.display())))).collect())
        .collect()
}

/// Renders `affinity.csv` and every `attention_*.csv` in `eval_dir` as PGM
/// images in `out_dir`; returns the written paths.
pub fn plot(eval_dir: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let aff = eval_dir.join(AFFINITY_FILE);
    if !aff.exists() {
        return Err(Error::Data(format!("{} not found", aff.display())));
    }
    let m = read_matrix_csv(&aff)?;
    if !m.is_empty() {
        let p = out_dir.join("affinity.pgm");
        write_affinity_pgm(&p, &m)?;
        written.push(p);
    }
    let mut names: Vec<_> = std::fs::read_dir(eval_dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("attention_") && n.ends_with(".csv"))
        .collect();
    names.sort();
    for n in names {
        let m = read_matrix_csv(&eval_dir.join(&n))?;
        if m.is_empty() {
            continue;
        }
        let p = out_dir.join(n.replace(".csv", ".pgm"));
        write_pgm(&p, &m, weight_byte)?;
        written.push(p);
    }
    Ok(written)
}

/// Mean squared error between two mels over the shorter length.
pub fn mel_mse(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
    let t = a.num_frames.min(b.num_frames);
    let c = a.channels();
    let n = t * c;
    if n == 0 {
        return f64::NAN;
    }
    a.frames[..n].iter().zip(&b.frames[..n]).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n as f64
}
