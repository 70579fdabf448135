//! Objective evaluation: DTW alignment and unaligned duration ratio,
//! phoneme BLEU, spectral-statistics speaker embeddings, affinity matrices
//! and the speaker-turn protocol, plus CSV/PGM report writers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::MelSpectrogram;

/// Monotone alignment between prediction frames and reference frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Mel rows relative to the log floor, so silence is the zero vector.
fn floored_rows(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    let floor = mel.config.log_floor_value() as f64;
    (0..mel.num_frames)
        .map(|t| {
            if mel.is_silent_frame(t) {
                vec![0.0; mel.channels()]
            } else {
                mel.row(t).iter().map(|&v| (v as f64 - floor).max(0.0)).collect()
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn frame_distance(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
    }
}

/// Minimal-cost monotone alignment under `1 − cos` frame distance. Ties
/// prefer the diagonal step.
pub fn dtw_align(pred: &MelSpectrogram, reference: &MelSpectrogram) -> Result<DtwPath> {
    if pred.num_frames == 0 || reference.num_frames == 0 {
        return Err(Error::Eval("cannot align an empty spectrogram".into()));
    }
    if pred.channels() != reference.channels() {
        return Err(Error::Eval(format!("channel mismatch {} vs {}", pred.channels(), reference.channels())));
    }
    let (p, r) = (floored_rows(pred), floored_rows(reference));
    let (np, nr): (Vec<f64>, Vec<f64>) = (p.iter().map(|v| norm(v)).collect(), r.iter().map(|v| norm(v)).collect());
    let (tp, tr) = (p.len(), r.len());
    let mut acc = vec![f64::INFINITY; tp * tr];
    for i in 0..tp {
        for j in 0..tr {
            let d = frame_distance(&p[i], np[i], &r[j], nr[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * tr + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * tr + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * tr + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * tr + j] = best + d;
        }
    }
    let mut pairs = vec![(tp - 1, tr - 1)];
    let (mut i, mut j) = (tp - 1, tr - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * tr + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * tr + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * tr + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath { pairs, cost: acc[tp * tr - 1] })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UdrReport {
    pub unaligned_frames: usize,
    pub total_frames: usize,
    pub udr: f64,
    pub threshold_seconds: f64,
}

/// Frames in runs of prediction-only steps longer than the threshold.
pub fn unaligned_frames(path: &DtwPath, threshold_frames: f64) -> usize {
    let mut unaligned = 0;
    let mut run = 0usize;
    for w in path.pairs.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.0 == a.0 + 1 && b.1 == a.1 {
            run += 1;
        } else {
            if run as f64 > threshold_frames {
                unaligned += run;
            }
            run = 0;
        }
    }
    if run as f64 > threshold_frames {
        unaligned += run;
    }
    unaligned
}

/// Unaligned duration ratio of a prediction against its reference.
pub fn udr(pred: &MelSpectrogram, reference: &MelSpectrogram, threshold_seconds: f64) -> Result<UdrReport> {
    let path = dtw_align(pred, reference)?;
    let step = pred.config.frame_step_seconds();
    let unaligned = unaligned_frames(&path, threshold_seconds / step);
    Ok(UdrReport {
        unaligned_frames: unaligned,
        total_frames: pred.num_frames,
        udr: unaligned as f64 / pred.num_frames as f64,
        threshold_seconds,
    })
}

/// Frame-pooled and per-utterance UDR over a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusUdr {
    pub pooled: f64,
    pub per_utterance_mean: f64,
    pub unaligned_frames: usize,
    pub total_frames: usize,
    pub utterances: usize,
}

pub fn corpus_udr(reports: &[UdrReport]) -> Result<CorpusUdr> {
    if reports.is_empty() {
        return Err(Error::Eval("no utterances".into()));
    }
    let unaligned: usize = reports.iter().map(|r| r.unaligned_frames).sum();
    let total: usize = reports.iter().map(|r| r.total_frames).sum();
    Ok(CorpusUdr {
        pooled: unaligned as f64 / total.max(1) as f64,
        per_utterance_mean: reports.iter().map(|r| r.udr).sum::<f64>() / reports.len() as f64,
        unaligned_frames: unaligned,
        total_frames: total,
        utterances: reports.len(),
    })
}

/// Log-mel range below the utterance peak kept by [`speaker_embedding`].
pub const EMBEDDING_RANGE: f64 = 3.0;

/// Unit vector of per-channel mean and standard deviation over the
/// non-silent frames, measured within [`EMBEDDING_RANGE`] of the peak.

pub fn speaker_embedding(mel: &MelSpectrogram) -> Result<Vec<f64>> {
    let voiced: Vec<usize> = (0..mel.num_frames).filter(|&t| !mel.is_silent_frame(t)).collect();
    if voiced.is_empty() {
        return Err(Error::Eval("no non-silent frames".into()));
    }
    let peak = voiced.iter().flat_map(|&t| mel.row(t)).fold(f32::MIN, |a, &b| a.max(b)) as f64;
    let base = peak - EMBEDDING_RANGE;
    let rows: Vec<Vec<f64>> = voiced.iter().map(|&t| mel.row(t).iter().map(|&v| (v as f64 - base).max(0.0)).collect()).collect();
    let c = mel.channels();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; c];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; c];
    for r in &rows {
        for k in 0..c {
            std[k] += (r[k] - mean[k]).powi(2) / n;
        }
    }
    let mut v: Vec<f64> = mean.into_iter().chain(std.into_iter().map(f64::sqrt)).collect();
    let nv = norm(&v);
    if nv == 0.0 {
        return Err(Error::Eval("embedding has zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= nv);
    Ok(v)
}

/// `M[i][j] = cos(a[i], b[j])`.
pub fn affinity_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = a.first().or(b.first()).map_or(0, |v| v.len());
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Eval("embedding dimensions differ".into()));
    }
    Ok(a.iter().map(|x| b.iter().map(|y| cosine(x, y)).collect()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityStats {
    pub mean_diagonal: f64,
    pub mean_off_diagonal: f64,
}

impl AffinityStats {
    pub fn margin(&self) -> f64 {
        self.mean_diagonal - self.mean_off_diagonal
    }
}

pub fn affinity_stats(m: &[Vec<f64>]) -> Result<AffinityStats> {
    let n = m.len();
    if n < 2 || m.iter().any(|r| r.len() != n) {
        return Err(Error::Eval("affinity statistics need a square matrix of size at least 2".into()));
    }
    let diag: f64 = (0..n).map(|i| m[i][i]).sum();
    let all: f64 = m.iter().flatten().sum();
    Ok(AffinityStats { mean_diagonal: diag / n as f64, mean_off_diagonal: (all - diag) / (n * n - n) as f64 })
}

/// Similarities of the leading and trailing segments of a prediction to
/// two source utterances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerTurn {
    pub lead_a: f64,
    pub lead_b: f64,
    pub trail_a: f64,
    pub trail_b: f64,
}

impl SpeakerTurn {
    pub fn matched(&self) -> f64 {
        (self.lead_a + self.trail_b) / 2.0
    }

    pub fn mismatched(&self) -> f64 {
        (self.lead_b + self.trail_a) / 2.0
    }
}

pub fn speaker_turn_similarity(
    pred: &MelSpectrogram,
    src_a: &MelSpectrogram,
    src_b: &MelSpectrogram,
    segment_seconds: f64,
) -> Result<SpeakerTurn> {
    let seg = (segment_seconds / pred.config.frame_step_seconds()).round() as usize;
    if seg == 0 || pred.num_frames < 2 * seg {
        return Err(Error::Eval(format!(
            "discard-rule: prediction of {:.3} s is shorter than two {segment_seconds} s segments",
            pred.duration_seconds()
        )));
    }
    let lead = speaker_embedding(&pred.segment(0, seg))?;
    let trail = speaker_embedding(&pred.segment(pred.num_frames - seg, seg))?;
    let (a, b) = (speaker_embedding(src_a)?, speaker_embedding(src_b)?);
    if a.len() != lead.len() || b.len() != lead.len() {
        return Err(Error::Eval("prediction and source mels differ in channels".into()));
    }
    Ok(SpeakerTurn { lead_a: cosine(&lead, &a), lead_b: cosine(&lead, &b), trail_a: cosine(&trail, &a), trail_b: cosine(&trail, &b) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
    /// Some order had no matching n-gram, which zeroes the unsmoothed score.
    pub zero_precision: bool,
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with clipped n-gram counts and the brevity penalty.
pub fn phoneme_bleu(predicted: &[Vec<usize>], references: &[Vec<usize>], max_order: usize) -> Result<BleuScore> {
    if predicted.is_empty() || predicted.len() != references.len() {
        return Err(Error::Eval(format!("{} predictions for {} references", predicted.len(), references.len())));
    }
    if max_order == 0 {
        return Err(Error::Eval("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in predicted.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = matches.iter().zip(&totals).map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 }).collect();
    let zero_precision = precisions.iter().any(|&p| p == 0.0);
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if zero_precision { 0.0 } else { bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_order as f64).exp() };
    Ok(BleuScore { bleu, precisions, brevity_penalty: bp, hypothesis_length: hyp_len, reference_length: ref_len, zero_precision })
}

/// Writes rows as CSV under a header; values are written verbatim.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Eval(format!("row of {} fields under a {}-field header", r.len(), header.len())));
        }
        s.push_str(&r.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Binary 8-bit PGM of `values` mapped through `to_byte`.
pub fn write_pgm(path: &Path, values: &[Vec<f64>], to_byte: impl Fn(f64) -> u8) -> Result<()> {
    let h = values.len();
    let w = values.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || values.iter().any(|r| r.len() != w) {
        return Err(Error::Eval("PGM needs a non-empty rectangular matrix".into()));
    }
    let mut out = Vec::with_capacity(h * w + 32);
    let mut header = String::new();
    let _ = write!(header, "P5\n{w} {h}\n255\n");
    out.extend_from_slice(header.as_bytes());
    out.extend(values.iter().flatten().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// `round(255 · (cos + 1) / 2)`.
pub fn cosine_byte(c: f64) -> u8 {
    (255.0 * (c.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

/// Weight in `[0, 1]` to a byte.
pub fn weight_byte(w: f64) -> u8 {
    (255.0 * w.clamp(0.0, 1.0)).round() as u8
}

pub fn write_affinity_pgm(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    write_pgm(path, m, cosine_byte)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::MelConfig;

    fn cfg() -> MelConfig {
        MelConfig::new(8000, 4, 20.0, 3800.0, 50.0, 12.5)
    }

    fn mel(rows: &[[f32; 4]]) -> MelSpectrogram {
        MelSpectrogram::new(rows.iter().flatten().copied().collect(), rows.len(), cfg()).unwrap()
    }

    fn varied(n: usize) -> Vec<[f32; 4]> {
        (0..n).map(|i| { let x = i as f32; [(x * 0.7).sin(), (x * 1.3).cos(), (x * 0.4).sin() * 2.0, -1.0 + (x * 2.1).cos()] }).collect()
    }

    #[test]
    fn identical_inputs_align_diagonally() {
        let m = mel(&varied(12));
        let p = dtw_align(&m, &m).unwrap();
        assert_eq!(p.pairs, (0..12).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(p.cost.abs() < 1e-12);
        assert_eq!(udr(&m, &m, 1.0).unwrap().udr, 0.0);
    }

    #[test]
    fn duplicated_frame_gives_one_vertical_step() {
        let rows = varied(10);
        let mut dup = rows.clone();
        dup.insert(4, rows[4]);
        let p = dtw_align(&mel(&dup), &mel(&rows)).unwrap();
        let vertical = p.pairs.windows(2).filter(|w| w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1).count();
        assert_eq!(vertical, 1);
    }

    #[test]
    fn cost_is_symmetric() {
        let a = mel(&varied(9));
        let b = mel(&varied(14)[3..].to_vec());
        let (ab, ba) = (dtw_align(&a, &b).unwrap(), dtw_align(&b, &a).unwrap());
        assert!((ab.cost - ba.cost).abs() < 1e-9);
    }

    #[test]
    fn path_is_monotone_and_complete() {
        let a = mel(&varied(7));
        let b = mel(&varied(11));
        let p = dtw_align(&a, &b).unwrap();
        assert_eq!(p.pairs[0], (0, 0));
        assert_eq!(*p.pairs.last().unwrap(), (6, 10));
        for w in p.pairs.windows(2) {
            let d = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!(d, (1, 0) | (0, 1) | (1, 1)));
        }
    }

    #[test]
    fn inserted_babble_is_unaligned() {
        // 80 frames = 1 s at 12.5 ms; 160 babble frames = 2 s
        let rows = varied(80);
        let babble = [3.0f32, -2.0, 0.5, 1.0];
        let mut pred = rows[..40].to_vec();
        pred.extend(std::iter::repeat(babble).take(160));
        pred.extend_from_slice(&rows[40..]);
        let r = udr(&mel(&pred), &mel(&rows), 1.0).unwrap();
        let expected = 160.0 / 240.0;
        assert!((r.udr - expected).abs() <= 1.0 / 240.0, "{r:?}");
        // half a second stays below the threshold
        let mut short = rows[..40].to_vec();
        short.extend(std::iter::repeat(babble).take(40));
        short.extend_from_slice(&rows[40..]);
        assert_eq!(udr(&mel(&short), &mel(&rows), 1.0).unwrap().udr, 0.0);
    }

    #[test]
    fn common_suffix_does_not_change_udr() {
        let rows = varied(30);
        let mut pred = rows.clone();
        pred.splice(10..10, std::iter::repeat([2.0f32, 2.0, -3.0, 0.0]).take(100));
        let base = udr(&mel(&pred), &mel(&rows), 1.0).unwrap();
        let suffix = varied(50)[20..].to_vec();
        let (mut p2, mut r2) = (pred.clone(), rows.clone());
        p2.extend_from_slice(&suffix);
        r2.extend_from_slice(&suffix);
        let ext = udr(&mel(&p2), &mel(&r2), 1.0).unwrap();
        assert_eq!(base.unaligned_frames, ext.unaligned_frames);
    }

    #[test]
    fn silence_against_sound_costs_one() {
        let c = cfg();
        let silent = MelSpectrogram::silence(1, c.clone());
        let sound = mel(&varied(1));
        assert!((dtw_align(&silent, &sound).unwrap().cost - 1.0).abs() < 1e-12);
        assert!(dtw_align(&silent, &MelSpectrogram::silence(0, c)).is_err());
    }

    #[test]
    fn embeddings_are_unit_and_reject_silence() {
        let m = mel(&varied(10));
        let e = speaker_embedding(&m).unwrap();
        assert_eq!(e.len(), 8);
        assert!((norm(&e) - 1.0).abs() < 1e-9);
        assert!((cosine(&e, &speaker_embedding(&m).unwrap()) - 1.0).abs() < 1e-12);
        assert!(speaker_embedding(&MelSpectrogram::silence(5, cfg())).is_err());
    }

    #[test]
    fn affinity_properties() {
        let embs: Vec<Vec<f64>> = (3..8).map(|n| speaker_embedding(&mel(&varied(n))).unwrap()).collect();
        let m = affinity_matrix(&embs, &embs).unwrap();
        for i in 0..5 {
            assert!((m[i][i] - 1.0).abs() < 1e-6);
            for j in 0..5 {
                assert!((m[i][j] - m[j][i]).abs() < 1e-12);
            }
        }
        let ortho = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let o = affinity_matrix(&ortho, &ortho).unwrap();
        assert_eq!(affinity_stats(&o).unwrap(), AffinityStats { mean_diagonal: 1.0, mean_off_diagonal: 0.0 });
        assert!(affinity_matrix(&ortho, &[vec![1.0]]).is_err());
    }

    #[test]
    fn speaker_turn_on_constructed_prediction() {
        let a: Vec<[f32; 4]> = (0..30).map(|i| [1.0 + (i % 3) as f32 * 0.1, -3.0, -6.0, -8.0]).collect();
        let b: Vec<[f32; 4]> = (0..30).map(|i| [-8.0, -6.0, -2.0, 1.0 + (i % 2) as f32 * 0.2]).collect();
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        let st = speaker_turn_similarity(&mel(&joined), &mel(&a), &mel(&b), 0.25).unwrap();
        assert!(st.lead_a > st.lead_b && st.trail_b > st.trail_a);
        let short = speaker_turn_similarity(&mel(&a[..20]), &mel(&a), &mel(&b), 0.25);
        assert!(matches!(short, Err(Error::Eval(m)) if m.starts_with("discard-rule")));
    }

    #[test]
    fn bleu_hand_values() {
        let s = phoneme_bleu(&[vec![3, 4, 5, 6]], &[vec![3, 4, 5, 6, 7]], 4).unwrap();
        assert_eq!(s.precisions, vec![1.0, 1.0, 1.0, 1.0]);
        assert!((s.bleu - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((s.bleu - 0.7788).abs() < 1e-4);
        let same = vec![vec![3, 4, 5, 6, 7], vec![8, 3, 9, 4]];
        assert_eq!(phoneme_bleu(&same, &same, 4).unwrap().bleu, 1.0);
        let d = phoneme_bleu(&[vec![3, 4, 5, 6]], &[vec![7, 8, 9, 10]], 4).unwrap();
        assert_eq!(d.bleu, 0.0);
        assert!(d.zero_precision);
        assert!(phoneme_bleu(&[], &[], 4).is_err());
    }

    #[test]
    fn bleu_ignores_item_order() {
        let h = vec![vec![3, 4, 5, 6, 7], vec![8, 3, 9], vec![4, 4, 5, 6]];
        let r = vec![vec![3, 4, 5, 7, 7], vec![8, 3, 9, 4], vec![4, 5, 5, 6]];
        let a = phoneme_bleu(&h, &r, 4).unwrap().bleu;
        let (hr, rr): (Vec<_>, Vec<_>) = (h.iter().rev().cloned().collect(), r.iter().rev().cloned().collect());
        assert!((a - phoneme_bleu(&hr, &rr, 4).unwrap().bleu).abs() < 1e-15);
    }

    #[test]
    fn pgm_mapping() {
        assert_eq!(cosine_byte(1.0), 255);
        assert_eq!(cosine_byte(-1.0), 0);
        assert_eq!(cosine_byte(0.0), 128);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_affinity_pgm(&p, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 128, 128, 255]);
    }
}
