//! Length prediction, candidate widening, teacher rescoring and latency
//! accounting for the non-autoregressive student.
//!
//! The student emits all `T_y` positions in one pass, so the target length is
//! fixed up front as `T_x + C`. With rescoring enabled the student decodes
//! every length in `[(T_x+C)−B, (T_x+C)+B]` and the teacher picks the candidate
//! it finds most probable.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, EncodedCorpus};
use crate::error::{Error, Result};
use crate::nn::special;
use crate::student::{predict_tokens, Student};
use crate::teacher::Teacher;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Length bias `C`.
    pub length_bias: i64,
    /// Halfwidth `B` of the candidate range.
    pub halfwidth: usize,
    pub rescore: bool,
    /// Divide teacher scores by the scored length.
    pub length_normalize: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            length_bias: 0,
            halfwidth: 4,
            rescore: true,
            length_normalize: false,
        }
    }
}

impl InferenceConfig {
    /// Single candidate at `T_x + C`, no teacher.
    pub fn single(length_bias: i64) -> Self {
        Self {
            length_bias,
            halfwidth: 0,
            rescore: false,
            length_normalize: false,
        }
    }
}

/// `round(mean(|y| − |x|))` over a corpus.
pub fn default_length_bias(corpus: &Corpus) -> i64 {
    corpus.mean_length_difference().round() as i64
}

pub fn default_length_bias_encoded(corpus: &EncodedCorpus) -> i64 {
    if corpus.is_empty() {
        return 0;
    }
    let diff: i64 = corpus
        .pairs
        .iter()
        .map(|(s, t)| t.len() as i64 - s.len() as i64)
        .sum();
    (diff as f64 / corpus.len() as f64).round() as i64
}

/// `max(1, T_x + C)`.
pub fn predict_length(t_x: usize, c: i64) -> usize {
    (t_x as i64 + c).max(1) as usize
}

/// Every length in `[(T_x+C)−B, (T_x+C)+B]`, floored at 1, ascending, unique.
pub fn candidate_lengths(t_x: usize, c: i64, b: usize) -> Vec<usize> {
    let centre = t_x as i64 + c;
    let b = b as i64;
    let mut out: Vec<usize> = (centre - b..=centre + b).map(|l| l.max(1) as usize).collect();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub length: usize,
    /// Raw student output, exactly `length` tokens.
    pub tokens: Vec<usize>,
    /// Per-position maximum log-probability under the student.
    pub student_log_probs: Vec<f64>,
    /// Teacher log-probability of [`Candidate::output`] followed by
    /// end-of-sequence, when rescored.
    pub teacher_score: Option<f64>,
}

impl Candidate {
    /// Tokens up to (excluding) the first end-of-sequence.
    pub fn output(&self) -> &[usize] {
        let end = self.tokens.iter().position(|&t| t == special::EOS).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub candidates: Vec<Candidate>,
    /// Index into `candidates`.
    pub chosen: usize,
}

impl Translation {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.chosen]
    }

    pub fn output(&self) -> &[usize] {
        self.best().output()
    }
}

fn max_log_probs(logits: &crate::tensor::NdArray) -> Vec<f64> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            max - lse
        })
        .collect()
}

/// Decodes one length with the student.
pub fn decode_candidate(student: &Student, src: &[usize], length: usize) -> Result<Candidate> {
    let trace = student.parallel_decode_forward(src, length)?;
    Ok(Candidate {
        length,
        tokens: predict_tokens(&trace),
        student_log_probs: max_log_probs(&trace.logits),
        teacher_score: None,
    })
}

/// Teacher score of a candidate as used for selection.
pub fn teacher_score(teacher: &Teacher, src: &[usize], cand: &Candidate, length_normalize: bool) -> Result<f64> {
    let scored: Vec<usize> = cand.output().iter().copied().chain([special::EOS]).collect();
    let s = teacher.score_sequence(src, &scored)?;
    Ok(if length_normalize { s / scored.len() as f64 } else { s })
}

/// Index of the highest score; ties go to the shorter length, then to the
/// lexicographically smaller token sequence.
pub fn select(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        let (sc, sb) = (c.teacher_score.unwrap_or(f64::NEG_INFINITY), b.teacher_score.unwrap_or(f64::NEG_INFINITY));
        let better = sc > sb || (sc == sb && (c.length, &c.tokens) < (b.length, &b.tokens));
        if better {
            best = i;
        }
    }
    best
}

pub fn translate(src: &[usize], student: &Student, teacher: Option<&Teacher>, cfg: &InferenceConfig) -> Result<Translation> {
    if !cfg.rescore {
        let len = predict_length(src.len(), cfg.length_bias).min(student.config().max_len);
        return Ok(Translation {
            candidates: vec![decode_candidate(student, src, len)?],
            chosen: 0,
        });
    }
    let teacher = teacher.ok_or_else(|| Error::config("rescoring needs a teacher checkpoint"))?;
    // Leave room for the end-of-sequence token the teacher scores.
    let cap = student.config().max_len.min(teacher.config().max_len - 1).max(1);
    let mut lengths: Vec<usize> = candidate_lengths(src.len(), cfg.length_bias, cfg.halfwidth)
        .into_iter()
        .map(|l| l.min(cap))
        .collect();
    lengths.dedup();
    let mut candidates = lengths
        .into_iter()
        .map(|l| decode_candidate(student, src, l))
        .collect::<Result<Vec<_>>>()?;
    for c in &mut candidates {
        c.teacher_score = Some(teacher_score(teacher, src, c, cfg.length_normalize)?);
    }
    let chosen = select(&candidates);
    Ok(Translation { candidates, chosen })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub sentences: usize,
    pub teacher_ms: Vec<f64>,
    pub student_ms: Vec<f64>,
    /// Sequential decoder passes per sentence, equal to the emitted length
    /// including end-of-sequence.
    pub teacher_steps: Vec<usize>,
    /// Student decoder passes per sentence, one per candidate.
    pub student_steps: Vec<usize>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl LatencyReport {
    pub fn teacher_mean_ms(&self) -> f64 {
        mean(&self.teacher_ms)
    }

    pub fn student_mean_ms(&self) -> f64 {
        mean(&self.student_ms)
    }

    pub fn teacher_median_ms(&self) -> f64 {
        median(&self.teacher_ms)
    }

    pub fn student_median_ms(&self) -> f64 {
        median(&self.student_ms)
    }

    /// Teacher over student mean wall-clock time.
    pub fn speedup(&self) -> f64 {
        self.teacher_mean_ms() / self.student_mean_ms()
    }

    /// `key<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let steps = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
        [
            ("sentences", self.sentences.to_string()),
            ("teacher_mean_ms", format!("{:.4}", self.teacher_mean_ms())),
            ("teacher_median_ms", format!("{:.4}", self.teacher_median_ms())),
            ("student_mean_ms", format!("{:.4}", self.student_mean_ms())),
            ("student_median_ms", format!("{:.4}", self.student_median_ms())),
            ("teacher_steps_per_sentence", format!("{:.4}", steps(&self.teacher_steps))),
            ("student_steps_per_sentence", format!("{:.4}", steps(&self.student_steps))),
            ("speedup", format!("{:.4}", self.speedup())),
        ]
        .iter()
        .map(|(k, v)| format!("{k}\t{v}\n"))
        .collect()
    }
}

/// Times teacher greedy decoding against student translation, one sentence
/// at a time on the calling thread.
pub fn latency_report(student: &Student, teacher: &Teacher, sources: &[Vec<usize>], cfg: &InferenceConfig) -> Result<LatencyReport> {
    if sources.is_empty() {
        return Err(Error::input("latency report needs at least one sentence"));
    }
    let max_len = teacher.config().max_len;
    let mut report = LatencyReport {
        sentences: sources.len(),
        teacher_ms: Vec::with_capacity(sources.len()),
        student_ms: Vec::with_capacity(sources.len()),
        teacher_steps: Vec::with_capacity(sources.len()),
        student_steps: Vec::with_capacity(sources.len()),
    };
    for src in sources {
        let start = Instant::now();
        let out = teacher.greedy_decode(src, max_len)?;
        report.teacher_ms.push(start.elapsed().as_secs_f64() * 1e3);
        report.teacher_steps.push(out.steps);

        let before = student.decoder_passes().get();
        let start = Instant::now();
        translate(src, student, Some(teacher), cfg)?;
        report.student_ms.push(start.elapsed().as_secs_f64() * 1e3);
        report.student_steps.push((student.decoder_passes().get() - before) as usize);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::student::SoftCopyConfig;

    #[test]
    fn length_rule() {
        assert_eq!(predict_length(5, 2), 7);
        assert_eq!(predict_length(5, 0), 5);
        assert_eq!(predict_length(1, -2), 1);
    }

    #[test]
    fn candidate_ranges() {
        assert_eq!(candidate_lengths(5, 2, 4), (3..=11).collect::<Vec<_>>());
        assert_eq!(candidate_lengths(5, 2, 0), vec![7]);
        assert_eq!(candidate_lengths(2, -2, 4), vec![1, 2, 3, 4]);
    }

    #[test]
    fn output_stops_at_first_eos() {
        let c = Candidate {
            length: 4,
            tokens: vec![5, special::EOS, 6, special::EOS],
            student_log_probs: vec![0.0; 4],
            teacher_score: None,
        };
        assert_eq!(c.output(), &[5]);
    }

    #[test]
    fn ties_prefer_shorter_then_lexicographic() {
        let mk = |length, tokens: Vec<usize>, s| Candidate {
            length,
            student_log_probs: vec![0.0; tokens.len()],
            tokens,
            teacher_score: Some(s),
        };
        let cands = vec![mk(3, vec![5, 6, 7], -1.0), mk(2, vec![6, 6], -1.0), mk(2, vec![5, 9], -1.0)];
        assert_eq!(select(&cands), 2);
        let cands = vec![mk(3, vec![5, 6, 7], -0.5), mk(2, vec![6, 6], -1.0)];
        assert_eq!(select(&cands), 0);
    }

    fn models() -> (Student, Teacher) {
        let cfg = ModelConfig::new(1, 1, 2, 8, 16, 12, 12, 16);
        (
            Student::new(cfg.clone(), SoftCopyConfig::default(), 3).unwrap(),
            Teacher::new(cfg, 4).unwrap(),
        )
    }

    #[test]
    fn rescoring_counts_and_selects_max() {
        let (s, t) = models();
        let cfg = InferenceConfig {
            length_bias: 1,
            ..InferenceConfig::default()
        };
        let before = t.score_calls().get();
        let tr = translate(&[4, 5, 6], &s, Some(&t), &cfg).unwrap();
        assert_eq!((t.score_calls().get() - before) as usize, candidate_lengths(3, 1, 4).len());
        let best = tr.best().teacher_score.unwrap();
        assert!(tr.candidates.iter().all(|c| c.teacher_score.unwrap() <= best));
        assert!(tr.candidates.iter().all(|c| c.tokens.len() == c.length));
    }

    #[test]
    fn single_candidate_path_matches_direct_decode() {
        let (s, _) = models();
        let tr = translate(&[4, 5, 6], &s, None, &InferenceConfig::single(2)).unwrap();
        let direct = predict_tokens(&s.parallel_decode_forward(&[4, 5, 6], 5).unwrap());
        assert_eq!(tr.best().tokens, direct);
        assert!(matches!(
            translate(&[4], &s, None, &InferenceConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
