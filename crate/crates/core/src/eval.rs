//! BLEU, repetition rate and the hidden-state and attention diagnostics.
//!
//! Grid files (attention maps and similarity matrices) have a header line,
//! a line of column labels, then one line per row starting with its label.
//! Fields are tab-separated:
//!
//! ```text
//! # rows=2 cols=3 layer=1 head=1 model=teacher
//! a    b    c
//! x    0.900000    0.050000    0.050000
//! y    0.100000    0.800000    0.100000
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::losses::cosine;
use crate::teacher::DecoderTrace;
use crate::tensor::NdArray;

pub const BLEU_ORDER: usize = 4;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 1]`.
///
/// Modified n-gram precisions are pooled over the corpus. Orders for which the
/// hypotheses contain no n-gram at all are left out of the geometric mean.
/// When any remaining precision is zero, orders `n ≥ 2` get add-one smoothing.
pub fn bleu<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::input("BLEU needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let orders = totals.iter().take_while(|&&t| t > 0).count();
    if orders == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let smooth = matches[..orders].contains(&0);
    let mut log_sum = 0.0;
    for n in 0..orders {
        let (m, t) = if smooth && n >= 1 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Fraction of positions whose token equals its immediate predecessor.
pub fn repetition_rate<T: PartialEq>(tokens: &[T]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let dup = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    dup as f64 / tokens.len() as f64
}

/// Fraction of positions whose token already occurred earlier in the
/// sentence, adjacent or not.
pub fn repetition_rate_any<T: Hash + Eq>(tokens: &[T]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let mut seen = std::collections::HashSet::new();
    let dup = tokens.iter().filter(|t| !seen.insert(*t)).count();
    dup as f64 / tokens.len() as f64
}

/// Mean per-sentence adjacent repetition rate.
pub fn mean_repetition<T: PartialEq>(sentences: &[Vec<T>]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    sentences.iter().map(|s| repetition_rate(s)).sum::<f64>() / sentences.len() as f64
}

/// Pairwise cosine similarity of one layer's decoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `T_y × T_y`
    pub values: NdArray,
    /// 1-based layer index.
    pub layer: usize,
    pub model: String,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    /// Entries strictly above the diagonal, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let t = self.size();
        let mut out = Vec::with_capacity(t * t.saturating_sub(1) / 2);
        for i in 0..t {
            out.extend_from_slice(&self.values.row(i)[i + 1..]);
        }
        out
    }

    /// Mean of the off-diagonal entries; 0 for a single position.
    pub fn mean_off_diagonal(&self) -> f64 {
        let u = self.upper_triangle();
        if u.is_empty() {
            0.0
        } else {
            u.iter().sum::<f64>() / u.len() as f64
        }
    }

    pub fn to_grid(&self, labels: &[String]) -> Result<Grid> {
        Grid::new(
            self.values.clone(),
            labels.to_vec(),
            labels.to_vec(),
            self.layer,
            0,
            &self.model,
        )
    }
}

/// Similarity matrix of `trace` at `layer` (1-based; the last layer is the
/// usual choice).
pub fn similarity_matrix(trace: &DecoderTrace, layer: usize, model: &str) -> Result<SimilarityMatrix> {
    if layer == 0 || layer > trace.layers() {
        return Err(Error::input(format!("layer {layer} outside 1..={}", trace.layers())));
    }
    let h = trace.layer_hidden(layer - 1);
    let t = h.rows();
    let mut values = NdArray::zeros(&[t, t]);
    for i in 0..t {
        values.set(&[i, i], 1.0);
        for j in i + 1..t {
            let c = cosine(h.row(i), h.row(j));
            values.set(&[i, j], c);
            values.set(&[j, i], c);
        }
    }
    Ok(SimilarityMatrix {
        values,
        layer,
        model: model.to_owned(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTable {
    /// Number of upper-triangle entries pooled.
    pub count: usize,
    pub below_quarter: f64,
    pub below_half: f64,
    /// `(q, value)` for `q = 0, 0.05, …, 1`.
    pub grid: Vec<(f64, f64)>,
}

/// Pools the strict upper triangles of all matrices.
pub fn similarity_quantiles(matrices: &[SimilarityMatrix]) -> Result<QuantileTable> {
    let mut all: Vec<f64> = matrices.iter().flat_map(SimilarityMatrix::upper_triangle).collect();
    if all.is_empty() {
        return Err(Error::input("no off-diagonal similarities to summarize"));
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let frac = |th: f64| all.iter().filter(|&&v| v < th).count() as f64 / n as f64;
    let grid = (0..=20)
        .map(|k| {
            let q = k as f64 * 0.05;
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            (q, all[lo] + (all[hi] - all[lo]) * (pos - lo as f64))
        })
        .collect();
    Ok(QuantileTable {
        count: n,
        below_quarter: frac(0.25),
        below_half: frac(0.5),
        grid,
    })
}

/// A labelled matrix in the grid text format.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub values: NdArray,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub layer: usize,
    pub head: usize,
    pub model: String,
}

impl Grid {
    pub fn new(
        values: NdArray,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        layer: usize,
        head: usize,
        model: &str,
    ) -> Result<Self> {
        if values.rank() != 2 || values.shape() != [row_labels.len(), col_labels.len()] {
            return Err(Error::input(format!(
                "grid of shape {:?} with {} row and {} column labels",
                values.shape(),
                row_labels.len(),
                col_labels.len()
            )));
        }
        if model.contains(char::is_whitespace) {
            return Err(Error::input("model tag must not contain whitespace"));
        }
        Ok(Self {
            values,
            row_labels,
            col_labels,
            layer,
            head,
            model: model.to_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# rows={} cols={} layer={} head={} model={}\n",
            self.row_labels.len(),
            self.col_labels.len(),
            self.layer,
            self.head,
            self.model
        );
        s.push_str(&self.col_labels.join("\t"));
        s.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            s.push_str(label);
            for v in self.values.row(r) {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_owned(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty grid"))?;
        let header = header.strip_prefix("# ").ok_or_else(|| bad(0, "missing header"))?;
        let mut fields = HashMap::new();
        for f in header.split(' ') {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(0, "malformed header field"))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(0, &format!("header lacks numeric {k}")))
        };
        let (rows, cols) = (num("rows")?, num("cols")?);
        let (layer, head) = (num("layer")?, num("head")?);
        let model = fields.get("model").copied().unwrap_or("").to_owned();
        let (_, col_line) = lines.next().ok_or_else(|| bad(1, "missing column labels"))?;
        let col_labels: Vec<String> = if cols == 0 {
            Vec::new()
        } else {
            col_line.split('\t').map(str::to_owned).collect()
        };
        if col_labels.len() != cols {
            return Err(bad(1, "column label count differs from header"));
        }
        let mut row_labels = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines {
            let mut parts = line.split('\t');
            row_labels.push(parts.next().unwrap_or("").to_owned());
            let vals = parts
                .map(|p| p.parse::<f64>().map_err(|_| bad(i, "value is not a number")))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != cols {
                return Err(bad(i, "row length differs from header"));
            }
            data.extend(vals);
        }
        if row_labels.len() != rows {
            return Err(bad(0, "row count differs from header"));
        }
        let values = NdArray::new(vec![rows, cols], data)?;
        Self::new(values, row_labels, col_labels, layer, head, &model)
    }
}

/// Encoder-decoder attention of one (layer, head), both 1-based, as a grid
/// with target rows and source columns.
pub fn export_attention(
    trace: &DecoderTrace,
    layer: usize,
    head: usize,
    source: &[String],
    target: &[String],
    model: &str,
) -> Result<Grid> {
    let heads = trace.attn.shape()[1];
    if layer == 0 || layer > trace.layers() || head == 0 || head > heads {
        return Err(Error::input(format!(
            "(layer {layer}, head {head}) outside 1..={} x 1..={heads}",
            trace.layers()
        )));
    }
    Grid::new(
        trace.head_attention(layer - 1, head - 1),
        target.to_vec(),
        source.to_vec(),
        layer,
        head,
        model,
    )
}

/// Mean over rows of `|argmax(row t) − t·T_x/T_y|` (0-based positions).
pub fn diagonal_deviation(attn: &NdArray) -> f64 {
    let (t_y, t_x) = (attn.rows(), attn.last_dim());
    let ratio = t_x as f64 / t_y as f64;
    (0..t_y)
        .map(|t| (crate::teacher::argmax(attn.row(t)) as f64 - t as f64 * ratio).abs())
        .sum::<f64>()
        / t_y as f64
}

/// Mean row entropy (nats) of each (layer, head) of the encoder-decoder
/// attention, indexed `[layer][head]`.
pub fn attention_entropy(trace: &DecoderTrace) -> Vec<Vec<f64>> {
    let (layers, heads) = (trace.attn.shape()[0], trace.attn.shape()[1]);
    (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| {
                    let a = trace.head_attention(l, h);
                    let rows = a.rows();
                    (0..rows)
                        .map(|t| -a.row(t).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
                        .sum::<f64>()
                        / rows as f64
                })
                .collect()
        })
        .collect()
}

/// Corpus-level evaluation summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub repetition: Vec<f64>,
    pub repetition_any: Vec<f64>,
    /// `(model tag, mean off-diagonal similarity)`
    pub mean_similarity: Vec<(String, f64)>,
    pub quantiles: Option<QuantileTable>,
    /// `[layer][head]` mean row entropy.
    pub attention_entropy: Vec<Vec<f64>>,
}

impl EvalReport {
    /// BLEU and repetition statistics for hypotheses against references.
    pub fn score<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<Self> {
        Ok(Self {
            bleu: bleu(hypotheses, references)?,
            repetition: hypotheses.iter().map(|h| repetition_rate(h)).collect(),
            repetition_any: hypotheses.iter().map(|h| repetition_rate_any(h)).collect(),
            ..Self::default()
        })
    }

    pub fn mean_repetition(&self) -> f64 {
        mean(&self.repetition)
    }

    pub fn mean_repetition_any(&self) -> f64 {
        mean(&self.repetition_any)
    }

    /// One `key<TAB>value` line per statistic.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu\t{:.6}", self.bleu);
        let _ = writeln!(s, "bleu_x100\t{:.2}", self.bleu * 100.0);
        let _ = writeln!(s, "repetition_adjacent\t{:.6}", self.mean_repetition());
        let _ = writeln!(s, "repetition_any\t{:.6}", self.mean_repetition_any());
        for (tag, v) in &self.mean_similarity {
            let _ = writeln!(s, "mean_similarity.{tag}\t{v:.6}");
        }
        if let Some(q) = &self.quantiles {
            let _ = writeln!(s, "similarity_pairs\t{}", q.count);
            let _ = writeln!(s, "similarity_below_0.25\t{:.6}", q.below_quarter);
            let _ = writeln!(s, "similarity_below_0.5\t{:.6}", q.below_half);
            for (p, v) in &q.grid {
                let _ = writeln!(s, "similarity_q{:.2}\t{v:.6}", p);
            }
        }
        for (l, heads) in self.attention_entropy.iter().enumerate() {
            for (h, e) in heads.iter().enumerate() {
                let _ = writeln!(s, "attention_entropy.l{}.h{}\t{e:.6}", l + 1, h + 1);
            }
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn bleu_perfect_and_brevity() {
        let h = corpus(&["a b c d e", "x y z w"]);
        assert_eq!(bleu(&h, &h).unwrap(), 1.0);
        let short = bleu(&corpus(&["a b c"]), &corpus(&["a b c d"])).unwrap();
        assert!((short - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((short - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn bleu_clips_repeated_tokens() {
        // p1 = 1/2, p2 smoothed to 1/2
        let b = bleu(&corpus(&["a a"]), &corpus(&["a b"])).unwrap();
        assert!((b - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors_and_zero() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(bleu(&empty, &empty).is_err());
        assert!(bleu(&corpus(&["a"]), &corpus(&["a", "b"])).is_err());
        assert_eq!(bleu(&corpus(&["q r"]), &corpus(&["a b"])).unwrap(), 0.0);
    }

    #[test]
    fn repetition_fixtures() {
        assert_eq!(repetition_rate(&tokenize("a b c")), 0.0);
        assert!((repetition_rate(&tokenize("a a b")) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(repetition_rate(&tokenize("a a a a")), 0.75);
        assert_eq!(repetition_rate_any(&tokenize("a b a")), 1.0 / 3.0);
        assert_eq!(repetition_rate(&tokenize("a b a")), 0.0);
    }

    fn trace_from_rows(rows: &[&[f64]]) -> DecoderTrace {
        let h = NdArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        DecoderTrace {
            hidden: NdArray::stack(&[h]).unwrap(),
            attn: NdArray::zeros(&[1, 1, rows.len(), 1]).map(|_| 1.0),
            logits: NdArray::zeros(&[rows.len(), 2]),
        }
    }

    #[test]
    fn similarity_special_cases() {
        let same = similarity_matrix(&trace_from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[2.0, 4.0]]), 1, "t").unwrap();
        assert!(same.values.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let orth = similarity_matrix(&trace_from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]), 1, "t").unwrap();
        assert_eq!(orth.values, NdArray::identity(2));
        let one = similarity_matrix(&trace_from_rows(&[&[0.5, 0.5]]), 1, "t").unwrap();
        assert_eq!(one.values.data(), &[1.0]);
        assert!(similarity_matrix(&trace_from_rows(&[&[1.0, 0.0]]), 2, "t").is_err());
    }

    #[test]
    fn quantiles_on_constructed_sets() {
        let mk = |values: NdArray| SimilarityMatrix {
            values,
            layer: 1,
            model: "m".into(),
        };
        let ident = similarity_quantiles(&[mk(NdArray::identity(4))]).unwrap();
        assert_eq!((ident.below_quarter, ident.below_half), (1.0, 1.0));
        let ones = similarity_quantiles(&[mk(NdArray::ones(&[3, 3]))]).unwrap();
        assert_eq!(ones.below_half, 0.0);
        // 3 pairs at 0 and 3 pairs at 1 for one quarter below 0.25 ... built as
        // identity(3) plus ones(3): half the pairs are below either threshold.
        let mixed = similarity_quantiles(&[mk(NdArray::identity(3)), mk(NdArray::ones(&[3, 3]))]).unwrap();
        assert_eq!(mixed.count, 6);
        assert_eq!((mixed.below_quarter, mixed.below_half), (0.5, 0.5));
        assert_eq!(mixed.grid[0], (0.0, 0.0));
        assert_eq!(mixed.grid[20], (1.0, 1.0));
    }

    #[test]
    fn grid_round_trip() {
        let values = NdArray::from_rows(&[vec![0.9, 0.1], vec![0.123456789, 0.876543211]]).unwrap();
        let g = Grid::new(values, vec!["x".into(), "y".into()], vec!["a".into(), "b".into()], 3, 2, "teacher").unwrap();
        let text = g.to_text();
        assert!(text.starts_with("# rows=2 cols=2 layer=3 head=2 model=teacher\na\tb\nx\t0.900000\t0.100000\n"));
        let back = Grid::parse(&text).unwrap();
        assert_eq!(back.row_labels, g.row_labels);
        assert!(back.values.max_abs_diff(&g.values) <= 5e-7);
        assert!(matches!(Grid::parse("# rows=1 cols=1 layer=1 head=1 model=m\na\nx\tnope"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn diagonal_deviation_of_identity_is_zero() {
        assert_eq!(diagonal_deviation(&NdArray::identity(5)), 0.0);
    }
}
