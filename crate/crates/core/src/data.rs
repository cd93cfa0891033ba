//! Vocabulary, parallel-corpus files and the synthetic translation task.
//!
//! Corpus files are UTF-8, one pair per line, `source<TAB>target`, with tokens
//! separated by single spaces.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::special;
use crate::rng::{stream, Purpose};

pub const RESERVED_TOKENS: [&str; special::RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(source: &str, target: &str) -> Self {
        Self {
            source: tokenize(source),
            target: tokenize(target),
        }
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
}

impl Corpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Mean of `|target| − |source|`.
    pub fn mean_length_difference(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let total: i64 = self
            .pairs
            .iter()
            .map(|p| p.target.len() as i64 - p.source.len() as i64)
            .sum();
        total as f64 / self.pairs.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&p.source.join(" "));
            out.push('\t');
            out.push_str(&p.target.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses corpus text; returns the corpus and the number of skipped lines
    /// (either side empty).
    pub fn parse(text: &str) -> Result<(Self, usize)> {
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((src, tgt)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected source<TAB>target".into(),
                });
            };
            let pair = SentencePair::new(src, tgt);
            if pair.source.is_empty() || pair.target.is_empty() {
                skipped += 1;
                continue;
            }
            pairs.push(pair);
        }
        Ok((Self { pairs }, skipped))
    }
}

/// Reads a corpus file; returns the corpus and the count of skipped lines.
pub fn load_corpus(path: &Path) -> Result<(Corpus, usize)> {
    Corpus::parse(&fs::read_to_string(path)?)
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, corpus.to_text().as_bytes())
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Token table shared by source and target sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved symbols first, then tokens by descending frequency, ties by
    /// token text.
    pub fn build(corpus: &Corpus) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &corpus.pairs {
            for t in p.source.iter().chain(&p.target) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()))
    }

    /// Reserved symbols followed by `tokens` in order (duplicates dropped).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[special::UNK], String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_owned()).collect()
    }
}

/// A corpus converted to ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl EncodedCorpus {
    pub fn encode(corpus: &Corpus, vocab: &Vocabulary) -> Self {
        Self {
            pairs: corpus
                .pairs
                .iter()
                .map(|p| (vocab.encode(&p.source), vocab.encode(&p.target)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LengthRule {
    #[default]
    None,
    /// Insert one function token after every `per` source tokens.
    Append { per: usize },
    /// Drop one trailing token per `per` source tokens (keeping at least one).
    Drop { per: usize },
}

impl LengthRule {
    fn apply(&self, mut tokens: Vec<String>, function_token: &str) -> Vec<String> {
        match *self {
            LengthRule::None => tokens,
            LengthRule::Append { per } => {
                let per = per.max(1);
                let mut out = Vec::with_capacity(tokens.len() + tokens.len() / per);
                for (i, t) in tokens.into_iter().enumerate() {
                    out.push(t);
                    if (i + 1) % per == 0 {
                        out.push(function_token.to_owned());
                    }
                }
                out
            }
            LengthRule::Drop { per } => {
                let k = tokens.len() / per.max(1);
                let keep = tokens.len().saturating_sub(k).max(1);
                tokens.truncate(keep);
                tokens
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Content tokens, excluding the reserved symbols. The last one is the
    /// function token used by the length rule and never appears in sources.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `None` keeps the identity substitution.
    pub mapping_seed: Option<u64>,
    pub reorder_window: usize,
    pub length_rule: LengthRule,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Longest target the downstream model accepts.
    pub model_max_len: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            min_len: 3,
            max_len: 12,
            mapping_seed: Some(17),
            reorder_window: 2,
            length_rule: LengthRule::Append { per: 4 },
            train_size: 4000,
            valid_size: 200,
            test_size: 200,
            seed: 1,
            model_max_len: 32,
        }
    }
}

impl SyntheticTaskSpec {
    /// Plain copy task: identity map, no reordering, no length change.
    pub fn copy_task() -> Self {
        Self {
            mapping_seed: None,
            reorder_window: 1,
            length_rule: LengthRule::None,
            ..Self::default()
        }
    }

    pub fn content_token(i: usize) -> String {
        format!("w{i:02}")
    }

    pub fn function_token(&self) -> String {
        Self::content_token(self.vocab_size - 1)
    }

    pub fn max_target_len(&self) -> usize {
        match self.length_rule {
            LengthRule::Append { per } => self.max_len + self.max_len / per.max(1),
            _ => self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("synthetic vocabulary needs at least 8 tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("synthetic lengths need 1 <= min_len <= max_len"));
        }
        if self.reorder_window == 0 {
            return Err(Error::config("reorder window must be at least 1"));
        }
        if let LengthRule::Append { per: 0 } | LengthRule::Drop { per: 0 } = self.length_rule {
            return Err(Error::config("length rule period must be at least 1"));
        }
        if self.max_target_len() > self.model_max_len || self.max_len > self.model_max_len {
            return Err(Error::config(format!(
                "sentences up to {} tokens exceed the model limit of {}",
                self.max_target_len(),
                self.model_max_len
            )));
        }
        Ok(())
    }

    /// Substitution over the source alphabet (all but the function token).
    pub fn substitution(&self) -> HashMap<String, String> {
        let alphabet: Vec<String> = (0..self.vocab_size - 1).map(Self::content_token).collect();
        let mut image = alphabet.clone();
        if let Some(seed) = self.mapping_seed {
            image.shuffle(&mut stream(seed, Purpose::Mapping, 0));
        }
        let mut map: HashMap<String, String> = alphabet.into_iter().zip(image).collect();
        map.insert(self.function_token(), self.function_token());
        map
    }

    /// Target for one source: length rule, then block reversal, then substitution.
    pub fn translate(&self, source: &[String], map: &HashMap<String, String>) -> Vec<String> {
        let lengthened = self.length_rule.apply(source.to_vec(), &self.function_token());
        let reordered = reverse_blocks(&lengthened, self.reorder_window);
        reordered.iter().map(|t| map.get(t).cloned().unwrap_or_else(|| t.clone())).collect()
    }
}

/// Reverses consecutive blocks of `window` tokens; a short tail block is
/// reversed as well.
pub fn reverse_blocks<T: Clone>(tokens: &[T], window: usize) -> Vec<T> {
    tokens
        .chunks(window.max(1))
        .flat_map(|c| c.iter().rev().cloned())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Draws distinct source sentences and splits them train/valid/test.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<CorpusSplits> {
    spec.validate()?;
    let total = spec.train_size + spec.valid_size + spec.test_size;
    let alphabet = spec.vocab_size - 1;
    let capacity: f64 = (spec.min_len..=spec.max_len).map(|l| (alphabet as f64).powi(l as i32)).sum();
    if (total as f64) > capacity / 2.0 {
        return Err(Error::config(format!("cannot draw {total} distinct sentences from this task")));
    }
    let map = spec.substitution();
    let mut rng = stream(spec.seed, Purpose::Data, 0);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(total);
    while pairs.len() < total {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let source: Vec<String> = (0..len)
            .map(|_| SyntheticTaskSpec::content_token(rng.gen_range(0..alphabet)))
            .collect();
        if !seen.insert(source.clone()) {
            continue;
        }
        let target = spec.translate(&source, &map);
        pairs.push(SentencePair { source, target });
    }
    let test = pairs.split_off(spec.train_size + spec.valid_size);
    let valid = pairs.split_off(spec.train_size);
    Ok(CorpusSplits {
        train: Corpus::new(pairs),
        valid: Corpus::new(valid),
        test: Corpus::new(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn copy_task_targets_equal_sources() {
        let spec = SyntheticTaskSpec {
            train_size: 50,
            valid_size: 5,
            test_size: 5,
            ..SyntheticTaskSpec::copy_task()
        };
        let splits = generate_synthetic(&spec).unwrap();
        assert!(splits.train.pairs.iter().all(|p| p.source == p.target));
    }

    #[test]
    fn window_two_swaps_pairs() {
        assert_eq!(reverse_blocks(&words("a b c d"), 2), words("b a d c"));
        assert_eq!(reverse_blocks(&words("a b c"), 2), words("b a c"));
        let spec = SyntheticTaskSpec {
            mapping_seed: None,
            length_rule: LengthRule::None,
            ..SyntheticTaskSpec::default()
        };
        let map = spec.substitution();
        let src = words("w00 w01 w02 w03");
        assert_eq!(spec.translate(&src, &map), words("w01 w00 w03 w02"));
    }

    #[test]
    fn append_rule_adds_function_tokens() {
        let spec = SyntheticTaskSpec::default();
        let map = spec.substitution();
        let src: Vec<String> = (0..9).map(SyntheticTaskSpec::content_token).collect();
        let tgt = spec.translate(&src, &map);
        assert_eq!(tgt.len(), 11);
        assert_eq!(tgt.iter().filter(|t| **t == spec.function_token()).count(), 2);
        let f = spec.function_token();
        let plain = LengthRule::Append { per: 4 }.apply(src, &f);
        assert_eq!(plain[4], f);
        assert_eq!(plain[9], f);
        assert!(plain.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let spec = SyntheticTaskSpec {
            train_size: 300,
            valid_size: 40,
            test_size: 40,
            ..SyntheticTaskSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let train: HashSet<_> = a.train.pairs.iter().map(|p| &p.source).collect();
        assert!(a.valid.pairs.iter().chain(&a.test.pairs).all(|p| !train.contains(&p.source)));
    }

    #[test]
    fn spec_rejects_lengths_beyond_model() {
        let spec = SyntheticTaskSpec {
            model_max_len: 12,
            ..SyntheticTaskSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let tiny = SyntheticTaskSpec {
            vocab_size: 4,
            ..SyntheticTaskSpec::default()
        };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn parse_skips_empty_sides_and_reports_bad_lines() {
        let (c, skipped) = Corpus::parse("\tx\na b\tc\n").unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(c.pairs, vec![SentencePair::new("a b", "c")]);
        match Corpus::parse("a\tb\nno tab here\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_file_round_trip_keeps_utf8() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let corpus = Corpus::new(vec![SentencePair::new("über straße", "日本 語"), SentencePair::new("a", "b c")]);
        save_corpus(&path, &corpus).unwrap();
        let (back, skipped) = load_corpus(&path).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(back, corpus);
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_text() {
        let c = Corpus::new(vec![SentencePair::new("b a a", "c b a")]);
        let v = Vocabulary::build(&c);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), special::UNK);
        assert_eq!(v.decode(&v.encode(&words("c a"))), words("c a"));
    }
}
