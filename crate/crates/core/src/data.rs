//! Corpus ingestion, tokenization, vocabulary and embedding loading, plus a
//! seeded synthetic corpus generator for desk-scale experiments.
//!
//! Corpus files are UTF-8, one JSON record per line with exactly three
//! fields: `review` (string), `summary` (string), `rating` (integer 1-5).
//! Embedding files are GloVe-style text: one token followed by its vector
//! components per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reviews longer than this are truncated at load time.
pub const REVIEW_TOKEN_CAP: usize = 400;
/// Summaries longer than this are truncated at load time.
pub const SUMMARY_TOKEN_CAP: usize = 30;

/// One labeled (review, summary, rating) triple. Ratings run 1 (most
/// negative) to 5 (most positive).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub review: Vec<String>,
    pub summary: Vec<String>,
    pub rating: u8,
}

pub type Corpus = Vec<Example>;

/// Lowercase, split on whitespace, and peel leading/trailing ASCII
/// punctuation off each piece into separate tokens. Idempotent on its own
/// joined output.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in text.split_whitespace() {
        let lower = piece.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            tokens.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && chars[end - 1].is_ascii_punctuation() {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        trailing.reverse();
        tokens.extend(trailing);
    }
    tokens
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    review: String,
    summary: String,
    rating: i64,
}

fn example_from_record(record: RawRecord, line: usize) -> Result<Example> {
    if !(1..=5).contains(&record.rating) {
        return Err(Error::Data(format!("line {}: rating {} outside [1, 5]", line, record.rating)));
    }
    let mut review = tokenize(&record.review);
    let mut summary = tokenize(&record.summary);
    if review.is_empty() {
        return Err(Error::Data(format!("line {}: review has no tokens", line)));
    }
    review.truncate(REVIEW_TOKEN_CAP);
    summary.truncate(SUMMARY_TOKEN_CAP);
    Ok(Example { review, summary, rating: record.rating as u8 })
}

/// Load a line-delimited corpus; malformed lines are reported with their
/// 1-based line numbers.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut corpus = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {}", lineno, e)))?;
        corpus.push(example_from_record(record, lineno)?);
    }
    Ok(corpus)
}

/// Write a corpus in the line-delimited format read by [`load_corpus`].
pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Example]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for ex in corpus {
        let record = RawRecord {
            review: ex.review.join(" "),
            summary: ex.summary.join(" "),
            rating: ex.rating as i64,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{}", line)?;
    }
    Ok(())
}

/// Token-to-id map with reserved ids: PAD = 0 (unused by the models, kept
/// reserved), UNK = 1 for anything below the frequency cutoff or unseen.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    /// Build from a corpus: tokens with count >= `min_count` get ids in
    /// first-occurrence order, which keeps ids stable across runs.
    pub fn build(corpus: &[Example], min_count: usize) -> Vocabulary {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in corpus {
            for tok in ex.review.iter().chain(&ex.summary) {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index: HashMap<String, usize> = HashMap::new();
        for ex in corpus {
            for tok in ex.review.iter().chain(&ex.summary) {
                if counts[tok.as_str()] >= min_count && !index.contains_key(tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok.clone());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    /// Reconstruct from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Dense V×e embedding matrix aligned to a vocabulary.
pub struct EmbeddingTable {
    pub dim: usize,
    /// Row-major V×dim values.
    pub values: Vec<f64>,
    /// How many vocabulary entries were found in the embedding file.
    pub matched: usize,
}

fn random_rows(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..count * dim).map(|_| rng.random_range(-0.1..0.1)).collect()
}

/// Every vocabulary row starts from seeded uniform(-0.1, 0.1) noise.
pub fn random_embeddings(vocab: &Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable { dim, values: random_rows(vocab.size(), dim, &mut rng), matched: 0 }
}

/// Load GloVe-style text vectors for the vocabulary. Matched tokens copy the
/// file rows; everything else keeps its seeded random initialization. Lines
/// with the wrong component count are format errors naming the line.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut table = random_embeddings(vocab, dim, seed);
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut matched = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let components: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Format { line: lineno, detail: format!("bad float {:?}", p) })
            })
            .collect::<Result<_>>()?;
        if components.len() != dim {
            return Err(Error::Format {
                line: lineno,
                detail: format!("expected {} components, found {}", dim, components.len()),
            });
        }
        let id = vocab.lookup(token);
        if id != Vocabulary::UNK || token == "<unk>" {
            table.values[id * dim..(id + 1) * dim].copy_from_slice(&components);
            matched += 1;
        }
    }
    table.matched = matched;
    Ok(table)
}

/// Recipe for the synthetic corpus: a sentiment lexicon per class, length
/// ranges, the conflict rate ρ (probability that the class signal lands in
/// exactly one of the two texts), and the rate of neutral filler inside a
/// signal-carrying text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_lexicons: Vec<Vec<String>>,
    pub neutral_lexicon: Vec<String>,
    pub review_len: (usize, usize),
    pub summary_len: (usize, usize),
    pub conflict_rate: f64,
    pub noise_rate: f64,
    pub class_priors: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_lexicons.len() != 5 {
            return Err(Error::Config(format!(
                "need 5 class lexicons, got {}",
                self.class_lexicons.len()
            )));
        }
        for (i, lex) in self.class_lexicons.iter().enumerate() {
            if lex.is_empty() {
                return Err(Error::Config(format!("class {} lexicon is empty", i + 1)));
            }
        }
        if self.neutral_lexicon.is_empty() {
            return Err(Error::Config("neutral lexicon is empty".to_string()));
        }
        if !(0.0..=1.0).contains(&self.conflict_rate) {
            return Err(Error::Config(format!("conflict rate {} outside [0, 1]", self.conflict_rate)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.class_priors.len() != 5 {
            return Err(Error::Config("need 5 class priors".to_string()));
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_priors.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("class priors sum to {}, need 1", total)));
        }
        if self.review_len.0 == 0 || self.review_len.0 > self.review_len.1 {
            return Err(Error::Config(format!("bad review length range {:?}", self.review_len)));
        }
        if self.summary_len.0 == 0 || self.summary_len.0 > self.summary_len.1 {
            return Err(Error::Config(format!("bad summary length range {:?}", self.summary_len)));
        }
        Ok(())
    }

    /// A ready-made recipe used by tests and the documentation examples.
    pub fn demo(conflict_rate: f64, seed: u64) -> SyntheticSpec {
        let lex = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        SyntheticSpec {
            class_lexicons: vec![
                lex(&["terrible", "awful", "broken", "refund", "worst", "garbage"]),
                lex(&["poor", "flimsy", "disappointing", "weak", "mediocre", "meh"]),
                lex(&["okay", "average", "fine", "acceptable", "decent", "fair"]),
                lex(&["good", "solid", "nice", "pleasant", "sturdy", "useful"]),
                lex(&["excellent", "amazing", "perfect", "love", "fantastic", "wonderful"]),
            ],
            neutral_lexicon: (0..60).map(|i| format!("filler{:02}", i)).collect(),
            review_len: (10, 60),
            summary_len: (2, 6),
            conflict_rate,
            noise_rate: 0.85,
            class_priors: vec![0.2; 5],
            seed,
        }
    }
}

fn fill_text(len: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..len)
        .map(|_| spec.neutral_lexicon[rng.random_range(0..spec.neutral_lexicon.len())].clone())
        .collect()
}

fn plant_signal(text: &mut [String], class: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) {
    let lexicon = &spec.class_lexicons[class];
    let mut planted = false;
    for slot in text.iter_mut() {
        if rng.random::<f64>() >= spec.noise_rate {
            *slot = lexicon[rng.random_range(0..lexicon.len())].clone();
            planted = true;
        }
    }
    if !planted {
        let pos = rng.random_range(0..text.len());
        text[pos] = lexicon[rng.random_range(0..lexicon.len())].clone();
    }
}

/// Generate `count` seeded examples. With probability ρ the class signal is
/// planted in exactly one text (side chosen uniformly); otherwise in both.
pub fn gen_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(count);
    for _ in 0..count {
        let class = {
            let draw: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = 4;
            for (i, p) in spec.class_priors.iter().enumerate() {
                acc += p;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let n = rng.random_range(spec.review_len.0..=spec.review_len.1);
        let m = rng.random_range(spec.summary_len.0..=spec.summary_len.1);
        let mut review = fill_text(n, spec, &mut rng);
        let mut summary = fill_text(m, spec, &mut rng);
        let single_side = rng.random::<f64>() < spec.conflict_rate;
        if single_side {
            if rng.random::<bool>() {
                plant_signal(&mut review, class, spec, &mut rng);
            } else {
                plant_signal(&mut summary, class, spec, &mut rng);
            }
        } else {
            plant_signal(&mut review, class, spec, &mut rng);
            plant_signal(&mut summary, class, spec, &mut rng);
        }
        corpus.push(Example { review, summary, rating: (class + 1) as u8 });
    }
    Ok(corpus)
}

/// True iff the text contains at least one token from the class lexicon.
/// Used by tests and analysis to detect where signal was planted.
pub fn carries_signal(text: &[String], spec: &SyntheticSpec, class: usize) -> bool {
    text.iter().any(|t| spec.class_lexicons[class].contains(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Great buy!"), vec!["great", "buy", "!"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("(fun)."), vec!["(", "fun", ")", "."]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize("!!!"), vec!["!", "!", "!"]);
    }

    #[test]
    fn tokenize_idempotent_on_joined_output() {
        for text in ["Great buy! Saved my son, thank you", "A+ (really).", "it's 5/5 -- wow"] {
            let once = tokenize(text);
            let twice = tokenize(&once.join(" "));
            assert_eq!(once, twice, "not idempotent for {:?}", text);
        }
    }

    #[test]
    fn corpus_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = vec![
            Example { review: tokenize("loved it"), summary: tokenize("great"), rating: 5 },
            Example { review: tokenize("meh , returned"), summary: vec![], rating: 2 },
            Example { review: tokenize("solid product ! works"), summary: tokenize("works fine"), rating: 4 },
        ];
        save_corpus(&path, &corpus).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            "{\"review\": \"ok\", \"summary\": \"\", \"rating\": 3}\n{\"review\": \"bad\", \"summary\": \"\", \"rating\": 6}\n",
        )
        .unwrap();
        let err = load_corpus(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{}", err);

        let missing = dir.path().join("missing.jsonl");
        std::fs::write(&missing, "{\"review\": \"ok\", \"rating\": 3}\n").unwrap();
        let err = load_corpus(&missing).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{}", err);

        let empty_review = dir.path().join("empty.jsonl");
        std::fs::write(&empty_review, "{\"review\": \"\", \"summary\": \"x\", \"rating\": 3}\n").unwrap();
        assert!(load_corpus(&empty_review).is_err());
    }

    #[test]
    fn vocabulary_cutoff_and_stability() {
        let corpus = vec![
            Example { review: tokenize("good good tool"), summary: tokenize("good"), rating: 4 },
            Example { review: tokenize("tool broke"), summary: vec![], rating: 1 },
        ];
        let vocab = Vocabulary::build(&corpus, 2);
        // "good" (3×) and "tool" (2×) survive; "broke" (1×) maps to UNK.
        assert_eq!(vocab.lookup("good"), 2);
        assert_eq!(vocab.lookup("tool"), 3);
        assert_eq!(vocab.lookup("broke"), Vocabulary::UNK);
        assert_eq!(vocab.lookup("unseen"), Vocabulary::UNK);
        assert_eq!(vocab.size(), 4);

        let rebuilt = Vocabulary::build(&corpus, 2);
        assert_eq!(vocab.tokens(), rebuilt.tokens());
    }

    #[test]
    fn embeddings_roundtrip_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![Example {
            review: tokenize("alpha beta alpha beta"),
            summary: vec![],
            rating: 3,
        }];
        let vocab = Vocabulary::build(&corpus, 2);
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "alpha 0.25 -1.5 3.0\nbeta 1.0 2.0 -0.125\n").unwrap();
        let table = load_embeddings(&path, &vocab, 3, 7).unwrap();
        assert_eq!(table.matched, 2);
        let a = vocab.lookup("alpha");
        assert_eq!(&table.values[a * 3..(a + 1) * 3], &[0.25, -1.5, 3.0]);
        let b = vocab.lookup("beta");
        assert_eq!(&table.values[b * 3..(b + 1) * 3], &[1.0, 2.0, -0.125]);

        // Empty file: zero matches, rows deterministic per seed.
        let empty = dir.path().join("none.txt");
        std::fs::write(&empty, "").unwrap();
        let t1 = load_embeddings(&empty, &vocab, 3, 7).unwrap();
        let t2 = load_embeddings(&empty, &vocab, 3, 7).unwrap();
        assert_eq!(t1.matched, 0);
        assert_eq!(t1.values, t2.values);
        assert!(t1.values.iter().all(|v| v.abs() < 0.1));

        // Width mismatch names the offending line.
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "alpha 1.0 2.0 3.0\nbeta 1.0\n").unwrap();
        match load_embeddings(&bad, &vocab, 3, 7) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {:?}", other.map(|t| t.matched)),
        }
    }

    #[test]
    fn synthetic_generator_construction_properties() {
        // ρ = 0 plants the gold-class signal in both texts.
        let spec = SyntheticSpec::demo(0.0, 11);
        let corpus = gen_synthetic(&spec, 50).unwrap();
        assert_eq!(corpus.len(), 50);
        for ex in &corpus {
            let class = (ex.rating - 1) as usize;
            assert!(carries_signal(&ex.review, &spec, class));
            assert!(carries_signal(&ex.summary, &spec, class));
        }
        assert!(gen_synthetic(&spec, 0).unwrap().is_empty());

        let mut broken = spec.clone();
        broken.class_lexicons[2].clear();
        assert!(matches!(gen_synthetic(&broken, 1), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_single_side_fraction_concentrates() {
        let spec = SyntheticSpec::demo(0.5, 23);
        let corpus = gen_synthetic(&spec, 10_000).unwrap();
        let single = corpus
            .iter()
            .filter(|ex| {
                let class = (ex.rating - 1) as usize;
                let r = carries_signal(&ex.review, &spec, class);
                let s = carries_signal(&ex.summary, &spec, class);
                r != s
            })
            .count();
        let fraction = single as f64 / corpus.len() as f64;
        assert!((fraction - 0.5).abs() < 0.02, "single-side fraction {}", fraction);
    }

    #[test]
    fn synthetic_class_frequencies_near_priors() {
        let spec = SyntheticSpec::demo(0.3, 5);
        let corpus = gen_synthetic(&spec, 10_000).unwrap();
        let sigma = (0.2 * 0.8 / 10_000.0f64).sqrt();
        for class in 1..=5u8 {
            let freq = corpus.iter().filter(|ex| ex.rating == class).count() as f64 / 10_000.0;
            assert!((freq - 0.2).abs() < 3.0 * sigma, "class {} frequency {}", class, freq);
        }
        for ex in &corpus {
            assert!((1..=5).contains(&ex.rating));
            assert!(!ex.review.is_empty());
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::demo(0.3, 99);
        assert_eq!(gen_synthetic(&spec, 200).unwrap(), gen_synthetic(&spec, 200).unwrap());
    }
}
