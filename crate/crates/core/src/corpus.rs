//! Parallel text, vocabularies, Pharaoh alignments and mini-batching.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::supervision::{HardAlignment, SupervisionMatrix};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: usize = 3;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "</s>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("empty {0} side")]
    EmptySide(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line count mismatch: {left} has {left_lines} lines, {right} has {right_lines}")]
    LineCountMismatch {
        left: String,
        left_lines: usize,
        right: String,
        right_lines: usize,
    },
    #[error("alignment line {line}: {source}")]
    AlignmentLine { line: usize, source: PharaohError },
    #[error("vocabulary file line {line}: {msg}")]
    VocabFile { line: usize, msg: String },
    #[error("supervision for pair {index} is {got:?}, expected {want:?}")]
    SupervisionShape {
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PharaohError {
    #[error("malformed link {0:?}, expected \"i-j\"")]
    Malformed(String),
    #[error("link {token:?} out of range for {src_len} source and {tgt_len} target words")]
    OutOfRange {
        token: String,
        src_len: usize,
        tgt_len: usize,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io_err(path))
}

/// Token ↔ id map with `pad=0`, `eos=1`, `unk=2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Vocabulary over the given tokens, in order, after the reserved ids.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            index: HashMap::new(),
            tokens: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
        };
        for tok in tokens {
            let tok = tok.into();
            if v.index.contains_key(&tok) || RESERVED_TOKENS.contains(&tok.as_str()) {
                continue;
            }
            v.index.insert(tok.clone(), v.tokens.len());
            v.tokens.push(tok);
        }
        v
    }

    /// Keeps the `max_size` most frequent tokens; ties go to the token seen
    /// first.
    pub fn build<'a, I>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0;
        for line in lines {
            for tok in line.split_whitespace() {
                let e = counts.entry(tok).or_insert_with(|| {
                    seen += 1;
                    (0, seen)
                });
                e.0 += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        Ok(Self::from_tokens(
            ranked.into_iter().take(max_size).map(|(t, _, _)| t),
        ))
    }

    pub fn build_from_file(path: &Path, max_size: usize) -> Result<Self> {
        let lines = read_lines(path)?;
        Self::build(lines.iter().map(String::as_str), max_size)
    }

    /// Vocabulary file: one token per line, id = line number + 3.
    pub fn read(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let mut seen = BTreeSet::new();
        for (no, tok) in lines.iter().enumerate() {
            if tok.is_empty() || tok.split_whitespace().count() != 1 || tok.trim() != tok {
                return Err(CorpusError::VocabFile {
                    line: no + 1,
                    msg: format!("invalid token {tok:?}"),
                });
            }
            if !seen.insert(tok.as_str()) || RESERVED_TOKENS.contains(&tok.as_str()) {
                return Err(CorpusError::VocabFile {
                    line: no + 1,
                    msg: format!("duplicate or reserved token {tok:?}"),
                });
            }
        }
        Ok(Self::from_tokens(lines))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        for tok in &self.tokens[RESERVED..] {
            writeln!(f, "{tok}").map_err(io_err(path))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    /// Token ids of a line with eos appended.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.id(t))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Space-joined tokens, stopping at the first eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Source and target id sequences, both ending in eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src_ids: Vec<usize>,
    pub tgt_ids: Vec<usize>,
    pub index: usize,
}

impl SentencePair {
    /// Source length including eos.
    pub fn l(&self) -> usize {
        self.src_ids.len()
    }

    /// Target length including eos.
    pub fn m(&self) -> usize {
        self.tgt_ids.len()
    }
}

pub fn encode_pair(
    src: &str,
    tgt: &str,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    index: usize,
) -> Result<SentencePair> {
    if src.split_whitespace().next().is_none() {
        return Err(CorpusError::EmptySide("source"));
    }
    if tgt.split_whitespace().next().is_none() {
        return Err(CorpusError::EmptySide("target"));
    }
    Ok(SentencePair {
        src_ids: src_vocab.encode(src),
        tgt_ids: tgt_vocab.encode(tgt),
        index,
    })
}

/// Which side comes first in a Pharaoh `"a-b"` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PharaohOrder {
    #[default]
    SourceTarget,
    TargetSource,
}

/// 1-indexed `(t, i)` links of one Pharaoh line, without bounds checks.
pub fn parse_pharaoh_links(
    line: &str,
    order: PharaohOrder,
) -> std::result::Result<Vec<(usize, usize)>, PharaohError> {
    line.split_whitespace()
        .map(|tok| {
            let (a, b) = tok
                .split_once('-')
                .ok_or_else(|| PharaohError::Malformed(tok.to_string()))?;
            let a: usize = a
                .parse()
                .map_err(|_| PharaohError::Malformed(tok.to_string()))?;
            let b: usize = b
                .parse()
                .map_err(|_| PharaohError::Malformed(tok.to_string()))?;
            let (i, j) = match order {
                PharaohOrder::SourceTarget => (a, b),
                PharaohOrder::TargetSource => (b, a),
            };
            Ok((j + 1, i + 1))
        })
        .collect()
}

/// Parses a line of 0-indexed links into an alignment over the grid with eos
/// row and column added (`m = tgt_len + 1`, `l = src_len + 1`).
pub fn parse_pharaoh(
    line: &str,
    src_len: usize,
    tgt_len: usize,
    order: PharaohOrder,
) -> std::result::Result<HardAlignment, PharaohError> {
    let links = parse_pharaoh_links(line, order)?;
    let mut out = HardAlignment::empty(tgt_len + 1, src_len + 1).expect("non-empty grid");
    for (tok, (t, i)) in line.split_whitespace().zip(links) {
        if t > tgt_len || i > src_len {
            return Err(PharaohError::OutOfRange {
                token: tok.to_string(),
                src_len,
                tgt_len,
            });
        }
        out.insert(t, i).expect("checked bounds");
    }
    Ok(out)
}

/// 0-indexed Pharaoh text, ordered by source then target position.
pub fn format_pharaoh<'a, I>(links: I, order: PharaohOrder) -> String
where
    I: IntoIterator<Item = &'a (usize, usize)>,
{
    let mut by_source: Vec<(usize, usize)> = links.into_iter().map(|&(t, i)| (i, t)).collect();
    by_source.sort_unstable();
    by_source.dedup();
    by_source
        .iter()
        .map(|&(i, t)| match order {
            PharaohOrder::SourceTarget => format!("{}-{}", i - 1, t - 1),
            PharaohOrder::TargetSource => format!("{}-{}", t - 1, i - 1),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Links of an alignment excluding anything on the eos row or column.
pub fn word_links(a: &HardAlignment) -> BTreeSet<(usize, usize)> {
    a.links()
        .iter()
        .copied()
        .filter(|&(t, i)| t < a.target_len() && i < a.source_len())
        .collect()
}

/// Encoded parallel data with optional raw alignments kept line-aligned.
#[derive(Debug, Clone, Default)]
pub struct ParallelData {
    pub pairs: Vec<SentencePair>,
    pub alignments: Option<Vec<HardAlignment>>,
    pub skipped_empty: usize,
    pub skipped_long: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Pairs with more words than this on either side are dropped.
    pub max_len: Option<usize>,
    pub order: PharaohOrder,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_len: Some(50),
            order: PharaohOrder::SourceTarget,
        }
    }
}

fn check_counts(left: &Path, a: usize, right: &Path, b: usize) -> Result<()> {
    if a != b {
        return Err(CorpusError::LineCountMismatch {
            left: left.display().to_string(),
            left_lines: a,
            right: right.display().to_string(),
            right_lines: b,
        });
    }
    Ok(())
}

/// Encodes line-aligned source/target text (and optional Pharaoh alignments).
pub fn encode_corpus(
    src_lines: &[String],
    tgt_lines: &[String],
    align_lines: Option<&[String]>,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    opts: &LoadOptions,
) -> Result<ParallelData> {
    let mut out = ParallelData {
        alignments: align_lines.map(|_| Vec::new()),
        ..Default::default()
    };
    for (n, (s, t)) in src_lines.iter().zip(tgt_lines).enumerate() {
        let pair = match encode_pair(s, t, src_vocab, tgt_vocab, n) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping pair {}: {e}", n + 1);
                out.skipped_empty += 1;
                continue;
            }
        };
        if let Some(max) = opts.max_len {
            if pair.l() - 1 > max || pair.m() - 1 > max {
                out.skipped_long += 1;
                continue;
            }
        }
        if let (Some(lines), Some(dst)) = (align_lines, out.alignments.as_mut()) {
            let a = parse_pharaoh(&lines[n], pair.l() - 1, pair.m() - 1, opts.order).map_err(
                |source| CorpusError::AlignmentLine {
                    line: n + 1,
                    source,
                },
            )?;
            dst.push(a);
        }
        out.pairs.push(pair);
    }
    if out.skipped_empty > 0 {
        log::warn!("skipped {} pairs with an empty side", out.skipped_empty);
    }
    Ok(out)
}

pub fn load_parallel(
    src: &Path,
    tgt: &Path,
    align: Option<&Path>,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    opts: &LoadOptions,
) -> Result<ParallelData> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    check_counts(src, s.len(), tgt, t.len())?;
    let a = match align {
        Some(path) => {
            let a = read_lines(path)?;
            check_counts(src, s.len(), path, a.len())?;
            Some(a)
        }
        None => None,
    };
    encode_corpus(&s, &t, a.as_deref(), src_vocab, tgt_vocab, opts)
}

/// Checks each supervision matrix against its pair's `m × l`.
pub fn check_supervision(pairs: &[SentencePair], sup: &[SupervisionMatrix]) -> Result<()> {
    for (k, (p, s)) in pairs.iter().zip(sup).enumerate() {
        let got = (s.target_len(), s.source_len());
        if got != (p.m(), p.l()) {
            return Err(CorpusError::SupervisionShape {
                index: k,
                got,
                want: (p.m(), p.l()),
            });
        }
    }
    if pairs.len() != sup.len() {
        return Err(CorpusError::SupervisionShape {
            index: pairs.len().min(sup.len()),
            got: (0, 0),
            want: (0, 0),
        });
    }
    Ok(())
}

/// A group of pairs padded to common lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<SentencePair>,
    /// Source ids padded with [`PAD`] to the longest source in the batch.
    pub src_ids: Vec<Vec<usize>>,
    pub tgt_ids: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub supervision: Option<Vec<SupervisionMatrix>>,
}

fn pad(seqs: impl Iterator<Item = Vec<usize>> + Clone) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = seqs.clone().map(|s| s.len()).max().unwrap_or(0);
    seqs.map(|s| {
        let mask = (0..width).map(|k| k < s.len()).collect();
        let mut ids = s;
        ids.resize(width, PAD);
        (ids, mask)
    })
    .unzip()
}

impl Batch {
    pub fn new(pairs: Vec<SentencePair>, supervision: Option<Vec<SupervisionMatrix>>) -> Self {
        let (src_ids, src_mask) = pad(pairs.iter().map(|p| p.src_ids.clone()));
        let (tgt_ids, tgt_mask) = pad(pairs.iter().map(|p| p.tgt_ids.clone()));
        Self {
            pairs,
            src_ids,
            tgt_ids,
            src_mask,
            tgt_mask,
            supervision,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Splits `pairs` into batches in a seed-determined order.
///
/// With `bucket_by_length`, pairs are grouped by source length inside
/// windows of 20 batches before the batch order is shuffled.
pub fn make_batches(
    pairs: &[SentencePair],
    supervision: Option<&[SupervisionMatrix]>,
    batch_size: usize,
    bucket_by_length: bool,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    if bucket_by_length {
        for window in order.chunks_mut(batch_size * 20) {
            window.sort_by_key(|&k| pairs[k].l());
        }
    }
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if bucket_by_length {
        groups.shuffle(&mut rng);
    }
    groups
        .into_iter()
        .map(|g| {
            let ps = g.iter().map(|&k| pairs[k].clone()).collect();
            let sup = supervision.map(|s| g.iter().map(|&k| s[k].clone()).collect());
            Batch::new(ps, sup)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_frequency_then_first_occurrence() {
        let v = Vocab::build(["a b", "a"], 10).unwrap();
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.len(), 5);
        let w = Vocab::build(["c d b", "d c"], 10).unwrap();
        assert_eq!((w.id("c"), w.id("d"), w.id("b")), (3, 4, 5));
    }

    #[test]
    fn vocab_truncation_maps_rarest_to_unk() {
        let v = Vocab::build(["a a a b b b c c d d e"], 4).unwrap();
        assert_eq!(v.id("e"), UNK);
        assert_ne!(v.id("d"), UNK);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let lines = ["x y z", "z y", "q x"];
        assert_eq!(
            Vocab::build(lines, 10).unwrap(),
            Vocab::build(lines, 10).unwrap()
        );
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Vocab::build(["", "  "], 10),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = Vocab::build(["a b c", "c"], 10).unwrap();
        v.write(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "c\na\nb\n");
        assert_eq!(Vocab::read(&path).unwrap(), v);
    }

    #[test]
    fn encode_appends_eos() {
        let sv = Vocab::from_tokens(["a", "b"]);
        let tv = Vocab::from_tokens(["x"]);
        let p = encode_pair("a b", "x", &sv, &tv, 0).unwrap();
        assert_eq!(p.src_ids, vec![3, 4, EOS]);
        assert_eq!(p.tgt_ids, vec![3, EOS]);
        assert_eq!((p.l(), p.m()), (3, 2));
        let q = encode_pair("a zzz", "x", &sv, &tv, 1).unwrap();
        assert_eq!(q.src_ids, vec![3, UNK, EOS]);
        assert_eq!(sv.decode(&p.src_ids), "a b");
        assert!(matches!(
            encode_pair(" ", "x", &sv, &tv, 0),
            Err(CorpusError::EmptySide("source"))
        ));
    }

    #[test]
    fn empty_sides_skipped_and_counted() {
        let sv = Vocab::from_tokens(["a"]);
        let src = vec!["a".to_string(), "".to_string(), "a a".to_string()];
        let tgt = vec!["a".to_string(), "a".to_string(), "".to_string()];
        let d = encode_corpus(&src, &tgt, None, &sv, &sv, &LoadOptions::default()).unwrap();
        assert_eq!(d.pairs.len(), 1);
        assert_eq!(d.skipped_empty, 2);
    }

    #[test]
    fn long_sentences_skipped_with_their_alignments() {
        let sv = Vocab::from_tokens(["a"]);
        let src = vec!["a a a".to_string(), "a".to_string()];
        let tgt = vec!["a".to_string(), "a".to_string()];
        let al = vec!["0-0".to_string(), "0-0".to_string()];
        let opts = LoadOptions {
            max_len: Some(2),
            ..Default::default()
        };
        let d = encode_corpus(&src, &tgt, Some(&al), &sv, &sv, &opts).unwrap();
        assert_eq!(d.pairs.len(), 1);
        assert_eq!(d.pairs[0].index, 1);
        assert_eq!(d.alignments.unwrap().len(), 1);
        assert_eq!(d.skipped_long, 1);
    }

    #[test]
    fn pharaoh_basic() {
        let a = parse_pharaoh("0-0 1-1", 2, 2, PharaohOrder::SourceTarget).unwrap();
        let links: Vec<_> = a.links().iter().copied().collect();
        assert_eq!(links, vec![(1, 1), (2, 2)]);
        assert_eq!((a.target_len(), a.source_len()), (3, 3));
    }

    #[test]
    fn pharaoh_order_flag() {
        let a = parse_pharaoh("0-1", 3, 2, PharaohOrder::SourceTarget).unwrap();
        let b = parse_pharaoh("1-0", 3, 2, PharaohOrder::TargetSource).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(2, 1));
    }

    #[test]
    fn pharaoh_empty_and_duplicates() {
        assert!(parse_pharaoh("", 2, 2, PharaohOrder::SourceTarget)
            .unwrap()
            .links()
            .is_empty());
        let a = parse_pharaoh("0-0 0-0", 2, 2, PharaohOrder::SourceTarget).unwrap();
        assert_eq!(a.links().len(), 1);
    }

    #[test]
    fn pharaoh_errors() {
        assert!(matches!(
            parse_pharaoh("0-2", 2, 2, PharaohOrder::SourceTarget),
            Err(PharaohError::OutOfRange { .. })
        ));
        for bad in ["0:1", "a-1", "0-", "-1", "0-1-2"] {
            assert!(
                matches!(
                    parse_pharaoh(bad, 4, 4, PharaohOrder::SourceTarget),
                    Err(PharaohError::Malformed(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn alignment_error_carries_line_number() {
        let sv = Vocab::from_tokens(["a"]);
        let s = vec!["a".to_string(); 2];
        let al = vec!["0-0".to_string(), "0-x".to_string()];
        let err = encode_corpus(&s, &s, Some(&al), &sv, &sv, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::AlignmentLine { line: 2, .. }));
    }

    fn pairs(lens: &[usize]) -> Vec<SentencePair> {
        lens.iter()
            .enumerate()
            .map(|(n, &l)| SentencePair {
                src_ids: (0..l - 1).map(|k| k + 3).chain([EOS]).collect(),
                tgt_ids: vec![3, EOS],
                index: n,
            })
            .collect()
    }

    #[test]
    fn batches_sizes_and_determinism() {
        let ps = pairs(&[2, 3, 4, 5, 6]);
        let b = make_batches(&ps, None, 2, false, 9);
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let again = make_batches(&ps, None, 2, false, 9);
        let order = |bs: &[Batch]| {
            bs.iter()
                .flat_map(|b| b.pairs.iter().map(|p| p.index))
                .collect::<Vec<_>>()
        };
        assert_eq!(order(&b), order(&again));
        let bucketed = make_batches(&ps, None, 2, true, 9);
        assert_eq!(bucketed.iter().map(Batch::len).sum::<usize>(), 5);
    }

    #[test]
    fn padding_mask() {
        let b = Batch::new(pairs(&[3, 5]), None);
        assert_eq!(b.src_mask[0], vec![true, true, true, false, false]);
        assert_eq!(b.src_ids[0][3..], [PAD, PAD]);
    }

    proptest! {
        #[test]
        fn pharaoh_format_round_trip(
            (l, m, raw) in (1usize..9, 1usize..9).prop_flat_map(|(l, m)| {
                (Just(l), Just(m), proptest::collection::btree_set((1..=m, 1..=l), 0..20))
            }),
            flip in any::<bool>(),
        ) {
            let order = if flip { PharaohOrder::TargetSource } else { PharaohOrder::SourceTarget };
            let text = format_pharaoh(&raw, order);
            let parsed = parse_pharaoh(&text, l, m, order).unwrap();
            prop_assert_eq!(parsed.links(), &raw);
        }

        #[test]
        fn masks_count_real_tokens(
            lens in proptest::collection::vec(1usize..12, 1..30),
            bs in 1usize..8,
            bucket in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let ps = pairs(&lens);
            let batches = make_batches(&ps, None, bs, bucket, seed);
            let mut total = 0;
            for b in &batches {
                prop_assert!(b.len() <= bs);
                for (p, mask) in b.pairs.iter().zip(&b.src_mask) {
                    prop_assert_eq!(mask.iter().filter(|&&x| x).count(), p.l());
                    prop_assert_eq!(*p.src_ids.last().unwrap(), EOS);
                    prop_assert_eq!(*p.tgt_ids.last().unwrap(), EOS);
                }
                total += b.src_mask.iter().flatten().filter(|&&x| x).count();
            }
            prop_assert_eq!(total, lens.iter().sum::<usize>());
        }
    }
}
