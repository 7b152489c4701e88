//! Greedy decoding, attention dumps, alignment extraction and scoring.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{word_links, SentencePair, EOS};
use crate::model::{
    decode_step_on_tape, encode_on_tape, forward_teacher_forced, initial_state, target_embedding,
    ModelError, ModelParams, ParamVars,
};
use crate::supervision::{write_matrix_text, HardAlignment};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_LINK_THRESHOLD: f64 = 0.2;

/// Runs `f` over `0..n` on up to `workers` threads; results keep index order.
pub fn map_sentences<T, E, F>(n: usize, workers: usize, f: F) -> std::result::Result<Vec<T>, E>
where
    T: Send,
    E: Send + From<rayon::ThreadPoolBuildError>,
    F: Fn(usize) -> std::result::Result<T, E> + Sync + Send,
{
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("cannot start worker threads: {0}")]
    Workers(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids; ends in eos unless truncated at the length limit.
    pub ids: Vec<usize>,
    /// One attention row over the source per emitted token.
    pub attention: Vec<Vec<f64>>,
    /// Sum of the chosen log-probabilities.
    pub score: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

pub fn greedy_decode(
    src_ids: &[usize],
    params: &ModelParams,
    max_len: usize,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(EvalError::ZeroMaxLen);
    }
    let mut tape = Tape::new();
    let p = ParamVars::load(&mut tape, params, None);
    let enc = encode_on_tape(&mut tape, &p, src_ids, None)?;
    let mut s = initial_state(&mut tape, &p, &enc)?;
    let mut prev = None;
    let mut hyp = Hypothesis {
        ids: Vec::new(),
        attention: Vec::new(),
        score: 0.0,
    };
    while hyp.ids.len() < max_len {
        let y = target_embedding(&mut tape, &p, prev)?;
        let step = decode_step_on_tape(&mut tape, &p, &enc, s, y)?;
        let lp = tape.value(step.log_probs).data();
        let best = argmax(lp);
        hyp.score += lp[best];
        hyp.ids.push(best);
        hyp.attention
            .push(tape.value(step.attention.alpha).data().to_vec());
        if best == EOS {
            break;
        }
        s = step.state;
        prev = Some(best);
    }
    Ok(hyp)
}

/// The teacher-forced `m × l` attention matrix.
pub fn dump_attention(pair: &SentencePair, params: &ModelParams) -> Result<Tensor> {
    Ok(forward_teacher_forced(pair, params)?.attention)
}

/// [`dump_attention`] in the supervision text format.
pub fn dump_attention_text(pair: &SentencePair, params: &ModelParams) -> Result<String> {
    Ok(write_matrix_text(&dump_attention(pair, params)?))
}

/// 1-indexed `(t, i)` word links, eos row and column excluded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pub links: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    pub fn new(links: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            links: links.into_iter().collect(),
        }
    }

    pub fn from_hard(a: &HardAlignment) -> Self {
        Self {
            links: word_links(a),
        }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

/// For every target row except the last, links the most probable source
/// position (lowest index on ties) when its probability exceeds
/// `threshold`; links to the eos column are dropped.
pub fn extract_alignment(attn: &Tensor, threshold: f64) -> AlignmentSet {
    let (m, l) = (attn.rows(), attn.cols());
    let mut out = AlignmentSet::default();
    for t in 0..m.saturating_sub(1) {
        let row = attn.row(t);
        let k = argmax(row);
        if row[k] > threshold && k + 1 != l {
            out.links.insert((t + 1, k + 1));
        }
    }
    out
}

/// Pooled link counts, for micro-averaged scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounts {
    pub hyp: usize,
    pub gold: usize,
    pub matched: usize,
}

impl LinkCounts {
    pub fn of(hyp: &AlignmentSet, gold: &AlignmentSet) -> Self {
        Self {
            hyp: hyp.len(),
            gold: gold.len(),
            matched: hyp.links.intersection(&gold.links).count(),
        }
    }

    pub fn add(&mut self, other: LinkCounts) {
        self.hyp += other.hyp;
        self.gold += other.gold;
        self.matched += other.matched;
    }

    pub fn score(&self) -> AlignmentScore {
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if other == 0 {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(self.matched, self.hyp, self.gold);
        let recall = ratio(self.matched, self.gold, self.hyp);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        AlignmentScore {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl fmt::Display for AlignmentScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision={:.6} recall={:.6} f1={:.6}",
            self.precision, self.recall, self.f1
        )
    }
}

pub fn alignment_f1(hyp: &AlignmentSet, gold: &AlignmentSet) -> AlignmentScore {
    LinkCounts::of(hyp, gold).score()
}

/// Micro-averaged score over line-aligned sets.
pub fn corpus_alignment_f1(
    hyps: &[AlignmentSet],
    golds: &[AlignmentSet],
) -> Result<AlignmentScore> {
    if hyps.len() != golds.len() {
        return Err(EvalError::CountMismatch {
            hyps: hyps.len(),
            refs: golds.len(),
        });
    }
    let mut c = LinkCounts::default();
    for (h, g) in hyps.iter().zip(golds) {
        c.add(LinkCounts::of(h, g));
    }
    Ok(c.score())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub bleu: f64,
    pub brevity_penalty: f64,
    /// Clipped precision for n = 1..=max_n.
    pub precisions: Vec<f64>,
    /// Clipped matches and candidate n-gram totals per order.
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bleu={:.6} bp={:.6}", self.bleu, self.brevity_penalty)
    }
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *out.entry(key).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with one reference per hypothesis.
///
/// An empty hypothesis side gets a brevity penalty of 0.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(EvalError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let bp = if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp().min(1.0)
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuScore {
        bleu,
        brevity_penalty: bp,
        precisions,
        matches: matched,
        totals: total,
        hyp_len: c,
        ref_len: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::supervision::read_matrices;
    use proptest::prelude::*;

    fn params() -> ModelParams {
        ModelParams::init(
            ModelDims {
                src_vocab: 9,
                tgt_vocab: 9,
                embed: 4,
                hidden: 4,
                attn_hidden: 4,
                out_hidden: 4,
            },
            3,
        )
        .unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        let cols = rows[0].len();
        Tensor::matrix(rows.len(), cols, rows.concat()).unwrap()
    }

    #[test]
    fn greedy_limits_and_determinism() {
        let p = params();
        let one = greedy_decode(&[3, 4, EOS], &p, 1).unwrap();
        assert_eq!(one.ids.len(), 1);
        let a = greedy_decode(&[3, 4, EOS], &p, 6).unwrap();
        let b = greedy_decode(&[3, 4, EOS], &p, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.len() <= 6);
        for row in &a.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(greedy_decode(&[3, EOS], &p, 0).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let p = params();
        let srcs: Vec<Vec<usize>> = (3..9).map(|k| vec![k, k, EOS]).collect();
        let run = |w| map_sentences(srcs.len(), w, |k| greedy_decode(&srcs[k], &p, 5)).unwrap();
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn attention_dump_round_trips() {
        let p = params();
        let pair = SentencePair {
            src_ids: vec![3, 5, 6, EOS],
            tgt_ids: vec![4, 4, EOS],
            index: 0,
        };
        let a = dump_attention(&pair, &p).unwrap();
        assert_eq!(a, forward_teacher_forced(&pair, &p).unwrap().attention);
        for t in 0..a.rows() {
            assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let text = dump_attention_text(&pair, &p).unwrap();
        let back = read_matrices(text.as_bytes()).unwrap();
        assert_eq!(back, vec![a]);
    }

    #[test]
    fn extraction_rules() {
        // Last row is the eos row and never scored.
        let a = m(&[&[0.5, 0.3, 0.2], &[0.3, 0.3, 0.4], &[0.0, 0.0, 1.0]]);
        let s = extract_alignment(&a, 0.2);
        assert_eq!(s, AlignmentSet::new([(1, 1)]));

        let u = 1.0 / 6.0;
        let flat = m(&[&[u; 6], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]]);
        assert!(extract_alignment(&flat, 0.2).is_empty());

        let tie = m(&[&[0.4, 0.4, 0.2], &[0.0, 0.0, 1.0]]);
        assert_eq!(extract_alignment(&tie, 0.2), AlignmentSet::new([(1, 1)]));
    }

    #[test]
    fn f1_cases() {
        let g = AlignmentSet::new([(1, 1), (2, 2)]);
        let s = alignment_f1(&g, &g);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let h = AlignmentSet::new([(1, 1), (2, 2)]);
        let g = AlignmentSet::new([(1, 1), (2, 1)]);
        let s = alignment_f1(&h, &g);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(
            s.to_string(),
            "precision=0.500000 recall=0.500000 f1=0.500000"
        );

        let empty = AlignmentSet::default();
        assert_eq!(alignment_f1(&empty, &empty).f1, 1.0);
        let s = alignment_f1(&empty, &g);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(alignment_f1(&g, &empty).f1, 0.0);
    }

    #[test]
    fn micro_average_matches_pooled_oracle() {
        let hyps = vec![
            AlignmentSet::new([(1, 1), (2, 3)]),
            AlignmentSet::new([(1, 2)]),
            AlignmentSet::default(),
        ];
        let golds = vec![
            AlignmentSet::new([(1, 1), (2, 2)]),
            AlignmentSet::new([(1, 2), (2, 1), (3, 3)]),
            AlignmentSet::new([(1, 1)]),
        ];
        // Pool by tagging links with their sentence index.
        let tag = |sets: &[AlignmentSet]| -> BTreeSet<(usize, usize, usize)> {
            sets.iter()
                .enumerate()
                .flat_map(|(k, s)| s.links.iter().map(move |&(t, i)| (k, t, i)))
                .collect()
        };
        let (ph, pg) = (tag(&hyps), tag(&golds));
        let inter = ph.intersection(&pg).count() as f64;
        let p = inter / ph.len() as f64;
        let r = inter / pg.len() as f64;
        let s = corpus_alignment_f1(&hyps, &golds).unwrap();
        assert!((s.precision - p).abs() < 1e-15);
        assert!((s.recall - r).abs() < 1e-15);
        assert!((s.f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!(corpus_alignment_f1(&hyps[..1], &golds).is_err());
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_brevity() {
        let refs = vec![toks("a b c d e f"), toks("g h i j k")];
        let s = bleu(&refs, &refs, 4).unwrap();
        assert_eq!((s.bleu, s.brevity_penalty), (1.0, 1.0));
        assert_eq!(s.to_string(), "bleu=1.000000 bp=1.000000");
        let half: Vec<Vec<String>> = refs.iter().map(|r| r[..r.len() / 2].to_vec()).collect();
        let s = bleu(&half, &refs, 4).unwrap();
        assert!(s.brevity_penalty < 1.0);
        assert!(bleu::<String>(&[], &[], 4).is_err());
        assert!(bleu(&refs[..1], &refs, 4).is_err());
        let empty = vec![Vec::<String>::new()];
        let s = bleu(&empty, &refs[..1], 4).unwrap();
        assert_eq!((s.bleu, s.brevity_penalty), (0.0, 0.0));
    }

    #[test]
    fn bleu_matches_independent_count() {
        // Hand counts for this corpus:
        // hyp1 "the cat sat on the mat" vs ref1 "the cat is on the mat"
        // hyp2 "a dog runs" vs ref2 "a dog runs fast"
        // 1-grams: 5/6 + 3/3 = 8/9; 2-grams: 3/5 + 2/2 = 5/7;
        // 3-grams: 1/4 + 1/1 = 2/5; 4-grams: 0/3 + 0/0 = 0 -> use max_n = 3.
        let hyps = vec![toks("the cat sat on the mat"), toks("a dog runs")];
        let refs = vec![toks("the cat is on the mat"), toks("a dog runs fast")];
        let s = bleu(&hyps, &refs, 3).unwrap();
        let want_p = [8.0 / 9.0, 5.0 / 7.0, 2.0 / 5.0];
        for (a, b) in s.precisions.iter().zip(want_p) {
            assert!((a - b).abs() < 1e-12);
        }
        let bp = (1.0f64 - 10.0 / 9.0).exp();
        let g = (want_p.iter().map(|p: &f64| p.ln()).sum::<f64>() / 3.0).exp();
        assert!((s.bleu - bp * g).abs() < 1e-6);
        assert_eq!(bleu(&hyps, &refs, 4).unwrap().bleu, 0.0);
    }

    fn row_stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |v| {
            let mut out = Vec::with_capacity(v.len());
            for r in v.chunks(cols) {
                let s: f64 = r.iter().sum();
                out.extend(r.iter().map(|x| x / s));
            }
            Tensor::matrix(rows, cols, out).unwrap()
        })
    }

    proptest! {
        #[test]
        fn at_most_one_link_per_target_word(a in row_stochastic(5, 4)) {
            let s = extract_alignment(&a, 0.2);
            prop_assert!(s.len() <= 4);
            let mut rows: Vec<usize> = s.links.iter().map(|&(t, _)| t).collect();
            rows.dedup();
            prop_assert_eq!(rows.len(), s.len());
        }

        #[test]
        fn sharpening_never_removes_links(a in row_stochastic(4, 5), power in 1.0f64..4.0) {
            let mut sharp = a.clone();
            for t in 0..a.rows() {
                let p: Vec<f64> = a.row(t).iter().map(|x| x.powf(power)).collect();
                let s: f64 = p.iter().sum();
                for (i, v) in p.iter().enumerate() {
                    sharp.set(t, i, v / s);
                }
            }
            let before = extract_alignment(&a, 0.2);
            let after = extract_alignment(&sharp, 0.2);
            prop_assert!(before.links.is_subset(&after.links));
        }

        #[test]
        fn f1_is_symmetric(
            h in prop::collection::btree_set((1usize..5, 1usize..5), 0..8),
            g in prop::collection::btree_set((1usize..5, 1usize..5), 0..8),
        ) {
            let (h, g) = (AlignmentSet { links: h }, AlignmentSet { links: g });
            prop_assert_eq!(alignment_f1(&h, &g).f1, alignment_f1(&g, &h).f1);
        }

        #[test]
        fn bleu_bounded_and_monotone_counts(
            words in prop::collection::vec(prop::collection::vec(0u8..5, 1..8), 1..5),
            extra in prop::collection::vec(0u8..5, 1..8),
        ) {
            let refs: Vec<Vec<String>> = words
                .iter()
                .map(|w| w.iter().map(|x| x.to_string()).collect())
                .collect();
            let hyps: Vec<Vec<String>> = refs.iter().map(|r| r.iter().rev().cloned().collect()).collect();
            let s = bleu(&hyps, &refs, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.bleu));
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            let e: Vec<String> = extra.iter().map(|x| x.to_string()).collect();
            h2.push(e.clone());
            r2.push(e);
            let s2 = bleu(&h2, &r2, 4).unwrap();
            for (a, b) in s.matches.iter().zip(&s2.matches) {
                prop_assert!(b >= a);
            }
        }
    }
}
