//! Caption evaluation: corpus BLEU-4, ROUGE-L, CIDEr (optionally CIDEr-D) and METEOR with exact
//! and Porter-stem matching.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::read_jsonl;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_D_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;
/// Search budget for the METEOR alignment; the best alignment found so far is kept past it.
const METEOR_NODE_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub references: Vec<String>,
    pub hypothesis: String,
}

/// Lowercases, turns every non-alphanumeric character into a space and splits on whitespace.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(tokens)
}

/// A record split into tokens.
#[derive(Debug, Clone)]
struct Tokenized {
    hyp: Vec<String>,
    refs: Vec<Vec<String>>,
}

fn tokenize_corpus(corpus: &[CaptionRecord]) -> Result<Vec<Tokenized>> {
    if corpus.is_empty() {
        return Err(Error::Empty("caption corpus"));
    }
    corpus
        .iter()
        .map(|r| {
            if r.references.is_empty() {
                return Err(Error::InvalidArgument(format!("record {:?} has no references", r.id)));
            }
            Ok(Tokenized {
                hyp: tokenize(&r.hypothesis)?,
                refs: r.references.iter().map(|s| tokenize(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut out = BTreeMap::new();
    for g in tokens.windows(n) {
        *out.entry(g).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MetricsConfig {
    /// Numerator used in place of a zero BLEU n-gram match count.
    pub bleu_epsilon: Option<f64>,
    pub cider_d: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    matches: [usize; MAX_N],
    totals: [usize; MAX_N],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_N {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    fn score(&self, epsilon: Option<f64>) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..MAX_N {
            if self.totals[n] == 0 {
                return 0.0;
            }
            let m = match (self.matches[n], epsilon) {
                (0, None) => return 0.0,
                (0, Some(e)) => e,
                (m, _) => m as f64,
            };
            log_sum += (m / self.totals[n] as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / MAX_N as f64).exp()
    }
}

fn bleu_stats(rec: &Tokenized) -> BleuStats {
    let mut s = BleuStats { hyp_len: rec.hyp.len(), ..Default::default() };
    // closest reference length, shorter one on ties
    s.ref_len = rec
        .refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(rec.hyp.len()), l))
        .expect("non-empty references");
    for n in 1..=MAX_N {
        let hyp = ngram_counts(&rec.hyp, n);
        let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
        for r in &rec.refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.totals[n - 1] = rec.hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = hyp.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    s
}

fn corpus_bleu(toks: &[Tokenized], epsilon: Option<f64>) -> f64 {
    let mut total = BleuStats::default();
    for t in toks {
        total.add(&bleu_stats(t));
    }
    total.score(epsilon)
}

/// Corpus-level BLEU-4 on the 0-100 scale.
pub fn bleu4(corpus: &[CaptionRecord]) -> Result<f64> {
    Ok(corpus_bleu(&tokenize_corpus(corpus)?, None))
}

pub fn bleu4_smoothed(corpus: &[CaptionRecord], epsilon: f64) -> Result<f64> {
    Ok(corpus_bleu(&tokenize_corpus(corpus)?, Some(epsilon)))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn rouge_record(t: &Tokenized) -> f64 {
    t.refs.iter().map(|r| rouge_pair(&t.hyp, r)).fold(0.0, f64::max)
}

/// Mean per-record ROUGE-L F (max over references), 0-100.
pub fn rouge_l(corpus: &[CaptionRecord]) -> Result<f64> {
    let toks = tokenize_corpus(corpus)?;
    Ok(100.0 * mean(toks.iter().map(rouge_record)))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-n tf-idf vectors of one sentence, their norms and its length in bigrams.
struct CiderVec<'a> {
    vecs: Vec<BTreeMap<Ngram<'a>, f64>>,
    norms: Vec<f64>,
    length: f64,
}

struct CiderIdf<'a> {
    df: Vec<BTreeMap<Ngram<'a>, usize>>,
    log_n: f64,
}

impl<'a> CiderIdf<'a> {
    fn new(toks: &'a [Tokenized]) -> Self {
        let mut df = vec![BTreeMap::new(); MAX_N];
        for t in toks {
            for n in 1..=MAX_N {
                let seen: BTreeSet<Ngram<'a>> = t.refs.iter().flat_map(|r| r.windows(n)).collect();
                for g in seen {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Self { df, log_n: (toks.len() as f64).ln() }
    }

    fn vector(&self, tokens: &'a [String]) -> CiderVec<'a> {
        let mut vecs = Vec::with_capacity(MAX_N);
        let mut norms = Vec::with_capacity(MAX_N);
        for n in 1..=MAX_N {
            let mut v = BTreeMap::new();
            let mut norm = 0.0;
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (self.log_n - df.ln());
                norm += w * w;
                v.insert(g, w);
            }
            vecs.push(v);
            norms.push(norm.sqrt());
        }
        CiderVec { vecs, norms, length: tokens.len().saturating_sub(1) as f64 }
    }
}

fn cider_sim(h: &CiderVec<'_>, r: &CiderVec<'_>, cider_d: bool) -> f64 {
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for (g, &wh) in &h.vecs[n] {
            if let Some(&wr) = r.vecs[n].get(g) {
                val += if cider_d { wh.min(wr) * wr } else { wh * wr };
            }
        }
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        } else {
            val = 0.0;
        }
        if cider_d {
            let delta = h.length - r.length;
            val *= (-(delta * delta) / (2.0 * CIDER_D_SIGMA * CIDER_D_SIGMA)).exp();
        }
        total += val;
    }
    total / MAX_N as f64
}

fn cider_records(toks: &[Tokenized], cider_d: bool) -> Vec<f64> {
    let idf = CiderIdf::new(toks);
    toks.iter()
        .map(|t| {
            let h = idf.vector(&t.hyp);
            10.0 * mean(t.refs.iter().map(|r| cider_sim(&h, &idf.vector(r), cider_d)))
        })
        .collect()
}

/// Corpus CIDEr on its native scale (10 for a perfect match with informative n-grams).
pub fn cider(corpus: &[CaptionRecord]) -> Result<f64> {
    Ok(mean(cider_records(&tokenize_corpus(corpus)?, false).into_iter()))
}

pub fn cider_d(corpus: &[CaptionRecord]) -> Result<f64> {
    Ok(mean(cider_records(&tokenize_corpus(corpus)?, true).into_iter()))
}

/// Matches and chunks of the chosen METEOR alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub exact: usize,
    pub matches: usize,
    pub chunks: usize,
}

struct AlignSearch<'a> {
    cands: &'a [Vec<(usize, bool)>],
    /// Suffix counts of hypothesis words with an exact / any candidate.
    exact_left: Vec<usize>,
    any_left: Vec<usize>,
    used: Vec<bool>,
    best: Option<Alignment>,
    nodes: usize,
}

impl AlignSearch<'_> {
    fn better(a: Alignment, b: Option<Alignment>) -> bool {
        match b {
            None => true,
            Some(b) => (a.exact, a.matches, std::cmp::Reverse(a.chunks)) > (b.exact, b.matches, std::cmp::Reverse(b.chunks)),
        }
    }

    fn dfs(&mut self, i: usize, cur: Alignment, prev: Option<(usize, usize)>) {
        self.nodes += 1;
        if i == self.cands.len() {
            if Self::better(cur, self.best) {
                self.best = Some(cur);
            }
            return;
        }
        if let Some(b) = self.best {
            let ub = (cur.exact + self.exact_left[i], cur.matches + self.any_left[i]);
            if ub < (b.exact, b.matches) || (ub == (b.exact, b.matches) && cur.chunks >= b.chunks) {
                return;
            }
            if self.nodes > METEOR_NODE_LIMIT {
                return;
            }
        }
        let cands = self.cands;
        let mut order: Vec<(usize, bool)> = cands[i].iter().copied().filter(|&(j, _)| !self.used[j]).collect();
        let follows = |j: usize| prev.is_some_and(|(pi, pj)| pi + 1 == i && pj + 1 == j);
        order.sort_by_key(|&(j, exact)| (!exact, !follows(j), j));
        for (j, exact) in order {
            self.used[j] = true;
            let next = Alignment {
                exact: cur.exact + exact as usize,
                matches: cur.matches + 1,
                chunks: cur.chunks + (!follows(j)) as usize,
            };
            self.dfs(i + 1, next, Some((i, j)));
            self.used[j] = false;
        }
        self.dfs(i + 1, cur, prev);
    }
}

fn align(hyp: &[String], reference: &[String]) -> Alignment {
    let hs: Vec<String> = hyp.iter().map(|w| porter_stemmer::stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| porter_stemmer::stem(w)).collect();
    let cands: Vec<Vec<(usize, bool)>> = (0..hyp.len())
        .map(|i| {
            (0..reference.len())
                .filter_map(|j| {
                    if hyp[i] == reference[j] {
                        Some((j, true))
                    } else if hs[i] == rs[j] {
                        Some((j, false))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let mut exact_left = vec![0; hyp.len() + 1];
    let mut any_left = vec![0; hyp.len() + 1];
    for i in (0..hyp.len()).rev() {
        exact_left[i] = exact_left[i + 1] + cands[i].iter().any(|c| c.1) as usize;
        any_left[i] = any_left[i + 1] + !cands[i].is_empty() as usize;
    }
    let mut search = AlignSearch { cands: &cands, exact_left, any_left, used: vec![false; reference.len()], best: None, nodes: 0 };
    search.dfs(0, Alignment { exact: 0, matches: 0, chunks: 0 }, None);
    search.best.expect("the empty alignment is always reached")
}

/// Exact-then-stem unigram alignment between a hypothesis and one reference.
pub fn meteor_alignment(hypothesis: &str, reference: &str) -> Result<Alignment> {
    Ok(align(&tokenize(hypothesis)?, &tokenize(reference)?))
}

/// `Fmean * (1 - penalty)` for given alignment statistics.
pub fn meteor_from_counts(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

fn meteor_record(t: &Tokenized) -> f64 {
    t.refs
        .iter()
        .map(|r| {
            let a = align(&t.hyp, r);
            meteor_from_counts(a.matches, a.chunks, t.hyp.len(), r.len())
        })
        .fold(0.0, f64::max)
}

/// Mean per-record METEOR (max over references), 0-100.
pub fn meteor(corpus: &[CaptionRecord]) -> Result<f64> {
    let toks = tokenize_corpus(corpus)?;
    Ok(100.0 * mean(toks.iter().map(meteor_record)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unsupported {
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub id: String,
    /// Sentence-level BLEU-4 under the same smoothing as the corpus score.
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_records: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Native scale.
    pub cider: f64,
    pub cider_x100: f64,
    pub cider_variant: String,
    pub meteor: f64,
    pub bertscore: Unsupported,
    pub spice: Unsupported,
    pub per_record: Vec<RecordScores>,
}

pub fn evaluate(corpus: &[CaptionRecord], cfg: &MetricsConfig) -> Result<MetricReport> {
    use rayon::prelude::*;
    let toks = tokenize_corpus(corpus)?;
    let ciders = cider_records(&toks, cfg.cider_d);
    let per_record: Vec<RecordScores> = toks
        .par_iter()
        .zip(corpus)
        .zip(&ciders)
        .map(|((t, rec), &c)| RecordScores {
            id: rec.id.clone(),
            bleu4: bleu_stats(t).score(cfg.bleu_epsilon),
            rouge_l: 100.0 * rouge_record(t),
            cider: c,
            meteor: 100.0 * meteor_record(t),
        })
        .collect();
    let cider = mean(ciders.iter().copied());
    Ok(MetricReport {
        n_records: corpus.len(),
        bleu4: corpus_bleu(&toks, cfg.bleu_epsilon),
        rouge_l: mean(per_record.iter().map(|r| r.rouge_l)),
        cider,
        cider_x100: 100.0 * cider,
        cider_variant: if cfg.cider_d { "cider_d" } else { "cider" }.into(),
        meteor: mean(per_record.iter().map(|r| r.meteor)),
        bertscore: Unsupported::Unsupported,
        spice: Unsupported::Unsupported,
        per_record,
    })
}

#[derive(Debug, Deserialize)]
struct Prediction {
    id: String,
    hypothesis: String,
}

#[derive(Debug, Deserialize)]
struct References {
    id: String,
    references: Vec<String>,
}

/// Joins a predictions file (`id`, `hypothesis`) with a references file (`id`, `references`).
/// Records follow the order of the predictions.
pub fn read_corpus(pred: impl AsRef<Path>, refs: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let preds: Vec<Prediction> = read_jsonl(pred)?;
    let refs: Vec<References> = read_jsonl(refs)?;
    let mut by_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in refs {
        if by_id.insert(r.id.clone(), r.references).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate reference id {:?}", r.id)));
        }
    }
    preds
        .into_iter()
        .map(|p| {
            let references = by_id
                .get(&p.id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no references for id {:?}", p.id)))?;
            Ok(CaptionRecord { id: p.id, references, hypothesis: p.hypothesis })
        })
        .collect()
}
