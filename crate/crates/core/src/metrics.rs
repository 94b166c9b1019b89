//! Corpus caption metrics: BLEU@N, ROUGE-L and CIDEr-D.
//!
//! Sentences are compared as token lists. [`normalize`] lowercases, strips
//! ASCII punctuation and splits on whitespace; callers holding raw strings
//! should run it first.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// F-measure weight of recall in ROUGE-L.
pub const ROUGE_BETA: f64 = 1.2;
/// Width of the CIDEr-D gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;
/// Largest n-gram order used by CIDEr-D.
pub const CIDER_MAX_N: usize = 4;

pub type Sentence = Vec<String>;

pub fn normalize(text: &str) -> Sentence {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub candidate: Sentence,
    pub references: Vec<Sentence>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        if let Some(i) = items.iter().position(|it| it.references.is_empty()) {
            return Err(Error::Invalid(format!("corpus item {i} has no references")));
        }
        Ok(EvalCorpus { items })
    }

    /// Builds a corpus from raw strings, normalizing every sentence.
    pub fn from_text(pairs: &[(&str, Vec<&str>)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(c, refs)| EvalItem { candidate: normalize(c), references: refs.iter().map(|r| normalize(r)).collect() })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Invalid("empty evaluation corpus".into()));
        }
        if self.items.iter().any(|it| it.references.is_empty()) {
            return Err(Error::Invalid("every corpus item needs at least one reference".into()));
        }
        Ok(())
    }
}

/// Ordered maps keep every floating-point accumulation in a fixed order.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped n-gram precisions for orders 1..=n and a brevity
/// penalty against the closest reference length (shorter wins ties).
/// Unsmoothed: a zero precision at any order gives 0.
pub fn bleu(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    corpus.check()?;
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must lie in 1..=4, got {n}")));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for item in &corpus.items {
        let c = &item.candidate;
        cand_len += c.len();
        ref_len += item
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap();
        for order in 1..=n {
            let counts = ngram_counts(c, order);
            let ref_counts: Vec<_> = item.references.iter().map(|r| ngram_counts(r, order)).collect();
            for (gram, &count) in &counts {
                let max_ref = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matches[order - 1] += count.min(max_ref);
            }
            totals[order - 1] += c.len().saturating_sub(order - 1);
        }
    }
    if cand_len == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 =
        matches.iter().zip(&totals).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let brevity = (1.0 - ref_len as f64 / cand_len as f64).min(0.0);
    Ok((log_precision + brevity).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L of one candidate: LCS precision and recall are each maximised
/// over the references, then combined with recall weight [`ROUGE_BETA`].
pub fn rouge_l_sentence(candidate: &[String], references: &[Sentence]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in references {
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, r) as f64;
        p_max = p_max.max(lcs / candidate.len() as f64);
        r_max = r_max.max(lcs / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Mean per-item ROUGE-L.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    corpus.check()?;
    let total: f64 = corpus.items.iter().map(|it| rouge_l_sentence(&it.candidate, &it.references)).sum();
    Ok(total / corpus.len() as f64)
}

type NgramVec = Vec<BTreeMap<Vec<String>, f64>>;

/// CIDEr-D scorer with document frequencies taken from a set of reference
/// groups (one group per image).
#[derive(Clone, Debug)]
pub struct CiderD {
    doc_freq: BTreeMap<Vec<String>, f64>,
    log_docs: f64,
}

impl CiderD {
    pub fn new<'a>(reference_sets: impl IntoIterator<Item = &'a [Sentence]>) -> Self {
        let mut doc_freq: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        let mut docs = 0usize;
        for refs in reference_sets {
            docs += 1;
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for r in refs {
                for n in 1..=CIDER_MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for gram in seen {
                *doc_freq.entry(gram.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        CiderD { doc_freq, log_docs: (docs.max(1) as f64).ln() }
    }

    fn tfidf(&self, tokens: &[String]) -> (NgramVec, Vec<f64>) {
        let mut vec: NgramVec = vec![BTreeMap::new(); CIDER_MAX_N];
        let mut norms = vec![0.0; CIDER_MAX_N];
        for n in 1..=CIDER_MAX_N {
            for (gram, count) in ngram_counts(tokens, n) {
                let df = self.doc_freq.get(gram).copied().unwrap_or(0.0).max(1.0).ln();
                let w = count as f64 * (self.log_docs - df);
                norms[n - 1] += w * w;
                vec[n - 1].insert(gram.to_vec(), w);
            }
        }
        (vec, norms.into_iter().map(f64::sqrt).collect())
    }

    /// Sentence-level CIDEr-D in [0, 10].
    pub fn score(&self, candidate: &[String], references: &[Sentence]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let (cv, cn) = self.tfidf(candidate);
        let mut total = [0.0f64; CIDER_MAX_N];
        for r in references {
            let (rv, rn) = self.tfidf(r);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_MAX_N {
                let mut val: f64 = cv[n]
                    .iter()
                    .map(|(gram, &h)| {
                        let r = rv[n].get(gram).copied().unwrap_or(0.0);
                        h.min(r) * r
                    })
                    .sum();
                if cn[n] != 0.0 && rn[n] != 0.0 {
                    val /= cn[n] * rn[n];
                }
                total[n] += val * penalty;
            }
        }
        let mean = total.iter().sum::<f64>() / CIDER_MAX_N as f64;
        10.0 * mean / references.len() as f64
    }
}

/// Corpus CIDEr-D: idf from the corpus references, mean over items.
pub fn cider_d(corpus: &EvalCorpus) -> Result<f64> {
    corpus.check()?;
    let scorer = CiderD::new(corpus.items.iter().map(|it| it.references.as_slice()));
    let total: f64 = corpus.items.iter().map(|it| scorer.score(&it.candidate, &it.references)).sum();
    Ok(total / corpus.len() as f64)
}

/// The six reported metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "B@1")]
    pub bleu1: f64,
    #[serde(rename = "B@2")]
    pub bleu2: f64,
    #[serde(rename = "B@3")]
    pub bleu3: f64,
    #[serde(rename = "B@4")]
    pub bleu4: f64,
    #[serde(rename = "ROUGE-L")]
    pub rouge_l: f64,
    #[serde(rename = "CIDEr-D")]
    pub cider_d: f64,
}

impl MetricReport {
    pub const KEYS: [&'static str; 6] = ["B@1", "B@2", "B@3", "B@4", "ROUGE-L", "CIDEr-D"];

    pub fn compute(corpus: &EvalCorpus) -> Result<Self> {
        Ok(MetricReport {
            bleu1: bleu(corpus, 1)?,
            bleu2: bleu(corpus, 2)?,
            bleu3: bleu(corpus, 3)?,
            bleu4: bleu(corpus, 4)?,
            rouge_l: rouge_l(corpus)?,
            cider_d: cider_d(corpus)?,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider_d]
    }
}
