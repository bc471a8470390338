//! Bilingual lexicon induction scoring: nearest-neighbour retrieval on
//! mapped means and precision@k against a reference dictionary.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{OrthogonalMap, PointCloud};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub source: String,
    /// Distinct translations in first-seen order.
    pub targets: Vec<String>,
}

/// Reference translations grouped by source word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

impl Lexicon {
    /// Groups `(source, target)` pairs by source word, keeping first-seen
    /// order and dropping repeated pairs.
    pub fn from_pairs<S, T>(pairs: impl IntoIterator<Item = (S, T)>) -> Result<Self>
    where
        S: Into<String>,
        T: Into<String>,
    {
        let mut entries: Vec<LexiconEntry> = Vec::new();
        let mut slot: HashMap<String, usize> = HashMap::new();
        for (s, t) in pairs {
            let (s, t) = (s.into(), t.into());
            if s.is_empty() || t.is_empty() {
                return Err(Error::InvalidInput("lexicon words must be non-empty".into()));
            }
            let idx = *slot.entry(s.clone()).or_insert_with(|| {
                entries.push(LexiconEntry {
                    source: s,
                    targets: Vec::new(),
                });
                entries.len() - 1
            });
            let targets = &mut entries[idx].targets;
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All `(source, target)` pairs in entry order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .flat_map(|e| e.targets.iter().map(move |t| (e.source.as_str(), t.as_str())))
    }
}

/// Word-to-row lookup for a frequency-ordered vocabulary.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            index.entry(w.as_ref().to_owned()).or_insert(i);
        }
        Self { index }
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Lexicon entries expressed as row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLexicon {
    pub queries: Vec<usize>,
    /// Gold target rows for each query, sorted.
    pub gold: Vec<Vec<usize>>,
    pub skipped_oov: usize,
}

impl ResolvedLexicon {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Drops entries whose source word, or every target word, is missing from
/// the vocabularies. Out-of-vocabulary targets of kept entries are ignored.
pub fn resolve(lexicon: &Lexicon, source_vocab: &Vocabulary, target_vocab: &Vocabulary) -> ResolvedLexicon {
    let mut out = ResolvedLexicon {
        queries: Vec::new(),
        gold: Vec::new(),
        skipped_oov: 0,
    };
    for entry in lexicon.entries() {
        let mut gold: Vec<usize> = entry.targets.iter().filter_map(|t| target_vocab.get(t)).collect();
        match source_vocab.get(&entry.source) {
            Some(q) if !gold.is_empty() => {
                gold.sort_unstable();
                gold.dedup();
                out.queries.push(q);
                out.gold.push(gold);
            }
            _ => out.skipped_oov += 1,
        }
    }
    out
}

/// For each query row of `source`, the `k` target rows closest to `x R` in
/// Euclidean distance, nearest first; equal distances rank the lower index
/// first.
pub fn translate(
    map: &OrthogonalMap,
    source: &PointCloud,
    target: &PointCloud,
    queries: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let d = map.dim();
    if source.dim() != d || target.dim() != d {
        return Err(Error::InvalidInput(format!(
            "map is {d}x{d} but source has dimension {} and target {}",
            source.dim(),
            target.dim()
        )));
    }
    let m = target.nrows();
    if k == 0 || k > m {
        return Err(Error::Config(format!("k must be in 1..={m}, got {k}")));
    }
    if let Some(&bad) = queries.iter().find(|&&q| q >= source.nrows()) {
        return Err(Error::InvalidInput(format!(
            "query row {bad} out of range for {} source rows",
            source.nrows()
        )));
    }
    let mapped = source.select_rows(queries)?.transform(map)?;
    let xm = mapped.as_matrix();
    // Row-major copy of the targets keeps the inner distance loop contiguous.
    let ym = target.as_matrix().transpose();
    Ok((0..queries.len())
        .into_par_iter()
        .map(|q| {
            let x: Vec<f64> = xm.row(q).iter().copied().collect();
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, y) in ym.column_iter().enumerate() {
                let dist: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.len() == k && dist >= best[k - 1].0 {
                    continue;
                }
                // Strict comparison keeps earlier indices ahead on ties.
                let at = best.partition_point(|&(bd, _)| bd <= dist);
                best.insert(at, (dist, j));
                best.truncate(k);
            }
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Fraction of queries with a gold target among their first `k` predictions.
pub fn precision_at_k(predictions: &[Vec<usize>], resolved: &ResolvedLexicon, k: usize) -> Result<f64> {
    if resolved.is_empty() {
        return Err(Error::Evaluation(format!(
            "no lexicon entry is resolvable in the vocabularies ({} skipped as out-of-vocabulary)",
            resolved.skipped_oov
        )));
    }
    if predictions.len() != resolved.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction lists for {} lexicon queries",
            predictions.len(),
            resolved.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(&resolved.gold)
        .filter(|(pred, gold)| pred.iter().take(k).any(|p| gold.binary_search(p).is_ok()))
        .count();
    Ok(hits as f64 / resolved.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub precision_at_1: f64,
    pub precision_at_5: f64,
    pub evaluated: usize,
    pub skipped_oov: usize,
}

impl RetrievalReport {
    /// Single-line `key=value` record.
    pub fn to_record(&self) -> String {
        format!(
            "p_at_1={} p_at_5={} evaluated={} skipped_oov={}",
            self.precision_at_1, self.precision_at_5, self.evaluated, self.skipped_oov
        )
    }
}

/// Scores ranked predictions (one list per resolved query) at ranks 1 and 5.
pub fn report(predictions: &[Vec<usize>], resolved: &ResolvedLexicon) -> Result<RetrievalReport> {
    Ok(RetrievalReport {
        precision_at_1: precision_at_k(predictions, resolved, 1)?,
        precision_at_5: precision_at_k(predictions, resolved, 5)?,
        evaluated: resolved.len(),
        skipped_oov: resolved.skipped_oov,
    })
}

/// Resolves the lexicon, retrieves the five nearest targets (fewer if the
/// target vocabulary is smaller) for every query and scores them.
pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(
    map: &OrthogonalMap,
    source: &PointCloud,
    source_words: &[S],
    target: &PointCloud,
    target_words: &[T],
    lexicon: &Lexicon,
) -> Result<RetrievalReport> {
    let resolved = resolve(lexicon, &Vocabulary::new(source_words), &Vocabulary::new(target_words));
    if resolved.is_empty() {
        return Err(Error::Evaluation(format!(
            "none of the {} lexicon entries is resolvable in the vocabularies",
            lexicon.len()
        )));
    }
    let k = 5.min(target.nrows());
    let predictions = translate(map, source, target, &resolved.queries, k)?;
    report(&predictions, &resolved)
}
