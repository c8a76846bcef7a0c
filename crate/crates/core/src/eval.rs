//! Decoding and translation metrics.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    apply_tags, identify_language, Direction, LanguageSet, SentencePair, TagScheme, Vocabulary, HUB,
};
use crate::model::Transformer;
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// A finished beam hypothesis: generated ids (ending in `<eos>` unless the
/// length limit was hit) and their summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Beam search without length normalization, batched over sentences.
///
/// Each step expands every live hypothesis, ranks candidates by score (ties
/// broken by parent rank, then token id), moves candidates ending in `<eos>`
/// to the finished set and keeps the best `beam` others alive. A sentence
/// stops once its best finished score is at least its best live score, since
/// log-probabilities only decrease. Hypotheses alive at `max_len` count as
/// finished.
pub fn beam_search(
    model: &Transformer,
    sources: &[Vec<usize>],
    starts: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Input("beam and max_len must be at least 1".into()));
    }
    if starts.len() != sources.len() {
        return Err(Error::Input("one start token per source required".into()));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let memory = model.encode_memory(sources)?;
    let mut dec = model.incremental(memory, (0..sources.len()).collect());

    struct Live {
        sentence: usize,
        tokens: Vec<usize>,
        score: f64,
    }
    let mut live: Vec<Live> = (0..sources.len())
        .map(|s| Live {
            sentence: s,
            tokens: Vec::new(),
            score: 0.0,
        })
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); sources.len()];
    let mut next: Vec<usize> = starts.to_vec();

    for step in 0..max_len {
        let log_probs = dec.step(&next)?;
        let mut parents = Vec::new();
        let mut new_live = Vec::new();
        next.clear();
        // Rows are grouped by sentence, in rank order within each sentence.
        let mut start = 0;
        while start < live.len() {
            let sentence = live[start].sentence;
            let end = start
                + live[start..]
                    .iter()
                    .take_while(|l| l.sentence == sentence)
                    .count();
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for row in start..end {
                for (tok, &lp) in log_probs[row].iter().enumerate() {
                    cands.push((live[row].score + lp, row, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut kept = 0;
            for &(score, row, tok) in &cands {
                if kept == beam {
                    break;
                }
                let mut tokens = live[row].tokens.clone();
                tokens.push(tok);
                if tok == Vocabulary::EOS_ID {
                    if finished[sentence].len() < beam {
                        finished[sentence].push(Hypothesis { tokens, score });
                    }
                } else if step + 1 == max_len {
                    finished[sentence].push(Hypothesis { tokens, score });
                    kept += 1;
                } else {
                    parents.push(row);
                    next.push(tok);
                    new_live.push(Live {
                        sentence,
                        tokens,
                        score,
                    });
                    kept += 1;
                }
            }
            // Drop the sentence's live rows once nothing can beat a finished one.
            let best_done = finished[sentence]
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            let first_new = new_live.len()
                - new_live
                    .iter()
                    .rev()
                    .take_while(|l| l.sentence == sentence)
                    .count();
            let best_live = new_live[first_new..]
                .iter()
                .map(|l| l.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                new_live.truncate(first_new);
                parents.truncate(first_new);
                next.truncate(first_new);
            }
            start = end;
        }
        if new_live.is_empty() {
            break;
        }
        dec.reorder(&parents);
        live = new_live;
    }
    Ok(finished
        .into_iter()
        .map(|mut hs| {
            // Stable: the earliest-found hypothesis wins ties.
            hs.sort_by(|a, b| b.score.total_cmp(&a.score));
            hs.into_iter().next().expect("every sentence finishes")
        })
        .collect())
}

pub fn beam_decode(
    model: &Transformer,
    src: &[usize],
    start: usize,
    beam: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(
        beam_search(model, &[src.to_vec()], &[start], beam, max_len)?
            .remove(0)
            .tokens,
    )
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[T], usize> = HashMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU-4 in `[0, 100]` with brevity penalty. With `smooth`, orders two
    /// and up use add-one counts.
    pub fn score(&self, smooth: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let (m, t) = if smooth && n > 0 {
                (self.matches[n] + 1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

fn corpus_stats<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::sentence(h, r))
        .collect())
}

/// Corpus-level BLEU-4: n-gram counts are summed over all sentences before
/// the precisions are formed. No smoothing.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Domain("BLEU of an empty hypothesis list".into()));
    }
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total.add(&s);
    }
    Ok(total.score(false))
}

/// Fraction of outputs not identified as `tgt`; unidentifiable outputs count
/// as off-target.
pub fn off_target_rate(hyps: &[Vec<String>], tgt: &str, languages: &LanguageSet) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Domain("off-target rate of an empty list".into()));
    }
    let off = hyps
        .iter()
        .filter(|h| !identify_language(h, languages).is(tgt))
        .count();
    Ok(off as f64 / hyps.len() as f64)
}

/// Paired bootstrap resampling: the fraction of resampled test sets on which
/// system A does not score strictly higher BLEU than system B. Resampled BLEU
/// uses add-one smoothing for orders two and up.
pub fn paired_bootstrap<T: Eq + Hash>(
    hyp_a: &[Vec<T>],
    hyp_b: &[Vec<T>],
    refs: &[Vec<T>],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if resamples < 100 {
        return Err(Error::Config(format!(
            "need at least 100 resamples, got {resamples}"
        )));
    }
    if hyp_a.len() != hyp_b.len() {
        return Err(Error::Input(format!(
            "system outputs differ in length: {} vs {}",
            hyp_a.len(),
            hyp_b.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Domain("bootstrap over an empty test set".into()));
    }
    let a = corpus_stats(hyp_a, refs)?;
    let b = corpus_stats(hyp_b, refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = refs.len();
    let mut not_better = 0;
    for _ in 0..resamples {
        let (mut sa, mut sb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa.add(&a[i]);
            sb.add(&b[i]);
        }
        if sa.score(true) <= sb.score(true) {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / resamples as f64)
}

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    pub src: String,
    pub tgt: String,
    pub bleu: f64,
    pub off_target_rate: f64,
    pub is_zero_shot: bool,
    pub hypotheses: Vec<Vec<String>>,
}

impl DirectionResult {
    pub fn direction(&self) -> Direction {
        Direction::new(&self.src, &self.tgt)
    }
}

/// Decoding settings shared by every direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Output length limit is `source length + extra_len`.
    pub extra_len: usize,
    /// Sentences decoded together.
    pub batch_sentences: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            extra_len: 10,
            batch_sentences: 64,
        }
    }
}

/// Decodes token strings with a model, applying the model's tag scheme.
pub struct Translator<'a> {
    pub model: &'a Transformer,
    pub vocab: &'a Vocabulary,
    pub languages: &'a LanguageSet,
    pub decode: DecodeConfig,
}

impl Translator<'_> {
    fn scheme(&self) -> TagScheme {
        self.model.config().tag_scheme
    }

    /// Translates `(tokens, src_lang, tgt_lang)` items.
    pub fn translate(&self, items: &[(Vec<String>, String, String)]) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.decode.batch_sentences.max(1)) {
            let mut sources = Vec::with_capacity(chunk.len());
            let mut starts = Vec::with_capacity(chunk.len());
            let mut max_len = 1;
            for (tokens, src, tgt) in chunk {
                let tagged = apply_tags(tokens, src, tgt, &[], self.scheme(), self.languages)?;
                let ids = self.vocab.encode(&tagged.encoder)?;
                max_len = max_len.max(ids.len() + self.decode.extra_len);
                sources.push(ids);
                starts.push(self.vocab.id(&tagged.decoder_start)?);
            }
            let hyps = beam_search(self.model, &sources, &starts, self.decode.beam, max_len)?;
            out.extend(hyps.iter().map(|h| self.vocab.decode(&h.tokens)));
        }
        Ok(out)
    }

    /// Source to English, then English to target, re-tagging at each hop.
    /// Sources already in English take only the second hop.
    pub fn pivot_translate(
        &self,
        items: &[(Vec<String>, String, String)],
    ) -> Result<Vec<Vec<String>>> {
        let mut hop: Vec<(Vec<String>, String, String)> = Vec::with_capacity(items.len());
        let first: Vec<usize> = (0..items.len()).filter(|&i| items[i].1 != HUB).collect();
        let to_hub: Vec<_> = first
            .iter()
            .map(|&i| (items[i].0.clone(), items[i].1.clone(), HUB.to_string()))
            .collect();
        let mut english = self.translate(&to_hub)?.into_iter();
        for (tokens, src, tgt) in items {
            let en = if src == HUB {
                tokens.clone()
            } else {
                english.next().expect("one output per first hop")
            };
            hop.push((en, HUB.to_string(), tgt.clone()));
        }
        self.translate(&hop)
    }
}

fn group_by_direction<'p>(
    pairs: &'p [SentencePair],
    directions: &[Direction],
) -> Result<Vec<(Direction, Vec<&'p SentencePair>)>> {
    directions
        .iter()
        .map(|d| {
            let ps: Vec<&SentencePair> = pairs.iter().filter(|p| &p.direction() == d).collect();
            if ps.is_empty() {
                Err(Error::Input(format!(
                    "direction {d} not present in the split"
                )))
            } else {
                Ok((d.clone(), ps))
            }
        })
        .collect()
}

fn score_direction(
    direction: Direction,
    pairs: &[&SentencePair],
    hypotheses: Vec<Vec<String>>,
    languages: &LanguageSet,
) -> Result<DirectionResult> {
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    Ok(DirectionResult {
        bleu: corpus_bleu(&hypotheses, &refs)?,
        off_target_rate: off_target_rate(&hypotheses, &direction.tgt, languages)?,
        is_zero_shot: direction.is_zero_shot(),
        src: direction.src,
        tgt: direction.tgt,
        hypotheses,
    })
}

/// Decodes and scores every listed direction of `pairs`.
pub fn evaluate_directions(
    translator: &Translator<'_>,
    pairs: &[SentencePair],
    directions: &[Direction],
) -> Result<Vec<DirectionResult>> {
    group_by_direction(pairs, directions)?
        .into_iter()
        .map(|(d, ps)| {
            let items: Vec<_> = ps
                .iter()
                .map(|p| (p.src.clone(), p.src_lang.clone(), p.tgt_lang.clone()))
                .collect();
            let hyps = translator.translate(&items)?;
            score_direction(d, &ps, hyps, translator.languages)
        })
        .collect()
}

/// Like [`evaluate_directions`] but translating through English.
pub fn evaluate_pivot(
    translator: &Translator<'_>,
    pairs: &[SentencePair],
    directions: &[Direction],
) -> Result<Vec<DirectionResult>> {
    group_by_direction(pairs, directions)?
        .into_iter()
        .map(|(d, ps)| {
            let items: Vec<_> = ps
                .iter()
                .map(|p| (p.src.clone(), p.src_lang.clone(), p.tgt_lang.clone()))
                .collect();
            let hyps = translator.pivot_translate(&items)?;
            score_direction(d, &ps, hyps, translator.languages)
        })
        .collect()
}

/// Mean BLEU and off-target rate over a set of direction results.
pub fn average(results: &[&DirectionResult]) -> (f64, f64) {
    if results.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = results.len() as f64;
    (
        results.iter().map(|r| r.bleu).sum::<f64>() / n,
        results.iter().map(|r| r.off_target_rate).sum::<f64>() / n,
    )
}
