//! Deterministic synthetic multilingual data.
//!
//! A sentence is a sequence of abstract concepts. Each language realizes it by
//! permuting positions with its [`OrderRule`] and mapping every concept to a
//! language-specific surface token, so translation between any two languages
//! is exact and surface vocabularies never overlap. Training data is
//! English-centric; the test split additionally covers every non-English pair.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HUB: &str = "en";
pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const BOS: &str = "<bos>";
/// Longest sentence accepted by the batcher.
pub const MAX_SENTENCE_LEN: usize = 256;

/// Position permutation applied when realizing a concept sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderRule {
    Identity,
    Reverse,
    RotateLeft(usize),
}

impl OrderRule {
    pub fn apply<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        let mut out = xs.to_vec();
        match *self {
            OrderRule::Identity => {}
            OrderRule::Reverse => out.reverse(),
            OrderRule::RotateLeft(k) if !out.is_empty() => {
                let k = k % out.len();
                out.rotate_left(k);
            }
            OrderRule::RotateLeft(_) => {}
        }
        out
    }

    pub fn invert<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        let mut out = xs.to_vec();
        match *self {
            OrderRule::Identity => {}
            OrderRule::Reverse => out.reverse(),
            OrderRule::RotateLeft(k) if !out.is_empty() => {
                let k = k % out.len();
                out.rotate_right(k);
            }
            OrderRule::RotateLeft(_) => {}
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub id: String,
    pub order: OrderRule,
    /// Surface token for each concept index.
    pub surfaces: Vec<String>,
}

impl SyntheticLanguageSpec {
    pub fn realize(&self, concepts: &[usize]) -> Vec<String> {
        self.order
            .apply(concepts)
            .into_iter()
            .map(|c| self.surfaces[c].clone())
            .collect()
    }
}

/// The languages of one corpus plus a reverse surface index.
#[derive(Clone, Debug)]
pub struct LanguageSet {
    languages: Vec<SyntheticLanguageSpec>,
    owner: HashMap<String, (usize, usize)>,
}

impl LanguageSet {
    /// `count` languages: the hub `en` plus `aa`, `bb`, ... whose order rules
    /// cycle through identity, reverse and rotate-left-by-one.
    pub fn synthetic(count: usize, concepts: usize) -> Self {
        let rules = [
            OrderRule::Identity,
            OrderRule::Reverse,
            OrderRule::RotateLeft(1),
        ];
        let languages = (0..count)
            .map(|i| {
                let (id, order) = if i == 0 {
                    (HUB.to_string(), OrderRule::Identity)
                } else {
                    (language_code(i - 1), rules[(i - 1) % rules.len()])
                };
                let surfaces = (0..concepts).map(|c| format!("{id}{c:02}")).collect();
                SyntheticLanguageSpec {
                    id,
                    order,
                    surfaces,
                }
            })
            .collect();
        Self::new(languages).expect("generated surfaces are disjoint")
    }

    pub fn new(languages: Vec<SyntheticLanguageSpec>) -> Result<Self> {
        let mut owner = HashMap::new();
        for (li, lang) in languages.iter().enumerate() {
            for (ci, s) in lang.surfaces.iter().enumerate() {
                if is_special(s) {
                    return Err(Error::Config(format!("surface {s:?} looks like a tag")));
                }
                if owner.insert(s.clone(), (li, ci)).is_some() {
                    return Err(Error::Config(format!("surface {s:?} is not unique")));
                }
            }
        }
        Ok(LanguageSet { languages, owner })
    }

    pub fn len(&self) -> usize {
        self.languages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.languages.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SyntheticLanguageSpec> {
        self.languages.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.id == id)
    }

    pub fn get(&self, id: &str) -> Result<&SyntheticLanguageSpec> {
        self.index_of(id)
            .map(|i| &self.languages[i])
            .ok_or_else(|| Error::Input(format!("unknown language {id:?}")))
    }

    /// `(language index, concept)` of a surface token.
    pub fn owner(&self, token: &str) -> Option<(usize, usize)> {
        self.owner.get(token).copied()
    }

    /// Recovers the concept sequence of a sentence in language `lang`.
    pub fn parse(&self, tokens: &[String], lang: &str) -> Result<Vec<usize>> {
        let li = self
            .index_of(lang)
            .ok_or_else(|| Error::Input(format!("unknown language {lang:?}")))?;
        let positional = tokens
            .iter()
            .map(|t| match self.owner(t) {
                Some((l, c)) if l == li => Ok(c),
                _ => Err(Error::Input(format!("{t:?} is not a {lang} surface"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.languages[li].order.invert(&positional))
    }

    /// Ground-truth translation.
    pub fn translate(&self, tokens: &[String], from: &str, to: &str) -> Result<Vec<String>> {
        let concepts = self.parse(tokens, from)?;
        Ok(self.get(to)?.realize(&concepts))
    }

    pub fn supervised_directions(&self) -> Vec<Direction> {
        let mut out = Vec::new();
        for l in self.languages.iter().filter(|l| l.id != HUB) {
            out.push(Direction::new(HUB, &l.id));
            out.push(Direction::new(&l.id, HUB));
        }
        out
    }

    /// Every ordered pair of distinct non-hub languages.
    pub fn zero_shot_directions(&self) -> Vec<Direction> {
        let others: Vec<&str> = self
            .languages
            .iter()
            .filter(|l| l.id != HUB)
            .map(|l| l.id.as_str())
            .collect();
        let mut out = Vec::new();
        for a in &others {
            for b in &others {
                if a != b {
                    out.push(Direction::new(a, b));
                }
            }
        }
        out
    }
}

fn language_code(i: usize) -> String {
    let c = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        format!("{c}{c}")
    } else {
        format!("{c}{c}{}", i / 26)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub src: String,
    pub tgt: String,
}

impl Direction {
    pub fn new(src: &str, tgt: &str) -> Self {
        Direction {
            src: src.to_string(),
            tgt: tgt.to_string(),
        }
    }

    pub fn is_zero_shot(&self) -> bool {
        self.src != HUB && self.tgt != HUB
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentencePair {
    pub fn direction(&self) -> Direction {
        Direction::new(&self.src_lang, &self.tgt_lang)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Total number of languages, hub included.
    pub languages: usize,
    pub concepts: usize,
    pub train_pairs_per_direction: usize,
    pub valid_per_direction: usize,
    pub test_per_direction: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            languages: 5,
            concepts: 64,
            train_pairs_per_direction: 4000,
            valid_per_direction: 200,
            test_per_direction: 200,
            min_len: 3,
            max_len: 12,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages < 3 {
            return Err(Error::Config(format!(
                "need at least 3 languages for zero-shot directions, got {}",
                self.languages
            )));
        }
        if self.concepts < 16 {
            return Err(Error::Config(format!(
                "need at least 16 concepts, got {}",
                self.concepts
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > MAX_SENTENCE_LEN - 2 {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// English-centric train/valid splits and an all-directions test split.
#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub config: CorpusConfig,
    pub languages: LanguageSet,
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn split(&self, split: Split) -> &[SentencePair] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(&self.languages)
    }

    /// Writes one `src_lang \t tgt_lang \t src_tokens \t tgt_tokens` line per pair.
    pub fn write_split<W: Write>(&self, split: Split, out: &mut W) -> Result<()> {
        write_pairs(self.split(split), out)
    }
}

pub fn write_pairs<W: Write>(pairs: &[SentencePair], out: &mut W) -> Result<()> {
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            p.src_lang,
            p.tgt_lang,
            p.src.join(" "),
            p.tgt.join(" ")
        )?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(input: R) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Input(format!(
                "line {}: expected 4 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let toks = |s: &str| s.split_whitespace().map(str::to_string).collect();
        pairs.push(SentencePair {
            src_lang: fields[0].to_string(),
            tgt_lang: fields[1].to_string(),
            src: toks(fields[2]),
            tgt: toks(fields[3]),
        });
    }
    Ok(pairs)
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<ParallelCorpus> {
    config.validate()?;
    let languages = LanguageSet::synthetic(config.languages, config.concepts);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.random_range(config.min_len..=config.max_len);
        (0..len)
            .map(|_| rng.random_range(0..config.concepts))
            .collect()
    };
    let realize = |dir: &Direction, concepts: &[usize]| SentencePair {
        src_lang: dir.src.clone(),
        tgt_lang: dir.tgt.clone(),
        src: languages.get(&dir.src).unwrap().realize(concepts),
        tgt: languages.get(&dir.tgt).unwrap().realize(concepts),
    };

    let supervised = languages.supervised_directions();
    let mut seen = HashSet::new();
    let mut train = Vec::new();
    for dir in &supervised {
        for _ in 0..config.train_pairs_per_direction {
            let c = sample(&mut rng);
            train.push(realize(dir, &c));
            seen.insert(c);
        }
    }
    // Held-out sentences never repeat a training concept sequence.
    let held_out = |dirs: &[Direction], per_dir: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for dir in dirs {
            let mut n = 0;
            while n < per_dir {
                let c = sample(rng);
                if seen.contains(&c) {
                    continue;
                }
                out.push(realize(dir, &c));
                n += 1;
            }
        }
        out
    };
    let valid = held_out(&supervised, config.valid_per_direction, &mut rng);
    let mut all = supervised.clone();
    all.extend(languages.zero_shot_directions());
    let test = held_out(&all, config.test_per_direction, &mut rng);
    Ok(ParallelCorpus {
        config: config.clone(),
        languages,
        train,
        valid,
        test,
    })
}

/// Which side carries the language tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagScheme {
    /// Source tag on the encoder, target tag as the decoder start token.
    SEncTDec,
    /// Target tag on the encoder, generic begin-of-sentence on the decoder.
    TEnc,
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagScheme::SEncTDec => "S-ENC-T-DEC",
            TagScheme::TEnc => "T-ENC",
        })
    }
}

pub fn src_tag(lang: &str) -> String {
    format!("<src={lang}>")
}

pub fn tgt_tag(lang: &str) -> String {
    format!("<tgt={lang}>")
}

fn is_special(token: &str) -> bool {
    token.starts_with('<') && token.ends_with('>')
}

/// A pair with tags placed according to a [`TagScheme`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedPair {
    pub encoder: Vec<String>,
    pub decoder_start: String,
    pub reference: Vec<String>,
}

pub fn apply_tags(
    src: &[String],
    src_lang: &str,
    tgt_lang: &str,
    reference: &[String],
    scheme: TagScheme,
    languages: &LanguageSet,
) -> Result<TaggedPair> {
    languages.get(src_lang)?;
    languages.get(tgt_lang)?;
    let (enc_tag, start) = match scheme {
        TagScheme::SEncTDec => (src_tag(src_lang), tgt_tag(tgt_lang)),
        TagScheme::TEnc => (tgt_tag(tgt_lang), BOS.to_string()),
    };
    let mut encoder = Vec::with_capacity(src.len() + 1);
    encoder.push(enc_tag);
    encoder.extend(src.iter().cloned());
    Ok(TaggedPair {
        encoder,
        decoder_start: start,
        reference: reference.to_vec(),
    })
}

/// Token/id bijection: specials first, then tags, then surfaces in language order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const EOS_ID: usize = 1;
    pub const BOS_ID: usize = 2;

    pub fn new(languages: &LanguageSet) -> Self {
        let mut tokens = vec![PAD.to_string(), EOS.to_string(), BOS.to_string()];
        tokens.extend(languages.iter().map(|l| src_tag(&l.id)));
        tokens.extend(languages.iter().map(|l| tgt_tag(&l.id)));
        for l in languages.iter() {
            tokens.extend(l.surfaces.iter().cloned());
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Input(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, dropping padding and anything from `<eos>` on.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != Self::EOS_ID)
            .filter(|&&i| i != Self::PAD_ID)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn is_special_id(&self, id: usize) -> bool {
        self.token(id).is_some_and(is_special)
    }

    pub fn encode_pair(
        &self,
        pair: &SentencePair,
        scheme: TagScheme,
        languages: &LanguageSet,
    ) -> Result<EncodedPair> {
        let tagged = apply_tags(
            &pair.src,
            &pair.src_lang,
            &pair.tgt_lang,
            &pair.tgt,
            scheme,
            languages,
        )?;
        let src = self.encode(&tagged.encoder)?;
        let reference = self.encode(&tagged.reference)?;
        let mut tgt_in = vec![self.id(&tagged.decoder_start)?];
        tgt_in.extend_from_slice(&reference);
        let mut tgt_out = reference;
        tgt_out.push(Self::EOS_ID);
        Ok(EncodedPair {
            src,
            tgt_in,
            tgt_out,
        })
    }
}

/// Model-ready ids: encoder input, decoder input (start token first) and
/// decoder output (ending in `<eos>`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

pub fn encode_pairs(
    pairs: &[SentencePair],
    vocab: &Vocabulary,
    scheme: TagScheme,
    languages: &LanguageSet,
) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| vocab.encode_pair(p, scheme, languages))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LanguageGuess {
    Language(String),
    OffTargetUnknown,
}

impl LanguageGuess {
    pub fn is(&self, lang: &str) -> bool {
        matches!(self, LanguageGuess::Language(l) if l == lang)
    }
}

/// Strict-majority vote over surface-vocabulary membership. Tags and other
/// special tokens are ignored; tokens outside every vocabulary still count
/// toward the total.
pub fn identify_language(tokens: &[String], languages: &LanguageSet) -> LanguageGuess {
    let mut votes = vec![0usize; languages.len()];
    let mut total = 0;
    for t in tokens.iter().filter(|t| !is_special(t)) {
        total += 1;
        if let Some((l, _)) = languages.owner(t) {
            votes[l] += 1;
        }
    }
    if total == 0 {
        return LanguageGuess::OffTargetUnknown;
    }
    let (best, &count) = votes
        .iter()
        .enumerate()
        .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
        .expect("at least one language");
    if 2 * count > total {
        LanguageGuess::Language(languages.languages[best].id.clone())
    } else {
        LanguageGuess::OffTargetUnknown
    }
}

/// A padded minibatch. Sequences are stored row-major as `[n, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the example slice the batch was built from.
    pub indices: Vec<usize>,
    pub src: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub src_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<Option<usize>>,
    pub tgt_lens: Vec<usize>,
    pub tgt_len: usize,
}

impl Batch {
    pub fn from_examples(examples: &[EncodedPair], indices: &[usize]) -> Self {
        let src_len = indices
            .iter()
            .map(|&i| examples[i].src.len())
            .max()
            .unwrap_or(0);
        let tgt_len = indices
            .iter()
            .map(|&i| examples[i].tgt_in.len())
            .max()
            .unwrap_or(0);
        let n = indices.len();
        let mut src = vec![Vocabulary::PAD_ID; n * src_len];
        let mut tgt_in = vec![Vocabulary::PAD_ID; n * tgt_len];
        let mut tgt_out = vec![None; n * tgt_len];
        let mut src_lens = Vec::with_capacity(n);
        let mut tgt_lens = Vec::with_capacity(n);
        for (row, &i) in indices.iter().enumerate() {
            let ex = &examples[i];
            src[row * src_len..row * src_len + ex.src.len()].copy_from_slice(&ex.src);
            tgt_in[row * tgt_len..row * tgt_len + ex.tgt_in.len()].copy_from_slice(&ex.tgt_in);
            for (j, &t) in ex.tgt_out.iter().enumerate() {
                tgt_out[row * tgt_len + j] = Some(t);
            }
            src_lens.push(ex.src.len());
            tgt_lens.push(ex.tgt_in.len());
        }
        Batch {
            indices: indices.to_vec(),
            src,
            src_lens,
            src_len,
            tgt_in,
            tgt_out,
            tgt_lens,
            tgt_len,
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Padded token footprint: rows times the longer of the two sides.
    pub fn token_cost(&self) -> usize {
        self.size() * self.src_len.max(self.tgt_len)
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.src_lens.iter().sum::<usize>() + self.tgt_lens.iter().sum::<usize>()
    }
}

fn example_cost(ex: &EncodedPair) -> usize {
    ex.src.len().max(ex.tgt_in.len())
}

/// Groups examples of similar length into batches whose padded footprint stays
/// within `max_tokens`. Every example appears exactly once; the batch order is
/// shuffled with `seed`.
pub fn make_batches(examples: &[EncodedPair], max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    for (i, ex) in examples.iter().enumerate() {
        let cost = example_cost(ex);
        if ex.src.len() > MAX_SENTENCE_LEN || ex.tgt_in.len() > MAX_SENTENCE_LEN {
            return Err(Error::Input(format!(
                "example {i} exceeds the maximum sentence length {MAX_SENTENCE_LEN}"
            )));
        }
        if cost > max_tokens {
            return Err(Error::Input(format!(
                "example {i} needs {cost} tokens, batch limit is {max_tokens}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| example_cost(&examples[i]));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = width.max(example_cost(&examples[i]));
        if !current.is_empty() && w * (current.len() + 1) > max_tokens {
            groups.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(example_cost(&examples[i]));
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .iter()
        .map(|g| Batch::from_examples(examples, g))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            seed: 7,
            languages: 4,
            concepts: 16,
            train_pairs_per_direction: 30,
            valid_per_direction: 5,
            test_per_direction: 4,
            min_len: 3,
            max_len: 8,
        }
    }

    #[test]
    fn zero_shot_direction_counts() {
        for (k, expect) in [(5, 12), (7, 30), (4, 6), (3, 2)] {
            let langs = LanguageSet::synthetic(k, 16);
            assert_eq!(langs.zero_shot_directions().len(), expect);
            assert_eq!(langs.supervised_directions().len(), 2 * (k - 1));
        }
    }

    #[test]
    fn reverse_rule_realization() {
        let lang = SyntheticLanguageSpec {
            id: "xx".into(),
            order: OrderRule::Reverse,
            surfaces: vec!["x0".into(), "x1".into(), "x2".into(), "x3".into()],
        };
        assert_eq!(lang.realize(&[3, 1, 2]), toks("x2 x1 x3"));
    }

    #[test]
    fn default_languages_follow_the_hub_plus_cycle() {
        let langs = LanguageSet::synthetic(5, 16);
        let rules: Vec<_> = langs.iter().map(|l| (l.id.as_str(), l.order)).collect();
        assert_eq!(
            rules,
            vec![
                ("en", OrderRule::Identity),
                ("aa", OrderRule::Identity),
                ("bb", OrderRule::Reverse),
                ("cc", OrderRule::RotateLeft(1)),
                ("dd", OrderRule::Identity),
            ]
        );
    }

    #[test]
    fn too_few_languages_is_config_error() {
        let cfg = CorpusConfig {
            languages: 2,
            ..small_config()
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let cfg = CorpusConfig {
            concepts: 8,
            ..small_config()
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn train_split_is_english_centric_and_test_covers_zero_shot() {
        let corpus = generate_corpus(&small_config()).unwrap();
        assert!(corpus.train.iter().all(|p| !p.direction().is_zero_shot()));
        assert!(corpus.valid.iter().all(|p| !p.direction().is_zero_shot()));
        let zs: HashSet<_> = corpus
            .test
            .iter()
            .map(SentencePair::direction)
            .filter(Direction::is_zero_shot)
            .collect();
        assert_eq!(zs.len(), 6);
        assert_eq!(corpus.train.len(), 6 * 30);
        assert_eq!(corpus.test.len(), 12 * 4);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_corpus(&small_config()).unwrap();
        let b = generate_corpus(&small_config()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_corpus(&CorpusConfig {
            seed: 8,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn tags_by_scheme() {
        let langs = LanguageSet::synthetic(5, 16);
        let src = toks("aa01 aa02");
        let tgt = toks("bb02 bb01");
        let s = apply_tags(&src, "aa", "bb", &tgt, TagScheme::SEncTDec, &langs).unwrap();
        assert_eq!(s.encoder[0], "<src=aa>");
        assert_eq!(s.decoder_start, "<tgt=bb>");
        let t = apply_tags(&src, "aa", "bb", &tgt, TagScheme::TEnc, &langs).unwrap();
        assert_eq!(t.encoder[0], "<tgt=bb>");
        assert_eq!(t.decoder_start, "<bos>");
        assert_eq!(s.encoder[1..], t.encoder[1..]);
        assert!(matches!(
            apply_tags(&src, "zz", "bb", &tgt, TagScheme::TEnc, &langs),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn identify_language_cases() {
        let langs = LanguageSet::synthetic(5, 16);
        assert_eq!(
            identify_language(&toks("bb01 bb02 bb03"), &langs),
            LanguageGuess::Language("bb".into())
        );
        assert_eq!(
            identify_language(&toks("aa01 bb02"), &langs),
            LanguageGuess::OffTargetUnknown
        );
        assert_eq!(
            identify_language(&[], &langs),
            LanguageGuess::OffTargetUnknown
        );
        assert_eq!(
            identify_language(&toks("<tgt=aa> <eos>"), &langs),
            LanguageGuess::OffTargetUnknown
        );
        assert_eq!(
            identify_language(&toks("<src=bb> aa01 aa02 bb03"), &langs),
            LanguageGuess::Language("aa".into())
        );
    }

    #[test]
    fn vocabulary_is_a_bijection_with_stable_specials() {
        let langs = LanguageSet::synthetic(5, 16);
        let v = Vocabulary::new(&langs);
        assert_eq!(v.len(), 3 + 2 * 5 + 5 * 16);
        assert_eq!(v.id(PAD).unwrap(), Vocabulary::PAD_ID);
        assert_eq!(v.id(EOS).unwrap(), Vocabulary::EOS_ID);
        assert_eq!(v.id(BOS).unwrap(), Vocabulary::BOS_ID);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()).unwrap(), i);
        }
        assert_ne!(v.id("<src=aa>").unwrap(), v.id("<tgt=aa>").unwrap());
    }

    #[test]
    fn batches_conserve_tokens_and_respect_the_limit() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let vocab = corpus.vocabulary();
        let ex = encode_pairs(
            &corpus.train,
            &vocab,
            TagScheme::SEncTDec,
            &corpus.languages,
        )
        .unwrap();
        let total: usize = ex.iter().map(|e| e.src.len() + e.tgt_in.len()).sum();
        let batches = make_batches(&ex, 64, 3).unwrap();
        assert_eq!(
            batches.iter().map(Batch::non_pad_tokens).sum::<usize>(),
            total
        );
        assert!(batches.iter().all(|b| b.token_cost() <= 64));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..ex.len()).collect::<Vec<_>>());
        assert_eq!(batches, make_batches(&ex, 64, 3).unwrap());
        assert_ne!(batches, make_batches(&ex, 64, 4).unwrap());
    }

    #[test]
    fn oversized_example_is_input_error() {
        let ex = vec![EncodedPair {
            src: vec![3; 20],
            tgt_in: vec![3; 5],
            tgt_out: vec![3; 5],
        }];
        assert!(matches!(make_batches(&ex, 16, 0), Err(Error::Input(_))));
    }

    #[test]
    fn tsv_round_trip() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let mut buf = Vec::new();
        corpus.write_split(Split::Test, &mut buf).unwrap();
        let back = read_pairs(buf.as_slice()).unwrap();
        assert_eq!(back, corpus.test);
    }

    proptest::proptest! {
        #[test]
        fn translation_round_trips(concepts in proptest::collection::vec(0usize..16, 1..12),
                                   a in 0usize..5, b in 0usize..5) {
            let langs = LanguageSet::synthetic(5, 16);
            let ids = langs.ids();
            let s = langs.get(&ids[a]).unwrap().realize(&concepts);
            let there = langs.translate(&s, &ids[a], &ids[b]).unwrap();
            let back = langs.translate(&there, &ids[b], &ids[a]).unwrap();
            proptest::prop_assert_eq!(back, s);
            proptest::prop_assert!(identify_language(&there, &langs).is(&ids[b]));
        }
    }
}
