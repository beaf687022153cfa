//! Vocabularies, caption triple extraction, and per-token tag labeling.
//!
//! Triples come from a lexicon-pattern extractor: object-category mentions
//! are located first, then the token span between two neighbouring mentions
//! is scanned for exactly one predicate-lexicon match. Verb predicates whose
//! subject mention is itself the object of a prepositional triple lift their
//! subject to that triple's subject, so "a woman in a hat feeding a giraffe"
//! yields (woman, feed, giraffe) rather than (hat, feed, giraffe).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Per-token label generated alongside words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    None,
    Predicate,
    Object,
}

pub const TAG_COUNT: usize = 3;

impl Tag {
    pub fn index(self) -> usize {
        match self {
            Tag::None => 0,
            Tag::Predicate => 1,
            Tag::Object => 2,
        }
    }
    pub fn from_index(i: usize) -> Tag {
        match i {
            0 => Tag::None,
            1 => Tag::Predicate,
            2 => Tag::Object,
            _ => panic!("tag index {i}"),
        }
    }
}

/// An (object, predicate, object) relation extracted from one caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub source_caption_index: usize,
}

/// Tokens dropped from the edges of candidate predicate spans, and exempt
/// from suffix normalization.
const EDGE_STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "is", "are", "was", "were", "that", "this", "there", "it",
];

/// Closed class of prepositional predicates. Membership decides (a) that a
/// token is never suffix-normalized and (b) that a triple does not lift its
/// subject through it.
const PREPOSITIONS: &[&str] = &[
    "above", "across", "against", "along", "around", "at", "atop", "behind", "below", "beneath",
    "beside", "between", "by", "in", "inside", "near", "on", "outside", "over", "under",
    "underneath", "upon", "with",
    "left of", "right of", "next to", "in front of", "on top of", "close to",
];

fn is_stopword(token: &str) -> bool {
    EDGE_STOPWORDS.contains(&token)
}

pub fn is_preposition(entry: &str) -> bool {
    PREPOSITIONS.contains(&entry)
}

const DOUBLED_CONSONANTS: &[char] = &['b', 'd', 'g', 'l', 'm', 'n', 'p', 'r', 't'];

/// Strip verb suffixes ("feeding" -> "feed", "sitting" -> "sit"). Closed-class
/// words pass through untouched.
pub fn normalize_token(token: &str) -> String {
    if is_stopword(token) || is_preposition(token) {
        return token.to_string();
    }
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(stem) = token.strip_suffix(suffix) {
            if stem.len() < 3 {
                continue;
            }
            let mut stem = stem.to_string();
            if suffix == "ing" || suffix == "ed" {
                let chars: Vec<char> = stem.chars().collect();
                let k = chars.len();
                if k >= 2 && chars[k - 1] == chars[k - 2] && DOUBLED_CONSONANTS.contains(&chars[k - 1]) {
                    stem.pop();
                }
            }
            return stem;
        }
    }
    token.to_string()
}

/// Word, category, and predicate vocabularies plus the synonym expansion map.
#[derive(Debug, Clone)]
pub struct Vocabularies {
    words: Vec<String>,
    word_index: BTreeMap<String, usize>,
    categories: Vec<String>,
    category_index: BTreeMap<String, usize>,
    /// Fine-grained surface token -> category name.
    expansion: BTreeMap<String, String>,
    /// Normalized lexicon entries; an entry may span several tokens.
    predicates: Vec<String>,
    predicate_index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<(usize, String)>,
    categories: Vec<(usize, String)>,
    predicates: Vec<(usize, String)>,
    synonyms: Vec<(String, String)>,
}

impl Vocabularies {
    pub fn from_parts(
        words: Vec<String>,
        categories: Vec<String>,
        predicates: Vec<String>,
        expansion: BTreeMap<String, String>,
    ) -> Self {
        let word_index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let category_index = categories.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let predicate_index = predicates.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Vocabularies {
            words,
            word_index,
            categories,
            category_index,
            expansion,
            predicates,
            predicate_index,
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
    pub fn num_words(&self) -> usize {
        self.words.len()
    }
    pub fn word_id(&self, token: &str) -> usize {
        self.word_index.get(token).copied().unwrap_or(UNK_ID)
    }
    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }
    pub fn category_id(&self, category: &str) -> Option<usize> {
        self.category_index.get(category).copied()
    }

    /// Category a surface token refers to, through the expansion map.
    pub fn category_of(&self, surface: &str) -> Option<&str> {
        if let Some(cat) = self.expansion.get(surface) {
            return Some(cat);
        }
        self.category_index
            .get_key_value(surface)
            .map(|(k, _)| k.as_str())
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }
    pub fn predicate_id(&self, entry: &str) -> Option<usize> {
        self.predicate_index.get(entry).copied()
    }

    /// All surface forms that count as an object mention, with their
    /// category, longest first for greedy matching.
    fn mention_surfaces(&self) -> Vec<(Vec<String>, String)> {
        let mut surfaces: Vec<(Vec<String>, String)> = self
            .categories
            .iter()
            .map(|c| (c.split_whitespace().map(str::to_string).collect(), c.clone()))
            .chain(self.expansion.iter().map(|(s, c)| {
                (s.split_whitespace().map(str::to_string).collect(), c.clone())
            }))
            .collect();
        surfaces.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        surfaces
    }

    fn predicate_entries_tokenized(&self) -> Vec<(Vec<String>, String)> {
        let mut entries: Vec<(Vec<String>, String)> = self
            .predicates
            .iter()
            .map(|p| (p.split_whitespace().map(str::to_string).collect(), p.clone()))
            .collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        entries
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = VocabFile {
            words: self.words.iter().cloned().enumerate().collect(),
            categories: self.categories.iter().cloned().enumerate().collect(),
            predicates: self.predicates.iter().cloned().enumerate().collect(),
            synonyms: self.expansion.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingPrerequisite(format!("vocab {}: {e}", path.display())))?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        let unpack = |pairs: Vec<(usize, String)>, what: &str| -> Result<Vec<String>> {
            for (i, (idx, _)) in pairs.iter().enumerate() {
                if *idx != i {
                    return Err(Error::Vocab(format!("{what}: index {idx} at position {i}")));
                }
            }
            Ok(pairs.into_iter().map(|(_, t)| t).collect())
        };
        let words = unpack(file.words, "words")?;
        if words.len() < 4 || words[PAD_ID] != PAD || words[BOS_ID] != BOS || words[EOS_ID] != EOS || words[UNK_ID] != UNK
        {
            return Err(Error::Vocab("word vocabulary missing special tokens".to_string()));
        }
        Ok(Self::from_parts(
            words,
            unpack(file.categories, "categories")?,
            unpack(file.predicates, "predicates")?,
            file.synonyms.into_iter().collect(),
        ))
    }
}

/// An object-category mention: token span plus resolved category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub len: usize,
    pub category: String,
}

impl Mention {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Greedy longest-match scan for object-category mentions.
pub fn find_mentions(tokens: &[String], vocab: &Vocabularies) -> Vec<Mention> {
    let surfaces = vocab.mention_surfaces();
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = false;
        for (surface, category) in &surfaces {
            let n = surface.len();
            if i + n <= tokens.len() && tokens[i..i + n] == surface[..] {
                mentions.push(Mention { start: i, len: n, category: category.clone() });
                i += n;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    mentions
}

/// Greedy longest-match predicate scan over a normalized token segment.
/// Returns (offset within segment, token length, lexicon entry).
fn predicate_matches(
    normalized: &[String],
    entries: &[(Vec<String>, String)],
) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < normalized.len() {
        let mut matched = false;
        for (surface, entry) in entries {
            let n = surface.len();
            if i + n <= normalized.len() && normalized[i..i + n] == surface[..] {
                out.push((i, n, entry.clone()));
                i += n;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    out
}

struct RawTriple {
    subject_mention: usize,
    object_mention: usize,
    predicate: String,
}

/// Extract relationship triples from one caption.
pub fn extract_triples(tokens: &[String], vocab: &Vocabularies, caption_index: usize) -> Vec<Triple> {
    let mentions = find_mentions(tokens, vocab);
    let entries = vocab.predicate_entries_tokenized();
    let mut raw: Vec<RawTriple> = Vec::new();
    for k in 0..mentions.len().saturating_sub(1) {
        let (a, b) = (&mentions[k], &mentions[k + 1]);
        let span: Vec<String> = tokens[a.end()..b.start].iter().map(|t| normalize_token(t)).collect();
        let matches = predicate_matches(&span, &entries);
        if matches.len() == 1 {
            raw.push(RawTriple {
                subject_mention: k,
                object_mention: k + 1,
                predicate: matches[0].2.clone(),
            });
        }
    }
    // Subject lifting: a verb predicate whose subject is the object of a
    // prepositional triple takes that triple's subject instead.
    let mut triples = Vec::new();
    for t in &raw {
        let mut subject = t.subject_mention;
        if !is_preposition(&t.predicate) {
            loop {
                let link = raw
                    .iter()
                    .find(|u| u.object_mention == subject && is_preposition(&u.predicate));
                match link {
                    Some(u) => subject = u.subject_mention,
                    None => break,
                }
            }
        }
        let triple = Triple {
            subject: mentions[subject].category.clone(),
            predicate: t.predicate.clone(),
            object: mentions[t.object_mention].category.clone(),
            source_caption_index: caption_index,
        };
        if !triples.contains(&triple) {
            triples.push(triple);
        }
    }
    triples
}

/// All triples from every caption of an image, deduplicated across captions
/// on (subject, predicate, object).
pub fn extract_image_triples(image: &ImageRecord, vocab: &Vocabularies) -> Vec<Triple> {
    let mut out: Vec<Triple> = Vec::new();
    for (ci, caption) in image.captions.iter().enumerate() {
        for t in extract_triples(caption, vocab, ci) {
            if !out
                .iter()
                .any(|u| u.subject == t.subject && u.predicate == t.predicate && u.object == t.object)
            {
                out.push(t);
            }
        }
    }
    out
}

/// Tag every caption token: object mentions win over predicate spans; the
/// rest is `none`.
pub fn label_tags(tokens: &[String], vocab: &Vocabularies) -> Vec<Tag> {
    let mut tags = vec![Tag::None; tokens.len()];
    let mentions = find_mentions(tokens, vocab);
    for m in &mentions {
        for t in tags.iter_mut().skip(m.start).take(m.len) {
            *t = Tag::Object;
        }
    }
    let entries = vocab.predicate_entries_tokenized();
    // Scan the maximal segments not covered by mentions.
    let mut boundaries = vec![0usize];
    for m in &mentions {
        boundaries.push(m.start);
        boundaries.push(m.end());
    }
    boundaries.push(tokens.len());
    for pair in boundaries.chunks(2) {
        let (seg_start, seg_end) = (pair[0], pair[1]);
        if seg_start >= seg_end {
            continue;
        }
        let normalized: Vec<String> =
            tokens[seg_start..seg_end].iter().map(|t| normalize_token(t)).collect();
        for (off, len, _) in predicate_matches(&normalized, &entries) {
            for t in tags.iter_mut().skip(seg_start + off).take(len) {
                *t = Tag::Predicate;
            }
        }
    }
    tags
}

#[derive(Debug, Clone)]
pub struct VocabConfig {
    /// Keep at most this many predicates (the most frequent ones).
    pub predicate_cap: usize,
    /// Tokens below this caption frequency fall back to `<unk>`.
    pub min_word_freq: usize,
    /// Fine-grained surface token -> category name.
    pub synonyms: BTreeMap<String, String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { predicate_cap: 16, min_word_freq: 1, synonyms: BTreeMap::new() }
    }
}

/// Candidate predicate from a between-mentions span: edge stopwords removed,
/// remaining tokens normalized. Rejected if empty, longer than three tokens,
/// or still containing a stopword.
fn candidate_predicate(span: &[String]) -> Option<String> {
    let mut lo = 0;
    let mut hi = span.len();
    while lo < hi && is_stopword(&span[lo]) {
        lo += 1;
    }
    while hi > lo && is_stopword(&span[hi - 1]) {
        hi -= 1;
    }
    let inner = &span[lo..hi];
    if inner.is_empty() || inner.len() > 3 || inner.iter().any(|t| is_stopword(t)) {
        return None;
    }
    Some(inner.iter().map(|t| normalize_token(t)).collect::<Vec<_>>().join(" "))
}

/// Build all vocabularies from a corpus: word vocabulary by frequency,
/// categories from region labels (expanded through synonyms), and the
/// predicate lexicon as the most frequent candidate spans between mentions.
pub fn build_vocabularies(corpus: &[ImageRecord], config: &VocabConfig) -> Result<Vocabularies> {
    if corpus.is_empty() {
        return Err(Error::Vocab("empty corpus".to_string()));
    }
    // Categories from region labels.
    let mut categories: Vec<String> = corpus
        .iter()
        .flat_map(|img| img.regions.iter())
        .map(|r| config.synonyms.get(&r.label).unwrap_or(&r.label).clone())
        .collect();
    categories.sort();
    categories.dedup();

    // Word vocabulary by frequency, ties broken lexicographically.
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for img in corpus {
        for caption in &img.captions {
            for tok in caption {
                *freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut by_freq: Vec<(String, usize)> =
        freq.into_iter().filter(|(_, c)| *c >= config.min_word_freq).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut words: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into(), UNK.into()];
    words.extend(by_freq.into_iter().map(|(t, _)| t));

    // Predicate candidates from spans between neighbouring mentions.
    let mention_vocab = Vocabularies::from_parts(
        Vec::new(),
        categories.clone(),
        Vec::new(),
        config.synonyms.clone(),
    );
    let mut candidate_freq: BTreeMap<String, usize> = BTreeMap::new();
    for img in corpus {
        for caption in &img.captions {
            let mentions = find_mentions(caption, &mention_vocab);
            for pair in mentions.windows(2) {
                let span = &caption[pair[0].end()..pair[1].start];
                if let Some(cand) = candidate_predicate(span) {
                    *candidate_freq.entry(cand).or_insert(0) += 1;
                }
            }
        }
    }
    let mut candidates: Vec<(String, usize)> = candidate_freq.into_iter().collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let predicates: Vec<String> =
        candidates.into_iter().take(config.predicate_cap).map(|(p, _)| p).collect();

    Ok(Vocabularies::from_parts(words, categories, predicates, config.synonyms.clone()))
}
