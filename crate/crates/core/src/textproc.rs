//! Lower-cased byte-level BPE tokenizer.
//!
//! Id layout for a table with `M` merges (`V = 256 + M + 3`):
//! PAD = 0, bytes `1..=256`, merges `257..257+M`, SOS = V−2, EOS = V−1.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
const BYTE_OFFSET: u32 = 1;
const BASE_SYMBOLS: usize = 256;
const SPECIALS: usize = 3;

/// Default vocabulary size; 49152 is the other commonly quoted value.
pub const DEFAULT_VOCAB_SIZE: usize = 49408;
pub const ALT_VOCAB_SIZE: usize = 49152;
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;

type Symbol = Vec<u8>;

/// Learned merges in priority order plus the derived vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(Symbol, Symbol)>,
    /// id → symbol bytes for bytes and merges (specials excluded)
    symbols: Vec<Symbol>,
    ids: HashMap<Symbol, u32>,
    ranks: HashMap<(u32, u32), u32>,
    /// Set when the corpus ran out of pairs before the requested size.
    pub exhausted: bool,
}

impl MergeTable {
    /// A table with only the byte alphabet.
    pub fn bytes_only() -> Self {
        MergeTable::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    /// Builds the vocabulary from an ordered merge list. Every merge's parts
    /// must exist earlier in the table.
    pub fn from_merges(merges: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self> {
        let mut symbols: Vec<Symbol> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ids: HashMap<Symbol, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32 + BYTE_OFFSET))
            .collect();
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (ids.get(l), ids.get(r)) else {
                return Err(Error::Format(format!(
                    "merge {rank} uses a symbol not defined earlier"
                )));
            };
            let mut joined = l.clone();
            joined.extend_from_slice(r);
            let id = (BASE_SYMBOLS + rank) as u32 + BYTE_OFFSET;
            ids.entry(joined.clone()).or_insert(id);
            symbols.push(joined);
            ranks.entry((li, ri)).or_insert(rank as u32);
        }
        Ok(MergeTable {
            merges,
            symbols,
            ids,
            ranks,
            exhausted: false,
        })
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        BASE_SYMBOLS + self.merges.len() + SPECIALS
    }

    pub fn sos_id(&self) -> u32 {
        self.vocab_size() as u32 - 2
    }

    pub fn eos_id(&self) -> u32 {
        self.vocab_size() as u32 - 1
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    /// Id of a symbol's byte string, if it is in the vocabulary.
    pub fn token_id(&self, symbol: &[u8]) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    /// Bytes for a non-special id.
    pub fn symbol(&self, id: u32) -> Option<&[u8]> {
        if id == PAD_ID || id >= self.sos_id() {
            return None;
        }
        self.symbols
            .get((id - BYTE_OFFSET) as usize)
            .map(Vec::as_slice)
    }

    /// Token ids of `text` (lower-cased) without brackets or padding.
    /// Merges apply within words only.
    pub fn encode_body(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        split_words(&lower).flat_map(|w| self.encode_word(w)).collect()
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut toks: Vec<u32> = word.bytes().map(|b| b as u32 + BYTE_OFFSET).collect();
        loop {
            let best = toks
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank as usize];
            let (li, ri) = (self.ids[l], self.ids[r]);
            let mut joined = l.clone();
            joined.extend_from_slice(r);
            let mid = self.ids[&joined];
            let mut out = Vec::with_capacity(toks.len());
            let mut i = 0;
            while i < toks.len() {
                if i + 1 < toks.len() && toks[i] == li && toks[i + 1] == ri {
                    out.push(mid);
                    i += 2;
                } else {
                    out.push(toks[i]);
                    i += 1;
                }
            }
            toks = out;
        }
        toks
    }

    /// Serializes as text: `#`-prefixed header lines, then one
    /// `left<TAB>right` line per merge with bytes escaped.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#deskclip-bpe v1");
        let _ = writeln!(s, "#alphabet bytes 0-255");
        let _ = writeln!(
            s,
            "#special pad={} sos={} eos={}",
            PAD_ID,
            self.sos_id(),
            self.eos_id()
        );
        let _ = writeln!(s, "#merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{}\t{}", escape(l), escape(r));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        let mut declared = None;
        for line in text.lines() {
            if let Some(h) = line.strip_prefix('#') {
                if let Some(n) = h.strip_prefix("merges ") {
                    declared = Some(
                        n.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Format(format!("merge count: {e}")))?,
                    );
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("merge line without tab: {line:?}")))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        if let Some(n) = declared {
            if n != merges.len() {
                return Err(Error::Format(format!(
                    "header declares {n} merges, found {}",
                    merges.len()
                )));
            }
        }
        MergeTable::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        MergeTable::from_text(&std::fs::read_to_string(path)?)
    }
}

fn escape(sym: &[u8]) -> String {
    let mut s = String::new();
    for &b in sym {
        match b {
            b'\\' => s.push_str("\\\\"),
            b'#' => s.push_str("\\x23"),
            0x21..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn unescape(s: &str) -> Result<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            match bytes.get(i + 1) {
                Some(b'\\') => {
                    out.push(b'\\');
                    i += 2;
                }
                Some(b'x') => {
                    let hex = s
                        .get(i + 2..i + 4)
                        .ok_or_else(|| Error::Format(format!("bad escape in {s:?}")))?;
                    out.push(
                        u8::from_str_radix(hex, 16)
                            .map_err(|_| Error::Format(format!("bad escape in {s:?}")))?,
                    );
                    i += 4;
                }
                _ => return Err(Error::Format(format!("bad escape in {s:?}"))),
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

/// Splits before every ASCII whitespace byte, so each word carries its
/// leading space (`"a red"` → `["a", " red"]`). Concatenating the pieces
/// gives back the input.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    let b = text.as_bytes();
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= b.len() {
            return None;
        }
        let mut i = start + 1;
        while i < b.len() && !(b[i].is_ascii_whitespace() && !b[i - 1].is_ascii_whitespace()) {
            i += 1;
        }
        let w = &text[start..i];
        start = i;
        Some(w)
    })
}

/// Learns merges greedily by pair frequency within words; ties go to the
/// lexicographically smallest pair. Returns a smaller table with
/// `exhausted` set when no pairs remain before `vocab_size`.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<MergeTable> {
    if corpus.is_empty() {
        return Err(Error::invalid("BPE corpus is empty"));
    }
    let floor = BASE_SYMBOLS + SPECIALS;
    if vocab_size <= floor {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} must exceed alphabet plus specials ({floor})"
        )));
    }
    let target = vocab_size - floor;

    // distinct words with multiplicity, ordered for determinism
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in corpus {
        for w in split_words(&t.as_ref().to_lowercase()) {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<Symbol>, u64)> = counts
        .into_iter()
        .map(|(t, c)| (t.bytes().map(|b| vec![b]).collect(), c))
        .collect();

    let mut merges: Vec<(Symbol, Symbol)> = Vec::with_capacity(target);
    let mut exhausted = false;
    while merges.len() < target {
        let mut freq: BTreeMap<(&[u8], &[u8]), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *freq.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first
        // maximum seen is the tie-break winner.
        let mut best: Option<((&[u8], &[u8]), u64)> = None;
        for (pair, &c) in &freq {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((*pair, c));
            }
        }
        let Some(((l, r), _)) = best else {
            exhausted = true;
            break;
        };
        let (l, r) = (l.to_vec(), r.to_vec());
        drop(freq);
        for (syms, _) in &mut words {
            *syms = merge_pair(std::mem::take(syms), &l, &r);
        }
        merges.push((l, r));
    }
    if exhausted {
        log::debug!(
            "BPE corpus exhausted after {} merges (requested {target})",
            merges.len()
        );
    }
    let mut table = MergeTable::from_merges(merges)?;
    table.exhausted = exhausted;
    Ok(table)
}

fn merge_pair(syms: Vec<Symbol>, l: &[u8], r: &[u8]) -> Vec<Symbol> {
    let mut out = Vec::with_capacity(syms.len());
    let mut it = syms.into_iter().peekable();
    while let Some(s) = it.next() {
        if s == l && it.peek().is_some_and(|n| n == r) {
            let mut j = s;
            j.extend_from_slice(&it.next().expect("peeked"));
            out.push(j);
        } else {
            out.push(s);
        }
    }
    out
}

/// Fixed-length bracketed token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of non-pad entries (SOS through EOS).
    pub length: usize,
}

impl TokenSequence {
    /// Position of the EOS token.
    pub fn eos_position(&self) -> usize {
        self.length - 1
    }
}

/// Lower-cases, applies merges, brackets with SOS/EOS and pads. The body is
/// truncated from the end so that EOS always fits.
pub fn encode(text: &str, table: &MergeTable, context_length: usize) -> Result<TokenSequence> {
    if context_length < 2 {
        return Err(Error::invalid("context_length must be at least 2"));
    }
    let mut body = table.encode_body(text);
    body.truncate(context_length - 2);
    let mut ids = Vec::with_capacity(context_length);
    ids.push(table.sos_id());
    ids.extend_from_slice(&body);
    ids.push(table.eos_id());
    let length = ids.len();
    ids.resize(context_length, PAD_ID);
    Ok(TokenSequence { ids, length })
}

/// Inverse of [`encode`] up to lower-casing; specials are dropped.
pub fn decode(seq: &TokenSequence, table: &MergeTable) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in &seq.ids {
        if id == PAD_ID || id == table.sos_id() || id == table.eos_id() {
            continue;
        }
        let sym = table.symbol(id).ok_or(Error::UnknownToken(id))?;
        bytes.extend_from_slice(sym);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
