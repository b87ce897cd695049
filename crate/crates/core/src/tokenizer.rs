//! Byte-level BPE vocabulary with greedy longest-match encoding.
//!
//! Id layout: `0` pad, `1` eos, then the ordinary pieces (the 256 single bytes
//! first, merged pieces after them in merge order), then the sentinel block
//! occupying the last `S` ids. Sentinel `k` is id `len - 1 - k`.
//!
//! Merges never cross a whitespace/non-whitespace boundary, so every piece is
//! either all whitespace or contains none. A whitespace-delimited word therefore
//! encodes to the same ids whatever surrounds it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const DEFAULT_SENTINELS: usize = 100;
const FIRST_PIECE: u32 = 2;
const VOCAB_MAGIC: &str = "CBQA-VOCAB v1";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocab size {size} is below the minimum {minimum} (256 bytes + 2 specials + {sentinels} sentinels)")]
    SizeTooSmall {
        size: usize,
        minimum: usize,
        sentinels: usize,
    },
    #[error("token id {0} is outside the vocabulary")]
    OutOfRange(u32),
    #[error("token id {0} is a special or sentinel id and has no text")]
    NotAPiece(u32),
    #[error("sentinel index {k} exceeds the {count} reserved sentinels")]
    SentinelOutOfRange { k: usize, count: usize },
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("vocab file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<Vec<u8>>,
    sentinels: usize,
    lookup: HashMap<Vec<u8>, u32>,
    max_piece_len: usize,
}

fn byte_class(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Split text into maximal runs of whitespace / non-whitespace bytes.
fn runs(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= text.len() {
            return None;
        }
        let class = byte_class(text[start]);
        let len = text[start..].iter().take_while(|&&b| byte_class(b) == class).count();
        let run = &text[start..start + len];
        start += len;
        Some(run)
    })
}

impl Vocab {
    fn from_pieces(pieces: Vec<Vec<u8>>, sentinels: usize) -> Result<Self, TokenizerError> {
        let mut lookup = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(TokenizerError::Format(format!("piece {i} is empty")));
            }
            if lookup.insert(p.clone(), FIRST_PIECE + i as u32).is_some() {
                return Err(TokenizerError::Format(format!("duplicate piece {i}")));
            }
        }
        for b in 0..=255u8 {
            if !lookup.contains_key(&[b][..]) {
                return Err(TokenizerError::Format(format!("byte {b:#04x} missing")));
            }
        }
        let max_piece_len = pieces.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Vocab {
            pieces,
            sentinels,
            lookup,
            max_piece_len,
        })
    }

    /// A vocabulary of the 256 single bytes only.
    pub fn bytes_only(sentinels: usize) -> Self {
        Self::from_pieces((0..=255u8).map(|b| vec![b]).collect(), sentinels)
            .expect("byte pieces are unique")
    }

    /// Train byte-pair merges until the vocabulary reaches `size` ids (or no pair is left).
    ///
    /// The most frequent adjacent pair is merged first; equal counts go to the
    /// lexicographically smallest `(left, right)` byte pair.
    pub fn build<S: AsRef<str>>(
        corpus: impl IntoIterator<Item = S>,
        size: usize,
        sentinels: usize,
    ) -> Result<Self, TokenizerError> {
        let minimum = 256 + 2 + sentinels;
        if size < minimum {
            return Err(TokenizerError::SizeTooSmall {
                size,
                minimum,
                sentinels,
            });
        }
        let mut word_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for text in corpus {
            for run in runs(text.as_ref().as_bytes()) {
                *word_counts.entry(run.to_vec()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u8>, u64)> = word_counts.into_iter().collect();
        words.sort();
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut index: HashMap<Vec<u8>, u32> =
            pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let mut segmented: Vec<(Vec<u32>, u64)> = words
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
            .collect();
        let target = size - 2 - sentinels;
        while pieces.len() < target {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (seg, c) in &segmented {
                for pair in seg.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += c;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some(((left, right), _)) = best else { break };
            let mut merged = pieces[left as usize].clone();
            merged.extend_from_slice(&pieces[right as usize]);
            let merged_id = match index.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = pieces.len() as u32;
                    index.insert(merged.clone(), id);
                    pieces.push(merged);
                    id
                }
            };
            for (seg, _) in &mut segmented {
                let mut out = Vec::with_capacity(seg.len());
                let mut i = 0;
                while i < seg.len() {
                    if i + 1 < seg.len() && seg[i] == left && seg[i + 1] == right {
                        out.push(merged_id);
                        i += 2;
                    } else {
                        out.push(seg[i]);
                        i += 1;
                    }
                }
                *seg = out;
            }
        }
        Self::from_pieces(pieces, sentinels)
    }

    /// Total number of ids, including pad, eos and sentinels.
    pub fn len(&self) -> usize {
        FIRST_PIECE as usize + self.pieces.len() + self.sentinels
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sentinel_count(&self) -> usize {
        self.sentinels
    }

    pub fn pieces(&self) -> &[Vec<u8>] {
        &self.pieces
    }

    pub fn piece_id(&self, bytes: &[u8]) -> Option<u32> {
        self.lookup.get(bytes).copied()
    }

    pub fn sentinel_id(&self, k: usize) -> Result<u32, TokenizerError> {
        if k >= self.sentinels {
            return Err(TokenizerError::SentinelOutOfRange {
                k,
                count: self.sentinels,
            });
        }
        Ok((self.len() - 1 - k) as u32)
    }

    /// The sentinel index of `id`, if it is one.
    pub fn sentinel_index(&self, id: u32) -> Option<usize> {
        let id = id as usize;
        let first = self.len() - self.sentinels;
        (id >= first && id < self.len()).then(|| self.len() - 1 - id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == PAD_ID || id == EOS_ID || self.sentinel_index(id).is_some()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Greedy longest match, left to right.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_piece_len.min(bytes.len() - i);
            let (id, len) = (1..=longest)
                .rev()
                .find_map(|len| self.lookup.get(&bytes[i..i + len]).map(|&id| (id, len)))
                .expect("every single byte is a piece");
            ids.push(id);
            i += len;
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.piece(id)?);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| TokenizerError::InvalidUtf8)
    }

    fn piece(&self, id: u32) -> Result<&[u8], TokenizerError> {
        if id as usize >= self.len() {
            return Err(TokenizerError::OutOfRange(id));
        }
        if self.is_special(id) {
            return Err(TokenizerError::NotAPiece(id));
        }
        Ok(&self.pieces[(id - FIRST_PIECE) as usize])
    }

    /// Human-readable rendering: specials appear as `<pad>`, `</s>` and `<S{k}>`.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut pending = Vec::new();
        let flush = |pending: &mut Vec<u8>, out: &mut String| {
            out.push_str(&String::from_utf8_lossy(pending));
            pending.clear();
        };
        for &id in ids {
            if let Ok(bytes) = self.piece(id) {
                pending.extend_from_slice(bytes);
                continue;
            }
            flush(&mut pending, &mut out);
            match id {
                PAD_ID => out.push_str("<pad>"),
                EOS_ID => out.push_str("</s>"),
                _ => match self.sentinel_index(id) {
                    Some(k) => {
                        let _ = write!(out, "<S{k}>");
                    }
                    None => {
                        let _ = write!(out, "<?{id}>");
                    }
                },
            }
        }
        flush(&mut pending, &mut out);
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_MAGIC} sentinels={}", self.sentinels)?;
        for piece in &self.pieces {
            writeln!(w, "{}", escape_piece(piece))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, TokenizerError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Format("empty file".into()))??;
        let sentinels = header
            .strip_prefix(VOCAB_MAGIC)
            .and_then(|rest| rest.strip_prefix(" sentinels="))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| TokenizerError::Format(format!("bad header `{header}`")))?;
        let mut pieces = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            pieces.push(
                unescape_piece(&line)
                    .ok_or_else(|| TokenizerError::Format(format!("line {}: bad escape", i + 2)))?,
            );
        }
        Self::from_pieces(pieces, sentinels)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Printable ASCII other than `\` is written as-is, everything else as `\xHH`.
fn escape_piece(piece: &[u8]) -> String {
    let mut s = String::with_capacity(piece.len());
    for &b in piece {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape_piece(line: &str) -> Option<Vec<u8>> {
    let bytes = line.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = line.get(i + 2..i + 4)?;
            if bytes.get(i + 1) != Some(&b'x') {
                return None;
            }
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    (!out.is_empty()).then_some(out)
}
