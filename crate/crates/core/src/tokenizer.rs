//! Byte-level BPE tokenizer with merge dropout.
//!
//! The vocabulary is trained on the caption corpus itself: the base alphabet
//! is the set of bytes observed in the (normalized) corpus plus the full stop
//! and a designated unknown token; merges are learned greedily by pair
//! frequency, ties broken lexicographically on the pair's byte strings.
//!
//! The full-stop byte never participates in a merge, so `.` always remains a
//! standalone token — caption truncation splits on exactly that token and
//! would be meaningless if merges could swallow it.
//!
//! Normalization (lowercasing, on by default) happens before training and
//! before every encode, so `decode(encode(s, 0)) == s` holds for any string
//! that is fixed under normalization — in particular for every corpus line as
//! the trainer saw it.
//!
//! Padded slots inside an encoding are marked with [`PAD_SLOT`]; the sequence
//! packer replaces them with the global `[PAD]` token, which lives outside
//! the tokenizer's id space.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;

/// Marker for padded slots in a fixed-length encoding.
pub const PAD_SLOT: u32 = u32::MAX;

/// Default text length fed to the sequence packer.
pub const DEFAULT_TEXT_LEN: usize = 64;

#[derive(Debug, Clone)]
pub struct BpeVocab {
    /// id -> byte string; `tokens[0]` is the unknown token.
    tokens: Vec<Vec<u8>>,
    /// Merge list in training order, as (left id, right id) -> new id.
    merges: Vec<(u32, u32)>,
    token_to_id: HashMap<Vec<u8>, u32>,
    /// Number of base-alphabet tokens (including the unknown slot).
    base_len: usize,
    /// Target vocabulary size; all ids are < this bound.
    pub v_target: usize,
    pub fullstop_id: u32,
    pub lowercase: bool,
}

pub const UNK_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoding {
    /// Length `max_len`; padded slots hold [`PAD_SLOT`].
    pub ids: Vec<u32>,
    /// True where `ids` holds a real token.
    pub mask: Vec<bool>,
}

impl TextEncoding {
    pub fn real_ids(&self) -> Vec<u32> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter_map(|(&id, &m)| m.then_some(id))
            .collect()
    }

    pub fn len_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl BpeVocab {
    /// Number of distinct tokens actually in the vocabulary (<= `v_target`).
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    fn normalize(&self, text: &str) -> String {
        if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        }
    }
}

/// Greedy pair-merge training over the (normalized) corpus lines.
pub fn train_bpe<I, S>(corpus: I, target_size: usize, lowercase: bool) -> Result<BpeVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let lines: Vec<String> = corpus
        .into_iter()
        .map(|l| {
            if lowercase {
                l.as_ref().to_lowercase()
            } else {
                l.as_ref().to_string()
            }
        })
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::contract("train_bpe: empty corpus"));
    }

    // Base alphabet: unknown token, then observed bytes plus '.' in order.
    let mut seen = [false; 256];
    for l in &lines {
        for &b in l.as_bytes() {
            seen[b as usize] = true;
        }
    }
    seen[b'.' as usize] = true;
    let mut tokens: Vec<Vec<u8>> = vec![b"<unk>".to_vec()];
    let mut byte_to_id = [UNK_ID; 256];
    for b in 0..256usize {
        if seen[b] {
            byte_to_id[b] = tokens.len() as u32;
            tokens.push(vec![b as u8]);
        }
    }
    let base_len = tokens.len();
    if target_size < base_len {
        return Err(Error::contract(format!(
            "train_bpe: target size {target_size} smaller than base alphabet {base_len}"
        )));
    }

    let mut seqs: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| l.as_bytes().iter().map(|&b| byte_to_id[b as usize]).collect())
        .collect();

    let fullstop_base = byte_to_id[b'.' as usize];
    let mut merges: Vec<(u32, u32)> = Vec::new();
    while tokens.len() < target_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                if w[0] == fullstop_base || w[1] == fullstop_base {
                    continue;
                }
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Higher priority = lexicographically smaller byte pair,
                    // so reverse the byte comparison.
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, &c)| (p, c));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = tokens.len() as u32;
        let mut merged = tokens[pair.0 as usize].clone();
        merged.extend_from_slice(&tokens[pair.1 as usize]);
        tokens.push(merged);
        merges.push(pair);
        for seq in &mut seqs {
            apply_single_merge(seq, pair, new_id);
        }
    }

    let token_to_id: HashMap<Vec<u8>, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    let fullstop_id = token_to_id[&vec![b'.']];
    Ok(BpeVocab {
        tokens,
        merges,
        token_to_id,
        base_len,
        v_target: target_size,
        fullstop_id,
        lowercase,
    })
}

/// Left-to-right, non-overlapping application of one merge.
fn apply_single_merge(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// As above, but each eligible occurrence is independently skipped with
/// probability `dropout`.
fn apply_merge_with_dropout(
    seq: &mut Vec<u32>,
    pair: (u32, u32),
    new_id: u32,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            if dropout > 0.0 && rng.gen::<f64>() < dropout {
                out.push(seq[i]);
                i += 1;
            } else {
                out.push(new_id);
                i += 2;
            }
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Encode to a fixed-length id vector plus pad mask. Bytes outside the base
/// alphabet map to the unknown token.
pub fn encode(
    vocab: &BpeVocab,
    text: &str,
    dropout_rate: f64,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TextEncoding> {
    if !(0.0..=1.0).contains(&dropout_rate) {
        return Err(Error::contract("encode: dropout_rate outside [0, 1]"));
    }
    let text = vocab.normalize(text);
    let mut seq: Vec<u32> = text
        .as_bytes()
        .iter()
        .map(|&b| {
            vocab
                .token_to_id
                .get(&vec![b])
                .copied()
                .unwrap_or(UNK_ID)
        })
        .collect();

    if dropout_rate < 1.0 {
        for (rank, &pair) in vocab.merges.iter().enumerate() {
            let new_id = (vocab.base_len + rank) as u32;
            if dropout_rate == 0.0 {
                apply_single_merge(&mut seq, pair, new_id);
            } else {
                apply_merge_with_dropout(&mut seq, pair, new_id, dropout_rate, rng);
            }
        }
    }

    seq.truncate(max_len);
    let n = seq.len();
    let mut ids = seq;
    ids.resize(max_len, PAD_SLOT);
    let mut mask = vec![true; n];
    mask.resize(max_len, false);
    Ok(TextEncoding { ids, mask })
}

/// Concatenate token byte strings; [`PAD_SLOT`] entries are dropped.
pub fn decode(vocab: &BpeVocab, ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if id == PAD_SLOT {
            continue;
        }
        let tok = vocab
            .token_bytes(id)
            .ok_or_else(|| Error::contract(format!("decode: invalid token id {id}")))?;
        bytes.extend_from_slice(tok);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

// ---------------------------------------------------------------------------
// Vocabulary file format: plain text, one entry per line.
// ---------------------------------------------------------------------------

fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            b'\t' => out.push_str("\\t"),
            0x21..=0x7e => out.push(b as char),
            _ => {
                write!(out, "\\x{b:02x}").unwrap();
            }
        }
    }
    out
}

fn unescape(text: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('t') => out.push(b'\t'),
            Some('x') => {
                let hi = chars.next().ok_or_else(|| Error::format("bad escape"))?;
                let lo = chars.next().ok_or_else(|| Error::format("bad escape"))?;
                let byte = u8::from_str_radix(&format!("{hi}{lo}"), 16)
                    .map_err(|_| Error::format("bad hex escape"))?;
                out.push(byte);
            }
            other => return Err(Error::format(format!("bad escape {other:?}"))),
        }
    }
    Ok(out)
}

/// Serialize as a merges list plus token-to-id table, one entry per line.
pub fn write_vocab(vocab: &BpeVocab) -> String {
    let mut out = String::new();
    out.push_str("bpe-vocab v1\n");
    writeln!(out, "lowercase {}", vocab.lowercase).unwrap();
    writeln!(out, "target {}", vocab.v_target).unwrap();
    writeln!(out, "base {}", vocab.base_len).unwrap();
    out.push_str("#tokens\n");
    for (i, t) in vocab.tokens.iter().enumerate() {
        writeln!(out, "{}\t{}", escape(t), i).unwrap();
    }
    out.push_str("#merges\n");
    for (a, b) in &vocab.merges {
        writeln!(out, "{a} {b}").unwrap();
    }
    out
}

pub fn read_vocab(text: &str) -> Result<BpeVocab> {
    let mut lines = text.lines();
    if lines.next() != Some("bpe-vocab v1") {
        return Err(Error::format("vocab file: bad header"));
    }
    let mut lowercase = true;
    let mut v_target = 0usize;
    let mut base_len = 0usize;
    let mut tokens: Vec<(Vec<u8>, u32)> = Vec::new();
    let mut merges: Vec<(u32, u32)> = Vec::new();
    let mut section = "";
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if line == "#tokens" || line == "#merges" {
            section = line;
            continue;
        }
        match section {
            "" => {
                let (key, val) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::format("vocab file: bad key line"))?;
                match key {
                    "lowercase" => lowercase = val == "true",
                    "target" => {
                        v_target = val.parse().map_err(|_| Error::format("bad target"))?
                    }
                    "base" => base_len = val.parse().map_err(|_| Error::format("bad base"))?,
                    _ => return Err(Error::format(format!("vocab file: unknown key {key}"))),
                }
            }
            "#tokens" => {
                let (tok, id) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| Error::format("vocab file: bad token line"))?;
                let id: u32 = id.parse().map_err(|_| Error::format("bad token id"))?;
                tokens.push((unescape(tok)?, id));
            }
            "#merges" => {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::format("vocab file: bad merge line"))?;
                merges.push((
                    a.parse().map_err(|_| Error::format("bad merge id"))?,
                    b.parse().map_err(|_| Error::format("bad merge id"))?,
                ));
            }
            _ => unreachable!(),
        }
    }
    tokens.sort_by_key(|(_, id)| *id);
    if tokens
        .iter()
        .enumerate()
        .any(|(i, (_, id))| *id != i as u32)
    {
        return Err(Error::format("vocab file: non-contiguous token ids"));
    }
    let tokens: Vec<Vec<u8>> = tokens.into_iter().map(|(t, _)| t).collect();
    let token_to_id: HashMap<Vec<u8>, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    let fullstop_id = *token_to_id
        .get(&vec![b'.'])
        .ok_or_else(|| Error::format("vocab file: missing full-stop token"))?;
    Ok(BpeVocab {
        tokens,
        merges,
        token_to_id,
        base_len,
        v_target,
        fullstop_id,
        lowercase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn toy_vocab() -> BpeVocab {
        train_bpe(
            [
                "a red circle on a white wall.",
                "two blue squares over grass.",
                "a small green dot.",
                "the cat sat on the mat.",
                "a dog with a red ball.",
            ],
            200,
            true,
        )
        .unwrap()
    }

    #[test]
    fn dominant_pair_merges_first() {
        let vocab = train_bpe(["aaaa"], 40, true).unwrap();
        // base: unk, '.', 'a' -> first merge must be ("a","a")
        let first = vocab.merges[0];
        assert_eq!(vocab.token_bytes(first.0).unwrap(), b"a");
        assert_eq!(vocab.token_bytes(first.1).unwrap(), b"a");
        assert_eq!(
            vocab.token_bytes(vocab.base_len as u32).unwrap(),
            b"aa".as_slice()
        );
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            train_bpe(empty, 10, true),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn round_trip_identity_at_dropout_zero_and_one() {
        let vocab = toy_vocab();
        let corpus = [
            "a red circle on a white wall.",
            "two blue squares over grass.",
            "a small green dot.",
            "the cat sat on the mat.",
            "a dog with a red ball.",
        ];
        let mut rng = stream_rng(1, "t", 0);
        for line in corpus {
            for dropout in [0.0, 1.0] {
                let enc = encode(&vocab, line, dropout, 128, &mut rng).unwrap();
                assert_eq!(decode(&vocab, &enc.ids).unwrap(), line);
            }
        }
    }

    #[test]
    fn held_in_strings_round_trip() {
        // 100 strings drawn from corpus fragments.
        let vocab = toy_vocab();
        let words = [
            "a", "red", "circle", "on", "white", "wall", "two", "blue", "squares", "over",
            "grass", "small", "green", "dot", "the", "cat", "sat", "mat", "dog", "with", "ball",
        ];
        let mut rng = stream_rng(2, "t", 0);
        use rand::Rng;
        for case in 0..100 {
            let n = 1 + (case % 7);
            let mut s = String::new();
            for i in 0..n {
                if i > 0 {
                    s.push(' ');
                }
                s.push_str(words[rng.gen_range(0..words.len())]);
            }
            s.push('.');
            let enc = encode(&vocab, &s, 0.0, 128, &mut rng).unwrap();
            assert_eq!(decode(&vocab, &enc.ids).unwrap(), s);
        }
    }

    /// Brute-force oracle: recount pair frequencies from scratch at every
    /// step and confirm the recorded merge order matches.
    #[test]
    fn merge_order_matches_frequency_oracle() {
        let corpus = [
            "the cat sat.",
            "the dog sat.",
            "a cat and a dog.",
            "the mat was flat.",
            "cats and dogs play.",
        ];
        let vocab = train_bpe(corpus, 80, true).unwrap();

        // Oracle replication with an independent (string-based) structure.
        let mut tokens: Vec<Vec<u8>> = vec![b"<unk>".to_vec()];
        let mut seen = [false; 256];
        for l in &corpus {
            for &b in l.to_lowercase().as_bytes() {
                seen[b as usize] = true;
            }
        }
        seen[b'.' as usize] = true;
        let mut byte_to_id = [0u32; 256];
        for b in 0..256 {
            if seen[b] {
                byte_to_id[b] = tokens.len() as u32;
                tokens.push(vec![b as u8]);
            }
        }
        let mut seqs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|l| {
                l.to_lowercase()
                    .as_bytes()
                    .iter()
                    .map(|&b| byte_to_id[b as usize])
                    .collect()
            })
            .collect();

        for (step, &expect) in vocab.merges.iter().enumerate() {
            let mut counts: std::collections::BTreeMap<(Vec<u8>, Vec<u8>), u64> =
                Default::default();
            let mut id_of: std::collections::BTreeMap<(Vec<u8>, Vec<u8>), (u32, u32)> =
                Default::default();
            for seq in &seqs {
                for w in seq.windows(2) {
                    let key = (
                        tokens[w[0] as usize].clone(),
                        tokens[w[1] as usize].clone(),
                    );
                    // the full stop stays atomic
                    if key.0 == b"." || key.1 == b"." {
                        continue;
                    }
                    *counts.entry(key.clone()).or_insert(0) += 1;
                    id_of.insert(key, (w[0], w[1]));
                }
            }
            // max count, ties to lexicographically smallest key (BTreeMap
            // iterates keys in order, so `>` keeps the first maximum).
            let (best_key, best_count) = counts
                .iter()
                .fold((None, 0u64), |(bk, bc), (k, &c)| {
                    if c > bc {
                        (Some(k.clone()), c)
                    } else {
                        (bk, bc)
                    }
                });
            assert!(best_count >= 2, "oracle ran out of pairs before vocab did");
            let best_pair = id_of[&best_key.unwrap()];
            assert_eq!(best_pair, expect, "merge {step} diverged from oracle");
            let new_id = tokens.len() as u32;
            let mut merged = tokens[best_pair.0 as usize].clone();
            merged.extend_from_slice(&tokens[best_pair.1 as usize]);
            tokens.push(merged);
            for seq in &mut seqs {
                super::apply_single_merge(seq, best_pair, new_id);
            }
        }
    }

    #[test]
    fn dropout_zero_is_deterministic() {
        let vocab = toy_vocab();
        let mut r1 = stream_rng(5, "a", 0);
        let mut r2 = stream_rng(99, "b", 7);
        let e1 = encode(&vocab, "a red circle.", 0.0, 64, &mut r1).unwrap();
        let e2 = encode(&vocab, "a red circle.", 0.0, 64, &mut r2).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn dropout_one_gives_base_segmentation() {
        let vocab = toy_vocab();
        let text = "a red circle.";
        let mut rng = stream_rng(6, "t", 0);
        let enc = encode(&vocab, text, 1.0, 64, &mut rng).unwrap();
        let real = enc.real_ids();
        assert_eq!(real.len(), text.len());
        assert!(real.iter().all(|&id| (id as usize) < vocab.base_len));
        assert_eq!(decode(&vocab, &real).unwrap(), text);
    }

    #[test]
    fn seeded_dropout_is_reproducible() {
        let vocab = toy_vocab();
        let mut r1 = stream_rng(42, "bpe", 3);
        let mut r2 = stream_rng(42, "bpe", 3);
        let e1 = encode(&vocab, "the cat sat on the mat.", 0.1, 64, &mut r1).unwrap();
        let e2 = encode(&vocab, "the cat sat on the mat.", 0.1, 64, &mut r2).unwrap();
        assert_eq!(e1, e2);
        // and still decodes to the input
        assert_eq!(
            decode(&vocab, &e1.real_ids()).unwrap(),
            "the cat sat on the mat."
        );
    }

    #[test]
    fn unknown_bytes_map_to_unk() {
        let vocab = toy_vocab();
        let mut rng = stream_rng(7, "t", 0);
        let enc = encode(&vocab, "a red Ω circle.", 0.0, 64, &mut rng).unwrap();
        assert!(enc.real_ids().contains(&UNK_ID));
    }

    #[test]
    fn decode_cases() {
        let vocab = toy_vocab();
        let mut rng = stream_rng(8, "t", 0);
        let enc = encode(&vocab, "a cat.", 0.0, 64, &mut rng).unwrap();
        assert_eq!(decode(&vocab, &enc.ids).unwrap(), "a cat.");
        assert_eq!(decode(&vocab, &[]).unwrap(), "");
        assert!(matches!(
            decode(&vocab, &[vocab.size() as u32]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn truncation_and_padding() {
        let vocab = toy_vocab();
        let mut rng = stream_rng(9, "t", 0);
        let enc = encode(&vocab, "a red circle on a white wall.", 1.0, 8, &mut rng).unwrap();
        assert_eq!(enc.ids.len(), 8);
        assert_eq!(enc.len_real(), 8);
        let short = encode(&vocab, "a.", 0.0, 8, &mut rng).unwrap();
        assert!(short.len_real() < 8);
        assert_eq!(short.ids[7], PAD_SLOT);
        assert!(!short.mask[7]);
    }

    #[test]
    fn all_ids_below_target() {
        let vocab = toy_vocab();
        assert!(vocab.size() <= vocab.v_target);
        let mut rng = stream_rng(10, "t", 0);
        let enc = encode(&vocab, "dogs and cats on grass.", 0.0, 64, &mut rng).unwrap();
        assert!(enc
            .real_ids()
            .iter()
            .all(|&id| (id as usize) < vocab.v_target));
    }

    #[test]
    fn fullstop_token_decodes_to_period() {
        let vocab = toy_vocab();
        assert_eq!(vocab.token_bytes(vocab.fullstop_id).unwrap(), b".");
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = toy_vocab();
        let text = write_vocab(&vocab);
        let back = read_vocab(&text).unwrap();
        assert_eq!(back.tokens, vocab.tokens);
        assert_eq!(back.merges, vocab.merges);
        assert_eq!(back.fullstop_id, vocab.fullstop_id);
        assert_eq!(back.v_target, vocab.v_target);
        assert_eq!(back.lowercase, vocab.lowercase);
        // second serialization is byte-identical
        assert_eq!(write_vocab(&back), text);
    }
}
