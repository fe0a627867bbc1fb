//! Byte-level character corpus and next-token batches.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shakespeare's sonnets (public domain), bundled as the default corpus.
pub const SONNETS: &str = include_str!("../../data/sonnets.txt");

/// A byte vocabulary and the token stream it encodes, split into a training
/// prefix and a validation suffix.
#[derive(Clone, Debug)]
pub struct CharCorpus {
    /// id → byte
    vocab: Vec<u8>,
    /// byte → id
    index: [Option<u16>; 256],
    ids: Vec<usize>,
    split: usize,
}

/// Builds the vocabulary from the distinct bytes of `text` (sorted) and
/// keeps the last `val_fraction` of the stream for validation.
pub fn char_tokenize(text: &[u8], val_fraction: f64) -> Result<CharCorpus> {
    if text.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Input(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut seen = [false; 256];
    text.iter().for_each(|&b| seen[b as usize] = true);
    let vocab: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
    let mut index = [None; 256];
    for (i, &b) in vocab.iter().enumerate() {
        index[b as usize] = Some(i as u16);
    }
    let ids: Vec<usize> = text.iter().map(|&b| index[b as usize].unwrap() as usize).collect();
    let split = ids.len() - (ids.len() as f64 * val_fraction).round() as usize;
    Ok(CharCorpus {
        vocab,
        index,
        ids,
        split,
    })
}

impl CharCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn val(&self) -> &[usize] {
        &self.ids[self.split..]
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        text.iter()
            .map(|&b| {
                self.index[b as usize]
                    .map(usize::from)
                    .ok_or_else(|| Error::Input(format!("byte 0x{b:02x} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&i| {
                self.vocab
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("token {i} out of vocabulary")))
            })
            .collect()
    }
}

/// Endless stream of `(inputs, targets)` windows of length `len` drawn at
/// uniformly random offsets; `targets[t] == inputs[t + 1]` in the stream.
#[derive(Clone, Debug)]
pub struct LmBatcher {
    ids: Vec<usize>,
    len: usize,
    batch: usize,
    rng: Rng,
}

impl LmBatcher {
    pub fn new(ids: &[usize], len: usize, batch: usize, rng: Rng) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Input("sequence length and batch size must be positive".into()));
        }
        if ids.len() < len + 1 {
            return Err(Error::Input(format!(
                "corpus of {} tokens is too small for one window of {}",
                ids.len(),
                len + 1
            )));
        }
        Ok(LmBatcher {
            ids: ids.to_vec(),
            len,
            batch,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<(Vec<usize>, Vec<usize>)> {
        (0..self.batch)
            .map(|_| {
                let start = self.rng.below(self.ids.len() - self.len);
                let w = &self.ids[start..start + self.len + 1];
                (w[..self.len].to_vec(), w[1..].to_vec())
            })
            .collect()
    }
}

impl Iterator for LmBatcher {
    type Item = Vec<(Vec<usize>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_corpus_round_trips() {
        let c = char_tokenize(SONNETS.as_bytes(), 0.1).unwrap();
        assert!(c.vocab_size() < 100);
        assert_eq!(c.decode(c.ids()).unwrap(), SONNETS.as_bytes());
        assert_eq!(c.train().len() + c.val().len(), SONNETS.len());
        assert!((c.val().len() as f64 / SONNETS.len() as f64 - 0.1).abs() < 1e-3);
    }

    #[test]
    fn encode_rejects_unseen_bytes() {
        let c = char_tokenize(b"abcab", 0.0).unwrap();
        assert_eq!(c.encode(b"cab").unwrap(), vec![2, 0, 1]);
        assert!(c.encode(b"z").is_err());
        assert!(c.decode(&[3]).is_err());
        assert!(char_tokenize(b"", 0.1).is_err());
    }

    #[test]
    fn targets_are_shifted_inputs_and_stream_is_seeded() {
        let c = char_tokenize(SONNETS.as_bytes(), 0.1).unwrap();
        let mut a = LmBatcher::new(c.train(), 16, 4, Rng::new(3)).unwrap();
        let mut b = LmBatcher::new(c.train(), 16, 4, Rng::new(3)).unwrap();
        for _ in 0..5 {
            let ba = a.next_batch();
            assert_eq!(ba, b.next_batch());
            for (x, y) in &ba {
                assert_eq!(x.len(), 16);
                assert_eq!(&x[1..], &y[..15]);
            }
        }
    }

    #[test]
    fn too_small_corpus_is_an_error() {
        assert!(LmBatcher::new(&[1, 2, 3], 3, 1, Rng::new(0)).is_err());
        assert!(LmBatcher::new(&[1, 2, 3, 4], 3, 1, Rng::new(0)).is_ok());
    }
}
