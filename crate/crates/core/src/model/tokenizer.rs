//! Byte-level tokenizer: byte `b` maps to id `b + 2`; ids 0 and 1 are the
//! beginning- and end-of-sequence markers.

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const BYTE_OFFSET: u32 = 2;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET as usize;

/// Token ids for `text` with BOS prepended.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.iter().map(|&b| b as u32 + BYTE_OFFSET));
    out
}

/// Bytes for `ids`, dropping the special markers.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&t| t >= BYTE_OFFSET)
        .map(|&t| (t - BYTE_OFFSET) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_short() {
        assert_eq!(tokenize(b""), vec![BOS]);
        assert_eq!(tokenize(b"ab"), vec![BOS, 97 + 2, 98 + 2]);
    }

    #[test]
    fn megabyte_round_trip() {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut bytes = vec![0u8; 1 << 20];
        rng.fill_bytes(&mut bytes);
        assert_eq!(detokenize(&tokenize(&bytes)), bytes);
    }
}
