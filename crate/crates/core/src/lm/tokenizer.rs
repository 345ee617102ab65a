// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const VOCAB_SIZE: usize = 259;

/// Byte-level tokenizer: token id = byte value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| u32::from(b)).collect()
    }

    /// Special tokens are dropped.
    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_special(token: u32) -> bool {
        token >= 256
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        let t = Tokenizer;
        assert!(t.encode(b"").is_empty());
        assert!(t.decode(&[]).is_empty());
        assert_eq!(t.encode(b"ab"), [97, 98]);
        assert_eq!(t.decode(&[97, 98]), b"ab");
        assert_eq!(t.decode(&[BOS, 97, PAD, EOS]), b"a");
    }

    proptest! {
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 1024)) {
            let t = Tokenizer;
            prop_assert_eq!(t.decode(&t.encode(&bytes)), bytes);
        }
    }
}
