//! Character-level tokenizer over printable ASCII (plus newline) and
//! BOS/EOS/PAD specials.
//!
//! Fixed alphabet, no merges, no configuration: newline and bytes
//! 0x20..=0x7e map to one token each. Removes any tokenizer dependence
//! from experiments.

use super::ModelError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const NEWLINE: usize = 3;
const FIRST_CHAR: usize = 4;
const ALPHABET_START: u8 = 0x20;
const ALPHABET_END: u8 = 0x7e;

/// Number of distinct token ids: 95 printable ASCII chars, newline, and
/// 3 specials.
pub const VOCAB_SIZE: usize = FIRST_CHAR + (ALPHABET_END - ALPHABET_START + 1) as usize;

/// Encode text; every char must be printable ASCII or newline.
pub fn encode(text: &str) -> Result<Vec<usize>, ModelError> {
    text.chars()
        .map(|c| {
            if c == '\n' {
                return Ok(NEWLINE);
            }
            let b = c as u32;
            if (ALPHABET_START as u32..=ALPHABET_END as u32).contains(&b) {
                Ok(FIRST_CHAR + (b - ALPHABET_START as u32) as usize)
            } else {
                Err(ModelError::UntokenizableChar(c))
            }
        })
        .collect()
}

/// Decode tokens back to text, skipping the special ids.
pub fn decode(tokens: &[usize]) -> String {
    tokens
        .iter()
        .filter_map(|&t| {
            if t == NEWLINE {
                Some('\n')
            } else if (FIRST_CHAR..VOCAB_SIZE).contains(&t) {
                Some((ALPHABET_START + (t - FIRST_CHAR) as u8) as char)
            } else {
                None
            }
        })
        .collect()
}
