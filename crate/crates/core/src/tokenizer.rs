//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three
//! special tokens.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Decode byte tokens, dropping specials. Invalid UTF-8 is replaced.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
