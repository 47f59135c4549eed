//! Byte-level tokenizer: ids 0..256 are raw bytes, followed by reserved specials.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const IMG_START: u32 = 259;
pub const IMG_END: u32 = 260;
/// Placeholder id stored at image positions; never embedded.
pub const IMG_CONTEXT: u32 = 261;
pub const BYTE_VOCAB: u32 = 256;
pub const VOCAB_SIZE: usize = 264;

pub fn is_special(id: u32) -> bool {
    id >= BYTE_VOCAB
}

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; special ids are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&id| !is_special(id)).map(|&id| id as u8).collect()
}

/// Byte string carried in a JSON text field. Characters up to U+00FF map to the
/// single byte of the same value, so any byte string survives a JSON round trip;
/// wider characters contribute their UTF-8 encoding.
pub fn text_to_bytes(text: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(text.len());
    for ch in text.chars() {
        if (ch as u32) < 256 {
            out.push(ch as u32 as u8);
        } else {
            let mut buf = [0u8; 4];
            out.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
        }
    }
    out
}

pub fn bytes_to_text(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        assert_eq!(detokenize(&[BOS, 72, 105, EOS]), b"Hi".to_vec());
    }

    #[test]
    fn wide_characters_use_utf8() {
        assert_eq!(text_to_bytes("a\u{e9}\u{263a}"), vec![b'a', 0xe9, 0xe2, 0x98, 0xba]);
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes.clone());
            prop_assert_eq!(text_to_bytes(&bytes_to_text(&bytes)), bytes);
        }
    }
}
