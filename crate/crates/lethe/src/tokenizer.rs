//! Byte-level tokenizer: ids 0–255 are raw bytes, followed by BOS/EOS/PAD.
//! Working at the byte level makes entity substring checks exact — a token
//! span is a byte span.

/// Token id of the beginning-of-sequence marker.
pub const BOS: u32 = 256;
/// Token id of the end-of-sequence marker.
pub const EOS: u32 = 257;
/// Token id of the padding marker (mask "ignore" in training batches).
pub const PAD: u32 = 258;
/// Vocabulary size: 256 byte values plus the three specials.
pub const VOCAB_SIZE: usize = 259;

/// Encode text as BOS + bytes + EOS.
pub fn encode(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.as_bytes().iter().map(|&b| b as u32));
    out.push(EOS);
    out
}

/// Encode text as BOS + bytes, without the closing EOS (generation prefixes).
pub fn encode_prefix(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.as_bytes().iter().map(|&b| b as u32));
    out
}

/// Decode byte tokens to text, dropping specials. Bytes map to chars one to
/// one (latin-1), so char-level comparisons equal byte-level comparisons.
pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8 as char)
        .collect()
}

/// Trim trailing EOS/PAD, then decode. Used when comparing generated
/// suffixes against ground truth.
pub fn decode_trimmed(tokens: &[u32]) -> String {
    let mut end = tokens.len();
    while end > 0 && (tokens[end - 1] == EOS || tokens[end - 1] == PAD) {
        end -= 1;
    }
    decode(&tokens[..end])
}

/// Byte index of a text token. BOS/EOS/PAD carry no byte position.
pub fn token_byte_index(token_pos: usize) -> Option<usize> {
    token_pos.checked_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_ascii() {
        let text = "Ticket 42: ip 10.0.0.1";
        let toks = encode(text);
        assert_eq!(toks[0], BOS);
        assert_eq!(*toks.last().unwrap(), EOS);
        assert_eq!(decode(&toks), text);
    }

    #[test]
    fn trimmed_decode_strips_specials_only_at_tail() {
        let mut toks = encode_prefix("ab");
        toks.push(EOS);
        toks.push(PAD);
        assert_eq!(decode_trimmed(&toks), "ab");
    }

    #[test]
    fn latin1_decode_matches_bytes() {
        let toks: Vec<u32> = vec![BOS, 200, 65, EOS];
        let s = decode(&toks);
        assert_eq!(s.chars().count(), 2);
        assert_eq!(s.chars().next().unwrap() as u32, 200);
    }
}
