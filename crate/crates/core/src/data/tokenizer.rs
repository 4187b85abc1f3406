/// Byte-level tokenizer: every UTF-8 byte is its own token, followed by a
/// small block of reserved special ids.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BYTE_VOCAB: usize = 256;
    pub const BOS: usize = 256;
    pub const EOS: usize = 257;
    pub const VOCAB_SIZE: usize = 258;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Drops special ids and replaces invalid UTF-8 sequences.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < Self::BYTE_VOCAB)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let t = ByteTokenizer;
        let ids = t.encode("héllo");
        assert_eq!(ids.len(), 6);
        assert_eq!(t.decode(&ids), "héllo");
        let mut with_special = vec![ByteTokenizer::BOS];
        with_special.extend(&ids);
        assert_eq!(t.decode(&with_special), "héllo");
    }
}
