//! Whitespace tokenization for the local providers.
//!
//! Crude on purpose: splitting on Unicode whitespace is fully
//! deterministic and enumerable, which the oracle role demands. Offsets
//! are Unicode scalar indices into the tokenized stream.

/// A token plus the character offset of its first character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub char_offset: usize,
}

/// Splits on runs of Unicode whitespace.
pub fn whitespace_tokens(stream: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (i, ch) in stream.chars().enumerate() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(Word {
                    text: std::mem::take(&mut current),
                    char_offset: start,
                });
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(Word {
            text: current,
            char_offset: start,
        });
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_offsets() {
        let w = whitespace_tokens("  a bc\n\nd ");
        assert_eq!(
            w,
            vec![
                Word { text: "a".into(), char_offset: 2 },
                Word { text: "bc".into(), char_offset: 4 },
                Word { text: "d".into(), char_offset: 8 },
            ]
        );
    }

    #[test]
    fn offsets_are_char_indices_not_bytes() {
        // "你好 ab": the multi-byte chars must count as one each.
        let w = whitespace_tokens("你好 ab");
        assert_eq!(w[0].char_offset, 0);
        assert_eq!(w[1].char_offset, 3);
        assert_eq!(w[1].text, "ab");
    }

    #[test]
    fn empty_and_blank_streams() {
        assert!(whitespace_tokens("").is_empty());
        assert!(whitespace_tokens(" \t\n").is_empty());
    }
}
