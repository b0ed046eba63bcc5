//! Character-offset helpers.
//!
//! Every offset in this crate counts Unicode scalar values (`char`s), not
//! bytes, so that span annotations survive serialization to other languages
//! unchanged. These helpers translate between char offsets and Rust's
//! byte-indexed strings.

/// Number of Unicode scalar values in `s`.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Byte index of the `char_idx`-th character. `Some(s.len())` when
/// `char_idx == char_len(s)`, `None` beyond that.
pub fn char_to_byte(s: &str, char_idx: usize) -> Option<usize> {
    let mut count = 0;
    for (byte_idx, _) in s.char_indices() {
        if count == char_idx {
            return Some(byte_idx);
        }
        count += 1;
    }
    (char_idx == count).then_some(s.len())
}

/// Substring covering char offsets `start..end`, or `None` if out of bounds
/// or inverted.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let b0 = char_to_byte(s, start)?;
    let b1 = char_to_byte(s, end)?;
    Some(&s[b0..b1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_offsets() {
        assert_eq!(char_len("8 pm"), 4);
        assert_eq!(char_slice("book at 8 pm", 8, 12), Some("8 pm"));
        assert_eq!(char_slice("abc", 0, 3), Some("abc"));
        assert_eq!(char_slice("abc", 3, 3), Some(""));
        assert_eq!(char_slice("abc", 1, 4), None);
        assert_eq!(char_slice("abc", 2, 1), None);
    }

    #[test]
    fn multibyte_offsets() {
        let s = "café at 8";
        assert_eq!(char_len(s), 9);
        assert_eq!(char_slice(s, 0, 4), Some("café"));
        assert_eq!(char_slice(s, 8, 9), Some("8"));
    }
}
