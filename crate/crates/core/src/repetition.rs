//! Removal of immediately repeated n-token blocks from decoder output.

/// Scans left to right; whenever the `n` tokens starting at `i` equal the
/// `n` tokens just before `i`, the later block is dropped and the same
/// position is checked again. Passes repeat until nothing changes. A tail
/// too short to hold a repeated block is kept as is.
pub fn remove_ngram_repetitions<T: PartialEq + Clone>(tokens: &[T], n: usize) -> Vec<T> {
    let mut out = tokens.to_vec();
    if n == 0 {
        return out;
    }
    loop {
        let mut changed = false;
        let mut i = n;
        while i + n <= out.len() {
            if out[i..i + n] == out[i - n..i] {
                out.drain(i..i + n);
                changed = true;
            } else {
                i += 1;
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Default block length for decoded transcripts.
pub const DEFAULT_NGRAM: usize = 5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_duplicate_block() {
        let t: Vec<char> = "abcdeabcde".chars().collect();
        assert_eq!(remove_ngram_repetitions(&t, 5), "abcde".chars().collect::<Vec<_>>());
    }

    #[test]
    fn too_short_to_repeat() {
        let t = ['a', 'b', 'a', 'b'];
        assert_eq!(remove_ngram_repetitions(&t, 5), t.to_vec());
    }

    #[test]
    fn long_run_of_one_token() {
        // Twelve copies: one block of five is dropped, leaving seven, which
        // is too short to hold two adjacent blocks of five.
        assert_eq!(remove_ngram_repetitions(&['x'; 12], 5), vec!['x'; 7]);
    }

    #[test]
    fn triple_block_collapses_to_one() {
        let t = [1, 2, 1, 2, 1, 2, 3];
        assert_eq!(remove_ngram_repetitions(&t, 2), vec![1, 2, 3]);
    }
}
