//! Seeded English-like text: Zipf-distributed invented words with a sparse
//! word-to-word transition structure, punctuation and paragraphs.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: [&str; 20] = [
    "", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "st", "th", "sh",
    "ch", "br",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ea", "ou", "ai"];
const CODAS: [&str; 10] = ["", "", "n", "r", "s", "t", "l", "nd", "ng", "ck"];

const WORDS: usize = 1500;
const SUCCESSORS: usize = 6;

fn word<R: Rng>(rng: &mut R) -> String {
    let syllables = 1 + rng.random_range(0..3) + usize::from(rng.random_bool(0.1));
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    }
    w
}

/// At least `min_bytes` bytes of text drawn from the stream seeded by `seed`.
pub fn english_like(seed: u64, min_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..WORDS).map(|_| word(&mut rng)).collect();
    let zipf = WeightedIndex::new((0..WORDS).map(|i| 1.0 / (i as f64 + 1.0))).unwrap();
    let next: Vec<Vec<usize>> = (0..WORDS)
        .map(|_| (0..SUCCESSORS).map(|_| zipf.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(min_bytes + 256);
    let mut prev = zipf.sample(&mut rng);
    while out.len() < min_bytes {
        for _ in 0..rng.random_range(3..7) {
            let len = rng.random_range(5..16);
            for i in 0..len {
                let w = if rng.random_bool(0.75) {
                    next[prev][rng.random_range(0..SUCCESSORS)]
                } else {
                    zipf.sample(&mut rng)
                };
                prev = w;
                let text = &words[w];
                if i == 0 {
                    let mut chars = text.chars();
                    let first = chars.next().unwrap().to_ascii_uppercase();
                    out.push(first as u8);
                    out.extend(chars.as_str().bytes());
                } else {
                    out.push(b' ');
                    out.extend(text.bytes());
                }
                if i + 1 < len && rng.random_bool(0.08) {
                    out.push(b',');
                }
            }
            out.extend_from_slice(if rng.random_bool(0.1) { b"?" } else { b"." });
            out.push(b' ');
        }
        out.pop();
        out.push(b'\n');
    }
    out
}
