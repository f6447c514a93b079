//! Tokenization and the stable feature hash shared by every featurizer.

/// FNV-1a offset basis and prime (64-bit).
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Default seed for all hashed feature spaces.
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_0f_7f1d;

/// Lowercases, splits on whitespace and strips surrounding punctuation.
/// Tokens that are pure punctuation are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Splits a semi-structured query such as `"Ada Lovelace, employer, ?"` into
/// comma-separated segments and tokenizes each one. Empty segments are kept
/// so that segment positions stay stable.
pub fn tokenize_segments(text: &str) -> Vec<Vec<String>> {
    text.split(',').map(tokenize).collect()
}

/// Seeded 64-bit hash: FNV-1a over the seed bytes, a namespace tag and the
/// parts (separated by 0xff), followed by a splitmix64 finalizer.
pub fn hash_parts(seed: u64, namespace: &str, parts: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for b in namespace.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for part in parts {
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
        for b in part.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash into `n_buckets` buckets. `n_buckets` must be a power of two.
#[inline]
pub fn bucket(hash: u64, n_buckets: usize) -> u32 {
    debug_assert!(n_buckets.is_power_of_two());
    (hash & (n_buckets as u64 - 1)) as u32
}

/// Word n-grams of order 1 and 2, rendered as `"a"` and `"a b"`.
pub fn unigrams_and_bigrams(tokens: &[String]) -> impl Iterator<Item = String> + '_ {
    let uni = tokens.iter().cloned();
    let bi = tokens.windows(2).map(|w| format!("{} {}", w[0], w[1]));
    uni.chain(bi)
}

/// Streaming FNV-style fingerprint over 64-bit words, used to detect
/// parameter or index changes.
#[derive(Debug, Clone)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint(FNV_OFFSET)
    }
}

impl Fingerprint {
    pub fn write_u64(&mut self, word: u64) {
        self.0 ^= word;
        self.0 = self.0.wrapping_mul(FNV_PRIME).rotate_left(23);
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(buf));
        }
        self.write_u64(bytes.len() as u64);
    }

    pub fn finish(&self) -> u64 {
        splitmix64(self.0)
    }
}
