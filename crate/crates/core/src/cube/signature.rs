use std::fmt;

use serde::{Deserialize, Serialize};

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit key of a sparse feature in the cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSignature(pub u64);

impl fmt::Display for FeatureSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Signature of a raw feature. Equal byte strings always map to equal
/// signatures; distinct strings collide with probability ~2^-64.
pub fn sign(raw_feature: &[u8]) -> FeatureSignature {
    FeatureSignature(fnv1a64(raw_feature))
}

pub fn sign_str(raw_feature: &str) -> FeatureSignature {
    sign(raw_feature.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    // Straight transcription of the published FNV-1a pseudo code, kept apart
    // from the fold-based implementation above.
    fn reference_fnv1a(data: &[u8]) -> u64 {
        let mut hash: u64 = 14695981039346656037;
        for octet in data {
            hash ^= *octet as u64;
            hash = hash.wrapping_mul(1099511628211);
        }
        hash
    }

    #[test]
    fn known_vectors() {
        assert_eq!(sign(b"").0, 0xcbf29ce484222325);
        assert_eq!(sign(b"a").0, 0xaf63dc4c8601ec8c);
        assert_eq!(sign(b"foobar").0, 0x85944171f73967e8);
    }

    #[test]
    fn deterministic_and_collision_free_on_sample() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut seen: HashMap<u64, Vec<u8>> = HashMap::with_capacity(1 << 20);
        for _ in 0..1_000_000 {
            let len = rng.random_range(1..24);
            let raw: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let s = sign(&raw);
            assert_eq!(s, sign(&raw));
            assert_eq!(s.0, reference_fnv1a(&raw));
            if let Some(prev) = seen.insert(s.0, raw.clone()) {
                assert_eq!(prev, raw, "collision between distinct inputs");
            }
        }
    }
}
