//! 64-bit content digests for run manifests and divergence reports.
//!
//! FNV-1a is deliberately simple: digests here identify artifact contents
//! for reproducibility bookkeeping, not for security.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Digest of an `f64` slice via its little-endian byte representation.
pub fn fnv1a64_f64(values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Formats a digest the way manifests store it: 16 lowercase hex digits.
pub fn to_hex(digest: u64) -> String {
    format!("{digest:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_known_fnv1a_vectors() {
        // Reference values for the 64-bit FNV-1a test suite.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn f64_digest_equals_byte_digest() {
        let values = [1.5f64, -0.25, 3.141592653589793];
        let mut bytes = Vec::new();
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(fnv1a64_f64(&values), fnv1a64(&bytes));
    }

    #[test]
    fn hex_formatting_is_sixteen_digits() {
        assert_eq!(to_hex(0x1), "0000000000000001");
        assert_eq!(to_hex(u64::MAX), "ffffffffffffffff");
    }
}
