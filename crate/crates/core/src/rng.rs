//! Seed derivation and resumable RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type SimRng = ChaCha8Rng;

const TOKEN_PREFIX: &str = "chacha8:v1";

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed rng token: {0}")]
pub struct TokenError(String);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed. Children with different salts never
/// depend on each other, so adding processes leaves existing streams alone.
pub fn derive_seed(parent: u64, salt: u64) -> u64 {
    splitmix64(parent ^ splitmix64(salt))
}

/// Stable 64-bit FNV-1a; used to salt seeds by name.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Encodes the full generator position as an opaque string.
pub fn encode_rng(rng: &SimRng) -> String {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    format!(
        "{TOKEN_PREFIX}:{seed}:{}:{}",
        rng.get_stream(),
        rng.get_word_pos()
    )
}

pub fn decode_rng(token: &str) -> Result<SimRng, TokenError> {
    let err = || TokenError(token.to_string());
    let rest = token.strip_prefix(TOKEN_PREFIX).ok_or_else(err)?;
    let mut parts = rest.strip_prefix(':').ok_or_else(err)?.split(':');
    let (seed_hex, stream, pos) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(c), None) => (a, b, c),
        _ => return Err(err()),
    };
    if seed_hex.len() != 64 {
        return Err(err());
    }
    let mut seed = [0u8; 32];
    for (i, byte) in seed.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| err())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.parse().map_err(|_| err())?);
    rng.set_word_pos(pos.parse().map_err(|_| err())?);
    Ok(rng)
}
