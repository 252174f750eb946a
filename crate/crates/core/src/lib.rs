pub mod data;
pub mod encoders;
pub mod eval;
pub mod experiment;
pub mod longcap;
pub mod numerics;
pub mod tokenizer;
pub mod trainer;

/// 64-bit FNV-1a; stable across platforms and releases, used to derive
/// per-name random streams.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
