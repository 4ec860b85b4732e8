//! Configuration, feature files, training/evaluation orchestration and the
//! command implementations behind the CLI.

pub mod commands;
pub mod config;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod train;

/// Independent child seed for stream `tag` (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
