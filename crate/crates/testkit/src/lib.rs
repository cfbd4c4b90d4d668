//! Slow, obviously-correct reference implementations and seeded input
//! generators for cross-checking the runtime.
//!
//! Nothing in [`oracle`] reuses runtime code paths except the embedder, which
//! is a pure function of its input and shared on purpose.

pub mod gen;
pub mod oracle;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Deterministic generator for a test case number.
pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
