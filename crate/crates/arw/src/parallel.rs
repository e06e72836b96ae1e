//! Deterministic replica execution and seed derivation.
//!
//! Monte Carlo campaigns map a closure over replica indices. Replica seeds
//! are pure functions of `(root_seed, domain, cell, replica)`, results are
//! collected in replica order, and any reduction happens sequentially over
//! that ordered buffer — so outputs are bit-identical no matter how many
//! worker threads run the map.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Domain tags keep seed streams for different purposes disjoint.
pub mod domain {
    /// Instruction stacks consumed by the toppling engine.
    pub const INSTRUCTIONS: u64 = 0x5349_5445_5749_5345;
    /// Initial-configuration sampling.
    pub const INITIAL: u64 = 0x494e_4954_4c41_5753;
    /// Free single-particle walks (escape / tail estimates).
    pub const WALK: u64 = 0x5741_4c4b_5355_4253;
    /// Scratch randomness for randomized scheduler policies.
    pub const SCHEDULER: u64 = 0x5343_4845_4455_4c45;
}

/// 64-bit finalizer (Stafford mix 13, the SplitMix64 output function).
/// Fixed for the life of the artifact so replays are portable.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

pub(crate) const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Derive a replica seed from a root seed. Each argument is folded through
/// one avalanche round so nearby indices land far apart.
#[inline]
pub fn derive_seed(root: u64, domain: u64, cell: u64, replica: u64) -> u64 {
    let mut h = mix64(root ^ domain);
    h = mix64(h ^ cell.wrapping_mul(GOLDEN));
    h = mix64(h ^ replica.wrapping_mul(GOLDEN));
    h
}

/// Configure the global worker pool size. A no-op without the `parallel`
/// feature; results never depend on the pool size either way.
#[cfg(feature = "parallel")]
pub fn set_global_threads(n: usize) -> std::result::Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
pub fn set_global_threads(_n: usize) -> std::result::Result<(), String> {
    Ok(())
}

/// Map `f` over replica indices `0..replicas`, preserving index order.
///
/// With the `parallel` feature this fans out across the rayon pool;
/// otherwise it runs sequentially. Both paths return identical vectors.
pub fn replica_map<T, F>(replicas: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        replica_map_par(replicas, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        replica_map_seq(replicas, f)
    }
}

/// Sequential replica map. Kept unconditionally compiled so benchmarks can
/// compare it against the rayon path.
pub fn replica_map_seq<T, F>(replicas: u64, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..replicas).map(f).collect()
}

/// Rayon-parallel replica map; `collect` on an indexed iterator preserves
/// replica order.
#[cfg(feature = "parallel")]
pub fn replica_map_par<T, F>(replicas: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..replicas).into_par_iter().map(f).collect()
}
