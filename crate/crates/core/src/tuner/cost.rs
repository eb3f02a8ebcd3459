//! Analytical latency cost model.
//!
//! The estimate for a program `(ff_splits, ax3_splits)` on a task with `F`
//! filters, `C` input channels, kernel `Kh x Kw`, and input spatial `H x W`
//! is defined — this formula is the contract, not an approximation claim —
//! as:
//!
//! ```text
//! tile    = last(ff_splits)                    # innermost filter tile
//! tiles   = ceil(F / tile)                     # parallel tiles, padded
//! macs    = H * W * Kh * Kw * C * tiles * tile
//! work    = macs * mac_cost / min(tiles, cores)
//! work   *= tile_penalty   if last(ff_splits) % vector_width != 0
//!                          or last(ax3_splits) % vector_width != 0
//! work   *= tile_penalty   if tile * C * Kh * Kw * 4 > l1_bytes
//! latency = work + parallel_overhead * tiles / cores
//! ```
//!
//! The `ceil` term rounds partial tiles up to full ones, so latency as a
//! function of the filter count is a step function: constant between
//! multiples of the innermost tile and strictly increasing across each
//! boundary. Work is divided by `min(tiles, cores)` — a schedule cannot use
//! more cores than it has tiles. The 4-byte element footprint `tile * C * Kh
//! * Kw * 4` models the weight working set of one tile.
//!
//! Everything is computed in exact rational arithmetic (profile floats are
//! binary fractions, hence exact), so candidate comparison and tie-breaking
//! are platform-stable. Only the final conversion to `f64` seconds rounds.

use num::{BigInt, BigRational, FromPrimitive, ToPrimitive};

use super::{DeviceProfile, Program, TuneError};
use crate::tasks::Task;

fn ratio_from_f64(value: f64) -> BigRational {
    BigRational::from_f64(value).expect("validated profile values are finite")
}

fn ratio_from_u128(value: u128) -> BigRational {
    BigRational::from_integer(BigInt::from(value))
}

pub(crate) fn ratio_to_f64(value: &BigRational) -> f64 {
    value.to_f64().expect("latency fits in f64")
}

fn check_axis(splits: &[usize], name: &'static str) -> Result<(), TuneError> {
    if splits.is_empty() {
        return Err(TuneError::InvalidProgram(name));
    }
    if splits.iter().any(|&f| f == 0) {
        return Err(TuneError::InvalidProgram("split factors must be at least 1"));
    }
    Ok(())
}

/// Exact-rational latency of `program` for `task` on `profile`.
pub fn estimate_latency_exact(
    program: &Program,
    task: &Task,
    profile: &DeviceProfile,
) -> Result<BigRational, TuneError> {
    check_axis(&program.ff_splits, "ff_splits is empty")?;
    check_axis(&program.ax3_splits, "ax3_splits is empty")?;

    let sig = &task.signature;
    let filters = sig.filters as u128;
    let tile = *program.ff_splits.last().unwrap() as u128;
    let tiles = filters.div_ceil(tile);
    let macs = sig.input_spatial.0 as u128
        * sig.input_spatial.1 as u128
        * sig.kernel.0 as u128
        * sig.kernel.1 as u128
        * sig.input_channels as u128
        * tiles
        * tile;

    let cores = profile.cores as u128;
    let mut work =
        ratio_from_u128(macs) * ratio_from_f64(profile.mac_cost) / ratio_from_u128(tiles.min(cores));

    let vw = profile.vector_width;
    let misaligned = program.ff_splits.last().unwrap() % vw != 0
        || program.ax3_splits.last().unwrap() % vw != 0;
    if misaligned {
        work *= ratio_from_f64(profile.tile_penalty);
    }
    let footprint = tile * sig.input_channels as u128 * sig.kernel.0 as u128 * sig.kernel.1 as u128 * 4;
    if footprint > profile.l1_bytes as u128 {
        work *= ratio_from_f64(profile.tile_penalty);
    }

    let overhead =
        ratio_from_f64(profile.parallel_overhead) * ratio_from_u128(tiles) / ratio_from_u128(cores);
    Ok(work + overhead)
}

/// Latency in seconds. See [`estimate_latency_exact`] for the formula.
pub fn estimate_latency(
    program: &Program,
    task: &Task,
    profile: &DeviceProfile,
) -> Result<f64, TuneError> {
    estimate_latency_exact(program, task, profile).map(|r| ratio_to_f64(&r))
}
