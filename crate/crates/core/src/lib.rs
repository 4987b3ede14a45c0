//! Three-agent deep Q-learning for steering an oblique plane onto an
//! anatomical goal plane inside a labeled voxel volume.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`]: voxel containers, the VVOL file format and intensity augmentation.
//! * [`phantom`]: procedural labeled phantoms and goal-plane derivation.
//! * [`geometry`]: plane algebra and nearest-neighbour oblique slicing.
//! * [`env`]: the three-agent episodic environment and its reward composition.
//! * [`replay`]: proportional prioritized replay over a sum tree.
//! * [`qnet`]: the multi-head action-value network, Double-Q targets and Adam.
//! * [`trainer`]: schedules, exploration and the synchronous training loop.
//! * [`eval`]: evaluation metrics and terminal-plane overlays.

pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod phantom;
pub mod qnet;
pub mod replay;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

/// Rounds to the nearest integer with ties going towards +infinity.
///
/// This is the only quantization rule used anywhere in the crate.
#[inline]
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// [`round_half_up`] followed by clamping into the 8-bit range.
#[inline]
pub fn quantize_u8(x: f64) -> u8 {
    round_half_up(x).clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_ties() {
        assert_eq!(round_half_up(127.5), 128.0);
        assert_eq!(round_half_up(-0.5), 0.0);
        assert_eq!(round_half_up(-1.5), -1.0);
        assert_eq!(round_half_up(2.4999), 2.0);
        assert_eq!(quantize_u8(300.0), 255);
        assert_eq!(quantize_u8(-3.0), 0);
    }
}
