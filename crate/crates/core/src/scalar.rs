//! Scalar abstraction: everything numeric is generic over [`Scalar`],
//! with `f64` as the default precision (see the crate-root aliases).

use num_traits::{Float, NumAssignOps};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};

/// Floating-point element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Tag written into serialized tensor headers.
    const DTYPE: u8;

    /// Bytes per element on the wire (little-endian IEEE 754).
    const WIDTH: usize;

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;

    /// One standard-normal draw.
    fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 2;
    const WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
