//! Dense row-major tensors. No strided views: every op produces a fresh
//! buffer, which keeps backward passes and equality tests simple at the
//! sizes this crate targets.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};

/// Dense n-dimensional array of `F` in row-major order.
///
/// Scalars are represented with shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Normal samples with the given mean and standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a shape-`[1]` tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max))
    }

    /// FNV-1a over the little-endian bit patterns, for human-readable
    /// parameter digests in reports.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut buf = Vec::with_capacity(F::WIDTH);
        for &x in &self.data {
            buf.clear();
            x.write_le(&mut buf);
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Output shape for trailing-dimension broadcasting: aligned from the last
/// axis, each pair of extents must be equal or one of them must be 1.
pub fn broadcast_shape(lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let a = if i < lhs.len() { lhs[lhs.len() - 1 - i] } else { 1 };
        let b = if i < rhs.len() { rhs[rhs.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if a == b || b == 1 {
            a
        } else if a == 1 {
            b
        } else {
            return Err(Error::Broadcast {
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` expanded to `out` rank, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                strides[i - offset]
            }
        })
        .collect()
}

/// Elementwise combine with trailing-dimension broadcasting.
pub fn broadcast_zip<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape == b.shape {
        // fast path: same layout
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..numel {
        data.push(f(a.data[off_a], b.data[off_b]));
        // odometer increment from the last axis
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `grad` down to `target_shape` over the axes that were broadcast.
/// This is the backward rule for a broadcast operand: its gradient is the
/// full gradient summed over every expanded dimension.
pub fn reduce_to_shape<F: Scalar>(grad: &Tensor<F>, target_shape: &[usize]) -> Tensor<F> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(target_shape, out_shape);
    let numel_t: usize = target_shape.iter().product();
    let mut acc = vec![F::zero(); numel_t];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_t = 0usize;
    for &g in grad.data() {
        acc[off_t] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_t += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_t -= st[ax] * out_shape[ax];
        }
    }
    Tensor::new(target_shape.to_vec(), acc).expect("reduce_to_shape: shape/data agree")
}

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const TENSOR_VERSION: u8 = 1;

impl<F: Scalar> Tensor<F> {
    /// Serialize as: magic `TNSR`, version, dtype tag, rank, extents as
    /// u64 LE, then row-major little-endian IEEE 754 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[TENSOR_VERSION, F::DTYPE, self.rank() as u8, 0])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * F::WIDTH);
        for &x in &self.data {
            x.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        if head[4] != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
        }
        if head[5] != F::DTYPE {
            return Err(Error::Format(format!(
                "dtype tag {} does not match element type (expected {})",
                head[5],
                F::DTYPE
            )));
        }
        let rank = head[6] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * F::WIDTH];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(F::WIDTH).map(F::read_le).collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shape(&[1, 4, 8, 8], &[4, 1, 1]).unwrap(),
            vec![1, 4, 8, 8]
        );
        assert_eq!(broadcast_shape(&[5], &[3, 5]).unwrap(), vec![3, 5]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn broadcast_zip_matches_scalar_loop() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[3, 1], |i| 10.0 * (i as f64 + 1.0));
        let out = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        for n in 0..2 {
            for c in 0..3 {
                for k in 0..4 {
                    let i = (n * 3 + c) * 4 + k;
                    assert_eq!(out.data()[i], a.data()[i] + 10.0 * (c as f64 + 1.0));
                }
            }
        }
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let g = Tensor::<f64>::ones(&[2, 3, 4]);
        let r = reduce_to_shape(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&x| x == 8.0));
        let r2 = reduce_to_shape(&g, &[1]);
        assert_eq!(r2.data(), &[24.0]);
    }

    #[test]
    fn serialization_roundtrip_is_bit_exact() {
        let t = Tensor::<f64>::from_fn(&[3, 2], |i| (i as f64).sin() * 1e-3 + 0.1);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f64>::read_from(&mut &buf[..]).unwrap();
        assert_eq!(t, back);
        // f32 payload refuses to parse as f64
        let t32 = Tensor::<f32>::ones(&[2]);
        let mut b32 = Vec::new();
        t32.write_to(&mut b32).unwrap();
        assert!(Tensor::<f64>::read_from(&mut &b32[..]).is_err());
    }

    #[test]
    fn zero_extent_shapes_are_rejected() {
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2], vec![1.0]).is_err());
    }
}
