//! Synthetic datasets.
//!
//! The detection set renders colored shapes on noise backgrounds; every
//! image is regenerated bit-exactly from `(seed, index)`, so only the box
//! annotations are kept in memory. The offset task is a constructed
//! regression problem whose optimum is known in closed form: two branches
//! share one input-dependent signal but differ by fixed per-channel
//! offsets, exactly the situation an observation-independent constant can
//! absorb and a purely shared predictor cannot.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl TargetBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

#[derive(Clone, Copy, Debug)]
struct SceneObject {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    color: [f64; 3],
}

fn per_image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix-style decorrelation of the per-image streams
    let mut s = seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15);
    s ^= s >> 30;
    s = s.wrapping_mul(0xBF58476D1CE4E5B9);
    s ^= s >> 27;
    ChaCha8Rng::seed_from_u64(s)
}

fn sample_scene(image_size: usize, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let s = image_size as f64;
    let n_objects = rng.random_range(1..=3usize);
    let base_colors = [
        [0.90, 0.25, 0.20],
        [0.20, 0.85, 0.25],
        [0.25, 0.30, 0.90],
        [0.85, 0.80, 0.20],
    ];
    (0..n_objects)
        .map(|_| {
            let class = rng.random_range(0..SHAPE_CLASSES);
            let w = s * rng.random_range(0.15..0.45);
            let h = s * rng.random_range(0.15..0.45);
            let cx = rng.random_range(w / 2.0 + 1.0..s - w / 2.0 - 1.0);
            let cy = rng.random_range(h / 2.0 + 1.0..s - h / 2.0 - 1.0);
            let mut color = base_colors[class];
            for c in &mut color {
                let jitter: f64 = rng.random_range(-0.08..0.08);
                *c = (*c + jitter).clamp(0.05, 1.0);
            }
            SceneObject { class, cx, cy, w, h, color }
        })
        .collect()
}

fn object_covers(obj: &SceneObject, px: f64, py: f64) -> bool {
    let (rx, ry) = (obj.w / 2.0, obj.h / 2.0);
    let (dx, dy) = (px - obj.cx, py - obj.cy);
    match obj.class {
        // filled rectangle
        0 => dx.abs() <= rx && dy.abs() <= ry,
        // filled ellipse
        1 => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
        // upward triangle: apex at top center, base at bottom
        2 => {
            if dy < -ry || dy > ry {
                return false;
            }
            // linear interpolation of the half-width from apex to base
            let frac = (dy + ry) / (2.0 * ry);
            dx.abs() <= rx * frac
        }
        // ring: elliptical annulus
        _ => {
            let r = (dx / rx).powi(2) + (dy / ry).powi(2);
            (0.25..=1.0).contains(&r)
        }
    }
}

/// Procedurally generated detection corpus. Images render on demand.
#[derive(Clone, Debug)]
pub struct SyntheticDetectionSet {
    pub image_size: usize,
    pub seed: u64,
    pub targets: Vec<Vec<TargetBox>>,
}

/// Deterministic synthetic detection data; boxes are always inside the
/// image and every image holds at least one object.
pub fn gen_detection_data(n: usize, image_size: usize, seed: u64) -> SyntheticDetectionSet {
    let targets = (0..n)
        .map(|i| {
            let mut rng = per_image_rng(seed, i);
            sample_scene(image_size, &mut rng)
                .iter()
                .map(|o| TargetBox {
                    x1: o.cx - o.w / 2.0,
                    y1: o.cy - o.h / 2.0,
                    x2: o.cx + o.w / 2.0,
                    y2: o.cy + o.h / 2.0,
                    class_id: o.class,
                })
                .collect()
        })
        .collect();
    SyntheticDetectionSet {
        image_size,
        seed,
        targets,
    }
}

impl SyntheticDetectionSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Renders image `index` as `[3, S, S]`, bit-exactly reproducible.
    pub fn render_image<F: Scalar>(&self, index: usize) -> Tensor<F> {
        let s = self.image_size;
        let mut rng = per_image_rng(self.seed, index);
        let objects = sample_scene(s, &mut rng);
        // low-amplitude background noise, channel-interleaved draw order
        let mut data = vec![F::zero(); 3 * s * s];
        for px in 0..s * s {
            for c in 0..3 {
                data[c * s * s + px] = F::from_f64(rng.random_range(0.0..0.25));
            }
        }
        for obj in &objects {
            for y in 0..s {
                for x in 0..s {
                    if object_covers(obj, x as f64 + 0.5, y as f64 + 0.5) {
                        for c in 0..3 {
                            data[c * s * s + y * s + x] = F::from_f64(obj.color[c]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![3, s, s], data).expect("render buffer matches shape")
    }

    pub fn render_batch<F: Scalar>(&self, indices: &[usize]) -> Tensor<F> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend_from_slice(self.render_image::<F>(i).data());
        }
        Tensor::new(vec![indices.len(), 3, s, s], data).expect("batch buffer matches shape")
    }

    /// Multi-label presence vector for the classification task.
    pub fn multilabel(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; SHAPE_CLASSES];
        for t in &self.targets[index] {
            v[t.class_id] = 1.0;
        }
        v
    }

    /// Identity used for embedding pairs: the class of the largest object.
    pub fn dominant_class(&self, index: usize) -> usize {
        self.targets[index]
            .iter()
            .max_by(|a, b| a.area().total_cmp(&b.area()))
            .map(|t| t.class_id)
            .expect("every image has at least one object")
    }

    pub fn class_histogram(&self) -> [usize; SHAPE_CLASSES] {
        let mut h = [0usize; SHAPE_CLASSES];
        for boxes in &self.targets {
            for b in boxes {
                h[b.class_id] += 1;
            }
        }
        h
    }
}

/// Lloyd k-means over target (w, h) pairs, for anchor selection. Returns
/// `num_scales` groups of `per_scale` anchors, sorted by area so finer
/// scales get smaller anchors.
pub fn kmeans_anchors(
    set: &SyntheticDetectionSet,
    num_scales: usize,
    per_scale: usize,
    seed: u64,
) -> Vec<Vec<(f64, f64)>> {
    let points: Vec<(f64, f64)> = set
        .targets
        .iter()
        .flatten()
        .map(|t| (t.width(), t.height()))
        .collect();
    let k = num_scales * per_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(f64, f64)> = (0..k)
        .map(|_| points[rng.random_range(0..points.len())])
        .collect();
    for _ in 0..25 {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for p in &points {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (ci, c) in centers.iter().enumerate() {
                let d = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            sums[best].0 += p.0;
            sums[best].1 += p.1;
            sums[best].2 += 1;
        }
        for (ci, s) in sums.iter().enumerate() {
            if s.2 > 0 {
                centers[ci] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    centers
        .chunks(per_scale)
        .map(|c| c.to_vec())
        .collect()
}

/// Constructed two-branch regression task with known optima.
#[derive(Clone, Debug)]
pub struct OffsetTaskSet<F> {
    /// `[n, input_dim]`
    pub inputs: Tensor<F>,
    /// `[n, channels]` per branch
    pub targets_a: Tensor<F>,
    pub targets_b: Tensor<F>,
    /// hidden generating map `[channels, input_dim]`
    pub hidden: Tensor<F>,
    pub delta_scale: f64,
    pub noise_std: f64,
}

/// Solves `A x = b` for a small symmetric positive-definite system by
/// Gaussian elimination with partial pivoting.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty system");
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / p;
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

/// Projects each noise column out of the span of `[inputs | 1]` and
/// rescales it to mean-square exactly `std^2`. A linear-plus-constant
/// predictor then cannot fit any part of the noise, so the finite-sample
/// loss floors coincide with the population floors.
fn orthogonalize_noise(noise: &mut [f64], inputs_f64: &[f64], n: usize, d: usize, channels: usize, std: f64) {
    let dim = d + 1;
    // normal equations of the design matrix [x | 1]
    let design = |row: usize, col: usize| -> f64 {
        if col < d {
            inputs_f64[row * d + col]
        } else {
            1.0
        }
    };
    let mut gram = vec![vec![0.0; dim]; dim];
    for row in 0..n {
        for i in 0..dim {
            for j in 0..dim {
                gram[i][j] += design(row, i) * design(row, j);
            }
        }
    }
    for ch in 0..channels {
        let mut rhs = vec![0.0; dim];
        for row in 0..n {
            let e = noise[row * channels + ch];
            for i in 0..dim {
                rhs[i] += design(row, i) * e;
            }
        }
        let coef = solve_small(gram.clone(), rhs);
        let mut sum_sq = 0.0;
        for row in 0..n {
            let mut fit = 0.0;
            for i in 0..dim {
                fit += design(row, i) * coef[i];
            }
            let e = &mut noise[row * channels + ch];
            *e -= fit;
            sum_sq += *e * *e;
        }
        let scale = std / (sum_sq / n as f64).sqrt();
        for row in 0..n {
            noise[row * channels + ch] *= scale;
        }
    }
}

/// Generates the offset task: `y_A = h(x) + delta/2 + noise`,
/// `y_B = h(x) - delta/2 + noise` with `h` a fixed random linear map.
///
/// Analytic training-loss floors (mean squared error, averaged over both
/// branches): a model with per-branch additive constants can reach
/// `noise_std^2`; a purely shared predictor is minimized by the midpoint
/// of the branches and cannot go below `noise_std^2 + delta_scale^2/4`.
/// The noise is orthogonalized against the linear feature space and
/// scaled to mean-square exactly `noise_std^2`, so those floors hold
/// exactly on the generated sample, not just in expectation.
pub fn gen_offset_data<F: Scalar>(
    n: usize,
    input_dim: usize,
    channels: usize,
    delta_scale: f64,
    noise_std: f64,
    seed: u64,
) -> Result<OffsetTaskSet<F>> {
    if delta_scale < 0.0 || noise_std < 0.0 || n == 0 || input_dim == 0 || channels == 0 {
        return Err(Error::InvalidConfig(
            "offset task needs non-negative scales and positive sizes".into(),
        ));
    }
    if noise_std > 0.0 && n <= input_dim + 1 {
        return Err(Error::InvalidConfig(
            "offset task needs more samples than input features".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = Tensor::<F>::randn(&[channels, input_dim], 0.0, (1.0 / input_dim as f64).sqrt(), &mut rng);
    let inputs = Tensor::<F>::randn(&[n, input_dim], 0.0, 1.0, &mut rng);
    let base = crate::kernels::matmul(&inputs, &hidden, false, true)?;
    let inputs_f64: Vec<f64> = inputs.data().iter().map(|&v| v.to_f64()).collect();

    let mut gen_noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut e: Vec<f64> = (0..n * channels)
            .map(|_| f64::randn(rng) * noise_std)
            .collect();
        if noise_std > 0.0 {
            orthogonalize_noise(&mut e, &inputs_f64, n, input_dim, channels, noise_std);
        }
        e
    };
    let noise_a = gen_noise(&mut rng);
    let noise_b = gen_noise(&mut rng);

    let half = delta_scale / 2.0;
    let mut ya = vec![F::zero(); n * channels];
    let mut yb = vec![F::zero(); n * channels];
    for i in 0..n * channels {
        ya[i] = base.data()[i] + F::from_f64(half) + F::from_f64(noise_a[i]);
        yb[i] = base.data()[i] - F::from_f64(half) + F::from_f64(noise_b[i]);
    }
    Ok(OffsetTaskSet {
        inputs,
        targets_a: Tensor::new(vec![n, channels], ya)?,
        targets_b: Tensor::new(vec![n, channels], yb)?,
        hidden,
        delta_scale,
        noise_std,
    })
}

impl<F: Scalar> OffsetTaskSet<F> {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.targets_a.shape()[1]
    }

    /// Population floor for a model with per-branch constants.
    pub fn implicit_floor(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    /// Population floor for a purely shared predictor.
    pub fn baseline_floor(&self) -> f64 {
        self.noise_std * self.noise_std + self.delta_scale * self.delta_scale / 4.0
    }

    /// Empirical loss of the oracle predictor `h(x) + m` shared across
    /// both branches, as a function of the scalar midpoint `m`.
    pub fn shared_oracle_loss(&self, midpoint: f64) -> f64 {
        let base = crate::kernels::matmul(&self.inputs, &self.hidden, false, true)
            .expect("hidden map applies");
        let m = F::from_f64(midpoint);
        let n = base.numel() as f64;
        let mut acc = 0.0;
        for i in 0..base.numel() {
            let p = base.data()[i] + m;
            let da = (p - self.targets_a.data()[i]).to_f64();
            let db = (p - self.targets_b.data()[i]).to_f64();
            acc += (da * da + db * db) / 2.0;
        }
        acc / n
    }

    /// Brute-force grid search over the shared midpoint; returns
    /// `(best_midpoint, best_loss)`.
    pub fn grid_search_shared_floor(&self, lo: f64, hi: f64, steps: usize) -> (f64, f64) {
        let mut best = (lo, f64::MAX);
        for i in 0..=steps {
            let m = lo + (hi - lo) * i as f64 / steps as f64;
            let loss = self.shared_oracle_loss(m);
            if loss < best.1 {
                best = (m, loss);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_data_is_seed_deterministic() {
        let a = gen_detection_data(16, 64, 9);
        let b = gen_detection_data(16, 64, 9);
        assert_eq!(a.targets, b.targets);
        let img_a = a.render_image::<f64>(7);
        let img_b = b.render_image::<f64>(7);
        assert_eq!(img_a, img_b);
        let c = gen_detection_data(16, 64, 10);
        assert_ne!(a.targets, c.targets);
    }

    #[test]
    fn boxes_stay_in_bounds_with_at_least_one_object() {
        let set = gen_detection_data(10_000, 64, 3);
        for boxes in &set.targets {
            assert!(!boxes.is_empty());
            for b in boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.x2 > b.x1 && b.y2 > b.y1);
            }
        }
    }

    #[test]
    fn class_histogram_is_roughly_uniform() {
        let set = gen_detection_data(10_000, 64, 4);
        let h = set.class_histogram();
        let total: usize = h.iter().sum();
        for &count in &h {
            let frac = count as f64 / total as f64;
            assert!((frac - 0.25).abs() < 0.025, "class fraction {frac}");
        }
    }

    #[test]
    fn rendered_shapes_paint_object_pixels() {
        let set = gen_detection_data(4, 64, 11);
        let img = set.render_image::<f64>(0);
        // object interiors are brighter than the 0..0.25 background in at
        // least one channel; check the center pixel of each target
        for t in &set.targets[0] {
            let (cx, cy) = t.center();
            let (x, y) = (cx as usize, cy as usize);
            let v = (0..3)
                .map(|c| img.data()[c * 64 * 64 + y * 64 + x])
                .fold(0.0f64, f64::max);
            // ring centers are hollow; skip those
            if t.class_id != 3 {
                assert!(v > 0.3, "object pixel should be painted, got {v}");
            }
        }
    }

    #[test]
    fn kmeans_anchor_layout() {
        let set = gen_detection_data(200, 64, 5);
        let anchors = kmeans_anchors(&set, 3, 3, 1);
        assert_eq!(anchors.len(), 3);
        assert!(anchors.iter().all(|a| a.len() == 3));
        let area = |v: &Vec<(f64, f64)>| v.iter().map(|p| p.0 * p.1).sum::<f64>();
        assert!(area(&anchors[0]) <= area(&anchors[1]));
        assert!(area(&anchors[1]) <= area(&anchors[2]));
    }

    #[test]
    fn offset_floors_degenerate_cases() {
        // zero offset: both floors coincide at the noise variance
        let d0 = gen_offset_data::<f64>(64, 8, 4, 0.0, 0.05, 2).unwrap();
        assert_eq!(d0.implicit_floor(), d0.baseline_floor());
        // zero noise with gap g: baseline floor g^2/4, implicit floor 0,
        // verified by the grid-search oracle
        let g = 0.5;
        let d1 = gen_offset_data::<f64>(512, 8, 4, g, 0.0, 2).unwrap();
        assert_eq!(d1.implicit_floor(), 0.0);
        assert_eq!(d1.baseline_floor(), g * g / 4.0);
        let (best_m, best_loss) = d1.grid_search_shared_floor(-1.0, 1.0, 400);
        assert!(best_m.abs() < 0.01, "midpoint of symmetric offsets is 0, got {best_m}");
        assert!((best_loss - g * g / 4.0).abs() / (g * g / 4.0) < 1e-3);
    }

    #[test]
    fn offset_data_is_seed_deterministic() {
        let a = gen_offset_data::<f64>(32, 8, 4, 0.5, 0.05, 7).unwrap();
        let b = gen_offset_data::<f64>(32, 8, 4, 0.5, 0.05, 7).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.targets_a, b.targets_a);
        assert_eq!(a.targets_b, b.targets_b);
    }
}
