//! Detector output decoding. Center offsets decode additively inside the
//! owning grid cell; box sizes decode multiplicatively against the anchor.

use crate::error::{Error, Result};
use crate::network::DetectionOutput;
use crate::scalar::Scalar;

/// Clamp bound on the raw size channels before exponentiation.
pub const SIZE_CLAMP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// objectness times best class probability
    pub score: f64,
    pub class_id: usize,
    pub objectness: f64,
}

impl DecodedBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes one cell of one anchor. `values` holds the per-anchor block
/// `[tx, ty, tw, th, obj, cls...]`.
pub fn decode_cell(
    values: &[f64],
    grid_x: usize,
    grid_y: usize,
    stride: usize,
    anchor: (f64, f64),
) -> DecodedBox {
    let bx = (sigmoid(values[0]) + grid_x as f64) * stride as f64;
    let by = (sigmoid(values[1]) + grid_y as f64) * stride as f64;
    let bw = anchor.0 * values[2].clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
    let bh = anchor.1 * values[3].clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
    let objectness = sigmoid(values[4]);
    let (mut class_id, mut best) = (0usize, f64::NEG_INFINITY);
    for (k, &v) in values[5..].iter().enumerate() {
        if v > best {
            best = v;
            class_id = k;
        }
    }
    DecodedBox {
        x1: bx - bw / 2.0,
        y1: by - bh / 2.0,
        x2: bx + bw / 2.0,
        y2: by + bh / 2.0,
        score: objectness * sigmoid(best),
        class_id,
        objectness,
    }
}

/// Decodes every cell of every scale into per-image box lists, keeping
/// boxes whose score reaches `conf_threshold`.
pub fn decode_boxes<F: Scalar>(
    output: &DetectionOutput<F>,
    conf_threshold: f64,
) -> Result<Vec<Vec<DecodedBox>>> {
    let block = 5 + output.num_classes;
    let batch = output.maps.first().map_or(0, |m| m.shape()[0]);
    let mut boxes = vec![Vec::new(); batch];
    for (scale, map) in output.maps.iter().enumerate() {
        let expect_c = output.anchors_per_scale * block;
        if map.rank() != 4 || map.shape()[1] != expect_c || map.shape()[0] != batch {
            return Err(Error::ShapeMismatch {
                op: "decode_boxes",
                lhs: map.shape().to_vec(),
                rhs: vec![batch, expect_c],
            });
        }
        let (h, w) = (map.shape()[2], map.shape()[3]);
        let stride = output.strides[scale];
        let data = map.data();
        let mut values = vec![0.0f64; block];
        for n in 0..batch {
            for a in 0..output.anchors_per_scale {
                let anchor = output.anchors[scale][a];
                for gy in 0..h {
                    for gx in 0..w {
                        for (c, v) in values.iter_mut().enumerate() {
                            let ch = a * block + c;
                            *v = data[((n * expect_c + ch) * h + gy) * w + gx].to_f64();
                        }
                        let b = decode_cell(&values, gx, gy, stride, anchor);
                        if b.score >= conf_threshold {
                            boxes[n].push(b);
                        }
                    }
                }
            }
        }
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn output_from(map: Tensor<f64>, stride: usize, anchors: Vec<(f64, f64)>) -> DetectionOutput<f64> {
        let a = anchors.len();
        let k = map.shape()[1] / a - 5;
        DetectionOutput {
            maps: vec![map],
            anchors: vec![anchors],
            strides: vec![stride],
            anchors_per_scale: a,
            num_classes: k,
        }
    }

    #[test]
    fn zero_logits_decode_to_cell_center_and_anchor_size() {
        let b = decode_cell(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0, 0, 8, (16.0, 12.0));
        // sigmoid(0) = 0.5 -> center at half the stride
        assert_eq!((b.x1 + b.x2) / 2.0, 4.0);
        assert_eq!((b.y1 + b.y2) / 2.0, 4.0);
        // exp(0) = 1 -> anchor dimensions pass through
        assert!((b.width() - 16.0).abs() < 1e-12);
        assert!((b.height() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn decode_matches_independent_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (a, k, h, w) = (2usize, 3usize, 3usize, 4usize);
        let block = 5 + k;
        let map = Tensor::<f64>::randn(&[2, a * block, h, w], 0.0, 1.5, &mut rng);
        let anchors = vec![(12.0, 8.0), (6.0, 14.0)];
        let out = output_from(map.clone(), 8, anchors.clone());
        let got = decode_boxes(&out, 0.0).unwrap();

        // independent oracle: flat-index arithmetic, plain math
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for n in 0..2 {
            let mut idx = 0usize;
            for ai in 0..a {
                for gy in 0..h {
                    for gx in 0..w {
                        let at = |c: usize| {
                            map.data()[((n * a * block + ai * block + c) * h + gy) * w + gx]
                        };
                        let bx = (sig(at(0)) + gx as f64) * 8.0;
                        let by = (sig(at(1)) + gy as f64) * 8.0;
                        let bw = anchors[ai].0 * at(2).clamp(-4.0, 4.0).exp();
                        let bh = anchors[ai].1 * at(3).clamp(-4.0, 4.0).exp();
                        let b = &got[n][idx];
                        assert!((b.x1 - (bx - bw / 2.0)).abs() < 1e-12);
                        assert!((b.y2 - (by + bh / 2.0)).abs() < 1e-12);
                        let best = (0..k).map(at_cls(at)).fold(f64::MIN, f64::max);
                        assert!((b.score - sig(at(4)) * sig(best)).abs() < 1e-12);
                        idx += 1;
                    }
                }
            }
            assert_eq!(got[n].len(), idx);
        }

        fn at_cls(at: impl Fn(usize) -> f64) -> impl Fn(usize) -> f64 {
            move |c| at(5 + c)
        }
    }

    #[test]
    fn size_decode_is_strictly_monotone_and_center_stays_in_cell() {
        let mut prev = 0.0;
        for i in 0..50 {
            let tw = -3.0 + 0.12 * i as f64;
            let b = decode_cell(&[0.3, -0.7, tw, 0.0, 0.0, 0.0], 2, 1, 8, (10.0, 10.0));
            assert!(b.width() > prev, "bw must increase in tw");
            prev = b.width();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let tx: f64 = f64::randn(&mut rng) * 3.0;
            let ty: f64 = f64::randn(&mut rng) * 3.0;
            let b = decode_cell(&[tx, ty, 0.0, 0.0, 0.0, 0.0], 3, 2, 8, (8.0, 8.0));
            let cx = (b.x1 + b.x2) / 2.0;
            let cy = (b.y1 + b.y2) / 2.0;
            assert!(cx >= 3.0 * 8.0 && cx <= 4.0 * 8.0, "center bounded by its grid cell");
            assert!(cy >= 2.0 * 8.0 && cy <= 3.0 * 8.0);
        }
    }
}
