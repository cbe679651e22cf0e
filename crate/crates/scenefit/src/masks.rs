//! K-component soft masks and mask-weighted transform blending.
//!
//! Mask logits are turned into per-pixel probabilities by weighting each
//! channel's logit with a fixed ordering scalar `d_i` before the softmax.
//! With the default ordering `d_i = i` the channels settle into a stable
//! front-to-back layering; with uniform weights the normalization reduces to
//! a plain softmax (the mask-smoothing ablation). Blending the K rigid
//! transforms with these weights is a convex combination of the transformed
//! points, which is generally *not* a rigid motion — see the witness test.

use crate::autodiff::Scalar;
use crate::field::Image;
use crate::geometry::{
    apply_with_rotation, rotation_of_s, PixelCoord, Point3, RigidTransform, RotationMatrix,
};
use crate::{Error, Result};

/// Raw per-pixel per-channel mask scores, channel-innermost layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    width: usize,
    height: usize,
    k: usize,
    data: Vec<f64>,
}

impl MaskLogits {
    pub fn new(width: usize, height: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("mask logits need K >= 1".into()));
        }
        if data.len() != width * height * k {
            return Err(Error::Shape(format!(
                "logit data length {} does not match {width}x{height}x{k}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("mask logits must be finite".into()));
        }
        Ok(MaskLogits {
            width,
            height,
            k,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.k;
        &self.data[base..base + self.k]
    }
}

/// All-ones logits: the neutral initialization whose ordered normalization
/// is the fixed prior `softmax(d)` at every pixel (and exactly uniform under
/// the no-ordering ablation where every `d_i` is one).
pub fn uniform_logits(width: usize, height: usize, k: usize) -> Result<MaskLogits> {
    MaskLogits::new(width, height, k, vec![1.0; width * height * k])
}

/// Per-component ordering scalars `d_i`, all positive.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingWeights(Vec<f64>);

impl OrderingWeights {
    /// The default depth ordering `d_i = i`, `i = 1..=K`.
    pub fn ordered(k: usize) -> Self {
        OrderingWeights((1..=k).map(|i| i as f64).collect())
    }

    /// All ones: plain softmax, used by the mask-smoothing ablation.
    pub fn uniform(k: usize) -> Self {
        OrderingWeights(vec![1.0; k])
    }

    pub fn custom(d: Vec<f64>) -> Result<Self> {
        if d.is_empty() || d.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("ordering weights must be positive".into()));
        }
        Ok(OrderingWeights(d))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-pixel component probabilities; sums to one at every pixel.
#[derive(Clone, Debug)]
pub struct MaskStack<S = f64> {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    /// Channel-innermost: `data[(y*width + x)*k + i]`.
    pub data: Vec<S>,
}

impl<S: Scalar> MaskStack<S> {
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[S] {
        let base = (y * self.width + x) * self.k;
        &self.data[base..base + self.k]
    }
}

impl MaskStack<f64> {
    /// Validates the probability invariants (each value in [0,1], pixel sums
    /// equal to one within 1e-9).
    pub fn validated(width: usize, height: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * k {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {width}x{height}x{k}",
                data.len()
            )));
        }
        for px in data.chunks_exact(k) {
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!(
                    "mask pixel {px:?} is not a probability vector"
                )));
            }
        }
        Ok(MaskStack {
            width,
            height,
            k,
            data,
        })
    }

    /// One-hot stack from per-pixel component indices.
    pub fn one_hot(width: usize, height: usize, k: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape("label grid size mismatch".into()));
        }
        let mut data = vec![0.0; width * height * k];
        for (px, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Domain(format!("label {label} out of range for K={k}")));
            }
            data[px * k + label] = 1.0;
        }
        Ok(MaskStack {
            width,
            height,
            k,
            data,
        })
    }
}

/// Ordered softmax of one pixel's logits into `out`. The per-pixel maximum of
/// the weighted logits is subtracted (as data) before exponentiation; the
/// softmax value and gradient are unchanged by the shift.
pub fn normalize_pixel<S: Scalar>(logits: &[S], d: &[f64], out: &mut Vec<S>) {
    debug_assert_eq!(logits.len(), d.len());
    out.clear();
    if logits.len() == 1 {
        // Softmax of a single channel is identically one; keep it exact.
        out.push(logits[0].lift(1.0));
        return;
    }
    let mut max_w = f64::NEG_INFINITY;
    for (l, di) in logits.iter().zip(d) {
        max_w = max_w.max(l.value() * di);
    }
    let mut sum = None;
    for (l, di) in logits.iter().zip(d) {
        let e = (*l * *di - max_w).exp();
        out.push(e);
        sum = Some(match sum {
            None => e,
            Some(s) => s + e,
        });
    }
    let sum = sum.expect("K >= 1");
    for e in out.iter_mut() {
        *e = *e / sum;
    }
}

/// Ordered-softmax normalization of a full logit grid.
pub fn normalize_masks(logits: &MaskLogits, d: &OrderingWeights) -> Result<MaskStack<f64>> {
    if d.k() != logits.k() {
        return Err(Error::Shape(format!(
            "ordering weights K={} but logits K={}",
            d.k(),
            logits.k()
        )));
    }
    let mut data = Vec::with_capacity(logits.data.len());
    let mut px = Vec::with_capacity(logits.k());
    for pixel in logits.data.chunks_exact(logits.k()) {
        normalize_pixel(pixel, d.as_slice(), &mut px);
        data.extend_from_slice(&px);
    }
    Ok(MaskStack {
        width: logits.width,
        height: logits.height,
        k: logits.k,
        data,
    })
}

/// The K rigid motions paired with a mask stack.
#[derive(Clone, Debug)]
pub struct TransformSet<S = f64>(pub Vec<RigidTransform<S>>);

impl<S> TransformSet<S> {
    pub fn new(transforms: Vec<RigidTransform<S>>) -> Self {
        TransformSet(transforms)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

impl<S: Scalar> TransformSet<S> {
    pub fn rotations(&self) -> Vec<RotationMatrix<S>> {
        self.0.iter().map(|t| rotation_of_s(&t.axis_angle)).collect()
    }
}

/// Convex combination of the K transformed points with the given weights:
/// `x' = sum_i w_i (R_i x + t_i)`.
#[inline]
pub fn blend_point<S: Scalar>(
    weights: &[S],
    rotations: &[RotationMatrix<S>],
    transforms: &[RigidTransform<S>],
    x: &Point3<S>,
) -> Point3<S> {
    debug_assert_eq!(weights.len(), rotations.len());
    let mut acc: Option<Point3<S>> = None;
    for ((w, r), t) in weights.iter().zip(rotations).zip(transforms) {
        let moved = apply_with_rotation(r, &t.translation, x);
        let term = Point3 {
            x: *w * moved.x,
            y: *w * moved.y,
            z: *w * moved.z,
        };
        acc = Some(match acc {
            None => term,
            Some(a) => Point3 {
                x: a.x + term.x,
                y: a.y + term.y,
                z: a.z + term.z,
            },
        });
    }
    acc.expect("K >= 1")
}

/// Blends at an image pixel, reading that pixel's mask weights. The pixel is
/// rounded to the nearest grid cell and must be inside the mask bounds.
pub fn blend_transform(
    masks: &MaskStack<f64>,
    ts: &TransformSet<f64>,
    p: PixelCoord<f64>,
    x: &Point3<f64>,
) -> Result<Point3<f64>> {
    if ts.k() != masks.k {
        return Err(Error::Shape(format!(
            "transform set K={} but mask stack K={}",
            ts.k(),
            masks.k
        )));
    }
    let xi = p.u.round();
    let yi = p.v.round();
    if xi < 0.0 || yi < 0.0 || xi >= masks.width as f64 || yi >= masks.height as f64 {
        return Err(Error::Domain(format!(
            "pixel ({}, {}) outside {}x{} mask grid",
            p.u, p.v, masks.width, masks.height
        )));
    }
    let weights = masks.pixel(xi as usize, yi as usize);
    let rotations = ts.rotations();
    Ok(blend_point(weights, &rotations, &ts.0, x))
}

/// Composite visualization: every channel gets a seeded random color and each
/// pixel blends the channel colors by its mask probabilities.
pub fn composite_image(masks: &MaskStack<f64>, palette_seed: u64) -> Image {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(palette_seed);
    let colors: Vec<[f64; 3]> = (0..masks.k)
        .map(|_| {
            [
                rng.gen_range(0.15..1.0),
                rng.gen_range(0.15..1.0),
                rng.gen_range(0.15..1.0),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(masks.width * masks.height * 3);
    for px in masks.data.chunks_exact(masks.k) {
        for c in 0..3 {
            let mut v = 0.0;
            for (w, color) in px.iter().zip(&colors) {
                v += w * color[c];
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(masks.width, masks.height, 3, data).expect("composite values in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use proptest::prelude::*;

    #[test]
    fn single_component_is_all_ones() {
        let logits = MaskLogits::new(2, 2, 1, vec![3.7, -2.0, 0.0, 100.0]).unwrap();
        let stack = normalize_masks(&logits, &OrderingWeights::ordered(1)).unwrap();
        assert!(stack.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_logits_two_components() {
        let logits = MaskLogits::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let stack = normalize_masks(&logits, &OrderingWeights::ordered(2)).unwrap();
        assert!((stack.data[0] - 0.5).abs() < 1e-15);
        assert!((stack.data[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_under_plain_softmax_are_uniform() {
        let logits = uniform_logits(2, 2, 4).unwrap();
        let stack = normalize_masks(&logits, &OrderingWeights::uniform(4)).unwrap();
        assert!(stack.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn equal_logits_are_separated_by_ordering() {
        let logits = MaskLogits::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let stack = normalize_masks(&logits, &OrderingWeights::ordered(2)).unwrap();
        let e = std::f64::consts::E;
        assert!((stack.data[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((stack.data[1] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_yield_ordered_prior() {
        let logits = uniform_logits(2, 1, 3).unwrap();
        let stack = normalize_masks(&logits, &OrderingWeights::ordered(3)).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for px in stack.data.chunks_exact(3) {
            for (got, want) in px.iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_by_exact_constant_is_bitwise_invariant() {
        // d = (1, 2); adding (2, 1) to the logits shifts both weighted logits
        // by exactly 2.0, which the max-subtraction removes bit-for-bit.
        let base = MaskLogits::new(1, 1, 2, vec![0.25, -0.75]).unwrap();
        let shifted = MaskLogits::new(1, 1, 2, vec![2.25, 0.25]).unwrap();
        let d = OrderingWeights::ordered(2);
        let a = normalize_masks(&base, &d).unwrap();
        let b = normalize_masks(&shifted, &d).unwrap();
        assert_eq!(a.data[0].to_bits(), b.data[0].to_bits());
        assert_eq!(a.data[1].to_bits(), b.data[1].to_bits());
    }

    #[test]
    fn blend_collapses_to_rigid_transform_for_k1() {
        let t = RigidTransform::new([0.2, -0.1, 0.3], [0.5, 1.0, -0.25]);
        let masks = MaskStack::validated(1, 1, 1, vec![1.0]).unwrap();
        let ts = TransformSet::new(vec![t]);
        let x = Point3 { x: 0.3, y: -0.8, z: 2.5 };
        let blended = blend_transform(&masks, &ts, PixelCoord { u: 0.0, v: 0.0 }, &x).unwrap();
        let direct = apply_transform(&t, &x);
        assert_eq!(blended, direct);
    }

    #[test]
    fn opposite_translations_cancel_at_even_weights() {
        let v = [0.7, -0.3, 0.2];
        let ts = TransformSet::new(vec![
            RigidTransform::new([0.0; 3], v),
            RigidTransform::new([0.0; 3], [-v[0], -v[1], -v[2]]),
        ]);
        let masks = MaskStack::validated(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let x = Point3 { x: 1.0, y: 2.0, z: 3.0 };
        let out = blend_transform(&masks, &ts, PixelCoord { u: 0.0, v: 0.0 }, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn weighted_translation_blend_hand_case() {
        let ts = TransformSet::new(vec![
            RigidTransform::new([0.0; 3], [4.0, 0.0, 0.0]),
            RigidTransform::new([0.0; 3], [0.0, 4.0, 0.0]),
        ]);
        let masks = MaskStack::validated(1, 1, 2, vec![0.25, 0.75]).unwrap();
        let x = Point3 { x: 0.0, y: 0.0, z: 1.0 };
        let out = blend_transform(&masks, &ts, PixelCoord { u: 0.0, v: 0.0 }, &x).unwrap();
        assert!((out.x - 1.0).abs() < 1e-15);
        assert!((out.y - 3.0).abs() < 1e-15);
        assert!((out.z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_blend_equals_selected_transform_exactly() {
        let ts = TransformSet::new(vec![
            RigidTransform::new([0.1, 0.0, -0.2], [1.0, 2.0, 3.0]),
            RigidTransform::new([-0.3, 0.2, 0.1], [-1.0, 0.5, 0.0]),
            RigidTransform::new([0.0, 0.4, 0.0], [0.0, 0.0, -2.0]),
        ]);
        let masks = MaskStack::one_hot(1, 1, 3, &[1]).unwrap();
        let x = Point3 { x: 0.4, y: -0.6, z: 1.7 };
        let blended = blend_transform(&masks, &ts, PixelCoord { u: 0.0, v: 0.0 }, &x).unwrap();
        let direct = apply_transform(&ts.0[1], &x);
        assert_eq!(blended, direct);
    }

    #[test]
    fn blended_map_is_not_rigid_witness() {
        // Two distinct rigid motions blended 50/50 shrink a pairwise distance.
        let ts = TransformSet::new(vec![
            RigidTransform::identity(),
            RigidTransform::new([0.0, 0.0, std::f64::consts::PI / 2.0], [0.0; 3]),
        ]);
        let masks = MaskStack::validated(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let p = PixelCoord { u: 0.0, v: 0.0 };
        let a = Point3 { x: 1.0, y: 0.0, z: 0.0 };
        let b = Point3 { x: 0.0, y: 0.0, z: 0.0 };
        let before = a.dist(&b);
        let after = blend_transform(&masks, &ts, p, &a)
            .unwrap()
            .dist(&blend_transform(&masks, &ts, p, &b).unwrap());
        assert!((before - 1.0).abs() < 1e-15);
        assert!(
            (after - before).abs() > 0.25,
            "expected a clear distance change, got {after}"
        );
    }

    #[test]
    fn blend_rejects_out_of_bounds_pixel() {
        let ts = TransformSet::new(vec![RigidTransform::identity()]);
        let masks = MaskStack::validated(1, 1, 1, vec![1.0]).unwrap();
        let x = Point3 { x: 0.0, y: 0.0, z: 1.0 };
        assert!(blend_transform(&masks, &ts, PixelCoord { u: 3.0, v: 0.0 }, &x).is_err());
    }

    proptest! {
        #[test]
        fn prop_normalized_masks_are_probabilities(
            logits in prop::collection::vec(-1e3f64..1e3, 6),
            k in 1usize..4,
        ) {
            let n = 6 / k * k;
            let grid = MaskLogits::new(n / k, 1, k, logits[..n].to_vec()).unwrap();
            let stack = normalize_masks(&grid, &OrderingWeights::ordered(k)).unwrap();
            for px in stack.data.chunks_exact(k) {
                let sum: f64 = px.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn prop_softmax_shift_invariance(
            logits in prop::collection::vec(-40.0f64..40.0, 3),
            c in -20.0f64..20.0,
        ) {
            // Shift the weighted logits by c via logit offsets c / d_i.
            let d = OrderingWeights::ordered(3);
            let shifted: Vec<f64> = logits
                .iter()
                .zip(d.as_slice())
                .map(|(l, di)| l + c / di)
                .collect();
            let a = normalize_masks(&MaskLogits::new(1, 1, 3, logits).unwrap(), &d).unwrap();
            let b = normalize_masks(&MaskLogits::new(1, 1, 3, shifted).unwrap(), &d).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_blend_stays_in_convex_hull(
            w0 in 0.0f64..1.0,
            aa in prop::array::uniform3(-1.5f64..1.5),
            t0 in prop::array::uniform3(-2.0f64..2.0),
            t1 in prop::array::uniform3(-2.0f64..2.0),
            p in prop::array::uniform3(-4.0f64..4.0),
        ) {
            let ts = TransformSet::new(vec![
                RigidTransform::new(aa, t0),
                RigidTransform::new([-aa[2], aa[0], aa[1]], t1),
            ]);
            let masks = MaskStack::validated(1, 1, 2, vec![w0, 1.0 - w0]).unwrap();
            let x = Point3 { x: p[0], y: p[1], z: p[2] };
            let moved: Vec<Point3> = ts.0.iter().map(|t| apply_transform(t, &x)).collect();
            let out = blend_transform(&masks, &ts, PixelCoord { u: 0.0, v: 0.0 }, &x).unwrap();
            let eps = 1e-12;
            for (get, lo, hi) in [
                (out.x, moved[0].x.min(moved[1].x), moved[0].x.max(moved[1].x)),
                (out.y, moved[0].y.min(moved[1].y), moved[0].y.max(moved[1].y)),
                (out.z, moved[0].z.min(moved[1].z), moved[0].z.max(moved[1].z)),
            ] {
                prop_assert!(get >= lo - eps && get <= hi + eps);
            }
        }
    }
}
