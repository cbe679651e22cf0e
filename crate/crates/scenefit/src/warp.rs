//! Differentiable inverse warping.
//!
//! For every target pixel: backproject with the pixel's depth, move the 3D
//! point by the mask-weighted blend of the K component transforms, project
//! into the source view, and bilinearly sample the source image there. The
//! result is the synthesized view of the target frame from that source, plus
//! a validity mask recording behind-camera and out-of-view pixels (those are
//! excluded from the loss instead of clamped to the border, so no spurious
//! zero-gradient plateaus appear at the image edge).
//!
//! The per-pixel arithmetic is written once, generically over [`Scalar`]:
//! the same code runs on plain `f64` (fast, row-parallel) and on tape
//! variables during optimization.

use crate::autodiff::Scalar;
use crate::field::{Field, Image, Validity, ValidityMask};
use crate::geometry::{backproject_s, project_s, CameraIntrinsics, PixelCoord, Projection};
use crate::masks::{blend_point, MaskStack, TransformSet};
use crate::par;
use crate::{Error, Result};

/// One bilinear sample: up to three channels of interpolated color.
#[derive(Clone, Copy, Debug)]
pub struct Sample<S = f64> {
    pub color: [S; 3],
    pub valid: bool,
}

/// Bilinear interpolation of `img` at continuous coordinates `(u, v)`.
/// Coordinates outside `[0, W-1] x [0, H-1]` are invalid and sample to zero.
/// Pixel centers are at integer coordinates.
#[inline]
pub fn bilinear_sample_s<S: Scalar>(img: &Image, u: S, v: S) -> Sample<S> {
    let w = img.width();
    let h = img.height();
    let uf = u.value();
    let vf = v.value();
    let zero = u.lift(0.0);
    if !(uf >= 0.0 && uf <= (w - 1) as f64 && vf >= 0.0 && vf <= (h - 1) as f64) {
        return Sample {
            color: [zero, zero, zero],
            valid: false,
        };
    }
    // Clamp the base cell so u = W-1 lands in the last cell with weight 1.
    let x0 = (uf.floor() as usize).min(w.saturating_sub(2));
    let y0 = (vf.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let a = u - x0 as f64;
    let b = v - y0 as f64;
    let na = a.one_minus();
    let nb = b.one_minus();
    let w00 = na * nb;
    let w10 = a * nb;
    let w01 = na * b;
    let w11 = a * b;
    let mut color = [zero, zero, zero];
    for (c, slot) in color.iter_mut().enumerate().take(img.channels()) {
        *slot = w00 * img.get(x0, y0, c)
            + w10 * img.get(x1, y0, c)
            + w01 * img.get(x0, y1, c)
            + w11 * img.get(x1, y1, c);
    }
    Sample { color, valid: true }
}

/// Concrete bilinear sampling.
pub fn bilinear_sample(img: &Image, q: PixelCoord<f64>) -> Sample<f64> {
    bilinear_sample_s(img, q.u, q.v)
}

/// A synthesized view: per-pixel colors (tape variables during optimization)
/// plus validity.
#[derive(Clone, Debug)]
pub struct Warped<S> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Channel-innermost, like [`Image`]. Invalid pixels hold zeros.
    pub colors: Vec<S>,
    pub validity: ValidityMask,
}

impl Warped<f64> {
    pub fn from_image(img: &Image, validity: ValidityMask) -> Self {
        Warped {
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            colors: img.data().to_vec(),
            validity,
        }
    }

    pub fn fully_valid(img: &Image) -> Self {
        let validity = ValidityMask::new(
            img.width(),
            img.height(),
            vec![Validity::Valid; img.width() * img.height()],
        );
        Warped::from_image(img, validity)
    }
}

fn check_shapes<S>(
    depth: &Field<S>,
    masks: &MaskStack<S>,
    ts: &TransformSet<S>,
    src: &Image,
) -> Result<()> {
    if depth.width != src.width() || depth.height != src.height() {
        return Err(Error::Shape(format!(
            "depth {}x{} vs image {}x{}",
            depth.width,
            depth.height,
            src.width(),
            src.height()
        )));
    }
    if masks.width != depth.width || masks.height != depth.height {
        return Err(Error::Shape(format!(
            "mask stack {}x{} vs depth {}x{}",
            masks.width, masks.height, depth.width, depth.height
        )));
    }
    if ts.k() != masks.k {
        return Err(Error::Shape(format!(
            "transform set K={} vs mask stack K={}",
            ts.k(),
            masks.k
        )));
    }
    Ok(())
}

#[inline]
fn warp_pixel<S: Scalar>(
    x: usize,
    y: usize,
    depth: &Field<S>,
    masks: &MaskStack<S>,
    ts: &TransformSet<S>,
    rotations: &[crate::geometry::RotationMatrix<S>],
    src: &Image,
    intr: &CameraIntrinsics,
) -> ([S; 3], Validity) {
    let d = depth.get(x, y);
    let point = backproject_s(x as f64, y as f64, d, intr);
    let weights = masks.pixel(x, y);
    let moved = blend_point(weights, rotations, &ts.0, &point);
    match project_s(&moved, intr) {
        Projection::BehindCamera => {
            let zero = d.lift(0.0);
            ([zero, zero, zero], Validity::BehindCamera)
        }
        Projection::Valid(q) => {
            let sample = bilinear_sample_s(src, q.u, q.v);
            if sample.valid {
                (sample.color, Validity::Valid)
            } else {
                (sample.color, Validity::OutOfView)
            }
        }
    }
}

/// Generic single-threaded synthesis; this is the variant the optimizer runs
/// with tape variables (a tape is confined to one thread).
pub fn synthesize_view_s<S: Scalar>(
    depth: &Field<S>,
    masks: &MaskStack<S>,
    ts: &TransformSet<S>,
    src: &Image,
    intr: &CameraIntrinsics,
) -> Result<Warped<S>> {
    check_shapes(depth, masks, ts, src)?;
    let rotations = ts.rotations();
    let (w, h, c) = (depth.width, depth.height, src.channels());
    let mut colors = Vec::with_capacity(w * h * c);
    let mut validity = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (color, valid) = warp_pixel(x, y, depth, masks, ts, &rotations, src, intr);
            colors.extend_from_slice(&color[..c]);
            validity.push(valid);
        }
    }
    Ok(Warped {
        width: w,
        height: h,
        channels: c,
        colors,
        validity: ValidityMask::new(w, h, validity),
    })
}

fn rows_to_warped(
    w: usize,
    h: usize,
    c: usize,
    rows: Vec<(Vec<f64>, Vec<Validity>)>,
) -> (Image, ValidityMask) {
    let mut colors = Vec::with_capacity(w * h * c);
    let mut validity = Vec::with_capacity(w * h);
    for (row_colors, row_valid) in rows {
        colors.extend_from_slice(&row_colors);
        validity.extend_from_slice(&row_valid);
    }
    let img = Image::new(w, h, c, colors).expect("interpolated colors stay in range");
    (img, ValidityMask::new(w, h, validity))
}

fn value_row(
    y: usize,
    depth: &Field<f64>,
    masks: &MaskStack<f64>,
    ts: &TransformSet<f64>,
    rotations: &[crate::geometry::RotationMatrix<f64>],
    src: &Image,
    intr: &CameraIntrinsics,
) -> (Vec<f64>, Vec<Validity>) {
    let (w, c) = (depth.width, src.channels());
    let mut colors = Vec::with_capacity(w * c);
    let mut validity = Vec::with_capacity(w);
    for x in 0..w {
        let (color, valid) = warp_pixel(x, y, depth, masks, ts, rotations, src, intr);
        colors.extend_from_slice(&color[..c]);
        validity.push(valid);
    }
    (colors, validity)
}

/// Synthesizes the target view from a source image. Row-parallel when the
/// `parallel` feature is enabled; output is identical either way.
pub fn synthesize_view(
    depth: &crate::field::DepthMap,
    masks: &MaskStack<f64>,
    ts: &TransformSet<f64>,
    src: &Image,
    intr: &CameraIntrinsics,
) -> Result<(Image, ValidityMask)> {
    let field = depth.as_field();
    check_shapes(&field, masks, ts, src)?;
    let rotations = ts.rotations();
    let rows = par::map_rows(field.height, |y| {
        value_row(y, &field, masks, ts, &rotations, src, intr)
    });
    Ok(rows_to_warped(field.width, field.height, src.channels(), rows))
}

/// Always-sequential value-path synthesis (benchmark baseline, and the build
/// used when the `parallel` feature is off).
pub fn synthesize_view_sequential(
    depth: &crate::field::DepthMap,
    masks: &MaskStack<f64>,
    ts: &TransformSet<f64>,
    src: &Image,
    intr: &CameraIntrinsics,
) -> Result<(Image, ValidityMask)> {
    let field = depth.as_field();
    check_shapes(&field, masks, ts, src)?;
    let rotations = ts.rotations();
    let rows = par::map_rows_seq(field.height, |y| {
        value_row(y, &field, masks, ts, &rotations, src, intr)
    });
    Ok(rows_to_warped(field.width, field.height, src.channels(), rows))
}

/// Per-pixel source-view flow `(u' - u, v' - v)` induced by a fitted model;
/// behind-camera pixels get NaN. Used to compare fitted motions at the flow
/// level.
pub fn flow_field(
    depth: &crate::field::DepthMap,
    masks: &MaskStack<f64>,
    ts: &TransformSet<f64>,
    intr: &CameraIntrinsics,
) -> Result<Vec<(f64, f64)>> {
    let field = depth.as_field();
    if masks.width != field.width || masks.height != field.height || ts.k() != masks.k {
        return Err(Error::Shape("flow_field shape mismatch".into()));
    }
    let rotations = ts.rotations();
    let mut flow = Vec::with_capacity(field.width * field.height);
    for y in 0..field.height {
        for x in 0..field.width {
            let point = backproject_s(x as f64, y as f64, field.get(x, y), intr);
            let moved = blend_point(masks.pixel(x, y), &rotations, &ts.0, &point);
            match project_s(&moved, intr) {
                Projection::Valid(q) => flow.push((q.u - x as f64, q.v - y as f64)),
                Projection::BehindCamera => flow.push((f64::NAN, f64::NAN)),
            }
        }
    }
    Ok(flow)
}
