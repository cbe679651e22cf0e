//! The self-supervised objective.
//!
//! Per source view the photometric term is
//! `(1 - alpha) * |I_t - I_hat| + (alpha / 2) * (1 - SSIM(I_t, I_hat))`
//! with `alpha = 0.85`; per pixel the minimum over source views is taken
//! among the sources whose warp is valid there, which lets one unoccluded
//! view win where the other is occluded. Edge-aware smoothness acts on the
//! mean-normalized inverse depth; the optional mask-smoothness term is the
//! same form applied per mask channel (the regularization baseline used when
//! depth ordering is disabled).
//!
//! SSIM uses 3x3 uniform mean pooling with reflection padding and
//! `C1 = 0.01^2`, `C2 = 0.03^2` on a [0, 1] dynamic range. Where a warped
//! pixel is invalid, its slot in SSIM windows (and in the unused L1 entries)
//! holds the target value, so neighbors see a neutral sample instead of a
//! hole; invalid pixels themselves never contribute loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::field::{DepthMap, Field, Image, ValidityMask};
use crate::masks::MaskStack;
use crate::warp::Warped;
use crate::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const NINTH: f64 = 1.0 / 9.0;

/// Weights and switches of the total objective.
#[derive(Clone, Debug)]
pub struct LossConfig {
    /// SSIM weight in the photometric mix.
    pub alpha: f64,
    /// Base smoothness weight; the effective weight per scale is
    /// `lambda_base * scale`.
    pub lambda_base: f64,
    /// Subset of {1, 1/2, 1/4, 1/8}; smoothness is evaluated on box-downsampled
    /// pyramids of the depth and image for factors below one.
    pub scale_factors: Vec<f64>,
    /// Ordered mask normalization on/off. When off, mask smoothness is added
    /// with `mask_smooth_weight`.
    pub use_depth_ordering: bool,
    pub mask_smooth_weight: f64,
    /// Exclude pixels where the unwarped source already beats every warped
    /// source photometrically.
    pub auto_mask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            lambda_base: 0.001,
            scale_factors: vec![1.0],
            use_depth_ordering: true,
            mask_smooth_weight: 0.1,
            auto_mask: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda_base > 0.0) {
            return Err(Error::Config("lambda_base must be positive".into()));
        }
        for f in &self.scale_factors {
            if ![1.0, 0.5, 0.25, 0.125].contains(f) {
                return Err(Error::Config(format!("scale factor {f} not in {{1, 1/2, 1/4, 1/8}}")));
            }
        }
        Ok(())
    }
}

/// Value snapshot of one loss evaluation. The components recompose exactly:
/// `total = photometric + lambda_base * smoothness + w * mask_smoothness`
/// where `w` is the mask-smoothness weight actually applied (zero when depth
/// ordering is on) and `smoothness` is already the scale-weighted pyramid sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub mask_smoothness: f64,
    pub valid_pixel_count: usize,
}

/// Generic counterpart of [`LossBreakdown`] carrying live tape values.
pub struct LossTerms<S> {
    pub total: S,
    pub photometric: S,
    pub smoothness: S,
    pub mask_smoothness: S,
    pub valid_pixel_count: usize,
}

impl<S: Scalar> LossTerms<S> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.value(),
            photometric: self.photometric.value(),
            smoothness: self.smoothness.value(),
            mask_smoothness: self.mask_smoothness.value(),
            valid_pixel_count: self.valid_pixel_count,
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j as usize
}

fn fold_add<S: Scalar>(acc: Option<S>, v: S) -> Option<S> {
    Some(match acc {
        None => v,
        Some(a) => a + v,
    })
}

/// Per-pixel SSIM between a constant image and a (possibly tape-carried)
/// color grid, averaged over channels. `other` must be channel-innermost
/// with the same shape as `target`.
pub fn ssim_map_s<S: Scalar>(target: &Image, other: &[S]) -> Vec<S> {
    let (w, h, c) = (target.width(), target.height(), target.channels());
    debug_assert_eq!(other.len(), w * h * c);
    // Squares and cross products once per pixel; window sums reuse them.
    let mut b2 = Vec::with_capacity(other.len());
    let mut ab = Vec::with_capacity(other.len());
    for (i, b) in other.iter().enumerate() {
        b2.push(*b * *b);
        ab.push(*b * target.data()[i]);
    }
    let a = target.data();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut per_channel: Option<S> = None;
            for ch in 0..c {
                let mut sa: Option<f64> = None;
                let mut sa2: Option<f64> = None;
                let mut sb: Option<S> = None;
                let mut sb2: Option<S> = None;
                let mut sab: Option<S> = None;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sx = reflect(x as isize + dx, w);
                        let sy = reflect(y as isize + dy, h);
                        let idx = (sy * w + sx) * c + ch;
                        let av = a[idx];
                        sa = fold_add(sa, av);
                        sa2 = fold_add(sa2, av * av);
                        sb = fold_add(sb, other[idx]);
                        sb2 = fold_add(sb2, b2[idx]);
                        sab = fold_add(sab, ab[idx]);
                    }
                }
                let mu_a = sa.unwrap() * NINTH;
                let mu_b = sb.unwrap() * NINTH;
                let sigma_a = sa2.unwrap() * NINTH - mu_a * mu_a;
                let sigma_b = sb2.unwrap() * NINTH - mu_b * mu_b;
                let sigma_ab = sab.unwrap() * NINTH - mu_b * mu_a;
                let num = (mu_b * mu_a * 2.0 + SSIM_C1) * (sigma_ab * 2.0 + SSIM_C2);
                let den = (mu_b * mu_b + mu_a * mu_a + SSIM_C1) * (sigma_b + sigma_a + SSIM_C2);
                per_channel = fold_add(per_channel, num / den);
            }
            let s = per_channel.unwrap();
            out.push(if c == 1 { s } else { s * (1.0 / c as f64) });
        }
    }
    out
}

/// Concrete per-pixel SSIM map between two images.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if !a.same_shape(b) {
        return Err(Error::Shape("ssim_map shape mismatch".into()));
    }
    Ok(ssim_map_s(a, b.data()))
}

/// Per-pixel photometric loss map, minimum over the valid sources at each
/// pixel, plus the combined activity mask.
pub struct PhotoMap<S> {
    pub width: usize,
    pub height: usize,
    pub loss: Vec<S>,
    pub active: Vec<bool>,
}

impl<S: Scalar> PhotoMap<S> {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

fn filled_colors<S: Scalar>(target: &Image, warped: &Warped<S>) -> Vec<S> {
    let c = warped.channels;
    let mut filled = Vec::with_capacity(warped.colors.len());
    for (px, chunk) in warped.colors.chunks_exact(c).enumerate() {
        let (x, y) = (px % warped.width, px / warped.width);
        if warped.validity.is_valid(x, y) {
            filled.extend_from_slice(chunk);
        } else {
            for ch in 0..c {
                filled.push(chunk[0].lift(target.get(x, y, ch)));
            }
        }
    }
    filled
}

fn per_source_photo<S: Scalar>(target: &Image, warped: &Warped<S>, alpha: f64) -> Vec<S> {
    let c = target.channels();
    let filled = filled_colors(target, warped);
    let ssim = ssim_map_s(target, &filled);
    let mut out = Vec::with_capacity(ssim.len());
    for (px, s) in ssim.iter().enumerate() {
        let base = px * c;
        let mut l1: Option<S> = None;
        for ch in 0..c {
            let diff = (filled[base + ch] - target.data()[base + ch]).abs();
            l1 = fold_add(l1, diff);
        }
        let l1 = {
            let total = l1.unwrap();
            if c == 1 {
                total
            } else {
                total * (1.0 / c as f64)
            }
        };
        out.push(l1 * (1.0 - alpha) + s.one_minus() * (alpha * 0.5));
    }
    out
}

/// Photometric loss over one or more warped source views. When
/// `stationary_sources` is given (the auto-masking switch), pixels that an
/// *unwarped* source already explains better than every warped view are
/// dropped from the active set.
pub fn photometric_loss_s<S: Scalar>(
    target: &Image,
    warped: &[&Warped<S>],
    alpha: f64,
    stationary_sources: Option<&[&Image]>,
) -> Result<PhotoMap<S>> {
    if warped.is_empty() {
        return Err(Error::Config("photometric loss needs at least one source".into()));
    }
    for wp in warped {
        if wp.width != target.width() || wp.height != target.height() || wp.channels != target.channels() {
            return Err(Error::Shape("warped view shape mismatch with target".into()));
        }
    }
    let n = target.width() * target.height();
    let per_source: Vec<Vec<S>> = warped.iter().map(|wp| per_source_photo(target, wp, alpha)).collect();

    let mut loss = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for px in 0..n {
        let (x, y) = (px % target.width(), px / target.width());
        let mut current: Option<S> = None;
        for (src_idx, map) in per_source.iter().enumerate() {
            if warped[src_idx].validity.is_valid(x, y) {
                current = Some(match current {
                    None => map[px],
                    Some(m) => m.min2(map[px]),
                });
            }
        }
        match current {
            Some(v) => {
                loss.push(v);
                active.push(true);
            }
            None => {
                loss.push(per_source[0][px].lift(0.0));
                active.push(false);
            }
        }
    }

    if let Some(sources) = stationary_sources {
        let mut stationary_min = vec![f64::INFINITY; n];
        for src in sources {
            if !src.same_shape(target) {
                return Err(Error::Shape("stationary source shape mismatch".into()));
            }
            let unwarped = Warped::<f64>::fully_valid(src);
            let map = per_source_photo::<f64>(target, &unwarped, alpha);
            for (m, v) in stationary_min.iter_mut().zip(map) {
                *m = m.min(v);
            }
        }
        for px in 0..n {
            if active[px] && stationary_min[px] < loss[px].value() {
                active[px] = false;
            }
        }
    }

    Ok(PhotoMap {
        width: target.width(),
        height: target.height(),
        loss,
        active,
    })
}

/// Concrete photometric loss over (image, validity) pairs.
pub fn photometric_loss(
    target: &Image,
    warped: &[(Image, ValidityMask)],
    alpha: f64,
) -> Result<PhotoMap<f64>> {
    let views: Vec<Warped<f64>> = warped
        .iter()
        .map(|(img, validity)| Warped::from_image(img, validity.clone()))
        .collect();
    let refs: Vec<&Warped<f64>> = views.iter().collect();
    photometric_loss_s(target, &refs, alpha, None)
}

/// Edge-aware smoothness of the mean-normalized inverse depth:
/// `mean_p |dx d*| e^{-|dx I|} + |dy d*| e^{-|dy I|}` with forward
/// differences, image gradients averaged over channels, and the sum divided
/// by the full pixel count.
pub fn smoothness_loss_s<S: Scalar>(depth: &Field<S>, img: &Image) -> S {
    let (w, h) = (depth.width, depth.height);
    debug_assert_eq!(w, img.width());
    debug_assert_eq!(h, img.height());
    let n = (w * h) as f64;
    let floor = depth.data[0].lift(1e-7);
    let inv: Vec<S> = depth.data.iter().map(|d| d.max2(floor).recip()).collect();
    let mean = inv.iter().copied().fold(None, fold_add).unwrap() * (1.0 / n);
    let dstar: Vec<S> = inv.into_iter().map(|v| v / mean).collect();

    let grad_weight = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let mut g = 0.0;
        for c in 0..img.channels() {
            g += (img.get(b.0, b.1, c) - img.get(a.0, a.1, c)).abs();
        }
        (-(g / img.channels() as f64)).exp()
    };

    let mut acc: Option<S> = None;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let diff = (dstar[y * w + x + 1] - dstar[y * w + x]).abs();
            acc = fold_add(acc, diff * grad_weight((x, y), (x + 1, y)));
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let diff = (dstar[(y + 1) * w + x] - dstar[y * w + x]).abs();
            acc = fold_add(acc, diff * grad_weight((x, y), (x, y + 1)));
        }
    }
    match acc {
        Some(total) => total / n,
        None => dstar[0].lift(0.0),
    }
}

pub fn smoothness_loss(depth: &DepthMap, img: &Image) -> Result<f64> {
    if depth.width() != img.width() || depth.height() != img.height() {
        return Err(Error::Shape("smoothness shape mismatch".into()));
    }
    Ok(smoothness_loss_s(&depth.as_field(), img))
}

/// Edge-aware smoothness applied to each mask channel and summed.
pub fn mask_smoothness_loss_s<S: Scalar>(masks: &MaskStack<S>, img: &Image) -> S {
    let (w, h, k) = (masks.width, masks.height, masks.k);
    debug_assert_eq!(w, img.width());
    debug_assert_eq!(h, img.height());
    let n = (w * h) as f64;
    let grad_weight = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let mut g = 0.0;
        for c in 0..img.channels() {
            g += (img.get(b.0, b.1, c) - img.get(a.0, a.1, c)).abs();
        }
        (-(g / img.channels() as f64)).exp()
    };
    let at = |x: usize, y: usize, i: usize| masks.data[(y * w + x) * k + i];
    let mut total: Option<S> = None;
    for i in 0..k {
        let mut acc: Option<S> = None;
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let diff = (at(x + 1, y, i) - at(x, y, i)).abs();
                acc = fold_add(acc, diff * grad_weight((x, y), (x + 1, y)));
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let diff = (at(x, y + 1, i) - at(x, y, i)).abs();
                acc = fold_add(acc, diff * grad_weight((x, y), (x, y + 1)));
            }
        }
        if let Some(channel_sum) = acc {
            total = fold_add(total, channel_sum / n);
        }
    }
    match total {
        Some(t) => t,
        None => masks.data[0].lift(0.0),
    }
}

pub fn mask_smoothness_loss(masks: &MaskStack<f64>, img: &Image) -> Result<f64> {
    if masks.width != img.width() || masks.height != img.height() {
        return Err(Error::Shape("mask smoothness shape mismatch".into()));
    }
    Ok(mask_smoothness_loss_s(masks, img))
}

fn halvings_for(factor: f64) -> usize {
    match factor {
        f if f == 1.0 => 0,
        f if f == 0.5 => 1,
        f if f == 0.25 => 2,
        _ => 3,
    }
}

/// The full objective: mean photometric loss over active pixels plus the
/// scale-weighted smoothness pyramid, plus mask smoothness when depth
/// ordering is disabled.
pub fn total_loss_s<S: Scalar>(
    target: &Image,
    warped: &[&Warped<S>],
    depth: &Field<S>,
    masks: Option<&MaskStack<S>>,
    stationary_sources: Option<&[&Image]>,
    cfg: &LossConfig,
) -> Result<LossTerms<S>> {
    cfg.validate()?;
    if depth.width != target.width() || depth.height != target.height() {
        return Err(Error::Shape("total_loss depth shape mismatch".into()));
    }
    let stationary = if cfg.auto_mask { stationary_sources } else { None };
    let photo = photometric_loss_s(target, warped, cfg.alpha, stationary)?;
    let count = photo.active_count();
    if count == 0 {
        return Err(Error::Degenerate("no valid pixels in any source view".into()));
    }
    let mut photo_sum: Option<S> = None;
    for (l, a) in photo.loss.iter().zip(&photo.active) {
        if *a {
            photo_sum = fold_add(photo_sum, *l);
        }
    }
    let photometric = photo_sum.unwrap() / count as f64;

    let mut smooth_weighted: Option<S> = None;
    let max_halvings = cfg.scale_factors.iter().map(|f| halvings_for(*f)).max().unwrap_or(0);
    let mut depth_levels = vec![depth.clone()];
    let mut image_levels = vec![target.clone()];
    for _ in 0..max_halvings {
        depth_levels.push(depth_levels.last().unwrap().downsample2());
        image_levels.push(image_levels.last().unwrap().downsample2());
    }
    for factor in &cfg.scale_factors {
        let lvl = halvings_for(*factor);
        let s = smoothness_loss_s(&depth_levels[lvl], &image_levels[lvl]);
        smooth_weighted = fold_add(smooth_weighted, s * *factor);
    }
    let smoothness = match smooth_weighted {
        Some(s) => s,
        None => photometric.lift(0.0),
    };

    let (mask_smoothness, mask_weight) = if !cfg.use_depth_ordering {
        match masks {
            Some(m) => (mask_smoothness_loss_s(m, target), cfg.mask_smooth_weight),
            None => (photometric.lift(0.0), 0.0),
        }
    } else {
        (photometric.lift(0.0), 0.0)
    };

    let total = photometric + smoothness * cfg.lambda_base + mask_smoothness * mask_weight;
    Ok(LossTerms {
        total,
        photometric,
        smoothness,
        mask_smoothness,
        valid_pixel_count: count,
    })
}

/// Concrete total loss over already-synthesized views.
pub fn total_loss(
    target: &Image,
    warped: &[(Image, ValidityMask)],
    depth: &DepthMap,
    masks: Option<&MaskStack<f64>>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let views: Vec<Warped<f64>> = warped
        .iter()
        .map(|(img, validity)| Warped::from_image(img, validity.clone()))
        .collect();
    let refs: Vec<&Warped<f64>> = views.iter().collect();
    let terms = total_loss_s(target, &refs, &depth.as_field(), masks, None, cfg)?;
    Ok(terms.breakdown())
}
