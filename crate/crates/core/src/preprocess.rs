//! Deterministic inference-time geometry: pad-to-square, bicubic
//! antialias resampling, center crops, TTA variant planning, and
//! embedding aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Category, TARGET_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Base,
    CenterCrop,
    Stretch,
    TightCrop,
}

/// Deterministic geometric recipe for one TTA variant: pad, crop inside
/// the padded canvas, then resize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub image_id: Option<String>,
    pub source: (u32, u32),
    /// (left, top, right, bottom), zero-fill.
    pub pad: (u32, u32, u32, u32),
    /// (x, y, w, h) within the padded canvas.
    pub crop: (u32, u32, u32, u32),
    pub target: (u32, u32),
    pub interpolation: String,
    pub variant_tag: VariantTag,
}

impl TransformPlan {
    pub fn canvas(&self) -> (u32, u32) {
        (
            self.source.0 + self.pad.0 + self.pad.2,
            self.source.1 + self.pad.1 + self.pad.3,
        )
    }

    /// Crop rectangle containment inside the padded canvas.
    pub fn is_contained(&self) -> bool {
        let (cw, ch) = self.canvas();
        let (x, y, w, h) = self.crop;
        w >= 1 && h >= 1 && x + w <= cw && y + h <= ch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaPolicy {
    pub keep_fraction: f64,
    pub square_tolerance: f64,
}

impl Default for TtaPolicy {
    fn default() -> Self {
        Self { keep_fraction: 0.9, square_tolerance: 0.0 }
    }
}

/// Symmetric zero-pad to a square canvas of side max(w, h); odd deficits
/// put the extra pixel on the right/bottom.
pub fn pad_to_square_plan(w: u32, h: u32) -> (u32, u32, u32, u32) {
    assert!(w >= 1 && h >= 1);
    let side = w.max(h);
    let dx = side - w;
    let dy = side - h;
    (dx / 2, dy / 2, dx - dx / 2, dy - dy / 2)
}

/// Centered crop keeping `keep_fraction` of each side (rounded).
pub fn center_crop_plan(w: u32, h: u32, keep_fraction: f64) -> Result<(u32, u32, u32, u32)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "keep_fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let cw = (w as f64 * keep_fraction).round() as u32;
    let ch = (h as f64 * keep_fraction).round() as u32;
    if cw == 0 || ch == 0 {
        return Err(Error::Domain(format!(
            "crop of ({w}, {h}) by {keep_fraction} rounds to zero pixels"
        )));
    }
    Ok(((w - cw) / 2, (h - ch) / 2, cw, ch))
}

// --- bicubic resampling -------------------------------------------------

/// Keys cubic kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn axis_weights(src_len: usize, dst_len: usize, antialias: bool) -> Vec<(isize, Vec<f64>)> {
    let scale = src_len as f64 / dst_len as f64;
    let filter_scale = if antialias && scale > 1.0 { scale } else { 1.0 };
    let support = 2.0 * filter_scale;
    (0..dst_len)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut ws: Vec<f64> = (lo..=hi)
                .map(|i| cubic((i as f64 - center) / filter_scale))
                .collect();
            let sum: f64 = ws.iter().sum();
            for w in &mut ws {
                *w /= sum;
            }
            (lo, ws)
        })
        .collect()
}

fn clamp(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Separable cubic resampling (a = -0.5), clamp-to-edge. With `antialias`
/// the kernel support is stretched by the downscale factor and weights are
/// renormalized per output pixel.
pub fn resize_bicubic(
    src: &[f64],
    w: usize,
    h: usize,
    tw: usize,
    th: usize,
    antialias: bool,
) -> Result<Vec<f64>> {
    if w == 0 || h == 0 || tw == 0 || th == 0 {
        return Err(Error::Domain("resize dimensions must be >= 1".into()));
    }
    if src.len() != w * h {
        return Err(Error::Domain(format!(
            "source length {} != {w} x {h}",
            src.len()
        )));
    }
    // horizontal pass: h x w -> h x tw
    let xw = axis_weights(w, tw, antialias);
    let mut mid = vec![0.0; h * tw];
    for row in 0..h {
        for (dx, (lo, ws)) in xw.iter().enumerate() {
            let mut acc = 0.0;
            for (j, wgt) in ws.iter().enumerate() {
                acc += wgt * src[row * w + clamp(lo + j as isize, w)];
            }
            mid[row * tw + dx] = acc;
        }
    }
    // vertical pass: h x tw -> th x tw
    let yw = axis_weights(h, th, antialias);
    let mut out = vec![0.0; th * tw];
    for (dy, (lo, ws)) in yw.iter().enumerate() {
        for dx in 0..tw {
            let mut acc = 0.0;
            for (j, wgt) in ws.iter().enumerate() {
                acc += wgt * mid[clamp(lo + j as isize, h) * tw + dx];
            }
            out[dy * tw + dx] = acc;
        }
    }
    Ok(out)
}

// --- TTA planning -------------------------------------------------------

const INTERPOLATION_TAG: &str = "bicubic-antialias";

fn plan(
    image_id: Option<&str>,
    w: u32,
    h: u32,
    pad: (u32, u32, u32, u32),
    crop: (u32, u32, u32, u32),
    tag: VariantTag,
) -> TransformPlan {
    TransformPlan {
        image_id: image_id.map(|s| s.to_string()),
        source: (w, h),
        pad,
        crop,
        target: (TARGET_SIDE, TARGET_SIDE),
        interpolation: INTERPOLATION_TAG.to_string(),
        variant_tag: tag,
    }
}

fn is_priority(category: Category) -> bool {
    matches!(category, Category::Apparel | Category::Packaged | Category::Toy)
}

fn is_square(w: u32, h: u32, tolerance: f64) -> bool {
    (w as f64 - h as f64).abs() / w.max(h) as f64 <= tolerance
}

/// Deterministic variant list for one image.
///
/// Every image gets `base` (pad-to-square, resize). Non-square images of
/// non-priority categories add one centered crop. Priority categories
/// (apparel, packaged, toy) get three TTA variants regardless of shape:
/// center crop, stretch (resize without padding), and a tighter
/// `keep_fraction^2` crop.
pub fn tta_variants(
    image_id: Option<&str>,
    w: u32,
    h: u32,
    category: Category,
    policy: &TtaPolicy,
) -> Result<Vec<TransformPlan>> {
    if w == 0 || h == 0 {
        return Err(Error::Domain("tta_variants requires positive dimensions".into()));
    }
    let pad = pad_to_square_plan(w, h);
    let side = w.max(h);
    let base = plan(image_id, w, h, pad, (0, 0, side, side), VariantTag::Base);

    if is_priority(category) {
        let cc = center_crop_plan(side, side, policy.keep_fraction)?;
        let tight =
            center_crop_plan(side, side, policy.keep_fraction * policy.keep_fraction)?;
        Ok(vec![
            base,
            plan(image_id, w, h, pad, cc, VariantTag::CenterCrop),
            plan(image_id, w, h, (0, 0, 0, 0), (0, 0, w, h), VariantTag::Stretch),
            plan(image_id, w, h, pad, tight, VariantTag::TightCrop),
        ])
    } else if is_square(w, h, policy.square_tolerance) {
        Ok(vec![base])
    } else {
        let cc = center_crop_plan(side, side, policy.keep_fraction)?;
        Ok(vec![base, plan(image_id, w, h, pad, cc, VariantTag::CenterCrop)])
    }
}

/// Componentwise mean of unit vectors, L2-renormalized.
pub fn aggregate_embeddings(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Domain("aggregate_embeddings over empty list".into()))?;
    let dim = first.len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::Domain(format!(
                "embedding {i} has dim {} != {dim}",
                e.len()
            )));
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!(
                "embedding {i} has norm {norm}, not unit within 1e-4"
            )));
        }
    }
    let nf = embeddings.len() as f64;
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / nf;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::Domain(
            "degenerate aggregate: mean embedding is (near) zero".into(),
        ));
    }
    for m in &mut mean {
        *m /= norm;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn pad_examples() {
        assert_eq!(pad_to_square_plan(300, 200), (0, 50, 0, 50));
        assert_eq!(pad_to_square_plan(224, 224), (0, 0, 0, 0));
        assert_eq!(pad_to_square_plan(200, 301), (50, 0, 51, 0));
    }

    #[test]
    fn center_crop_examples() {
        assert_eq!(center_crop_plan(400, 300, 0.9).unwrap(), (20, 15, 360, 270));
        assert_eq!(center_crop_plan(123, 77, 1.0).unwrap(), (0, 0, 123, 77));
        assert!(center_crop_plan(10, 10, 0.04).is_err());
        assert!(center_crop_plan(10, 10, 0.0).is_err());
    }

    #[test]
    fn resize_constant_preserved() {
        for &(w, h, tw, th) in &[(5usize, 7usize, 3usize, 4usize), (4, 4, 9, 9), (8, 3, 8, 3)] {
            let src = vec![7.0; w * h];
            for aa in [false, true] {
                let out = resize_bicubic(&src, w, h, tw, th, aa).unwrap();
                assert!(out.iter().all(|v| (v - 7.0).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn resize_identity() {
        let mut rng = SplitMix64::new(12);
        let (w, h) = (6, 5);
        let src: Vec<f64> = (0..w * h).map(|_| rng.next_f64()).collect();
        for aa in [false, true] {
            let out = resize_bicubic(&src, w, h, w, h, aa).unwrap();
            for (a, b) in out.iter().zip(&src) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    /// Naive dense 2D kernel-sum reference, independent of the separable path.
    fn resize_reference(
        src: &[f64],
        w: usize,
        h: usize,
        tw: usize,
        th: usize,
        antialias: bool,
    ) -> Vec<f64> {
        let sx = w as f64 / tw as f64;
        let sy = h as f64 / th as f64;
        let fx = if antialias && sx > 1.0 { sx } else { 1.0 };
        let fy = if antialias && sy > 1.0 { sy } else { 1.0 };
        let mut out = vec![0.0; tw * th];
        for dy in 0..th {
            let cy = (dy as f64 + 0.5) * sy - 0.5;
            for dx in 0..tw {
                let cx = (dx as f64 + 0.5) * sx - 0.5;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                let x0 = (cx - 2.0 * fx).ceil() as isize;
                let x1 = (cx + 2.0 * fx).floor() as isize;
                let y0 = (cy - 2.0 * fy).ceil() as isize;
                let y1 = (cy + 2.0 * fy).floor() as isize;
                for yi in y0..=y1 {
                    for xi in x0..=x1 {
                        let wgt = cubic((xi as f64 - cx) / fx) * cubic((yi as f64 - cy) / fy);
                        let px = src[clamp(yi, h) * w + clamp(xi, w)];
                        acc += wgt * px;
                        wsum += wgt;
                    }
                }
                out[dy * tw + dx] = acc / wsum;
            }
        }
        out
    }

    #[test]
    fn resize_antialias_matches_dense_reference() {
        // 8x8 linear ramp down to 4x4
        let src: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let got = resize_bicubic(&src, 8, 8, 4, 4, true).unwrap();
        let want = resize_reference(&src, 8, 8, 4, 4, true);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_matches_reference_random() {
        let mut rng = SplitMix64::new(3);
        for &(w, h, tw, th, aa) in &[
            (9usize, 6usize, 4usize, 3usize, true),
            (5, 5, 7, 9, false),
            (10, 4, 3, 8, true),
            (6, 7, 6, 2, true),
        ] {
            let src: Vec<f64> = (0..w * h).map(|_| rng.next_gauss()).collect();
            let got = resize_bicubic(&src, w, h, tw, th, aa).unwrap();
            let want = resize_reference(&src, w, h, tw, th, aa);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn resize_overshoot_bounded() {
        let mut rng = SplitMix64::new(44);
        for _ in 0..20 {
            let (w, h) = (4 + rng.next_below(8) as usize, 4 + rng.next_below(8) as usize);
            let (tw, th) = (1 + rng.next_below(12) as usize, 1 + rng.next_below(12) as usize);
            let src: Vec<f64> = (0..w * h).map(|_| rng.next_f64()).collect();
            let lo = src.iter().cloned().fold(f64::MAX, f64::min);
            let hi = src.iter().cloned().fold(f64::MIN, f64::max);
            let range = hi - lo;
            let out = resize_bicubic(&src, w, h, tw, th, true).unwrap();
            for v in out {
                assert!(v >= lo - 0.25 * range - 1e-9 && v <= hi + 0.25 * range + 1e-9);
            }
        }
    }

    #[test]
    fn tta_routing_table() {
        let policy = TtaPolicy::default();
        let plans = tta_variants(None, 224, 224, Category::Other, &policy).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].variant_tag, VariantTag::Base);

        let plans = tta_variants(None, 448, 224, Category::Other, &policy).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[1].variant_tag, VariantTag::CenterCrop);

        let plans = tta_variants(None, 448, 224, Category::Apparel, &policy).unwrap();
        assert_eq!(plans.len(), 4);
        assert_eq!(plans[3].variant_tag, VariantTag::TightCrop);

        // priority categories get 4 plans even when square
        for cat in [Category::Apparel, Category::Packaged, Category::Toy] {
            assert_eq!(tta_variants(None, 224, 224, cat, &policy).unwrap().len(), 4);
        }
        // unknown behaves as non-priority
        assert_eq!(
            tta_variants(None, 224, 224, Category::Unknown, &policy).unwrap().len(),
            1
        );
    }

    #[test]
    fn aggregate_closed_forms() {
        let e = vec![0.6, 0.8];
        let out = aggregate_embeddings(&[e.clone(), e.clone(), e.clone()]).unwrap();
        for (a, b) in out.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }

        let out = aggregate_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = 0.5f64.sqrt();
        assert!((out[0] - s).abs() < 1e-12 && (out[1] - s).abs() < 1e-12);

        assert!(aggregate_embeddings(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).is_err());
        assert!(aggregate_embeddings(&[]).is_err());
    }

    proptest! {
        #[test]
        fn plans_always_contained(
            w in 1u32..4000,
            h in 1u32..4000,
            f in 0.05f64..1.0,
            cat in 0u8..5,
        ) {
            let policy = TtaPolicy { keep_fraction: f, square_tolerance: 0.0 };
            let category = Category::from_u8(cat).unwrap();
            if let Ok(plans) = tta_variants(None, w, h, category, &policy) {
                let n = plans.len();
                prop_assert!(n == 1 || n == 2 || n == 4);
                for p in &plans {
                    prop_assert!(p.is_contained(), "{p:?}");
                    let (cw, ch) = p.canvas();
                    if p.variant_tag != VariantTag::Stretch {
                        prop_assert_eq!(cw, ch);
                        prop_assert_eq!(cw, w.max(h));
                    }
                }
            }
        }

        #[test]
        fn aggregate_order_invariant(seed in 0u64..500, n in 2usize..6) {
            let mut rng = SplitMix64::new(seed);
            let dim = 4;
            let mut es: Vec<Vec<f64>> = (0..n).map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.next_gauss()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            }).collect();
            if let Ok(fwd) = aggregate_embeddings(&es) {
                es.reverse();
                let rev = aggregate_embeddings(&es).unwrap();
                for (a, b) in fwd.iter().zip(&rev) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
