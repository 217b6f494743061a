use super::{GrayImage, Pose2};
use crate::error::{Error, Result};

/// Bilinear sample at a continuous position; samples outside the image read 0.
#[inline]
pub fn sample_bilinear(src: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (src.width() as isize, src.height() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            src.get(xi as usize, yi as usize) as f64
        }
    };
    let mut v = (1.0 - fx) * (1.0 - fy) * px(x0, y0);
    // skip zero-weight taps so exact-grid samples never touch neighbours
    if fx != 0.0 {
        v += fx * (1.0 - fy) * px(x0 + 1, y0);
    }
    if fy != 0.0 {
        v += (1.0 - fx) * fy * px(x0, y0 + 1);
        if fx != 0.0 {
            v += fx * fy * px(x0 + 1, y0 + 1);
        }
    }
    v
}

/// The geometric center of an image in pixel coordinates.
pub fn image_center(img: &GrayImage) -> (f64, f64) {
    (
        (img.width() as f64 - 1.0) / 2.0,
        (img.height() as f64 - 1.0) / 2.0,
    )
}

/// Moves image content by `pose`: rotation about `center`, then translation.
///
/// Every output pixel pulls from the inverse-mapped source position with
/// bilinear interpolation; positions outside the source read as 0.
pub fn warp_image(src: &GrayImage, pose: &Pose2, center: (f64, f64)) -> Result<GrayImage> {
    let (w, h) = src.size();
    if w == 0 || h == 0 {
        return Err(Error::invalid("cannot warp an empty image"));
    }
    let (cx, cy) = center;
    if !(0.0..=(w as f64 - 1.0)).contains(&cx) || !(0.0..=(h as f64 - 1.0)).contains(&cy) {
        return Err(Error::invalid(format!(
            "warp center ({cx}, {cy}) outside a {w}x{h} image"
        )));
    }
    let inv = pose.inverse();
    // exact integer arithmetic for pure translations keeps integer shifts lossless
    let pure_translation = pose.theta == 0.0;
    let (s, c) = inv.theta.to_radians().sin_cos();
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if pure_translation {
                (x as f64 - pose.tx, y as f64 - pose.ty)
            } else {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                (c * dx - s * dy + cx + inv.tx, s * dx + c * dy + cy + inv.ty)
            };
            pixels.push(sample_bilinear(src, sx, sy).clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(size: usize, sigma: f64) -> GrayImage {
        let c = (size as f64 - 1.0) / 2.0;
        GrayImage::from_fn(size, size, |x, y| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            // compact support keeps shifted copies clear of the border
            if d2 > (3.0 * sigma).powi(2) {
                0.0
            } else {
                (-d2 / (2.0 * sigma * sigma)).exp() as f32
            }
        })
        .unwrap()
    }

    fn single_pixel(size: usize, x: usize, y: usize) -> GrayImage {
        GrayImage::from_fn(size, size, |i, j| if (i, j) == (x, y) { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn identity_is_pixel_exact() {
        let img = blob(32, 5.0);
        let out = warp_image(&img, &Pose2::IDENTITY, image_center(&img)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_translation_moves_pixel() {
        let img = single_pixel(32, 10, 10);
        let out = warp_image(&img, &Pose2::new(3.0, 0.0, 0.0), image_center(&img)).unwrap();
        assert_eq!(out, single_pixel(32, 13, 10));
    }

    #[test]
    fn integer_translations_compose_exactly() {
        let img = blob(40, 4.0);
        let c = image_center(&img);
        for (t1, t2) in [((2.0, -3.0), (5.0, 1.0)), ((-4.0, 0.0), (1.0, 7.0))] {
            let a = warp_image(&img, &Pose2::new(t1.0, t1.1, 0.0), c).unwrap();
            let ab = warp_image(&a, &Pose2::new(t2.0, t2.1, 0.0), c).unwrap();
            let direct = warp_image(&img, &Pose2::new(t1.0 + t2.0, t1.1 + t2.1, 0.0), c).unwrap();
            assert_eq!(ab, direct);
        }
    }

    #[test]
    fn quarter_turn_about_center() {
        // bright pixel right of center ends up below center for +90 degrees (y down)
        let img = single_pixel(9, 6, 4);
        let out = warp_image(&img, &Pose2::new(0.0, 0.0, 90.0), image_center(&img)).unwrap();
        assert!((out.get(4, 6) - 1.0).abs() < 1e-6, "{:?}", out.pixels());
    }

    #[test]
    fn round_trip_error_is_small() {
        // measured worst case over these poses is ~0.004; the bound leaves headroom
        let img = blob(64, 6.0);
        let c = image_center(&img);
        let mut worst: f64 = 0.0;
        for pose in [
            Pose2::new(3.3, -7.1, 47.0),
            Pose2::new(-9.5, 2.25, 301.0),
            Pose2::new(0.5, 0.5, 180.0),
            Pose2::new(10.0, 10.0, 359.0),
        ] {
            let fwd = warp_image(&img, &pose, c).unwrap();
            let back = warp_image(&fwd, &pose.inverse(), c).unwrap();
            worst = worst.max(back.mean_abs_diff(&img).unwrap());
        }
        assert!(worst < 0.02, "round-trip MAD {worst}");
    }

    #[test]
    fn rejects_bad_center() {
        let img = blob(8, 2.0);
        assert!(warp_image(&img, &Pose2::IDENTITY, (8.5, 2.0)).is_err());
        assert!(warp_image(&img, &Pose2::IDENTITY, (-0.1, 2.0)).is_err());
    }
}
