use std::borrow::Cow;
use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{image_center, warp_image, FrameSequence, GrayImage, ImageSequence, Pose2};
use crate::error::{Error, Result};

/// Frames per generated clip.
pub const DEFAULT_NUM_FRAMES: usize = 20;
/// Largest sampled translation along each axis, in pixels.
pub const MAX_TRANSLATION: f64 = 10.0;
/// Canvas that 28×28 digits are centered on before warping.
pub const DEFAULT_CANVAS: usize = 64;

/// Total motion of one synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub total_tx: f64,
    pub total_ty: f64,
    pub total_theta: f64,
    pub num_frames: usize,
}

impl MotionParams {
    pub fn new(total_tx: f64, total_ty: f64, total_theta: f64, num_frames: usize) -> Result<Self> {
        let p = Self {
            total_tx,
            total_ty,
            total_theta,
            num_frames,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::invalid(format!(
                "a motion clip needs at least 2 frames, got {}",
                self.num_frames
            )));
        }
        if ![self.total_tx, self.total_ty, self.total_theta]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("motion parameters must be finite"));
        }
        Ok(())
    }

    /// Pose reached after `k` of `num_frames - 1` equal steps.
    pub fn pose_at(&self, k: usize) -> Pose2 {
        let f = k as f64 / (self.num_frames - 1) as f64;
        Pose2::new(self.total_tx * f, self.total_ty * f, self.total_theta * f)
    }

    pub fn total_pose(&self) -> Pose2 {
        self.pose_at(self.num_frames - 1)
    }
}

/// Uniform translation in `[-10, 10]²` pixels and rotation in `[0, 360)` degrees.
pub fn sample_motion_params<R: Rng + ?Sized>(rng: &mut R) -> MotionParams {
    MotionParams {
        total_tx: rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        total_ty: rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        total_theta: rng.random_range(0.0..360.0),
        num_frames: DEFAULT_NUM_FRAMES,
    }
}

/// Renders every frame of a clip, with per-frame ground-truth poses.
pub fn generate_se2_sequence(
    base: &GrayImage,
    params: &MotionParams,
) -> Result<(ImageSequence, Vec<Pose2>)> {
    params.validate()?;
    let center = image_center(base);
    let poses: Vec<Pose2> = (0..params.num_frames).map(|k| params.pose_at(k)).collect();
    let frames = poses
        .iter()
        .map(|p| warp_image(base, p, center))
        .collect::<Result<Vec<_>>>()?;
    Ok((ImageSequence::from_frames(frames, "se2")?, poses))
}

/// A synthetic clip whose frames are rendered on demand.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    id: String,
    base: Arc<GrayImage>,
    base_index: usize,
    params: MotionParams,
}

impl SyntheticClip {
    pub fn new(
        id: impl Into<String>,
        base: Arc<GrayImage>,
        base_index: usize,
        params: MotionParams,
    ) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            id: id.into(),
            base,
            base_index,
            params,
        })
    }

    /// The same motion spread over `n` frames.
    pub fn with_num_frames(mut self, n: usize) -> Result<Self> {
        self.params.num_frames = n;
        self.params.validate()?;
        Ok(self)
    }

    pub fn params(&self) -> &MotionParams {
        &self.params
    }

    pub fn base(&self) -> &GrayImage {
        &self.base
    }

    pub fn base_index(&self) -> usize {
        self.base_index
    }

    pub fn poses(&self) -> Vec<Pose2> {
        (0..self.params.num_frames)
            .map(|k| self.params.pose_at(k))
            .collect()
    }

    pub fn render(&self) -> Result<(ImageSequence, Vec<Pose2>)> {
        let (seq, poses) = generate_se2_sequence(&self.base, &self.params)?;
        let frames = seq.frames().to_vec();
        Ok((ImageSequence::from_frames(frames, self.id.clone())?, poses))
    }
}

impl FrameSequence for SyntheticClip {
    fn len(&self) -> usize {
        self.params.num_frames
    }

    fn frame_size(&self) -> (usize, usize) {
        self.base.size()
    }

    fn frame(&self, i: usize) -> Result<Cow<'_, GrayImage>> {
        if i >= self.params.num_frames {
            return Err(Error::invalid(format!(
                "frame {i} out of range for clip of length {}",
                self.params.num_frames
            )));
        }
        warp_image(
            &self.base,
            &self.params.pose_at(i),
            image_center(&self.base),
        )
        .map(Cow::Owned)
    }

    fn source_id(&self) -> &str {
        &self.id
    }
}

/// Draws `n_sequences` clips, each over a uniformly chosen base image with
/// its own motion draw. Frames are rendered lazily.
pub fn build_se2_clips<R: Rng + ?Sized>(
    base_images: &[Arc<GrayImage>],
    n_sequences: usize,
    rng: &mut R,
) -> Result<Vec<SyntheticClip>> {
    if base_images.is_empty() {
        return Err(Error::invalid("no base images to build a dataset from"));
    }
    let size = base_images[0].size();
    if base_images.iter().any(|b| b.size() != size) {
        return Err(Error::invalid("base images differ in size"));
    }
    (0..n_sequences)
        .map(|i| {
            let b = rng.random_range(0..base_images.len());
            let params = sample_motion_params(rng);
            SyntheticClip::new(format!("se2-{i:06}"), base_images[b].clone(), b, params)
        })
        .collect()
}

/// Materialized variant of [`build_se2_clips`]; consumes the random stream identically.
pub fn build_se2_dataset<R: Rng + ?Sized>(
    base_images: &[GrayImage],
    n_sequences: usize,
    rng: &mut R,
) -> Result<Vec<(ImageSequence, Vec<Pose2>)>> {
    let bases: Vec<Arc<GrayImage>> = base_images.iter().cloned().map(Arc::new).collect();
    build_se2_clips(&bases, n_sequences, rng)?
        .iter()
        .map(SyntheticClip::render)
        .collect()
}

type Stroke = &'static [(f64, f64)];

const DIGIT_STROKES: [&[Stroke]; 10] = [
    &[&[]], // 0 is an ellipse, built below
    &[&[(0.38, 0.27), (0.55, 0.1), (0.55, 0.9)]],
    &[&[
        (0.25, 0.25),
        (0.4, 0.1),
        (0.62, 0.1),
        (0.75, 0.25),
        (0.7, 0.45),
        (0.25, 0.9),
        (0.8, 0.9),
    ]],
    &[&[
        (0.25, 0.15),
        (0.7, 0.12),
        (0.48, 0.45),
        (0.75, 0.64),
        (0.6, 0.88),
        (0.25, 0.85),
    ]],
    &[&[(0.66, 0.9), (0.66, 0.1), (0.2, 0.65), (0.82, 0.65)]],
    &[&[
        (0.75, 0.1),
        (0.32, 0.1),
        (0.28, 0.45),
        (0.6, 0.42),
        (0.76, 0.65),
        (0.6, 0.88),
        (0.25, 0.85),
    ]],
    &[&[
        (0.7, 0.12),
        (0.42, 0.3),
        (0.27, 0.65),
        (0.4, 0.9),
        (0.65, 0.88),
        (0.73, 0.65),
        (0.5, 0.5),
        (0.3, 0.62),
    ]],
    &[&[(0.2, 0.1), (0.8, 0.1), (0.45, 0.9)]],
    &[
        &[(0.5, 0.1), (0.7, 0.2), (0.5, 0.48), (0.3, 0.2), (0.5, 0.1)],
        &[
            (0.5, 0.48),
            (0.75, 0.68),
            (0.5, 0.9),
            (0.25, 0.68),
            (0.5, 0.48),
        ],
    ],
    &[&[
        (0.7, 0.4),
        (0.5, 0.52),
        (0.3, 0.36),
        (0.4, 0.12),
        (0.65, 0.12),
        (0.7, 0.4),
        (0.6, 0.9),
    ]],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Renders a handwritten-style digit glyph of the given class on a
/// `size × size` canvas, with random slant, scale, stroke width and jitter.
pub fn render_digit<R: Rng + ?Sized>(digit: usize, size: usize, rng: &mut R) -> Result<GrayImage> {
    if digit > 9 {
        return Err(Error::invalid(format!(
            "digit class {digit} is not in 0..=9"
        )));
    }
    let mut strokes: Vec<Vec<(f64, f64)>> = if digit == 0 {
        vec![(0..=16)
            .map(|i| {
                let a = TAU * i as f64 / 16.0;
                (0.5 + 0.26 * a.cos(), 0.5 + 0.4 * a.sin())
            })
            .collect()]
    } else {
        DIGIT_STROKES[digit].iter().map(|s| s.to_vec()).collect()
    };
    let scale = rng.random_range(0.75..0.95);
    let slant = rng.random_range(-0.25..0.25);
    let width = rng.random_range(1.6..2.6) * size as f64 / 28.0;
    for s in &mut strokes {
        for p in s.iter_mut() {
            let jx = rng.random_range(-0.035..0.035);
            let jy = rng.random_range(-0.035..0.035);
            let (x, y) = (p.0 - 0.5 + jx, p.1 - 0.5 + jy);
            let x = x - slant * y;
            *p = (
                (0.5 + x * scale) * size as f64,
                (0.5 + y * scale) * size as f64,
            );
        }
    }
    GrayImage::from_fn(size, size, |x, y| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        (width / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32
    })
}

/// Digit glyphs of classes `0, 1, …, 9, 0, …` centered on a `canvas × canvas` frame.
pub fn synthetic_digits<R: Rng + ?Sized>(
    count: usize,
    glyph_size: usize,
    canvas: usize,
    rng: &mut R,
) -> Result<Vec<GrayImage>> {
    (0..count)
        .map(|i| render_digit(i % 10, glyph_size, rng)?.pad_to(canvas, canvas))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn digit_base() -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        render_digit(4, 28, &mut rng)
            .unwrap()
            .pad_to(64, 64)
            .unwrap()
    }

    #[test]
    fn params_are_deterministic() {
        let a = sample_motion_params(&mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_motion_params(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.num_frames, 20);
    }

    #[test]
    fn params_follow_uniform_ranges() {
        // sd of U[-10,10] is 20/sqrt(12) = 5.77; 10k draws give a standard error
        // of 0.058, so ±0.35 is a 6-sigma band. For U[0,360): sd 103.9, se 1.04,
        // ±3.2 is ~3 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<_> = (0..10_000)
            .map(|_| sample_motion_params(&mut rng))
            .collect();
        let mean = |f: &dyn Fn(&MotionParams) -> f64| draws.iter().map(f).sum::<f64>() / 1e4;
        assert!(mean(&|p| p.total_tx).abs() < 0.35);
        assert!(mean(&|p| p.total_ty).abs() < 0.35);
        assert!((mean(&|p| p.total_theta) - 180.0).abs() < 3.2);
        for p in &draws {
            assert!((-10.0..=10.0).contains(&p.total_tx));
            assert!((-10.0..=10.0).contains(&p.total_ty));
            assert!((0.0..360.0).contains(&p.total_theta));
        }
    }

    #[test]
    fn null_motion_copies_base() {
        let base = digit_base();
        let (seq, poses) =
            generate_se2_sequence(&base, &MotionParams::new(0.0, 0.0, 0.0, 20).unwrap()).unwrap();
        assert_eq!(seq.len(), 20);
        assert!(seq.frames().iter().all(|f| *f == base));
        assert!(poses.iter().all(|p| *p == Pose2::IDENTITY));
    }

    #[test]
    fn first_frame_is_base() {
        let base = digit_base();
        let (seq, _) =
            generate_se2_sequence(&base, &MotionParams::new(-3.2, 7.7, 211.0, 20).unwrap())
                .unwrap();
        assert_eq!(seq.frames()[0], base);
    }

    #[test]
    fn interpolated_frames_match_direct_warps() {
        let base = digit_base();
        let params = MotionParams::new(10.0, 0.0, 0.0, 20).unwrap();
        let (seq, poses) = generate_se2_sequence(&base, &params).unwrap();
        for k in 0..20 {
            let expected_shift = 10.0 * k as f64 / 19.0;
            assert!((poses[k].tx - expected_shift).abs() < 1e-12);
            let direct = warp_image(
                &base,
                &Pose2::new(expected_shift, 0.0, 0.0),
                image_center(&base),
            )
            .unwrap();
            assert!(seq.frames()[k].mean_abs_diff(&direct).unwrap() < 1e-6);
        }
    }

    #[test]
    fn per_frame_steps_are_uniform() {
        let params = MotionParams::new(-7.3, 4.1, 299.0, 20).unwrap();
        let total = params.total_pose();
        for k in 1..20 {
            let (a, b) = (params.pose_at(k - 1), params.pose_at(k));
            assert!(((b.tx - a.tx) - total.tx / 19.0).abs() < 1e-12);
            assert!(((b.ty - a.ty) - total.ty / 19.0).abs() < 1e-12);
            assert!(((b.theta - a.theta) - total.theta / 19.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_short_clips() {
        assert!(MotionParams::new(1.0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn dataset_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_se2_dataset(&[], 3, &mut rng).is_err());
        assert!(build_se2_dataset(&[digit_base()], 0, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn dataset_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bases = synthetic_digits(3, 28, 64, &mut rng).unwrap();
        let a = build_se2_dataset(&bases, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = build_se2_dataset(&bases, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bases_chosen_uniformly() {
        // 1000 draws over 100 bases: each count ~ Binomial(1000, 0.01), mean 10,
        // sd 3.15. The 3·sqrt(10) band covers each count with p ≈ 0.997, so over
        // 100 bases a handful may fall outside; require ≥ 95 inside and the
        // chi-square statistic within its 99.9% quantile (df 99: 148.2).
        let base = Arc::new(GrayImage::zeros(8, 8).unwrap());
        let bases: Vec<_> = (0..100).map(|_| base.clone()).collect();
        let clips = build_se2_clips(&bases, 1000, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let mut counts = [0usize; 100];
        for c in &clips {
            counts[c.base_index()] += 1;
        }
        let band = 3.0 * 10f64.sqrt();
        let inside = counts
            .iter()
            .filter(|&&c| (c as f64 - 10.0).abs() <= band)
            .count();
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 10.0).powi(2) / 10.0)
            .sum();
        assert!(inside >= 95, "{inside} of 100 within band");
        assert!(chi2 < 148.2, "chi2 {chi2}");
    }

    #[test]
    fn lazy_clip_matches_materialized() {
        let base = Arc::new(digit_base());
        let params = MotionParams::new(4.0, -2.0, 33.0, 20).unwrap();
        let clip = SyntheticClip::new("c", base.clone(), 0, params).unwrap();
        let (seq, _) = generate_se2_sequence(&base, &params).unwrap();
        for k in [0, 7, 19] {
            assert_eq!(*clip.frame(k).unwrap(), seq.frames()[k]);
        }
        assert!(clip.frame(20).is_err());
    }

    #[test]
    fn digits_have_ink_and_fit_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in synthetic_digits(10, 28, 64, &mut rng).unwrap() {
            assert_eq!(d.size(), (64, 64));
            let ink: f32 = d.pixels().iter().sum();
            assert!(ink > 20.0, "ink {ink}");
            // border band stays empty so ±10px shifts plus rotation keep the glyph
            for y in 0..64 {
                for x in 0..64 {
                    if x < 14 || y < 14 || x >= 50 || y >= 50 {
                        assert_eq!(d.get(x, y), 0.0);
                    }
                }
            }
        }
    }
}
