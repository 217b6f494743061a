use std::path::Path;

use image::{GrayImage as Gray8, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recomp::config::DataConfig;
use recomp::imaging::{image_center, warp_image, FrameSequence, GrayImage, ImageSequence, Pose2};
use recomp::ingestion::{detect_cuts, load_sequence, FrameSource, DEFAULT_CUT_THRESHOLD};
use recomp::training::TrainingSet;

/// Frames `000.png..{n-1}.png` whose pixels encode their own number.
fn numbered_frames(dir: &Path, n: usize) {
    for i in 0..n {
        let img = Gray8::from_fn(6, 4, |x, _| Luma([(i * 10) as u8 + x as u8]));
        img.save(dir.join(format!("{i:03}.png"))).unwrap();
    }
}

#[test]
fn twenty_frames_load_in_order() {
    let dir = tempfile::tempdir().unwrap();
    numbered_frames(dir.path(), 20);
    let seq = load_sequence(&FrameSource::new(dir.path(), "{n}.png")).unwrap();
    assert_eq!(seq.len(), 20);
    assert_eq!(seq.frame_indices(), (0..20).collect::<Vec<_>>());
    for (k, f) in seq.frames().iter().enumerate() {
        assert_eq!(f.size(), (6, 4));
        assert!((f.get(0, 0) - (k * 10) as f32 / 255.0).abs() < 1e-6);
    }
}

#[test]
fn stride_two_keeps_even_frames() {
    let dir = tempfile::tempdir().unwrap();
    numbered_frames(dir.path(), 20);
    let seq = load_sequence(&FrameSource::new(dir.path(), "{n}.png").with_stride(2)).unwrap();
    assert_eq!(seq.len(), 10);
    assert_eq!(seq.frame_indices(), (0..20).step_by(2).collect::<Vec<_>>());
    assert!((seq.frames()[9].get(0, 0) - 180.0 / 255.0).abs() < 1e-6);
}

#[test]
fn stride_beyond_frame_count_leaves_too_few_frames() {
    let dir = tempfile::tempdir().unwrap();
    numbered_frames(dir.path(), 20);
    for stride in [20, 21, 1000] {
        let err = load_sequence(&FrameSource::new(dir.path(), "{n}.png").with_stride(stride))
            .unwrap_err();
        assert!(err.to_string().contains("need at least 2"), "{err}");
    }
    assert!(load_sequence(&FrameSource::new(dir.path(), "{n}.png").with_stride(0)).is_err());
}

#[test]
fn crop_and_resize_apply_after_decode() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        let img = RgbImage::from_fn(10, 8, |x, y| Rgb([(x * 20) as u8, (y * 30) as u8, i as u8]));
        img.save(dir.path().join(format!("frame_{i}.png"))).unwrap();
    }
    let src = FrameSource::new(dir.path(), "frame_{n}.png")
        .with_crop((2, 2, 4, 4))
        .with_resize(8, 8);
    let seq = load_sequence(&src).unwrap();
    assert_eq!(seq.len(), 3);
    assert!(seq.frames().iter().all(|f| f.size() == (8, 8)));
    assert!(seq.frames()[0]
        .pixels()
        .iter()
        .all(|v| (0.0..=1.0).contains(v)));
    let out_of_bounds = FrameSource::new(dir.path(), "frame_{n}.png").with_crop((8, 0, 4, 4));
    assert!(load_sequence(&out_of_bounds).is_err());
}

#[test]
fn loading_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    numbered_frames(dir.path(), 12);
    let a = load_sequence(&FrameSource::video(dir.path())).unwrap();
    let b = load_sequence(&FrameSource::video(dir.path())).unwrap();
    assert_eq!(a.frames(), b.frames());
    assert_eq!(a.frame_size(), (224, 224));
}

fn constant(n: usize) -> ImageSequence {
    let f = GrayImage::from_fn(16, 16, |x, y| ((x + y) % 5) as f32 / 5.0).unwrap();
    ImageSequence::from_frames(vec![f; n], "still").unwrap()
}

#[test]
fn constant_sequence_has_no_cuts() {
    assert!(detect_cuts(&constant(10), DEFAULT_CUT_THRESHOLD)
        .unwrap()
        .is_empty());
}

#[test]
fn infinite_threshold_finds_nothing() {
    let clips = DataConfig {
        count: 2,
        num_base_images: 2,
        ..Default::default()
    }
    .build_clips()
    .unwrap();
    let mut frames: Vec<GrayImage> = Vec::new();
    for c in &clips {
        frames.extend((0..c.len()).map(|i| c.frame(i).unwrap().into_owned()));
    }
    let joined = ImageSequence::from_frames(frames, "joined").unwrap();
    assert!(detect_cuts(&joined, f64::INFINITY).unwrap().is_empty());
    assert!(detect_cuts(&joined, 0.0).is_err());
    assert!(detect_cuts(&joined, f64::NAN).is_err());
}

/// A dense, smoothly textured scene drifting and turning slowly, the way
/// real footage fills the frame (sparse digit clips barely differ at a
/// junction, see the decisions log).
fn drifting_scene(seed: u64, n: usize) -> ImageSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..40)
        .map(|_| {
            (
                rng.random_range(-16.0..80.0),
                rng.random_range(-16.0..80.0),
                rng.random_range(3.0..9.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..64 * 64)
        .map(|i| {
            let (x, y) = ((i % 64) as f64, (i / 64) as f64);
            blobs
                .iter()
                .map(|&(cx, cy, s, a)| {
                    a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum()
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let scene = GrayImage::new(
        64,
        64,
        raw.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect(),
    )
    .unwrap();
    let c = image_center(&scene);
    let (dx, dy, dt) = (
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
        rng.random_range(-1.0..1.0),
    );
    let frames = (0..n)
        .map(|k| {
            let k = k as f64;
            warp_image(&scene, &Pose2::new(k * dx, k * dy, k * dt), c).unwrap()
        })
        .collect();
    ImageSequence::from_frames(frames, format!("scene{seed}")).unwrap()
}

fn junction(a: &ImageSequence, b: &ImageSequence) -> ImageSequence {
    let frames = a.frames().iter().chain(b.frames()).cloned().collect();
    ImageSequence::from_frames(frames, "junction").unwrap()
}

#[test]
fn junction_of_unrelated_clips_is_the_only_cut() {
    for k in 0..20 {
        let (a, b) = (drifting_scene(2 * k, 12), drifting_scene(2 * k + 1, 12));
        let seq = junction(&a, &b);
        let cuts = detect_cuts(&seq, DEFAULT_CUT_THRESHOLD).unwrap();
        assert_eq!(cuts, vec![11], "scenes {} and {}", 2 * k, 2 * k + 1);
    }
}

#[test]
fn sampled_windows_never_span_a_detected_cut() {
    use recomp::recomposer::{sample_indices, SamplerConfig};
    let seq = junction(&drifting_scene(100, 20), &drifting_scene(101, 20));
    let cuts = detect_cuts(&seq, DEFAULT_CUT_THRESHOLD).unwrap();
    assert_eq!(cuts, vec![19]);
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..2000 {
        let t = sample_indices(seq.len(), &cuts, &cfg, &mut rng).unwrap();
        let (lo, hi) = t.span();
        assert!(hi <= 19 || lo >= 20, "window {lo}..={hi} spans the cut");
    }
    let set = TrainingSet::new(vec![&seq as &dyn FrameSequence]);
    assert!(set.with_cuts(vec![]).is_err());
}
