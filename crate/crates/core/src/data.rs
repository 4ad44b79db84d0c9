//! Video dataset ingestion, evaluation metrics, compositing, and a
//! self-consistent synthetic person generator for hermetic tests.
//!
//! On-disk layout of a dataset root:
//!   frames/%06d.png    8-bit RGB frames
//!   landmarks.json     68-point tracks, one entry per frame
//!   masks/%06d.png     optional grayscale foreground masks (255 = fg)
//!   meta.json          optional {"fps": ..}; defaults to 20

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{load_landmarks, save_landmarks, Landmarks2D, SopCamera};
use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::model::{synthetic_model, ShapeBasis, SyntheticModelConfig};
use crate::raster::{rasterize, render_nmfc_frame, NmfcImage, NO_TRIANGLE};
use crate::tensor::Tensor;

pub const DEFAULT_FPS: f64 = 20.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    fps: f64,
}

#[derive(Debug, Clone)]
pub struct VideoDataset {
    pub frames: Vec<RgbImage>,
    pub landmarks: Vec<Landmarks2D<f64>>,
    pub masks: Option<Vec<GrayImage>>,
    pub fps: f64,
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.frames.len() != self.landmarks.len() {
            return Err(Error::Dataset(format!(
                "{} frames but {} landmark entries",
                self.frames.len(),
                self.landmarks.len()
            )));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.frames.len() {
                return Err(Error::Dataset(format!(
                    "{} frames but {} masks",
                    self.frames.len(),
                    masks.len()
                )));
            }
        }
        if let Some(first) = self.frames.first() {
            let dims = (first.width(), first.height());
            for f in &self.frames {
                if (f.width(), f.height()) != dims {
                    return Err(Error::Dataset("inconsistent frame resolution".into()));
                }
            }
            if let Some(masks) = &self.masks {
                for m in masks {
                    if (m.width(), m.height()) != dims {
                        return Err(Error::Dataset("mask resolution differs".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

fn count_pngs(dir: &Path) -> Result<usize> {
    let mut count = 0;
    while frame_path(dir, count).is_file() {
        count += 1;
    }
    // Reject gaps or stray numbering.
    let total = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    if total != count {
        return Err(Error::Dataset(format!(
            "non-contiguous frame numbering in {}",
            dir.display()
        )));
    }
    Ok(count)
}

pub fn load_dataset(root: &Path) -> Result<VideoDataset> {
    let frames_dir = root.join("frames");
    let n = count_pngs(&frames_dir)?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let img = image::open(frame_path(&frames_dir, i))?.to_rgb8();
        frames.push(img);
    }
    let landmarks = load_landmarks(&root.join("landmarks.json"))?;
    let masks_dir = root.join("masks");
    let masks = if masks_dir.is_dir() {
        let m = count_pngs(&masks_dir)?;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            out.push(image::open(frame_path(&masks_dir, i))?.to_luma8());
        }
        Some(out)
    } else {
        None
    };
    let meta_path = root.join("meta.json");
    let fps = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        meta.fps
    } else {
        DEFAULT_FPS
    };
    let ds = VideoDataset {
        frames,
        landmarks,
        masks,
        fps,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(root: &Path, ds: &VideoDataset) -> Result<()> {
    ds.validate()?;
    let frames_dir = root.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, f) in ds.frames.iter().enumerate() {
        f.save(frame_path(&frames_dir, i))?;
    }
    save_landmarks(&ds.landmarks, root.join("landmarks.json"))?;
    if let Some(masks) = &ds.masks {
        let masks_dir = root.join("masks");
        fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
        for (i, m) in masks.iter().enumerate() {
            m.save(frame_path(&masks_dir, i))?;
        }
    }
    let meta_path = root.join("meta.json");
    let text = serde_json::to_string_pretty(&DatasetMeta { fps: ds.fps })?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// Contiguous tail split: the last `test_len` frames are the test set.
pub fn split_train_test(ds: &VideoDataset, test_len: usize) -> Result<(VideoDataset, VideoDataset)> {
    let t = ds.len();
    if t <= test_len {
        return Err(Error::Dataset(format!(
            "{t} frames cannot spare a {test_len}-frame test tail"
        )));
    }
    let cut = t - test_len;
    let take = |r: std::ops::Range<usize>| VideoDataset {
        frames: ds.frames[r.clone()].to_vec(),
        landmarks: ds.landmarks[r.clone()].to_vec(),
        masks: ds.masks.as_ref().map(|m| m[r.clone()].to_vec()),
        fps: ds.fps,
    };
    Ok((take(0..cut), take(cut..t)))
}

/// Mean absolute per-pixel, per-channel distance on the 0-255 scale,
/// optionally restricted to mask foreground (value > 127).
pub fn pixel_distance(fake: &RgbImage, real: &RgbImage, mask: Option<&GrayImage>) -> Result<f64> {
    if fake.dimensions() != real.dimensions() {
        return Err(Error::ShapeMismatch("image dimensions differ".into()));
    }
    if let Some(m) = mask {
        if m.dimensions() != fake.dimensions() {
            return Err(Error::ShapeMismatch("mask dimensions differ".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y, pf) in fake.enumerate_pixels() {
        if let Some(m) = mask {
            if m.get_pixel(x, y).0[0] <= 127 {
                continue;
            }
        }
        let pr = real.get_pixel(x, y);
        for c in 0..3 {
            sum += (pf.0[c] as f64 - pr.0[c] as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Intersection over union of thresholded masks; both-empty is defined as 1.
pub fn mask_iou(pred: &GrayImage, truth: &GrayImage, threshold: f64) -> Result<f64> {
    if pred.dimensions() != truth.dimensions() {
        return Err(Error::ShapeMismatch("mask dimensions differ".into()));
    }
    let cut = threshold * 255.0;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, t) in pred.pixels().zip(truth.pixels()) {
        let a = p.0[0] as f64 > cut;
        let b = t.0[0] as f64 > cut;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Soft composite: out = m*frame + (1-m)*background with m = mask/255.
pub fn composite_background(
    frame: &RgbImage,
    mask: &GrayImage,
    background: &RgbImage,
) -> Result<RgbImage> {
    if frame.dimensions() != background.dimensions() || frame.dimensions() != mask.dimensions() {
        return Err(Error::ShapeMismatch("composite dimensions differ".into()));
    }
    let mut out = RgbImage::new(frame.width(), frame.height());
    for (x, y, po) in out.enumerate_pixels_mut() {
        let m = mask.get_pixel(x, y).0[0] as f64 / 255.0;
        let pf = frame.get_pixel(x, y);
        let pb = background.get_pixel(x, y);
        for c in 0..3 {
            po.0[c] = (m * pf.0[c] as f64 + (1.0 - m) * pb.0[c] as f64).round() as u8;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_pixel_dist: f64,
    pub masked_avg_pixel_dist: Option<f64>,
    pub mask_iou: Option<f64>,
}

/// Sequence-level metrics: distances averaged over frames, IoU averaged
/// over predicted/ground-truth mask pairs when both are present.
pub fn sequence_metrics(
    fake: &[RgbImage],
    real: &[RgbImage],
    gt_masks: Option<&[GrayImage]>,
    pred_masks: Option<&[GrayImage]>,
) -> Result<MetricsReport> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Dataset("sequence lengths differ or empty".into()));
    }
    let mut dist = 0.0;
    for (f, r) in fake.iter().zip(real) {
        dist += pixel_distance(f, r, None)?;
    }
    let avg_pixel_dist = dist / fake.len() as f64;
    let masked_avg_pixel_dist = match gt_masks {
        Some(masks) => {
            let mut s = 0.0;
            for ((f, r), m) in fake.iter().zip(real).zip(masks) {
                s += pixel_distance(f, r, Some(m))?;
            }
            Some(s / fake.len() as f64)
        }
        None => None,
    };
    let iou = match (pred_masks, gt_masks) {
        (Some(pred), Some(gt)) => {
            let mut s = 0.0;
            for (p, t) in pred.iter().zip(gt) {
                s += mask_iou(p, t, 0.5)?;
            }
            Some(s / pred.len() as f64)
        }
        _ => None,
    };
    Ok(MetricsReport {
        avg_pixel_dist,
        masked_avg_pixel_dist,
        mask_iou: iou,
    })
}

/// `[3,H,W]` tensor in [-1,1] from an 8-bit RGB frame.
pub fn tensor_from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor {
        shape: vec![3, h, w],
        data,
    }
}

/// 8-bit RGB frame from a [-1,1] `[3,H,W]` tensor.
pub fn rgb_from_tensor(t: &Tensor) -> Result<RgbImage> {
    if t.shape.len() != 3 || t.shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [3,H,W], got {:?}",
            t.shape
        )));
    }
    let (h, w) = (t.shape[1], t.shape[2]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = (t.data[(c * h + y as usize) * w + x as usize] + 1.0) * 127.5;
            p.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// `[1,H,W]` tensor in [0,1] from a grayscale mask.
pub fn tensor_from_mask(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; h * w];
    for (x, y, p) in img.enumerate_pixels() {
        data[y as usize * w + x as usize] = p.0[0] as f64 / 255.0;
    }
    Tensor {
        shape: vec![1, h, w],
        data,
    }
}

pub fn mask_from_tensor(t: &Tensor) -> Result<GrayImage> {
    if t.shape.len() != 3 || t.shape[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected [1,H,W], got {:?}",
            t.shape
        )));
    }
    let (h, w) = (t.shape[1], t.shape[2]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[0] = (t.data[y as usize * w + x as usize] * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// `[3,H,W]` conditioning tensor (values stay in [0,1]) from a rendered
/// coordinate image.
pub fn tensor_from_nmfc(img: &NmfcImage<f64>) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.pixel(x, y);
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c];
            }
        }
    }
    Tensor {
        shape: vec![3, h, w],
        data,
    }
}

/// A fully self-consistent synthetic person: morphable-model parameters, a
/// smooth camera/expression trajectory, frames rendered from the
/// coordinate-colored mesh, landmark tracks, and coverage masks.
pub struct SynthPerson {
    pub basis: ShapeBasis<f64>,
    pub fit: FitResult<f64>,
    pub dataset: VideoDataset,
    pub nmfcs: Vec<NmfcImage<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthPersonConfig {
    pub seed: u64,
    pub num_frames: usize,
    pub resolution: usize,
}

impl Default for SynthPersonConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_frames: 50,
            resolution: 32,
        }
    }
}

pub fn synth_person(cfg: &SynthPersonConfig) -> Result<SynthPerson> {
    let model_cfg = SyntheticModelConfig {
        grid: 12,
        n_id: 8,
        n_exp: 5,
        seed: cfg.seed,
    };
    let basis = synthetic_model::<f64>(&model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5deece66d);
    let identity = DVector::from_fn(model_cfg.n_id, |j, _| {
        rng.gen_range(-0.8..0.8) * basis.sigma_id()[j]
    });
    let res = cfg.resolution as f64;
    let t_total = cfg.num_frames;
    let phase: Vec<f64> = (0..model_cfg.n_exp).map(|_| rng.gen_range(0.0..6.28)).collect();
    let mut expressions = Vec::with_capacity(t_total);
    let mut cameras = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let ft = t as f64;
        expressions.push(DVector::from_fn(model_cfg.n_exp, |j, _| {
            0.6 * basis.sigma_exp()[j] * (0.35 * ft + phase[j]).sin()
        }));
        cameras.push(SopCamera {
            rotation: Vector3::new(0.12 * (0.2 * ft).sin(), 0.18 * (0.15 * ft).cos(), 0.0),
            translation: Vector3::new(res / 2.0, res / 2.0, 0.0),
            scale: res / 280.0 * (1.0 + 0.05 * (0.1 * ft).sin()),
        });
    }
    let fit = FitResult {
        identity,
        expressions,
        cameras,
        energy: None,
        energy_trace: Vec::new(),
    };
    let nmf = basis.normalized_mean_face()?;
    let (w, h) = (cfg.resolution, cfg.resolution);
    let mut frames = Vec::with_capacity(t_total);
    let mut masks = Vec::with_capacity(t_total);
    let mut landmarks = Vec::with_capacity(t_total);
    let mut nmfcs = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let params = fit.params_at(t);
        let cam = &fit.cameras[t];
        let nmfc = render_nmfc_frame(&basis, &params, cam, &nmf, w, h)?;
        // RGB frame is the coordinate image itself on the 0-255 scale.
        let mut frame = RgbImage::new(w as u32, h as u32);
        for (x, y, p) in frame.enumerate_pixels_mut() {
            let px = nmfc.pixel(x as usize, y as usize);
            for c in 0..3 {
                p.0[c] = (px[c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let mesh = basis.synthesize(&params)?;
        let buf = rasterize(&mesh, cam, w, h)?;
        let mut mask = GrayImage::new(w as u32, h as u32);
        for (x, y, p) in mask.enumerate_pixels_mut() {
            p.0[0] = if buf.id_at(x as usize, y as usize) != NO_TRIANGLE {
                255
            } else {
                0
            };
        }
        let verts = basis.landmark_positions(&params)?;
        landmarks.push(Landmarks2D::new(cam.project(&verts), None)?);
        frames.push(frame);
        masks.push(mask);
        nmfcs.push(nmfc);
    }
    let dataset = VideoDataset {
        frames,
        landmarks,
        masks: Some(masks),
        fps: DEFAULT_FPS,
    };
    dataset.validate()?;
    Ok(SynthPerson {
        basis,
        fit,
        dataset,
        nmfcs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn checker(seed: u8, w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                ((x * 37 + y * 11 + seed as u32) % 256) as u8,
                ((x * 7 + y * 53 + 2 * seed as u32) % 256) as u8,
                ((x * 91 + y * 3 + 5 * seed as u32) % 256) as u8,
            ])
        })
    }

    fn small_dataset(t: usize) -> VideoDataset {
        let res = 16u32;
        VideoDataset {
            frames: (0..t).map(|i| checker(i as u8, res, res)).collect(),
            landmarks: (0..t)
                .map(|i| {
                    let pts = (0..68)
                        .map(|k| {
                            nalgebra::Vector2::new(
                                (k % 16) as f64 + 0.1 * i as f64,
                                (k / 16) as f64,
                            )
                        })
                        .collect();
                    Landmarks2D::new(pts, None).unwrap()
                })
                .collect(),
            masks: Some(
                (0..t)
                    .map(|_| GrayImage::from_fn(res, res, |x, _| Luma([if x < 8 { 255 } else { 0 }])))
                    .collect(),
            ),
            fps: 20.0,
        }
    }

    #[test]
    fn dataset_round_trip() {
        let ds = small_dataset(3);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.fps, 20.0);
        for t in 0..3 {
            assert_eq!(back.frames[t], ds.frames[t]);
            assert_eq!(back.masks.as_ref().unwrap()[t], ds.masks.as_ref().unwrap()[t]);
            for k in 0..68 {
                let d = (back.landmarks[t].points[k] - ds.landmarks[t].points[k]).norm();
                assert!(d < 1e-12);
            }
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let ds = small_dataset(3);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        // Drop one landmark entry on disk.
        save_landmarks(&ds.landmarks[..2], dir.path().join("landmarks.json")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn split_conventions() {
        let (train, test) = split_train_test(&small_dataset(150), 100).unwrap();
        assert_eq!((train.len(), test.len()), (50, 100));
        let (t1, t100) = split_train_test(&small_dataset(101), 100).unwrap();
        assert_eq!((t1.len(), t100.len()), (1, 100));
        assert!(split_train_test(&small_dataset(100), 100).is_err());
        // Tail is contiguous: last train frame immediately precedes first
        // test frame.
        assert_eq!(train.frames[49], small_dataset(150).frames[49]);
        assert_eq!(test.frames[0], small_dataset(150).frames[50]);
    }

    #[test]
    fn pixel_distance_trivial_values() {
        let a = checker(1, 8, 8);
        assert_eq!(pixel_distance(&a, &a, None).unwrap(), 0.0);
        let black = RgbImage::from_pixel(8, 8, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(8, 8, Rgb([255, 255, 255]));
        assert_eq!(pixel_distance(&black, &white, None).unwrap(), 255.0);
    }

    #[test]
    fn pixel_distance_matches_double_loop_oracle() {
        let a = checker(3, 11, 7);
        let b = checker(9, 11, 7);
        let mask = GrayImage::from_fn(11, 7, |x, y| Luma([if (x + y) % 3 == 0 { 255 } else { 0 }]));
        for m in [None, Some(&mask)] {
            let got = pixel_distance(&a, &b, m).unwrap();
            let mut sum = 0.0;
            let mut count = 0usize;
            for y in 0..7u32 {
                for x in 0..11u32 {
                    if let Some(mm) = m {
                        if mm.get_pixel(x, y).0[0] <= 127 {
                            continue;
                        }
                    }
                    for c in 0..3 {
                        sum += (a.get_pixel(x, y).0[c] as f64 - b.get_pixel(x, y).0[c] as f64)
                            .abs();
                        count += 1;
                    }
                }
            }
            assert!((got - sum / count as f64).abs() < 1e-10);
        }
        let empty = GrayImage::from_pixel(11, 7, Luma([0]));
        assert!(pixel_distance(&a, &b, Some(&empty)).is_err());
    }

    #[test]
    fn iou_conventions() {
        let full = GrayImage::from_pixel(8, 8, Luma([255]));
        let none = GrayImage::from_pixel(8, 8, Luma([0]));
        assert_eq!(mask_iou(&full, &full, 0.5).unwrap(), 1.0);
        assert_eq!(mask_iou(&none, &none, 0.5).unwrap(), 1.0);
        let left = GrayImage::from_fn(8, 8, |x, _| Luma([if x < 4 { 255 } else { 0 }]));
        let right = GrayImage::from_fn(8, 8, |x, _| Luma([if x >= 4 { 255 } else { 0 }]));
        assert_eq!(mask_iou(&left, &right, 0.5).unwrap(), 0.0);
        // Equal rectangles overlapping half their area: IoU = 1/3 exactly.
        let a = GrayImage::from_fn(8, 8, |x, _| Luma([if x < 4 { 255 } else { 0 }]));
        let b = GrayImage::from_fn(8, 8, |x, _| Luma([if (2..6).contains(&x) { 255 } else { 0 }]));
        assert_eq!(mask_iou(&a, &b, 0.5).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn composite_conventions() {
        let frame = checker(4, 8, 8);
        let bg = checker(11, 8, 8);
        let ones = GrayImage::from_pixel(8, 8, Luma([255]));
        let zeros = GrayImage::from_pixel(8, 8, Luma([0]));
        assert_eq!(composite_background(&frame, &ones, &bg).unwrap(), frame);
        assert_eq!(composite_background(&frame, &zeros, &bg).unwrap(), bg);
        // Mid mask: rounded arithmetic mean (alpha = 128/255).
        let half = GrayImage::from_pixel(8, 8, Luma([128]));
        let out = composite_background(&frame, &half, &bg).unwrap();
        let m = 128.0 / 255.0;
        for (x, y, p) in out.enumerate_pixels() {
            for c in 0..3 {
                let expect = (m * frame.get_pixel(x, y).0[c] as f64
                    + (1.0 - m) * bg.get_pixel(x, y).0[c] as f64)
                    .round() as u8;
                assert_eq!(p.0[c], expect);
            }
        }
    }

    #[test]
    fn sequence_metrics_zero_on_identical() {
        let frames: Vec<RgbImage> = (0..3).map(|i| checker(i, 8, 8)).collect();
        let masks: Vec<GrayImage> = (0..3)
            .map(|_| GrayImage::from_fn(8, 8, |x, _| Luma([if x < 5 { 255 } else { 0 }])))
            .collect();
        let r = sequence_metrics(&frames, &frames, Some(&masks), Some(&masks)).unwrap();
        assert_eq!(r.avg_pixel_dist, 0.0);
        assert_eq!(r.masked_avg_pixel_dist, Some(0.0));
        assert_eq!(r.mask_iou, Some(1.0));
    }

    #[test]
    fn rgb_tensor_round_trip() {
        let img = checker(7, 9, 5);
        let t = tensor_from_rgb(&img);
        assert_eq!(t.shape, vec![3, 5, 9]);
        assert!(t.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(rgb_from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn synthetic_person_is_self_consistent() {
        let person = synth_person(&SynthPersonConfig {
            seed: 3,
            num_frames: 6,
            resolution: 32,
        })
        .unwrap();
        let ds = &person.dataset;
        assert_eq!(ds.len(), 6);
        assert_eq!(person.nmfcs.len(), 6);
        assert_eq!(person.fit.num_frames(), 6);
        let masks = ds.masks.as_ref().unwrap();
        for t in 0..6 {
            assert_eq!(ds.frames[t].dimensions(), (32, 32));
            // The head covers part but not all of the frame.
            let fg = masks[t].pixels().filter(|p| p.0[0] == 255).count();
            assert!(fg > 64 && fg < 1024, "foreground {fg}");
            // Frame pixels agree with the rendered coordinate image.
            for (x, y, p) in ds.frames[t].enumerate_pixels() {
                let px = person.nmfcs[t].pixel(x as usize, y as usize);
                for c in 0..3 {
                    assert_eq!(p.0[c], (px[c] * 255.0).round() as u8);
                }
            }
        }
        // Deterministic under the seed.
        let again = synth_person(&SynthPersonConfig {
            seed: 3,
            num_frames: 6,
            resolution: 32,
        })
        .unwrap();
        assert_eq!(again.dataset.frames, ds.frames);
    }
}
