//! Evaluation: mean class accuracy, time-reversal degradation, pixel-level
//! localization precision/recall with a tolerance zone, a centred Gaussian
//! baseline, and attention export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::{reverse_clip, SyntheticSample};
use crate::error::{Error, Result};
use crate::harness::{infer, Checkpoint, ModelRole};
use crate::tensor::Tensor;

/// Localization tolerance in pixels at the reference 56x56 resolution.
pub const TOLERANCE_BASE: f64 = 10.0;
pub const REFERENCE_RESOLUTION: f64 = 56.0;
/// Centre-prior standard deviation as a fraction of the evaluation resolution.
pub const CENTER_PRIOR_SIGMA: f64 = 0.25;

/// Per-class accuracy and its mean over the classes that occur.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub mean_class_accuracy: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<AccuracyReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Eval(format!("label {y} outside {classes} classes")));
        }
        counts[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(AccuracyReport {
        mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        predictions: predictions.to_vec(),
    })
}

/// Expected teacher maps for `samples`, the oracle student's motion input.
pub fn teacher_maps(teacher: &Checkpoint, samples: &[SyntheticSample]) -> Result<Vec<Tensor<f32>>> {
    let flows: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.flow).collect();
    Ok(infer(teacher, &flows, None, false)?.motion_maps)
}

/// Run `ckpt` on the modality its role consumes: flow for the teacher, rgb otherwise.
pub fn run_model(
    ckpt: &Checkpoint,
    samples: &[SyntheticSample],
    teacher: Option<&Checkpoint>,
) -> Result<crate::harness::Inference> {
    let reference = if ckpt.config.role == ModelRole::StudentOracleAttn {
        let t = teacher.ok_or_else(|| Error::Eval("the oracle student needs its teacher at test time".into()))?;
        Some(teacher_maps(t, samples)?)
    } else {
        None
    };
    let clips: Vec<&Tensor<f32>> = samples
        .iter()
        .map(|s| if ckpt.config.role.is_teacher() { &s.flow } else { &s.rgb })
        .collect();
    infer(ckpt, &clips, reference.as_deref(), false)
}

/// Mean class accuracy of `ckpt` on `samples`, optionally on time-reversed clips.
pub fn evaluate_accuracy(
    ckpt: &Checkpoint,
    samples: &[SyntheticSample],
    reversed: bool,
    teacher: Option<&Checkpoint>,
) -> Result<AccuracyReport> {
    let reversed_set: Vec<SyntheticSample>;
    let set = if reversed {
        reversed_set = samples.iter().map(reverse_clip).collect();
        &reversed_set
    } else {
        samples
    };
    let out = run_model(ckpt, set, teacher)?;
    let labels: Vec<usize> = set.iter().map(|s| s.label).collect();
    mean_class_accuracy(&out.predictions(), &labels, ckpt.config.classes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrowOfTime {
    pub forward: f64,
    pub reversed: f64,
}

impl ArrowOfTime {
    pub fn drop(&self) -> f64 {
        self.forward - self.reversed
    }
}

/// Forward and reversed accuracy over the samples whose label passes `include`.
pub fn arrow_of_time(
    ckpt: &Checkpoint,
    samples: &[SyntheticSample],
    include: impl Fn(usize) -> bool,
    teacher: Option<&Checkpoint>,
) -> Result<ArrowOfTime> {
    let kept: Vec<SyntheticSample> = samples.iter().filter(|s| include(s.label)).cloned().collect();
    Ok(ArrowOfTime {
        forward: evaluate_accuracy(ckpt, &kept, false, teacher)?.mean_class_accuracy,
        reversed: evaluate_accuracy(ckpt, &kept, true, teacher)?.mean_class_accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrPoint {
    fn new(threshold: f64, precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            threshold,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    /// One point per distinct attention value, thresholds ascending.
    pub curve: Vec<PrPoint>,
    pub best: PrPoint,
    /// Best F1 per class label; `None` when the class has no clips.
    pub per_class_best_f1: Vec<Option<f64>>,
    pub resolution: usize,
    pub tolerance: usize,
}

impl LocalizationReport {
    /// `class threshold precision recall f1` lines: the overall best point as
    /// class `all`, then each class's best F1.
    pub fn render(&self) -> String {
        let mut s = String::from("class threshold precision recall f1\n");
        let b = self.best;
        let _ = writeln!(
            s,
            "all {:.6e} {:.6} {:.6} {:.6}",
            b.threshold, b.precision, b.recall, b.f1
        );
        for (c, f) in self.per_class_best_f1.iter().enumerate() {
            if let Some(f) = f {
                let _ = writeln!(s, "{c} - - - {f:.6}");
            }
        }
        s
    }
}

/// One clip's attention and ground truth.
#[derive(Clone, Debug)]
pub struct LocalizationInput<'a> {
    /// `[T', H', W']` attention.
    pub map: &'a Tensor<f32>,
    /// One box per frame in frame pixels.
    pub boxes: &'a [[u16; 4]],
    pub frame_size: (usize, usize),
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalizationOptions {
    pub resolution: usize,
    pub tolerance_base: usize,
    /// Count recall against the dilated box instead of the box itself.
    pub recall_dilated: bool,
}

impl Default for LocalizationOptions {
    fn default() -> Self {
        Self {
            resolution: 32,
            tolerance_base: TOLERANCE_BASE as usize,
            recall_dilated: false,
        }
    }
}

impl LocalizationOptions {
    pub fn tolerance(&self) -> usize {
        (self.tolerance_base as f64 * self.resolution as f64 / REFERENCE_RESOLUTION).round() as usize
    }
}

/// Bilinear resampling of a row-major `h x w` grid to `out_h x out_w` with
/// pixel-centre alignment; identity when the sizes agree.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, (x - x0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// A pixel as seen by the counting pass.
#[derive(Clone, Copy)]
struct Pixel {
    value: f32,
    in_zone: bool,
    in_recall: bool,
    label: usize,
}

fn scale_box(b: [u16; 4], (h, w): (usize, usize), r: usize) -> [usize; 4] {
    let sx = |v: u16| v as f64 * r as f64 / w as f64;
    let sy = |v: u16| v as f64 * r as f64 / h as f64;
    [
        sx(b[0]).floor() as usize,
        sy(b[1]).floor() as usize,
        (sx(b[2]).ceil() as usize).min(r),
        (sy(b[3]).ceil() as usize).min(r),
    ]
}

fn collect_pixels(inputs: &[LocalizationInput<'_>], opts: LocalizationOptions) -> Result<Vec<Pixel>> {
    let r = opts.resolution;
    let tol = opts.tolerance();
    let mut pixels = Vec::new();
    for (n, inp) in inputs.iter().enumerate() {
        let dims = inp.map.shape();
        if dims.len() != 3 {
            return Err(Error::Input(format!("clip {n}: map must be [T, H, W], got {dims:?}")));
        }
        let (tm, hm, wm) = (dims[0], dims[1], dims[2]);
        let frames = inp.boxes.len();
        if frames == 0 {
            return Err(Error::Input(format!("clip {n}: empty box set")));
        }
        let slices: Vec<Vec<f32>> = (0..tm)
            .map(|t| bilinear_resize(&inp.map.data()[t * hm * wm..(t + 1) * hm * wm], hm, wm, r, r))
            .collect();
        for (f, &b) in inp.boxes.iter().enumerate() {
            let slice = &slices[(f * tm / frames).min(tm - 1)];
            let [x0, y0, x1, y1] = scale_box(b, inp.frame_size, r);
            let inside = |x: usize, y: usize, m: usize| x + m >= x0 && x < x1 + m && y + m >= y0 && y < y1 + m;
            for y in 0..r {
                for x in 0..r {
                    let in_box = inside(x, y, 0);
                    let in_zone = inside(x, y, tol);
                    pixels.push(Pixel {
                        value: slice[y * r + x],
                        in_zone,
                        in_recall: if opts.recall_dilated { in_zone } else { in_box },
                        label: inp.label,
                    });
                }
            }
        }
    }
    Ok(pixels)
}

/// Sweep thresholds over the distinct values, highest first, with running counts.
fn sweep(pixels: &mut [Pixel]) -> Vec<PrPoint> {
    let positives_total = pixels.iter().filter(|p| p.in_recall).count();
    pixels.sort_unstable_by(|a, b| b.value.total_cmp(&a.value));
    let mut curve = Vec::new();
    let (mut predicted, mut tp, mut hit) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].value;
        while i < pixels.len() && pixels[i].value == v {
            predicted += 1;
            tp += pixels[i].in_zone as usize;
            hit += pixels[i].in_recall as usize;
            i += 1;
        }
        let precision = tp as f64 / predicted as f64;
        let recall = if positives_total > 0 {
            hit as f64 / positives_total as f64
        } else {
            0.0
        };
        curve.push(PrPoint::new(v as f64, precision, recall));
    }
    curve.reverse();
    curve
}

fn best_of(curve: &[PrPoint]) -> PrPoint {
    curve.iter().copied().fold(PrPoint::new(f64::NAN, 0.0, 0.0), |b, p| {
        if p.f1 > b.f1 || b.threshold.is_nan() {
            p
        } else {
            b
        }
    })
}

/// Pixel-level PR curve of attention against boxes. Each map slice is
/// repeated over its share of frames and bilinearly rescaled to `R x R`;
/// pixels at or above a threshold are positive, true positives fall inside
/// the box dilated by the tolerance, and recall counts box pixels found.
pub fn localization_pr(inputs: &[LocalizationInput<'_>], opts: LocalizationOptions) -> Result<LocalizationReport> {
    if inputs.is_empty() {
        return Err(Error::Input("empty box set".into()));
    }
    if opts.resolution == 0 {
        return Err(Error::Input("resolution must be positive".into()));
    }
    let mut pixels = collect_pixels(inputs, opts)?;
    let classes = inputs.iter().map(|i| i.label).max().unwrap_or(0) + 1;
    let mut per_class_best_f1 = vec![None; classes];
    for (c, slot) in per_class_best_f1.iter_mut().enumerate() {
        let mut own: Vec<Pixel> = pixels.iter().filter(|p| p.label == c).copied().collect();
        if !own.is_empty() {
            *slot = Some(best_of(&sweep(&mut own)).f1);
        }
    }
    let curve = sweep(&mut pixels);
    Ok(LocalizationReport {
        best: best_of(&curve),
        curve,
        per_class_best_f1,
        resolution: opts.resolution,
        tolerance: opts.tolerance(),
    })
}

/// Localization of a model's motion map (the teacher's single map) on `samples`.
pub fn localize_model(
    ckpt: &Checkpoint,
    samples: &[SyntheticSample],
    teacher: Option<&Checkpoint>,
    opts: LocalizationOptions,
) -> Result<LocalizationReport> {
    let out = run_model(ckpt, samples, teacher)?;
    let inputs: Vec<LocalizationInput> = samples
        .iter()
        .zip(&out.motion_maps)
        .map(|(s, m)| LocalizationInput {
            map: m,
            boxes: &s.boxes,
            frame_size: s.frame_size(),
            label: s.label,
        })
        .collect();
    localization_pr(&inputs, opts)
}

/// Localization of the fixed centre prior, one slice per frame.
pub fn localize_center_prior(samples: &[SyntheticSample], opts: LocalizationOptions) -> Result<LocalizationReport> {
    let frames = samples.first().map_or(1, |s| s.frames());
    let prior = center_prior(frames, opts.resolution, opts.resolution as f64 * CENTER_PRIOR_SIGMA)?;
    let inputs: Vec<LocalizationInput> = samples
        .iter()
        .map(|s| LocalizationInput {
            map: &prior,
            boxes: &s.boxes,
            frame_size: s.frame_size(),
            label: s.label,
        })
        .collect();
    localization_pr(&inputs, opts)
}

/// Isotropic Gaussian centred on an `R x R` frame, normalized per slice and
/// repeated over `frames` slices.
pub fn center_prior(frames: usize, resolution: usize, sigma: f64) -> Result<Tensor<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    let c = (resolution as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..resolution * resolution)
        .map(|i| {
            let (y, x) = ((i / resolution) as f64, (i % resolution) as f64);
            (-((x - c).powi(2) + (y - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    let slice: Vec<f32> = raw.iter().map(|v| (v / z) as f32).collect();
    let data = (0..frames).flat_map(|_| slice.iter().copied()).collect();
    Ok(Tensor::new(vec![frames, resolution, resolution], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pgm(values: &[f32], h: usize, w: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn ppm(rgb: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Write a `[T', H', W']` map. PGM writes one max-normalized 8-bit image per
/// slice (`{stem}_t{t}.pgm`); CSV writes `{stem}.csv` with a `# dims` header
/// and one grid row per line.
pub fn export_attention(map: &Tensor<f32>, dir: &Path, stem: &str, format: ExportFormat) -> Result<Vec<PathBuf>> {
    let dims = map.shape();
    if dims.len() != 3 {
        return Err(Error::Input(format!("attention map must be [T, H, W], got {dims:?}")));
    }
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ExportFormat::Pgm => (0..t)
            .map(|i| {
                let path = dir.join(format!("{stem}_t{i}.pgm"));
                write(&path, &pgm(&map.data()[i * h * w..(i + 1) * h * w], h, w))?;
                Ok(path)
            })
            .collect(),
        ExportFormat::Csv => {
            let mut s = format!("# dims {t} {h} {w}\n");
            for row in map.data().chunks(w) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            let path = dir.join(format!("{stem}.csv"));
            write(&path, s.as_bytes())?;
            Ok(vec![path])
        }
    }
}

/// Parse a CSV written by [`export_attention`].
pub fn read_attention_csv(path: &Path) -> Result<Tensor<f32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let dims: Vec<usize> = header
        .strip_prefix("# dims ")
        .ok_or_else(|| Error::Corrupt(format!("{}: missing dims header", path.display())))?
        .split_whitespace()
        .map(|d| d.parse().map_err(|_| Error::Corrupt(format!("bad dim `{d}`"))))
        .collect::<Result<_>>()?;
    let data: Vec<f32> = lines
        .flat_map(|l| l.split(','))
        .map(|v| v.trim().parse().map_err(|_| Error::Corrupt(format!("bad value `{v}`"))))
        .collect::<Result<_>>()?;
    Tensor::new(dims, data).map_err(|e| Error::Corrupt(e.to_string()))
}

/// Figure material: the map bilinearly upsampled to clip resolution at the
/// first and last frame, next to those frames.
pub fn export_overlay(map: &Tensor<f32>, clip: &Tensor<f32>, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let (md, cd) = (map.shape(), clip.shape());
    if md.len() != 3 || cd.len() != 4 || cd[3] != 3 {
        return Err(Error::Input(format!(
            "overlay needs a [T,H,W] map and [T,H,W,3] clip, got {md:?} and {cd:?}"
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tm, hm, wm) = (md[0], md[1], md[2]);
    let (t, h, w) = (cd[0], cd[1], cd[2]);
    let mut paths = Vec::new();
    for (name, frame) in [("first", 0), ("last", t - 1)] {
        let slice = (frame * tm / t).min(tm - 1);
        let up = bilinear_resize(&map.data()[slice * hm * wm..(slice + 1) * hm * wm], hm, wm, h, w);
        let p = dir.join(format!("{stem}_{name}_attn.pgm"));
        write(&p, &pgm(&up, h, w))?;
        paths.push(p);
        let p = dir.join(format!("{stem}_{name}_frame.ppm"));
        write(&p, &ppm(&clip.data()[frame * h * w * 3..(frame + 1) * h * w * 3], h, w))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Direct per-threshold counting over every pixel, no sorting.
    fn brute_force(values: &[f32], zone: &[bool], boxm: &[bool]) -> Vec<PrPoint> {
        let mut thresholds: Vec<f32> = values.to_vec();
        thresholds.sort_by(f32::total_cmp);
        thresholds.dedup();
        let box_total = boxm.iter().filter(|&&b| b).count();
        thresholds
            .iter()
            .map(|&th| {
                let mut pred = 0;
                let mut tp = 0;
                let mut hit = 0;
                for i in 0..values.len() {
                    if values[i] >= th {
                        pred += 1;
                        if zone[i] {
                            tp += 1;
                        }
                        if boxm[i] {
                            hit += 1;
                        }
                    }
                }
                PrPoint::new(th as f64, tp as f64 / pred as f64, hit as f64 / box_total as f64)
            })
            .collect()
    }

    fn toy() -> (Tensor<f32>, Vec<[u16; 4]>) {
        // 4 levels on an 8x8 frame, box (2,2)-(5,5)
        let map = Tensor::from_fn(vec![1, 8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            match (x, y) {
                (2..=4, 2..=4) => 0.4,
                (1..=5, 1..=5) => 0.2,
                (0, _) => 0.1,
                _ => 0.0,
            }
        });
        (map, vec![[2, 2, 5, 5]])
    }

    #[test]
    fn toy_curve_matches_counting_oracle() {
        let (map, boxes) = toy();
        let opts = LocalizationOptions {
            resolution: 8,
            tolerance_base: 7,
            recall_dilated: false,
        };
        assert_eq!(opts.tolerance(), 1);
        let input = LocalizationInput {
            map: &map,
            boxes: &boxes,
            frame_size: (8, 8),
            label: 0,
        };
        let report = localization_pr(&[input], opts).unwrap();
        let zone: Vec<bool> = (0..64)
            .map(|i| (1..6).contains(&(i % 8)) && (1..6).contains(&(i / 8)))
            .collect();
        let boxm: Vec<bool> = (0..64)
            .map(|i| (2..5).contains(&(i % 8)) && (2..5).contains(&(i / 8)))
            .collect();
        let oracle = brute_force(map.data(), &zone, &boxm);
        assert_eq!(report.curve, oracle);
        assert_eq!(report.curve.len(), 4);
        assert_eq!(report.best.f1, 1.0);
    }

    #[test]
    fn perfect_map_scores_one() {
        let map = Tensor::from_fn(vec![2, 32, 32], |i| {
            let (y, x) = ((i / 32) % 32, i % 32);
            if (10..17).contains(&x) && (4..11).contains(&y) {
                1.0 / 49.0
            } else {
                0.0
            }
        });
        let boxes = vec![[10, 4, 17, 11]; 16];
        let input = LocalizationInput {
            map: &map,
            boxes: &boxes,
            frame_size: (32, 32),
            label: 3,
        };
        let r = localization_pr(&[input], LocalizationOptions::default()).unwrap();
        let top = r.curve.last().unwrap();
        assert_eq!((top.precision, top.recall, top.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.per_class_best_f1[3], Some(1.0));
        assert_eq!(r.tolerance, 6);
    }

    #[test]
    fn far_delta_has_zero_precision() {
        let map = Tensor::from_fn(vec![1, 32, 32], |i| if i == 31 * 32 + 31 { 1.0 } else { 0.0 });
        let boxes = vec![[0, 0, 5, 5]; 4];
        let input = LocalizationInput {
            map: &map,
            boxes: &boxes,
            frame_size: (32, 32),
            label: 0,
        };
        let r = localization_pr(&[input], LocalizationOptions::default()).unwrap();
        assert_eq!(r.curve.last().unwrap().precision, 0.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(
            localization_pr(&[], LocalizationOptions::default()),
            Err(Error::Input(_))
        ));
        let map = Tensor::zeros(vec![1, 4, 4]);
        let input = LocalizationInput {
            map: &map,
            boxes: &[],
            frame_size: (4, 4),
            label: 0,
        };
        assert!(matches!(
            localization_pr(&[input], LocalizationOptions::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn center_prior_matches_formula_and_is_symmetric() {
        let r = 32;
        let sigma = r as f64 / 4.0;
        let m = center_prior(3, r, sigma).unwrap();
        let c = 15.5f64;
        let z: f64 = (0..r * r)
            .map(|i| {
                let (y, x) = ((i / r) as f64, (i % r) as f64);
                (-((x - c) * (x - c) + (y - c) * (y - c)) / (2.0 * sigma * sigma)).exp()
            })
            .sum();
        for y in 0..r {
            for x in 0..r {
                let g = (-((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp() / z;
                assert!((m.at(&[1, y, x]) as f64 - g).abs() < 1e-6);
                assert_eq!(m.at(&[0, y, x]), m.at(&[0, y, r - 1 - x]));
                assert_eq!(m.at(&[0, y, x]), m.at(&[0, r - 1 - y, x]));
            }
        }
        let s: f64 = m.data()[..r * r].iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(center_prior(1, 8, 0.0).is_err());
    }

    #[test]
    fn pgm_uniform_and_delta() {
        let dir = tempfile::tempdir().unwrap();
        let u = Tensor::full(vec![2, 4, 4], 1.0f32 / 16.0);
        let paths = export_attention(&u, dir.path(), "u", ExportFormat::Pgm).unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = fs::read(&paths[0]).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 255));
        let d = Tensor::from_fn(vec![1, 4, 4], |i| if i == 6 { 1.0 } else { 0.0 });
        let paths = export_attention(&d, dir.path(), "d", ExportFormat::Pgm).unwrap();
        let bytes = fs::read(&paths[0]).unwrap();
        assert_eq!(bytes[header.len()..].iter().filter(|&&b| b == 255).count(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::from_fn(vec![4, 8, 8], |_| rng.random::<f32>() / 64.0);
        let paths = export_attention(&m, dir.path(), "m", ExportFormat::Csv).unwrap();
        let back = read_attention_csv(&paths[0]).unwrap();
        assert_eq!(back.shape(), m.shape());
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn overlay_writes_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::full(vec![4, 8, 8], 1.0f32 / 64.0);
        let clip = Tensor::full(vec![16, 32, 32, 3], 0.5f32);
        let paths = export_overlay(&m, &clip, dir.path(), "o").unwrap();
        assert_eq!(paths.len(), 4);
        assert!(paths.iter().all(|p| p.exists()));
    }

    #[test]
    fn accuracy_stubs() {
        let labels: Vec<usize> = (0..128).map(|i| i % 16).collect();
        let perfect = mean_class_accuracy(&labels, &labels, 16).unwrap();
        assert_eq!(perfect.mean_class_accuracy, 1.0);
        // chance level, averaged over independent draws of the random predictor
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let draws = 32;
        let mean = (0..draws)
            .map(|_| {
                let random: Vec<usize> = (0..128).map(|_| rng.random_range(0..16)).collect();
                mean_class_accuracy(&random, &labels, 16).unwrap().mean_class_accuracy
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 0.0625).abs() <= 0.03, "{mean}");
    }

    proptest! {
        #[test]
        fn recall_is_monotone_and_tolerance_leaves_it(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let map = Tensor::from_fn(vec![2, 4, 4], |_| (rng.random_range(0..6) as f32) / 8.0);
            let x0 = rng.random_range(0..28u16);
            let y0 = rng.random_range(0..28u16);
            let boxes = vec![[x0, y0, x0 + 4, y0 + 4]; 8];
            let input = LocalizationInput { map: &map, boxes: &boxes, frame_size: (32, 32), label: 0 };
            let wide = localization_pr(std::slice::from_ref(&input), LocalizationOptions::default()).unwrap();
            let tight = localization_pr(&[input], LocalizationOptions { tolerance_base: 0, ..Default::default() }).unwrap();
            prop_assert!(wide.curve.windows(2).all(|p| p[1].recall <= p[0].recall));
            prop_assert_eq!(wide.curve.len(), tight.curve.len());
            for (a, b) in wide.curve.iter().zip(&tight.curve) {
                prop_assert_eq!(a.recall, b.recall);
                prop_assert!(a.precision >= b.precision);
                prop_assert!((0.0..=1.0).contains(&a.precision) && (0.0..=1.0).contains(&a.recall));
            }
        }
    }
}
