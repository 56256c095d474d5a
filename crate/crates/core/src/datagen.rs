//! Procedural moving-sprite clips with exact optical flow and boxes.
//!
//! Every clip shows one class sprite moving over a static textured background
//! with a few static distractor sprites. The class is the pair
//! `(shape, motion)`; clips that share a shape differ only in how the sprite
//! moves. Sprites are drawn with hard edges at integer positions, so the flow
//! field written next to the frames is the exact displacement of every sprite
//! pixel.
//!
//! Box coordinates are half-open pixel ranges `[x0, x1) x [y0, y1)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"ADVD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpriteShape {
    Square,
    Disc,
    Cross,
    Ring,
    Saltire,
    Triangle,
    Diamond,
    Bar,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 8] = [
        SpriteShape::Square,
        SpriteShape::Disc,
        SpriteShape::Cross,
        SpriteShape::Ring,
        SpriteShape::Saltire,
        SpriteShape::Triangle,
        SpriteShape::Diamond,
        SpriteShape::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpriteShape::Square => "square",
            SpriteShape::Disc => "disc",
            SpriteShape::Cross => "cross",
            SpriteShape::Ring => "ring",
            SpriteShape::Saltire => "saltire",
            SpriteShape::Triangle => "triangle",
            SpriteShape::Diamond => "diamond",
            SpriteShape::Bar => "bar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether cell `(x, y)` of a `size x size` stamp is covered.
    pub fn covers(self, x: usize, y: usize, size: usize) -> bool {
        let c = (size as f64 - 1.0) / 2.0;
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        let r = c.max(0.5);
        match self {
            SpriteShape::Square => true,
            SpriteShape::Disc => dx * dx + dy * dy <= (r + 0.3) * (r + 0.3),
            SpriteShape::Cross => dx.abs() <= r / 6.0 || dy.abs() <= r / 6.0,
            SpriteShape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= (r + 0.3) * (r + 0.3) && d2 >= (r * 0.55) * (r * 0.55)
            }
            SpriteShape::Saltire => (dx.abs() - dy.abs()).abs() <= 0.5,
            SpriteShape::Triangle => dx.abs() <= (y as f64 + 1.0) / 2.0,
            SpriteShape::Diamond => dx.abs() + dy.abs() <= r + 0.01,
            SpriteShape::Bar => dy.abs() <= r / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionPattern {
    Static,
    DriftRight,
    DriftDown,
    Circular,
    Oscillate,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 5] = [
        MotionPattern::Static,
        MotionPattern::DriftRight,
        MotionPattern::DriftDown,
        MotionPattern::Circular,
        MotionPattern::Oscillate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionPattern::Static => "static",
            MotionPattern::DriftRight => "drift-right",
            MotionPattern::DriftDown => "drift-down",
            MotionPattern::Circular => "circular",
            MotionPattern::Oscillate => "oscillate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: SpriteShape,
    pub motion: MotionPattern,
    pub label: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    /// Pixels per frame along the path.
    pub speed: f64,
    /// Top-left corner for drifts and static sprites; path centre otherwise.
    pub start: (f64, f64),
    /// Radius for circular motion, amplitude for oscillation.
    pub amplitude: f64,
    pub phase: f64,
    pub background_seed: u64,
    pub distractors: usize,
    pub distractor_shapes: Vec<SpriteShape>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size > self.height || self.size > self.width {
            return Err(Error::Spec(format!(
                "sprite size {} does not fit a {}x{} frame",
                self.size, self.width, self.height
            )));
        }
        if self.frames < 2 {
            return Err(Error::Spec("clips need at least two frames".into()));
        }
        if self.distractors > 0 && self.distractor_shapes.is_empty() {
            return Err(Error::Spec("distractors requested without distractor shapes".into()));
        }
        Ok(())
    }

    /// Integer top-left sprite position for every frame, clamped into the frame.
    pub fn trajectory(&self) -> Vec<(usize, usize)> {
        let max_x = (self.width - self.size) as f64;
        let max_y = (self.height - self.size) as f64;
        (0..self.frames)
            .map(|t| {
                let t = t as f64;
                let (x, y) = match self.motion {
                    MotionPattern::Static => self.start,
                    MotionPattern::DriftRight => (self.start.0 + self.speed * t, self.start.1),
                    MotionPattern::DriftDown => (self.start.0, self.start.1 + self.speed * t),
                    MotionPattern::Circular => {
                        let theta = self.phase + self.speed / self.amplitude * t;
                        (
                            self.start.0 + self.amplitude * theta.cos(),
                            self.start.1 + self.amplitude * theta.sin(),
                        )
                    }
                    MotionPattern::Oscillate => {
                        let theta = self.phase + self.speed / self.amplitude * t;
                        (self.start.0 + self.amplitude * theta.sin(), self.start.1)
                    }
                };
                (
                    x.round().clamp(0.0, max_x) as usize,
                    y.round().clamp(0.0, max_y) as usize,
                )
            })
            .collect()
    }
}

/// One rendered clip with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[T, H, W, 3]`, values in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[T, H, W, 2]` forward flow `(dx, dy)` in px/frame; last frame repeats the previous field.
    pub flow: Tensor<f32>,
    pub label: usize,
    /// Per-frame `(x0, y0, x1, y1)`.
    pub boxes: Vec<[u16; 4]>,
}

impl SyntheticSample {
    pub fn frames(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.rgb.shape()[1], self.rgb.shape()[2])
    }
}

fn smooth_background(rng: &mut StreamRng, h: usize, w: usize) -> Vec<f32> {
    const GRID: usize = 5;
    let coarse: Vec<f32> = (0..GRID * GRID * 3).map(|_| rng.random_range(0.05..0.45)).collect();
    let mut out = vec![0.0; h * w * 3];
    for y in 0..h {
        let fy = y as f32 / (h - 1).max(1) as f32 * (GRID - 1) as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(GRID - 1);
        for x in 0..w {
            let fx = x as f32 / (w - 1).max(1) as f32 * (GRID - 1) as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(GRID - 1);
            for c in 0..3 {
                let at = |gy: usize, gx: usize| coarse[(gy * GRID + gx) * 3 + c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(y * w + x) * 3 + c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

fn bright_color(rng: &mut StreamRng) -> [f32; 3] {
    [
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
    ]
}

fn stamp(frame: &mut [f32], w: usize, shape: SpriteShape, size: usize, pos: (usize, usize), color: [f32; 3]) {
    for sy in 0..size {
        for sx in 0..size {
            if shape.covers(sx, sy, size) {
                let o = ((pos.1 + sy) * w + pos.0 + sx) * 3;
                frame[o..o + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Render a clip. Deterministic in `(spec, rng state)`.
pub fn render_clip(spec: &SceneSpec, rng: &mut StreamRng) -> Result<SyntheticSample> {
    spec.validate()?;
    let (t_len, h, w, size) = (spec.frames, spec.height, spec.width, spec.size);
    let mut bg_rng = stream(spec.background_seed, "datagen/background");
    let mut base = smooth_background(&mut bg_rng, h, w);
    for _ in 0..spec.distractors {
        let shape = spec.distractor_shapes[bg_rng.random_range(0..spec.distractor_shapes.len())];
        let pos = (bg_rng.random_range(0..=w - size), bg_rng.random_range(0..=h - size));
        let color = bright_color(&mut bg_rng);
        stamp(&mut base, w, shape, size, pos, color);
    }
    let color = bright_color(rng);
    let path = spec.trajectory();
    let frame_len = h * w * 3;
    let mut rgb = Vec::with_capacity(t_len * frame_len);
    for &pos in &path {
        let mut frame = base.clone();
        stamp(&mut frame, w, spec.shape, size, pos, color);
        rgb.extend_from_slice(&frame);
    }
    let mut flow = vec![0.0f32; t_len * h * w * 2];
    for t in 0..t_len - 1 {
        let dx = path[t + 1].0 as f32 - path[t].0 as f32;
        let dy = path[t + 1].1 as f32 - path[t].1 as f32;
        if dx == 0.0 && dy == 0.0 {
            continue;
        }
        let field = &mut flow[t * h * w * 2..(t + 1) * h * w * 2];
        for sy in 0..size {
            for sx in 0..size {
                if spec.shape.covers(sx, sy, size) {
                    let o = ((path[t].1 + sy) * w + path[t].0 + sx) * 2;
                    field[o] = dx;
                    field[o + 1] = dy;
                }
            }
        }
    }
    let per = h * w * 2;
    flow.copy_within((t_len - 2) * per..(t_len - 1) * per, (t_len - 1) * per);
    let boxes = path
        .iter()
        .map(|&(x, y)| [x as u16, y as u16, (x + size) as u16, (y + size) as u16])
        .collect();
    Ok(SyntheticSample {
        rgb: Tensor::new(vec![t_len, h, w, 3], rgb)?,
        flow: Tensor::new(vec![t_len, h, w, 2], flow)?,
        label: spec.label,
        boxes,
    })
}

/// Play the clip backwards. Flow is rebuilt as the exact reversed motion:
/// the reversed field at step `t` lives on the sprite pixels of original
/// frame `T-1-t` and carries the negated displacement.
pub fn reverse_clip(sample: &SyntheticSample) -> SyntheticSample {
    let t_len = sample.frames();
    let (h, w) = sample.frame_size();
    let rgb_per = h * w * 3;
    let flow_per = h * w * 2;
    let src = sample.rgb.data();
    let mut rgb = Vec::with_capacity(src.len());
    for t in (0..t_len).rev() {
        rgb.extend_from_slice(&src[t * rgb_per..(t + 1) * rgb_per]);
    }
    let fsrc = sample.flow.data();
    let mut flow = vec![0.0f32; fsrc.len()];
    for t in 0..t_len - 1 {
        let orig = t_len - 2 - t;
        let field = &fsrc[orig * flow_per..(orig + 1) * flow_per];
        let dst = &mut flow[t * flow_per..(t + 1) * flow_per];
        for y in 0..h {
            for x in 0..w {
                let o = (y * w + x) * 2;
                let (dx, dy) = (field[o], field[o + 1]);
                if dx == 0.0 && dy == 0.0 {
                    continue;
                }
                let tx = x as i64 + dx as i64;
                let ty = y as i64 + dy as i64;
                if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                    continue;
                }
                let q = (ty as usize * w + tx as usize) * 2;
                dst[q] = 0.0 - dx;
                dst[q + 1] = 0.0 - dy;
            }
        }
    }
    flow.copy_within((t_len - 2) * flow_per..(t_len - 1) * flow_per, (t_len - 1) * flow_per);
    let mut boxes = sample.boxes.clone();
    boxes.reverse();
    SyntheticSample {
        rgb: Tensor::new(sample.rgb.shape().to_vec(), rgb).expect("same shape"),
        flow: Tensor::new(sample.flow.shape().to_vec(), flow).expect("same shape"),
        label: sample.label,
        boxes,
    }
}

/// Mirror left-right; flow `dx` changes sign.
pub fn flip_horizontal(sample: &SyntheticSample) -> SyntheticSample {
    let t_len = sample.frames();
    let (h, w) = sample.frame_size();
    let mirror = |data: &[f32], c: usize, negate_first: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; data.len()];
        for t in 0..t_len {
            for y in 0..h {
                for x in 0..w {
                    let s = ((t * h + y) * w + x) * c;
                    let d = ((t * h + y) * w + (w - 1 - x)) * c;
                    out[d..d + c].copy_from_slice(&data[s..s + c]);
                    if negate_first {
                        out[d] = 0.0 - out[d];
                    }
                }
            }
        }
        out
    };
    let boxes = sample
        .boxes
        .iter()
        .map(|b| [w as u16 - b[2], b[1], w as u16 - b[0], b[3]])
        .collect();
    SyntheticSample {
        rgb: Tensor::new(sample.rgb.shape().to_vec(), mirror(sample.rgb.data(), 3, false)).expect("same shape"),
        flow: Tensor::new(sample.flow.shape().to_vec(), mirror(sample.flow.data(), 2, true)).expect("same shape"),
        label: sample.label,
        boxes,
    }
}

/// Generator settings for a whole benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<SpriteShape>,
    pub motions: Vec<MotionPattern>,
    pub distractor_shapes: Vec<SpriteShape>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sprite_size: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 32,
            width: 32,
            shapes: vec![
                SpriteShape::Square,
                SpriteShape::Ring,
                SpriteShape::Cross,
                SpriteShape::Saltire,
            ],
            motions: vec![
                MotionPattern::DriftRight,
                MotionPattern::DriftDown,
                MotionPattern::Circular,
                MotionPattern::Oscillate,
            ],
            distractor_shapes: vec![
                SpriteShape::Triangle,
                SpriteShape::Diamond,
                SpriteShape::Bar,
                SpriteShape::Disc,
            ],
            train_per_class: 16,
            test_per_class: 8,
            sprite_size: 7,
            speed_min: 1.0,
            speed_max: 2.0,
            distractors_min: 1,
            distractors_max: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.motions.len()
    }

    pub fn label(&self, shape_index: usize, motion_index: usize) -> usize {
        shape_index * self.motions.len() + motion_index
    }

    pub fn class_of(&self, label: usize) -> (SpriteShape, MotionPattern) {
        let m = self.motions.len();
        (self.shapes[label / m], self.motions[label % m])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.motions.is_empty() {
            return Err(Error::Config("class grid (shapes x motions) is empty".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class counts must be positive".into()));
        }
        if self.shapes.iter().any(|s| self.distractor_shapes.contains(s)) {
            return Err(Error::Config("distractor shapes must not be class shapes".into()));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Config("speed range must be positive and ordered".into()));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::Config("distractor range is inverted".into()));
        }
        if self.sprite_size == 0 || self.sprite_size > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "sprite size {} does not fit the frame",
                self.sprite_size
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("clips need at least two frames".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering used for digests and manifests.
    pub fn canonical(&self) -> String {
        let list = |v: Vec<&str>| v.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "shapes = {}", list(self.shapes.iter().map(|v| v.name()).collect()));
        let _ = writeln!(s, "motions = {}", list(self.motions.iter().map(|v| v.name()).collect()));
        let _ = writeln!(
            s,
            "distractor_shapes = {}",
            list(self.distractor_shapes.iter().map(|v| v.name()).collect())
        );
        let _ = writeln!(s, "train_per_class = {}", self.train_per_class);
        let _ = writeln!(s, "test_per_class = {}", self.test_per_class);
        let _ = writeln!(s, "sprite_size = {}", self.sprite_size);
        let _ = writeln!(s, "speed_min = {}", self.speed_min);
        let _ = writeln!(s, "speed_max = {}", self.speed_max);
        let _ = writeln!(s, "distractors_min = {}", self.distractors_min);
        let _ = writeln!(s, "distractors_max = {}", self.distractors_max);
        s
    }

    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Override one field by its canonical key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list<T>(key: &str, v: &str, parse: fn(&str) -> Option<T>) -> Result<Vec<T>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse(s).ok_or_else(|| Error::Config(format!("`{key}`: unknown name `{s}`"))))
                .collect()
        }
        let v = value.trim();
        match key {
            "frames" => self.frames = num(key, v)?,
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "shapes" => self.shapes = list(key, v, SpriteShape::parse)?,
            "motions" => self.motions = list(key, v, MotionPattern::parse)?,
            "distractor_shapes" => self.distractor_shapes = list(key, v, SpriteShape::parse)?,
            "train_per_class" => self.train_per_class = num(key, v)?,
            "test_per_class" => self.test_per_class = num(key, v)?,
            "sprite_size" => self.sprite_size = num(key, v)?,
            "speed_min" => self.speed_min = num(key, v)?,
            "speed_max" => self.speed_max = num(key, v)?,
            "distractors_min" => self.distractors_min = num(key, v)?,
            "distractors_max" => self.distractors_max = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown dataset key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines (`#` comments allowed) on top of `self`.
    pub fn parse_onto(mut self, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(self)
    }

    /// Draw the scene parameters for one clip of `label`.
    pub fn sample_spec(&self, label: usize, rng: &mut StreamRng) -> SceneSpec {
        let (shape, motion) = self.class_of(label);
        let size = self.sprite_size;
        let free_x = (self.width - size) as f64;
        let free_y = (self.height - size) as f64;
        let mut speed = rng.random_range(self.speed_min..=self.speed_max);
        let steps = (self.frames - 1) as f64;
        let mut amplitude = 0.0;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let start = match motion {
            MotionPattern::Static => (
                rng.random_range(0.0..=free_x).floor(),
                rng.random_range(0.0..=free_y).floor(),
            ),
            MotionPattern::DriftRight => {
                speed = speed.min(free_x / steps);
                let travel = (speed * steps).round();
                (
                    rng.random_range(0.0..=(free_x - travel).max(0.0)).floor(),
                    rng.random_range(0.0..=free_y).floor(),
                )
            }
            MotionPattern::DriftDown => {
                speed = speed.min(free_y / steps);
                let travel = (speed * steps).round();
                (
                    rng.random_range(0.0..=free_x).floor(),
                    rng.random_range(0.0..=(free_y - travel).max(0.0)).floor(),
                )
            }
            MotionPattern::Circular | MotionPattern::Oscillate => {
                let limit = (free_x.min(free_y) / 2.0).max(1.0);
                amplitude = rng.random_range(3.0f64.min(limit)..=5.0f64.min(limit));
                let cx = rng.random_range(amplitude..=(free_x - amplitude).max(amplitude));
                let cy = if motion == MotionPattern::Circular {
                    rng.random_range(amplitude..=(free_y - amplitude).max(amplitude))
                } else {
                    rng.random_range(0.0..=free_y).floor()
                };
                (cx, cy)
            }
        };
        let distractors = rng.random_range(self.distractors_min..=self.distractors_max);
        SceneSpec {
            shape,
            motion,
            label,
            frames: self.frames,
            height: self.height,
            width: self.width,
            size,
            speed,
            start,
            amplitude,
            phase,
            background_seed: rng.random(),
            distractors,
            distractor_shapes: self.distractor_shapes.clone(),
        }
    }

    /// Render one split. Sample `i` of class `c` draws from its own stream
    /// `datagen/{split}/{c}/{i}`, so splits never share seeds.
    pub fn generate_split(&self, seed: u64, split: Split) -> Result<Vec<SyntheticSample>> {
        self.validate()?;
        let per_class = match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        };
        let classes = self.num_classes();
        let results = parallel::map_indexed(per_class * classes, |i| {
            let (index, label) = (i / classes, i % classes);
            let mut rng = stream(seed, &format!("datagen/{}/{label}/{index}", split.name()));
            let spec = self.sample_spec(label, &mut rng);
            render_clip(&spec, &mut rng)
        });
        results.into_iter().collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::Dataset(format!(
            "clip tensors must be rank 4, got {:?}",
            t.shape()
        )));
    }
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialize samples into the `ADVD` container.
pub fn encode_dataset(samples: &[SyntheticSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let label = u16::try_from(s.label).map_err(|_| Error::Dataset(format!("label {} exceeds u16", s.label)))?;
        if s.boxes.len() != s.frames() {
            return Err(Error::Dataset("one box per frame required".into()));
        }
        out.extend_from_slice(&label.to_le_bytes());
        for b in &s.boxes {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_tensor(&mut out, &s.rgb)?;
        put_tensor(&mut out, &s.flow)?;
    }
    Ok(out)
}

/// Little-endian cursor that reports truncation as corruption.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'a str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "{}: truncated at byte {} (needed {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4], version: u16) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format {
                what: self.what.to_string(),
                expected: String::from_utf8_lossy(expected).into_owned(),
                actual: String::from_utf8_lossy(got).into_owned(),
            });
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::Format {
                what: format!("{} version", self.what),
                expected: version.to_string(),
                actual: v.to_string(),
            });
        }
        Ok(())
    }
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| Error::Corrupt(format!("tensor dims {dims:?} overflow")))?;
    let data = r.f32s(n)?;
    Tensor::new(dims, data).map_err(|e| Error::Corrupt(e.to_string()))
}

/// The box table carries no length of its own; its frame count is the first
/// `T` for which a well-formed `[T, H, W, 3]` rgb header and matching
/// `[T, H, W, 2]` flow header follow it.
fn infer_frames(bytes: &[u8], start: usize) -> Result<usize> {
    let word = |at: usize| -> Option<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let mut t = 1;
    while start + t * 8 + 16 <= bytes.len() {
        let h = start + t * 8;
        let dims = [word(h), word(h + 4), word(h + 8), word(h + 12)];
        if let [Some(d0), Some(hh), Some(ww), Some(3)] = dims {
            if d0 == t && hh > 0 && ww > 0 {
                let payload = t.checked_mul(hh).and_then(|v| v.checked_mul(ww * 12));
                if let Some(flow_at) = payload.and_then(|p| (h + 16).checked_add(p)) {
                    let flow = [word(flow_at), word(flow_at + 4), word(flow_at + 8), word(flow_at + 12)];
                    if flow == [Some(t), Some(hh), Some(ww), Some(2)] {
                        return Ok(t);
                    }
                }
            }
        }
        t += 1;
    }
    Err(Error::Corrupt(
        "dataset: box table is not followed by clip tensors".into(),
    ))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SyntheticSample>> {
    let mut r = Reader::new(bytes, "dataset");
    r.magic(DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = r.u16()? as usize;
        let frames = infer_frames(bytes, r.pos)?;
        let mut boxes = Vec::with_capacity(frames);
        for _ in 0..frames {
            boxes.push([r.u16()?, r.u16()?, r.u16()?, r.u16()?]);
        }
        let rgb = get_tensor(&mut r)?;
        let flow = get_tensor(&mut r)?;
        if rgb.shape()[..3] != flow.shape()[..3] || flow.shape()[3] != 2 || rgb.shape()[3] != 3 {
            return Err(Error::Corrupt(format!(
                "dataset: rgb {:?} and flow {:?} disagree",
                rgb.shape(),
                flow.shape()
            )));
        }
        samples.push(SyntheticSample {
            rgb,
            flow,
            label,
            boxes,
        });
    }
    if !r.finished() {
        return Err(Error::Corrupt("dataset: trailing bytes".into()));
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticSample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Paths and digests of one generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train_path: std::path::PathBuf,
    pub test_path: std::path::PathBuf,
    pub train_digest: String,
    pub test_digest: String,
}

/// Render both splits into `out_dir` as `train.advd` / `test.advd` with
/// adjacent `.manifest` files.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<GeneratedDataset> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut digests = Vec::new();
    for split in [Split::Train, Split::Test] {
        let samples = config.generate_split(seed, split)?;
        let bytes = encode_dataset(&samples)?;
        let digest = sha256_hex(&bytes);
        let path = out_dir.join(format!("{}.advd", split.name()));
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let manifest = format!(
            "split = {}\nseed = {seed}\nrecords = {}\nconfig_digest = {}\nfile_digest = {digest}\n{}",
            split.name(),
            samples.len(),
            config.digest(),
            config.canonical()
        );
        let mpath = out_dir.join(format!("{}.manifest", split.name()));
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        digests.push(digest);
    }
    Ok(GeneratedDataset {
        train_path: out_dir.join("train.advd"),
        test_path: out_dir.join("test.advd"),
        train_digest: digests[0].clone(),
        test_digest: digests[1].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motion: MotionPattern, speed: f64) -> SceneSpec {
        SceneSpec {
            shape: SpriteShape::Cross,
            motion,
            label: 0,
            frames: 16,
            height: 32,
            width: 32,
            size: 7,
            speed,
            start: (1.0, 5.0),
            amplitude: 4.0,
            phase: 0.3,
            background_seed: 11,
            distractors: 2,
            distractor_shapes: vec![SpriteShape::Triangle],
        }
    }

    /// Independent warp oracle: every flow-carrying pixel of frame t lands on
    /// a pixel of frame t+1 with the same colour, and the set of such pixels
    /// covers the sprite mask found by differencing against the next box.
    fn assert_warp_consistent(s: &SyntheticSample) {
        let (h, w) = s.frame_size();
        for t in 0..s.frames() - 1 {
            let [x0, y0, x1, y1] = s.boxes[t].map(|v| v as usize);
            let [nx0, ny0, ..] = s.boxes[t + 1].map(|v| v as usize);
            let (dx, dy) = (nx0 as i64 - x0 as i64, ny0 as i64 - y0 as i64);
            for y in 0..h {
                for x in 0..w {
                    let o = ((t * h + y) * w + x) * 2;
                    let f = (s.flow.data()[o], s.flow.data()[o + 1]);
                    let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                    if !inside {
                        assert_eq!(f, (0.0, 0.0), "flow outside sprite at t={t} ({x},{y})");
                        continue;
                    }
                    if f == (0.0, 0.0) {
                        continue;
                    }
                    assert_eq!((f.0 as i64, f.1 as i64), (dx, dy));
                    let tx = (x as i64 + dx) as usize;
                    let ty = (y as i64 + dy) as usize;
                    let a = ((t * h + y) * w + x) * 3;
                    let b = (((t + 1) * h + ty) * w + tx) * 3;
                    assert_eq!(&s.rgb.data()[a..a + 3], &s.rgb.data()[b..b + 3]);
                }
            }
        }
    }

    #[test]
    fn canonical_text_parses_back() {
        let mut cfg = DatasetConfig {
            speed_max: 2.5,
            ..DatasetConfig::default()
        };
        cfg.motions.push(MotionPattern::Static);
        let back = DatasetConfig::default().parse_onto(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert!(DatasetConfig::default().parse_onto("colour = red").is_err());
        assert!(DatasetConfig::default().parse_onto("shapes = square,blob").is_err());
    }

    #[test]
    fn static_sprite_has_no_flow() {
        let mut rng = stream(1, "t");
        let s = render_clip(&spec(MotionPattern::Static, 1.5), &mut rng).unwrap();
        assert!(s.flow.data().iter().all(|&v| v == 0.0));
        assert!(s.boxes.windows(2).all(|b| b[0] == b[1]));
        assert_eq!(reverse_clip(&s).rgb, s.rgb);
    }

    #[test]
    fn drift_right_kinematics() {
        let mut rng = stream(2, "t");
        let s = render_clip(&spec(MotionPattern::DriftRight, 1.5), &mut rng).unwrap();
        for (t, b) in s.boxes.iter().enumerate() {
            assert_eq!(b[0] as f64, (1.0 + 1.5 * t as f64).round());
            assert_eq!(b[1], 5);
        }
        let mut rng = stream(3, "t");
        let mut two = spec(MotionPattern::DriftRight, 1.0);
        two.start = (0.0, 0.0);
        let s2 = render_clip(&two, &mut rng).unwrap();
        let xs: Vec<u16> = s2.boxes.iter().map(|b| b[0]).collect();
        assert!(xs.windows(2).all(|p| p[1] - p[0] == 1));
        assert_warp_consistent(&s);
        assert_warp_consistent(&s2);
    }

    #[test]
    fn two_pixel_drift_has_uniform_flow() {
        let mut sp = spec(MotionPattern::DriftRight, 2.0);
        sp.frames = 8;
        sp.start = (0.0, 3.0);
        let mut rng = stream(4, "t");
        let s = render_clip(&sp, &mut rng).unwrap();
        let xs: Vec<u16> = s.boxes.iter().map(|b| b[0]).collect();
        assert!(xs.windows(2).all(|p| p[1] - p[0] == 2));
        let nonzero: Vec<(f32, f32)> = s
            .flow
            .data()
            .chunks(2)
            .filter(|c| c[0] != 0.0 || c[1] != 0.0)
            .map(|c| (c[0], c[1]))
            .collect();
        assert!(!nonzero.is_empty());
        assert!(nonzero.iter().all(|&f| f == (2.0, 0.0)));
    }

    #[test]
    fn every_motion_is_warp_consistent_and_inside() {
        let config = DatasetConfig {
            motions: MotionPattern::ALL.to_vec(),
            ..DatasetConfig::default()
        };
        for label in 0..config.num_classes() {
            let mut rng = stream(label as u64, "t");
            let sp = config.sample_spec(label, &mut rng);
            let s = render_clip(&sp, &mut rng).unwrap();
            for b in &s.boxes {
                assert!(b[2] > b[0] && b[3] > b[1]);
                assert!(b[2] as usize <= 32 && b[3] as usize <= 32);
            }
            assert_warp_consistent(&s);
            let r = reverse_clip(&s);
            assert_warp_consistent(&r);
            assert_eq!(reverse_clip(&r), s);
        }
    }

    #[test]
    fn oversized_sprite_is_spec_error() {
        let mut sp = spec(MotionPattern::Static, 1.0);
        sp.size = 40;
        let mut rng = stream(0, "t");
        assert!(matches!(render_clip(&sp, &mut rng), Err(Error::Spec(_))));
    }

    #[test]
    fn labels_are_bijective() {
        let c = DatasetConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (si, _) in c.shapes.iter().enumerate() {
            for (mi, _) in c.motions.iter().enumerate() {
                let l = c.label(si, mi);
                assert_eq!(c.class_of(l), (c.shapes[si], c.motions[mi]));
                assert!(seen.insert(l));
            }
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn flip_negates_dx_and_is_involution() {
        let mut rng = stream(5, "t");
        let s = render_clip(&spec(MotionPattern::DriftRight, 1.0), &mut rng).unwrap();
        let f = flip_horizontal(&s);
        assert!(f.flow.data().chunks(2).all(|c| c[0] <= 0.0));
        assert_eq!(flip_horizontal(&f), s);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut rng = stream(6, "t");
        let s = render_clip(&spec(MotionPattern::Circular, 1.2), &mut rng).unwrap();
        let bytes = encode_dataset(std::slice::from_ref(&s)).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), vec![s]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match decode_dataset(&bad).unwrap_err() {
            Error::Format { expected, actual, .. } => {
                assert_eq!(expected, "ADVD");
                assert_eq!(actual, "XDVD");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 3]),
            Err(Error::Corrupt(_))
        ));
    }
}
