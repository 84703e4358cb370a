//! Synthetic transition videos, pair/dataset directories and frame I/O.
//!
//! Caption templates (all lowercase, words from the lists below):
//! - motion: `a {color} {shape} moving {direction}, at the {side}`
//! - morphing: `a {color} {shape}` (shape changes, color fixed)
//! - blending: `a {color} {shape}` (both change, objects cross-fade)
//! - scene: `a {color} {shape} on a {background} background`

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbaImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{image_from_rgb8, image_to_rgb8, quantize, Image};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Morphing,
    Motion,
    Blending,
    Scene,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Morphing, Task::Motion, Task::Blending, Task::Scene];

    pub fn name(self) -> &'static str {
        match self {
            Task::Morphing => "morphing",
            Task::Motion => "motion",
            Task::Blending => "blending",
            Task::Scene => "scene",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid(format!("unknown task `{s}` (morphing | motion | blending | scene)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Signed distance (pixels) from `(dx, dy)` relative to the center.
    fn sdf(self, dx: f64, dy: f64, r: f64) -> f64 {
        match self {
            Shape::Circle => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square => {
                let s = 0.85 * r;
                let qx = dx.abs() - s;
                let qy = dy.abs() - s;
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0)
            }
            Shape::Diamond => (dx.abs() + dy.abs() - 1.2 * r) / std::f64::consts::SQRT_2,
            Shape::Triangle => {
                // upward equilateral triangle inscribed in the radius
                let k = 3f64.sqrt();
                let (mut px, mut py) = (dx.abs(), -dy + 0.25 * r);
                let rr = r * 0.9;
                px -= rr;
                py += rr / k;
                if px + k * py > 0.0 {
                    let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                    px = nx;
                    py = ny;
                }
                px -= px.clamp(-2.0 * rr, 0.0);
                -(px * px + py * py).sqrt() * py.signum()
            }
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.86, 0.16, 0.16]),
    ("green", [0.18, 0.7, 0.25]),
    ("blue", [0.16, 0.32, 0.86]),
    ("yellow", [0.95, 0.82, 0.15]),
    ("purple", [0.58, 0.24, 0.74]),
    ("orange", [0.96, 0.52, 0.12]),
];

pub const BACKGROUNDS: [(&str, [f64; 3]); 4] = [
    ("white", [0.96, 0.96, 0.96]),
    ("gray", [0.55, 0.55, 0.55]),
    ("dark", [0.1, 0.1, 0.14]),
    ("sky", [0.6, 0.8, 0.95]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Where a trajectory in this direction starts and ends.
    fn sides(self) -> (&'static str, &'static str) {
        match self {
            Direction::Left => ("right", "left"),
            Direction::Right => ("left", "right"),
            Direction::Up => ("bottom", "top"),
            Direction::Down => ("top", "bottom"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    /// Object radius in pixels; drawn from the seed when unset.
    pub radius: Option<f64>,
    pub shape: Option<Shape>,
    pub color: Option<usize>,
    pub direction: Option<Direction>,
}

impl SynthSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            frames: 16,
            size: 64,
            seed: 0,
            radius: None,
            shape: None,
            color: None,
            direction: None,
        }
    }
}

/// Parameters of one rendered frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParams {
    pub center: (f64, f64),
    pub radius: f64,
    pub shape_a: Shape,
    pub shape_b: Shape,
    /// 0 renders `shape_a`, 1 renders `shape_b`.
    pub blend: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Cross-fade between the two objects instead of a geometric morph.
    pub crossfade: bool,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    pub id: String,
    pub first_frame: Image,
    pub last_frame: Image,
    pub caption_first: String,
    pub caption_last: String,
    pub video: Option<Vec<Image>>,
}

impl TransitionSample {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Dataset {
            id: self.id.clone(),
            reason,
        };
        if self.first_frame.dim() != self.last_frame.dim() {
            return Err(fail(format!(
                "resolution mismatch {:?} vs {:?}",
                self.first_frame.dim(),
                self.last_frame.dim()
            )));
        }
        if self.caption_first.trim().is_empty() || self.caption_last.trim().is_empty() {
            return Err(fail("empty caption".into()));
        }
        if let Some(v) = &self.video {
            if v.len() < 2 || v.iter().any(|f| f.dim() != self.first_frame.dim()) {
                return Err(fail("video frames are inconsistent".into()));
            }
        }
        Ok(())
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

pub fn render(size: usize, p: &FrameParams) -> Image {
    let cov = |shape: Shape, x: f64, y: f64| -> f64 {
        (0.5 - shape.sdf(x - p.center.0, y - p.center.1, p.radius)).clamp(0.0, 1.0)
    };
    let img = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let bg = p.background[c];
        if p.crossfade {
            let a = cov(p.shape_a, fx, fy) * (1.0 - p.blend);
            let b = cov(p.shape_b, fx, fy) * p.blend;
            bg * (1.0 - a - b) + p.color_a[c] * a + p.color_b[c] * b
        } else {
            let d = (1.0 - p.blend) * p.shape_a.sdf(fx - p.center.0, fy - p.center.1, p.radius)
                + p.blend * p.shape_b.sdf(fx - p.center.0, fy - p.center.1, p.radius);
            let a = (0.5 - d).clamp(0.0, 1.0);
            let col = lerp3(p.color_a, p.color_b, p.blend)[c];
            bg * (1.0 - a) + col * a
        }
    });
    quantize(&img)
}

/// Per-frame parameters of sample `index` and its two captions.
pub fn track(spec: &SynthSpec, index: usize) -> Result<(Vec<FrameParams>, String, String)> {
    if spec.frames < 2 {
        return Err(invalid("a transition needs at least 2 frames"));
    }
    if spec.size < 8 {
        return Err(invalid("canvas must be at least 8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED69));
    let size = spec.size as f64;
    let radius = spec.radius.unwrap_or_else(|| size * rng.random_range(0.14..0.2));
    if radius <= 0.0 || 2.0 * radius + 4.0 > size {
        return Err(invalid(format!("object radius {radius} does not fit a {}px canvas", spec.size)));
    }
    let pick_shape = |rng: &mut ChaCha8Rng| Shape::ALL[rng.random_range(0..4)];
    let shape_a = spec.shape.unwrap_or_else(|| pick_shape(&mut rng));
    let mut shape_b = pick_shape(&mut rng);
    if shape_b == shape_a {
        shape_b = Shape::ALL[(Shape::ALL.iter().position(|s| *s == shape_a).unwrap() + 1) % 4];
    }
    let ci = match spec.color {
        Some(c) if c < COLORS.len() => c,
        Some(c) => return Err(invalid(format!("color index {c} out of range"))),
        None => rng.random_range(0..COLORS.len()),
    };
    let cj = (ci + rng.random_range(1..COLORS.len())) % COLORS.len();
    let bi = rng.random_range(0..BACKGROUNDS.len());
    let bj = (bi + rng.random_range(1..BACKGROUNDS.len())) % BACKGROUNDS.len();
    let direction = spec.direction.unwrap_or_else(|| Direction::ALL[rng.random_range(0..4)]);
    let jitter = rng.random_range(-0.1..0.1) * size;
    let (cname, color) = COLORS[ci];
    let (cname_b, color_b) = COLORS[cj];
    let (bname, bg) = BACKGROUNDS[bi];
    let (bname_b, bg_b) = BACKGROUNDS[bj];
    let mid = size / 2.0;
    let n = spec.frames;
    let frac = |k: usize| k as f64 / (n - 1) as f64;
    let base = FrameParams {
        center: (mid, mid),
        radius,
        shape_a,
        shape_b: shape_a,
        blend: 0.0,
        color_a: color,
        color_b: color,
        crossfade: false,
        background: bg,
    };
    let margin = radius + 2.0;
    let (frames, first, last) = match spec.task {
        Task::Motion => {
            let (lo, hi) = (margin, size - margin);
            let (from, to) = match direction {
                Direction::Right => ((lo, mid + jitter), (hi, mid + jitter)),
                Direction::Left => ((hi, mid + jitter), (lo, mid + jitter)),
                Direction::Down => ((mid + jitter, lo), (mid + jitter, hi)),
                Direction::Up => ((mid + jitter, hi), (mid + jitter, lo)),
            };
            let frames = (0..n)
                .map(|k| FrameParams {
                    center: (from.0 + (to.0 - from.0) * frac(k), from.1 + (to.1 - from.1) * frac(k)),
                    ..base
                })
                .collect();
            let (s0, s1) = direction.sides();
            let d = direction.name();
            let s = shape_a.name();
            (
                frames,
                format!("a {cname} {s} moving {d}, at the {s0}"),
                format!("a {cname} {s} moving {d}, at the {s1}"),
            )
        }
        Task::Morphing => {
            let frames = (0..n)
                .map(|k| FrameParams {
                    shape_b,
                    blend: frac(k),
                    ..base
                })
                .collect();
            (frames, format!("a {cname} {}", shape_a.name()), format!("a {cname} {}", shape_b.name()))
        }
        Task::Blending => {
            let frames = (0..n)
                .map(|k| FrameParams {
                    shape_b,
                    color_b,
                    crossfade: true,
                    blend: frac(k),
                    ..base
                })
                .collect();
            (
                frames,
                format!("a {cname} {}", shape_a.name()),
                format!("a {cname_b} {}", shape_b.name()),
            )
        }
        Task::Scene => {
            let frames = (0..n)
                .map(|k| FrameParams {
                    background: lerp3(bg, bg_b, frac(k)),
                    ..base
                })
                .collect();
            let s = shape_a.name();
            (
                frames,
                format!("a {cname} {s} on a {bname} background"),
                format!("a {cname} {s} on a {bname_b} background"),
            )
        }
    };
    Ok((frames, first, last))
}

/// `count` ground-truth transition videos, fully determined by `spec`.
pub fn gen_synthetic(spec: &SynthSpec, count: usize) -> Result<Vec<TransitionSample>> {
    if count == 0 {
        return Err(invalid("count must be at least 1"));
    }
    (0..count)
        .map(|i| {
            let (params, first, last) = track(spec, i)?;
            let video: Vec<Image> = params.iter().map(|p| render(spec.size, p)).collect();
            Ok(TransitionSample {
                id: format!("{}_{:04}", spec.task.name(), i),
                first_frame: video[0].clone(),
                last_frame: video[video.len() - 1].clone(),
                caption_first: first,
                caption_last: last,
                video: Some(video),
            })
        })
        .collect()
}

/// An equal mix of all four tasks.
pub fn gen_mixed(base: &SynthSpec, count: usize) -> Result<Vec<TransitionSample>> {
    let mut out = Vec::with_capacity(count);
    for (k, task) in Task::ALL.iter().enumerate() {
        let share = count / 4 + usize::from(k < count % 4);
        if share == 0 {
            continue;
        }
        let spec = SynthSpec {
            task: *task,
            ..base.clone()
        };
        out.extend(gen_synthetic(&spec, share)?);
    }
    Ok(out)
}

/// The first `n` captions of the enumerable template vocabulary.
pub fn caption_vocabulary(n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for (c, _) in COLORS {
        for s in Shape::ALL {
            out.push(format!("a {c} {}", s.name()));
            for d in Direction::ALL {
                let (s0, s1) = d.sides();
                out.push(format!("a {c} {} moving {}, at the {s0}", s.name(), d.name()));
                out.push(format!("a {c} {} moving {}, at the {s1}", s.name(), d.name()));
            }
            for (b, _) in BACKGROUNDS {
                out.push(format!("a {c} {} on a {b} background", s.name()));
            }
        }
    }
    out.truncate(n);
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Prompts {
    first: String,
    last: String,
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(image_from_rgb8(&img))
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    image_to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn sorted_subdirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn dir_id(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_prompts(dir: &Path) -> Result<Prompts> {
    let id = dir_id(dir);
    let path = dir.join("prompts.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset {
        id: id.clone(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset {
        id,
        reason: format!("malformed prompts.json: {e}"),
    })
}

fn with_id<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Dataset { .. } => e,
        e => Error::Dataset {
            id: id.to_string(),
            reason: e.to_string(),
        },
    })
}

/// Read one pair directory (`first.png`, `last.png`, `prompts.json`).
pub fn load_pair(dir: &Path) -> Result<TransitionSample> {
    let id = dir_id(dir);
    let prompts = read_prompts(dir)?;
    let s = TransitionSample {
        id: id.clone(),
        first_frame: with_id(&id, read_png(&dir.join("first.png")))?,
        last_frame: with_id(&id, read_png(&dir.join("last.png")))?,
        caption_first: prompts.first,
        caption_last: prompts.last,
        video: None,
    };
    s.validate()?;
    Ok(s)
}

/// Every pair under `root`, sorted by id.
pub fn load_pairs(root: &Path) -> Result<Vec<TransitionSample>> {
    sorted_subdirs(root)?.iter().map(|d| load_pair(d)).collect()
}

fn write_prompts(dir: &Path, s: &TransitionSample) -> Result<()> {
    let p = Prompts {
        first: s.caption_first.clone(),
        last: s.caption_last.clone(),
    };
    fs::write(dir.join("prompts.json"), serde_json::to_string_pretty(&p)?)?;
    Ok(())
}

pub fn write_pair(root: &Path, s: &TransitionSample) -> Result<PathBuf> {
    let dir = root.join(&s.id);
    fs::create_dir_all(&dir)?;
    write_png(&dir.join("first.png"), &s.first_frame)?;
    write_png(&dir.join("last.png"), &s.last_frame)?;
    write_prompts(&dir, s)?;
    Ok(dir)
}

/// Write samples with ground-truth videos as `{id}/frames/NNNN.png` plus prompts.
pub fn write_dataset(root: &Path, samples: &[TransitionSample]) -> Result<()> {
    for s in samples {
        let video = s.video.as_ref().ok_or_else(|| Error::Dataset {
            id: s.id.clone(),
            reason: "sample has no video".into(),
        })?;
        let dir = root.join(&s.id);
        write_video(video, &dir.join("frames"), VideoFormat::PngDir, 100)?;
        write_prompts(&dir, s)?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Vec<TransitionSample>> {
    sorted_subdirs(root)?
        .iter()
        .map(|dir| {
            let id = dir_id(dir);
            let prompts = read_prompts(dir)?;
            let video = with_id(&id, read_video(&dir.join("frames")))?;
            let s = TransitionSample {
                id,
                first_frame: video[0].clone(),
                last_frame: video[video.len() - 1].clone(),
                caption_first: prompts.first,
                caption_last: prompts.last,
                video: Some(video),
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoFormat {
    PngDir,
    Gif,
}

/// Write frames as `out/0000.png ...` or as an animated gif at `out`.
pub fn write_video(frames: &[Image], out: &Path, format: VideoFormat, delay_ms: u32) -> Result<()> {
    let first = frames.first().ok_or_else(|| invalid("no frames to write"))?;
    if frames.iter().any(|f| f.dim() != first.dim()) {
        return Err(invalid("frames differ in resolution"));
    }
    match format {
        VideoFormat::PngDir => {
            fs::create_dir_all(out)?;
            for (i, f) in frames.iter().enumerate() {
                write_png(&out.join(format!("{i:04}.png")), f)?;
            }
        }
        VideoFormat::Gif => {
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let file = fs::File::create(out)?;
            let mut enc = GifEncoder::new_with_speed(std::io::BufWriter::new(file), 10);
            enc.set_repeat(Repeat::Infinite)?;
            for f in frames {
                let rgba: RgbaImage = image::DynamicImage::ImageRgb8(image_to_rgb8(f)).to_rgba8();
                enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))?;
            }
        }
    }
    Ok(())
}

/// Read `NNNN.png` frames from a directory in index order.
pub fn read_video(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no png frames in {}", dir.display())));
    }
    files.iter().map(|p| read_png(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid_x(img: &Image, bg: [f64; 3]) -> f64 {
        let (h, w, _) = img.dim();
        let (mut sx, mut sm) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let d: f64 = (0..3).map(|c| (img[[y, x, c]] - bg[c]).abs()).sum();
                sx += d * (x as f64 + 0.5);
                sm += d;
            }
        }
        sx / sm
    }

    #[test]
    fn motion_track_is_linear() {
        let spec = SynthSpec {
            shape: Some(Shape::Circle),
            color: Some(0),
            direction: Some(Direction::Right),
            radius: Some(8.0),
            ..SynthSpec::new(Task::Motion)
        };
        let (params, first, _) = track(&spec, 0).unwrap();
        let x0 = params[0].center.0;
        let x1 = params[15].center.0;
        assert!(x1 > x0);
        for (k, p) in params.iter().enumerate() {
            let want = x0 + (x1 - x0) * k as f64 / 15.0;
            assert!((p.center.0 - want).abs() < 1e-12);
        }
        for word in ["red", "circle", "right"] {
            assert!(first.split(|c: char| !c.is_alphanumeric()).any(|w| w == word), "{first}");
        }
        let video = gen_synthetic(&spec, 1).unwrap().remove(0).video.unwrap();
        for (k, f) in video.iter().enumerate() {
            let bg = [f[[0, 63, 0]], f[[0, 63, 1]], f[[0, 63, 2]]];
            assert!((centroid_x(f, bg) - params[k].center.0).abs() < 0.25, "{k}: {} vs {}", centroid_x(f, bg), params[k].center.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for task in Task::ALL {
            let spec = SynthSpec { seed: 7, ..SynthSpec::new(task) };
            assert_eq!(gen_synthetic(&spec, 3).unwrap(), gen_synthetic(&spec, 3).unwrap());
        }
        let a = gen_synthetic(&SynthSpec { seed: 1, ..SynthSpec::new(Task::Blending) }, 1).unwrap();
        let b = gen_synthetic(&SynthSpec { seed: 2, ..SynthSpec::new(Task::Blending) }, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        let spec = SynthSpec { radius: Some(40.0), ..SynthSpec::new(Task::Motion) };
        assert!(gen_synthetic(&spec, 1).is_err());
        assert!(gen_synthetic(&SynthSpec::new(Task::Motion), 0).is_err());
    }

    #[test]
    fn adjacent_distances_are_even() {
        for task in Task::ALL {
            for s in gen_synthetic(&SynthSpec { seed: 3, ..SynthSpec::new(task) }, 4).unwrap() {
                let v = s.video.unwrap();
                let d: Vec<f64> = v
                    .windows(2)
                    .map(|w| w[0].iter().zip(w[1].iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let g = crate::metrics::gini(&d).unwrap();
                assert!(g < 0.2, "{task:?} {}: gini {g}", s.id);
            }
        }
    }

    #[test]
    fn vocabulary_is_distinct() {
        let v = caption_vocabulary(100);
        assert_eq!(v.len(), 100);
        let set: std::collections::BTreeSet<_> = v.iter().collect();
        assert_eq!(set.len(), 100);
    }

    #[test]
    fn png_dir_roundtrip_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let v = gen_synthetic(&SynthSpec::new(Task::Scene), 1).unwrap().remove(0).video.unwrap();
        write_video(&v, &dir.path().join("f"), VideoFormat::PngDir, 100).unwrap();
        assert!(dir.path().join("f/0000.png").exists());
        assert!(dir.path().join("f/0015.png").exists());
        assert_eq!(read_video(&dir.path().join("f")).unwrap(), v);
    }

    #[test]
    fn single_frame_gif() {
        let dir = tempfile::tempdir().unwrap();
        let v = gen_synthetic(&SynthSpec::new(Task::Scene), 1).unwrap().remove(0).video.unwrap();
        let path = dir.path().join("one.gif");
        write_video(&v[..1], &path, VideoFormat::Gif, 100).unwrap();
        let dec = image::codecs::gif::GifDecoder::new(std::io::BufReader::new(fs::File::open(&path).unwrap())).unwrap();
        let frames = image::AnimationDecoder::into_frames(dec).collect_frames().unwrap();
        assert_eq!(frames.len(), 1);
        assert!(write_video(&[], &path, VideoFormat::Gif, 100).is_err());
    }

    #[test]
    fn pair_layout() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_pairs(dir.path()).unwrap().is_empty());
        let mut samples = gen_synthetic(&SynthSpec::new(Task::Morphing), 2).unwrap();
        for s in &mut samples {
            s.video = None;
        }
        for s in samples.iter().rev() {
            write_pair(dir.path(), s).unwrap();
        }
        assert_eq!(load_pairs(dir.path()).unwrap(), samples);

        let bad = dir.path().join("zz_bad");
        fs::create_dir_all(&bad).unwrap();
        write_png(&bad.join("first.png"), &Array3::zeros((8, 8, 3))).unwrap();
        write_png(&bad.join("last.png"), &Array3::zeros((16, 8, 3))).unwrap();
        fs::write(bad.join("prompts.json"), r#"{"first":"a","last":"b"}"#).unwrap();
        let err = load_pairs(dir.path()).unwrap_err().to_string();
        assert!(err.contains("zz_bad"), "{err}");
        fs::remove_file(bad.join("prompts.json")).unwrap();
        let err = load_pairs(dir.path()).unwrap_err().to_string();
        assert!(err.contains("zz_bad"), "{err}");
    }

    #[test]
    fn dataset_layout_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_mixed(&SynthSpec { frames: 4, ..SynthSpec::new(Task::Motion) }, 5).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(load_dataset(dir.path()).unwrap(), sorted);
    }
}
