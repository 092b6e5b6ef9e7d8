//! Procedural part-structured images with ground-truth landmarks.
//!
//! Each object category is a rigid layout of three glyphs (head, torso and
//! tail analogs) sharing one category colour. Objects are translated and
//! rotated per image and every part is jittered independently. Negative
//! images (label 0) contain background clutter only.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
}

impl Glyph {
    pub fn name(&self) -> &'static str {
        match self {
            Glyph::Disc => "disc",
            Glyph::Square => "square",
            Glyph::Triangle => "triangle",
        }
    }

    const ALL: [Glyph; 3] = [Glyph::Disc, Glyph::Square, Glyph::Triangle];
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSpec {
    pub name: String,
    /// Offset `(dx, dy)` of the part centre from the object centre, pixels.
    pub offset: (f64, f64),
    pub glyph: Glyph,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryLayout {
    pub name: String,
    pub color: [u8; 3],
    pub parts: Vec<PartSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub categories: Vec<CategoryLayout>,
    /// Radius of the uniform per-part position jitter, pixels.
    pub jitter: f64,
    /// Maximum absolute layout rotation, radians.
    pub max_rotation: f64,
    /// Clutter glyphs per image.
    pub clutter: usize,
    pub seed: u64,
}

const CATEGORY_COLORS: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [60, 90, 240],
    [230, 210, 40],
    [210, 60, 210],
    [40, 210, 220],
];

const CLUTTER_COLORS: [[u8; 3]; 4] = [[150, 110, 70], [235, 235, 235], [120, 120, 40], [250, 150, 40]];

const PART_NAMES: [&str; 3] = ["head", "torso", "tail"];

impl SynthSpec {
    /// Default spec with `categories` object categories (at most 6).
    pub fn with_categories(categories: usize, seed: u64) -> Result<Self> {
        if categories == 0 || categories > CATEGORY_COLORS.len() {
            return Err(Error::InvalidArgument(format!(
                "categories must be in 1..={}, got {categories}",
                CATEGORY_COLORS.len()
            )));
        }
        let layouts = (0..categories)
            .map(|c| {
                // each category bends its three parts differently
                let bend = c as f64 * PI / 3.0;
                let tail_angle = PI / 6.0 + bend;
                let parts = vec![
                    PartSpec {
                        name: PART_NAMES[0].into(),
                        offset: (-11.0, -6.0),
                        glyph: Glyph::ALL[c % 3],
                        radius: 4.5,
                    },
                    PartSpec {
                        name: PART_NAMES[1].into(),
                        offset: (0.0, 2.0),
                        glyph: Glyph::ALL[(c + 1) % 3],
                        radius: 6.0,
                    },
                    PartSpec {
                        name: PART_NAMES[2].into(),
                        offset: (13.0 * tail_angle.cos(), 2.0 + 13.0 * tail_angle.sin()),
                        glyph: Glyph::ALL[(c + 2) % 3],
                        radius: 4.0,
                    },
                ];
                CategoryLayout {
                    name: format!("category{}", c + 1),
                    color: CATEGORY_COLORS[c],
                    parts,
                }
            })
            .collect();
        Ok(SynthSpec {
            image_size: 64,
            categories: layouts,
            jitter: 2.0,
            max_rotation: PI / 8.0,
            clutter: 4,
            seed,
        })
    }

    /// Number of labels including the background label 0.
    pub fn num_labels(&self) -> usize {
        self.categories.len() + 1
    }

    /// Largest distance from the object centre any glyph pixel can reach.
    fn extent(&self, layout: &CategoryLayout) -> f64 {
        layout
            .parts
            .iter()
            .map(|p| p.offset.0.hypot(p.offset.1) + self.jitter + p.radius)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::InvalidArgument("image_size must be >= 8".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::InvalidArgument("at least one category is required".into()));
        }
        for layout in &self.categories {
            if layout.parts.is_empty() {
                return Err(Error::InvalidArgument(format!("{} has no parts", layout.name)));
            }
            if 2.0 * self.extent(layout) + 1.0 > self.image_size as f64 {
                return Err(Error::InvalidArgument(format!(
                    "{} does not fit a {}px image with parts kept off the border",
                    layout.name, self.image_size
                )));
            }
            if CLUTTER_COLORS.contains(&layout.color) {
                return Err(Error::InvalidArgument(format!("{} uses a clutter colour", layout.name)));
            }
        }
        if self.jitter < 0.0 || self.max_rotation < 0.0 {
            return Err(Error::InvalidArgument("jitter and rotation must be >= 0".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "categories={}", self.categories.len());
        let _ = writeln!(s, "jitter={}", self.jitter);
        let _ = writeln!(s, "max_rotation={}", self.max_rotation);
        let _ = writeln!(s, "clutter={}", self.clutter);
        for (c, l) in self.categories.iter().enumerate() {
            let _ = write!(s, "category.{}={} color={:?}", c + 1, l.name, l.color);
            for p in &l.parts {
                let _ = write!(
                    s,
                    " {}:{}@({:.3},{:.3})r{}",
                    p.name,
                    p.glyph.name(),
                    p.offset.0,
                    p.offset.1,
                    p.radius
                );
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub name: String,
    /// Column, pixels.
    pub x: f64,
    /// Row, pixels.
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    /// `[size, size, 3]`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor,
    /// 0 is background-only; `c >= 1` is object category `c`.
    pub label: usize,
    pub landmarks: Vec<Landmark>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    pub num_labels: usize,
}

struct Canvas {
    size: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn background(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut px = vec![0u8; size * size * 3];
        for p in px.chunks_exact_mut(3) {
            let base = 25 + rng.random_range(0..12u8);
            p.copy_from_slice(&[base, base, base + 4]);
        }
        Canvas { size, px }
    }

    fn draw(&mut self, glyph: Glyph, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
        let half = r * 0.85;
        let (s3, lo, hi) = (3f64.sqrt() / 2.0, (cy - r).floor(), (cy + r).ceil());
        let tri = [(cx, cy - r), (cx - r * s3, cy + r / 2.0), (cx + r * s3, cy + r / 2.0)];
        let y0 = lo.max(0.0) as usize;
        let y1 = (hi as isize).min(self.size as isize - 1);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as isize).min(self.size as isize - 1);
        if y1 < 0 || x1 < 0 {
            return;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (fx, fy) = (x as f64, y as f64);
                let inside = match glyph {
                    Glyph::Disc => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
                    Glyph::Square => (fx - cx).abs() <= half && (fy - cy).abs() <= half,
                    Glyph::Triangle => in_triangle((fx, fy), tri),
                };
                if inside {
                    let o = (y * self.size + x) * 3;
                    self.px[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let s = self.size;
        Tensor::new(vec![s, s, 3], self.px.iter().map(|&b| b as f64 / 255.0).collect()).expect("canvas shape")
    }
}

fn in_triangle(p: (f64, f64), t: [(f64, f64); 3]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1);
    let d1 = sign(p, t[0], t[1]);
    let d2 = sign(p, t[1], t[2]);
    let d3 = sign(p, t[2], t[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Renders one glyph of the category colour at `(x, y)` on a plain
/// background; used to check landmark bookkeeping.
pub fn render_single_part(spec: &SynthSpec, category: usize, part: usize, x: f64, y: f64) -> Result<SynthSample> {
    let layout = spec
        .categories
        .get(category.wrapping_sub(1))
        .ok_or_else(|| Error::InvalidArgument(format!("no category {category}")))?;
    let p = layout
        .parts
        .get(part)
        .ok_or_else(|| Error::InvalidArgument(format!("no part {part}")))?;
    let mut canvas = Canvas {
        size: spec.image_size,
        px: vec![30u8; spec.image_size * spec.image_size * 3],
    };
    canvas.draw(p.glyph, x, y, p.radius, layout.color);
    Ok(SynthSample {
        id: "single".into(),
        image: canvas.into_tensor(),
        label: category,
        landmarks: vec![Landmark {
            name: p.name.clone(),
            x,
            y,
        }],
    })
}

fn render_sample(spec: &SynthSpec, label: usize, id: String, rng: &mut ChaCha8Rng) -> SynthSample {
    let size = spec.image_size as f64;
    let mut canvas = Canvas::background(spec.image_size, rng);
    for _ in 0..spec.clutter {
        let glyph = Glyph::ALL[rng.random_range(0..3)];
        let color = CLUTTER_COLORS[rng.random_range(0..CLUTTER_COLORS.len())];
        let r = rng.random_range(3.0..6.0);
        let cx = rng.random_range(0.0..size);
        let cy = rng.random_range(0.0..size);
        canvas.draw(glyph, cx, cy, r, color);
    }
    let mut landmarks = Vec::new();
    if label > 0 {
        let layout = &spec.categories[label - 1];
        let ext = spec.extent(layout);
        let cx = rng.random_range(ext..=size - 1.0 - ext);
        let cy = rng.random_range(ext..=size - 1.0 - ext);
        let theta = if spec.max_rotation > 0.0 {
            rng.random_range(-spec.max_rotation..=spec.max_rotation)
        } else {
            0.0
        };
        let (s, c) = theta.sin_cos();
        for p in &layout.parts {
            let (dx, dy) = p.offset;
            let (jx, jy) = jitter(rng, spec.jitter);
            let px = cx + c * dx - s * dy + jx;
            let py = cy + s * dx + c * dy + jy;
            canvas.draw(p.glyph, px, py, p.radius, layout.color);
            landmarks.push(Landmark {
                name: p.name.clone(),
                x: px,
                y: py,
            });
        }
    }
    SynthSample {
        id,
        image: canvas.into_tensor(),
        label,
        landmarks,
    }
}

/// Uniform point in a disc of radius `r`.
fn jitter(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    if r <= 0.0 {
        return (0.0, 0.0);
    }
    let rad = r * rng.random::<f64>().sqrt();
    let ang = rng.random_range(0.0..2.0 * PI);
    (rad * ang.cos(), rad * ang.sin())
}

const TEST_STREAM_OFFSET: u64 = 1 << 40;

/// Class-balanced train and test sets; labels cycle through `0..num_labels`.
pub fn generate_dataset(spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("n_train and n_test must be positive".into()));
    }
    spec.validate()?;
    let k = spec.num_labels();
    let make = |split: &str, n: usize, offset: u64| {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(spec.seed, offset + i as u64);
                render_sample(spec, i % k, format!("{split}/{i:06}"), &mut r)
            })
            .collect::<Vec<_>>()
    };
    Ok(Dataset {
        train: make("train", n_train, 0),
        test: make("test", n_test, TEST_STREAM_OFFSET),
        num_labels: k,
    })
}

impl Dataset {
    /// Writes `<id>.ppm` images, `samples.csv`, `landmarks.csv` and `manifest.txt`.
    pub fn save(&self, dir: &Path, spec: &SynthSpec) -> Result<()> {
        for split in ["train", "test"] {
            let d = dir.join(split);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut samples = String::from("sample_id,label\n");
        let mut landmarks = String::from("sample_id,label,part_name,x,y\n");
        for s in self.train.iter().chain(&self.test) {
            imageio::write_ppm(&dir.join(format!("{}.ppm", s.id)), &s.image)?;
            let _ = writeln!(samples, "{},{}", s.id, s.label);
            for l in &s.landmarks {
                let _ = writeln!(landmarks, "{},{},{},{:.6},{:.6}", s.id, s.label, l.name, l.x, l.y);
            }
        }
        let manifest = format!(
            "{}num_train={}\nnum_test={}\nnum_labels={}\n",
            spec.describe(),
            self.train.len(),
            self.test.len(),
            self.num_labels
        );
        for (name, body) in [
            ("samples.csv", samples),
            ("landmarks.csv", landmarks),
            ("manifest.txt", manifest),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest = read("manifest.txt")?;
        let num_labels = manifest
            .lines()
            .find_map(|l| l.strip_prefix("num_labels="))
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Dataset("manifest.txt lacks num_labels".into()))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for line in read("samples.csv")?.lines().skip(1).filter(|l| !l.is_empty()) {
            let (id, label) = line
                .split_once(',')
                .ok_or_else(|| Error::Dataset(format!("bad samples.csv row {line:?}")))?;
            let label: usize = label
                .parse()
                .map_err(|_| Error::Dataset(format!("bad label in {line:?}")))?;
            let path: PathBuf = dir.join(format!("{id}.ppm"));
            let sample = SynthSample {
                id: id.to_string(),
                image: imageio::read_ppm(&path)?,
                label,
                landmarks: Vec::new(),
            };
            if id.starts_with("train/") {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
        for line in read("landmarks.csv")?.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Dataset(format!("bad landmarks.csv row {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Dataset(format!("bad coordinate in {line:?}")))
            };
            let lm = Landmark {
                name: f[2].to_string(),
                x: num(f[3])?,
                y: num(f[4])?,
            };
            let s = train
                .iter_mut()
                .chain(test.iter_mut())
                .find(|s| s.id == f[0])
                .ok_or_else(|| Error::Dataset(format!("landmark for unknown sample {}", f[0])))?;
            s.landmarks.push(lm);
        }
        Ok(Dataset {
            train,
            test,
            num_labels,
        })
    }
}
