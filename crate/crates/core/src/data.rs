//! Synthetic shapes corpus and the on-disk dataset format.
//!
//! A dataset directory holds `images/<id>.png`, `annotations.jsonl` (one
//! JSON object per record) and `vocab.txt` (sorted word list).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::rgb8_to_planar;
use crate::io::atomic_write;
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};

pub const COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [215, 45, 40]),
    ("green", [45, 190, 70]),
    ("blue", [50, 90, 225]),
    ("yellow", [225, 205, 45]),
];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const BACKGROUND: [u8; 3] = [18, 18, 28];

pub fn class_count() -> usize {
    COLORS.len() * SHAPES.len()
}

/// Phrase for class `k` (color-major), e.g. "red circle".
pub fn class_name(k: usize) -> String {
    format!("{} {}", COLORS[k / SHAPES.len()].0, SHAPES[k % SHAPES.len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    pub path: String,
    pub captions: Vec<String>,
    pub attributes: Vec<String>,
    pub class: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub captions_per_image: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            train: 512,
            test: 128,
            size: 64,
            captions_per_image: 3,
            max_objects: 3,
            seed: 7,
        }
    }
}

pub struct Corpus {
    pub records: Vec<Record>,
    /// Interleaved 8-bit RGB, one buffer per record.
    pub rgb: Vec<Vec<u8>>,
    pub size: usize,
}

const LEADS: [&str; 3] = ["", "there is", "an image with"];

fn article(phrase: &str) -> &'static str {
    match phrase.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// "a X", "a X and a Y", "a X a Y and a Z".
fn enumerate(objects: &[String]) -> String {
    let parts: Vec<String> = objects.iter().map(|o| format!("{} {o}", article(o))).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(" "), parts[n - 1]),
    }
}

fn caption(template: usize, objects: &[String]) -> String {
    let lead = LEADS[template % LEADS.len()];
    let body = enumerate(objects);
    if lead.is_empty() {
        body
    } else {
        format!("{lead} {body}")
    }
}

#[derive(Clone, Copy)]
struct Placed {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    color: [u8; 3],
}

fn inside(p: &Placed, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - p.cx, y - p.cy);
    match p.class % SHAPES.len() {
        0 => dx * dx + dy * dy <= p.radius * p.radius,
        1 => dx.abs() <= 0.85 * p.radius && dy.abs() <= 0.85 * p.radius,
        _ => {
            let t = (dy + p.radius) / (2.0 * p.radius);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * p.radius
        }
    }
}

fn render(objects: &[Placed], size: usize) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let color = objects
                .iter()
                .find(|o| inside(o, fx, fy))
                .map_or(BACKGROUND, |o| o.color);
            rgb.extend_from_slice(&color);
        }
    }
    rgb
}

fn place<R: Rng>(classes: &[usize], size: usize, rng: &mut R) -> Result<Vec<Placed>> {
    let s = size as f64;
    let (r_lo, r_hi) = (s * 0.11, s * 0.19);
    'attempt: for _ in 0..1000 {
        let mut placed: Vec<Placed> = Vec::with_capacity(classes.len());
        for &class in classes {
            let mut ok = false;
            for _ in 0..200 {
                let radius = rng.random_range(r_lo..=r_hi);
                let cx = rng.random_range(radius + 1.0..=s - radius - 1.0);
                let cy = rng.random_range(radius + 1.0..=s - radius - 1.0);
                if placed.iter().all(|p| (p.cx - cx).abs() > p.radius + radius + 1.0 || (p.cy - cy).abs() > p.radius + radius + 1.0) {
                    let base = COLORS[class / SHAPES.len()].1;
                    let mut color = [0u8; 3];
                    for (c, b) in color.iter_mut().zip(base) {
                        *c = (b as i32 + rng.random_range(-15..=15)).clamp(0, 255) as u8;
                    }
                    placed.push(Placed { class, cx, cy, radius, color });
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        return Ok(placed);
    }
    Err(Error::Config(format!("cannot place {} objects on a {size}px canvas", classes.len())))
}

/// Deterministic corpus for a seed. Primary classes cycle through a seeded
/// permutation so class counts differ by at most one.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.train == 0 || spec.test == 0 || spec.captions_per_image == 0 || spec.max_objects == 0 {
        return Err(Error::Config("corpus counts must be positive".into()));
    }
    if spec.size < 16 {
        return Err(Error::Config(format!("image side {} is too small", spec.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = class_count();
    let mut perm: Vec<usize> = (0..k).collect();
    let total = spec.train + spec.test;
    let mut records = Vec::with_capacity(total);
    let mut rgb = Vec::with_capacity(total);
    for idx in 0..total {
        // Each split cycles through classes on its own so both stay balanced.
        let local = if idx < spec.train { idx } else { idx - spec.train };
        if local % k == 0 {
            perm.shuffle(&mut rng);
        }
        let primary = perm[local % k];
        let extra = rng.random_range(0..spec.max_objects);
        let mut classes = vec![primary];
        while classes.len() < 1 + extra {
            let c = rng.random_range(0..k);
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
        let placed = place(&classes, spec.size, &mut rng)?;
        let names: Vec<String> = classes.iter().map(|&c| class_name(c)).collect();
        let mut captions = Vec::with_capacity(spec.captions_per_image);
        for c in 0..spec.captions_per_image {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            captions.push(caption(c, &order));
        }
        let id = format!("img{idx:05}");
        records.push(Record {
            path: format!("images/{id}.png"),
            image: id,
            captions,
            attributes: names.clone(),
            class: names[0].clone(),
            split: if idx < spec.train { Split::Train } else { Split::Test },
        });
        rgb.push(render(&placed, spec.size));
    }
    Ok(Corpus {
        records,
        rgb,
        size: spec.size,
    })
}

pub fn encode_png(rgb: &[u8], side: usize) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, side as u32, side as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: PathBuf::from("<memory>"),
            source: e,
        })?;
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() != rgb.height() {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("image is {}x{}, expected a square", rgb.width(), rgb.height()),
        });
    }
    let side = rgb.width() as usize;
    Ok((rgb.into_raw(), side))
}

/// Vocabulary over all captions and attribute phrases of the records.
pub fn corpus_vocabulary(records: &[Record]) -> Vocabulary {
    Vocabulary::build(
        records
            .iter()
            .flat_map(|r| r.captions.iter().chain(&r.attributes))
            .map(String::as_str),
    )
}

pub fn write_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for (rec, rgb) in corpus.records.iter().zip(&corpus.rgb) {
        atomic_write(&dir.join(&rec.path), &encode_png(rgb, corpus.size)?)?;
    }
    let mut lines = String::new();
    for rec in &corpus.records {
        lines.push_str(&serde_json::to_string(rec).expect("records serialize"));
        lines.push('\n');
    }
    atomic_write(&dir.join("annotations.jsonl"), lines.as_bytes())?;
    let vocab = corpus_vocabulary(&corpus.records);
    atomic_write(&dir.join("vocab.txt"), vocab.to_file_contents().as_bytes())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.into(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        if rec.captions.is_empty() || rec.attributes.is_empty() {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("line {}: record {} needs captions and attributes", i + 1, rec.image),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// A loaded dataset with decoded pixels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub vocab: Vocabulary,
    /// Planar `[3, side, side]` pixels in `[-1, 1]`, one per record.
    pub pixels: Vec<Vec<f64>>,
    pub side: usize,
    /// Sorted class labels; `class_index` maps into this list.
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let pixels = corpus.rgb.iter().map(|b| rgb8_to_planar(b, corpus.size)).collect();
        Self::assemble(corpus.records.clone(), pixels, corpus.size, corpus_vocabulary(&corpus.records))
    }

    fn assemble(records: Vec<Record>, pixels: Vec<Vec<f64>>, side: usize, vocab: Vocabulary) -> Self {
        let classes: Vec<String> = records
            .iter()
            .map(|r| r.class.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Dataset {
            records,
            vocab,
            pixels,
            side,
            classes,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_annotations(&dir.join("annotations.jsonl"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mut pixels = Vec::with_capacity(records.len());
        let mut side = None;
        for rec in &records {
            let path = dir.join(&rec.path);
            let (rgb, s) = read_png(&path)?;
            if *side.get_or_insert(s) != s {
                return Err(Error::Format {
                    path,
                    detail: format!("side {s} differs from earlier images"),
                });
            }
            pixels.push(rgb8_to_planar(&rgb, s));
        }
        Ok(Self::assemble(records, pixels, side.unwrap_or(0), vocab))
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn class_index(&self, item: usize) -> usize {
        self.classes
            .binary_search(&self.records[item].class)
            .expect("class list built from records")
    }

    /// `[items.len(), 3, side, side]` pixel batch.
    pub fn pixel_batch(&self, items: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(items.len() * 3 * self.side * self.side);
        for &i in items {
            data.extend_from_slice(&self.pixels[i]);
        }
        Tensor::new(vec![items.len(), 3, self.side, self.side], data).expect("pixel sizes checked")
    }

    /// Token ids of a caption, truncated to `n_max`.
    pub fn caption_ids(&self, item: usize, caption: usize, n_max: usize) -> Vec<usize> {
        let mut ids = self.vocab.encode(&self.records[item].captions[caption]);
        ids.truncate(n_max);
        ids
    }

    /// Histogram of primary classes over the listed items.
    pub fn class_histogram(&self, items: &[usize]) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for &i in items {
            *h.entry(self.records[i].class.clone()).or_insert(0) += 1;
        }
        h
    }

    pub fn max_caption_tokens(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| &r.captions)
            .map(|c| tokenize(c).len())
            .max()
            .unwrap_or(0)
    }
}
