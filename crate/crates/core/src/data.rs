//! Synthetic colored-shapes scenes with caption, counting and existence
//! questions.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::tokenizer::{Tokenizer, COLORS, SHAPES};
use crate::vit::Image;

pub const IMAGE_SIZE: usize = 32;
pub const BACKGROUND: [u8; 3] = [20, 20, 28];
pub const PALETTE: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 90, 230],
    [230, 210, 40],
    [210, 50, 200],
    [40, 210, 210],
];
pub const MIN_SHAPES: usize = 1;
pub const MAX_SHAPES: usize = 6;
pub const MIN_RADIUS: u32 = 3;
pub const MAX_RADIUS: u32 = 5;
pub const PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMeta {
    pub kind: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: usize,
    pub cx: i32,
    pub cy: i32,
    pub radius: u32,
}

impl ShapeMeta {
    fn contains(&self, x: i32, y: i32) -> bool {
        let (dx, dy) = ((x - self.cx) as f64, (y - self.cy) as f64);
        let r = self.radius as f64;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => {
                let h = r * std::f64::consts::FRAC_1_SQRT_2;
                dx.abs() <= h && dy.abs() <= h
            }
            ShapeKind::Triangle => {
                // Upward equilateral triangle inscribed in the circle.
                let s = r * 3f64.sqrt() / 2.0;
                let v = [(0.0, -r), (s, r / 2.0), (-s, r / 2.0)];
                (0..3).all(|i| {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % 3];
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0
                })
            }
        }
    }

    fn in_bounds(&self, size: usize) -> bool {
        let r = self.radius as i32;
        let hi = size as i32 - 1;
        self.cx - r >= 0 && self.cy - r >= 0 && self.cx + r <= hi && self.cy + r <= hi
    }

    fn overlaps(&self, other: &ShapeMeta) -> bool {
        let (dx, dy) = ((self.cx - other.cx) as i64, (self.cy - other.cy) as i64);
        let rsum = (self.radius + other.radius) as i64;
        dx * dx + dy * dy <= rsum * rsum
    }
}

/// Rasterizes shapes over the background without anti-aliasing.
pub fn render(meta: &[ShapeMeta]) -> Result<Image> {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND);
    for (n, s) in meta.iter().enumerate() {
        if !s.in_bounds(IMAGE_SIZE) {
            return Err(Error::Input(format!("shape {n} at ({}, {}) r={} leaves the image", s.cx, s.cy, s.radius)));
        }
        let color = *PALETTE
            .get(s.color)
            .ok_or_else(|| Error::Input(format!("shape {n}: color index {} outside palette", s.color)))?;
        let r = s.radius as i32;
        for y in s.cy - r..=s.cy + r {
            for x in s.cx - r..=s.cx + r {
                if s.contains(x, y) {
                    img.set_pixel(x as usize, y as usize, color);
                }
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Caption,
    Count,
    Exist,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Caption, Task::Count, Task::Exist];

    pub fn label(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Count => "count",
            Task::Exist => "exist",
        }
    }

    /// Decode budget: room for the answer plus end-of-sequence.
    pub fn max_new(self) -> usize {
        match self {
            Task::Caption => 6,
            Task::Count | Task::Exist => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train or eval)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub task: Task,
    pub image: Image,
    pub question: String,
    pub answer: String,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub meta: Vec<ShapeMeta>,
}

impl SyntheticSample {
    /// `[bos] + question`, the decoding prompt.
    pub fn prompt(&self, tok: &Tokenizer) -> Vec<usize> {
        std::iter::once(tok.bos()).chain(self.question_ids.iter().copied()).collect()
    }

    /// `[bos] + question + answer`, the training text.
    pub fn text(&self, tok: &Tokenizer) -> Vec<usize> {
        let mut t = self.prompt(tok);
        t.extend_from_slice(&self.answer_ids);
        t
    }
}

/// Number of shapes of `kind` (any color).
pub fn count_kind(meta: &[ShapeMeta], kind: ShapeKind) -> usize {
    meta.iter().filter(|s| s.kind == kind).count()
}

fn has_pair(meta: &[ShapeMeta], color: usize, kind: ShapeKind) -> bool {
    meta.iter().any(|s| s.color == color && s.kind == kind)
}

/// Most frequent (color, kind) group; ties go to the lowest (kind, color).
pub fn dominant_group(meta: &[ShapeMeta]) -> Option<(usize, ShapeKind, usize)> {
    let mut best: Option<(usize, ShapeKind, usize)> = None;
    for kind in ShapeKind::ALL {
        for color in 0..PALETTE.len() {
            let n = meta.iter().filter(|s| s.kind == kind && s.color == color).count();
            if n > 0 && best.is_none_or(|(_, _, m)| n > m) {
                best = Some((color, kind, n));
            }
        }
    }
    best
}

fn place_scene(rng: &mut Rng) -> Option<Vec<ShapeMeta>> {
    let n = MIN_SHAPES + rng.below(MAX_SHAPES - MIN_SHAPES + 1);
    let mut meta: Vec<ShapeMeta> = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = ShapeKind::ALL[rng.below(3)];
        let color = rng.below(PALETTE.len());
        let radius = MIN_RADIUS + rng.below((MAX_RADIUS - MIN_RADIUS + 1) as usize) as u32;
        let r = radius as usize;
        let placed = (0..PLACEMENT_RETRIES).find_map(|_| {
            let cand = ShapeMeta {
                kind,
                color,
                cx: (r + rng.below(IMAGE_SIZE - 2 * r)) as i32,
                cy: (r + rng.below(IMAGE_SIZE - 2 * r)) as i32,
                radius,
            };
            (!meta.iter().any(|m| m.overlaps(&cand))).then_some(cand)
        })?;
        meta.push(placed);
    }
    Some(meta)
}

fn scene(seed: u64, split: Split, index: usize) -> Vec<ShapeMeta> {
    (0u64..)
        .find_map(|attempt| {
            let mut rng = Rng::derive(seed, &format!("{}/{index}/{attempt}", split.label()));
            place_scene(&mut rng)
        })
        .expect("unbounded retry")
}

fn make_sample(seed: u64, split: Split, index: usize, tok: &Tokenizer) -> Result<SyntheticSample> {
    let meta = scene(seed, split, index);
    let image = render(&meta)?;
    let mut rng = Rng::derive(seed, &format!("{}/{index}/question", split.label()));
    let task = Task::ALL[index % 3];
    let (question, answer) = match task {
        Task::Caption => {
            let (color, kind, n) = dominant_group(&meta).expect("scenes hold at least one shape");
            (String::new(), format!("there are {n} {} {}", COLORS[color], kind.word()))
        }
        Task::Count => {
            let kind = ShapeKind::ALL[rng.below(3)];
            (format!("how many {} ?", kind.word()), count_kind(&meta, kind).to_string())
        }
        Task::Exist => {
            let want_yes = (index / 3).is_multiple_of(2);
            let pairs: Vec<(usize, ShapeKind)> = ShapeKind::ALL
                .iter()
                .flat_map(|&k| (0..PALETTE.len()).map(move |c| (c, k)))
                .filter(|&(c, k)| has_pair(&meta, c, k) == want_yes)
                .collect();
            let (color, kind) = pairs[rng.below(pairs.len())];
            (
                format!("is there a {} {} ?", COLORS[color], kind.word()),
                if want_yes { "yes" } else { "no" }.to_string(),
            )
        }
    };
    Ok(SyntheticSample {
        index,
        task,
        image,
        question_ids: tok.encode(&question)?,
        answer_ids: tok.encode(&answer)?,
        question,
        answer,
        meta,
    })
}

/// `n` samples, a pure function of `(seed, n, split)`. Tasks cycle
/// caption, count, exist; existence answers alternate yes and no.
pub fn generate_dataset(seed: u64, n: usize, split: Split) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    let tok = Tokenizer::synthetic();
    (0..n).map(|i| make_sample(seed, split, i, &tok)).collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    index: usize,
    task: Task,
    question: String,
    answer: String,
    question_ids: Vec<usize>,
    answer_ids: Vec<usize>,
    meta: Vec<ShapeMeta>,
    width: usize,
    height: usize,
    /// RGB bytes, row-major, hex encoded.
    pixels: String,
}

fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn from_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// One JSON object per line.
pub fn save_jsonl(samples: &[SyntheticSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = Record {
            index: s.index,
            task: s.task,
            question: s.question.clone(),
            answer: s.answer.clone(),
            question_ids: s.question_ids.clone(),
            answer_ids: s.answer_ids.clone(),
            meta: s.meta.clone(),
            width: s.image.width,
            height: s.image.height,
            pixels: to_hex(&s.image.pixels),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Input(format!("{}:{}: {msg}", path.display(), n + 1));
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let pixels = from_hex(&rec.pixels).ok_or_else(|| bad("pixels are not valid hex".into()))?;
        if pixels.len() != rec.width * rec.height * 3 {
            return Err(bad(format!("{} pixel bytes for a {}×{} image", pixels.len(), rec.width, rec.height)));
        }
        out.push(SyntheticSample {
            index: rec.index,
            task: rec.task,
            image: Image {
                width: rec.width,
                height: rec.height,
                pixels,
            },
            question: rec.question,
            answer: rec.answer,
            question_ids: rec.question_ids,
            answer_ids: rec.answer_ids,
            meta: rec.meta,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split_disjoint() {
        let a = generate_dataset(7, 30, Split::Train).unwrap();
        let b = generate_dataset(7, 30, Split::Train).unwrap();
        assert_eq!(a, b);
        let e = generate_dataset(7, 30, Split::Eval).unwrap();
        assert!(a.iter().zip(&e).all(|(x, y)| x.image != y.image));
        assert!(generate_dataset(7, 0, Split::Train).is_err());
    }

    #[test]
    fn scene_invariants() {
        for s in generate_dataset(3, 200, Split::Train).unwrap() {
            assert!((MIN_SHAPES..=MAX_SHAPES).contains(&s.meta.len()));
            for (i, a) in s.meta.iter().enumerate() {
                assert!(a.in_bounds(IMAGE_SIZE));
                for b in &s.meta[i + 1..] {
                    let d2 = ((a.cx - b.cx).pow(2) + (a.cy - b.cy).pow(2)) as f64;
                    assert!(d2.sqrt() > (a.radius + b.radius) as f64);
                }
            }
            assert_eq!(render(&s.meta).unwrap(), s.image);
        }
    }

    #[test]
    fn counts_match_recount() {
        for s in generate_dataset(11, 300, Split::Eval).unwrap() {
            if s.task != Task::Count {
                continue;
            }
            let word = s.question.split_whitespace().nth(2).unwrap();
            let mut n = 0;
            for m in &s.meta {
                if SHAPES[m.kind as usize] == word {
                    n += 1;
                }
            }
            assert_eq!(s.answer, n.to_string());
        }
    }

    #[test]
    fn exist_balanced_and_truthful() {
        let ds = generate_dataset(5, 120, Split::Train).unwrap();
        let exist: Vec<_> = ds.iter().filter(|s| s.task == Task::Exist).collect();
        assert_eq!(exist.len() % 2, 0);
        assert_eq!(exist.iter().filter(|s| s.answer == "yes").count(), exist.len() / 2);
        for s in exist {
            let w: Vec<&str> = s.question.split_whitespace().collect();
            let present = s.meta.iter().any(|m| COLORS[m.color] == w[3] && m.kind.word() == w[4]);
            assert_eq!(present, s.answer == "yes");
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render(&[]).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn disc_area_bracket() {
        let c = ShapeMeta {
            kind: ShapeKind::Circle,
            color: 0,
            cx: 16,
            cy: 16,
            radius: 8,
        };
        let img = render(&[c]).unwrap();
        let n = img.pixels.chunks(3).filter(|p| *p != BACKGROUND).count() as f64;
        let pi = std::f64::consts::PI;
        assert!(n >= pi * 49.0 && n <= pi * 81.0, "{n}");
    }

    #[test]
    fn disjoint_shapes_have_disjoint_pixels() {
        let a = ShapeMeta {
            kind: ShapeKind::Square,
            color: 1,
            cx: 8,
            cy: 8,
            radius: 5,
        };
        let b = ShapeMeta {
            kind: ShapeKind::Triangle,
            color: 2,
            cx: 19,
            cy: 8,
            radius: 5,
        };
        let ia = render(&[a]).unwrap();
        let ib = render(&[b]).unwrap();
        let both = ia
            .pixels
            .chunks(3)
            .zip(ib.pixels.chunks(3))
            .filter(|(p, q)| *p != BACKGROUND && *q != BACKGROUND)
            .count();
        assert_eq!(both, 0);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let s = ShapeMeta {
            kind: ShapeKind::Circle,
            color: 0,
            cx: 2,
            cy: 16,
            radius: 4,
        };
        assert!(render(&[s]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate_dataset(1, 9, Split::Eval).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_jsonl(&ds, &p).unwrap();
        assert_eq!(load_jsonl(&p).unwrap(), ds);
        std::fs::write(&p, "{not json\n").unwrap();
        assert!(load_jsonl(&p).is_err());
    }
}
