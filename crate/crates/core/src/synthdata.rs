//! Synthetic grounding corpus: scenes of attribute-typed rectangles, feature
//! grids that encode those attributes, and templated multi-phrase descriptions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorConfig, BBox};
use crate::tensor::{Rng, Stream};

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];
pub const SHAPES: [&str; 6] = ["square", "circle", "triangle", "star", "cross", "diamond"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];

const GLUE: [&str; 22] = [
    "the", "a", "in", "image", "object", "one", "there", "is", "near", "left", "right", "of",
    "top", "bottom", "with", "and", "next", "to", "an", "this", "that", "thing",
];

/// Attribute channels: colors, then shapes, then sizes; the remainder is noise only.
pub const ATTR_CHANNELS: usize = COLORS.len() + SHAPES.len() + SIZES.len();
pub const NOISE_CHANNELS: usize = 7;
pub const FEATURE_DIM: usize = ATTR_CHANNELS + NOISE_CHANNELS;
pub const NOISE_STD: f64 = 0.1;
/// Longest allowed phrase, in tokens.
pub const MAX_QUERY_LEN: usize = 19;

/// Closed vocabulary. Id 0 is padding.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens = vec!["<pad>"];
        tokens.extend(GLUE);
        tokens.extend(SIZES);
        tokens.extend(COLORS);
        tokens.extend(SHAPES);
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.tokens
            .iter()
            .position(|&t| t == word)
            .map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        if id == 0 {
            return None;
        }
        self.tokens.get(id as usize).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Contract(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| self.word(i).ok_or(Error::UnknownToken(i)))
            .collect();
        Ok(words?.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Color(pub u8);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape(pub u8);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SizeClass(pub u8);

macro_rules! named_attr {
    ($ty:ident, $names:ident) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                $names[self.0 as usize]
            }

            pub fn parse(s: &str) -> Option<Self> {
                $names.iter().position(|&n| n == s).map(|i| $ty(i as u8))
            }

            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(
                &self,
                s: S,
            ) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(
                d: D,
            ) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $ty::parse(&s).ok_or_else(|| {
                    serde::de::Error::custom(format!("unknown {} `{s}`", stringify!($ty)))
                })
            }
        }
    };
}

named_attr!(Color, COLORS);
named_attr!(Shape, SHAPES);
named_attr!(SizeClass, SIZES);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub color: Color,
    pub shape: Shape,
    pub size: SizeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    /// `[width, height]` in pixels.
    pub dims: [u32; 2],
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn width(&self) -> f64 {
        self.dims[0] as f64
    }

    pub fn height(&self) -> f64 {
        self.dims[1] as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<u32>,
    pub text: String,
    pub gt_box: BBox,
}

/// One scene with its description; every object is mentioned by exactly one phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingExample {
    pub scene: Scene,
    pub phrases: Vec<Phrase>,
}

impl GroundingExample {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.phrases.iter().map(|p| p.gt_box).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 8:1:1 assignment by scene id.
    pub fn of(scene_id: u64) -> Split {
        match scene_id % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub img_w: u32,
    pub img_h: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_pair_iou: f64,
    pub max_tries: usize,
    /// `[lo, hi)` side-length ranges (square-root of area) per size class.
    pub size_ranges: [[f64; 2]; 3],
    /// Aspect ratios `w / h` are log-uniform in `[1 / max_aspect, max_aspect]`.
    pub max_aspect: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            img_w: 128,
            img_h: 128,
            min_objects: 2,
            max_objects: 5,
            max_pair_iou: 0.3,
            max_tries: 1000,
            size_ranges: [[16.0, 22.0], [26.0, 36.0], [40.0, 52.0]],
            max_aspect: 2.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("object count range is empty".into()));
        }
        if self.max_objects > COLORS.len() * SHAPES.len() {
            return Err(Error::Config("more objects than attribute pairs".into()));
        }
        if !(self.max_aspect >= 1.0) || !(0.0..=1.0).contains(&self.max_pair_iou) {
            return Err(Error::Config("invalid aspect or overlap bound".into()));
        }
        for [lo, hi] in self.size_ranges {
            let max_side = hi * self.max_aspect.sqrt();
            if !(lo > 0.0 && hi > lo) || max_side >= self.img_w.min(self.img_h) as f64 {
                return Err(Error::Config(format!(
                    "size range [{lo}, {hi}) does not fit the image"
                )));
            }
        }
        Ok(())
    }
}

/// Rejection-samples a scene whose objects overlap pairwise below the configured
/// IoU and whose (color, shape) pairs are unique.
pub fn generate_scene(rng: &mut Rng, config: &SceneConfig, id: u64) -> Result<Scene> {
    config.validate()?;
    let span = config.max_objects - config.min_objects + 1;
    let n = config.min_objects + rng.below(span);
    let (img_w, img_h) = (config.img_w as f64, config.img_h as f64);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut tries = 0;
    while objects.len() < n {
        tries += 1;
        if tries > config.max_tries {
            return Err(Error::Generation(format!(
                "could not place {n} objects within {} tries",
                config.max_tries
            )));
        }
        let color = Color(rng.below(COLORS.len()) as u8);
        let shape = Shape(rng.below(SHAPES.len()) as u8);
        let size = SizeClass(rng.below(SIZES.len()) as u8);
        let [lo, hi] = config.size_ranges[size.index()];
        let side = rng.uniform(lo, hi);
        let log_aspect = rng.uniform(-config.max_aspect.ln(), config.max_aspect.ln());
        let root = (0.5 * log_aspect).exp();
        let (w, h) = (side * root, side / root);
        let x1 = rng.uniform(0.0, img_w - w);
        let y1 = rng.uniform(0.0, img_h - h);
        let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
        if objects.iter().any(|o| o.color == color && o.shape == shape) {
            continue;
        }
        if objects
            .iter()
            .any(|o| iou(&o.bbox, &bbox) >= config.max_pair_iou)
        {
            continue;
        }
        objects.push(SceneObject {
            bbox,
            color,
            shape,
            size,
        });
    }
    Ok(Scene {
        id,
        dims: [config.img_w, config.img_h],
        objects,
    })
}

/// Per-cell feature map standing in for a convolutional backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_feat: usize,
    /// Pixels per cell.
    pub stride: f64,
    /// Row-major `[grid_h, grid_w, d_feat]`.
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        d_feat: usize,
        stride: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != grid_h * grid_w * d_feat {
            return Err(Error::shape(
                "feature_grid",
                format!("{} values for {grid_h}x{grid_w}x{d_feat}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature_grid" });
        }
        Ok(FeatureGrid {
            grid_h,
            grid_w,
            d_feat,
            stride,
            data,
        })
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.grid_w + c) * self.d_feat;
        &self.data[i..i + self.d_feat]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.grid_w + c) * self.d_feat;
        &mut self.data[i..i + self.d_feat]
    }

    pub fn img_w(&self) -> f64 {
        self.grid_w as f64 * self.stride
    }

    pub fn img_h(&self) -> f64 {
        self.grid_h as f64 * self.stride
    }
}

/// Cell stride used when featurizing scenes.
pub const STRIDE: f64 = 8.0;

/// Encodes a scene as a grid: a cell covered at least half by an object carries
/// that object's one-hot color, shape and size; every channel gets Gaussian
/// noise (std [`NOISE_STD`]) drawn from the scene's data stream.
pub fn featurize(scene: &Scene) -> FeatureGrid {
    let grid_w = (scene.width() / STRIDE).round() as usize;
    let grid_h = (scene.height() / STRIDE).round() as usize;
    let mut rng = Rng::stream(scene.id, Stream::Data).substream(0xFEA7);
    let mut data = Vec::with_capacity(grid_h * grid_w * FEATURE_DIM);
    let cell_area = STRIDE * STRIDE;
    for r in 0..grid_h {
        for c in 0..grid_w {
            let cell = BBox::from_center(
                (c as f64 + 0.5) * STRIDE,
                (r as f64 + 0.5) * STRIDE,
                STRIDE,
                STRIDE,
            );
            let mut feat = [0.0; FEATURE_DIM];
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in scene.objects.iter().enumerate() {
                let cover = cell.intersection(&o.bbox) / cell_area;
                if cover >= 0.5 && best.is_none_or(|(_, b)| cover > b) {
                    best = Some((i, cover));
                }
            }
            if let Some((i, _)) = best {
                let o = &scene.objects[i];
                feat[o.color.index()] = 1.0;
                feat[COLORS.len() + o.shape.index()] = 1.0;
                feat[COLORS.len() + SHAPES.len() + o.size.index()] = 1.0;
            }
            data.extend(feat.iter().map(|&v| v + NOISE_STD * rng.normal()));
        }
    }
    FeatureGrid {
        grid_h,
        grid_w,
        d_feat: FEATURE_DIM,
        stride: STRIDE,
        data,
    }
}

const TEMPLATES: [&[Slot]; 5] = [
    &[Slot::Word("the"), Slot::Size, Slot::Color, Slot::Shape],
    &[Slot::Word("a"), Slot::Size, Slot::Color, Slot::Shape],
    &[Slot::Word("the"), Slot::Color, Slot::Shape],
    &[
        Slot::Word("a"),
        Slot::Color,
        Slot::Shape,
        Slot::Word("in"),
        Slot::Word("the"),
        Slot::Word("image"),
    ],
    &[
        Slot::Word("the"),
        Slot::Size,
        Slot::Color,
        Slot::Shape,
        Slot::Word("object"),
    ],
];

#[derive(Debug, Clone, Copy)]
enum Slot {
    Word(&'static str),
    Size,
    Color,
    Shape,
}

/// One phrase per object, with a template drawn from `rng`; phrase order is shuffled.
pub fn render_description(scene: &Scene, rng: &mut Rng) -> Vec<Phrase> {
    let vocab = Vocab::new();
    let mut phrases: Vec<Phrase> = scene
        .objects
        .iter()
        .map(|o| {
            let template = TEMPLATES[rng.below(TEMPLATES.len())];
            let words: Vec<&str> = template
                .iter()
                .map(|s| match s {
                    Slot::Word(w) => w,
                    Slot::Size => o.size.name(),
                    Slot::Color => o.color.name(),
                    Slot::Shape => o.shape.name(),
                })
                .collect();
            let text = words.join(" ");
            let tokens = vocab.encode(&text).expect("templates use vocabulary words");
            Phrase {
                tokens,
                text,
                gt_box: o.bbox,
            }
        })
        .collect();
    rng.shuffle(&mut phrases);
    phrases
}

/// Attributes named in a phrase (size may be omitted by the template).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhraseAttributes {
    pub color: Color,
    pub shape: Shape,
    pub size: Option<SizeClass>,
}

pub fn parse_phrase(tokens: &[u32]) -> Result<PhraseAttributes> {
    let vocab = Vocab::new();
    let (mut color, mut shape, mut size) = (None, None, None);
    for &t in tokens {
        let w = vocab.word(t).ok_or(Error::UnknownToken(t))?;
        color = color.or(Color::parse(w));
        shape = shape.or(Shape::parse(w));
        size = size.or(SizeClass::parse(w));
    }
    match (color, shape) {
        (Some(color), Some(shape)) => Ok(PhraseAttributes { color, shape, size }),
        _ => Err(Error::Contract("phrase names no color/shape pair".into())),
    }
}

/// Index of the object a phrase refers to.
pub fn resolve_phrase(scene: &Scene, tokens: &[u32]) -> Result<usize> {
    let attrs = parse_phrase(tokens)?;
    let mut hits = scene.objects.iter().enumerate().filter(|(_, o)| {
        o.color == attrs.color && o.shape == attrs.shape && attrs.size.is_none_or(|s| s == o.size)
    });
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => Ok(i),
        _ => Err(Error::Contract(
            "phrase does not identify a unique object".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub scene: SceneConfig,
    /// Minimum fraction of ground-truth boxes covered (IoU > 0.5) by some raw anchor.
    pub min_anchor_coverage: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            scene: SceneConfig::default(),
            min_anchor_coverage: 0.95,
        }
    }
}

/// Builds `n` examples; example `i` depends only on `(seed, i)`.
pub fn generate_corpus(
    seed: u64,
    n: usize,
    config: &CorpusConfig,
    anchors: &AnchorConfig,
) -> Result<Vec<GroundingExample>> {
    let base = Rng::stream(seed, Stream::Data);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.substream(i as u64);
        let id = rng.next_u64();
        let scene = generate_scene(&mut rng, &config.scene, id)?;
        let phrases = render_description(&scene, &mut rng);
        out.push(GroundingExample { scene, phrases });
    }
    if n > 0 {
        let coverage = anchor_coverage(&out, anchors)?;
        if coverage <= config.min_anchor_coverage {
            return Err(Error::Generation(format!(
                "raw anchors cover only {:.1}% of objects",
                100.0 * coverage
            )));
        }
    }
    Ok(out)
}

/// Fraction of ground-truth boxes with some anchor at IoU > 0.5.
pub fn anchor_coverage(examples: &[GroundingExample], anchors: &AnchorConfig) -> Result<f64> {
    let mut total = 0usize;
    let mut covered = 0usize;
    let mut cache: Option<([u32; 2], Vec<BBox>)> = None;
    for ex in examples {
        let boxes = match &cache {
            Some((dims, b)) if *dims == ex.scene.dims => b,
            _ => {
                let b = anchors.anchors(ex.scene.width(), ex.scene.height())?;
                &cache.insert((ex.scene.dims, b)).1
            }
        };
        for g in ex.gt_boxes() {
            total += 1;
            if boxes.iter().any(|a| iou(a, &g) > 0.5) {
                covered += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no ground-truth boxes".into()));
    }
    Ok(covered as f64 / total as f64)
}

pub fn write_corpus(examples: &[GroundingExample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<GroundingExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: GroundingExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64) -> Scene {
        generate_scene(&mut Rng::new(seed), &SceneConfig::default(), seed).unwrap()
    }

    #[test]
    fn vocab_is_closed_and_small() {
        let v = Vocab::new();
        assert_eq!(v.len(), 40);
        assert_eq!(v.word(0), None);
        assert_eq!(
            v.decode(&v.encode("the small red star").unwrap()).unwrap(),
            "the small red star"
        );
        assert!(matches!(v.decode(&[99]), Err(Error::UnknownToken(99))));
    }

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(scene(7), scene(7));
    }

    #[test]
    fn scene_invariants() {
        for seed in 0..200 {
            let s = scene(seed);
            assert!((2..=5).contains(&s.objects.len()));
            for (i, a) in s.objects.iter().enumerate() {
                assert!(a.bbox.is_within(128.0, 128.0));
                for b in &s.objects[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) < 0.3);
                    assert!((a.color, a.shape) != (b.color, b.shape));
                }
            }
        }
    }

    #[test]
    fn overcrowded_config_fails() {
        let cfg = SceneConfig {
            min_objects: 30,
            max_objects: 30,
            max_tries: 50,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&mut Rng::new(1), &cfg, 1),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn featurize_marks_covered_cells() {
        let s = Scene {
            id: 3,
            dims: [128, 128],
            objects: vec![SceneObject {
                bbox: BBox::new(16.0, 16.0, 48.0, 48.0).unwrap(),
                color: Color::parse("red").unwrap(),
                shape: Shape::parse("square").unwrap(),
                size: SizeClass(1),
            }],
        };
        let g = featurize(&s);
        assert_eq!((g.grid_h, g.grid_w, g.d_feat), (16, 16, 24));
        let inside = g.cell(3, 3);
        assert!((inside[0] - 1.0).abs() < 0.5);
        assert!((inside[COLORS.len()] - 1.0).abs() < 0.5);
        assert_eq!(g, featurize(&s));
    }

    #[test]
    fn descriptions_resolve_to_their_objects() {
        for seed in 0..50 {
            let s = scene(seed);
            let phrases = render_description(&s, &mut Rng::new(seed + 1000));
            assert_eq!(phrases.len(), s.objects.len());
            for (i, p) in phrases.iter().enumerate() {
                let obj = resolve_phrase(&s, &p.tokens).unwrap();
                assert_eq!(s.objects[obj].bbox, p.gt_box);
                assert!(p.tokens.len() <= MAX_QUERY_LEN);
                for q in &phrases[i + 1..] {
                    assert_ne!(p.text, q.text);
                }
            }
        }
    }

    #[test]
    fn split_proportions() {
        let mut counts = [0usize; 3];
        let mut rng = Rng::new(4);
        for _ in 0..10_000 {
            match Split::of(rng.next_u64()) {
                Split::Train => counts[0] += 1,
                Split::Val => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        assert!((counts[0] as f64 / 10_000.0 - 0.8).abs() < 0.02);
        assert!((counts[2] as f64 / 10_000.0 - 0.1).abs() < 0.02);
    }
}
