//! Procedural paired image–report corpus with exact labels and boxes, and
//! the image/text augmentations applied during pretraining.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::BoxAnnotation;
use crate::patching::Image;
use crate::pgm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Disc,
    Square,
    Ring,
    Cross,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Disc,
        ObjectClass::Square,
        ObjectClass::Ring,
        ObjectClass::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Disc => "disc",
            ObjectClass::Square => "square",
            ObjectClass::Ring => "ring",
            ObjectClass::Cross => "cross",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One cell of the 3×3 placement grid, row-major from the upper left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region(pub u8);

impl Region {
    pub const NAMES: [&'static str; 9] = [
        "upper left",
        "upper",
        "upper right",
        "left",
        "center",
        "right",
        "lower left",
        "lower",
        "lower right",
    ];

    pub fn all() -> Vec<Region> {
        (0..9).map(Region).collect()
    }

    pub fn center() -> Region {
        Region(4)
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.0 as usize]
    }

    pub fn row(self) -> usize {
        self.0 as usize / 3
    }

    pub fn col(self) -> usize {
        self.0 as usize % 3
    }

    /// Pixel bounds `[y0, y1) × [x0, x1)` of this cell in a `side`-pixel image.
    pub fn bounds(self, side: usize) -> (usize, usize, usize, usize) {
        let edge = |k: usize| k * side / 3;
        (edge(self.row()), edge(self.row() + 1), edge(self.col()), edge(self.col() + 1))
    }
}

/// Parameters of the procedural scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_side: usize,
    /// Cells objects may be placed in; each object takes its own cell.
    pub regions: Vec<Region>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-extent of an object in pixels, inclusive range.
    pub min_half_extent: usize,
    pub max_half_extent: usize,
    pub object_intensity: (f64, f64),
    pub background_intensity: (f64, f64),
    pub noise_sigma: f64,
    /// Chance that a report ends with a negative finding naming an absent class.
    pub negative_probability: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_side: 64,
            regions: Region::all(),
            min_objects: 1,
            max_objects: 2,
            min_half_extent: 4,
            max_half_extent: 7,
            object_intensity: (0.65, 0.95),
            background_intensity: (0.1, 0.3),
            noise_sigma: 0.05,
            negative_probability: 0.5,
        }
    }
}

impl SceneSpec {
    /// Single objects confined to the central cell.
    pub fn centered() -> Self {
        Self {
            regions: vec![Region::center()],
            min_objects: 1,
            max_objects: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Spec("no placement regions".into()));
        }
        if self.regions.iter().any(|r| r.0 >= 9) {
            return Err(Error::Spec("region index outside the 3×3 grid".into()));
        }
        let mut distinct = self.regions.clone();
        distinct.sort_by_key(|r| r.0);
        distinct.dedup();
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Spec(format!(
                "objects per image range {}..={} is empty or zero",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > distinct.len() {
            return Err(Error::Spec(format!(
                "{} objects per image exceed the {} available regions",
                self.max_objects,
                distinct.len()
            )));
        }
        let cell = self.image_side / 3;
        if self.min_half_extent < 2 || self.min_half_extent > self.max_half_extent {
            return Err(Error::Spec("invalid object size range".into()));
        }
        if 2 * self.max_half_extent + 1 > cell {
            return Err(Error::Spec(format!(
                "objects of half-extent {} do not fit {}-pixel regions",
                self.max_half_extent, cell
            )));
        }
        let (lo, hi) = self.object_intensity;
        let (blo, bhi) = self.background_intensity;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || !(0.0..=1.0).contains(&blo) || !(blo..=1.0).contains(&bhi) {
            return Err(Error::Spec("intensity ranges must be ordered within [0, 1]".into()));
        }
        if bhi >= lo {
            return Err(Error::Spec("objects must be brighter than the background".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("noise sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_probability) {
            return Err(Error::Spec("negative probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub class: ObjectClass,
    pub region: Region,
    pub bbox: BoxAnnotation,
    pub phrase: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// Pixels in `[0, 1]`, quantized to 8-bit levels.
    pub image: Image,
    pub report: String,
    /// Multi-hot over [`ObjectClass::ALL`].
    pub labels: [bool; 4],
    pub objects: Vec<PlacedObject>,
}

impl PairedSample {
    pub fn boxes(&self) -> Vec<BoxAnnotation> {
        self.objects.iter().map(|o| o.bbox.clone()).collect()
    }

    pub fn phrases(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.phrase.clone()).collect()
    }
}

pub fn sentence(class: ObjectClass, region: Region) -> String {
    format!("There is a {} in the {} region.", class.name(), region.name())
}

pub fn negative_sentence(class: ObjectClass) -> String {
    format!("There is no {}.", class.name())
}

/// Every word the report grammar and the zero-shot prompts can produce.
pub fn grammar_words() -> Vec<String> {
    let mut words: Vec<String> = ["there", "is", "a", "no", "in", "the", "region", "."]
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(ObjectClass::ALL.iter().map(|c| c.name().to_string()));
    for name in Region::NAMES {
        for w in name.split(' ') {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    }
    words
}

fn covers(class: ObjectClass, dy: i64, dx: i64, r: i64) -> bool {
    let d2 = dy * dy + dx * dx;
    match class {
        ObjectClass::Disc => d2 <= r * r,
        ObjectClass::Square => dy.abs() <= r && dx.abs() <= r,
        ObjectClass::Ring => d2 <= r * r && d2 > (r - 2) * (r - 2),
        ObjectClass::Cross => (dy.abs() <= 1 && dx.abs() <= r) || (dx.abs() <= 1 && dy.abs() <= r),
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box–Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates sample `index` of the corpus identified by `seed`.
pub fn generate_sample(spec: &SceneSpec, seed: u64, index: u64) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let side = spec.image_side;
    let n_obj = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut cells = spec.regions.clone();
    cells.sort_by_key(|r| r.0);
    cells.dedup();
    let chosen: Vec<Region> = cells.choose_multiple(&mut rng, n_obj).copied().collect();

    let background = rng.random_range(spec.background_intensity.0..=spec.background_intensity.1);
    let mut clean = vec![background; side * side];
    let mut objects = Vec::with_capacity(n_obj);
    let mut labels = [false; 4];
    for region in chosen {
        let class = ObjectClass::ALL[rng.random_range(0..4)];
        let r = rng.random_range(spec.min_half_extent..=spec.max_half_extent);
        let intensity = rng.random_range(spec.object_intensity.0..=spec.object_intensity.1);
        let (y0, y1, x0, x1) = region.bounds(side);
        let cy = rng.random_range(y0 + r..y1 - r);
        let cx = rng.random_range(x0 + r..x1 - r);
        let (mut ymin, mut ymax, mut xmin, mut xmax) = (usize::MAX, 0, usize::MAX, 0);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if covers(class, y as i64 - cy as i64, x as i64 - cx as i64, r as i64) {
                    clean[y * side + x] = intensity;
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                }
            }
        }
        labels[class.index()] = true;
        objects.push(PlacedObject {
            class,
            region,
            bbox: BoxAnnotation {
                x: xmin,
                y: ymin,
                width: xmax - xmin + 1,
                height: ymax - ymin + 1,
                label: class.name().to_string(),
            },
            phrase: sentence(class, region),
        });
    }
    let pixels = clean
        .iter()
        .map(|&v| quantize(v + spec.noise_sigma * gaussian(&mut rng)))
        .collect();
    let mut sentences: Vec<String> = objects.iter().map(|o| o.phrase.clone()).collect();
    let absent: Vec<ObjectClass> = ObjectClass::ALL.iter().copied().filter(|c| !labels[c.index()]).collect();
    if !absent.is_empty() && rng.random::<f64>() < spec.negative_probability {
        sentences.push(negative_sentence(absent[rng.random_range(0..absent.len())]));
    }
    let report = sentences.join(" ");
    PairedSample {
        image: Image::new(side, side, pixels).expect("square image"),
        report,
        labels,
        objects,
    }
}

/// Deterministic corpus; sample `i` depends only on `(spec, seed, i)`.
pub fn generate_corpus(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::Spec("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    Ok((0..n as u64).map(|i| generate_sample(spec, seed, i)).collect())
}

/// Augmentation constants; normalization statistics default to the
/// chest-radiograph values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub mean: f64,
    pub std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_rotation_deg: 20.0,
            scale_range: (0.8, 1.2),
            mean: 0.4978,
            std: 0.2449,
        }
    }
}

/// One random draw of the geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        angle_deg: 0.0,
        scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_probability;
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            flip,
            angle_deg,
            scale,
        }
    }
}

fn sample_clamped(img: &Image, y: f64, x: f64) -> f64 {
    let maxy = (img.height - 1) as f64;
    let maxx = (img.width - 1) as f64;
    let y = y.clamp(0.0, maxy);
    let x = x.clamp(0.0, maxx);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img.get(y0, x0) + fx * (img.get(y0, x1) - img.get(y0, x0));
    let bottom = img.get(y1, x0) + fx * (img.get(y1, x1) - img.get(y1, x0));
    top + fy * (bottom - top)
}

/// Applies flip, rotation and scale about the image centre (bilinear,
/// edge-replicating), then normalizes with `(x − mean) / std`.
pub fn apply_augment(image: &Image, draw: AugmentDraw, cfg: &AugmentConfig) -> Image {
    let cy = (image.height as f64 - 1.0) / 2.0;
    let cx = (image.width as f64 - 1.0) / 2.0;
    let theta = draw.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = Vec::with_capacity(image.pixels.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let v = y as f64 - cy;
            let u = x as f64 - cx;
            // inverse rotation and scale maps output to source coordinates
            let su = (cos * u + sin * v) / draw.scale;
            let sv = (-sin * u + cos * v) / draw.scale;
            let mut sx = su + cx;
            let sy = sv + cy;
            if draw.flip {
                sx = (image.width as f64 - 1.0) - sx;
            }
            let value = if draw == AugmentDraw::IDENTITY {
                image.get(y, x)
            } else {
                sample_clamped(image, sy, sx)
            };
            out.push((value - cfg.mean) / cfg.std);
        }
    }
    Image::new(image.height, image.width, out).expect("same dims")
}

pub fn augment_image<R: Rng + ?Sized>(image: &Image, rng: &mut R, cfg: &AugmentConfig) -> Image {
    let draw = AugmentDraw::sample(cfg, rng);
    apply_augment(image, draw, cfg)
}

/// Swaps `left` and `right`, keeping region words true to a mirrored image.
pub fn mirror_report(report: &str) -> String {
    report
        .split(' ')
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            "left." => "right.",
            "right." => "left.",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalization only (evaluation path).
pub fn normalize_image(image: &Image, cfg: &AugmentConfig) -> Image {
    apply_augment(image, AugmentDraw::IDENTITY, cfg)
}

/// Splits a report into sentences, each keeping its terminating period.
pub fn split_sentences(report: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in report.chars() {
        cur.push(ch);
        if ch == '.' {
            let s = cur.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let rest = cur.trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Keeps a random nonempty subset of the sentences in random order.
pub fn augment_text<R: Rng + ?Sized>(report: &str, rng: &mut R) -> String {
    let mut sentences = split_sentences(report);
    if sentences.len() <= 1 {
        return sentences.pop().unwrap_or_default();
    }
    let k = sentences.len().min(63);
    let subset = rng.random_range(1u64..(1u64 << k));
    let mut kept: Vec<String> = sentences
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i >= k || subset >> i & 1 == 1)
        .map(|(_, s)| s)
        .collect();
    kept.shuffle(rng);
    kept.join(" ")
}

// ---------------------------------------------------------------------------
// On-disk corpus: JSON-lines manifest plus 8-bit PGM images.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub report: String,
    pub labels: Vec<u8>,
    pub boxes: Vec<BoxAnnotation>,
    pub phrases: Vec<String>,
}

/// Writes `samples` under `dir/<split>/` and appends them to
/// `dir/<split>.jsonl`. Returns the manifest path.
pub fn write_split(dir: &Path, split: &str, samples: &[PairedSample]) -> Result<PathBuf> {
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join(format!("{split}.jsonl"));
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("{split}/{i:05}.pgm");
        pgm::write_pgm8(&dir.join(&rel), &s.image)?;
        let rec = ManifestRecord {
            image: rel,
            report: s.report.clone(),
            labels: s.labels.iter().map(|&b| b as u8).collect(),
            boxes: s.boxes(),
            phrases: s.phrases(),
        };
        serde_json::to_writer(&mut out, &rec).expect("manifest record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

fn region_of_phrase(phrase: &str) -> Option<Region> {
    let start = phrase.find(" in the ")? + " in the ".len();
    let end = phrase.rfind(" region")?;
    let name = phrase.get(start..end)?;
    Region::NAMES
        .iter()
        .position(|&n| n == name)
        .map(|i| Region(i as u8))
}

/// Reads and validates a manifest; image paths resolve against its directory.
pub fn load_split(manifest: &Path) -> Result<Vec<PairedSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Input(format!("{}:{}: {msg}", manifest.display(), lineno + 1));
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.labels.len() != 4 || rec.labels.iter().any(|&l| l > 1) {
            return Err(bad("labels must be four 0/1 flags".into()));
        }
        if rec.boxes.len() != rec.phrases.len() || rec.boxes.is_empty() {
            return Err(bad("need one phrase per box and at least one box".into()));
        }
        if rec.report.trim().is_empty() {
            return Err(bad("empty report".into()));
        }
        let image = pgm::read_pgm(&base.join(&rec.image))?;
        let mut objects = Vec::new();
        for (b, phrase) in rec.boxes.iter().zip(&rec.phrases) {
            b.validate(image.height, image.width).map_err(|e| bad(e.to_string()))?;
            let class = ObjectClass::from_name(&b.label)
                .ok_or_else(|| bad(format!("unknown class `{}`", b.label)))?;
            let region = region_of_phrase(phrase)
                .ok_or_else(|| bad(format!("phrase without region: `{phrase}`")))?;
            objects.push(PlacedObject {
                class,
                region,
                bbox: b.clone(),
                phrase: phrase.clone(),
            });
        }
        let mut labels = [false; 4];
        for (slot, &l) in labels.iter_mut().zip(&rec.labels) {
            *slot = l == 1;
        }
        out.push(PairedSample {
            image,
            report: rec.report,
            labels,
            objects,
        });
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: empty manifest", manifest.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let spec = SceneSpec::default();
        assert_eq!(
            generate_corpus(&spec, 1, 7).unwrap(),
            generate_corpus(&spec, 1, 7).unwrap()
        );
        assert_ne!(generate_sample(&spec, 7, 0), generate_sample(&spec, 8, 0));
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let spec = SceneSpec::default();
        let corpus = generate_corpus(&spec, 10_000, 3).unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0;
        for s in &corpus {
            for o in &s.objects {
                counts[o.class.index()] += 1;
                total += 1;
            }
        }
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() <= 0.02, "class frequency {f}");
        }
    }

    #[test]
    fn boxes_are_brighter_inside() {
        let spec = SceneSpec::default();
        for s in generate_corpus(&spec, 300, 11).unwrap() {
            for b in s.boxes() {
                let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
                for y in 0..64 {
                    for x in 0..64 {
                        let v = s.image.get(y, x);
                        if b.contains(y, x) {
                            sin += v;
                            nin += 1;
                        } else {
                            sout += v;
                            nout += 1;
                        }
                    }
                }
                assert!(sin / nin as f64 > sout / nout as f64);
            }
        }
    }

    #[test]
    fn reports_name_every_object() {
        let mut negatives = 0;
        for s in generate_corpus(&SceneSpec::default(), 200, 5).unwrap() {
            let sentences = split_sentences(&s.report);
            let extra = sentences.len() - s.objects.len();
            assert!(extra <= 1 && sentences.len() <= 3);
            if extra == 1 {
                negatives += 1;
                let absent = ObjectClass::ALL.iter().filter(|c| !s.labels[c.index()]);
                assert!(absent.map(|&c| negative_sentence(c)).any(|n| &n == sentences.last().unwrap()));
            }
            for (sent, o) in sentences.iter().zip(&s.objects) {
                assert_eq!(sent, &sentence(o.class, o.region));
                let (y0, y1, x0, x1) = o.region.bounds(64);
                assert!(o.bbox.y >= y0 && o.bbox.y + o.bbox.height <= y1);
                assert!(o.bbox.x >= x0 && o.bbox.x + o.bbox.width <= x1);
            }
            assert!(s.labels.iter().any(|&l| l));
        }
        assert!((70..130).contains(&negatives), "{negatives}");
        let none = SceneSpec { negative_probability: 0.0, ..SceneSpec::default() };
        for s in generate_corpus(&none, 50, 5).unwrap() {
            assert_eq!(split_sentences(&s.report).len(), s.objects.len());
        }
    }

    #[test]
    fn too_many_objects_rejected() {
        let spec = SceneSpec {
            regions: vec![Region(0)],
            max_objects: 2,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_corpus(&spec, 5, 0), Err(Error::Spec(_))));
        assert!(matches!(
            generate_corpus(&SceneSpec::default(), 0, 0),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn identity_draw_only_normalizes() {
        let cfg = AugmentConfig::default();
        let s = generate_sample(&SceneSpec::default(), 1, 0);
        let out = apply_augment(&s.image, AugmentDraw::IDENTITY, &cfg);
        for (a, b) in out.pixels.iter().zip(&s.image.pixels) {
            assert_eq!(*a, (b - cfg.mean) / cfg.std);
        }
    }

    #[test]
    fn constant_image_stays_constant_under_affine() {
        let cfg = AugmentConfig::default();
        let img = Image::filled(16, 16, 0.6);
        let want = (0.6 - cfg.mean) / cfg.std;
        let draw = AugmentDraw {
            flip: true,
            angle_deg: 17.0,
            scale: 0.83,
        };
        assert!(apply_augment(&img, draw, &cfg)
            .pixels
            .iter()
            .all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn mirrored_reports_swap_sides() {
        let r = "There is a disc in the upper left region. There is a ring in the right region. There is no cross.";
        let m = mirror_report(r);
        assert_eq!(m, "There is a disc in the upper right region. There is a ring in the left region. There is no cross.");
        assert_eq!(mirror_report(&m), r);
    }

    #[test]
    fn flip_mirrors_columns() {
        let cfg = AugmentConfig {
            mean: 0.0,
            std: 1.0,
            ..Default::default()
        };
        let img = Image::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let draw = AugmentDraw {
            flip: true,
            ..AugmentDraw::IDENTITY
        };
        assert_eq!(apply_augment(&img, draw, &cfg).pixels, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let cfg = AugmentConfig::default();
        let s = generate_sample(&SceneSpec::default(), 2, 3);
        let a = augment_image(&s.image, &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        let b = augment_image(&s.image, &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn text_augmentation_selects_and_shuffles() {
        let one = "There is a disc in the upper region.";
        assert_eq!(augment_text(one, &mut ChaCha8Rng::seed_from_u64(0)), one);

        let first = "There is a disc in the upper region.";
        let second = "There is a ring in the lower left region.";
        let both = format!("{first} {second}");
        let reversed = format!("{second} {first}");
        let swap_seed = (0..64u64)
            .find(|&s| augment_text(&both, &mut ChaCha8Rng::seed_from_u64(s)) == reversed)
            .expect("some seed reverses two sentences");
        assert_eq!(augment_text(&both, &mut ChaCha8Rng::seed_from_u64(swap_seed)), reversed);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = split_sentences(&both);
        for _ in 0..200 {
            let out = augment_text(&both, &mut rng);
            let got = split_sentences(&out);
            assert!(!got.is_empty());
            assert!(got.iter().all(|s| src.contains(s)));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("maco-manifest-{}", std::process::id()));
        let corpus = generate_corpus(&SceneSpec::default(), 5, 1).unwrap();
        let path = write_split(&dir, "val", &corpus).unwrap();
        let back = load_split(&path).unwrap();
        assert_eq!(back, corpus);
        fs::remove_dir_all(&dir).ok();
    }
}
