//! Shape-scene corpus: two coloured shapes per grid, a grammar caption and
//! a multi-hot label vector over colours and shapes.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{stream, tag};
use crate::vocab::Vocabulary;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether cell (y, x) of an `s`-by-`s` box is filled.
    fn covers(self, y: usize, x: usize, s: usize) -> bool {
        let c = (s as f64 - 1.0) / 2.0;
        let (dy, dx) = (y as f64 - c, x as f64 - c);
        match self {
            Shape::Square => true,
            Shape::Circle => dy * dy + dx * dx <= c * c + 0.5,
            Shape::Triangle => dx.abs() <= (y / 2) as f64,
            Shape::Cross => dy.abs() < 0.6 || dx.abs() < 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub name: String,
    pub rgb: [f32; 3],
}

pub const RELATIONS: [&str; 3] = ["above", "below", "beside"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub colors: Vec<Color>,
    pub shapes: Vec<Shape>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Side of each rendered shape.
    pub object_size: usize,
    /// Empty border kept free so small shifts do not crop objects.
    pub margin: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let color = |name: &str, rgb: [f32; 3]| Color { name: name.into(), rgb };
        SceneSpec {
            colors: vec![
                color("red", [1.0, 0.0, 0.0]),
                color("green", [0.0, 1.0, 0.0]),
                color("blue", [0.0, 0.0, 1.0]),
                color("yellow", [1.0, 1.0, 0.0]),
            ],
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross],
            grid_h: 16,
            grid_w: 16,
            object_size: 5,
            margin: 2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() {
            return Err(Error::Config("scene spec needs at least one colour and one shape".into()));
        }
        let names = self.class_names();
        if names.iter().collect::<HashSet<_>>().len() != names.len() {
            return Err(Error::Config("colour and shape names must be distinct".into()));
        }
        let s = self.object_size;
        let free_h = self.grid_h.saturating_sub(2 * self.margin);
        let free_w = self.grid_w.saturating_sub(2 * self.margin);
        if s == 0 || free_h < s || free_w < s || (free_h < 2 * s + 1 && free_w < 2 * s + 1) {
            return Err(Error::Config(format!(
                "{}x{} grid with margin {} is too small for two non-overlapping {s}x{s} objects",
                self.grid_h, self.grid_w, self.margin
            )));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.colors.len() + self.shapes.len()
    }

    /// Colour names then shape names; index j is label bit j.
    pub fn class_names(&self) -> Vec<String> {
        self.colors.iter().map(|c| c.name.clone()).chain(self.shapes.iter().map(|s| s.name().to_string())).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut words = vec!["a".to_string()];
        words.extend(self.class_names());
        words.extend(RELATIONS.iter().map(|r| r.to_string()));
        Vocabulary::new(words)
    }
}

/// An image with its reference caption (words, no markers) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub caption: Vec<String>,
    pub labels: Vec<u8>,
}

/// Label bits implied by the words of a caption.
pub fn caption_labels(caption: &[String], classes: &[String]) -> Vec<u8> {
    classes.iter().map(|c| u8::from(caption.iter().any(|w| w == c))).collect()
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    y: usize,
    x: usize,
    color: usize,
    shape: usize,
}

pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    spec.validate()?;
    let s = spec.object_size;
    let m = spec.margin;
    let pick = |rng: &mut R| Placed {
        y: rng.gen_range(m..=spec.grid_h - m - s),
        x: rng.gen_range(m..=spec.grid_w - m - s),
        color: rng.gen_range(0..spec.colors.len()),
        shape: rng.gen_range(0..spec.shapes.len()),
    };
    // boxes must be separated by at least one empty cell; a central first
    // object can leave no room, so both are redrawn
    let mut tries = 0;
    let (a, b) = loop {
        let (a, b) = (pick(rng), pick(rng));
        if a.y.abs_diff(b.y) > s || a.x.abs_diff(b.x) > s {
            break (a, b);
        }
        tries += 1;
        if tries == 10_000 {
            return Err(Error::Config("could not place two non-overlapping objects".into()));
        }
    };
    let (first, second) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
    let dx = (second.x - first.x) as isize;
    let dy = second.y as isize - first.y as isize;
    let relation = if dx >= dy.abs() {
        "beside"
    } else if dy > 0 {
        "above"
    } else {
        "below"
    };

    let mut image = Image::zeros(spec.grid_h, spec.grid_w, 3);
    for obj in [first, second] {
        let shape = spec.shapes[obj.shape];
        let rgb = spec.colors[obj.color].rgb;
        for y in 0..s {
            for x in 0..s {
                if shape.covers(y, x, s) {
                    for (ch, &v) in rgb.iter().enumerate() {
                        image.set(obj.y + y, obj.x + x, ch, v);
                    }
                }
            }
        }
    }
    let word = |o: Placed| [spec.colors[o.color].name.clone(), spec.shapes[o.shape].name().to_string()];
    let [c0, s0] = word(first);
    let [c1, s1] = word(second);
    let caption: Vec<String> =
        vec!["a".into(), c0, s0, relation.into(), "a".into(), c1, s1];
    let labels = caption_labels(&caption, &spec.class_names());
    Ok(Scene { image, caption, labels })
}

/// `count` scenes whose images are pairwise distinct and absent from `exclude`.
pub fn generate_unique<R: Rng + ?Sized>(
    spec: &SceneSpec,
    count: usize,
    exclude: &HashSet<Vec<u32>>,
    rng: &mut R,
) -> Result<Vec<Scene>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return Err(Error::Config(format!("could not draw {count} distinct scenes from this spec")));
        }
        let scene = generate_scene(spec, rng)?;
        let key = scene.image.fingerprint();
        if exclude.contains(&key) || !seen.insert(key) {
            continue;
        }
        out.push(scene);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemiDataset {
    pub vocabulary: Vocabulary,
    pub classes: Vec<String>,
    pub described: Vec<Scene>,
    pub undescribed: Vec<Image>,
    /// Held-out scenes for evaluation; never used for training.
    pub test: Vec<Scene>,
}

/// Keeps `floor(ratio * N)` randomly chosen scenes described and strips
/// the rest to bare images. Relative order is preserved on both sides.
pub fn split_semi<R: Rng + ?Sized>(
    scenes: Vec<Scene>,
    labeled_ratio: f64,
    vocabulary: Vocabulary,
    classes: Vec<String>,
    rng: &mut R,
) -> Result<SemiDataset> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::Config(format!("labeled ratio must lie in (0, 1], got {labeled_ratio}")));
    }
    // the small epsilon keeps e.g. 0.29 * 100 from flooring to 28
    let n_l = ((labeled_ratio * scenes.len() as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(rng);
    let mut keep = vec![false; scenes.len()];
    for &i in &order[..n_l] {
        keep[i] = true;
    }
    let mut described = Vec::with_capacity(n_l);
    let mut undescribed = Vec::with_capacity(scenes.len() - n_l);
    for (scene, k) in scenes.into_iter().zip(keep) {
        if k {
            described.push(scene);
        } else {
            undescribed.push(scene.image);
        }
    }
    Ok(SemiDataset { vocabulary, classes, described, undescribed, test: Vec::new() })
}

/// The full corpus: `scenes` training scenes split at `labeled_ratio`, plus
/// `test_scenes` held-out scenes drawn from a separate stream and checked
/// to share no image with training.
pub fn build_dataset(spec: &SceneSpec, scenes: usize, labeled_ratio: f64, test_scenes: usize, seed: u64) -> Result<SemiDataset> {
    spec.validate()?;
    let train = generate_unique(spec, scenes, &HashSet::new(), &mut stream(seed, &[tag::TRAIN_SCENES]))?;
    let taken: HashSet<Vec<u32>> = train.iter().map(|s| s.image.fingerprint()).collect();
    let test = generate_unique(spec, test_scenes, &taken, &mut stream(seed, &[tag::TEST_SCENES]))?;
    let mut ds = split_semi(train, labeled_ratio, spec.vocabulary(), spec.class_names(), &mut stream(seed, &[tag::SPLIT]))?;
    ds.test = test;
    Ok(ds)
}

impl SemiDataset {
    pub fn total(&self) -> usize {
        self.described.len() + self.undescribed.len()
    }

    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.described
            .first()
            .map(|s| s.image.dims())
            .or_else(|| self.undescribed.first().map(Image::dims))
            .or_else(|| self.test.first().map(|s| s.image.dims()))
    }

    /// Copy keeping only the first `floor(fraction * N_u)` undescribed images.
    pub fn with_unlabeled_fraction(&self, fraction: f64) -> Result<SemiDataset> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("unlabeled fraction must lie in [0, 1], got {fraction}")));
        }
        let n = ((fraction * self.undescribed.len() as f64) + 1e-9).floor() as usize;
        let mut out = self.clone();
        out.undescribed.truncate(n);
        Ok(out)
    }

    /// Fails when a test image also appears in the training pools.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<Vec<u32>> = self
            .described
            .iter()
            .map(|s| s.image.fingerprint())
            .chain(self.undescribed.iter().map(Image::fingerprint))
            .collect();
        if let Some(i) = self.test.iter().position(|s| train.contains(&s.image.fingerprint())) {
            return Err(Error::Invalid(format!("test scene {i} also appears in the training data")));
        }
        Ok(())
    }

    /// Caption/label agreement and consistent image sizes across all scenes.
    pub fn validate(&self) -> Result<()> {
        let dims = self.image_dims();
        for (i, s) in self.described.iter().chain(&self.test).enumerate() {
            if s.labels.len() != self.classes.len() {
                return Err(Error::Invalid(format!("scene {i}: {} label bits for {} classes", s.labels.len(), self.classes.len())));
            }
            if caption_labels(&s.caption, &self.classes) != s.labels {
                return Err(Error::Invalid(format!("scene {i}: caption and labels disagree")));
            }
        }
        let images = self.described.iter().map(|s| &s.image).chain(&self.undescribed).chain(self.test.iter().map(|s| &s.image));
        for img in images {
            if Some(img.dims()) != dims || img.data.len() != img.h * img.w * img.c {
                return Err(Error::Invalid("images differ in size".into()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    vocabulary: Vocabulary,
    classes: Vec<String>,
    described: usize,
    undescribed: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: Vec<f32>,
    h: usize,
    w: usize,
    c: usize,
    caption: Option<Vec<String>>,
    labels: Option<Vec<u8>>,
}

impl Record {
    fn described(s: &Scene) -> Self {
        Record {
            image: s.image.data.clone(),
            h: s.image.h,
            w: s.image.w,
            c: s.image.c,
            caption: Some(s.caption.clone()),
            labels: Some(s.labels.clone()),
        }
    }

    fn bare(img: &Image) -> Self {
        Record { image: img.data.clone(), h: img.h, w: img.w, c: img.c, caption: None, labels: None }
    }

    fn into_image(self) -> std::result::Result<(Image, Option<Vec<String>>, Option<Vec<u8>>), String> {
        if self.image.len() != self.h * self.w * self.c {
            return Err(format!("image holds {} values, expected {}x{}x{}", self.image.len(), self.h, self.w, self.c));
        }
        Ok((Image { h: self.h, w: self.w, c: self.c, data: self.image }, self.caption, self.labels))
    }
}

/// Writes the header line, then described, undescribed and test records.
pub fn save_dataset(ds: &SemiDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema_version: DATASET_VERSION,
        vocabulary: ds.vocabulary.clone(),
        classes: ds.classes.clone(),
        described: ds.described.len(),
        undescribed: ds.undescribed.len(),
        test: ds.test.len(),
    };
    let mut line = |v: String| writeln!(out, "{v}").map_err(|e| Error::io(path, e));
    line(serde_json::to_string(&header)?)?;
    for s in &ds.described {
        line(serde_json::to_string(&Record::described(s))?)?;
    }
    for img in &ds.undescribed {
        line(serde_json::to_string(&Record::bare(img))?)?;
    }
    for s in &ds.test {
        line(serde_json::to_string(&Record::described(s))?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<SemiDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, msg: String| Error::Format { path: path.to_path_buf(), line, msg };
    let mut lines = BufReader::new(file).lines();
    let header: Header = match lines.next() {
        None => return Err(fail(1, "missing header line".into())),
        Some(l) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            let probe: serde_json::Value = serde_json::from_str(&l).map_err(|e| fail(1, e.to_string()))?;
            let found = probe.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| fail(1, "header has no schema_version".into()))?;
            if found != DATASET_VERSION as u64 {
                return Err(Error::Version { found: found as u32, expected: DATASET_VERSION });
            }
            serde_json::from_value(probe).map_err(|e| fail(1, e.to_string()))?
        }
    };
    let mut ds = SemiDataset {
        vocabulary: header.vocabulary,
        classes: header.classes,
        described: Vec::with_capacity(header.described),
        undescribed: Vec::with_capacity(header.undescribed),
        test: Vec::with_capacity(header.test),
    };
    let expected = header.described + header.undescribed + header.test;
    let mut count = 0;
    for (i, l) in lines.enumerate() {
        let lineno = i + 2;
        let l = l.map_err(|e| Error::io(path, e))?;
        if count == expected {
            if l.trim().is_empty() {
                continue;
            }
            return Err(fail(lineno, format!("unexpected record beyond the {expected} declared")));
        }
        let rec: Record = serde_json::from_str(&l).map_err(|e| fail(lineno, e.to_string()))?;
        let (image, caption, labels) = rec.into_image().map_err(|m| fail(lineno, m))?;
        let undescribed = count >= header.described && count < header.described + header.undescribed;
        match (undescribed, caption, labels) {
            (true, None, None) => ds.undescribed.push(image),
            (false, Some(caption), Some(labels)) => {
                let scene = Scene { image, caption, labels };
                if count < header.described {
                    ds.described.push(scene)
                } else {
                    ds.test.push(scene)
                }
            }
            (true, _, _) => return Err(fail(lineno, "undescribed record carries a caption or labels".into())),
            (false, _, _) => return Err(fail(lineno, "described record lacks caption or labels".into())),
        }
        count += 1;
    }
    if count < expected {
        return Err(fail(count + 2, format!("file ends after {count} of {expected} records")));
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_colour_single_shape_sets_two_bits() {
        let spec = SceneSpec {
            colors: vec![Color { name: "red".into(), rgb: [1.0, 0.0, 0.0] }],
            shapes: vec![Shape::Circle],
            ..Default::default()
        };
        let s = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.labels, vec![1, 1]);
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let spec = SceneSpec { grid_h: 8, grid_w: 8, ..Default::default() };
        assert!(generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn default_vocabulary_has_sixteen_tokens() {
        let spec = SceneSpec::default();
        assert_eq!(spec.vocabulary().len(), 16);
        assert_eq!(spec.class_count(), 8);
    }

    #[test]
    fn two_objects_are_drawn() {
        let s = generate_scene(&SceneSpec::default(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let lit = (0..16).flat_map(|y| (0..16).map(move |x| (y, x))).filter(|&(y, x)| !s.image.pixel_is_blank(y, x)).count();
        assert!(lit >= 18, "{lit}");
        assert_eq!(s.caption.len(), 7);
    }

    #[test]
    fn split_floor_arithmetic() {
        let spec = SceneSpec::default();
        let scenes = generate_unique(&spec, 100, &HashSet::new(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = split_semi(scenes.clone(), 0.29, spec.vocabulary(), spec.class_names(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ds.described.len(), 29);
        assert!(split_semi(scenes.clone(), 0.0, spec.vocabulary(), spec.class_names(), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(split_semi(scenes, 1.5, spec.vocabulary(), spec.class_names(), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn unlabeled_fraction_truncates_pool() {
        let ds = build_dataset(&SceneSpec::default(), 50, 0.1, 5, 2).unwrap();
        assert_eq!(ds.with_unlabeled_fraction(0.4).unwrap().undescribed.len(), 18);
        assert_eq!(ds.with_unlabeled_fraction(1.0).unwrap().undescribed.len(), 45);
    }
}
