//! Synthetic shape-detection dataset: three shape classes on textured
//! backgrounds, stored as PPM images plus text annotations.

pub mod ppm;
pub mod render;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detect::geometry::BBox;
use crate::error::{Error, Result};
use crate::kv::{join_list, KvFile};
use crate::rng::{indexed_stream, STREAM_DATA};
use crate::tensor::Tensor;

pub use ppm::{class_color, RgbImage};
pub use render::{render_scene, CLASS_PROTOTYPES, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// One image with its ground truth. `image` is `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub image: Tensor<f64>,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Inclusive range of objects per scene.
    pub objects_min: usize,
    pub objects_max: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 180,
            n_val: 20,
            n_test: 25,
            height: 64,
            width: 64,
            seed: 7,
            objects_min: 1,
            objects_max: 3,
            noise_sigma: 0.03,
        }
    }
}

impl DatasetSpec {
    pub const KEYS: [&'static str; 9] = [
        "data.n_train",
        "data.n_val",
        "data.n_test",
        "data.height",
        "data.width",
        "data.seed",
        "data.objects_min",
        "data.objects_max",
        "data.noise_sigma",
    ];

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return err(format!(
                "split counts must be > 0 (train {}, val {}, test {})",
                self.n_train, self.n_val, self.n_test
            ));
        }
        if self.height < 32 || self.width < 32 {
            return err(format!("image size {}x{} below 32", self.height, self.width));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return err(format!(
                "objects per scene {}..{} must be a nonempty range starting at >= 1",
                self.objects_min, self.objects_max
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return err(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    /// Overwrites fields present in `f` (`data.*` keys).
    pub fn apply_kv(&mut self, f: &KvFile) -> Result<()> {
        f.get_into("data.n_train", &mut self.n_train)?;
        f.get_into("data.n_val", &mut self.n_val)?;
        f.get_into("data.n_test", &mut self.n_test)?;
        f.get_into("data.height", &mut self.height)?;
        f.get_into("data.width", &mut self.width)?;
        f.get_into("data.seed", &mut self.seed)?;
        f.get_into("data.objects_min", &mut self.objects_min)?;
        f.get_into("data.objects_max", &mut self.objects_max)?;
        f.get_into("data.noise_sigma", &mut self.noise_sigma)
    }

    pub fn render_kv(&self, out: &mut String) {
        let _ = writeln!(out, "data.n_train = {}", self.n_train);
        let _ = writeln!(out, "data.n_val = {}", self.n_val);
        let _ = writeln!(out, "data.n_test = {}", self.n_test);
        let _ = writeln!(out, "data.height = {}", self.height);
        let _ = writeln!(out, "data.width = {}", self.width);
        let _ = writeln!(out, "data.seed = {}", self.seed);
        let _ = writeln!(out, "data.objects_min = {}", self.objects_min);
        let _ = writeln!(out, "data.objects_max = {}", self.objects_max);
        let _ = writeln!(out, "data.noise_sigma = {}", self.noise_sigma);
    }

    /// Parses a standalone spec file (only `data.*` keys allowed).
    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let f = KvFile::parse(origin, text)?;
        f.reject_unknown(&Self::KEYS)?;
        let mut spec = DatasetSpec::default();
        spec.apply_kv(&f)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Scene] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Split membership and generating spec, as written to `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub splits: [Vec<String>; 3],
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.spec.render_kv(&mut out);
        for (s, ids) in Split::ALL.iter().zip(&self.splits) {
            let _ = writeln!(out, "split.{} = {}", s.as_str(), join_list(ids));
        }
        out
    }

    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let f = KvFile::parse(origin, text)?;
        let mut known: Vec<&str> = DatasetSpec::KEYS.to_vec();
        known.extend(["split.train", "split.val", "split.test"]);
        f.reject_unknown(&known)?;
        let mut spec = DatasetSpec::default();
        spec.apply_kv(&f)?;
        let mut splits: [Vec<String>; 3] = Default::default();
        for (s, ids) in Split::ALL.iter().zip(splits.iter_mut()) {
            f.get_list_into(&format!("split.{}", s.as_str()), ids)?;
        }
        Ok(Manifest { spec, splits })
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

/// Renders every split in memory. Scene `i` (train first, then val, then
/// test) draws from its own stream, so any scene can be regenerated alone.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut index = 0;
    let mut next = |n: usize| -> Result<Vec<Scene>> {
        (0..n)
            .map(|_| {
                let i = index;
                index += 1;
                let mut rng = indexed_stream(spec.seed, STREAM_DATA, i as u64);
                render_scene(spec, &image_id(i), &mut rng)
            })
            .collect()
    };
    let train = next(spec.n_train)?;
    let val = next(spec.n_val)?;
    let test = next(spec.n_test)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// One annotation line per object: `image_id class_id x1 y1 x2 y2`.
pub fn render_annotations(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        for a in &s.annotations {
            let b = &a.bbox;
            let _ = writeln!(out, "{} {} {} {} {} {}", s.image_id, a.class_id, b.x1, b.y1, b.x2, b.y2);
        }
    }
    out
}

/// Parses annotation lines into `image_id -> annotations`, keeping file order.
pub fn parse_annotations(origin: &str, text: &str) -> Result<BTreeMap<String, Vec<Annotation>>> {
    let mut out: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse {
            path: origin.to_owned(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!(
                "expected `image_id class_id x1 y1 x2 y2`, got {} fields",
                fields.len()
            )));
        }
        let class_id: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad class id {:?}", fields[1])))?;
        let mut c = [0.0; 4];
        for (slot, f) in c.iter_mut().zip(&fields[2..]) {
            *slot = f.parse().map_err(|_| bad(format!("bad coordinate {f:?}")))?;
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3]);
        if !bbox.is_valid() {
            return Err(bad(format!("degenerate box {c:?}")));
        }
        out.entry(fields[0].to_owned())
            .or_default()
            .push(Annotation { class_id, bbox });
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `images/<id>.ppm`, `<split>.txt` annotation files and `manifest.txt`.
pub fn write_scenes(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut splits: [Vec<String>; 3] = Default::default();
    for (s, ids) in Split::ALL.iter().zip(splits.iter_mut()) {
        let scenes = dataset.split(*s);
        for scene in scenes {
            RgbImage::from_tensor(&scene.image)?.write(&images.join(format!("{}.ppm", scene.image_id)))?;
            ids.push(scene.image_id.clone());
        }
        write_text(&dir.join(format!("{}.txt", s.as_str())), &render_annotations(scenes))?;
    }
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        splits,
    };
    write_text(&dir.join("manifest.txt"), &manifest.render())?;
    Ok(manifest)
}

pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    write_scenes(&generate(spec)?, dir)
}

/// Loads a directory written by [`write_dataset`]. Images come back
/// quantized to multiples of 1/255.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = Manifest::parse(&manifest_path.display().to_string(), &read_text(&manifest_path)?)?;
    let mut loaded: Vec<Vec<Scene>> = Vec::with_capacity(3);
    for (s, ids) in Split::ALL.iter().zip(&manifest.splits) {
        let path = dir.join(format!("{}.txt", s.as_str()));
        let mut anns = parse_annotations(&path.display().to_string(), &read_text(&path)?)?;
        if let Some(stray) = anns.keys().find(|k| !ids.contains(k)) {
            return Err(Error::Format(format!(
                "{} annotates image {stray} which the manifest does not list in that split",
                path.display()
            )));
        }
        let scenes = ids
            .iter()
            .map(|id| {
                let img = RgbImage::read(&dir.join("images").join(format!("{id}.ppm")))?;
                Ok(Scene {
                    image_id: id.clone(),
                    image: img.to_tensor(),
                    annotations: anns.remove(id).unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        loaded.push(scenes);
    }
    let test = loaded.pop().unwrap_or_default();
    let val = loaded.pop().unwrap_or_default();
    let train = loaded.pop().unwrap_or_default();
    Ok(Dataset {
        spec: manifest.spec,
        train,
        val,
        test,
    })
}
