//! Seeded generator of paired shop/street image datasets with controllable
//! domain shift, and the on-disk dataset format.
//!
//! Each attribute category owns one horizontal band of the garment area. The
//! value of that category picks a prototype pattern (colour plus stripe
//! texture) for the band, so every attribute is visually recoverable. A
//! small per-item noise field makes renderings of distinct items with equal
//! attributes distinguishable. The online rendering is the clean item on a
//! grey background; offline renderings apply geometric jitter, brightness
//! jitter, colour cast, background clutter and occlusion.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! images/<item>_online.{tnsr,ppm}
//! images/<item>_offline<j>.{tnsr,ppm}
//! ```
//!
//! The TNSR files are authoritative; the PPM copies are for viewing.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeLabels, AttributeSchema, Domain};
use crate::tensor::Tensor;
use crate::trainer::Sample;

pub const MANIFEST_FORMAT: &str = "darn-synth-v1";
const BACKGROUND: f64 = 0.5;
const ITEM_NOISE: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub item_count: usize,
    pub schema: AttributeSchema,
    /// `[C, H, W]`; C must be 1 or 3.
    pub image_shape: [usize; 3],
    pub offline_per_item: usize,
    /// Std-dev of the multiplicative brightness factor around 1.
    pub brightness_sigma: f64,
    /// Std-dev of the additive per-channel colour offset.
    pub color_cast_sigma: f64,
    /// Probability that a background pixel is replaced by a random colour.
    pub clutter_density: f64,
    pub occlusion_prob: f64,
    /// Maximum garment translation in pixels along each axis.
    pub max_shift: usize,
    /// Fraction of (item, category) labels hidden as missing.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            item_count: 500,
            schema: AttributeSchema::desk_default(),
            image_shape: [3, 16, 16],
            offline_per_item: 1,
            brightness_sigma: 0.25,
            color_cast_sigma: 0.12,
            clutter_density: 0.35,
            occlusion_prob: 0.35,
            max_shift: 2,
            missing_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Same item and schema settings with every shift knob at zero.
    pub fn without_shift(&self) -> Self {
        SynthConfig {
            brightness_sigma: 0.0,
            color_cast_sigma: 0.0,
            clutter_density: 0.0,
            occlusion_prob: 0.0,
            max_shift: 0,
            ..self.clone()
        }
    }

    fn garment_cols(&self) -> (usize, usize) {
        let w = self.image_shape[2];
        let margin = w / 5;
        (margin, w - margin)
    }

    fn band_height(&self) -> usize {
        self.image_shape[1] / self.schema.len()
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if c != 1 && c != 3 {
            return Err(Error::config("image_shape", "channel count must be 1 or 3"));
        }
        if h == 0 || w < 5 {
            return Err(Error::config("image_shape", "image too small"));
        }
        if self.item_count < 2 {
            return Err(Error::config("item_count", "need at least two items"));
        }
        if self.offline_per_item == 0 {
            return Err(Error::config("offline_per_item", "need at least one offline rendering"));
        }
        for (name, v) in [
            ("brightness_sigma", self.brightness_sigma),
            ("color_cast_sigma", self.color_cast_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        for (name, v) in [
            ("clutter_density", self.clutter_density),
            ("occlusion_prob", self.occlusion_prob),
            ("missing_fraction", self.missing_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if 4 * self.max_shift >= h.min(w) {
            return Err(Error::config("max_shift", "must be below min(H, W) / 4"));
        }
        if self.band_height() < 2 {
            return Err(Error::config(
                "schema",
                format!(
                    "{} categories need {} bands of at least 2 rows; image has {h} rows",
                    self.schema.len(),
                    self.schema.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Pattern of one attribute value: a colour modulated by stripes.
#[derive(Debug, Clone)]
struct Prototype {
    color: Vec<f64>,
    fy: f64,
    fx: f64,
    phase: f64,
    contrast: f64,
}

impl Prototype {
    fn draw(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let angle = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_4;
        let period = [2.0, 3.0, 4.0, 6.0][rng.random_range(0..4)];
        let omega = std::f64::consts::TAU / period;
        Prototype {
            color: (0..channels).map(|_| rng.random_range(0.1..0.9)).collect(),
            fy: omega * angle.cos(),
            fx: omega * angle.sin(),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            contrast: rng.random_range(0.15..0.35),
        }
    }

    fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        let s = (self.fy * y as f64 + self.fx * x as f64 + self.phase).sin();
        self.color[c] * (1.0 - self.contrast) + self.contrast * (s > 0.0) as u8 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    /// Ground-truth value index per category.
    pub attributes: Vec<usize>,
    /// Observed labels; `null` where masked as missing.
    pub labels: AttributeLabels,
    pub online: String,
    pub offline: Vec<String>,
    pub online_ppm: String,
    pub offline_ppm: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub schema: AttributeSchema,
    pub image_shape: [usize; 3],
    pub config: SynthConfig,
    pub item_count: usize,
    pub image_count: usize,
    pub items: Vec<ItemRecord>,
}

impl DatasetManifest {
    /// Checks the structural invariants: unique ids, one online and at least
    /// one offline image per item, attribute values inside the schema.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for it in &self.items {
            if !ids.insert(&it.item_id) {
                return Err(Error::Validation(format!("duplicate item id {}", it.item_id)));
            }
            if it.offline.is_empty() {
                return Err(Error::Validation(format!("item {} has no offline image", it.item_id)));
            }
            let truth: AttributeLabels = it.attributes.iter().map(|&v| Some(v)).collect();
            self.schema.validate(&truth)?;
            self.schema.validate(&it.labels)?;
            for (l, t) in it.labels.iter().zip(&truth) {
                if l.is_some() && l != t {
                    return Err(Error::Validation(format!(
                        "item {} label disagrees with its attributes",
                        it.item_id
                    )));
                }
            }
        }
        if self.item_count != self.items.len() {
            return Err(Error::Validation(format!(
                "item_count {} but {} records",
                self.item_count,
                self.items.len()
            )));
        }
        let images: usize = self.items.iter().map(|i| 1 + i.offline.len()).sum();
        if images != self.image_count {
            return Err(Error::Validation(format!(
                "image_count {} but {images} images listed",
                self.image_count
            )));
        }
        Ok(())
    }
}

/// In-memory dataset: every rendering as a [`Sample`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub image_shape: [usize; 3],
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn item_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.item_id.as_str()).collect()
    }

    pub fn online(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.domain == Domain::Online)
    }

    pub fn offline(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.domain == Domain::Offline)
    }

    fn subset(&self, keep: &BTreeSet<&str>) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            image_shape: self.image_shape,
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(s.item_id.as_str()))
                .cloned()
                .collect(),
        }
    }
}

pub fn online_id(item: &str) -> String {
    format!("{item}/online")
}

pub fn offline_id(item: &str, j: usize) -> String {
    format!("{item}/offline{j}")
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    prototypes: Vec<Vec<Prototype>>,
}

impl Renderer<'_> {
    fn clean(&self, attrs: &[usize], noise: &[f64]) -> Vec<f64> {
        let [c, h, w] = self.cfg.image_shape;
        let (x0, x1) = self.cfg.garment_cols();
        let bh = self.cfg.band_height();
        let mut img = vec![BACKGROUND; c * h * w];
        for (k, &v) in attrs.iter().enumerate() {
            let proto = &self.prototypes[k][v];
            for y in k * bh..((k + 1) * bh).min(h) {
                for x in x0..x1 {
                    for ch in 0..c {
                        let i = (ch * h + y) * w + x;
                        img[i] = proto.value(ch, y - k * bh, x) + noise[i];
                    }
                }
            }
        }
        img
    }

    /// Garment mask (true where garment pixels land) for the clean layout.
    fn garment_mask(&self) -> Vec<bool> {
        let [_, h, w] = self.cfg.image_shape;
        let (x0, x1) = self.cfg.garment_cols();
        let rows = self.cfg.band_height() * self.cfg.schema.len();
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                y < rows && x >= x0 && x < x1
            })
            .collect()
    }

    fn shifted(&self, clean: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let cfg = self.cfg;
        let [c, h, w] = cfg.image_shape;
        let s = cfg.max_shift as i64;
        let (dy, dx) = if s > 0 {
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        } else {
            (0, 0)
        };
        let mask = self.garment_mask();
        let mut img = vec![BACKGROUND; c * h * w];
        let mut covered = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    continue;
                }
                let (ty, tx) = (y as i64 + dy, x as i64 + dx);
                if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                covered[ty * w + tx] = true;
                for ch in 0..c {
                    img[(ch * h + ty) * w + tx] = clean[(ch * h + y) * w + x];
                }
            }
        }

        let gain = 1.0 + cfg.brightness_sigma * rng.sample::<f64, _>(StandardNormal);
        let cast: Vec<f64> = (0..c)
            .map(|_| cfg.color_cast_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for ch in 0..c {
            for p in 0..h * w {
                let v = &mut img[ch * h * w + p];
                *v = *v * gain + cast[ch];
            }
        }
        if cfg.clutter_density > 0.0 {
            for p in 0..h * w {
                if !covered[p] && rng.random_bool(cfg.clutter_density) {
                    for ch in 0..c {
                        img[ch * h * w + p] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
        if cfg.occlusion_prob > 0.0 && rng.random_bool(cfg.occlusion_prob) {
            let oh = rng.random_range(h / 4..=h / 2).max(1);
            let ow = rng.random_range(w / 4..=w / 2).max(1);
            let y0 = rng.random_range(0..=h - oh);
            let x0 = rng.random_range(0..=w - ow);
            let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            for ch in 0..c {
                for y in y0..y0 + oh {
                    for x in x0..x0 + ow {
                        img[(ch * h + y) * w + x] = color[ch];
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        img
    }
}

/// Renders the whole dataset in memory. Deterministic in `config.seed`.
pub fn render(config: &SynthConfig) -> Result<(Dataset, Vec<ItemRecord>)> {
    config.validate()?;
    let [c, h, w] = config.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes: Vec<Vec<Prototype>> = config
        .schema
        .categories()
        .iter()
        .map(|cat| (0..cat.cardinality).map(|_| Prototype::draw(&mut rng, c)).collect())
        .collect();
    let renderer = Renderer {
        cfg: config,
        prototypes,
    };
    let width = format!("{}", config.item_count.saturating_sub(1)).len().max(4);
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for i in 0..config.item_count {
        let item_id = format!("item{i:0width$}");
        let attributes: Vec<usize> = config
            .schema
            .categories()
            .iter()
            .map(|cat| rng.random_range(0..cat.cardinality))
            .collect();
        let labels: AttributeLabels = attributes
            .iter()
            .map(|&v| (!rng.random_bool(config.missing_fraction)).then_some(v))
            .collect();
        let truth: AttributeLabels = attributes.iter().map(|&v| Some(v)).collect();
        let noise: Vec<f64> = (0..c * h * w)
            .map(|_| ITEM_NOISE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let clean: Vec<f64> = renderer
            .clean(&attributes, &noise)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let mut record = ItemRecord {
            item_id: item_id.clone(),
            attributes: attributes.clone(),
            labels: labels.clone(),
            online: format!("images/{item_id}_online.tnsr"),
            offline: Vec::new(),
            online_ppm: format!("images/{item_id}_online.ppm"),
            offline_ppm: Vec::new(),
        };
        for j in 0..config.offline_per_item {
            let img = renderer.shifted(&clean, &mut rng);
            samples.push(Sample {
                id: offline_id(&item_id, j),
                item_id: item_id.clone(),
                domain: Domain::Offline,
                image: Tensor::new(vec![c, h, w], img)?,
                labels: labels.clone(),
                attributes: truth.clone(),
            });
            record.offline.push(format!("images/{item_id}_offline{j}.tnsr"));
            record.offline_ppm.push(format!("images/{item_id}_offline{j}.ppm"));
        }
        samples.push(Sample {
            id: online_id(&item_id),
            item_id: item_id.clone(),
            domain: Domain::Online,
            image: Tensor::new(vec![c, h, w], clean)?,
            labels,
            attributes: truth,
        });
        records.push(record);
    }
    Ok((
        Dataset {
            schema: config.schema.clone(),
            image_shape: config.image_shape,
            samples,
        },
        records,
    ))
}

/// Binary PPM (P6) or PGM (P5) bytes of a `[C,H,W]` image in `[0,1]`.
pub fn to_pnm(img: &Tensor) -> Vec<u8> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..c {
            let v = img.data()[ch * h * w + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Renders the dataset and writes manifest plus images under `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let (dataset, items) = render(config)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in &dataset.samples {
        let rec = items
            .iter()
            .find(|r| r.item_id == s.item_id)
            .expect("sample belongs to a rendered item");
        let (tnsr, ppm) = match s.domain {
            Domain::Online => (rec.online.clone(), rec.online_ppm.clone()),
            Domain::Offline => {
                let j: usize = s.id.rsplit("offline").next().unwrap().parse().unwrap();
                (rec.offline[j].clone(), rec.offline_ppm[j].clone())
            }
        };
        s.image.save(&out_dir.join(tnsr))?;
        let ppm = out_dir.join(ppm);
        fs::write(&ppm, to_pnm(&s.image)).map_err(|e| Error::io(&ppm, e))?;
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        schema: config.schema.clone(),
        image_shape: config.image_shape,
        config: config.clone(),
        item_count: items.len(),
        image_count: dataset.samples.len(),
        items,
    };
    manifest.validate()?;
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest and all TNSR images it references.
pub fn load(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "dataset manifest",
        detail: format!("{}: {e}", manifest_path.display()),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Validation(format!("unknown manifest format {}", manifest.format)));
    }
    manifest.validate()?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let shape = manifest.image_shape.to_vec();
    let read = |rel: &str| -> Result<Tensor> {
        let p = root.join(rel);
        let t = Tensor::load(&p)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Validation(format!(
                "{}: shape {:?}, expected {shape:?}",
                p.display(),
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut samples = Vec::with_capacity(manifest.image_count);
    for it in &manifest.items {
        let truth: AttributeLabels = it.attributes.iter().map(|&v| Some(v)).collect();
        for (j, rel) in it.offline.iter().enumerate() {
            samples.push(Sample {
                id: offline_id(&it.item_id, j),
                item_id: it.item_id.clone(),
                domain: Domain::Offline,
                image: read(rel)?,
                labels: it.labels.clone(),
                attributes: truth.clone(),
            });
        }
        samples.push(Sample {
            id: online_id(&it.item_id),
            item_id: it.item_id.clone(),
            domain: Domain::Online,
            image: read(&it.online)?,
            labels: it.labels.clone(),
            attributes: truth,
        });
    }
    Ok(Dataset {
        schema: manifest.schema,
        image_shape: manifest.image_shape,
        samples,
    })
}

/// Item-level split: `round(train_frac * items)` items go to training, the
/// rest to test. Renderings of one item never straddle the split.
pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::config("train_frac", "must lie in [0, 1]"));
    }
    let mut items: Vec<&str> = dataset.item_ids().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_train = (train_frac * items.len() as f64).round() as usize;
    let train: BTreeSet<&str> = items[..n_train].iter().copied().collect();
    let test: BTreeSet<&str> = items[n_train..].iter().copied().collect();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            item_count: 20,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn null_shift_gives_identical_offline_images() {
        let cfg = SynthConfig {
            offline_per_item: 2,
            ..small().without_shift()
        };
        let (ds, _) = render(&cfg).unwrap();
        for off in ds.offline() {
            let on = ds.online().find(|s| s.item_id == off.item_id).unwrap();
            let a: Vec<u64> = on.image.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = off.image.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn default_shift_changes_offline_images() {
        let (ds, _) = render(&small()).unwrap();
        let changed = ds
            .offline()
            .filter(|off| ds.online().find(|s| s.item_id == off.item_id).unwrap().image != off.image)
            .count();
        assert_eq!(changed, 20);
    }

    #[test]
    fn too_many_categories_is_config_error() {
        let names: Vec<String> = (0..9).map(|i| format!("c{i}")).collect();
        let pairs: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 3)).collect();
        let cfg = SynthConfig {
            schema: AttributeSchema::from_pairs(&pairs).unwrap(),
            ..small()
        };
        let err = render(&cfg).unwrap_err();
        assert!(err.to_string().contains("schema"));
        let cfg = SynthConfig { max_shift: 4, ..small() };
        assert!(render(&cfg).is_err());
        let cfg = SynthConfig { occlusion_prob: 1.5, ..small() };
        assert!(render(&cfg).is_err());
    }

    #[test]
    fn missing_fraction_masks_labels() {
        let cfg = SynthConfig {
            item_count: 400,
            missing_fraction: 0.1,
            ..small()
        };
        let (_, items) = render(&cfg).unwrap();
        let total = items.len() * 4;
        let missing: usize = items.iter().map(|i| i.labels.iter().filter(|l| l.is_none()).count()).sum();
        let frac = missing as f64 / total as f64;
        assert!((frac - 0.1).abs() < 0.03, "{frac}");
    }

    #[test]
    fn generate_then_load_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let m = generate(&small(), &a).unwrap();
        generate(&small(), &b).unwrap();
        assert_eq!(m.item_count, 20);
        assert_eq!(m.image_count, 40);
        let ma = fs::read(a.join("manifest.json")).unwrap();
        let mb = fs::read(b.join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
        for it in &m.items {
            assert_eq!(fs::read(a.join(&it.online)).unwrap(), fs::read(b.join(&it.online)).unwrap());
            let ppm = fs::read(a.join(&it.online_ppm)).unwrap();
            assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
            assert_eq!(ppm.len(), 13 + 16 * 16 * 3);
        }
        let ds = load(&a.join("manifest.json")).unwrap();
        let (mem, _) = render(&small()).unwrap();
        assert_eq!(ds.samples, mem.samples);
    }

    #[test]
    fn load_reports_missing_file_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(&m.items[3].online)).unwrap();
        let err = load(&dir.path().join("manifest.json")).unwrap_err();
        assert_eq!(err.category(), "io");
        assert!(err.to_string().contains(&m.items[3].item_id));
    }

    #[test]
    fn split_edges() {
        let (ds, _) = render(&small()).unwrap();
        let (train, test) = split(&ds, 1.0, 0).unwrap();
        assert!(test.samples.is_empty());
        assert_eq!(train.samples.len(), ds.samples.len());
        let (a, _) = split(&ds, 0.7, 5).unwrap();
        let (b, _) = split(&ds, 0.7, 5).unwrap();
        assert_eq!(a.item_ids(), b.item_ids());
        assert_eq!(a.item_ids().len(), 14);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn split_is_item_disjoint(seed in 0u64..1000, frac in 0.0f64..=1.0) {
            let (ds, _) = render(&SynthConfig { item_count: 12, seed, ..Default::default() }).unwrap();
            let (train, test) = split(&ds, frac, seed).unwrap();
            let tr = train.item_ids();
            proptest::prop_assert!(test.item_ids().iter().all(|i| !tr.contains(i)));
            proptest::prop_assert_eq!(train.samples.len() + test.samples.len(), ds.samples.len());
        }

        #[test]
        fn rendered_manifests_are_valid(seed in 0u64..1000, items in 2usize..30, per in 1usize..3) {
            let cfg = SynthConfig { item_count: items, offline_per_item: per, seed, ..Default::default() };
            let (ds, records) = render(&cfg).unwrap();
            let m = DatasetManifest {
                format: MANIFEST_FORMAT.into(),
                schema: cfg.schema.clone(),
                image_shape: cfg.image_shape,
                config: cfg.clone(),
                item_count: records.len(),
                image_count: ds.samples.len(),
                items: records,
            };
            proptest::prop_assert!(m.validate().is_ok());
            proptest::prop_assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }
}
