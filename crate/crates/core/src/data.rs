//! Unpaired two-domain datasets on disk (`trainA/ trainB/ testA/ testB/`),
//! preprocessing to `[-1, 1]`, epoch-permutation sampling and PNG grid export.

use crate::diffcore::{Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::networks::params::derive_rng;
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::HashSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    TrainA,
    TrainB,
    TestA,
    TestB,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainA, Split::TrainB, Split::TestA, Split::TestB];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::TrainA => "trainA",
            Split::TrainB => "trainB",
            Split::TestA => "testA",
            Split::TestB => "testB",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub path: PathBuf,
}

/// One split of one domain, records sorted lexicographically by file name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainFolder {
    pub root: PathBuf,
    pub split: Split,
    pub records: Vec<Record>,
}

impl DomainFolder {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Lists and decodes every image in `root/<split>`.
    pub fn scan(root: &Path, split: Split) -> Result<DomainFolder> {
        let dir = root.join(split.dir_name());
        let folder = Self::list(&dir, split)?;
        folder
            .records
            .par_iter()
            .map(|r| decode_rgb(&r.path).map(|_| ()))
            .collect::<Result<Vec<()>>>()?;
        Ok(folder)
    }

    /// Lists image files without decoding them.
    pub fn list(dir: &Path, split: Split) -> Result<DomainFolder> {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "missing or empty domain `{}` ({})",
                split.dir_name(),
                dir.display()
            )));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_path(p))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!(
                "missing or empty domain `{}` ({})",
                split.dir_name(),
                dir.display()
            )));
        }
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(paths.len());
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Dataset(format!(
                    "duplicate id `{id}` in domain `{}`",
                    split.dir_name()
                )));
            }
            records.push(Record { id, path });
        }
        Ok(DomainFolder {
            root: dir.to_path_buf(),
            split,
            records,
        })
    }
}

pub fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    ) && !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train_a: DomainFolder,
    pub train_b: DomainFolder,
    pub test_a: DomainFolder,
    pub test_b: DomainFolder,
}

/// Train/test split conventions of the reference corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitProtocol {
    /// 1171 photo–caricature pairs: 800 train, the remaining 371 test.
    IiitCfwP2c,
    /// 1194 photo–sketch pairs: 995 train, 199 test.
    PhotoSketch,
    Custom,
}

impl SplitProtocol {
    pub fn counts(&self) -> Option<(usize, usize)> {
        match self {
            SplitProtocol::IiitCfwP2c => Some((800, 371)),
            SplitProtocol::PhotoSketch => Some((995, 199)),
            SplitProtocol::Custom => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitProtocol::IiitCfwP2c => "IIIT-CFW-P2C",
            SplitProtocol::PhotoSketch => "PHOTO-SKETCH",
            SplitProtocol::Custom => "custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub train_a: usize,
    pub train_b: usize,
    pub test_a: usize,
    pub test_b: usize,
}

impl DatasetSummary {
    pub fn protocol(&self) -> SplitProtocol {
        [SplitProtocol::IiitCfwP2c, SplitProtocol::PhotoSketch]
            .into_iter()
            .find(|p| {
                let (train, test) = p.counts().unwrap();
                self.train_a == train && self.train_b == train && self.test_a == test && self.test_b == test
            })
            .unwrap_or(SplitProtocol::Custom)
    }
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trainA={} trainB={} testA={} testB={} ({})",
            self.train_a,
            self.train_b,
            self.test_a,
            self.test_b,
            self.protocol().name()
        )
    }
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            train_a: self.train_a.len(),
            train_b: self.train_b.len(),
            test_a: self.test_a.len(),
            test_b: self.test_b.len(),
        }
    }

    pub fn folder(&self, split: Split) -> &DomainFolder {
        match split {
            Split::TrainA => &self.train_a,
            Split::TrainB => &self.train_b,
            Split::TestA => &self.test_a,
            Split::TestB => &self.test_b,
        }
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let [train_a, train_b, test_a, test_b] = Split::ALL.map(|s| DomainFolder::scan(root, s));
    Ok(Dataset {
        root: root.to_path_buf(),
        train_a: train_a?,
        train_b: train_b?,
        test_a: test_a?,
        test_b: test_b?,
    })
}

fn decode_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: format!("cannot decode image: {e}"),
        })?;
    Ok(img.to_rgb8())
}

/// Bilinear resize to `resolution × resolution`; values stay in `[0, 255]`.
pub fn load_raw(path: &Path, resolution: usize) -> Result<Tensor4> {
    let img = decode_rgb(path)?;
    Ok(rgb_to_raw(&img, resolution))
}

pub fn rgb_to_raw(img: &image::RgbImage, resolution: usize) -> Tensor4 {
    let r = resolution as u32;
    let resized;
    let img = if img.dimensions() == (r, r) {
        img
    } else {
        resized = image::imageops::resize(img, r, r, FilterType::Triangle);
        &resized
    };
    let plane = resolution * resolution;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64;
        }
    }
    Tensor4::from_vec(Shape4::new(1, 3, resolution, resolution), data).expect("rgb plane layout")
}

/// `v / 127.5 - 1`.
pub fn normalize_raw(raw: &Tensor4) -> Tensor4 {
    raw.map(|v| v / 127.5 - 1.0)
}

/// Inverse of [`normalize_raw`], clamped to `[0, 255]`.
pub fn denormalize(t: &Tensor4) -> Tensor4 {
    t.map(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0))
}

/// Decodes, resizes and normalizes one image file to `(1, 3, r, r)` in `[-1, 1]`.
pub fn preprocess(path: &Path, resolution: usize) -> Result<Tensor4> {
    Ok(normalize_raw(&load_raw(path, resolution)?))
}

/// Raw `[0, 255]` images of one folder held in memory at a fixed resolution.
#[derive(Clone, Debug)]
pub struct RawDomain {
    pub ids: Vec<String>,
    pub images: Vec<Tensor4>,
}

impl RawDomain {
    pub fn load(folder: &DomainFolder, resolution: usize) -> Result<RawDomain> {
        let images = folder
            .records
            .par_iter()
            .map(|r| load_raw(&r.path, resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(RawDomain {
            ids: folder.records.iter().map(|r| r.id.clone()).collect(),
            images,
        })
    }

    pub fn from_images(ids: Vec<String>, images: Vec<Tensor4>) -> Result<RawDomain> {
        if ids.len() != images.len() || ids.is_empty() {
            return Err(Error::Dataset("missing or empty domain".into()));
        }
        Ok(RawDomain { ids, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stream of indices formed by concatenating independent shuffles of `0..len`,
/// one per epoch. Batch `k` of size `n` covers stream positions `k·n..(k+1)·n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochSampler {
    seed: u64,
    label: String,
    len: usize,
}

impl EpochSampler {
    pub fn new(seed: u64, label: &str, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Dataset(format!("missing or empty domain `{label}`")));
        }
        Ok(EpochSampler {
            seed,
            label: label.to_string(),
            len,
        })
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut derive_rng(self.seed, &format!("{}:epoch{epoch}", self.label)));
        idx
    }

    pub fn batch(&self, batch_index: u64, n: usize) -> Vec<usize> {
        let start = batch_index * n as u64;
        let mut out = Vec::with_capacity(n);
        let mut epoch = u64::MAX;
        let mut perm = Vec::new();
        for pos in start..start + n as u64 {
            let e = pos / self.len as u64;
            if e != epoch {
                perm = self.permutation(e);
                epoch = e;
            }
            out.push(perm[(pos % self.len as u64) as usize]);
        }
        out
    }
}

/// Photos and caricatures drawn independently; `x[i]` and `y[i]` are unrelated.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch {
    pub x_raw: Tensor4,
    pub y_raw: Tensor4,
    pub x: Tensor4,
    pub y: Tensor4,
    pub x_ids: Vec<String>,
    pub y_ids: Vec<String>,
}

impl UnpairedBatch {
    pub fn from_raw(x_raw: Tensor4, y_raw: Tensor4, x_ids: Vec<String>, y_ids: Vec<String>) -> Result<Self> {
        if x_raw.shape() != y_raw.shape() {
            return Err(Error::shape("unpaired batch", x_raw.shape(), y_raw.shape()));
        }
        Ok(UnpairedBatch {
            x: normalize_raw(&x_raw),
            y: normalize_raw(&y_raw),
            x_raw,
            y_raw,
            x_ids,
            y_ids,
        })
    }

    pub fn size(&self) -> usize {
        self.x.shape().n()
    }
}

/// Independent epoch samplers for the two domains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnpairedSampler {
    a: EpochSampler,
    b: EpochSampler,
}

impl UnpairedSampler {
    pub fn new(seed: u64, len_a: usize, len_b: usize) -> Result<Self> {
        Ok(UnpairedSampler {
            a: EpochSampler::new(seed, "trainA", len_a)?,
            b: EpochSampler::new(seed, "trainB", len_b)?,
        })
    }

    pub fn batch(&self, a: &RawDomain, b: &RawDomain, batch_index: u64, n: usize) -> Result<UnpairedBatch> {
        let ia = self.a.batch(batch_index, n);
        let ib = self.b.batch(batch_index, n);
        let pick = |d: &RawDomain, idx: &[usize]| -> Result<(Tensor4, Vec<String>)> {
            let imgs: Vec<Tensor4> = idx.iter().map(|&i| d.images[i].clone()).collect();
            Ok((Tensor4::stack(&imgs)?, idx.iter().map(|&i| d.ids[i].clone()).collect()))
        };
        let (x_raw, x_ids) = pick(a, &ia)?;
        let (y_raw, y_ids) = pick(b, &ib)?;
        UnpairedBatch::from_raw(x_raw, y_raw, x_ids, y_ids)
    }
}

/// One batch of size `n` from the `batch_index`-th position of the seeded epoch streams.
pub fn sample_unpaired_batch(
    a: &RawDomain,
    b: &RawDomain,
    n: usize,
    seed: u64,
    batch_index: u64,
) -> Result<UnpairedBatch> {
    UnpairedSampler::new(seed, a.len(), b.len())?.batch(a, b, batch_index, n)
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Row-major montage of `(1, 3, r, r)` images in `[-1, 1]`, written as PNG.
/// `labels` become `tEXt` chunks of the file.
pub fn export_grid_labeled(images: &[Tensor4], columns: usize, labels: &[(String, String)], path: &Path) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::invalid("export_grid needs at least one image"))?;
    if columns == 0 {
        return Err(Error::invalid("export_grid needs at least one column"));
    }
    let s = first.shape();
    if s.c() != 3 {
        return Err(Error::shape("export_grid", "3-channel images", s));
    }
    let (ih, iw) = (s.h(), s.w());
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(columns);
    let (gw, gh) = (cols * iw, rows * ih);
    let mut buf = vec![0u8; gw * gh * 3];
    for (k, img) in images.iter().enumerate() {
        let is = img.shape();
        if is.h() != ih || is.w() != iw || is.c() != 3 {
            return Err(Error::shape("export_grid", s, is));
        }
        let (r0, c0) = ((k / columns) * ih, (k % columns) * iw);
        for y in 0..ih {
            for x in 0..iw {
                let o = ((r0 + y) * gw + c0 + x) * 3;
                for c in 0..3 {
                    buf[o + c] = to_u8(img.get(0, c, y, x));
                }
            }
        }
    }
    write_png(path, gw as u32, gh as u32, &buf, labels)
}

pub fn export_grid(images: &[Tensor4], columns: usize, path: &Path) -> Result<()> {
    export_grid_labeled(images, columns, &[], path)
}

fn write_png(path: &Path, w: u32, h: u32, rgb: &[u8], labels: &[(String, String)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in labels {
        enc.add_text_chunk(k.clone(), v.clone()).map_err(enc_err)?;
    }
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(rgb).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

/// `tEXt` chunks of a PNG file, in file order.
pub fn read_png_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect())
}

/// Writes a single `(1, 3, r, r)` image in `[-1, 1]` as PNG.
pub fn save_image(img: &Tensor4, path: &Path) -> Result<()> {
    export_grid(std::slice::from_ref(img), 1, path)
}

/// Procedural face-like drawing. Domain A is a plain face; domain B the same
/// layout with enlarged eyes and mouth, flat colors and dark outlines.
pub fn toy_face(seed: u64, caricature: bool, size: u32) -> image::RgbImage {
    use rand::Rng;
    let mut rng = derive_rng(seed, if caricature { "toyB" } else { "toyA" });
    let s = size as f64;
    let (cx, cy) = (s * rng.random_range(0.45..0.55), s * rng.random_range(0.45..0.55));
    let (rx, ry) = (s * rng.random_range(0.26..0.32), s * rng.random_range(0.34..0.40));
    let skin = [rng.random_range(170.0..230.0), rng.random_range(120.0..170.0), rng.random_range(90.0..140.0)];
    let bg = [rng.random_range(20.0..90.0), rng.random_range(60.0..140.0), rng.random_range(100.0..200.0)];
    let (eye_r, mouth_w, ink) = if caricature {
        (s * 0.09, s * 0.22, 10.0)
    } else {
        (s * 0.045, s * 0.12, 60.0)
    };
    image::RgbImage::from_fn(size, size, |px, py| {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
        let mut c = if d <= 1.0 {
            let shade = if caricature { 1.0 } else { 1.0 - 0.25 * d };
            skin.map(|v| v * shade)
        } else {
            let g = if caricature { 1.0 } else { 0.7 + 0.3 * y / s };
            bg.map(|v| v * g)
        };
        if caricature && (d - 1.0).abs() < 0.12 {
            c = [ink; 3];
        }
        for ex in [cx - rx * 0.4, cx + rx * 0.4] {
            if (x - ex).hypot(y - (cy - ry * 0.2)) < eye_r {
                c = [ink; 3];
            }
        }
        if (x - cx).abs() < mouth_w / 2.0 && (y - (cy + ry * 0.45)).abs() < s * 0.025 {
            c = [ink + 120.0, 30.0, 30.0];
        }
        image::Rgb(c.map(|v| v.clamp(0.0, 255.0) as u8))
    })
}

/// Writes a `trainA/ trainB/ testA/ testB/` tree of procedural faces.
pub fn write_toy_corpus(root: &Path, train: usize, test: usize, size: u32, seed: u64) -> Result<()> {
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (count, caricature) = match split {
            Split::TrainA => (train, false),
            Split::TrainB => (train, true),
            Split::TestA => (test, false),
            Split::TestB => (test, true),
        };
        let offset = if matches!(split, Split::TestA | Split::TestB) { 1_000_000 } else { 0 };
        for i in 0..count {
            let img = toy_face(seed.wrapping_add(offset + i as u64), caricature, size);
            let p = dir.join(format!("{i:04}.png"));
            img.save(&p).map_err(|e| Error::Image {
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: u8, size: u32) -> image::RgbImage {
        image::RgbImage::from_pixel(size, size, image::Rgb([v, v, v]))
    }

    #[test]
    fn normalization_endpoints() {
        assert!(normalize_raw(&rgb_to_raw(&solid(0, 8), 8)).data().iter().all(|&v| v == -1.0));
        assert!(normalize_raw(&rgb_to_raw(&solid(255, 8), 8)).data().iter().all(|&v| v == 1.0));
        let mid = normalize_raw(&Tensor4::full(Shape4::new(1, 3, 2, 2), 127.5));
        assert!(mid.data().iter().all(|v| v.abs() <= 1.0 / 255.0));
        let gray = normalize_raw(&rgb_to_raw(&solid(128, 4), 4));
        assert!(gray.data().iter().all(|v| v.abs() <= 1.0 / 255.0 + 1e-12));
    }

    #[test]
    fn sampler_is_a_permutation_per_epoch() {
        let s = EpochSampler::new(5, "trainA", 7).unwrap();
        let mut b = s.batch(0, 7);
        assert_eq!(s.batch(0, 7), b);
        b.sort();
        assert_eq!(b, (0..7).collect::<Vec<_>>());
        // batch of 3 from position 6 crosses into epoch 1
        let crossing = s.batch(2, 3);
        assert_eq!(crossing[0], s.permutation(0)[6]);
        assert_eq!(&crossing[1..], &s.permutation(1)[..2]);
    }

    #[test]
    fn sampler_frequencies_are_uniform() {
        let s = EpochSampler::new(11, "trainA", 4).unwrap();
        let mut counts = [0usize; 4];
        for k in 0..1000 {
            counts[s.batch(k, 1)[0]] += 1;
        }
        // Within an epoch-permutation stream every id appears exactly 250 times.
        let (p, n) = (0.25, 1000.0);
        let sd = (n * p * (1.0 - p) as f64).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn empty_domain_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for s in Split::ALL {
            fs::create_dir(dir.path().join(s.dir_name())).unwrap();
        }
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing or empty domain") && err.contains("trainA"), "{err}");
    }

    #[test]
    fn grid_layout_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Tensor4> = (0..6)
            .map(|i| Tensor4::full(Shape4::new(1, 3, 4, 4), i as f64 / 6.0))
            .collect();
        let p = dir.path().join("g.png");
        export_grid(&imgs, 3, &p).unwrap();
        let back = image::open(&p).unwrap();
        assert_eq!((back.width(), back.height()), (12, 8));
        assert!(export_grid(&imgs, 3, &dir.path().join("missing/dir/g.png")).is_err());
    }
}
