//! Procedural multi-view shape dataset.
//!
//! Each object has fixed content parameters (shape, hue, aspect, size) and is
//! rendered under several independently drawn views (rotation, translation,
//! marker scale, brightness, blur). Objects are split into disjoint train and
//! test sets.
//!
//! A dark orientation marker sits inside every shape along its local +x
//! axis, so rotation is recoverable even for symmetric shapes. The view's
//! `scale_jitter` resizes that marker rather than the shape, which keeps
//! `base_size` readable from a single image.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"MVDS1";
pub const NUM_ATTRIBUTES: usize = 10;
pub const NUM_PARAMS: usize = 10;

pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "is_disk",
    "is_square",
    "is_triangle",
    "hue_lt_half",
    "aspect_gt_1",
    "size_gt_045",
    "rotation_gt_pi",
    "offset_gt_015",
    "bright_gt_08",
    "blurred",
];

/// Marginal probability of each attribute under the sampling distribution.
pub const ATTRIBUTE_PRIORS: [f64; NUM_ATTRIBUTES] = [0.25, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, BLUR_PROB];

pub const BLUR_PROB: f64 = 0.05;
pub const BLUR_SIGMA: f64 = 1.5;
pub const BACKGROUND: f64 = 0.5;
const SUPERSAMPLE: usize = 4;
const SATURATION: f64 = 0.85;
const MARKER_CENTER: f64 = 0.5;
const MARKER_RADIUS: f64 = 0.28;
pub const MARKER_LEVEL: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Format(format!("shape index {i}")))
    }

    /// Membership test in the shape's unit frame.
    fn contains(self, u: f64, w: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + w * w <= 1.0,
            ShapeKind::Square => u.abs().max(w.abs()) <= 1.0,
            ShapeKind::Triangle => {
                // equilateral, inscribed in the unit circle, apex on +u
                let s3 = 3f64.sqrt();
                u >= -0.5 && s3 * w <= 1.0 - u && -s3 * w <= 1.0 - u
            }
            ShapeKind::Cross => {
                let (a, b) = (u.abs(), w.abs());
                a.max(b) <= 1.0 && a.min(b) <= 1.0 / 3.0
            }
        }
    }
}

/// Per-object factors, shared by all views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentParams {
    pub shape: ShapeKind,
    pub hue: f32,
    pub aspect: f32,
    pub base_size: f32,
}

/// Per-observation factors, independent of content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub rotation: f32,
    pub dx: f32,
    pub dy: f32,
    pub scale_jitter: f32,
    pub brightness: f32,
    pub blurred: bool,
}

fn check(name: &str, v: f32, lo: f32, hi: f32, hi_open: bool) -> Result<()> {
    let ok = v >= lo && if hi_open { v < hi } else { v <= hi };
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{name} = {v} outside [{lo}, {hi}{}", if hi_open { ")" } else { "]" })))
    }
}

/// Largest f32 strictly below `hi` when rounding lands on it.
fn f32_below(x: f64, hi: f32) -> f32 {
    let v = x as f32;
    if v >= hi {
        f32::from_bits(hi.to_bits() - 1)
    } else {
        v
    }
}

const TAU32: f32 = std::f32::consts::TAU;

impl ContentParams {
    pub fn validate(&self) -> Result<()> {
        check("hue", self.hue, 0.0, 1.0, true)?;
        check("aspect", self.aspect, 0.6, 1.4, false)?;
        check("base_size", self.base_size, 0.3, 0.6, false)
    }
}

impl ViewParams {
    pub fn sample(r: &mut Rng) -> Self {
        Self {
            rotation: f32_below(r.random_range(0.0..std::f64::consts::TAU), TAU32),
            dx: r.random_range(-0.15f32..=0.15),
            dy: r.random_range(-0.15f32..=0.15),
            scale_jitter: r.random_range(0.85f32..=1.15),
            brightness: r.random_range(0.6f32..=1.0),
            blurred: r.random_bool(BLUR_PROB),
        }
    }

    /// Rotation may be any finite angle; it is taken modulo 2pi.
    pub fn validate(&self) -> Result<()> {
        if !self.rotation.is_finite() {
            return Err(Error::Invalid(format!("rotation = {}", self.rotation)));
        }
        check("dx", self.dx, -0.15, 0.15, false)?;
        check("dy", self.dy, -0.15, 0.15, false)?;
        check("scale_jitter", self.scale_jitter, 0.85, 1.15, false)?;
        check("brightness", self.brightness, 0.6, 1.0, false)
    }

    /// Centered, unrotated, full brightness, unblurred.
    pub fn canonical() -> Self {
        Self { rotation: 0.0, dx: 0.0, dy: 0.0, scale_jitter: 1.0, brightness: 1.0, blurred: false }
    }
}

/// Draw content for `n` objects. Each coordinate is stratified over the
/// objects (one uniform draw per equal-width stratum, strata shuffled), so
/// every object's parameters are uniform on their range while the split's
/// empirical marginals track the priors closely. Shapes are balanced.
pub fn sample_contents(r: &mut Rng, n: usize) -> Vec<ContentParams> {
    let mut strat = |lo: f64, hi: f64| -> Vec<f64> {
        let mut v: Vec<f64> =
            (0..n).map(|i| lo + (hi - lo) * (i as f64 + r.random::<f64>()) / n as f64).collect();
        v.shuffle(r);
        v
    };
    let hue = strat(0.0, 1.0);
    let aspect = strat(0.6, 1.4);
    let size = strat(0.3, 0.6);
    let offset = r.random_range(0..4);
    let mut shapes: Vec<ShapeKind> = (0..n).map(|i| ShapeKind::ALL[(i + offset) % 4]).collect();
    shapes.shuffle(r);
    (0..n)
        .map(|i| ContentParams {
            shape: shapes[i],
            hue: f32_below(hue[i], 1.0),
            aspect: (aspect[i] as f32).clamp(0.6, 1.4),
            base_size: (size[i] as f32).clamp(0.3, 0.6),
        })
        .collect()
}

/// The ten attribute bits, bit `j` for `ATTRIBUTE_NAMES[j]`.
pub fn attributes(c: &ContentParams, v: &ViewParams) -> u16 {
    let bits = [
        c.shape == ShapeKind::Disk,
        c.shape == ShapeKind::Square,
        c.shape == ShapeKind::Triangle,
        c.hue < 0.5,
        c.aspect > 1.0,
        c.base_size > 0.45,
        v.rotation > std::f32::consts::PI,
        v.dx.abs() + v.dy.abs() > 0.15,
        v.brightness > 0.8,
        v.blurred,
    ];
    bits.iter().enumerate().fold(0u16, |acc, (j, &b)| acc | ((b as u16) << j))
}

pub fn attribute_bit(bits: u16, j: usize) -> bool {
    bits >> j & 1 == 1
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gaussian_blur(img: &mut [f64], h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let hi = h as isize - 1;
    let mut tmp = vec![0.0; h * h];
    for plane in img.chunks_mut(h * h) {
        for y in 0..h {
            for x in 0..h {
                tmp[y * h + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * plane[y * h + (x as isize + i as isize - radius).clamp(0, hi) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..h {
                plane[y * h + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[(y as isize + i as isize - radius).clamp(0, hi) as usize * h + x])
                    .sum();
            }
        }
    }
}

/// Render one `[3, h, h]` image with values in `[-1, 1]`.
pub fn render_sample(content: &ContentParams, view: &ViewParams, h: usize) -> Result<Tensor<f32>> {
    content.validate()?;
    view.validate()?;
    if h < 4 {
        return Err(Error::Invalid(format!("image size {h} too small")));
    }
    let theta = (view.rotation as f64).rem_euclid(std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let r = content.base_size as f64 / 2.0;
    let (rx, ry) = (r * content.aspect as f64, r);
    let (cx, cy) = (0.5 + view.dx as f64, 0.5 + view.dy as f64);
    let marker_r2 = (MARKER_RADIUS * view.scale_jitter as f64).powi(2);
    let fg = hsv_to_rgb(content.hue as f64, SATURATION, view.brightness as f64);

    let ss = SUPERSAMPLE;
    let weight = 1.0 / (ss * ss) as f64;
    let mut img = vec![0.0f64; 3 * h * h];
    for py in 0..h {
        for px in 0..h {
            let (mut a_fg, mut a_mark) = (0.0, 0.0);
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = (px as f64 + (sx as f64 + 0.5) / ss as f64) / h as f64 - cx;
                    let y = (py as f64 + (sy as f64 + 0.5) / ss as f64) / h as f64 - cy;
                    let u = (cos * x + sin * y) / rx;
                    let w = (-sin * x + cos * y) / ry;
                    if (u - MARKER_CENTER).powi(2) + w * w <= marker_r2 {
                        a_mark += weight;
                    } else if content.shape.contains(u, w) {
                        a_fg += weight;
                    }
                }
            }
            let a_bg = 1.0 - a_fg - a_mark;
            for ch in 0..3 {
                img[(ch * h + py) * h + px] = a_bg * BACKGROUND + a_fg * fg[ch] + a_mark * MARKER_LEVEL;
            }
        }
    }
    if view.blurred {
        gaussian_blur(&mut img, h, BLUR_SIGMA);
    }
    Tensor::new(&[3, h, h], img.into_iter().map(|v| (v * 2.0 - 1.0) as f32).collect())
}

/// `[-1, 1]` -> byte, `round((x + 1) / 2 * 255)`.
pub fn quantize(x: f32) -> u8 {
    (((x as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train_objects: usize,
    pub train_views: usize,
    pub test_objects: usize,
    pub test_views: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train_objects: 80, train_views: 24, test_objects: 20, test_views: 8, image_size: 32, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_objects < 2 {
            return Err(Error::Invalid(format!("need at least 2 training objects, got {}", self.train_objects)));
        }
        if self.test_objects == 0 {
            return Err(Error::Invalid("the test split needs at least one object".into()));
        }
        if self.train_views < 2 || self.test_views < 2 {
            return Err(Error::Invalid("need at least 2 views per object".into()));
        }
        if ![16, 32, 64].contains(&self.image_size) {
            return Err(Error::Invalid(format!("image size {} not in {{16, 32, 64}}", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub image_size: usize,
    pub channels: usize,
    pub records: usize,
    pub config: DatasetConfig,
    /// Object ids `[train_lo, train_hi)` are train, `[test_lo, test_hi)` test.
    pub split: SplitSpec,
    pub record_layout: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (u32, u32),
    pub test: (u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub object_id: u32,
    pub content: ContentParams,
    pub view: ViewParams,
    pub attributes: u16,
}

impl Record {
    fn params(&self) -> [f32; NUM_PARAMS] {
        let (c, v) = (&self.content, &self.view);
        [
            c.shape.index() as f32,
            c.hue,
            c.aspect,
            c.base_size,
            v.rotation,
            v.dx,
            v.dy,
            v.scale_jitter,
            v.brightness,
            v.blurred as u8 as f32,
        ]
    }

    fn from_params(object_id: u32, p: [f32; NUM_PARAMS], attributes: u16) -> Result<Self> {
        let content = ContentParams { shape: ShapeKind::from_index(p[0] as usize)?, hue: p[1], aspect: p[2], base_size: p[3] };
        let view = ViewParams {
            rotation: p[4],
            dx: p[5],
            dy: p[6],
            scale_jitter: p[7],
            brightness: p[8],
            blurred: p[9] != 0.0,
        };
        Ok(Self { object_id, content, view, attributes })
    }
}

/// In-memory dataset. Images are held exactly as stored: bytes, CHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
    images: Vec<u8>,
}

/// Object id with the record indices of its views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectViews {
    pub object_id: u32,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub objects: usize,
    pub images: usize,
    pub views_min: usize,
    pub views_mean: f64,
    pub views_max: usize,
}

/// Render the dataset. Train objects come first, then test objects; records
/// are grouped by object in id order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "dataset");
    let mut contents = sample_contents(&mut r, cfg.train_objects);
    contents.extend(sample_contents(&mut r, cfg.test_objects));
    let h = cfg.image_size;
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (id, content) in contents.iter().enumerate() {
        let views = if id < cfg.train_objects { cfg.train_views } else { cfg.test_views };
        for _ in 0..views {
            let view = ViewParams::sample(&mut r);
            let img = render_sample(content, &view, h)?;
            images.extend(img.data().iter().map(|&x| quantize(x)));
            records.push(Record { object_id: id as u32, content: *content, view, attributes: attributes(content, &view) });
        }
    }
    let ntrain = cfg.train_objects as u32;
    let header = DatasetHeader {
        magic: "MVDS1".into(),
        version: 1,
        image_size: h,
        channels: 3,
        records: records.len(),
        config: *cfg,
        split: SplitSpec { train: (0, ntrain), test: (ntrain, ntrain + cfg.test_objects as u32) },
        record_layout: format!("u8[3*{h}*{h}] image, u32 object_id, f32[{NUM_PARAMS}] params, u16 attributes; little endian"),
    };
    Ok(Dataset { header, records, images })
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.header.image_size
    }

    fn image_len(&self) -> usize {
        3 * self.header.image_size * self.header.image_size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn split_of(&self, object_id: u32) -> Split {
        let (lo, hi) = self.header.split.train;
        if (lo..hi).contains(&object_id) {
            Split::Train
        } else {
            Split::Test
        }
    }

    /// Record indices belonging to a split, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of(self.records[i].object_id) == split).collect()
    }

    /// Objects of a split with their views, in id order.
    pub fn objects(&self, split: Split) -> Vec<ObjectViews> {
        let mut out: Vec<ObjectViews> = Vec::new();
        for i in self.indices(split) {
            let id = self.records[i].object_id;
            match out.last_mut() {
                Some(o) if o.object_id == id => o.indices.push(i),
                _ => out.push(ObjectViews { object_id: id, indices: vec![i] }),
            }
        }
        out
    }

    /// Stack images into a `[n, 3, H, H]` batch in `[-1, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let h = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| dequantize(b)));
        }
        Tensor::new(&[indices.len(), 3, h, h], data).expect("nonempty batch")
    }

    pub fn stats(&self, split: Split) -> SplitStats {
        let objs = self.objects(split);
        let counts: Vec<usize> = objs.iter().map(|o| o.indices.len()).collect();
        let images: usize = counts.iter().sum();
        SplitStats {
            objects: objs.len(),
            images,
            views_min: counts.iter().copied().min().unwrap_or(0),
            views_mean: if objs.is_empty() { 0.0 } else { images as f64 / objs.len() as f64 },
            views_max: counts.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(9 + header.len() + self.len() * (self.image_len() + 4 + 4 * NUM_PARAMS + 2));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (i, rec) in self.records.iter().enumerate() {
            out.extend_from_slice(self.image_bytes(i));
            out.extend_from_slice(&rec.object_id.to_le_bytes());
            for p in rec.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out.extend_from_slice(&rec.attributes.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != DATASET_MAGIC {
            return Err(Error::Format("missing MVDS1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = 9 + len;
        if body > bytes.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let header: DatasetHeader = serde_json::from_slice(&bytes[9..body])?;
        if header.magic != "MVDS1" || header.version != 1 || header.channels != 3 {
            return Err(Error::Format(format!("unsupported header {} v{}", header.magic, header.version)));
        }
        let img = 3 * header.image_size * header.image_size;
        let rec_len = img + 4 + 4 * NUM_PARAMS + 2;
        if bytes.len() - body != header.records * rec_len {
            return Err(Error::Format(format!(
                "expected {} records of {rec_len} bytes, found {} bytes",
                header.records,
                bytes.len() - body
            )));
        }
        let mut records = Vec::with_capacity(header.records);
        let mut images = Vec::with_capacity(header.records * img);
        for chunk in bytes[body..].chunks_exact(rec_len) {
            images.extend_from_slice(&chunk[..img]);
            let mut at = img;
            let mut take4 = || {
                let b: [u8; 4] = chunk[at..at + 4].try_into().expect("4 bytes");
                at += 4;
                b
            };
            let object_id = u32::from_le_bytes(take4());
            let mut p = [0f32; NUM_PARAMS];
            p.iter_mut().for_each(|v| *v = f32::from_le_bytes(take4()));
            let attrs = u16::from_le_bytes(chunk[rec_len - 2..].try_into().expect("2 bytes"));
            records.push(Record::from_params(object_id, p, attrs)?);
        }
        Ok(Self { header, records, images })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One binary PPM per image plus `manifest.csv`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let h = self.image_size();
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
        let mut head = vec!["index".to_string(), "object_id".into(), "split".into()];
        head.extend(
            ["shape", "hue", "aspect", "base_size", "rotation", "dx", "dy", "scale_jitter", "brightness", "blurred"]
                .map(String::from),
        );
        head.extend(["attributes".into(), "path".into()]);
        w.write_record(&head).map_err(|e| Error::Format(e.to_string()))?;
        for (i, rec) in self.records.iter().enumerate() {
            let name = format!("{i:06}.ppm");
            let path = dir.join(&name);
            write_ppm(&path, self.image_bytes(i), h, h)?;
            let mut row = vec![i.to_string(), rec.object_id.to_string(), format!("{:?}", self.split_of(rec.object_id)).to_lowercase()];
            row.extend(rec.params().iter().map(|p| p.to_string()));
            row.push(format!("{:010b}", rec.attributes));
            row.push(name);
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&manifest, e))
    }
}

/// Binary P6 from planar CHW bytes.
pub fn ppm_bytes(chw: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = height * width;
    for i in 0..plane {
        out.extend_from_slice(&[chw[i], chw[plane + i], chw[2 * plane + i]]);
    }
    out
}

pub fn write_ppm(path: &Path, chw: &[u8], height: usize, width: usize) -> Result<()> {
    fs::write(path, ppm_bytes(chw, height, width)).map_err(|e| Error::io(path, e))
}

/// Parse a binary P6 back to planar CHW bytes and its `(height, width)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| Error::Format("bad PPM header".into()))?);
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field `{s}`")));
    if fields[0] != "P6" || num(fields[3])? != 255 {
        return Err(Error::Format("only 8-bit P6 is supported".into()));
    }
    let (width, height) = (num(fields[1])?, num(fields[2])?);
    let pixels = &bytes[at + 1..];
    if pixels.len() != 3 * width * height {
        return Err(Error::Format("PPM pixel data length mismatch".into()));
    }
    let plane = width * height;
    let mut chw = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            chw[c * plane + i] = pixels[3 * i + c];
        }
    }
    Ok((chw, height, width))
}

/// A batch of positive pairs: `x1[i]` and `x2[i]` are distinct views of
/// `object_ids[i]`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x1: Tensor<f32>,
    pub x2: Tensor<f32>,
    pub object_ids: Vec<u32>,
    pub indices: Vec<(usize, usize)>,
}

/// Uniform object among those with at least two views, then an ordered
/// pair of distinct views.
pub fn sample_positive_pairs(ds: &Dataset, objects: &[ObjectViews], batch: usize, r: &mut Rng) -> Result<PairBatch> {
    let eligible: Vec<&ObjectViews> = objects.iter().filter(|o| o.indices.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Invalid("no object has two or more views".into()));
    }
    if batch == 0 {
        return Err(Error::Invalid("batch must be positive".into()));
    }
    let mut pairs = Vec::with_capacity(batch);
    let mut ids = Vec::with_capacity(batch);
    for _ in 0..batch {
        let o = eligible[r.random_range(0..eligible.len())];
        let a = r.random_range(0..o.indices.len());
        let mut b = r.random_range(0..o.indices.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push((o.indices[a], o.indices[b]));
        ids.push(o.object_id);
    }
    let (i1, i2): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    Ok(PairBatch { x1: ds.batch(&i1), x2: ds.batch(&i2), object_ids: ids, indices: pairs })
}

/// `k` distinct views of one uniformly chosen object per row, for the
/// joint baselines. Returns one `[batch, 3, H, H]` tensor per tuple slot.
pub fn sample_view_tuples(ds: &Dataset, objects: &[ObjectViews], batch: usize, k: usize, r: &mut Rng) -> Result<Vec<Tensor<f32>>> {
    let eligible: Vec<&ObjectViews> = objects.iter().filter(|o| o.indices.len() >= k).collect();
    if eligible.is_empty() || batch == 0 || k == 0 {
        return Err(Error::Invalid(format!("no object has {k} or more views")));
    }
    let mut slots = vec![Vec::with_capacity(batch); k];
    for _ in 0..batch {
        let o = eligible[r.random_range(0..eligible.len())];
        let chosen = rand::seq::index::sample(r, o.indices.len(), k);
        for (slot, i) in slots.iter_mut().zip(chosen.iter()) {
            slot.push(o.indices[i]);
        }
    }
    Ok(slots.iter().map(|idx| ds.batch(idx)).collect())
}
