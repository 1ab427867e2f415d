//! Datasets: CIFAR-10 binary records, a synthetic stamped-glyph set with
//! known discriminative regions, augmentation and channel normalization.
//!
//! A record is one label byte followed by `C*H*W` pixel bytes in channel-major
//! order (all of R, then G, then B for CIFAR-10). Region sidecar files hold one
//! `idx x0 y0 x1 y1` line per sample, with `x1`/`y1` exclusive.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, AbnError, Result};
use crate::tensor::Tensor;

pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes { num_classes: usize, labels: Vec<usize> },
    /// Row-major `[N, tasks]` matrix of 0/1 attributes.
    Attributes { tasks: usize, values: Vec<u8> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::Attributes { tasks, values } => values.len() / tasks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Classes {
                num_classes,
                labels,
            } => Labels::Classes {
                num_classes: *num_classes,
                labels: rows.iter().map(|&r| labels[r]).collect(),
            },
            Labels::Attributes { tasks, values } => Labels::Attributes {
                tasks: *tasks,
                values: rows
                    .iter()
                    .flat_map(|&r| values[r * tasks..(r + 1) * tasks].iter().copied())
                    .collect(),
            },
        }
    }
}

/// Images `[N, C, H, W]` with values in `[0, 1]`, labels, and optional
/// ground-truth regions (`regions[i][t]` for sample `i`, task/stamp `t`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Labels,
    pub regions: Vec<Vec<Option<Rect>>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Labels, regions: Vec<Vec<Option<Rect>>>) -> Result<Self> {
        let (n, _, h, w) = images.dims4()?;
        if labels.len() != n {
            return shape_err(format!("{} labels for {n} images", labels.len()));
        }
        match &labels {
            Labels::Classes {
                num_classes,
                labels,
            } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                    return invalid(format!("label {bad} outside [0, {num_classes})"));
                }
            }
            Labels::Attributes { values, .. } => {
                if values.iter().any(|&v| v > 1) {
                    return invalid("attribute labels must be 0 or 1");
                }
            }
        }
        if !regions.is_empty() && regions.len() != n {
            return shape_err(format!("{} region lists for {n} images", regions.len()));
        }
        for r in regions.iter().flatten().flatten() {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > w || r.y1 > h {
                return invalid(format!("region {r:?} outside a {w}x{h} image"));
            }
        }
        Ok(Self {
            images,
            labels,
            regions,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(rows),
            labels: self.labels.gather(rows),
            regions: if self.regions.is_empty() {
                Vec::new()
            } else {
                rows.iter().map(|&r| self.regions[r].clone()).collect()
            },
        }
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes { labels, .. } => Some(labels),
            Labels::Attributes { .. } => None,
        }
    }
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(AbnError::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

/// Parses fixed-size records of one label byte plus `C*H*W` pixel bytes.
pub fn parse_records(
    bytes: &[u8],
    (c, h, w): (usize, usize, usize),
    num_classes: usize,
) -> Result<Dataset> {
    let record = 1 + c * h * w;
    if bytes.is_empty() {
        return format_err(0, "empty record file");
    }
    if !bytes.len().is_multiple_of(record) {
        let whole = bytes.len() / record * record;
        return format_err(
            whole,
            format!(
                "{} trailing bytes do not form a {record}-byte record (file is {} bytes)",
                bytes.len() - whole,
                bytes.len()
            ),
        );
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (record - 1));
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return format_err(i * record, format!("label {label} outside [0, {num_classes})"));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![n, c, h, w], pixels)?,
        Labels::Classes {
            num_classes,
            labels,
        },
        Vec::new(),
    )
}

pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_records(&bytes, (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE), CIFAR_CLASSES)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads the standard CIFAR-10 binary batches from `dir`: `data_batch_1.bin`
/// through `data_batch_5.bin` (whichever exist, at least the first) for the
/// training split, `test_batch.bin` for the test split.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<_> = match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .enumerate()
            .filter(|(i, p)| *i == 0 || p.exists())
            .map(|(_, p)| p)
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let parts = files
        .iter()
        .map(|p| read_cifar_file(p))
        .collect::<Result<Vec<_>>>()?;
    concat(&parts)
}

pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let Some(first) = parts.first() else {
        return invalid("nothing to concatenate");
    };
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let (c, h, w) = first.image_shape();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for p in parts {
        if p.image_shape() != (c, h, w) {
            return shape_err("cannot concatenate datasets with different image shapes");
        }
        let Some(l) = p.class_labels() else {
            return invalid("only class-labelled datasets can be concatenated");
        };
        pixels.extend_from_slice(p.images.data());
        labels.extend_from_slice(l);
        n += p.len();
    }
    let num_classes = match first.labels {
        Labels::Classes { num_classes, .. } => num_classes,
        Labels::Attributes { .. } => unreachable!(),
    };
    Dataset::new(
        Tensor::new(vec![n, c, h, w], pixels)?,
        Labels::Classes {
            num_classes,
            labels,
        },
        Vec::new(),
    )
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a class-labelled dataset as records (label byte + pixel bytes).
pub fn encode_records(data: &Dataset) -> Result<Vec<u8>> {
    let Some(labels) = data.class_labels() else {
        return invalid("record files hold one class label per image");
    };
    let per = data.images.len() / data.len();
    let mut out = Vec::with_capacity(data.len() * (per + 1));
    for (i, &l) in labels.iter().enumerate() {
        let label = u8::try_from(l).map_err(|_| AbnError::InvalidArgument(format!("label {l} exceeds one byte")))?;
        out.push(label);
        out.extend(data.images.outer(i).iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_records(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_records(data)?)?;
    Ok(())
}

/// One `idx x0 y0 x1 y1` line per sample (first region of each sample).
pub fn format_regions(data: &Dataset) -> Result<String> {
    let mut out = String::new();
    for (i, regions) in data.regions.iter().enumerate() {
        let Some(Some(r)) = regions.first() else {
            return invalid(format!("sample {i} has no region"));
        };
        writeln!(out, "{i} {} {} {} {}", r.x0, r.y0, r.x1, r.y1).expect("write to string");
    }
    Ok(out)
}

pub fn parse_regions(text: &str, count: usize) -> Result<Vec<Vec<Option<Rect>>>> {
    let mut regions = vec![Vec::new(); count];
    let mut offset = 0;
    for line in text.lines() {
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .or_else(|e| format_err(offset, format!("bad region line {line:?}: {e}")))?;
        let [idx, x0, y0, x1, y1] = fields[..] else {
            return format_err(offset, format!("region line {line:?} needs 5 fields"));
        };
        if idx >= count {
            return format_err(offset, format!("region index {idx} beyond {count} samples"));
        }
        regions[idx] = vec![Some(Rect { x0, y0, x1, y1 })];
        offset += line.len() + 1;
    }
    Ok(regions)
}

/// Writes `<stem>.bin` records and a `<stem>.regions` sidecar.
pub fn save_with_regions(data: &Dataset, records: &Path, sidecar: &Path) -> Result<()> {
    write_records(data, records)?;
    fs::write(sidecar, format_regions(data)?)?;
    Ok(())
}

pub fn load_with_regions(
    records: &Path,
    sidecar: &Path,
    shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<Dataset> {
    let data = parse_records(&fs::read(records)?, shape, num_classes)?;
    let regions = parse_regions(&fs::read_to_string(sidecar)?, data.len())?;
    Dataset::new(data.images, data.labels, regions)
}

/// Largest supported number of distinct glyphs.
pub const MAX_GLYPHS: usize = 10;

/// Binary stamp pattern `k` on a `ph × pw` grid. Every glyph is symmetric
/// under horizontal mirroring, so flip augmentation never turns one class
/// into another.
pub fn glyph(k: usize, ph: usize, pw: usize) -> Result<Vec<bool>> {
    if k >= MAX_GLYPHS {
        return invalid(format!("only {MAX_GLYPHS} glyphs are defined, asked for {k}"));
    }
    if ph < 4 || pw < 4 {
        return invalid("glyphs need a patch of at least 4x4");
    }
    let mid = |n: usize, i: usize| {
        let band = (n / 8).max(1);
        let lo = n / 2 - band;
        let hi = (n - 1) / 2 + band + 1;
        i >= lo && i < hi
    };
    // Diagonal membership scaled to non-square patches.
    let diag = |r: usize, c: usize| {
        let c_scaled = r * (pw - 1) / (ph - 1).max(1);
        c == c_scaled || c == pw - 1 - c_scaled
    };
    let mut out = Vec::with_capacity(ph * pw);
    for r in 0..ph {
        for c in 0..pw {
            let mc = c.min(pw - 1 - c);
            let on = match k {
                0 => mid(ph, r),
                1 => mid(pw, c),
                2 => diag(r, c),
                3 => r == 0 || r == ph - 1 || c == 0 || c == pw - 1,
                4 => mid(ph, r) || mid(pw, c),
                5 => r >= ph / 4 && r < ph - ph / 4 && c >= pw / 4 && c < pw - pw / 4,
                6 => r == ph / 4 || r == ph - 1 - ph / 4,
                7 => mc == 1,
                8 => r % 2 == 0,
                _ => {
                    let cy = (ph - 1) as f64 / 2.0;
                    let cx = (pw - 1) as f64 / 2.0;
                    let d = (r as f64 - cy).abs() / cy + (c as f64 - cx).abs() / cx;
                    (0.75..=1.01).contains(&d)
                }
            };
            out.push(on);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// 4 classes of 32×32 RGB images with an 8×8 stamp.
    pub fn toy(per_class: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            num_classes: 4,
            per_class,
            channels: 3,
            height: 32,
            width: 32,
            patch_h: 8,
            patch_w: 8,
            noise_std,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patch_h > self.height || self.patch_w > self.width {
            return invalid("patch does not fit in the image");
        }
        if self.channels == 0 || self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return invalid("bad synthetic image parameters");
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.5;

struct Canvas {
    c: usize,
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(cfg: &SyntheticConfig) -> Self {
        Self {
            c: cfg.channels,
            h: cfg.height,
            w: cfg.width,
            pixels: vec![BACKGROUND; cfg.channels * cfg.height * cfg.width],
        }
    }

    fn stamp(&mut self, pattern: &[bool], rect: Rect) {
        let pw = rect.x1 - rect.x0;
        for ch in 0..self.c {
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let on = pattern[(y - rect.y0) * pw + (x - rect.x0)];
                    self.pixels[(ch * self.h + y) * self.w + x] = if on { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Adds noise, clamps to `[0, 1]` and snaps to the 8-bit grid so the
    /// images survive a record-file round trip exactly.
    fn finish(mut self, noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        for v in &mut self.pixels {
            let n = noise.map_or(0.0, |d| d.sample(rng));
            *v = quantize(*v + n) as f64 / 255.0;
        }
        self.pixels
    }
}

fn random_rect(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Rect {
    let x0 = rng.random_range(0..=cfg.width - cfg.patch_w);
    let y0 = rng.random_range(0..=cfg.height - cfg.patch_h);
    Rect {
        x0,
        y0,
        x1: x0 + cfg.patch_w,
        y1: y0 + cfg.patch_h,
    }
}

fn noise_dist(std: f64) -> Result<Option<Normal<f64>>> {
    if std == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, std)
        .map(Some)
        .map_err(|e| AbnError::InvalidArgument(e.to_string()))
}

/// Balanced single-label set: sample `i` has class `i % K`, a gray noisy
/// background and the class glyph stamped at a uniformly random position.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.num_classes < 2 {
        return invalid("need at least two classes");
    }
    let glyphs = (0..cfg.num_classes)
        .map(|k| glyph(k, cfg.patch_h, cfg.patch_w))
        .collect::<Result<Vec<_>>>()?;
    let noise = noise_dist(cfg.noise_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_classes * cfg.per_class;
    let mut pixels = Vec::with_capacity(n * cfg.channels * cfg.height * cfg.width);
    let mut labels = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.num_classes;
        let rect = random_rect(cfg, &mut rng);
        let mut canvas = Canvas::new(cfg);
        canvas.stamp(&glyphs[class], rect);
        pixels.extend(canvas.finish(noise.as_ref(), &mut rng));
        labels.push(class);
        regions.push(vec![Some(rect)]);
    }
    Dataset::new(
        Tensor::new(vec![n, cfg.channels, cfg.height, cfg.width], pixels)?,
        Labels::Classes {
            num_classes: cfg.num_classes,
            labels,
        },
        regions,
    )
}

/// Multi-attribute set: attribute `t` is the presence of glyph `t`, drawn
/// independently with probability 1/2; present stamps never overlap.
/// `cfg.num_classes` and `cfg.per_class` are ignored in favour of `tasks` and
/// `count`.
pub fn make_synthetic_multitask(cfg: &SyntheticConfig, tasks: usize, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    if tasks == 0 {
        return invalid("need at least one task");
    }
    let glyphs = (0..tasks)
        .map(|k| glyph(k, cfg.patch_h, cfg.patch_w))
        .collect::<Result<Vec<_>>>()?;
    let noise = noise_dist(cfg.noise_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pixels = Vec::new();
    let mut values = Vec::with_capacity(count * tasks);
    let mut regions = Vec::with_capacity(count);
    for i in 0..count {
        let mut canvas = Canvas::new(cfg);
        let mut placed: Vec<Option<Rect>> = Vec::with_capacity(tasks);
        for (t, g) in glyphs.iter().enumerate() {
            if !rng.random_bool(0.5) {
                values.push(0);
                placed.push(None);
                continue;
            }
            let mut tries = 0;
            let rect = loop {
                let r = random_rect(cfg, &mut rng);
                if placed.iter().flatten().all(|p| !p.overlaps(&r)) {
                    break r;
                }
                tries += 1;
                if tries > 1000 {
                    return invalid(format!("cannot place stamp {t} of sample {i} without overlap"));
                }
            };
            canvas.stamp(g, rect);
            values.push(1);
            placed.push(Some(rect));
        }
        pixels.extend(canvas.finish(noise.as_ref(), &mut rng));
        regions.push(placed);
    }
    Dataset::new(
        Tensor::new(vec![count, cfg.channels, cfg.height, cfg.width], pixels)?,
        Labels::Attributes { tasks, values },
        regions,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip_prob: f64,
}

impl AugmentConfig {
    /// Zero-pad by 4, random crop back to `h × w`, mirror half the time.
    pub fn standard(h: usize, w: usize) -> Self {
        Self {
            pad: 4,
            crop_h: h,
            crop_w: w,
            hflip_prob: 0.5,
        }
    }
}

/// Crop window and mirroring applied to one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Pads, crops at `plan` and optionally mirrors one `[C, H, W]` image.
pub fn crop_image(
    image: &[f64],
    (c, h, w): (usize, usize, usize),
    cfg: &AugmentConfig,
    plan: CropPlan,
) -> Vec<f64> {
    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let mut out = vec![0.0; c * ch * cw];
    for k in 0..c {
        for y in 0..ch {
            let py = (plan.top + y) as isize - cfg.pad as isize;
            if py < 0 || py >= h as isize {
                continue;
            }
            for x in 0..cw {
                let sx = if plan.flip { cw - 1 - x } else { x };
                let px = (plan.left + sx) as isize - cfg.pad as isize;
                if px < 0 || px >= w as isize {
                    continue;
                }
                out[(k * ch + y) * cw + x] = image[(k * h + py as usize) * w + px as usize];
            }
        }
    }
    out
}

fn crop_rect(r: Rect, cfg: &AugmentConfig, plan: CropPlan) -> Option<Rect> {
    let shift = |v: usize, off: usize| (v + cfg.pad) as isize - off as isize;
    let x0 = shift(r.x0, plan.left).max(0) as usize;
    let y0 = shift(r.y0, plan.top).max(0) as usize;
    let x1 = shift(r.x1, plan.left).clamp(0, cfg.crop_w as isize) as usize;
    let y1 = shift(r.y1, plan.top).clamp(0, cfg.crop_h as isize) as usize;
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    let (x0, x1) = if plan.flip {
        (cfg.crop_w - x1, cfg.crop_w - x0)
    } else {
        (x0, x1)
    };
    Some(Rect { x0, y0, x1, y1 })
}

/// Applies pad/crop/flip per image, drawing (top, left, flip) from `rng` in
/// sample order. Regions follow the pixels; labels are unchanged.
pub fn augment(batch: &Dataset, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Dataset> {
    let (c, h, w) = batch.image_shape();
    let (ph, pw) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    if cfg.crop_h == 0 || cfg.crop_w == 0 || cfg.crop_h > ph || cfg.crop_w > pw {
        return invalid(format!(
            "crop {}x{} does not fit the padded {ph}x{pw} image",
            cfg.crop_h, cfg.crop_w
        ));
    }
    if !(0.0..=1.0).contains(&cfg.hflip_prob) {
        return invalid("flip probability must lie in [0, 1]");
    }
    let n = batch.len();
    let mut pixels = Vec::with_capacity(n * c * cfg.crop_h * cfg.crop_w);
    let mut regions = Vec::with_capacity(batch.regions.len());
    for i in 0..n {
        let plan = CropPlan {
            top: rng.random_range(0..=ph - cfg.crop_h),
            left: rng.random_range(0..=pw - cfg.crop_w),
            flip: cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob),
        };
        pixels.extend(crop_image(batch.images.outer(i), (c, h, w), cfg, plan));
        if let Some(rs) = batch.regions.get(i) {
            regions.push(rs.iter().map(|r| r.and_then(|r| crop_rect(r, cfg, plan))).collect());
        }
    }
    Dataset::new(
        Tensor::new(vec![n, c, cfg.crop_h, cfg.crop_w], pixels)?,
        batch.labels.clone(),
        regions,
    )
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return shape_err("mean and std lengths differ");
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return invalid("normalization std must be positive in every channel");
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over every pixel of every image.
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let planes = || (0..n).map(|i| &images.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
            let m = planes().map(|p| p.iter().sum::<f64>()).sum::<f64>() / count;
            let v = planes()
                .map(|p| p.iter().map(|x| (x - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[ch] = m;
            std[ch] = v.sqrt();
        }
        Self::new(mean, std)
    }

    fn map(&self, images: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.mean.len() {
            return shape_err(format!(
                "{} normalization channels for {c}-channel images",
                self.mean.len()
            ));
        }
        let hw = h * w;
        let mut out = images.clone();
        for (j, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = j % c;
            plane
                .iter_mut()
                .for_each(|v| *v = f(*v, self.mean[ch], self.std[ch]));
        }
        Ok(out)
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        self.map(images, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, images: &Tensor) -> Result<Tensor> {
        self.map(images, |v, m, s| v * s + m)
    }
}

/// Draws a fresh permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
