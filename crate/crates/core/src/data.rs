//! Synthetic few-shot datasets and the episodic protocol.
//!
//! A [`DatasetBundle`] holds every image of every split. Classes are
//! parameterized pattern families; each novel (and validation) class is a
//! parameter-space neighbour of one base class, so features learned on the
//! base split have something to transfer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" => Ok(Split::Novel),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Generator parameters of one class.
#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// Gaussian-windowed sinusoid.
    Grating { angle: f64, freq: f64, phase: f64 },
    /// Sum of isotropic Gaussian blobs at fixed offsets.
    Blobs { centers: Vec<(f64, f64)>, sigma: f64 },
    /// Annulus.
    Ring { radius: f64, width: f64 },
    /// Two arms meeting at a vertex.
    Corner { orientation: f64, opening: f64, arm: f64 },
}

impl Pattern {
    fn random(family: usize, rng: &mut Stream) -> Self {
        match family % 4 {
            0 => Pattern::Grating {
                angle: rng.range(0.0, PI),
                freq: rng.range(1.5, 3.5),
                phase: rng.range(0.0, 2.0 * PI),
            },
            1 => Pattern::Blobs {
                centers: (0..3)
                    .map(|_| (rng.range(-0.6, 0.6), rng.range(-0.6, 0.6)))
                    .collect(),
                sigma: rng.range(0.12, 0.22),
            },
            2 => Pattern::Ring {
                radius: rng.range(0.25, 0.7),
                width: rng.range(0.06, 0.14),
            },
            _ => Pattern::Corner {
                orientation: rng.range(0.0, 2.0 * PI),
                opening: rng.range(0.4 * PI, 0.9 * PI),
                arm: rng.range(0.5, 0.8),
            },
        }
    }

    /// A close relative: same family, parameters moved by a fixed amount
    /// in a random direction.
    fn neighbour(&self, rng: &mut Stream) -> Self {
        let sign = |rng: &mut Stream| if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        match self {
            Pattern::Grating { angle, freq, phase } => Pattern::Grating {
                angle: angle + sign(rng) * PI / 6.0,
                freq: freq * (1.0 + 0.25 * sign(rng)),
                phase: *phase,
            },
            Pattern::Blobs { centers, sigma } => {
                let mut centers = centers.clone();
                let i = rng.below(centers.len());
                let a = rng.range(0.0, 2.0 * PI);
                centers[i].0 = (centers[i].0 + 0.45 * libm::cos(a)).clamp(-0.8, 0.8);
                centers[i].1 = (centers[i].1 + 0.45 * libm::sin(a)).clamp(-0.8, 0.8);
                Pattern::Blobs { centers, sigma: *sigma }
            }
            Pattern::Ring { radius, width } => Pattern::Ring {
                radius: (radius + sign(rng) * 0.18).clamp(0.15, 0.85),
                width: *width,
            },
            Pattern::Corner { orientation, opening, arm } => Pattern::Corner {
                orientation: *orientation,
                opening: opening + sign(rng) * PI / 5.0,
                arm: *arm,
            },
        }
    }

    /// Intensity at normalized coordinates `(u, v)` in `[-1, 1]^2`.
    fn value(&self, u: f64, v: f64) -> f64 {
        match self {
            Pattern::Grating { angle, freq, phase } => {
                let t = u * libm::cos(*angle) + v * libm::sin(*angle);
                let env = libm::exp(-(u * u + v * v) / (2.0 * 0.45 * 0.45));
                libm::cos(2.0 * PI * freq * t + phase) * env
            }
            Pattern::Blobs { centers, sigma } => centers
                .iter()
                .map(|(cx, cy)| {
                    let d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                    libm::exp(-d2 / (2.0 * sigma * sigma))
                })
                .sum(),
            Pattern::Ring { radius, width } => {
                let r = libm::sqrt(u * u + v * v);
                libm::exp(-(r - radius) * (r - radius) / (2.0 * width * width))
            }
            Pattern::Corner { orientation, opening, arm } => {
                let half = opening / 2.0;
                [orientation - half, orientation + half]
                    .iter()
                    .map(|a| {
                        let d = segment_distance(u, v, arm * libm::cos(*a), arm * libm::sin(*a));
                        libm::exp(-d * d / (2.0 * 0.07 * 0.07))
                    })
                    .fold(0.0, f64::max)
            }
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Pattern::Grating { .. } => "grating",
            Pattern::Blobs { .. } => "blobs",
            Pattern::Ring { .. } => "ring",
            Pattern::Corner { .. } => "corner",
        }
    }
}

/// Distance from `(u, v)` to the segment from the origin to `(ex, ey)`.
fn segment_distance(u: f64, v: f64, ex: f64, ey: f64) -> f64 {
    let len2 = ex * ex + ey * ey;
    let t = ((u * ex + v * ey) / len2).clamp(0.0, 1.0);
    let (dx, dy) = (u - t * ex, v - t * ey);
    libm::sqrt(dx * dx + dy * dy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub split: Split,
    pub pattern: Pattern,
    /// Base class this class was derived from (val/novel only).
    pub parent: Option<usize>,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub base_classes: usize,
    pub val_classes: usize,
    pub novel_classes: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum random translation of the pattern, in pixels.
    pub max_shift: usize,
    /// Number of random distractor blobs added to each image.
    pub clutter: usize,
    /// Smallest number of classes a split must provide (the episode way).
    pub min_way: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            base_classes: 10,
            val_classes: 5,
            novel_classes: 5,
            images_per_class: 40,
            channels: 1,
            size: 32,
            noise: 0.3,
            max_shift: 0,
            clutter: 0,
            min_way: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    /// `[num, ch, H, W]`
    pub images: Tensor,
    pub class_ids: Vec<usize>,
    pub splits: Vec<Split>,
    /// Generator records by class id; empty for ingested datasets.
    pub catalog: Vec<ClassRecord>,
}

impl DatasetBundle {
    /// Assembles a bundle, checking per-image bookkeeping and that no class
    /// id appears in two splits.
    pub fn new(images: Tensor, class_ids: Vec<usize>, splits: Vec<Split>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != class_ids.len() || class_ids.len() != splits.len() {
            return Err(Error::Config(format!(
                "bundle of {:?} images with {} ids and {} splits",
                images.shape(),
                class_ids.len(),
                splits.len()
            )));
        }
        let b = Self {
            images,
            class_ids,
            splits,
            catalog: Vec::new(),
        };
        b.check_disjoint()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// `(channels, height, width)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, index: usize) -> Tensor {
        self.images.slab(index)
    }

    /// Image indices per class for one split, classes in ascending id order.
    pub fn split_index(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (&c, &s)) in self.class_ids.iter().zip(&self.splits).enumerate() {
            if s == split {
                map.entry(c).or_default().push(i);
            }
        }
        map
    }

    pub fn classes(&self, split: Split) -> Vec<usize> {
        self.split_index(split).into_keys().collect()
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<usize, Split> = BTreeMap::new();
        for (&c, &s) in self.class_ids.iter().zip(&self.splits) {
            if let Some(prev) = owner.insert(c, s) {
                if prev != s {
                    return Err(Error::Config(format!(
                        "class {c} appears in both {prev} and {s} splits"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Renders the noise-free prototype of `pattern`, shifted by `(dy, dx)`
/// pixels, into a `size x size` plane normalized to unit peak magnitude.
fn render(pattern: &Pattern, size: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut plane = Vec::with_capacity(size * size);
    let half = (size as f64 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let v = ((y as isize - dy) as f64 - half) / half;
            let u = ((x as isize - dx) as f64 - half) / half;
            plane.push(pattern.value(u, v));
        }
    }
    let peak = plane.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    if peak > 0.0 {
        plane.iter_mut().for_each(|v| *v /= peak);
    }
    plane
}

/// Generates a bundle deterministically from `seed`.
pub fn synth_generate(cfg: &GenConfig, seed: u64) -> Result<DatasetBundle> {
    if cfg.size < 4 || cfg.channels == 0 || cfg.images_per_class == 0 {
        return Err(Error::Config(format!("degenerate generator config {cfg:?}")));
    }
    if cfg.base_classes < cfg.min_way || cfg.novel_classes < cfg.min_way {
        return Err(Error::Config(format!(
            "need at least {} base and novel classes, got {} and {}",
            cfg.min_way, cfg.base_classes, cfg.novel_classes
        )));
    }
    if cfg.val_classes > 0 && cfg.val_classes < cfg.min_way {
        return Err(Error::Config(format!(
            "validation split has {} classes, fewer than {}",
            cfg.val_classes, cfg.min_way
        )));
    }
    let mut class_rng = Stream::new(seed, "synth/classes");
    let mut catalog = Vec::new();
    for id in 0..cfg.base_classes {
        catalog.push(ClassRecord {
            id,
            split: Split::Base,
            pattern: Pattern::random(id, &mut class_rng),
            parent: None,
        });
    }
    // Val and novel classes derive from base classes in a shuffled order so
    // that every family is represented.
    let mut parents: Vec<usize> = (0..cfg.base_classes).collect();
    class_rng.shuffle(&mut parents);
    for (split, count) in [(Split::Val, cfg.val_classes), (Split::Novel, cfg.novel_classes)] {
        for j in 0..count {
            let parent = parents[j % parents.len()];
            let pattern = catalog[parent].pattern.neighbour(&mut class_rng);
            catalog.push(ClassRecord {
                id: catalog.len(),
                split,
                pattern,
                parent: Some(parent),
            });
        }
    }

    let (ch, size) = (cfg.channels, cfg.size);
    let plane = size * size;
    let total = catalog.len() * cfg.images_per_class;
    let mut data = Vec::with_capacity(total * ch * plane);
    let mut class_ids = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let clutter_blob = |cy: f64, cx: f64| Pattern::Blobs {
        centers: vec![(cx, cy)],
        sigma: 0.1,
    };
    for rec in &catalog {
        let mut rng = Stream::indexed(seed, "synth/images", rec.id as u64);
        for _ in 0..cfg.images_per_class {
            let shift = cfg.max_shift as isize;
            let (dy, dx) = if shift > 0 {
                (
                    rng.below(2 * cfg.max_shift + 1) as isize - shift,
                    rng.below(2 * cfg.max_shift + 1) as isize - shift,
                )
            } else {
                (0, 0)
            };
            let mut img = render(&rec.pattern, size, dy, dx);
            for _ in 0..cfg.clutter {
                let blob = clutter_blob(rng.range(-0.9, 0.9), rng.range(-0.9, 0.9));
                let amp = rng.range(0.5, 1.0) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                for (p, c) in img.iter_mut().zip(render(&blob, size, 0, 0)) {
                    *p += amp * c;
                }
            }
            for c in 0..ch {
                let gain = 1.0 - 0.25 * c as f64;
                for &p in &img {
                    let noise = if cfg.noise > 0.0 { cfg.noise * rng.normal() } else { 0.0 };
                    data.push(gain * p + noise);
                }
            }
            class_ids.push(rec.id);
            splits.push(rec.split);
        }
    }
    let images = Tensor::new(&[total, ch, size, size], data)?;
    let mut bundle = DatasetBundle::new(images, class_ids, splits)?;
    bundle.catalog = catalog;
    Ok(bundle)
}

/// One N-way M-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// `[N*M, ch, H, W]`, way-major.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `[m_q, ch, H, W]`; after [`rotate_queries`], `[4*m_q, ...]` in
    /// rotation-major blocks (all 0° first).
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Original class id of each query.
    pub query_global: Vec<usize>,
    /// Quarter turns applied to each query; empty until rotated.
    pub rotation_labels: Vec<usize>,
    /// Class id of each way.
    pub way_classes: Vec<usize>,
    /// Bundle indices of the support and (un-rotated) query images.
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    /// Number of queries before rotation.
    pub fn base_queries(&self) -> usize {
        self.query_indices.len()
    }
}

/// Samples an episode from one split: `n_way` classes uniformly without
/// replacement, a random way-label bijection, then `k_shot` support and
/// `q_per_class` query images per class, disjoint.
pub fn sample_episode(
    bundle: &DatasetBundle,
    split: Split,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    rng: &mut Stream,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Sampling("way and shot must be positive".into()));
    }
    let index = bundle.split_index(split);
    if index.len() < n_way {
        return Err(Error::Sampling(format!(
            "{split} split has {} classes, fewer than {n_way}",
            index.len()
        )));
    }
    let mut classes: Vec<usize> = index.keys().copied().collect();
    rng.shuffle(&mut classes);
    classes.truncate(n_way);

    let mut support_indices = Vec::with_capacity(n_way * k_shot);
    let mut query_indices = Vec::with_capacity(n_way * q_per_class);
    let mut support_labels = Vec::new();
    let mut query_labels = Vec::new();
    let mut query_global = Vec::new();
    for (way, &class) in classes.iter().enumerate() {
        let mut pool = index[&class].clone();
        if pool.len() < k_shot + q_per_class {
            return Err(Error::Sampling(format!(
                "class {class} has {} images, needs {}",
                pool.len(),
                k_shot + q_per_class
            )));
        }
        rng.shuffle(&mut pool);
        support_indices.extend_from_slice(&pool[..k_shot]);
        support_labels.extend(core::iter::repeat_n(way, k_shot));
        query_indices.extend_from_slice(&pool[k_shot..k_shot + q_per_class]);
        query_labels.extend(core::iter::repeat_n(way, q_per_class));
        query_global.extend(core::iter::repeat_n(class, q_per_class));
    }
    let gather = |idx: &[usize]| -> Result<Tensor> {
        if idx.is_empty() {
            let (c, h, w) = bundle.image_dims();
            // A zero-query episode still carries a well-formed tensor.
            return Tensor::new(&[1, c, h, w], vec![0.0; c * h * w]);
        }
        let imgs: Vec<Tensor> = idx.iter().map(|&i| bundle.image(i)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        Tensor::stack(&refs)
    };
    Ok(Episode {
        n_way,
        k_shot,
        support: gather(&support_indices)?,
        support_labels,
        query: gather(&query_indices)?,
        query_labels,
        query_global,
        rotation_labels: Vec::new(),
        way_classes: classes,
        support_indices,
        query_indices,
    })
}

/// One clockwise quarter turn of a square `[ch, S, S]` image: the pixel at
/// `(r, c)` moves to `(c, S-1-r)`.
pub fn rot90(img: &[f64], ch: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for k in 0..ch {
        let base = k * size * size;
        for r in 0..size {
            for c in 0..size {
                out[base + c * size + (size - 1 - r)] = img[base + r * size + c];
            }
        }
    }
    out
}

/// `quarter_turns` clockwise quarter turns.
pub fn rotate(img: &[f64], ch: usize, size: usize, quarter_turns: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    for _ in 0..quarter_turns % 4 {
        out = rot90(&out, ch, size);
    }
    out
}

/// Replaces the queries with their 0°, 90°, 180° and 270° rotations, in
/// rotation-major blocks, replicating way and class labels.
pub fn rotate_queries(episode: &Episode) -> Result<Episode> {
    let s = episode.query.shape();
    let (m, ch, h, w) = (s[0], s[1], s[2], s[3]);
    if h != w {
        return Err(Error::Contract(format!("cannot rotate non-square {h}x{w} images")));
    }
    if !episode.rotation_labels.is_empty() {
        return Err(Error::Contract("queries are already rotated".into()));
    }
    let m = m.min(episode.base_queries());
    let per = ch * h * w;
    let mut data = Vec::with_capacity(4 * m * per);
    let mut rotation_labels = Vec::with_capacity(4 * m);
    for turn in 0..4 {
        for q in 0..m {
            data.extend(rotate(&episode.query.data()[q * per..(q + 1) * per], ch, h, turn));
            rotation_labels.push(turn);
        }
    }
    let repeat4 = |v: &[usize]| -> Vec<usize> { (0..4).flat_map(|_| v.iter().copied()).collect() };
    let mut out = episode.clone();
    if m > 0 {
        out.query = Tensor::new(&[4 * m, ch, h, w], data)?;
    }
    out.query_labels = repeat4(&episode.query_labels);
    out.query_global = repeat4(&episode.query_global);
    out.rotation_labels = rotation_labels;
    Ok(out)
}

/// Aggregate of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub mean_accuracy: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
    pub episodes: usize,
    pub config_hash: String,
}

impl MetricsRecord {
    /// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation
    /// `s` (divisor `n - 1`).
    pub fn from_accuracies(accuracies: &[f64], config_hash: &str) -> Result<Self> {
        let n = accuracies.len();
        if n < 2 {
            return Err(Error::Contract(format!(
                "confidence interval needs at least 2 episodes, got {n}"
            )));
        }
        // Offsets from the first value keep a constant series exactly at zero spread.
        let pivot = accuracies[0];
        let shift = accuracies.iter().map(|a| a - pivot).sum::<f64>() / n as f64;
        let var = accuracies.iter().map(|a| (a - pivot - shift) * (a - pivot - shift)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            mean_accuracy: pivot + shift,
            ci95: 1.96 * libm::sqrt(var) / libm::sqrt(n as f64),
            episodes: n,
            config_hash: config_hash.into(),
        })
    }
}
