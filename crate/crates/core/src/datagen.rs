//! Synthetic layered scans and the boundary-to-class labeling rule.
//!
//! Depth positions are labeled by half-open intervals between three
//! boundaries: `[0, ilm)` background, `[ilm, rpedc)` class 1,
//! `[rpedc, bm)` class 2 and `[bm, depth)` class 3. A boundary pixel belongs
//! to the deeper layer.
//!
//! B-scans are `(1, 1, depth, width)` with depth along the first spatial
//! axis; column `j` of a B-scan is an A-scan of shape `(1, 1, depth)`.
//! Randomness comes from ChaCha8 streams ([`crate::rng`]), one per scan, so
//! output is identical across platforms and independent of split sizes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 4;

/// Mean intensity of each class (background, 1, 2, 3).
pub const CLASS_INTENSITY: [f32; N_CLASSES] = [0.1, 0.7, 0.45, 0.25];

/// Boundary depths per column (one column for an A-scan).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundaries {
    pub ilm: Vec<usize>,
    pub rpedc: Vec<usize>,
    pub bm: Vec<usize>,
}

impl Boundaries {
    pub fn width(&self) -> usize {
        self.ilm.len()
    }

    pub fn column(&self, j: usize) -> Boundaries {
        Boundaries {
            ilm: vec![self.ilm[j]],
            rpedc: vec![self.rpedc[j]],
            bm: vec![self.bm[j]],
        }
    }

    pub fn check(&self, depth: usize) -> Result<()> {
        let w = self.ilm.len();
        if self.rpedc.len() != w || self.bm.len() != w || w == 0 {
            return Err(Error::Boundaries("boundary arrays must share a non-zero width".into()));
        }
        for j in 0..w {
            let (a, b, c) = (self.ilm[j], self.rpedc[j], self.bm[j]);
            if !(a < b && b < c && c < depth) {
                return Err(Error::Boundaries(format!(
                    "column {j}: need 0 <= ilm < rpedc < bm < depth, got {a}, {b}, {c} with depth {depth}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel classes laid out `(depth, width)` row-major.
pub fn labels_from_boundaries(b: &Boundaries, depth: usize) -> Result<Vec<u8>> {
    b.check(depth)?;
    let w = b.width();
    let mut out = vec![0u8; depth * w];
    for j in 0..w {
        for d in 0..depth {
            out[d * w + j] = if d < b.ilm[j] {
                0
            } else if d < b.rpedc[j] {
                1
            } else if d < b.bm[j] {
                2
            } else {
                3
            };
        }
    }
    Ok(out)
}

/// A scan with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `(1, 1, depth)` or `(1, 1, depth, width)`.
    pub intensity: Tensor<f32>,
    pub labels: Vec<u8>,
    pub boundaries: Option<Boundaries>,
}

impl Volume {
    pub fn new(intensity: Tensor<f32>, labels: Vec<u8>, boundaries: Option<Boundaries>) -> Result<Self> {
        let l = intensity.layout()?;
        if l.batch != 1 || l.channels != 1 {
            return Err(shape_err!("volume intensity must be (1, 1, ...), got {:?}", intensity.shape()));
        }
        if labels.len() != l.spatial_len() {
            return Err(shape_err!("{} labels for {} pixels", labels.len(), l.spatial_len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= N_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{N_CLASSES}")));
        }
        Ok(Self {
            intensity,
            labels,
            boundaries,
        })
    }

    pub fn rank(&self) -> usize {
        self.intensity.shape().len() - 2
    }

    pub fn depth(&self) -> usize {
        self.intensity.shape()[2]
    }

    pub fn width(&self) -> usize {
        if self.rank() == 1 {
            1
        } else {
            self.intensity.shape()[3]
        }
    }
}

/// Splits a B-scan into its columns, in order.
pub fn extract_ascans(v: &Volume) -> Result<Vec<Volume>> {
    if v.rank() != 2 {
        return Err(Error::InvalidArgument("A-scan extraction needs a rank-2 volume".into()));
    }
    let (d, w) = (v.depth(), v.width());
    let src = v.intensity.data();
    (0..w)
        .map(|j| {
            let col: Vec<f32> = (0..d).map(|r| src[r * w + j]).collect();
            let labels = (0..d).map(|r| v.labels[r * w + j]).collect();
            Volume::new(
                Tensor::new(vec![1, 1, d], col)?,
                labels,
                v.boundaries.as_ref().map(|b| b.column(j)),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_reward: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SplitSpec {
    /// Desk-scale split.
    pub const DESK: SplitSpec = SplitSpec {
        n_train: 60,
        n_reward: 24,
        n_val: 2,
        n_test: 24,
    };

    /// Full-scale split sizes.
    pub const FULL: SplitSpec = SplitSpec {
        n_train: 150,
        n_reward: 56,
        n_val: 2,
        n_test: 60,
    };

    pub fn total(&self) -> usize {
        self.n_train + self.n_reward + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_reward == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument(format!("every split needs at least one volume: {self:?}")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub rank: usize,
    pub depth: usize,
    pub width: usize,
    pub split: SplitSpec,
    pub noise_sigma: f64,
    pub drusen_prob: f64,
    /// Depth and width must be multiples of this (2^stages of the network).
    pub size_multiple: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rank: 2,
            depth: 64,
            width: 64,
            split: SplitSpec::DESK,
            noise_sigma: 0.1,
            drusen_prob: 0.3,
            size_multiple: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        let bad = |m: alloc::string::String| Err(Error::InvalidArgument(m));
        if !matches!(self.rank, 1 | 2) {
            return bad(format!("rank must be 1 or 2, got {}", self.rank));
        }
        let m = self.size_multiple.max(1);
        if self.depth < 16 || self.depth % m != 0 {
            return bad(format!("depth {} must be >= 16 and a multiple of {m}", self.depth));
        }
        if self.width == 0 || self.width % m != 0 {
            return bad(format!("width {} must be a positive multiple of {m}", self.width));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.drusen_prob) {
            return bad("noise_sigma must be >= 0 and drusen_prob in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Reward,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Reward, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Reward => "reward",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Volume>,
    pub reward: Vec<Volume>,
    pub val: Vec<Volume>,
    pub test: Vec<Volume>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Volume] {
        match s {
            Split::Train => &self.train,
            Split::Reward => &self.reward,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<Volume> {
        match s {
            Split::Train => &mut self.train,
            Split::Reward => &mut self.reward,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Spatial rank shared by all volumes, if any.
    pub fn rank(&self) -> Option<usize> {
        Split::ALL.iter().flat_map(|&s| self.split(s)).map(Volume::rank).next()
    }

    /// Replaces every B-scan by its A-scans, keeping split membership.
    pub fn to_rank1(&self) -> Result<Dataset> {
        let mut out = Dataset::default();
        for s in Split::ALL {
            for v in self.split(s) {
                match v.rank() {
                    1 => out.split_mut(s).push(v.clone()),
                    _ => out.split_mut(s).extend(extract_ascans(v)?),
                }
            }
        }
        Ok(out)
    }
}

/// One smooth random curve: `base + sum_j a_j cos(2 pi j x / w + phi_j)`.
fn smooth_curve<R: Rng>(r: &mut R, width: usize, base: f64, amp: f64) -> Vec<f64> {
    let terms: Vec<(f64, f64)> = (1..=3)
        .map(|j| (r.random_range(0.0..=amp / j as f64), r.random_range(0.0..core::f64::consts::TAU)))
        .collect();
    (0..width)
        .map(|x| {
            let t = x as f64 / width as f64;
            base + terms
                .iter()
                .enumerate()
                .map(|(j, &(a, phi))| a * libm::cos(core::f64::consts::TAU * (j + 1) as f64 * t + phi))
                .sum::<f64>()
        })
        .collect()
}

/// Generates the boundaries of one B-scan.
fn scan_boundaries<R: Rng>(r: &mut R, cfg: &GenConfig) -> Boundaries {
    let (d, w) = (cfg.depth as f64, cfg.width);
    let ilm = smooth_curve(r, w, 0.2 * d, 0.05 * d);
    let bm = smooth_curve(r, w, 0.7 * d, 0.05 * d);
    let mut lift = vec![0.0f64; w];
    if r.random_bool(cfg.drusen_prob) {
        for _ in 0..r.random_range(1..=3) {
            let centre = r.random_range(0.0..w as f64);
            let height = r.random_range(2.0..=(0.1 * d).max(2.0));
            let spread = r.random_range(2.0..=(w as f64 / 8.0).max(2.0));
            for (x, l) in lift.iter_mut().enumerate() {
                let z = (x as f64 - centre) / spread;
                *l += height * libm::exp(-0.5 * z * z);
            }
        }
    }
    let rpe_thickness = (0.08 * d).max(2.0);
    let round = |v: f64| libm::floor(v + 0.5).max(0.0) as usize;
    let mut b = Boundaries {
        ilm: Vec::with_capacity(w),
        rpedc: Vec::with_capacity(w),
        bm: Vec::with_capacity(w),
    };
    for x in 0..w {
        let bm_x = round(bm[x]).clamp(3, cfg.depth - 1);
        let rp = round(bm[x] - rpe_thickness - lift[x]).clamp(2, bm_x - 1);
        let il = round(ilm[x]).clamp(1, rp - 1);
        b.ilm.push(il);
        b.rpedc.push(rp);
        b.bm.push(bm_x);
    }
    b
}

/// Renders one B-scan from its boundaries.
pub fn render_scan<R: Rng>(r: &mut R, b: &Boundaries, depth: usize, noise_sigma: f64) -> Result<Volume> {
    let w = b.width();
    let labels = labels_from_boundaries(b, depth)?;
    let data = labels
        .iter()
        .map(|&y| {
            let n: f64 = StandardNormal.sample(r);
            CLASS_INTENSITY[y as usize] + (noise_sigma * n) as f32
        })
        .collect();
    Volume::new(Tensor::new(vec![1, 1, depth, w], data)?, labels, Some(b.clone()))
}

/// Scan `index` of the dataset generated with `cfg.seed`, always as a
/// B-scan.
pub fn generate_scan(cfg: &GenConfig, index: usize) -> Result<Volume> {
    let mut r = rng::indexed_stream(cfg.seed, "datagen.scan", index as u64);
    let b = scan_boundaries(&mut r, cfg);
    render_scan(&mut r, &b, cfg.depth, cfg.noise_sigma)
}

/// Generates all four splits. Scans are numbered consecutively across
/// train, reward, val and test, so splits are disjoint. At rank 1 every
/// B-scan is replaced by its `width` A-scans.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut out = Dataset::default();
    let sizes = [cfg.split.n_train, cfg.split.n_reward, cfg.split.n_val, cfg.split.n_test];
    let mut index = 0;
    for (s, n) in Split::ALL.into_iter().zip(sizes) {
        for _ in 0..n {
            let v = generate_scan(cfg, index)?;
            index += 1;
            if cfg.rank == 1 {
                out.split_mut(s).extend(extract_ascans(&v)?);
            } else {
                out.split_mut(s).push(v);
            }
        }
    }
    Ok(out)
}

/// Stacks volumes of identical shape into `(n, 1, spatial...)` plus labels.
pub fn batch(volumes: &[&Volume]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = volumes.first().ok_or_else(|| Error::Empty("batch of zero volumes".into()))?;
    let shape = first.intensity.shape();
    let mut data = Vec::with_capacity(volumes.len() * first.intensity.len());
    let mut labels = Vec::with_capacity(volumes.len() * first.labels.len());
    for v in volumes {
        if v.intensity.shape() != shape {
            return Err(shape_err!(
                "cannot batch volumes of shapes {:?} and {:?}",
                shape,
                v.intensity.shape()
            ));
        }
        data.extend_from_slice(v.intensity.data());
        labels.extend_from_slice(&v.labels);
    }
    let mut s = shape.to_vec();
    s[0] = volumes.len();
    Ok((Tensor::new(s, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rule_example() {
        let b = Boundaries {
            ilm: vec![2],
            rpedc: vec![4],
            bm: vec![6],
        };
        assert_eq!(labels_from_boundaries(&b, 8).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn ilm_at_top_leaves_no_background() {
        let b = Boundaries {
            ilm: vec![0],
            rpedc: vec![3],
            bm: vec![5],
        };
        assert!(!labels_from_boundaries(&b, 8).unwrap().contains(&0));
    }

    #[test]
    fn unordered_boundaries_are_rejected() {
        let b = Boundaries {
            ilm: vec![4],
            rpedc: vec![2],
            bm: vec![6],
        };
        assert!(matches!(labels_from_boundaries(&b, 8), Err(Error::Boundaries(_))));
        let b = Boundaries {
            ilm: vec![1],
            rpedc: vec![2],
            bm: vec![8],
        };
        assert!(labels_from_boundaries(&b, 8).is_err());
    }

    fn tiny(rank: usize) -> GenConfig {
        GenConfig {
            seed: 4,
            rank,
            depth: 32,
            width: 16,
            split: SplitSpec {
                n_train: 3,
                n_reward: 2,
                n_val: 1,
                n_test: 2,
            },
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        assert_eq!(generate(&tiny(2)).unwrap(), generate(&tiny(2)).unwrap());
        let mut other = tiny(2);
        other.seed = 5;
        assert_ne!(generate(&tiny(2)).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn split_counts() {
        let d = generate(&tiny(2)).unwrap();
        assert_eq!([d.train.len(), d.reward.len(), d.val.len(), d.test.len()], [3, 2, 1, 2]);
        let d1 = generate(&tiny(1)).unwrap();
        assert_eq!(d1.train.len(), 3 * 16);
        assert_eq!(d1, d.to_rank1().unwrap());
    }

    #[test]
    fn ascans_are_columns() {
        let v = generate_scan(&tiny(2), 0).unwrap();
        let cols = extract_ascans(&v).unwrap();
        assert_eq!(cols.len(), 16);
        let (d, w) = (v.depth(), v.width());
        let mut rebuilt = vec![0.0f32; d * w];
        for (j, c) in cols.iter().enumerate() {
            assert_eq!(c.intensity.shape(), &[1, 1, d]);
            for r in 0..d {
                rebuilt[r * w + j] = c.intensity.data()[r];
                assert_eq!(c.labels[r], v.labels[r * w + j]);
            }
        }
        assert_eq!(rebuilt, v.intensity.data());
        assert!(extract_ascans(&cols[0]).is_err());
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut c = tiny(2);
        c.depth = 30;
        assert!(generate(&c).is_err());
        c = tiny(2);
        c.split.n_val = 0;
        assert!(generate(&c).is_err());
    }
}
