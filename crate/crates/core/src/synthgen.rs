//! Seeded synthetic feature world.
//!
//! Every class owns a unit prototype in `R^C`; a pixel feature is the
//! prototype of its label plus isotropic Gaussian noise. Class `0` is
//! background, `1..n_base` are base objects and `n_base..n_base + n_novel`
//! are novel. Each draw is a pure function of `(seed, stream tag, counter)`.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{decoder_widths, EpisodeBatch};
use crate::gfst;
use crate::pkl::LabelMask;
use crate::registry::SupportSet;
use crate::tensor::{dot, norm, Real, Tensor};

const MAX_TRIES: usize = 2000;

/// Independent random streams of one world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    Train = 2,
    Eval = 3,
    Support = 4,
    Holdout = 5,
}

/// Reproducible generator for `(seed, stream, counter)`.
pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | (counter & ((1 << 48) - 1)));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Blocks,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub channels: usize,
    /// Base classes including background.
    pub n_base: usize,
    pub n_novel: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    /// Degrees, in `(0, 90]`.
    pub min_pairwise_angle: f64,
    pub layout: Layout,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            n_base: 6,
            n_novel: 2,
            height: 32,
            width: 32,
            noise_sigma: 0.3,
            min_pairwise_angle: 60.0,
            layout: Layout::Blocks,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 || self.channels % 8 != 0 {
            return Err(Error::Config(format!(
                "world channels must be a positive multiple of 8, got {}",
                self.channels
            )));
        }
        decoder_widths(self.channels)?;
        if self.n_base < 2 {
            return Err(Error::Config("n_base must be ≥ 2 (background plus one object)".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!("image {}×{} is smaller than 4×4", self.height, self.width)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be finite and ≥ 0", self.noise_sigma)));
        }
        if !(self.min_pairwise_angle > 0.0 && self.min_pairwise_angle <= 90.0) {
            return Err(Error::Config(format!(
                "min_pairwise_angle {} outside (0, 90]",
                self.min_pairwise_angle
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_novel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Unit prototypes, one row per class id.
    pub prototypes: Tensor<f64>,
}

/// Builds the prototype matrix. Prototype `i` depends only on the seed
/// and prototypes `0..i`, so enlarging `n_novel` keeps existing classes.
pub fn make_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (n, c) = (spec.n_classes(), spec.channels);
    let max_cos = spec.min_pairwise_angle.to_radians().cos().max(0.0);
    let orthogonal = spec.min_pairwise_angle >= 90.0;
    let mut rng = stream_rng(spec.seed, Stream::World, 0);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = None;
        if !orthogonal {
            for _ in 0..MAX_TRIES {
                let v = unit(gaussian(&mut rng, c));
                if rows.iter().all(|r| dot(r, &v) <= max_cos) {
                    accepted = Some(v);
                    break;
                }
            }
        }
        let v = match accepted {
            Some(v) => v,
            None if i < c => orthogonal_draw(&mut rng, &rows, c),
            None => {
                return Err(Error::Config(format!(
                    "cannot place {} prototypes {}° apart in {} dimensions",
                    n, spec.min_pairwise_angle, c
                )))
            }
        };
        rows.push(v);
    }
    Ok(World {
        spec: spec.clone(),
        prototypes: Tensor::new(vec![n, c], rows.concat())?,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Random unit vector orthogonal to every row (requires `rows.len() < c`).
fn orthogonal_draw(rng: &mut ChaCha8Rng, rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for r in rows {
        let mut v = r.clone();
        for b in &basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if norm(&v) > 1e-9 {
            basis.push(unit(v));
        }
    }
    loop {
        let mut v = gaussian(rng, c);
        for _ in 0..2 {
            for b in &basis {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        if norm(&v) > 1e-6 {
            return unit(v);
        }
    }
}

impl World {
    pub fn base_ids(&self) -> Vec<u32> {
        (0..self.spec.n_base as u32).collect()
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        (self.spec.n_base as u32..self.spec.n_classes() as u32).collect()
    }

    pub fn is_novel(&self, class_id: u32) -> bool {
        (self.spec.n_base..self.spec.n_classes()).contains(&(class_id as usize))
    }

    pub fn prototype(&self, class_id: u32) -> &[f64] {
        self.prototypes.slab(class_id as usize)
    }

    /// `world.json` plus `prototypes.gfst`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("world.json"), json + "\n")?;
        gfst::write(dir.join("prototypes.gfst"), &self.prototypes)
    }

    /// Loads a saved world and checks the prototypes against a rebuild.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("world.json"))
            .map_err(|e| Error::Config(format!("missing world in {}: {}", dir.display(), e)))?;
        let spec: WorldSpec = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let world = make_world(&spec)?;
        let stored: Tensor<f64> = gfst::read_as(dir.join("prototypes.gfst"))?;
        if stored != world.prototypes {
            return Err(Error::Data("stored prototypes do not match the world spec".into()));
        }
        Ok(world)
    }
}

/// One rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    /// `1×C×H×W`.
    pub feat: Tensor<T>,
    /// `1×H×W` class ids.
    pub labels: LabelMask,
    /// `1×H×W`, `labels != 0`.
    pub fg: Tensor<T>,
}

/// Axis-aligned rectangle per object, one per vertical strip. Returns the
/// label map and each object's pixel count.
pub fn block_layout(h: usize, w: usize, classes: &[u32], rng: &mut impl Rng) -> Result<(Vec<u32>, Vec<usize>)> {
    paint(h, w, classes, rng, false)
}

/// Like [`block_layout`] with each rectangle replaced by its inscribed ellipse.
pub fn blob_layout(h: usize, w: usize, classes: &[u32], rng: &mut impl Rng) -> Result<(Vec<u32>, Vec<usize>)> {
    paint(h, w, classes, rng, true)
}

fn paint(h: usize, w: usize, classes: &[u32], rng: &mut impl Rng, ellipse: bool) -> Result<(Vec<u32>, Vec<usize>)> {
    let k = classes.len();
    if k == 0 || w < 2 * k || h < 3 {
        return Err(Error::Config(format!("{} objects do not fit a {}×{} image", k, h, w)));
    }
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::with_capacity(k);
    let strip = w / k;
    for (s, &class) in classes.iter().enumerate() {
        let x_lo = s * strip;
        let sw = if s + 1 == k { w - x_lo } else { strip };
        let rw = rng.random_range((sw / 2).max(1)..=sw.saturating_sub(1).max(1));
        let rh = rng.random_range((h / 3).max(1)..=(2 * h / 3).max(1));
        let x0 = x_lo + rng.random_range(0..=sw - rw);
        let y0 = rng.random_range(0..=h - rh);
        let mut area = 0;
        let (cy, cx) = ((rh as f64 - 1.0) / 2.0, (rw as f64 - 1.0) / 2.0);
        let (ry, rx) = (rh as f64 / 2.0, rw as f64 / 2.0);
        for y in 0..rh {
            for x in 0..rw {
                let inside = !ellipse || {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    labels[(y0 + y) * w + x0 + x] = class;
                    area += 1;
                }
            }
        }
        areas.push(area);
    }
    Ok((labels, areas))
}

/// Renders an image holding `classes` (object ids, background implied).
pub fn sample_image<T: Real>(world: &World, classes: &[u32], stream: Stream, counter: u64) -> Result<SyntheticSample<T>> {
    let spec = &world.spec;
    if let Some(&bad) = classes.iter().find(|&&c| c == 0 || c as usize >= spec.n_classes()) {
        return Err(Error::Config(format!("class {} is not an object class of this world", bad)));
    }
    let mut rng = stream_rng(spec.seed, stream, counter);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let (labels, _) = match spec.layout {
        Layout::Blocks => block_layout(h, w, classes, &mut rng)?,
        Layout::Blobs => blob_layout(h, w, classes, &mut rng)?,
    };
    let sigma = spec.noise_sigma;
    let mut feat = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for (p, &l) in labels.iter().enumerate() {
            let noise: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            feat[ch * h * w + p] = T::lit(world.prototype(l)[ch] + noise);
        }
    }
    let fg = labels.iter().map(|&l| if l != 0 { T::one() } else { T::zero() }).collect();
    Ok(SyntheticSample {
        feat: Tensor::new(vec![1, c, h, w], feat)?,
        labels: LabelMask::new([1, h, w], labels)?,
        fg: Tensor::new(vec![1, h, w], fg)?,
    })
}

fn pick(rng: &mut ChaCha8Rng, pool: &[u32], k: usize) -> Vec<u32> {
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

fn check_objects_per_image(world: &World, classes_per_image: usize) -> Result<()> {
    if classes_per_image == 0 || classes_per_image >= world.spec.n_base {
        return Err(Error::Config(format!(
            "classes_per_image {} must be in 1..{} (base objects available)",
            classes_per_image, world.spec.n_base
        )));
    }
    Ok(())
}

/// Base objects (without background) drawn for an image.
fn base_objects(world: &World, rng: &mut ChaCha8Rng, k: usize) -> Vec<u32> {
    let pool: Vec<u32> = (1..world.spec.n_base as u32).collect();
    pick(rng, &pool, k)
}

/// Base-only image for a stream; its classes are drawn from the same
/// `(stream, counter)` generator as its pixels.
pub fn sample_base_image<T: Real>(world: &World, classes_per_image: usize, stream: Stream, counter: u64) -> Result<SyntheticSample<T>> {
    check_objects_per_image(world, classes_per_image)?;
    let mut rng = stream_rng(world.spec.seed ^ 0x5eed, stream, counter);
    let classes = base_objects(world, &mut rng, classes_per_image);
    sample_image(world, &classes, stream, counter)
}

/// Training pseudo episode number `counter`: `batch` base-only images.
pub fn sample_episode<T: Real>(world: &World, batch: usize, classes_per_image: usize, counter: u64) -> Result<EpisodeBatch<T>> {
    if batch == 0 {
        return Err(Error::Config("batch must be ≥ 1".into()));
    }
    let samples = (0..batch as u64)
        .map(|i| sample_base_image(world, classes_per_image, Stream::Train, counter * batch as u64 + i))
        .collect::<Result<Vec<SyntheticSample<T>>>>()?;
    stack(&samples)
}

/// Stacks single-image samples into an episode with truth attached.
pub fn stack<T: Real>(samples: &[SyntheticSample<T>]) -> Result<EpisodeBatch<T>> {
    let first = samples.first().ok_or_else(|| Error::Config("no samples to stack".into()))?;
    let [_, c, h, w]: [usize; 4] = first.feat.dims().try_into().unwrap();
    let b = samples.len();
    let feats = samples.iter().flat_map(|s| s.feat.data().iter().copied()).collect();
    let fg = samples.iter().flat_map(|s| s.fg.data().iter().copied()).collect();
    let labels: Vec<LabelMask> = samples.iter().map(|s| s.labels.clone()).collect();
    EpisodeBatch::new(
        Tensor::new(vec![b, c, h, w], feats)?,
        Some(Tensor::new(vec![b, h, w], fg)?),
        Some(LabelMask::concat(&labels)?),
    )
}

/// Evaluation image `i`: novel object `novel[i mod n_novel]` (if any novel
/// classes exist) alongside base objects, `classes_per_image` objects total.
pub fn sample_eval_image<T: Real>(world: &World, classes_per_image: usize, counter: u64) -> Result<SyntheticSample<T>> {
    check_objects_per_image(world, classes_per_image)?;
    let novel = world.novel_ids();
    let mut rng = stream_rng(world.spec.seed ^ 0x5eed, Stream::Eval, counter);
    let mut classes = if novel.is_empty() {
        base_objects(world, &mut rng, classes_per_image)
    } else {
        let mut c = base_objects(world, &mut rng, classes_per_image - 1);
        let slot = rng.random_range(0..=c.len());
        c.insert(slot, novel[counter as usize % novel.len()]);
        c
    };
    classes.dedup();
    sample_image(world, &classes, Stream::Eval, counter)
}

/// `k_shots` annotated images of a novel class, each also holding one base
/// object. Shot `j` of class `c` uses counter `c·1024 + j`, independent of
/// which other classes are sampled.
pub fn sample_supports<T: Real>(world: &World, class_id: u32, k_shots: usize) -> Result<SupportSet<T>> {
    if !world.is_novel(class_id) {
        return Err(Error::Config(format!("class {} is not in the novel split", class_id)));
    }
    if k_shots == 0 || k_shots > 1024 {
        return Err(Error::Config(format!("k_shots {} outside 1..=1024", k_shots)));
    }
    let spec = &world.spec;
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut feats = Vec::with_capacity(k_shots * c * h * w);
    let mut masks = Vec::with_capacity(k_shots * h * w);
    for j in 0..k_shots as u64 {
        let counter = class_id as u64 * 1024 + j;
        let mut rng = stream_rng(spec.seed ^ 0x5eed, Stream::Support, counter);
        let mut classes = base_objects(world, &mut rng, 1);
        let slot = rng.random_range(0..=1);
        classes.insert(slot, class_id);
        let s: SyntheticSample<T> = sample_image(world, &classes, Stream::Support, counter)?;
        feats.extend_from_slice(s.feat.data());
        masks.extend(s.labels.labels().iter().map(|&l| if l == class_id { T::one() } else { T::zero() }));
    }
    SupportSet::new(
        Tensor::new(vec![k_shots, c, h, w], feats)?,
        Tensor::new(vec![k_shots, h, w], masks)?,
        class_id,
    )
}

/// The first `sessions · classes_per_session` novel classes, chunked into
/// sessions in id order.
pub fn make_cifss_stream(world: &World, sessions: usize, classes_per_session: usize) -> Result<Vec<Vec<u32>>> {
    let need = sessions * classes_per_session;
    let novel = world.novel_ids();
    if classes_per_session == 0 || need > novel.len() {
        return Err(Error::Config(format!(
            "{} sessions × {} classes exceed the {} novel classes",
            sessions,
            classes_per_session,
            novel.len()
        )));
    }
    Ok(novel[..need].chunks(classes_per_session).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n_base: usize, n_novel: usize) -> WorldSpec {
        WorldSpec {
            channels: 8,
            n_base,
            n_novel,
            height: 12,
            width: 12,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn orthonormal_world() {
        let s = WorldSpec {
            min_pairwise_angle: 90.0,
            ..spec(4, 4)
        };
        let w = make_world(&s).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let g = dot(w.prototype(i), w.prototype(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-6, "gram[{}][{}] = {}", i, j, g);
            }
        }
    }

    #[test]
    fn angles_and_determinism() {
        let s = spec(6, 2);
        let a = make_world(&s).unwrap();
        assert_eq!(a, make_world(&s).unwrap());
        let cmax = 60f64.to_radians().cos();
        for i in 0..8 {
            assert!((norm(a.prototype(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(a.prototype(i), a.prototype(j)) <= cmax + 1e-12);
            }
        }
        let bigger = make_world(&WorldSpec { n_novel: 5, ..s }).unwrap();
        assert_eq!(&bigger.prototypes.data()[..8 * 8], a.prototypes.data());
    }

    #[test]
    fn infeasible_and_invalid_specs() {
        let too_many = WorldSpec {
            min_pairwise_angle: 90.0,
            ..spec(6, 6)
        };
        assert!(matches!(make_world(&too_many), Err(Error::Config(_))));
        for bad in [0.0, -5.0, 91.0] {
            let s = WorldSpec { min_pairwise_angle: bad, ..spec(4, 1) };
            assert!(matches!(make_world(&s), Err(Error::Config(_))));
        }
        assert!(make_world(&WorldSpec { channels: 12, ..spec(4, 1) }).is_err());
        assert!(make_world(&spec(1, 1)).is_err());
    }

    #[test]
    fn noiseless_pixels_equal_prototypes() {
        let w = make_world(&WorldSpec { noise_sigma: 0.0, ..spec(4, 2) }).unwrap();
        let s: SyntheticSample<f64> = sample_image(&w, &[1, 4], Stream::Eval, 3).unwrap();
        let hw = 144;
        for (p, &l) in s.labels.labels().iter().enumerate() {
            for ch in 0..8 {
                assert_eq!(s.feat.data()[ch * hw + p], w.prototype(l)[ch]);
            }
        }
    }

    #[test]
    fn episodes_are_base_only_and_reproducible() {
        let w = make_world(&spec(4, 3)).unwrap();
        let a: EpisodeBatch<f32> = sample_episode(&w, 3, 2, 7).unwrap();
        let b: EpisodeBatch<f32> = sample_episode(&w, 3, 2, 7).unwrap();
        assert_eq!(a.feats, b.feats);
        let labels = a.label_truth.unwrap();
        assert!(labels.labels().iter().all(|&l| l < 4));
        assert!(sample_episode::<f32>(&w, 1, 4, 0).is_err());
    }

    #[test]
    fn supports_and_streams() {
        let w = make_world(&spec(4, 3)).unwrap();
        let s: SupportSet<f64> = sample_supports(&w, 5, 5).unwrap();
        assert_eq!(s.feats.dims(), &[5, 8, 12, 12]);
        assert!(sample_supports::<f64>(&w, 2, 1).is_err());
        let stream = make_cifss_stream(&w, 3, 1).unwrap();
        assert_eq!(stream, vec![vec![4], vec![5], vec![6]]);
        assert!(make_cifss_stream(&w, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn layout_histogram_matches_areas(seed in any::<u64>(), k in 1usize..4, blobs in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let classes: Vec<u32> = (1..=k as u32).collect();
            let (labels, areas) = if blobs {
                blob_layout(16, 16, &classes, &mut rng).unwrap()
            } else {
                block_layout(16, 16, &classes, &mut rng).unwrap()
            };
            for (i, &c) in classes.iter().enumerate() {
                let count = labels.iter().filter(|&&l| l == c).count();
                prop_assert_eq!(count, areas[i]);
                prop_assert!(count > 0);
            }
        }
    }
}
