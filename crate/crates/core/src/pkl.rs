//! Prototypical kernel learning: the base-class kernel bank, pixel feature
//! assembling and the one-off, similarity-gated kernel update.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{cosine, softmax, Real, Tensor};

/// Class kernels, one row per class. The first `base_count` rows are base
/// classes (background is class 0); the rest were registered later.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    kernels: Tensor<T>,
    class_ids: Vec<u32>,
    base_count: usize,
}

impl<T: Real> KernelBank<T> {
    pub fn new(kernels: Tensor<T>, class_ids: Vec<u32>, base_count: usize) -> Result<Self> {
        if kernels.rank() != 2 || kernels.dims()[0] == 0 {
            return Err(shape_err!("kernel bank needs N×C with N ≥ 1, got {:?}", kernels.dims()));
        }
        if class_ids.len() != kernels.dims()[0] {
            return Err(shape_err!(
                "{} class ids for {} kernel rows",
                class_ids.len(),
                kernels.dims()[0]
            ));
        }
        if base_count > class_ids.len() {
            return Err(Error::Config(format!(
                "base_count {} exceeds {} rows",
                base_count,
                class_ids.len()
            )));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::ClassOverlap(format!("duplicate class id in {:?}", class_ids)));
        }
        Ok(Self {
            kernels,
            class_ids,
            base_count,
        })
    }

    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn base_count(&self) -> usize {
        self.base_count
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.kernels.dims()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.kernels.data()[i * c..(i + 1) * c]
    }

    pub fn is_base_row(&self, i: usize) -> bool {
        i < self.base_count
    }

    /// The `base_count × C` block of base kernels.
    pub fn base_rows(&self) -> Tensor<T> {
        let c = self.channels();
        Tensor::from_op(
            vec![self.base_count, c],
            self.kernels.data()[..self.base_count * c].to_vec(),
        )
    }

    /// Copy of the bank with its base block replaced; novel rows are copied
    /// verbatim.
    pub fn with_base_rows(&self, base: &Tensor<T>) -> Result<Self> {
        if base.dims() != [self.base_count, self.channels()] {
            return Err(shape_err!(
                "replacement base rows {:?}, expected [{}, {}]",
                base.dims(),
                self.base_count,
                self.channels()
            ));
        }
        let mut data = self.kernels.data().to_vec();
        data[..base.len()].copy_from_slice(base.data());
        Ok(Self {
            kernels: Tensor::from_op(self.kernels.dims().to_vec(), data),
            class_ids: self.class_ids.clone(),
            base_count: self.base_count,
        })
    }

    pub(crate) fn kernels_mut(&mut self) -> &mut Tensor<T> {
        &mut self.kernels
    }

    /// Uniform `±√(1/C)` initial base kernels for classes `0..n`.
    pub fn init_base(n: usize, channels: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let kernels = crate::fcp::uniform_init(&mut rng, &[n, channels], channels);
        Self::new(kernels, (0..n as u32).collect(), n)
    }
}

/// Per-pixel class scores, `B×N×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T>(pub Tensor<T>);

impl<T: Real> ScoreMap<T> {
    pub fn scores(&self) -> &Tensor<T> {
        &self.0
    }

    /// Scores of image `b` as an `N × HW` row-major block.
    pub fn image(&self, b: usize) -> &[T] {
        self.0.slab(b)
    }
}

/// Integer class map, `B×H×W`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    dims: [usize; 3],
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(dims: [usize; 3], labels: Vec<u32>) -> Result<Self> {
        if dims.iter().product::<usize>() != labels.len() {
            return Err(shape_err!("label mask {:?} with {} labels", dims, labels.len()));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, b: usize) -> &[u32] {
        let n = self.dims[1] * self.dims[2];
        &self.labels[b * n..(b + 1) * n]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_op(
            self.dims.to_vec(),
            self.labels.iter().map(|&l| T::from_u32(l).unwrap()).collect(),
        )
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let dims: [usize; 3] = t
            .dims()
            .try_into()
            .map_err(|_| shape_err!("label tensor must be rank 3, got {:?}", t.dims()))?;
        let labels = t
            .data()
            .iter()
            .map(|v| {
                v.to_u32()
                    .filter(|&l| T::from_u32(l) == Some(*v))
                    .ok_or_else(|| Error::Data(format!("label {} is not a class index", v)))
            })
            .collect::<Result<_>>()?;
        Self::new(dims, labels)
    }

    /// Maps row indices to class ids through `class_ids`.
    pub fn map_rows(&self, class_ids: &[u32]) -> Self {
        Self {
            dims: self.dims,
            labels: self.labels.iter().map(|&r| class_ids[r as usize]).collect(),
        }
    }

    /// Stacks masks of equal spatial size along the batch axis.
    pub fn concat(parts: &[LabelMask]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of no masks"))?;
        let [_, h, w] = first.dims;
        let mut labels = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.dims[1] != h || p.dims[2] != w {
                return Err(shape_err!("concat {:?} with {:?}", first.dims, p.dims));
            }
            batch += p.dims[0];
            labels.extend_from_slice(&p.labels);
        }
        Self::new([batch, h, w], labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PklConfig {
    /// Global multiplier on the adaptation rate. Prototypes are pixel sums,
    /// so the step must shrink with the number of pixels per image.
    pub step_scale: f64,
    /// Replace the similarity-gated rate with this constant for every class.
    pub fixed_alpha: Option<f64>,
}

impl Default for PklConfig {
    fn default() -> Self {
        Self {
            step_scale: 1e-3,
            fixed_alpha: None,
        }
    }
}

pub(crate) fn check_feature_map<T: Real>(feat: &Tensor<T>, channels: usize) -> Result<[usize; 4]> {
    let dims: [usize; 4] = feat
        .dims()
        .try_into()
        .map_err(|_| shape_err!("feature map must be B×C×H×W, got {:?}", feat.dims()))?;
    if dims[1] != channels {
        return Err(shape_err!("feature channels {} vs kernel channels {}", dims[1], channels));
    }
    Ok(dims)
}

/// Raw kernel responses `rows · F(x, y)` for one image, `N × HW`.
pub(crate) fn image_logits<T: Real>(rows: &[T], n: usize, feat_b: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * hw];
    for i in 0..n {
        let o = &mut out[i * hw..(i + 1) * hw];
        for ch in 0..c {
            let k = rows[i * c + ch];
            for (ov, &f) in o.iter_mut().zip(&feat_b[ch * hw..(ch + 1) * hw]) {
                *ov = *ov + k * f;
            }
        }
    }
    out
}

/// Softmax over classes of each kernel row applied to each pixel feature.
pub fn segment_scores<T: Real>(rows: &Tensor<T>, feat: &Tensor<T>) -> Result<ScoreMap<T>> {
    if rows.rank() != 2 {
        return Err(shape_err!("kernel rows must be N×C, got {:?}", rows.dims()));
    }
    let (n, c) = (rows.dims()[0], rows.dims()[1]);
    let [b, _, h, w] = check_feature_map(feat, c)?;
    let mut data = Vec::with_capacity(b * n * h * w);
    for bi in 0..b {
        data.extend(image_logits(rows.data(), n, feat.slab(bi), c, h * w));
    }
    let logits = Tensor::from_op(vec![b, n, h, w], data);
    Ok(ScoreMap(softmax(&logits, 1)?))
}

/// Score-weighted sum of pixel features per class: `P[b,i,:] = Σ S[b,i,x,y] F[b,:,x,y]`.
pub fn assemble_pixel_features<T: Real>(scores: &ScoreMap<T>, feat: &Tensor<T>) -> Result<Tensor<T>> {
    let sd = scores.0.dims();
    let fd = feat.dims();
    if sd.len() != 4 || fd.len() != 4 || sd[0] != fd[0] || sd[2..] != fd[2..] {
        return Err(shape_err!("assemble scores {:?} with features {:?}", sd, fd));
    }
    let (b, n, c, hw) = (sd[0], sd[1], fd[1], sd[2] * sd[3]);
    let mut out = Vec::with_capacity(b * n * c);
    for bi in 0..b {
        out.extend(assemble_image(scores.image(bi), n, feat.slab(bi), c, hw));
    }
    Ok(Tensor::from_op(vec![b, n, c], out))
}

pub(crate) fn assemble_image<T: Real>(s: &[T], n: usize, f: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let srow = &s[i * hw..(i + 1) * hw];
        for ch in 0..c {
            let frow = &f[ch * hw..(ch + 1) * hw];
            out[i * c + ch] = srow.iter().zip(frow).fold(T::zero(), |a, (&x, &y)| a + x * y);
        }
    }
    out
}

fn check_rows<T: Real>(kernels: &Tensor<T>, protos: &Tensor<T>) -> Result<(usize, usize)> {
    if kernels.rank() != 2 || kernels.dims() != protos.dims() {
        return Err(shape_err!(
            "kernel rows {:?} vs prototypes {:?}",
            kernels.dims(),
            protos.dims()
        ));
    }
    Ok((kernels.dims()[0], kernels.dims()[1]))
}

/// Per-class adaptation rate `ReLU(cos(K_j, P_j))`, shaped `1 × N_b`.
pub fn adaptation_learning_rate<T: Real>(kernels: &Tensor<T>, protos: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = check_rows(kernels, protos)?;
    let mut alpha = Vec::with_capacity(n);
    for j in 0..n {
        let cos = cosine(&kernels.data()[j * c..(j + 1) * c], &protos.data()[j * c..(j + 1) * c])?;
        alpha.push(cos.max(T::zero()));
    }
    Ok(Tensor::from_op(vec![1, n], alpha))
}

/// Rates actually applied by the update: gated (or fixed) and scaled.
pub(crate) fn effective_rates<T: Real>(kernels: &Tensor<T>, protos: &Tensor<T>, cfg: &PklConfig) -> Result<Vec<T>> {
    let alpha = match cfg.fixed_alpha {
        Some(a) => vec![T::lit(a); kernels.dims()[0]],
        None => adaptation_learning_rate(kernels, protos)?.into_data(),
    };
    let s = T::lit(cfg.step_scale);
    Ok(alpha.into_iter().map(|a| a * s).collect())
}

/// One-off update `K̃_j = K_j − s·α_j · 2(K_j − P_j)` for one image's
/// prototypes. Rows with a zero rate are returned bit-exactly.
pub fn prototypical_kernel_update<T: Real>(
    kernels: &Tensor<T>,
    protos: &Tensor<T>,
    cfg: &PklConfig,
) -> Result<Tensor<T>> {
    let rates = effective_rates(kernels, protos, cfg)?;
    apply_update(kernels, protos, &rates)
}

pub(crate) fn apply_update<T: Real>(kernels: &Tensor<T>, protos: &Tensor<T>, rates: &[T]) -> Result<Tensor<T>> {
    let (n, c) = check_rows(kernels, protos)?;
    let two = T::lit(2.0);
    let mut out = kernels.data().to_vec();
    for j in 0..n {
        if rates[j] == T::zero() {
            continue;
        }
        for ch in 0..c {
            let k = kernels.data()[j * c + ch];
            let grad = two * (k - protos.data()[j * c + ch]);
            out[j * c + ch] = k - rates[j] * grad;
        }
    }
    Ok(Tensor::from_op(vec![n, c], out))
}

/// Base rows adapted to a single image `feat_b` (`1×C×H×W`): scores,
/// assembled prototypes, gated update.
pub fn refresh_for_image<T: Real>(base: &Tensor<T>, feat_b: &Tensor<T>, cfg: &PklConfig) -> Result<Tensor<T>> {
    let scores = segment_scores(base, feat_b)?;
    let protos = assemble_pixel_features(&scores, feat_b)?;
    let protos = protos.reshape(base.dims())?;
    prototypical_kernel_update(base, &protos, cfg)
}

/// Index of the largest value, ties to the lowest index.
pub(crate) fn argmax<T: Real>(values: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-pixel argmax of the class scores of `rows` (row indices).
pub fn predict_mask<T: Real>(rows: &Tensor<T>, feat: &Tensor<T>) -> Result<LabelMask> {
    let scores = segment_scores(rows, feat)?;
    let [b, n, h, w] = scores.0.dims().try_into().unwrap();
    let hw = h * w;
    let mut labels = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let s = scores.image(bi);
        for p in 0..hw {
            labels.push(argmax((0..n).map(|i| s[i * hw + p])) as u32);
        }
    }
    LabelMask::new([b, h, w], labels)
}
