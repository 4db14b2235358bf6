//! Foreground contextual perception.
//!
//! A batch of base-class samples is treated as a pseudo episode. Each image
//! is correlated pixel-wise against every image of the episode, pooled
//! (max over support pixels, mean over images), thresholded into a
//! correlation mask, and turned into a masked prototype. The mean response
//! of all episode prototypes against each image modulates its features
//! before a small convolutional decoder predicts a class-agnostic
//! foreground probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::pkl::LabelMask;
use crate::tensor::{conv2d, l2_normalize, dot, order_free_mean, sigmoid, Real, Tensor};

/// Feature maps of a pseudo episode, with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch<T> {
    pub feats: Tensor<T>,
    pub fg_truth: Option<Tensor<T>>,
    pub label_truth: Option<LabelMask>,
}

impl<T: Real> EpisodeBatch<T> {
    pub fn new(feats: Tensor<T>, fg_truth: Option<Tensor<T>>, label_truth: Option<LabelMask>) -> Result<Self> {
        let [b, _, h, w]: [usize; 4] = feats
            .dims()
            .try_into()
            .map_err(|_| shape_err!("episode features must be B×C×H×W, got {:?}", feats.dims()))?;
        if b == 0 {
            return Err(shape_err!("episode needs at least one image"));
        }
        if let Some(fg) = &fg_truth {
            if fg.dims() != [b, h, w] {
                return Err(shape_err!("foreground truth {:?}, expected [{b}, {h}, {w}]", fg.dims()));
            }
            if fg.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Data("foreground truth must be binary".into()));
            }
        }
        if let Some(labels) = &label_truth {
            if labels.dims() != [b, h, w] {
                return Err(shape_err!("label truth {:?}, expected [{b}, {h}, {w}]", labels.dims()));
            }
            if let Some(fg) = &fg_truth {
                let consistent = labels
                    .labels()
                    .iter()
                    .zip(fg.data())
                    .all(|(&l, &f)| (l != 0) == (f == T::one()));
                if !consistent {
                    return Err(Error::Data("foreground truth disagrees with labels".into()));
                }
            }
        }
        Ok(Self {
            feats,
            fg_truth,
            label_truth,
        })
    }

    /// Feature-only episode (inference time).
    pub fn from_features(feats: Tensor<T>) -> Result<Self> {
        Self::new(feats, None, None)
    }

    pub fn len(&self) -> usize {
        self.feats.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.feats.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.feats.dims()[2], self.feats.dims()[3])
    }
}

/// Learnable parameters: the two 1×1 projections and the 4-layer decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FcpParams<T> {
    pub phi_weight: Tensor<T>,
    pub phi_bias: Tensor<T>,
    pub theta_weight: Tensor<T>,
    pub theta_bias: Tensor<T>,
    pub decoder: [ConvLayer<T>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub const LAYER_NAMES: [&str; 12] = [
    "phi.weight",
    "phi.bias",
    "theta.weight",
    "theta.bias",
    "decoder.0.weight",
    "decoder.0.bias",
    "decoder.1.weight",
    "decoder.1.bias",
    "decoder.2.weight",
    "decoder.2.bias",
    "decoder.3.weight",
    "decoder.3.bias",
];

/// Channel widths of the decoder: C → C/2 → C/4 → C/8 → 1. Widths of tiny
/// maps (C ∈ {1, 2, 4}) bottom out at one channel.
pub fn decoder_widths(channels: usize) -> Result<[usize; 5]> {
    let valid = (channels >= 8 && channels % 8 == 0) || matches!(channels, 1 | 2 | 4);
    if !valid {
        return Err(Error::Config(format!(
            "decoder needs channels divisible by 8 (or 1, 2, 4), got {}",
            channels
        )));
    }
    let c = channels;
    Ok([c, (c / 2).max(1), (c / 4).max(1), (c / 8).max(1), 1])
}

pub(crate) fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::lit(rng.random_range(-bound..=bound)))
}

impl<T: Real> FcpParams<T> {
    /// Uniform `±√(1/fan_in)` weights, zero biases.
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        let widths = decoder_widths(channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi_weight = uniform_init(&mut rng, &[channels, channels], channels);
        let theta_weight = uniform_init(&mut rng, &[channels, channels], channels);
        let decoder = std::array::from_fn(|l| ConvLayer {
            weight: uniform_init(&mut rng, &[widths[l + 1], widths[l], 3, 3], widths[l] * 9),
            bias: Tensor::zeros(&[widths[l + 1]]),
        });
        Ok(Self {
            phi_weight,
            phi_bias: Tensor::zeros(&[channels]),
            theta_weight,
            theta_bias: Tensor::zeros(&[channels]),
            decoder,
        })
    }

    pub fn channels(&self) -> usize {
        self.phi_weight.dims()[0]
    }

    /// Parameters in the fixed order of [`LAYER_NAMES`].
    pub fn tensors(&self) -> [&Tensor<T>; 12] {
        let d = &self.decoder;
        [
            &self.phi_weight,
            &self.phi_bias,
            &self.theta_weight,
            &self.theta_bias,
            &d[0].weight,
            &d[0].bias,
            &d[1].weight,
            &d[1].bias,
            &d[2].weight,
            &d[2].bias,
            &d[3].weight,
            &d[3].bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        let [d0, d1, d2, d3] = &mut self.decoder;
        [
            &mut self.phi_weight,
            &mut self.phi_bias,
            &mut self.theta_weight,
            &mut self.theta_bias,
            &mut d0.weight,
            &mut d0.bias,
            &mut d1.weight,
            &mut d1.bias,
            &mut d2.weight,
            &mut d2.bias,
            &mut d3.weight,
            &mut d3.bias,
        ]
    }

    /// Rebuilds parameters from tensors in [`LAYER_NAMES`] order, checking the
    /// channel chain.
    pub fn from_tensors(mut ts: Vec<Tensor<T>>) -> Result<Self> {
        if ts.len() != 12 {
            return Err(shape_err!("expected 12 FCP tensors, got {}", ts.len()));
        }
        let c = ts[0].dims().first().copied().unwrap_or(0);
        let widths = decoder_widths(c)?;
        let mut expected: Vec<Vec<usize>> = vec![vec![c, c], vec![c], vec![c, c], vec![c]];
        for l in 0..4 {
            expected.push(vec![widths[l + 1], widths[l], 3, 3]);
            expected.push(vec![widths[l + 1]]);
        }
        for ((t, e), name) in ts.iter().zip(&expected).zip(LAYER_NAMES) {
            if t.dims() != e.as_slice() {
                return Err(shape_err!("{} has dims {:?}, expected {:?}", name, t.dims(), e));
            }
        }
        let mut it = ts.drain(..);
        let mut next = || it.next().unwrap();
        let (phi_weight, phi_bias, theta_weight, theta_bias) = (next(), next(), next(), next());
        let decoder = std::array::from_fn(|_| ConvLayer {
            weight: next(),
            bias: next(),
        });
        Ok(Self {
            phi_weight,
            phi_bias,
            theta_weight,
            theta_bias,
            decoder,
        })
    }
}

/// `A^b[i, p, q]`: episode image × its pixels × query pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume<T> {
    pub a: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

/// 1×1 projection of one image (`C × HW`), returned pixel-major (`HW × C`)
/// when `pixel_major` is set.
fn project<T: Real>(w: &Tensor<T>, bias: &Tensor<T>, f: &[T], c: usize, hw: usize, pixel_major: bool) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for o in 0..c {
        let b = bias.data()[o];
        for p in 0..hw {
            let mut acc = b;
            for ch in 0..c {
                acc = acc + w.data()[o * c + ch] * f[ch * hw + p];
            }
            if pixel_major {
                out[p * c + o] = acc;
            } else {
                out[o * hw + p] = acc;
            }
        }
    }
    out
}

/// One row `A[i, p, :]`: support pixel `p` against every query pixel.
#[inline]
fn correlation_row<T: Real>(phi_p: &[T], theta: &[T], hw: usize, row: &mut [T]) {
    row.iter_mut().for_each(|v| *v = T::zero());
    for (ch, &pv) in phi_p.iter().enumerate() {
        let trow = &theta[ch * hw..(ch + 1) * hw];
        for (r, &t) in row.iter_mut().zip(trow) {
            *r = *r + pv * t;
        }
    }
}

/// Projected episode: Φ(F_i) pixel-major and Θ(F_i) channel-major.
struct Projections<T> {
    phi: Vec<Vec<T>>,
    theta: Vec<Vec<T>>,
    c: usize,
    hw: usize,
}

impl<T: Real> Projections<T> {
    fn new(feats: &Tensor<T>, params: &FcpParams<T>) -> Result<Self> {
        let [b, c, h, w]: [usize; 4] = feats.dims().try_into().map_err(|_| shape_err!("features must be rank 4"))?;
        if c != params.channels() {
            return Err(shape_err!("features have {} channels, params {}", c, params.channels()));
        }
        let hw = h * w;
        let phi = (0..b)
            .map(|i| project(&params.phi_weight, &params.phi_bias, feats.slab(i), c, hw, true))
            .collect();
        let theta = (0..b)
            .map(|i| project(&params.theta_weight, &params.theta_bias, feats.slab(i), c, hw, false))
            .collect();
        Ok(Self { phi, theta, c, hw })
    }

    /// Max over support pixels of image `i` for every query pixel of `b`.
    fn max_over_support(&self, i: usize, b: usize) -> Vec<T> {
        let mut best = vec![T::neg_infinity(); self.hw];
        let mut row = vec![T::zero(); self.hw];
        for p in 0..self.hw {
            correlation_row(&self.phi[i][p * self.c..(p + 1) * self.c], &self.theta[b], self.hw, &mut row);
            for (m, &v) in best.iter_mut().zip(&row) {
                *m = m.max(v);
            }
        }
        best
    }

    /// Hybrid-pooled correlation for query `b`, without materialising `A^b`.
    fn pooled(&self, b: usize) -> Vec<T> {
        let per_image: Vec<Vec<T>> = (0..self.phi.len()).map(|i| self.max_over_support(i, b)).collect();
        mean_over_images(&per_image, self.hw)
    }
}

fn mean_over_images<T: Real>(per_image: &[Vec<T>], hw: usize) -> Vec<T> {
    let mut column = vec![T::zero(); per_image.len()];
    (0..hw)
        .map(|q| {
            for (c, img) in column.iter_mut().zip(per_image) {
                *c = img[q];
            }
            order_free_mean(&mut column)
        })
        .collect()
}

/// Pixel-wise correlation between every episode image and image `b`.
pub fn pairwise_correlation<T: Real>(
    ep: &EpisodeBatch<T>,
    params: &FcpParams<T>,
    b: usize,
) -> Result<CorrelationVolume<T>> {
    if b >= ep.len() {
        return Err(shape_err!("query index {} out of range for episode of {}", b, ep.len()));
    }
    let proj = Projections::new(&ep.feats, params)?;
    let (h, w) = ep.spatial();
    let hw = h * w;
    let mut data = vec![T::zero(); ep.len() * hw * hw];
    for i in 0..ep.len() {
        for p in 0..hw {
            let off = (i * hw + p) * hw;
            correlation_row(&proj.phi[i][p * proj.c..(p + 1) * proj.c], &proj.theta[b], hw, &mut data[off..off + hw]);
        }
    }
    Ok(CorrelationVolume {
        a: Tensor::from_op(vec![ep.len(), hw, hw], data),
        height: h,
        width: w,
    })
}

/// Max over support pixels, then mean over episode images, as `H × W`.
pub fn hybrid_pool<T: Real>(vol: &CorrelationVolume<T>) -> Result<Tensor<T>> {
    let hw = vol.height * vol.width;
    let d = vol.a.dims();
    if d.len() != 3 || d[1] != hw || d[2] != hw || d[0] == 0 {
        return Err(shape_err!("correlation volume {:?} for {}×{}", d, vol.height, vol.width));
    }
    let per_image: Vec<Vec<T>> = (0..d[0])
        .map(|i| {
            let block = vol.a.slab(i);
            let mut best = vec![T::neg_infinity(); hw];
            for p in 0..hw {
                for (m, &v) in best.iter_mut().zip(&block[p * hw..(p + 1) * hw]) {
                    *m = m.max(v);
                }
            }
            best
        })
        .collect();
    Ok(Tensor::from_op(vec![vol.height, vol.width], mean_over_images(&per_image, hw)))
}

/// Spatial softmax rescaled by `HW` (uniform input ↦ 1.0), thresholded at 0.5.
pub fn correlation_mask<T: Real>(abar: &Tensor<T>) -> Tensor<T> {
    let n = abar.len();
    let scale = T::from_usize(n).unwrap();
    let soft = crate::tensor::softmax_slice(abar.data());
    let half = T::lit(0.5);
    Tensor::from_op(
        abar.dims().to_vec(),
        soft.into_iter()
            .map(|v| if v * scale > half { T::one() } else { T::zero() })
            .collect(),
    )
}

/// Elementwise `1(x > threshold)`.
pub fn threshold_mask<T: Real>(t: &Tensor<T>, threshold: T) -> Tensor<T> {
    t.map(|v| if v > threshold { T::one() } else { T::zero() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wgap<T> {
    pub proto: Vec<T>,
    /// Set when the mask was empty and the all-ones mask was used instead.
    pub fell_back: bool,
}

/// Masked average of L2-normalised pixel features of one image (`C×H×W`).
pub fn wgap<T: Real>(feat_b: &Tensor<T>, mask: &Tensor<T>) -> Result<Wgap<T>> {
    let [c, h, w]: [usize; 3] = feat_b
        .dims()
        .try_into()
        .map_err(|_| shape_err!("wgap features must be C×H×W, got {:?}", feat_b.dims()))?;
    if mask.dims() != [h, w] {
        return Err(shape_err!("wgap mask {:?} for {}×{}", mask.dims(), h, w));
    }
    Ok(wgap_raw(feat_b.data(), mask.data(), c, h * w))
}

pub(crate) fn wgap_raw<T: Real>(f: &[T], mask: &[T], c: usize, hw: usize) -> Wgap<T> {
    let total = mask.iter().fold(T::zero(), |a, &m| a + m);
    let fell_back = total == T::zero();
    let mut acc = vec![T::zero(); c];
    let mut pix = vec![T::zero(); c];
    for p in 0..hw {
        let m = if fell_back { T::one() } else { mask[p] };
        if m == T::zero() {
            continue;
        }
        for ch in 0..c {
            pix[ch] = f[ch * hw + p];
        }
        for (a, v) in acc.iter_mut().zip(l2_normalize(&pix)) {
            *a = *a + v * m;
        }
    }
    let denom = if fell_back { T::from_usize(hw).unwrap() } else { total };
    Wgap {
        proto: acc.into_iter().map(|v| v / denom).collect(),
        fell_back,
    }
}

/// `R(h,w)`: mean over episode prototypes of their dot product with the
/// L2-normalised pixel feature of one image (`C×H×W`).
pub fn refined_responses<T: Real>(protos: &Tensor<T>, feat_b: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w]: [usize; 3] = feat_b
        .dims()
        .try_into()
        .map_err(|_| shape_err!("features must be C×H×W, got {:?}", feat_b.dims()))?;
    if protos.rank() != 2 || protos.dims()[1] != c || protos.dims()[0] == 0 {
        return Err(shape_err!("prototypes {:?} for {} channels", protos.dims(), c));
    }
    let rows: Vec<&[T]> = protos.data().chunks(c).collect();
    Ok(Tensor::from_op(vec![h, w], responses_raw(&rows, feat_b.data(), c, h * w)))
}

fn responses_raw<T: Real>(protos: &[&[T]], f: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut pix = vec![T::zero(); c];
    let mut dots = vec![T::zero(); protos.len()];
    (0..hw)
        .map(|p| {
            for ch in 0..c {
                pix[ch] = f[ch * hw + p];
            }
            let unit = l2_normalize(&pix);
            for (d, proto) in dots.iter_mut().zip(protos) {
                *d = dot(proto, &unit);
            }
            order_free_mean(&mut dots)
        })
        .collect()
}

/// Intermediate results of the correlation branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FcpTrace<T> {
    /// Hybrid-pooled correlation per image, `B×H×W`.
    pub pooled: Tensor<T>,
    /// Correlation masks, `B×H×W`.
    pub masks: Tensor<T>,
    /// One wGAP prototype per image, `B×C`.
    pub protos: Tensor<T>,
    /// Refined responses, `B×H×W`.
    pub responses: Tensor<T>,
    /// Images whose correlation mask was empty.
    pub fallbacks: Vec<usize>,
}

/// Correlation branch: everything up to (not including) the decoder.
pub fn fcp_trace<T: Real>(feats: &Tensor<T>, params: &FcpParams<T>) -> Result<FcpTrace<T>> {
    let proj = Projections::new(feats, params)?;
    let [b, c, h, w]: [usize; 4] = feats.dims().try_into().unwrap();
    let hw = h * w;
    let mut pooled = Vec::with_capacity(b * hw);
    let mut masks = Vec::with_capacity(b * hw);
    let mut protos = Vec::with_capacity(b * c);
    let mut fallbacks = Vec::new();
    for q in 0..b {
        let abar = Tensor::from_op(vec![h, w], proj.pooled(q));
        let mask = correlation_mask(&abar);
        let g = wgap_raw(feats.slab(q), mask.data(), c, hw);
        if g.fell_back {
            fallbacks.push(q);
        }
        pooled.extend_from_slice(abar.data());
        masks.extend_from_slice(mask.data());
        protos.extend(g.proto);
    }
    let rows: Vec<&[T]> = protos.chunks(c).collect();
    let mut responses = Vec::with_capacity(b * hw);
    for q in 0..b {
        responses.extend(responses_raw(&rows, feats.slab(q), c, hw));
    }
    Ok(FcpTrace {
        pooled: Tensor::from_op(vec![b, h, w], pooled),
        masks: Tensor::from_op(vec![b, h, w], masks),
        protos: Tensor::from_op(vec![b, c], protos),
        responses: Tensor::from_op(vec![b, h, w], responses),
        fallbacks,
    })
}

/// Decoder input `F + F × R`, with `R` broadcast over channels.
pub(crate) fn residual_input<T: Real>(feat: &Tensor<T>, resp: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w]: [usize; 4] = feat.dims().try_into().map_err(|_| shape_err!("features must be rank 4"))?;
    if resp.dims() != [b, h, w] {
        return Err(shape_err!("responses {:?} for features {:?}", resp.dims(), feat.dims()));
    }
    let hw = h * w;
    let mut x = feat.data().to_vec();
    for bi in 0..b {
        let r = resp.slab(bi);
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for (xv, &rv) in x[off..off + hw].iter_mut().zip(r) {
                *xv = *xv + *xv * rv;
            }
        }
    }
    Ok(Tensor::from_op(feat.dims().to_vec(), x))
}

/// Pre-activation outputs of each decoder layer for a given input.
pub(crate) struct DecoderPass<T> {
    /// Inputs to each layer (post-ReLU for layers 1..4).
    pub inputs: Vec<Tensor<T>>,
    /// Pre-activation outputs of each layer.
    pub pre: Vec<Tensor<T>>,
}

pub(crate) fn run_decoder<T: Real>(x: Tensor<T>, params: &FcpParams<T>) -> Result<DecoderPass<T>> {
    let mut inputs = Vec::with_capacity(4);
    let mut pre = Vec::with_capacity(4);
    let mut cur = x;
    for (l, layer) in params.decoder.iter().enumerate() {
        let z = conv2d(&cur, &layer.weight, layer.bias.data())?;
        inputs.push(cur);
        cur = if l < 3 { z.map(|v| v.max(T::zero())) } else { z.clone() };
        pre.push(z);
    }
    Ok(DecoderPass { inputs, pre })
}

/// Foreground probability clamped strictly inside (0, 1).
pub(crate) fn fg_probability<T: Real>(logit: T) -> T {
    sigmoid(logit).max(T::min_positive_value()).min(T::one() - T::epsilon())
}

/// `sigmoid(D(F + F × R))`, shaped `B×H×W`.
pub fn decode_foreground<T: Real>(feat: &Tensor<T>, resp: &Tensor<T>, params: &FcpParams<T>) -> Result<Tensor<T>> {
    decoder_widths(feat.dims().get(1).copied().unwrap_or(0))?;
    let x = residual_input(feat, resp)?;
    let pass = run_decoder(x, params)?;
    let logits = &pass.pre[3];
    let d = logits.dims();
    Ok(Tensor::from_op(vec![d[0], d[2], d[3]], logits.data().iter().map(|&v| fg_probability(v)).collect()))
}

/// Full foreground branch on an episode, `B×H×W` probabilities.
pub fn fcp_forward<T: Real>(ep: &EpisodeBatch<T>, params: &FcpParams<T>) -> Result<Tensor<T>> {
    let trace = fcp_trace(&ep.feats, params)?;
    decode_foreground(&ep.feats, &trace.responses, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, any};

    fn identity_params(c: usize) -> FcpParams<f64> {
        let mut p = FcpParams::init(c, 0).unwrap();
        p.phi_weight = Tensor::identity(c);
        p.theta_weight = Tensor::identity(c);
        p
    }

    fn random_feats(seed: u64, dims: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn episode_validation() {
        let f = Tensor::<f32>::zeros(&[1, 8, 1, 2]);
        let fg = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let labels = LabelMask::new([1, 1, 2], vec![3, 0]).unwrap();
        assert!(EpisodeBatch::new(f.clone(), Some(fg.clone()), Some(labels)).is_ok());
        let wrong = LabelMask::new([1, 1, 2], vec![0, 3]).unwrap();
        assert!(EpisodeBatch::new(f.clone(), Some(fg), Some(wrong)).is_err());
        let nonbinary = Tensor::new(vec![1, 1, 2], vec![0.5, 0.0]).unwrap();
        assert!(EpisodeBatch::new(f, Some(nonbinary), None).is_err());
        assert!(EpisodeBatch::from_features(Tensor::<f32>::zeros(&[0, 8, 1, 1])).is_err());
    }

    #[test]
    fn correlation_single_pixel_is_dot_product() {
        let f = random_feats(1, &[3, 8, 1, 1]);
        let ep = EpisodeBatch::from_features(f.clone()).unwrap();
        let vol = pairwise_correlation(&ep, &identity_params(8), 1).unwrap();
        for i in 0..3 {
            assert_relative_eq!(vol.a.get(&[i, 0, 0]), dot(f.slab(i), f.slab(1)), epsilon = 1e-12);
        }
        assert!(pairwise_correlation(&ep, &identity_params(8), 3).is_err());
    }

    #[test]
    fn zero_theta_gives_zero_volume() {
        let ep = EpisodeBatch::from_features(random_feats(2, &[2, 8, 2, 2])).unwrap();
        let mut p = identity_params(8);
        p.theta_weight = Tensor::zeros(&[8, 8]);
        let vol = pairwise_correlation(&ep, &p, 0).unwrap();
        assert!(vol.a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthonormal_pixels_give_identity_gram() {
        // 8 pixels, each a distinct basis vector
        let f = Tensor::from_fn(&[1, 8, 2, 4], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let ep = EpisodeBatch::from_features(f).unwrap();
        let vol = pairwise_correlation(&ep, &identity_params(8), 0).unwrap();
        assert_eq!(vol.a.data(), Tensor::<f64>::identity(8).data());
    }

    #[test]
    fn hybrid_pool_cases() {
        let vol = CorrelationVolume {
            a: Tensor::new(vec![1, 1, 1], vec![0.7]).unwrap(),
            height: 1,
            width: 1,
        };
        assert_eq!(hybrid_pool(&vol).unwrap().data(), &[0.7]);

        // 2 images × 2 support pixels × 1 query pixel
        let vol = CorrelationVolume {
            a: Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap(),
            height: 1,
            width: 1,
        };
        assert_eq!(hybrid_pool(&vol).unwrap().data(), &[0.0]);
        let a = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 5.0, 0.0, 2.0, 0.0, 2.0, 0.0]).unwrap();
        let vol = CorrelationVolume { a, height: 1, width: 2 };
        assert_eq!(hybrid_pool(&vol).unwrap().data()[0], 3.5);
    }

    #[test]
    fn streaming_pool_matches_materialised_volume() {
        let f = random_feats(3, &[3, 8, 3, 2]);
        let ep = EpisodeBatch::from_features(f.clone()).unwrap();
        let p = FcpParams::init(8, 5).unwrap();
        let trace = fcp_trace(&f, &p).unwrap();
        for b in 0..3 {
            let pooled = hybrid_pool(&pairwise_correlation(&ep, &p, b).unwrap()).unwrap();
            assert_eq!(pooled.data(), trace.pooled.slab(b));
        }
    }

    #[test]
    fn duplicated_episode_pools_identically() {
        let f = random_feats(4, &[2, 8, 2, 2]).cast::<f32>();
        let mut doubled = f.data().to_vec();
        doubled.extend_from_slice(f.data());
        let f2 = Tensor::new(vec![4, 8, 2, 2], doubled).unwrap();
        let p = FcpParams::<f32>::init(8, 1).unwrap();
        let a = hybrid_pool(&pairwise_correlation(&EpisodeBatch::from_features(f).unwrap(), &p, 0).unwrap()).unwrap();
        let b = hybrid_pool(&pairwise_correlation(&EpisodeBatch::from_features(f2).unwrap(), &p, 0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn correlation_mask_cases() {
        let uniform = Tensor::<f64>::full(&[2, 3], 0.3);
        assert!(correlation_mask(&uniform).data().iter().all(|&v| v == 1.0));
        let peak = Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(correlation_mask(&peak).data(), &[1.0, 0.0, 0.0, 0.0]);
        let single = Tensor::new(vec![1, 1], vec![-4.0]).unwrap();
        assert_eq!(correlation_mask(&single).data(), &[1.0]);
    }

    #[test]
    fn wgap_cases() {
        let f = Tensor::new(vec![2, 1, 2], vec![3.0, 3.0, 4.0, 4.0]).unwrap();
        let g = wgap(&f, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_relative_eq!(g.proto[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(g.proto[1], 0.8, epsilon = 1e-12);
        assert!(!g.fell_back);

        let f = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = wgap(&f, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(g.proto, vec![1.0, 0.0]);

        let f = Tensor::new(vec![2, 1, 2], vec![3.0, 1.0, 4.0, 0.0]).unwrap();
        let g = wgap(&f, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_relative_eq!(g.proto[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(g.proto[1], 0.4, epsilon = 1e-12);

        let g = wgap(&f, &Tensor::zeros(&[1, 2])).unwrap();
        assert!(g.fell_back);
        assert_relative_eq!(g.proto[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn refined_response_cases() {
        let f = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        assert_relative_eq!(refined_responses(&p, &f).unwrap().data()[0], 1.0, epsilon = 1e-12);
        let p = Tensor::new(vec![1, 2], vec![-0.8, 0.6]).unwrap();
        assert_relative_eq!(refined_responses(&p, &f).unwrap().data()[0], 0.0, epsilon = 1e-12);
        let f = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let p = Tensor::<f64>::identity(2);
        assert_relative_eq!(
            refined_responses(&p, &f).unwrap().data()[0],
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn decoder_contracts() {
        let f = random_feats(9, &[2, 8, 3, 3]);
        let p = FcpParams::init(8, 2).unwrap();
        let zero = Tensor::zeros(&[2, 3, 3]);
        assert_eq!(residual_input(&f, &zero).unwrap(), f);
        let out = decode_foreground(&f, &zero, &p).unwrap();
        assert_eq!(out.dims(), &[2, 3, 3]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(FcpParams::<f32>::init(12, 0), Err(Error::Config(_))));
        assert!(decode_foreground(&Tensor::zeros(&[1, 4, 2, 2]), &Tensor::zeros(&[1, 2, 2]), &p).is_err());
    }

    #[test]
    fn singleton_episode_runs() {
        let f = random_feats(10, &[1, 8, 4, 4]).cast::<f32>();
        let p = FcpParams::<f32>::init(8, 3).unwrap();
        let ep = EpisodeBatch::from_features(f).unwrap();
        let a = fcp_forward(&ep, &p).unwrap();
        assert_eq!(a.dims(), &[1, 4, 4]);
        assert_eq!(a, fcp_forward(&ep, &p).unwrap());
    }

    #[test]
    fn params_roundtrip_through_tensor_list() {
        let p = FcpParams::<f32>::init(16, 4).unwrap();
        let list = p.tensors().iter().map(|t| (*t).clone()).collect();
        assert_eq!(FcpParams::from_tensors(list).unwrap(), p);
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in any::<u64>(), rot in 1usize..3) {
            let f = random_feats(seed, &[3, 8, 3, 3]).cast::<f32>();
            let p = FcpParams::<f32>::init(8, seed ^ 0x55).unwrap();
            let out = fcp_forward(&EpisodeBatch::from_features(f.clone()).unwrap(), &p).unwrap();
            let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(f.slab(i));
            }
            let fp = Tensor::new(vec![3, 8, 3, 3], data).unwrap();
            let outp = fcp_forward(&EpisodeBatch::from_features(fp).unwrap(), &p).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(outp.slab(k), out.slab(i));
            }
        }

        #[test]
        fn responses_ignore_positive_pixel_scaling(seed in any::<u64>(), s in 0.1f64..10.0) {
            let f = random_feats(seed, &[8, 2, 2]);
            let protos = random_feats(seed + 1, &[2, 8]);
            let mut scaled = f.clone();
            for ch in 0..8 {
                let o = scaled.offset(&[ch, 1, 0]);
                scaled.data_mut()[o] *= s;
            }
            let a = refined_responses(&protos, &f).unwrap();
            let b = refined_responses(&protos, &scaled).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn mask_binary_and_threshold_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            let n = v.len();
            let m = correlation_mask(&Tensor::new(vec![1, n], v).unwrap());
            prop_assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
            prop_assert_eq!(threshold_mask(&m, 0.5), m);
        }

        #[test]
        fn wgap_norm_at_most_one(seed in any::<u64>(), bits in any::<u16>()) {
            let f = random_feats(seed, &[8, 4, 4]);
            let mask = Tensor::from_fn(&[4, 4], |i| ((bits >> i) & 1) as f64);
            let g = wgap(&f, &mask).unwrap();
            prop_assert!(crate::tensor::norm(&g.proto) <= 1.0 + 1e-5);
        }
    }
}
