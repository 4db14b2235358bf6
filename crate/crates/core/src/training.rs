//! Losses and the SGD trainer for the base kernels and foreground branch.
//!
//! Gradients are accumulated by hand over the primitives used in the
//! forward pass. The adaptation rate of the one-off kernel update is held
//! constant during backprop; everything else (assembled prototypes, the
//! score softmax, the decoder) is differentiated exactly. The correlation
//! mask is a hard threshold, so the projections only see weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fcp::{fcp_trace, fg_probability, residual_input, run_decoder, EpisodeBatch, FcpParams};
use crate::pkl::{
    apply_update, assemble_image, effective_rates, image_logits, KernelBank, LabelMask, PklConfig, ScoreMap,
};
use crate::tensor::{conv2d_backward, sigmoid, softmax_slice, Real, Tensor};

const LOG_CLAMP: f64 = 1e-12;
/// Parameters beyond this magnitude count as diverged; keeps the next
/// forward pass clear of single-precision overflow.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_mix: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Object classes per training image.
    pub classes_per_image: usize,
    /// Apply the one-off kernel update inside the training forward pass.
    pub use_pkl: bool,
    pub pkl: PklConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 0.6,
            lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 200,
            batch: 4,
            seed: 0,
            classes_per_image: 2,
            use_pkl: true,
            pkl: PklConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::Config(format!("lambda_mix {} outside [0, 1]", self.lambda_mix)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1), weight decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Mean over pixels of `−log S[y]` for each image.
pub fn cross_entropy_per_image<T: Real>(scores: &ScoreMap<T>, truth: &LabelMask) -> Result<Vec<T>> {
    let d = scores.0.dims();
    if d.len() != 4 || truth.dims() != [d[0], d[2], d[3]] {
        return Err(shape_err!("scores {:?} vs labels {:?}", d, truth.dims()));
    }
    let (n, hw) = (d[1], d[2] * d[3]);
    let clamp = T::lit(LOG_CLAMP);
    let denom = T::from_usize(hw).unwrap();
    (0..d[0])
        .map(|b| {
            let s = scores.image(b);
            let mut acc = T::zero();
            for (p, &y) in truth.image(b).iter().enumerate() {
                let y = y as usize;
                if y >= n {
                    return Err(Error::Data(format!("label {} outside {} classes", y, n)));
                }
                acc = acc - s[y * hw + p].max(clamp).ln();
            }
            Ok(acc / denom)
        })
        .collect()
}

/// Pixel-averaged cross entropy over the whole batch.
pub fn cross_entropy_loss<T: Real>(scores: &ScoreMap<T>, truth: &LabelMask) -> Result<T> {
    let per = cross_entropy_per_image(scores, truth)?;
    let n = T::from_usize(per.len()).unwrap();
    Ok(per.into_iter().fold(T::zero(), |a, v| a + v) / n)
}

fn iou_terms<T: Real>(p: &[T], y: &[T]) -> (T, T) {
    p.iter().zip(y).fold((T::zero(), T::zero()), |(i, u), (&p, &y)| {
        (i + p * y, u + (p + y - p * y))
    })
}

/// Soft IoU loss `mean_b (1 − I_b / U_b)`; an empty union scores 0.
pub fn iou_loss<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<T> {
    if pred.dims() != truth.dims() || pred.rank() != 3 {
        return Err(shape_err!("iou pred {:?} vs truth {:?}", pred.dims(), truth.dims()));
    }
    if truth.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Data("iou truth must be binary".into()));
    }
    let b = pred.dims()[0];
    let mut total = T::zero();
    for i in 0..b {
        let (inter, union) = iou_terms(pred.slab(i), truth.slab(i));
        if union > T::zero() {
            total = total + (T::one() - inter / union);
        }
    }
    Ok(total / T::from_usize(b).unwrap())
}

/// `λ Σ_b ce_b + (1 − λ) iou`.
pub fn total_loss<T: Real>(ce_per_image: &[T], iou: T, lambda_mix: T) -> T {
    let ce = ce_per_image.iter().fold(T::zero(), |a, &v| a + v);
    lambda_mix * ce + (T::one() - lambda_mix) * iou
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub ce: f64,
    pub iou: f64,
    pub total: f64,
}

/// Gradients for the base kernels and every FCP tensor (in
/// [`crate::fcp::LAYER_NAMES`] order).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub kernels: Tensor<T>,
    pub fcp: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParts<T> {
    pub ce_per_image: Vec<T>,
    pub iou: T,
    pub total: T,
}

/// How the kernel-update rates are obtained in a forward pass.
#[derive(Clone, Debug)]
pub enum Rates<T> {
    /// Computed from the current kernels and prototypes.
    Computed,
    /// Supplied per image (for checking gradients with the rates held fixed).
    Given(Vec<Vec<T>>),
}

struct PklCache<T> {
    scores: Vec<T>,
    rates: Vec<T>,
    updated_scores: Vec<T>,
}

fn check_episode<'a, T: Real>(ep: &'a EpisodeBatch<T>, base: &Tensor<T>) -> Result<(&'a Tensor<T>, &'a LabelMask)> {
    let fg = ep
        .fg_truth
        .as_ref()
        .ok_or_else(|| Error::Data("training episode lacks foreground truth".into()))?;
    let labels = ep
        .label_truth
        .as_ref()
        .ok_or_else(|| Error::Data("training episode lacks labels".into()))?;
    if ep.channels() != base.dims()[1] {
        return Err(shape_err!("episode channels {} vs kernels {:?}", ep.channels(), base.dims()));
    }
    let n = base.dims()[0] as u32;
    if let Some(&bad) = labels.labels().iter().find(|&&l| l >= n) {
        return Err(Error::Data(format!("label {} is not a base class (N_b = {})", bad, n)));
    }
    Ok((fg, labels))
}

/// Forward pass of both branches. Returns the loss parts together with the
/// rates used and enough state for backprop.
fn forward<T: Real>(
    base: &Tensor<T>,
    fcp: &FcpParams<T>,
    ep: &EpisodeBatch<T>,
    cfg: &TrainConfig,
    rates: &Rates<T>,
) -> Result<(LossParts<T>, Vec<PklCache<T>>, ForegroundCache<T>)> {
    let (fg, labels) = check_episode(ep, base)?;
    let (n, c) = (base.dims()[0], base.dims()[1]);
    let (h, w) = ep.spatial();
    let hw = h * w;
    let clamp = T::lit(LOG_CLAMP);

    let mut caches = Vec::with_capacity(ep.len());
    let mut ce = Vec::with_capacity(ep.len());
    for b in 0..ep.len() {
        let f = ep.feats.slab(b);
        let scores = softmax_columns(&image_logits(base.data(), n, f, c, hw), n, hw);
        let (kernels, used) = if cfg.use_pkl {
            let protos = Tensor::from_op(vec![n, c], assemble_image(&scores, n, f, c, hw));
            let used = match rates {
                Rates::Computed => effective_rates(base, &protos, &cfg.pkl)?,
                Rates::Given(all) => all[b].clone(),
            };
            (apply_update(base, &protos, &used)?, used)
        } else {
            (base.clone(), vec![T::zero(); n])
        };
        let updated = softmax_columns(&image_logits(kernels.data(), n, f, c, hw), n, hw);
        let mut loss = T::zero();
        for (p, &y) in labels.image(b).iter().enumerate() {
            loss = loss - updated[y as usize * hw + p].max(clamp).ln();
        }
        ce.push(loss / T::from_usize(hw).unwrap());
        caches.push(PklCache {
            scores,
            rates: used,
            updated_scores: updated,
        });
    }

    let fgc = foreground_forward(fcp, ep)?;
    let iou = iou_loss(&fgc.probs, fg)?;
    let total = total_loss(&ce, iou, T::lit(cfg.lambda_mix));
    Ok((
        LossParts {
            ce_per_image: ce,
            iou,
            total,
        },
        caches,
        fgc,
    ))
}

/// Softmax over rows of an `N × HW` block, per column.
fn softmax_columns<T: Real>(logits: &[T], n: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * hw];
    let mut col = vec![T::zero(); n];
    for p in 0..hw {
        for i in 0..n {
            col[i] = logits[i * hw + p];
        }
        for (i, v) in softmax_slice(&col).into_iter().enumerate() {
            out[i * hw + p] = v;
        }
    }
    out
}

struct ForegroundCache<T> {
    decoder: crate::fcp::DecoderPass<T>,
    probs: Tensor<T>,
}

fn foreground_forward<T: Real>(fcp: &FcpParams<T>, ep: &EpisodeBatch<T>) -> Result<ForegroundCache<T>> {
    let trace = fcp_trace(&ep.feats, fcp)?;
    let x = residual_input(&ep.feats, &trace.responses)?;
    let decoder = run_decoder(x, fcp)?;
    let logits = &decoder.pre[3];
    let d = logits.dims();
    let probs = Tensor::from_op(
        vec![d[0], d[2], d[3]],
        logits.data().iter().map(|&v| fg_probability(v)).collect(),
    );
    Ok(ForegroundCache { decoder, probs })
}

/// Loss of the full forward pass (both branches).
pub fn forward_loss<T: Real>(
    bank: &KernelBank<T>,
    fcp: &FcpParams<T>,
    ep: &EpisodeBatch<T>,
    cfg: &TrainConfig,
    rates: &Rates<T>,
) -> Result<LossParts<T>> {
    Ok(forward(&bank.base_rows(), fcp, ep, cfg, rates)?.0)
}

/// Loss, gradients, and the per-image update rates that were held constant.
pub fn loss_and_gradients<T: Real>(
    bank: &KernelBank<T>,
    fcp: &FcpParams<T>,
    ep: &EpisodeBatch<T>,
    cfg: &TrainConfig,
) -> Result<(LossParts<T>, Gradients<T>, Vec<Vec<T>>)> {
    let base = bank.base_rows();
    let (loss, caches, fgc) = forward(&base, fcp, ep, cfg, &Rates::Computed)?;
    let labels = ep.label_truth.as_ref().unwrap();
    let fg = ep.fg_truth.as_ref().unwrap();
    let (n, c) = (base.dims()[0], base.dims()[1]);
    let (h, w) = ep.spatial();
    let hw = h * w;
    let lambda = T::lit(cfg.lambda_mix);
    let per_pixel = lambda / T::from_usize(hw).unwrap();
    let clamp = T::lit(LOG_CLAMP);
    let two = T::lit(2.0);

    let mut gk = vec![T::zero(); n * c];
    for (b, cache) in caches.iter().enumerate() {
        let f = ep.feats.slab(b);
        // d/dz̃ of λ·CE_b
        let mut gz = cache.updated_scores.clone();
        for (p, &y) in labels.image(b).iter().enumerate() {
            let y = y as usize;
            let clamped = cache.updated_scores[y * hw + p] < clamp;
            for i in 0..n {
                let g = &mut gz[i * hw + p];
                *g = if clamped {
                    T::zero()
                } else if i == y {
                    (*g - T::one()) * per_pixel
                } else {
                    *g * per_pixel
                };
            }
        }
        let g_updated = outer_features(&gz, f, n, c, hw);
        if !cfg.use_pkl {
            add_into(&mut gk, &g_updated);
            continue;
        }
        // K̃ = (1 − 2r)K + 2rP, r held constant
        let mut g_protos = vec![T::zero(); n * c];
        for j in 0..n {
            let r = cache.rates[j];
            for ch in 0..c {
                let g = g_updated[j * c + ch];
                gk[j * c + ch] = gk[j * c + ch] + (T::one() - two * r) * g;
                g_protos[j * c + ch] = two * r * g;
            }
        }
        // P = S Fᵀ  →  dS[i,p] = Σ_c dP[i,c] F[c,p]
        let mut gs = vec![T::zero(); n * hw];
        for i in 0..n {
            for ch in 0..c {
                let gp = g_protos[i * c + ch];
                if gp == T::zero() {
                    continue;
                }
                for (g, &fv) in gs[i * hw..(i + 1) * hw].iter_mut().zip(&f[ch * hw..(ch + 1) * hw]) {
                    *g = *g + gp * fv;
                }
            }
        }
        // softmax over classes per pixel
        let s = &cache.scores;
        let mut gzs = vec![T::zero(); n * hw];
        for p in 0..hw {
            let inner = (0..n).fold(T::zero(), |a, i| a + s[i * hw + p] * gs[i * hw + p]);
            for i in 0..n {
                gzs[i * hw + p] = s[i * hw + p] * (gs[i * hw + p] - inner);
            }
        }
        add_into(&mut gk, &outer_features(&gzs, f, n, c, hw));
    }

    // foreground branch: (1 − λ) · mean_b (1 − I_b/U_b)
    let bsz = ep.len();
    let scale = (T::one() - lambda) / T::from_usize(bsz).unwrap();
    let logits = &fgc.decoder.pre[3];
    let mut g_logit = vec![T::zero(); logits.len()];
    for b in 0..bsz {
        let (p, y) = (fgc.probs.slab(b), fg.slab(b));
        let (inter, union) = iou_terms(p, y);
        if union <= T::zero() {
            continue;
        }
        let u2 = union * union;
        for k in 0..hw {
            let dp = -(y[k] * union - inter * (T::one() - y[k])) / u2;
            let raw = sigmoid(logits.data()[b * hw + k]);
            let dsig = if raw == p[k] { raw * (T::one() - raw) } else { T::zero() };
            g_logit[b * hw + k] = scale * dp * dsig;
        }
    }
    let mut upstream = Tensor::from_op(logits.dims().to_vec(), g_logit);
    let mut decoder_grads: Vec<(Tensor<T>, Tensor<T>)> = Vec::with_capacity(4);
    for l in (0..4).rev() {
        let layer = &fcp.decoder[l];
        let g = conv2d_backward(&fgc.decoder.inputs[l], &layer.weight, &upstream, l > 0)?;
        decoder_grads.push((g.dw, Tensor::from_op(vec![g.db.len()], g.db)));
        if l > 0 {
            // through the ReLU that produced this layer's input
            let pre = &fgc.decoder.pre[l - 1];
            upstream = g.dx.zip_with(pre, |d, z| if z > T::zero() { d } else { T::zero() })?;
        }
    }
    decoder_grads.reverse();

    let cdim = fcp.channels();
    let mut fcp_grads = vec![
        Tensor::zeros(&[cdim, cdim]),
        Tensor::zeros(&[cdim]),
        Tensor::zeros(&[cdim, cdim]),
        Tensor::zeros(&[cdim]),
    ];
    for (dw, db) in decoder_grads {
        fcp_grads.push(dw);
        fcp_grads.push(db);
    }
    let rates = caches.into_iter().map(|c| c.rates).collect();
    Ok((
        loss,
        Gradients {
            kernels: Tensor::from_op(vec![n, c], gk),
            fcp: fcp_grads,
        },
        rates,
    ))
}

/// `G[i,c] = Σ_p g[i,p] F[c,p]`.
fn outer_features<T: Real>(g: &[T], f: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    assemble_image(g, n, f, c, hw)
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

/// Parameters, momentum buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub bank: KernelBank<T>,
    pub fcp: FcpParams<T>,
    /// Momentum buffers: base kernels first, then FCP tensors.
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
    frozen: bool,
}

impl<T: Real> TrainState<T> {
    pub fn new(bank: KernelBank<T>, fcp: FcpParams<T>) -> Result<Self> {
        if bank.base_count() != bank.len() {
            return Err(Error::Config("training bank must hold base classes only".into()));
        }
        if bank.channels() != fcp.channels() {
            return Err(shape_err!("kernel channels {} vs FCP {}", bank.channels(), fcp.channels()));
        }
        let mut velocity = vec![Tensor::zeros(bank.kernels().dims())];
        velocity.extend(fcp.tensors().iter().map(|t| Tensor::zeros(t.dims())));
        Ok(Self {
            bank,
            fcp,
            velocity,
            step: 0,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// SGD with momentum and decoupled-from-nothing (L2) weight decay:
/// `v ← μv + (g + wd·θ)`, `θ ← θ − lr·v`.
fn sgd_update<T: Real>(param: &mut Tensor<T>, vel: &mut Tensor<T>, grad: &Tensor<T>, cfg: &TrainConfig) {
    let (lr, mu, wd) = (T::lit(cfg.lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for ((p, v), &g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
        *v = mu * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
}

/// One optimisation step on a base-class episode.
pub fn train_step<T: Real>(state: &mut TrainState<T>, ep: &EpisodeBatch<T>, cfg: &TrainConfig) -> Result<LossReport> {
    if state.frozen {
        return Err(Error::Frozen);
    }
    cfg.validate()?;
    let (loss, grads, _) = loss_and_gradients(&state.bank, &state.fcp, ep, cfg)?;
    let ce: f64 = loss.ce_per_image.iter().map(|v| v.to_f64().unwrap()).sum();
    let report = LossReport {
        step: state.step,
        ce,
        iou: loss.iou.to_f64().unwrap(),
        total: loss.total.to_f64().unwrap(),
    };
    let grads_finite = grads.kernels.data().iter().all(|v| v.is_finite())
        && grads.fcp.iter().all(|t| t.data().iter().all(|v| v.is_finite()));
    if !report.total.is_finite() || !grads_finite {
        return Err(Error::Training(format!(
            "non-finite loss at step {}: ce={} iou={} total={} (finite gradients: {})",
            report.step, report.ce, report.iou, report.total, grads_finite
        )));
    }
    let mut bank = state.bank.clone();
    let mut fcp = state.fcp.clone();
    let mut velocity = state.velocity.clone();
    let (kv, fv) = velocity.split_at_mut(1);
    sgd_update(bank.kernels_mut(), &mut kv[0], &grads.kernels, cfg);
    for ((p, v), g) in fcp.tensors_mut().into_iter().zip(fv).zip(&grads.fcp) {
        sgd_update(p, v, g, cfg);
    }
    let limit = T::lit(DIVERGENCE_LIMIT);
    let diverged = std::iter::once(bank.kernels())
        .chain(fcp.tensors())
        .any(|t| t.data().iter().any(|v| !(v.abs() <= limit)));
    if diverged {
        return Err(Error::Training(format!(
            "parameters diverged at step {} (loss {}, lr {})",
            report.step, report.total, cfg.lr
        )));
    }
    state.bank = bank;
    state.fcp = fcp;
    state.velocity = velocity;
    state.step += 1;
    Ok(report)
}

/// Trained parameters, immutable from here on.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel<T> {
    pub bank: KernelBank<T>,
    pub fcp: FcpParams<T>,
    pub pkl: PklConfig,
}

/// Snapshots the state and marks it frozen; further [`train_step`] calls
/// fail. Freezing twice yields the same snapshot.
pub fn freeze<T: Real>(state: &mut TrainState<T>, pkl: PklConfig) -> FrozenModel<T> {
    state.frozen = true;
    FrozenModel {
        bank: state.bank.clone(),
        fcp: state.fcp.clone(),
        pkl,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_cases() {
        let onehot = ScoreMap(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let truth = LabelMask::new([1, 1, 2], vec![0, 1]).unwrap();
        assert!(cross_entropy_loss(&onehot, &truth).unwrap() <= 1e-6);

        let uniform = ScoreMap(Tensor::<f64>::full(&[1, 4, 2, 2], 0.25));
        let truth = LabelMask::new([1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        assert_relative_eq!(cross_entropy_loss(&uniform, &truth).unwrap(), 1.386294, epsilon = 1e-6);

        let bad = LabelMask::new([1, 2, 2], vec![0, 1, 2, 4]).unwrap();
        assert!(matches!(cross_entropy_loss(&uniform, &bad), Err(Error::Data(_))));
    }

    #[test]
    fn iou_loss_cases() {
        let y = Tensor::<f64>::new(vec![1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(iou_loss(&y, &y).unwrap(), 0.0);
        let disjoint = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(iou_loss(&disjoint, &y).unwrap(), 1.0);
        let wide = Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(iou_loss(&wide, &y).unwrap(), 0.5);
        let empty = Tensor::<f64>::zeros(&[1, 1, 4]);
        assert_eq!(iou_loss(&empty, &empty).unwrap(), 0.0);
        let soft = Tensor::new(vec![1, 1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(iou_loss(&y, &soft), Err(Error::Data(_))));
    }

    #[test]
    fn total_loss_cases() {
        let ce = [1.5f64, 0.5];
        assert_eq!(total_loss(&ce, 0.3, 1.0), 2.0);
        assert_eq!(total_loss(&ce, 0.3, 0.0), 0.3);
        assert_relative_eq!(total_loss(&ce, 0.5, 0.6), 1.4, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda_mix = 1.2;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig { batch: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn loss_ranges(p in prop::collection::vec(0.001f64..0.999, 8), bits in any::<u8>()) {
            let y: Vec<f64> = (0..8).map(|i| ((bits >> i) & 1) as f64).collect();
            let pred = Tensor::new(vec![2, 2, 2], p).unwrap();
            let truth = Tensor::new(vec![2, 2, 2], y).unwrap();
            let l = iou_loss(&pred, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            let scores = ScoreMap(Tensor::new(vec![1, 2, 2, 2], pred.data().to_vec()).unwrap());
            let labels = LabelMask::new([1, 2, 2], (0..4).map(|i| (bits >> i) as u32 & 1).collect()).unwrap();
            prop_assert!(cross_entropy_loss(&scores, &labels).unwrap() >= 0.0);
        }
    }
}
