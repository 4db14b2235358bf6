//! Conditional-bias inference: cosine scores against the whole-class bank,
//! top-2 candidates, and a bias on the runner-up inside the predicted
//! foreground.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fcp::{fcp_forward, EpisodeBatch};
use crate::pkl::{check_feature_map, refresh_for_image, KernelBank, LabelMask, PklConfig};
use crate::registry::SessionRegistry;
use crate::tensor::{norm, norm_floor, Real, Tensor};
use crate::training::FrozenModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub bias_b: f64,
    pub fg_threshold: f64,
    pub use_pkl_update: bool,
    pub use_fcp: bool,
    pub use_cbbi: bool,
    /// Bias only runner-up classes registered after the base session.
    pub novel_only_bias: bool,
    /// Replace the similarity-gated rate with 0.5 during the kernel refresh.
    pub fixed_alr: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            bias_b: 0.5,
            fg_threshold: 0.5,
            use_pkl_update: true,
            use_fcp: true,
            use_cbbi: true,
            novel_only_bias: false,
            fixed_alr: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias_b >= 0.0 && self.bias_b.is_finite()) {
            return Err(Error::Config(format!("bias_b {} must be finite and ≥ 0", self.bias_b)));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(Error::Config(format!("fg_threshold {} outside (0, 1)", self.fg_threshold)));
        }
        Ok(())
    }

    /// Kernel-refresh settings given the model's own.
    pub fn pkl_config(&self, model: &PklConfig) -> PklConfig {
        if self.fixed_alr {
            PklConfig {
                fixed_alpha: Some(0.5),
                ..*model
            }
        } else {
            *model
        }
    }
}

/// Cosine of every bank row with every pixel feature, `B×N×H×W`.
pub fn classwise_cosine_scores<T: Real>(rows: &Tensor<T>, feat: &Tensor<T>) -> Result<Tensor<T>> {
    if rows.rank() != 2 {
        return Err(shape_err!("kernel rows must be N×C, got {:?}", rows.dims()));
    }
    let (n, c) = (rows.dims()[0], rows.dims()[1]);
    let [b, _, h, w] = check_feature_map(feat, c)?;
    let hw = h * w;
    let floor = norm_floor::<T>();
    let units: Vec<Option<Vec<T>>> = rows
        .data()
        .chunks(c)
        .map(|r| {
            let nr = norm(r);
            (nr >= floor).then(|| r.iter().map(|&v| v / nr).collect())
        })
        .collect();
    let mut out = vec![T::zero(); b * n * hw];
    let mut pix = vec![T::zero(); c];
    for bi in 0..b {
        let f = feat.slab(bi);
        for p in 0..hw {
            for ch in 0..c {
                pix[ch] = f[ch * hw + p];
            }
            let np = norm(&pix);
            if np < floor {
                continue;
            }
            for (i, u) in units.iter().enumerate() {
                if let Some(u) = u {
                    let d = u.iter().zip(&pix).fold(T::zero(), |a, (&x, &y)| a + x * y) / np;
                    out[(bi * n + i) * hw + p] = d.max(-T::one()).min(T::one());
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![b, n, h, w], out))
}

/// Base rows refreshed for one image (`1×C×H×W`); other rows untouched.
pub fn inference_pkl_refresh<T: Real>(bank: &KernelBank<T>, feat_b: &Tensor<T>, cfg: &PklConfig) -> Result<KernelBank<T>> {
    let base = bank.base_rows();
    let refreshed = refresh_for_image(&base, feat_b, cfg)?;
    bank.with_base_rows(&refreshed)
}

/// Per-pixel best and runner-up scores with their row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMaps<T> {
    pub top1_value: Tensor<T>,
    pub top2_value: Tensor<T>,
    pub top1_class: LabelMask,
    pub top2_class: LabelMask,
}

/// Ties go to the lower row index.
pub fn top2<T: Real>(scores: &Tensor<T>) -> Result<CandidateMaps<T>> {
    let [b, n, h, w]: [usize; 4] = scores
        .dims()
        .try_into()
        .map_err(|_| shape_err!("scores must be B×N×H×W, got {:?}", scores.dims()))?;
    if n < 2 {
        return Err(Error::Config(format!("top-2 needs at least 2 classes, got {}", n)));
    }
    let hw = h * w;
    let mut v1 = Vec::with_capacity(b * hw);
    let mut v2 = Vec::with_capacity(b * hw);
    let mut c1 = Vec::with_capacity(b * hw);
    let mut c2 = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let s = scores.slab(bi);
        for p in 0..hw {
            let (mut i1, mut i2) = (0usize, usize::MAX);
            for i in 1..n {
                let v = s[i * hw + p];
                if v > s[i1 * hw + p] {
                    i2 = i1;
                    i1 = i;
                } else if i2 == usize::MAX || v > s[i2 * hw + p] {
                    i2 = i;
                }
            }
            v1.push(s[i1 * hw + p]);
            v2.push(s[i2 * hw + p]);
            c1.push(i1 as u32);
            c2.push(i2 as u32);
        }
    }
    Ok(CandidateMaps {
        top1_value: Tensor::from_op(vec![b, h, w], v1),
        top2_value: Tensor::from_op(vec![b, h, w], v2),
        top1_class: LabelMask::new([b, h, w], c1)?,
        top2_class: LabelMask::new([b, h, w], c2)?,
    })
}

/// Inside the foreground the runner-up wins when `top2 + b > top1`;
/// elsewhere the best class stands. Returns row indices. With
/// `novel_only_bias`, only runner-ups at row `≥ base_count` get the bias.
pub fn cbbi_decide<T: Real>(cands: &CandidateMaps<T>, fg_mask: &Tensor<T>, cfg: &InferenceConfig, base_count: usize) -> Result<LabelMask> {
    let dims = cands.top1_class.dims();
    if fg_mask.dims() != dims {
        return Err(shape_err!("foreground mask {:?} for candidates {:?}", fg_mask.dims(), dims));
    }
    let bias = T::lit(cfg.bias_b);
    let labels = (0..fg_mask.len())
        .map(|i| {
            let (c1, c2) = (cands.top1_class.labels()[i], cands.top2_class.labels()[i]);
            let eligible = !cfg.novel_only_bias || c2 as usize >= base_count;
            let fg = fg_mask.data()[i] != T::zero();
            if fg && eligible && cands.top2_value.data()[i] + bias > cands.top1_value.data()[i] {
                c2
            } else {
                c1
            }
        })
        .collect();
    LabelMask::new(dims, labels)
}

/// Per-image inference intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace<T> {
    /// Class ids, `B×H×W`.
    pub labels: LabelMask,
    /// Binarised foreground mask actually used, `B×H×W`.
    pub fg_mask: Tensor<T>,
    /// Foreground probabilities (zeros when FCP is off), `B×H×W`.
    pub fg_prob: Tensor<T>,
}

/// Class-id prediction for each image of `feat` (`B×C×H×W`).
pub fn infer<T: Real>(model: &FrozenModel<T>, registry: &SessionRegistry<T>, feat: &Tensor<T>, cfg: &InferenceConfig) -> Result<LabelMask> {
    Ok(infer_trace(model, registry, feat, cfg)?.labels)
}

pub fn infer_trace<T: Real>(
    model: &FrozenModel<T>,
    registry: &SessionRegistry<T>,
    feat: &Tensor<T>,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace<T>> {
    cfg.validate()?;
    let bank = registry.bank();
    let [b, c, h, w] = check_feature_map(feat, bank.channels())?;
    let pkl = cfg.pkl_config(&model.pkl);
    let hw = h * w;
    let threshold = T::lit(cfg.fg_threshold);
    let mut labels = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b * hw);
    let mut probs = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let single = Tensor::new(vec![1, c, h, w], feat.slab(bi).to_vec())?;
        let rows = if cfg.use_pkl_update {
            inference_pkl_refresh(bank, &single, &pkl)?
        } else {
            bank.clone()
        };
        let scores = classwise_cosine_scores(rows.kernels(), &single)?;
        let prob = if cfg.use_fcp {
            fcp_forward(&EpisodeBatch::from_features(single)?, &model.fcp)?
        } else {
            Tensor::zeros(&[1, h, w])
        };
        let mask = prob.map(|p| if cfg.use_fcp && p > threshold { T::one() } else { T::zero() });
        let rows_idx = if cfg.use_cbbi && rows.len() >= 2 {
            cbbi_decide(&top2(&scores)?, &mask, cfg, bank.base_count())?
        } else {
            plain_argmax(&scores)?
        };
        labels.push(rows_idx.map_rows(bank.class_ids()));
        masks.extend_from_slice(mask.data());
        probs.extend_from_slice(prob.data());
    }
    Ok(InferenceTrace {
        labels: LabelMask::concat(&labels)?,
        fg_mask: Tensor::from_op(vec![b, h, w], masks),
        fg_prob: Tensor::from_op(vec![b, h, w], probs),
    })
}

/// Row index of the best score per pixel, ties to the lowest index.
pub fn plain_argmax<T: Real>(scores: &Tensor<T>) -> Result<LabelMask> {
    let [b, n, h, w]: [usize; 4] = scores
        .dims()
        .try_into()
        .map_err(|_| shape_err!("scores must be B×N×H×W, got {:?}", scores.dims()))?;
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let s = scores.slab(bi);
        for p in 0..hw {
            out.push(crate::pkl::argmax((0..n).map(|i| s[i * hw + p])) as u32);
        }
    }
    LabelMask::new([b, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cands(v1: f64, c1: u32, v2: f64, c2: u32) -> CandidateMaps<f64> {
        CandidateMaps {
            top1_value: Tensor::new(vec![1, 1, 1], vec![v1]).unwrap(),
            top2_value: Tensor::new(vec![1, 1, 1], vec![v2]).unwrap(),
            top1_class: LabelMask::new([1, 1, 1], vec![c1]).unwrap(),
            top2_class: LabelMask::new([1, 1, 1], vec![c2]).unwrap(),
        }
    }

    #[test]
    fn cosine_score_cases() {
        let rows = Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, 1.0]).unwrap();
        let feat = Tensor::new(vec![1, 2, 1, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = classwise_cosine_scores(&rows, &feat).unwrap();
        assert_eq!(s.dims(), &[1, 2, 1, 2]);
        assert_relative_eq!(s.get(&[0, 0, 0, 0]), 1.0);
        assert_relative_eq!(s.get(&[0, 1, 0, 0]), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_eq!(s.get(&[0, 0, 0, 1]), 0.0);
        assert_eq!(s.get(&[0, 1, 0, 1]), 0.0);
    }

    #[test]
    fn top2_cases() {
        let s = Tensor::new(vec![1, 3, 1, 1], vec![0.9, 0.1, 0.5]).unwrap();
        let c = top2(&s).unwrap();
        assert_eq!((c.top1_class.labels()[0], c.top1_value.data()[0]), (0, 0.9));
        assert_eq!((c.top2_class.labels()[0], c.top2_value.data()[0]), (2, 0.5));
        let tie = top2(&Tensor::<f64>::full(&[1, 3, 1, 1], 0.2)).unwrap();
        assert_eq!((tie.top1_class.labels()[0], tie.top2_class.labels()[0]), (0, 1));
        assert!(matches!(top2(&Tensor::<f64>::zeros(&[1, 1, 2, 2])), Err(Error::Config(_))));
    }

    #[test]
    fn decision_cases() {
        let cfg = InferenceConfig::default();
        let fg = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let bg = Tensor::zeros(&[1, 1, 1]);
        let c = cands(0.6, 1, 0.3, 7);
        assert_eq!(cbbi_decide(&c, &fg, &cfg, 6).unwrap().labels(), &[7]);
        assert_eq!(cbbi_decide(&c, &bg, &cfg, 6).unwrap().labels(), &[1]);
        let zero_b = InferenceConfig { bias_b: 0.0, ..cfg.clone() };
        assert_eq!(cbbi_decide(&c, &fg, &zero_b, 6).unwrap().labels(), &[1]);
        let tied = cands(0.75, 1, 0.25, 7);
        assert_eq!(cbbi_decide(&tied, &fg, &cfg, 6).unwrap().labels(), &[1]);
        let novel_only = InferenceConfig { novel_only_bias: true, ..cfg };
        let base_runner_up = cands(0.6, 1, 0.3, 2);
        assert_eq!(cbbi_decide(&base_runner_up, &fg, &novel_only, 6).unwrap().labels(), &[1]);
        assert_eq!(cbbi_decide(&c, &fg, &novel_only, 6).unwrap().labels(), &[7]);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        assert!(InferenceConfig { bias_b: -0.1, ..Default::default() }.validate().is_err());
        assert!(InferenceConfig { fg_threshold: 1.0, ..Default::default() }.validate().is_err());
    }
}
