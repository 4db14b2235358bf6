//! Novel-class registration and class-incremental session bookkeeping.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fcp::wgap;
use crate::gfst;
use crate::pkl::KernelBank;
use crate::tensor::{Real, Tensor};
use crate::training::FrozenModel;

/// Annotated shots of one novel class.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet<T> {
    /// `K×C×H×W`.
    pub feats: Tensor<T>,
    /// Binary `K×H×W`, nonempty per shot.
    pub masks: Tensor<T>,
    pub class_id: u32,
}

impl<T: Real> SupportSet<T> {
    pub fn new(feats: Tensor<T>, masks: Tensor<T>, class_id: u32) -> Result<Self> {
        let [k, _, h, w]: [usize; 4] = feats
            .dims()
            .try_into()
            .map_err(|_| shape_err!("support features must be K×C×H×W, got {:?}", feats.dims()))?;
        if k == 0 {
            return Err(Error::Data(format!("class {} has no support shots", class_id)));
        }
        if masks.dims() != [k, h, w] {
            return Err(shape_err!("support masks {:?} for features {:?}", masks.dims(), feats.dims()));
        }
        if masks.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::Data("support masks must be binary".into()));
        }
        if let Some(shot) = (0..k).find(|&i| masks.slab(i).iter().all(|&m| m == T::zero())) {
            return Err(Error::Data(format!("shot {} of class {} has an empty mask", shot, class_id)));
        }
        Ok(Self { feats, masks, class_id })
    }

    pub fn shots(&self) -> usize {
        self.feats.dims()[0]
    }
}

/// One kernel row per support set: the shot average of the masked wGAP
/// prototype (not renormalised).
pub fn register_novel<T: Real>(model: &FrozenModel<T>, supports: &[SupportSet<T>]) -> Result<Tensor<T>> {
    let c = model.bank.channels();
    let mut rows = Vec::with_capacity(supports.len() * c);
    for s in supports {
        let [k, sc, h, w]: [usize; 4] = s.feats.dims().try_into().unwrap();
        if sc != c {
            return Err(shape_err!("support channels {} vs model {}", sc, c));
        }
        let mut acc = vec![T::zero(); c];
        for shot in 0..k {
            let feat = Tensor::new(vec![c, h, w], s.feats.slab(shot).to_vec())?;
            let mask = Tensor::new(vec![h, w], s.masks.slab(shot).to_vec())?;
            for (a, v) in acc.iter_mut().zip(wgap(&feat, &mask)?.proto) {
                *a = *a + v;
            }
        }
        let kf = T::from_usize(k).unwrap();
        rows.extend(acc.into_iter().map(|v| v / kf));
    }
    Tensor::new(vec![supports.len(), c], rows)
}

/// `Concat([K, K_n])`; the input bank is left untouched.
pub fn concat_kernels<T: Real>(bank: &KernelBank<T>, novel_rows: &Tensor<T>, class_ids: &[u32]) -> Result<KernelBank<T>> {
    let c = bank.channels();
    if novel_rows.rank() != 2 || novel_rows.dims()[0] != class_ids.len() || (novel_rows.dims()[1] != c && !class_ids.is_empty()) {
        return Err(shape_err!(
            "novel rows {:?} for {} ids and {} channels",
            novel_rows.dims(),
            class_ids.len(),
            c
        ));
    }
    let mut data = bank.kernels().data().to_vec();
    data.extend_from_slice(novel_rows.data());
    let mut ids = bank.class_ids().to_vec();
    ids.extend_from_slice(class_ids);
    if let Some(dup) = class_ids.iter().find(|id| bank.class_ids().contains(id)) {
        return Err(Error::ClassOverlap(format!("class {} is already registered", dup)));
    }
    KernelBank::new(Tensor::new(vec![ids.len(), c], data)?, ids, bank.base_count())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: usize,
    pub class_ids: Vec<u32>,
}

/// Ordered sessions (session 0 holds the base classes) and the whole-class
/// kernel bank they produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRegistry<T> {
    sessions: Vec<Session>,
    bank: KernelBank<T>,
}

impl<T: Real> SessionRegistry<T> {
    /// Registry holding only the base session of a frozen model.
    pub fn base(model: &FrozenModel<T>) -> Self {
        let base = model.bank.base_rows();
        let ids = model.bank.class_ids()[..model.bank.base_count()].to_vec();
        Self {
            sessions: vec![Session { id: 0, class_ids: ids.clone() }],
            bank: KernelBank::new(base, ids, model.bank.base_count()).expect("base rows of a valid bank"),
        }
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn bank(&self) -> &KernelBank<T> {
        &self.bank
    }

    pub fn next_session(&self) -> usize {
        self.sessions.len()
    }

    /// Class ids registered after the base session.
    pub fn novel_ids(&self) -> Vec<u32> {
        self.sessions[1..].iter().flat_map(|s| s.class_ids.iter().copied()).collect()
    }

    /// Registers session `session` (must be the next one) from its own
    /// supports; earlier sessions and rows are carried over unchanged.
    pub fn extend_session(&self, session: usize, model: &FrozenModel<T>, supports: &[SupportSet<T>]) -> Result<Self> {
        if session != self.next_session() {
            return Err(Error::Registry(format!(
                "session {} attached out of order; next session is {}",
                session,
                self.next_session()
            )));
        }
        if model.bank.base_rows() != self.bank.base_rows() || model.bank.base_count() != self.bank.base_count() {
            return Err(Error::Registry("supports registered against a different model".into()));
        }
        let ids: Vec<u32> = supports.iter().map(|s| s.class_id).collect();
        let mut seen = BTreeSet::new();
        for &id in &ids {
            if self.bank.class_ids().contains(&id) || !seen.insert(id) {
                return Err(Error::ClassOverlap(format!(
                    "class {} already belongs to an earlier session",
                    id
                )));
            }
        }
        let rows = register_novel(model, supports)?;
        let bank = concat_kernels(&self.bank, &rows, &ids)?;
        let mut sessions = self.sessions.clone();
        sessions.push(Session { id: session, class_ids: ids });
        Ok(Self { sessions, bank })
    }

    /// `registry.json` plus `kernels.gfst`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        gfst::write(dir.join("kernels.gfst"), self.bank.kernels())?;
        let manifest = RegistryManifest {
            format: REGISTRY_FORMAT.into(),
            version: 1,
            base_count: self.bank.base_count(),
            channels: self.bank.channels(),
            sessions: self.sessions.clone(),
            kernels: "kernels.gfst".into(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("registry.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("registry.json"))
            .map_err(|e| Error::Config(format!("missing registry in {}: {}", dir.display(), e)))?;
        let m: RegistryManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != REGISTRY_FORMAT || m.version != 1 {
            return Err(Error::Format(format!("unsupported registry {} v{}", m.format, m.version)));
        }
        if m.sessions.iter().enumerate().any(|(i, s)| s.id != i) || m.sessions.is_empty() {
            return Err(Error::Registry("sessions must be numbered 0, 1, … in order".into()));
        }
        let ids: Vec<u32> = m.sessions.iter().flat_map(|s| s.class_ids.iter().copied()).collect();
        let kernels: Tensor<T> = gfst::read_as(dir.join(&m.kernels))?;
        let bank = KernelBank::new(kernels, ids, m.base_count)?;
        if bank.channels() != m.channels || m.sessions[0].class_ids.len() != m.base_count {
            return Err(Error::Registry("registry manifest disagrees with its kernels".into()));
        }
        Ok(Self { sessions: m.sessions, bank })
    }
}

const REGISTRY_FORMAT: &str = "gfss-registry";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryManifest {
    format: String,
    version: u32,
    base_count: usize,
    channels: usize,
    sessions: Vec<Session>,
    kernels: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcp::FcpParams;
    use crate::pkl::PklConfig;
    use approx::assert_relative_eq;

    fn model() -> FrozenModel<f64> {
        FrozenModel {
            bank: KernelBank::init_base(3, 8, 1).unwrap(),
            fcp: FcpParams::init(8, 2).unwrap(),
            pkl: PklConfig::default(),
        }
    }

    fn constant_support(v: &[f64], shots: usize, class_id: u32) -> SupportSet<f64> {
        let (h, w) = (3, 3);
        let feats = Tensor::from_fn(&[shots, 8, h, w], |i| v[(i / (h * w)) % 8]);
        let masks = Tensor::from_fn(&[shots, h, w], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        SupportSet::new(feats, masks, class_id).unwrap()
    }

    #[test]
    fn constant_field_registers_unit_vector() {
        let v = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let rows = register_novel(&model(), &[constant_support(&v, 2, 9)]).unwrap();
        assert_eq!(rows.dims(), &[1, 8]);
        assert_relative_eq!(rows.data()[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(rows.data()[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn shots_are_averaged() {
        let mut feats = Tensor::zeros(&[2, 8, 1, 2]);
        feats.data_mut()[0] = 1.0; // shot 0, channel 0, pixel 0
        feats.data_mut()[16 + 2] = 2.0; // shot 1, channel 1, pixel 0
        let masks = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = SupportSet::new(feats, masks, 7).unwrap();
        let rows = register_novel(&model(), &[s]).unwrap();
        assert_eq!(&rows.data()[..3], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let feats = Tensor::<f64>::zeros(&[1, 8, 2, 2]);
        let masks = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(SupportSet::new(feats, masks, 4), Err(Error::Data(_))));
    }

    #[test]
    fn concat_keeps_base_rows() {
        let m = model();
        let empty = Tensor::zeros(&[0, 8]);
        assert_eq!(concat_kernels(&m.bank, &empty, &[]).unwrap(), m.bank);
        let rows = Tensor::full(&[2, 8], 0.1);
        let bank = concat_kernels(&m.bank, &rows, &[5, 6]).unwrap();
        assert_eq!(bank.len(), 5);
        assert_eq!(bank.base_count(), 3);
        assert_eq!(bank.base_rows(), m.bank.base_rows());
        assert!(matches!(concat_kernels(&m.bank, &rows, &[2, 6]), Err(Error::ClassOverlap(_))));
    }

    #[test]
    fn sessions_are_ordered_and_disjoint() {
        let m = model();
        let reg = SessionRegistry::base(&m);
        let a = constant_support(&[1.0; 8], 1, 3);
        let b = constant_support(&[-1.0; 8], 1, 4);
        let r1 = reg.extend_session(1, &m, &[a.clone()]).unwrap();
        assert!(matches!(r1.extend_session(1, &m, &[b.clone()]), Err(Error::Registry(_))));
        assert!(matches!(r1.extend_session(2, &m, &[a.clone()]), Err(Error::ClassOverlap(_))));
        let r2 = r1.extend_session(2, &m, &[b.clone()]).unwrap();
        let single = reg.extend_session(1, &m, &[a, b]).unwrap();
        assert_eq!(r2.bank(), single.bank());
        assert_eq!(r2.novel_ids(), vec![3, 4]);
        assert_eq!(r1.bank().len(), 4);

        let dir = tempfile::tempdir().unwrap();
        r2.save(dir.path()).unwrap();
        assert_eq!(SessionRegistry::<f64>::load(dir.path()).unwrap(), r2);
    }
}
