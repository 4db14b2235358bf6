//! A materialised world: evaluation images and novel-class supports, with a
//! `dataset.json` manifest naming the GFST files that hold them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{shape_err, Error, Result};
use crate::gfst;
use crate::pkl::LabelMask;
use crate::registry::SupportSet;
use crate::synthgen::{sample_eval_image, sample_supports, SyntheticSample, World};
use crate::tensor::{Real, Tensor};

const FORMAT: &str = "gfss-dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub world: World,
    pub eval: Vec<SyntheticSample<T>>,
    /// Keyed by novel class id.
    pub supports: BTreeMap<u32, SupportSet<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFiles {
    images: usize,
    /// `N×C×H×W`.
    features: String,
    /// `N×H×W` class ids.
    labels: String,
    /// `N×H×W` binary.
    fg: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportFiles {
    class_id: u32,
    shots: usize,
    features: String,
    masks: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    world: String,
    prototypes: String,
    eval: EvalFiles,
    supports: Vec<SupportFiles>,
}

fn stack<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Data("nothing to stack".into()))?;
    let inner = &first.dims()[1..];
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in parts {
        if &p.dims()[1..] != inner {
            return Err(shape_err!("stack of {:?} with {:?}", first.dims(), p.dims()));
        }
        data.extend_from_slice(p.data());
    }
    let mut dims = vec![parts.iter().map(|p| p.dims()[0]).sum()];
    dims.extend_from_slice(inner);
    Tensor::new(dims, data)
}

/// Splits an `N×…` tensor into `N` tensors of leading size 1.
fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut dims = t.dims().to_vec();
    let n = dims[0];
    dims[0] = 1;
    (0..n).map(|i| Tensor::new(dims.clone(), t.slab(i).to_vec())).collect()
}

impl<T: Real> Dataset<T> {
    /// Evaluation images and `data.shots` supports for every novel class.
    pub fn generate(world: &World, data: &DataConfig) -> Result<Self> {
        let eval = (0..data.eval_images as u64)
            .map(|i| sample_eval_image(world, data.eval_classes_per_image, i))
            .collect::<Result<Vec<_>>>()?;
        let supports = world
            .novel_ids()
            .into_iter()
            .map(|c| Ok((c, sample_supports(world, c, data.shots)?)))
            .collect::<Result<_>>()?;
        Ok(Self { world: world.clone(), eval, supports })
    }

    pub fn eval_features(&self) -> Result<Tensor<T>> {
        stack(&self.eval.iter().map(|s| &s.feat).collect::<Vec<_>>())
    }

    pub fn eval_labels(&self) -> Result<LabelMask> {
        LabelMask::concat(&self.eval.iter().map(|s| s.labels.clone()).collect::<Vec<_>>())
    }

    pub fn supports_for(&self, class_ids: &[u32]) -> Result<Vec<SupportSet<T>>> {
        class_ids
            .iter()
            .map(|c| {
                self.supports
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("dataset has no supports for class {}", c)))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.eval.is_empty() {
            return Err(Error::Config("dataset needs at least one evaluation image".into()));
        }
        self.world.save(dir)?;
        fs::create_dir_all(dir.join("eval"))?;
        fs::create_dir_all(dir.join("supports"))?;
        let eval = EvalFiles {
            images: self.eval.len(),
            features: "eval/features.gfst".into(),
            labels: "eval/labels.gfst".into(),
            fg: "eval/fg.gfst".into(),
        };
        gfst::write(dir.join(&eval.features), &self.eval_features()?)?;
        gfst::write::<f32>(dir.join(&eval.labels), &self.eval_labels()?.to_tensor())?;
        gfst::write(dir.join(&eval.fg), &stack(&self.eval.iter().map(|s| &s.fg).collect::<Vec<_>>())?)?;
        let mut supports = Vec::new();
        for (c, s) in &self.supports {
            let f = SupportFiles {
                class_id: *c,
                shots: s.shots(),
                features: format!("supports/class_{:03}.features.gfst", c),
                masks: format!("supports/class_{:03}.masks.gfst", c),
            };
            gfst::write(dir.join(&f.features), &s.feats)?;
            gfst::write(dir.join(&f.masks), &s.masks)?;
            supports.push(f);
        }
        let manifest = DatasetManifest {
            format: FORMAT.into(),
            version: 1,
            world: "world.json".into(),
            prototypes: "prototypes.gfst".into(),
            eval,
            supports,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("dataset.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("dataset.json"))
            .map_err(|e| Error::Config(format!("missing dataset in {}: {}", dir.display(), e)))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != FORMAT || m.version != 1 {
            return Err(Error::Format(format!("unsupported dataset {} v{}", m.format, m.version)));
        }
        if m.world != "world.json" || m.prototypes != "prototypes.gfst" {
            return Err(Error::Format("dataset world must be world.json + prototypes.gfst".into()));
        }
        let world = World::load(dir)?;
        let feats = unstack(&gfst::read_as::<T>(dir.join(&m.eval.features))?)?;
        let labels = unstack(&gfst::read_as::<f32>(dir.join(&m.eval.labels))?)?;
        let fg = unstack(&gfst::read_as::<T>(dir.join(&m.eval.fg))?)?;
        if feats.len() != m.eval.images || labels.len() != m.eval.images || fg.len() != m.eval.images {
            return Err(Error::Data("evaluation files disagree on the image count".into()));
        }
        let eval = feats
            .into_iter()
            .zip(labels)
            .zip(fg)
            .map(|((feat, l), fg)| {
                let labels = LabelMask::from_tensor(&l)?;
                if feat.dims()[1] != world.spec.channels {
                    return Err(shape_err!("features {:?} for {} channels", feat.dims(), world.spec.channels));
                }
                if labels.labels().iter().any(|&c| c as usize >= world.spec.n_classes()) {
                    return Err(Error::Data("evaluation labels outside the world's classes".into()));
                }
                Ok(SyntheticSample { feat, labels, fg })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut supports = BTreeMap::new();
        for f in &m.supports {
            if !world.is_novel(f.class_id) {
                return Err(Error::Data(format!("support class {} is not novel", f.class_id)));
            }
            let s = SupportSet::new(gfst::read_as(dir.join(&f.features))?, gfst::read_as(dir.join(&f.masks))?, f.class_id)?;
            if s.shots() != f.shots {
                return Err(Error::Data(format!("class {}: manifest lists {} shots, file has {}", f.class_id, f.shots, s.shots())));
            }
            supports.insert(f.class_id, s);
        }
        Ok(Self { world, eval, supports })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_world, WorldSpec};

    fn small() -> Dataset<f32> {
        let world = make_world(&WorldSpec { height: 8, width: 8, ..WorldSpec::default() }).unwrap();
        Dataset::generate(&world, &DataConfig { eval_images: 3, ..DataConfig::default() }).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let ds = small();
        assert_eq!(ds.supports.keys().copied().collect::<Vec<_>>(), ds.world.novel_ids());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::<f32>::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn generation_is_byte_stable() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        small().save(a.path()).unwrap();
        small().save(b.path()).unwrap();
        for f in ["dataset.json", "world.json", "eval/features.gfst", "supports/class_006.masks.gfst"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f);
        }
    }

    #[test]
    fn missing_supports_are_config_errors() {
        let ds = small();
        assert_eq!(ds.supports_for(&[2]).unwrap_err().exit_code(), 2);
        assert_eq!(ds.supports_for(&[7]).unwrap()[0].class_id, 7);
    }
}
