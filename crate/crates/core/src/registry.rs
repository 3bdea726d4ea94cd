//! Named strategies selected at runtime.

use std::collections::BTreeMap;

use crate::denoise::{EpsilonModel, GaussianPrior, MixturePrior, OracleModel, Prior, ZeroModel};
use crate::error::{invalid, MidmError, Result};
use crate::grid::LatentGrid;
use crate::losses::{FeatureExtractor, PyramidExtractor};
use crate::matching::{CorrespondenceEncoder, DescriptorConfig, PatchEncoder, StructureEncoder};
use crate::schedule::NoiseSchedule;

/// Name → strategy table.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Box<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, item: Box<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return invalid(format!("{} `{name}` is already registered", self.kind));
        }
        self.entries.insert(name.to_owned(), item);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| MidmError::UnknownStrategy {
            name: name.to_owned(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

/// Builds an epsilon model from the exemplar latent.
pub trait ModelFitter: Send + Sync {
    fn fit(&self, exemplar: &LatentGrid, sched: &NoiseSchedule) -> Result<Box<dyn EpsilonModel>>;
}

pub struct GaussianFitter;

impl ModelFitter for GaussianFitter {
    fn fit(&self, exemplar: &LatentGrid, sched: &NoiseSchedule) -> Result<Box<dyn EpsilonModel>> {
        let prior = GaussianPrior::fit_channel_moments(exemplar)?;
        Ok(Box::new(OracleModel::new(Prior::Gaussian(prior), sched.clone())))
    }
}

/// K-means initialised mixture of per-channel Gaussians.
pub struct MixtureFitter {
    pub components: usize,
    pub iterations: usize,
}

impl Default for MixtureFitter {
    fn default() -> Self {
        Self { components: 6, iterations: 20 }
    }
}

impl ModelFitter for MixtureFitter {
    fn fit(&self, exemplar: &LatentGrid, sched: &NoiseSchedule) -> Result<Box<dyn EpsilonModel>> {
        let prior = MixturePrior::fit_kmeans(exemplar, self.components, self.iterations)?;
        Ok(Box::new(OracleModel::new(Prior::Mixture(prior), sched.clone())))
    }
}

pub struct StandardNormalFitter;

impl ModelFitter for StandardNormalFitter {
    fn fit(&self, exemplar: &LatentGrid, sched: &NoiseSchedule) -> Result<Box<dyn EpsilonModel>> {
        Ok(Box::new(OracleModel::standard_normal(exemplar.shape(), sched.clone())?))
    }
}

pub struct ZeroFitter;

impl ModelFitter for ZeroFitter {
    fn fit(&self, _exemplar: &LatentGrid, _sched: &NoiseSchedule) -> Result<Box<dyn EpsilonModel>> {
        Ok(Box::new(ZeroModel))
    }
}

pub type EncoderCtor = fn(DescriptorConfig) -> Box<dyn CorrespondenceEncoder>;

pub const DEFAULT_MODEL: &str = "mixture";
pub const DEFAULT_ENCODER: &str = "structure";

pub fn model_fitters() -> Registry<dyn ModelFitter> {
    let mut r: Registry<dyn ModelFitter> = Registry::new("model");
    let entries: [(&str, Box<dyn ModelFitter>); 4] = [
        ("gaussian", Box::new(GaussianFitter)),
        ("mixture", Box::new(MixtureFitter::default())),
        ("standard-normal", Box::new(StandardNormalFitter)),
        ("zero", Box::new(ZeroFitter)),
    ];
    for (name, f) in entries {
        r.register(name, f).expect("unique names");
    }
    r
}

pub fn encoders() -> Registry<EncoderCtor> {
    let mut r = Registry::new("encoder");
    r.register("patch", Box::new((|c| Box::new(PatchEncoder::new(c))) as EncoderCtor)).expect("unique names");
    r.register("structure", Box::new((|c| Box::new(StructureEncoder::new(c))) as EncoderCtor))
        .expect("unique names");
    r
}

pub fn feature_extractors() -> Registry<dyn FeatureExtractor> {
    let mut r: Registry<dyn FeatureExtractor> = Registry::new("feature extractor");
    r.register("pyramid", Box::new(PyramidExtractor::default())).expect("unique names");
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_beta_schedule;

    #[test]
    fn lookup_and_unknown() {
        let fitters = model_fitters();
        assert_eq!(fitters.names(), ["gaussian", "mixture", "standard-normal", "zero"]);
        let err = fitters.get("unet").err().unwrap();
        assert!(matches!(&err, MidmError::UnknownStrategy { name, known } if name == "unet" && known.contains("mixture")));
        assert_eq!(encoders().names(), ["patch", "structure"]);
        assert_eq!(feature_extractors().get("pyramid").unwrap().name(), "pyramid");
    }

    #[test]
    fn duplicate_rejected() {
        let mut r = feature_extractors();
        assert!(r.register("pyramid", Box::new(PyramidExtractor::default())).is_err());
    }

    #[test]
    fn fitters_build_named_models() {
        let sched = linear_beta_schedule(1000, 1e-4, 0.02).unwrap();
        let z = LatentGrid::from_fn(3, 4, 4, |c, y, x| ((c + y * 3 + x) % 5) as f64 / 5.0 - 0.4).unwrap();
        let fitters = model_fitters();
        assert_eq!(fitters.get("gaussian").unwrap().fit(&z, &sched).unwrap().name(), "gaussian-oracle");
        assert_eq!(fitters.get("mixture").unwrap().fit(&z, &sched).unwrap().name(), "mixture-oracle");
        let zero = fitters.get("zero").unwrap().fit(&z, &sched).unwrap();
        assert_eq!(zero.eval(&z, 10).unwrap().data().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        for name in encoders().names() {
            let enc = (encoders().get(name).unwrap())(DescriptorConfig::default());
            assert_eq!(enc.name(), name);
        }
    }
}
