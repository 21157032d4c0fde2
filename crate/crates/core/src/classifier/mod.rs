//! Proposal classifiers: a random forest (default) and an MLP.
//!
//! Models are stored as versioned JSON together with the feature maps and
//! feature spec they were trained on.

pub mod forest;
pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forest::{train_forest, ForestConfig, ForestModel, MaxFeatures, Tree};
pub use mlp::{train_mlp, train_mlp_split, MlpConfig, MlpModel};

use crate::coords::CoordSet;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureMatrix, FeatureSpec, MapKind};
use crate::volume::Volume3D;

pub const MODEL_FORMAT: &str = "probdetect-classifier";
pub const MODEL_VERSION: u32 = 1;

/// Probability at or above which a proposal counts as a cell.
pub const POSITIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Forest(ForestModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn n_features(&self) -> usize {
        match self {
            Model::Forest(f) => f.n_features,
            Model::Mlp(m) => m.n_features,
        }
    }

    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        match self {
            Model::Forest(f) => f.predict_proba(x),
            Model::Mlp(m) => m.predict_proba(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub format: String,
    pub version: u32,
    pub maps: Vec<MapKind>,
    pub feature_spec: FeatureSpec,
    pub model: Model,
}

impl Classifier {
    pub fn new(maps: Vec<MapKind>, feature_spec: FeatureSpec, model: Model) -> Result<Self> {
        let expected = feature_spec.dimension(maps.len());
        if expected != model.n_features() {
            return Err(Error::DimensionMismatch { expected: model.n_features(), got: expected });
        }
        Ok(Classifier { format: MODEL_FORMAT.into(), version: MODEL_VERSION, maps, feature_spec, model })
    }

    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.model.predict_proba(x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Classifier = serde_json::from_str(s)?;
        if c.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a classifier file (format {:?})", c.format)));
        }
        if c.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported classifier version {}", c.version)));
        }
        match &c.model {
            Model::Forest(f) => f.check()?,
            Model::Mlp(m) => m.check()?,
        }
        Classifier::new(c.maps, c.feature_spec, c.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Classifier::from_json(&std::fs::read_to_string(path)?)
    }

    /// Features for `proposals` from `maps`, which must be given in the order
    /// the model was trained with.
    pub fn features(&self, maps: &[(MapKind, &Volume3D)], proposals: &CoordSet) -> Result<FeatureMatrix> {
        let kinds: Vec<MapKind> = maps.iter().map(|m| m.0).collect();
        if kinds.len() != self.maps.len() {
            return Err(Error::DimensionMismatch {
                expected: self.model.n_features(),
                got: self.feature_spec.dimension(kinds.len()),
            });
        }
        if kinds != self.maps {
            return Err(Error::InvalidConfig(format!("model expects maps {:?}, got {:?}", self.maps, kinds)));
        }
        extract_features(maps, proposals, &self.feature_spec)
    }
}

/// Attaches a probability to every proposal.
pub fn classify_proposals(model: &Classifier, maps: &[(MapKind, &Volume3D)], proposals: &CoordSet) -> Result<CoordSet> {
    if proposals.is_empty() {
        let mut out = proposals.clone();
        out.p = Some(Vec::new());
        return Ok(out);
    }
    let x = model.features(maps, proposals)?;
    let p = model.predict_proba(&x)?;
    let mut out = proposals.clone();
    out.p = Some(p);
    Ok(out)
}

/// Proposals with `p >= 0.5`.
pub fn positives(classified: &CoordSet) -> CoordSet {
    classified.filter(|i| classified.prob(i) >= POSITIVE_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densitymap::{render_dm, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (FeatureMatrix, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = 120;
        let data: Vec<f64> = (0..rows * 56).map(|_| rng.random::<f64>()).collect();
        let x = FeatureMatrix::new(rows, 56, data);
        let y = (0..rows).map(|i| (x.get(i, 3) > 0.5) as u8).collect();
        (x, y)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let (x, y) = toy();
        let spec = FeatureSpec::default();
        let f = train_forest(&x, &y, &ForestConfig { n_trees: 8, ..Default::default() }).unwrap();
        let m = train_mlp(&x, &y, &MlpConfig { epochs: 3, ..Default::default() }).unwrap();
        for model in [Model::Forest(f), Model::Mlp(m)] {
            let c = Classifier::new(vec![MapKind::Dm], spec.clone(), model).unwrap();
            let back = Classifier::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
            let a = c.predict_proba(&x).unwrap();
            let b = back.predict_proba(&x).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn dm_only_model_rejects_three_map_features() {
        let (x, y) = toy();
        let f = train_forest(&x, &y, &ForestConfig { n_trees: 2, ..Default::default() }).unwrap();
        let c = Classifier::new(vec![MapKind::Dm], FeatureSpec::default(), Model::Forest(f)).unwrap();
        let props = CoordSet::new(vec![[5.5, 5.5, 5.5]]);
        let dm = render_dm(&props, [12, 12, 12], [1.0; 3], &KernelSpec::default()).unwrap();
        let maps = [(MapKind::Dm, &dm), (MapKind::Aleatoric, &dm), (MapKind::Epistemic, &dm)];
        assert!(matches!(
            classify_proposals(&c, &maps, &props),
            Err(Error::DimensionMismatch { expected: 56, got: 168 })
        ));
        let out = classify_proposals(&c, &maps[..1], &props).unwrap();
        assert_eq!(out.p.as_ref().unwrap().len(), 1);
        let empty = classify_proposals(&c, &maps, &CoordSet::new(vec![])).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn rejects_wrong_format_tag() {
        let (x, y) = toy();
        let f = train_forest(&x, &y, &ForestConfig { n_trees: 1, ..Default::default() }).unwrap();
        let c = Classifier::new(vec![MapKind::Dm], FeatureSpec::default(), Model::Forest(f)).unwrap();
        let s = c.to_json().unwrap().replace(MODEL_FORMAT, "other");
        assert!(matches!(Classifier::from_json(&s), Err(Error::Format(_))));
    }
}
