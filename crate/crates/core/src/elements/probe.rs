use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classes::Concept;
use super::config::DatasetConfig;
use super::render::render_image;
use super::scene::{sample_scene, sample_scene_with, ElementConstraint, Region, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::ImageTensor;

/// Images per probe set, split into training and held-out parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSizes {
    pub train: usize,
    pub test: usize,
}

impl ProbeSizes {
    pub fn total(&self) -> usize {
        self.train + self.test
    }
}

impl Default for ProbeSizes {
    fn default() -> Self {
        ProbeSizes {
            train: 100,
            test: 50,
        }
    }
}

/// Positive exemplars of one concept paired with random negative set `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub concept: Concept,
    pub region: Option<Region>,
    pub r: usize,
    pub positive: Vec<SceneSpec>,
    pub negative: Vec<SceneSpec>,
}

impl ProbeDataset {
    pub fn label(&self) -> String {
        probe_label(self.concept, self.region)
    }

    pub fn positive_images(&self, config: &DatasetConfig) -> Vec<ImageTensor> {
        render_all(&self.positive, config)
    }

    pub fn negative_images(&self, config: &DatasetConfig) -> Vec<ImageTensor> {
        render_all(&self.negative, config)
    }
}

/// Label like `striped` or `striped@left`.
pub fn probe_label(concept: Concept, region: Option<Region>) -> String {
    match region {
        Some(r) => format!("{concept}@{r}"),
        None => concept.to_string(),
    }
}

pub fn render_all(scenes: &[SceneSpec], config: &DatasetConfig) -> Vec<ImageTensor> {
    scenes.par_iter().map(|s| render_image(s, config)).collect()
}

/// Positive exemplar scenes: every element carries `concept` (and lies in `region`).
///
/// The set depends only on the config seed, the concept and the region.
pub fn positive_set(
    config: &DatasetConfig,
    concept: Concept,
    region: Option<Region>,
    count: usize,
) -> Result<Vec<SceneSpec>> {
    if !concept.in_config(config) {
        return Err(Error::UnknownConcept(concept.to_string()));
    }
    let constraint = ElementConstraint {
        concept: Some(concept),
        region,
    };
    let domain = format!("positive/{}", probe_label(concept, region));
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_scene_with(config, &mut stream(config.seed, &domain, i), i, &constraint))
        .collect()
}

/// Random in-distribution scenes forming negative set `r`.
pub fn random_set(config: &DatasetConfig, r: usize, count: usize) -> Result<Vec<SceneSpec>> {
    let domain = format!("random/{r}");
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_scene(config, &mut stream(config.seed, &domain, i), i))
        .collect()
}

pub fn build_probe(
    config: &DatasetConfig,
    concept: Concept,
    sizes: ProbeSizes,
    r: usize,
    region: Option<Region>,
) -> Result<ProbeDataset> {
    Ok(ProbeDataset {
        concept,
        region,
        r,
        positive: positive_set(config, concept, region, sizes.total())?,
        negative: random_set(config, r, sizes.total())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::config::{Shape, Texture};
    use sha2::{Digest, Sha256};

    fn digest(images: &[ImageTensor]) -> Vec<u8> {
        let mut h = Sha256::new();
        for i in images {
            h.update(i.to_le_bytes());
        }
        h.finalize().to_vec()
    }

    #[test]
    fn probe_is_deterministic_and_pure() {
        let config = DatasetConfig::simple(11);
        let sizes = ProbeSizes { train: 10, test: 5 };
        let a = build_probe(&config, Concept::Shape(Shape::Circle), sizes, 2, None).unwrap();
        let b = build_probe(&config, Concept::Shape(Shape::Circle), sizes, 2, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            digest(&a.positive_images(&config)),
            digest(&b.positive_images(&config))
        );
        assert_eq!(a.positive.len(), 15);
        assert!(a
            .positive
            .iter()
            .all(|s| s.elements.iter().all(|e| e.shape == Shape::Circle)));
    }

    #[test]
    fn negatives_vary_with_r_and_positives_do_not() {
        let config = DatasetConfig::simple(11);
        let sizes = ProbeSizes { train: 6, test: 3 };
        let concept = Concept::Texture(Texture::Stripes);
        let a = build_probe(&config, concept, sizes, 0, None).unwrap();
        let b = build_probe(&config, concept, sizes, 1, None).unwrap();
        assert_eq!(a.positive, b.positive);
        assert_ne!(
            digest(&a.negative_images(&config)),
            digest(&b.negative_images(&config))
        );
    }

    #[test]
    fn striped_left_probe_is_left() {
        let config = DatasetConfig::simple(11);
        let probe = build_probe(
            &config,
            Concept::Texture(Texture::Stripes),
            ProbeSizes {
                train: 20,
                test: 10,
            },
            0,
            Some(Region::Left),
        )
        .unwrap();
        assert_eq!(probe.label(), "striped@left");
        for scene in &probe.positive {
            assert_eq!(scene.elements.len(), config.elements_per_image);
            for e in &scene.elements {
                assert_eq!(e.texture, Texture::Stripes);
                assert!(Region::Left.contains_box(e, config.image_side));
            }
        }
    }

    #[test]
    fn unknown_concept_is_rejected() {
        let config = DatasetConfig::simple(0);
        let err = build_probe(
            &config,
            Concept::Shape(Shape::Cross),
            ProbeSizes::default(),
            0,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownConcept(_)));
    }
}
