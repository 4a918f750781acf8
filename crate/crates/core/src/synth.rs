// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic dumps and next-token families with planted, known structure.
//!
//! Activation rows are built as
//!
//! ```text
//! row(layer, lang, sample) = semantic(layer, sample)
//!                          + [layer >= crit_layer] * scale(lang) * v_star
//!                          + noise
//! ```
//!
//! where the semantic draw is shared by every language (parallel content),
//! `v_star` is a hidden unit direction and `noise` is isotropic. Draw order
//! from the seeded stream: `v_star`, then per layer the semantic vectors for
//! every sample, then the noise of every row in row order. Values are
//! rounded to f32 so a written dump reads back identically.
//!
//! Default constants: `d = 64`, `σ_sem = 1`, base offset 5, `σ_noise = 0.1`,
//! language scales `5, 15, 25, 35, 45`. Neighbouring languages sit 10σ apart
//! along `v_star`, which puts the between-language variance (≈200) far
//! above the largest semantic eigenvalue (≈4.5 for 50 samples in 64 dims),
//! so PC1 recovers `v_star` and the 1-D probe separates all five languages.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::direction_finder::ActivationMatrix;
use crate::divergence::{
    kl_topk, ContextTag, DistributionRecord, SampleTriple, TokenEntry, TopKDistribution,
};
use crate::error::{Error, Result};
use crate::rng::GaussianStream;
use crate::tensor_store::{write_dump, CorpusManifest, Pooling};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const DEFAULT_LANGUAGES: [&str; 5] = ["en", "es", "ru", "zh", "hi"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLanguage {
    pub code: String,
    /// Offset along `v_star` applied from the critical layer on.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub languages: Vec<PlantedLanguage>,
    pub semantic_std: f64,
    pub noise_std: f64,
    pub layers: usize,
    pub crit_layer: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        let base_offset = 5.0;
        Self {
            dim: 64,
            languages: DEFAULT_LANGUAGES
                .iter()
                .enumerate()
                .map(|(j, code)| PlantedLanguage {
                    code: (*code).to_string(),
                    scale: base_offset * (2 * j + 1) as f64,
                })
                .collect(),
            semantic_std: 1.0,
            noise_std: 0.1,
            layers: 8,
            crit_layer: 6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim < 2 {
            return bad(format!("dim {} < 2", self.dim));
        }
        if self.languages.len() < 2 {
            return bad("need at least two languages".into());
        }
        for (i, lang) in self.languages.iter().enumerate() {
            if lang.code.is_empty() || self.languages[..i].iter().any(|l| l.code == lang.code) {
                return bad(format!("language code {:?} empty or repeated", lang.code));
            }
            if !lang.scale.is_finite() || lang.scale.abs() < 3.0 * self.semantic_std {
                return bad(format!(
                    "offset of {} must be finite with magnitude >= 3 σ_sem",
                    lang.code
                ));
            }
        }
        if !(self.semantic_std >= 0.0 && self.semantic_std.is_finite())
            || !(self.noise_std >= 0.0 && self.noise_std.is_finite())
        {
            return bad("standard deviations must be finite and non-negative".into());
        }
        if self.layers == 0 || self.crit_layer >= self.layers {
            return bad(format!(
                "crit layer {} must lie in 0..{}",
                self.crit_layer, self.layers
            ));
        }
        Ok(())
    }

    pub fn language_codes(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.code.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub v_star: Vec<f64>,
    pub offsets: Vec<PlantedLanguage>,
    pub crit_layer: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthDump {
    pub manifest: CorpusManifest,
    pub layers: Vec<ActivationMatrix>,
    pub truth: GroundTruth,
}

impl SynthDump {
    /// Writes the tensor_store layout plus `ground_truth.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_dump(dir, &self.manifest, &self.layers)?;
        let path = dir.join(GROUND_TRUTH_FILE);
        let mut json = serde_json::to_string_pretty(&self.truth).expect("ground truth serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn final_layer(&self) -> &ActivationMatrix {
        self.layers.last().expect("at least one layer")
    }
}

pub fn generate_dump(spec: &SynthSpec, n_per_language: usize) -> Result<SynthDump> {
    spec.validate()?;
    if n_per_language < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples per language, got {n_per_language}"
        )));
    }
    let d = spec.dim;
    let n = n_per_language;
    let mut rng = GaussianStream::new(spec.seed);
    let v_star = rng.unit_vector(d);
    let manifest = CorpusManifest {
        languages: spec.language_codes(),
        samples_per_language: n,
        layers: spec.layers,
        hidden_dim: d,
        pooling: Pooling::Mean,
        source: format!("synthetic (seed {})", spec.seed),
    };
    let labels = manifest.row_labels();
    let mut layers = Vec::with_capacity(spec.layers);
    for layer in 0..spec.layers {
        let semantic: Vec<Vec<f64>> = (0..n)
            .map(|_| rng.normal_vec(d, spec.semantic_std))
            .collect();
        let mut data = Vec::with_capacity(spec.languages.len() * n * d);
        for lang in &spec.languages {
            let offset = if layer >= spec.crit_layer {
                lang.scale
            } else {
                0.0
            };
            for sem in &semantic {
                for (j, &s) in sem.iter().enumerate() {
                    let x = s + offset * v_star[j] + spec.noise_std * rng.standard_normal();
                    data.push(x as f32 as f64);
                }
            }
        }
        layers.push(ActivationMatrix::new(
            layer,
            labels.len(),
            d,
            data,
            labels.clone(),
        )?);
    }
    Ok(SynthDump {
        manifest,
        layers,
        truth: GroundTruth {
            v_star,
            offsets: spec.languages.clone(),
            crit_layer: spec.crit_layer,
            seed: spec.seed,
        },
    })
}

/// Size of a synthetic next-token family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyShape {
    pub vocab: usize,
    pub top_k: usize,
    pub samples: usize,
}

impl Default for FamilyShape {
    fn default() -> Self {
        Self {
            vocab: 256,
            top_k: 100,
            samples: 32,
        }
    }
}

#[derive(Debug, Clone)]
struct FamilySample {
    base: Vec<f64>,
    shift: Vec<f64>,
    /// Language coordinate of the mixed context.
    mixed_coord: f64,
}

/// Next-token distributions whose logits depend linearly on a language
/// coordinate. Steering with strength `s` scales the mixed coordinate `m` to
/// `m (1 - s)`; the reference context sits at `m (1 - s_star)`. So `s = 0`
/// reproduces the mixed distribution, `s = s_star` reproduces the reference
/// exactly, and the mean KL over samples has its unique minimum at `s_star`.
#[derive(Debug, Clone)]
pub struct NextTokenFamily {
    s_star: f64,
    shape: FamilyShape,
    samples: Vec<FamilySample>,
}

impl NextTokenFamily {
    pub fn new(spec: &SynthSpec, s_star: f64) -> Result<Self> {
        Self::with_shape(spec, s_star, FamilyShape::default())
    }

    pub fn with_shape(spec: &SynthSpec, s_star: f64, shape: FamilyShape) -> Result<Self> {
        spec.validate()?;
        if !(-4.0..=4.0).contains(&s_star) {
            return Err(Error::InvalidArgument(format!(
                "s_star {s_star} outside the default grid [-4, 4]"
            )));
        }
        if shape.top_k == 0 || shape.top_k > shape.vocab || shape.samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad family shape {shape:?}"
            )));
        }
        if shape.vocab > u32::MAX as usize {
            return Err(Error::InvalidArgument("vocabulary too large".into()));
        }
        let mut rng = GaussianStream::new(spec.seed ^ 0x6e65_7874_746f_6b6e);
        let samples = (0..shape.samples)
            .map(|_| FamilySample {
                base: rng.normal_vec(shape.vocab, 2.0),
                shift: rng.normal_vec(shape.vocab, 1.0),
                mixed_coord: 0.5 + rng.uniform(),
            })
            .collect();
        Ok(Self {
            s_star,
            shape,
            samples,
        })
    }

    pub fn s_star(&self) -> f64 {
        self.s_star
    }

    pub fn shape(&self) -> FamilyShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn distribution(&self, sample: usize, strength: f64, tag: ContextTag) -> TopKDistribution {
        let fs = &self.samples[sample];
        let coord = fs.mixed_coord * (1.0 - strength);
        let logits: Vec<f64> = fs
            .base
            .iter()
            .zip(&fs.shift)
            .map(|(b, u)| b + u * coord)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let mut entries: Vec<TokenEntry> = logits
            .iter()
            .enumerate()
            .map(|(id, &l)| TokenEntry {
                token_id: id as u32,
                token_text: format!("t{id}"),
                logprob: l - lse,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.logprob
                .total_cmp(&a.logprob)
                .then(a.token_id.cmp(&b.token_id))
        });
        entries.truncate(self.shape.top_k);
        TopKDistribution::new(entries, tag).expect("softmax output is a valid distribution")
    }

    pub fn reference(&self, sample: usize) -> TopKDistribution {
        self.distribution(sample, self.s_star, ContextTag::ReferenceEn)
    }

    pub fn mixed(&self, sample: usize) -> TopKDistribution {
        self.distribution(sample, 0.0, ContextTag::MixedUnsteered)
    }

    pub fn steered(&self, sample: usize, strength: f64) -> TopKDistribution {
        self.distribution(sample, strength, ContextTag::Steered)
    }

    pub fn sample_id(sample: usize) -> String {
        format!("synth-{sample:04}")
    }

    pub fn triples(&self, strength: f64) -> Vec<SampleTriple> {
        (0..self.len())
            .map(|i| SampleTriple {
                sample_id: Self::sample_id(i),
                reference: self.reference(i),
                unsteered: self.mixed(i),
                steered: Some(self.steered(i, strength)),
            })
            .collect()
    }

    /// Reference, mixed and steered records for every sample, in that order.
    pub fn records(&self, strength: f64) -> Vec<DistributionRecord> {
        (0..self.len())
            .flat_map(|i| {
                let id = Self::sample_id(i);
                [
                    DistributionRecord::new(id.clone(), &self.reference(i)),
                    DistributionRecord::new(id.clone(), &self.mixed(i)),
                    DistributionRecord::new(id, &self.steered(i, strength)),
                ]
            })
            .collect()
    }

    /// Mean top-k KL between reference and steered distributions.
    pub fn mean_steered_kl(&self, strength: f64, k: usize) -> Result<f64> {
        let total = (0..self.len())
            .map(|i| kl_topk(&self.reference(i), &self.steered(i, strength), k))
            .sum::<Result<f64>>()?;
        Ok(total / self.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn weak_offsets_rejected() {
        let mut spec = SynthSpec::default();
        spec.languages[0].scale = 2.0;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::default();
        spec.crit_layer = spec.layers;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_dump(&SynthSpec::with_seed(3), 4).unwrap();
        let b = generate_dump(&SynthSpec::with_seed(3), 4).unwrap();
        assert_eq!(a.layers, b.layers);
        let c = generate_dump(&SynthSpec::with_seed(4), 4).unwrap();
        assert_ne!(a.layers, c.layers);
    }

    #[test]
    fn offsets_only_from_crit_layer() {
        let spec = SynthSpec {
            noise_std: 0.0,
            semantic_std: 0.0,
            ..SynthSpec::default()
        };
        let dump = generate_dump(&spec, 2).unwrap();
        assert!(dump.layers[spec.crit_layer - 1]
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(dump.layers[spec.crit_layer]
            .data()
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn family_endpoints() {
        let fam = NextTokenFamily::new(&SynthSpec::default(), -1.5).unwrap();
        assert_eq!(fam.steered(0, -1.5).entries(), fam.reference(0).entries());
        assert_eq!(fam.steered(3, 0.0).entries(), fam.mixed(3).entries());
        assert_eq!(fam.mean_steered_kl(-1.5, 100).unwrap(), 0.0);
        assert!(fam.mean_steered_kl(0.0, 100).unwrap() > 0.0);
    }

    #[test]
    fn family_rejects_out_of_grid_optimum() {
        assert!(NextTokenFamily::new(&SynthSpec::default(), 5.0).is_err());
    }
}
