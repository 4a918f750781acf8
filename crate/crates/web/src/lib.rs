// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser demo over synthetic dumps: per-layer language maps, the effect of
//! steering on a map, and the mean-KL curve of a strength grid search.
//!
//! The `Demo` methods without the `_json` suffix are plain Rust and return
//! serializable structs; the JS-facing wrappers hand out JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use latsteer::divergence::pair_reduction;
use latsteer::synth::SynthDump;
use latsteer::{
    grid_search_strength, project, separation_ratio, steer_batch, DirectionSet, Error, KLReport,
    NextTokenFamily, SteeringConfig, StrengthGrid, SynthSpec,
};

#[derive(Debug, Clone, Serialize)]
pub struct MapPoint {
    pub language: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LanguageMap {
    pub layer: usize,
    pub crit_layer: usize,
    pub strength: f64,
    pub languages: Vec<String>,
    pub points: Vec<MapPoint>,
    /// Same rows after removing `strength` times their PC1 component,
    /// projected onto the unsteered axes.
    pub steered: Vec<MapPoint>,
    pub separation: f64,
    pub steered_separation: f64,
    /// PC1 and PC2 explained-variance ratio of every layer.
    pub pc1_ratio: Vec<f64>,
    pub pc2_ratio: Vec<f64>,
    /// |cos| between this layer's PC1 and the planted direction.
    pub planted_cosine: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub strength: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KlCurve {
    pub s_star: f64,
    pub curve: Vec<CurvePoint>,
    pub best_strength: f64,
    pub best_kl: f64,
    pub unsteered_kl: f64,
    pub reduction: f64,
}

#[wasm_bindgen]
pub struct Demo {
    spec: SynthSpec,
    dump: SynthDump,
    dirs: DirectionSet,
}

fn points(rows: &[Vec<f64>], labels: &[String]) -> Vec<MapPoint> {
    rows.iter()
        .zip(labels)
        .map(|(r, l)| MapPoint {
            language: l.clone(),
            x: r[0],
            y: r[1],
        })
        .collect()
}

impl Demo {
    pub fn build(seed: u64, per_language: usize) -> Result<Self, Error> {
        let spec = SynthSpec::with_seed(seed);
        let dump = latsteer::generate_dump(&spec, per_language)?;
        let dirs = DirectionSet::fit(&dump.layers, 2, format!("synth-{seed}"))?;
        Ok(Self { spec, dump, dirs })
    }

    pub fn language_map(&self, layer: usize, strength: f64) -> Result<LanguageMap, Error> {
        let acts = self
            .dump
            .layers
            .get(layer)
            .ok_or(Error::MissingLayer(layer))?;
        let fit = self.dirs.layer(layer)?;
        let labels = acts.labels();
        let base = project(acts, fit, 2)?;
        let cfg = SteeringConfig {
            strength,
            layer_threshold: layer,
            component_index: 0,
        };
        let steered_acts = steer_batch(std::slice::from_ref(acts), &self.dirs, &cfg)?;
        let steered = project(&steered_acts[0], fit, 2)?;
        let ratio = |j: usize| -> Vec<f64> {
            self.dirs
                .layers
                .values()
                .map(|f| f.explained_variance_ratio[j])
                .collect()
        };
        let v = &self.dump.truth.v_star;
        let pc1 = &fit.components[0];
        let cosine = pc1.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().abs();
        Ok(LanguageMap {
            layer,
            crit_layer: self.spec.crit_layer,
            strength,
            languages: self.spec.language_codes(),
            separation: separation_ratio(&base, labels)?,
            steered_separation: separation_ratio(&steered, labels)?,
            points: points(&base, labels),
            steered: points(&steered, labels),
            pc1_ratio: ratio(0),
            pc2_ratio: ratio(1),
            planted_cosine: cosine,
        })
    }

    pub fn kl_curve(&self, s_star: f64, grid: &str) -> Result<KlCurve, Error> {
        let grid: StrengthGrid = grid.parse()?;
        let family = NextTokenFamily::new(&self.spec, s_star)?;
        let k = family.shape().top_k;
        let result = grid_search_strength(&grid, |s| family.mean_steered_kl(s, k))?;
        let report = KLReport::compute(&family.triples(result.best_strength), k, Vec::new(), None)?;
        let reduction = pair_reduction("", report.mean_unsteered, result.best_score);
        Ok(KlCurve {
            s_star,
            curve: result
                .curve
                .iter()
                .map(|&(strength, mean_kl)| CurvePoint { strength, mean_kl })
                .collect(),
            best_strength: result.best_strength,
            best_kl: result.best_score,
            unsteered_kl: report.mean_unsteered,
            reduction: reduction.reduction,
        })
    }
}

fn to_json<T: Serialize>(value: Result<T, Error>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    /// Generates a synthetic dump and fits two directions per layer.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, per_language: u32) -> Result<Demo, JsError> {
        Self::build(u64::from(seed), per_language as usize)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(getter)]
    pub fn layers(&self) -> usize {
        self.spec.layers
    }

    #[wasm_bindgen(js_name = languageMap)]
    pub fn language_map_json(&self, layer: usize, strength: f64) -> Result<String, JsError> {
        to_json(self.language_map(layer, strength))
    }

    #[wasm_bindgen(js_name = klCurve)]
    pub fn kl_curve_json(&self, s_star: f64, grid: &str) -> Result<String, JsError> {
        to_json(self.kl_curve(s_star, grid))
    }
}
