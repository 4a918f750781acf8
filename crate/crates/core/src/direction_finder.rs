// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer language directions.
//!
//! For each layer, rows are centered on their mean and the leading principal
//! directions are found by power iteration on the implicit covariance
//! `Xᵀ X / (N - 1)` with Hotelling deflation. When the rows are parallel
//! translations of the same content, the first direction is the axis along
//! which languages separate.
//!
//! Sign convention: every component is oriented so that the mean projection
//! of the first language's rows (the language of row 0) is non-negative.
//! When that projection vanishes, the largest-magnitude coordinate is made
//! positive instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scale};
use crate::rng::GaussianStream;
use crate::tensor_store::{read_tensor, write_tensor};

pub const DIRECTIONS_FILE: &str = "directions.json";
pub const SIGN_CONVENTION: &str =
    "mean projection of the first language's rows onto each component is non-negative";

/// Hidden states of one layer: `rows × dim`, one language label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    layer_index: usize,
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<String>,
}

impl ActivationMatrix {
    pub fn new(
        layer_index: usize,
        rows: usize,
        dim: usize,
        data: Vec<f64>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidShape(vec![rows, dim]));
        }
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch {
                shape: vec![rows, dim],
                expected: rows * dim,
                actual: data.len(),
            });
        }
        if labels.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "layer {layer_index} row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        let acts = Self {
            layer_index,
            rows,
            dim,
            data,
            labels,
        };
        for lang in acts.languages() {
            let count = acts.labels.iter().filter(|l| **l == lang).count();
            if count < 2 {
                return Err(Error::InvalidArgument(format!(
                    "language {lang:?} has {count} row(s), need at least 2"
                )));
            }
        }
        Ok(acts)
    }

    pub fn from_f32(
        layer_index: usize,
        rows: usize,
        dim: usize,
        data: &[f32],
        labels: Vec<String>,
    ) -> Result<Self> {
        Self::new(
            layer_index,
            rows,
            dim,
            data.iter().map(|&x| x as f64).collect(),
            labels,
        )
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&x| x as f32).collect()
    }

    /// Distinct labels in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.labels {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range ({} rows)",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i].clone());
        }
        Self::new(self.layer_index, indices.len(), self.dim, data, labels)
    }

    /// Same rows with different values; used by steering.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(
            self.layer_index,
            self.rows,
            self.dim,
            data,
            self.labels.clone(),
        )
    }
}

/// Mean, principal directions and variance ratios for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDirections {
    pub layer_index: usize,
    pub mean: Vec<f64>,
    /// `k` unit-norm, mutually orthogonal rows ordered by variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (eigenvalues of the sample covariance).
    pub variances: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
}

impl LayerDirections {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> Option<&[f64]> {
        self.components.get(i).map(Vec::as_slice)
    }
}

/// Settings for the power iteration.
#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    /// Stop once successive unit iterates differ by less than this in
    /// Euclidean norm (`‖v_t - v_{t-1}‖ = sqrt(2 (1 - cos))`).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Seed of the fixed start vector.
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            seed: 0x5eed_1a7e_57ee_4000,
        }
    }
}

/// Fits `k` principal directions of the layer with default settings.
pub fn fit_directions(acts: &ActivationMatrix, k: usize) -> Result<LayerDirections> {
    fit_directions_with(acts, k, &PowerIteration::default())
}

pub fn fit_directions_with(
    acts: &ActivationMatrix,
    k: usize,
    settings: &PowerIteration,
) -> Result<LayerDirections> {
    let n = acts.rows();
    let d = acts.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rows, got {n}"
        )));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={} for {n} rows of dim {d}",
            (n - 1).min(d)
        )));
    }

    let mut mean = vec![0.0; d];
    for row in acts.iter_rows() {
        axpy(1.0, row, &mut mean);
    }
    scale(&mut mean, 1.0 / n as f64);
    let mut centered = acts.data().to_vec();
    for row in centered.chunks_exact_mut(d) {
        axpy(-1.0, &mean, row);
    }
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|x| x * x).sum::<f64>() / denom;
    // Variance below this is treated as numerically zero.
    let floor = 1e-12 * total_variance.max(f64::MIN_POSITIVE);
    if total_variance <= 0.0 {
        return Err(Error::RankDeficient {
            requested: k,
            achievable: 0,
        });
    }

    let cov = Covariance {
        centered: &centered,
        dim: d,
        denom,
    };
    let mut starts = GaussianStream::new(settings.seed);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances: Vec<f64> = Vec::with_capacity(k);
    let mut scratch = vec![0.0; n];

    for j in 0..k {
        let seeded = starts.unit_vector(d);
        let Some(mut v) = start_vector(seeded, &components, &variances, &cov, floor, &mut scratch)
        else {
            return Err(Error::RankDeficient {
                requested: k,
                achievable: j,
            });
        };
        let mut w = vec![0.0; d];
        for _ in 0..settings.max_iterations {
            cov.deflated_apply(&v, &components, &variances, &mut w, &mut scratch);
            orthogonalize(&mut w, &components);
            let w_norm = norm(&w);
            if w_norm <= floor {
                return Err(Error::RankDeficient {
                    requested: k,
                    achievable: j,
                });
            }
            scale(&mut w, 1.0 / w_norm);
            let step = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            std::mem::swap(&mut v, &mut w);
            if step < settings.tolerance {
                break;
            }
        }
        let mut cv = vec![0.0; d];
        cov.apply(&v, &mut cv, &mut scratch);
        let lambda = dot(&v, &cv);
        if lambda <= floor {
            return Err(Error::RankDeficient {
                requested: k,
                achievable: j,
            });
        }
        components.push(v);
        variances.push(lambda);
    }

    // Near-degenerate spectra can leave deflation a hair out of order.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
    let mut components: Vec<Vec<f64>> = order.iter().map(|&i| components[i].clone()).collect();
    let variances: Vec<f64> = order.iter().map(|&i| variances[i]).collect();

    let first_lang = &acts.labels()[0];
    for comp in &mut components {
        orient(comp, &centered, acts.labels(), first_lang);
    }

    let explained_variance_ratio = variances.iter().map(|v| v / total_variance).collect();
    Ok(LayerDirections {
        layer_index: acts.layer_index(),
        mean,
        components,
        variances,
        explained_variance_ratio,
        total_variance,
    })
}

struct Covariance<'a> {
    centered: &'a [f64],
    dim: usize,
    denom: f64,
}

impl Covariance<'_> {
    /// `out = Xᵀ X v / (N - 1)` without forming the covariance.
    fn apply(&self, v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        for (s, row) in scratch.iter_mut().zip(self.centered.chunks_exact(self.dim)) {
            *s = dot(row, v);
        }
        out.iter_mut().for_each(|x| *x = 0.0);
        for (&s, row) in scratch.iter().zip(self.centered.chunks_exact(self.dim)) {
            axpy(s, row, out);
        }
        scale(out, 1.0 / self.denom);
    }

    /// Hotelling deflation: `(C - Σ λ_i u_i u_iᵀ) v`.
    fn deflated_apply(
        &self,
        v: &[f64],
        found: &[Vec<f64>],
        lambdas: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        self.apply(v, out, scratch);
        for (u, &lambda) in found.iter().zip(lambdas) {
            axpy(-lambda * dot(u, v), u, out);
        }
    }
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot(u, w);
        axpy(-c, u, w);
    }
}

/// Seeded vector first, then canonical basis vectors, accepting the first
/// whose deflated Rayleigh quotient is non-negligible.
fn start_vector(
    seeded: Vec<f64>,
    found: &[Vec<f64>],
    lambdas: &[f64],
    cov: &Covariance<'_>,
    floor: f64,
    scratch: &mut [f64],
) -> Option<Vec<f64>> {
    let d = cov.dim;
    let basis = (0..d).map(|i| {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    });
    let mut w = vec![0.0; d];
    for mut candidate in std::iter::once(seeded).chain(basis) {
        orthogonalize(&mut candidate, found);
        let len = norm(&candidate);
        if len < 1e-8 {
            continue;
        }
        scale(&mut candidate, 1.0 / len);
        cov.deflated_apply(&candidate, found, lambdas, &mut w, scratch);
        if dot(&candidate, &w) >= floor {
            return Some(candidate);
        }
    }
    None
}

fn orient(comp: &mut [f64], centered: &[f64], labels: &[String], first_lang: &str) {
    let d = comp.len();
    let (sum, count) = centered
        .chunks_exact(d)
        .zip(labels)
        .filter(|(_, l)| l.as_str() == first_lang)
        .fold((0.0, 0usize), |(s, c), (row, _)| {
            (s + dot(row, comp), c + 1)
        });
    let mean_proj = sum / count.max(1) as f64;
    let scale_ref = norm(centered) / (centered.len() / d).max(1) as f64;
    let flip = if mean_proj.abs() > 1e-12 * scale_ref.max(f64::MIN_POSITIVE) {
        mean_proj < 0.0
    } else {
        let (idx, _) = comp
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            });
        comp[idx] < 0.0
    };
    if flip {
        comp.iter_mut().for_each(|x| *x = -*x);
    }
}

/// `(h_i - mean) · v_j` for the first `n_components` directions.
pub fn project(
    acts: &ActivationMatrix,
    dirs: &LayerDirections,
    n_components: usize,
) -> Result<Vec<Vec<f64>>> {
    if acts.dim() != dirs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "activations have dim {}, directions dim {}",
            acts.dim(),
            dirs.dim()
        )));
    }
    if n_components > dirs.k() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_components} components, directions hold {}",
            dirs.k()
        )));
    }
    let mut centered = vec![0.0; acts.dim()];
    Ok(acts
        .iter_rows()
        .map(|row| {
            centered.copy_from_slice(row);
            axpy(-1.0, &dirs.mean, &mut centered);
            dirs.components[..n_components]
                .iter()
                .map(|v| dot(&centered, v))
                .collect()
        })
        .collect())
}

/// Explained-variance ratios of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub layer_index: usize,
    pub ratios: Vec<f64>,
}

pub fn layer_variance_profile(layers: &[ActivationMatrix], k: usize) -> Result<Vec<VarianceRow>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("empty dump".into()));
    }
    layers
        .iter()
        .map(|acts| {
            let fit = fit_directions(acts, k)?;
            Ok(VarianceRow {
                layer_index: acts.layer_index(),
                ratios: fit.explained_variance_ratio,
            })
        })
        .collect()
}

/// Cluster separation of projected points: the smallest distance between
/// two language means divided by the pooled within-language RMS spread.
pub fn separation_ratio(points: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} points, {} labels",
            points.len(),
            labels.len()
        )));
    }
    let dim = points[0].len();
    let mut groups: Vec<(&str, Vec<f64>, usize)> = Vec::new();
    for (p, l) in points.iter().zip(labels) {
        match groups.iter_mut().find(|(name, _, _)| *name == l.as_str()) {
            Some((_, sum, count)) => {
                axpy(1.0, p, sum);
                *count += 1;
            }
            None => groups.push((l.as_str(), p.clone(), 1)),
        }
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("need at least two languages".into()));
    }
    let means: Vec<(&str, Vec<f64>)> = groups
        .into_iter()
        .map(|(name, mut sum, count)| {
            scale(&mut sum, 1.0 / count as f64);
            (name, sum)
        })
        .collect();
    let mut within = 0.0;
    for (p, l) in points.iter().zip(labels) {
        let m = &means
            .iter()
            .find(|(name, _)| *name == l.as_str())
            .unwrap()
            .1;
        within += p.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let within_std = (within / (points.len() as f64 * dim.max(1) as f64)).sqrt();
    let mut min_dist = f64::INFINITY;
    for (i, (_, a)) in means.iter().enumerate() {
        for (_, b) in &means[i + 1..] {
            let dist = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    Ok(if within_std > 0.0 {
        min_dist / within_std
    } else {
        f64::INFINITY
    })
}

/// Direction fits for a set of layers, tagged with the hash of the dump they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub languages: Vec<String>,
    pub manifest_sha256: String,
    pub layers: BTreeMap<usize, LayerDirections>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirectionsMeta {
    format_version: u32,
    layers: Vec<usize>,
    k: usize,
    hidden_dim: usize,
    sign_convention: String,
    manifest_sha256: String,
    languages: Vec<String>,
    files: BTreeMap<usize, String>,
    explained_variance_ratio: BTreeMap<usize, Vec<f64>>,
    variances: BTreeMap<usize, Vec<f64>>,
    total_variance: BTreeMap<usize, f64>,
}

pub fn directions_file_name(layer: usize) -> String {
    format!("directions_layer_{layer}.lstens")
}

impl DirectionSet {
    pub fn fit(
        layers: &[ActivationMatrix],
        k: usize,
        manifest_sha256: impl Into<String>,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty dump".into()))?;
        let fits = layers
            .iter()
            .map(|acts| fit_directions(acts, k).map(|f| (acts.layer_index(), f)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            languages: first.languages(),
            manifest_sha256: manifest_sha256.into(),
            layers: fits,
        })
    }

    pub fn k(&self) -> usize {
        self.layers.values().next().map_or(0, LayerDirections::k)
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerDirections> {
        self.layers.get(&layer).ok_or(Error::MissingLayer(layer))
    }

    /// Writes `directions.json` plus one `[mean; components]` tensor per layer.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hidden_dim = self.layers.values().next().map_or(0, LayerDirections::dim);
        let mut meta = DirectionsMeta {
            format_version: 1,
            layers: self.layers.keys().copied().collect(),
            k: self.k(),
            hidden_dim,
            sign_convention: SIGN_CONVENTION.into(),
            manifest_sha256: self.manifest_sha256.clone(),
            languages: self.languages.clone(),
            files: BTreeMap::new(),
            explained_variance_ratio: BTreeMap::new(),
            variances: BTreeMap::new(),
            total_variance: BTreeMap::new(),
        };
        for (&layer, fit) in &self.layers {
            let name = directions_file_name(layer);
            let mut data: Vec<f32> = fit.mean.iter().map(|&x| x as f32).collect();
            for comp in &fit.components {
                data.extend(comp.iter().map(|&x| x as f32));
            }
            write_tensor(dir.join(&name), &[fit.k() + 1, fit.dim()], &data)?;
            meta.files.insert(layer, name);
            meta.explained_variance_ratio
                .insert(layer, fit.explained_variance_ratio.clone());
            meta.variances.insert(layer, fit.variances.clone());
            meta.total_variance.insert(layer, fit.total_variance);
        }
        let path = dir.join(DIRECTIONS_FILE);
        let mut json = serde_json::to_string_pretty(&meta).expect("directions meta serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a set written by [`DirectionSet::save`]. Components are stored
    /// as f32 and re-normalized on load.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(DIRECTIONS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DirectionsMeta =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(DIRECTIONS_FILE, e))?;
        let mut layers = BTreeMap::new();
        for &layer in &meta.layers {
            let name = meta
                .files
                .get(&layer)
                .ok_or_else(|| Error::Manifest(format!("no file listed for layer {layer}")))?;
            let tensor = read_tensor(dir.join(name))?;
            if tensor.shape != [meta.k + 1, meta.hidden_dim] {
                return Err(Error::Manifest(format!(
                    "layer {layer} tensor has shape {:?}, expected [{}, {}]",
                    tensor.shape,
                    meta.k + 1,
                    meta.hidden_dim
                )));
            }
            let mut rows = tensor
                .data
                .chunks_exact(meta.hidden_dim)
                .map(|r| r.iter().map(|&x| x as f64).collect::<Vec<f64>>());
            let mean = rows.next().expect("k + 1 >= 1 rows");
            let components: Vec<Vec<f64>> = rows
                .map(|mut c| {
                    let n = norm(&c);
                    if n > 0.0 {
                        scale(&mut c, 1.0 / n);
                    }
                    c
                })
                .collect();
            let lookup = |m: &BTreeMap<usize, Vec<f64>>| {
                m.get(&layer).cloned().ok_or_else(|| {
                    Error::Manifest(format!("missing variance data for layer {layer}"))
                })
            };
            layers.insert(
                layer,
                LayerDirections {
                    layer_index: layer,
                    mean,
                    components,
                    variances: lookup(&meta.variances)?,
                    explained_variance_ratio: lookup(&meta.explained_variance_ratio)?,
                    total_variance: meta.total_variance.get(&layer).copied().unwrap_or(0.0),
                },
            );
        }
        Ok(Self {
            languages: meta.languages,
            manifest_sha256: meta.manifest_sha256,
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, lang: &str) -> Vec<String> {
        vec![lang.to_string(); n]
    }

    #[test]
    fn single_axis_data() {
        let data = vec![-1.0, 0.0, 1.0, 0.0, -2.0, 0.0, 2.0, 0.0];
        let acts = ActivationMatrix::new(0, 4, 2, data, labels(4, "x")).unwrap();
        let fit = fit_directions(&acts, 1).unwrap();
        assert!((fit.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(fit.components[0][1].abs() < 1e-12);
        assert!((fit.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_start_trap() {
        // Variance 1 on axis 0, 10 on axis 1: a start at e_0 would be an
        // eigenvector already and never move.
        let s = 10f64.sqrt();
        let data = vec![1.0, 0.0, -1.0, 0.0, 0.0, s, 0.0, -s];
        let acts = ActivationMatrix::new(0, 4, 2, data, labels(4, "x")).unwrap();
        let fit = fit_directions(&acts, 2).unwrap();
        assert!((fit.components[0][1].abs() - 1.0).abs() < 1e-10);
        assert!((fit.components[1][0].abs() - 1.0).abs() < 1e-10);
        assert!((fit.explained_variance_ratio[0] - 10.0 / 11.0).abs() < 1e-10);
    }

    #[test]
    fn sign_follows_first_language() {
        let mut labs = labels(2, "a");
        labs.extend(labels(2, "b"));
        // Language a sits at negative x.
        let data = vec![-3.0, 0.1, -3.0, -0.1, 3.0, 0.1, 3.0, -0.1];
        let acts = ActivationMatrix::new(0, 4, 2, data, labs).unwrap();
        let fit = fit_directions(&acts, 1).unwrap();
        assert!(fit.components[0][0] < 0.0);
        let z = project(&acts, &fit, 1).unwrap();
        assert!(z[0][0] > 0.0 && z[2][0] < 0.0);
    }

    #[test]
    fn rank_deficiency_names_achievable_k() {
        let data = vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, -2.0, 0.0, 0.0];
        let acts = ActivationMatrix::new(0, 4, 3, data, labels(4, "x")).unwrap();
        match fit_directions(&acts, 2) {
            Err(Error::RankDeficient {
                requested: 2,
                achievable: 1,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn k_bounds() {
        let acts =
            ActivationMatrix::new(0, 3, 2, vec![0.0, 1.0, 2.0, 3.0, 5.0, 1.0], labels(3, "x"))
                .unwrap();
        assert!(fit_directions(&acts, 0).is_err());
        assert!(fit_directions(&acts, 3).is_err());
        assert!(fit_directions(&acts, 2).is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        let err = ActivationMatrix::new(0, 2, 2, vec![0.0, f64::NAN, 1.0, 1.0], labels(2, "x"))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn singleton_language_rejected() {
        let labs = vec!["a".into(), "a".into(), "b".into()];
        assert!(ActivationMatrix::new(0, 3, 2, vec![0.0; 6], labs).is_err());
    }

    #[test]
    fn projection_of_mean_and_planted_offset() {
        let data = vec![-1.0, 0.0, 1.0, 0.0, -2.0, 0.5, 2.0, -0.5];
        let acts = ActivationMatrix::new(0, 4, 2, data, labels(4, "x")).unwrap();
        let fit = fit_directions(&acts, 2).unwrap();
        let v0 = fit.components[0].clone();
        let at_mean = fit.mean.clone();
        let shifted: Vec<f64> = fit.mean.iter().zip(&v0).map(|(m, v)| m + 2.0 * v).collect();
        let mut data = at_mean;
        data.extend(shifted);
        let probe = ActivationMatrix::new(0, 2, 2, data, labels(2, "x")).unwrap();
        let z = project(&probe, &fit, 2).unwrap();
        assert!(z[0].iter().all(|x| x.abs() < 1e-12));
        assert!((z[1][0] - 2.0).abs() < 1e-12 && z[1][1].abs() < 1e-12);
    }

    #[test]
    fn project_dimension_mismatch() {
        let acts =
            ActivationMatrix::new(0, 2, 2, vec![0.0, 1.0, 1.0, 0.0], labels(2, "x")).unwrap();
        let fit = fit_directions(&acts, 1).unwrap();
        let other = ActivationMatrix::new(0, 2, 3, vec![0.0; 6], labels(2, "x")).unwrap();
        assert!(matches!(
            project(&other, &fit, 1),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(project(&acts, &fit, 2).is_err());
    }

    #[test]
    fn direction_set_round_trip() {
        let mut labs = labels(3, "a");
        labs.extend(labels(3, "b"));
        let data: Vec<f64> = (0..18)
            .map(|i| ((i * 7) % 5) as f64 - 2.0 + (i / 9) as f64 * 4.0)
            .collect();
        let acts = ActivationMatrix::new(0, 6, 3, data, labs).unwrap();
        let set = DirectionSet::fit(std::slice::from_ref(&acts), 2, "abc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = DirectionSet::load(dir.path()).unwrap();
        assert_eq!(back.manifest_sha256, "abc");
        assert_eq!(back.languages, vec!["a", "b"]);
        let (a, b) = (set.layer(0).unwrap(), back.layer(0).unwrap());
        for (ca, cb) in a.components.iter().zip(&b.components) {
            assert!(ca.iter().zip(cb).all(|(x, y)| (x - y).abs() < 1e-6));
            assert!((norm(cb) - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.explained_variance_ratio, b.explained_variance_ratio);
    }
}
