// SPDX-License-Identifier: MIT OR Apache-2.0

//! Projection steering along a language direction.
//!
//! A hidden state `h` is moved to `h - s (h·v) v`. With `s = 1` the language
//! component is removed; negative strengths push further along `v`'s own
//! orientation. Only layers at or above the configured threshold are touched.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::direction_finder::{ActivationMatrix, DirectionSet};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub strength: f64,
    /// Lowest layer that is steered.
    pub layer_threshold: usize,
    #[serde(default)]
    pub component_index: usize,
}

impl SteeringConfig {
    /// Steers the last quarter of `num_layers` (at least one layer).
    pub fn with_default_threshold(strength: f64, num_layers: usize) -> Self {
        Self {
            strength,
            layer_threshold: default_layer_threshold(num_layers),
            component_index: 0,
        }
    }

    /// A threshold equal to `num_layers` is accepted and steers nothing.
    pub fn validate(&self, num_layers: usize, k: usize) -> Result<()> {
        if !self.strength.is_finite() {
            return Err(Error::InvalidArgument("strength must be finite".into()));
        }
        if self.layer_threshold > num_layers {
            return Err(Error::InvalidArgument(format!(
                "layer threshold {} beyond {num_layers} layers",
                self.layer_threshold
            )));
        }
        if self.component_index >= k {
            return Err(Error::InvalidArgument(format!(
                "component {} but directions hold {k}",
                self.component_index
            )));
        }
        Ok(())
    }
}

pub fn default_layer_threshold(num_layers: usize) -> usize {
    num_layers.saturating_sub((num_layers / 4).max(1))
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(())
}

/// `h - s (h·v) v`
pub fn steer_vector(h: &[f64], v: &[f64], strength: f64) -> Result<Vec<f64>> {
    if h.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "hidden state dim {}, direction dim {}",
            h.len(),
            v.len()
        )));
    }
    check_unit(v)?;
    let mut out = h.to_vec();
    steer_in_place(&mut out, v, strength);
    Ok(out)
}

#[inline]
fn steer_in_place(h: &mut [f64], v: &[f64], strength: f64) {
    if strength == 0.0 {
        return;
    }
    let c = dot(h, v);
    axpy(-strength * c, v, h);
}

/// Steers every layer at or above the threshold with that layer's direction.
pub fn steer_batch(
    layers: &[ActivationMatrix],
    dirs: &DirectionSet,
    cfg: &SteeringConfig,
) -> Result<Vec<ActivationMatrix>> {
    if !cfg.strength.is_finite() {
        return Err(Error::InvalidArgument("strength must be finite".into()));
    }
    layers
        .iter()
        .map(|acts| {
            if acts.layer_index() < cfg.layer_threshold {
                return Ok(acts.clone());
            }
            let fit = dirs.layer(acts.layer_index())?;
            let v = fit.component(cfg.component_index).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "component {} missing for layer {}",
                    cfg.component_index,
                    acts.layer_index()
                ))
            })?;
            if v.len() != acts.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} has dim {}, direction dim {}",
                    acts.layer_index(),
                    acts.dim(),
                    v.len()
                )));
            }
            check_unit(v)?;
            let mut data = acts.data().to_vec();
            for row in data.chunks_exact_mut(acts.dim()) {
                steer_in_place(row, v, cfg.strength);
            }
            acts.with_data(data)
        })
        .collect()
}

/// Evenly spaced strengths `lo, lo + step, …` up to `hi` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for StrengthGrid {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            step: 0.1,
        }
    }
}

impl StrengthGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        let grid = Self { lo, hi, step };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.step.is_finite()) {
            return Err(Error::InvalidArgument("grid bounds must be finite".into()));
        }
        if self.lo >= self.hi {
            return Err(Error::InvalidArgument(format!(
                "grid needs lo < hi, got {}:{}",
                self.lo, self.hi
            )));
        }
        if self.step <= 0.0 {
            return Err(Error::InvalidArgument("grid step must be positive".into()));
        }
        if (self.hi - self.lo) / self.step > 1e7 {
            return Err(Error::InvalidArgument("grid has too many points".into()));
        }
        Ok(())
    }

    /// Grid points, each rounded to 12 decimals so that e.g. `-4 + 11 × 0.1`
    /// comes out as the literal `-2.9`.
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=count)
            .map(|i| {
                let x = ((self.lo + i as f64 * self.step) * 1e12).round() / 1e12;
                if x == 0.0 {
                    0.0
                } else {
                    x
                }
            })
            .collect()
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo - 1e-12 && s <= self.hi + 1e-12
    }
}

impl std::str::FromStr for StrengthGrid {
    type Err = Error;

    /// Parses `lo:hi:step`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "grid {s:?} is not lo:hi:step"
            )));
        }
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad grid number {p:?}")))
        };
        Self::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_strength: f64,
    pub best_score: f64,
    /// `(strength, score)` for every grid point in ascending strength.
    pub curve: Vec<(f64, f64)>,
}

impl GridSearchResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("strength,mean_kl\n");
        for (s, score) in &self.curve {
            let _ = writeln!(out, "{s},{score}");
        }
        out
    }
}

/// Evaluates `eval` at every grid point in order and returns the minimizer.
/// Exact ties go to the strength of smallest magnitude, then the smaller one.
pub fn grid_search_strength<F, E>(grid: &StrengthGrid, mut eval: F) -> Result<GridSearchResult>
where
    F: FnMut(f64) -> std::result::Result<f64, E>,
    E: std::fmt::Display,
{
    grid.validate()?;
    let mut curve = Vec::new();
    for s in grid.points() {
        let score = eval(s).map_err(|e| Error::GridPoint {
            strength: s,
            message: e.to_string(),
        })?;
        if !score.is_finite() {
            return Err(Error::GridPoint {
                strength: s,
                message: format!("non-finite score {score}"),
            });
        }
        curve.push((s, score));
    }
    let &(best_strength, best_score) = curve
        .iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.0.abs().total_cmp(&b.0.abs()))
                .then(a.0.total_cmp(&b.0))
        })
        .expect("grid has at least one point");
    Ok(GridSearchResult {
        best_strength,
        best_score,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direction_finder::LayerDirections;
    use std::collections::BTreeMap;

    #[test]
    fn zero_strength_is_identity() {
        let h = [0.3, -1.7, 2.0];
        let v = [0.6, 0.8, 0.0];
        assert_eq!(steer_vector(&h, &v, 0.0).unwrap(), h.to_vec());
    }

    #[test]
    fn pure_direction_removed() {
        let v = [0.6, 0.8];
        let out = steer_vector(&v, &v, 1.0).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn analytic_cases() {
        assert_eq!(
            steer_vector(&[3.0, 4.0], &[1.0, 0.0], 1.0).unwrap(),
            vec![0.0, 4.0]
        );
        let out = steer_vector(&[3.0, 4.0], &[1.0, 0.0], -2.9).unwrap();
        assert!((out[0] - 11.7).abs() < 1e-12);
        assert_eq!(out[1], 4.0);
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(matches!(
            steer_vector(&[1.0, 1.0], &[1.0, 1.0], 1.0),
            Err(Error::NonUnitDirection(_))
        ));
    }

    #[test]
    fn default_threshold_is_last_quarter() {
        assert_eq!(default_layer_threshold(28), 21);
        assert_eq!(default_layer_threshold(16), 12);
        assert_eq!(default_layer_threshold(8), 6);
        assert_eq!(default_layer_threshold(2), 1);
    }

    fn one_layer_set(v: Vec<f64>) -> DirectionSet {
        let mut layers = BTreeMap::new();
        layers.insert(
            0,
            LayerDirections {
                layer_index: 0,
                mean: vec![0.0; v.len()],
                components: vec![v],
                variances: vec![1.0],
                explained_variance_ratio: vec![1.0],
                total_variance: 1.0,
            },
        );
        DirectionSet {
            languages: vec!["x".into()],
            manifest_sha256: String::new(),
            layers,
        }
    }

    #[test]
    fn batch_threshold_past_last_layer_is_noop() {
        let acts =
            ActivationMatrix::new(0, 2, 2, vec![1.0, 2.0, 3.0, 4.0], vec!["x".into(); 2]).unwrap();
        let set = one_layer_set(vec![1.0, 0.0]);
        let cfg = SteeringConfig {
            strength: 1.0,
            layer_threshold: 1,
            component_index: 0,
        };
        let out = steer_batch(std::slice::from_ref(&acts), &set, &cfg).unwrap();
        assert_eq!(out[0], acts);
    }

    #[test]
    fn batch_full_removal_zeroes_projection() {
        let acts =
            ActivationMatrix::new(0, 2, 2, vec![1.0, 2.0, 3.0, 4.0], vec!["x".into(); 2]).unwrap();
        let v = vec![0.6, 0.8];
        let set = one_layer_set(v.clone());
        let cfg = SteeringConfig {
            strength: 1.0,
            layer_threshold: 0,
            component_index: 0,
        };
        let out = steer_batch(std::slice::from_ref(&acts), &set, &cfg).unwrap();
        for row in out[0].iter_rows() {
            assert!(dot(row, &v).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_missing_layer() {
        let acts =
            ActivationMatrix::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], vec!["x".into(); 2]).unwrap();
        let set = one_layer_set(vec![1.0, 0.0]);
        let cfg = SteeringConfig {
            strength: 1.0,
            layer_threshold: 0,
            component_index: 0,
        };
        assert!(matches!(
            steer_batch(&[acts], &set, &cfg),
            Err(Error::MissingLayer(1))
        ));
    }

    #[test]
    fn grid_points_round_to_literals() {
        let pts = StrengthGrid::default().points();
        assert_eq!(pts.len(), 81);
        assert_eq!(pts[0], -4.0);
        assert_eq!(pts[11], -2.9);
        assert_eq!(pts[40], 0.0);
        assert_eq!(pts[80], 4.0);
    }

    #[test]
    fn grid_parse() {
        let g: StrengthGrid = "-2:2:0.5".parse().unwrap();
        assert_eq!(
            g.points(),
            vec![-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]
        );
        assert!("1:0:0.1".parse::<StrengthGrid>().is_err());
        assert!("0:1:0".parse::<StrengthGrid>().is_err());
        assert!("0:1".parse::<StrengthGrid>().is_err());
    }

    #[test]
    fn convex_minimum_on_grid() {
        let g = StrengthGrid::new(-2.0, 2.0, 0.5).unwrap();
        let r = grid_search_strength(&g, |s| Ok::<_, String>((s - 1.0).powi(2))).unwrap();
        assert_eq!(r.best_strength, 1.0);
        assert_eq!(r.best_score, 0.0);
        assert_eq!(r.curve.len(), 9);
    }

    #[test]
    fn constant_objective_ties_to_zero() {
        let g = StrengthGrid::new(-2.0, 2.0, 0.5).unwrap();
        let r = grid_search_strength(&g, |_| Ok::<_, String>(3.0)).unwrap();
        assert_eq!(r.best_strength, 0.0);
    }

    #[test]
    fn symmetric_tie_goes_to_smaller_value() {
        let g = StrengthGrid::new(-2.0, 2.0, 1.0).unwrap();
        let r =
            grid_search_strength(&g, |s: f64| Ok::<_, String>((s.abs() - 1.0).powi(2))).unwrap();
        assert_eq!(r.best_strength, -1.0);
    }

    #[test]
    fn callback_failure_names_point() {
        let g = StrengthGrid::new(-1.0, 1.0, 0.5).unwrap();
        let err = grid_search_strength(&g, |s| {
            if s > 0.2 {
                Err(format!("boom at {s}"))
            } else {
                Ok(s)
            }
        })
        .unwrap_err();
        match err {
            Error::GridPoint { strength, .. } => assert_eq!(strength, 0.5),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn curve_csv_header() {
        let g = StrengthGrid::new(0.0, 1.0, 0.5).unwrap();
        let r = grid_search_strength(&g, Ok::<_, String>).unwrap();
        assert_eq!(r.curve_csv(), "strength,mean_kl\n0,0\n0.5,0.5\n1,1\n");
    }
}
