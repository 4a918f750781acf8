// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-dimensional multinomial logistic regression over scalar projections.
//!
//! Each language gets a line `w z + b`; the posterior is the softmax over
//! languages. Training is full-batch gradient descent from zero on the
//! standardized projections (zero mean, unit variance), after which the
//! parameters are mapped back to the raw scale. Standardizing keeps the
//! fixed step size stable whatever the magnitude of the hidden states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when the gradient's max-norm drops below this.
    pub gradient_tolerance: f64,
    /// L2 penalty on the (standardized) weights.
    pub l2: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iterations: 5_000,
            gradient_tolerance: 1e-8,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub settings: TrainSettings,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub samples: usize,
    pub z_mean: f64,
    pub z_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionProbe {
    pub languages: Vec<String>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub layer_index: usize,
    pub component_index: usize,
    pub training: Option<TrainingMeta>,
}

impl ProjectionProbe {
    /// Probe with all parameters zero; predicts the first language everywhere.
    pub fn zero(languages: Vec<String>) -> Self {
        let n = languages.len();
        Self {
            languages,
            weights: vec![0.0; n],
            biases: vec![0.0; n],
            layer_index: 0,
            component_index: 0,
            training: None,
        }
    }

    pub fn logits(&self, z: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w * z + b)
            .collect()
    }

    pub fn probabilities(&self, z: f64) -> Vec<f64> {
        let mut p = self.logits(z);
        softmax_in_place(&mut p);
        p
    }

    /// Index of the most likely language; ties go to the earlier language.
    pub fn predict_index(&self, z: f64) -> usize {
        argmax_first(&self.logits(z))
    }

    pub fn predict(&self, z: f64) -> &str {
        &self.languages[self.predict_index(z)]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("probe serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: Self = serde_json::from_str(text).map_err(|e| Error::json("probe", e))?;
        let n = probe.languages.len();
        if probe.weights.len() != n || probe.biases.len() != n {
            return Err(Error::InvalidArgument(
                "probe needs one weight and one bias per language".into(),
            ));
        }
        if probe
            .weights
            .iter()
            .chain(&probe.biases)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("probe parameters".into()));
        }
        Ok(probe)
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

/// Loss trajectory of a training run, one entry per evaluated iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

pub fn train_probe(
    z: &[f64],
    labels: &[String],
    settings: &TrainSettings,
) -> Result<ProjectionProbe> {
    train_probe_traced(z, labels, settings).map(|(p, _)| p)
}

/// Like [`train_probe`], also returning the loss at every iterate.
/// Languages are ordered by first appearance in `labels`.
pub fn train_probe_traced(
    z: &[f64],
    labels: &[String],
    settings: &TrainSettings,
) -> Result<(ProjectionProbe, TrainTrace)> {
    if z.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} projections, {} labels",
            z.len(),
            labels.len()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("probe inputs".into()));
    }
    let mut languages: Vec<String> = Vec::new();
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| match languages.iter().position(|x| x == l) {
            Some(i) => i,
            None => {
                languages.push(l.clone());
                languages.len() - 1
            }
        })
        .collect();
    if languages.len() < 2 {
        return Err(Error::SingleClass);
    }

    let n = z.len() as f64;
    let z_mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|x| (x - z_mean).powi(2)).sum::<f64>() / n;
    let z_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let zs: Vec<f64> = z.iter().map(|x| (x - z_mean) / z_std).collect();

    let classes = languages.len();
    let mut w = vec![0.0; classes];
    let mut b = vec![0.0; classes];
    let mut gw = vec![0.0; classes];
    let mut gb = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    let mut losses = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (&x, &t) in zs.iter().zip(&targets) {
            for c in 0..classes {
                p[c] = w[c] * x + b[c];
            }
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - p[t];
            for c in 0..classes {
                let resid = (p[c] - lse).exp() - if c == t { 1.0 } else { 0.0 };
                gw[c] += resid * x;
                gb[c] += resid;
            }
        }
        loss = loss / n + 0.5 * settings.l2 * w.iter().map(|x| x * x).sum::<f64>();
        losses.push(loss);
        for c in 0..classes {
            gw[c] = gw[c] / n + settings.l2 * w[c];
            gb[c] /= n;
        }
        let gmax = gw.iter().chain(&gb).fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < settings.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations == settings.max_iterations {
            break;
        }
        for c in 0..classes {
            w[c] -= settings.learning_rate * gw[c];
            b[c] -= settings.learning_rate * gb[c];
        }
        iterations += 1;
    }

    let weights: Vec<f64> = w.iter().map(|wc| wc / z_std).collect();
    let biases: Vec<f64> = w
        .iter()
        .zip(&b)
        .map(|(wc, bc)| bc - wc * z_mean / z_std)
        .collect();
    let final_loss = *losses.last().expect("at least one iterate");
    let probe = ProjectionProbe {
        languages,
        weights,
        biases,
        layer_index: 0,
        component_index: 0,
        training: Some(TrainingMeta {
            settings: *settings,
            iterations,
            converged,
            final_loss,
            samples: z.len(),
            z_mean,
            z_std,
        }),
    };
    Ok((probe, TrainTrace { losses }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub accuracy: f64,
    pub languages: Vec<String>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

pub fn evaluate_probe(
    probe: &ProjectionProbe,
    z: &[f64],
    labels: &[String],
) -> Result<ProbeEvaluation> {
    if z.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} projections, {} labels",
            z.len(),
            labels.len()
        )));
    }
    if z.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let classes = probe.languages.len();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for (&x, label) in z.iter().zip(labels) {
        let truth = probe
            .languages
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        let pred = probe.predict_index(x);
        confusion[truth][pred] += 1;
        if pred == truth {
            correct += 1;
        }
    }
    Ok(ProbeEvaluation {
        accuracy: correct as f64 / z.len() as f64,
        languages: probe.languages.clone(),
        confusion,
        samples: z.len(),
    })
}
