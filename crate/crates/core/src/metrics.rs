//! Single-trial correlation, average correlation and FEVE.
//!
//! Every metric is computed per neuron and aggregated as an unweighted mean
//! over the neurons for which it is defined. Undefined neurons are reported
//! with a reason, never scored as zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    Response,
    Prediction,
}

/// Values indexed `(image, repeat, neuron)`, stored trial-major: all repeats
/// of image 0, then image 1, and so on; one row of `num_neurons` per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTensor {
    repeats: Vec<usize>,
    num_neurons: usize,
    values: Vec<f64>,
    kind: TrialKind,
}

impl TrialTensor {
    pub fn new(repeats: Vec<usize>, num_neurons: usize, values: Vec<f64>, kind: TrialKind) -> Result<Self> {
        if repeats.is_empty() || repeats.contains(&0) {
            return Err(CoreError::Contract("every image needs at least one repeat".into()));
        }
        if num_neurons == 0 {
            return Err(CoreError::Contract("trial tensor needs at least one neuron".into()));
        }
        let trials: usize = repeats.iter().sum();
        if values.len() != trials * num_neurons {
            return Err(CoreError::Contract(format!(
                "{} values for {trials} trials x {num_neurons} neurons",
                values.len()
            )));
        }
        Ok(Self {
            repeats,
            num_neurons,
            values,
            kind,
        })
    }

    pub fn repeats(&self) -> &[usize] {
        &self.repeats
    }

    pub fn num_images(&self) -> usize {
        self.repeats.len()
    }

    pub fn num_trials(&self) -> usize {
        self.values.len() / self.num_neurons
    }

    pub fn num_neurons(&self) -> usize {
        self.num_neurons
    }

    pub fn kind(&self) -> TrialKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, trial: usize, neuron: usize) -> f64 {
        self.values[trial * self.num_neurons + neuron]
    }

    /// All trial values of one neuron, trial order.
    pub fn neuron(&self, n: usize) -> Vec<f64> {
        self.values.iter().skip(n).step_by(self.num_neurons).copied().collect()
    }

    /// Per-image groups of one neuron's values.
    fn grouped(&self, n: usize) -> Vec<Vec<f64>> {
        let column = self.neuron(n);
        let mut out = Vec::with_capacity(self.repeats.len());
        let mut start = 0;
        for &r in &self.repeats {
            out.push(column[start..start + r].to_vec());
            start += r;
        }
        out
    }

    fn check_matches(&self, other: &TrialTensor) -> Result<()> {
        if self.repeats != other.repeats || self.num_neurons != other.num_neurons {
            return Err(CoreError::Contract(format!(
                "trial structures differ: {} images/{} neurons vs {} images/{} neurons",
                self.repeats.len(),
                self.num_neurons,
                other.repeats.len(),
                other.num_neurons
            )));
        }
        Ok(())
    }
}

/// Per-neuron scores with `None` for excluded neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScores {
    pub values: Vec<Option<f64>>,
    pub reasons: Vec<Option<String>>,
}

impl NeuronScores {
    /// Mean over defined neurons; `None` when no neuron is defined.
    pub fn aggregate(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn excluded(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    fn push(&mut self, v: std::result::Result<f64, String>) {
        match v {
            Ok(x) => {
                self.values.push(Some(x));
                self.reasons.push(None);
            }
            Err(r) => {
                self.values.push(None);
                self.reasons.push(Some(r));
            }
        }
    }

    fn with_capacity(n: usize) -> Self {
        Self {
            values: Vec::with_capacity(n),
            reasons: Vec::with_capacity(n),
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Treats a sum of squares as zero when it is at rounding level relative to
/// the values' magnitude.
fn is_degenerate(ss: f64, values: &[f64], center: f64) -> bool {
    ss == 0.0 || ss <= 1e-24 * values.len() as f64 * center * center
}

/// Pearson correlation, `Err(reason)` when either side has no variance.
pub fn pearson(r: &[f64], o: &[f64]) -> std::result::Result<f64, String> {
    if r.len() < 2 {
        return Err("fewer than two samples".into());
    }
    let (mr, mo) = (mean(r), mean(o));
    let (mut sro, mut srr, mut soo) = (0.0, 0.0, 0.0);
    for (&a, &b) in r.iter().zip(o) {
        let (da, db) = (a - mr, b - mo);
        sro += da * db;
        srr += da * da;
        soo += db * db;
    }
    if is_degenerate(srr, r, mr) {
        return Err("zero response variance".into());
    }
    if is_degenerate(soo, o, mo) {
        return Err("zero prediction variance".into());
    }
    Ok(sro / (srr * soo).sqrt())
}

/// Pearson correlation over all `(image, repeat)` pairs, per neuron.
pub fn single_trial_corr(r: &TrialTensor, o: &TrialTensor) -> Result<NeuronScores> {
    r.check_matches(o)?;
    let mut out = NeuronScores::with_capacity(r.num_neurons);
    for n in 0..r.num_neurons {
        out.push(pearson(&r.neuron(n), &o.neuron(n)));
    }
    Ok(out)
}

fn image_means(t: &TrialTensor, n: usize) -> Vec<f64> {
    t.grouped(n).iter().map(|g| mean(g)).collect()
}

/// Correlation between per-image mean responses and per-image mean
/// predictions, per neuron.
pub fn avg_corr(r: &TrialTensor, o: &TrialTensor) -> Result<NeuronScores> {
    r.check_matches(o)?;
    let mut out = NeuronScores::with_capacity(r.num_neurons);
    for n in 0..r.num_neurons {
        out.push(pearson(&image_means(r, n), &image_means(o, n)));
    }
    Ok(out)
}

fn require_repeats(r: &TrialTensor) -> Result<()> {
    if let Some(i) = r.repeats.iter().position(|&k| k < 2) {
        return Err(CoreError::Contract(format!(
            "image {i} has {} repeat(s); noise variance needs at least 2",
            r.repeats[i]
        )));
    }
    Ok(())
}

/// Per neuron: mean over images of the unbiased variance across repeats.
pub fn noise_variance(r: &TrialTensor) -> Result<Vec<f64>> {
    require_repeats(r)?;
    Ok((0..r.num_neurons)
        .map(|n| {
            let groups = r.grouped(n);
            let total: f64 = groups
                .iter()
                .map(|g| {
                    let m = mean(g);
                    g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (g.len() - 1) as f64
                })
                .sum();
            total / groups.len() as f64
        })
        .collect())
}

/// Fraction of explainable variance explained, per neuron.
///
/// `1 − (MSE − σ²) / (Var[r] − σ²)` where `MSE = (1/N) Σ (r_ij − o_i)²`,
/// `Var[r]` is the population variance over all `N` trials, and `σ²` is the
/// within-image scatter on the same footing, `(1/N) Σ (r_ij − r̄_i)²`. With
/// all three terms normalized by `N`, the per-image-mean predictor scores
/// exactly 1, the grand-mean predictor exactly 0, and no predictor exceeds 1.
/// Values are not clamped below.
pub fn feve(r: &TrialTensor, o: &TrialTensor) -> Result<NeuronScores> {
    r.check_matches(o)?;
    require_repeats(r)?;
    let mut out = NeuronScores::with_capacity(r.num_neurons);
    for n in 0..r.num_neurons {
        let groups = r.grouped(n);
        let pred = image_means(o, n);
        let all = r.neuron(n);
        let total = all.len() as f64;
        let grand = mean(&all);
        let var = all.iter().map(|v| (v - grand) * (v - grand)).sum::<f64>() / total;
        let (mut mse, mut noise) = (0.0, 0.0);
        for (g, &oi) in groups.iter().zip(&pred) {
            let m = mean(g);
            for v in g {
                mse += (v - oi) * (v - oi);
                noise += (v - m) * (v - m);
            }
        }
        mse /= total;
        noise /= total;
        let explainable = var - noise;
        if !(explainable > 1e-12 * var.max(f64::MIN_POSITIVE)) {
            out.push(Err("no explainable variance".into()));
        } else {
            out.push(Ok(1.0 - (mse - noise) / explainable));
        }
    }
    Ok(out)
}

/// Per-neuron metrics plus aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rho_trial: NeuronScores,
    pub rho_avg: NeuronScores,
    pub feve: NeuronScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rho_trial: Option<f64>,
    pub rho_avg: Option<f64>,
    pub feve: Option<f64>,
}

impl MetricReport {
    /// All three metrics; FEVE is marked undefined for every neuron when some
    /// image has a single repeat.
    pub fn compute(r: &TrialTensor, o: &TrialTensor) -> Result<Self> {
        let rho_trial = single_trial_corr(r, o)?;
        let rho_avg = avg_corr(r, o)?;
        let feve = match require_repeats(r) {
            Ok(()) => feve(r, o)?,
            Err(_) => NeuronScores {
                values: vec![None; r.num_neurons],
                reasons: vec![Some("single-repeat images".into()); r.num_neurons],
            },
        };
        Ok(Self { rho_trial, rho_avg, feve })
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            rho_trial: self.rho_trial.aggregate(),
            rho_avg: self.rho_avg.aggregate(),
            feve: self.feve.aggregate(),
        }
    }

    /// `neuron,rho_trial,rho_avg,feve,included,reason` with one row per neuron
    /// and a final `mean` row. Undefined values are written as `NaN`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| x.to_string());
        let mut out = String::from("neuron,rho_trial,rho_avg,feve,included,reason\n");
        for n in 0..self.rho_trial.values.len() {
            let reasons: Vec<String> = [
                ("rho_trial", &self.rho_trial),
                ("rho_avg", &self.rho_avg),
                ("feve", &self.feve),
            ]
            .iter()
            .filter_map(|(label, s)| s.reasons[n].as_ref().map(|r| format!("{label}: {r}")))
            .collect();
            let _ = writeln!(
                out,
                "{n},{},{},{},{},{}",
                fmt(self.rho_trial.values[n]),
                fmt(self.rho_avg.values[n]),
                fmt(self.feve.values[n]),
                reasons.is_empty(),
                reasons.join("; ")
            );
        }
        let s = self.summary();
        let _ = writeln!(
            out,
            "mean,{},{},{},,",
            fmt(s.rho_trial),
            fmt(s.rho_avg),
            fmt(s.feve)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(repeats: Vec<usize>, neurons: usize, values: Vec<f64>) -> TrialTensor {
        TrialTensor::new(repeats, neurons, values, TrialKind::Response).unwrap()
    }

    #[test]
    fn two_point_noise_variance() {
        let r = tensor(vec![2], 1, vec![0.0, 2.0]);
        assert_eq!(noise_variance(&r).unwrap(), vec![2.0]);
    }

    #[test]
    fn single_repeat_noise_variance_names_image() {
        let r = tensor(vec![2, 1], 1, vec![0.0, 2.0, 1.0]);
        let err = noise_variance(&r).unwrap_err().to_string();
        assert!(err.contains("image 1"), "{err}");
    }

    #[test]
    fn constant_neuron_is_excluded_not_zeroed() {
        let r = tensor(vec![1, 1, 1], 2, vec![0.1, 1.0, 0.1, 2.0, 0.1, 4.0]);
        let o = tensor(vec![1, 1, 1], 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 4.0]);
        let s = single_trial_corr(&r, &o).unwrap();
        assert_eq!(s.values[0], None);
        assert_eq!(s.excluded(), vec![0]);
        assert_eq!(s.aggregate(), s.values[1]);
    }

    #[test]
    fn feve_hand_toy() {
        // Two images, two repeats: r = {1,3}, {4,6}; oracle predictor {2},{5}.
        let r = tensor(vec![2, 2], 1, vec![1.0, 3.0, 4.0, 6.0]);
        let o = tensor(vec![2, 2], 1, vec![2.0, 2.0, 5.0, 5.0]);
        // var = mean((-2.5,-0.5,0.5,2.5)^2) = 3.25; noise = 1; mse = 1.
        assert_eq!(feve(&r, &o).unwrap().values[0], Some(1.0));
        let grand = tensor(vec![2, 2], 1, vec![3.5; 4]);
        assert_eq!(feve(&r, &grand).unwrap().values[0], Some(0.0));
    }

    #[test]
    fn report_csv_has_aggregate_row() {
        let r = tensor(vec![2, 2], 1, vec![1.0, 3.0, 4.0, 6.0]);
        let o = tensor(vec![2, 2], 1, vec![2.0, 2.0, 5.0, 5.0]);
        let csv = MetricReport::compute(&r, &o).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "neuron,rho_trial,rho_avg,feve,included,reason");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("mean,"));
    }
}
