//! L1-regularized logistic regression over attack-success covariates.
//!
//! Objective on standardized features `z`:
//! `mean_i log(1 + exp(-s_i (b + z_i·w))) + strength·‖w‖₁`, `s_i = ±1`,
//! bias unpenalized. Solved by monotone FISTA with step `1/L`,
//! `L = (p + 1)/4`, which bounds the Hessian of the mean loss because every
//! standardized column and the bias column have squared norm `n`.
//!
//! With `strength > 0` the weights stay bounded under perfect separation; the
//! bias alone can still diverge, in which case `converged` is false. With a
//! single outcome class every standardized feature has zero gradient at any
//! bias, so the weights are zero and the bias is the smoothed log-odds
//! `ln((k + 1/2)/(n - k + 1/2))`.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Distance;
use crate::error::{Error, Result};

pub const DEFAULT_STRENGTH_GRID: [f64; 8] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Covariate names in encoding order.
pub const COVARIATES: [&str; 5] = ["detector", "physical", "distance", "condition", "tier"];

/// One attacked case.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub detector: String,
    /// Physical capture rather than digital compositing. Constant for
    /// synthetic data.
    #[serde(default)]
    pub physical: bool,
    pub distance: Distance,
    pub condition: String,
    /// Perturbation-size tier label.
    pub tier: String,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub folds: usize,
    /// Fold-assignment seed for cross-validation.
    pub seed: u64,
    /// Pick the largest strength within one standard error of the best
    /// cross-validated loss instead of the best one.
    pub one_standard_error: bool,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100_000,
            folds: 5,
            seed: 0,
            one_standard_error: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub bias: f64,
    /// Coefficients on standardized columns.
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    /// Column standard deviations; 0 marks a constant column.
    pub scales: Vec<f64>,
    pub strength: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticFit {
    /// Coefficients on the original columns.
    pub fn raw_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.scales)
            .map(|(w, s)| if *s > 0.0 { w / s } else { 0.0 })
            .collect()
    }

    pub fn raw_bias(&self) -> f64 {
        self.bias
            - self
                .weights
                .iter()
                .zip(&self.means)
                .zip(&self.scales)
                .map(|((w, m), s)| if *s > 0.0 { w * m / s } else { 0.0 })
                .sum::<f64>()
    }

    /// Success probability for a row of original features.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let z = self.raw_bias() + row.iter().zip(self.raw_weights()).map(|(x, w)| x * w).sum::<f64>();
        sigmoid(z)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-m))` without overflow.
fn log_loss_margin(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn standardize(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let means: Vec<f64> = x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
    let mut scales = Vec::with_capacity(x.ncols());
    let mut z = x.to_owned();
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| v - means[j]);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let sd = if sd > 1e-12 { sd } else { 0.0 };
        if sd > 0.0 {
            col.mapv_inplace(|v| v / sd);
        } else {
            col.fill(0.0);
        }
        scales.push(sd);
    }
    (z, means, scales)
}

/// Penalized objective for bias `b` and weights `w` on standardized `z`.
pub fn logistic_objective(z: ArrayView2<f64>, y: &[bool], bias: f64, w: &[f64], strength: f64) -> f64 {
    let margins = z.dot(&Array1::from(w.to_vec())) + bias;
    let loss: f64 = margins
        .iter()
        .zip(y)
        .map(|(m, &yi)| log_loss_margin(if yi { *m } else { -m }))
        .sum::<f64>()
        / y.len() as f64;
    loss + strength * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Smooth-part gradient (bias first) and mean loss.
fn smooth_gradient(z: &Array2<f64>, y: &[bool], theta: &[f64]) -> (Vec<f64>, f64) {
    let n = y.len() as f64;
    let w = Array1::from(theta[1..].to_vec());
    let margins = z.dot(&w) + theta[0];
    let mut resid = Array1::zeros(y.len());
    let mut loss = 0.0;
    for (i, (&m, &yi)) in margins.iter().zip(y).enumerate() {
        let s = if yi { 1.0 } else { -1.0 };
        loss += log_loss_margin(s * m);
        resid[i] = sigmoid(m) - if yi { 1.0 } else { 0.0 };
    }
    let mut g = Vec::with_capacity(theta.len());
    g.push(resid.sum() / n);
    g.extend(z.t().dot(&resid).iter().map(|v| v / n));
    (g, loss / n)
}

/// Fits the penalized model on the columns of `x`.
pub fn fit_l1_logistic(x: ArrayView2<f64>, y: &[bool], strength: f64, options: &LogisticOptions) -> Result<LogisticFit> {
    if x.nrows() != y.len() {
        return Err(Error::shape(format!("{} outcomes", x.nrows()), y.len()));
    }
    if y.is_empty() {
        return Err(Error::Empty("regression records"));
    }
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::InvalidConfig(format!("l1 strength must be finite and >= 0, got {strength}")));
    }
    if !(options.tolerance > 0.0) {
        return Err(Error::InvalidConfig("tolerance must be positive".into()));
    }
    let (z, means, scales) = standardize(x);
    let p = z.ncols();
    let positives = y.iter().filter(|v| **v).count();
    if positives == 0 || positives == y.len() {
        let n = y.len() as f64;
        let k = positives as f64;
        let bias = ((k + 0.5) / (n - k + 0.5)).ln();
        let weights = vec![0.0; p];
        return Ok(LogisticFit {
            bias,
            objective: logistic_objective(z.view(), y, bias, &weights, strength),
            weights,
            means,
            scales,
            strength,
            iterations: 0,
            converged: true,
        });
    }

    let lipschitz = 0.25 * (p as f64 + 1.0);
    let step = 1.0 / lipschitz;
    let prox = |v: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len());
        out.push(v[0]);
        out.extend(v[1..].iter().zip(&scales).map(|(vj, s)| {
            if *s > 0.0 {
                soft_threshold(*vj, step * strength)
            } else {
                0.0
            }
        }));
        out
    };
    let full_objective = |theta: &[f64]| logistic_objective(z.view(), y, theta[0], &theta[1..], strength);

    let mut x_k = vec![0.0; p + 1];
    let mut f_k = full_objective(&x_k);
    let mut y_k = x_k.clone();
    let mut t_k = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..options.max_iterations {
        iterations = it + 1;
        let (g, _) = smooth_gradient(&z, y, &y_k);
        let trial: Vec<f64> = y_k.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let u = prox(&trial);
        let f_u = full_objective(&u);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let x_prev = std::mem::take(&mut x_k);
        if f_u <= f_k {
            x_k = u.clone();
            f_k = f_u;
        } else {
            x_k = x_prev.clone();
        }
        y_k = (0..=p)
            .map(|j| x_k[j] + (t_k / t_next) * (u[j] - x_k[j]) + ((t_k - 1.0) / t_next) * (x_k[j] - x_prev[j]))
            .collect();
        t_k = t_next;

        let (gx, _) = smooth_gradient(&z, y, &x_k);
        let trial: Vec<f64> = x_k.iter().zip(&gx).map(|(a, b)| a - step * b).collect();
        let mapped = prox(&trial);
        let mapping_norm = x_k
            .iter()
            .zip(&mapped)
            .map(|(a, b)| ((a - b) * lipschitz).powi(2))
            .sum::<f64>()
            .sqrt();
        if mapping_norm < options.tolerance {
            converged = true;
            break;
        }
    }
    Ok(LogisticFit {
        bias: x_k[0],
        weights: x_k[1..].to_vec(),
        means,
        scales,
        strength,
        objective: f_k,
        iterations,
        converged,
    })
}

/// One-hot design: each covariate's levels sorted, first level dropped as
/// reference. Returns the matrix, column names and the covariate index of
/// every column.
pub fn encode_factors(records: &[FactorRecord]) -> (Array2<f64>, Vec<String>, Vec<usize>) {
    let values = |r: &FactorRecord| -> [String; 5] {
        [
            r.detector.clone(),
            r.physical.to_string(),
            r.distance.as_str().to_string(),
            r.condition.clone(),
            r.tier.clone(),
        ]
    };
    let mut levels: Vec<BTreeSet<String>> = vec![BTreeSet::new(); COVARIATES.len()];
    for r in records {
        for (set, v) in levels.iter_mut().zip(values(r)) {
            set.insert(v);
        }
    }
    let mut names = Vec::new();
    let mut groups = Vec::new();
    let mut columns: Vec<(usize, String)> = Vec::new();
    for (c, set) in levels.iter().enumerate() {
        for level in set.iter().skip(1) {
            names.push(format!("{}={}", COVARIATES[c], level));
            groups.push(c);
            columns.push((c, level.clone()));
        }
    }
    let mut x = Array2::zeros((records.len(), columns.len()));
    for (i, r) in records.iter().enumerate() {
        let v = values(r);
        for (j, (c, level)) in columns.iter().enumerate() {
            if v[*c] == *level {
                x[[i, j]] = 1.0;
            }
        }
    }
    (x, names, groups)
}

/// Mean held-out log-loss per strength, with its standard error, over
/// seeded folds.
pub fn cross_validate_strength(
    x: ArrayView2<f64>,
    y: &[bool],
    grid: &[f64],
    options: &LogisticOptions,
) -> Result<(f64, Vec<(f64, f64, f64)>)> {
    let n = y.len();
    if grid.is_empty() {
        return Err(Error::Empty("strength grid"));
    }
    if options.folds < 2 || options.folds > n {
        return Err(Error::InvalidConfig(format!("{} folds for {} records", options.folds, n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % options.folds;
        }
        f
    };
    let mut scores = Vec::with_capacity(grid.len());
    for &strength in grid {
        let mut losses = Vec::with_capacity(options.folds);
        for k in 0..options.folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            let xt = x.select(Axis(0), &train);
            let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let fit = fit_l1_logistic(xt.view(), &yt, strength, options)?;
            let loss = test
                .iter()
                .map(|&i| {
                    let p = fit.predict(&x.row(i).to_vec()).clamp(1e-12, 1.0 - 1e-12);
                    if y[i] {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum::<f64>()
                / test.len() as f64;
            losses.push(loss);
        }
        let m = losses.iter().sum::<f64>() / losses.len() as f64;
        let var = losses.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (losses.len() - 1) as f64;
        scores.push((strength, m, (var / losses.len() as f64).sqrt()));
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .copied()
        .expect("nonempty grid");
    let chosen = if options.one_standard_error {
        scores
            .iter()
            .filter(|s| s.1 <= best.1 + best.2)
            .map(|s| s.0)
            .fold(best.0, f64::max)
    } else {
        best.0
    };
    Ok((chosen, scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessFactors {
    pub features: Vec<String>,
    /// Covariate name of every feature.
    pub covariate_of: Vec<String>,
    pub fit: LogisticFit,
    /// Nonzero features by decreasing |standardized coefficient|.
    pub ranking: Vec<(String, f64)>,
}

impl SuccessFactors {
    /// Covariates with at least one nonzero feature, in ranking order.
    pub fn selected_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (name, _) in &self.ranking {
            let c = &self.covariate_of[self.features.iter().position(|f| f == name).expect("ranked feature")];
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

/// Fits the success model; `l1_strength = None` picks it by cross-validation
/// over [`DEFAULT_STRENGTH_GRID`].
pub fn fit_success_factors(
    records: &[FactorRecord],
    l1_strength: Option<f64>,
    options: &LogisticOptions,
) -> Result<SuccessFactors> {
    if records.is_empty() {
        return Err(Error::Empty("regression records"));
    }
    let (x, features, groups) = encode_factors(records);
    let y: Vec<bool> = records.iter().map(|r| r.success).collect();
    let strength = match l1_strength {
        Some(s) => s,
        None => cross_validate_strength(x.view(), &y, &DEFAULT_STRENGTH_GRID, options)?.0,
    };
    let fit = fit_l1_logistic(x.view(), &y, strength, options)?;
    let mut ranking: Vec<(String, f64)> = features
        .iter()
        .zip(&fit.weights)
        .filter(|(_, w)| **w != 0.0)
        .map(|(f, w)| (f.clone(), *w))
        .collect();
    ranking.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
    Ok(SuccessFactors {
        covariate_of: groups.iter().map(|&g| COVARIATES[g].to_string()).collect(),
        features,
        fit,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic(n: usize, w: &[f64], bias: f64, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, w.len()), |_| rng.gen_range(-1.0..1.0));
        let y = x
            .rows()
            .into_iter()
            .map(|r| rng.gen::<f64>() < sigmoid(bias + r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        (x, y)
    }

    #[test]
    fn identical_outcomes_give_zero_weights() {
        let (x, _) = synthetic(50, &[1.0, 0.0], 0.0, 3);
        let y = vec![true; 50];
        let fit = fit_l1_logistic(x.view(), &y, 0.01, &LogisticOptions::default()).unwrap();
        assert!(fit.weights.iter().all(|w| *w == 0.0));
        assert!(fit.bias > 0.0);
    }

    #[test]
    fn huge_strength_zeroes_weights() {
        let (x, y) = synthetic(200, &[3.0, -2.0, 0.0], 0.3, 4);
        let fit = fit_l1_logistic(x.view(), &y, 1e6, &LogisticOptions::default()).unwrap();
        assert!(fit.weights.iter().all(|w| *w == 0.0));
        assert!(fit.converged);
        let rate = y.iter().filter(|v| **v).count() as f64 / y.len() as f64;
        assert!((sigmoid(fit.bias) - rate).abs() < 1e-6);
    }

    #[test]
    fn objective_certificate_and_stationarity() {
        let (x, y) = synthetic(300, &[2.0, 0.0, -1.0, 0.0], -0.2, 5);
        let strength = 0.02;
        let fit = fit_l1_logistic(x.view(), &y, strength, &LogisticOptions::default()).unwrap();
        assert!(fit.converged);
        let (z, _, _) = standardize(x.view());
        let zero = vec![0.0; 4];
        assert!(fit.objective <= logistic_objective(z.view(), &y, 0.0, &zero, strength));
        let mut theta = vec![fit.bias];
        theta.extend(&fit.weights);
        let (g, _) = smooth_gradient(&z, &y, &theta);
        assert!(g[0].abs() < 1e-6);
        for (j, w) in fit.weights.iter().enumerate() {
            if *w != 0.0 {
                assert!((g[j + 1] + strength * w.signum()).abs() < 1e-6, "{j}: {}", g[j + 1]);
            } else {
                assert!(g[j + 1].abs() <= strength + 1e-6);
            }
        }
    }

    #[test]
    fn unpenalized_fit_matches_newton() {
        let (x, y) = synthetic(400, &[1.0, -0.5], 0.1, 6);
        let fit = fit_l1_logistic(x.view(), &y, 0.0, &LogisticOptions::default()).unwrap();
        let (z, _, _) = standardize(x.view());
        // Newton on the same standardized problem.
        let mut theta = [0.0f64; 3];
        for _ in 0..50 {
            let mut g = [0.0; 3];
            let mut h = nalgebra::Matrix3::<f64>::zeros();
            for (i, yi) in y.iter().enumerate() {
                let row = [1.0, z[[i, 0]], z[[i, 1]]];
                let p = sigmoid(row.iter().zip(&theta).map(|(a, b)| a * b).sum());
                for a in 0..3 {
                    g[a] += (p - if *yi { 1.0 } else { 0.0 }) * row[a];
                    for b in 0..3 {
                        h[(a, b)] += p * (1.0 - p) * row[a] * row[b];
                    }
                }
            }
            let d = h.lu().solve(&nalgebra::Vector3::from(g)).unwrap();
            for a in 0..3 {
                theta[a] -= d[a];
            }
        }
        assert!((fit.bias - theta[0]).abs() < 1e-6);
        assert!((fit.weights[0] - theta[1]).abs() < 1e-6);
        assert!((fit.weights[1] - theta[2]).abs() < 1e-6);
    }

    #[test]
    fn encoding_drops_reference_levels() {
        let rec = |d: &str, dist, success| FactorRecord {
            detector: d.into(),
            physical: false,
            distance: dist,
            condition: "tree".into(),
            tier: "base".into(),
            success,
        };
        let records = vec![
            rec("grid", Distance::Far, true),
            rec("two", Distance::Near, false),
            rec("two", Distance::Medium, true),
        ];
        let (x, names, groups) = encode_factors(&records);
        assert_eq!(names, ["detector=two", "distance=medium", "distance=near"]);
        assert_eq!(groups, [0, 2, 2]);
        assert_eq!(x.row(1).to_vec(), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn deterministic() {
        let (x, y) = synthetic(200, &[1.0, 0.0, 0.5], 0.0, 7);
        let o = LogisticOptions::default();
        let a = cross_validate_strength(x.view(), &y, &DEFAULT_STRENGTH_GRID, &o).unwrap();
        let b = cross_validate_strength(x.view(), &y, &DEFAULT_STRENGTH_GRID, &o).unwrap();
        assert_eq!(a, b);
    }
}
