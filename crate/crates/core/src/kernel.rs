//! Stage-two learners: Nyström kernel ridge classifiers and ridge box
//! refiners.
//!
//! The classifier minimizes
//!
//! ```text
//! (1/n) * sum_i (f(x_i) - y_i)^2 + lambda * ||f||_H^2,   f(x) = sum_j a_j k(x, c_j)
//! ```
//!
//! over the span of `M` centers sampled from the training rows. The normal
//! equations `(Knm' Knm + lambda n Kmm) a = Knm' y` are solved by conjugate
//! gradient on the system preconditioned with the Cholesky factors of the
//! center block, `B = T^-1 A^-1` with `T'T = Kmm` and
//! `A'A = T T' / M + lambda I`. With well-spread centers the preconditioned
//! system is close to the identity and CG converges in a few dozen steps.

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;

/// Rows sampled for the median-distance bandwidth heuristic.
pub const MEDIAN_HEURISTIC_SAMPLES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Gaussian width; `None` picks the median pairwise distance of the
    /// training features.
    pub sigma: Option<f64>,
    pub lambda: f64,
    pub num_centers: usize,
    pub cg_max_iter: usize,
    pub cg_tol: f64,
    pub center_seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            lambda: 1e-3,
            num_centers: 500,
            cg_max_iter: 200,
            cg_tol: 1e-7,
            center_seed: 0,
        }
    }
}

impl KernelConfig {
    pub fn with_centers(mut self, m: usize) -> Self {
        self.num_centers = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("kernel sigma must be positive".into()));
            }
        }
        if !(self.lambda > 0.0) || !(self.cg_tol > 0.0) || self.num_centers < 1 {
            return Err(Error::Config(
                "kernel needs lambda > 0, cg_tol > 0 and num_centers >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub class_id: usize,
    /// Fit-time configuration with `sigma` resolved.
    pub config: KernelConfig,
    #[serde(with = "rows")]
    pub centers: DMatrix<f64>,
    pub coefficients: Vec<f64>,
}

impl ClassifierModel {
    pub fn sigma(&self) -> f64 {
        self.config
            .sigma
            .expect("fitted models carry a resolved sigma")
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerModel {
    pub class_id: usize,
    /// One row per delta component `(dx, dy, dw, dh)`; the last column is
    /// the bias.
    #[serde(with = "rows")]
    pub weights: DMatrix<f64>,
    pub lambda_rls: f64,
}

impl RefinerModel {
    pub fn feature_dim(&self) -> usize {
        self.weights.ncols() - 1
    }
}

/// Convergence trace of a classifier fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// `||r_k|| / ||r_0||` of the preconditioned system, starting at 1.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Stacks feature rows into an `n x d` matrix.
pub fn rows_to_matrix<R: AsRef<[f64]>>(rows: &[R]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.as_ref().len(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i].as_ref()[j]))
}

/// Gaussian kernel matrix `exp(-||a_i - b_j||^2 / (2 sigma^2))`.
pub fn gaussian_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let an: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let bn: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut k = a * b.transpose();
    let scale = -1.0 / (2.0 * sigma * sigma);
    for j in 0..k.ncols() {
        for i in 0..k.nrows() {
            let d2 = (an[i] + bn[j] - 2.0 * k[(i, j)]).max(0.0);
            k[(i, j)] = (d2 * scale).exp();
        }
    }
    k
}

/// Median pairwise Euclidean distance over a seeded subsample of at most
/// `max_samples` rows. Falls back to 1.0 for degenerate inputs.
pub fn median_heuristic(features: &DMatrix<f64>, max_samples: usize, seed: u64) -> f64 {
    let n = features.nrows();
    let idx: Vec<usize> = if n > max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = rand::seq::index::sample(&mut rng, n, max_samples).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            dists.push((features.row(i) - features.row(j)).norm());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *m > 0.0 && m.is_finite() {
        *m
    } else {
        1.0
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Row order that depends only on row contents, so fits are invariant to
/// how the caller ordered the training set.
fn canonical_order(features: &DMatrix<f64>, labels: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..features.nrows()).collect();
    idx.sort_by(|&a, &b| {
        for j in 0..features.ncols() {
            match features[(a, j)].total_cmp(&features[(b, j)]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        labels[a].total_cmp(&labels[b])
    });
    idx
}

fn jittered_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    let mut jitter = 1e-12 * n as f64;
    for _ in 0..8 {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c);
        }
        jitter *= 100.0;
    }
    Err(Error::Numerical(
        "center kernel block is not positive definite".into(),
    ))
}

pub fn fit_classifier(
    class_id: usize,
    features: &DMatrix<f64>,
    labels: &[f64],
    config: &KernelConfig,
) -> Result<ClassifierModel> {
    fit_classifier_with_report(class_id, features, labels, config).map(|(m, _)| m)
}

pub fn fit_classifier_with_report(
    class_id: usize,
    features: &DMatrix<f64>,
    labels: &[f64],
    config: &KernelConfig,
) -> Result<(ClassifierModel, SolveReport)> {
    config.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidInput("labels must be -1 or +1".into()));
    }
    check_finite(features, "classifier features")?;
    let m = config.num_centers;
    if m > n {
        return Err(Error::InvalidInput(format!(
            "num_centers ({m}) exceeds training size ({n})"
        )));
    }

    let order = canonical_order(features, labels);
    let x = features.select_rows(&order);
    let y = DVector::from_iterator(n, order.iter().map(|&i| labels[i]));

    let sigma = match config.sigma {
        Some(s) => s,
        None => median_heuristic(&x, MEDIAN_HEURISTIC_SAMPLES, config.center_seed),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.center_seed);
    let mut center_idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    center_idx.sort_unstable();
    let centers = x.select_rows(&center_idx);

    let knm = gaussian_kernel(&x, &centers, sigma);
    let kmm = gaussian_kernel(&centers, &centers, sigma);
    let (coefficients, report) = solve_preconditioned(&knm, &kmm, &y, config)?;

    let mut resolved = config.clone();
    resolved.sigma = Some(sigma);
    Ok((
        ClassifierModel {
            class_id,
            config: resolved,
            centers,
            coefficients: coefficients.as_slice().to_vec(),
        },
        report,
    ))
}

fn solve_preconditioned(
    knm: &DMatrix<f64>,
    kmm: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &KernelConfig,
) -> Result<(DVector<f64>, SolveReport)> {
    let n = knm.nrows() as f64;
    let m = kmm.nrows();
    let lambda = config.lambda;

    // T = L', L L' = Kmm
    let l = jittered_cholesky(kmm)?.unpack();
    let mut tt = l.tr_mul(&l); // T T' = L' L
    tt /= m as f64;
    for i in 0..m {
        tt[(i, i)] += lambda;
    }
    // A = La', La La' = T T' / M + lambda I
    let la = Cholesky::new(tt)
        .ok_or_else(|| Error::Numerical("preconditioner factor failed".into()))?
        .unpack();

    let upper_solve = |tri: &DMatrix<f64>, v: &DVector<f64>| -> DVector<f64> {
        // Solves tri' x = v for lower-triangular tri.
        tri.tr_solve_lower_triangular(v)
            .expect("nonsingular factor")
    };
    let lower_solve = |tri: &DMatrix<f64>, v: &DVector<f64>| -> DVector<f64> {
        tri.solve_lower_triangular(v).expect("nonsingular factor")
    };

    let apply_w = |beta: &DVector<f64>| -> DVector<f64> {
        let u = upper_solve(&la, beta); // A^-1 beta
        let v = upper_solve(&l, &u); // T^-1 u
        let z = knm.tr_mul(&(knm * &v)) / n;
        let w = lower_solve(&l, &z); // T^-T z
        lower_solve(&la, &(w + &u * lambda)) // A^-T (...)
    };

    let kty = knm.tr_mul(y) / n;
    let b = lower_solve(&la, &lower_solve(&l, &kty));

    let mut beta = DVector::zeros(m);
    let mut r = b.clone();
    let r0 = r.norm();
    let mut residuals = vec![1.0];
    let mut converged = r0 == 0.0;
    if !converged {
        let mut p = r.clone();
        let mut rs = r.norm_squared();
        for _ in 0..config.cg_max_iter {
            let wp = apply_w(&p);
            let pwp = p.dot(&wp);
            if !(pwp > 0.0) {
                break;
            }
            let step = rs / pwp;
            beta.axpy(step, &p, 1.0);
            r.axpy(-step, &wp, 1.0);
            let rs_new = r.norm_squared();
            let rel = rs_new.sqrt() / r0;
            residuals.push(rel);
            if rel <= config.cg_tol {
                converged = true;
                break;
            }
            p = &r + &p * (rs_new / rs);
            rs = rs_new;
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("conjugate gradient diverged".into()));
    }
    let alpha = upper_solve(&l, &upper_solve(&la, &beta));
    Ok((
        alpha,
        SolveReport {
            residuals,
            converged,
        },
    ))
}

/// Raw decision values `sum_j a_j k(x, c_j)` for each row of `features`.
pub fn predict_raw(model: &ClassifierModel, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    if features.ncols() != model.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim(),
            got: features.ncols(),
        });
    }
    if features.nrows() == 0 {
        return Ok(Vec::new());
    }
    let k = gaussian_kernel(features, &model.centers, model.sigma());
    let a = DVector::from_column_slice(&model.coefficients);
    Ok((k * a).as_slice().to_vec())
}

/// Logistic squashing of a raw score into `[0, 1]`.
pub fn calibrate(raw: f64) -> f64 {
    1.0 / (1.0 + (-raw).exp())
}

/// Ridge regression from features to box deltas, one output per delta
/// component, with an unpenalized bias.
pub fn fit_refiner(
    class_id: usize,
    features: &DMatrix<f64>,
    deltas: &[BoxDelta],
    lambda_rls: f64,
) -> Result<RefinerModel> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty refiner training set".into()));
    }
    if deltas.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: deltas.len(),
        });
    }
    if !(lambda_rls > 0.0) {
        return Err(Error::Config("lambda_rls must be positive".into()));
    }
    check_finite(features, "refiner features")?;
    if deltas
        .iter()
        .flat_map(|d| d.to_array())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("refiner targets"));
    }
    let d = features.ncols();
    let z = features.clone().insert_column(d, 1.0);
    let targets = DMatrix::from_fn(n, 4, |i, j| deltas[i].to_array()[j]);

    let mut gram = z.tr_mul(&z);
    for i in 0..d {
        gram[(i, i)] += lambda_rls;
    }
    let rhs = z.tr_mul(&targets);
    let solution = match Cholesky::new(gram.clone()) {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::Numerical(e.to_string()))?,
    };
    Ok(RefinerModel {
        class_id,
        weights: solution.transpose(),
        lambda_rls,
    })
}

pub fn predict_deltas(model: &RefinerModel, feature: &[f64]) -> Result<BoxDelta> {
    let d = model.feature_dim();
    if feature.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: feature.len(),
        });
    }
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let row = model.weights.row(k);
        *o = feature
            .iter()
            .zip(row.iter())
            .map(|(f, w)| f * w)
            .sum::<f64>()
            + row[d];
    }
    Ok(BoxDelta::from_array(out))
}

/// (De)serializes a matrix as a list of rows.
mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(
            m.row_iter()
                .map(|r| r.iter().copied().collect::<Vec<f64>>()),
        )
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        super::rows_to_matrix(&rows).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    fn two_blobs(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_matrix(&mut rng, n, d) * 0.5;
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let pos = i % 2 == 0;
            x[(i, 0)] += if pos { 1.5 } else { -1.5 };
            y.push(if pos { 1.0 } else { -1.0 });
        }
        (x, y)
    }

    /// Dense exact kernel ridge regression: (K + lambda n I) c = y.
    fn exact_krr(
        x: &DMatrix<f64>,
        y: &[f64],
        sigma: f64,
        lambda: f64,
        test: &DMatrix<f64>,
    ) -> Vec<f64> {
        let n = x.nrows();
        let mut k = DMatrix::from_fn(n, n, |i, j| {
            (-(x.row(i) - x.row(j)).norm_squared() / (2.0 * sigma * sigma)).exp()
        });
        for i in 0..n {
            k[(i, i)] += lambda * n as f64;
        }
        let c = k.lu().solve(&DVector::from_column_slice(y)).unwrap();
        (0..test.nrows())
            .map(|t| {
                (0..n)
                    .map(|i| {
                        c[i] * (-(test.row(t) - x.row(i)).norm_squared() / (2.0 * sigma * sigma))
                            .exp()
                    })
                    .sum()
            })
            .collect()
    }

    fn exact_config(n: usize) -> KernelConfig {
        KernelConfig {
            sigma: Some(1.3),
            lambda: 1e-3,
            num_centers: n,
            cg_max_iter: 500,
            cg_tol: 1e-10,
            center_seed: 3,
        }
    }

    #[test]
    fn full_rank_fit_matches_exact_krr() {
        let (x, y) = two_blobs(120, 5, 1);
        let cfg = exact_config(120);
        let model = fit_classifier(0, &x, &y, &cfg).unwrap();
        let test = random_matrix(&mut ChaCha8Rng::seed_from_u64(9), 40, 5);
        let got = predict_raw(&model, &test).unwrap();
        let want = exact_krr(&x, &y, 1.3, 1e-3, &test);
        let err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "max abs diff {err}");
    }

    #[test]
    fn duplicated_rows_give_identical_predictions() {
        let (x, y) = two_blobs(60, 4, 2);
        let x2 = DMatrix::from_fn(120, 4, |i, j| x[(i % 60, j)]);
        let y2: Vec<f64> = (0..120).map(|i| y[i % 60]).collect();
        let test = random_matrix(&mut ChaCha8Rng::seed_from_u64(4), 30, 4);

        let a = predict_raw(
            &fit_classifier(0, &x, &y, &exact_config(60)).unwrap(),
            &test,
        )
        .unwrap();
        let b = predict_raw(
            &fit_classifier(0, &x2, &y2, &exact_config(120)).unwrap(),
            &test,
        )
        .unwrap();
        let oracle = exact_krr(&x2, &y2, 1.3, 1e-3, &test);
        for ((p, q), o) in a.iter().zip(&b).zip(&oracle) {
            assert!((p - q).abs() <= 1e-6, "{p} vs {q}");
            assert!((q - o).abs() <= 1e-6, "{q} vs oracle {o}");
        }
    }

    #[test]
    fn single_point_fit() {
        let x = DMatrix::from_row_slice(1, 3, &[0.2, -0.1, 0.4]);
        let model =
            fit_classifier(4, &x, &[1.0], &KernelConfig::default().with_centers(1)).unwrap();
        assert!(predict_raw(&model, &x).unwrap()[0] > 0.0);
        assert_eq!(model.class_id, 4);
    }

    #[test]
    fn residuals_do_not_increase() {
        let (x, y) = two_blobs(400, 8, 5);
        let cfg = KernelConfig {
            num_centers: 80,
            cg_tol: 1e-12,
            ..Default::default()
        };
        let (_, report) = fit_classifier_with_report(0, &x, &y, &cfg).unwrap();
        assert!(report.residuals.len() > 2);
        for w in report.residuals.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", report.residuals);
        }
    }

    #[test]
    fn order_invariance() {
        let (x, y) = two_blobs(150, 6, 8);
        let perm: Vec<usize> = (0..150).rev().collect();
        let xp = x.select_rows(&perm);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let cfg = KernelConfig {
            num_centers: 40,
            ..Default::default()
        };
        let a = fit_classifier(0, &x, &y, &cfg).unwrap();
        let b = fit_classifier(0, &xp, &yp, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_errors() {
        let (x, y) = two_blobs(10, 3, 0);
        assert!(fit_classifier(0, &x, &y, &KernelConfig::default().with_centers(11)).is_err());
        let mut bad = x.clone();
        bad[(2, 1)] = f64::NAN;
        assert!(matches!(
            fit_classifier(0, &bad, &y, &KernelConfig::default().with_centers(5)),
            Err(Error::NonFinite(_))
        ));
        assert!(
            fit_classifier(0, &x, &[0.5; 10], &KernelConfig::default().with_centers(5)).is_err()
        );
    }

    #[test]
    fn predict_raw_cases() {
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let mut model = ClassifierModel {
            class_id: 0,
            config: KernelConfig {
                sigma: Some(0.7),
                ..Default::default()
            },
            centers: c.clone(),
            coefficients: vec![0.0],
        };
        let probe = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.7, 2.0]);
        assert_eq!(predict_raw(&model, &probe).unwrap(), vec![0.0, 0.0]);
        model.coefficients = vec![1.0];
        let out = predict_raw(&model, &probe).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        // distance 0.7 == sigma
        assert!((out[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((out[1] - 0.6065).abs() < 1e-4);
        assert!(predict_raw(&model, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn calibrate_cases() {
        assert_eq!(calibrate(0.0), 0.5);
        assert!((calibrate(9f64.ln()) - 0.9).abs() < 1e-12);
        let mut prev = 0.0;
        for i in -50..50 {
            let c = calibrate(i as f64 * 0.3);
            assert!(c > prev && (0.0..=1.0).contains(&c));
            prev = c;
        }
    }

    /// Dense ridge with unpenalized bias, solved through an explicit inverse.
    fn ridge_oracle(x: &DMatrix<f64>, t: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let n = x.nrows();
        let d = x.ncols();
        let z = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { 1.0 });
        let mut g = z.transpose() * &z;
        for i in 0..d {
            g[(i, i)] += lambda;
        }
        (g.try_inverse().unwrap() * z.transpose() * t).transpose()
    }

    #[test]
    fn refiner_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 80, 6);

        let zero = fit_refiner(0, &x, &vec![BoxDelta::default(); 80], 1e-3).unwrap();
        for i in 0..80 {
            let d = predict_deltas(&zero, x.row(i).transpose().as_slice()).unwrap();
            assert!(d.to_array().iter().all(|v| v.abs() <= 1e-6));
        }

        let w_true = random_matrix(&mut rng, 4, 6);
        let deltas: Vec<BoxDelta> = (0..80)
            .map(|i| {
                let r = &w_true * x.row(i).transpose();
                BoxDelta::from_array([r[0] + 0.1, r[1], r[2] - 0.2, r[3]])
            })
            .collect();
        let exact = fit_refiner(0, &x, &deltas, 1e-9).unwrap();
        for (i, want) in deltas.iter().enumerate() {
            let got = predict_deltas(&exact, x.row(i).transpose().as_slice()).unwrap();
            for (a, b) in got.to_array().iter().zip(want.to_array()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }

        let noisy: Vec<BoxDelta> = (0..80)
            .map(|_| BoxDelta::from_array(std::array::from_fn(|_| rng.sample(StandardNormal))))
            .collect();
        let model = fit_refiner(0, &x, &noisy, 0.5).unwrap();
        let t = DMatrix::from_fn(80, 4, |i, j| noisy[i].to_array()[j]);
        let oracle = ridge_oracle(&x, &t, 0.5);
        assert!((&model.weights - &oracle).amax() <= 1e-8);
        let again = predict_deltas(&model, &[0.3; 6]).unwrap();
        assert_eq!(again, predict_deltas(&model, &[0.3; 6]).unwrap());
        assert!(predict_deltas(&model, &[0.3; 5]).is_err());
    }

    #[test]
    fn refiner_loss_not_worse_than_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 50, 5);
        let deltas: Vec<BoxDelta> = (0..50)
            .map(|_| BoxDelta::from_array(std::array::from_fn(|_| rng.sample(StandardNormal))))
            .collect();
        let lambda = 0.3;
        let model = fit_refiner(0, &x, &deltas, lambda).unwrap();
        let loss = |w: &DMatrix<f64>| {
            let mut l = 0.0;
            for i in 0..50 {
                for k in 0..4 {
                    let p: f64 = (0..5).map(|j| w[(k, j)] * x[(i, j)]).sum::<f64>() + w[(k, 5)];
                    l += (p - deltas[i].to_array()[k]).powi(2);
                }
            }
            l + lambda
                * (0..4)
                    .flat_map(|k| (0..5).map(move |j| (k, j)))
                    .map(|(k, j)| w[(k, j)].powi(2))
                    .sum::<f64>()
        };
        assert!(loss(&model.weights) <= loss(&DMatrix::zeros(4, 6)));
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = two_blobs(30, 3, 1);
        let model = fit_classifier(2, &x, &y, &KernelConfig::default().with_centers(10)).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["class_id", "config", "centers", "coefficients"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(
            serde_json::from_str::<ClassifierModel>(&json).unwrap(),
            model
        );
    }
}
