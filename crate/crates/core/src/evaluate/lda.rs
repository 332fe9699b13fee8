//! Linear discriminant analysis with a pooled within-class covariance, and
//! repeated split-half cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix, SeededRng};

/// Pooled-covariance Gaussian classifier.
#[derive(Clone, Debug)]
pub struct Lda {
    means: Vec<Vec<f64>>,
    log_priors: Vec<f64>,
    cov: Cholesky,
    /// Whether a ridge had to be added to the pooled covariance.
    pub regularized: bool,
}

impl Lda {
    /// Fits on rows of `x` with class ids `labels` in `0..classes`.
    pub fn fit(x: &Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        let (n, p) = x.shape();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if n <= classes {
            return Err(Error::InvalidArgument("too few samples for LDA".into()));
        }
        let mut counts = vec![0usize; classes];
        let mut means = vec![vec![0.0; p]; classes];
        for (k, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for (m, v) in means[y].iter_mut().zip(x.row(k)) {
                *m += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!("class {empty} has no samples")));
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
        let mut pooled = Matrix::zeros(p, p);
        for (k, &y) in labels.iter().enumerate() {
            let d: Vec<f64> = x.row(k).iter().zip(&means[y]).map(|(a, b)| a - b).collect();
            for i in 0..p {
                for j in 0..p {
                    pooled.set(i, j, pooled.get(i, j) + d[i] * d[j]);
                }
            }
        }
        let pooled = pooled.scale(1.0 / (n - classes) as f64);
        let (cov, regularized) = match Cholesky::new(&pooled) {
            Ok(ch) => (ch, false),
            Err(_) => {
                let lambda = 1e-6 * (pooled.trace() / p as f64).max(f64::MIN_POSITIVE);
                let mut ridge = pooled.clone();
                for i in 0..p {
                    ridge.set(i, i, ridge.get(i, i) + lambda);
                }
                (Cholesky::new(&ridge)?, true)
            }
        };
        let log_priors = counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect();
        Ok(Self {
            means,
            log_priors,
            cov,
            regularized,
        })
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let w = self.cov.solve_vec(m);
            let score = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                - 0.5 * m.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + self.log_priors[k];
            if score > best.1 {
                best = (k, score);
            }
        }
        best.0
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&k| self.predict(x.row(k)) == labels[k])
            .count();
        hits as f64 / x.rows() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaResult {
    pub mean_accuracy: f64,
    /// Standard error across repeats.
    pub stderr: f64,
    pub repeats: usize,
    /// At least one fit needed the ridge on its pooled covariance.
    pub regularized: bool,
}

/// Maps arbitrary labels to dense ids, sorted by label.
pub fn encode_labels<T: Ord + Clone>(labels: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut classes: Vec<T> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let ids = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    (ids, classes)
}

/// Repeated stratified half/half cross-validation: each repeat fits on one
/// half and scores the other, in both directions.
pub fn lda_split_half(
    features: &Matrix,
    labels: &[usize],
    rng: &mut SeededRng,
    repeats: usize,
) -> Result<LdaResult> {
    let (n, p) = features.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let (ids, classes) = encode_labels(labels);
    let k = classes.len();
    if k < 2 {
        return Err(Error::InvalidArgument("LDA needs at least two classes".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (row, &y) in ids.iter().enumerate() {
        members[y].push(row);
    }
    for (y, m) in members.iter().enumerate() {
        if m.len() / 2 < p + 1 {
            return Err(Error::InvalidArgument(format!(
                "class {} has {} samples; each half needs at least {}",
                classes[y],
                m.len(),
                p + 1
            )));
        }
    }
    let mut accs = Vec::with_capacity(repeats);
    let mut regularized = false;
    for _ in 0..repeats {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for m in &members {
            let mut idx = m.clone();
            rng.shuffle(&mut idx);
            let half = idx.len() / 2;
            a.extend_from_slice(&idx[..half]);
            b.extend_from_slice(&idx[half..]);
        }
        let mut acc = 0.0;
        for (train, test) in [(&a, &b), (&b, &a)] {
            let ytr: Vec<usize> = train.iter().map(|&i| ids[i]).collect();
            let yte: Vec<usize> = test.iter().map(|&i| ids[i]).collect();
            let lda = Lda::fit(&features.select_rows(train), &ytr, k)?;
            regularized |= lda.regularized;
            acc += 0.5 * lda.accuracy(&features.select_rows(test), &yte);
        }
        accs.push(acc);
    }
    let mean = accs.iter().sum::<f64>() / repeats as f64;
    let stderr = if repeats > 1 {
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        (var / repeats as f64).sqrt()
    } else {
        0.0
    };
    Ok(LdaResult {
        mean_accuracy: mean,
        stderr,
        repeats,
        regularized,
    })
}
