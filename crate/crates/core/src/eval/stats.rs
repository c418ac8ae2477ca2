//! Rank correlation, least squares, divergence and agreement statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based ranks with ties assigned their average rank.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&midranks(x), &midranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub r_squared: Option<f64>,
}

impl Regression {
    pub fn coefficient(&self, column: &str) -> Option<f64> {
        self.columns.iter().position(|c| c == column).map(|i| self.beta[i])
    }
}

const RANK_TOL: f64 = 1e-10;

/// Names the columns participating in the first linear dependency of the
/// design matrix, or `None` when it has full column rank.
fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Option<Vec<String>> {
    let scale = x.column_iter().map(|c| c.norm()).fold(1.0, f64::max);
    let mut basis: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        if basis.is_empty() {
            if col.norm() <= RANK_TOL * scale {
                return Some(vec![names[j].clone()]);
            }
            basis.push(j);
            continue;
        }
        let sub = x.select_columns(&basis);
        let qr = sub.clone().qr();
        let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * &col)).unwrap();
        let resid = &col - &sub * &coef;
        if resid.norm() <= RANK_TOL * scale * (x.nrows() as f64).sqrt() {
            let mut out: Vec<String> = basis
                .iter()
                .zip(coef.iter())
                .filter(|(_, c)| c.abs() > 1e-8)
                .map(|(&b, _)| names[b].clone())
                .collect();
            out.push(names[j].clone());
            return Some(out);
        }
        basis.push(j);
    }
    None
}

/// Ordinary least squares `y ≈ intercept + X β` solved through a thin QR
/// factorization. `rows[i]` holds the regressors of observation `i`.
pub fn ols(rows: &[Vec<f64>], y: &[f64], columns: &[String]) -> Result<Regression> {
    let p = columns.len();
    if rows.len() != y.len() {
        return Err(Error::Shape(format!("{} rows vs {} responses", rows.len(), y.len())));
    }
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Shape(format!("every row needs {p} regressors")));
    }
    if rows.len() < p + 1 {
        return Err(Error::Degenerate(format!(
            "{} observations cannot determine {} coefficients",
            rows.len(),
            p + 1
        )));
    }
    let x = DMatrix::from_fn(rows.len(), p + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let mut names = vec!["intercept".to_string()];
    names.extend(columns.iter().cloned());
    if let Some(cols) = collinear_columns(&x, &names) {
        return Err(Error::RankDeficient(cols));
    }
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let coef = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &yv))
        .ok_or_else(|| Error::RankDeficient(names.clone()))?;
    let fitted = &x * &coef;
    let residuals: Vec<f64> = (&yv - fitted).iter().copied().collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(Regression {
        columns: columns.to_vec(),
        beta: coef.iter().skip(1).copied().collect(),
        intercept: coef[0],
        residuals,
        r_squared: (sst > 0.0).then(|| 1.0 - sse / sst),
    })
}

/// Added to every reference entry when the reference has a zero where the
/// model puts mass.
pub const KL_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub value: f64,
    pub smoothed: bool,
}

fn normalized(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::validation("distribution entries must be non-negative"));
    }
    let s: f64 = x.iter().sum();
    if s <= 0.0 {
        return Err(Error::Degenerate("distribution has no mass".into()));
    }
    Ok(x.iter().map(|v| v / s).collect())
}

/// `Σ p ln(p/q)` between the normalized forms of two count (or mass) vectors.
pub fn prediction_distribution_kl(model: &[f64], reference: &[f64]) -> Result<Divergence> {
    if model.len() != reference.len() {
        return Err(Error::Shape(format!("{} vs {} classes", model.len(), reference.len())));
    }
    let p = normalized(model)?;
    let mut q = normalized(reference)?;
    let smoothed = p.iter().zip(&q).any(|(a, b)| *a > 0.0 && *b == 0.0);
    if smoothed {
        log::warn!("reference distribution has empty classes; smoothing with {KL_SMOOTHING}");
        q = normalized(&q.iter().map(|v| v + KL_SMOOTHING).collect::<Vec<_>>())?;
    }
    let value = p
        .iter()
        .zip(&q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0);
    Ok(Divergence { value, smoothed })
}

/// Cohen's κ with marginal-product chance agreement; `None` when chance
/// agreement is 1.
pub fn cohens_kappa(a: &[usize], b: &[usize]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} annotations", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(None);
    }
    let k = a.iter().chain(b).max().unwrap() + 1;
    let n = a.len() as f64;
    let mut ma = vec![0.0; k];
    let mut mb = vec![0.0; k];
    let mut agree = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1.0;
        mb[y] += 1.0;
        agree += f64::from(x == y);
    }
    let po = agree / n;
    let pe: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum::<f64>() / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(None);
    }
    Ok(Some((po - pe) / (1.0 - pe)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0; 4]), None);
    }

    #[test]
    fn ols_constant_response() {
        let rows = vec![vec![0.1, 0.5], vec![0.3, 0.2], vec![0.9, 0.4], vec![0.5, 0.8]];
        let r = ols(&rows, &[0.6; 4], &["a".into(), "b".into()]).unwrap();
        assert!((r.intercept - 0.6).abs() < 1e-12);
        assert!(r.beta.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn ols_rank_deficiency_names_columns() {
        let rows = vec![vec![0.5, 0.5]; 5];
        let err = ols(&rows, &[1.0, 2.0, 3.0, 4.0, 5.0], &["a".into(), "b".into()]).unwrap_err();
        match err {
            Error::RankDeficient(cols) => assert_eq!(cols, ["intercept", "a"]),
            e => panic!("{e}"),
        }
        // simplex rows: a + b = 1 duplicates the intercept
        let rows = vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1], vec![0.0, 1.0]];
        match ols(&rows, &[1.0, 2.0, 3.0, 4.0], &["a".into(), "b".into()]).unwrap_err() {
            Error::RankDeficient(cols) => assert_eq!(cols, ["intercept", "a", "b"]),
            e => panic!("{e}"),
        }
        assert!(ols(&rows[..2], &[1.0, 2.0], &["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn kl_examples() {
        let d = prediction_distribution_kl(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((d.value - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-12);
        assert!((d.value - 0.3681).abs() < 1e-4);
        assert_eq!(prediction_distribution_kl(&[3.0, 1.0], &[6.0, 2.0]).unwrap().value, 0.0);
        let s = prediction_distribution_kl(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!(s.smoothed && s.value.is_finite() && s.value > 0.0);
    }

    #[test]
    fn kappa_table() {
        // 2×2 table: both yes 20, a yes/b no 5, a no/b yes 10, both no 15
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, n) in [(1, 1, 20), (1, 0, 5), (0, 1, 10), (0, 0, 15)] {
            for _ in 0..n {
                a.push(x);
                b.push(y);
            }
        }
        let po = 35.0 / 50.0;
        let pe = (25.0 * 30.0 + 25.0 * 20.0) / 2500.0;
        let k = cohens_kappa(&a, &b).unwrap().unwrap();
        assert!((k - (po - pe) / (1.0 - pe)).abs() < 1e-12);
        assert_eq!(cohens_kappa(&[2, 0, 1], &[2, 0, 1]).unwrap(), Some(1.0));
        assert_eq!(cohens_kappa(&[1, 1], &[1, 1]).unwrap(), None);
    }
}
