//! Linear-chain CRF: forward algorithm, forward-backward marginals and Viterbi.
//!
//! `transitions[a][b]` scores moving from label `a` to label `b`. There are
//! no start or stop transitions.

use crate::error::{Error, Result};

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<usize> {
    if emissions.is_empty() {
        return Err(Error::Degenerate("CRF over an empty sequence".into()));
    }
    let k = transitions.len();
    if k == 0 || transitions.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("transition matrix must be k×k".into()));
    }
    if emissions.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!("emission rows must have width {k}")));
    }
    Ok(k)
}

fn forward_table(e: &[Vec<f64>], t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = t.len();
    let mut alpha = vec![e[0].clone()];
    for row in &e[1..] {
        let prev = alpha.last().unwrap();
        let next = (0..k)
            .map(|b| row[b] + logsumexp((0..k).map(|a| prev[a] + t[a][b])))
            .collect();
        alpha.push(next);
    }
    alpha
}

fn backward_table(e: &[Vec<f64>], t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = t.len();
    let n = e.len();
    let mut beta = vec![vec![0.0; k]; n];
    for i in (0..n - 1).rev() {
        for a in 0..k {
            beta[i][a] = logsumexp((0..k).map(|b| t[a][b] + e[i + 1][b] + beta[i + 1][b]));
        }
    }
    beta
}

pub fn log_partition(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<f64> {
    check(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions);
    Ok(logsumexp(alpha.last().unwrap().iter().copied()))
}

pub fn path_score(emissions: &[Vec<f64>], transitions: &[Vec<f64>], path: &[usize]) -> Result<f64> {
    let k = check(emissions, transitions)?;
    if path.len() != emissions.len() {
        return Err(Error::Shape(format!("path length {} vs {} positions", path.len(), emissions.len())));
    }
    if let Some(bad) = path.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for k={k}")));
    }
    let mut s = emissions[0][path[0]];
    for i in 1..path.len() {
        s += transitions[path[i - 1]][path[i]] + emissions[i][path[i]];
    }
    Ok(s)
}

/// Negative log-likelihood `log Z − score(gold)`.
pub fn crf_loss(emissions: &[Vec<f64>], transitions: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    let score = path_score(emissions, transitions, gold)?;
    Ok((log_partition(emissions, transitions)? - score).max(0.0))
}

pub struct CrfGradient {
    pub nll: f64,
    pub emissions: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<f64>>,
}

/// NLL with its gradients (expected minus observed feature counts).
pub fn crf_loss_with_grad(emissions: &[Vec<f64>], transitions: &[Vec<f64>], gold: &[usize]) -> Result<CrfGradient> {
    let score = path_score(emissions, transitions, gold)?;
    let k = transitions.len();
    let n = emissions.len();
    let alpha = forward_table(emissions, transitions);
    let beta = backward_table(emissions, transitions);
    let log_z = logsumexp(alpha[n - 1].iter().copied());
    let mut de = vec![vec![0.0; k]; n];
    let mut dt = vec![vec![0.0; k]; k];
    for i in 0..n {
        for j in 0..k {
            de[i][j] = (alpha[i][j] + beta[i][j] - log_z).exp();
        }
        de[i][gold[i]] -= 1.0;
        if i + 1 < n {
            for a in 0..k {
                for b in 0..k {
                    dt[a][b] += (alpha[i][a] + transitions[a][b] + emissions[i + 1][b] + beta[i + 1][b] - log_z).exp();
                }
            }
            dt[gold[i]][gold[i + 1]] -= 1.0;
        }
    }
    Ok(CrfGradient {
        nll: (log_z - score).max(0.0),
        emissions: de,
        transitions: dt,
    })
}

/// Per-position label marginals.
pub fn crf_marginals(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = check(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions);
    let beta = backward_table(emissions, transitions);
    let log_z = logsumexp(alpha.last().unwrap().iter().copied());
    Ok((0..emissions.len())
        .map(|i| (0..k).map(|j| (alpha[i][j] + beta[i][j] - log_z).exp()).collect())
        .collect())
}

/// Viterbi decoding. Ties resolve to the lowest label id at each
/// backpointer and at the final position.
pub fn crf_decode(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k = check(emissions, transitions)?;
    let n = emissions.len();
    let mut delta = emissions[0].clone();
    let mut back = vec![vec![0usize; k]; n];
    for i in 1..n {
        let mut next = vec![0.0; k];
        for b in 0..k {
            let mut best = 0;
            let mut best_score = delta[0] + transitions[0][b];
            for a in 1..k {
                let s = delta[a] + transitions[a][b];
                if s > best_score {
                    best = a;
                    best_score = s;
                }
            }
            back[i][b] = best;
            next[b] = best_score + emissions[i][b];
        }
        delta = next;
    }
    let mut last = 0;
    for j in 1..k {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let mut path = vec![last; n];
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok(path)
}
