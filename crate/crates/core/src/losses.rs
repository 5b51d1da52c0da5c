//! Contrastive and ranking losses with analytic gradients.

use crate::autograd::Mat;
use crate::{Error, Result};

/// `S[i][j] = v_i · u_j`.
pub fn similarity_matrix(v: &Mat, u: &Mat) -> Result<Mat> {
    if v.ncols() != u.ncols() {
        return Err(Error::Shape(format!(
            "embedding widths differ: {} vs {}",
            v.ncols(),
            u.ncols()
        )));
    }
    Ok(v.dot(&u.t()))
}

/// Loss value and gradients with respect to its inputs.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub d_v: Mat,
    pub d_u: Mat,
    pub d_tau: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric contrastive loss with per-sample temperatures; cross terms use
/// `sqrt(tau_i * tau_j)`:
///
/// `L = -1/(2N) sum_i [log softmax_j(z_ij)|_{j=i} + log softmax_j(z_ji)|_{j=i}]`,
/// `z_ij = v_i·u_j / sqrt(tau_i tau_j)`.
pub fn dual_temperature_loss(v: &Mat, u: &Mat, tau: &[f64]) -> Result<ContrastiveOutput> {
    let n = v.nrows();
    if u.nrows() != n || tau.len() != n {
        return Err(Error::Shape(format!(
            "batch sizes differ: V {}, U {}, tau {}",
            n,
            u.nrows(),
            tau.len()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(t) = tau.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    let s = similarity_matrix(v, u)?;
    let z = Mat::from_shape_fn((n, n), |(i, j)| s[[i, j]] / (tau[i] * tau[j]).sqrt());

    let mut loss = 0.0;
    let mut p_row = Mat::zeros((n, n));
    let mut p_col = Mat::zeros((n, n));
    for i in 0..n {
        let lr = log_sum_exp(z.row(i).iter().copied());
        let lc = log_sum_exp(z.column(i).iter().copied());
        loss += (lr - z[[i, i]]) + (lc - z[[i, i]]);
        for j in 0..n {
            p_row[[i, j]] = (z[[i, j]] - lr).exp();
            p_col[[j, i]] = (z[[j, i]] - lc).exp();
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    loss *= scale;

    // dL/dz
    let mut gz = (&p_row + &p_col) * scale;
    for i in 0..n {
        gz[[i, i]] -= 2.0 * scale;
    }
    let gs = Mat::from_shape_fn((n, n), |(i, j)| gz[[i, j]] / (tau[i] * tau[j]).sqrt());
    let d_v = gs.dot(u);
    let d_u = gs.t().dot(v);
    let mut d_tau = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let g = gz[[i, j]] * -0.5 * z[[i, j]];
            d_tau[i] += g / tau[i];
            d_tau[j] += g / tau[j];
        }
    }
    Ok(ContrastiveOutput { loss, d_v, d_u, d_tau })
}

/// Mean of the two directional InfoNCE losses at a single temperature.
pub fn symmetric_infonce(v: &Mat, u: &Mat, temperature: f64) -> Result<f64> {
    let s = similarity_matrix(v, u)? / temperature;
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::Shape(format!("expected square similarities, got {:?}", s.dim())));
    }
    let mut v2t = 0.0;
    let mut t2v = 0.0;
    for i in 0..n {
        v2t += log_sum_exp(s.row(i).iter().copied()) - s[[i, i]];
        t2v += log_sum_exp(s.column(i).iter().copied()) - s[[i, i]];
    }
    Ok((v2t + t2v) / (2.0 * n as f64))
}

/// Multi-instance max-margin ranking loss over both retrieval directions.
///
/// For each query row with at least one positive and one negative, the hinge
/// `max(0, margin - S[q][p] + S[q][n])` is averaged over its (p, n) pairs;
/// queries are averaged per direction and the two directions averaged.
/// Queries without a positive (or negative) are excluded.
pub fn max_margin_loss(s: &Mat, relevance: &Mat, margin: f64) -> Result<(f64, Mat)> {
    if s.dim() != relevance.dim() {
        return Err(Error::Shape(format!(
            "similarity {:?} vs relevance {:?}",
            s.dim(),
            relevance.dim()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Domain(format!("margin must be positive, got {margin}")));
    }
    let mut grad = Mat::zeros(s.dim());
    let mut total = 0.0;
    let mut directions = 0usize;
    for transposed in [false, true] {
        let (rows, cols) = if transposed {
            (s.ncols(), s.nrows())
        } else {
            (s.nrows(), s.ncols())
        };
        let at = |q: usize, c: usize| if transposed { (c, q) } else { (q, c) };
        let mut per_query = Vec::new();
        for q in 0..rows {
            let pos: Vec<usize> = (0..cols).filter(|&c| relevance[at(q, c)] > 0.5).collect();
            let neg: Vec<usize> = (0..cols).filter(|&c| relevance[at(q, c)] <= 0.5).collect();
            if !pos.is_empty() && !neg.is_empty() {
                per_query.push((q, pos, neg));
            }
        }
        if per_query.is_empty() {
            continue;
        }
        directions += 1;
        let nq = per_query.len() as f64;
        let mut dir_loss = 0.0;
        for (q, pos, neg) in &per_query {
            let w = 1.0 / (nq * (pos.len() * neg.len()) as f64);
            for &p in pos {
                for &n in neg {
                    let h = margin - s[at(*q, p)] + s[at(*q, n)];
                    if h > 0.0 {
                        dir_loss += w * h;
                        grad[at(*q, p)] -= w;
                        grad[at(*q, n)] += w;
                    }
                }
            }
        }
        total += dir_loss;
    }
    if directions == 0 {
        return Ok((0.0, grad));
    }
    let k = directions as f64;
    Ok((total / k, grad / k))
}
