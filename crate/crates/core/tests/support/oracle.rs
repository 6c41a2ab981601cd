//! Brute-force reference implementations on plain `Vec<f64>` rows, written
//! straight from the definitions with no shared code from the library.

#![allow(dead_code)]

use rand::Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

pub fn random_unit_rows(rng: &mut impl Rng, n: usize, c: usize) -> Rows {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            unit(&v)
        })
        .collect()
}

pub fn flatten(rows: &Rows) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// `w[k][m] = exp(q_k . p_m) / sum_m' exp(q_k . p_m')` and `read_k = sum_m w[k][m] p_m`.
pub fn read(queries: &Rows, items: &Rows) -> (Rows, Rows) {
    let mut weights = Vec::new();
    let mut reads = Vec::new();
    for q in queries {
        let e: Vec<f64> = items.iter().map(|p| dot(q, p).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut r = vec![0.0; q.len()];
        for (m, p) in items.iter().enumerate() {
            for i in 0..r.len() {
                r[i] += w[m] * p[i];
            }
        }
        weights.push(w);
        reads.push(r);
    }
    (reads, weights)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Nearest item by dot product; ties go to the lowest index.
pub fn nearest(queries: &Rows, items: &Rows) -> Vec<usize> {
    queries
        .iter()
        .map(|q| argmax(&items.iter().map(|p| dot(q, p)).collect::<Vec<_>>()))
        .collect()
}

/// `p_m <- normalize(p_m + sum_{k in U_m} v'_{k,m} q_k)` with `v` a softmax
/// over all queries and `v'` rescaled by its maximum over `U_m`.
pub fn update(items: &Rows, queries: &Rows) -> Rows {
    let assigned = nearest(queries, items);
    let mut out = items.clone();
    for (m, p) in items.iter().enumerate() {
        let members: Vec<usize> = (0..queries.len()).filter(|&k| assigned[k] == m).collect();
        if members.is_empty() {
            continue;
        }
        let e: Vec<f64> = queries.iter().map(|q| dot(q, p).exp()).collect();
        let z: f64 = e.iter().sum();
        let v: Vec<f64> = e.iter().map(|x| x / z).collect();
        let peak = members.iter().map(|&k| v[k]).fold(f64::MIN, f64::max);
        let mut acc = p.clone();
        for &k in &members {
            for i in 0..acc.len() {
                acc[i] += v[k] / peak * queries[k][i];
            }
        }
        out[m] = unit(&acc);
    }
    out
}

/// Weighted error over pixels of channel-major `[C, H*W]` frames:
/// `sum_ij w_ij e_ij` with `e` the per-pixel L2 error and
/// `w_ij = (1 - exp(-e_ij)) / sum (1 - exp(-e))`.
pub fn regular_score(frame: &[f64], recon: &[f64], channels: usize) -> f64 {
    let plane = frame.len() / channels;
    let mut e = vec![0.0; plane];
    for i in 0..plane {
        let mut s = 0.0;
        for c in 0..channels {
            let d = frame[c * plane + i] - recon[c * plane + i];
            s += d * d;
        }
        e[i] = s.sqrt();
    }
    let z: f64 = e.iter().map(|x| 1.0 - (-x).exp()).sum();
    if z == 0.0 {
        return 0.0;
    }
    e.iter().map(|x| (1.0 - (-x).exp()) / z * x).sum()
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

/// Mean distance from each query to its nearest item.
pub fn distance_score(queries: &Rows, items: &Rows) -> f64 {
    let near = nearest(queries, items);
    let mut s = 0.0;
    for (k, q) in queries.iter().enumerate() {
        let d: Vec<f64> = q.iter().zip(&items[near[k]]).map(|(a, b)| a - b).collect();
        s += norm(&d);
    }
    s / queries.len() as f64
}

/// `lambda (1 - g(P)) + (1 - lambda) g(D)`, where a constant PSNR scope
/// contributes nothing and a constant distance scope normalizes to zero.
pub fn abnormality(psnr: &[f64], dist: &[f64], lambda: f64) -> Vec<f64> {
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (plo, phi) = range(psnr);
    let (dlo, dhi) = range(dist);
    (0..psnr.len())
        .map(|i| {
            let p = if phi > plo { lambda * (1.0 - (psnr[i] - plo) / (phi - plo)) } else { 0.0 };
            let d = if dhi > dlo { (dist[i] - dlo) / (dhi - dlo) } else { 0.0 };
            p + (1.0 - lambda) * d
        })
        .collect()
}

/// Fraction of (abnormal, normal) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    good / pairs
}
