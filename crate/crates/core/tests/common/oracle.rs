//! Straight-loop float64 reference implementations of the correlation
//! metric, written without the tape so they can check it.

#![allow(dead_code)]

pub fn covariance(fi: &[f64], fj: &[f64]) -> Vec<f64> {
    let d = fi.len();
    let mut mi = 0.0;
    let mut mj = 0.0;
    for k in 0..d {
        mi += fi[k];
        mj += fj[k];
    }
    mi /= d as f64;
    mj /= d as f64;
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for s in 0..d {
            out[r * d + s] = (fi[r] - mi) * (fj[s] - mj);
        }
    }
    out
}

pub fn flat_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    if aa.sqrt() < 1e-12 || bb.sqrt() < 1e-12 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

pub fn triplet(ca: &[f64], pos: &[f64], neg: &[f64]) -> f64 {
    (1.0 - flat_cosine(ca, pos)) + (1.0 + flat_cosine(ca, neg))
}

pub fn objective(batch: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> f64 {
    let mut total = 0.0;
    for (a, p, n) in batch {
        total += triplet(a, p, n);
    }
    total
}

pub fn car(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut total = 0.0;
    for (a, v) in pairs {
        total += flat_cosine(a, v);
    }
    1.0 - total / pairs.len() as f64
}
