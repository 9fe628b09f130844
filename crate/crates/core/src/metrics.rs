//! Evaluation metrics for relative depth: rank correlation and affine-invariant errors.

use std::fmt;

use crate::error::{Error, Result};
use crate::loss::{affine_align, si_mae};
use crate::tensor::TensorMap;

fn valid_pairs(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "prediction {:?}, target {:?} and mask {:?} must match",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let mut p = Vec::new();
    let mut t = Vec::new();
    for ((&pv, &tv), &mv) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        if mv > 0.0 {
            p.push(pv);
            t.push(tv);
        }
    }
    Ok((p, t))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation over valid pixels.
pub fn srcc(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Result<f64> {
    let (p, t) = valid_pairs(pred, target, mask)?;
    if p.len() < 2 {
        return Err(Error::Data(format!("rank correlation needs at least 2 valid pixels, got {}", p.len())));
    }
    if p.iter().chain(&t).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value inside the mask".into()));
    }
    Ok(pearson(&average_ranks(&p), &average_ranks(&t)))
}

/// Affine-invariant error: p = 1 is the mean absolute aligned residual, p = 2
/// its root mean square. Both use the least-squares alignment.
pub fn aiwe(pred: &TensorMap, target: &TensorMap, mask: &TensorMap, p: u8) -> Result<f64> {
    match p {
        1 => si_mae(pred, target, mask),
        2 => {
            let fit = affine_align(pred, target, mask)?;
            let (pv, tv) = valid_pairs(pred, target, mask)?;
            let ss: f64 = pv.iter().zip(&tv).map(|(p, t)| (fit.a * p + fit.b - t).powi(2)).sum();
            Ok((ss / pv.len() as f64).sqrt())
        }
        _ => Err(Error::config(format!("AIWE order must be 1 or 2, got {p}"))),
    }
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub name: String,
    pub one_minus_srcc: f64,
    pub aiwe1: f64,
    pub aiwe2: f64,
    pub samples: usize,
}

impl MetricsRow {
    /// Metrics of a single prediction.
    pub fn single(name: &str, pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            one_minus_srcc: 1.0 - srcc(pred, target, mask)?,
            aiwe1: aiwe(pred, target, mask, 1)?,
            aiwe2: aiwe(pred, target, mask, 2)?,
            samples: 1,
        })
    }

    /// Per-sample mean of `rows`, summed in order.
    pub fn mean(name: &str, rows: &[MetricsRow]) -> Result<Self> {
        let n: usize = rows.iter().map(|r| r.samples).sum();
        if n == 0 {
            return Err(Error::Data("no samples to aggregate".into()));
        }
        let avg = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / n as f64;
        Ok(Self {
            name: name.to_string(),
            one_minus_srcc: avg(|r| r.one_minus_srcc),
            aiwe1: avg(|r| r.aiwe1),
            aiwe2: avg(|r| r.aiwe2),
            samples: n,
        })
    }

    pub const CSV_HEADER: &'static str = "model_name,one_minus_srcc,aiwe1,aiwe2,n_samples";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.name, fmt_sig(self.one_minus_srcc), fmt_sig(self.aiwe1), fmt_sig(self.aiwe2), self.samples)
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

/// Six significant digits in the style of C's `%g`.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{v:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
