//! Elementwise activations, softmax and the two classification losses.

use crate::error::{Error, Result};
use crate::numcore::Array;

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: &Array) -> Array {
    x.map(sigmoid_scalar)
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    if axis >= x.ndim() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for {}-d array",
            x.ndim()
        )));
    }
    Ok(softmax_unchecked(x, axis))
}

pub(crate) fn softmax_unchecked(x: &Array, axis: usize) -> Array {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(src[at(j)]);
            }
            let mut z = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Array::from_parts(x.shape().to_vec(), out)
}

fn check_labels(op: &'static str, logits: &Array, labels: &Array) -> Result<()> {
    if logits.shape() != labels.shape() {
        return Err(Error::shape(op, format!("{:?}", logits.shape()), format!("{:?}", labels.shape())));
    }
    Ok(())
}

/// Mean over all entries of the stable binary cross-entropy on logits.
pub fn sigmoid_cross_entropy(logits: &Array, labels: &Array) -> Result<f64> {
    check_labels("sigmoid_cross_entropy", logits, labels)?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| softplus(z) - z * y)
        .sum();
    Ok(total / logits.len() as f64)
}

/// Softmax cross-entropy against each label row normalized to sum 1.
///
/// Averaged over rows. Every row needs at least one positive label.
pub fn smoothed_softmax_loss(logits: &Array, labels: &Array) -> Result<f64> {
    check_labels("smoothed_softmax_loss", logits, labels)?;
    let v = logits.cols();
    let n = logits.rows();
    let mut total = 0.0;
    for r in 0..n {
        let z = logits.row(r);
        let y = labels.row(r);
        let mass: f64 = y.iter().sum();
        if mass <= 0.0 {
            return Err(Error::InvalidArgument(format!("label row {r} has no positive label")));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&zi| (zi - m).exp()).sum::<f64>().ln();
        let dot: f64 = (0..v).map(|j| y[j] / mass * z[j]).sum();
        total += lse - dot;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_fixed_points() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(50.0) - 1.0).abs() <= 1e-15);
        // exp(-0.3) = 0.740818220681717866..., so 1/(1+e) = 0.574442516811659...
        assert!((sigmoid_scalar(0.3) - 0.574_442_516_811_659_9).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let u = softmax(&Array::row_vector(vec![0.0; 3]), 1).unwrap();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Array::row_vector(vec![1000.0, 0.0]), 1).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
        assert!(softmax(&u, 2).is_err());
    }

    #[test]
    fn softmax_one_two_three() {
        let s = softmax(&Array::row_vector(vec![1.0, 2.0, 3.0]), 1).unwrap();
        let e: Vec<f64> = [1.0_f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, ei) in s.data().iter().zip(&e) {
            assert!((p - ei / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_axis0_columns_sum_to_one() {
        let x = Array::new(vec![3, 2], vec![0.1, -2.0, 3.0, 0.5, -1.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for c in 0..2 {
            let col: f64 = (0..3).map(|r| s.get(r, c)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let z = Array::zeros(vec![2, 3]);
        let y = Array::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = sigmoid_cross_entropy(&z, &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let big = Array::full(vec![1, 1], 50.0);
        assert!(sigmoid_cross_entropy(&big, &Array::full(vec![1, 1], 1.0)).unwrap() < 1e-20);
        assert!(sigmoid_cross_entropy(&z, &Array::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let z = Array::new(vec![2, 3], vec![0.3, -1.2, 2.5, -0.7, 0.05, 1.9]).unwrap();
        let y = Array::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let naive: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&zi, &yi)| {
                let s = 1.0 / (1.0 + (-zi).exp());
                -yi * s.ln() - (1.0 - yi) * (1.0 - s).ln()
            })
            .sum::<f64>()
            / 6.0;
        assert!((sigmoid_cross_entropy(&z, &y).unwrap() - naive).abs() < 1e-14);
    }

    #[test]
    fn smoothed_softmax_cases() {
        // two positives, uniform logits over four classes -> ln 4
        let z = Array::zeros(vec![1, 4]);
        let y = Array::row_vector(vec![1.0, 0.0, 1.0, 0.0]);
        assert!((smoothed_softmax_loss(&z, &y).unwrap() - 4f64.ln()).abs() < 1e-15);

        // single positive reduces to ordinary softmax cross-entropy
        let z = Array::row_vector(vec![0.2, -1.0, 2.0]);
        let y = Array::row_vector(vec![0.0, 0.0, 1.0]);
        let p = softmax(&z, 1).unwrap();
        assert!((smoothed_softmax_loss(&z, &y).unwrap() + p.data()[2].ln()).abs() < 1e-14);

        let err = smoothed_softmax_loss(&z, &Array::zeros(vec![1, 3]));
        assert!(err.is_err());
    }

    #[test]
    fn smoothed_softmax_matches_normalize_then_ce() {
        let z = Array::new(vec![2, 3], vec![0.4, -0.3, 1.1, 2.0, 0.0, -1.5]).unwrap();
        let y = Array::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let mut oracle = 0.0;
        for r in 0..2 {
            let e: Vec<f64> = z.row(r).iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            let mass: f64 = y.row(r).iter().sum();
            for j in 0..3 {
                oracle -= y.get(r, j) / mass * (e[j] / s).ln();
            }
        }
        oracle /= 2.0;
        assert!((smoothed_softmax_loss(&z, &y).unwrap() - oracle).abs() < 1e-14);
    }
}
