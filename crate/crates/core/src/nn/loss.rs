//! Loss functions returning `(mean loss, gradient w.r.t. the input)`.

use ndarray::Array2;

use super::Tensor;

/// Row-wise softmax of `(n, k, 1, 1)` logits.
pub fn softmax(logits: &Tensor) -> Array2<f64> {
    let (n, k, _, _) = logits.dim();
    let mut p = Array2::zeros((n, k));
    for b in 0..n {
        let mx = (0..k).map(|j| logits[[b, j, 0, 0]]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (logits[[b, j, 0, 0]] - mx).exp();
            p[[b, j]] = e;
            z += e;
        }
        for j in 0..k {
            p[[b, j]] /= z;
        }
    }
    p
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, k, _, _) = logits.dim();
    assert_eq!(n, labels.len(), "one label per row");
    let p = softmax(logits);
    let mut grad = Tensor::zeros((n, k, 1, 1));
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} outside {k} classes");
        // log-sum-exp form: stable, and NaN logits stay NaN
        let mx = (0..k).map(|j| logits[[b, j, 0, 0]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|j| (logits[[b, j, 0, 0]] - mx).exp()).sum();
        loss += mx + z.ln() - logits[[b, y, 0, 0]];
        for j in 0..k {
            grad[[b, j, 0, 0]] = (p[[b, j]] - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// `-ln(sigmoid(a))`, stable for large |a|.
pub fn neg_log_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        (-a).exp().ln_1p()
    } else {
        -a + a.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of `(n, 1, 1, 1)` logits against 0/1 targets:
/// `-[t ln D + (1 - t) ln(1 - D)]` with `D = sigmoid(a)`.
pub fn binary_cross_entropy(logits: &Tensor, targets: &[f64]) -> (f64, Tensor) {
    let n = logits.dim().0;
    assert_eq!(n, targets.len());
    let mut grad = Tensor::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        let a = logits[[b, 0, 0, 0]];
        loss += t * neg_log_sigmoid(a) + (1.0 - t) * neg_log_sigmoid(-a);
        grad[[b, 0, 0, 0]] = (super::sigmoid(a) - t) / n as f64;
    }
    (loss / n as f64, grad)
}

/// Mean absolute error over every element.
pub fn l1(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.dim(), target.dim());
    let count = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.raw_dim());
    let mut loss = 0.0;
    ndarray::Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let d = p - t;
        loss += d.abs();
        *g = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        } / count;
    });
    (loss / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_logits_give_near_zero_ce() {
        let mut l = Tensor::zeros((1, 3, 1, 1));
        l[[0, 1, 0, 0]] = 800.0;
        let (loss, _) = cross_entropy(&l, &[1]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nan_logits_give_nan_loss() {
        let l = Tensor::from_shape_vec((1, 2, 1, 1), vec![f64::NAN, 0.0]).unwrap();
        assert!(cross_entropy(&l, &[1]).0.is_nan());
    }

    #[test]
    fn ce_matches_direct_formula() {
        let l = Tensor::from_shape_vec((2, 2, 1, 1), vec![0.3, -0.2, 1.0, 2.0]).unwrap();
        let (loss, _) = cross_entropy(&l, &[0, 0]);
        let p0 = 0.3f64.exp() / (0.3f64.exp() + (-0.2f64).exp());
        let p1 = 1f64.exp() / (1f64.exp() + 2f64.exp());
        let expect = -(p0.ln() + p1.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-14);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let l = Tensor::zeros((4, 1, 1, 1));
        let (loss, _) = binary_cross_entropy(&l, &[0.0, 1.0, 0.0, 1.0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn l1_zero_on_match() {
        let a = Tensor::from_elem((1, 1, 2, 2), 0.4);
        let (loss, g) = l1(&a, &a);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
