//! Losses over logits and features, each returning its value together with
//! the gradient needed to seed a backward sweep.

use std::collections::BTreeMap;

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = rows(logits)?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    debug_assert_eq!(out.numel(), n * c);
    Ok(out)
}

fn rows(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [n, c] if *n > 0 && *c > 0 => Ok((*n, *c)),
        s => Err(Error::Shape(format!("expected [N, C] logits, got {s:?}"))),
    }
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, c) = rows(logits)?;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = rows(logits)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &y) in grad.data_mut().chunks_mut(c).zip(labels) {
        if y >= c {
            return Err(Error::Shape(format!("label {y} out of range for {c} classes")));
        }
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
///
/// Debug builds reject inputs that are not a probability vector (entries
/// `≥ 0`, summing to 1 within `1e-6`).
pub fn entropy(p: &[f64]) -> Result<f64> {
    if cfg!(debug_assertions) {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("entropy of a non-simplex vector (sum {sum})")));
        }
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// `factor · ln C`.
pub fn entropy_threshold(classes: usize, factor: f64) -> f64 {
    factor * (classes as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyLoss {
    /// Mean entropy over kept samples, or 0 when none are kept.
    pub value: f64,
    /// Gradient with respect to the logits.
    pub grad: Tensor,
    pub entropies: Vec<f64>,
    pub kept: Vec<bool>,
}

impl EntropyLoss {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.kept.len() as f64
    }
}

/// Entropy minimization over the samples whose entropy is below `h0`
/// (all samples when `h0` is `None`), averaged over the kept samples.
pub fn entropy_loss(logits: &Tensor, h0: Option<f64>) -> Result<EntropyLoss> {
    if let Some(h) = h0 {
        if !(h > 0.0) {
            return Err(Error::Config(format!("entropy threshold must be > 0, got {h}")));
        }
    }
    let (n, c) = rows(logits)?;
    let probs = softmax(logits)?;
    let mut entropies = Vec::with_capacity(n);
    for row in probs.data().chunks(c) {
        entropies.push(entropy(row)?);
    }
    let kept: Vec<bool> = entropies.iter().map(|&h| h0.is_none_or(|t| h < t)).collect();
    let n_kept = kept.iter().filter(|&&k| k).count();
    let mut grad = Tensor::zeros(&[n, c]);
    if n_kept == 0 {
        return Ok(EntropyLoss {
            value: 0.0,
            grad,
            entropies,
            kept,
        });
    }
    let scale = 1.0 / n_kept as f64;
    let mut value = 0.0;
    for (i, (g, p)) in grad.data_mut().chunks_mut(c).zip(probs.data().chunks(c)).enumerate() {
        if !kept[i] {
            continue;
        }
        let h = entropies[i];
        value += h;
        for (gk, &pk) in g.iter_mut().zip(p) {
            // dH/dz_k = -p_k (ln p_k + H)
            if pk > 0.0 {
                *gk = -pk * (pk.ln() + h) * scale;
            }
        }
    }
    Ok(EntropyLoss {
        value: value * scale,
        grad,
        entropies,
        kept,
    })
}

/// `Σ_m mean|live_m − frozen_m|` over the given nodes, with the gradient of
/// `weight · term` with respect to each live feature map.
pub fn feature_l1(
    live: &BTreeMap<usize, Tensor>,
    frozen: &BTreeMap<usize, Tensor>,
    weight: f64,
) -> Result<(f64, BTreeMap<usize, Tensor>)> {
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for (&node, a) in live {
        let b = frozen
            .get(&node)
            .ok_or_else(|| Error::Internal(format!("frozen reference has no output for node {node}")))?;
        if a.shape() != b.shape() {
            return Err(Error::Internal(format!(
                "live and frozen outputs of node {node} differ in shape: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.numel() as f64;
        let mut g = Tensor::zeros(a.shape());
        let mut sum = 0.0;
        for ((gi, &x), &y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            let d = x - y;
            sum += d.abs();
            *gi = if d > 0.0 {
                weight / n
            } else if d < 0.0 {
                -weight / n
            } else {
                0.0
            };
        }
        value += sum / n;
        grads.insert(node, g);
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_reference_values() {
        let uniform = vec![0.1; 10];
        assert!((entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.7, 0.2, 0.1]).unwrap() - 0.801_818_3).abs() < 1e-6);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_simplex_is_rejected_in_debug() {
        assert!(matches!(entropy(&[0.5, 0.6]), Err(Error::Numeric(_))));
        assert!(matches!(entropy(&[1.2, -0.2]), Err(Error::Numeric(_))));
    }

    #[test]
    fn threshold_for_ten_classes() {
        assert!((entropy_threshold(10, 0.4) - 0.921_034).abs() < 1e-6);
    }

    #[test]
    fn confident_batch_keeps_everything_with_tiny_loss() {
        let logits = Tensor::new(vec![2, 3], vec![40.0, 0.0, 0.0, 0.0, 0.0, 40.0]).unwrap();
        let l = entropy_loss(&logits, Some(entropy_threshold(3, 0.4))).unwrap();
        assert_eq!(l.kept, vec![true, true]);
        assert!(l.value < 1e-12);
        assert!(l.grad.l2_norm() < 1e-12);
    }

    #[test]
    fn nothing_kept_means_zero_loss_and_gradient() {
        let logits = Tensor::zeros(&[3, 4]);
        let l = entropy_loss(&logits, Some(0.5)).unwrap();
        assert_eq!(l.kept_count(), 0);
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (l, g) = cross_entropy(&Tensor::zeros(&[2, 4]), &[1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.sum()).abs() < 1e-12);
    }

    #[test]
    fn entropy_loss_gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![3, 3], vec![2.0, 0.1, -1.0, 0.3, 0.2, 0.1, 4.0, -2.0, 0.5]).unwrap();
        let h0 = Some(0.8);
        let l = entropy_loss(&logits, h0).unwrap();
        assert_eq!(l.kept, vec![true, false, true]);
        let eps = 1e-6;
        for i in 0..logits.numel() {
            let mut up = logits.clone();
            up.data_mut()[i] += eps;
            let mut dn = logits.clone();
            dn.data_mut()[i] -= eps;
            let num = (entropy_loss(&up, h0).unwrap().value - entropy_loss(&dn, h0).unwrap().value) / (2.0 * eps);
            assert!((num - l.grad.data()[i]).abs() < 1e-8, "{i}: {num} vs {}", l.grad.data()[i]);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 3], vec![0.5, -0.2, 1.0, 0.0, 2.0, -1.0]).unwrap();
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.numel() {
            let mut up = logits.clone();
            up.data_mut()[i] += eps;
            let mut dn = logits.clone();
            dn.data_mut()[i] -= eps;
            let num = (cross_entropy(&up, &labels).unwrap().0 - cross_entropy(&dn, &labels).unwrap().0) / (2.0 * eps);
            assert!((num - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn feature_l1_of_constant_offset() {
        let live = BTreeMap::from([(2, Tensor::full(&[2, 3], 1.5)), (5, Tensor::full(&[4], 0.0))]);
        let frozen = BTreeMap::from([(2, Tensor::full(&[2, 3], 1.0)), (5, Tensor::full(&[4], 0.0))]);
        let (v, g) = feature_l1(&live, &frozen, 1.0).unwrap();
        assert_eq!(v, 0.5);
        assert!(g[&2].data().iter().all(|&x| x == 1.0 / 6.0));
        assert!(g[&5].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn feature_l1_shape_mismatch_is_internal() {
        let live = BTreeMap::from([(0, Tensor::zeros(&[2]))]);
        let frozen = BTreeMap::from([(0, Tensor::zeros(&[3]))]);
        assert!(matches!(feature_l1(&live, &frozen, 1.0), Err(Error::Internal(_))));
    }
}
