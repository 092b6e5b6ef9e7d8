//! Spatial part templates: one positive template per feature-map unit plus a
//! single all-negative template.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default template decay rate.
pub const DEFAULT_BETA: f64 = 4.0;

/// Default template magnitude for an `L x L` map, `0.5 / L^2`.
pub fn default_tau(side: usize) -> f64 {
    0.5 / (side * side) as f64
}

/// Zero-based coordinate of a unit in an `L x L` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Unit {
    pub row: usize,
    pub col: usize,
}

impl Unit {
    pub fn new(row: usize, col: usize) -> Self {
        Unit { row, col }
    }

    pub fn from_index(index: usize, side: usize) -> Self {
        Unit::new(index / side, index % side)
    }

    pub fn index(&self, side: usize) -> usize {
        self.row * side + self.col
    }

    pub fn l1(&self, other: &Unit) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

/// `tau * max(1 - beta * |[i,j] - mu|_1 / L, -1)` for every unit.
pub fn positive_template(mu: Unit, side: usize, tau: f64, beta: f64) -> Result<Tensor> {
    if side == 0 || mu.row >= side || mu.col >= side {
        return Err(Error::InvalidArgument(format!(
            "template peak {mu:?} outside {side}x{side} map"
        )));
    }
    check_params(tau, beta)?;
    Ok(Tensor::from_fn(&[side, side], |i| {
        let d = Unit::from_index(i, side).l1(&mu) as f64;
        tau * (1.0 - beta * d / side as f64).max(-1.0)
    }))
}

pub fn negative_template(side: usize, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(Tensor::full(&[side, side], -tau))
}

fn check_params(tau: f64, beta: f64) -> Result<()> {
    if !(tau > 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau and beta must be positive, got tau={tau} beta={beta}"
        )));
    }
    Ok(())
}

/// The `L^2 + 1` templates with a uniform prior. Template `k < L^2` peaks at
/// `Unit::from_index(k, L)`; template `L^2` is the negative one.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    side: usize,
    tau: f64,
    beta: f64,
    templates: Vec<Tensor>,
    /// Positive part `max(T_mu, 0)` of every positive template, used as masks.
    masks: Vec<Tensor>,
}

impl TemplateBank {
    pub fn new(side: usize, tau: f64, beta: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidArgument("template side must be >= 1".into()));
        }
        check_params(tau, beta)?;
        let mut templates = (0..side * side)
            .map(|k| positive_template(Unit::from_index(k, side), side, tau, beta))
            .collect::<Result<Vec<_>>>()?;
        let masks = templates.iter().map(|t| t.map(|v| v.max(0.0))).collect();
        templates.push(negative_template(side, tau)?);
        Ok(TemplateBank {
            side,
            tau,
            beta,
            templates,
            masks,
        })
    }

    pub fn with_defaults(side: usize) -> Result<Self> {
        Self::new(side, default_tau(side), DEFAULT_BETA)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of templates, `L^2 + 1`.
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_positive(&self) -> usize {
        self.side * self.side
    }

    pub fn negative_index(&self) -> usize {
        self.side * self.side
    }

    pub fn template(&self, k: usize) -> &Tensor {
        &self.templates[k]
    }

    pub fn templates(&self) -> &[Tensor] {
        &self.templates
    }

    pub fn positive(&self, mu: Unit) -> &Tensor {
        &self.templates[mu.index(self.side)]
    }

    pub fn negative(&self) -> &Tensor {
        &self.templates[self.negative_index()]
    }

    pub fn mask(&self, mu: Unit) -> &Tensor {
        &self.masks[mu.index(self.side)]
    }

    pub fn prior(&self) -> f64 {
        1.0 / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn peak_value_is_tau() {
        let t = positive_template(Unit::new(2, 5), 8, 0.3, 4.0).unwrap();
        assert_eq!(t.get(&[2, 5]), 0.3);
    }

    #[test]
    fn far_corner_is_clamped() {
        // 1 - 4 * 14 / 8 = -6, clamped to -1
        let tau = default_tau(8);
        let t = positive_template(Unit::new(0, 0), 8, tau, 4.0).unwrap();
        assert_eq!(t.get(&[7, 7]), -tau);
    }

    #[test]
    fn toy_bank_has_ten_templates() {
        let bank = TemplateBank::with_defaults(3).unwrap();
        assert_eq!(bank.len(), 10);
        assert_eq!(bank.num_positive(), 9);
    }

    #[test]
    fn negative_template_is_constant() {
        let t = negative_template(3, 0.056).unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        assert!(t.data().iter().all(|&v| v == -0.056));
        assert!((t.sum() + 9.0 * 0.056).abs() < 1e-15);
        let x = Tensor::from_fn(&[3, 3], |i| (i * i) as f64 * 0.1);
        assert!((x.dot(&t) + 0.056 * x.sum()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_peak_rejected() {
        assert!(positive_template(Unit::new(3, 0), 3, 0.1, 4.0).is_err());
        assert!(positive_template(Unit::new(0, 0), 3, 0.0, 4.0).is_err());
        assert!(positive_template(Unit::new(0, 0), 3, 0.1, -1.0).is_err());
        assert!(negative_template(3, -0.1).is_err());
    }

    #[test]
    fn prior_sums_to_one() {
        let bank = TemplateBank::with_defaults(6).unwrap();
        assert!((bank.prior() * bank.len() as f64 - 1.0).abs() < 1e-12);
        assert_eq!(bank.prior(), 1.0 / 37.0);
    }

    proptest! {
        #[test]
        fn bank_invariants(side in 1usize..10, tau in 0.01f64..2.0, beta in 0.5f64..8.0) {
            let bank = TemplateBank::new(side, tau, beta).unwrap();
            prop_assert_eq!(bank.num_positive(), side * side);
            let mut peaks = std::collections::BTreeSet::new();
            for k in 0..bank.num_positive() {
                let t = bank.template(k);
                prop_assert!(t.data().iter().all(|&v| v >= -tau && v <= tau));
                let mu = Unit::from_index(k, side);
                prop_assert_eq!(t.get(&[mu.row, mu.col]), tau);
                let maxima = t.data().iter().filter(|&&v| v == tau).count();
                prop_assert_eq!(maxima, 1);
                prop_assert_eq!(t.argmax(), k);
                peaks.insert(t.argmax());
            }
            prop_assert_eq!(peaks.len(), side * side);
            prop_assert!(bank.negative().data().iter().all(|&v| v == -tau));
        }

        #[test]
        fn one_hot_score_peaks_at_its_unit(side in 2usize..9, idx in 0usize..81, c in 0.1f64..10.0) {
            let idx = idx % (side * side);
            let bank = TemplateBank::with_defaults(side).unwrap();
            let mut x = Tensor::zeros(&[side, side]);
            x.data_mut()[idx] = c;
            let best = (0..bank.num_positive())
                .max_by(|&a, &b| x.dot(bank.template(a)).total_cmp(&x.dot(bank.template(b))).then(b.cmp(&a)))
                .unwrap();
            prop_assert_eq!(best, idx);
        }
    }
}
