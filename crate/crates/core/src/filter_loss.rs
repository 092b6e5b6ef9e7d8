//! Mutual-information filter loss between a filter's feature maps over a batch
//! and the template bank, with its exact and approximate gradients.
//!
//! Fitness of a map `x` to a template `T` is the inner product
//! `s = sum_ij x[i,j] * T[i,j]`; `p(x|T)` is a softmax of `s` over the batch.
//! Everything is evaluated in log space with max subtraction.

use crate::error::{Error, Result};
use crate::templates::{TemplateBank, Unit};
use crate::tensor::Tensor;

/// Default constant in the per-epoch loss-weight schedule.
pub const LAMBDA_SCHEDULE_CONSTANT: f64 = 300.0;

/// Gradient norms below this leave the loss weight untouched.
const NORM_GUARD: f64 = 1e-12;

/// Scores and probabilities of one filter's maps against every template.
/// Matrices are stored map-major: entry `(x, t)` at `x * n_templates + t`.
#[derive(Debug, Clone)]
pub struct FitnessTable {
    n_maps: usize,
    n_templates: usize,
    prior: f64,
    scores: Vec<f64>,
    log_cond: Vec<f64>,
    log_z: Vec<f64>,
    log_marginal: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn fitness_table(maps: &[Tensor], bank: &TemplateBank) -> Result<FitnessTable> {
    if maps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "filter loss needs at least 2 feature maps, got {}",
            maps.len()
        )));
    }
    let side = bank.side();
    for m in maps {
        if m.shape() != [side, side] {
            return Err(Error::shape(
                "fitness_table",
                format!("map {:?} for {side}x{side} templates", m.shape()),
            ));
        }
    }
    let nt = bank.len();
    let nx = maps.len();
    let mut scores = vec![0.0; nx * nt];
    for (x, m) in maps.iter().enumerate() {
        for t in 0..nt {
            scores[x * nt + t] = m.dot(bank.template(t));
        }
    }
    let log_z: Vec<f64> = (0..nt)
        .map(|t| log_sum_exp((0..nx).map(|x| scores[x * nt + t])))
        .collect();
    let log_cond: Vec<f64> = (0..nx * nt).map(|i| scores[i] - log_z[i % nt]).collect();
    let log_prior = bank.prior().ln();
    let log_marginal = (0..nx)
        .map(|x| log_sum_exp((0..nt).map(|t| log_prior + log_cond[x * nt + t])))
        .collect();
    Ok(FitnessTable {
        n_maps: nx,
        n_templates: nt,
        prior: bank.prior(),
        scores,
        log_cond,
        log_z,
        log_marginal,
    })
}

impl FitnessTable {
    pub fn n_maps(&self) -> usize {
        self.n_maps
    }

    pub fn n_templates(&self) -> usize {
        self.n_templates
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn score(&self, x: usize, t: usize) -> f64 {
        self.scores[x * self.n_templates + t]
    }

    /// `p(x|T)`.
    pub fn conditional(&self, x: usize, t: usize) -> f64 {
        self.log_cond[x * self.n_templates + t].exp()
    }

    pub fn log_conditional(&self, x: usize, t: usize) -> f64 {
        self.log_cond[x * self.n_templates + t]
    }

    /// `log Z_T`.
    pub fn log_partition(&self, t: usize) -> f64 {
        self.log_z[t]
    }

    /// `p(x) = sum_T p(T) p(x|T)`.
    pub fn marginal(&self, x: usize) -> f64 {
        self.log_marginal[x].exp()
    }

    pub fn log_marginal(&self, x: usize) -> f64 {
        self.log_marginal[x]
    }

    /// `p(T|x) = p(T) p(x|T) / p(x)`.
    pub fn posterior(&self, x: usize, t: usize) -> f64 {
        (self.prior.ln() + self.log_conditional(x, t) - self.log_marginal[x]).exp()
    }

    /// `log(p(x|T) / p(x))`.
    fn log_ratio(&self, x: usize, t: usize) -> f64 {
        self.log_conditional(x, t) - self.log_marginal[x]
    }

    /// Negative mutual information between maps and templates.
    pub fn loss(&self) -> f64 {
        let mut mi = 0.0;
        for t in 0..self.n_templates {
            for x in 0..self.n_maps {
                mi += self.prior * self.conditional(x, t) * self.log_ratio(x, t);
            }
        }
        -mi
    }

    /// Exact gradient of [`FitnessTable::loss`] with respect to every map.
    pub fn exact_gradient(&self, bank: &TemplateBank) -> Vec<Tensor> {
        let (nx, nt) = (self.n_maps, self.n_templates);
        // d loss / d s[x,t] = -p(T) q[x,t] (r[x,t] - E_q[r[.,t]])
        let mut ds = vec![0.0; nx * nt];
        for t in 0..nt {
            let mean_r: f64 = (0..nx).map(|x| self.conditional(x, t) * self.log_ratio(x, t)).sum();
            for x in 0..nx {
                ds[x * nt + t] = -self.prior * self.conditional(x, t) * (self.log_ratio(x, t) - mean_r);
            }
        }
        let side = bank.side();
        (0..nx)
            .map(|x| {
                let mut g = Tensor::zeros(&[side, side]);
                for t in 0..nt {
                    let c = ds[x * nt + t];
                    if c == 0.0 {
                        continue;
                    }
                    for (gv, tv) in g.data_mut().iter_mut().zip(bank.template(t).data()) {
                        *gv += c * tv;
                    }
                }
                g
            })
            .collect()
    }

    /// Single-template gradient approximation for map `x` with target template
    /// `target`: `-p(T) * T * exp(s - log Z_T) * (s - log(Z_T p(x)))`.
    ///
    /// The leading minus sign makes this a descent direction for the loss (the
    /// negative mutual information).
    pub fn approx_gradient(&self, x: usize, target: usize, bank: &TemplateBank) -> Tensor {
        let s = self.score(x, target);
        let log_z = self.log_z[target];
        let q = (s - log_z).exp();
        let c = -self.prior * q * (s - log_z - self.log_marginal[x]);
        bank.template(target).scale(c)
    }
}

pub fn filter_loss(maps: &[Tensor], bank: &TemplateBank) -> Result<f64> {
    Ok(fitness_table(maps, bank)?.loss())
}

/// The three terms of `loss = -H(T) + H(T'|X) + sum_x p(T+, x) H(T+|X=x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyDecomposition {
    /// Prior entropy `H(T)`.
    pub prior_entropy: f64,
    /// Conditional entropy of the positive/negative split, `H(T'|X)`.
    pub inter_category: f64,
    /// `sum_x p(T+, x) H(T+|X=x)`.
    pub spatial: f64,
    /// Per-map summands of `spatial`.
    pub spatial_per_map: Vec<f64>,
}

impl EntropyDecomposition {
    /// `-H(T) + H(T'|X) + spatial`.
    pub fn total(&self) -> f64 {
        -self.prior_entropy + self.inter_category + self.spatial
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub fn entropy_decomposition(maps: &[Tensor], bank: &TemplateBank) -> Result<EntropyDecomposition> {
    let table = fitness_table(maps, bank)?;
    let nt = table.n_templates;
    let neg = bank.negative_index();
    let prior_entropy = -(0..nt).map(|_| plogp(table.prior)).sum::<f64>();
    let mut inter_category = 0.0;
    let mut spatial_per_map = Vec::with_capacity(table.n_maps);
    for x in 0..table.n_maps {
        let px = table.marginal(x);
        let post: Vec<f64> = (0..nt).map(|t| table.posterior(x, t)).collect();
        let p_neg = post[neg];
        let p_pos: f64 = post.iter().enumerate().filter(|&(t, _)| t != neg).map(|(_, p)| p).sum();
        inter_category -= px * (plogp(p_pos) + plogp(p_neg));
        let h_pos = if p_pos > 0.0 {
            -post
                .iter()
                .enumerate()
                .filter(|&(t, _)| t != neg)
                .map(|(_, p)| plogp(p / p_pos))
                .sum::<f64>()
        } else {
            0.0
        };
        spatial_per_map.push(px * p_pos * h_pos);
    }
    Ok(EntropyDecomposition {
        prior_entropy,
        inter_category,
        spatial: spatial_per_map.iter().sum(),
        spatial_per_map,
    })
}

/// Target template index for a map: the positive template at the map's
/// first row-major maximum when the image belongs to the filter's category,
/// the negative template otherwise.
pub fn select_target_template(map: &Tensor, is_target_category: bool, bank: &TemplateBank) -> usize {
    if is_target_category {
        Unit::from_index(map.argmax(), bank.side()).index(bank.side())
    } else {
        bank.negative_index()
    }
}

/// Category whose images activate a filter the most. `None` entries are
/// categories without images. Ties go to the lowest index.
pub fn assign_category(mean_activation: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, m) in mean_activation.iter().enumerate() {
        if let Some(m) = *m {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((c, m));
            }
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::InvalidArgument("no category has any images".into()))
}

/// `lambda_f = E|dLoss_rec/dx_f| / E|dLoss_f/dx_f| / (constant * epoch)`.
/// Keeps `previous` when the filter-loss gradient norm vanishes.
pub fn update_lambda_f(
    epoch: usize,
    mean_rec_grad_norm: f64,
    mean_filter_grad_norm: f64,
    previous: f64,
    constant: f64,
) -> f64 {
    if mean_filter_grad_norm < NORM_GUARD || epoch == 0 {
        return previous;
    }
    mean_rec_grad_norm / mean_filter_grad_norm / (constant * epoch as f64)
}

/// Per-filter filter-loss bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterLossState {
    pub filter: usize,
    pub category: Option<usize>,
    pub lambda: f64,
}

impl FilterLossState {
    pub fn new(filter: usize, lambda: f64) -> Self {
        FilterLossState {
            filter,
            category: None,
            lambda,
        }
    }
}
