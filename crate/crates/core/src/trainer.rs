//! Explainer training: reconstruction (or classification) loss, the mixing
//! prior `-eta log p` and the per-filter losses, optimized with SGD.

use log::{debug, info, warn};
use rand::seq::SliceRandom;

use crate::autodiff::kernels::sigmoid;
use crate::autodiff::Graph;
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::explainer::{
    mean_positive_mass, mixed_filter_map, positive_mass, scales_for, ExplainerNet, NormLayerState, TrackNodes, W_P,
};
use crate::filter_loss::{
    assign_category, fitness_table, select_target_template, update_lambda_f, LAMBDA_SCHEDULE_CONSTANT,
};
use crate::optim::{accumulate_grads, scale_grads, Sgd};
use crate::performer::{FeatureDump, PerformerNet};
use crate::rng;
use crate::synth::SynthSample;
use crate::tensor::Tensor;

/// Numerator of the reconstruction weight `lambda_l = 5e4 / E|relu(x*)|`.
pub const LAMBDA_L_NUMERATOR: f64 = 5e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Reconstruction,
    /// Cross-entropy through the frozen performer head replaces reconstruction.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryMode {
    /// Positive images carry label 1, negatives label 0.
    Single,
    /// Labels `1..=K` are object categories, 0 is background.
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterGradient {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    /// `lambda_(fc1), lambda_(fc2)`; computed from features when `None`.
    pub lambda_l: Option<(f64, f64)>,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub category_mode: CategoryMode,
    pub filter_gradient: FilterGradient,
    pub filter_loss: bool,
    pub positive_only_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 1e5,
            lambda_l: None,
            lr: 1e-7,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 42,
            mode: TrainMode::Reconstruction,
            category_mode: CategoryMode::Single,
            filter_gradient: FilterGradient::Approximate,
            filter_loss: true,
            positive_only_alpha: false,
        }
    }
}

impl TrainConfig {
    /// Default step size for a mode. Reconstruction targets are weighted by
    /// lambda_l in the thousands, cross-entropy is O(1).
    pub fn default_lr(mode: TrainMode) -> f64 {
        match mode {
            TrainMode::Reconstruction => 1e-7,
            TrainMode::Classification => 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if let Some((a, b)) = self.lambda_l {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::Config(format!("lambda_l must be positive, got ({a}, {b})")));
            }
        }
        if self.batch_size < 8 {
            return Err(Error::Config(format!(
                "batch_size must be at least 8, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "bad lr {} or momentum {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub recon_fc1: f64,
    pub recon_fc2: f64,
    pub neg_log_p: f64,
    /// `sum_f lambda_f * Loss_f`.
    pub filter_loss_total: f64,
    /// Classification mode only.
    pub cross_entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("cross_entropy", self.cross_entropy),
            ("recon_fc1", self.recon_fc1),
            ("recon_fc2", self.recon_fc2),
            ("neg_log_p", self.neg_log_p),
            ("filter_loss_total", self.filter_loss_total),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// `5e4 / mean_x |max(x, 0)|`.
pub fn compute_lambda_l<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in features {
        sum += f.data().iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("lambda_l needs at least one feature".into()));
    }
    let mean = sum / n as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument("features have zero mean norm".into()));
    }
    Ok(LAMBDA_L_NUMERATOR / mean)
}

/// Per-image objective with the filter losses given as `(lambda_f, Loss_f)`.
pub fn total_loss(
    x_fcdec: (&Tensor, &Tensor),
    x_star: (&Tensor, &Tensor),
    p: f64,
    filter_losses: &[(f64, f64)],
    lambda_l: (f64, f64),
    eta: f64,
) -> LossBreakdown {
    let sq = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let recon_fc1 = sq(x_fcdec.0, x_star.0);
    let recon_fc2 = sq(x_fcdec.1, x_star.1);
    let neg_log_p = -p.ln();
    let filter_loss_total: f64 = filter_losses.iter().map(|(l, f)| l * f).sum();
    LossBreakdown {
        recon_fc1,
        recon_fc2,
        neg_log_p,
        filter_loss_total,
        cross_entropy: 0.0,
        total: lambda_l.0 * recon_fc1 + lambda_l.1 * recon_fc2 + eta * neg_log_p + filter_loss_total,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Means over the epoch's images (`neg_log_p` and filter terms per step).
    pub breakdown: LossBreakdown,
    pub p: f64,
    pub mean_lambda_interp1: f64,
    pub mean_lambda_interp2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub lambda_l: (f64, f64),
    pub epochs: Vec<EpochMetrics>,
    /// `p` after every optimizer step.
    pub p_trajectory: Vec<f64>,
}

/// Running statistics over one epoch.
struct EpochStats {
    rec_norm: [Vec<f64>; 2],
    filt_norm: [Vec<f64>; 2],
    norm_count: usize,
    /// `[layer][filter][category] -> (sum of activation mass, count)`.
    category_mass: [Vec<Vec<(f64, usize)>>; 2],
}

impl EpochStats {
    fn new(d: usize, categories: usize) -> Self {
        EpochStats {
            rec_norm: [vec![0.0; d], vec![0.0; d]],
            filt_norm: [vec![0.0; d], vec![0.0; d]],
            norm_count: 0,
            category_mass: [vec![vec![(0.0, 0); categories]; d], vec![vec![(0.0, 0); categories]; d]],
        }
    }
}

fn channel_norms(t: &Tensor) -> Vec<f64> {
    let c = t.shape()[2];
    let mut n = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        n[i % c] += v * v;
    }
    n.into_iter().map(f64::sqrt).collect()
}

fn stack_channels(channels: &[Tensor]) -> Tensor {
    let s = channels[0].shape()[0];
    let c = channels.len();
    let mut out = Tensor::zeros(&[s, s, c]);
    for (k, ch) in channels.iter().enumerate() {
        for (p, &v) in ch.data().iter().enumerate() {
            out.data_mut()[p * c + k] = v;
        }
    }
    out
}

/// Batch statistics during warm-up, afterwards the larger of batch and
/// running magnitude so a channel waking up cannot explode.
fn training_scales(norm: &NormLayerState, batch: &[f64]) -> Vec<f64> {
    if norm.in_warmup() {
        return scales_for(batch);
    }
    let a: Vec<f64> = norm.alpha.iter().zip(batch).map(|(r, b)| r.max(*b)).collect();
    scales_for(&a)
}

/// Explainer trainer holding the frozen performer's features.
pub struct Trainer {
    pub cfg: TrainConfig,
    dumps: Vec<FeatureDump>,
    pub net: ExplainerNet,
    pub lambda_l: (f64, f64),
    opt: Sgd,
    num_categories: usize,
    lambda_ready: bool,
    pub p_trajectory: Vec<f64>,
}

/// Objective, gradient and statistics of one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// Per-image terms are batch means; the filter term is batch-level.
    pub breakdown: LossBreakdown,
    pub grads: Vec<Option<Tensor>>,
    /// Mean per-image norm of the upstream gradient at each filter map.
    pub rec_norm: [Vec<f64>; 2],
    /// Mean per-image norm of the filter-loss gradient at each filter map.
    pub filt_norm: [Vec<f64>; 2],
    /// Batch magnitudes of the interpretable and ordinary norm layers.
    pub alpha: Option<(Vec<f64>, Vec<f64>)>,
    category_mass: [Vec<Vec<(f64, usize)>>; 2],
}

impl Trainer {
    pub fn new(performer: &PerformerNet, samples: &[SynthSample], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("explainer training needs samples".into()));
        }
        let dumps = samples
            .iter()
            .map(|s| performer.extract_sample(s))
            .collect::<Result<Vec<_>>>()?;
        let net = ExplainerNet::from_performer(performer, cfg.seed)?;
        Self::with_net(dumps, net, cfg)
    }

    /// Trainer over precomputed features and an existing explainer.
    pub fn with_net(dumps: Vec<FeatureDump>, mut net: ExplainerNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let num_classes = net.config.num_classes;
        if let Some(d) = dumps.iter().find(|d| d.label >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {} of {} out of range",
                d.label, d.sample_id
            )));
        }
        let lambda_l = match cfg.lambda_l {
            Some(l) => l,
            None => (
                compute_lambda_l(dumps.iter().map(|d| &d.fc6))?,
                compute_lambda_l(dumps.iter().map(|d| &d.fc7))?,
            ),
        };
        net.set_positive_only_alpha(cfg.positive_only_alpha);
        let num_categories = match cfg.category_mode {
            CategoryMode::Single => 1,
            CategoryMode::Multi => num_classes.saturating_sub(1).max(1),
        };
        let opt = Sgd::new(cfg.lr, cfg.momentum);
        Ok(Trainer {
            cfg,
            dumps,
            net,
            lambda_l,
            opt,
            num_categories,
            lambda_ready: false,
            p_trajectory: Vec::new(),
        })
    }

    pub fn dumps(&self) -> &[FeatureDump] {
        &self.dumps
    }

    fn is_positive(&self, label: usize) -> bool {
        label != 0
    }

    /// Category index `0..K` of a positive label.
    fn category_of(&self, label: usize) -> Option<usize> {
        match (label, self.cfg.category_mode) {
            (0, _) => None,
            (_, CategoryMode::Single) => Some(0),
            (l, CategoryMode::Multi) => Some(l - 1),
        }
    }

    fn is_target(&self, label: usize, category: Option<usize>) -> bool {
        let c = self.category_of(label);
        c.is_some() && c == category.or(Some(0))
    }

    /// Initial filter categories from the first images.
    fn calibrate(&mut self) -> Result<()> {
        let n = self.dumps.len().min(256);
        let mut stats = EpochStats::new(self.net.config.channels, self.num_categories);
        for i in 0..n {
            let d = &self.dumps[i];
            let Some(c) = self.category_of(d.label) else { continue };
            let out = self.net.forward_values(&d.target)?;
            for (layer, m) in [positive_mass(&out.interp1), positive_mass(&out.interp2)]
                .iter()
                .enumerate()
            {
                for (f, &v) in m.iter().enumerate() {
                    let e = &mut stats.category_mass[layer][f][c];
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        self.refresh_categories(&stats)
    }

    fn refresh_categories(&mut self, stats: &EpochStats) -> Result<()> {
        for layer in 0..2 {
            for f in 0..self.net.config.channels {
                let means: Vec<Option<f64>> = stats.category_mass[layer][f]
                    .iter()
                    .map(|&(s, n)| (n > 0).then(|| s / n as f64))
                    .collect();
                let category = match self.cfg.category_mode {
                    CategoryMode::Single => 0,
                    CategoryMode::Multi => match assign_category(&means) {
                        Ok(c) => c,
                        Err(_) => continue,
                    },
                };
                let states = if layer == 0 {
                    &mut self.net.filters_interp1
                } else {
                    &mut self.net.filters_interp2
                };
                states[f].category = Some(category);
            }
        }
        Ok(())
    }

    fn refresh_lambdas(&mut self, epoch: usize, stats: &EpochStats) {
        if stats.norm_count == 0 {
            return;
        }
        let n = stats.norm_count as f64;
        for layer in 0..2 {
            let states = if layer == 0 {
                &mut self.net.filters_interp1
            } else {
                &mut self.net.filters_interp2
            };
            for (f, st) in states.iter_mut().enumerate() {
                st.lambda = update_lambda_f(
                    epoch,
                    stats.rec_norm[layer][f] / n,
                    stats.filt_norm[layer][f] / n,
                    st.lambda,
                    LAMBDA_SCHEDULE_CONSTANT,
                );
            }
        }
    }

    /// Objective and gradient of one batch. With `batch_norm` the norm layers
    /// use the batch's own magnitudes, otherwise the running averages.
    pub fn evaluate(&self, batch: &[usize], batch_norm: bool) -> Result<BatchEval> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::InvalidArgument("batch needs at least two images".into()));
        }
        let d = self.net.config.channels;
        let p = self.net.p();
        let w_p_id = self.net.param(W_P);

        // Encoder tracks for every image, then norm-layer magnitudes.
        let mut tracks = Vec::with_capacity(b);
        for &i in batch {
            let mut g = Graph::new(&self.net.params);
            let t = self.net.encoder_tracks(&mut g, &self.dumps[i].target)?;
            tracks.push((g, t));
        }
        let eligible: Vec<usize> = (0..b)
            .filter(|&x| !self.net.norm_interp.positive_only || self.is_positive(self.dumps[batch[x]].label))
            .collect();
        let batch_alpha = |pick: &dyn Fn(&TrackNodes) -> NodeId| -> Option<Vec<f64>> {
            mean_positive_mass(eligible.iter().map(|&x| tracks[x].0.value(pick(&tracks[x].1))))
        };
        let alpha = batch_alpha(&|t| t.pooled_interp).zip(batch_alpha(&|t| t.pooled_ordin));
        let (s_interp, s_ordin) = match (&alpha, batch_norm) {
            (Some((ai, ao)), true) => (
                training_scales(&self.net.norm_interp, ai),
                training_scales(&self.net.norm_ordin, ao),
            ),
            _ => (self.net.norm_interp.scales(), self.net.norm_ordin.scales()),
        };

        // Seed of each graph is the per-image objective.
        let mut graphs = Vec::with_capacity(b);
        let mut per_image = Vec::with_capacity(b);
        let mut bd = LossBreakdown::default();
        for (x, (mut g, t)) in tracks.into_iter().enumerate() {
            let dump = &self.dumps[batch[x]];
            let nodes = self.net.encoder_mix(&mut g, t, s_interp.clone(), s_ordin.clone())?;
            let nlp = g.neg_log_sigmoid(w_p_id)?;
            let seed = match self.cfg.mode {
                TrainMode::Reconstruction => {
                    let e1 = g.squared_error(nodes.fc_dec_1, dump.fc6.clone())?;
                    let e2 = g.squared_error(nodes.fc_dec_2, dump.fc7.clone())?;
                    bd.recon_fc1 += g.value(e1).item() / b as f64;
                    bd.recon_fc2 += g.value(e2).item() / b as f64;
                    g.weighted_sum(vec![(e1, self.lambda_l.0), (e2, self.lambda_l.1), (nlp, self.cfg.eta)])?
                }
                TrainMode::Classification => {
                    let logits = self.net.head_logits(&mut g, nodes.fc_dec_2)?;
                    let ce = g.softmax_cross_entropy(logits, dump.label)?;
                    bd.cross_entropy += g.value(ce).item() / b as f64;
                    g.weighted_sum(vec![(ce, 1.0), (nlp, self.cfg.eta)])?
                }
            };
            bd.neg_log_p = g.value(nlp).item();
            per_image.push(seed);
            graphs.push((g, nodes));
        }

        // Filter-loss gradients w.r.t. the maps they attach to, per image as [L, L, D].
        let mut injected: Vec<[Option<Tensor>; 2]> = vec![[None, None]; b];
        let mut w_p_filter_grad = 0.0;
        let mut filt_norm = [vec![0.0; d], vec![0.0; d]];
        if self.cfg.filter_loss {
            for layer in 0..2 {
                let mut grads_per_image: Vec<Vec<Tensor>> = vec![Vec::with_capacity(d); b];
                for f in 0..d {
                    let state = if layer == 0 {
                        &self.net.filters_interp1[f]
                    } else {
                        &self.net.filters_interp2[f]
                    };
                    let mut diffs = Vec::with_capacity(b);
                    let mut maps = Vec::with_capacity(b);
                    for (g, nodes) in &graphs {
                        if layer == 0 {
                            maps.push(g.value(nodes.interp1).channel(f));
                        } else {
                            let xi = g.value(nodes.interp2_masked).channel(f).map(|v| v * s_interp[f]);
                            let xo = g.value(nodes.ordin).channel(f).map(|v| v * s_ordin[f]);
                            maps.push(mixed_filter_map(&xi, &xo, p));
                            let diff = xi.data().iter().zip(xo.data()).map(|(a, b)| a - b).collect();
                            diffs.push(Tensor::new(xi.shape().to_vec(), diff)?);
                        }
                    }
                    let table = fitness_table(&maps, &self.net.bank)?;
                    bd.filter_loss_total += state.lambda * table.loss();
                    let grads: Vec<Tensor> = match self.cfg.filter_gradient {
                        FilterGradient::Exact => table.exact_gradient(&self.net.bank),
                        FilterGradient::Approximate => batch
                            .iter()
                            .enumerate()
                            .map(|(x, &i)| {
                                let target = self.is_target(self.dumps[i].label, state.category);
                                let t = select_target_template(&maps[x], target, &self.net.bank);
                                table.approx_gradient(x, t, &self.net.bank)
                            })
                            .collect(),
                    };
                    for (x, gx) in grads.into_iter().enumerate() {
                        let gx = if layer == 0 {
                            gx
                        } else {
                            // The ordinary track receives nothing.
                            w_p_filter_grad += state.lambda * gx.dot(&diffs[x]) * p * (1.0 - p);
                            gx.map(|v| v * p * s_interp[f])
                        };
                        filt_norm[layer][f] += gx.norm() / b as f64;
                        grads_per_image[x].push(gx);
                    }
                }
                for (x, chans) in grads_per_image.into_iter().enumerate() {
                    injected[x][layer] = Some(stack_channels(&chans));
                }
            }
        }
        let lambda_fc = match self.cfg.mode {
            TrainMode::Reconstruction => self.lambda_l,
            TrainMode::Classification => (0.0, 0.0),
        };
        bd.total = lambda_fc.0 * bd.recon_fc1
            + lambda_fc.1 * bd.recon_fc2
            + self.cfg.eta * bd.neg_log_p
            + bd.filter_loss_total
            + bd.cross_entropy;

        let lam: [Vec<f64>; 2] = [
            self.net.filters_interp1.iter().map(|s| s.lambda).collect(),
            self.net.filters_interp2.iter().map(|s| s.lambda).collect(),
        ];
        let mut grads = Vec::new();
        let mut rec_norm = [vec![0.0; d], vec![0.0; d]];
        for (x, (g, nodes)) in graphs.iter().enumerate() {
            let layer_nodes = [nodes.interp1, nodes.interp2_masked];
            let mut extra = Vec::new();
            for layer in 0..2 {
                if let Some(t) = injected[x][layer].as_ref() {
                    // Per-image seeds are averaged below, hence the batch factor.
                    let mut t = t.clone();
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        *v *= lam[layer][i % d] * b as f64;
                    }
                    extra.push((layer_nodes[layer], t));
                }
            }
            let gr = g.backward_with(Some(per_image[x]), extra.clone())?;
            for layer in 0..2 {
                let Some(total) = gr.node(layer_nodes[layer]) else {
                    continue;
                };
                let mut rec = total.clone();
                if let Some((_, s)) = extra.iter().find(|(n, _)| *n == layer_nodes[layer]) {
                    for (r, v) in rec.data_mut().iter_mut().zip(s.data()) {
                        *r -= v;
                    }
                }
                for (f, v) in channel_norms(&rec).into_iter().enumerate() {
                    rec_norm[layer][f] += v / b as f64;
                }
            }
            accumulate_grads(&mut grads, gr.into_params());
        }
        scale_grads(&mut grads, 1.0 / b as f64);
        if w_p_filter_grad != 0.0 {
            if let Some(Some(g)) = grads.get_mut(w_p_id.0) {
                g.data_mut()[0] += w_p_filter_grad;
            }
        }

        let k = self.num_categories;
        let mut category_mass = [vec![vec![(0.0, 0usize); k]; d], vec![vec![(0.0, 0usize); k]; d]];
        for (x, (g, nodes)) in graphs.iter().enumerate() {
            if let Some(c) = self.category_of(self.dumps[batch[x]].label) {
                for (layer, node) in [nodes.interp1, nodes.interp2].into_iter().enumerate() {
                    for (f, v) in positive_mass(g.value(node)).into_iter().enumerate() {
                        category_mass[layer][f][c].0 += v;
                        category_mass[layer][f][c].1 += 1;
                    }
                }
            }
        }
        Ok(BatchEval {
            breakdown: bd,
            grads,
            rec_norm,
            filt_norm,
            alpha,
            category_mass,
        })
    }

    fn set_lambdas(&mut self, epoch: usize, rec: &[Vec<f64>; 2], filt: &[Vec<f64>; 2]) {
        for layer in 0..2 {
            let states = if layer == 0 {
                &mut self.net.filters_interp1
            } else {
                &mut self.net.filters_interp2
            };
            for (f, st) in states.iter_mut().enumerate() {
                st.lambda = update_lambda_f(
                    epoch,
                    rec[layer][f],
                    filt[layer][f],
                    st.lambda,
                    LAMBDA_SCHEDULE_CONSTANT,
                );
            }
        }
    }

    /// One SGD step on a batch of image indices.
    fn step(&mut self, batch: &[usize], epoch: usize, stats: &mut EpochStats) -> Result<LossBreakdown> {
        if self.cfg.filter_loss && !self.lambda_ready {
            // Initial filter weights from the first batch's gradient norms.
            let ev = self.evaluate(batch, true)?;
            self.set_lambdas(epoch.max(1), &ev.rec_norm, &ev.filt_norm);
            self.lambda_ready = true;
        }
        let ev = self.evaluate(batch, true)?;
        let bd = ev.breakdown;
        if let Some(term) = bd.non_finite_term() {
            return Err(Error::NonFinite(format!(
                "explainer loss diverged at epoch {epoch}: {term} is not finite ({bd:?})"
            )));
        }
        stats.norm_count += 1;
        for layer in 0..2 {
            for f in 0..self.net.config.channels {
                stats.rec_norm[layer][f] += ev.rec_norm[layer][f];
                stats.filt_norm[layer][f] += ev.filt_norm[layer][f];
                for (c, &(m, n)) in ev.category_mass[layer][f].iter().enumerate() {
                    stats.category_mass[layer][f][c].0 += m;
                    stats.category_mass[layer][f][c].1 += n;
                }
            }
        }
        self.opt.step(&mut self.net.params, &ev.grads);
        if let Some((ai, ao)) = &ev.alpha {
            self.net.norm_interp.update(ai);
            self.net.norm_ordin.update(ao);
        }
        self.p_trajectory.push(self.net.p());
        debug!("step {}: {bd:?} p {:.4}", self.p_trajectory.len(), self.net.p());
        Ok(bd)
    }

    /// Runs one epoch (1-based) and applies the epoch-boundary refresh.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        if epoch == 1 && self.p_trajectory.is_empty() {
            self.calibrate()?;
        }
        let mut order: Vec<usize> = (0..self.dumps.len()).collect();
        let mut shuffle = rng::stream(self.cfg.seed, 0x4558_0000 + epoch as u64);
        order.shuffle(&mut shuffle);
        let mut stats = EpochStats::new(self.net.config.channels, self.num_categories);
        let mut acc = LossBreakdown::default();
        let mut steps = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let bd = self.step(batch, epoch, &mut stats)?;
            acc.recon_fc1 += bd.recon_fc1;
            acc.recon_fc2 += bd.recon_fc2;
            acc.neg_log_p += bd.neg_log_p;
            acc.filter_loss_total += bd.filter_loss_total;
            acc.cross_entropy += bd.cross_entropy;
            acc.total += bd.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let breakdown = LossBreakdown {
            recon_fc1: acc.recon_fc1 / n,
            recon_fc2: acc.recon_fc2 / n,
            neg_log_p: acc.neg_log_p / n,
            filter_loss_total: acc.filter_loss_total / n,
            cross_entropy: acc.cross_entropy / n,
            total: acc.total / n,
        };
        // alpha is already folded in per step; end warm-up, then categories, then lambdas.
        if epoch == 1 {
            self.net.norm_interp.end_warmup();
            self.net.norm_ordin.end_warmup();
        }
        self.refresh_categories(&stats)?;
        if self.cfg.filter_loss {
            self.refresh_lambdas(epoch + 1, &stats);
        }
        let mean = |s: &[crate::filter_loss::FilterLossState]| s.iter().map(|x| x.lambda).sum::<f64>() / s.len() as f64;
        let m = EpochMetrics {
            epoch,
            breakdown,
            p: self.net.p(),
            mean_lambda_interp1: mean(&self.net.filters_interp1),
            mean_lambda_interp2: mean(&self.net.filters_interp2),
        };
        info!(
            "explainer epoch {epoch}: total {:.4e} fc1 {:.4e} fc2 {:.4e} filter {:.4e} p {:.4}",
            m.breakdown.total, m.breakdown.recon_fc1, m.breakdown.recon_fc2, m.breakdown.filter_loss_total, m.p
        );
        if self.net.p() > 1.0 - 1e-9 {
            warn!("mixing weight saturated at p = {}", self.net.p());
        }
        Ok(m)
    }

    pub fn train(mut self) -> Result<(ExplainerNet, TrainHistory)> {
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        for epoch in 1..=self.cfg.epochs {
            epochs.push(self.run_epoch(epoch)?);
        }
        Ok((
            self.net,
            TrainHistory {
                lambda_l: self.lambda_l,
                epochs,
                p_trajectory: self.p_trajectory,
            },
        ))
    }
}

/// Trains an explainer for `performer` on `samples`.
pub fn train_explainer(
    performer: &PerformerNet,
    samples: &[SynthSample],
    cfg: &TrainConfig,
) -> Result<(ExplainerNet, TrainHistory)> {
    Trainer::new(performer, samples, cfg.clone())?.train()
}

/// SGD on `w_p` under `-eta log p` alone, starting from `w_p = 0`.
/// Returns `(p, d(-eta log p)/dw_p)` before every step.
pub fn mixing_dynamics(eta: f64, lr: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    let mut store = crate::autodiff::ParamStore::new();
    let w = store.add(W_P, Tensor::scalar(0.0));
    let mut opt = Sgd::new(lr, 0.0);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let p = sigmoid(store.value(w).item());
        let mut g = Graph::new(&store);
        let nlp = g.neg_log_sigmoid(w)?;
        let loss = g.weighted_sum(vec![(nlp, eta)])?;
        let grads = g.backward(loss)?.into_params();
        out.push((p, grads[w.0].as_ref().map_or(0.0, |t| t.item())));
        opt.step(&mut store, &grads);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grad, max_relative_error};
    use crate::explainer::ExplainerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_setup(seed: u64, n: usize) -> (Vec<FeatureDump>, ExplainerNet) {
        let config = ExplainerConfig {
            side: 4,
            channels: 3,
            pool: (2, 2),
            fc_widths: (6, 5),
            num_classes: 2,
            tau: 0.5 / 16.0,
            beta: 4.0,
        };
        let net = ExplainerNet::random(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dumps = (0..n)
            .map(|i| FeatureDump {
                sample_id: format!("s{i}"),
                label: i % 2,
                target: Tensor::from_fn(&[4, 4, 3], |_| rng.random::<f64>()),
                top: Tensor::zeros(&[4, 4, 3]),
                fc6: Tensor::from_fn(&[6], |_| rng.random::<f64>()),
                fc7: Tensor::from_fn(&[5], |_| rng.random::<f64>()),
                logits: Tensor::zeros(&[2]),
            })
            .collect();
        (dumps, net)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lambda_l: Some((1.5, 0.7)),
            eta: 2.0,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_l_formula() {
        let f = [Tensor::from_vec(vec![3e4, 4e4])];
        assert!((compute_lambda_l(&f).unwrap() - 1.0).abs() < 1e-12);
        let f = [Tensor::from_vec(vec![0.6, -5.0, 0.8])];
        assert!((compute_lambda_l(&f).unwrap() - 5e4).abs() < 1e-9);
        let a = [Tensor::from_vec(vec![1.0, 2.0]), Tensor::from_vec(vec![0.5, 0.0])];
        let b: Vec<Tensor> = a.iter().map(|t| t.map(|v| v * 3.0)).collect();
        let (la, lb) = (compute_lambda_l(&a).unwrap(), compute_lambda_l(&b).unwrap());
        assert!((la / lb - 3.0).abs() < 1e-12);
        assert!(compute_lambda_l(&[Tensor::zeros(&[3])]).is_err());
        assert!(compute_lambda_l(std::iter::empty()).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let b = total_loss((&x, &x), (&x, &x), 0.5, &[], (1.0, 1.0), 2.0);
        assert!((b.total - 2.0 * 2f64.ln()).abs() < 1e-15);
        let b = total_loss((&x, &x), (&x, &x), 1.0 - 1e-12, &[(3.0, 0.0)], (1.0, 1.0), 2.0);
        assert!(b.total.abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut r = |n| Tensor::from_fn(&[n], |_| rng.random::<f64>() - 0.5);
            let (a1, a2, s1, s2) = (r(4), r(3), r(4), r(3));
            let p = rng.random::<f64>().clamp(1e-3, 1.0 - 1e-3);
            let fl: Vec<(f64, f64)> = (0..5).map(|_| (rng.random(), -rng.random::<f64>())).collect();
            let (l1, l2, eta) = (
                rng.random::<f64>() * 10.0,
                rng.random::<f64>(),
                rng.random::<f64>() * 100.0,
            );
            let b = total_loss((&a1, &a2), (&s1, &s2), p, &fl, (l1, l2), eta);
            let direct = l1 * crate::explainer::squared_distance(&a1, &s1)
                + l2 * crate::explainer::squared_distance(&a2, &s2)
                - eta * p.ln()
                + fl.iter().map(|(l, f)| l * f).sum::<f64>();
            assert!((b.total - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { eta: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 4, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            lambda_l: Some((1.0, -1.0)),
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mixing_prior_alone_drives_p_up() {
        let traj = mixing_dynamics(10.0, 0.1, 200).unwrap();
        for w in traj.windows(2) {
            assert!(w[1].0 > w[0].0);
        }
        for &(p, g) in &traj {
            assert!((g + 10.0 * (1.0 - p)).abs() < 1e-12);
        }
        assert!(traj.last().unwrap().0 > 0.99);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (dumps, mut net) = small_setup(3, 6);
        for (i, s) in net.filters_interp1.iter_mut().enumerate() {
            s.lambda = 0.3 + i as f64;
        }
        for (i, s) in net.filters_interp2.iter_mut().enumerate() {
            s.lambda = 2.0 - 0.5 * i as f64;
        }
        net.norm_interp = NormLayerState::from_parts(vec![0.02, 0.01, 0.03], 0.99, false, false);
        net.norm_ordin = NormLayerState::from_parts(vec![1.0, 2.0, 0.5], 0.99, false, false);
        *net.params.value_mut(net.param(W_P)) = Tensor::scalar(0.4);
        let cfg = TrainConfig {
            filter_gradient: FilterGradient::Exact,
            ..cfg()
        };
        let batch: Vec<usize> = (0..6).collect();
        let trainer = Trainer::with_net(dumps.clone(), net.clone(), cfg.clone()).unwrap();
        let ev = trainer.evaluate(&batch, false).unwrap();
        for name in [
            "conv_interp_1.w",
            "conv_interp_2.w",
            "conv_interp_2.b",
            "fc_dec_1.w",
            W_P,
        ] {
            let id = net.param(name);
            let analytic = ev.grads[id.0].clone().unwrap();
            let numeric = finite_difference_grad(
                |v| {
                    let mut n2 = net.clone();
                    *n2.params.value_mut(id) = v.clone();
                    let t = Trainer::with_net(dumps.clone(), n2, cfg.clone()).unwrap();
                    t.evaluate(&batch, false).unwrap().breakdown.total
                },
                net.params.value(id),
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-4);
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn filter_loss_leaves_ordinary_track_alone() {
        let (dumps, mut net) = small_setup(7, 8);
        for s in net.filters_interp2.iter_mut() {
            s.lambda = 5.0;
        }
        let batch: Vec<usize> = (0..8).collect();
        let on = Trainer::with_net(dumps.clone(), net.clone(), cfg())
            .unwrap()
            .evaluate(&batch, true)
            .unwrap();
        let off = Trainer::with_net(
            dumps,
            net.clone(),
            TrainConfig {
                filter_loss: false,
                ..cfg()
            },
        )
        .unwrap()
        .evaluate(&batch, true)
        .unwrap();
        for name in ["conv_ordin.w", "conv_ordin.b"] {
            let id = net.param(name).0;
            assert_eq!(on.grads[id], off.grads[id], "{name}");
        }
        let id = net.param("conv_interp_2.w").0;
        assert_ne!(on.grads[id], off.grads[id]);
    }

    #[test]
    fn classification_mode_uses_cross_entropy() {
        let (dumps, net) = small_setup(4, 8);
        let t = Trainer::with_net(
            dumps,
            net,
            TrainConfig {
                mode: TrainMode::Classification,
                ..cfg()
            },
        )
        .unwrap();
        let bd = t.evaluate(&(0..8).collect::<Vec<_>>(), true).unwrap().breakdown;
        assert!(bd.cross_entropy > 0.0);
        assert_eq!(bd.recon_fc1, 0.0);
        let direct = 2.0 * bd.neg_log_p + bd.filter_loss_total + bd.cross_entropy;
        assert!((bd.total - direct).abs() < 1e-9);
    }

    #[test]
    fn autoencoder_smoke_loss_decreases() {
        let (dumps, mut net) = small_setup(5, 8);
        let w = net.param(W_P);
        *net.params.value_mut(w) = Tensor::scalar(40.0);
        net.params.set_frozen(w, true);
        let cfg = TrainConfig {
            filter_loss: false,
            lr: 0.01,
            momentum: 0.0,
            epochs: 10,
            ..cfg()
        };
        let (_, h) = Trainer::with_net(dumps, net, cfg).unwrap().train().unwrap();
        let rec: Vec<f64> = h
            .epochs
            .iter()
            .map(|e| 1.5 * e.breakdown.recon_fc1 + 0.7 * e.breakdown.recon_fc2)
            .collect();
        for w in rec.windows(2) {
            assert!(w[1] < w[0], "{rec:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_head_frozen() {
        let (dumps, net) = small_setup(6, 16);
        let head = net.params.by_name("head.w").unwrap().clone();
        let c = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            ..cfg()
        };
        let (a, ha) = Trainer::with_net(dumps.clone(), net.clone(), c.clone())
            .unwrap()
            .train()
            .unwrap();
        let (b, hb) = Trainer::with_net(dumps, net, c).unwrap().train().unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params.by_name("fc_dec_1.w"), b.params.by_name("fc_dec_1.w"));
        assert_eq!(a.params.by_name("head.w").unwrap(), &head);
        assert_eq!(ha.p_trajectory.len(), 2 * 2);
    }

    #[test]
    fn non_finite_terms_are_named() {
        let bd = LossBreakdown {
            recon_fc2: f64::NAN,
            ..LossBreakdown::default()
        };
        assert_eq!(bd.non_finite_term(), Some("recon_fc2"));
        assert_eq!(LossBreakdown::default().non_finite_term(), None);
    }
}
