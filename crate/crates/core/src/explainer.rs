//! The explainer network.
//!
//! Encoder, interpretable track:
//! `conv-interp-1 -> relu -> mask -> conv-interp-2 -> relu -> mask -> pool -> norm`.
//! Encoder, ordinary track: `conv-ordin -> relu -> pool -> norm`.
//! The tracks are blended as `p * interp + (1 - p) * ordin` with
//! `p = sigmoid(w_p)`, then decoded by `fc-dec-1 -> relu -> fc-dec-2 -> relu`.
//!
//! Both tracks pool with the performer's last pooling window so the encoder
//! output has the shape of the performer's fc6 input.

use crate::autodiff::kernels::sigmoid;
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::filter_loss::FilterLossState;
use crate::performer::{he_normal, PerformerNet, LAST_POOL};
use crate::rng;
use crate::templates::{TemplateBank, Unit, DEFAULT_BETA};
use crate::tensor::Tensor;

/// Floor on norm-layer magnitudes. Masked interpretable maps are scaled by
/// up to `tau^2`, so the floor sits well below typical magnitudes.
pub const ALPHA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerConfig {
    /// Feature-map side `L`.
    pub side: usize,
    /// Channels `D` of the input and of every encoder conv layer.
    pub channels: usize,
    pub pool: (usize, usize),
    /// Widths of fc-dec-1 and fc-dec-2.
    pub fc_widths: (usize, usize),
    pub num_classes: usize,
    pub tau: f64,
    pub beta: f64,
}

impl ExplainerConfig {
    pub fn pooled_side(&self) -> usize {
        (self.side - self.pool.0) / self.pool.1 + 1
    }

    pub fn encoder_len(&self) -> usize {
        self.pooled_side().pow(2) * self.channels
    }
}

/// Per-channel activation magnitudes of a norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayerState {
    pub alpha: Vec<f64>,
    pub momentum: f64,
    /// Estimate magnitudes from target-category images only.
    pub positive_only: bool,
    /// Batches folded into the warm-up average; `None` once warm-up ended.
    warmup_batches: Option<usize>,
}

impl NormLayerState {
    pub fn new(channels: usize, momentum: f64, positive_only: bool) -> Self {
        NormLayerState {
            alpha: vec![1.0; channels],
            momentum,
            positive_only,
            warmup_batches: Some(0),
        }
    }

    /// Restores a state, e.g. from a checkpoint.
    pub fn from_parts(alpha: Vec<f64>, momentum: f64, positive_only: bool, in_warmup: bool) -> Self {
        NormLayerState {
            alpha,
            momentum,
            positive_only,
            warmup_batches: in_warmup.then_some(0),
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.warmup_batches.is_some()
    }

    /// Switches from cumulative batch averages to the exponential running
    /// average.
    pub fn end_warmup(&mut self) {
        self.warmup_batches = None;
    }

    pub fn scales(&self) -> Vec<f64> {
        scales_for(&self.alpha)
    }

    /// Folds in one batch statistic `E_x[sum_ij max(x, 0)]` per channel.
    pub fn update(&mut self, batch_mass: &[f64]) {
        debug_assert_eq!(batch_mass.len(), self.alpha.len());
        match self.warmup_batches.as_mut() {
            Some(n) => {
                let w = 1.0 / (*n + 1) as f64;
                for (a, &m) in self.alpha.iter_mut().zip(batch_mass) {
                    *a = if *n == 0 { m } else { (1.0 - w) * *a + w * m };
                }
                *n += 1;
            }
            None => {
                for (a, &m) in self.alpha.iter_mut().zip(batch_mass) {
                    *a = self.momentum * *a + (1.0 - self.momentum) * m;
                }
            }
        }
        for a in &mut self.alpha {
            *a = a.max(ALPHA_FLOOR);
        }
    }
}

/// `1 / max(alpha_k, floor)` per channel.
pub fn scales_for(alpha: &[f64]) -> Vec<f64> {
    alpha.iter().map(|a| 1.0 / a.max(ALPHA_FLOOR)).collect()
}

/// Per-channel positive mass `sum_ij max(x, 0)` of an `[H, W, C]` tensor.
pub fn positive_mass(x: &Tensor) -> Vec<f64> {
    let c = x.shape()[2];
    let mut m = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        m[i % c] += v.max(0.0);
    }
    m
}

/// Mean positive mass over a set of `[H, W, C]` tensors.
pub fn mean_positive_mass<'a>(xs: impl IntoIterator<Item = &'a Tensor>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for x in xs {
        let m = positive_mass(x);
        match acc.as_mut() {
            Some(a) => a.iter_mut().zip(&m).for_each(|(a, b)| *a += b),
            None => acc = Some(m),
        }
        n += 1;
    }
    acc.map(|a| a.into_iter().map(|v| v / n as f64).collect())
}

/// Channel-wise `x / alpha_k` with the floor applied.
pub fn norm_forward(x: &Tensor, state: &NormLayerState) -> Tensor {
    let s = state.scales();
    let c = s.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= s[i % c];
    }
    out
}

/// Mask for one `L x L` map: `max(T_mu, 0)` at the first maximum `mu`.
pub fn mask_for(map: &Tensor, bank: &TemplateBank) -> Tensor {
    bank.mask(Unit::from_index(map.argmax(), bank.side())).clone()
}

/// `x_f * max(T_mu, 0)` with `mu` the first maximum of `x_f`.
pub fn mask_forward(map: &Tensor, bank: &TemplateBank) -> Tensor {
    let m = mask_for(map, bank);
    let mut out = map.clone();
    for (o, mv) in out.data_mut().iter_mut().zip(m.data()) {
        *o *= mv;
    }
    out
}

/// Masks for every channel of an `[L, L, D]` tensor, laid out `[L, L, D]`.
pub fn channel_masks(x: &Tensor, bank: &TemplateBank) -> Tensor {
    let (h, w, c) = x.hwc();
    let mut out = Tensor::zeros(&[h, w, c]);
    for k in 0..c {
        let m = mask_for(&x.channel(k), bank);
        for (p, &v) in m.data().iter().enumerate() {
            out.data_mut()[p * c + k] = v;
        }
    }
    out
}

/// `p * x_f + (1 - p) * x_ordin` for one channel.
pub fn mixed_filter_map(x_f: &Tensor, x_ordin: &Tensor, p: f64) -> Tensor {
    let data = x_f
        .data()
        .iter()
        .zip(x_ordin.data())
        .map(|(a, b)| p * a + (1.0 - p) * b)
        .collect();
    Tensor::new(x_f.shape().to_vec(), data).expect("matching channel shapes")
}

#[derive(Debug, Clone)]
pub struct ExplainerNet {
    pub config: ExplainerConfig,
    pub params: ParamStore,
    pub bank: TemplateBank,
    pub norm_interp: NormLayerState,
    pub norm_ordin: NormLayerState,
    pub filters_interp1: Vec<FilterLossState>,
    pub filters_interp2: Vec<FilterLossState>,
}

/// Node handles of one explainer forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ExplainerNodes {
    /// conv-interp-1 after ReLU, before its mask.
    pub interp1: NodeId,
    pub interp1_masked: NodeId,
    /// conv-interp-2 after ReLU, before its mask.
    pub interp2: NodeId,
    pub interp2_masked: NodeId,
    /// conv-ordin after ReLU, before pooling.
    pub ordin: NodeId,
    /// Normalized pooled interpretable track.
    pub x_interp: NodeId,
    /// Normalized pooled ordinary track.
    pub x_ordin: NodeId,
    pub x_enc: NodeId,
    pub fc_dec_1: NodeId,
    pub fc_dec_2: NodeId,
}

/// Encoder nodes before the norm layers.
#[derive(Debug, Clone, Copy)]
pub struct TrackNodes {
    pub interp1: NodeId,
    pub interp1_masked: NodeId,
    pub interp2: NodeId,
    pub interp2_masked: NodeId,
    pub ordin: NodeId,
    pub pooled_interp: NodeId,
    pub pooled_ordin: NodeId,
}

pub const CONV_INTERP_1: &str = "conv_interp_1";
pub const CONV_INTERP_2: &str = "conv_interp_2";
pub const CONV_ORDIN: &str = "conv_ordin";
pub const FC_DEC_1: &str = "fc_dec_1";
pub const FC_DEC_2: &str = "fc_dec_2";
pub const HEAD: &str = "head";
pub const W_P: &str = "w_p";

impl ExplainerNet {
    /// Randomly initialized explainer (He fan-in scaling, zero biases, `w_p = 0`).
    pub fn random(config: ExplainerConfig, seed: u64) -> Result<Self> {
        if config.side == 0 || config.channels == 0 || config.side < config.pool.0 {
            return Err(Error::InvalidArgument(format!("bad explainer config {config:?}")));
        }
        let bank = TemplateBank::new(config.side, config.tau, config.beta)?;
        let mut rng = rng::stream(seed, 0x4558_504c);
        let d = config.channels;
        let mut params = ParamStore::new();
        for name in [CONV_INTERP_1, CONV_INTERP_2, CONV_ORDIN] {
            params.add(format!("{name}.w"), he_normal(&[3, 3, d, d], 9 * d, &mut rng));
            params.add(format!("{name}.b"), Tensor::zeros(&[d]));
        }
        let (w1, w2) = config.fc_widths;
        let n_enc = config.encoder_len();
        params.add(format!("{FC_DEC_1}.w"), he_normal(&[w1, n_enc], n_enc, &mut rng));
        params.add(format!("{FC_DEC_1}.b"), Tensor::zeros(&[w1]));
        params.add(format!("{FC_DEC_2}.w"), he_normal(&[w2, w1], w1, &mut rng));
        params.add(format!("{FC_DEC_2}.b"), Tensor::zeros(&[w2]));
        params.add_frozen(format!("{HEAD}.w"), he_normal(&[config.num_classes, w2], w2, &mut rng));
        params.add_frozen(format!("{HEAD}.b"), Tensor::zeros(&[config.num_classes]));
        params.add(W_P, Tensor::scalar(0.0));
        let filters = |lambda| (0..d).map(|f| FilterLossState::new(f, lambda)).collect::<Vec<_>>();
        Ok(ExplainerNet {
            norm_interp: NormLayerState::new(d, 0.99, false),
            norm_ordin: NormLayerState::new(d, 0.99, false),
            filters_interp1: filters(0.0),
            filters_interp2: filters(0.0),
            config,
            params,
            bank,
        })
    }

    /// Explainer for a trained performer: conv-interp-1 copies the top conv
    /// layer, fc-dec-1/fc-dec-2 copy fc6/fc7, the pool copies the last pool
    /// and conv-interp-2/conv-ordin are random.
    pub fn from_performer(performer: &PerformerNet, seed: u64) -> Result<Self> {
        let pc = &performer.config;
        if pc.channels[2] != pc.channels[3] {
            return Err(Error::shape(
                "init_explainer_from_performer",
                format!(
                    "top conv maps {} -> {} channels; conv-interp-1 needs equal counts",
                    pc.channels[2], pc.channels[3]
                ),
            ));
        }
        let config = ExplainerConfig {
            side: pc.target_side(),
            channels: pc.target_channels(),
            pool: LAST_POOL,
            fc_widths: (pc.fc_width, pc.fc_width),
            num_classes: pc.num_classes,
            tau: crate::templates::default_tau(pc.target_side()),
            beta: DEFAULT_BETA,
        };
        let mut net = ExplainerNet::random(config, seed)?;
        for (dst, src) in [
            (CONV_INTERP_1, "conv4"),
            (FC_DEC_1, "fc6"),
            (FC_DEC_2, "fc7"),
            (HEAD, "head"),
        ] {
            for suffix in ["w", "b"] {
                let from = performer.params.value(performer.params.id(&format!("{src}.{suffix}"))?);
                let id = net.params.id(&format!("{dst}.{suffix}"))?;
                if net.params.value(id).shape() != from.shape() {
                    return Err(Error::shape(
                        "init_explainer_from_performer",
                        format!(
                            "{dst}.{suffix} {:?} vs {src}.{suffix} {:?}",
                            net.params.value(id).shape(),
                            from.shape()
                        ),
                    ));
                }
                *net.params.value_mut(id) = from.clone();
            }
        }
        Ok(net)
    }

    pub fn param(&self, name: &str) -> ParamId {
        self.params.id(name).expect("explainer parameter")
    }

    fn layer(&self, name: &str) -> (ParamId, ParamId) {
        (self.param(&format!("{name}.w")), self.param(&format!("{name}.b")))
    }

    pub fn w_p(&self) -> f64 {
        self.params.value(self.param(W_P)).item()
    }

    /// Mixing ratio `p = sigmoid(w_p)`.
    pub fn p(&self) -> f64 {
        sigmoid(self.w_p())
    }

    pub fn set_positive_only_alpha(&mut self, on: bool) {
        self.norm_interp.positive_only = on;
        self.norm_ordin.positive_only = on;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.shape() != [c.side, c.side, c.channels] {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "input {:?}, expected [{}, {}, {}]",
                    x.shape(),
                    c.side,
                    c.side,
                    c.channels
                ),
            ));
        }
        Ok(())
    }

    pub fn encoder_forward(&self, g: &mut Graph<'_>, x_in: &Tensor) -> Result<ExplainerNodes> {
        let tracks = self.encoder_tracks(g, x_in)?;
        self.encoder_mix(g, tracks, self.norm_interp.scales(), self.norm_ordin.scales())
    }

    /// Both encoder tracks up to (not including) the norm layers.
    pub fn encoder_tracks(&self, g: &mut Graph<'_>, x_in: &Tensor) -> Result<TrackNodes> {
        self.check_input(x_in)?;
        let (pk, ps) = self.config.pool;
        let x = g.input(x_in.clone(), false)?;

        let (w, b) = self.layer(CONV_INTERP_1);
        let c1 = g.conv2d(x, w, b, 1, 1)?;
        let interp1 = g.relu(c1)?;
        let mask1 = channel_masks(g.value(interp1), &self.bank);
        let interp1_masked = g.mul_const(interp1, mask1)?;

        let (w, b) = self.layer(CONV_INTERP_2);
        let c2 = g.conv2d(interp1_masked, w, b, 1, 1)?;
        let interp2 = g.relu(c2)?;
        let mask2 = channel_masks(g.value(interp2), &self.bank);
        let interp2_masked = g.mul_const(interp2, mask2)?;
        let pooled_interp = g.maxpool2d(interp2_masked, pk, ps)?;

        let (w, b) = self.layer(CONV_ORDIN);
        let co = g.conv2d(x, w, b, 1, 1)?;
        let ordin = g.relu(co)?;
        let pooled_ordin = g.maxpool2d(ordin, pk, ps)?;
        Ok(TrackNodes {
            interp1,
            interp1_masked,
            interp2,
            interp2_masked,
            ordin,
            pooled_interp,
            pooled_ordin,
        })
    }

    /// Norm layers with the given channel scales, mixing and decoder.
    pub fn encoder_mix(
        &self,
        g: &mut Graph<'_>,
        t: TrackNodes,
        interp_scales: Vec<f64>,
        ordin_scales: Vec<f64>,
    ) -> Result<ExplainerNodes> {
        let x_interp = g.channel_scale(t.pooled_interp, interp_scales)?;
        let x_ordin = g.channel_scale(t.pooled_ordin, ordin_scales)?;
        let x_enc = g.mix(x_interp, x_ordin, self.param(W_P))?;
        let flat = g.flatten(x_enc)?;
        let (fc_dec_1, fc_dec_2) = self.decoder_forward(g, flat)?;
        Ok(ExplainerNodes {
            interp1: t.interp1,
            interp1_masked: t.interp1_masked,
            interp2: t.interp2,
            interp2_masked: t.interp2_masked,
            ordin: t.ordin,
            x_interp,
            x_ordin,
            x_enc,
            fc_dec_1,
            fc_dec_2,
        })
    }

    /// `fc-dec-1 -> relu -> fc-dec-2 -> relu` on a flattened encoder output.
    pub fn decoder_forward(&self, g: &mut Graph<'_>, flat: NodeId) -> Result<(NodeId, NodeId)> {
        if g.value(flat).shape() != [self.config.encoder_len()] {
            return Err(Error::shape(
                "decoder_forward",
                format!(
                    "input {:?}, expected [{}]",
                    g.value(flat).shape(),
                    self.config.encoder_len()
                ),
            ));
        }
        let (w, b) = self.layer(FC_DEC_1);
        let h1 = g.linear(flat, w, b)?;
        let d1 = g.relu(h1)?;
        let (w, b) = self.layer(FC_DEC_2);
        let h2 = g.linear(d1, w, b)?;
        let d2 = g.relu(h2)?;
        Ok((d1, d2))
    }

    pub fn head_logits(&self, g: &mut Graph<'_>, fc_dec_2: NodeId) -> Result<NodeId> {
        let (w, b) = self.layer(HEAD);
        g.linear(fc_dec_2, w, b)
    }

    /// Inference-only forward pass returning all intermediate values.
    pub fn forward_values(&self, x_in: &Tensor) -> Result<ExplainerOutput> {
        let mut g = Graph::new(&self.params);
        let n = self.encoder_forward(&mut g, x_in)?;
        Ok(ExplainerOutput {
            interp1: g.value(n.interp1).clone(),
            interp2: g.value(n.interp2).clone(),
            interp2_masked: g.value(n.interp2_masked).clone(),
            ordin: g.value(n.ordin).clone(),
            x_interp: g.value(n.x_interp).clone(),
            x_ordin: g.value(n.x_ordin).clone(),
            x_enc: g.value(n.x_enc).clone(),
            fc_dec_1: g.value(n.fc_dec_1).clone(),
            fc_dec_2: g.value(n.fc_dec_2).clone(),
        })
    }

    /// Logits of the performer head applied to the reconstructed fc7.
    pub fn classify(&self, performer: &PerformerNet, image: &Tensor) -> Result<Tensor> {
        let dump = performer.extract_features(image)?;
        let out = self.forward_values(&dump.target)?;
        performer.head_logits(&out.fc_dec_2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerOutput {
    pub interp1: Tensor,
    pub interp2: Tensor,
    pub interp2_masked: Tensor,
    pub ordin: Tensor,
    pub x_interp: Tensor,
    pub x_ordin: Tensor,
    pub x_enc: Tensor,
    pub fc_dec_1: Tensor,
    pub fc_dec_2: Tensor,
}

/// Performer logits with the explainer's reconstructed fc7 substituted.
pub fn classify_with_explainer(performer: &PerformerNet, explainer: &ExplainerNet, image: &Tensor) -> Result<Tensor> {
    explainer.classify(performer, image)
}

/// Error rate of [`classify_with_explainer`] over samples.
pub fn explainer_error_rate(
    performer: &PerformerNet,
    explainer: &ExplainerNet,
    samples: &[crate::synth::SynthSample],
) -> Result<f64> {
    let mut wrong = 0usize;
    for s in samples {
        if classify_with_explainer(performer, explainer, &s.image)?.argmax() != s.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len().max(1) as f64)
}

/// Reconstruction error `||a - b||^2`.
pub fn squared_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grad, max_relative_error};
    use crate::performer::PerformerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ExplainerConfig {
        ExplainerConfig {
            side: 4,
            channels: 3,
            pool: (2, 2),
            fc_widths: (6, 5),
            num_classes: 2,
            tau: 0.5 / 16.0,
            beta: 4.0,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, c: &ExplainerConfig) -> Tensor {
        Tensor::from_fn(&[c.side, c.side, c.channels], |_| rng.random::<f64>())
    }

    #[test]
    fn mask_of_one_hot_is_scaled_by_tau() {
        let bank = TemplateBank::with_defaults(8).unwrap();
        let mut x = Tensor::zeros(&[8, 8]);
        x.set(&[3, 5], 2.5);
        let out = mask_forward(&x, &bank);
        assert_eq!(out.get(&[3, 5]), 2.5 * bank.tau());
        assert_eq!(out.sum(), 2.5 * bank.tau());
    }

    #[test]
    fn mask_support_within_positive_template() {
        let bank = TemplateBank::with_defaults(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mu in 0..64 {
            let unit = Unit::from_index(mu, 8);
            let mut x = Tensor::from_fn(&[8, 8], |_| rng.random::<f64>());
            x.data_mut()[mu] = 2.0;
            let out = mask_forward(&x, &bank);
            let t = bank.positive(unit);
            for i in 0..64 {
                if t.data()[i] <= 0.0 {
                    assert_eq!(out.data()[i], 0.0);
                }
                assert!(out.data()[i] <= bank.tau() * x.data()[i] + 1e-15);
            }
        }
    }

    #[test]
    fn norm_layer() {
        let x = Tensor::full(&[2, 2, 1], 0.5);
        let s = NormLayerState::from_parts(vec![2.0], 0.99, false, false);
        assert!((norm_forward(&x, &s).sum() - 1.0).abs() < 1e-15);
        let mut s = NormLayerState::new(1, 0.99, false);
        s.update(&[0.0]);
        assert_eq!(s.alpha[0], ALPHA_FLOOR);
        assert!(norm_forward(&Tensor::zeros(&[2, 2, 1]), &s)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn norm_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[4, 4, 3], |_| rng.random::<f64>());
        let s = NormLayerState::from_parts(vec![0.3, 7.0, 1e-3], 0.99, false, false);
        let y = norm_forward(&x, &s);
        for k in 0..3 {
            assert_eq!(x.channel(k).argmax(), y.channel(k).argmax());
        }
    }

    #[test]
    fn warmup_averages_then_running_average_converges() {
        let mut s = NormLayerState::new(2, 0.99, false);
        s.update(&[1.0, 4.0]);
        s.update(&[3.0, 2.0]);
        assert_eq!(s.alpha, vec![2.0, 3.0]);
        s.end_warmup();
        for _ in 0..2000 {
            s.update(&[5.0, 0.5]);
        }
        assert!((s.alpha[0] - 5.0).abs() < 1e-3 && (s.alpha[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn mixing_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = ExplainerNet::random(small_config(), 4).unwrap();
        let x = random_input(&mut rng, &net.config);
        let out = net.forward_values(&x).unwrap();
        let half: Vec<f64> = out
            .x_interp
            .data()
            .iter()
            .zip(out.x_ordin.data())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        assert!(out.x_enc.data().iter().zip(&half).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(out.x_interp.shape(), out.x_ordin.shape());
        let id = net.param(W_P);
        *net.params.value_mut(id) = Tensor::scalar(50.0);
        let out = net.forward_values(&x).unwrap();
        assert!(out.x_enc.max_abs_diff(&out.x_interp) < 1e-12);
        assert!(net.p() > 0.0 && net.p() <= 1.0);
    }

    #[test]
    fn mixed_map_limits() {
        let a = Tensor::from_fn(&[3, 3], |i| i as f64);
        let b = Tensor::from_fn(&[3, 3], |i| 9.0 - i as f64);
        assert_eq!(mixed_filter_map(&a, &b, 1.0), a);
        assert_eq!(mixed_filter_map(&a, &b, 0.0), b);
    }

    #[test]
    fn copies_performer_layers() {
        let perf = PerformerNet::new(PerformerConfig::new(2), 9);
        let a = ExplainerNet::from_performer(&perf, 1).unwrap();
        let b = ExplainerNet::from_performer(&perf, 2).unwrap();
        for (dst, src) in [
            ("conv_interp_1.w", "conv4.w"),
            ("fc_dec_1.w", "fc6.w"),
            ("fc_dec_2.b", "fc7.b"),
            ("head.w", "head.w"),
        ] {
            assert_eq!(a.params.by_name(dst), perf.params.by_name(src));
        }
        assert_ne!(a.params.by_name("conv_interp_2.w"), b.params.by_name("conv_interp_2.w"));
        assert_ne!(a.params.by_name("conv_ordin.w"), b.params.by_name("conv_ordin.w"));
        assert_eq!(a.config.encoder_len(), perf.config.fc6_input());
    }

    #[test]
    fn decoder_reproduces_performer_on_its_own_pooled_features() {
        let perf = PerformerNet::new(PerformerConfig::new(2), 9);
        let net = ExplainerNet::from_performer(&perf, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = Tensor::from_fn(&[64, 64, 3], |_| rng.random::<f64>());
        let dump = perf.extract_features(&image).unwrap();
        let pooled = crate::autodiff::kernels::maxpool2d(&dump.top, 2, 2).unwrap().0;
        let mut g = Graph::new(&net.params);
        let n = pooled.len();
        let x = g.input(pooled.reshape(&[n]).unwrap(), false).unwrap();
        let (d1, d2) = net.decoder_forward(&mut g, x).unwrap();
        assert!(squared_distance(g.value(d1), &dump.fc6) < 1e-20);
        assert!(squared_distance(g.value(d2), &dump.fc7) < 1e-20);
        let logits = classify_with_explainer(&perf, &net, &image).unwrap();
        assert_eq!(logits.shape(), [2]);
    }

    #[test]
    fn decoder_of_zero_input_is_relu_of_biases() {
        let mut net = ExplainerNet::random(small_config(), 4).unwrap();
        let b1 = net.param("fc_dec_1.b");
        *net.params.value_mut(b1) = Tensor::from_vec(vec![0.5, -1.0, 0.25, 0.0, 2.0, -0.1]);
        let mut g = Graph::new(&net.params);
        let x = g.input(Tensor::zeros(&[net.config.encoder_len()]), false).unwrap();
        let (d1, _) = net.decoder_forward(&mut g, x).unwrap();
        assert_eq!(g.value(d1).data(), &[0.5, 0.0, 0.25, 0.0, 2.0, 0.0]);
        let mut g = Graph::new(&net.params);
        let bad = g.input(Tensor::zeros(&[3]), false).unwrap();
        assert!(net.decoder_forward(&mut g, bad).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = ExplainerNet::random(small_config(), 4).unwrap();
        let mut g = Graph::new(&net.params);
        assert!(net.encoder_forward(&mut g, &Tensor::zeros(&[4, 4, 2])).is_err());
    }

    /// Reconstruction objective of the small net as a function of one parameter.
    fn objective(net: &ExplainerNet, x: &Tensor, t1: &Tensor, t2: &Tensor) -> f64 {
        let mut g = Graph::new(&net.params);
        let n = net.encoder_forward(&mut g, x).unwrap();
        let e1 = g.squared_error(n.fc_dec_1, t1.clone()).unwrap();
        let e2 = g.squared_error(n.fc_dec_2, t2.clone()).unwrap();
        let nlp = g.neg_log_sigmoid(net.param(W_P)).unwrap();
        let l = g.weighted_sum(vec![(e1, 1.0), (e2, 0.5), (nlp, 2.0)]).unwrap();
        g.value(l).item()
    }

    #[test]
    fn encoder_decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = ExplainerNet::random(small_config(), 7).unwrap();
        net.norm_interp = NormLayerState::from_parts(vec![0.01, 0.02, 0.005], 0.99, false, false);
        net.norm_ordin = NormLayerState::from_parts(vec![1.5, 0.7, 2.0], 0.99, false, false);
        let x = random_input(&mut rng, &net.config);
        let t1 = Tensor::from_fn(&[6], |_| rng.random::<f64>());
        let t2 = Tensor::from_fn(&[5], |_| rng.random::<f64>());
        let mut g = Graph::new(&net.params);
        let n = net.encoder_forward(&mut g, &x).unwrap();
        let e1 = g.squared_error(n.fc_dec_1, t1.clone()).unwrap();
        let e2 = g.squared_error(n.fc_dec_2, t2.clone()).unwrap();
        let nlp = g.neg_log_sigmoid(net.param(W_P)).unwrap();
        let l = g.weighted_sum(vec![(e1, 1.0), (e2, 0.5), (nlp, 2.0)]).unwrap();
        let grads = g.backward(l).unwrap();
        for name in [
            "conv_interp_1.w",
            "conv_interp_2.b",
            "conv_ordin.w",
            "fc_dec_1.w",
            "fc_dec_2.b",
            W_P,
        ] {
            let id = net.param(name);
            let analytic = grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(net.params.value(id).shape()));
            let base = net.params.value(id).clone();
            let numeric = finite_difference_grad(
                |v| {
                    let mut n2 = net.clone();
                    *n2.params.value_mut(id) = v.clone();
                    objective(&n2, &x, &t1, &t2)
                },
                &base,
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
        assert!(grads.param(net.param("head.w")).is_none());
    }

    #[test]
    fn filter_gradient_never_reaches_ordinary_track() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = ExplainerNet::random(small_config(), 9).unwrap();
        let x = random_input(&mut rng, &net.config);
        let mut g = Graph::new(&net.params);
        let n = net.encoder_forward(&mut g, &x).unwrap();
        let inject = |t: &Tensor, rng: &mut ChaCha8Rng| Tensor::from_fn(t.shape(), |_| rng.random::<f64>() - 0.5);
        let a = inject(g.value(n.interp1), &mut rng);
        let b = inject(g.value(n.interp2_masked), &mut rng);
        let grads = g
            .backward_with(None, vec![(n.interp1, a), (n.interp2_masked, b)])
            .unwrap();
        for name in ["conv_ordin.w", "conv_ordin.b", "fc_dec_1.w", W_P] {
            let g = grads.param(net.param(name));
            assert!(g.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)), "{name}");
        }
        assert!(grads.param(net.param("conv_interp_1.w")).is_some());
    }
}
