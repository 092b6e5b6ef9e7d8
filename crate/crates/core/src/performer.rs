//! The performer: a small four-conv-layer classifier whose `relu3` maps
//! (8x8x32 for 64x64 inputs) are the explained target layer.
//!
//! ```text
//! conv1 5x5/2 -> relu -> pool 2x2      64 -> 32 -> 16
//! conv2 3x3   -> relu -> pool 2x2      16 -> 8
//! conv3 3x3   -> relu3                 target layer, 8x8
//! conv4 3x3   -> relu4 -> pool 2x2     top conv layer, last pool -> 4x4
//! fc6 -> relu -> fc7 -> relu -> head
//! ```

use log::info;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::optim::{accumulate_grads, scale_grads, Sgd};
use crate::rng;
use crate::synth::SynthSample;
use crate::tensor::Tensor;

/// Window and stride of the pooling layer after the top conv layer.
pub const LAST_POOL: (usize, usize) = (2, 2);

#[derive(Debug, Clone, PartialEq)]
pub struct PerformerConfig {
    pub image_size: usize,
    /// Output channels of conv1..conv4.
    pub channels: [usize; 4],
    pub fc_width: usize,
    pub num_classes: usize,
}

impl PerformerConfig {
    pub fn new(num_classes: usize) -> Self {
        PerformerConfig {
            image_size: 64,
            channels: [8, 16, 32, 32],
            fc_width: 128,
            num_classes,
        }
    }

    /// Side of the target (and top conv) feature maps.
    pub fn target_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn target_channels(&self) -> usize {
        self.channels[2]
    }

    /// Length of the flattened input to fc6.
    pub fn fc6_input(&self) -> usize {
        let s = self.target_side() / LAST_POOL.1;
        s * s * self.channels[3]
    }

    /// Cumulative stride and offset of target-layer units in image pixels.
    pub fn target_geometry(&self) -> LayerGeometry {
        LayerGeometry {
            stride: (self.image_size / self.target_side()) as f64,
            offset: 0.0,
        }
    }
}

/// Maps feature-map units to image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGeometry {
    pub stride: f64,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct PerformerNet {
    pub config: PerformerConfig,
    pub params: ParamStore,
}

/// Activations captured from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub sample_id: String,
    pub label: usize,
    /// Target layer (relu3), `[L, L, D]`.
    pub target: Tensor,
    /// Top conv layer (relu4), `[L, L, D]`.
    pub top: Tensor,
    pub fc6: Tensor,
    pub fc7: Tensor,
    pub logits: Tensor,
}

pub(crate) struct PerformerNodes {
    pub target: NodeId,
    pub top: NodeId,
    pub fc6: NodeId,
    pub fc7: NodeId,
    pub logits: NodeId,
}

pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl PerformerNet {
    pub fn new(config: PerformerConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0x5045_5246);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let k = if i == 0 { 5 } else { 3 };
            params.add(
                format!("conv{}.w", i + 1),
                he_normal(&[k, k, cin, cout], k * k * cin, &mut rng),
            );
            params.add(format!("conv{}.b", i + 1), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let fcw = config.fc_width;
        let fc6_in = config.fc6_input();
        params.add("fc6.w", he_normal(&[fcw, fc6_in], fc6_in, &mut rng));
        params.add("fc6.b", Tensor::zeros(&[fcw]));
        params.add("fc7.w", he_normal(&[fcw, fcw], fcw, &mut rng));
        params.add("fc7.b", Tensor::zeros(&[fcw]));
        params.add(
            "head.w",
            he_normal(&[config.num_classes, fcw], fcw, &mut rng).scale(0.5),
        );
        params.add("head.b", Tensor::zeros(&[config.num_classes]));
        PerformerNet { config, params }
    }

    /// Rebuilds a performer from a parameter table, checking every shape.
    pub fn from_params(config: PerformerConfig, params: ParamStore) -> Result<Self> {
        let reference = PerformerNet::new(config.clone(), 0);
        for (_, p) in reference.params.iter() {
            let got = params
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing performer tensor {}", p.name)))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "performer tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(PerformerNet { config, params })
    }

    pub fn param(&self, name: &str) -> ParamId {
        self.params.id(name).expect("performer parameter")
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::shape(
                "performer",
                format!("image {:?}, expected [{s}, {s}, 3]", image.shape()),
            ));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<PerformerNodes> {
        self.check_image(image)?;
        let x = g.input(image.map(|v| v - 0.5), false)?;
        let c1 = g.conv2d(x, self.param("conv1.w"), self.param("conv1.b"), 2, 2)?;
        let r1 = g.relu(c1)?;
        let p1 = g.maxpool2d(r1, 2, 2)?;
        let c2 = g.conv2d(p1, self.param("conv2.w"), self.param("conv2.b"), 1, 1)?;
        let r2 = g.relu(c2)?;
        let p2 = g.maxpool2d(r2, 2, 2)?;
        let c3 = g.conv2d(p2, self.param("conv3.w"), self.param("conv3.b"), 1, 1)?;
        let target = g.relu(c3)?;
        let c4 = g.conv2d(target, self.param("conv4.w"), self.param("conv4.b"), 1, 1)?;
        let top = g.relu(c4)?;
        let p4 = g.maxpool2d(top, LAST_POOL.0, LAST_POOL.1)?;
        let flat = g.flatten(p4)?;
        let (fc6, fc7, logits) = self.head_forward(g, flat)?;
        Ok(PerformerNodes {
            target,
            top,
            fc6,
            fc7,
            logits,
        })
    }

    fn head_forward(&self, g: &mut Graph<'_>, flat: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let f6 = g.linear(flat, self.param("fc6.w"), self.param("fc6.b"))?;
        let fc6 = g.relu(f6)?;
        let f7 = g.linear(fc6, self.param("fc7.w"), self.param("fc7.b"))?;
        let fc7 = g.relu(f7)?;
        let logits = g.linear(fc7, self.param("head.w"), self.param("head.b"))?;
        Ok((fc6, fc7, logits))
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureDump> {
        let mut g = Graph::new(&self.params);
        let n = self.forward(&mut g, image)?;
        Ok(FeatureDump {
            sample_id: String::new(),
            label: 0,
            target: g.value(n.target).clone(),
            top: g.value(n.top).clone(),
            fc6: g.value(n.fc6).clone(),
            fc7: g.value(n.fc7).clone(),
            logits: g.value(n.logits).clone(),
        })
    }

    pub fn extract_sample(&self, sample: &SynthSample) -> Result<FeatureDump> {
        let mut d = self.extract_features(&sample.image)?;
        d.sample_id = sample.id.clone();
        d.label = sample.label;
        Ok(d)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.extract_features(image)?.logits)
    }

    /// Classifier head applied to an fc7 activation.
    pub fn head_logits(&self, fc7: &Tensor) -> Result<Tensor> {
        crate::autodiff::kernels::linear(
            fc7,
            self.params.value(self.param("head.w")),
            self.params.value(self.param("head.b")),
        )
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.logits(image)?.argmax())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformerTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epoch (1-based) from which the learning rate is multiplied by 0.1.
    pub decay_epoch: usize,
    pub seed: u64,
}

impl Default for PerformerTrainConfig {
    fn default() -> Self {
        PerformerTrainConfig {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            decay_epoch: 20,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformerEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub fn train_performer(
    samples: &[SynthSample],
    num_classes: usize,
    cfg: &PerformerTrainConfig,
) -> Result<(PerformerNet, Vec<PerformerEpoch>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("performer training needs samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
        return Err(Error::Dataset(format!("label {} of {} out of range", s.label, s.id)));
    }
    let image_size = samples[0].image.shape()[0];
    let mut config = PerformerConfig::new(num_classes);
    config.image_size = image_size;
    let mut net = PerformerNet::new(config, cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        opt.lr = if epoch >= cfg.decay_epoch { cfg.lr * 0.1 } else { cfg.lr };
        let mut shuffle = rng::stream(cfg.seed, 0x5348_0000 + epoch as u64);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Vec::new();
            for &i in batch {
                let s = &samples[i];
                let mut g = Graph::new(&net.params);
                let n = net.forward(&mut g, &s.image)?;
                if g.value(n.logits).argmax() == s.label {
                    correct += 1;
                }
                let ce = g.softmax_cross_entropy(n.logits, s.label)?;
                let l = g.value(ce).item();
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "performer loss diverged at epoch {epoch} on {}",
                        s.id
                    )));
                }
                loss_sum += l;
                accumulate_grads(&mut grads, g.backward(ce)?.into_params());
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut net.params, &grads);
        }
        let rec = PerformerEpoch {
            epoch,
            lr: opt.lr,
            loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        };
        info!(
            "performer epoch {epoch}: loss {:.4} train acc {:.4}",
            rec.loss, rec.train_accuracy
        );
        history.push(rec);
    }
    Ok((net, history))
}

/// Fraction of samples the performer misclassifies.
pub fn error_rate(net: &PerformerNet, samples: &[SynthSample]) -> Result<f64> {
    let mut wrong = 0usize;
    for s in samples {
        if net.predict(&s.image)? != s.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len().max(1) as f64)
}
