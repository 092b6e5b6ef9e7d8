#![allow(dead_code)]

use explainer::autodiff::{finite_difference_grad, max_relative_error, Graph, NodeId, ParamId, ParamStore};
use explainer::error::Result;
use explainer::explainer::{ExplainerConfig, ExplainerNet, NormLayerState, W_P};
use explainer::filter_loss::{entropy_decomposition, filter_loss};
use explainer::performer::FeatureDump;
use explainer::templates::TemplateBank;
use explainer::tensor::Tensor;
use explainer::trainer::{FilterGradient, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

type Build = dyn Fn(&mut Graph, NodeId, &[ParamId]) -> Result<NodeId>;

/// Builds `sum(op(x) * r)` and compares the gradient with respect to `x` and
/// every parameter against central differences.
fn check_op(rng: &mut ChaCha8Rng, x: Tensor, params: Vec<Tensor>, build: &Build) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t))
        .collect();
    let probe = {
        let mut g = Graph::new(&store);
        let xi = g.input(x.clone(), false).unwrap();
        let out = build(&mut g, xi, &ids).unwrap();
        g.value(out).shape().to_vec()
    };
    let r = uniform(rng, &probe);
    let objective = |store: &ParamStore, x: &Tensor| -> f64 {
        let mut g = Graph::new(store);
        let xi = g.input(x.clone(), true).unwrap();
        let out = build(&mut g, xi, &ids).unwrap();
        let y = g.mul_const(out, r.clone()).unwrap();
        let s = g.sum(y).unwrap();
        g.value(s).item()
    };
    let mut g = Graph::new(&store);
    let xi = g.input(x.clone(), true).unwrap();
    let out = build(&mut g, xi, &ids).unwrap();
    let y = g.mul_const(out, r.clone()).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();

    let eps = 1e-6;
    let mut worst = 0.0f64;
    let numeric = finite_difference_grad(|v| objective(&store, v), &x, eps).unwrap();
    let analytic = grads.node(xi).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    for &id in &ids {
        let numeric = finite_difference_grad(
            |v| {
                let mut s2 = store.clone();
                *s2.value_mut(id) = v.clone();
                objective(&s2, &x)
            },
            store.value(id),
            eps,
        )
        .unwrap();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

/// Largest relative gradient error of every differentiable op for one seed.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let hwc = |rng: &mut ChaCha8Rng| uniform(rng, &[5, 5, 2]);

    let (x, w, b) = (hwc(&mut rng), uniform(&mut rng, &[3, 3, 2, 3]), uniform(&mut rng, &[3]));
    out.push((
        "conv2d same",
        check_op(&mut rng, x, vec![w, b], &|g, x, p| g.conv2d(x, p[0], p[1], 1, 1)),
    ));
    let (x, w, b) = (hwc(&mut rng), uniform(&mut rng, &[3, 3, 2, 2]), uniform(&mut rng, &[2]));
    out.push((
        "conv2d strided",
        check_op(&mut rng, x, vec![w, b], &|g, x, p| g.conv2d(x, p[0], p[1], 0, 2)),
    ));
    let (x, w, b) = (
        uniform(&mut rng, &[6]),
        uniform(&mut rng, &[4, 6]),
        uniform(&mut rng, &[4]),
    );
    out.push((
        "linear",
        check_op(&mut rng, x, vec![w, b], &|g, x, p| g.linear(x, p[0], p[1])),
    ));
    let x = hwc(&mut rng);
    out.push(("relu", check_op(&mut rng, x, vec![], &|g, x, _| g.relu(x))));
    let x = uniform(&mut rng, &[4, 4, 3]);
    out.push((
        "maxpool2d",
        check_op(&mut rng, x, vec![], &|g, x, _| g.maxpool2d(x, 2, 2)),
    ));
    let x = hwc(&mut rng);
    out.push(("flatten", check_op(&mut rng, x, vec![], &|g, x, _| g.flatten(x))));
    let x = hwc(&mut rng);
    let s: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 3.0).collect();
    out.push((
        "channel_scale",
        check_op(&mut rng, x, vec![], &move |g, x, _| g.channel_scale(x, s.clone())),
    ));
    let (x, f) = (hwc(&mut rng), hwc(&mut rng));
    out.push((
        "mul_const",
        check_op(&mut rng, x, vec![], &move |g, x, _| g.mul_const(x, f.clone())),
    ));
    let (x, other, wp) = (
        hwc(&mut rng),
        hwc(&mut rng),
        Tensor::scalar(rng.random::<f64>() * 4.0 - 2.0),
    );
    out.push((
        "mix",
        check_op(&mut rng, x, vec![wp], &move |g, x, p| {
            let o = g.input(other.clone(), false)?;
            g.mix(x, o, p[0])
        }),
    ));
    let (x, t) = (uniform(&mut rng, &[7]), uniform(&mut rng, &[7]));
    out.push((
        "squared_error",
        check_op(&mut rng, x, vec![], &move |g, x, _| g.squared_error(x, t.clone())),
    ));
    let x = uniform(&mut rng, &[5]).scale(3.0);
    let label = rng.random_range(0..5);
    out.push((
        "softmax_cross_entropy",
        check_op(&mut rng, x, vec![], &move |g, x, _| g.softmax_cross_entropy(x, label)),
    ));
    let wp = Tensor::scalar(rng.random::<f64>() * 8.0 - 4.0);
    out.push((
        "neg_log_sigmoid",
        check_op(&mut rng, Tensor::zeros(&[1]), vec![wp], &|g, _, p| {
            g.neg_log_sigmoid(p[0])
        }),
    ));
    let x = uniform(&mut rng, &[3, 2]);
    let (c1, c2) = (rng.random::<f64>(), -rng.random::<f64>());
    out.push((
        "sum and weighted_sum",
        check_op(&mut rng, x, vec![], &move |g, x, _| {
            let s = g.sum(x)?;
            let q = g.squared_error(x, Tensor::zeros(&[3, 2]))?;
            g.weighted_sum(vec![(s, c1), (q, c2)])
        }),
    ));
    out
}

pub fn small_explainer_config() -> ExplainerConfig {
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

pub fn random_dumps(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureDump> {
    (0..n)
        .map(|i| FeatureDump {
            sample_id: format!("s{i}"),
            label: i % 2,
            target: Tensor::from_fn(&[4, 4, 3], |_| rng.random::<f64>()),
            top: Tensor::zeros(&[4, 4, 3]),
            fc6: Tensor::from_fn(&[6], |_| rng.random::<f64>()),
            fc7: Tensor::from_fn(&[5], |_| rng.random::<f64>()),
            logits: Tensor::zeros(&[2]),
        })
        .collect()
}

/// Relative error of the full objective gradient (exact filter loss) on a
/// small random explainer, over a random subset of parameters.
pub fn end_to_end_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut net = ExplainerNet::random(small_explainer_config(), seed).unwrap();
    let dumps = random_dumps(&mut rng, 6);
    for s in net.filters_interp1.iter_mut().chain(net.filters_interp2.iter_mut()) {
        s.lambda = rng.random::<f64>() * 2.0;
    }
    let ai: Vec<f64> = (0..3).map(|_| 0.005 + rng.random::<f64>() * 0.05).collect();
    let ao: Vec<f64> = (0..3).map(|_| 0.5 + rng.random::<f64>()).collect();
    net.norm_interp = NormLayerState::from_parts(ai, 0.99, false, false);
    net.norm_ordin = NormLayerState::from_parts(ao, 0.99, false, false);
    // zero biases put fully masked units exactly on the relu kink
    let biases: Vec<_> = net
        .params
        .iter()
        .filter(|(_, p)| p.name.ends_with(".b") && !p.frozen)
        .map(|(id, _)| id)
        .collect();
    for id in biases {
        let shape = net.params.value(id).shape().to_vec();
        *net.params.value_mut(id) = Tensor::from_fn(&shape, |_| rng.random::<f64>() * 0.2 - 0.1);
    }
    let wp = net.param(W_P);
    *net.params.value_mut(wp) = Tensor::scalar(rng.random::<f64>() * 2.0 - 1.0);
    let cfg = TrainConfig {
        lambda_l: Some((rng.random::<f64>() + 0.5, rng.random::<f64>() + 0.5)),
        eta: 1.0 + rng.random::<f64>() * 10.0,
        batch_size: 8,
        filter_gradient: FilterGradient::Exact,
        ..TrainConfig::default()
    };
    let batch: Vec<usize> = (0..dumps.len()).collect();
    let ev = Trainer::with_net(dumps.clone(), net.clone(), cfg.clone())
        .unwrap()
        .evaluate(&batch, false)
        .unwrap();
    // The filter loss is detached from the ordinary track, so its parameters
    // are checked against the objective without filter terms.
    let mut names: Vec<String> = net
        .params
        .iter()
        .filter(|(_, p)| !p.frozen && !p.name.starts_with("conv_ordin"))
        .map(|(_, p)| p.name.clone())
        .collect();
    names.sort();
    let no_filter = TrainConfig {
        filter_loss: false,
        ..cfg.clone()
    };
    let ev_nf = Trainer::with_net(dumps.clone(), net.clone(), no_filter.clone())
        .unwrap()
        .evaluate(&batch, false)
        .unwrap();
    let ordin = if rng.random::<bool>() {
        "conv_ordin.w"
    } else {
        "conv_ordin.b"
    };
    let mut picks: Vec<(String, &TrainConfig, &Vec<Option<Tensor>>)> = (0..3)
        .map(|_| (names[rng.random_range(0..names.len())].clone(), &cfg, &ev.grads))
        .collect();
    picks.push((ordin.to_string(), &no_filter, &ev_nf.grads));
    let mut worst = 0.0f64;
    for (name, c, grads) in picks {
        let id = net.param(&name);
        let numeric = finite_difference_grad(
            |v| {
                let mut n2 = net.clone();
                *n2.params.value_mut(id) = v.clone();
                let t = Trainer::with_net(dumps.clone(), n2, c.clone()).unwrap();
                t.evaluate(&batch, false).unwrap().breakdown.total
            },
            net.params.value(id),
            1e-6,
        )
        .unwrap();
        let analytic = grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(net.params.value(id).shape()));
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-4));
    }
    worst
}

/// Random feature maps of one filter for the filter-loss oracle.
pub fn random_filter_instance(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, TemplateBank) {
    let side = rng.random_range(2..=3);
    let n = rng.random_range(2..=5);
    let scale = [0.5, 5.0, 50.0][rng.random_range(0..3)];
    let maps = (0..n)
        .map(|_| Tensor::from_fn(&[side, side], |_| rng.random::<f64>() * scale))
        .collect();
    (maps, TemplateBank::with_defaults(side).unwrap())
}

/// -MI by explicit enumeration of every (template, map) pair.
pub fn brute_force_loss(maps: &[Tensor], bank: &TemplateBank) -> f64 {
    let nt = bank.len();
    let pt = 1.0 / nt as f64;
    let fit = |x: &Tensor, t: &Tensor| x.data().iter().zip(t.data()).map(|(a, b)| a * b).sum::<f64>().exp();
    let z: Vec<f64> = (0..nt)
        .map(|t| maps.iter().map(|x| fit(x, bank.template(t))).sum())
        .collect();
    let cond = |x: &Tensor, t: usize| fit(x, bank.template(t)) / z[t];
    let px: Vec<f64> = maps.iter().map(|x| (0..nt).map(|t| pt * cond(x, t)).sum()).collect();
    let mut mi = 0.0;
    for t in 0..nt {
        for (k, x) in maps.iter().enumerate() {
            let c = cond(x, t);
            mi += pt * c * (c / px[k]).ln();
        }
    }
    -mi
}

/// (|loss - brute force|, |loss - decomposition total|) for one instance.
pub fn filter_loss_oracle_errors(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (maps, bank) = random_filter_instance(rng);
    let loss = filter_loss(&maps, &bank).unwrap();
    let brute = brute_force_loss(&maps, &bank);
    let dec = entropy_decomposition(&maps, &bank).unwrap();
    ((loss - brute).abs(), (loss - dec.total()).abs())
}
