//! Part localization, location instability, receptive-field overlays,
//! grad-CAM and heatmap rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::explainer::ExplainerNet;
use crate::filter_loss::assign_category;
use crate::imageio;
use crate::performer::LayerGeometry;
use crate::synth::SynthSample;
use crate::templates::Unit;
use crate::tensor::Tensor;

/// Pixel `(x, y)` at the center of a unit's stride cell.
pub fn project_to_image(mu: Unit, geom: LayerGeometry) -> (f64, f64) {
    let s = geom.stride;
    (
        geom.offset + s * mu.col as f64 + s / 2.0,
        geom.offset + s * mu.row as f64 + s / 2.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRecord {
    pub filter: usize,
    pub sample: usize,
    pub unit: Unit,
    pub pixel: (f64, f64),
    pub peak: f64,
}

/// Localizes every channel of an `[L, L, D]` map at its highest unit.
pub fn localize(maps: &Tensor, sample: usize, geom: LayerGeometry) -> Vec<LocalizationRecord> {
    let (side, _, d) = maps.hwc();
    (0..d)
        .map(|f| {
            let ch = maps.channel(f);
            let idx = ch.argmax();
            let unit = Unit::from_index(idx, side);
            LocalizationRecord {
                filter: f,
                sample,
                unit,
                pixel: project_to_image(unit, geom),
                peak: ch.data()[idx],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityReport {
    /// `(filter, landmark, deviation)`.
    pub entries: Vec<(usize, String, f64)>,
    pub per_filter: Vec<(usize, f64)>,
    pub overall: f64,
    /// Category label assigned to each filter.
    pub categories: Vec<usize>,
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standard deviation of normalized part-landmark distances.
///
/// `records` hold localizations indexed into `samples`; `categories[f]` is
/// the label whose images are used for filter `f`.
pub fn location_instability(
    records: &[LocalizationRecord],
    samples: &[&SynthSample],
    categories: &[usize],
    diagonal: f64,
) -> Result<InstabilityReport> {
    if !(diagonal > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diagonal must be positive, got {diagonal}"
        )));
    }
    // filter -> landmark -> distances, landmarks in first-seen order
    let mut dist: BTreeMap<usize, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let s = samples
            .get(r.sample)
            .ok_or_else(|| Error::InvalidArgument(format!("record refers to sample {}", r.sample)))?;
        let Some(&cat) = categories.get(r.filter) else { continue };
        if s.label != cat {
            continue;
        }
        let per = dist.entry(r.filter).or_default();
        for lm in &s.landmarks {
            let d = ((r.pixel.0 - lm.x).powi(2) + (r.pixel.1 - lm.y).powi(2)).sqrt() / diagonal;
            match per.iter_mut().find(|(n, _)| *n == lm.name) {
                Some((_, v)) => v.push(d),
                None => per.push((lm.name.clone(), vec![d])),
            }
        }
    }
    let mut entries = Vec::new();
    let mut per_filter = Vec::new();
    for (f, lms) in dist {
        let mut devs = Vec::new();
        for (name, d) in lms {
            if d.len() < 2 {
                warn!("filter {f} landmark {name}: fewer than two samples, skipped");
                continue;
            }
            let dev = std_dev(&d);
            devs.push(dev);
            entries.push((f, name, dev));
        }
        if !devs.is_empty() {
            per_filter.push((f, devs.iter().sum::<f64>() / devs.len() as f64));
        }
    }
    let overall = if per_filter.is_empty() {
        f64::NAN
    } else {
        per_filter.iter().map(|(_, v)| v).sum::<f64>() / per_filter.len() as f64
    };
    Ok(InstabilityReport {
        entries,
        per_filter,
        overall,
        categories: categories.to_vec(),
    })
}

/// Category label per filter: the object category with the highest mean
/// positive activation mass. With a single category this is label 1.
pub fn filter_categories(maps: &[Tensor], labels: &[usize], num_labels: usize) -> Result<Vec<usize>> {
    let d = maps.first().map(|m| m.shape()[2]).unwrap_or(0);
    let k = num_labels.saturating_sub(1);
    let mut sums = vec![vec![(0.0, 0usize); k]; d];
    for (m, &l) in maps.iter().zip(labels) {
        if l == 0 || l > k {
            continue;
        }
        for (f, v) in crate::explainer::positive_mass(m).into_iter().enumerate() {
            sums[f][l - 1].0 += v;
            sums[f][l - 1].1 += 1;
        }
    }
    sums.into_iter()
        .map(|s| {
            let means: Vec<Option<f64>> = s.iter().map(|&(v, n)| (n > 0).then(|| v / n as f64)).collect();
            assign_category(&means).map(|c| c + 1)
        })
        .collect()
}

/// Instability of one layer given its `[L, L, D]` map for every sample.
pub fn layer_instability(
    maps: &[Tensor],
    samples: &[&SynthSample],
    num_labels: usize,
    geom: LayerGeometry,
    image_size: usize,
) -> Result<InstabilityReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let categories = filter_categories(maps, &labels, num_labels)?;
    let records: Vec<LocalizationRecord> = maps
        .iter()
        .enumerate()
        .flat_map(|(i, m)| localize(m, i, geom))
        .collect();
    location_instability(&records, samples, &categories, image_size as f64 * 2f64.sqrt())
}

/// Union of discs of `radius` pixels around every unit above `0.2 * max`.
pub fn round_rf_overlay(map: &Tensor, geom: LayerGeometry, radius: f64, image_size: usize) -> Result<Tensor> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if map.rank() != 2 {
        return Err(Error::shape("round_rf_overlay", format!("{:?}", map.shape())));
    }
    let side = map.shape()[1];
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Tensor::zeros(&[image_size, image_size]);
    if !(max > 0.0) {
        return Ok(out);
    }
    let centers: Vec<(f64, f64)> = map
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.2 * max)
        .map(|(i, _)| project_to_image(Unit::from_index(i, side), geom))
        .collect();
    for r in 0..image_size {
        for c in 0..image_size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if centers
                .iter()
                .any(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius)
            {
                out.data_mut()[r * image_size + c] = 1.0;
            }
        }
    }
    Ok(out)
}

/// `relu(sum_k w_k A_k)` with `w_k` the spatial mean of `dscore/dA_k`,
/// min-max normalized to `[0, 1]`.
pub fn grad_cam(activations: &Tensor, gradients: &Tensor) -> Result<Tensor> {
    if activations.shape() != gradients.shape() || activations.rank() != 3 {
        return Err(Error::shape(
            "grad_cam",
            format!("{:?} vs {:?}", activations.shape(), gradients.shape()),
        ));
    }
    let (h, w, d) = activations.hwc();
    let mut weights = vec![0.0; d];
    for (i, g) in gradients.data().iter().enumerate() {
        weights[i % d] += g;
    }
    weights.iter_mut().for_each(|v| *v /= (h * w) as f64);
    let mut cam = Tensor::zeros(&[h, w]);
    for p in 0..h * w {
        let s: f64 = (0..d).map(|k| weights[k] * activations.data()[p * d + k]).sum();
        cam.data_mut()[p] = s.max(0.0);
    }
    Ok(normalize_unit(&cam))
}

/// Min-max normalization; constant maps become zero.
pub fn normalize_unit(map: &Tensor) -> Tensor {
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - min) / (max - min))
}

/// grad-CAM of the explainer's masked conv-interp-2 maps for one class score
/// of the classifier head on top of the decoder.
pub fn explainer_grad_cam(explainer: &ExplainerNet, target: &Tensor, class: usize) -> Result<Tensor> {
    let mut g = Graph::new(&explainer.params);
    let nodes = explainer.encoder_forward(&mut g, target)?;
    let logits = explainer.head_logits(&mut g, nodes.fc_dec_2)?;
    let n = g.value(logits).len();
    if class >= n {
        return Err(Error::InvalidArgument(format!("class {class} out of {n}")));
    }
    let mut onehot = Tensor::zeros(&[n]);
    onehot.data_mut()[class] = 1.0;
    let grads = g.backward_with(None, vec![(logits, onehot)])?;
    let a = g.value(nodes.interp2_masked);
    let da = grads
        .node(nodes.interp2_masked)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(a.shape()));
    grad_cam(a, &da)
}

/// Nearest-neighbour upsampling of an `[L, L]` map to `[size, size]`.
pub fn upsample(map: &Tensor, size: usize) -> Tensor {
    let side = map.shape()[0];
    Tensor::from_fn(&[size, size], |i| {
        let (r, c) = (i / size, i % size);
        map.data()[(r * side / size) * side + c * side / size]
    })
}

/// Writes `map` as PGM and, given a base image, an overlay PPM
/// `0.5 * image + 0.5 * (heat, 0, 0)`.
pub fn render_heatmap(map: &Tensor, base: Option<&Tensor>, pgm: &Path, ppm: Option<&Path>) -> Result<()> {
    let size = base.map_or(map.shape()[0], |b| b.shape()[0]);
    let up = upsample(map, size);
    imageio::write_pgm(pgm, &up)?;
    if let (Some(base), Some(ppm)) = (base, ppm) {
        imageio::write_ppm(ppm, &overlay(&up, base))?;
    }
    Ok(())
}

pub fn overlay(heat: &Tensor, base: &Tensor) -> Tensor {
    let mut out = base.map(|v| 0.5 * v);
    for (p, &h) in heat.data().iter().enumerate() {
        out.data_mut()[p * 3] += 0.5 * h;
    }
    out
}

/// CSV with header `filter_id,landmark,deviation`, one row per
/// (filter, landmark), then `filter_id,mean,...` per filter and
/// `all,mean,...` overall.
pub fn report_csv(report: &InstabilityReport) -> String {
    let mut s = String::from("filter_id,landmark,deviation\n");
    for (f, lm, d) in &report.entries {
        let _ = writeln!(s, "{f},{lm},{d}");
    }
    for (f, d) in &report.per_filter {
        let _ = writeln!(s, "{f},mean,{d}");
    }
    let _ = writeln!(s, "all,mean,{}", report.overall);
    s
}

pub fn export_report(report: &InstabilityReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}
