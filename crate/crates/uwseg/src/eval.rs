//! Metrics and cost accounting: confusion matrix, per-class IoU and mIoU,
//! parameter and analytic FLOP counting with per-module attribution, and
//! wall-clock throughput measurement.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::IGNORE_LABEL;
use crate::model::Model;
use crate::tensor::{flops, Tensor};

// ---------------------------------------------------------------------------
// Confusion matrix and mIoU
// ---------------------------------------------------------------------------

/// Pixel-pair counts; rows index ground truth, columns index prediction.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_cls: usize) -> ConfusionMatrix {
        ConfusionMatrix { n: n_cls, counts: vec![0; n_cls * n_cls] }
    }

    pub fn n_cls(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add pixel pairs; entries equal to `ignore` in the ground truth are
    /// skipped. Out-of-range labels are contract errors carrying the pixel
    /// index.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        self.accumulate_masked(pred, gt, ignore, None)
    }

    /// Like [`ConfusionMatrix::accumulate`] but restricted to pixels where
    /// `mask` is true (used for boundary-band evaluation).
    pub fn accumulate_masked(
        &mut self,
        pred: &[u8],
        gt: &[u8],
        ignore: u8,
        mask: Option<&[bool]>,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "confusion: prediction length {} != ground truth length {}",
                pred.len(),
                gt.len()
            )));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore {
                continue;
            }
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            if (p as usize) >= self.n || (g as usize) >= self.n {
                return Err(Error::Contract(format!(
                    "label out of range at pixel {i}: pred {p}, gt {g}, n_cls {}",
                    self.n
                )));
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge counts from a parallel shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU (None for classes absent from both prediction and ground
/// truth) and their mean. Errors when every union is empty.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let n = cm.n_cls();
    let mut per_class = Vec::with_capacity(n);
    let (mut sum, mut defined) = (0.0f64, 0usize);
    for c in 0..n {
        let diag = cm.get(c, c);
        let row: u64 = (0..n).map(|j| cm.get(c, j)).sum();
        let col: u64 = (0..n).map(|j| cm.get(j, c)).sum();
        let union = row + col - diag;
        if union == 0 {
            per_class.push(None);
            continue;
        }
        let iou = diag as f64 / union as f64;
        per_class.push(Some(iou));
        sum += iou;
        defined += 1;
    }
    if defined == 0 {
        return Err(Error::Metric("mIoU undefined: every class union is empty".into()));
    }
    Ok((per_class, sum / defined as f64))
}

/// Argmax over the class axis of [B,n_cls,H,W] logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
    let v = logits.data();
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        for i in 0..hw {
            let mut best = 0usize;
            let mut best_v = v[(bi * n) * hw + i];
            for c in 1..n {
                let val = v[(bi * n + c) * hw + i];
                if val > best_v {
                    best_v = val;
                    best = c;
                }
            }
            out[bi * hw + i] = best as u8;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Boundary band
// ---------------------------------------------------------------------------

/// Pixels within L1 distance `radius` of a 4-neighbor class boundary.
pub fn boundary_band(labels: &[u8], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut band = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = labels[y * w + x];
            let boundary = (y > 0 && labels[(y - 1) * w + x] != v)
                || (y + 1 < h && labels[(y + 1) * w + x] != v)
                || (x > 0 && labels[y * w + x - 1] != v)
                || (x + 1 < w && labels[y * w + x + 1] != v);
            band[y * w + x] = boundary;
        }
    }
    for _ in 0..radius {
        let prev = band.clone();
        for y in 0..h {
            for x in 0..w {
                if prev[y * w + x]
                    || (y > 0 && prev[(y - 1) * w + x])
                    || (y + 1 < h && prev[(y + 1) * w + x])
                    || (x > 0 && prev[y * w + x - 1])
                    || (x + 1 < w && prev[y * w + x + 1])
                {
                    band[y * w + x] = true;
                }
            }
        }
    }
    band
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct EvalReport {
    pub cm: ConfusionMatrix,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// mIoU restricted to the boundary band, when requested.
    pub band_miou: Option<f64>,
}

/// Run eval-mode inference over samples and accumulate pixel metrics.
/// `band_radius` additionally scores only pixels near class boundaries.
pub fn evaluate(model: &Model, samples: &[Sample], band_radius: Option<usize>) -> Result<EvalReport> {
    let n_cls = model.cfg.n_cls;
    let mut cm = ConfusionMatrix::new(n_cls);
    let mut band_cm = ConfusionMatrix::new(n_cls);
    for s in samples {
        let img = s.image.reshape(&[1, 3, s.h, s.w])?;
        let out = model.forward_eval(&img)?;
        let pred = argmax_labels(&out.full);
        cm.accumulate(&pred, &s.label, IGNORE_LABEL)?;
        if let Some(r) = band_radius {
            let band = boundary_band(&s.label, s.h, s.w, r);
            band_cm.accumulate_masked(&pred, &s.label, IGNORE_LABEL, Some(&band))?;
        }
    }
    let (per_class, mean) = miou(&cm)?;
    let band_miou = match band_radius {
        Some(_) => Some(miou(&band_cm)?.1),
        None => None,
    };
    Ok(EvalReport { cm, per_class, miou: mean, band_miou })
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameter and FLOP totals at a stated input size, with per-module
/// attribution that sums exactly to the totals.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub input: (usize, usize),
    pub per_module: Vec<ModuleCost>,
}

/// Parameter totals grouped by the first path segment of each name.
pub fn count_params(model: &Model) -> (u64, Vec<(String, u64)>) {
    let mut by_module: Vec<(String, u64)> = Vec::new();
    let mut total = 0u64;
    for p in model.named_params() {
        let seg = p.name.split('.').next().unwrap_or("other").to_string();
        let n = p.tensor.numel() as u64;
        total += n;
        match by_module.iter_mut().find(|(name, _)| *name == seg) {
            Some((_, acc)) => *acc += n,
            None => by_module.push((seg, n)),
        }
    }
    (total, by_module)
}

/// Analytic FLOPs of one eval-mode forward pass at the given input size:
/// 2 FLOPs per multiply-accumulate for matmul/conv, 1 op per element for
/// elementwise, normalization, and resampling work.
pub fn count_flops(model: &Model, h: usize, w: usize) -> Result<CostReport> {
    count_flops_batched(model, 1, h, w)
}

pub fn count_flops_batched(model: &Model, batch: usize, h: usize, w: usize) -> Result<CostReport> {
    let input = Tensor::zeros(&[batch, 3, h, w]);
    let (out, total, by_scope) = flops::count(|| model.forward_eval(&input));
    out?;
    let (params_total, params_by) = count_params(model);
    let mut per_module: Vec<ModuleCost> = Vec::new();
    for (scope, fl) in by_scope {
        let params = params_by
            .iter()
            .find(|(n, _)| *n == scope)
            .map(|(_, p)| *p)
            .unwrap_or(0);
        per_module.push(ModuleCost { name: scope, params, flops: fl });
    }
    // modules with parameters but no counted work (e.g. unused paths)
    for (name, p) in &params_by {
        if !per_module.iter().any(|m| m.name == *name) {
            per_module.push(ModuleCost { name: name.clone(), params: *p, flops: 0 });
        }
    }
    Ok(CostReport { params: params_total, flops: total, input: (h, w), per_module })
}

/// Median images/second of eval-mode forward passes, after warmup. Returns
/// the throughput and a hardware descriptor; absolute numbers are only
/// meaningful relative to other measurements on the same machine.
pub fn measure_fps(model: &Model, h: usize, w: usize, warmup: usize, trials: usize) -> Result<(f64, String)> {
    let input = Tensor::zeros(&[1, 3, h, w]);
    for _ in 0..warmup {
        model.forward_eval(&input)?;
    }
    let mut times: Vec<f64> = Vec::with_capacity(trials.max(1));
    for _ in 0..trials.max(1) {
        let t0 = std::time::Instant::now();
        model.forward_eval(&input)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let median = times[times.len() / 2];
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let hw = format!("{}-{}, {} hw threads", std::env::consts::OS, std::env::consts::ARCH, threads);
    Ok((1.0 / median, hw))
}

// ---------------------------------------------------------------------------
// Report formatting
// ---------------------------------------------------------------------------

pub fn report_table(report: &EvalReport, class_names: &[String], cost: Option<&CostReport>) -> String {
    let mut out = String::new();
    out.push_str("class                iou\n");
    for (i, iou) in report.per_class.iter().enumerate() {
        let name = class_names.get(i).map(|s| s.as_str()).unwrap_or("?");
        match iou {
            Some(v) => out.push_str(&format!("{name:<20} {v:.4}\n")),
            None => out.push_str(&format!("{name:<20} (absent)\n")),
        }
    }
    out.push_str(&format!("mIoU: {:.4}\n", report.miou));
    if let Some(b) = report.band_miou {
        out.push_str(&format!("boundary-band mIoU: {b:.4}\n"));
    }
    if let Some(c) = cost {
        out.push_str(&format!(
            "params: {:.2} M, GFLOPs @ {}x{}: {:.3}\n",
            c.params as f64 / 1e6,
            c.input.0,
            c.input.1,
            c.flops as f64 / 1e9
        ));
        for m in &c.per_module {
            out.push_str(&format!(
                "  {:<10} {:>10.2} MFLOPs {:>10.2} kparams\n",
                m.name,
                m.flops as f64 / 1e6,
                m.params as f64 / 1e3
            ));
        }
    }
    out
}

pub fn report_csv(
    report: &EvalReport,
    class_names: &[String],
    cost: Option<&CostReport>,
    fps: Option<f64>,
) -> String {
    let mut out = String::from("metric,value\n");
    for (i, iou) in report.per_class.iter().enumerate() {
        let name = class_names.get(i).map(|s| s.as_str()).unwrap_or("?");
        match iou {
            Some(v) => out.push_str(&format!("iou_{name},{v:.6}\n")),
            None => out.push_str(&format!("iou_{name},\n")),
        }
    }
    out.push_str(&format!("miou,{:.6}\n", report.miou));
    if let Some(b) = report.band_miou {
        out.push_str(&format!("band_miou,{b:.6}\n"));
    }
    if let Some(c) = cost {
        out.push_str(&format!("params,{}\n", c.params));
        out.push_str(&format!("gflops_at_{}x{},{:.6}\n", c.input.0, c.input.1, c.flops as f64 / 1e9));
    }
    if let Some(f) = fps {
        out.push_str(&format!("fps,{f:.4}\n"));
    }
    out
}
