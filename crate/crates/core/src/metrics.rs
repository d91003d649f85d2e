//! Binary segmentation metrics.
//!
//! Counting metrics take binary maps. AUC, E-measure and S-measure take
//! foreground probabilities. All maps are compared element by element;
//! metrics with spatial structure (S-measure, the Gaussian-weighted
//! F-measure) read the last two axes as `(H, W)` and need every leading axis
//! to have extent 1.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

/// Thresholds `k / 255`, `k = 0..=255`, used by AUC and the E-measure.
pub const THRESHOLDS: usize = 256;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn binary<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<Vec<bool>> {
    t.data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::invalid(format!("{what} is not binary: found value {v}")))
            }
        })
        .collect()
}

fn plane(shape: &[usize]) -> Result<(usize, usize)> {
    let r = shape.len();
    if r < 2 || shape[..r - 2].iter().any(|&d| d != 1) {
        return Err(Error::invalid(format!("expected a single (H, W) map, got shape {shape:?}")));
    }
    Ok((shape[r - 2], shape[r - 1]))
}

/// `1` where `p > threshold`; exact ties stay background.
pub fn binarize<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Tensor<T> {
    probs.map(|p| if p.as_f64() > threshold { T::one() } else { T::zero() })
}

pub fn confusion<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<Confusion> {
    ensure_same_shape("confusion", pred, reference)?;
    let p = binary("prediction", pred)?;
    let r = binary("reference", reference)?;
    let mut c = Confusion::default();
    for (&p, &r) in p.iter().zip(&r) {
        match (p, r) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Metrics whose denominator vanished and took their conventional value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Degenerate {
    pub se: bool,
    pub sp: bool,
    pub f1: bool,
    pub jaccard: bool,
    pub auc: bool,
    pub fbw: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.se || self.sp || self.f1 || self.jaccard || self.auc || self.fbw
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasicMetrics {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub f1: f64,
    pub jaccard: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: u64, den: u64, empty: f64) -> (f64, bool) {
    if den == 0 {
        (empty, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Sensitivity, specificity, accuracy, F1 and Jaccard. A vanishing
/// denominator yields 1 and sets the matching flag.
pub fn basic_metrics(c: &Confusion) -> BasicMetrics {
    let (se, dse) = ratio(c.tp, c.tp + c.fn_, 1.0);
    let (sp, dsp) = ratio(c.tn, c.tn + c.fp, 1.0);
    let (acc, _) = ratio(c.tp + c.tn, c.total(), 1.0);
    let (f1, df1) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0);
    let (jaccard, dj) = ratio(c.tp, c.tp + c.fp + c.fn_, 1.0);
    BasicMetrics {
        se,
        sp,
        acc,
        f1,
        jaccard,
        degenerate: Degenerate { se: dse, sp: dsp, f1: df1, jaccard: dj, ..Default::default() },
    }
}

/// A metric value and whether it came from a degenerate input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

/// Area under the ROC curve from a sweep of [`THRESHOLDS`] thresholds
/// `t = k/255` (positive when `p >= t`), closed with the `(0, 0)` point and
/// integrated with the trapezoid rule. A one-class reference scores 0.5 and
/// is flagged.
pub fn auc<T: Scalar>(probs: &Tensor<T>, reference: &Tensor<T>) -> Result<Scored> {
    ensure_same_shape("auc", probs, reference)?;
    let r = binary("reference", reference)?;
    let pos = r.iter().filter(|&&v| v).count();
    let neg = r.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(Scored { value: 0.5, degenerate: true });
    }
    // Bin k holds predictions in [k/255, (k+1)/255); counts at threshold k
    // are suffix sums over bins.
    let mut pos_bins = [0u64; THRESHOLDS];
    let mut neg_bins = [0u64; THRESHOLDS];
    for (&p, &g) in probs.data().iter().zip(&r) {
        let p = p.as_f64();
        let k = threshold_bin(p);
        if g {
            pos_bins[k] += 1;
        } else {
            neg_bins[k] += 1;
        }
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    for k in (0..THRESHOLDS).rev() {
        tp += pos_bins[k];
        fp += neg_bins[k];
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(Scored { value: area, degenerate: false })
}

/// Largest `k` with `k / 255 <= p`, clamped to `[0, 255]`.
fn threshold_bin(p: f64) -> usize {
    let top = THRESHOLDS - 1;
    let mut k = (p * top as f64).floor().clamp(0.0, top as f64) as usize;
    // Guard against `floor` landing one bin off at exact multiples.
    while k < top && threshold(k + 1) <= p {
        k += 1;
    }
    while k > 0 && threshold(k) > p {
        k -= 1;
    }
    k
}

fn threshold(k: usize) -> f64 {
    k as f64 / (THRESHOLDS - 1) as f64
}

/// Error weighting of the weighted F-measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    /// Every error counts once; the measure reduces to the count-based F_β.
    Uniform,
    /// Non-canonical neighbourhood weighting: foreground errors are damped by
    /// a normalized Gaussian blur of the error map, background errors are
    /// amplified with distance to the reference foreground.
    Gaussian { sigma: f64, size: usize },
}

impl Weighting {
    pub const GAUSSIAN_DEFAULT: Weighting = Weighting::Gaussian { sigma: 5.0, size: 7 };
}

/// Weighted F_β of a binary prediction. A zero denominator scores 0 and is
/// flagged.
pub fn weighted_fscore<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, beta: f64, weighting: Weighting) -> Result<Scored> {
    if beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let b2 = beta * beta;
    match weighting {
        Weighting::Uniform => {
            let c = confusion(pred, reference)?;
            let den = (1.0 + b2) * c.tp as f64 + b2 * c.fn_ as f64 + c.fp as f64;
            if den == 0.0 {
                return Ok(Scored { value: 0.0, degenerate: true });
            }
            Ok(Scored { value: (1.0 + b2) * c.tp as f64 / den, degenerate: false })
        }
        Weighting::Gaussian { sigma, size } => {
            ensure_same_shape("weighted_fscore", pred, reference)?;
            let (h, w) = plane(pred.shape())?;
            let p = binary("prediction", pred)?;
            let g = binary("reference", reference)?;
            let e: Vec<f64> = p.iter().zip(&g).map(|(&a, &b)| if a != b { 1.0 } else { 0.0 }).collect();
            let blurred = gaussian_blur(&e, h, w, sigma, size);
            let dist = distance_to_foreground(&g, h, w);
            let mut tpw = 0.0;
            let mut fpw = 0.0;
            let mut fg = 0.0;
            for i in 0..e.len() {
                if g[i] {
                    let ew = e[i].min(blurred[i]);
                    fg += 1.0;
                    tpw += 1.0 - ew;
                } else {
                    let importance = 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp();
                    fpw += e[i] * importance;
                }
            }
            if fg == 0.0 || tpw + fpw == 0.0 {
                return Ok(Scored { value: 0.0, degenerate: true });
            }
            let recall = tpw / fg;
            let precision = tpw / (tpw + fpw);
            let den = b2 * precision + recall;
            if den == 0.0 {
                return Ok(Scored { value: 0.0, degenerate: true });
            }
            Ok(Scored { value: (1.0 + b2) * precision * recall / den, degenerate: false })
        }
    }
}

fn gaussian_blur(x: &[f64], h: usize, w: usize, sigma: f64, size: usize) -> Vec<f64> {
    let r = size as isize / 2;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut s = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let d = t as isize - r;
                    let (y, x) = if horizontal { (i, j + d) } else { (i + d, j) };
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        s += kv * src[(y * w as isize + x) as usize];
                    }
                }
                out[(i * w as isize + j) as usize] = s;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Euclidean distance from every pixel to the nearest `true` pixel (0 on
/// them, `+inf` everywhere when there is none).
fn distance_to_foreground(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut f: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { INF }).collect();
    let mut col = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = f[i * w + j];
        }
        let d = edt_1d(&col);
        for i in 0..h {
            f[i * w + j] = d[i];
        }
    }
    for i in 0..h {
        let d = edt_1d(&f[i * w..(i + 1) * w]);
        f[i * w..(i + 1) * w].copy_from_slice(&d);
    }
    f.iter().map(|&v| if v >= INF { f64::INFINITY } else { v.sqrt() }).collect()
}

/// Squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
    d
}

/// Mean absolute difference.
pub fn mae<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    ensure_same_shape("mae", pred, reference)?;
    let s: f64 = pred.data().iter().zip(reference.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Mean enhanced-alignment score of a binary map against the reference.
pub fn e_measure_binary(pred: &[bool], reference: &[bool]) -> f64 {
    let n = pred.len() as f64;
    let fg = reference.iter().filter(|&&v| v).count();
    if fg == 0 {
        return pred.iter().filter(|&&v| !v).count() as f64 / n;
    }
    if fg == reference.len() {
        return pred.iter().filter(|&&v| v).count() as f64 / n;
    }
    let to = |b: bool| if b { 1.0 } else { 0.0 };
    let mp = pred.iter().map(|&v| to(v)).sum::<f64>() / n;
    let mg = fg as f64 / n;
    let mut total = 0.0;
    for (&p, &g) in pred.iter().zip(reference) {
        let a = to(p) - mp;
        let b = to(g) - mg;
        let den = a * a + b * b;
        let align = if den == 0.0 { 1.0 } else { 2.0 * a * b / den };
        total += (1.0 + align) * (1.0 + align) / 4.0;
    }
    total / n
}

/// Maximum over [`THRESHOLDS`] binarizations (`p >= k/255`) of the mean
/// enhanced-alignment score.
pub fn e_phi_max<T: Scalar>(probs: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    ensure_same_shape("e_phi_max", probs, reference)?;
    let g = binary("reference", reference)?;
    let p = to_f64(probs);
    let mut best = f64::NEG_INFINITY;
    let mut fm = vec![false; p.len()];
    for k in 0..THRESHOLDS {
        let t = threshold(k);
        for (m, &v) in fm.iter_mut().zip(&p) {
            *m = v >= t;
        }
        best = best.max(e_measure_binary(&fm, &g));
    }
    Ok(best)
}

fn object_score(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(2.0 * mean / (mean * mean + 1.0 + std))
}

fn ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let dof = if x.len() > 1 { n - 1.0 } else { 1.0 };
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    let (vx, vy, cxy) = (vx / dof, vy / dof, cxy / dof);
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Object-aware term `μ O_F + (1 − μ) O_B`, with `μ` the reference
/// foreground fraction.
pub fn s_object<T: Scalar>(probs: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    ensure_same_shape("s_object", probs, reference)?;
    let g = binary("reference", reference)?;
    let p = to_f64(probs);
    let mu = g.iter().filter(|&&v| v).count() as f64 / g.len() as f64;
    let o_f = object_score(p.iter().zip(&g).filter(|(_, &g)| g).map(|(&v, _)| v));
    let o_b = object_score(p.iter().zip(&g).filter(|(_, &g)| !g).map(|(&v, _)| 1.0 - v));
    Ok(mu * o_f.unwrap_or(0.0) + (1.0 - mu) * o_b.unwrap_or(0.0))
}

/// Region-aware term: area-weighted SSIM over the four quadrants split at
/// the rounded reference centroid (the image centre when the reference is
/// empty).
pub fn s_region<T: Scalar>(probs: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    ensure_same_shape("s_region", probs, reference)?;
    let (h, w) = plane(probs.shape())?;
    let g = binary("reference", reference)?;
    let p = to_f64(probs);
    let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if g[i * w + j] {
                sy += i as f64;
                sx += j as f64;
                count += 1;
            }
        }
    }
    // Split index: the first row/column of the lower/right regions.
    let (cy, cx) = if count == 0 {
        ((h as f64 / 2.0).round() as usize, (w as f64 / 2.0).round() as usize)
    } else {
        ((sy / count as f64).round() as usize + 1, (sx / count as f64).round() as usize + 1)
    };
    let (cy, cx) = (cy.min(h), cx.min(w));
    let total = (h * w) as f64;
    let mut score = 0.0;
    for (r0, r1) in [(0, cy), (cy, h)] {
        for (c0, c1) in [(0, cx), (cx, w)] {
            let area = (r1 - r0) * (c1 - c0);
            if area == 0 {
                continue;
            }
            let mut xs = Vec::with_capacity(area);
            let mut ys = Vec::with_capacity(area);
            for i in r0..r1 {
                for j in c0..c1 {
                    xs.push(p[i * w + j]);
                    ys.push(if g[i * w + j] { 1.0 } else { 0.0 });
                }
            }
            score += area as f64 / total * ssim(&xs, &ys);
        }
    }
    Ok(score)
}

/// Structure measure `α S_O + (1 − α) S_R`, clamped to `[0, 1]`.
pub fn s_alpha<T: Scalar>(probs: &Tensor<T>, reference: &Tensor<T>, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let o = s_object(probs, reference)?;
    let r = s_region(probs, reference)?;
    Ok((alpha * o + (1.0 - alpha) * r).clamp(0.0, 1.0))
}

/// Per-image metrics. Column order of [`CSV_HEADER`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub jaccard: f64,
    pub fbw: f64,
    pub mae: f64,
    pub e_phi_max: f64,
    pub s_alpha: f64,
    pub degenerate: Degenerate,
}

pub const CSV_HEADER: &str = "image,Se,Sp,A,AUC,F1,J,Fbw,MAE,Emax,Salpha";

impl MetricsReport {
    pub fn values(&self) -> [f64; 10] {
        [self.se, self.sp, self.acc, self.auc, self.f1, self.jaccard, self.fbw, self.mae, self.e_phi_max, self.s_alpha]
    }

    fn from_values(v: [f64; 10]) -> Self {
        Self {
            se: v[0],
            sp: v[1],
            acc: v[2],
            auc: v[3],
            f1: v[4],
            jaccard: v[5],
            fbw: v[6],
            mae: v[7],
            e_phi_max: v[8],
            s_alpha: v[9],
            degenerate: Degenerate::default(),
        }
    }

    /// Element-wise mean. Flags are not carried over.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::invalid("cannot average an empty set of reports"));
        }
        let mut acc = [0.0; 10];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Ok(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// Every metric for one image: `probs` holds foreground probabilities and
/// is binarized at 0.5 (ties to background) for the counting metrics.
pub fn evaluate_image<T: Scalar>(probs: &Tensor<T>, reference: &Tensor<T>) -> Result<MetricsReport> {
    ensure_same_shape("evaluate_image", probs, reference)?;
    let pred = binarize(probs, 0.5);
    let c = confusion(&pred, reference)?;
    let b = basic_metrics(&c);
    let a = auc(probs, reference)?;
    let f = weighted_fscore(&pred, reference, 1.0, Weighting::Uniform)?;
    let mut degenerate = b.degenerate;
    degenerate.auc = a.degenerate;
    degenerate.fbw = f.degenerate;
    Ok(MetricsReport {
        se: b.se,
        sp: b.sp,
        acc: b.acc,
        auc: a.value,
        f1: b.f1,
        jaccard: b.jaccard,
        fbw: f.value,
        mae: mae(&pred, reference)?,
        e_phi_max: e_phi_max(probs, reference)?,
        s_alpha: s_alpha(probs, reference, 0.5)?,
        degenerate,
    })
}

/// Writes one row per named report, then a `mean` row.
pub fn write_csv<W: Write>(mut out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    let fmt = |name: &str, r: &MetricsReport| {
        let cols: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        format!("{name},{}", cols.join(","))
    };
    for (name, r) in rows {
        writeln!(out, "{}", fmt(name, r))?;
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    writeln!(out, "{}", fmt("mean", &MetricsReport::mean(&reports)?))?;
    Ok(())
}
