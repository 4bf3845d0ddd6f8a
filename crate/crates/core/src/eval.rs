//! Equivariance, invariance, latent sweeps and the novel-view comparison.
//!
//! Everything here reads the model through [`LatentModel`], so the metrics
//! can be checked against hand-built stub encoders.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layout::{Factor, LatentLayout};
use crate::network::Network;
use crate::scene::{render_object, ObjectKind, SceneParams, TransformBatch};
use crate::tensor::{Scalar, Tensor};

/// Read-only view of an encoder/decoder pair in f64 latent space.
pub trait LatentModel {
    fn latent_dim(&self) -> usize;

    /// Posterior means, one vector per image.
    fn encode_means(&self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>>;

    /// Image for one latent code.
    fn decode(&self, z: &[f64]) -> Result<Tensor<f32>>;
}

/// Images per encoder call; bounds the memory of batched evaluation.
const EVAL_CHUNK: usize = 64;

impl<T: Scalar> LatentModel for Network<T> {
    fn latent_dim(&self) -> usize {
        Network::latent_dim(self)
    }

    fn encode_means(&self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let d = Network::latent_dim(self);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let [c, h, w] = self.input_shape();
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for img in chunk {
                img.ensure_shape(&[c, h, w], "image")?;
                data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
            }
            let batch = Tensor::new(&[chunk.len(), c, h, w], data)?;
            let (lat, _) = self.encode_batch(&batch)?;
            out.extend(lat.mu.chunks(d).map(|m| m.iter().map(|v| v.as_f64()).collect()));
        }
        Ok(out)
    }

    fn decode(&self, z: &[f64]) -> Result<Tensor<f32>> {
        let z: Vec<T> = z.iter().map(|&v| T::from_f64(v)).collect();
        Ok(self.decode_image(&z)?.cast())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.iter().all(|x| *x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation, `None` when either side has zero spread.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub factor: Factor,
    pub latent_index: usize,
    /// (ground truth, inferred mean at the factor's latent)
    pub points: Vec<(f64, f64)>,
    pub pearson: f64,
    pub spearman: f64,
    /// Either side was constant; both correlations are reported as 0.
    pub degenerate: bool,
}

impl EquivarianceReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# factor={} latent={} pearson={} spearman={} degenerate={}\ntruth\tlatent\n",
            self.factor, self.latent_index, self.pearson, self.spearman, self.degenerate
        );
        for (t, z) in &self.points {
            let _ = writeln!(s, "{t}\t{z}");
        }
        s
    }
}

/// Correlation between a factor's ground truth and its latent over a sweep
/// that varies only that factor.
pub fn equivariance_curve<M: LatentModel + ?Sized>(
    model: &M,
    layout: &LatentLayout,
    factor: Factor,
    object: ObjectKind,
    sweep: &[SceneParams],
    resolution: usize,
) -> Result<EquivarianceReport> {
    let index = layout
        .index_of(factor)
        .ok_or_else(|| Error::config(format!("layout has no single latent for {factor}")))?;
    let first = sweep
        .first()
        .ok_or_else(|| Error::Contract("empty sweep".into()))?;
    if let Some(bad) = sweep.iter().position(|p| !first.differs_only_in(p, factor)) {
        return Err(Error::Contract(format!("sweep entry {bad} varies more than {factor}")));
    }
    let images = sweep
        .iter()
        .map(|p| render_object(object, p, resolution))
        .collect::<Result<Vec<_>>>()?;
    let means = model.encode_means(&images)?;
    equivariance_from_points(
        factor,
        index,
        sweep
            .iter()
            .zip(&means)
            .map(|(p, m)| (p.factor_value(factor).expect("extrinsic factor"), m[index]))
            .collect(),
    )
}

/// Builds the report from precomputed (truth, latent) pairs, e.g. pooled
/// over several sweeps.
pub fn equivariance_from_points(
    factor: Factor,
    latent_index: usize,
    points: Vec<(f64, f64)>,
) -> Result<EquivarianceReport> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let (p, s) = (pearson(&xs, &ys), spearman(&xs, &ys));
    let degenerate = p.is_none();
    Ok(EquivarianceReport {
        factor,
        latent_index,
        points,
        pearson: p.unwrap_or(0.0),
        spearman: s.unwrap_or(0.0),
        degenerate,
    })
}

/// Equivariance over held-out single-factor batches, each batch taken as
/// one sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEquivariance {
    pub factor: Factor,
    pub latent_index: usize,
    /// One report per batch with at least [`MIN_SWEEP_POINTS`] in range.
    pub sweeps: Vec<EquivarianceReport>,
    /// Mean of the per-sweep correlations, signs kept: a latent whose
    /// direction flips between scenes scores low.
    pub mean_pearson: f64,
    pub mean_spearman: f64,
    /// All points in one regression, across scenes.
    pub pooled: EquivarianceReport,
}

/// Fewest in-range examples for a batch to count as a sweep.
pub const MIN_SWEEP_POINTS: usize = 3;

impl SweepEquivariance {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# factor={} latent={} sweeps={} mean_pearson={} mean_spearman={} pooled_pearson={} pooled_spearman={}\n",
            self.factor,
            self.latent_index,
            self.sweeps.len(),
            self.mean_pearson,
            self.mean_spearman,
            self.pooled.pearson,
            self.pooled.spearman
        );
        s.push_str("sweep\tpoints\tpearson\tspearman\tdegenerate\n");
        for (i, r) in self.sweeps.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}\t{}\t{}", r.points.len(), r.pearson, r.spearman, r.degenerate);
        }
        s.push_str("\nsweep\ttruth\tlatent\n");
        for (i, r) in self.sweeps.iter().enumerate() {
            for (t, z) in &r.points {
                let _ = writeln!(s, "{i}\t{t}\t{z}");
            }
        }
        s
    }
}

/// Equivariance of `factor` over every batch of it in `batches`, keeping
/// examples whose ground truth lies in `range` (inclusive). Degenerate
/// sweeps count as zero correlation.
pub fn equivariance_from_batches<M: LatentModel + ?Sized>(
    model: &M,
    layout: &LatentLayout,
    factor: Factor,
    batches: &[TransformBatch],
    range: (f64, f64),
) -> Result<SweepEquivariance> {
    let index = layout
        .index_of(factor)
        .ok_or_else(|| Error::config(format!("layout has no single latent for {factor}")))?;
    let mut sweeps = Vec::new();
    for b in batches.iter().filter(|b| b.active == factor) {
        b.validate()?;
        let keep: Vec<usize> = (0..b.len())
            .filter(|&i| {
                let v = b.params[i].factor_value(factor).expect("extrinsic factor");
                v >= range.0 && v <= range.1
            })
            .collect();
        if keep.len() < MIN_SWEEP_POINTS {
            continue;
        }
        let images: Vec<Tensor<f32>> = keep.iter().map(|&i| b.images[i].clone()).collect();
        let means = model.encode_means(&images)?;
        let points = keep
            .iter()
            .zip(&means)
            .map(|(&i, m)| (b.params[i].factor_value(factor).expect("extrinsic factor"), m[index]))
            .collect();
        sweeps.push(equivariance_from_points(factor, index, points)?);
    }
    if sweeps.is_empty() {
        return Err(Error::Contract(format!("no {factor} batch has {MIN_SWEEP_POINTS} examples in range")));
    }
    let n = sweeps.len() as f64;
    let pooled = equivariance_from_points(factor, index, sweeps.iter().flat_map(|r| r.points.clone()).collect())?;
    Ok(SweepEquivariance {
        factor,
        latent_index: index,
        mean_pearson: sweeps.iter().map(|r| r.pearson).sum::<f64>() / n,
        mean_spearman: sweeps.iter().map(|r| r.spearman).sum::<f64>() / n,
        sweeps,
        pooled,
    })
}

/// Active versus inactive extrinsic latent variance within batches of one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorInvariance {
    pub factor: Factor,
    pub batches: usize,
    pub active_variance: f64,
    pub inactive_variance: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub per_factor: Vec<FactorInvariance>,
    /// Mean inactive variance over mean active variance, pooled over all
    /// extrinsic batches.
    pub ratio: f64,
}

impl InvarianceReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# pooled ratio={}\nfactor\tbatches\tactive_var\tinactive_var\tratio\n", self.ratio);
        for f in &self.per_factor {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                f.factor, f.batches, f.active_variance, f.inactive_variance, f.ratio
            );
        }
        s
    }
}

fn safe_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Within-batch variance of each extrinsic latent after standardizing every
/// latent by its spread over all images in `batches`. Intrinsic batches are
/// encoded for the standardization but contribute no scores.
pub fn invariance_score<M: LatentModel + ?Sized>(
    model: &M,
    layout: &LatentLayout,
    batches: &[TransformBatch],
) -> Result<InvarianceReport> {
    let mut encoded = Vec::with_capacity(batches.len());
    for b in batches {
        b.validate()?;
        encoded.push(model.encode_means(&b.images)?);
    }
    let d = model.latent_dim();
    let all: Vec<&Vec<f64>> = encoded.iter().flatten().collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let col: Vec<f64> = all.iter().map(|m| m[j]).collect();
            let sd = variance(&col).sqrt();
            if sd > 0.0 { 1.0 / sd } else { 0.0 }
        })
        .collect();

    let extrinsic: Vec<(Factor, usize)> = layout.extrinsic().to_vec();
    let mut per_factor = Vec::new();
    let (mut act_all, mut inact_all) = (Vec::new(), Vec::new());
    for &(factor, idx) in &extrinsic {
        let (mut act, mut inact) = (Vec::new(), Vec::new());
        for (b, means) in batches.iter().zip(&encoded) {
            if b.active != factor {
                continue;
            }
            let var_of = |j: usize| {
                let col: Vec<f64> = means.iter().map(|m| m[j] * scale[j]).collect();
                variance(&col)
            };
            act.push(var_of(idx));
            for &(_, other) in extrinsic.iter().filter(|(f, _)| *f != factor) {
                inact.push(var_of(other));
            }
        }
        if act.is_empty() {
            continue;
        }
        let (a, i) = (mean(&act), if inact.is_empty() { 0.0 } else { mean(&inact) });
        per_factor.push(FactorInvariance {
            factor,
            batches: act.len(),
            active_variance: a,
            inactive_variance: i,
            ratio: safe_ratio(i, a),
        });
        act_all.extend(act);
        inact_all.extend(inact);
    }
    if act_all.is_empty() {
        return Err(Error::Contract("no extrinsic batches to score".into()));
    }
    let inactive = if inact_all.is_empty() { 0.0 } else { mean(&inact_all) };
    Ok(InvarianceReport {
        per_factor,
        ratio: safe_ratio(inactive, mean(&act_all)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSweep {
    pub codes: Vec<Vec<f64>>,
    pub images: Vec<Tensor<f32>>,
}

/// `steps` evenly spaced values from `from` to `to`; a single step is `from`.
pub fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![from],
        n => (0..n)
            .map(|i| {
                if i == n - 1 {
                    to
                } else {
                    from + (to - from) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Decodes copies of `base` whose latent `index` walks from `from` to `to`.
pub fn sweep_code<M: LatentModel + ?Sized>(
    model: &M,
    base: &[f64],
    index: usize,
    from: f64,
    to: f64,
    steps: usize,
) -> Result<LatentSweep> {
    if base.len() != model.latent_dim() {
        return Err(Error::Dimension(format!(
            "code of length {} for a {}-dimensional model",
            base.len(),
            model.latent_dim()
        )));
    }
    if index >= base.len() {
        return Err(Error::Contract(format!("latent index {index} out of range for {} latents", base.len())));
    }
    if steps == 0 {
        return Err(Error::Contract("a sweep needs at least one step".into()));
    }
    let codes: Vec<Vec<f64>> = linspace(from, to, steps)
        .into_iter()
        .map(|v| {
            let mut c = base.to_vec();
            c[index] = v;
            c
        })
        .collect();
    let images = codes.iter().map(|c| model.decode(c)).collect::<Result<_>>()?;
    Ok(LatentSweep { codes, images })
}

/// Encodes `image` once and sweeps one latent of its posterior mean.
pub fn latent_sweep_render<M: LatentModel + ?Sized>(
    model: &M,
    image: &Tensor<f32>,
    index: usize,
    from: f64,
    to: f64,
    steps: usize,
) -> Result<LatentSweep> {
    if index >= model.latent_dim() {
        return Err(Error::Contract(format!(
            "latent index {index} out of range for {} latents",
            model.latent_dim()
        )));
    }
    let mu = model.encode_means(std::slice::from_ref(image))?.remove(0);
    sweep_code(model, &mu, index, from, to, steps)
}

/// Index of the latent whose mean varies most across the batch; ties go to
/// the lowest index.
pub fn identify_entangled_latent<M: LatentModel + ?Sized>(model: &M, batch: &TransformBatch) -> Result<usize> {
    if batch.len() < 2 {
        return Err(Error::Contract(format!("batch of {} images is too small", batch.len())));
    }
    let means = model.encode_means(&batch.images)?;
    Ok(argmax_variance(&means))
}

/// Column of `rows` with the largest variance; lowest index on ties.
pub fn argmax_variance(rows: &[Vec<f64>]) -> usize {
    let d = rows[0].len();
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..d {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let v = variance(&col);
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.ensure_shape(b.shape(), "image")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelViewReport {
    pub dcign_index: usize,
    pub baseline_index: usize,
    pub dcign_mse: f64,
    pub baseline_mse: f64,
    /// (source index, target azimuth, dcign mse, baseline mse)
    pub cases: Vec<(usize, f64, f64, f64)>,
}

impl NovelViewReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# dcign latent={} mse={}\n# baseline latent={} mse={}\nsource\ttarget\tdcign\tbaseline\n",
            self.dcign_index, self.dcign_mse, self.baseline_index, self.baseline_mse
        );
        for (i, t, a, b) in &self.cases {
            let _ = writeln!(s, "{i}\t{t}\t{a}\t{b}");
        }
        s
    }
}

/// Re-renders `source` at `target` azimuth through the model by replacing
/// latent `index` of its code with the value read from a reference object
/// (intrinsic coefficients all zero) posed at the target. When the target is
/// the source pose the code is left as is.
pub fn novel_view<M: LatentModel + ?Sized>(
    model: &M,
    index: usize,
    object: ObjectKind,
    source: &SceneParams,
    target: f64,
    resolution: usize,
) -> Result<Tensor<f32>> {
    let src = render_object(object, source, resolution)?;
    let mut code = model.encode_means(std::slice::from_ref(&src))?.remove(0);
    if target != source.azimuth {
        let mut reference = source.clone();
        reference.azimuth = target;
        reference.intrinsic.iter_mut().for_each(|v| *v = 0.0);
        let r = render_object(object, &reference, resolution)?;
        code[index] = model.encode_means(std::slice::from_ref(&r))?[0][index];
    }
    model.decode(&code)
}

/// Mean novel-view MSE against ground-truth renders for both models. The
/// baseline's azimuth latent is the most variable one on `azimuth_batch`.
pub fn compare_novel_view<A: LatentModel + ?Sized, B: LatentModel + ?Sized>(
    dcign: &A,
    baseline: &B,
    layout: &LatentLayout,
    object: ObjectKind,
    azimuth_batch: &TransformBatch,
    sources: &[SceneParams],
    targets: &[f64],
    resolution: usize,
) -> Result<NovelViewReport> {
    let dcign_index = layout
        .index_of(Factor::Azimuth)
        .ok_or_else(|| Error::config("layout has no azimuth latent"))?;
    let baseline_index = identify_entangled_latent(baseline, azimuth_batch)?;
    let mut cases = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        for &t in targets {
            let mut truth_params = src.clone();
            truth_params.azimuth = t;
            let truth = render_object(object, &truth_params, resolution)?;
            let a = mse(&novel_view(dcign, dcign_index, object, src, t, resolution)?, &truth)?;
            let b = mse(&novel_view(baseline, baseline_index, object, src, t, resolution)?, &truth)?;
            cases.push((i, t, a, b));
        }
    }
    if cases.is_empty() {
        return Err(Error::Contract("no novel-view cases".into()));
    }
    let n = cases.len() as f64;
    Ok(NovelViewReport {
        dcign_index,
        baseline_index,
        dcign_mse: cases.iter().map(|c| c.2).sum::<f64>() / n,
        baseline_mse: cases.iter().map(|c| c.3).sum::<f64>() / n,
        cases,
    })
}

/// Mean per-pixel squared error of `decode(encode_mean(x))` over `images`.
pub fn reconstruction_mse<M: LatentModel + ?Sized>(model: &M, images: &[Tensor<f32>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Contract("no images to reconstruct".into()));
    }
    let means = model.encode_means(images)?;
    let mut total = 0.0;
    for (img, m) in images.iter().zip(&means) {
        total += mse(&model.decode(m)?, img)?;
    }
    Ok(total / images.len() as f64)
}
