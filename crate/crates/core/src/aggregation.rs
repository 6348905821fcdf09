//! Source-view-wise feature aggregation.
//!
//! For a set of per-view features `f_1..f_n` at one 3D point, every view `i`
//! gets its own similarity distribution over all views for each learnable
//! function `k`:
//!
//! ```text
//! d_ij   = |f_i - f_j|^2                (or cosine distance)
//! s_ij^k = exp(-lambda_k d_ij)          (or 1 / (1 + lambda_k d_ij))
//! w_ij^k = s_ij^k / sum_j s_ij^k        (over valid views j only)
//! m_i^k  = sum_j w_ij^k f_j
//! v_i^k  = sum_j w_ij^k (f_j - m_i^k)^2
//! ```
//!
//! with `lambda_k = exp(alpha_k)` so the range parameters stay positive.
//! The equal-weight baseline is the same computation with uniform weights.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::adcore::{AdError, CustomOp, Tensor, Var};
use crate::{Error, Result};

/// Distance between two view features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SquaredL2,
    Cosine,
}

/// Map from distance to similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mapping {
    /// `exp(-lambda d)`
    Exp,
    /// `1 / (1 + lambda d)`
    Rational,
}

/// Lower bound on feature norms in the cosine metric.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);
static UNDERFLOW_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// Process-wide counters of degenerate aggregation inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Telemetry {
    /// Cosine distances involving a feature with norm below the floor.
    pub zero_norm: u64,
    /// Rows whose similarities all underflowed and fell back to uniform.
    pub underflow: u64,
}

pub fn telemetry() -> Telemetry {
    Telemetry {
        zero_norm: ZERO_NORM_EVENTS.load(Ordering::Relaxed),
        underflow: UNDERFLOW_FALLBACKS.load(Ordering::Relaxed),
    }
}

/// The `n_k` learnable range parameters and the selected metric/mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBank {
    pub alphas: Vec<f64>,
    pub metric: Metric,
    pub mapping: Mapping,
    /// Exact lambda values of a frozen bank.
    fixed: Option<Vec<f64>>,
}

impl SimilarityBank {
    /// Log-spaced initial ranges: `lambda` spans `[0.1, 2.0]`, or is `1.0`
    /// for a single function.
    pub fn init(n_k: usize) -> Result<Self> {
        if n_k < 1 {
            return Err(Error::Config("need at least one similarity function".into()));
        }
        let alphas = if n_k == 1 {
            vec![0.0]
        } else {
            let (lo, hi) = (0.1f64.ln(), 2.0f64.ln());
            (0..n_k)
                .map(|k| lo + (hi - lo) * k as f64 / (n_k - 1) as f64)
                .collect()
        };
        Ok(Self {
            alphas,
            metric: Metric::SquaredL2,
            mapping: Mapping::Exp,
            fixed: None,
        })
    }

    /// A bank with constant ranges that training never updates.
    pub fn fixed(lambdas: &[f64]) -> Result<Self> {
        if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!(
                "fixed lambdas must be positive and finite, got {lambdas:?}"
            )));
        }
        Ok(Self {
            alphas: lambdas.iter().map(|l| l.ln()).collect(),
            metric: Metric::SquaredL2,
            mapping: Mapping::Exp,
            fixed: Some(lambdas.to_vec()),
        })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_mapping(mut self, mapping: Mapping) -> Self {
        self.mapping = mapping;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.fixed.is_some()
    }

    pub fn n_k(&self) -> usize {
        self.alphas.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match &self.fixed {
            Some(l) => l.clone(),
            None => self.alphas.iter().map(|a| a.exp()).collect(),
        }
    }
}

/// Per-view features of one 3D point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n_views: usize,
    pub n_features: usize,
    /// Row-major `n_views x n_features`.
    pub features: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, valid: Vec<bool>) -> Result<Self> {
        let n_views = rows.len();
        let n_features = rows.first().map_or(0, |r| r.len());
        if valid.len() != n_views || rows.iter().any(|r| r.len() != n_features) {
            return Err(Error::Config("ragged feature set".into()));
        }
        Ok(Self {
            n_views,
            n_features,
            features: rows.into_iter().flatten().collect(),
            valid,
        })
    }

    /// All rows valid.
    pub fn dense(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        Self::new(rows, vec![true; n])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-view weighted statistics of one point.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeatures {
    pub n_views: usize,
    pub n_k: usize,
    pub n_features: usize,
    /// `n_views x n_k x n_features`
    pub means: Vec<f64>,
    /// `n_views x n_k x n_features`
    pub variances: Vec<f64>,
    /// `n_views x n_k x n_views`
    pub weights: Vec<f64>,
}

impl AggregatedFeatures {
    pub fn mean(&self, i: usize, k: usize) -> &[f64] {
        let at = (i * self.n_k + k) * self.n_features;
        &self.means[at..at + self.n_features]
    }

    pub fn variance(&self, i: usize, k: usize) -> &[f64] {
        let at = (i * self.n_k + k) * self.n_features;
        &self.variances[at..at + self.n_features]
    }

    pub fn weight_row(&self, i: usize, k: usize) -> &[f64] {
        let at = (i * self.n_k + k) * self.n_views;
        &self.weights[at..at + self.n_views]
    }
}

/// How the per-view statistics are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    /// Learnable similarity-weighted statistics per source view.
    ViewWise { metric: Metric, mapping: Mapping },
    /// Equal-weight element-wise mean and variance shared by all views.
    GlobalMeanVar,
    /// Equal-weight element-wise mean only.
    GlobalMean,
}

impl AggregationMode {
    pub fn is_view_wise(self) -> bool {
        matches!(self, AggregationMode::ViewWise { .. })
    }

    fn with_variance(self) -> bool {
        !matches!(self, AggregationMode::GlobalMean)
    }

    /// Width of the aggregated vector per view for `n_features` inputs.
    pub fn output_width(self, n_features: usize, n_k: usize) -> usize {
        match self {
            AggregationMode::ViewWise { .. } => 2 * n_k * n_features,
            AggregationMode::GlobalMeanVar => 2 * n_features,
            AggregationMode::GlobalMean => n_features,
        }
    }
}

/// Pairwise distances between the rows of `fs`; pairs involving an invalid
/// view are 0 and flagged in the returned mask.
pub fn distance_distribution(fs: &FeatureSet, metric: Metric) -> (Vec<f64>, Vec<bool>) {
    let n = fs.n_views;
    let mut d = vec![0.0; n * n];
    let mut excluded = vec![false; n * n];
    let mut zero_norm = 0;
    distances_into(&fs.features, &fs.valid, n, fs.n_features, metric, &mut d, &mut zero_norm);
    if zero_norm > 0 {
        ZERO_NORM_EVENTS.fetch_add(zero_norm, Ordering::Relaxed);
    }
    for i in 0..n {
        for j in 0..n {
            excluded[i * n + j] = !(fs.valid[i] && fs.valid[j]);
        }
    }
    (d, excluded)
}

fn distances_into(
    f: &[f64],
    valid: &[bool],
    n: usize,
    nf: usize,
    metric: Metric,
    d: &mut [f64],
    zero_norm: &mut u64,
) {
    d.fill(0.0);
    match metric {
        Metric::SquaredL2 => {
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                for j in i + 1..n {
                    if !valid[j] {
                        continue;
                    }
                    let (a, b) = (&f[i * nf..(i + 1) * nf], &f[j * nf..(j + 1) * nf]);
                    let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                    d[i * n + j] = dist;
                    d[j * n + i] = dist;
                }
            }
        }
        Metric::Cosine => {
            let norms: Vec<f64> = (0..n)
                .map(|i| {
                    let r = &f[i * nf..(i + 1) * nf];
                    r.iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .collect();
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                for j in i + 1..n {
                    if !valid[j] {
                        continue;
                    }
                    if norms[i] < COSINE_NORM_FLOOR || norms[j] < COSINE_NORM_FLOOR {
                        *zero_norm += 1;
                    }
                    let (a, b) = (&f[i * nf..(i + 1) * nf], &f[j * nf..(j + 1) * nf]);
                    let dotp: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let dist = 1.0
                        - dotp / (norms[i].max(COSINE_NORM_FLOOR) * norms[j].max(COSINE_NORM_FLOOR));
                    d[i * n + j] = dist;
                    d[j * n + i] = dist;
                }
            }
        }
    }
}

/// `h_k(d)` for range `lambda`.
#[inline]
pub fn similarity(d: f64, lambda: f64, mapping: Mapping) -> f64 {
    match mapping {
        Mapping::Exp => (-lambda * d).exp(),
        Mapping::Rational => 1.0 / (1.0 + lambda * d),
    }
}

struct Dims {
    n_s: usize,
    n_f: usize,
    n_k: usize,
    width: usize,
}

/// Forward state of one point kept for the reverse pass.
struct PointCache<'a> {
    dist: &'a mut [f64],
    /// similarities, `n_s x n_k x n_s`
    sims: &'a mut [f64],
    /// per-row similarity sums, `n_s x n_k`
    sums: &'a mut [f64],
    weights: &'a mut [f64],
    /// rows whose weights do not depend on similarities
    uniform: &'a mut [bool],
}

fn forward_point(
    f: &[f64],
    valid: &[bool],
    dims: &Dims,
    mode: AggregationMode,
    lambdas: &[f64],
    out: &mut [f64],
    cache: PointCache<'_>,
) {
    let Dims { n_s, n_f, n_k, width } = *dims;
    out.fill(0.0);
    cache.weights.fill(0.0);
    cache.sims.fill(0.0);
    cache.sums.fill(0.0);
    cache.uniform.fill(true);
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return;
    }
    let uniform_w = 1.0 / n_valid as f64;
    if let AggregationMode::ViewWise { metric, .. } = mode {
        let mut zero_norm = 0;
        distances_into(f, valid, n_s, n_f, metric, cache.dist, &mut zero_norm);
        if zero_norm > 0 {
            ZERO_NORM_EVENTS.fetch_add(zero_norm, Ordering::Relaxed);
        }
    }
    for i in 0..n_s {
        for k in 0..n_k {
            let row = (i * n_k + k) * n_s;
            let w = &mut cache.weights[row..row + n_s];
            let mut weighted = false;
            if let (AggregationMode::ViewWise { mapping, .. }, true) = (mode, valid[i]) {
                let s = &mut cache.sims[row..row + n_s];
                let mut total = 0.0;
                for j in 0..n_s {
                    if valid[j] {
                        s[j] = similarity(cache.dist[i * n_s + j], lambdas[k], mapping);
                        total += s[j];
                    }
                }
                if total > 0.0 && total.is_finite() {
                    for j in 0..n_s {
                        w[j] = s[j] / total;
                    }
                    cache.sums[i * n_k + k] = total;
                    weighted = true;
                } else {
                    UNDERFLOW_FALLBACKS.fetch_add(1, Ordering::Relaxed);
                    log::debug!("similarity underflow for view {i}, function {k}");
                }
            }
            if !weighted {
                for j in 0..n_s {
                    w[j] = if valid[j] { uniform_w } else { 0.0 };
                }
            }
            cache.uniform[i * n_k + k] = !weighted;

            let base = i * width;
            let (m_at, v_at) = (base + k * n_f, base + (n_k + k) * n_f);
            for l in 0..n_f {
                let mut m = 0.0;
                for j in 0..n_s {
                    m += w[j] * f[j * n_f + l];
                }
                out[m_at + l] = m;
            }
            if mode.with_variance() {
                for l in 0..n_f {
                    let m = out[m_at + l];
                    let mut v = 0.0;
                    for j in 0..n_s {
                        let c = f[j * n_f + l] - m;
                        v += w[j] * c * c;
                    }
                    out[v_at + l] = v.max(0.0);
                }
            }
        }
    }
}

/// Aggregates one point's features with a similarity bank.
pub fn aggregate(fs: &FeatureSet, bank: &SimilarityBank) -> Result<AggregatedFeatures> {
    let mode = AggregationMode::ViewWise {
        metric: bank.metric,
        mapping: bank.mapping,
    };
    aggregate_with(fs, mode, &bank.lambdas())
}

/// The equal-weight baseline: every view sees the global mean and variance.
pub fn aggregate_global(fs: &FeatureSet) -> Result<AggregatedFeatures> {
    aggregate_with(fs, AggregationMode::GlobalMeanVar, &[])
}

fn aggregate_with(fs: &FeatureSet, mode: AggregationMode, lambdas: &[f64]) -> Result<AggregatedFeatures> {
    if fs.n_valid() == 0 {
        return Err(Error::Config("aggregation needs at least one valid view".into()));
    }
    let n_k = if mode.is_view_wise() { lambdas.len() } else { 1 };
    let dims = Dims {
        n_s: fs.n_views,
        n_f: fs.n_features,
        n_k,
        width: 2 * n_k * fs.n_features,
    };
    let mut out = vec![0.0; dims.n_s * dims.width];
    let mut dist = vec![0.0; dims.n_s * dims.n_s];
    let mut sims = vec![0.0; dims.n_s * n_k * dims.n_s];
    let mut sums = vec![0.0; dims.n_s * n_k];
    let mut weights = vec![0.0; dims.n_s * n_k * dims.n_s];
    let mut uniform = vec![false; dims.n_s * n_k];
    let full_mode = match mode {
        AggregationMode::GlobalMean => AggregationMode::GlobalMeanVar,
        m => m,
    };
    forward_point(
        &fs.features,
        &fs.valid,
        &dims,
        full_mode,
        lambdas,
        &mut out,
        PointCache {
            dist: &mut dist,
            sims: &mut sims,
            sums: &mut sums,
            weights: &mut weights,
            uniform: &mut uniform,
        },
    );
    let nf = dims.n_f;
    let mut means = Vec::with_capacity(dims.n_s * n_k * nf);
    let mut variances = Vec::with_capacity(dims.n_s * n_k * nf);
    for i in 0..dims.n_s {
        let row = &out[i * dims.width..(i + 1) * dims.width];
        means.extend_from_slice(&row[..n_k * nf]);
        variances.extend_from_slice(&row[n_k * nf..]);
    }
    Ok(AggregatedFeatures {
        n_views: dims.n_s,
        n_k,
        n_features: nf,
        means,
        variances,
        weights,
    })
}

/// Tape op over a batch of points: `[P, n_s, n_f]` features (and `[n_k]`
/// log-ranges for view-wise modes) to `[P, n_s, width]`.
struct AggregateOp {
    dims: Dims,
    mode: AggregationMode,
    lambdas: Vec<f64>,
    valid: Rc<[bool]>,
    dist: Vec<f64>,
    sims: Vec<f64>,
    sums: Vec<f64>,
    weights: Vec<f64>,
    uniform: Vec<bool>,
}

/// Records batched aggregation on the tape. `valid` is `[P * n_s]`;
/// `alphas` is required exactly for view-wise modes with learnable ranges.
/// `fixed_lambdas` supplies constant ranges instead.
pub fn aggregate_on_tape<'t>(
    features: Var<'t>,
    valid: Rc<[bool]>,
    mode: AggregationMode,
    alphas: Option<Var<'t>>,
    fixed_lambdas: Option<&[f64]>,
) -> std::result::Result<Var<'t>, AdError> {
    let shape = features.shape();
    let [p, n_s, n_f] = shape[..] else {
        return Err(AdError::InvalidArgument(format!(
            "aggregate expects [points, views, features], got {shape:?}"
        )));
    };
    if valid.len() != p * n_s {
        return Err(AdError::InvalidArgument(format!(
            "aggregate: {} validity flags for {p}x{n_s} views",
            valid.len()
        )));
    }
    let lambdas: Vec<f64> = match (mode.is_view_wise(), alphas, fixed_lambdas) {
        (true, Some(a), None) => a.value().data().iter().map(|x| x.exp()).collect(),
        (true, None, Some(l)) => l.to_vec(),
        (false, None, None) => Vec::new(),
        _ => {
            return Err(AdError::InvalidArgument(
                "aggregate: ranges must come from exactly one of alphas / fixed lambdas, and only for view-wise modes".into(),
            ))
        }
    };
    let n_k = if mode.is_view_wise() { lambdas.len() } else { 1 };
    if n_k == 0 {
        return Err(AdError::InvalidArgument("aggregate: empty similarity bank".into()));
    }
    let dims = Dims {
        n_s,
        n_f,
        n_k,
        width: mode.output_width(n_f, n_k),
    };
    let full_width = 2 * n_k * n_f;
    let mut op = AggregateOp {
        dist: vec![0.0; p * n_s * n_s],
        sims: vec![0.0; p * n_s * n_k * n_s],
        sums: vec![0.0; p * n_s * n_k],
        weights: vec![0.0; p * n_s * n_k * n_s],
        uniform: vec![true; p * n_s * n_k],
        dims,
        mode,
        lambdas,
        valid,
    };
    let mut out = vec![0.0; p * n_s * op.dims.width];
    {
        let fv = features.value();
        let f = fv.data();
        let mut scratch = vec![0.0; n_s * full_width];
        let full_dims = Dims {
            n_s,
            n_f,
            n_k,
            width: full_width,
        };
        let forward_mode = match mode {
            AggregationMode::GlobalMean => AggregationMode::GlobalMeanVar,
            m => m,
        };
        let (ss, sk) = (n_s * n_s, n_s * n_k);
        for pt in 0..p {
            forward_point(
                &f[pt * n_s * n_f..(pt + 1) * n_s * n_f],
                &op.valid[pt * n_s..(pt + 1) * n_s],
                &full_dims,
                forward_mode,
                &op.lambdas,
                &mut scratch,
                PointCache {
                    dist: &mut op.dist[pt * ss..(pt + 1) * ss],
                    sims: &mut op.sims[pt * sk * n_s..(pt + 1) * sk * n_s],
                    sums: &mut op.sums[pt * sk..(pt + 1) * sk],
                    weights: &mut op.weights[pt * sk * n_s..(pt + 1) * sk * n_s],
                    uniform: &mut op.uniform[pt * sk..(pt + 1) * sk],
                },
            );
            let w = op.dims.width;
            for i in 0..n_s {
                let dst = &mut out[(pt * n_s + i) * w..(pt * n_s + i + 1) * w];
                dst.copy_from_slice(&scratch[i * full_width..i * full_width + w]);
            }
        }
    }
    let output = Tensor::new(&[p, n_s, op.dims.width], out)?;
    let tape = features.tape();
    match alphas {
        Some(a) => tape.custom(&[features, a], output, Box::new(op)),
        None => tape.custom(&[features], output, Box::new(op)),
    }
}

impl CustomOp for AggregateOp {
    fn name(&self) -> &'static str {
        "aggregate"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let Dims { n_s, n_f, n_k, width } = self.dims;
        let f_all = inputs[0].data();
        let p = inputs[0].shape()[0];
        let out = output.data();
        let g_all = grad.data();
        let mut gf_all = vec![0.0; f_all.len()];
        let mut g_lambda = vec![0.0; n_k];
        let with_var = self.mode.with_variance();

        let mut gw = vec![0.0; n_s];
        let mut gd = vec![0.0; n_s * n_s];
        for pt in 0..p {
            let f = &f_all[pt * n_s * n_f..(pt + 1) * n_s * n_f];
            let valid = &self.valid[pt * n_s..(pt + 1) * n_s];
            let gf = &mut gf_all[pt * n_s * n_f..(pt + 1) * n_s * n_f];
            gd.fill(0.0);
            let mut any_dist_grad = false;
            for i in 0..n_s {
                let g_row = &g_all[(pt * n_s + i) * width..(pt * n_s + i + 1) * width];
                let o_row = &out[(pt * n_s + i) * width..(pt * n_s + i + 1) * width];
                for k in 0..n_k {
                    let at = ((pt * n_s + i) * n_k + k) * n_s;
                    let w = &self.weights[at..at + n_s];
                    let gm = &g_row[k * n_f..(k + 1) * n_f];
                    let m = &o_row[k * n_f..(k + 1) * n_f];
                    let gv = with_var.then(|| &g_row[(n_k + k) * n_f..(n_k + k + 1) * n_f]);
                    // The variance gradient through the mean vanishes because
                    // sum_j w_j (f_j - m) = 0.
                    for j in 0..n_s {
                        if !valid[j] {
                            gw[j] = 0.0;
                            continue;
                        }
                        let fj = &f[j * n_f..(j + 1) * n_f];
                        let mut acc = 0.0;
                        for l in 0..n_f {
                            acc += gm[l] * fj[l];
                            let mut gfl = w[j] * gm[l];
                            if let Some(gv) = gv {
                                let c = fj[l] - m[l];
                                acc += gv[l] * c * c;
                                gfl += 2.0 * w[j] * gv[l] * c;
                            }
                            gf[j * n_f + l] += gfl;
                        }
                        gw[j] = acc;
                    }
                    if self.uniform[(pt * n_s + i) * n_k + k] {
                        continue;
                    }
                    let AggregationMode::ViewWise { mapping, .. } = self.mode else {
                        continue;
                    };
                    let total = self.sums[(pt * n_s + i) * n_k + k];
                    let s = &self.sims[at..at + n_s];
                    let lambda = self.lambdas[k];
                    let mean_gw: f64 = (0..n_s).map(|j| gw[j] * w[j]).sum();
                    for j in 0..n_s {
                        if !valid[j] {
                            continue;
                        }
                        let gs = (gw[j] - mean_gw) / total;
                        let d = self.dist[(pt * n_s + i) * n_s + j];
                        let (ds_dd, ds_dl) = match mapping {
                            Mapping::Exp => (-lambda * s[j], -d * s[j]),
                            Mapping::Rational => (-lambda * s[j] * s[j], -d * s[j] * s[j]),
                        };
                        g_lambda[k] += gs * ds_dl;
                        if i != j {
                            gd[i * n_s + j] += gs * ds_dd;
                            any_dist_grad = true;
                        }
                    }
                }
            }
            if !any_dist_grad {
                continue;
            }
            let AggregationMode::ViewWise { metric, .. } = self.mode else {
                continue;
            };
            match metric {
                Metric::SquaredL2 => {
                    for i in 0..n_s {
                        for j in 0..n_s {
                            let g = gd[i * n_s + j];
                            if g == 0.0 {
                                continue;
                            }
                            for l in 0..n_f {
                                let diff = 2.0 * (f[i * n_f + l] - f[j * n_f + l]) * g;
                                gf[i * n_f + l] += diff;
                                gf[j * n_f + l] -= diff;
                            }
                        }
                    }
                }
                Metric::Cosine => {
                    let norms: Vec<f64> = (0..n_s)
                        .map(|i| f[i * n_f..(i + 1) * n_f].iter().map(|x| x * x).sum::<f64>().sqrt())
                        .collect();
                    // d_ij = 1 - u_i . u_j with u = f / max(|f|, floor)
                    let mut gu = vec![0.0; n_s * n_f];
                    for i in 0..n_s {
                        for j in 0..n_s {
                            let g = gd[i * n_s + j];
                            if g == 0.0 {
                                continue;
                            }
                            let (ni, nj) = (
                                norms[i].max(COSINE_NORM_FLOOR),
                                norms[j].max(COSINE_NORM_FLOOR),
                            );
                            for l in 0..n_f {
                                gu[i * n_f + l] -= g * f[j * n_f + l] / nj;
                                gu[j * n_f + l] -= g * f[i * n_f + l] / ni;
                            }
                        }
                    }
                    for i in 0..n_s {
                        let gui = &gu[i * n_f..(i + 1) * n_f];
                        let fi = &f[i * n_f..(i + 1) * n_f];
                        if norms[i] < COSINE_NORM_FLOOR {
                            for l in 0..n_f {
                                gf[i * n_f + l] += gui[l] / COSINE_NORM_FLOOR;
                            }
                        } else {
                            let n = norms[i];
                            let proj: f64 = gui.iter().zip(fi).map(|(g, x)| g * x).sum::<f64>() / (n * n);
                            for l in 0..n_f {
                                gf[i * n_f + l] += (gui[l] - proj * fi[l]) / n;
                            }
                        }
                    }
                }
            }
        }

        let gf = Tensor::from_parts(inputs[0].shape().to_vec(), gf_all);
        if inputs.len() > 1 {
            let g_alpha: Vec<f64> = g_lambda
                .iter()
                .zip(&self.lambdas)
                .map(|(g, l)| g * l)
                .collect();
            vec![Some(gf), Some(Tensor::vector(g_alpha))]
        } else {
            vec![Some(gf)]
        }
    }
}
