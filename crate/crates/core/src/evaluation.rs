//! Regression-based evaluation: regressors from discovered keypoints to
//! ground-truth joints, and MPJPE / N-MPJPE / P-MPJPE.

use crate::error::{Error, Result};
use crate::rng;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Errors of one predicted pose against ground truth, in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub mpjpe: f64,
    pub n_mpjpe: f64,
    pub p_mpjpe: f64,
}

fn check_pair(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            entry: "pose".into(),
            expected: vec![gt.len(), 3],
            found: vec![pred.len(), 3],
        });
    }
    Ok(())
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

fn centered(p: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let c = centroid(p);
    p.iter().map(|x| x - c).collect()
}

/// Mean over joints of the Euclidean distance.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64)
}

/// MPJPE after centering both poses and scaling the prediction by the
/// least-squares optimal factor.
pub fn n_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, g) = (centered(pred), centered(gt));
    let pp: f64 = p.iter().map(|x| x.norm_squared()).sum();
    let pg: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
    let s = if pp > 0.0 {
        pg / pp
    } else {
        log::warn!("n_mpjpe: prediction collapses to a point; scale set to 0");
        0.0
    };
    let scaled: Vec<_> = p.iter().map(|x| s * x).collect();
    mpjpe(&scaled, &g)
}

/// Similarity transform `x ↦ s·R·x + t` mapping a prediction onto ground
/// truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// The rotation is not unique (fewer than two independent directions,
    /// e.g. collinear joints).
    pub degenerate: bool,
}

impl Alignment {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Closed-form orthogonal Procrustes with uniform scale and reflection
/// correction.
pub fn procrustes(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Alignment> {
    check_pair(pred, gt)?;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let (p, g) = (centered(pred), centered(gt));
    let cov: Matrix3<f64> = g.iter().zip(&p).map(|(b, a)| b * a.transpose()).sum();
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    // nalgebra does not sort singular values; the reflection flips the smallest.
    let smallest = svd.singular_values.imin();
    let mut flip = Vector3::repeat(1.0);
    flip[smallest] = d;
    let rotation = u * Matrix3::from_diagonal(&flip) * vt;
    let pp: f64 = p.iter().map(|x| x.norm_squared()).sum();
    let sv = svd.singular_values.component_mul(&flip);
    let scale = if pp > 0.0 { sv.sum() / pp } else { 0.0 };
    let mut sorted: Vec<f64> = svd.singular_values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let degenerate = pp == 0.0 || sorted[1] <= 1e-10 * sorted[0].max(f64::MIN_POSITIVE);
    if degenerate {
        log::debug!("procrustes: degenerate configuration, rotation not unique");
    }
    Ok(Alignment {
        rotation,
        scale,
        translation: mg - scale * rotation * mp,
        degenerate,
    })
}

/// MPJPE after similarity-aligning the prediction to ground truth.
pub fn p_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let a = procrustes(pred, gt)?;
    let aligned: Vec<_> = pred.iter().map(|x| a.apply(x)).collect();
    mpjpe(&aligned, gt)
}

pub fn pose_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<PoseError> {
    Ok(PoseError {
        mpjpe: mpjpe(pred, gt)?,
        n_mpjpe: n_mpjpe(pred, gt)?,
        p_mpjpe: p_mpjpe(pred, gt)?,
    })
}

/// `[x₁ y₁ z₁ … x_N y_N z_N]` per frame.
pub fn flatten_pose(points: &[Vector3<f64>]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten_pose(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    LinearNoBias,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub kind: RegressorKind,
    /// Hidden widths; empty for the linear kind.
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl RegressorSpec {
    pub fn linear() -> Self {
        Self {
            kind: RegressorKind::LinearNoBias,
            hidden: Vec::new(),
            activation: "none".into(),
        }
    }

    pub fn mlp() -> Self {
        Self {
            kind: RegressorKind::Mlp,
            hidden: vec![50, 50],
            activation: "relu".into(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" | "linear-no-bias" => Ok(Self::linear()),
            "mlp" => Ok(Self::mlp()),
            other => Err(Error::Config(format!("unknown regressor `{other}` (expected linear or mlp)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RegressorKind::LinearNoBias if !self.hidden.is_empty() => {
                Err(Error::Config("linear regressor takes no hidden layers".into()))
            }
            RegressorKind::Mlp if self.hidden.is_empty() || self.hidden.contains(&0) => {
                Err(Error::Config("mlp regressor needs positive hidden widths".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer settings for the MLP regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecipe {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for MlpRecipe {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            learning_rate: 1e-3,
            batch_size: 16,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: DVector<f64>,
    std: DVector<f64>,
}

impl Standardizer {
    fn fit(x: &DMatrix<f64>) -> Self {
        // Columns are frames.
        let d = x.ncols() as f64;
        let mean = x.column_mean();
        let std = DVector::from_iterator(
            x.nrows(),
            x.row_iter().zip(mean.iter()).map(|(r, &m)| {
                let var = r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
                var.sqrt().max(1e-8)
            }),
        );
        Self { mean, std }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for mut c in out.column_iter_mut() {
            c -= &self.mean;
            c.component_div_assign(&self.std);
        }
        out
    }

    fn inverse(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for mut c in out.column_iter_mut() {
            c.component_mul_assign(&self.std);
            c += &self.mean;
        }
        out
    }
}

/// A fitted keypoint-to-joint regressor.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    /// `y = W·x`.
    Linear { weights: DMatrix<f64> },
    Mlp {
        layers: Vec<Dense>,
        input: Standardizer,
        output: Standardizer,
        epochs_run: usize,
    },
}

impl Regressor {
    /// Predict for frames stored as columns.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Regressor::Linear { weights } => weights * x,
            Regressor::Mlp { layers, input, output, .. } => {
                let mut h = input.forward(x);
                for (i, l) in layers.iter().enumerate() {
                    h = &l.w * h;
                    for mut c in h.column_iter_mut() {
                        c += &l.b;
                    }
                    if i + 1 < layers.len() {
                        h.apply(|v| *v = v.max(0.0));
                    }
                }
                output.inverse(&h)
            }
        }
    }

    pub fn predict(&self, frame: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_column_slice(frame.len(), 1, frame);
        self.predict_batch(&x).column(0).iter().copied().collect()
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Regressor::Linear { weights } => weights.ncols(),
            Regressor::Mlp { layers, .. } => layers[0].w.ncols(),
        }
    }

    /// Epochs the MLP trained for before stopping; 0 for the linear kind.
    pub fn epochs_run(&self) -> usize {
        match self {
            Regressor::Linear { .. } => 0,
            Regressor::Mlp { epochs_run, .. } => *epochs_run,
        }
    }
}

fn frames_matrix(frames: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let Some(first) = frames.first() else {
        return Err(Error::invalid(what, "no frames"));
    };
    let dim = first.len();
    if dim == 0 {
        return Err(Error::invalid(what, "frames are empty"));
    }
    if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch {
            entry: what.into(),
            expected: vec![dim],
            found: vec![bad.len()],
        });
    }
    if frames.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(what, "non-finite values"));
    }
    Ok(DMatrix::from_fn(dim, frames.len(), |r, c| frames[c][r]))
}

/// Fit a regressor from flattened keypoint frames to flattened joint frames.
pub fn fit_regressor(inputs: &[Vec<f64>], targets: &[Vec<f64>], spec: &RegressorSpec, seed: u64) -> Result<Regressor> {
    fit_regressor_with(inputs, targets, spec, seed, &MlpRecipe::default())
}

pub fn fit_regressor_with(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    spec: &RegressorSpec,
    seed: u64,
    recipe: &MlpRecipe,
) -> Result<Regressor> {
    spec.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::invalid(
            "regressor data",
            format!("{} input frames but {} target frames", inputs.len(), targets.len()),
        ));
    }
    let x = frames_matrix(inputs, "regressor inputs")?;
    let y = frames_matrix(targets, "regressor targets")?;
    match spec.kind {
        RegressorKind::LinearNoBias => fit_linear(&x, &y),
        RegressorKind::Mlp => Ok(fit_mlp(&x, &y, &spec.hidden, seed, recipe)),
    }
}

/// Minimum-norm least squares `min ‖W·X − Y‖`.
fn fit_linear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Regressor> {
    let (dim, frames) = (x.nrows(), x.ncols());
    if frames < dim {
        log::warn!("linear regressor underdetermined ({frames} frames for {dim} features); using the minimum-norm solution");
    }
    // Wᵀ = pinv(Xᵀ)·Yᵀ.
    let xt = x.transpose();
    let svd = xt.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE) * frames.max(dim) as f64;
    let wt = svd
        .solve(&y.transpose(), eps)
        .map_err(|e| Error::invalid("regressor inputs", e.to_string()))?;
    Ok(Regressor::Linear { weights: wt.transpose() })
}

fn he_dense(fan_out: usize, fan_in: usize, r: &mut impl rand::Rng) -> Dense {
    let std = (2.0 / fan_in as f64).sqrt();
    Dense {
        w: DMatrix::from_fn(fan_out, fan_in, |_, _| {
            std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r)
        }),
        b: DVector::zeros(fan_out),
    }
}

struct Adam {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(layers: &[Dense], lr: f64) -> Self {
        let zeros: Vec<_> = layers
            .iter()
            .map(|l| (DMatrix::zeros(l.w.nrows(), l.w.ncols()), DVector::zeros(l.b.len())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, layers: &mut [Dense], grads: &[(DMatrix<f64>, DVector<f64>)]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (i, layer) in layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[i];
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            let params = [
                (layer.w.as_mut_slice(), gw.as_slice(), mw.as_mut_slice(), vw.as_mut_slice()),
                (layer.b.as_mut_slice(), gb.as_slice(), mb.as_mut_slice(), vb.as_mut_slice()),
            ];
            for (p, g, m, v) in params {
                for k in 0..p.len() {
                    m[k] = B1 * m[k] + (1.0 - B1) * g[k];
                    v[k] = B2 * v[k] + (1.0 - B2) * g[k] * g[k];
                    p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Mean squared error gradient of the network on standardized columns.
fn mlp_gradients(layers: &[Dense], x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let mut acts = vec![x.clone()];
    for (i, l) in layers.iter().enumerate() {
        let mut h = &l.w * acts.last().unwrap();
        for mut c in h.column_iter_mut() {
            c += &l.b;
        }
        if i + 1 < layers.len() {
            h.apply(|v| *v = v.max(0.0));
        }
        acts.push(h);
    }
    let n = (y.nrows() * y.ncols()) as f64;
    let mut delta = (acts.last().unwrap() - y) * (2.0 / n);
    let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); layers.len()];
    for i in (0..layers.len()).rev() {
        grads[i] = (&delta * acts[i].transpose(), delta.column_sum());
        if i > 0 {
            let mut back = layers[i].w.transpose() * &delta;
            back.zip_apply(&acts[i], |d, a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            delta = back;
        }
    }
    grads
}

fn mse(layers: &[Dense], x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = &l.w * h;
        for mut c in h.column_iter_mut() {
            c += &l.b;
        }
        if i + 1 < layers.len() {
            h.apply(|v| *v = v.max(0.0));
        }
    }
    (h - y).norm_squared() / (y.nrows() * y.ncols()) as f64
}

fn fit_mlp(x: &DMatrix<f64>, y: &DMatrix<f64>, hidden: &[usize], seed: u64, recipe: &MlpRecipe) -> Regressor {
    let mut r = rng::stream(seed, &[rng::tag::REGRESSOR]);
    let input = Standardizer::fit(x);
    let output = Standardizer::fit(y);
    let (xs, ys) = (input.forward(x), output.forward(y));
    let mut widths = vec![x.nrows()];
    widths.extend_from_slice(hidden);
    widths.push(y.nrows());
    let mut layers: Vec<Dense> = widths.windows(2).map(|io| he_dense(io[1], io[0], &mut r)).collect();

    let frames = x.ncols();
    let mut order: Vec<usize> = (0..frames).collect();
    order.shuffle(&mut r);
    let n_val = if frames >= 10 {
        ((frames as f64 * recipe.validation_fraction).round() as usize).max(1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let select = |m: &DMatrix<f64>, idx: &[usize]| m.select_columns(idx);
    let (xv, yv) = (select(&xs, val_idx), select(&ys, val_idx));

    let mut adam = Adam::new(&layers, recipe.learning_rate);
    let mut best = (f64::INFINITY, layers.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..recipe.max_epochs {
        train.shuffle(&mut r);
        for batch in train.chunks(recipe.batch_size.max(1)) {
            let grads = mlp_gradients(&layers, &select(&xs, batch), &select(&ys, batch));
            adam.step(&mut layers, &grads);
        }
        epochs_run += 1;
        if n_val == 0 {
            continue;
        }
        let loss = mse(&layers, &xv, &yv);
        if loss < best.0 {
            best = (loss, layers.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= recipe.patience {
                break;
            }
        }
    }
    if n_val > 0 && best.0.is_finite() {
        layers = best.1;
    }
    Regressor::Mlp {
        layers,
        input,
        output,
        epochs_run,
    }
}

/// Per-metric summary of a set of per-frame errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "summary of no values");
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |f: f64| {
            let pos = f * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            p10: q(0.1),
            p90: q(0.9),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub frames: usize,
    pub mpjpe: MetricSummary,
    pub n_mpjpe: MetricSummary,
    pub p_mpjpe: MetricSummary,
}

/// Regress every held-out frame and score it against ground truth.
pub fn evaluate_regressor(regressor: &Regressor, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<EvaluationSummary> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::invalid(
            "evaluation data",
            format!("{} input frames and {} target frames", inputs.len(), targets.len()),
        ));
    }
    let x = frames_matrix(inputs, "evaluation inputs")?;
    if x.nrows() != regressor.input_dim() {
        return Err(Error::ShapeMismatch {
            entry: "evaluation inputs".into(),
            expected: vec![regressor.input_dim()],
            found: vec![x.nrows()],
        });
    }
    let pred = regressor.predict_batch(&x);
    let mut errors = Vec::with_capacity(inputs.len());
    for (c, t) in targets.iter().enumerate() {
        let p: Vec<f64> = pred.column(c).iter().copied().collect();
        errors.push(pose_error(&unflatten_pose(&p), &unflatten_pose(t))?);
    }
    let pick = |f: fn(&PoseError) -> f64| MetricSummary::of(&errors.iter().map(f).collect::<Vec<_>>());
    Ok(EvaluationSummary {
        frames: errors.len(),
        mpjpe: pick(|e| e.mpjpe),
        n_mpjpe: pick(|e| e.n_mpjpe),
        p_mpjpe: pick(|e| e.p_mpjpe),
    })
}

/// Diagonal of the axis-aligned bounding box of a pose.
pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}
