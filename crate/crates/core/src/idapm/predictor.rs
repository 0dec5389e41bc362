use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rasterize_motion_features, render_gt_heatmap, MotionFeatureStack, FEATURE_PLANES};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap};
use crate::loss::{loss_value, mean_loss_and_grad, LossParams};
use crate::ptcm::{relevance_all, Branches, PtcmParams};
use crate::scalar::Scalar;
use crate::scenario::{generate_scenario, Template};

pub const HIDDEN_PLANES: usize = 8;
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
const W1_LEN: usize = HIDDEN_PLANES * FEATURE_PLANES * TAPS;
const W2_LEN: usize = HIDDEN_PLANES * TAPS;
/// Trainable scalars: both kernels and both bias vectors.
pub const PARAM_COUNT: usize = W1_LEN + HIDDEN_PLANES + W2_LEN + 1;

const MAGIC: &[u8; 4] = b"IDAP";
const FILE_VERSION: u32 = 1;

/// Two 3×3 convolutions with zero padding: feature planes → rectified hidden
/// planes → one logistic output plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<S = f64> {
    /// `[hidden][input][ky][kx]`
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    /// `[hidden][ky][kx]`
    pub w2: Vec<S>,
    pub b2: S,
}

impl<S: Scalar> Predictor<S> {
    pub fn zeros() -> Self {
        Self {
            w1: vec![S::zero(); W1_LEN],
            b1: vec![S::zero(); HIDDEN_PLANES],
            w2: vec![S::zero(); W2_LEN],
            b2: S::zero(),
        }
    }

    /// Uniform Glorot initialization, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = (6.0 / ((FEATURE_PLANES + HIDDEN_PLANES) * TAPS) as f64).sqrt();
        let a2 = (6.0 / ((HIDDEN_PLANES + 1) * TAPS) as f64).sqrt();
        let mut p = Self::zeros();
        for w in &mut p.w1 {
            *w = S::lit(rng.random_range(-a1..a1));
        }
        for w in &mut p.w2 {
            *w = S::lit(rng.random_range(-a2..a2));
        }
        p
    }

    /// Parameters flattened in file order: w1, b1, w2, b2.
    pub fn params(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(PARAM_COUNT);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn from_params(p: &[S]) -> Result<Self> {
        if p.len() != PARAM_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                p.len()
            )));
        }
        let (w1, rest) = p.split_at(W1_LEN);
        let (b1, rest) = rest.split_at(HIDDEN_PLANES);
        let (w2, rest) = rest.split_at(W2_LEN);
        Ok(Self {
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: rest[0],
        })
    }

    pub fn cast<T: Scalar>(&self) -> Predictor<T> {
        let c = |v: &[S]| v.iter().map(|x| T::lit(x.as_f64())).collect();
        Predictor {
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: T::lit(self.b2.as_f64()),
        }
    }

    fn forward_full(&self, x: &Planes<S>) -> Forward<S> {
        let z1 = conv3x3(
            &x.data,
            FEATURE_PLANES,
            x.rows,
            x.cols,
            &self.w1,
            &self.b1,
            HIDDEN_PLANES,
        );
        let a1: Vec<S> = z1.iter().map(|&z| z.max(S::zero())).collect();
        let z2 = conv3x3(
            &a1,
            HIDDEN_PLANES,
            x.rows,
            x.cols,
            &self.w2,
            std::slice::from_ref(&self.b2),
            1,
        );
        let y = z2
            .iter()
            .map(|&z| S::one() / (S::one() + (-z).exp()))
            .collect();
        Forward { z1, a1, y }
    }

    /// Output plane, row-major.
    pub fn forward(&self, feats: &MotionFeatureStack) -> Result<Vec<S>> {
        Ok(self.forward_full(&Planes::from_stack(feats)?).y)
    }

    /// Gradient of all parameters given `dy = dLoss/dOutput`, in `params()` order.
    fn backward(&self, x: &Planes<S>, fw: &Forward<S>, dy: &[S]) -> Vec<S> {
        let (rows, cols) = (x.rows, x.cols);
        let dz2: Vec<S> = dy
            .iter()
            .zip(&fw.y)
            .map(|(&g, &y)| g * y * (S::one() - y))
            .collect();
        let (dw2, db2, da1) =
            conv3x3_backward(&fw.a1, HIDDEN_PLANES, rows, cols, &self.w2, &dz2, 1, true);
        let da1 = da1.unwrap_or_default();
        let dz1: Vec<S> = da1
            .iter()
            .zip(&fw.z1)
            .map(|(&g, &z)| if z > S::zero() { g } else { S::zero() })
            .collect();
        let (dw1, db1, _) = conv3x3_backward(
            &x.data,
            FEATURE_PLANES,
            rows,
            cols,
            &self.w1,
            &dz1,
            HIDDEN_PLANES,
            false,
        );
        let mut g = Vec::with_capacity(PARAM_COUNT);
        g.extend(dw1);
        g.extend(db1);
        g.extend(dw2);
        g.extend(db2);
        g
    }
}

/// Input planes flattened `[plane][row][col]`.
struct Planes<S> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
}

impl<S: Scalar> Planes<S> {
    fn from_stack(f: &MotionFeatureStack) -> Result<Self> {
        f.check_shape()?;
        let (rows, cols) = (f.seg.rows(), f.seg.cols());
        let data = f
            .planes()
            .iter()
            .flat_map(|p| p.cells().iter().map(|&v| S::lit(v)))
            .collect();
        Ok(Self { data, rows, cols })
    }
}

struct Forward<S> {
    z1: Vec<S>,
    a1: Vec<S>,
    y: Vec<S>,
}

/// Valid output range for kernel offset `d ∈ {-1, 0, 1}` on an axis of length `n`.
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo.min(hi), hi)
}

fn conv3x3<S: Scalar>(
    x: &[S],
    c_in: usize,
    rows: usize,
    cols: usize,
    w: &[S],
    b: &[S],
    c_out: usize,
) -> Vec<S> {
    let hw = rows * cols;
    let mut out = vec![S::zero(); c_out * hw];
    for o in 0..c_out {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.fill(b[o]);
        for i in 0..c_in {
            let src = &x[i * hw..(i + 1) * hw];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (r0, r1) = span(dy, rows);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (c0, c1) = span(dx, cols);
                    let k = w[(o * c_in + i) * TAPS + ky * KERNEL + kx];
                    for r in r0..r1 {
                        let sr = (r as isize + dy) as usize;
                        let dst = &mut plane[r * cols + c0..r * cols + c1];
                        let s = &src[sr * cols + (c0 as isize + dx) as usize
                            ..sr * cols + (c1 as isize + dx) as usize];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d = *d + k * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dW, db, dX)`; `dX` only when requested.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<S: Scalar>(
    x: &[S],
    c_in: usize,
    rows: usize,
    cols: usize,
    w: &[S],
    dz: &[S],
    c_out: usize,
    want_dx: bool,
) -> (Vec<S>, Vec<S>, Option<Vec<S>>) {
    let hw = rows * cols;
    let mut dw = vec![S::zero(); c_out * c_in * TAPS];
    let mut db = vec![S::zero(); c_out];
    let mut dx = want_dx.then(|| vec![S::zero(); c_in * hw]);
    for o in 0..c_out {
        let g = &dz[o * hw..(o + 1) * hw];
        db[o] = g.iter().fold(S::zero(), |a, &v| a + v);
        for i in 0..c_in {
            let src = &x[i * hw..(i + 1) * hw];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (r0, r1) = span(dy, rows);
                for kx in 0..KERNEL {
                    let dxo = kx as isize - 1;
                    let (c0, c1) = span(dxo, cols);
                    let widx = (o * c_in + i) * TAPS + ky * KERNEL + kx;
                    let k = w[widx];
                    let mut acc = S::zero();
                    for r in r0..r1 {
                        let sr = (r as isize + dy) as usize;
                        let gs = &g[r * cols + c0..r * cols + c1];
                        let lo = sr * cols + (c0 as isize + dxo) as usize;
                        let hi = sr * cols + (c1 as isize + dxo) as usize;
                        for (&gv, &xv) in gs.iter().zip(&src[lo..hi]) {
                            acc = acc + gv * xv;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dst = &mut dx[i * hw + lo..i * hw + hi];
                            for (d, &gv) in dst.iter_mut().zip(gs) {
                                *d = *d + k * gv;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dw, db, dx)
}

/// Runs the predictor over a feature stack.
pub fn predict_heatmap<S: Scalar>(
    model: &Predictor<S>,
    feats: &MotionFeatureStack,
) -> Result<Heatmap> {
    let y = model.forward(feats)?;
    let cells = y.iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
    Heatmap::from_vec(*feats.spec(), cells)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub iters: usize,
    pub step: f64,
    pub seed: u64,
    /// Parameters compared against finite differences before training.
    pub grad_check_params: usize,
    pub grad_check_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iters: 200,
            step: 0.05,
            seed: 0,
            grad_check_params: 24,
            grad_check_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S = f64> {
    pub model: Predictor<S>,
    /// Mean batch loss before each update.
    pub loss_trace: Vec<f64>,
    /// Objective after the last update.
    pub final_loss: f64,
    /// Worst relative error seen by the gradient check.
    pub grad_check_max_rel_error: f64,
}

struct Sample<S> {
    x: Planes<S>,
    gt: Vec<S>,
}

fn prepare<S: Scalar>(dataset: &[(MotionFeatureStack, Heatmap)]) -> Result<Vec<Sample<S>>> {
    dataset
        .iter()
        .map(|(f, h)| {
            let x = Planes::from_stack(f)?;
            f.seg.check_same_spec(h)?;
            Ok(Sample {
                x,
                gt: h.cells().iter().map(|&v| S::lit(v)).collect(),
            })
        })
        .collect()
}

/// Mean over samples of the mean per-cell loss, with its parameter gradient.
fn objective<S: Scalar>(
    model: &Predictor<S>,
    data: &[Sample<S>],
    loss: &LossParams<S>,
) -> Result<(S, Vec<S>)> {
    let n = S::lit(data.len() as f64);
    let mut total = S::zero();
    let mut grad = vec![S::zero(); PARAM_COUNT];
    for s in data {
        let fw = model.forward_full(&s.x);
        let (l, dy) = mean_loss_and_grad(&fw.y, &s.gt, loss)?;
        total = total + l;
        for (g, d) in grad.iter_mut().zip(model.backward(&s.x, &fw, &dy)) {
            *g = *g + d;
        }
    }
    grad.iter_mut().for_each(|g| *g = *g / n);
    Ok((total / n, grad))
}

fn objective_value(
    model: &Predictor<f64>,
    data: &[Sample<f64>],
    loss: &LossParams<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let y = model.forward_full(&s.x).y;
        let mut sum = 0.0;
        for (&x, &g) in y.iter().zip(&s.gt) {
            sum += loss_value(x, g, loss)?;
        }
        total += sum / y.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Compares analytic and central-difference gradients in double precision on a
/// seeded subset of parameters. Returns the worst relative error.
fn gradient_check(
    model: &Predictor<f64>,
    data: &[Sample<f64>],
    loss: &LossParams<f64>,
    opts: &TrainOptions,
) -> Result<f64> {
    let h = 1e-6;
    let (_, analytic) = objective(model, data, loss)?;
    let base = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6164);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.grad_check_params.min(PARAM_COUNT) {
        let idx = rng.random_range(0..PARAM_COUNT);
        let mut p = base.clone();
        p[idx] = base[idx] + h;
        let up = objective_value(&Predictor::from_params(&p)?, data, loss)?;
        p[idx] = base[idx] - h;
        let down = objective_value(&Predictor::from_params(&p)?, data, loss)?;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel >= opts.grad_check_tol {
            return Err(Error::GradientCheck {
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Full-batch gradient descent from a seeded initialization.
///
/// Gradients are verified against finite differences before the first update.
/// The returned trace holds the objective before each of the `iters` updates.
pub fn train_predictor<S: Scalar>(
    dataset: &[(MotionFeatureStack, Heatmap)],
    loss: &LossParams<S>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<S>> {
    train_from(Predictor::init(opts.seed), dataset, loss, opts)
}

/// As [`train_predictor`], starting from `model`.
pub fn train_from<S: Scalar>(
    model: Predictor<S>,
    dataset: &[(MotionFeatureStack, Heatmap)],
    loss: &LossParams<S>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<S>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if opts.iters == 0 {
        return Err(Error::param("iters", "need at least one iteration"));
    }
    loss.validate()?;
    let loss64 = LossParams {
        alpha_under: loss.alpha_under.as_f64(),
        alpha_over: loss.alpha_over.as_f64(),
        gamma1: loss.gamma1.as_f64(),
        gamma2: loss.gamma2.as_f64(),
        epsilon: loss.epsilon.as_f64(),
        variant: loss.variant,
    };
    let worst = gradient_check(
        &model.cast::<f64>(),
        &prepare::<f64>(dataset)?,
        &loss64,
        opts,
    )?;

    let data = prepare::<S>(dataset)?;
    let step = S::lit(opts.step);
    let mut params = model.params();
    let mut trace = Vec::with_capacity(opts.iters);
    for iteration in 0..opts.iters {
        let (l, g) = objective(&Predictor::from_params(&params)?, &data, loss)?;
        let value = l.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, value });
        }
        trace.push(value);
        for (p, d) in params.iter_mut().zip(g) {
            *p = *p - step * d;
        }
    }
    let model = Predictor::from_params(&params)?;
    let (last, _) = objective(&model, &data, loss)?;
    let final_loss = last.as_f64();
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: opts.iters,
            value: final_loss,
        });
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
        final_loss,
        grad_check_max_rel_error: worst,
    })
}

pub const SYNTHETIC_BATCH_SIZE: usize = 8;
/// Half-width of the ego-centered crop used by the synthetic batch, in cells.
const CROP_HALF_CELLS: i64 = 20;

/// Eight (features, supervision) pairs drawn from the scenario templates, each on
/// a 40 × 40 crop of the default grid centered on the ego.
pub fn synthetic_batch(seed: u64) -> Result<Vec<(MotionFeatureStack, Heatmap)>> {
    let full = GridSpec::default();
    let params = PtcmParams::default();
    (0..SYNTHETIC_BATCH_SIZE)
        .map(|i| {
            let template = Template::ALL[i % Template::ALL.len()];
            let scenario =
                generate_scenario(template, seed.wrapping_mul(31).wrapping_add(i as u64), 4)?;
            let frame = 1 + i % 4;
            let ego = scenario.ego().position_at(frame).unwrap_or_default();
            let cs = full.cell_size;
            let cx = ((ego.x - full.x_min) / cs).round() as i64;
            let cy = ((ego.y - full.y_min) / cs).round() as i64;
            let spec = GridSpec::new(
                full.x_min + (cx - CROP_HALF_CELLS) as f64 * cs,
                full.x_min + (cx + CROP_HALF_CELLS) as f64 * cs,
                full.y_min + (cy - CROP_HALF_CELLS) as f64 * cs,
                full.y_min + (cy + CROP_HALF_CELLS) as f64 * cs,
                cs,
            )?;
            let rel = relevance_all(&scenario, frame, &params, Branches::default())?;
            let gt = render_gt_heatmap(&scenario, frame, &rel, &spec, params.horizon)?;
            let feats = rasterize_motion_features(&scenario, frame, &spec, scenario.ego_intent)?;
            Ok((feats, gt))
        })
        .collect()
}

/// Writes the 16-byte header followed by every parameter as little-endian `f32`.
pub fn write_weights<S: Scalar>(model: &Predictor<S>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    for n in [FEATURE_PLANES, HIDDEN_PLANES, 1, KERNEL] {
        w.write_all(&(n as u16).to_le_bytes())?;
    }
    for p in model.params() {
        w.write_all(&(p.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_weights<S: Scalar>(mut r: impl Read) -> Result<Predictor<S>> {
    let fmt = |m: &str| Error::Format(m.to_string());
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| fmt("truncated weight header"))?;
    if &header[..4] != MAGIC {
        return Err(fmt("bad weight file magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != FILE_VERSION {
        return Err(Error::Format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let dims: Vec<usize> = header[8..16]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if dims != [FEATURE_PLANES, HIDDEN_PLANES, 1, KERNEL] {
        return Err(Error::Format(format!("unexpected layer shape {dims:?}")));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)
        .map_err(|_| fmt("unreadable weight body"))?;
    if body.len() != PARAM_COUNT * 4 {
        return Err(Error::Format(format!(
            "expected {} weight bytes, found {}",
            PARAM_COUNT * 4,
            body.len()
        )));
    }
    let params: Vec<S> = body
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Predictor::from_params(&params)
}

pub fn save_weights<S: Scalar>(model: &Predictor<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + PARAM_COUNT * 4);
    write_weights(model, &mut buf).map_err(|e| Error::io(path.as_ref(), e))?;
    crate::grid::write_file(path.as_ref(), &buf)
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<Predictor<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(bytes.as_slice())
}
