//! Spectrally normalized ReLU network producing the disturbance basis `φ(x, x_r)`
//! and its meta-training by alternating least squares and SGD.

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disturbance::DomainDataset;
use crate::dynamics::ReducedState;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// Reduced state ⊕ reference state.
pub const INPUT_DIM: usize = 18;
/// Velocity rows of the basis.
pub const OUTPUT_ROWS: usize = 3;

pub type Mat39 = SMatrix<f64, 3, 9>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBasis {
    pub layers: Vec<DenseLayer>,
    /// Latent dimension `k`; the network emits `3k` values reshaped row-major into `3 × k`.
    pub k: usize,
    /// Lipschitz budget `γ` for the raw-input map.
    pub gamma: f64,
    pub input_mean: DVector<f64>,
    pub input_std: DVector<f64>,
}

/// Per-sample activations kept for backpropagation.
struct Trace {
    /// Normalized input followed by post-activation outputs of each hidden layer.
    activations: Vec<DVector<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DVector<f64>>,
    output: DVector<f64>,
}

pub fn input_vector(x: &ReducedState, x_r: &ReducedState) -> DVector<f64> {
    let mut v = DVector::zeros(INPUT_DIM);
    v.rows_mut(0, 9).copy_from(&x.to_vector());
    v.rows_mut(9, 9).copy_from(&x_r.to_vector());
    v
}

/// Scale `w` so that its largest singular value is at most `budget`; layers already
/// within budget are returned unchanged.
pub fn project_spectral(w: &DMatrix<f64>, budget: f64) -> DMatrix<f64> {
    let sigma = spectral_norm(w);
    if sigma > budget {
        w * (budget / sigma)
    } else {
        w.clone()
    }
}

impl MlpBasis {
    /// He-uniform initialization with zero biases.
    pub fn new_random(
        k: usize,
        hidden: usize,
        hidden_layers: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || hidden == 0 || hidden_layers == 0 || !(gamma > 0.0) {
            return Err(Error::invalid("network sizes and gamma must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![INPUT_DIM];
        dims.extend(std::iter::repeat_n(hidden, hidden_layers));
        dims.push(OUTPUT_ROWS * k);
        let layers = dims
            .windows(2)
            .map(|d| {
                let limit = (6.0 / d[0] as f64).sqrt();
                DenseLayer {
                    weights: DMatrix::from_fn(d[1], d[0], |_, _| rng.random_range(-limit..limit)),
                    bias: DVector::zeros(d[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            k,
            gamma,
            input_mean: DVector::zeros(INPUT_DIM),
            input_std: DVector::from_element(INPUT_DIM, 1.0),
        })
    }

    /// Per-layer spectral budget `γ^{1/(L+1)}`.
    pub fn layer_budget(&self) -> f64 {
        self.gamma.powf(1.0 / self.layers.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let mut fan_in = INPUT_DIM;
        for layer in &self.layers {
            if layer.weights.ncols() != fan_in || layer.bias.len() != layer.weights.nrows() {
                return Err(Error::Dimension {
                    expected: fan_in,
                    got: layer.weights.ncols(),
                });
            }
            fan_in = layer.weights.nrows();
        }
        if fan_in != OUTPUT_ROWS * self.k {
            return Err(Error::Dimension {
                expected: OUTPUT_ROWS * self.k,
                got: fan_in,
            });
        }
        if self.input_mean.len() != INPUT_DIM || self.input_std.len() != INPUT_DIM {
            return Err(Error::Dimension {
                expected: INPUT_DIM,
                got: self.input_mean.len().min(self.input_std.len()),
            });
        }
        let finite = self
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
            && self.input_mean.iter().all(|v| v.is_finite())
            && self.input_std.iter().all(|v| v.is_finite() && *v > 0.0);
        if !finite || !(self.gamma > 0.0) {
            return Err(Error::invalid(
                "network parameters must be finite with positive scales",
            ));
        }
        Ok(())
    }

    /// First-layer weights expressed on raw (unnormalized) inputs, `W¹ diag(1/std)`.
    fn effective_first(&self) -> DMatrix<f64> {
        let mut w = self.layers[0].weights.clone();
        for (j, mut col) in w.column_iter_mut().enumerate() {
            col /= self.input_std[j];
        }
        w
    }

    /// Largest singular value of each layer on raw-input scale.
    pub fn layer_spectral_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if i == 0 {
                    spectral_norm(&self.effective_first())
                } else {
                    spectral_norm(&l.weights)
                }
            })
            .collect()
    }

    /// Product of per-layer spectral norms: an upper bound on the Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layer_spectral_norms().iter().product()
    }

    /// Project every layer onto the per-layer spectral budget.
    pub fn spectral_normalize(&mut self) {
        let budget = self.layer_budget();
        let first = self.effective_first();
        let sigma = spectral_norm(&first);
        if sigma > budget {
            self.layers[0].weights *= budget / sigma;
        }
        for layer in self.layers.iter_mut().skip(1) {
            layer.weights = project_spectral(&layer.weights, budget);
        }
    }

    fn normalize_input(&self, input: &DVector<f64>) -> DVector<f64> {
        (input - &self.input_mean).component_div(&self.input_std)
    }

    fn trace(&self, input: &DVector<f64>) -> Trace {
        let mut activations = vec![self.normalize_input(input)];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let z = &layer.weights * activations.last().expect("non-empty") + &layer.bias;
            activations.push(z.map(|v| v.max(0.0)));
            pre.push(z);
        }
        let out_layer = &self.layers[last];
        let output = &out_layer.weights * activations.last().expect("non-empty") + &out_layer.bias;
        Trace {
            activations,
            pre,
            output,
        }
    }

    /// Raw `3k` output for an 18-dimensional input.
    pub fn forward_raw(&self, input: &[f64]) -> Result<DVector<f64>> {
        if input.len() != INPUT_DIM {
            return Err(Error::Dimension {
                expected: INPUT_DIM,
                got: input.len(),
            });
        }
        Ok(self.trace(&DVector::from_column_slice(input)).output)
    }

    fn reshape(&self, out: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(OUTPUT_ROWS, self.k, out.as_slice())
    }

    /// Basis matrix `φ(x, x_r) ∈ ℝ^{3×k}` acting on the velocity rows.
    pub fn forward(&self, x: &ReducedState, x_r: &ReducedState) -> DMatrix<f64> {
        self.reshape(&self.trace(&input_vector(x, x_r)).output)
    }

    /// `φ(x, x_r) a`.
    pub fn predict(&self, x: &ReducedState, x_r: &ReducedState, a: &DVector<f64>) -> Vector3<f64> {
        let phi = self.forward(x, x_r);
        let v = phi * a;
        Vector3::new(v[0], v[1], v[2])
    }

    /// `φ(x, x_r) a` together with its Jacobian with respect to `x`.
    pub fn predict_with_jacobian(
        &self,
        x: &ReducedState,
        x_r: &ReducedState,
        a: &DVector<f64>,
    ) -> (Vector3<f64>, Mat39) {
        let tr = self.trace(&input_vector(x, x_r));
        let phi = self.reshape(&tr.output);
        let value = &phi * a;
        // seeds: column i selects output row i weighted by a
        let mut delta = DMatrix::zeros(OUTPUT_ROWS * self.k, OUTPUT_ROWS);
        for i in 0..OUTPUT_ROWS {
            for j in 0..self.k {
                delta[(i * self.k + j, i)] = a[j];
            }
        }
        for l in (1..self.layers.len()).rev() {
            let mut back = self.layers[l].weights.transpose() * &delta;
            let z = &tr.pre[l - 1];
            for (r, zr) in z.iter().enumerate() {
                if *zr <= 0.0 {
                    back.row_mut(r).fill(0.0);
                }
            }
            delta = back;
        }
        let g = self.layers[0].weights.transpose() * &delta; // INPUT_DIM × 3
        let mut jac = Mat39::zeros();
        for i in 0..OUTPUT_ROWS {
            for c in 0..9 {
                jac[(i, c)] = g[(c, i)] / self.input_std[c];
            }
        }
        (Vector3::new(value[0], value[1], value[2]), jac)
    }
}

/// Coefficients fitted for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffFit {
    pub a: DVector<f64>,
    pub sigma_min: f64,
    pub rank_deficient: bool,
}

/// Stacked basis `Φ ∈ ℝ^{3N×k}` and targets `Y ∈ ℝ^{3N}` for one dataset.
fn stack(
    model: &MlpBasis,
    inputs: &[DVector<f64>],
    targets: &[Vector3<f64>],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = inputs.len();
    let mut phi = DMatrix::zeros(OUTPUT_ROWS * n, model.k);
    let mut y = DVector::zeros(OUTPUT_ROWS * n);
    for (s, (inp, t)) in inputs.iter().zip(targets).enumerate() {
        let out = model.trace(inp).output;
        for i in 0..OUTPUT_ROWS {
            for j in 0..model.k {
                phi[(OUTPUT_ROWS * s + i, j)] = out[i * model.k + j];
            }
            y[OUTPUT_ROWS * s + i] = t[i];
        }
    }
    (phi, y)
}

fn ridge_solve(phi: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<CoeffFit> {
    let k = phi.ncols();
    let sigma_min = if phi.nrows() == 0 {
        0.0
    } else {
        phi.singular_values().min()
    };
    let scale = phi.nrows().max(1) as f64;
    let gram = phi.transpose() * phi + DMatrix::identity(k, k) * (ridge * scale);
    let rhs = phi.transpose() * y;
    let a = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or(Error::RankDeficient { sigma_min })?;
    let rank_deficient = sigma_min < 1e-8 * phi.norm().max(1e-300);
    if rank_deficient {
        log::warn!(
            "stacked basis is rank deficient (σ_min = {sigma_min:e}); returning damped solution"
        );
    }
    Ok(CoeffFit {
        a,
        sigma_min,
        rank_deficient,
    })
}

/// Least-squares coefficients `argmin Σ‖y − φ a‖² + λN‖a‖²` for one dataset.
pub fn fit_coeffs(model: &MlpBasis, dataset: &DomainDataset, ridge: f64) -> Result<CoeffFit> {
    if dataset.samples.len() * OUTPUT_ROWS < model.k {
        return Err(Error::InsufficientHistory {
            needed: model.k.div_ceil(OUTPUT_ROWS),
            have: dataset.samples.len(),
        });
    }
    let inputs: Vec<_> = dataset
        .samples
        .iter()
        .map(|s| input_vector(&s.x, &s.x_r))
        .collect();
    let targets: Vec<_> = dataset.samples.iter().map(|s| s.y).collect();
    let (phi, y) = stack(model, &inputs, &targets);
    ridge_solve(&phi, &y, ridge)
}

/// Gradient of the loss with respect to every layer's weights and bias.
#[derive(Clone, Debug)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl Gradient {
    fn zeros_like(model: &MlpBasis) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            bias: model
                .layers
                .iter()
                .map(|l| DVector::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.norm_squared())
            .chain(self.bias.iter().map(|b| b.norm_squared()))
            .sum::<f64>()
            .sqrt()
    }
}

/// One training example: raw input, target residual and owning condition.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: DVector<f64>,
    pub target: Vector3<f64>,
    pub condition: usize,
}

/// Mean squared residual `1/B Σ‖y − φ(x) a_c‖²` and its gradient for fixed coefficients.
pub fn loss_and_gradient(
    model: &MlpBasis,
    batch: &[&Example],
    coeffs: &[DVector<f64>],
) -> (f64, Gradient) {
    let mut grad = Gradient::zeros_like(model);
    let mut loss = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    let last = model.layers.len() - 1;
    for ex in batch {
        let tr = model.trace(&ex.input);
        let a = &coeffs[ex.condition];
        let phi = model.reshape(&tr.output);
        let pred = &phi * a;
        let mut err = Vector3::zeros();
        for i in 0..OUTPUT_ROWS {
            err[i] = pred[i] - ex.target[i];
        }
        loss += err.norm_squared() * scale;
        let mut delta = DVector::zeros(OUTPUT_ROWS * model.k);
        for i in 0..OUTPUT_ROWS {
            for j in 0..model.k {
                delta[i * model.k + j] = 2.0 * scale * err[i] * a[j];
            }
        }
        for l in (0..=last).rev() {
            grad.weights[l].ger(1.0, &delta, &tr.activations[l], 1.0);
            grad.bias[l] += &delta;
            if l > 0 {
                let mut back = model.layers[l].weights.tr_mul(&delta);
                for (r, z) in tr.pre[l - 1].iter().enumerate() {
                    if *z <= 0.0 {
                        back[r] = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    (loss, grad)
}

/// Mean squared residual over examples.
pub fn loss(model: &MlpBasis, examples: &[Example], coeffs: &[DVector<f64>]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let phi = model.reshape(&model.trace(&ex.input).output);
            let pred = phi * &coeffs[ex.condition];
            (Vector3::new(pred[0], pred[1], pred[2]) - ex.target).norm_squared()
        })
        .sum();
    total / examples.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Largest gradient norm applied per batch; larger gradients are rescaled.
    pub grad_clip: f64,
    /// Tikhonov weight per stacked row in the coefficient fit.
    pub ridge: f64,
    /// Coefficient magnitude cap `a_max`.
    pub a_max: f64,
    /// Condition held out of the basis update for validation; `None` picks `M/2` when `M ≥ 3`.
    pub validation_condition: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            hidden: 64,
            hidden_layers: 3,
            gamma: 10.0,
            epochs: 500,
            batch: 256,
            learning_rate: 1e-3,
            momentum: 0.9,
            grad_clip: 10.0,
            ridge: 1e-6,
            a_max: 1e3,
            validation_condition: None,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub validation_condition: Option<usize>,
    /// Held-out loss of the zero predictor, for comparison.
    pub validation_baseline: Option<f64>,
    pub best_epoch: usize,
}

/// Trained basis with per-condition coefficients and the coefficient prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub basis: MlpBasis,
    pub coeffs: Vec<DVector<f64>>,
    /// Mean of the per-condition coefficients, the initial estimate `â(0)`.
    pub a_prior: DVector<f64>,
    /// Coefficient covariance `P_𝒟meta`, the initial adaptation covariance.
    pub p_meta: DMatrix<f64>,
    pub report: TrainReport,
}

fn examples_of(datasets: &[DomainDataset]) -> Vec<Vec<Example>> {
    datasets
        .iter()
        .enumerate()
        .map(|(c, d)| {
            d.samples
                .iter()
                .map(|s| Example {
                    input: input_vector(&s.x, &s.x_r),
                    target: s.y,
                    condition: c,
                })
                .collect()
        })
        .collect()
}

fn clamp_norm(a: DVector<f64>, a_max: f64) -> DVector<f64> {
    let n = a.norm();
    if n > a_max {
        a * (a_max / n)
    } else {
        a
    }
}

fn fit_all(
    model: &MlpBasis,
    per_condition: &[Vec<Example>],
    cfg: &TrainConfig,
) -> Result<Vec<DVector<f64>>> {
    per_condition
        .iter()
        .map(|exs| {
            let inputs: Vec<_> = exs.iter().map(|e| e.input.clone()).collect();
            let targets: Vec<_> = exs.iter().map(|e| e.target).collect();
            let (phi, y) = stack(model, &inputs, &targets);
            ridge_solve(&phi, &y, cfg.ridge).map(|f| clamp_norm(f.a, cfg.a_max))
        })
        .collect()
}

/// Input mean and spread over the given examples; constant features keep unit scale.
fn input_statistics(examples: &[&Example]) -> (DVector<f64>, DVector<f64>) {
    let n = examples.len().max(1) as f64;
    let mut mean = DVector::zeros(INPUT_DIM);
    for ex in examples {
        mean += &ex.input;
    }
    mean /= n;
    let mut var = DVector::zeros(INPUT_DIM);
    for ex in examples {
        let d = &ex.input - &mean;
        var += d.component_mul(&d);
    }
    var /= n;
    let std = var.map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 });
    (mean, std)
}

/// Coefficient prior: mean and ridge-regularized covariance of the per-condition fits.
fn coefficient_prior(coeffs: &[DVector<f64>], k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = coeffs.len().max(1) as f64;
    let mut mean = DVector::zeros(k);
    for a in coeffs {
        mean += a;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(k, k);
    for a in coeffs {
        let d = a - &mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    let floor = 1e-3 * cov.trace().max(1.0) / k as f64;
    cov += DMatrix::identity(k, k) * floor;
    (mean, cov)
}

/// Alternating meta-training: exact per-condition least squares, an SGD pass over the
/// basis, then spectral normalization, each epoch.
pub fn train_meta(datasets: &[DomainDataset], cfg: &TrainConfig) -> Result<MetaModel> {
    if datasets.is_empty() {
        return Err(Error::invalid("at least one dataset is required"));
    }
    if datasets
        .iter()
        .any(|d| d.samples.len() * OUTPUT_ROWS < cfg.k)
    {
        return Err(Error::invalid(
            "every dataset needs enough samples to fit k coefficients",
        ));
    }
    if !(cfg.learning_rate > 0.0)
        || !(cfg.grad_clip > 0.0)
        || cfg.batch == 0
        || !(0.0..1.0).contains(&cfg.momentum)
    {
        return Err(Error::invalid(
            "learning rate, batch and momentum out of range",
        ));
    }
    let m = datasets.len();
    let validation = match cfg.validation_condition {
        Some(v) if v < m && m >= 2 => Some(v),
        Some(v) => {
            return Err(Error::invalid(format!(
                "validation condition {v} out of range for {m} conditions"
            )))
        }
        None if m >= 3 => Some(m / 2),
        None => None,
    };
    let per_condition = examples_of(datasets);
    let training: Vec<&Example> = per_condition
        .iter()
        .enumerate()
        .filter(|(c, _)| Some(*c) != validation)
        .flat_map(|(_, exs)| exs.iter())
        .collect();

    let mut model =
        MlpBasis::new_random(cfg.k, cfg.hidden, cfg.hidden_layers, cfg.gamma, cfg.seed)?;
    let (mean, std) = input_statistics(&training);
    model.input_mean = mean;
    model.input_std = std;
    model.spectral_normalize();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut velocity = Gradient::zeros_like(&model);
    let mut order: Vec<usize> = (0..training.len()).collect();
    let validation_baseline = validation.map(|v| {
        let exs = &per_condition[v];
        exs.iter().map(|e| e.target.norm_squared()).sum::<f64>() / exs.len() as f64
    });

    let evaluate = |model: &MlpBasis, coeffs: &[DVector<f64>]| -> (f64, Option<f64>) {
        let total: f64 = training
            .iter()
            .map(|ex| {
                let phi = model.reshape(&model.trace(&ex.input).output);
                let pred = phi * &coeffs[ex.condition];
                (Vector3::new(pred[0], pred[1], pred[2]) - ex.target).norm_squared()
            })
            .sum();
        let train = total / training.len() as f64;
        let val = validation.map(|v| loss(model, &per_condition[v], coeffs));
        (train, val)
    };

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let coeffs = fit_all(&model, &per_condition, cfg)?;
    let (train0, val0) = evaluate(&model, &coeffs);
    history.push(EpochStats {
        epoch: 0,
        train_loss: train0,
        validation_loss: val0,
    });
    let mut best = (train0, 0, model.clone());

    for epoch in 1..=cfg.epochs {
        let coeffs = fit_all(&model, &per_condition, cfg)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| training[i]).collect();
            let (l, g) = loss_and_gradient(&model, &batch, &coeffs);
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let norm = g.norm();
            let step = if norm > cfg.grad_clip {
                cfg.learning_rate * cfg.grad_clip / norm
            } else {
                cfg.learning_rate
            };
            for (li, layer) in model.layers.iter_mut().enumerate() {
                velocity.weights[li] = &velocity.weights[li] * cfg.momentum - &g.weights[li] * step;
                velocity.bias[li] = &velocity.bias[li] * cfg.momentum - &g.bias[li] * step;
                layer.weights += &velocity.weights[li];
                layer.bias += &velocity.bias[li];
            }
        }
        model.spectral_normalize();
        let coeffs = fit_all(&model, &per_condition, cfg)?;
        let (train, val) = evaluate(&model, &coeffs);
        if !train.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_loss: train,
            validation_loss: val,
        });
        if train < best.0 {
            best = (train, epoch, model.clone());
        }
    }

    let (_, best_epoch, model) = best;
    let coeffs = fit_all(&model, &per_condition, cfg)?;
    let (a_prior, p_meta) = coefficient_prior(&coeffs, cfg.k);
    Ok(MetaModel {
        basis: model,
        coeffs,
        a_prior,
        p_meta,
        report: TrainReport {
            history,
            validation_condition: validation,
            validation_baseline,
            best_epoch,
        },
    })
}

/// Embed a `3 × k` velocity-row block into the 9-row state layout `[0; φ_v; 0]`.
pub fn embed_velocity_rows(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(9, phi.ncols());
    out.rows_mut(3, 3).copy_from(phi);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::power_iteration_sigma;

    fn tiny_model() -> MlpBasis {
        MlpBasis::new_random(2, 8, 2, 10.0, 3).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng) -> ReducedState {
        let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        ReducedState::from_vector(&crate::linalg::Vec9::from_column_slice(&v))
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut m = tiny_model();
        let last = m.layers.len() - 1;
        m.layers[last].weights.fill(0.0);
        let s = ReducedState::hover_at(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(m.forward(&s, &s), DMatrix::zeros(3, 2));
    }

    #[test]
    fn single_unit_relu_by_hand() {
        // 18 → 1 → 3 (k = 1): output row i = w_out_i · max(w·x, 0)
        let mut w1 = DMatrix::zeros(1, INPUT_DIM);
        w1[(0, 0)] = 2.0;
        w1[(0, 2)] = -1.0;
        let w2 = DMatrix::from_column_slice(3, 1, &[1.0, -0.5, 3.0]);
        let m = MlpBasis {
            layers: vec![
                DenseLayer {
                    weights: w1,
                    bias: DVector::zeros(1),
                },
                DenseLayer {
                    weights: w2,
                    bias: DVector::zeros(3),
                },
            ],
            k: 1,
            gamma: 10.0,
            input_mean: DVector::zeros(INPUT_DIM),
            input_std: DVector::from_element(INPUT_DIM, 1.0),
        };
        let on = ReducedState::hover_at(Vector3::new(1.0, 0.0, 0.5));
        let phi = m.forward(&on, &ReducedState::hover_at(Vector3::zeros()));
        let h = (2.0 * 1.0 - 0.5f64).max(0.0);
        assert_eq!(phi.as_slice(), &[h, -0.5 * h, 3.0 * h]);
        let off = ReducedState::hover_at(Vector3::new(-1.0, 0.0, 0.5));
        assert_eq!(m.forward(&off, &off).norm(), 0.0);
    }

    #[test]
    fn spectral_projection_examples() {
        let two = DMatrix::<f64>::identity(4, 4) * 2.0;
        assert!((project_spectral(&two, 1.0) - DMatrix::<f64>::identity(4, 4)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DMatrix::from_fn(64, 64, |_, _| rng.random_range(-1.0..1.0));
        let p = project_spectral(&w, 1.5);
        assert!((spectral_norm(&p) - 1.5).abs() < 1e-9);
        assert!((power_iteration_sigma(&p, 30) - spectral_norm(&p)).abs() < 1e-3 * 1.5 + 0.05);
        let twice = project_spectral(&p, 1.5);
        assert!((&twice - &p).norm() < 1e-12);
    }

    #[test]
    fn normalization_respects_budget_on_raw_inputs() {
        let mut m = MlpBasis::new_random(3, 16, 3, 10.0, 9).unwrap();
        m.input_std = DVector::from_fn(INPUT_DIM, |i, _| 0.05 + 0.1 * i as f64);
        m.spectral_normalize();
        let budget = m.layer_budget();
        assert!(m
            .layer_spectral_norms()
            .iter()
            .all(|s| *s <= budget * (1.0 + 1e-9)));
        assert!(m.lipschitz_bound() <= 10.0 * (1.0 + 1e-9));
        let before = m.clone();
        m.spectral_normalize();
        assert_eq!(m, before);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = MlpBasis::new_random(3, 16, 3, 10.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_state(&mut rng);
        let xr = random_state(&mut rng);
        let a = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let (_, jac) = m.predict_with_jacobian(&x, &xr, &a);
        let h = 1e-6;
        for c in 0..9 {
            let mut xp = x.to_vector();
            let mut xm = x.to_vector();
            xp[c] += h;
            xm[c] -= h;
            let fd = (m.predict(&ReducedState::from_vector(&xp), &xr, &a)
                - m.predict(&ReducedState::from_vector(&xm), &xr, &a))
                / (2.0 * h);
            assert!((fd - jac.column(c)).norm() < 1e-6, "column {c}");
        }
    }

    #[test]
    fn planted_coefficients_recovered() {
        let m = MlpBasis::new_random(3, 16, 2, 10.0, 21).unwrap();
        let truth = DVector::from_vec(vec![1.5, -0.7, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = (0..60)
            .map(|i| {
                let x = random_state(&mut rng);
                let x_r = random_state(&mut rng);
                crate::disturbance::Sample {
                    t: i as f64,
                    x,
                    u: crate::dynamics::ReducedControl {
                        f_u: 0.0,
                        eta_u: Vector3::zeros(),
                    },
                    y: m.predict(&x, &x_r, &truth),
                    x_r,
                }
            })
            .collect();
        let data = DomainDataset {
            condition: Default::default(),
            samples,
        };
        let fit = fit_coeffs(&m, &data, 0.0).unwrap();
        assert!((fit.a - &truth).norm() < 1e-8);
        let zero = DomainDataset {
            samples: data
                .samples
                .iter()
                .map(|s| crate::disturbance::Sample {
                    y: Vector3::zeros(),
                    ..s.clone()
                })
                .collect(),
            ..data.clone()
        };
        assert_eq!(fit_coeffs(&m, &zero, 1e-9).unwrap().a.norm(), 0.0);
    }

    #[test]
    fn ridge_fit_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let phi = DMatrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let fit = ridge_solve(&phi, &y, 0.0).unwrap();
        let pinv = phi.clone().pseudo_inverse(1e-14).unwrap();
        assert!((fit.a - pinv * y).norm() < 1e-10);
        let flat = DMatrix::from_fn(30, 3, |i, j| if j == 2 { 0.0 } else { (i + j) as f64 });
        assert!(
            ridge_solve(&flat, &DVector::zeros(30), 1e-6)
                .unwrap()
                .rank_deficient
        );
    }
}
