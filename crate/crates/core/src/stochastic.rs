//! Monte Carlo simulation of concrete random weight matrices.
//!
//! Each layer holds a dense Gaussian weight matrix. At every step the
//! gradient is replaced by a random-walk direction: a Gaussian matrix whose
//! expected Frobenius norm is `c / ||W||_F` (the inverse-scaling property of
//! normalised layers), projected onto the orthogonal complement of `W`.
//! Ensemble means over many trials are then compared against the
//! deterministic model.
//!
//! Randomness comes from ChaCha8 keyed by `(seed, trial, layer, step)`, so
//! every draw is reproducible regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_network, LayerState, NetworkState, DEFAULT_TOLERANCE};
use crate::error::{ModelError, Result};
use crate::metrics::log_std;
use crate::schedule::{LrContext, Schedule};

/// Step slot reserved for the initial weight draw.
pub const INIT_STEP: u64 = u64::MAX;

/// Identity of one random substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub trial: u64,
    /// 1-based layer index.
    pub layer: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, trial: u64, layer: u64, step: u64) -> Self {
        Self {
            seed,
            trial,
            layer,
            step,
        }
    }

    pub fn at_step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    /// The 256-bit ChaCha key is the concatenation of the four words, so
    /// distinct keys never share a stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (chunk, word) in key
            .chunks_exact_mut(8)
            .zip([self.seed, self.trial, self.layer, self.step])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn gaussian_fill(key: StreamKey, std: f64, out: &mut [f64]) {
    let mut rng = key.rng();
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = std * z;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// A dense row-major weight matrix with its base gradient magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    c: f64,
    stream: StreamKey,
}

impl MatrixLayer {
    pub fn from_weights(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        c: f64,
        stream: StreamKey,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols {
            return Err(ModelError::config(format!(
                "weights of length {} do not form a {rows}x{cols} matrix",
                weights.len()
            )));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(ModelError::config(format!(
                "base gradient must be positive, got {c}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) || norm_sq(&weights) <= 0.0 {
            return Err(ModelError::config(
                "weights must be finite with non-zero norm",
            ));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            c,
            stream,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn stream(&self) -> StreamKey {
        self.stream
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.weights)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
    }
}

/// Draws a layer with i.i.d. `N(0, sigma_sq / (rows * cols))` entries, so
/// that `E ||W||_F^2 = sigma_sq`. Uses the [`INIT_STEP`] slot of `stream`.
pub fn init_matrix_layer(
    rows: usize,
    cols: usize,
    c: f64,
    sigma_sq: f64,
    stream: StreamKey,
) -> Result<MatrixLayer> {
    if rows == 0 || cols == 0 {
        return Err(ModelError::config("matrix dimensions must be at least 1"));
    }
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(ModelError::config(format!(
            "target norm must be positive, got {sigma_sq}"
        )));
    }
    let n = rows * cols;
    let mut weights = vec![0.0; n];
    gaussian_fill(
        stream.at_step(INIT_STEP),
        (sigma_sq / n as f64).sqrt(),
        &mut weights,
    );
    MatrixLayer::from_weights(rows, cols, weights, c, stream)
}

/// Random-walk gradient for `layer` at `step`.
///
/// Draws `R` with per-entry std `(c / ||W||_F) / sqrt(rows * cols)` and
/// returns `R - <R, W> / <W, W> * W`.
pub fn random_walk_gradient(layer: &MatrixLayer, step: u64) -> Vec<f64> {
    let w_sq = layer.norm_sq();
    let std = layer.c / w_sq.sqrt() / (layer.len() as f64).sqrt();
    let mut r = vec![0.0; layer.len()];
    gaussian_fill(layer.stream.at_step(step), std, &mut r);
    project_out(&mut r, &layer.weights, w_sq);
    r
}

/// Removes the component of `r` along `w`.
pub fn project_out(r: &mut [f64], w: &[f64], w_norm_sq: f64) {
    let coef = dot(r, w) / w_norm_sq;
    r.iter_mut().zip(w).for_each(|(ri, wi)| *ri -= coef * wi);
}

/// Rescales gradients so that each layer's ELR is pinned to `e_goal`:
/// `g <- g * e_goal / (E + epsilon)` with `E = ||g|| / ||W||`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstrainPolicy {
    pub e_goal: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-5
}

impl ConstrainPolicy {
    pub fn new(e_goal: f64) -> Self {
        Self {
            e_goal,
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_goal.is_finite() && self.e_goal > 0.0) {
            return Err(ModelError::config(format!(
                "e_goal must be positive, got {}",
                self.e_goal
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(ModelError::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Norms measured during one step of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// `||W||_F^2` before the update.
    pub wnorm_sq: f64,
    /// `||g||_F^2` of the applied gradient (after any rescale).
    pub gnorm_sq: f64,
    /// `||g||_F / ||W||_F` of the applied gradient.
    pub elr: f64,
    /// `<g, W> / (||g|| ||W||)`.
    pub cosine: f64,
}

/// Samples the (optionally rescaled) gradient of `layer` at `step` and
/// reports its statistics without applying it.
pub fn sample_gradient(
    layer: &MatrixLayer,
    step: u64,
    policy: Option<&ConstrainPolicy>,
) -> (Vec<f64>, StepStats) {
    let mut g = random_walk_gradient(layer, step);
    let w_sq = layer.norm_sq();
    let w = w_sq.sqrt();
    if let Some(p) = policy {
        let measured = norm_sq(&g).sqrt() / w;
        let factor = p.e_goal / (measured + p.epsilon);
        g.iter_mut().for_each(|x| *x *= factor);
    }
    let g_sq = norm_sq(&g);
    let g_norm = g_sq.sqrt();
    let cosine = if g_norm > 0.0 {
        dot(&g, &layer.weights) / (g_norm * w)
    } else {
        0.0
    };
    let stats = StepStats {
        wnorm_sq: w_sq,
        gnorm_sq: g_sq,
        elr: g_norm / w,
        cosine,
    };
    (g, stats)
}

/// One update `W - lambda * g` with a random-walk gradient.
pub fn mc_step(
    layer: &MatrixLayer,
    lambda: f64,
    step: u64,
    policy: Option<&ConstrainPolicy>,
) -> Result<(MatrixLayer, StepStats)> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(ModelError::contract(format!(
            "learning rate must be positive and finite, got {lambda}"
        )));
    }
    let (g, stats) = sample_gradient(layer, step, policy);
    let mut next = layer.clone();
    next.weights
        .iter_mut()
        .zip(&g)
        .for_each(|(w, gi)| *w -= lambda * gi);
    let n = next.norm_sq();
    if !(n.is_finite() && n > 0.0) {
        return Err(ModelError::Overflow {
            layer: layer.stream.layer as usize,
            step,
        });
    }
    Ok((next, stats))
}

/// Divides every layer by the largest Frobenius norm among them.
pub fn renormalize(layers: &[MatrixLayer]) -> Vec<MatrixLayer> {
    let mut out = layers.to_vec();
    renormalize_in_place(&mut out);
    out
}

/// In-place [`renormalize`]; returns the divisor.
pub fn renormalize_in_place(layers: &mut [MatrixLayer]) -> f64 {
    let max = layers.iter().map(MatrixLayer::norm).fold(0.0, f64::max);
    if max > 0.0 {
        layers.iter_mut().for_each(|l| l.scale(1.0 / max));
    }
    max
}

fn default_dim() -> usize {
    64
}
fn default_trials() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_dim")]
    pub rows: usize,
    #[serde(default = "default_dim")]
    pub cols: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constrain: Option<ConstrainPolicy>,
    #[serde(default)]
    pub renormalize_weights: bool,
    /// Worker threads for trials; `None` or 1 runs sequentially.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            rows: default_dim(),
            cols: default_dim(),
            trials: default_trials(),
            seed: 0,
            constrain: None,
            renormalize_weights: false,
            threads: None,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(ModelError::config("matrix dimensions must be at least 1"));
        }
        if self.trials == 0 {
            return Err(ModelError::config("trials must be at least 1"));
        }
        if let Some(p) = &self.constrain {
            p.validate()?;
        }
        Ok(())
    }
}

/// Per-step records of one trial: `stats[step][layer]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub lambdas: Vec<f64>,
    pub stats: Vec<Vec<StepStats>>,
}

/// Runs one trial. Row `i` describes the state at step `i` (after
/// renormalisation, if enabled) and the gradient drawn there; the last row's
/// gradient is drawn but not applied.
pub fn run_trial(
    initial: &NetworkState,
    schedule: &Schedule,
    steps: u64,
    config: &McConfig,
    trial: u64,
) -> Result<TrialRecord> {
    let mut layers = initial
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let key = StreamKey::new(config.seed, trial, i as u64 + 1, 0);
            init_matrix_layer(config.rows, config.cols, l.c(), l.sigma_sq(), key)
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = config.constrain.as_ref();
    let mut record = TrialRecord {
        trial,
        lambdas: Vec::with_capacity(steps as usize + 1),
        stats: Vec::with_capacity(steps as usize + 1),
    };
    let mut last_lr = None;
    for i in 0..=steps {
        if config.renormalize_weights {
            renormalize_in_place(&mut layers);
        }
        let lambda = if schedule.needs_state() {
            let measured = NetworkState::new(
                layers
                    .iter()
                    .map(|l| LayerState::new(l.norm_sq(), l.c()))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            schedule.lr_at(i, &LrContext::with_state(&measured).last_lr(last_lr))?
        } else {
            schedule.lr_at(i, &LrContext::stateless().last_lr(last_lr))?
        };
        let mut row = Vec::with_capacity(layers.len());
        if i == steps {
            row.extend(layers.iter().map(|l| sample_gradient(l, i, policy).1));
        } else {
            for layer in layers.iter_mut() {
                let (next, stats) = mc_step(layer, lambda, i, policy)?;
                *layer = next;
                row.push(stats);
            }
        }
        record.lambdas.push(lambda);
        record.stats.push(row);
        last_lr = Some(lambda);
    }
    Ok(record)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    /// Sample standard deviation (0 for a single trial).
    pub std: f64,
    pub count: usize,
}

impl Moments {
    fn from_values(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (count, sum) = values
            .clone()
            .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        if count == 0 {
            return Self::default();
        }
        let mean = sum / count as f64;
        let std = if count > 1 {
            let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
            (ss / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.std / (self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub wnorm_sq: Moments,
    pub gnorm_sq: Moments,
    pub elr: Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStep {
    pub step: u64,
    pub lambda: Moments,
    pub layers: Vec<LayerMoments>,
    /// Mean over trials of the per-trial largest `||W||_F^2` across layers.
    pub mean_max_wnorm_sq: f64,
    /// Mean over trials of the cross-layer spread of measured ELRs.
    pub mean_s_rel: f64,
    /// Largest `|cos(g, W)|` seen at this step in any trial.
    pub max_abs_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedTrial {
    pub trial: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub steps: Vec<EnsembleStep>,
    pub trials_run: usize,
    pub trials_included: usize,
    pub excluded: Vec<ExcludedTrial>,
}

/// Runs `config.trials` independent trials and aggregates per-step,
/// per-layer moments. Aggregation is an ordered reduction over trial index,
/// so the result does not depend on the number of threads.
pub fn mc_ensemble(
    initial: &NetworkState,
    schedule: &Schedule,
    steps: u64,
    config: &McConfig,
) -> Result<Ensemble> {
    config.validate()?;
    schedule.validate()?;
    if steps == 0 {
        return Err(ModelError::config("steps must be at least 1"));
    }
    let run = |t: usize| run_trial(initial, schedule, steps, config, t as u64);
    let results: Vec<Result<TrialRecord>> = match config.threads {
        Some(n) if n > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| ModelError::config(format!("thread pool: {e}")))?;
            pool.install(|| (0..config.trials).into_par_iter().map(run).collect())
        }
        _ => (0..config.trials).map(run).collect(),
    };

    let mut included = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => included.push(rec),
            Err(e @ ModelError::Overflow { .. }) => excluded.push(ExcludedTrial {
                trial: t as u64,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(Ensemble {
        steps: aggregate(&included, initial.len(), steps),
        trials_run: config.trials,
        trials_included: included.len(),
        excluded,
    })
}

fn aggregate(trials: &[TrialRecord], depth: usize, steps: u64) -> Vec<EnsembleStep> {
    if trials.is_empty() {
        return Vec::new();
    }
    let n = trials.len() as f64;
    (0..=steps as usize)
        .map(|i| {
            let layers = (0..depth)
                .map(|l| LayerMoments {
                    wnorm_sq: Moments::from_values(trials.iter().map(|t| t.stats[i][l].wnorm_sq)),
                    gnorm_sq: Moments::from_values(trials.iter().map(|t| t.stats[i][l].gnorm_sq)),
                    elr: Moments::from_values(trials.iter().map(|t| t.stats[i][l].elr)),
                })
                .collect();
            let max_w = trials
                .iter()
                .map(|t| t.stats[i].iter().map(|s| s.wnorm_sq).fold(0.0, f64::max))
                .sum::<f64>()
                / n;
            let spread = trials
                .iter()
                .map(|t| log_std(&t.stats[i].iter().map(|s| s.elr).collect::<Vec<_>>()))
                .sum::<f64>()
                / n;
            let cosine = trials
                .iter()
                .flat_map(|t| t.stats[i].iter().map(|s| s.cosine.abs()))
                .fold(0.0, f64::max);
            EnsembleStep {
                step: i as u64,
                lambda: Moments::from_values(trials.iter().map(|t| t.lambdas[i])),
                layers,
                mean_max_wnorm_sq: max_w,
                mean_s_rel: spread,
                max_abs_cosine: cosine,
            }
        })
        .collect()
}

/// Largest deviation of ensemble means from a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub max_rel_deviation: f64,
    pub step: u64,
    /// 1-based.
    pub layer: usize,
    /// Largest `|mean - reference| / standard error` over all steps/layers.
    pub max_std_errors: f64,
}

fn max_deviation(
    ensemble: &Ensemble,
    mut reference: impl FnMut(usize, usize) -> f64,
    pick: impl Fn(&LayerMoments) -> Moments,
) -> Option<Deviation> {
    let mut best: Option<Deviation> = None;
    let mut max_z: f64 = 0.0;
    for (i, st) in ensemble.steps.iter().enumerate() {
        for (l, lm) in st.layers.iter().enumerate() {
            let m = pick(lm);
            let want = reference(i, l);
            let rel = ((m.mean - want) / want).abs();
            let se = m.std_err();
            if se > 0.0 {
                max_z = max_z.max((m.mean - want).abs() / se);
            }
            if best.is_none_or(|b| rel > b.max_rel_deviation) {
                best = Some(Deviation {
                    max_rel_deviation: rel,
                    step: st.step,
                    layer: l + 1,
                    max_std_errors: 0.0,
                });
            }
        }
    }
    best.map(|b| Deviation {
        max_std_errors: max_z,
        ..b
    })
}

/// Runs the deterministic model alongside and compares ensemble mean
/// `||W||_F^2` against its `sigma_sq` at every step.
pub fn model_deviation(
    ensemble: &Ensemble,
    initial: &NetworkState,
    schedule: &Schedule,
) -> Result<Option<Deviation>> {
    let mut states = Vec::with_capacity(ensemble.steps.len());
    let mut state = initial.clone();
    let mut last_lr = None;
    for i in 0..ensemble.steps.len() {
        states.push(state.clone());
        if i + 1 == ensemble.steps.len() {
            break;
        }
        let ctx = LrContext::with_state(&state)
            .last_lr(last_lr)
            .tolerance(DEFAULT_TOLERANCE);
        let lambda = schedule.lr_at(i as u64, &ctx)?;
        state = step_network(&state, lambda)?;
        last_lr = Some(lambda);
    }
    Ok(max_deviation(
        ensemble,
        |i, l| states[i].layers()[l].sigma_sq(),
        |lm| lm.wnorm_sq,
    ))
}

/// Compares ensemble mean ELRs against a constant target, skipping step 0.
pub fn elr_goal_deviation(ensemble: &Ensemble, e_goal: f64) -> Option<Deviation> {
    let tail = Ensemble {
        steps: ensemble.steps.iter().skip(1).cloned().collect(),
        ..ensemble.clone()
    };
    max_deviation(&tail, |_, _| e_goal, |lm| lm.elr)
}
