//! Multi-layer perceptron with concrete-dropout inputs, trained by minimizing the
//! mini-batch ELBO with RMSprop.
//!
//! Weights are stored `fan_in × fan_out`, so a layer computes `s = ã W + b` where
//! `ã = a ⊙ (1 − z̃) / (1 − p)` for layers with dropout attached. A relaxed mask value
//! `z̃` near one means the unit is dropped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{self, Dataset, Item, Split};
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, shuffle, sigmoid, softmax, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Concrete dropout with learned rates.
    Cdp,
    /// Dropout at a fixed rate; evaluated with masks off.
    DeterministicDropout,
    /// No dropout at all.
    Plain,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Cdp => "cdp",
            Variant::DeterministicDropout => "deterministic-dropout",
            Variant::Plain => "plain",
        }
    }

    pub fn learns_rate(&self) -> bool {
        matches!(self, Variant::Cdp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
    /// Dropout logit; `None` when no dropout is attached to this layer's input.
    pub rho: Option<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    pub fn dropout_rate(&self) -> Option<f64> {
        self.rho.map(sigmoid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdpParams {
    pub layers: Vec<Layer>,
    pub d: usize,
    pub c: usize,
    pub variant: Variant,
}

impl CdpParams {
    /// Fresh network `d → hidden… → c`; dropout sits on the input of every layer after
    /// the first unless the variant is `Plain`.
    pub fn init(d: usize, hidden: &[usize], c: usize, variant: Variant, init_rate: f64, stream: RngStream) -> Result<Self> {
        if d == 0 || c < 2 {
            return Err(Error::invalid("network needs d >= 1 and c >= 2"));
        }
        if !(init_rate > 0.0 && init_rate < 1.0) {
            return Err(Error::invalid("initial dropout rate must lie in (0, 1)"));
        }
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(c);
        let rho0 = (init_rate / (1.0 - init_rate)).ln();
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l + 2 == sizes.len();
            let std = if last { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let z = stream.derive(l as u64).std_normal(fan_in * fan_out);
            let w = Matrix::from_vec(fan_in, fan_out, z.into_iter().map(|v| v * std).collect())?;
            let rho = (l > 0 && variant != Variant::Plain).then_some(rho0);
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                rho,
            });
        }
        Ok(Self { layers, d, c, variant })
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.d;
        for layer in &self.layers {
            if layer.fan_in() != width {
                return Err(Error::Shape {
                    context: "layer chaining",
                    expected: width,
                    got: layer.fan_in(),
                });
            }
            if layer.b.len() != layer.fan_out() {
                return Err(Error::Shape {
                    context: "bias length",
                    expected: layer.fan_out(),
                    got: layer.b.len(),
                });
            }
            width = layer.fan_out();
        }
        if width != self.c {
            return Err(Error::Shape {
                context: "output width",
                expected: self.c,
                got: width,
            });
        }
        Ok(())
    }

    pub fn dropout_rates(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(Layer::dropout_rate).collect()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: Matrix::zeros(l.fan_in(), l.fan_out()),
                    b: vec![0.0; l.fan_out()],
                    rho: 0.0,
                })
                .collect(),
        }
    }
}

/// Relaxed Bernoulli mask `sigmoid((logit p + logit u) / t)`.
pub fn concrete_mask(p: f64, t: f64, u: f64) -> Result<f64> {
    let open = |v: f64| v > 0.0 && v < 1.0;
    if !open(p) || !open(u) {
        return Err(Error::invalid(format!("concrete_mask needs p, u in (0,1); got p={p}, u={u}")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(relaxed_mask((p / (1.0 - p)).ln(), t, u))
}

fn relaxed_mask(rho: f64, t: f64, u: f64) -> f64 {
    sigmoid((rho + u.ln() - (1.0 - u).ln()) / t)
}

/// Uniform noise for every dropout layer (empty vectors for layers without dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskNoise(pub Vec<Vec<f64>>);

impl MaskNoise {
    pub fn draw(params: &CdpParams, stream: RngStream) -> Self {
        MaskNoise(
            params
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| match layer.rho {
                    Some(_) => stream.derive(l as u64).uniform_open(layer.fan_in()),
                    None => Vec::new(),
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Layer input before dropout.
    pub input: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub pre_activation: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

/// One forward pass; `Stochastic` draws a fresh mask per dropout layer from `stream`.
pub fn forward(params: &CdpParams, x: &[f64], mode: Mode, stream: RngStream, temperature: f64) -> Result<(Vec<f64>, ForwardTrace)> {
    match mode {
        Mode::Deterministic => forward_with_noise(params, x, None, temperature),
        Mode::Stochastic => {
            let noise = MaskNoise::draw(params, stream);
            forward_with_noise(params, x, Some(&noise), temperature)
        }
    }
}

/// Forward pass with explicit mask noise (`None` = masks off).
pub fn forward_with_noise(params: &CdpParams, x: &[f64], noise: Option<&MaskNoise>, temperature: f64) -> Result<(Vec<f64>, ForwardTrace)> {
    if x.len() != params.d {
        return Err(Error::Shape {
            context: "forward input",
            expected: params.d,
            got: x.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut a = x.to_vec();
    let mut traces = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        if a.len() != layer.fan_in() {
            return Err(Error::Shape {
                context: "layer input",
                expected: layer.fan_in(),
                got: a.len(),
            });
        }
        let mask = match (layer.rho, noise) {
            (Some(rho), Some(noise)) => Some(noise.0[l].iter().map(|&u| relaxed_mask(rho, temperature, u)).collect::<Vec<f64>>()),
            _ => None,
        };
        let scaled: Vec<f64> = match (&mask, layer.dropout_rate()) {
            (Some(z), Some(p)) => a.iter().zip(z).map(|(ai, zi)| ai * (1.0 - zi) / (1.0 - p)).collect(),
            _ => a.clone(),
        };
        let mut s = layer.b.clone();
        for (i, &ai) in scaled.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (sj, wij) in s.iter_mut().zip(layer.w.row(i)) {
                *sj += ai * wij;
            }
        }
        let out: Vec<f64> = if l == last { s.clone() } else { s.iter().map(|v| v.max(0.0)).collect() };
        traces.push(LayerTrace {
            input: a,
            mask,
            pre_activation: s,
            output: out.clone(),
        });
        a = out;
    }
    Ok((a, ForwardTrace { layers: traces }))
}

/// Class probabilities with masks off.
pub fn predict_proba(params: &CdpParams, x: &[f64]) -> Result<Vec<f64>> {
    let (logits, _) = forward_with_noise(params, x, None, 1.0)?;
    Ok(softmax(&logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboCoefficients {
    /// Dataset size N in the N/K scaling.
    pub n: usize,
    pub l2: f64,
    pub dropout_reg: f64,
    pub temperature: f64,
}

/// Gradient of the per-item negative log likelihood with respect to every
/// layer's pre-activation, given a forward trace.
pub fn preactivation_grads(params: &CdpParams, trace: &ForwardTrace, y: usize) -> Vec<Vec<f64>> {
    let last = params.layers.len() - 1;
    let mut deltas = vec![Vec::new(); params.layers.len()];
    let mut delta = softmax(&trace.layers[last].pre_activation);
    delta[y] -= 1.0;
    for l in (0..=last).rev() {
        deltas[l] = delta.clone();
        if l == 0 {
            break;
        }
        let layer = &params.layers[l];
        let lt = &trace.layers[l];
        let mut da = vec![0.0; layer.fan_in()];
        for (i, d) in da.iter_mut().enumerate() {
            *d = layer.w.row(i).iter().zip(&delta).map(|(w, g)| w * g).sum();
        }
        if let (Some(z), Some(p)) = (&lt.mask, layer.dropout_rate()) {
            for (d, zi) in da.iter_mut().zip(z) {
                *d *= (1.0 - zi) / (1.0 - p);
            }
        }
        let prev = &trace.layers[l - 1].pre_activation;
        delta = da.iter().zip(prev).map(|(d, s)| if *s > 0.0 { *d } else { 0.0 }).collect();
    }
    deltas
}

/// ELBO loss and gradients for a mini-batch under one fixed mask-noise draw shared by
/// every item in the batch. `learn_rate` toggles the dropout-logit gradient.
pub fn elbo_with_noise(
    params: &CdpParams,
    batch: &[(&[f64], usize)],
    coef: &ElboCoefficients,
    noise: &MaskNoise,
    learn_rate: bool,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Empty("ELBO batch"));
    }
    let scale = coef.n as f64 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut mask_grad: Vec<Vec<f64>> = params.layers.iter().map(|l| vec![0.0; if l.rho.is_some() { l.fan_in() } else { 0 }]).collect();
    let mut nll = 0.0;
    let last = params.layers.len() - 1;
    for &(x, y) in batch {
        if y >= params.c {
            return Err(Error::invalid(format!("label {y} >= C={}", params.c)));
        }
        let (logits, trace) = forward_with_noise(params, x, Some(noise), coef.temperature)?;
        for (l, lt) in trace.layers.iter().enumerate() {
            if lt.pre_activation.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
        }
        nll += log_sum_exp(&logits)? - logits[y];
        let deltas = preactivation_grads(params, &trace, y);
        for l in 0..=last {
            let layer = &params.layers[l];
            let lt = &trace.layers[l];
            let delta: Vec<f64> = deltas[l].iter().map(|g| g * scale).collect();
            let scaled_input: Vec<f64> = match (&lt.mask, layer.dropout_rate()) {
                (Some(z), Some(p)) => lt.input.iter().zip(z).map(|(a, zi)| a * (1.0 - zi) / (1.0 - p)).collect(),
                _ => lt.input.clone(),
            };
            let g = &mut grads.layers[l];
            g.w.add_outer(&scaled_input, &delta, 1.0);
            for (gb, d) in g.b.iter_mut().zip(&delta) {
                *gb += d;
            }
            if lt.mask.is_some() {
                // d loss / d (multiplier_j) = a_j · Σ_k W_jk δ_k
                for (j, mg) in mask_grad[l].iter_mut().enumerate() {
                    let back: f64 = layer.w.row(j).iter().zip(&delta).map(|(w, d)| w * d).sum();
                    *mg += back * lt.input[j];
                }
            }
        }
    }
    if !nll.is_finite() {
        return Err(Error::NonFinite { layer: last });
    }
    let mut loss = scale * nll;

    for (l, layer) in params.layers.iter().enumerate() {
        let g = &mut grads.layers[l];
        let wsq = layer.w.frobenius_sq();
        let bsq: f64 = layer.b.iter().map(|v| v * v).sum();
        loss += coef.l2 * bsq;
        for (gb, b) in g.b.iter_mut().zip(&layer.b) {
            *gb += 2.0 * coef.l2 * b;
        }
        match layer.rho {
            Some(rho) => {
                let p = sigmoid(rho);
                let keep = 1.0 - p;
                loss += coef.l2 * wsq / keep;
                let neg_entropy = xlogx(p) + xlogx(keep);
                loss += coef.dropout_reg * layer.fan_in() as f64 * neg_entropy;
                for (gw, w) in g.w.as_mut_slice().iter_mut().zip(layer.w.as_slice()) {
                    *gw += 2.0 * coef.l2 * w / keep;
                }
                if learn_rate {
                    let z = &lt_mask(noise, l, rho, coef.temperature);
                    let mut drho = 0.0;
                    for (mg, zi) in mask_grad[l].iter().zip(z) {
                        let dm = -zi * (1.0 - zi) / (coef.temperature * keep) + (1.0 - zi) * p / keep;
                        drho += mg * dm;
                    }
                    drho += coef.l2 * wsq * p / keep;
                    drho += coef.dropout_reg * layer.fan_in() as f64 * rho * p * keep;
                    g.rho = drho;
                }
            }
            None => {
                loss += coef.l2 * wsq;
                for (gw, w) in g.w.as_mut_slice().iter_mut().zip(layer.w.as_slice()) {
                    *gw += 2.0 * coef.l2 * w;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: last });
    }
    Ok((loss, grads))
}

fn lt_mask(noise: &MaskNoise, l: usize, rho: f64, t: f64) -> Vec<f64> {
    noise.0[l].iter().map(|&u| relaxed_mask(rho, t, u)).collect()
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// ELBO loss and gradients with one mask draw from `stream`.
pub fn elbo_loss_and_grads(
    params: &CdpParams,
    batch: &[(&[f64], usize)],
    coef: &ElboCoefficients,
    learn_rate: bool,
    stream: RngStream,
) -> Result<(f64, Grads)> {
    let noise = MaskNoise::draw(params, stream);
    elbo_with_noise(params, batch, coef, &noise, learn_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Dataset size for the N/K scaling; defaults to the number of training items.
    pub dataset_size: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub l2_coeff: f64,
    pub dropout_reg_coeff: f64,
    pub temperature: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden: Vec<usize>,
    pub init_dropout: f64,
    pub stream: RngStream,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset_size: None,
            batch_size: 32,
            learning_rate: 1e-3,
            rms_decay: 0.9,
            l2_coeff: 3.5e-6,
            dropout_reg_coeff: 1e-5,
            temperature: 0.1,
            max_epochs: 50,
            patience: 5,
            hidden: vec![64, 64],
            init_dropout: 0.1,
            stream: RngStream::new(0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.rms_decay, self.temperature];
        if self.batch_size == 0 || self.max_epochs == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("batch size, epochs, learning rate, decay and temperature must be positive"));
        }
        if self.temperature > 1.0 || self.rms_decay >= 1.0 {
            return Err(Error::invalid("temperature must be in (0, 1] and rms decay in (0, 1)"));
        }
        if self.l2_coeff < 0.0 || self.dropout_reg_coeff < 0.0 {
            return Err(Error::invalid("regularization coefficients must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: CdpParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Trains a fresh network on the `train` split with early stopping on `validation`.
pub fn train(cfg: &TrainConfig, data: &Dataset, variant: Variant) -> Result<CdpParams> {
    train_with_history(cfg, data, variant).map(|o| o.params)
}

pub fn train_with_history(cfg: &TrainConfig, data: &Dataset, variant: Variant) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_items: Vec<&Item> = data.split(Split::Train).collect();
    let val_items: Vec<&Item> = data.split(Split::Validation).collect();
    let init = CdpParams::init(data.d, &cfg.hidden, data.c, variant, cfg.init_dropout, cfg.stream.derive(u64::MAX))?;
    fit(init, cfg, &train_items, &val_items)
}

/// RMSprop with early stopping, starting from `init`. Returns the best-validation snapshot.
pub fn fit(init: CdpParams, cfg: &TrainConfig, train_items: &[&Item], val_items: &[&Item]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_items.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    init.validate()?;
    let coef = ElboCoefficients {
        n: cfg.dataset_size.unwrap_or(train_items.len()),
        l2: cfg.l2_coeff,
        dropout_reg: if init.variant == Variant::Plain { 0.0 } else { cfg.dropout_reg_coeff },
        temperature: cfg.temperature,
    };
    let learn_rate = init.variant.learns_rate();
    let mut params = init;
    let mut cache = params.zeros_like();
    let mut best = (validation_nll(&params, val_items)?, params.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let es = cfg.stream.derive(epoch as u64);
        shuffle(&mut order, &mut es.derive(0).rng());
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (train_items[i].x.as_slice(), train_items[i].y)).collect();
            let (loss, grads) = elbo_loss_and_grads(&params, &batch, &coef, learn_rate, es.derive(1 + b as u64))?;
            epoch_loss += loss;
            rmsprop_step(&mut params, &mut cache, &grads, cfg.learning_rate, cfg.rms_decay, learn_rate);
        }
        let (val_nll, val_acc) = validation_stats(&params, val_items)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_nll,
            val_accuracy: val_acc,
        });
        if val_nll < best.0 {
            best = (val_nll, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        best_epoch: best.2,
        history,
    })
}

fn rmsprop_step(params: &mut CdpParams, cache: &mut Grads, grads: &Grads, lr: f64, decay: f64, learn_rate: bool) {
    const EPS: f64 = 1e-8;
    let update = |w: &mut f64, v: &mut f64, g: f64| {
        *v = decay * *v + (1.0 - decay) * g * g;
        *w -= lr * g / (v.sqrt() + EPS);
    };
    for ((layer, c), g) in params.layers.iter_mut().zip(&mut cache.layers).zip(&grads.layers) {
        for ((w, v), &gw) in layer.w.as_mut_slice().iter_mut().zip(c.w.as_mut_slice()).zip(g.w.as_slice()) {
            update(w, v, gw);
        }
        for ((b, v), &gb) in layer.b.iter_mut().zip(&mut c.b).zip(&g.b) {
            update(b, v, gb);
        }
        if learn_rate {
            if let Some(rho) = layer.rho.as_mut() {
                update(rho, &mut c.rho, g.rho);
            }
        }
    }
}

fn validation_nll(params: &CdpParams, items: &[&Item]) -> Result<f64> {
    validation_stats(params, items).map(|(nll, _)| nll)
}

/// Mean NLL and accuracy with masks off.
pub fn validation_stats(params: &CdpParams, items: &[&Item]) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut hits = 0usize;
    for it in items {
        let (logits, _) = forward_with_noise(params, &it.x, None, 1.0)?;
        nll += log_sum_exp(&logits)? - logits[it.y];
        hits += usize::from(argmax(&logits) == it.y);
    }
    let n = items.len().max(1) as f64;
    Ok((nll / n, hits as f64 / n))
}

/// Accuracy of the masks-off network on `items`.
pub fn accuracy<'a>(params: &CdpParams, items: impl IntoIterator<Item = &'a Item>) -> Result<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for it in items {
        let (logits, _) = forward_with_noise(params, &it.x, None, 1.0)?;
        hits += usize::from(argmax(&logits) == it.y);
        n += 1;
    }
    Ok(hits as f64 / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Checkpoint file
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    rho: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    layers: Vec<LayerFile>,
    c: usize,
    d: usize,
    variant: Variant,
}

pub fn save_checkpoint(path: &Path, params: &CdpParams) -> Result<()> {
    let file = CheckpointFile {
        layers: params
            .layers
            .iter()
            .map(|l| LayerFile {
                w: l.w.to_rows(),
                b: l.b.clone(),
                rho: l.rho,
            })
            .collect(),
        c: params.c,
        d: params.d,
        variant: params.variant,
    };
    dataio::write_json(path, &file)
}

pub fn load_checkpoint(path: &Path) -> Result<CdpParams> {
    let file: CheckpointFile = dataio::read_json(path)?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (l, lf) in file.layers.into_iter().enumerate() {
        let w = Matrix::from_rows(&lf.w).map_err(|e| Error::schema(path, format!("layers[{l}].w"), e.to_string()))?;
        layers.push(Layer { w, b: lf.b, rho: lf.rho });
    }
    if layers.is_empty() {
        return Err(Error::schema(path, "layers", "no layers"));
    }
    let params = CdpParams {
        layers,
        c: file.c,
        d: file.d,
        variant: file.variant,
    };
    params.validate().map_err(|e| Error::schema(path, "layers", e.to_string()))?;
    Ok(params)
}
