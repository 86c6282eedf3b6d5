//! Two-parameter pairwise CRF over the instances of a scene.
//!
//! Node log-potential `θ_u · p(y_i | x_i)`, edge log-potential `θ_p · M(y_i, y_j)`.
//! Inference is damped flooding sum-product (log-space) or, for small scenes,
//! exhaustive enumeration.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Scene, SceneSet};
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, shuffle, RngStream};

/// Largest number of joint assignments `brute_force` will enumerate.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub theta_u: f64,
    pub theta_p: f64,
}

impl CrfParams {
    pub fn new(theta_u: f64, theta_p: f64) -> Self {
        Self { theta_u, theta_p }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.theta_u.is_finite() || !self.theta_p.is_finite() {
            return Err(Error::invalid("CRF parameters must be finite"));
        }
        Ok(())
    }
}

/// Edge set of the model. `Full` connects every unordered pair of instances.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Full,
    Edges(Vec<(usize, usize)>),
}

impl Topology {
    /// Normalized `(i, j)` pairs with `i < j`, validated against `n` nodes.
    pub fn edges(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        match self {
            Topology::Full => Ok((0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()),
            Topology::Edges(list) => {
                let mut out = Vec::with_capacity(list.len());
                for &(a, b) in list {
                    if a == b || a >= n || b >= n {
                        return Err(Error::invalid(format!("invalid edge ({a}, {b}) for {n} nodes")));
                    }
                    let e = (a.min(b), a.max(b));
                    if out.contains(&e) {
                        return Err(Error::invalid(format!("duplicate edge ({a}, {b})")));
                    }
                    out.push(e);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbpConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub topology: Topology,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            damping: 0.5,
            topology: Topology::Full,
        }
    }
}

impl LbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("LBP tolerance must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::invalid("LBP damping must lie in [0, 1)"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("LBP needs at least one iteration"));
        }
        Ok(())
    }
}

/// Node and pair marginals. `pair[e]` is the row-major `C × C` table of `edges[e] = (i, j)`,
/// rows indexing `y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Beliefs {
    pub node: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub pair: Vec<Vec<f64>>,
    pub converged: bool,
    pub iters: usize,
    /// Bethe estimate under LBP, exact under enumeration.
    pub log_z: f64,
}

struct Potentials {
    c: usize,
    node: Vec<Vec<f64>>,
    edge: Vec<f64>,
}

impl Potentials {
    fn new(scene: &Scene, params: &CrfParams) -> Self {
        let c = scene.classes();
        let node = scene
            .instances
            .iter()
            .map(|inst| inst.unary.iter().map(|u| params.theta_u * u).collect())
            .collect();
        let edge = (0..c * c)
            .map(|k| params.theta_p * f64::from(scene.cooc(k / c, k % c)))
            .collect();
        Self { c, node, edge }
    }
}

fn normalize_log(v: &mut [f64]) {
    let z = log_sum_exp(v).expect("non-empty message");
    v.iter_mut().for_each(|x| *x -= z);
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Log-space messages of one LBP run; `log[2e]` flows `i → j`, `log[2e + 1]` flows
/// `j → i`, for `edges[e] = (i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Messages {
    pub log: Vec<Vec<f64>>,
}

/// Damped flooding sum-product from uniform messages.
pub fn lbp(scene: &Scene, params: &CrfParams, cfg: &LbpConfig) -> Result<Beliefs> {
    lbp_from(scene, params, cfg, None).map(|(b, _)| b)
}

/// As `lbp`, starting from `init` when it fits the scene; also returns the final messages.
pub fn lbp_from(scene: &Scene, params: &CrfParams, cfg: &LbpConfig, init: Option<&Messages>) -> Result<(Beliefs, Messages)> {
    cfg.validate()?;
    params.validate()?;
    if scene.is_empty() {
        return Err(Error::Empty("scene"));
    }
    let n = scene.len();
    let pot = Potentials::new(scene, params);
    let c = pot.c;
    let edges = cfg.topology.edges(n)?;

    let uniform = -(c as f64).ln();
    let mut msgs = match init {
        Some(m) if m.log.len() == 2 * edges.len() && m.log.iter().all(|v| v.len() == c) => m.log.clone(),
        _ => vec![vec![uniform; c]; 2 * edges.len()],
    };
    let incoming_sum = |msgs: &[Vec<f64>]| {
        let mut s = pot.node.clone();
        for (e, &(i, j)) in edges.iter().enumerate() {
            for a in 0..c {
                s[j][a] += msgs[2 * e][a];
                s[i][a] += msgs[2 * e + 1][a];
            }
        }
        s
    };
    // exp(ψ − max ψ), so each update is one shifted exp per entry and a mat-vec
    let psi_max = pot.edge.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let expo: Vec<f64> = pot.edge.iter().map(|v| (v - psi_max).exp()).collect();

    let mut converged = false;
    let mut iters = 0;
    let mut cavity = vec![0.0; c];
    let mut fresh = vec![0.0; c];
    let mut next = msgs.clone();
    while iters < cfg.max_iters {
        iters += 1;
        let s = incoming_sum(&msgs);
        let mut delta = 0.0f64;
        for (e, &(i, j)) in edges.iter().enumerate() {
            for (dir, (from, back)) in [(i, 2 * e + 1), (j, 2 * e)].into_iter().enumerate() {
                for a in 0..c {
                    cavity[a] = s[from][a] - msgs[back][a];
                }
                let top = cavity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                cavity.iter_mut().for_each(|v| *v = (*v - top).exp());
                for (b, f) in fresh.iter_mut().enumerate() {
                    // sender i indexes rows of the edge table, sender j indexes columns
                    *f = (0..c)
                        .map(|a| cavity[a] * if dir == 0 { expo[a * c + b] } else { expo[b * c + a] })
                        .sum();
                }
                let z: f64 = fresh.iter().sum();
                let out = &mut next[2 * e + dir];
                for b in 0..c {
                    let p_old = msgs[2 * e + dir][b].exp();
                    let p_new = fresh[b] / z;
                    // relative residual of the undamped update: bounds the pair/node inconsistency
                    delta = delta.max((p_new - p_old).abs() / p_new.max(p_old));
                    let p = cfg.damping * p_old + (1.0 - cfg.damping) * p_new;
                    out[b] = p.max(f64::MIN_POSITIVE).ln();
                }
            }
        }
        std::mem::swap(&mut msgs, &mut next);
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    let s = incoming_sum(&msgs);
    let node: Vec<Vec<f64>> = s
        .iter()
        .map(|row| {
            let mut r = row.clone();
            normalize_log(&mut r);
            r.into_iter().map(f64::exp).collect()
        })
        .collect();
    let mut pair = Vec::with_capacity(edges.len());
    let mut table = vec![0.0; c * c];
    for (e, &(i, j)) in edges.iter().enumerate() {
        for a in 0..c {
            for b in 0..c {
                table[a * c + b] = s[i][a] - msgs[2 * e + 1][a] + s[j][b] - msgs[2 * e][b] + pot.edge[a * c + b];
            }
        }
        normalize_log(&mut table);
        pair.push(table.iter().map(|v| v.exp()).collect::<Vec<f64>>());
    }

    // log Z_Bethe = energy term + Bethe entropy
    let mut degree = vec![0usize; n];
    for &(i, j) in &edges {
        degree[i] += 1;
        degree[j] += 1;
    }
    let mut log_z = 0.0;
    for i in 0..n {
        let h: f64 = -node[i].iter().map(|&p| xlogx(p)).sum::<f64>();
        let energy: f64 = node[i].iter().zip(&pot.node[i]).map(|(p, phi)| p * phi).sum();
        log_z += energy - (degree[i] as f64 - 1.0) * h;
    }
    for table in &pair {
        let h: f64 = -table.iter().map(|&p| xlogx(p)).sum::<f64>();
        let energy: f64 = table.iter().zip(&pot.edge).map(|(p, psi)| p * psi).sum();
        log_z += energy + h;
    }

    let beliefs = Beliefs {
        node,
        edges,
        pair,
        converged,
        iters,
        log_z,
    };
    Ok((beliefs, Messages { log: msgs }))
}

/// Sufficient statistics `(F_u, F_p)` of a joint labelling over `edges`.
pub fn features(scene: &Scene, labels: &[usize], edges: &[(usize, usize)]) -> (f64, f64) {
    let fu = scene.instances.iter().zip(labels).map(|(inst, &y)| inst.unary[y]).sum();
    let fp = edges.iter().map(|&(i, j)| f64::from(scene.cooc(labels[i], labels[j]))).sum();
    (fu, fp)
}

/// Exact marginals and log partition function by enumerating all `C^n` labellings
/// of the fully connected model.
pub fn brute_force(scene: &Scene, params: &CrfParams) -> Result<Beliefs> {
    brute_force_on(scene, params, &Topology::Full)
}

pub fn brute_force_on(scene: &Scene, params: &CrfParams, topology: &Topology) -> Result<Beliefs> {
    params.validate()?;
    if scene.is_empty() {
        return Err(Error::Empty("scene"));
    }
    let (n, c) = (scene.len(), scene.classes());
    let states = (c as f64).powi(n as i32);
    if states > ENUMERATION_LIMIT as f64 {
        return Err(Error::StateSpaceTooLarge {
            states,
            limit: ENUMERATION_LIMIT,
        });
    }
    let edges = topology.edges(n)?;
    let states = states as usize;
    let mut labels = vec![0usize; n];
    let mut scores = Vec::with_capacity(states);
    for _ in 0..states {
        let (fu, fp) = features(scene, &labels, &edges);
        scores.push(params.theta_u * fu + params.theta_p * fp);
        increment(&mut labels, c);
    }
    let log_z = log_sum_exp(&scores)?;
    let mut node = vec![vec![0.0; c]; n];
    let mut pair = vec![vec![0.0; c * c]; edges.len()];
    for s in &scores {
        let w = (s - log_z).exp();
        for (i, &y) in labels.iter().enumerate() {
            node[i][y] += w;
        }
        for (e, &(i, j)) in edges.iter().enumerate() {
            pair[e][labels[i] * c + labels[j]] += w;
        }
        increment(&mut labels, c);
    }
    Ok(Beliefs {
        node,
        edges,
        pair,
        converged: true,
        iters: 0,
        log_z,
    })
}

/// Mixed-radix counter; wraps to all zeros after the last state.
fn increment(labels: &mut [usize], c: usize) {
    for y in labels.iter_mut() {
        *y += 1;
        if *y < c {
            return;
        }
        *y = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inference {
    Exact,
    Lbp(LbpConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad {
    /// Mean NLL over the batch; a Bethe estimate unless `exact`.
    pub nll: f64,
    pub grad_u: f64,
    pub grad_p: f64,
    pub exact: bool,
    /// Number of scenes whose LBP run hit `max_iters` without converging.
    pub unconverged: usize,
}

struct SceneTerms {
    nll: f64,
    grad_u: f64,
    grad_p: f64,
    converged: bool,
    messages: Option<Messages>,
}

fn scene_terms(scene: &Scene, params: &CrfParams, inference: &Inference, warm: Option<&Messages>) -> Result<SceneTerms> {
    let (b, messages) = match inference {
        Inference::Exact => (brute_force(scene, params)?, None),
        Inference::Lbp(cfg) => {
            let (b, m) = lbp_from(scene, params, cfg, warm)?;
            (b, Some(m))
        }
    };
    let c = scene.classes();
    let observed: Vec<usize> = scene.instances.iter().map(|inst| inst.y).collect();
    let (fu, fp) = features(scene, &observed, &b.edges);
    let eu: f64 = scene
        .instances
        .iter()
        .zip(&b.node)
        .map(|(inst, p)| inst.unary.iter().zip(p).map(|(u, q)| u * q).sum::<f64>())
        .sum();
    let ep: f64 = b
        .pair
        .iter()
        .map(|t| t.iter().enumerate().map(|(k, q)| q * f64::from(scene.cooc(k / c, k % c))).sum::<f64>())
        .sum();
    Ok(SceneTerms {
        nll: b.log_z - params.theta_u * fu - params.theta_p * fp,
        grad_u: eu - fu,
        grad_p: ep - fp,
        converged: b.converged,
        messages,
    })
}

pub fn nll_and_grad(scenes: &[&Scene], params: &CrfParams, inference: &Inference) -> Result<NllGrad> {
    nll_and_grad_in(scenes, params, inference, None)
}

/// As `nll_and_grad`, optionally evaluating scenes on `pool`; the reduction order is fixed.
pub fn nll_and_grad_in(
    scenes: &[&Scene],
    params: &CrfParams,
    inference: &Inference,
    pool: Option<&rayon::ThreadPool>,
) -> Result<NllGrad> {
    let warm = vec![None; scenes.len()];
    batch_terms(scenes, &warm, params, inference, pool).map(|(g, _)| g)
}

fn batch_terms(
    scenes: &[&Scene],
    warm: &[Option<&Messages>],
    params: &CrfParams,
    inference: &Inference,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(NllGrad, Vec<Option<Messages>>)> {
    if scenes.is_empty() {
        return Err(Error::Empty("scene batch"));
    }
    let one = |k: usize| scene_terms(scenes[k], params, inference, warm[k]);
    let terms: Vec<Result<SceneTerms>> = match pool {
        Some(p) => p.install(|| (0..scenes.len()).into_par_iter().map(one).collect()),
        None => (0..scenes.len()).map(one).collect(),
    };
    let k = scenes.len() as f64;
    let mut out = NllGrad {
        nll: 0.0,
        grad_u: 0.0,
        grad_p: 0.0,
        exact: matches!(inference, Inference::Exact),
        unconverged: 0,
    };
    let mut messages = Vec::with_capacity(scenes.len());
    for t in terms {
        let t = t?;
        out.nll += t.nll / k;
        out.grad_u += t.grad_u / k;
        out.grad_p += t.grad_p / k;
        out.unconverged += usize::from(!t.converged);
        messages.push(t.messages);
    }
    Ok((out, messages))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub max_iters: usize,
    pub init: CrfParams,
    pub lbp: LbpConfig,
    pub divergence_bound: f64,
    pub workers: usize,
    /// Start each scene's LBP from its messages at the previous visit.
    pub warm_start: bool,
    pub stream: RngStream,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            batch: 16,
            max_iters: 30_000,
            init: CrfParams::new(1.0, 1.0),
            lbp: LbpConfig::default(),
            divergence_bound: 1e3,
            workers: 1,
            warm_start: true,
            stream: RngStream::new(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub nll_estimate: f64,
    pub theta_u: f64,
    pub theta_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfTrainOutcome {
    pub params: CrfParams,
    pub trace: Vec<TracePoint>,
    /// Iterations whose batch contained at least one non-converged LBP run.
    pub unconverged_iters: usize,
}

/// Training aborted; the trace up to the failure is kept for inspection.
#[derive(Debug)]
pub struct CrfTrainFailure {
    pub error: Error,
    pub trace: Vec<TracePoint>,
}

impl From<CrfTrainFailure> for Error {
    fn from(f: CrfTrainFailure) -> Self {
        f.error
    }
}

/// Momentum SGD (`v ← μv − lr·g`, `θ ← θ + v`) on shuffled mini-batches of scenes.
pub fn train_crf(set: &SceneSet, cfg: &CrfTrainConfig) -> std::result::Result<CrfTrainOutcome, CrfTrainFailure> {
    let fail = |error: Error, trace: Vec<TracePoint>| CrfTrainFailure { error, trace };
    if set.scenes.is_empty() {
        return Err(fail(Error::Empty("training scenes"), Vec::new()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(fail(Error::invalid("CRF training needs batch > 0, lr > 0, momentum in [0, 1)"), Vec::new()));
    }
    if let Err(e) = cfg.lbp.validate().and(cfg.init.validate()) {
        return Err(fail(e, Vec::new()));
    }
    let pool = if cfg.workers > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build() {
            Ok(p) => Some(p),
            Err(e) => return Err(fail(Error::invalid(format!("thread pool: {e}")), Vec::new())),
        }
    } else {
        None
    };

    let inference = Inference::Lbp(cfg.lbp.clone());
    let n = set.scenes.len();
    let per_epoch = n.div_ceil(cfg.batch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut theta = cfg.init;
    let (mut vu, mut vp) = (0.0, 0.0);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut unconverged_iters = 0;
    let mut cache: Vec<Option<Messages>> = vec![None; n];
    for it in 0..cfg.max_iters {
        let b = it % per_epoch;
        if b == 0 {
            order = (0..n).collect();
            shuffle(&mut order, &mut cfg.stream.derive((it / per_epoch) as u64).rng());
        }
        let members = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
        let batch: Vec<&Scene> = members.iter().map(|&k| &set.scenes[k]).collect();
        let warm: Vec<Option<&Messages>> = members.iter().map(|&k| cache[k].as_ref()).collect();
        let (g, messages) = match batch_terms(&batch, &warm, &theta, &inference, pool.as_ref()) {
            Ok(r) => r,
            Err(e) => return Err(fail(e, trace)),
        };
        if cfg.warm_start {
            for (&k, m) in members.iter().zip(messages) {
                cache[k] = m;
            }
        }
        unconverged_iters += usize::from(g.unconverged > 0);
        trace.push(TracePoint {
            iter: it,
            nll_estimate: g.nll,
            theta_u: theta.theta_u,
            theta_p: theta.theta_p,
        });
        vu = cfg.momentum * vu - cfg.lr * g.grad_u;
        vp = cfg.momentum * vp - cfg.lr * g.grad_p;
        theta.theta_u += vu;
        theta.theta_p += vp;
        let bound = cfg.divergence_bound;
        if !(theta.theta_u.abs() <= bound && theta.theta_p.abs() <= bound) {
            let error = Error::Diverged {
                iteration: it,
                theta_u: theta.theta_u,
                theta_p: theta.theta_p,
            };
            return Err(fail(error, trace));
        }
    }
    Ok(CrfTrainOutcome {
        params: theta,
        trace,
        unconverged_iters,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub labels: Vec<usize>,
    pub smoothed: Vec<Vec<f64>>,
    pub converged: bool,
}

/// Per-instance max-marginal labels under the CRF.
pub fn smooth(scene: &Scene, params: &CrfParams, cfg: &LbpConfig) -> Result<Smoothed> {
    let b = lbp(scene, params, cfg)?;
    Ok(Smoothed {
        labels: b.node.iter().map(|p| argmax(p)).collect(),
        smoothed: b.node,
        converged: b.converged,
    })
}

/// Fraction of instances whose unary argmax equals the true label.
pub fn unary_accuracy(set: &SceneSet) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &set.scenes {
        for inst in &s.instances {
            hit += usize::from(argmax(&inst.unary) == inst.y);
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Fraction of instances whose smoothed label equals the true label.
pub fn smoothed_accuracy(set: &SceneSet, params: &CrfParams, cfg: &LbpConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &set.scenes {
        let out = smooth(s, params, cfg)?;
        hit += out.labels.iter().zip(&s.instances).filter(|(l, inst)| **l == inst.y).count();
        total += s.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

pub fn save_params(path: &Path, params: &CrfParams) -> Result<()> {
    dataio::write_json(path, params)
}

pub fn load_params(path: &Path) -> Result<CrfParams> {
    let p: CrfParams = dataio::read_json(path)?;
    p.validate()
        .map_err(|_| Error::schema(path, "theta_u/theta_p", "parameters must be finite"))?;
    Ok(p)
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("iter,nll_estimate,theta_u,theta_p\n");
    for t in trace {
        s.push_str(&format!("{},{:.17e},{:.17e},{:.17e}\n", t.iter, t.nll_estimate, t.theta_u, t.theta_p));
    }
    s
}
