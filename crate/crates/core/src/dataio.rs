//! Synthetic datasets and scenes, domain-shift simulation, and the on-disk formats.
//!
//! All JSON written here goes through [`to_json_string`], which prints every
//! non-integer real with 17 significant digits so files round-trip exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{argmax, shuffle, softmax, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Calibration,
    Pool,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub x: Vec<f64>,
    pub y: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub c: usize,
    pub d: usize,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Copy of the items tagged `split`.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            c: self.c,
            d: self.d,
            items: self.split(split).cloned().collect(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        for it in &mut self.items {
            it.split = split;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_dataset(self, Path::new("<memory>"))
    }

    /// Re-tags items so each class is divided between splits in the given proportions.
    ///
    /// Fractions are taken in order; the last split absorbs rounding leftovers.
    pub fn assign_splits(&mut self, plan: &[(Split, f64)], stream: RngStream) -> Result<()> {
        if plan.is_empty() {
            return Err(Error::Empty("split plan"));
        }
        if plan.iter().any(|(_, f)| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("split fractions must lie in [0, 1]"));
        }
        let mut rng = stream.rng();
        for class in 0..self.c {
            let mut idx: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].y == class).collect();
            shuffle(&mut idx, &mut rng);
            let n = idx.len();
            let mut start = 0;
            for (k, (split, frac)) in plan.iter().enumerate() {
                let take = if k + 1 == plan.len() {
                    n - start
                } else {
                    ((frac * n as f64).round() as usize).min(n - start)
                };
                for &i in &idx[start..start + take] {
                    self.items[i].split = *split;
                }
                start += take;
            }
        }
        Ok(())
    }
}

/// Class means placed on a regular simplex with the requested pairwise distance.
pub fn simplex_means(c: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if c < 2 || d < 2 {
        return Err(Error::invalid("need at least 2 classes and 2 dimensions"));
    }
    if d + 1 < c {
        return Err(Error::invalid(format!(
            "{c} equidistant class means need at least {} dimensions, got {d}",
            c - 1
        )));
    }
    // Centred one-hot vertices e_k - 1/c span a (c-1)-dim hyperplane; express them in
    // an orthonormal basis of that hyperplane (Gram-Schmidt), then pad to d.
    let centred: Vec<Vec<f64>> = (0..c)
        .map(|k| (0..c).map(|j| if j == k { 1.0 } else { 0.0 } - 1.0 / c as f64).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in centred.iter().take(c - 1) {
        let mut w = v.clone();
        for b in &basis {
            let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            for (wi, bi) in w.iter_mut().zip(b) {
                *wi -= dot * bi;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(w.into_iter().map(|x| x / norm).collect());
    }
    let scale = separation / 2f64.sqrt();
    Ok(centred
        .iter()
        .map(|v| {
            let mut m = vec![0.0; d];
            for (k, b) in basis.iter().enumerate() {
                m[k] = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            m
        })
        .collect())
}

/// Unit-covariance Gaussian clusters, `per_class` items each, all tagged `train`.
pub fn gen_clusters(c: usize, d: usize, per_class: usize, separation: f64, stream: RngStream) -> Result<Dataset> {
    if per_class < 10 {
        return Err(Error::invalid("per_class must be at least 10"));
    }
    let means = simplex_means(c, d, separation)?;
    let noise = stream.std_normal(c * per_class * d);
    let mut items = Vec::with_capacity(c * per_class);
    let mut k = 0;
    for (y, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let x = mean.iter().map(|m| {
                let v = m + noise[k];
                k += 1;
                v
            });
            items.push(Item {
                x: x.collect(),
                y,
                split: Split::Train,
            });
        }
    }
    Ok(Dataset { c, d, items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub mean_offset: Vec<f64>,
    /// Multiplicative factor on the class-conditional covariance.
    pub noise_scale: f64,
}

/// Translates every feature vector by `mean_offset` and rescales its class-conditional spread.
///
/// A covariance factor above one adds fresh isotropic noise of variance `noise_scale - 1`
/// (exact for unit-covariance clusters); a factor below one contracts items toward their
/// class centroid by `sqrt(noise_scale)`.
pub fn apply_shift(data: &Dataset, shift: &ShiftSpec, stream: RngStream) -> Result<Dataset> {
    if shift.mean_offset.len() != data.d {
        return Err(Error::Shape {
            context: "apply_shift offset",
            expected: data.d,
            got: shift.mean_offset.len(),
        });
    }
    if !(shift.noise_scale > 0.0 && shift.noise_scale.is_finite()) || shift.mean_offset.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("shift must be finite with noise_scale > 0"));
    }
    let mut out = data.clone();
    if shift.noise_scale >= 1.0 {
        let sd = (shift.noise_scale - 1.0).sqrt();
        let noise = stream.std_normal(data.items.len() * data.d);
        for (i, it) in out.items.iter_mut().enumerate() {
            for (j, x) in it.x.iter_mut().enumerate() {
                *x += shift.mean_offset[j] + sd * noise[i * data.d + j];
            }
        }
    } else {
        let factor = shift.noise_scale.sqrt();
        let centroids = class_centroids(data);
        for it in &mut out.items {
            let mu = &centroids[it.y];
            for (j, x) in it.x.iter_mut().enumerate() {
                *x = mu[j] + factor * (*x - mu[j]) + shift.mean_offset[j];
            }
        }
    }
    Ok(out)
}

fn class_centroids(data: &Dataset) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; data.d]; data.c];
    let mut counts = vec![0usize; data.c];
    for it in &data.items {
        counts[it.y] += 1;
        for (s, x) in sums[it.y].iter_mut().zip(&it.x) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// Nearest class-mean classifier; the reference oracle for separability checks.
#[derive(Debug, Clone)]
pub struct NearestMean {
    means: Vec<Vec<f64>>,
}

impl NearestMean {
    pub fn fit(data: &Dataset) -> Self {
        Self {
            means: class_centroids(data),
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let dists: Vec<f64> = self
            .means
            .iter()
            .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        argmax(&dists)
    }

    pub fn accuracy<'a>(&self, items: impl IntoIterator<Item = &'a Item>) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for it in items {
            n += 1;
            hit += usize::from(self.predict(&it.x) == it.y);
        }
        hit as f64 / n.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub unary: Vec<f64>,
    pub y: usize,
}

/// A set of object instances sharing one co-occurrence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub instances: Vec<Instance>,
    /// Row-major `C × C` binary matrix.
    m: Vec<u8>,
    c: usize,
}

impl Scene {
    /// Validates and normalizes the unaries onto the simplex.
    pub fn new(c: usize, mut instances: Vec<Instance>, m: Vec<Vec<u8>>) -> Result<Scene> {
        if m.len() != c || m.iter().any(|r| r.len() != c) {
            return Err(Error::Shape {
                context: "co-occurrence matrix",
                expected: c,
                got: m.len(),
            });
        }
        for a in 0..c {
            for b in 0..c {
                if m[a][b] > 1 {
                    return Err(Error::invalid(format!("co-occurrence entry ({a},{b}) is not 0/1")));
                }
                if m[a][b] != m[b][a] {
                    return Err(Error::invalid(format!("co-occurrence matrix asymmetric at ({a},{b})")));
                }
            }
        }
        for (i, inst) in instances.iter_mut().enumerate() {
            if inst.unary.len() != c {
                return Err(Error::Shape {
                    context: "instance unary",
                    expected: c,
                    got: inst.unary.len(),
                });
            }
            if inst.y >= c {
                return Err(Error::invalid(format!("instance {i} label {} >= C={c}", inst.y)));
            }
            inst.unary = normalize_unary(&inst.unary)?;
        }
        Ok(Scene {
            instances,
            m: m.into_iter().flatten().collect(),
            c,
        })
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn cooc(&self, a: usize, b: usize) -> u8 {
        self.m[a * self.c + b]
    }

    pub fn cooc_rows(&self) -> Vec<Vec<u8>> {
        self.m.chunks(self.c).map(<[u8]>::to_vec).collect()
    }

    /// Classes that appear in any non-zero entry of the co-occurrence matrix.
    pub fn context_classes(&self) -> BTreeSet<usize> {
        (0..self.c)
            .filter(|&a| (0..self.c).any(|b| self.cooc(a, b) == 1))
            .collect()
    }

    pub fn with_unaries(&self, unaries: Vec<Vec<f64>>) -> Result<Scene> {
        let instances = self
            .instances
            .iter()
            .zip(unaries)
            .map(|(inst, unary)| Instance { unary, y: inst.y })
            .collect();
        Scene::new(self.c, instances, self.cooc_rows())
    }
}

/// Projects a non-negative vector onto the simplex by dividing by its sum.
pub fn normalize_unary(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid("unary entries must be finite and non-negative"));
    }
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return Err(Error::invalid("unary has zero mass"));
    }
    // dividing again by a sum that is 1 up to rounding can still move the last bit
    if (s - 1.0).abs() <= 1e-12 {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub c: usize,
    pub scenes: Vec<Scene>,
}

/// Binary co-occurrence matrix with `M(a, b) = 1` iff both classes belong to `group`.
pub fn group_cooc(c: usize, group: &[usize], diagonal: bool) -> Vec<Vec<u8>> {
    let set: BTreeSet<usize> = group.iter().copied().collect();
    (0..c)
        .map(|a| {
            (0..c)
                .map(|b| u8::from(set.contains(&a) && set.contains(&b) && (a != b || diagonal)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub c: usize,
    pub groups: Vec<Vec<usize>>,
    pub scenes: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub unary_noise: f64,
    /// Whether same-class pairs inside a group co-occur (`M(a, a) = 1`).
    #[serde(default = "default_true")]
    pub diagonal: bool,
}

fn default_true() -> bool {
    true
}

/// Scenes drawn from kit-list groups: one group per scene, labels from that group,
/// unaries = softmax(one-hot + unary_noise · N(0, I)).
pub fn gen_scenes(cfg: &SceneGenConfig, stream: RngStream) -> Result<SceneSet> {
    validate_groups(cfg.c, &cfg.groups)?;
    if cfg.n_min == 0 || cfg.n_min > cfg.n_max {
        return Err(Error::invalid("scene size range must satisfy 1 <= min <= max"));
    }
    let mut rng = stream.rng();
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for s in 0..cfg.scenes {
        let group = &cfg.groups[rng.random_range(0..cfg.groups.len())];
        let n = rng.random_range(cfg.n_min..=cfg.n_max);
        let noise = stream.derive(s as u64).std_normal(n * cfg.c);
        let instances = (0..n)
            .map(|i| {
                let y = group[rng.random_range(0..group.len())];
                let logits: Vec<f64> = (0..cfg.c)
                    .map(|k| f64::from(u8::from(k == y)) + cfg.unary_noise * noise[i * cfg.c + k])
                    .collect();
                Instance { unary: softmax(&logits), y }
            })
            .collect();
        scenes.push(Scene::new(cfg.c, instances, group_cooc(cfg.c, group, cfg.diagonal))?);
    }
    Ok(SceneSet { c: cfg.c, scenes })
}

pub(crate) fn validate_groups(c: usize, groups: &[Vec<usize>]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Empty("group list"));
    }
    for (g, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::invalid(format!("group {g} is empty")));
        }
        if let Some(bad) = group.iter().find(|&&k| k >= c) {
            return Err(Error::invalid(format!("group {g} contains class {bad} >= C={c}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// JSON text with every non-integer number printed to 17 significant digits.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().unwrap_or(f64::NAN);
                let _ = write!(out, "{x:.16e}");
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            // numeric vectors stay on one line
            if items.iter().all(|x| x.is_number()) {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(x, indent, out);
                }
                out.push(']');
                return;
            }
            out.push('[');
            for (i, x) in items.iter().enumerate() {
                out.push_str(if i == 0 { "\n" } else { ",\n" });
                push_indent(out, indent + 1);
                write_value(x, indent + 1, out);
            }
            if !items.is_empty() {
                out.push('\n');
                push_indent(out, indent);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, x)) in map.iter().enumerate() {
                out.push_str(if i == 0 { "\n" } else { ",\n" });
                push_indent(out, indent + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(x, indent + 1, out);
            }
            if !map.is_empty() {
                out.push('\n');
                push_indent(out, indent);
            }
            out.push('}');
        }
    }
}

fn push_indent(out: &mut String, n: usize) {
    for _ in 0..n {
        out.push_str("  ");
    }
}

/// Writes `text` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, text).map_err(|source| Error::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_string(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_json(path, data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let data: Dataset = read_json(path)?;
    validate_dataset(&data, path)?;
    Ok(data)
}

fn validate_dataset(data: &Dataset, path: &Path) -> Result<()> {
    if data.c < 2 {
        return Err(Error::schema(path, "c", "class count must be at least 2"));
    }
    for (i, it) in data.items.iter().enumerate() {
        if it.y >= data.c {
            return Err(Error::schema(path, format!("items[{i}].y"), format!("label {} >= c = {}", it.y, data.c)));
        }
        if it.x.len() != data.d {
            return Err(Error::schema(
                path,
                format!("items[{i}].x"),
                format!("length {} != d = {}", it.x.len(), data.d),
            ));
        }
        if it.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(path, format!("items[{i}].x"), "non-finite feature"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    unary: Vec<f64>,
    y: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    m: Vec<Vec<i64>>,
    instances: Vec<InstanceFile>,
}

#[derive(Serialize, Deserialize)]
struct SceneSetFile {
    c: usize,
    scenes: Vec<SceneFile>,
}

pub fn save_scenes(path: &Path, set: &SceneSet) -> Result<()> {
    let file = SceneSetFile {
        c: set.c,
        scenes: set
            .scenes
            .iter()
            .map(|s| SceneFile {
                m: s.cooc_rows().into_iter().map(|r| r.into_iter().map(i64::from).collect()).collect(),
                instances: s
                    .instances
                    .iter()
                    .map(|i| InstanceFile {
                        unary: i.unary.clone(),
                        y: i.y,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_scenes(path: &Path) -> Result<SceneSet> {
    let file: SceneSetFile = read_json(path)?;
    let c = file.c;
    let mut scenes = Vec::with_capacity(file.scenes.len());
    for (s, sf) in file.scenes.into_iter().enumerate() {
        let m = cooc_from_ints(&sf.m, c).map_err(|(field, msg)| Error::schema(path, format!("scenes[{s}].m{field}"), msg))?;
        for (i, inst) in sf.instances.iter().enumerate() {
            if inst.y >= c {
                return Err(Error::schema(
                    path,
                    format!("scenes[{s}].instances[{i}].y"),
                    format!("label {} >= c = {c}", inst.y),
                ));
            }
            if inst.unary.len() != c {
                return Err(Error::schema(
                    path,
                    format!("scenes[{s}].instances[{i}].unary"),
                    format!("length {} != c = {c}", inst.unary.len()),
                ));
            }
        }
        let instances = sf.instances.into_iter().map(|i| Instance { unary: i.unary, y: i.y }).collect();
        let scene = Scene::new(c, instances, m).map_err(|e| Error::schema(path, format!("scenes[{s}]"), e.to_string()))?;
        scenes.push(scene);
    }
    Ok(SceneSet { c, scenes })
}

fn cooc_from_ints(rows: &[Vec<i64>], c: usize) -> std::result::Result<Vec<Vec<u8>>, (String, String)> {
    if rows.len() != c {
        return Err((String::new(), format!("{} rows, expected {c}", rows.len())));
    }
    let mut m = Vec::with_capacity(c);
    for (a, r) in rows.iter().enumerate() {
        if r.len() != c {
            return Err((format!("[{a}]"), format!("{} columns, expected {c}", r.len())));
        }
        let mut row = Vec::with_capacity(c);
        for (b, &v) in r.iter().enumerate() {
            match v {
                0 | 1 => row.push(v as u8),
                _ => return Err((format!("[{a}][{b}]"), format!("entry {v} is not 0 or 1"))),
            }
        }
        m.push(row);
    }
    Ok(m)
}

pub fn save_cooc_csv(path: &Path, m: &[Vec<u8>]) -> Result<()> {
    let mut text = String::new();
    for row in m {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    write_atomic(path, &text)
}

pub fn load_cooc_csv(path: &Path) -> Result<Vec<Vec<u8>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::schema(path, "file", e.to_string()))?;
    let mut rows: Vec<Vec<i64>> = Vec::new();
    for (a, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::schema(path, format!("row {a}"), e.to_string()))?;
        let mut row = Vec::with_capacity(rec.len());
        for (b, field) in rec.iter().enumerate() {
            let v: i64 = field
                .parse()
                .map_err(|_| Error::schema(path, format!("[{a}][{b}]"), format!("`{field}` is not 0 or 1")))?;
            row.push(v);
        }
        rows.push(row);
    }
    let c = rows.len();
    let m = cooc_from_ints(&rows, c).map_err(|(field, msg)| Error::schema(path, field, msg))?;
    for a in 0..c {
        for b in 0..a {
            if m[a][b] != m[b][a] {
                return Err(Error::schema(path, format!("[{a}][{b}]"), "matrix is not symmetric"));
            }
        }
    }
    Ok(m)
}
