//! Self-organizing map over feature vectors.
//!
//! Classic online training: each iteration draws one sample, finds its
//! best-matching unit (BMU) and pulls every prototype toward the sample with a
//! Gaussian neighborhood. Learning rate and radius decay exponentially from
//! `lr0`/`radius0` to `lr0/100` and `1.0` across the schedule horizon.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section, SOM_TAG};
use crate::cnn::FeatureVector;
use crate::error::{shape_err, Error, Result};
use crate::face::Emotion;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub lr0: f64,
    pub radius0: f64,
    pub seed: u64,
}

impl Default for SomConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            iterations: 3000,
            lr0: 0.1,
            radius0: 15.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SomMeta {
    pub iterations_done: usize,
    /// Iteration count the decay schedules are stretched over.
    pub horizon: usize,
    pub lr0: f64,
    pub radius0: f64,
    pub seed: u64,
    /// Position in the sampling stream, so training can resume exactly.
    pub rng_word_pos: u128,
}

impl SomMeta {
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        self.lr0 * 0.01f64.powf(self.progress(t))
    }

    pub fn radius_at(&self, t: usize) -> f64 {
        self.radius0 * (1.0 / self.radius0).powf(self.progress(t))
    }

    pub fn final_learning_rate(&self) -> f64 {
        self.learning_rate_at(self.horizon.saturating_sub(1))
    }

    pub fn final_radius(&self) -> f64 {
        self.radius_at(self.horizon.saturating_sub(1))
    }

    fn progress(&self, t: usize) -> f64 {
        (t as f64 / self.horizon.saturating_sub(1).max(1) as f64).min(1.0)
    }
}

/// Grid position of a unit. Positions remember their grid shape so distances
/// across different maps are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BmuPosition {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BmuPosition {
    pub fn new(row: usize, col: usize, rows: usize, cols: usize) -> Result<Self> {
        if row >= rows || col >= cols {
            return Err(Error::InvalidArgument(format!(
                "position ({row}, {col}) outside {rows}x{cols} grid"
            )));
        }
        Ok(Self { row, col, rows, cols })
    }

    /// `(row / (rows-1), col / (cols-1))`, each in [0, 1].
    pub fn normalized(&self) -> [f64; 2] {
        let scale = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        [scale(self.row, self.rows), scale(self.col, self.cols)]
    }

    pub fn unit_index(&self) -> usize {
        self.row * self.cols + self.col
    }
}

/// Euclidean distance between normalized coordinates divided by the unit
/// square's diagonal, so the result lies in [0, 1].
pub fn normalized_bmu_distance(a: &BmuPosition, b: &BmuPosition) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(shape_err(
            "normalized_bmu_distance",
            format!("{}x{} grid", a.rows, a.cols),
            format!("{}x{} grid", b.rows, b.cols),
        ));
    }
    let [ar, ac] = a.normalized();
    let [br, bc] = b.normalized();
    Ok(((ar - br).powi(2) + (ac - bc).powi(2)).sqrt() / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SomModel {
    rows: usize,
    cols: usize,
    dim: usize,
    /// `rows * cols` prototypes of length `dim`, row-major by unit.
    prototypes: Vec<f64>,
    meta: SomMeta,
}

impl SomModel {
    /// Prototypes drawn uniformly inside the per-dimension bounding box of
    /// `features`; no training yet. The schedule horizon is `config.iterations`.
    pub fn initialize(features: &[FeatureVector], config: &SomConfig) -> Result<Self> {
        let dim = check_features(features)?;
        if config.rows == 0 || config.cols == 0 {
            return Err(Error::InvalidArgument("SOM grid must be at least 1x1".into()));
        }
        if !(config.lr0 > 0.0 && config.radius0 >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need lr0 > 0 and radius0 >= 1, got {} and {}",
                config.lr0, config.radius0
            )));
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for f in features {
            for (j, &v) in f.as_slice().iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let units = config.rows * config.cols;
        let mut prototypes = Vec::with_capacity(units * dim);
        for _ in 0..units {
            for j in 0..dim {
                let u: f64 = rng.random();
                prototypes.push(lo[j] + u * (hi[j] - lo[j]));
            }
        }
        Ok(Self {
            rows: config.rows,
            cols: config.cols,
            dim,
            prototypes,
            meta: SomMeta {
                iterations_done: 0,
                horizon: config.iterations.max(1),
                lr0: config.lr0,
                radius0: config.radius0,
                seed: config.seed,
                rng_word_pos: rng.get_word_pos(),
            },
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn units(&self) -> usize {
        self.rows * self.cols
    }

    pub fn meta(&self) -> SomMeta {
        self.meta
    }

    pub fn prototype(&self, unit: usize) -> &[f64] {
        &self.prototypes[unit * self.dim..(unit + 1) * self.dim]
    }

    pub fn prototypes_finite(&self) -> bool {
        self.prototypes.iter().all(|v| v.is_finite())
    }

    /// Builds a map from explicit prototypes (row-major by unit).
    pub fn from_prototypes(rows: usize, cols: usize, prototypes: Vec<Vec<f64>>) -> Result<Self> {
        if rows * cols != prototypes.len() || prototypes.is_empty() {
            return Err(shape_err("SomModel::from_prototypes", rows * cols, prototypes.len()));
        }
        let dim = prototypes[0].len();
        if prototypes.iter().any(|p| p.len() != dim) {
            return Err(shape_err("SomModel::from_prototypes", format!("all of length {dim}"), "ragged"));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            prototypes: prototypes.concat(),
            meta: SomMeta {
                iterations_done: 0,
                horizon: 1,
                lr0: 0.5,
                radius0: 1.0,
                seed: 0,
                rng_word_pos: 0,
            },
        })
    }

    fn position(&self, unit: usize) -> BmuPosition {
        BmuPosition {
            row: unit / self.cols,
            col: unit % self.cols,
            rows: self.rows,
            cols: self.cols,
        }
    }

    fn squared_distances(&self, v: &[f64]) -> Vec<f64> {
        par::map_range(self.units(), |u| {
            self.prototype(u)
                .iter()
                .zip(v)
                .map(|(w, x)| (x - w) * (x - w))
                .sum::<f64>()
        })
    }

    /// Unit with the smallest Euclidean distance to `v`; ties go to the
    /// smallest row, then the smallest column.
    pub fn best_matching_unit(&self, v: &FeatureVector) -> Result<BmuPosition> {
        Ok(self.bmu_with_distance(v)?.0)
    }

    fn bmu_with_distance(&self, v: &FeatureVector) -> Result<(BmuPosition, f64)> {
        if v.len() != self.dim {
            return Err(shape_err("best_matching_unit", self.dim, v.len()));
        }
        Ok(self.bmu_slice(v.as_slice()))
    }

    fn bmu_slice(&self, v: &[f64]) -> (BmuPosition, f64) {
        let d = self.squared_distances(v);
        let mut best = 0;
        for (u, &du) in d.iter().enumerate() {
            if du < d[best] {
                best = u;
            }
        }
        (self.position(best), d[best].sqrt())
    }

    /// Runs `steps` more online iterations, continuing the stored schedule and
    /// sampling stream.
    pub fn train_steps(&mut self, features: &[FeatureVector], steps: usize) -> Result<()> {
        let dim = check_features(features)?;
        if dim != self.dim {
            return Err(shape_err("SomModel::train_steps", self.dim, dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.meta.seed);
        rng.set_word_pos(self.meta.rng_word_pos);
        let cols = self.cols;
        for _ in 0..steps {
            let t = self.meta.iterations_done;
            let x = features[rng.random_range(0..features.len())].as_slice();
            let (bmu, _) = self.bmu_slice(x);
            let lr = self.meta.learning_rate_at(t);
            let sigma = self.meta.radius_at(t);
            let denom = 2.0 * sigma * sigma;
            par::for_each_chunk_mut(&mut self.prototypes, dim, |unit, w| {
                let dr = (unit / cols) as f64 - bmu.row as f64;
                let dc = (unit % cols) as f64 - bmu.col as f64;
                let h = (-(dr * dr + dc * dc) / denom).exp();
                let k = lr * h;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += k * (xi - *wi);
                }
            });
            self.meta.iterations_done += 1;
        }
        self.meta.rng_word_pos = rng.get_word_pos();
        Ok(())
    }

    /// Mean distance from each sample to its BMU prototype.
    pub fn quantization_error(&self, features: &[FeatureVector]) -> Result<f64> {
        check_features(features)?;
        let total: f64 = features
            .iter()
            .map(|f| self.bmu_with_distance(f).map(|(_, d)| d))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(total / features.len() as f64)
    }

    /// Per-unit majority labels and the resulting purity.
    pub fn label_map(&self, features: &[FeatureVector], labels: &[Emotion]) -> Result<LabelMap> {
        check_features(features)?;
        if features.len() != labels.len() {
            return Err(shape_err("label_map", features.len(), labels.len()));
        }
        let bmus = features
            .iter()
            .map(|f| self.best_matching_unit(f))
            .collect::<Result<Vec<_>>>()?;
        let mut votes = vec![[0usize; Emotion::COUNT]; self.units()];
        for (b, l) in bmus.iter().zip(labels) {
            votes[b.unit_index()][l.code()] += 1;
        }
        let majority: Vec<Option<Emotion>> = votes
            .iter()
            .map(|v| {
                let total: usize = v.iter().sum();
                (total > 0).then(|| {
                    let mut best = 0;
                    for (c, &n) in v.iter().enumerate() {
                        if n > v[best] {
                            best = c;
                        }
                    }
                    Emotion::from_code(best).expect("in range")
                })
            })
            .collect();
        let visited: Vec<usize> = (0..self.units()).filter(|&u| majority[u].is_some()).collect();
        let units: Vec<Emotion> = (0..self.units())
            .map(|u| {
                majority[u].unwrap_or_else(|| {
                    let p = self.position(u);
                    let nearest = visited
                        .iter()
                        .copied()
                        .min_by_key(|&v| {
                            let q = self.position(v);
                            let dr = p.row.abs_diff(q.row);
                            let dc = p.col.abs_diff(q.col);
                            (dr * dr + dc * dc, v)
                        })
                        .expect("at least one visited unit");
                    majority[nearest].expect("visited")
                })
            })
            .collect();
        let hits = bmus
            .iter()
            .zip(labels)
            .filter(|(b, l)| units[b.unit_index()] == **l)
            .count();
        Ok(LabelMap {
            rows: self.rows,
            cols: self.cols,
            units,
            visited: visited.len(),
            purity: hits as f64 / labels.len() as f64,
        })
    }

    pub fn to_section(&self) -> Section {
        Section::new(SOM_TAG)
            .with("rows", self.rows)
            .with("cols", self.cols)
            .with("dim", self.dim)
            .with("iterations_done", self.meta.iterations_done)
            .with("horizon", self.meta.horizon)
            .with("lr0", self.meta.lr0)
            .with("radius0", self.meta.radius0)
            .with("seed", self.meta.seed)
            .with("rng_word_pos", self.meta.rng_word_pos)
            .with_values(self.prototypes.clone())
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let rows: usize = s.get("rows")?;
        let cols: usize = s.get("cols")?;
        let dim: usize = s.get("dim")?;
        if s.values.len() != rows * cols * dim {
            return Err(s
                .malformed(format!("expected {} prototype values, found {}", rows * cols * dim, s.values.len()))
                .into());
        }
        Ok(Self {
            rows,
            cols,
            dim,
            prototypes: s.values.clone(),
            meta: SomMeta {
                iterations_done: s.get("iterations_done")?,
                horizon: s.get("horizon")?,
                lr0: s.get("lr0")?,
                radius0: s.get("radius0")?,
                seed: s.get("seed")?,
                rng_word_pos: s.get("rng_word_pos")?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(vec![self.to_section()]).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_section(Checkpoint::load(path)?.section(SOM_TAG)?)
    }
}

/// Initializes and trains a map for `config.iterations` iterations.
pub fn train_som(features: &[FeatureVector], config: &SomConfig) -> Result<SomModel> {
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut model = SomModel::initialize(features, config)?;
    model.train_steps(features, config.iterations)?;
    Ok(model)
}

fn check_features(features: &[FeatureVector]) -> Result<usize> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("no feature vectors given".into()))?;
    let dim = first.len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(shape_err("SOM input", dim, bad.len()));
    }
    Ok(dim)
}

/// Majority emotion per unit (unvisited units inherit the nearest visited
/// unit's label) and the fraction of samples whose BMU carries their label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub rows: usize,
    pub cols: usize,
    pub units: Vec<Emotion>,
    pub visited: usize,
    pub purity: f64,
}

impl LabelMap {
    pub fn label_at(&self, pos: &BmuPosition) -> Emotion {
        self.units[pos.unit_index()]
    }

    /// One line per grid row, one letter per unit.
    /// One letter per unit: A D F H S U N for anger through neutral.
    pub fn render_ascii(&self) -> String {
        const LETTERS: [char; Emotion::COUNT] = ['A', 'D', 'F', 'H', 'S', 'U', 'N'];
        let mut out = String::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let e = self.units[r * self.cols + c];
                out.push(LETTERS[e.code()]);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests;
