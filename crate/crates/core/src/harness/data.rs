//! Seeded synthetic classification tasks and minibatch iteration.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Each class is a union of Gaussian clusters.
    GaussianMixture,
    /// Gaussian inputs labelled by the argmax of a random two-layer network.
    TeacherLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub features: usize,
    pub classes: usize,
    /// Cluster standard deviation relative to unit-variance centers.
    pub spread: f64,
    #[serde(default = "default_clusters")]
    pub clusters_per_class: usize,
}

fn default_clusters() -> usize {
    2
}

/// Row-major feature matrix plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: usize,
    pub classes: usize,
    pub x: Vec<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: usize, classes: usize, x: Vec<T>, y: Vec<usize>) -> Result<Self> {
        if features == 0 || x.len() != features * y.len() {
            return Err(Error::Shape(format!("{} values for {} rows of width {features}", x.len(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { features, classes, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn gather(&self, rows: &[usize], id: usize) -> Batch<T> {
        let mut x = Vec::with_capacity(rows.len() * self.features);
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        Batch { id, x, y: rows.iter().map(|&r| self.y[r]).collect() }
    }

    pub fn all(&self) -> Batch<T> {
        Batch { id: 0, x: self.x.clone(), y: self.y.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub id: usize,
    pub x: Vec<T>,
    pub y: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Generates `(train, test)` for `config`, drawing everything from `seed`.
pub fn synthesize<T: Scalar>(config: &DataConfig, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let DataConfig { features, classes, n_train, n_test, spread, .. } = *config;
    if features == 0 || classes < 2 || n_train == 0 || config.clusters_per_class == 0 {
        return Err(Error::Shape("synthetic task needs features > 0, classes >= 2, n_train > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_train + n_test;
    let mut x = Vec::with_capacity(total * features);
    let mut y = Vec::with_capacity(total);
    match config.kind {
        TaskKind::GaussianMixture => {
            let k = classes * config.clusters_per_class;
            let centers: Vec<f64> = (0..k * features).map(|_| normal(&mut rng)).collect();
            for _ in 0..total {
                let c = rng.gen_range(0..k);
                x.extend((0..features).map(|f| T::lit(centers[c * features + f] + spread * normal(&mut rng))));
                y.push(c % classes);
            }
        }
        TaskKind::TeacherLabels => {
            let hidden = 2 * features;
            let w1: Vec<f64> = (0..hidden * features).map(|_| normal(&mut rng) / (features as f64).sqrt()).collect();
            let w2: Vec<f64> = (0..classes * hidden).map(|_| normal(&mut rng) / (hidden as f64).sqrt()).collect();
            for _ in 0..total {
                let row: Vec<f64> = (0..features).map(|_| normal(&mut rng)).collect();
                let h: Vec<f64> =
                    (0..hidden).map(|j| (0..features).map(|f| w1[j * features + f] * row[f]).sum::<f64>().tanh()).collect();
                let logits: Vec<f64> = (0..classes)
                    .map(|c| (0..hidden).map(|j| w2[c * hidden + j] * h[j]).sum::<f64>() + spread * normal(&mut rng))
                    .collect();
                let label = (0..classes).fold(0, |best, c| if logits[c] > logits[best] { c } else { best });
                x.extend(row.into_iter().map(T::lit));
                y.push(label);
            }
        }
    }
    let test_x = x.split_off(n_train * features);
    let test_y = y.split_off(n_train);
    Ok((Dataset::new(features, classes, x, y)?, Dataset::new(features, classes, test_x, test_y)?))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Endless shuffled minibatches; reshuffles each time the data is exhausted.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    issued: usize,
    passes: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 || batch_size > n {
            return Err(Error::Shape(format!("batch size {batch_size} for {n} samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, batch_size, rng, issued: 0, passes: 0 })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of completed passes over the data.
    pub fn passes(&self) -> usize {
        self.passes
    }

    /// Next minibatch; the flag is true when the data wrapped around.
    pub fn next_batch<T: Scalar>(&mut self, data: &Dataset<T>) -> (Batch<T>, bool) {
        let mut wrapped = false;
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.passes += 1;
            wrapped = true;
        }
        let rows = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        self.issued += 1;
        (data.gather(rows, self.issued - 1), wrapped)
    }
}
