//! Class prototype memory and prototype-similarity sample routing.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default routing threshold.
pub const DEFAULT_SIGMA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<T> {
    pub centroid: Vec<T>,
    pub phase: usize,
}

/// One mean deep feature per seen class, keyed by class id. Entries are
/// write-once.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore<T> {
    dim: usize,
    entries: BTreeMap<usize, Prototype<T>>,
}

/// Per-sample routing: `kd[i]` samples are distilled, `ce[i]` samples are
/// classified. Exactly one of the two is set for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMasks<T> {
    pub ce: Vec<bool>,
    pub kd: Vec<bool>,
    pub scores: Vec<T>,
}

impl<T> SelectionMasks<T> {
    /// Every sample goes to cross-entropy.
    pub fn all_ce(scores: Vec<T>) -> Self {
        let n = scores.len();
        SelectionMasks {
            ce: vec![true; n],
            kd: vec![false; n],
            scores,
        }
    }

    pub fn kd_count(&self) -> usize {
        self.kd.iter().filter(|&&b| b).count()
    }

    pub fn ce_count(&self) -> usize {
        self.ce.iter().filter(|&&b| b).count()
    }
}

impl<T: Real> PrototypeStore<T> {
    pub fn new(dim: usize) -> Self {
        PrototypeStore {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype<T>> {
        self.entries.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype<T>)> {
        self.entries.iter().map(|(&c, p)| (c, p))
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Inserts a centroid directly; refuses to overwrite.
    pub fn insert(&mut self, class: usize, centroid: Vec<T>, phase: usize) -> Result<()> {
        if centroid.len() != self.dim {
            return Err(Error::shape("prototype", &[centroid.len()], &[self.dim]));
        }
        if self.entries.contains_key(&class) {
            return Err(Error::State(format!("prototype for class {class} already stored")));
        }
        self.entries.insert(class, Prototype { centroid, phase });
        Ok(())
    }

    /// Stores the mean feature of each class in `new_classes`.
    pub fn compute(
        &mut self,
        features: &Tensor<T>,
        labels: &[usize],
        new_classes: &[usize],
        phase: usize,
    ) -> Result<()> {
        let &[m, d] = features.shape() else {
            return Err(Error::shape("compute_prototypes", features.shape(), &[0, self.dim]));
        };
        if d != self.dim || labels.len() != m {
            return Err(Error::shape("compute_prototypes", features.shape(), &[labels.len(), self.dim]));
        }
        let mut sums: BTreeMap<usize, (Vec<T>, usize)> = new_classes
            .iter()
            .map(|&c| (c, (vec![T::zero(); d], 0)))
            .collect();
        for (i, label) in labels.iter().enumerate() {
            if let Some((acc, n)) = sums.get_mut(label) {
                acc.iter_mut().zip(features.row(i)).for_each(|(a, &v)| *a += v);
                *n += 1;
            }
        }
        if let Some((c, _)) = sums.iter().find(|(_, (_, n))| *n == 0) {
            return Err(Error::Data(format!("class {c} has no samples for its prototype")));
        }
        for (c, (acc, n)) in sums {
            let count = T::from_usize(n).expect("count fits");
            self.insert(c, acc.into_iter().map(|v| v / count).collect(), phase)?;
        }
        Ok(())
    }

    /// Draws `batch` stored centroids uniformly with replacement. Rows are
    /// exact copies; no noise is added.
    pub fn oversample(&self, batch: usize, rng: &mut impl Rng) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.entries.is_empty() {
            return Err(Error::State("cannot over-sample an empty prototype store".into()));
        }
        if batch == 0 {
            return Err(Error::Config("prototype batch size must be positive".into()));
        }
        let protos: Vec<(usize, &Prototype<T>)> = self.iter().collect();
        let mut data = Vec::with_capacity(batch * self.dim);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (c, p) = protos[rng.random_range(0..protos.len())];
            data.extend_from_slice(&p.centroid);
            labels.push(c);
        }
        Ok((Tensor::new(&[batch, self.dim], data)?, labels))
    }

    /// For each row, the largest cosine similarity to any stored centroid,
    /// clamped to [-1, 1]. Zero vectors score 0.
    pub fn cosine_scores(&self, r: &Tensor<T>) -> Result<Vec<T>> {
        let &[n, d] = r.shape() else {
            return Err(Error::shape("cosine_scores", r.shape(), &[0, self.dim]));
        };
        if d != self.dim {
            return Err(Error::shape("cosine_scores", r.shape(), &[n, self.dim]));
        }
        let normed: Vec<Vec<T>> = self.entries.values().map(|p| normalize(&p.centroid)).collect();
        Ok((0..n)
            .map(|i| {
                let q = normalize(r.row(i));
                normed
                    .iter()
                    .map(|p| dot(&q, p))
                    .fold(None, |best: Option<T>, s| Some(best.map_or(s, |b| b.max(s))))
                    .unwrap_or(T::zero())
                    .max(-T::one())
                    .min(T::one())
            })
            .collect())
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Unit-length copy; the zero vector stays zero.
fn normalize<T: Real>(v: &[T]) -> Vec<T> {
    let norm = dot(v, v).sqrt();
    if norm > T::zero() {
        v.iter().map(|&x| x / norm).collect()
    } else {
        vec![T::zero(); v.len()]
    }
}

/// Scores strictly above `sigma` are routed to distillation, everything else
/// to cross-entropy.
pub fn partition<T: Real>(scores: &[T], sigma: T) -> SelectionMasks<T> {
    let kd: Vec<bool> = scores.iter().map(|&s| s > sigma).collect();
    let ce = kd.iter().map(|&k| !k).collect();
    SelectionMasks {
        ce,
        kd,
        scores: scores.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn centroid_small_cases() {
        let mut store = PrototypeStore::new(2);
        store
            .compute(&t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 4.0, 5.0]), &[0, 0, 1], &[0, 1], 1)
            .unwrap();
        assert_eq!(store.get(0).unwrap().centroid, vec![0.5, 0.5]);
        assert_eq!(store.get(1).unwrap().centroid, vec![4.0, 5.0]);
        assert_eq!(store.get(1).unwrap().phase, 1);
    }

    #[test]
    fn missing_class_errors() {
        let mut store = PrototypeStore::new(2);
        let err = store.compute(&t(&[1, 2], &[1.0, 0.0]), &[0], &[0, 7], 1);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn centroids_are_write_once() {
        let mut store = PrototypeStore::new(1);
        store.insert(3, vec![1.0f64], 1).unwrap();
        assert!(store.insert(3, vec![2.0], 2).is_err());
        assert_eq!(store.get(3).unwrap().centroid, vec![1.0]);
    }

    #[test]
    fn oversample_single_source() {
        let mut store = PrototypeStore::new(3);
        store.insert(5, vec![1.0f64, 2.0, 3.0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, y) = store.oversample(4, &mut rng).unwrap();
        assert_eq!(y, vec![5; 4]);
        for i in 0..4 {
            assert_eq!(p.row(i), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn oversample_errors() {
        let store = PrototypeStore::<f64>::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(store.oversample(4, &mut rng).is_err());
    }

    #[test]
    fn cosine_cases() {
        let mut store = PrototypeStore::new(3);
        store.insert(0, vec![1.0f64, 0.0, 0.0], 1).unwrap();
        let s = store
            .cosine_scores(&t(&[4, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
            .unwrap();
        assert!((s[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 1.0);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn partition_tie_goes_to_ce() {
        let m = partition(&[0.9f64, 0.5, 0.8], 0.8);
        assert_eq!(m.kd, vec![true, false, false]);
        assert_eq!(m.ce, vec![false, true, true]);
    }

    #[test]
    fn partition_extremes() {
        let scores = [-1.0f64, -0.3, 0.0, 0.7, 1.0];
        assert!(partition(&scores, 1.0).ce.iter().all(|&c| c));
        // -1 scores equal the threshold and stay in CE
        let m = partition(&scores, -1.0);
        assert_eq!(m.kd, vec![false, true, true, true, true]);
    }
}
