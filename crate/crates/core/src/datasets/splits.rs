//! Base/novel, few-shot and cross-dataset splits.
//!
//! Split files hold one `<set> <sample index>` pair per line, e.g.
//! `train 17`. The classes of a set are the labels its samples carry, in
//! canonical order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_to_string, write_string, Dataset, DatasetError, Subset};
use crate::training::TaskPreset;

pub const DEFAULT_SHOTS: usize = 16;

/// A named subset of samples over a subset of classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub name: String,
    /// Dataset class indices, ascending.
    pub classes: Vec<usize>,
    /// Dataset sample indices.
    pub samples: Vec<usize>,
}

impl SplitSet {
    fn from_samples(name: &str, ds: &Dataset, samples: Vec<usize>) -> Self {
        let mut classes: Vec<usize> = samples.iter().map(|&i| ds.samples[i].label).collect();
        classes.sort_unstable();
        classes.dedup();
        Self { name: name.to_string(), classes, samples }
    }

    pub fn class_names(&self, ds: &Dataset) -> Vec<String> {
        self.classes.iter().map(|&c| ds.classes[c].clone()).collect()
    }

    /// Labels re-indexed into this set's class list.
    pub fn local_labels(&self, ds: &Dataset) -> Vec<usize> {
        self.samples
            .iter()
            .map(|&i| self.classes.binary_search(&ds.samples[i].label).expect("sample label belongs to the set"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub task: TaskPreset,
    pub seed: u64,
    pub train: SplitSet,
    /// `base` and `novel` for base-to-novel, otherwise `test`.
    pub evals: Vec<SplitSet>,
}

impl Splits {
    pub fn eval(&self, name: &str) -> Option<&SplitSet> {
        self.evals.iter().find(|s| s.name == name)
    }

    pub fn path(root: &Path, dataset: &str, task: TaskPreset, seed: u64) -> PathBuf {
        root.join(dataset).join("splits").join(task.to_string()).join(format!("{seed}.txt"))
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        for set in std::iter::once(&self.train).chain(&self.evals) {
            for &i in &set.samples {
                out.push_str(&format!("{} {i}\n", set.name));
            }
        }
        write_string(path, &out)
    }

    pub fn read(path: &Path, ds: &Dataset, task: TaskPreset, seed: u64) -> Result<Self, DatasetError> {
        let mut sets: Vec<(String, Vec<usize>)> = Vec::new();
        for (n, line) in read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| DatasetError::Parse { path: path.to_path_buf(), line: n + 1, message };
            let (name, idx) = line.trim().split_once(' ').ok_or_else(|| err("expected `<set> <index>`".into()))?;
            let idx: usize = idx.trim().parse().map_err(|_| err(format!("bad sample index `{idx}`")))?;
            if idx >= ds.samples.len() {
                return Err(err(format!("sample {idx} out of range")));
            }
            match sets.iter_mut().find(|(s, _)| s == name) {
                Some((_, v)) => v.push(idx),
                None => sets.push((name.to_string(), vec![idx])),
            }
        }
        let mut sets = sets.into_iter().map(|(n, s)| SplitSet::from_samples(&n, ds, s));
        let train = sets
            .next()
            .filter(|s| s.name == "train")
            .ok_or_else(|| DatasetError::Parse { path: path.to_path_buf(), line: 1, message: "first set must be `train`".into() })?;
        Ok(Self { task, seed, train, evals: sets.collect() })
    }
}

/// Training pool and test pool per class. Samples tagged `test` form the
/// test pool; untagged datasets test on whatever is not drawn for training.
fn pools(ds: &Dataset) -> (Vec<Vec<usize>>, Option<Vec<Vec<usize>>>) {
    let tagged = ds.samples.iter().any(|s| s.subset == Some(Subset::Test));
    let mut train = vec![Vec::new(); ds.num_classes()];
    let mut test = vec![Vec::new(); ds.num_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        if tagged && s.subset == Some(Subset::Test) {
            test[s.label].push(i);
        } else {
            train[s.label].push(i);
        }
    }
    (train, tagged.then_some(test))
}

/// Draws `shots` training samples per class without replacement (all of
/// them when `shots` is `None`) and assigns evaluation sets for `task`.
///
/// Base-to-novel takes the first half of the canonical class list as base
/// classes (the larger half when the count is odd).
pub fn make_splits(ds: &Dataset, task: TaskPreset, shots: Option<usize>, seed: u64) -> Result<Splits, DatasetError> {
    ds.validate()?;
    let (train_pool, test_pool) = pools(ds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_classes: Vec<usize> = match task {
        TaskPreset::BaseToNovel => (0..ds.num_classes().div_ceil(2)).collect(),
        _ => (0..ds.num_classes()).collect(),
    };
    let mut drawn = vec![Vec::new(); ds.num_classes()];
    for &c in &train_classes {
        let pool = &train_pool[c];
        let k = shots.unwrap_or(pool.len());
        if k > pool.len() || pool.is_empty() {
            return Err(DatasetError::InsufficientSamples { class: ds.classes[c].clone(), available: pool.len(), shots: k });
        }
        let mut picked: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
        picked.sort_unstable();
        drawn[c] = picked;
    }
    let test_of = |c: usize| -> Vec<usize> {
        match &test_pool {
            Some(t) => t[c].clone(),
            None => train_pool[c].iter().copied().filter(|i| drawn[c].binary_search(i).is_err()).collect(),
        }
    };
    let train = SplitSet::from_samples("train", ds, train_classes.iter().flat_map(|&c| drawn[c].clone()).collect());
    let evals = match task {
        TaskPreset::BaseToNovel => {
            let half = train_classes.len();
            vec![
                SplitSet::from_samples("base", ds, (0..half).flat_map(test_of).collect()),
                SplitSet::from_samples("novel", ds, (half..ds.num_classes()).flat_map(test_of).collect()),
            ]
        }
        _ => vec![SplitSet::from_samples("test", ds, (0..ds.num_classes()).flat_map(test_of).collect())],
    };
    Ok(Splits { task, seed, train, evals })
}

/// Evaluation set covering every class of a transfer target, drawn from its
/// test pool.
pub fn target_split(ds: &Dataset) -> SplitSet {
    let (train_pool, test_pool) = pools(ds);
    let samples = match test_pool {
        Some(t) => t.concat(),
        None => train_pool.concat(),
    };
    SplitSet::from_samples("test", ds, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Sample;
    use crate::encoder::Image;
    use proptest::prelude::*;

    fn dataset(classes: usize, train: usize, test: usize) -> Dataset {
        let mut samples = Vec::new();
        for c in 0..classes {
            for i in 0..train + test {
                let subset = Some(if i < train { Subset::Train } else { Subset::Test });
                samples.push(Sample { id: format!("{c}-{i}"), label: c, subset, image: Image::zeros(1, 1, 1) });
            }
        }
        Dataset { name: "d".into(), classes: (0..classes).map(|c| format!("class {c}")).collect(), samples }
    }

    #[test]
    fn ten_classes_split_five_and_five() {
        let ds = dataset(10, 20, 5);
        let s = make_splits(&ds, TaskPreset::BaseToNovel, Some(16), 1).unwrap();
        assert_eq!(s.train.classes, (0..5).collect::<Vec<_>>());
        assert_eq!(s.eval("base").unwrap().classes, (0..5).collect::<Vec<_>>());
        assert_eq!(s.eval("novel").unwrap().classes, (5..10).collect::<Vec<_>>());
        assert_eq!(s.train.samples.len(), 5 * 16);
    }

    #[test]
    fn too_few_samples_for_shots() {
        let ds = dataset(3, 12, 2);
        match make_splits(&ds, TaskPreset::FewShot, Some(16), 0) {
            Err(DatasetError::InsufficientSamples { available: 12, shots: 16, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let ds = dataset(4, 30, 5);
        let a = make_splits(&ds, TaskPreset::FewShot, Some(16), 7).unwrap();
        let b = make_splits(&ds, TaskPreset::FewShot, Some(16), 7).unwrap();
        let c = make_splits(&ds, TaskPreset::FewShot, Some(16), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.samples, c.train.samples);
    }

    #[test]
    fn split_file_round_trip() {
        let ds = dataset(6, 10, 3);
        let s = make_splits(&ds, TaskPreset::BaseToNovel, Some(4), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = Splits::path(dir.path(), "d", s.task, s.seed);
        s.write(&path).unwrap();
        assert_eq!(Splits::read(&path, &ds, s.task, s.seed).unwrap(), s);
    }

    #[test]
    fn untagged_dataset_tests_on_the_rest() {
        let mut ds = dataset(2, 10, 0);
        for s in &mut ds.samples {
            s.subset = None;
        }
        let s = make_splits(&ds, TaskPreset::FewShot, Some(4), 0).unwrap();
        let test = s.eval("test").unwrap();
        assert_eq!(test.samples.len(), 12);
        assert!(test.samples.iter().all(|i| !s.train.samples.contains(i)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn splits_are_disjoint_and_exhaustive(classes in 2usize..12, shots in 1usize..6, seed in 0u64..1000) {
            let ds = dataset(classes, 6, 3);
            let s = make_splits(&ds, TaskPreset::BaseToNovel, Some(shots), seed).unwrap();
            let base = s.eval("base").unwrap();
            let novel = s.eval("novel").unwrap();
            prop_assert!(base.classes.iter().all(|c| !novel.classes.contains(c)));
            let mut all: Vec<usize> = base.classes.iter().chain(&novel.classes).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
            prop_assert_eq!(base.classes.len(), classes.div_ceil(2));
            for &c in &s.train.classes {
                let n = s.train.samples.iter().filter(|&&i| ds.samples[i].label == c).count();
                prop_assert_eq!(n, shots);
            }
            for i in &s.train.samples {
                prop_assert!(!base.samples.contains(i) && !novel.samples.contains(i));
            }
            let local = novel.local_labels(&ds);
            prop_assert!(local.iter().all(|&l| l < novel.classes.len()));
        }
    }
}
