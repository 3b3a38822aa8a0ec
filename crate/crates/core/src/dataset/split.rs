use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabeledImageSet};
use crate::error::{Error, Result};

/// Train/test partition with a balanced test set.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPair {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_normal: usize,
    pub train_abnormal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

/// Cell counts produced by [`make_split`] for the given class sizes.
pub fn split_counts(n_normal: usize, n_abnormal: usize) -> Result<SplitCounts> {
    let minority = n_normal.min(n_abnormal);
    if minority < 2 {
        return Err(Error::SplitInfeasible { minority });
    }
    let m = minority / 2;
    Ok(SplitCounts {
        train_normal: n_normal - m,
        train_abnormal: n_abnormal - m,
        test_normal: m,
        test_abnormal: m,
    })
}

/// Holds out half of the minority class (rounded down) and the same number
/// of majority images, both drawn without replacement under `seed`.
/// Everything else goes to training. Set order is preserved in both halves.
pub fn make_split(set: &LabeledImageSet, seed: u64) -> Result<SplitPair> {
    let counts = split_counts(set.n_normal(), set.n_abnormal())?;
    let m = counts.test_normal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held_out = vec![false; set.len()];
    for label in [Label::Normal, Label::Abnormal] {
        let idx: Vec<usize> = set
            .images()
            .iter()
            .enumerate()
            .filter(|(_, im)| im.label == label)
            .map(|(i, _)| i)
            .collect();
        for &i in idx.choose_multiple(&mut rng, m) {
            held_out[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (img, &h) in set.images().iter().zip(&held_out) {
        if h {
            test.push(img.clone());
        } else {
            train.push(img.clone());
        }
    }
    Ok(SplitPair {
        train: LabeledImageSet::new(format!("{}/train", set.name()), train),
        test: LabeledImageSet::new(format!("{}/test", set.name()), test),
        seed,
    })
}

/// Replayable record of a split: the seed plus the source ids on each side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub dataset: String,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitRecord {
    pub fn of(split: &SplitPair, dataset: &str) -> Self {
        let ids = |s: &LabeledImageSet| s.images().iter().map(|i| i.source_id.clone()).collect();
        Self { dataset: dataset.to_owned(), seed: split.seed, train: ids(&split.train), test: ids(&split.test) }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuilds the recorded split from `set`, which must contain every id.
    pub fn apply(&self, set: &LabeledImageSet) -> Result<SplitPair> {
        let by_id: HashMap<&str, usize> =
            set.images().iter().enumerate().map(|(i, im)| (im.source_id.as_str(), i)).collect();
        let pick = |ids: &[String]| -> Result<Vec<_>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|&i| set.images()[i].clone())
                        .ok_or_else(|| Error::Config(format!("split record names unknown image `{id}`")))
                })
                .collect()
        };
        let train_ids: HashSet<&String> = self.train.iter().collect();
        if self.test.iter().any(|id| train_ids.contains(id)) {
            return Err(Error::Config("split record lists an image on both sides".into()));
        }
        Ok(SplitPair {
            train: LabeledImageSet::new(format!("{}/train", set.name()), pick(&self.train)?),
            test: LabeledImageSet::new(format!("{}/test", set.name()), pick(&self.test)?),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Image, LabeledImage};

    fn mock(n_normal: usize, n_abnormal: usize) -> LabeledImageSet {
        let px = Image::filled(1, 1, 1, 0.0).unwrap();
        let mut v = Vec::new();
        for i in 0..n_normal {
            v.push(LabeledImage::new(px.clone(), Label::Normal, format!("n{i}")));
        }
        for i in 0..n_abnormal {
            v.push(LabeledImage::new(px.clone(), Label::Abnormal, format!("a{i}")));
        }
        LabeledImageSet::new("mock", v)
    }

    #[test]
    fn four_by_four_halves_exactly() {
        let s = make_split(&mock(4, 4), 0).unwrap();
        assert_eq!((s.test.n_normal(), s.test.n_abnormal()), (2, 2));
        assert_eq!((s.train.n_normal(), s.train.n_abnormal()), (2, 2));
        let train: HashSet<_> = s.train.images().iter().map(|i| &i.source_id).collect();
        assert!(s.test.images().iter().all(|i| !train.contains(&i.source_id)));
    }

    #[test]
    fn infeasible_minority() {
        assert!(matches!(make_split(&mock(10, 1), 0), Err(Error::SplitInfeasible { minority: 1 })));
        assert!(matches!(make_split(&mock(0, 5), 0), Err(Error::SplitInfeasible { minority: 0 })));
    }

    #[test]
    fn seed_changes_selection_and_record_replays() {
        let set = mock(30, 10);
        let a = make_split(&set, 1).unwrap();
        let b = make_split(&set, 2).unwrap();
        assert_ne!(SplitRecord::of(&a, "m").test, SplitRecord::of(&b, "m").test);
        let rec = SplitRecord::of(&a, "m");
        let again = rec.apply(&set).unwrap();
        assert_eq!(again.test, a.test);
        assert_eq!(again.train, a.train);
    }
}
