use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cube::HsiCube;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSplit {
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

fn ceil_ratio(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Per class: seeded shuffle, `ceil(ratio·n)` to train and to val (at
/// least one each while pixels remain, train first), the rest to test.
pub fn stratified_split(cube: &HsiCube, train_ratio: f64, val_ratio: f64, seed: u64) -> Result<SampleSplit> {
    if !(train_ratio > 0.0 && val_ratio > 0.0 && train_ratio + val_ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratios must be positive with sum below 1, got {train_ratio} and {val_ratio}"
        )));
    }
    let mut by_class = vec![Vec::new(); cube.num_classes];
    for (r, c) in cube.labeled_coords() {
        by_class[cube.label(r, c) as usize - 1].push((r, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SampleSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        train_ratio,
        val_ratio,
        seed,
    };
    for (class, mut coords) in by_class.into_iter().enumerate() {
        let n = coords.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            warn!("class {} has only {n} labeled pixels", class + 1);
        }
        coords.shuffle(&mut rng);
        let n_train = ceil_ratio(n, train_ratio).max(1);
        let n_val = ceil_ratio(n, val_ratio).max(1).min(n - n_train);
        split.train.extend_from_slice(&coords[..n_train]);
        split.val.extend_from_slice(&coords[n_train..n_train + n_val]);
        split.test.extend_from_slice(&coords[n_train + n_val..]);
    }
    Ok(split)
}

impl SampleSplit {
    /// One `row,col,set` line per labeled pixel.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, coords) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for (r, c) in coords {
                let _ = writeln!(s, "{r},{c},{name}");
            }
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output. Ratios and seed are not
    /// stored in the file and come back as zero.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut split = SampleSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            train_ratio: 0.0,
            val_ratio: 0.0,
            seed: 0,
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Validation(format!("split line {}: `{line}`", n + 1));
            let mut parts = line.trim().split(',');
            let (Some(r), Some(c), Some(set), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let coord = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
            match set {
                "train" => split.train.push(coord),
                "val" => split.val.push(coord),
                "test" => split.test.push(coord),
                _ => return Err(bad()),
            }
        }
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
