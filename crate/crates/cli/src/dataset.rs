use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use ella_core::data::{gen_sine_regression_with, gen_two_moons, load_csv, load_idx, split_sizes, Dataset, SineConfig};
use ella_core::experiments::RegressionDemoConfig;
use serde::{Deserialize, Serialize};

use crate::usage;

pub const SINE_POINTS: usize = 16;
pub const MOONS_POINTS: usize = 500;
pub const MOONS_NOISE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Where the data comes from and which seeded split to use.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataArgs {
    /// `y = sin 2x + ε` on [−2, 2].
    #[arg(long)]
    pub demo_sine: bool,
    /// Two interleaved half circles, two classes.
    #[arg(long)]
    pub demo_moons: bool,
    #[arg(long, requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    /// CSV with a header; trailing columns are targets.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Treat the last CSV column as a 0-based label among this many classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of real-valued target columns in the CSV.
    #[arg(long)]
    pub targets: Option<usize>,
    /// Size of a generated dataset.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Sine: noise variance. Moons: noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
}

impl DataArgs {
    pub fn has_source(&self) -> bool {
        self.demo_sine || self.demo_moons || self.idx_images.is_some() || self.csv.is_some()
    }

    /// Take the source from `saved` when none was given here; the split
    /// choice always stays local.
    pub fn or_saved(self, saved: Option<DataArgs>) -> DataArgs {
        match saved {
            Some(s) if !self.has_source() => DataArgs { split: self.split, ..s },
            _ => self,
        }
    }

    pub fn sine_noise_var(&self) -> f64 {
        self.noise.unwrap_or(RegressionDemoConfig::default().noise_var)
    }

    fn load_all(&self) -> Result<Dataset> {
        let sources = [self.demo_sine, self.demo_moons, self.idx_images.is_some(), self.csv.is_some()];
        match sources.iter().filter(|s| **s).count() {
            0 => return Err(usage("no dataset given (use --demo-sine, --demo-moons, --idx-images/--idx-labels or --csv)")),
            1 => {}
            _ => return Err(usage("give exactly one dataset source")),
        }
        if self.idx_images.is_some() != self.idx_labels.is_some() {
            return Err(usage("--idx-images and --idx-labels go together"));
        }
        let seed = self.data_seed.unwrap_or(0);
        Ok(if self.demo_sine {
            let cfg = SineConfig { noise_var: self.sine_noise_var(), ..SineConfig::default() };
            gen_sine_regression_with(self.n.unwrap_or(SINE_POINTS), seed, cfg)
        } else if self.demo_moons {
            gen_two_moons(self.n.unwrap_or(MOONS_POINTS), self.noise.unwrap_or(MOONS_NOISE), seed)
        } else if let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) {
            load_idx(images, labels)?
        } else {
            let path = self.csv.as_ref().expect("checked above");
            load_csv(path, self.targets.unwrap_or(1), self.classes)?
        })
    }

    /// Load and return the requested split (`default` when `--split` is
    /// absent). Without `--n-train` every split is the whole dataset.
    pub fn load(&self, default: Split) -> Result<Dataset> {
        let all = self.load_all()?;
        let split = self.split.unwrap_or(default);
        let Some(n_train) = self.n_train else {
            if split != Split::Train {
                log::warn!("no --n-train given; using the whole dataset as the {split:?} split");
            }
            return Ok(all);
        };
        let n_val = self.n_val.unwrap_or(0);
        let mut parts = split_sizes(&all, &[n_train, n_val], self.split_seed.unwrap_or(0))?.into_iter();
        let (train, val, test) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        let chosen = match split {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        };
        if chosen.is_empty() {
            return Err(usage(&format!("the {split:?} split is empty; adjust --n-train/--n-val")));
        }
        Ok(chosen)
    }
}
