//! Histograms of the gap between the top logit and the mean of the others.

use std::path::Path;

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::empirical_gaps;
use crate::train::dataset_logits;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// `bins` equal-width bins spanning the data. The last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs at least one bin".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

pub fn to_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.left, b.right, b.count));
    }
    s
}

/// Gap histogram of a checkpoint's eval-mode logits over `ds`.
pub fn gap_report(manifest: &Path, ds: &Dataset, bins: usize) -> Result<Vec<Bin>> {
    let ckpt = checkpoint::load(manifest)?;
    let mut model = ckpt.restore_model()?;
    let cfg = &ckpt.manifest.config;
    let logits = dataset_logits(&mut model, ds, &cfg.eval_config(), cfg.batch_size)?;
    histogram(&empirical_gaps(&logits)?, bins)
}
