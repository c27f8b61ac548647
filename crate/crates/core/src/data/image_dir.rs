//! Raw-image directories laid out as `root/<class>/<image>`; classes are
//! the sorted subdirectory names.

use std::path::{Path, PathBuf};

use super::{Dataset, Image, Sample};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

pub fn decode(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(f32::from).collect(),
    )
}

/// Class names in label order.
pub fn class_names(root: &Path) -> Result<Vec<String>> {
    Ok(sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

pub fn load(root: &Path) -> Result<Dataset> {
    let classes = class_names(root)?;
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class directories",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        for p in sorted_entries(&root.join(name))? {
            let ext = p
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase());
            if ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
                samples.push(Sample {
                    image: decode(&p)?,
                    label,
                });
            }
        }
    }
    Dataset::new(samples, classes.len())
}
