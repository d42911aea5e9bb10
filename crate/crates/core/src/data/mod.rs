//! Files and datasets: manifest CSV, PPM images, checkpoints, the synthetic
//! generator, the JSON run configuration and the end-to-end pipeline.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod ppm;
pub mod synth;

use rayon::prelude::*;

use crate::augment::Image;
pub use manifest::{Manifest, ManifestRow, Split, Subset, CLASS_NAMES};

/// One decoded image with its labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub subset: Subset,
    pub class_id: usize,
    pub split: Split,
}

/// Decodes every manifest image, preserving manifest order.
pub fn load_samples(m: &Manifest) -> Result<Vec<Sample>, ppm::PpmError> {
    m.rows
        .par_iter()
        .map(|r| {
            Ok(Sample {
                id: r.sample_id.clone(),
                image: ppm::read(&m.image_path(r))?,
                subset: r.subset,
                class_id: r.class_id,
                split: r.split,
            })
        })
        .collect()
}
