//! Synthetic shapes, noise augmentation and on-disk formats.

mod cloud;
mod fewlabel;
mod io;
mod noise;
mod shapes;

pub use cloud::PointCloud;
pub use fewlabel::{part_keys, select_few_labels};
pub use io::{
    cloud_to_string, load_cloud, parse_cloud, sample_seed, save_cloud, synthesize, write_dataset, DatasetManifest,
    ManifestRecord, Split, SyntheticSpec,
};
pub use noise::{add_outliers, perturb_gaussian};
pub use shapes::{
    generate_shape, generate_variant, sample_surface, ShapeKind, ShapeSpec, CYLINDER_HALF_HEIGHT, CYLINDER_RADIUS,
    TORUS_MAJOR, TORUS_MINOR,
};
