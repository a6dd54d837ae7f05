//! Synthetic counting data, preprocessing, and on-disk formats.

mod io;
mod manifest;
mod preprocess;
mod synthetic;

pub use io::{read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor, TENSOR_MAGIC};
pub use manifest::{DatasetManifest, ImageRecord, LabelKind, Split, MANIFEST_HEADER};
pub use preprocess::{center_of_mass, center_of_mass_crop, rescale_intensity};
pub use synthetic::{
    blob_field, generate_blob_image, generate_dataset, Blob, BlobImage, SyntheticConfig,
};
