//! Serialization and datasets.
//!
//! Two on-disk formats, both little-endian with no alignment padding:
//!
//! - **MDTB** (tensor): `magic "MDTB" | version u32 | rank u32 |
//!   dims u32[rank] | dtype u8 | payload row-major`. Dtypes: 0 = f32,
//!   1 = f64, 2 = u32.
//! - **MDCK** (checkpoint): `magic "MDCK" | version u32 | count u32 |`
//!   then per entry `name_len u16 | name utf8 | <embedded MDTB record>`,
//!   entries sorted by name (the container is canonical: same contents,
//!   same bytes).
//!
//! Datasets live in a directory as `images.mdtb` (N x H x W x C, f32),
//! `labels.mdtb` (N, u32) and `meta.txt` (`key=value` lines: `name`,
//! `num_classes`). All writes go through a temp file + rename so a crash
//! never leaves a torn artifact, and every load path rejects malformed
//! input with a specific error.

pub mod checkpoint;
pub mod dataset;
pub mod synthetic;
pub mod tensor_file;

pub use checkpoint::Checkpoint;
pub use dataset::{import_bmp_tree, Dataset};
pub use synthetic::{generate_domain, SyntheticDomainSpec};
pub use tensor_file::{
    load_labels, load_tensor, save_labels, save_tensor, TensorRecord,
};
