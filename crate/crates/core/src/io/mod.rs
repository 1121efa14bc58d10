//! On-disk formats: dataset manifests, image/feature/depth codecs, checkpoints, and
//! the synthetic-scene generator used as a ground-truth oracle.

mod checkpoint;
mod codec;
mod manifest;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use codec::{
    decode_depth16, decode_features, decode_mask, decode_rgb8, encode_depth16, encode_features, encode_mask, encode_rgb8, load_depth16,
    load_features, load_mask, load_rgb8, quantize_rgb8, save_depth16, save_features, save_mask, save_rgb8, FEATURE_MAGIC,
};
pub use manifest::{load_dataset, Dataset, DatasetManifest, Frame, FrameRecord, Intrinsics, Split};
pub use synth::{generate_synthetic, CameraRig, OracleImage, Primitive, SceneOracle, Shape, SyntheticSpec, ORACLE_SAMPLES};

use crate::error::Result;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
