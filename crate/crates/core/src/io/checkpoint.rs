//! Checkpoint format (little-endian):
//!
//! ```text
//! "PNCK"  u16 version
//! u32 R  u32 F  u8 combine  u8 edit_kind  u32 D_sem
//! f64 x6 bounds (min xyz, max xyz)  u64 snapshot version
//! 4 x layer table (geom, sem, color, edit): u32 n_layers, u32 x (n+1) dims, u8 x n activations
//! f32 payload: plane_xy, plane_xz, plane_yz, geom, sem, color, edit
//! u32 metrics length, UTF-8 `key=value` lines
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::atomic_write;
use super::codec::read_file;
use crate::error::{Error, Result};
use crate::field::{Activation, CombineMode, EditKind, FeaturePlane, Mlp, TriPlaneField};
use crate::math::{Aabb, Vec3};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(field: &TriPlaneField, metrics: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    field.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(field.resolution() as u32)?;
    out.write_u32::<LittleEndian>(field.feature_dim() as u32)?;
    out.write_u8(match field.combine {
        CombineMode::Add => 0,
        CombineMode::Concat => 1,
    })?;
    out.write_u8(field.edit_kind.code())?;
    out.write_u32::<LittleEndian>(field.sem_dim() as u32)?;
    for v in field.bounds.min.to_array().into_iter().chain(field.bounds.max.to_array()) {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.write_u64::<LittleEndian>(field.version)?;
    for mlp in [&field.geom, &field.sem, &field.color, &field.edit] {
        out.write_u32::<LittleEndian>(mlp.num_layers() as u32)?;
        for d in mlp.dims() {
            out.write_u32::<LittleEndian>(*d as u32)?;
        }
        for a in mlp.activations() {
            out.write_u8(a.code())?;
        }
    }
    for p in &field.planes {
        for v in p.data() {
            out.write_f32::<LittleEndian>(*v)?;
        }
    }
    for mlp in [&field.geom, &field.sem, &field.color, &field.edit] {
        for v in mlp.params() {
            out.write_f32::<LittleEndian>(*v)?;
        }
    }
    let text: String = metrics.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.write_u32::<LittleEndian>(text.len() as u32)?;
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(TriPlaneField, BTreeMap<String, String>)> {
    let bad = |r: &str| Error::corrupt("checkpoint", r);
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let h = |e: std::io::Error| bad(&format!("truncated header: {e}"));
    let version = c.read_u16::<LittleEndian>().map_err(h)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let res = c.read_u32::<LittleEndian>().map_err(h)? as usize;
    let fdim = c.read_u32::<LittleEndian>().map_err(h)? as usize;
    let combine = match c.read_u8().map_err(h)? {
        0 => CombineMode::Add,
        1 => CombineMode::Concat,
        k => return Err(bad(&format!("unknown combine mode {k}"))),
    };
    let edit_kind = EditKind::from_code(c.read_u8().map_err(h)?).ok_or_else(|| bad("unknown edit kind"))?;
    let sem_dim = c.read_u32::<LittleEndian>().map_err(h)? as usize;
    let mut b = [0f64; 6];
    c.read_f64_into::<LittleEndian>(&mut b).map_err(h)?;
    let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));
    let snapshot = c.read_u64::<LittleEndian>().map_err(h)?;
    let mut tables = Vec::with_capacity(4);
    for _ in 0..4 {
        let n = c.read_u32::<LittleEndian>().map_err(h)? as usize;
        if n == 0 || n > 16 {
            return Err(bad("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let d = c.read_u32::<LittleEndian>().map_err(h)? as usize;
            if d == 0 || d > 1 << 16 {
                return Err(bad("implausible layer width"));
            }
            dims.push(d);
        }
        let mut acts = Vec::with_capacity(n);
        for _ in 0..n {
            acts.push(Activation::from_code(c.read_u8().map_err(h)?).ok_or_else(|| bad("unknown activation"))?);
        }
        tables.push((dims, acts));
    }
    if res < 2 || fdim == 0 || res > 1 << 14 || fdim > 1 << 12 {
        return Err(bad("implausible plane shape"));
    }
    let plane_len = res * res * fdim;
    let mlp_lens: Vec<usize> = tables.iter().map(|(d, _)| crate::field::param_count(d)).collect();
    let payload = 4 * (3 * plane_len + mlp_lens.iter().sum::<usize>());
    let rest = bytes.len() - c.position() as usize;
    if rest < payload + 4 {
        return Err(bad(&format!("payload needs {payload} bytes, {rest} remain")));
    }
    let mut planes = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut data = vec![0f32; plane_len];
        c.read_f32_into::<LittleEndian>(&mut data).map_err(h)?;
        planes.push(FeaturePlane::from_data(res, fdim, data)?);
    }
    let mut mlps = Vec::with_capacity(4);
    for ((dims, acts), n) in tables.iter().zip(&mlp_lens) {
        let mut params = vec![0f32; *n];
        c.read_f32_into::<LittleEndian>(&mut params).map_err(h)?;
        mlps.push(Mlp::from_params(dims, acts, params)?);
    }
    let mlen = c.read_u32::<LittleEndian>().map_err(h)? as usize;
    let pos = c.position() as usize;
    if bytes.len() - pos != mlen {
        return Err(bad(&format!("metrics block says {mlen} bytes, {} remain", bytes.len() - pos)));
    }
    let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("metrics are not UTF-8"))?;
    let metrics = text
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let mut mlps = mlps.into_iter();
    let [xy, xz, yz]: [FeaturePlane; 3] = planes.try_into().expect("three planes");
    let field = TriPlaneField {
        planes: [xy, xz, yz],
        combine,
        geom: mlps.next().expect("geom"),
        sem: mlps.next().expect("sem"),
        color: mlps.next().expect("color"),
        edit: mlps.next().expect("edit"),
        edit_kind,
        bounds,
        version: snapshot,
    };
    if field.sem_dim() != sem_dim {
        return Err(bad("semantic width disagrees with the layer table"));
    }
    field.validate().map_err(|e| bad(&e.to_string()))?;
    Ok((field, metrics))
}

pub fn save_checkpoint(path: &Path, field: &TriPlaneField, metrics: &BTreeMap<String, String>) -> Result<()> {
    atomic_write(path, &write_checkpoint(field, metrics)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(TriPlaneField, BTreeMap<String, String>)> {
    read_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    fn small() -> TriPlaneField {
        TriPlaneField::new(&FieldConfig {
            resolution: 6,
            feature_dim: 3,
            hidden_width: 5,
            geom_dim: 4,
            sem_dim: 4,
            edit_hidden: 4,
            seed: 9,
            ..FieldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut f = small();
        f.version = 17;
        let mut m = BTreeMap::new();
        m.insert("psnr".to_string(), "27.5".to_string());
        let bytes = write_checkpoint(&f, &m).unwrap();
        let (g, m2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(m, m2);
        assert_eq!(write_checkpoint(&g, &m2).unwrap(), bytes);
    }

    #[test]
    fn payload_length_must_match_header() {
        let bytes = write_checkpoint(&small(), &BTreeMap::new()).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(read_checkpoint(&longer).is_err());
        let mut wrong = bytes;
        wrong[0] = b'Q';
        assert!(read_checkpoint(&wrong).is_err());
    }
}
