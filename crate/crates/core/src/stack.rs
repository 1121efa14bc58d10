//! Layered residual edits.
//!
//! An [`EditToken`] is a small residual network together with the selection it applies
//! to. Inside its selection a token adds `mlp(x)` to the running sample color, where
//! `x` is either the sample's semantic feature or the running color itself. Tokens
//! apply in stack order and the result is clamped to `[0, 1]` once at the end.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{edit_layout, EditKind, Mlp, RadianceSample};
use crate::select::SelectionMask;

pub const TOKEN_MAGIC: &[u8; 4] = b"PNET";
pub const TOKEN_VERSION: u16 = 1;
pub const STACK_MAGIC: &[u8; 4] = b"PNLS";
pub const FEATURE_TOKEN_LIMIT: usize = 36_864;
pub const COLOR_TOKEN_LIMIT: usize = 4_096;
pub const FEATURE_TOKEN_HIDDEN: usize = 48;
pub const COLOR_TOKEN_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EditToken {
    pub id: u64,
    pub kind: EditKind,
    pub mlp: Mlp,
    pub selection: SelectionMask,
    pub enabled: bool,
    /// Unix milliseconds.
    pub created_at: i64,
    pub label: String,
}

pub fn size_limit(kind: EditKind) -> usize {
    match kind {
        EditKind::Feature => FEATURE_TOKEN_LIMIT,
        EditKind::Color => COLOR_TOKEN_LIMIT,
    }
}

impl EditToken {
    pub fn new(id: u64, kind: EditKind, mlp: Mlp, selection: SelectionMask, label: impl Into<String>) -> Result<Self> {
        let token = Self {
            id,
            kind,
            mlp,
            selection,
            enabled: true,
            created_at: now_millis(),
            label: label.into(),
        };
        token.check_shape()?;
        Ok(token)
    }

    /// A zero residual of the default width for `kind`.
    pub fn identity(id: u64, kind: EditKind, sem_dim: usize, selection: SelectionMask) -> Result<Self> {
        let (input, hidden) = match kind {
            EditKind::Feature => (sem_dim, FEATURE_TOKEN_HIDDEN),
            EditKind::Color => (3, COLOR_TOKEN_HIDDEN),
        };
        let (dims, acts) = edit_layout(input, hidden);
        let mut mlp = Mlp::init(&dims, &acts, &mut ChaCha8Rng::seed_from_u64(id))?;
        let (w, b) = mlp.layer_ranges(2);
        mlp.params_mut()[w].fill(0.0);
        mlp.params_mut()[b].fill(0.0);
        Self::new(id, kind, mlp, selection, "")
    }

    /// Color token adding a constant offset.
    pub fn constant_offset(id: u64, offset: [f32; 3], selection: SelectionMask) -> Result<Self> {
        let mut t = Self::identity(id, EditKind::Color, 0, selection)?;
        let (_, b) = t.mlp.layer_ranges(2);
        t.mlp.params_mut()[b].copy_from_slice(&offset);
        Ok(t)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn check_shape(&self) -> Result<()> {
        if self.mlp.output_dim() != 3 {
            return Err(Error::DimMismatch {
                what: "edit token output",
                expected: 3,
                got: self.mlp.output_dim(),
            });
        }
        if self.kind == EditKind::Color && self.mlp.input_dim() != 3 {
            return Err(Error::DimMismatch {
                what: "color token input",
                expected: 3,
                got: self.mlp.input_dim(),
            });
        }
        if self.kind == EditKind::Feature && self.mlp.input_dim() != self.selection.f_bar.len() {
            return Err(Error::DimMismatch {
                what: "feature token input",
                expected: self.selection.f_bar.len(),
                got: self.mlp.input_dim(),
            });
        }
        Ok(())
    }

    /// The residual this token adds given the semantic feature and the running color.
    pub fn residual(&self, f_sem: &[f64], color: [f64; 3]) -> Result<[f64; 3]> {
        let x: &[f64] = match self.kind {
            EditKind::Feature => f_sem,
            EditKind::Color => &color,
        };
        if x.len() != self.mlp.input_dim() {
            return Err(Error::DimMismatch {
                what: "edit token input",
                expected: self.mlp.input_dim(),
                got: x.len(),
            });
        }
        let r = self.mlp.forward(x);
        Ok([r[0], r[1], r[2]])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes = encode_token(self)?;
        let limit = size_limit(self.kind);
        if bytes.len() > limit {
            return Err(Error::TokenTooLarge {
                kind: self.kind.name(),
                size: bytes.len(),
                limit,
            });
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let token = decode_token(bytes)?;
        let limit = size_limit(token.kind);
        if bytes.len() > limit {
            return Err(Error::TokenTooLarge {
                kind: token.kind.name(),
                size: bytes.len(),
                limit,
            });
        }
        Ok(token)
    }
}

pub fn serialize_token(token: &EditToken) -> Result<Vec<u8>> {
    token.to_bytes()
}

pub fn deserialize_token(bytes: &[u8]) -> Result<EditToken> {
    EditToken::from_bytes(bytes)
}

fn encode_token(t: &EditToken) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(TOKEN_MAGIC);
    out.write_u16::<LittleEndian>(TOKEN_VERSION)?;
    out.write_u8(t.kind.code())?;
    let dims = t.mlp.dims();
    out.write_u32::<LittleEndian>(dims.len() as u32)?;
    for d in dims {
        out.write_u32::<LittleEndian>(*d as u32)?;
    }
    for w in t.mlp.params() {
        out.write_f32::<LittleEndian>(*w)?;
    }
    out.write_u32::<LittleEndian>(t.selection.f_bar.len() as u32)?;
    for v in &t.selection.f_bar {
        out.write_f32::<LittleEndian>(*v)?;
    }
    out.write_f32::<LittleEndian>(t.selection.thr)?;
    out.write_u64::<LittleEndian>(t.selection.snapshot_version)?;
    out.write_u32::<LittleEndian>(t.label.len() as u32)?;
    out.extend_from_slice(t.label.as_bytes());
    out.write_u8(t.enabled as u8)?;
    out.write_u64::<LittleEndian>(t.id)?;
    out.write_i64::<LittleEndian>(t.created_at)?;
    Ok(out)
}

fn decode_token(bytes: &[u8]) -> Result<EditToken> {
    let bad = |r: &str| Error::corrupt("edit token", r);
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != TOKEN_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != TOKEN_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let kind = EditKind::from_code(c.read_u8().map_err(|_| bad("truncated header"))?).ok_or_else(|| bad("unknown kind"))?;
    let n_dims = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated layer table"))? as usize;
    if n_dims != 4 {
        return Err(bad(&format!("expected a 3-layer network, got {} dims", n_dims)));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        let d = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated layer table"))? as usize;
        if d == 0 || d > 1 << 16 {
            return Err(bad("implausible layer width"));
        }
        dims.push(d);
    }
    let n = crate::field::param_count(&dims);
    if n * 4 > bytes.len() {
        return Err(bad("weights exceed file size"));
    }
    let mut params = vec![0f32; n];
    c.read_f32_into::<LittleEndian>(&mut params).map_err(|_| bad("truncated weights"))?;
    let (_, acts) = edit_layout(dims[0], dims[1]);
    if dims[1] != dims[2] || dims[3] != 3 {
        return Err(bad("layer table is not a residual edit head"));
    }
    let mlp = Mlp::from_params(&dims, &acts, params)?;
    let fdim = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated selection"))? as usize;
    if fdim * 4 > bytes.len() {
        return Err(bad("selection exceeds file size"));
    }
    let mut f_bar = vec![0f32; fdim];
    c.read_f32_into::<LittleEndian>(&mut f_bar)
        .map_err(|_| bad("truncated selection"))?;
    let thr = c.read_f32::<LittleEndian>().map_err(|_| bad("truncated selection"))?;
    let snapshot_version = c.read_u64::<LittleEndian>().map_err(|_| bad("truncated selection"))?;
    let label_len = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated label"))? as usize;
    if label_len > bytes.len() {
        return Err(bad("label exceeds file size"));
    }
    let mut label = vec![0u8; label_len];
    c.read_exact(&mut label).map_err(|_| bad("truncated label"))?;
    let label = String::from_utf8(label).map_err(|_| bad("label is not UTF-8"))?;
    let enabled = c.read_u8().map_err(|_| bad("truncated trailer"))? != 0;
    let id = c.read_u64::<LittleEndian>().map_err(|_| bad("truncated trailer"))?;
    let created_at = c.read_i64::<LittleEndian>().map_err(|_| bad("truncated trailer"))?;
    if (c.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let selection = SelectionMask::new(f_bar, thr, snapshot_version)?;
    let token = EditToken {
        id,
        kind,
        mlp,
        selection,
        enabled,
        created_at,
        label,
    };
    token.check_shape().map_err(|e| bad(&e.to_string()))?;
    Ok(token)
}

/// Ordered set of edit tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditStack {
    pub tokens: Vec<EditToken>,
}

impl EditStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn any_enabled(&self) -> bool {
        self.tokens.iter().any(|t| t.enabled)
    }

    pub fn push(&mut self, token: EditToken) {
        self.tokens.push(token);
    }

    pub fn get(&self, id: u64) -> Option<&EditToken> {
        self.tokens.iter().find(|t| t.id == id)
    }

    fn position(&self, id: u64) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("no layer with id {id}")))
    }

    pub fn toggle(&mut self, id: u64) -> Result<bool> {
        let i = self.position(id)?;
        self.tokens[i].enabled = !self.tokens[i].enabled;
        Ok(self.tokens[i].enabled)
    }

    pub fn set_enabled(&mut self, id: u64, enabled: bool) -> Result<()> {
        let i = self.position(id)?;
        self.tokens[i].enabled = enabled;
        Ok(())
    }

    pub fn delete(&mut self, id: u64) -> Result<EditToken> {
        let i = self.position(id)?;
        Ok(self.tokens.remove(i))
    }

    /// Reorders the stack; `order` must be a permutation of the current ids.
    pub fn reorder(&mut self, order: &[u64]) -> Result<()> {
        if order.len() != self.tokens.len() {
            return Err(Error::Config(format!(
                "reorder lists {} ids for a stack of {}",
                order.len(),
                self.tokens.len()
            )));
        }
        let mut next = Vec::with_capacity(order.len());
        for id in order {
            let i = self.position(*id)?;
            if next.iter().any(|t: &EditToken| t.id == *id) {
                return Err(Error::Config(format!("id {id} repeated in reorder")));
            }
            next.push(self.tokens[i].clone());
        }
        self.tokens = next;
        Ok(())
    }

    pub fn next_id(&self) -> u64 {
        self.tokens.iter().map(|t| t.id + 1).max().unwrap_or(1)
    }

    /// Applies enabled tokens in order to one sample. `hit(i)` tells whether the
    /// sample lies in token `i`'s selection.
    pub fn apply(&self, base: [f64; 3], f_sem: &[f64], hit: impl Fn(usize) -> bool) -> Result<[f64; 3]> {
        let mut c = base;
        let mut touched = false;
        for (i, t) in self.tokens.iter().enumerate() {
            if !t.enabled || !hit(i) {
                continue;
            }
            let r = t.residual(f_sem, c)?;
            for k in 0..3 {
                c[k] += r[k];
            }
            touched = true;
        }
        if touched {
            for v in &mut c {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STACK_MAGIC);
        out.write_u16::<LittleEndian>(TOKEN_VERSION)?;
        out.write_u32::<LittleEndian>(self.tokens.len() as u32)?;
        for t in &self.tokens {
            let b = t.to_bytes()?;
            out.write_u32::<LittleEndian>(b.len() as u32)?;
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::corrupt("edit stack", r);
        let mut c = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != STACK_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = c.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != TOKEN_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut tokens = Vec::new();
        for _ in 0..n {
            let len = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated entry"))? as usize;
            let start = c.position() as usize;
            let end = start
                .checked_add(len)
                .filter(|e| *e <= bytes.len())
                .ok_or_else(|| bad("entry exceeds file"))?;
            tokens.push(EditToken::from_bytes(&bytes[start..end])?);
            c.set_position(end as u64);
        }
        if c.position() as usize != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { tokens })
    }
}

/// Edited color of one sample under a single shared mask bit.
pub fn apply_stack(sample: &RadianceSample, mask_bit: bool, stack: &EditStack) -> Result<[f64; 3]> {
    if !mask_bit {
        return Ok(sample.color);
    }
    stack.apply(sample.color, &sample.f_sem, |_| true)
}

fn now_millis() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}
