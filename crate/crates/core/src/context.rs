//! The 2x2 image context: four rendered views tiled into one mosaic so an external
//! editor changes them coherently, plus the iterative protocol that keeps two edited
//! views fixed as guidance while two fresh views are inpainted.
//!
//! Cells are laid out row-major: `a b / c d`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TriPlaneField;
use crate::io::{atomic_write, encode_depth16, encode_mask, encode_rgb8, load_rgb8};
use crate::render::{render_view, Camera, Channels, RenderOptions};
use crate::select::{SelectionMask, PROJECTION_THRESHOLD};

pub const CELLS: usize = 4;
pub const DEFAULT_EPOCHS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellRole {
    /// Already edited; shown unmasked so the editor matches it.
    GuidanceFixed,
    /// Fresh view the editor changes inside its mask.
    EditableMasked,
}

impl CellRole {
    pub fn name(self) -> &'static str {
        match self {
            CellRole::GuidanceFixed => "guidance_fixed",
            CellRole::EditableMasked => "editable_masked",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "guidance_fixed" => Some(CellRole::GuidanceFixed),
            "editable_masked" => Some(CellRole::EditableMasked),
            _ => None,
        }
    }
}

/// Identifies the session state a mosaic was exported from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub session: String,
    pub field_version: u64,
    pub epoch: usize,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/v{}/e{}", self.session, self.field_version, self.epoch)
    }
}

impl Provenance {
    /// Errors with `StaleProvenance` unless `found` matches `self`.
    pub fn check(&self, found: &Provenance) -> Result<()> {
        if self != found {
            return Err(Error::StaleProvenance {
                expected: self.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextCell {
    pub camera_id: usize,
    pub role: CellRole,
    pub rgb: Vec<f32>,
    pub mask: Vec<bool>,
    pub depth: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextGrid {
    pub epoch: usize,
    pub cell_width: u32,
    pub cell_height: u32,
    pub near: f64,
    pub far: f64,
    pub cells: [ContextCell; CELLS],
    pub provenance: Provenance,
}

/// Full-size mosaic planes, `2W x 2H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mosaic {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f32>,
    pub mask: Vec<bool>,
    pub depth: Vec<f32>,
}

/// One view after the external edit.
#[derive(Clone, Debug, PartialEq)]
pub struct EditedView {
    pub camera_id: usize,
    pub epoch: usize,
    pub rgb: Vec<f32>,
}

/// Edited views in the order they were first edited.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditHistory {
    pub views: Vec<EditedView>,
}

impl EditHistory {
    pub fn contains(&self, camera_id: usize) -> bool {
        self.views.iter().any(|v| v.camera_id == camera_id)
    }

    pub fn get(&self, camera_id: usize) -> Option<&EditedView> {
        self.views.iter().find(|v| v.camera_id == camera_id)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// The two most recently edited views, older first.
    pub fn recent_pair(&self) -> Option<[usize; 2]> {
        let n = self.views.len();
        (n >= 2).then(|| [self.views[n - 2].camera_id, self.views[n - 1].camera_id])
    }

    /// Adds a view, replacing an earlier edit of the same camera in place.
    pub fn record(&mut self, view: EditedView) {
        match self.views.iter_mut().find(|v| v.camera_id == view.camera_id) {
            Some(v) => *v = view,
            None => self.views.push(view),
        }
    }
}

/// Picks the four cameras of a context grid.
///
/// Epoch 0 spreads four views by farthest-point sampling over camera positions from a
/// seeded start. Later epochs reuse the two most recently edited views as guidance
/// (cells a, b) and add the two unedited views farthest from everything edited so far
/// (cells c, d); ties resolve in seeded order.
pub fn pick_context_cameras(cameras: &[Camera], epoch: usize, seed: u64, history: &EditHistory) -> Result<[usize; CELLS]> {
    let mut order: Vec<usize> = (0..cameras.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    ));
    if epoch == 0 {
        if cameras.len() < CELLS {
            return Err(Error::Context(format!(
                "need at least {CELLS} cameras, dataset has {}",
                cameras.len()
            )));
        }
        let mut chosen = vec![order[0]];
        farthest_points(cameras, &order, &mut chosen, CELLS);
        return Ok([chosen[0], chosen[1], chosen[2], chosen[3]]);
    }
    let [a, b] = history
        .recent_pair()
        .ok_or_else(|| Error::Context(format!("epoch {epoch} needs two edited views, history has {}", history.len())))?;
    let fresh: Vec<usize> = order.iter().copied().filter(|i| !history.contains(*i)).collect();
    if fresh.len() < 2 {
        return Err(Error::Context(format!("dataset exhausted: {} unedited views left", fresh.len())));
    }
    let mut chosen: Vec<usize> = history.views.iter().map(|v| v.camera_id).collect();
    let edited = chosen.len();
    farthest_points(cameras, &fresh, &mut chosen, edited + 2);
    Ok([a, b, chosen[edited], chosen[edited + 1]])
}

/// Greedily appends the candidate with the largest distance to `chosen` until it holds
/// `target` entries. Earlier candidates win ties.
fn farthest_points(cameras: &[Camera], candidates: &[usize], chosen: &mut Vec<usize>, target: usize) {
    while chosen.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for &c in candidates {
            if chosen.contains(&c) {
                continue;
            }
            let p = cameras[c].position();
            let d = chosen
                .iter()
                .map(|&q| (cameras[q].position() - p).norm())
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((c, d));
            }
        }
        match best {
            Some((c, _)) => chosen.push(c),
            None => break,
        }
    }
}

/// Renders every cell. Guidance cells carry their stored edited color and an empty
/// mask; editable cells carry a fresh render and the projected selection.
pub fn compose_grid(
    ids: [usize; CELLS],
    cameras: &[Camera],
    epoch: usize,
    field: &TriPlaneField,
    selection: &SelectionMask,
    history: &EditHistory,
    options: &RenderOptions<'_>,
    session: &str,
) -> Result<ContextGrid> {
    let first = cameras
        .get(ids[0])
        .ok_or_else(|| Error::Context(format!("camera {} not in dataset", ids[0])))?;
    let (w, h) = (first.width, first.height);
    let mut cells = Vec::with_capacity(CELLS);
    for (slot, &id) in ids.iter().enumerate() {
        let camera = cameras
            .get(id)
            .ok_or_else(|| Error::Context(format!("camera {id} not in dataset")))?;
        if (camera.width, camera.height) != (w, h) {
            return Err(Error::Context(format!(
                "camera {id} is {}x{}, grid cells are {w}x{h}",
                camera.width, camera.height
            )));
        }
        let role = if epoch > 0 && slot < 2 {
            CellRole::GuidanceFixed
        } else {
            CellRole::EditableMasked
        };
        let opts = RenderOptions {
            channels: Channels {
                coverage: role == CellRole::EditableMasked,
                ..options.channels
            },
            coverage: Some(selection),
            ..options.clone()
        };
        let img = render_view(camera, field, &opts)?;
        let cell = match role {
            CellRole::GuidanceFixed => {
                let stored = history
                    .get(id)
                    .ok_or_else(|| Error::Context(format!("guidance camera {id} has no edited view")))?;
                ContextCell {
                    camera_id: id,
                    role,
                    rgb: stored.rgb.clone(),
                    mask: vec![false; camera.pixel_count()],
                    depth: img.depth,
                }
            }
            CellRole::EditableMasked => ContextCell {
                camera_id: id,
                role,
                rgb: img.rgb,
                mask: img.coverage.iter().map(|c| *c >= PROJECTION_THRESHOLD).collect(),
                depth: img.depth,
            },
        };
        cells.push(cell);
    }
    let cells: [ContextCell; CELLS] = cells.try_into().expect("four cells");
    Ok(ContextGrid {
        epoch,
        cell_width: w,
        cell_height: h,
        near: first.near,
        far: first.far,
        cells,
        provenance: Provenance {
            session: session.to_string(),
            field_version: field.version,
            epoch,
        },
    })
}

fn tile<T: Copy>(w: usize, h: usize, ch: usize, parts: [&[T]; CELLS]) -> Vec<T> {
    let mut out = Vec::with_capacity(4 * w * h * ch);
    for row in 0..2 {
        for y in 0..h {
            for col in 0..2 {
                let src = parts[row * 2 + col];
                out.extend_from_slice(&src[y * w * ch..(y + 1) * w * ch]);
            }
        }
    }
    out
}

fn untile<T: Copy>(w: usize, h: usize, ch: usize, mosaic: &[T]) -> [Vec<T>; CELLS] {
    let mut cells: [Vec<T>; CELLS] = Default::default();
    let stride = 2 * w * ch;
    for (i, cell) in cells.iter_mut().enumerate() {
        let (row, col) = (i / 2, i % 2);
        cell.reserve(w * h * ch);
        for y in 0..h {
            let start = (row * h + y) * stride + col * w * ch;
            cell.extend_from_slice(&mosaic[start..start + w * ch]);
        }
    }
    cells
}

impl ContextGrid {
    pub fn mosaic_size(&self) -> (u32, u32) {
        (2 * self.cell_width, 2 * self.cell_height)
    }

    pub fn camera_ids(&self) -> [usize; CELLS] {
        [0, 1, 2, 3].map(|i| self.cells[i].camera_id)
    }

    pub fn mosaic(&self) -> Mosaic {
        let (w, h) = (self.cell_width as usize, self.cell_height as usize);
        let c = &self.cells;
        Mosaic {
            width: 2 * self.cell_width,
            height: 2 * self.cell_height,
            rgb: tile(w, h, 3, [&c[0].rgb, &c[1].rgb, &c[2].rgb, &c[3].rgb]),
            mask: tile(w, h, 1, [&c[0].mask, &c[1].mask, &c[2].mask, &c[3].mask]),
            depth: tile(w, h, 1, [&c[0].depth, &c[1].depth, &c[2].depth, &c[3].depth]),
        }
    }

    /// Cuts an edited RGB mosaic back into per-view images.
    pub fn slice(&self, edited_rgb: &[f32]) -> Result<[EditedView; CELLS]> {
        self.sidecar().slice(edited_rgb)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            provenance: self.provenance.clone(),
            cell_width: self.cell_width,
            cell_height: self.cell_height,
            near: self.near,
            far: self.far,
            cameras: self.camera_ids(),
            roles: [0, 1, 2, 3].map(|i| self.cells[i].role),
        }
    }
}

/// Slices an edited mosaic into per-view images. See [`ContextGrid::slice`].
pub fn slice_grid(edited_rgb: &[f32], grid: &ContextGrid) -> Result<[EditedView; CELLS]> {
    grid.slice(edited_rgb)
}

/// Text sidecar written next to an exported mosaic, one `key=value` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct Sidecar {
    pub provenance: Provenance,
    pub cell_width: u32,
    pub cell_height: u32,
    pub near: f64,
    pub far: f64,
    pub cameras: [usize; CELLS],
    pub roles: [CellRole; CELLS],
}

impl Sidecar {
    /// Cuts an edited RGB mosaic into the per-view images of the cells it describes.
    pub fn slice(&self, edited_rgb: &[f32]) -> Result<[EditedView; CELLS]> {
        let (w, h) = (self.cell_width as usize, self.cell_height as usize);
        let expected = 3 * 4 * w * h;
        if edited_rgb.len() != expected {
            return Err(Error::DimMismatch {
                what: "edited mosaic",
                expected,
                got: edited_rgb.len(),
            });
        }
        let [a, b, c, d] = untile(w, h, 3, edited_rgb);
        let make = |i: usize, rgb: Vec<f32>| EditedView {
            camera_id: self.cameras[i],
            epoch: self.provenance.epoch,
            rgb,
        };
        Ok([make(0, a), make(1, b), make(2, c), make(3, d)])
    }

    /// The views an editor was asked to change: editable cells only.
    pub fn editable_views(&self, edited_rgb: &[f32]) -> Result<Vec<EditedView>> {
        Ok(self
            .slice(edited_rgb)?
            .into_iter()
            .zip(self.roles)
            .filter(|(_, r)| *r == CellRole::EditableMasked)
            .map(|(v, _)| v)
            .collect())
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        s += &format!("session={}\n", self.provenance.session);
        s += &format!("field_version={}\n", self.provenance.field_version);
        s += &format!("epoch={}\n", self.provenance.epoch);
        s += &format!("cell_width={}\n", self.cell_width);
        s += &format!("cell_height={}\n", self.cell_height);
        s += &format!("near={}\n", self.near);
        s += &format!("far={}\n", self.far);
        s += "depth_encoding=linear16\n";
        s += &format!("cameras={}\n", join(self.cameras.iter().map(|c| c.to_string()).collect()));
        s += &format!("roles={}\n", join(self.roles.iter().map(|r| r.name().to_string()).collect()));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::corrupt("context sidecar", reason);
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::corrupt("context sidecar", format!("`{k}` is not a number: {v}")))
        }
        let list = |k: &str| -> Result<Vec<String>> {
            let v: Vec<String> = get(k)?.split(',').map(|s| s.trim().to_string()).collect();
            if v.len() != CELLS {
                return Err(bad(format!("`{k}` needs {CELLS} entries, got {}", v.len())));
            }
            Ok(v)
        };
        let cams = list("cameras")?;
        let roles = list("roles")?;
        let mut cameras = [0usize; CELLS];
        let mut role_arr = [CellRole::EditableMasked; CELLS];
        for i in 0..CELLS {
            cameras[i] = num("cameras", &cams[i])?;
            role_arr[i] = CellRole::parse(&roles[i]).ok_or_else(|| bad(format!("unknown role `{}`", roles[i])))?;
        }
        Ok(Self {
            provenance: Provenance {
                session: get("session")?.clone(),
                field_version: num("field_version", get("field_version")?)?,
                epoch: num("epoch", get("epoch")?)?,
            },
            cell_width: num("cell_width", get("cell_width")?)?,
            cell_height: num("cell_height", get("cell_height")?)?,
            near: num("near", get("near")?)?,
            far: num("far", get("far")?)?,
            cameras,
            roles: role_arr,
        })
    }
}

/// Encoded export: 8-bit RGB and mask PNGs, 16-bit depth PNG, and the sidecar text.
#[derive(Clone, Debug, PartialEq)]
pub struct MosaicExport {
    pub rgb_png: Vec<u8>,
    pub mask_png: Vec<u8>,
    pub depth_png: Vec<u8>,
    pub sidecar: String,
}

pub fn encode_mosaic(grid: &ContextGrid) -> Result<MosaicExport> {
    let m = grid.mosaic();
    Ok(MosaicExport {
        rgb_png: encode_rgb8(m.width, m.height, &m.rgb)?,
        mask_png: encode_mask(m.width, m.height, &m.mask)?,
        depth_png: encode_depth16(m.width, m.height, &m.depth, grid.near, grid.far)?,
        sidecar: grid.sidecar().to_text(),
    })
}

pub const MOSAIC_RGB_FILE: &str = "context_rgb.png";
pub const MOSAIC_MASK_FILE: &str = "context_mask.png";
pub const MOSAIC_DEPTH_FILE: &str = "context_depth.png";
pub const SIDECAR_FILE: &str = "context.txt";

/// Writes the four export files into `dir` and returns the RGB mosaic path.
pub fn export_mosaic(grid: &ContextGrid, dir: &Path) -> Result<PathBuf> {
    let e = encode_mosaic(grid)?;
    atomic_write(&dir.join(MOSAIC_RGB_FILE), &e.rgb_png)?;
    atomic_write(&dir.join(MOSAIC_MASK_FILE), &e.mask_png)?;
    atomic_write(&dir.join(MOSAIC_DEPTH_FILE), &e.depth_png)?;
    atomic_write(&dir.join(SIDECAR_FILE), e.sidecar.as_bytes())?;
    Ok(dir.join(MOSAIC_RGB_FILE))
}

/// Checks an edited RGB mosaic against the live grid: provenance first, then size.
pub fn check_import(grid: &ContextGrid, sidecar: &Sidecar, width: u32, height: u32) -> Result<()> {
    grid.provenance.check(&sidecar.provenance)?;
    let (w, h) = grid.mosaic_size();
    if (width, height) != (w, h) {
        return Err(Error::Context(format!("edited mosaic is {width}x{height}, expected {w}x{h}")));
    }
    if sidecar.cameras != grid.camera_ids() {
        return Err(Error::Context(format!(
            "sidecar cameras {:?} do not match the live grid {:?}",
            sidecar.cameras,
            grid.camera_ids()
        )));
    }
    Ok(())
}

/// Loads an edited mosaic plus its sidecar from disk and validates both.
pub fn import_mosaic(grid: &ContextGrid, mosaic: &Path, sidecar: &Path) -> Result<Vec<f32>> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(sidecar.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let side = Sidecar::parse(&text)?;
    let (w, h, rgb) = load_rgb8(mosaic)?;
    check_import(grid, &side, w, h)?;
    Ok(rgb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub epochs: usize,
    pub seed: u64,
    pub samples: usize,
    pub background: [f64; 3],
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            samples: 128,
            background: [0.0; 3],
        }
    }
}

/// Where the iterative protocol stands after an import.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    /// The next grid is ready for export.
    Next(Box<ContextGrid>),
    /// Every epoch has been edited.
    Done,
}

/// Single-writer state of the iterative protocol.
#[derive(Clone, Debug)]
pub struct ContextSession {
    pub config: ContextConfig,
    pub session: String,
    pub cameras: Vec<Camera>,
    pub history: EditHistory,
    pub current: Option<ContextGrid>,
    pub done: bool,
    next_epoch: usize,
}

impl ContextSession {
    pub fn new(session: impl Into<String>, cameras: Vec<Camera>, config: ContextConfig) -> Result<Self> {
        if config.epochs == 0 {
            return Err(Error::Config("context epochs must be positive".into()));
        }
        let needed = CELLS + 2 * (config.epochs - 1);
        if cameras.len() < needed {
            return Err(Error::Context(format!(
                "{} epochs need {needed} distinct views, dataset has {}",
                config.epochs,
                cameras.len()
            )));
        }
        Ok(Self {
            config,
            session: session.into(),
            cameras,
            history: EditHistory::default(),
            current: None,
            done: false,
            next_epoch: 0,
        })
    }

    /// Rebuilds a session from a stored history. The next grid built is `next_epoch`'s.
    pub fn resume(
        session: impl Into<String>,
        cameras: Vec<Camera>,
        config: ContextConfig,
        history: EditHistory,
        next_epoch: usize,
    ) -> Result<Self> {
        let mut s = Self::new(session, cameras, config)?;
        if let Some(v) = history.views.iter().find(|v| v.camera_id >= s.cameras.len()) {
            return Err(Error::Context(format!(
                "history names camera {} of {}",
                v.camera_id,
                s.cameras.len()
            )));
        }
        s.done = next_epoch >= s.config.epochs;
        s.history = history;
        s.next_epoch = next_epoch;
        Ok(s)
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    fn render_options(&self) -> RenderOptions<'static> {
        RenderOptions {
            samples: self.config.samples,
            background: self.config.background,
            ..RenderOptions::default()
        }
    }

    fn build(&self, epoch: usize, field: &TriPlaneField, selection: &SelectionMask) -> Result<ContextGrid> {
        let ids = pick_context_cameras(&self.cameras, epoch, self.config.seed, &self.history)?;
        compose_grid(
            ids,
            &self.cameras,
            epoch,
            field,
            selection,
            &self.history,
            &self.render_options(),
            &self.session,
        )
    }

    /// Builds the epoch-0 grid. Restarting discards any history.
    pub fn start(&mut self, field: &TriPlaneField, selection: &SelectionMask) -> Result<&ContextGrid> {
        self.history = EditHistory::default();
        self.done = false;
        self.next_epoch = 0;
        let grid = self.build(0, field, selection)?;
        Ok(self.current.insert(grid))
    }

    /// Rebuilds the current epoch's grid against a newer field, keeping the history.
    pub fn refresh(&mut self, field: &TriPlaneField, selection: &SelectionMask) -> Result<&ContextGrid> {
        let epoch = self
            .current
            .as_ref()
            .map(|g| g.epoch)
            .ok_or_else(|| Error::Context("no active grid".into()))?;
        let grid = self.build(epoch, field, selection)?;
        Ok(self.current.insert(grid))
    }

    /// Checks `found` against the current grid and the live field version, then records
    /// the grid's editable views. The next grid is built by [`ContextSession::next_grid`].
    /// Returns the newly recorded views.
    pub fn import(&mut self, found: &Provenance, live_version: u64, edited_rgb: &[f32]) -> Result<Vec<EditedView>> {
        if self.done {
            return Err(Error::Context("all epochs already edited".into()));
        }
        let grid = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Context("no active grid; export one first".into()))?;
        let expected = Provenance {
            field_version: live_version,
            ..grid.provenance.clone()
        };
        grid.provenance.check(found)?;
        expected.check(found)?;
        // Guidance cells were shown unmasked for reference and keep their stored edit.
        let views = grid.sidecar().editable_views(edited_rgb)?;
        for view in &views {
            self.history.record(view.clone());
        }
        self.next_epoch = grid.epoch + 1;
        self.current = None;
        if self.next_epoch >= self.config.epochs {
            self.done = true;
        }
        Ok(views)
    }

    /// Builds the grid after the last import, against the (possibly fine-tuned) field.
    pub fn next_grid(&mut self, field: &TriPlaneField, selection: &SelectionMask) -> Result<&ContextGrid> {
        if self.done {
            return Err(Error::Context("all epochs already edited".into()));
        }
        if self.current.is_some() {
            return Err(Error::Context("current grid has not been imported yet".into()));
        }
        let grid = self.build(self.next_epoch, field, selection)?;
        Ok(self.current.insert(grid))
    }

    /// Imports the current grid's edit, runs `finetune` on the field with the full edit
    /// history, then builds the next grid or finishes.
    pub fn advance_epoch(
        &mut self,
        edited_rgb: &[f32],
        field: &mut TriPlaneField,
        selection: &SelectionMask,
        finetune: &mut dyn FnMut(&mut TriPlaneField, &EditHistory) -> Result<()>,
    ) -> Result<Step> {
        let found = self
            .current
            .as_ref()
            .map(|g| g.provenance.clone())
            .ok_or_else(|| Error::Context("no active grid; start the session first".into()))?;
        self.import(&found, found.field_version, edited_rgb)?;
        finetune(field, &self.history)?;
        if self.done {
            return Ok(Step::Done);
        }
        Ok(Step::Next(Box::new(self.next_grid(field, selection)?.clone())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::math::{RigidTransform, Vec3};

    fn ring(n: usize, w: u32) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let eye = Vec3::new(3.0 * a.cos(), 0.8, 3.0 * a.sin());
                let pose = RigidTransform::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0));
                Camera::with_fov(w, w, 40.0, pose, 1.0, 5.0)
            })
            .collect()
    }

    fn small_field() -> TriPlaneField {
        let cfg = FieldConfig {
            resolution: 8,
            feature_dim: 4,
            hidden_width: 8,
            geom_dim: 4,
            sem_dim: 4,
            seed: 3,
            plane_init: 0.3,
            ..FieldConfig::default()
        };
        TriPlaneField::new(&cfg).unwrap()
    }

    fn everything(d: usize) -> SelectionMask {
        SelectionMask::new(vec![0.0; d], f32::INFINITY, 0).unwrap()
    }

    #[test]
    fn epoch_zero_is_reproducible_and_distinct() {
        let cams = ring(12, 4);
        let h = EditHistory::default();
        let a = pick_context_cameras(&cams, 0, 5, &h).unwrap();
        assert_eq!(a, pick_context_cameras(&cams, 0, 5, &h).unwrap());
        let mut s = a.to_vec();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn epoch_zero_spreads_views_around_a_ring() {
        // On a 12-camera ring farthest-point sampling lands on a rough square.
        let cams = ring(12, 4);
        let ids = pick_context_cameras(&cams, 0, 1, &EditHistory::default()).unwrap();
        let mut min = f64::INFINITY;
        for i in 0..4 {
            for j in i + 1..4 {
                min = min.min((cams[ids[i]].position() - cams[ids[j]].position()).norm());
            }
        }
        assert!(min > 3.0, "closest pair {min}");
    }

    #[test]
    fn later_epochs_reuse_the_two_latest_edits() {
        let cams = ring(10, 4);
        let mut h = EditHistory::default();
        for id in [4, 7, 1, 9] {
            h.record(EditedView {
                camera_id: id,
                epoch: 0,
                rgb: vec![],
            });
        }
        let ids = pick_context_cameras(&cams, 1, 0, &h).unwrap();
        assert_eq!(&ids[..2], &[1, 9]);
        assert!(!h.contains(ids[2]) && !h.contains(ids[3]) && ids[2] != ids[3]);
    }

    #[test]
    fn too_few_cameras_is_an_error() {
        assert!(pick_context_cameras(&ring(3, 4), 0, 0, &EditHistory::default()).is_err());
        let cams = ring(5, 4);
        let mut h = EditHistory::default();
        for id in 0..4 {
            h.record(EditedView {
                camera_id: id,
                epoch: 0,
                rgb: vec![],
            });
        }
        assert!(matches!(pick_context_cameras(&cams, 1, 0, &h), Err(Error::Context(_))));
    }

    #[test]
    fn mosaic_layout_and_slice_round_trip() {
        let cams = ring(6, 6);
        let field = small_field();
        let grid = compose_grid(
            [0, 1, 2, 3],
            &cams,
            0,
            &field,
            &everything(4),
            &EditHistory::default(),
            &RenderOptions {
                samples: 8,
                ..Default::default()
            },
            "s",
        )
        .unwrap();
        let m = grid.mosaic();
        assert_eq!((m.width, m.height), (12, 12));
        let (w, h) = (m.width as usize, m.height as usize);
        for y in 0..h {
            for x in 0..w {
                let cell = (2 * y / h) * 2 + 2 * x / w;
                let (cx, cy) = (x % (w / 2), y % (h / 2));
                let src = &grid.cells[cell];
                for c in 0..3 {
                    assert_eq!(m.rgb[(y * w + x) * 3 + c].to_bits(), src.rgb[(cy * w / 2 + cx) * 3 + c].to_bits());
                }
                assert_eq!(m.depth[y * w + x].to_bits(), src.depth[cy * w / 2 + cx].to_bits());
                assert_eq!(m.mask[y * w + x], src.mask[cy * w / 2 + cx]);
            }
        }
        let views = grid.slice(&m.rgb).unwrap();
        for (v, c) in views.iter().zip(&grid.cells) {
            assert_eq!(v.rgb, c.rgb);
            assert_eq!(v.camera_id, c.camera_id);
        }
        assert!(grid.slice(&m.rgb[3..]).is_err());
    }

    #[test]
    fn changing_one_cell_changes_one_view() {
        let cams = ring(6, 4);
        let field = small_field();
        let grid = compose_grid(
            [0, 1, 2, 3],
            &cams,
            0,
            &field,
            &everything(4),
            &EditHistory::default(),
            &RenderOptions {
                samples: 8,
                ..Default::default()
            },
            "s",
        )
        .unwrap();
        let mut rgb = grid.mosaic().rgb;
        // Top-left pixel of cell c (row 1, column 0).
        let idx = (4 * 8) * 3;
        rgb[idx] = 1.0 - rgb[idx];
        let views = grid.slice(&rgb).unwrap();
        let changed: Vec<usize> = views
            .iter()
            .zip(&grid.cells)
            .enumerate()
            .filter(|(_, (v, c))| v.rgb != c.rgb)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(changed, vec![2]);
    }

    #[test]
    fn sidecar_round_trips_and_rejects_junk() {
        let s = Sidecar {
            provenance: Provenance {
                session: "desk".into(),
                field_version: 7,
                epoch: 1,
            },
            cell_width: 64,
            cell_height: 48,
            near: 1.5,
            far: 4.25,
            cameras: [3, 9, 0, 12],
            roles: [
                CellRole::GuidanceFixed,
                CellRole::GuidanceFixed,
                CellRole::EditableMasked,
                CellRole::EditableMasked,
            ],
        };
        assert_eq!(Sidecar::parse(&s.to_text()).unwrap(), s);
        assert!(Sidecar::parse("session=x\n").is_err());
        assert!(Sidecar::parse(&s.to_text().replace("epoch=1", "epoch=one")).is_err());
        assert!(Sidecar::parse(&s.to_text().replace("3,9,0,12", "3,9")).is_err());
    }

    #[test]
    fn stale_provenance_is_rejected() {
        let live = Provenance {
            session: "a".into(),
            field_version: 2,
            epoch: 0,
        };
        let mut old = live.clone();
        old.field_version = 1;
        assert!(matches!(live.check(&old), Err(Error::StaleProvenance { .. })));
        assert!(live.check(&live.clone()).is_ok());
    }

    #[test]
    fn three_epochs_edit_eight_views() {
        let cams = ring(12, 4);
        let mut field = small_field();
        let sel = everything(4);
        let mut session = ContextSession::new(
            "t",
            cams,
            ContextConfig {
                samples: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let first = session.start(&field, &sel).unwrap().clone();
        assert!(first.cells.iter().all(|c| c.role == CellRole::EditableMasked));
        let mut grid = first;
        let mut epochs_seen = vec![grid.epoch];
        let mut calls = 0;
        loop {
            let mut edited = grid.mosaic().rgb;
            edited.iter_mut().for_each(|v| *v = (*v + 0.25).min(1.0));
            let step = session
                .advance_epoch(&edited, &mut field, &sel, &mut |_, _| {
                    calls += 1;
                    Ok(())
                })
                .unwrap();
            match step {
                Step::Next(g) => {
                    assert!(g.cells[..2]
                        .iter()
                        .all(|c| c.role == CellRole::GuidanceFixed && c.mask.iter().all(|m| !m)));
                    for c in &g.cells[..2] {
                        assert_eq!(c.rgb, session.history.get(c.camera_id).unwrap().rgb);
                    }
                    epochs_seen.push(g.epoch);
                    grid = *g;
                }
                Step::Done => break,
            }
        }
        assert_eq!(epochs_seen, vec![0, 1, 2]);
        assert_eq!(calls, 3);
        assert_eq!(session.history.len(), 8);
        let mut ids: Vec<usize> = session.history.views.iter().map(|v| v.camera_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        assert!(session
            .advance_epoch(&grid.mosaic().rgb, &mut field, &sel, &mut |_, _| Ok(()))
            .is_err());
    }

    #[test]
    fn import_rejects_old_grids_and_newer_fields() {
        let cams = ring(12, 4);
        let field = small_field();
        let sel = everything(4);
        let mut session = ContextSession::new(
            "t",
            cams,
            ContextConfig {
                samples: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let g0 = session.start(&field, &sel).unwrap().clone();
        let rgb = g0.mosaic().rgb;
        assert!(session.next_grid(&field, &sel).is_err());
        let stale_field = session.import(&g0.provenance, g0.provenance.field_version + 1, &rgb);
        assert!(matches!(stale_field, Err(Error::StaleProvenance { .. })));
        assert_eq!(session.import(&g0.provenance, g0.provenance.field_version, &rgb).unwrap().len(), 4);
        assert!(session.import(&g0.provenance, g0.provenance.field_version, &rgb).is_err());
        let g1 = session.next_grid(&field, &sel).unwrap().clone();
        assert_eq!(g1.epoch, 1);
        let replay = session.import(&g0.provenance, g0.provenance.field_version, &rgb);
        assert!(matches!(replay, Err(Error::StaleProvenance { .. })));
        assert_eq!(session.history.len(), 4);
    }

    #[test]
    fn resumed_session_continues_where_it_stopped() {
        let cams = ring(12, 4);
        let field = small_field();
        let sel = everything(4);
        let config = ContextConfig {
            samples: 8,
            ..Default::default()
        };
        let mut live = ContextSession::new("t", cams.clone(), config.clone()).unwrap();
        let g0 = live.start(&field, &sel).unwrap().clone();
        live.import(&g0.provenance, 0, &g0.mosaic().rgb).unwrap();
        let g1 = live.next_grid(&field, &sel).unwrap().clone();
        let mut resumed = ContextSession::resume("t", cams, config, live.history.clone(), 1).unwrap();
        assert_eq!(resumed.next_grid(&field, &sel).unwrap(), &g1);
        let bad = ContextSession::resume(
            "t",
            ring(12, 4),
            ContextConfig::default(),
            EditHistory {
                views: vec![EditedView {
                    camera_id: 40,
                    epoch: 0,
                    rgb: vec![],
                }],
            },
            1,
        );
        assert!(bad.is_err());
    }
}
