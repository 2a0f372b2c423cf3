//! On-disk feature dumps.
//!
//! One directory holds one conversation:
//!
//! ```text
//! manifest.json            scalars, token records, shapes, file names
//! visual.f32               n_v x c   visual features
//! prompt.f32               n_p x c   prompt token features
//! answer.f32               n_a x c   answer token features
//! weights.f32              (n_p + n_a) x c classifier rows, prompt then answer
//! masks/<lemma>_<frame>.png
//! images/<frame>.png
//! ```
//!
//! Tensors are raw little-endian `f32`, row-major, without a header. Their
//! shapes live in the manifest. Masks are 8-bit grayscale PNGs at grid
//! resolution where 0 is background and any nonzero value is object.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Major format version this crate reads and writes.
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VISUAL_FILE: &str = "visual.f32";
pub const PROMPT_FILE: &str = "prompt.f32";
pub const ANSWER_FILE: &str = "answer.f32";
pub const WEIGHTS_FILE: &str = "weights.f32";
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{field}: missing file {}", path.display())]
    MissingFile { field: String, path: PathBuf },
    #[error("{field}: expected {expected} bytes/elements, found {actual}")]
    ShapeMismatch {
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("version: unsupported format version {found} (supported: {FORMAT_VERSION})")]
    BadVersion { found: u32 },
    #[error("{field}: non-finite value at element {index}")]
    NonFiniteValue { field: String, index: usize },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{field}: i/o failure on {}: {source}", path.display())]
    Io {
        field: String,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{field}: bad image {}: {source}", path.display())]
    Image {
        field: String,
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DumpError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DumpError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn io(field: impl Into<String>, path: &Path, source: io::Error) -> Self {
        DumpError::Io {
            field: field.into(),
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, DumpError> {
        if data.len() != rows * cols {
            return Err(DumpError::ShapeMismatch {
                field: "matrix".into(),
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, DumpError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(DumpError::ShapeMismatch {
                field: format!("row {bad}"),
                expected: cols,
                actual: rows[bad].len(),
            });
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, so an empty matrix yields no rows instead
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Multiplies every element in place.
    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn check_finite(&self, field: &str) -> Result<(), DumpError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(DumpError::NonFiniteValue {
                field: field.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }
}

/// Spatial layout of one image or clip inside the visual token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Grid {
            frames,
            height,
            width,
        }
    }

    pub fn image(height: usize, width: usize) -> Self {
        Grid::new(1, height, width)
    }

    pub fn cells_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.cells_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One frame of the visual sequence, located within the flat map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSlot {
    /// Global frame index across all segments.
    pub frame: usize,
    pub segment: usize,
    pub offset: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameSlot {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of grid segments; a single image is one segment with one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Layout(Vec<Grid>);

impl Layout {
    pub fn new(segments: Vec<Grid>) -> Self {
        Layout(segments)
    }

    pub fn single(grid: Grid) -> Self {
        Layout(vec![grid])
    }

    pub fn segments(&self) -> &[Grid] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(Grid::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_count(&self) -> usize {
        self.0.iter().map(|g| g.frames).sum()
    }

    pub fn frames(&self) -> Vec<FrameSlot> {
        let mut out = Vec::with_capacity(self.frame_count());
        let mut offset = 0;
        for (segment, grid) in self.0.iter().enumerate() {
            for _ in 0..grid.frames {
                out.push(FrameSlot {
                    frame: out.len(),
                    segment,
                    offset,
                    height: grid.height,
                    width: grid.width,
                });
                offset += grid.cells_per_frame();
            }
        }
        out
    }

    pub fn frame(&self, index: usize) -> Option<FrameSlot> {
        self.frames().into_iter().nth(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Answer,
}

/// Candidate next token recorded at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub text: String,
    /// Groups sub-word tokens into words; non-decreasing within a role.
    pub word_index: usize,
    #[serde(default)]
    pub pos_tag: String,
    #[serde(default)]
    pub lemma: String,
    pub role: Role,
    /// Top candidates at this generation step, answers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Candidate>>,
}

impl TokenRecord {
    pub fn new(token_id: u32, text: impl Into<String>, word_index: usize, role: Role) -> Self {
        TokenRecord {
            token_id,
            text: text.into(),
            word_index,
            pos_tag: String::new(),
            lemma: String::new(),
            role,
            candidates: None,
        }
    }

    pub fn tagged(mut self, pos_tag: &str, lemma: &str) -> Self {
        self.pos_tag = pos_tag.to_string();
        self.lemma = lemma.to_string();
        self
    }
}

/// Ground-truth raster for one lemma on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub name: String,
    pub frame: usize,
    pub cells: Vec<bool>,
}

/// One conversation's exported tensors and token metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub version: u32,
    pub visual_features: Matrix,
    pub prompt_features: Matrix,
    pub answer_features: Matrix,
    pub token_weights: Matrix,
    pub layout: Layout,
    pub prompt_tokens: Vec<TokenRecord>,
    pub answer_tokens: Vec<TokenRecord>,
    /// Source image per frame, relative to the dump directory unless absolute.
    pub image_refs: Vec<String>,
    pub masks: Vec<Mask>,
}

impl FeatureDump {
    pub fn n_visual(&self) -> usize {
        self.visual_features.rows()
    }

    pub fn n_prompt(&self) -> usize {
        self.prompt_tokens.len()
    }

    pub fn n_answer(&self) -> usize {
        self.answer_tokens.len()
    }

    pub fn channels(&self) -> usize {
        self.visual_features.cols()
    }

    /// Token in prompt-then-answer order.
    pub fn token(&self, index: usize) -> &TokenRecord {
        if index < self.n_prompt() {
            &self.prompt_tokens[index]
        } else {
            &self.answer_tokens[index - self.n_prompt()]
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.prompt_tokens.iter().chain(&self.answer_tokens)
    }

    /// Textual feature row in prompt-then-answer order.
    pub fn text_feature(&self, index: usize) -> &[f32] {
        if index < self.n_prompt() {
            self.prompt_features.row(index)
        } else {
            self.answer_features.row(index - self.n_prompt())
        }
    }

    /// Multiplies every feature and weight by `factor`.
    pub fn scale_features(&mut self, factor: f32) {
        self.visual_features.scale(factor);
        self.prompt_features.scale(factor);
        self.answer_features.scale(factor);
        self.token_weights.scale(factor);
    }

    /// Checks every structural invariant of the format.
    pub fn validate(&self) -> Result<(), DumpError> {
        if self.version != FORMAT_VERSION {
            return Err(DumpError::BadVersion {
                found: self.version,
            });
        }
        let c = self.channels();
        for (field, m) in [
            ("prompt_features", &self.prompt_features),
            ("answer_features", &self.answer_features),
            ("token_weights", &self.token_weights),
        ] {
            if m.cols() != c {
                return Err(DumpError::ShapeMismatch {
                    field: format!("{field}.cols"),
                    expected: c,
                    actual: m.cols(),
                });
            }
        }
        let layout_cells = self.layout.len();
        if self.layout.segments().is_empty() {
            return Err(DumpError::invalid("grid", "no grid segments"));
        }
        if let Some(g) = self.layout.segments().iter().find(|g| g.is_empty()) {
            return Err(DumpError::invalid(
                "grid",
                format!("empty segment {}x{}x{}", g.frames, g.height, g.width),
            ));
        }
        if layout_cells != self.n_visual() {
            return Err(DumpError::ShapeMismatch {
                field: "visual_features.rows".into(),
                expected: layout_cells,
                actual: self.n_visual(),
            });
        }
        for (field, rows, tokens) in [
            ("prompt_features.rows", self.prompt_features.rows(), self.n_prompt()),
            ("answer_features.rows", self.answer_features.rows(), self.n_answer()),
            (
                "token_weights.rows",
                self.token_weights.rows(),
                self.n_prompt() + self.n_answer(),
            ),
        ] {
            if rows != tokens {
                return Err(DumpError::ShapeMismatch {
                    field: field.into(),
                    expected: tokens,
                    actual: rows,
                });
            }
        }
        self.visual_features.check_finite("visual_features")?;
        self.prompt_features.check_finite("prompt_features")?;
        self.answer_features.check_finite("answer_features")?;
        self.token_weights.check_finite("token_weights")?;

        for (field, tokens, role) in [
            ("prompt_tokens", &self.prompt_tokens, Role::Prompt),
            ("answer_tokens", &self.answer_tokens, Role::Answer),
        ] {
            for (i, t) in tokens.iter().enumerate() {
                if t.role != role {
                    return Err(DumpError::invalid(
                        format!("{field}[{i}].role"),
                        format!("expected {role:?}, found {:?}", t.role),
                    ));
                }
            }
            if let Some(i) = tokens
                .windows(2)
                .position(|w| w[1].word_index < w[0].word_index)
            {
                return Err(DumpError::invalid(
                    format!("{field}[{}].word_index", i + 1),
                    "word_index decreases",
                ));
            }
        }

        let frames = self.layout.frames();
        for m in &self.masks {
            let field = format!("masks[{}_{}]", m.name, m.frame);
            let slot = frames.get(m.frame).ok_or_else(|| {
                DumpError::invalid(&field, format!("frame {} outside layout", m.frame))
            })?;
            if m.cells.len() != slot.len() {
                return Err(DumpError::ShapeMismatch {
                    field,
                    expected: slot.len(),
                    actual: m.cells.len(),
                });
            }
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                return Err(DumpError::invalid(field, "mask name must be a plain lemma"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tensors {
    visual: TensorEntry,
    prompt: TensorEntry,
    answer: TensorEntry,
    weights: TensorEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    frame: usize,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    channels: usize,
    grid: Layout,
    tensors: Tensors,
    prompt_tokens: Vec<TokenRecord>,
    answer_tokens: Vec<TokenRecord>,
    #[serde(default)]
    images: Vec<String>,
    #[serde(default)]
    masks: Vec<MaskEntry>,
}

fn read_tensor(
    dir: &Path,
    field: &str,
    entry: &TensorEntry,
    cols: usize,
) -> Result<Matrix, DumpError> {
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(DumpError::MissingFile {
            field: field.into(),
            path,
        });
    }
    let bytes = fs::read(&path).map_err(|e| DumpError::io(field, &path, e))?;
    let expected = entry.rows * cols * 4;
    if bytes.len() != expected {
        return Err(DumpError::ShapeMismatch {
            field: field.into(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let m = Matrix {
        rows: entry.rows,
        cols,
        data,
    };
    m.check_finite(field)?;
    Ok(m)
}

/// Reads an 8-bit mask raster; any nonzero pixel is object.
pub fn read_mask_png(path: &Path, field: &str) -> Result<(usize, usize, Vec<bool>), DumpError> {
    if !path.is_file() {
        return Err(DumpError::MissingFile {
            field: field.into(),
            path: path.to_path_buf(),
        });
    }
    let img = image::open(path)
        .map_err(|source| DumpError::Image {
            field: field.into(),
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let cells = img.into_raw().into_iter().map(|v| v != 0).collect();
    Ok((h as usize, w as usize, cells))
}

pub fn write_mask_png(path: &Path, height: usize, width: usize, cells: &[bool]) -> Result<(), DumpError> {
    let raw: Vec<u8> = cells.iter().map(|&c| if c { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, raw).ok_or_else(|| {
        DumpError::ShapeMismatch {
            field: "mask".into(),
            expected: height * width,
            actual: cells.len(),
        }
    })?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DumpError::Image {
            field: "mask".into(),
            path: path.to_path_buf(),
            source,
        })
}

pub fn mask_file_name(name: &str, frame: usize) -> String {
    format!("{name}_{frame}.png")
}

/// Loads and validates the dump stored in directory `dir`.
pub fn load_dump(dir: impl AsRef<Path>) -> Result<FeatureDump, DumpError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(DumpError::MissingFile {
            field: "manifest".into(),
            path: manifest_path,
        });
    }
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| DumpError::io("manifest", &manifest_path, e))?;
    // Peek at the version before strict parsing so newer layouts report
    // BadVersion instead of a schema error.
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let version = probe
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DumpError::invalid("version", "missing or not an integer"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(DumpError::BadVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let manifest: Manifest = serde_json::from_value(probe)?;
    let c = manifest.channels;
    let t = &manifest.tensors;
    let visual_features = read_tensor(dir, "visual_features", &t.visual, c)?;
    let prompt_features = read_tensor(dir, "prompt_features", &t.prompt, c)?;
    let answer_features = read_tensor(dir, "answer_features", &t.answer, c)?;
    let token_weights = read_tensor(dir, "token_weights", &t.weights, c)?;

    let frames = manifest.grid.frames();
    let mut masks = Vec::with_capacity(manifest.masks.len());
    for entry in &manifest.masks {
        let field = format!("masks[{}_{}]", entry.name, entry.frame);
        let (h, w, cells) = read_mask_png(&dir.join(&entry.file), &field)?;
        if let Some(slot) = frames.get(entry.frame) {
            if (h, w) != (slot.height, slot.width) {
                return Err(DumpError::ShapeMismatch {
                    field,
                    expected: slot.len(),
                    actual: h * w,
                });
            }
        }
        masks.push(Mask {
            name: entry.name.clone(),
            frame: entry.frame,
            cells,
        });
    }

    let dump = FeatureDump {
        version: manifest.version,
        visual_features,
        prompt_features,
        answer_features,
        token_weights,
        layout: manifest.grid,
        prompt_tokens: manifest.prompt_tokens,
        answer_tokens: manifest.answer_tokens,
        image_refs: manifest.images,
        masks,
    };
    dump.validate()?;
    Ok(dump)
}

/// Writes `dump` into directory `dir`, creating it if needed.
///
/// Image files are referenced, not copied.
pub fn save_dump(dump: &FeatureDump, dir: impl AsRef<Path>) -> Result<(), DumpError> {
    let dir = dir.as_ref();
    dump.validate()?;
    fs::create_dir_all(dir).map_err(|e| DumpError::io("directory", dir, e))?;

    let entry = |file: &str, rows: usize| TensorEntry {
        file: file.to_string(),
        rows,
    };
    let manifest = Manifest {
        version: dump.version,
        channels: dump.channels(),
        grid: dump.layout.clone(),
        tensors: Tensors {
            visual: entry(VISUAL_FILE, dump.visual_features.rows()),
            prompt: entry(PROMPT_FILE, dump.prompt_features.rows()),
            answer: entry(ANSWER_FILE, dump.answer_features.rows()),
            weights: entry(WEIGHTS_FILE, dump.token_weights.rows()),
        },
        prompt_tokens: dump.prompt_tokens.clone(),
        answer_tokens: dump.answer_tokens.clone(),
        images: dump.image_refs.clone(),
        masks: dump
            .masks
            .iter()
            .map(|m| MaskEntry {
                name: m.name.clone(),
                frame: m.frame,
                file: format!("{MASK_DIR}/{}", mask_file_name(&m.name, m.frame)),
            })
            .collect(),
    };

    for (file, m) in [
        (VISUAL_FILE, &dump.visual_features),
        (PROMPT_FILE, &dump.prompt_features),
        (ANSWER_FILE, &dump.answer_features),
        (WEIGHTS_FILE, &dump.token_weights),
    ] {
        let path = dir.join(file);
        fs::write(&path, m.to_le_bytes()).map_err(|e| DumpError::io(file, &path, e))?;
    }

    if !dump.masks.is_empty() {
        let mask_dir = dir.join(MASK_DIR);
        fs::create_dir_all(&mask_dir).map_err(|e| DumpError::io("masks", &mask_dir, e))?;
        let frames = dump.layout.frames();
        for m in &dump.masks {
            let slot = frames[m.frame];
            let path = mask_dir.join(mask_file_name(&m.name, m.frame));
            write_mask_png(&path, slot.height, slot.width, &m.cells)?;
        }
    }

    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| DumpError::io("manifest", &path, e))
}
