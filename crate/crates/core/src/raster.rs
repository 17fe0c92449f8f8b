//! 8-bit RGB rasters, the binary PPM codec, and the two CSV inputs of the
//! pipeline (ground-truth manifest and crop rectangles).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Rgb = [u8; 3];

/// Row-major RGB raster with a top-left origin.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("expected {expected} pixels for the given dimensions, got {actual}")]
    PixelCount { expected: usize, actual: usize },
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImageError::PixelCount {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Result<Self, ImageError> {
        Self::new(width, height, vec![color; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Rgb,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic: expected \"P6\"")]
    BadMagic,
    #[error("malformed {field}: {reason}")]
    Malformed { field: &'static str, reason: String },
    #[error("zero {field}")]
    ZeroDimension { field: &'static str },
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(String),
    #[error("comments are not supported in the PPM header ({field})")]
    Comment { field: &'static str },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after pixel payload")]
    TrailingBytes(usize),
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn token(&mut self, field: &'static str) -> Result<&'a str, DecodeError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(DecodeError::Malformed {
                field,
                reason: "missing whitespace separator".into(),
            });
        }
        let begin = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            if self.bytes[self.pos] == b'#' {
                return Err(DecodeError::Comment { field });
            }
            self.pos += 1;
        }
        if begin == self.pos {
            return Err(DecodeError::Malformed {
                field,
                reason: "missing value".into(),
            });
        }
        // the slice is ASCII up to this point or the parse below rejects it
        std::str::from_utf8(&self.bytes[begin..self.pos]).map_err(|_| DecodeError::Malformed {
            field,
            reason: "not ASCII".into(),
        })
    }
}

fn parse_dimension(text: &str, field: &'static str) -> Result<usize, DecodeError> {
    if !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(DecodeError::Malformed {
            field,
            reason: format!("{text:?} is not a decimal integer"),
        });
    }
    let value: usize = text.parse().map_err(|_| DecodeError::Malformed {
        field,
        reason: format!("{text:?} out of range"),
    })?;
    if value == 0 {
        return Err(DecodeError::ZeroDimension { field });
    }
    Ok(value)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DecodeError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(DecodeError::BadMagic);
    }
    let mut cursor = HeaderCursor { bytes, pos: 2 };
    let width = parse_dimension(cursor.token("width")?, "width")?;
    let height = parse_dimension(cursor.token("height")?, "height")?;
    let maxval = cursor.token("maxval")?;
    if maxval != "255" {
        return Err(DecodeError::UnsupportedMaxval(maxval.to_string()));
    }
    // exactly one whitespace byte separates maxval from the payload
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => {
            return Err(DecodeError::Truncated {
                expected: width * height * 3,
                found: 0,
            })
        }
    }
    let payload = &bytes[cursor.pos..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| DecodeError::Malformed {
            field: "width",
            reason: "dimensions overflow".into(),
        })?;
    if payload.len() < expected {
        return Err(DecodeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DecodeError::TrailingBytes(payload.len() - expected));
    }
    let pixels = payload
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Image {
        width,
        height,
        pixels,
    })
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len() * 3);
    out.extend_from_slice(header.as_bytes());
    for px in &img.pixels {
        out.extend_from_slice(px);
    }
    out
}

// ---------------------------------------------------------------------------
// CSV inputs
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "image_id,melanoma,seborrheic_keratosis";
pub const CROP_HEADER: &str = "image_id,x,y,width,height";

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub melanoma: bool,
    pub seborrheic_keratosis: bool,
}

impl ManifestEntry {
    pub fn new(image_id: impl Into<String>, melanoma: bool, seborrheic_keratosis: bool) -> Self {
        Self {
            image_id: image_id.into(),
            melanoma,
            seborrheic_keratosis,
        }
    }

    /// Neither melanoma nor seborrheic keratosis.
    pub fn is_nevus(&self) -> bool {
        !self.melanoma && !self.seborrheic_keratosis
    }
}

/// Ground-truth table in file order. Ids are unique and at most one label is set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("labels not mutually exclusive for {0:?}")]
    NotExclusive(String),
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(ManifestError::DuplicateId(e.image_id.clone()));
            }
            if e.melanoma && e.seborrheic_keratosis {
                return Err(ManifestError::NotExclusive(e.image_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }

    /// Serializes with the canonical header, integer labels and LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{}\n",
                e.image_id, e.melanoma as u8, e.seborrheic_keratosis as u8
            ));
        }
        out
    }
}

/// Yields `(line_number, line)` for non-empty lines, tolerating CRLF.
fn csv_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn check_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    expected: &str,
) -> Result<(), ParseError> {
    match lines.next() {
        Some((n, line)) => {
            let line = line.strip_prefix('\u{feff}').unwrap_or(line);
            if line.trim() != expected {
                return Err(ParseError::new(n, format!("expected header {expected:?}")));
            }
            Ok(())
        }
        None => Err(ParseError::new(1, format!("missing header {expected:?}"))),
    }
}

fn parse_label(cell: &str, line: usize, column: &str) -> Result<bool, ParseError> {
    match cell.trim() {
        "0" | "0.0" => Ok(false),
        "1" | "1.0" => Ok(true),
        other => Err(ParseError::new(
            line,
            format!("non-binary {column} label {other:?}"),
        )),
    }
}

pub fn load_manifest(text: &str) -> Result<DatasetManifest, ParseError> {
    let mut lines = csv_lines(text);
    check_header(&mut lines, MANIFEST_HEADER)?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(ParseError::new(
                n,
                format!("expected 3 columns, found {}", cells.len()),
            ));
        }
        let id = cells[0].trim();
        if id.is_empty() {
            return Err(ParseError::new(n, "empty image id"));
        }
        let melanoma = parse_label(cells[1], n, "melanoma")?;
        let sk = parse_label(cells[2], n, "seborrheic_keratosis")?;
        if melanoma && sk {
            return Err(ParseError::new(n, "labels not mutually exclusive"));
        }
        if !seen.insert(id.to_string()) {
            return Err(ParseError::new(n, format!("duplicate image id {id:?}")));
        }
        entries.push(ManifestEntry::new(id, melanoma, sk));
    }
    Ok(DatasetManifest { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }
}

impl fmt::Display for CropRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}x{})", self.x, self.y, self.width, self.height)
    }
}

/// Per-image crop rectangles. Ids without an entry fall back to a centered square.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CropSpec {
    entries: BTreeMap<String, CropRect>,
}

impl CropSpec {
    pub fn get(&self, id: &str) -> Option<CropRect> {
        self.entries.get(id).copied()
    }

    /// Ids with a rectangle, sorted.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn parse_coord(cell: &str, line: usize, column: &str) -> Result<usize, ParseError> {
    let cell = cell.trim();
    if cell.starts_with('-') {
        return Err(ParseError::new(line, format!("negative crop {column}")));
    }
    cell.parse()
        .map_err(|_| ParseError::new(line, format!("invalid crop {column} {cell:?}")))
}

pub fn load_crop_spec(text: &str) -> Result<CropSpec, ParseError> {
    let mut lines = csv_lines(text);
    check_header(&mut lines, CROP_HEADER)?;
    let mut entries = BTreeMap::new();
    for (n, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(ParseError::new(
                n,
                format!("expected 5 columns, found {}", cells.len()),
            ));
        }
        let id = cells[0].trim();
        let x = parse_coord(cells[1], n, "x")?;
        let y = parse_coord(cells[2], n, "y")?;
        let width = parse_coord(cells[3], n, "width")?;
        let height = parse_coord(cells[4], n, "height")?;
        if width == 0 {
            return Err(ParseError::new(n, "zero crop width"));
        }
        if height == 0 {
            return Err(ParseError::new(n, "zero crop height"));
        }
        if entries
            .insert(id.to_string(), CropRect::new(x, y, width, height))
            .is_some()
        {
            return Err(ParseError::new(n, format!("duplicate image id {id:?}")));
        }
    }
    Ok(CropSpec { entries })
}

// ---------------------------------------------------------------------------
// Image lookup by id
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("image {id:?} not found")]
    NotFound { id: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("decoding {path}: {source}")]
    Decode { path: PathBuf, source: DecodeError },
}

/// Resolves an image id to pixels.
pub trait ImageSource: Sync {
    fn load(&self, id: &str) -> Result<Image, SourceError>;
}

/// Reads `<dir>/<id>.ppm`.
#[derive(Debug, Clone)]
pub struct DirSource {
    dir: PathBuf,
}

impl DirSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.ppm"))
    }
}

impl ImageSource for DirSource {
    fn load(&self, id: &str) -> Result<Image, SourceError> {
        let path = self.path_for(id);
        read_ppm(&path).map_err(|e| match e {
            SourceError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                SourceError::NotFound { id: id.to_string() }
            }
            other => other,
        })
    }
}

pub fn read_ppm(path: &Path) -> Result<Image, SourceError> {
    let bytes = std::fs::read(path).map_err(|source| SourceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ppm(&bytes).map_err(|source| SourceError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// In-memory source, mostly for tests and synthetic data.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, Image>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, img: Image) {
        self.images.insert(id.into(), img);
    }
}

impl FromIterator<(String, Image)> for MemorySource {
    fn from_iter<I: IntoIterator<Item = (String, Image)>>(iter: I) -> Self {
        Self {
            images: iter.into_iter().collect(),
        }
    }
}

impl ImageSource for MemorySource {
    fn load(&self, id: &str) -> Result<Image, SourceError> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| SourceError::NotFound { id: id.to_string() })
    }
}
