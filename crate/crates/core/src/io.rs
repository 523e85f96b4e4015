//! On-disk formats: flat binary array files and plain-text manifests.
//!
//! An array file holds exactly one dense row-major array:
//!
//! ```text
//! magic "LDIV" | u32 LE version = 1 | u8 dtype (1 = f64 LE) | u8 rank |
//! rank x u64 LE dims | row-major f64 LE payload
//! ```
//!
//! A manifest is a `key = value` text file (order-insensitive, `#` comments)
//! tying a set of array files together with their dimensions. Array entries
//! use keys of the form `array.<name>` whose values are paths relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LDIV";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// File extension for binary array files.
pub const ARRAY_EXT: &str = "ldiv";
/// File extension for manifests.
pub const MANIFEST_EXT: &str = "manifest";

/// A dense row-major array of `f64` together with its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayData {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl ArrayData {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::ZeroSizedDim {
                dims: dims.iter().map(|&d| d as u64).collect(),
            });
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "array rank {} exceeds the format maximum of 255",
                dims.len()
            )));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidArgument("array element count overflows".into()))?;
        if len != values.len() {
            return Err(Error::dims(
                "array payload",
                format!("{len} values for shape {dims:?}"),
                values.len(),
            ));
        }
        Ok(ArrayData { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        ArrayData::new(vec![v.len()], v.iter().copied().collect())
            .expect("vector shape is always consistent")
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut values = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                values.push(m[(i, j)]);
            }
        }
        ArrayData::new(vec![m.nrows(), m.ncols()], values)
            .expect("matrix shape is always consistent")
    }

    /// Packs equally-shaped matrices into a rank-3 array `[count, rows, cols]`.
    pub fn from_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot pack zero blocks".into()))?;
        let (r, c) = first.shape();
        let mut values = Vec::with_capacity(blocks.len() * r * c);
        for (k, b) in blocks.iter().enumerate() {
            if b.shape() != (r, c) {
                return Err(Error::dims(
                    format!("block {k}"),
                    format!("{r}x{c}"),
                    format!("{}x{}", b.nrows(), b.ncols()),
                ));
            }
            for i in 0..r {
                for j in 0..c {
                    values.push(b[(i, j)]);
                }
            }
        }
        ArrayData::new(vec![blocks.len(), r, c], values)
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.rank() != 1 {
            return Err(Error::dims("array rank", 1, self.rank()));
        }
        Ok(DVector::from_column_slice(&self.values))
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rank() != 2 {
            return Err(Error::dims("array rank", 2, self.rank()));
        }
        Ok(DMatrix::from_row_slice(
            self.dims[0],
            self.dims[1],
            &self.values,
        ))
    }

    pub fn to_blocks(&self) -> Result<Vec<DMatrix<f64>>> {
        if self.rank() != 3 {
            return Err(Error::dims("array rank", 3, self.rank()));
        }
        let (n, r, c) = (self.dims[0], self.dims[1], self.dims[2]);
        Ok(self
            .values
            .chunks_exact(r * c)
            .take(n)
            .map(|chunk| DMatrix::from_row_slice(r, c, chunk))
            .collect())
    }
}

/// Writes one array to `path`, replacing any existing file.
pub fn write_array(path: &Path, array: &ArrayData) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    put(&mut w, &MAGIC)?;
    put(&mut w, &FORMAT_VERSION.to_le_bytes())?;
    put(&mut w, &[DTYPE_F64, array.rank() as u8])?;
    for &d in array.dims() {
        put(&mut w, &(d as u64).to_le_bytes())?;
    }
    for &v in array.values() {
        put(&mut w, &v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one array from `path`, validating the header byte by byte.
pub fn read_array(path: &Path) -> Result<ArrayData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let exact = |r: &mut BufReader<File>, buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated { path: path.into() }
            } else {
                Error::io(path, e)
            }
        })
    };

    let mut magic = [0u8; 4];
    exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let mut word = [0u8; 4];
    exact(&mut r, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let mut pair = [0u8; 2];
    exact(&mut r, &mut pair)?;
    let (dtype, rank) = (pair[0], pair[1]);
    if dtype != DTYPE_F64 {
        return Err(Error::UnsupportedDtype {
            path: path.into(),
            dtype,
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut dim_word = [0u8; 8];
    for _ in 0..rank {
        exact(&mut r, &mut dim_word)?;
        dims.push(u64::from_le_bytes(dim_word));
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::ZeroSizedDim { dims });
    }
    let len = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::InvalidArgument(format!("{}: array too large", path.display())))?;

    // Read the payload in bounded chunks so a corrupt header claiming a huge
    // length fails with Truncated instead of exhausting memory up front.
    const CHUNK: usize = 1 << 16;
    let mut values: Vec<f64> = Vec::with_capacity(len.min(CHUNK));
    let mut buf = vec![0u8; CHUNK.min(len.max(1)) * 8];
    let mut remaining = len;
    while remaining > 0 {
        let take = remaining.min(CHUNK);
        let bytes = &mut buf[..take * 8];
        exact(&mut r, bytes)?;
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        remaining -= take;
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::TrailingData { path: path.into() }),
        Err(e) => return Err(Error::io(path, e)),
    }
    ArrayData::new(dims.into_iter().map(|d| d as usize).collect(), values)
}

/// The role a manifest plays in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Ubm,
    TMatrix,
    Backend,
    Stats,
    Ivectors,
    Scores,
    Truth,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Ubm => "ubm",
            Kind::TMatrix => "tmatrix",
            Kind::Backend => "backend",
            Kind::Stats => "stats",
            Kind::Ivectors => "ivectors",
            Kind::Scores => "scores",
            Kind::Truth => "truth",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Some(match s {
            "ubm" => Kind::Ubm,
            "tmatrix" => Kind::TMatrix,
            "backend" => Kind::Backend,
            "stats" => Kind::Stats,
            "ivectors" => Kind::Ivectors,
            "scores" => Kind::Scores,
            "truth" => Kind::Truth,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An order-insensitive `key = value` document describing a set of arrays.
#[derive(Debug, Clone)]
pub struct Manifest {
    kind: Kind,
    entries: BTreeMap<String, String>,
    dir: PathBuf,
}

impl Manifest {
    pub fn new(kind: Kind) -> Self {
        Manifest {
            kind,
            entries: BTreeMap::new(),
            dir: PathBuf::new(),
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::manifest(
                &self.dir,
                format!("expected kind '{kind}', found '{}'", self.kind),
            ));
        }
        Ok(())
    }

    pub fn set_dim(&mut self, key: &str, value: usize) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn set_text(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn set_array(&mut self, name: &str, file_name: &str) {
        self.entries
            .insert(format!("array.{name}"), file_name.to_string());
    }

    pub fn set_languages(&mut self, languages: &[String]) -> Result<()> {
        validate_languages(languages)?;
        self.entries
            .insert("languages".to_string(), languages.join(","));
        Ok(())
    }

    pub fn dim(&self, key: &str) -> Result<usize> {
        let raw = self.text(key)?;
        let value: usize = raw.parse().map_err(|_| {
            Error::manifest(&self.dir, format!("key '{key}' is not a size: '{raw}'"))
        })?;
        if value == 0 {
            return Err(Error::manifest(&self.dir, format!("key '{key}' must be >= 1")));
        }
        Ok(value)
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::manifest(&self.dir, format!("missing key '{key}'")))
    }

    pub fn opt_text(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// The comma-separated language label list, if present.
    pub fn languages(&self) -> Result<Option<Vec<String>>> {
        match self.entries.get("languages") {
            None => Ok(None),
            Some(raw) => {
                let names: Vec<String> = raw.split(',').map(str::to_string).collect();
                validate_languages(&names)
                    .map_err(|e| Error::manifest(&self.dir, e.to_string()))?;
                Ok(Some(names))
            }
        }
    }

    /// Resolves the path of array `name` relative to the manifest directory.
    pub fn array_path(&self, name: &str) -> Result<PathBuf> {
        let rel = self.text(&format!("array.{name}"))?;
        Ok(self.dir.join(rel))
    }

    /// Reads array `name` and checks its dimensions exactly.
    pub fn read_array(&self, name: &str, expected_dims: &[usize]) -> Result<ArrayData> {
        let path = self.array_path(name)?;
        let array = read_array(&path)?;
        if array.dims() != expected_dims {
            return Err(Error::dims(
                format!("array '{name}' at {}", path.display()),
                format!("{expected_dims:?}"),
                format!("{:?}", array.dims()),
            ));
        }
        Ok(array)
    }

    /// Writes the manifest with a deterministic layout: `kind` first, then
    /// every other key in sorted order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("kind = {}\n", self.kind));
        for (key, value) in &self.entries {
            out.push_str(&format!("{key} = {value}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::manifest(path, format!("line {}: expected 'key = value'", idx + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::manifest(path, format!("line {}: empty key", idx + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::manifest(path, format!("duplicate key '{key}'")));
            }
        }
        let kind_raw = entries
            .remove("kind")
            .ok_or_else(|| Error::manifest(path, "missing key 'kind'"))?;
        let kind = Kind::parse(&kind_raw)
            .ok_or_else(|| Error::manifest(path, format!("unknown kind '{kind_raw}'")))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        Ok(Manifest { kind, entries, dir })
    }
}

fn validate_languages(languages: &[String]) -> Result<()> {
    if languages.is_empty() {
        return Err(Error::InvalidArgument("language list is empty".into()));
    }
    for (i, name) in languages.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::InvalidArgument(format!("language {i} has an empty name")));
        }
        if name.contains(',') {
            return Err(Error::InvalidArgument(format!(
                "language name '{name}' contains a comma"
            )));
        }
        if languages[..i].contains(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate language name '{name}'"
            )));
        }
    }
    Ok(())
}

/// `dir/foo.manifest` -> `foo`, used to derive sibling array file names.
pub fn manifest_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("cannot derive a file stem from {}", path.display()))
        })
}

/// Builds the conventional sibling array file name `<stem>.<name>.ldiv`.
pub fn array_file_name(stem: &str, name: &str) -> String {
    format!("{stem}.{name}.{ARRAY_EXT}")
}

/// Encodes optional labels as a rank-1 array, `-1` marking "unlabeled".
pub fn labels_to_array(labels: &[Option<usize>]) -> Result<ArrayData> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("label list is empty".into()));
    }
    let values = labels
        .iter()
        .map(|l| l.map(|v| v as f64).unwrap_or(-1.0))
        .collect();
    ArrayData::new(vec![labels.len()], values)
}

/// Decodes the label array, checking integrality and range.
pub fn labels_from_array(array: &ArrayData, num_languages: usize) -> Result<Vec<Option<usize>>> {
    if array.rank() != 1 {
        return Err(Error::dims("labels array rank", 1, array.rank()));
    }
    array
        .values()
        .iter()
        .map(|&v| {
            if !v.is_finite() || v.fract() != 0.0 || v < -1.0 {
                return Err(Error::InvalidArgument(format!("bad label value {v}")));
            }
            if v == -1.0 {
                return Ok(None);
            }
            let label = v as i64;
            if label as usize >= num_languages {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_languages,
                });
            }
            Ok(Some(label as usize))
        })
        .collect()
}
