//! Grayscale rasters, binary PGM I/O, corpus manifests and cover/stego pair splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::Algorithm;
use crate::error::{Error, Result};
use crate::kernels::RealMatrix;

/// 8-bit grayscale raster stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero dimension {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0);
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(row, col));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn to_real(&self) -> RealMatrix {
        RealMatrix::from_vec(
            self.width,
            self.height,
            self.pixels.iter().map(|&p| f64::from(p)).collect(),
        )
        .expect("dimensions already validated")
    }

    /// Rotation by 90 degrees counter-clockwise.
    pub fn rotate90_ccw(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        // new is h wide and w tall: new[i][j] = old[j][w-1-i]
        GrayImage::from_fn(h, w, |i, j| self.get(j, w - 1 - i))
    }

    pub(crate) fn ensure_min_size(&self, min: usize) -> Result<()> {
        if self.width < min || self.height < min {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                min,
            });
        }
        Ok(())
    }
}

/// Parses a binary PGM (P5, maxval 255). Header comments are skipped.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::MalformedHeader(format!(
            "expected magic P5, found {magic:?}"
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!("missing {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *slot = text
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("{name} out of range: {text}")))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    GrayImage::new(width as usize, height as usize, payload[..expected].to_vec())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_pgm(image))
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Cover,
    Stego,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Cover => "cover",
            Role::Stego => "stego",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cover" => Ok(Role::Cover),
            "stego" => Ok(Role::Stego),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
    pub pair_id: String,
    /// `None` for covers.
    pub algorithm: Option<Algorithm>,
    /// Bits per pixel; zero for covers.
    pub payload: f64,
}

/// The set of images making up a cover/stego corpus.
///
/// Stored on disk as a TSV with header `path role pair_id algorithm payload`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "path\trole\tpair_id\talgorithm\tpayload";

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = Self { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Pair-id of a cover file, taken from its stem (`1911.pgm` -> `1911`).
    pub fn pair_id_for(path: &Path) -> String {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    fn validate(&self) -> Result<()> {
        let mut covers: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 2;
            match e.role {
                Role::Cover => {
                    if e.payload != 0.0 || e.algorithm.is_some() {
                        return Err(Error::Manifest {
                            line,
                            msg: "cover entries need algorithm none and payload 0".into(),
                        });
                    }
                    *covers.entry(&e.pair_id).or_default() += 1;
                }
                Role::Stego => {
                    if !(e.payload > 0.0) || e.algorithm.is_none() {
                        return Err(Error::Manifest {
                            line,
                            msg: "stego entries need an algorithm and payload > 0".into(),
                        });
                    }
                }
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            let n = covers.get(e.pair_id.as_str()).copied().unwrap_or(0);
            if n != 1 {
                return Err(Error::Manifest {
                    line: i + 2,
                    msg: format!("pair {} has {n} cover entries, expected 1", e.pair_id),
                });
            }
        }
        Ok(())
    }

    /// Sorted distinct pair-ids.
    pub fn pair_ids(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.pair_id.clone()).collect()
    }

    pub fn cover(&self, pair_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.role == Role::Cover && e.pair_id == pair_id)
    }

    pub fn stego(&self, pair_id: &str, algorithm: Algorithm, payload: f64) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| {
            e.role == Role::Stego
                && e.pair_id == pair_id
                && e.algorithm == Some(algorithm)
                && (e.payload - payload).abs() < 1e-9
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let algo = e.algorithm.map_or("none", |a| a.manifest_name());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.role,
                e.pair_id,
                algo,
                e.payload
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Manifest {
                    line: 1,
                    msg: format!("expected header {MANIFEST_HEADER:?}"),
                })
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Manifest { line: line_no, msg };
            if cols.len() != 5 {
                return Err(bad(format!("expected 5 columns, found {}", cols.len())));
            }
            let role = cols[1].parse::<Role>().map_err(bad)?;
            let algorithm = match cols[3] {
                "none" => None,
                name => Some(Algorithm::from_manifest_name(name).ok_or_else(|| {
                    Error::Manifest {
                        line: line_no,
                        msg: format!("unknown algorithm {name:?}"),
                    }
                })?),
            };
            let payload = cols[4].parse::<f64>().map_err(|_| Error::Manifest {
                line: line_no,
                msg: format!("bad payload {:?}", cols[4]),
            })?;
            entries.push(ManifestEntry {
                path: PathBuf::from(cols[0]),
                role,
                pair_id: cols[2].to_string(),
                algorithm,
                payload,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Disjoint train/test sets of pair-ids. A cover always travels with its stegos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSplit {
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

pub fn split_pairs(manifest: &CorpusManifest, seed: u64, n_train: usize) -> Result<PairSplit> {
    let mut ids: Vec<String> = manifest.pair_ids().into_iter().collect();
    if n_train > ids.len() {
        return Err(Error::NTrainTooLarge {
            requested: n_train,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    Ok(PairSplit {
        seed,
        train: ids.into_iter().collect(),
        test: test.into_iter().collect(),
    })
}
