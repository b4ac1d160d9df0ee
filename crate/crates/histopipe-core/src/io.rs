//! Raster file IO (8-bit PNG and single-level TIFF) and the keyed
//! metadata sidecars that carry physical resolution, mask scope and
//! label-map geometry, since neither format stores um/px reliably.

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging::RasterImage;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("{path}: unsupported image layout ({message})")]
    UnsupportedImage { path: PathBuf, message: String },
    #[error("unsupported image extension for `{0}` (expected .png, .tif or .tiff)")]
    UnknownExtension(PathBuf),
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    BadHeader {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path} line {line}: {message}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: missing required key `{key}`")]
    MissingKey { path: PathBuf, key: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> FormatError {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn decode(path: &Path, message: impl Into<String>) -> FormatError {
        FormatError::Decode {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub(crate) fn encode(path: &Path, message: impl Into<String>) -> FormatError {
        FormatError::Encode {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub(crate) fn record(path: &Path, line: usize, message: impl Into<String>) -> FormatError {
        FormatError::BadRecord {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ImageFormat {
    Png,
    Tiff,
}

fn format_of(path: &Path) -> Result<ImageFormat, FormatError> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("tif") | Some("tiff") => Ok(ImageFormat::Tiff),
        _ => Err(FormatError::UnknownExtension(path.to_path_buf())),
    }
}

/// TIFF payload compression; PNG always deflates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiffCompression {
    Uncompressed,
    #[default]
    Deflate,
}

/// Write an 8-bit RGB or grayscale raster; the format follows the file
/// extension. Resolution metadata is NOT written here — pair with
/// [`write_sidecar`] when the reader needs um/px.
pub fn write_image(path: &Path, image: &RasterImage) -> Result<(), FormatError> {
    match format_of(path)? {
        ImageFormat::Png => write_png(path, image),
        ImageFormat::Tiff => write_tiff(path, image, TiffCompression::default()),
    }
}

/// Read an 8-bit RGB or grayscale raster. The returned resolution is a
/// placeholder 1.0 um/px; callers that care combine with a sidecar via
/// [`read_image_with_meta`].
pub fn read_image(path: &Path) -> Result<RasterImage, FormatError> {
    match format_of(path)? {
        ImageFormat::Png => read_png(path),
        ImageFormat::Tiff => read_tiff(path),
    }
}

fn write_png(path: &Path, image: &RasterImage) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, image.width(), image.height());
    encoder.set_color(match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => {
            return Err(FormatError::encode(
                path,
                format!("{other}-channel rasters are not writable"),
            ))
        }
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| FormatError::encode(path, e.to_string()))?;
    writer
        .write_image_data(image.data())
        .map_err(|e| FormatError::encode(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<RasterImage, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FormatError::decode(path, "output size overflow"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(FormatError::UnsupportedImage {
            path: path.to_path_buf(),
            message: format!("bit depth {:?}", info.bit_depth),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1u8,
        png::ColorType::Rgb => 3u8,
        other => {
            return Err(FormatError::UnsupportedImage {
                path: path.to_path_buf(),
                message: format!("color type {other:?}"),
            })
        }
    };
    buf.truncate(info.width as usize * info.height as usize * channels as usize);
    RasterImage::new(info.width, info.height, channels, buf, 1.0)
        .map_err(|e| FormatError::decode(path, e.to_string()))
}

/// Indexed-color PNG with an explicit palette, used by label maps.
pub fn write_indexed_png(path: &Path, width: u32, height: u32, indices: &[u8], palette: &[u8]) -> Result<(), FormatError> {
    if indices.len() != width as usize * height as usize {
        return Err(FormatError::encode(path, "index buffer does not match dimensions"));
    }
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, width, height);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette.to_vec());
    let mut writer = encoder
        .write_header()
        .map_err(|e| FormatError::encode(path, e.to_string()))?;
    writer
        .write_image_data(indices)
        .map_err(|e| FormatError::encode(path, e.to_string()))
}

/// Read an indexed-color PNG back as raw palette indices plus palette.
pub fn read_indexed_png(path: &Path) -> Result<(u32, u32, Vec<u8>, Vec<u8>), FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FormatError::decode(path, "output size overflow"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(FormatError::UnsupportedImage {
            path: path.to_path_buf(),
            message: format!("expected 8-bit indexed, got {:?}/{:?}", info.color_type, info.bit_depth),
        });
    }
    let palette = reader
        .info()
        .palette
        .as_ref()
        .map(|p| p.to_vec())
        .ok_or_else(|| FormatError::decode(path, "indexed PNG without palette"))?;
    buf.truncate(info.width as usize * info.height as usize);
    Ok((info.width, info.height, buf, palette))
}

fn write_tiff(path: &Path, image: &RasterImage, compression: TiffCompression) -> Result<(), FormatError> {
    use tiff::encoder::{colortype, compression::DeflateLevel, Compression, TiffEncoder};
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let writer = BufWriter::new(file);
    let mut encoder = TiffEncoder::new(writer)
        .map_err(|e| FormatError::encode(path, e.to_string()))?
        .with_compression(match compression {
            TiffCompression::Uncompressed => Compression::Uncompressed,
            TiffCompression::Deflate => Compression::Deflate(DeflateLevel::Balanced),
        });
    let result = match image.channels() {
        1 => encoder.write_image::<colortype::Gray8>(image.width(), image.height(), image.data()),
        3 => encoder.write_image::<colortype::RGB8>(image.width(), image.height(), image.data()),
        other => {
            return Err(FormatError::encode(
                path,
                format!("{other}-channel rasters are not writable"),
            ))
        }
    };
    result.map_err(|e| FormatError::encode(path, e.to_string()))
}

/// Explicit-compression TIFF writer; [`write_image`] defaults to deflate.
pub fn write_tiff_with_compression(
    path: &Path,
    image: &RasterImage,
    compression: TiffCompression,
) -> Result<(), FormatError> {
    write_tiff(path, image, compression)
}

fn read_tiff(path: &Path) -> Result<RasterImage, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut decoder = tiff::decoder::Decoder::new(BufReader::new(file))
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    let (width, height) = decoder
        .dimensions()
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    let colortype = decoder
        .colortype()
        .map_err(|e| FormatError::decode(path, e.to_string()))?;
    let channels = match colortype {
        tiff::ColorType::Gray(8) => 1u8,
        tiff::ColorType::RGB(8) => 3u8,
        other => {
            return Err(FormatError::UnsupportedImage {
                path: path.to_path_buf(),
                message: format!("color type {other:?}"),
            })
        }
    };
    let data = match decoder
        .read_image()
        .map_err(|e| FormatError::decode(path, e.to_string()))?
    {
        tiff::decoder::DecodingResult::U8(data) => data,
        other => {
            return Err(FormatError::UnsupportedImage {
                path: path.to_path_buf(),
                message: format!("sample format {other:?}"),
            })
        }
    };
    RasterImage::new(width, height, channels, data, 1.0)
        .map_err(|e| FormatError::decode(path, e.to_string()))
}

pub const SIDECAR_HEADER: &str = "HISTOPIPE-META v1";

/// Keyed metadata sidecar stored next to an image as `<file>.meta`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sidecar {
    entries: Vec<(String, String)>,
}

impl Sidecar {
    pub fn new() -> Sidecar {
        Sidecar::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.retain(|(k, _)| k != key);
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, path: &Path, key: &str) -> Result<f64, FormatError> {
        let raw = self.get(key).ok_or_else(|| FormatError::MissingKey {
            path: path.to_path_buf(),
            key: key.to_string(),
        })?;
        raw.parse().map_err(|_| FormatError::record(path, 0, format!("bad value for `{key}`: {raw}")))
    }

    pub fn get_u32(&self, path: &Path, key: &str) -> Result<u32, FormatError> {
        let raw = self.get(key).ok_or_else(|| FormatError::MissingKey {
            path: path.to_path_buf(),
            key: key.to_string(),
        })?;
        raw.parse().map_err(|_| FormatError::record(path, 0, format!("bad value for `{key}`: {raw}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(SIDECAR_HEADER);
        out.push('\n');
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Sidecar, FormatError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").trim();
        if header != SIDECAR_HEADER {
            return Err(FormatError::BadHeader {
                path: path.to_path_buf(),
                expected: SIDECAR_HEADER.to_string(),
                found: header.to_string(),
            });
        }
        let mut sidecar = Sidecar::new();
        for (i, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| FormatError::record(path, i + 2, "expected `key: value`"))?;
            sidecar.set(k.trim(), v.trim());
        }
        Ok(sidecar)
    }
}

/// Sidecar path for an image: `<file>.meta` alongside it.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let mut os = image_path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

pub fn write_sidecar(image_path: &Path, sidecar: &Sidecar) -> Result<(), FormatError> {
    let path = sidecar_path(image_path);
    std::fs::write(&path, sidecar.to_text()).map_err(|e| FormatError::io(&path, e))
}

pub fn read_sidecar(image_path: &Path) -> Result<Sidecar, FormatError> {
    let path = sidecar_path(image_path);
    let text = std::fs::read_to_string(&path).map_err(|e| FormatError::io(&path, e))?;
    Sidecar::from_text(&path, &text)
}

/// Write an image plus a sidecar carrying its resolution.
pub fn write_image_with_meta(path: &Path, image: &RasterImage) -> Result<(), FormatError> {
    write_image(path, image)?;
    let mut sidecar = Sidecar::new();
    sidecar.set("um_per_px", image.resolution());
    write_sidecar(path, &sidecar)
}

/// Read an image and adopt the resolution recorded in its sidecar.
pub fn read_image_with_meta(path: &Path) -> Result<RasterImage, FormatError> {
    let image = read_image(path)?;
    let sidecar = read_sidecar(path)?;
    let res = sidecar.get_f64(path, "um_per_px")?;
    image
        .with_resolution(res)
        .map_err(|e| FormatError::decode(path, e.to_string()))
}

/// FNV-1a 64-bit hash; names patch payload files by content.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Content hash of a raster: dimensions, channels and pixel bytes.
pub fn content_hash(image: &RasterImage) -> u64 {
    let mut prefix = Vec::with_capacity(9);
    prefix.extend_from_slice(&image.width().to_le_bytes());
    prefix.extend_from_slice(&image.height().to_le_bytes());
    prefix.push(image.channels());
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in prefix.iter().chain(image.data().iter()) {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Atomic-ish text write helper shared by the text formats.
pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .map_err(|e| FormatError::io(path, e))?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

/// Seek guard so TIFF writers get what they need from plain files.
#[allow(dead_code)]
fn assert_seekable<T: Seek>(_: &T) {}
