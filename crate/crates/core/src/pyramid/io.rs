//! Binary PGM (P5) / PPM (P6) rasters and the dataset manifest.

use std::path::{Path, PathBuf};

use super::{Image, LabelMap};
use crate::error::{Error, Result};

/// Largest accepted width or height.
pub const MAX_EXTENT: usize = 1 << 16;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Encode 8-bit pixels as P5 (1 channel) or P6 (3 channels).
pub fn encode_pnm(width: usize, height: usize, channels: usize, data: &[u8]) -> Vec<u8> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Decode P5 or P6 with maxval 255. Returns `(width, height, channels, data)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("header ends early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing separator after maxval".into()));
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::MalformedHeader(format!("unsupported magic {m:?}"))),
    };
    let num = |s: &str, what: &str| {
        s.parse::<u64>()
            .map_err(|_| Error::MalformedHeader(format!("bad {what} {s:?}")))
    };
    let (w, h, maxval) = (
        num(&fields[1], "width")?,
        num(&fields[2], "height")?,
        num(&fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    if w == 0 || h == 0 || w > MAX_EXTENT as u64 || h > MAX_EXTENT as u64 {
        return Err(Error::ExtentOverflow {
            width: w.min(usize::MAX as u64) as usize,
            height: h.min(usize::MAX as u64) as usize,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let n = w * h * channels;
    if bytes.len() - pos < n {
        return Err(Error::UnexpectedEof);
    }
    Ok((w, h, channels, bytes[pos..pos + n].to_vec()))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let (width, height, channels, data) = decode_pnm(&read_file(path.as_ref())?)?;
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write_file(
        path.as_ref(),
        &encode_pnm(image.width, image.height, image.channels, &image.data),
    )
}

/// Label maps are single-channel PGM with raw class indices.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (width, height, channels, data) = decode_pnm(&read_file(path.as_ref())?)?;
    if channels != 1 {
        return Err(Error::MalformedHeader("label maps must be P5".into()));
    }
    Ok(LabelMap { width, height, data })
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_file(path.as_ref(), &encode_pnm(labels.width, labels.height, 1, &labels.data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// One manifest line: `slide=<path> labels=<path> split=<train|test>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide: PathBuf,
    pub labels: PathBuf,
    pub split: SplitTag,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        let split = match self.split {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        };
        format!(
            "slide={} labels={} split={split}",
            self.slide.display(),
            self.labels.display()
        )
    }
}

/// Parse a manifest. Relative paths resolve against the manifest's directory.
/// Blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (mut slide, mut labels, mut split) = (None, None, None);
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {field:?}")))?;
            match k {
                "slide" => slide = Some(base.join(v)),
                "labels" => labels = Some(base.join(v)),
                "split" => {
                    split = Some(match v {
                        "train" => SplitTag::Train,
                        "test" => SplitTag::Test,
                        _ => return Err(err(format!("split must be train or test, got {v:?}"))),
                    })
                }
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        entries.push(ManifestEntry {
            slide: slide.ok_or_else(|| err("missing slide=".into()))?,
            labels: labels.ok_or_else(|| err("missing labels=".into()))?,
            split: split.ok_or_else(|| err("missing split=".into()))?,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    write_file(path.as_ref(), text.as_bytes())
}
