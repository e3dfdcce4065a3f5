//! Frame storage: a directory of numbered PNG frames, or one raw `VOFR` file
//! (`"VOFR"`, u32 LE `T H W C`, then `T*H*W*C` bytes).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{MediaError, VideoClip};

pub const VOFR_MAGIC: &[u8; 4] = b"VOFR";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MediaError + '_ {
    move |source| MediaError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> MediaError {
    MediaError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn encode_vofr(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + clip.pixels().len());
    out.extend_from_slice(VOFR_MAGIC);
    for dim in [clip.num_frames(), clip.height(), clip.width(), clip.channels()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(clip.pixels());
    out
}

pub fn decode_vofr(clip_id: &str, bytes: &[u8]) -> Result<VideoClip, MediaError> {
    let path = Path::new(clip_id);
    if bytes.len() < 20 || &bytes[..4] != VOFR_MAGIC {
        return Err(format_err(path, "missing VOFR header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let payload = &bytes[20..];
    let expected = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| format_err(path, "dimensions overflow"))?;
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload of {} bytes for {t}x{h}x{w}x{c}", payload.len()),
        ));
    }
    VideoClip::new(clip_id, t, h, w, c, payload.to_vec())
}

pub fn write_vofr(path: &Path, clip: &VideoClip) -> Result<(), MediaError> {
    fs::write(path, encode_vofr(clip)).map_err(io_err(path))
}

pub fn read_vofr(path: &Path, clip_id: &str) -> Result<VideoClip, MediaError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_vofr(clip_id, &bytes).map_err(|e| match e {
        MediaError::Format { detail, .. } => format_err(path, detail),
        other => other,
    })
}

/// Writes `00000.png`, `00001.png`, ... into `dir`.
pub fn write_png_dir(dir: &Path, clip: &VideoClip) -> Result<(), MediaError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for t in 0..clip.num_frames() {
        let path = dir.join(format!("{t:05}.png"));
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), clip.width() as u32, clip.height() as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| format_err(&path, e.to_string()))?;
        writer
            .write_image_data(clip.frame(t))
            .map_err(|e| format_err(&path, e.to_string()))?;
        writer.finish().map_err(|e| format_err(&path, e.to_string()))?;
    }
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>), MediaError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let raw = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => raw.to_vec(),
        png::ColorType::Rgba => raw.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => raw.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => raw.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok((h, w, rgb))
}

/// Reads every `*.png` in `dir`, sorted by file name.
pub fn read_png_dir(dir: &Path, clip_id: &str) -> Result<VideoClip, MediaError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MediaError::EmptyClip(clip_id.to_string()));
    }
    let mut dims = None;
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let (h, w, rgb) = read_png(f)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(format_err(f, format!("frame is {h}x{w}, expected {}x{}", d.0, d.1)))
            }
            _ => {}
        }
        frames.push(rgb);
    }
    let (h, w) = dims.expect("at least one frame");
    VideoClip::from_frames(clip_id, &frames, h, w)
}

/// Directory of PNGs or a `VOFR` file, by what `path` is.
pub fn load_frames(path: &Path, clip_id: &str) -> Result<VideoClip, MediaError> {
    if path.is_dir() {
        read_png_dir(path, clip_id)
    } else {
        read_vofr(path, clip_id)
    }
}

pub fn write_all(path: &Path, bytes: &[u8]) -> Result<(), MediaError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}
