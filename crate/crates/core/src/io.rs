//! Netpbm I/O: frames as binary PPM (P6), label maps and diagnostic maps as
//! binary PGM (P5), and the on-disk dataset layout
//! `video_xxx/frames/%05d.ppm`, `video_xxx/masks/%05d.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(buf: &[u8], pos: usize) -> Result<(usize, usize)> {
    let pos = skip_space_and_comments(buf, pos);
    let end = buf[pos..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(buf.len(), |n| pos + n);
    if end == pos {
        return Err(parse_err(pos, "expected an unsigned integer"));
    }
    let s = std::str::from_utf8(&buf[pos..end]).expect("ascii digits");
    let v = s.parse::<usize>().map_err(|_| parse_err(pos, "integer out of range"))?;
    Ok((v, end))
}

fn parse_header(buf: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(parse_err(0, format!("expected magic `{}`", String::from_utf8_lossy(magic))));
    }
    let (width, pos) = read_uint(buf, 2)?;
    let (height, pos) = read_uint(buf, pos)?;
    let at = skip_space_and_comments(buf, pos);
    let (maxval, pos) = read_uint(buf, pos)?;
    if maxval != 255 {
        return Err(parse_err(at, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "image has no pixels"));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(parse_err(pos, "expected one whitespace byte before the raster"));
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

fn raster<'a>(buf: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = buf.len() - h.data_start;
    if have < need {
        return Err(parse_err(buf.len(), format!("raster truncated: {have} of {need} bytes")));
    }
    if have > need {
        return Err(parse_err(h.data_start + need, "trailing bytes after the raster"));
    }
    Ok(&buf[h.data_start..])
}

/// `3×H×W` tensor with values in `[0, 1]` to P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::Input(format!("PPM needs a 3×H×W tensor, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    let hd = parse_header(buf, b"P6")?;
    let px = raster(buf, &hd, 3)?;
    let n = hd.width * hd.height;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = f64::from(px[3 * p + c]) / 255.0;
        }
    }
    Tensor::new(vec![3, hd.height, hd.width], data)
}

/// Label map (one byte per pixel) to P5 bytes.
pub fn encode_pgm(pixels: &[u8], (h, w): (usize, usize)) -> Result<Vec<u8>> {
    if pixels.len() != h * w || pixels.is_empty() {
        return Err(Error::dim("PGM", &[h, w], &[pixels.len()]));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Returns the pixels and `(height, width)`.
pub fn decode_pgm(buf: &[u8]) -> Result<(Vec<u8>, (usize, usize))> {
    let hd = parse_header(buf, b"P5")?;
    Ok((raster(buf, &hd, 1)?.to_vec(), (hd.height, hd.width)))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    at_path(path, decode_ppm(&read(path)?))
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    write(path, &encode_ppm(img)?)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, (usize, usize))> {
    at_path(path, decode_pgm(&read(path)?))
}

pub fn write_pgm(path: &Path, pixels: &[u8], size: (usize, usize)) -> Result<()> {
    write(path, &encode_pgm(pixels, size)?)
}

/// Writes a real-valued `H×W` map scaled to `[0, 255]` and a sidecar
/// `<path>.txt` holding `min max`.
pub fn write_scaled_map(path: &Path, values: &[f64], size: (usize, usize)) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let px: Vec<u8> = values
        .iter()
        .map(|v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    write_pgm(path, &px, size)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    write(Path::new(&side), format!("{lo:e} {hi:e}\n").as_bytes())
}

/// One video on disk. `labels` holds the masks that exist, in frame order;
/// a missing mask file leaves `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDir {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub labels: Vec<Option<Vec<u8>>>,
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

pub fn frame_path(video: &Path, t: usize) -> PathBuf {
    video.join("frames").join(frame_name(t, "ppm"))
}

pub fn mask_path(video: &Path, t: usize) -> PathBuf {
    video.join("masks").join(frame_name(t, "pgm"))
}

/// Writes frames and the given label maps (`labels[t]` for frame `t`).
pub fn write_video(dir: &Path, frames: &[Tensor], labels: &[Vec<u8>]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        write_ppm(&frame_path(dir, t), f)?;
    }
    for (t, l) in labels.iter().enumerate() {
        let s = frames.get(t).map(|f| (f.shape()[1], f.shape()[2]));
        let s = s.ok_or_else(|| Error::Input(format!("label map {t} has no frame")))?;
        write_pgm(&mask_path(dir, t), l, s)?;
    }
    Ok(())
}

/// Reads `frames/00000.ppm, 00001.ppm, …` until the first gap, and the mask
/// of each frame when present.
pub fn read_video(dir: &Path) -> Result<VideoDir> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let first = frame_path(dir, 0);
    if !first.exists() {
        return Err(Error::io(&first, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut t = 0;
    while frame_path(dir, t).exists() {
        let f = read_ppm(&frame_path(dir, t))?;
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let mp = mask_path(dir, t);
        labels.push(if mp.exists() {
            let (px, size) = read_pgm(&mp)?;
            if size != (h, w) {
                return Err(Error::Input(format!("{}: mask size differs from frame", mp.display())));
            }
            Some(px)
        } else {
            None
        });
        frames.push(f);
        t += 1;
    }
    Ok(VideoDir {
        name,
        frames,
        labels,
    })
}

/// Subdirectories of `root` named `video_*`, sorted by name.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let is_video = entry.file_name().to_string_lossy().starts_with("video_");
        if is_video && path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
