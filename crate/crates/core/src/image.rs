//! Dense row-major images with interleaved channels, plus 8-bit PNG/PGM I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode error on {path}: {message}")]
    Decode { path: String, message: String },
    #[error("png encode error on {path}: {message}")]
    Encode { path: String, message: String },
    #[error("malformed PGM file {path}: {message}")]
    MalformedPgm { path: String, message: String },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("unsupported image extension for {0} (expected .png or .pgm)")]
    UnsupportedExtension(String),
}

/// A `rows × cols × channels` image of `f64` samples, interleaved per pixel.
///
/// Photos and patches hold values in `[0, 1]`; the same type also carries
/// gradients, which are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![value; rows * cols * channels],
        }
    }

    /// Wraps interleaved data. Panics if the length does not match the shape.
    pub fn from_vec(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols * channels,
            "data length does not match {rows}x{cols}x{channels}"
        );
        Self {
            rows,
            cols,
            channels,
            data,
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            rows,
            cols,
            channels,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(rows, cols)`
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.cols + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    /// Mean over channels, producing a single-channel image.
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / n)
            .collect();
        ImageTensor::from_vec(self.rows, self.cols, 1, data)
    }

    /// Replicates a single-channel image into `channels` identical channels.
    pub fn replicate_channels(&self, channels: usize) -> ImageTensor {
        assert_eq!(self.channels, 1, "replicate_channels expects a gray image");
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, channels));
        }
        ImageTensor::from_vec(self.rows, self.cols, channels, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn dot(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Values quantized to 8 bits with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(rows: usize, cols: usize, channels: usize, bytes: &[u8]) -> Self {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_vec(rows, cols, channels, data)
    }
}

/// Maps `[0, 1]` to `{0..255}`, rounding half up. Out-of-range values saturate.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a PNG or PGM image based on the file extension.
pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    match extension(path).as_deref() {
        Some("png") => load_png(path),
        Some("pgm") => load_pgm(path),
        _ => Err(ImageError::UnsupportedExtension(path.display().to_string())),
    }
}

/// Saves as PNG or PGM based on the file extension. PGM output is grayscale.
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<(), ImageError> {
    match extension(path).as_deref() {
        Some("png") => save_png(image, path, &PngMetadata::default()),
        Some("pgm") => save_pgm(&image.to_gray(), path),
        _ => Err(ImageError::UnsupportedExtension(path.display().to_string())),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Optional PNG ancillary data written alongside the pixels.
#[derive(Debug, Clone, Default)]
pub struct PngMetadata {
    pub dots_per_inch: Option<f64>,
    pub text: Vec<(String, String)>,
}

pub fn load_png(path: &Path) -> Result<ImageTensor, ImageError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let decode = |e: png::DecodingError| ImageError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(decode)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Decode {
            path: path.display().to_string(),
            message: "image too large".into(),
        })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode)?;
    let (rows, cols) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    // Alpha is dropped; colour management is out of scope.
    let (channels, keep): (usize, usize) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(ImageError::Decode {
                path: path.display().to_string(),
                message: "palette images are not expanded".into(),
            })
        }
    };
    let data: Vec<u8> = bytes
        .chunks_exact(channels)
        .flat_map(|px| px[..keep].iter().copied())
        .collect();
    Ok(ImageTensor::from_u8(rows, cols, keep, &data))
}

pub fn save_png(image: &ImageTensor, path: &Path, meta: &PngMetadata) -> Result<(), ImageError> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(ImageError::UnsupportedChannels(n)),
    };
    let encode = |e: png::EncodingError| ImageError::Encode {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.cols() as u32,
        image.rows() as u32,
    );
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    if let Some(dpi) = meta.dots_per_inch {
        let ppm = (dpi / 0.0254).round() as u32;
        encoder.set_pixel_dims(Some(png::PixelDimensions {
            xppu: ppm,
            yppu: ppm,
            unit: png::Unit::Meter,
        }));
    }
    for (key, value) in &meta.text {
        encoder
            .add_text_chunk(key.clone(), value.clone())
            .map_err(encode)?;
    }
    let mut writer = encoder.write_header().map_err(encode)?;
    writer.write_image_data(&image.to_u8()).map_err(encode)?;
    writer.finish().map_err(encode)
}

/// Reads the pHYs chunk of a PNG as dots per inch, if present in metres.
pub fn read_png_dpi(path: &Path) -> Result<Option<f64>, ImageError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    Ok(reader.info().pixel_dims.and_then(|d| match d.unit {
        png::Unit::Meter => Some(d.xppu as f64 * 0.0254),
        png::Unit::Unspecified => None,
    }))
}

pub fn save_pgm(image: &ImageTensor, path: &Path) -> Result<(), ImageError> {
    if image.channels() != 1 {
        return Err(ImageError::UnsupportedChannels(image.channels()));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", image.cols(), image.rows()).map_err(|e| io_err(path, e))?;
    w.write_all(&image.to_u8()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads binary (`P5`) or ASCII (`P2`) PGM with maxval up to 255.
pub fn load_pgm(path: &Path) -> Result<ImageTensor, ImageError> {
    let malformed = |message: &str| ImageError::MalformedPgm {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    // magic, width, height, maxval
    while header.len() < 4 {
        let token = read_token(&mut reader).map_err(|e| io_err(path, e))?;
        match token {
            Some(t) => header.push(t),
            None => return Err(malformed("truncated header")),
        }
    }
    let binary = match header[0].as_str() {
        "P5" => true,
        "P2" => false,
        _ => return Err(malformed("bad magic")),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| malformed("bad header field"))
    };
    let cols = parse(&header[1])?;
    let rows = parse(&header[2])?;
    let maxval = parse(&header[3])?;
    if maxval == 0 || maxval > 255 {
        return Err(malformed("maxval must be in 1..=255"));
    }
    let n = rows * cols;
    let mut raw = Vec::with_capacity(n);
    if binary {
        let mut buf = vec![0u8; n];
        reader
            .read_exact(&mut buf)
            .map_err(|_| malformed("truncated pixel data"))?;
        raw.extend(buf.into_iter().map(|b| b as usize));
    } else {
        for _ in 0..n {
            let token = read_token(&mut reader)
                .map_err(|e| io_err(path, e))?
                .ok_or_else(|| malformed("truncated pixel data"))?;
            raw.push(parse(&token)?);
        }
    }
    if raw.iter().any(|&v| v > maxval) {
        return Err(malformed("sample exceeds maxval"));
    }
    let data = raw.into_iter().map(|v| v as f64 / maxval as f64).collect();
    Ok(ImageTensor::from_vec(rows, cols, 1, data))
}

/// Next whitespace-delimited header token, skipping `#` comments. After the
/// token exactly one whitespace byte is consumed, as PGM requires.
fn read_token<R: BufRead>(reader: &mut R) -> std::io::Result<Option<String>> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Ok((!token.is_empty()).then_some(token));
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut line = Vec::new();
            reader.read_until(b'\n', &mut line)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(Some(token));
        }
        token.push(b as char);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 rounds up
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(1.7), 255);
    }

    #[test]
    fn png_and_pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let gray = ImageTensor::from_fn(7, 5, 1, |r, c, _| (r * 5 + c) as f64 / 34.0);
        let rgb = ImageTensor::from_fn(4, 6, 3, |r, c, ch| ((r + c + ch) % 5) as f64 / 4.0);
        for (img, name) in [(&gray, "g.png"), (&gray, "g.pgm"), (&rgb, "c.png")] {
            let path = dir.path().join(name);
            save_image(img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert_eq!(back.channels(), img.channels());
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ascii_pgm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        std::fs::write(&path, "P2\n# comment\n2 1\n10\n0 10\n").unwrap();
        let img = load_pgm(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(
            load_pgm(&path),
            Err(ImageError::MalformedPgm { .. })
        ));
    }

    #[test]
    fn dpi_metadata_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let meta = PngMetadata {
            dots_per_inch: Some(300.0),
            text: vec![("Comment".into(), "hello".into())],
        };
        save_png(&ImageTensor::zeros(2, 2, 1), &path, &meta).unwrap();
        let dpi = read_png_dpi(&path).unwrap().unwrap();
        assert!((dpi - 300.0).abs() < 0.05);
    }
}
