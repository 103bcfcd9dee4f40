//! 8-bit RGB PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use grin::net::SPATIAL_MULTIPLE;
use grin::{Shape4, Tensor4};
use log::warn;

#[derive(Debug)]
pub struct ImageError(pub String);

impl std::fmt::Display for ImageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ImageError {}

/// Decodes any PNG to a `(1, 3, H, W)` tensor in `[0, 1]`. Alpha is dropped
/// and grey is replicated across channels.
pub fn read_png(path: &Path) -> Result<Tensor4, ImageError> {
    let err = |e: &dyn std::fmt::Display| ImageError(format!("cannot read {}: {e}", path.display()));
    let file = File::open(path).map_err(|e| err(&e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| err(&e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| err(&"image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| err(&e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(err(&"palette was not expanded")),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(err(&format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let mut t = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * stride..];
            for c in 0..3 {
                let v = if stride < 3 { px[0] } else { px[c] };
                t.set(0, c, y, x, v as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// `[0, 1]` to `0..=255` with clamping and round-half-up.
pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes sample 0 of `img` as 8-bit RGB.
pub fn write_png(path: &Path, img: &Tensor4) -> Result<(), ImageError> {
    let err = |e: &dyn std::fmt::Display| ImageError(format!("cannot write {}: {e}", path.display()));
    let s = img.shape();
    if s.c != 3 {
        return Err(err(&format!("expected 3 channels, got {s}")));
    }
    let mut data = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data.push(to_byte(img.get(0, c, y, x)));
            }
        }
    }
    let file = File::create(path).map_err(|e| err(&e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| err(&e))?;
    writer.write_image_data(&data).map_err(|e| err(&e))?;
    writer.finish().map_err(|e| err(&e))?;
    Ok(())
}

/// Nearest multiple of the encoder's spatial factor, at least one factor.
pub fn fitted_size(n: usize) -> usize {
    let m = SPATIAL_MULTIPLE;
    (((n + m / 2) / m) * m).max(m)
}

/// Nearest-neighbour resample of every sample to `h × w`.
pub fn resize_nearest(img: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let s = img.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let sy = ((y as f64 + 0.5) * s.h as f64 / h as f64) as usize;
                for x in 0..w {
                    let sx = ((x as f64 + 0.5) * s.w as f64 / w as f64) as usize;
                    out.set(n, c, y, x, img.get(n, c, sy.min(s.h - 1), sx.min(s.w - 1)));
                }
            }
        }
    }
    out
}

/// Reads a PNG and resizes it when a side is not a multiple of the encoder
/// factor, with a notice.
pub fn read_fitted(path: &Path) -> Result<Tensor4, ImageError> {
    let img = read_png(path)?;
    let s = img.shape();
    let (h, w) = (fitted_size(s.h), fitted_size(s.w));
    if (h, w) == (s.h, s.w) {
        return Ok(img);
    }
    warn!(
        "{}: {}x{} is not a multiple of {SPATIAL_MULTIPLE}, resized to {w}x{h}",
        path.display(),
        s.w,
        s.h
    );
    Ok(resize_nearest(&img, h, w))
}
