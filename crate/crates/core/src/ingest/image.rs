//! 8-bit RGB images: binary PPM read/write, PNG read, conversion to tensors,
//! bilinear resizing and per-channel standardization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, Preprocess};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::CorruptImage("truncated pixmap header".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::CorruptImage("non-ASCII pixmap header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| Error::CorruptImage(format!("bad header field `{t}`")))
    }
}

/// Decodes a binary (P6) portable pixmap with maxval up to 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::UnsupportedFormat("not a binary P6 pixmap".into()));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if width == 0 || height == 0 {
        return Err(Error::CorruptImage("zero-sized pixmap".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("pixmap maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = r.pos + 1;
    let len = width * height * 3;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::CorruptImage(format!("raster holds fewer than {len} bytes")))?;
    let data = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    Ok(RgbImage { width, height, data })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Binary (P5) graymap.
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::CorruptImage(e.to_string()))?
            .to_rgb8();
        Ok(RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    } else {
        Err(Error::UnsupportedFormat("expected a P6 pixmap or PNG".into()))
    }
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes PNG for `.png` paths and binary PPM otherwise.
pub fn write_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_png(path) {
        encode_png(img.width, img.height, &img.data, image::ExtendedColorType::Rgb8)?
    } else {
        encode_ppm(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes PNG for `.png` paths and binary PGM otherwise.
pub fn write_gray(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_png(path) {
        encode_png(width, height, gray, image::ExtendedColorType::L8)?
    } else {
        encode_pgm(width, height, gray)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(width: usize, height: usize, data: &[u8], color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| Error::CorruptImage(e.to_string()))?;
    Ok(out)
}

/// `(1, 3, H, W)` tensor with values in `[0, 1]`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0f32; 3 * w * h];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("sized")
}

/// Source coordinates and weight for output index `dst` with half-pixel centres.
#[inline]
fn sample_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize of a row-major `h × w` plane.
pub fn resize_plane(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let cols: Vec<_> = (0..ow).map(|x| sample_axis(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, h, oh);
        for &(x0, x1, fx) in &cols {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear resize (half-pixel centres, edge clamping) of every channel.
pub fn resize_bilinear(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = input.shape();
    if (s.h(), s.w()) == (oh, ow) {
        return input.clone();
    }
    let mut data = Vec::with_capacity(s.n() * s.c() * oh * ow);
    for plane in input.data().chunks_exact(s.h() * s.w()) {
        let p: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        data.extend(resize_plane(&p, s.h(), s.w(), oh, ow).into_iter().map(|v| v as f32));
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), oh, ow), data).expect("sized")
}

/// Resizes to `(h, w)` and standardizes each channel.
pub fn preprocess(image: &Tensor, pre: &Preprocess, (h, w): (usize, usize)) -> Result<Tensor> {
    let s = image.shape();
    if s.c() != pre.mean.len() {
        return Err(Error::ShapeMismatch {
            op: "preprocess",
            left: s,
            right: Shape::new(1, pre.mean.len(), h, w),
        });
    }
    let mut out = resize_bilinear(image, h, w);
    let plane = h * w;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s.c();
        *v = ((*v as f64 - pre.mean[c] as f64) / pre.std[c] as f64) as f32;
    }
    Ok(out)
}

/// Decodes an image file into a `[0, 1]` tensor at its native size.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(to_tensor(&read_rgb(path)?))
}

/// Decodes and preprocesses an image for `model`.
pub fn load_for_model(path: impl AsRef<Path>, model: &Model) -> Result<Tensor> {
    let [_, h, w] = model.graph().input_shape;
    preprocess(&load_image(path)?, &model.graph().preprocess, (h, w))
}
