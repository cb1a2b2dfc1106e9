//! Binary images on disk (PGM and PNG, dark ink on white) and report
//! figures.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use super::{io_err, HarnessError};
use crate::geometry::Spline;
use crate::render::{BinaryImage, CanvasSize};

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), HarnessError> {
    let bad = |m: &str| HarnessError::Image(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not text"))?.to_string());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit maps are supported"));
    }
    let scale = |v: usize| (v * 255 / max) as u8;
    let data = match fields[0].as_str() {
        "P5" => {
            let body = bytes.get(i + 1..i + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?;
            body.iter().map(|&v| scale(v as usize)).collect()
        }
        "P2" => {
            let text = std::str::from_utf8(&bytes[i..]).map_err(|_| bad("body is not text"))?;
            let vals: Vec<u8> = text.split_ascii_whitespace().map(|t| num(t).map(scale)).collect::<Result<_, _>>()?;
            if vals.len() < w * h {
                return Err(bad("truncated pixel data"));
            }
            vals[..w * h].to_vec()
        }
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    Ok((w, h, data))
}

/// Reads a PGM or PNG; pixels darker than mid-gray are ink.
pub fn read_image(path: &Path, canvas: CanvasSize) -> Result<BinaryImage, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, gray) = if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        parse_pgm(&bytes)?
    } else {
        let img = image::load_from_memory(&bytes).map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))?.to_luma8();
        (img.width() as usize, img.height() as usize, img.into_raw())
    };
    if (w, h) != (canvas.width, canvas.height) {
        return Err(HarnessError::Image(format!("{}: {w}x{h} image, expected {}x{}", path.display(), canvas.width, canvas.height)));
    }
    BinaryImage::new(canvas, gray.iter().map(|&v| (v < 128) as u8).collect()).map_err(|e| HarnessError::Image(e.to_string()))
}

fn gray(image: &BinaryImage) -> GrayImage {
    let s = image.size();
    GrayImage::from_fn(s.width as u32, s.height as u32, |x, y| Luma([if image.get(y as usize, x as usize) { 0 } else { 255 }]))
}

pub fn write_pgm(path: &Path, image: &BinaryImage) -> Result<(), HarnessError> {
    let s = image.size();
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(gray(image).into_raw());
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<(), HarnessError> {
    image.save_with_format(path, ImageFormat::Png).map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))
}

/// PNG for `.png` paths, PGM otherwise.
pub fn write_image(path: &Path, image: &BinaryImage) -> Result<(), HarnessError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        gray(image).save_with_format(path, ImageFormat::Png).map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))
    } else {
        write_pgm(path, image)
    }
}

const PAD: u32 = 4;

/// Tiles images row-major with `cols` per row; `boxed` cells get a red
/// frame.
pub fn grid_image(images: &[BinaryImage], cols: usize, boxed: &[usize]) -> RgbImage {
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let size = images.first().map_or(CanvasSize::default(), |i| i.size());
    let (cw, ch) = (size.width as u32 + PAD, size.height as u32 + PAD);
    let mut out = RgbImage::from_pixel(cols as u32 * cw + PAD, rows as u32 * ch + PAD, Rgb([200, 200, 200]));
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = (PAD + (k % cols) as u32 * cw, PAD + (k / cols) as u32 * ch);
        for y in 0..size.height {
            for x in 0..size.width {
                let v = if img.get(y, x) { 0 } else { 255 };
                out.put_pixel(ox + x as u32, oy + y as u32, Rgb([v, v, v]));
            }
        }
        if boxed.contains(&k) {
            let (w, h) = (size.width as u32, size.height as u32);
            for t in 0..w + 2 {
                out.put_pixel(ox - 1 + t, oy - 1, Rgb([220, 0, 0]));
                out.put_pixel(ox - 1 + t, oy + h, Rgb([220, 0, 0]));
            }
            for t in 0..h + 2 {
                out.put_pixel(ox - 1, oy - 1 + t, Rgb([220, 0, 0]));
                out.put_pixel(ox + w, oy - 1 + t, Rgb([220, 0, 0]));
            }
        }
    }
    out
}

const PALETTE: [[u8; 3]; 6] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

/// The image in light gray with each stroke drawn in its own color and its
/// start marked by a dark dot.
pub fn overlay_strokes(image: &BinaryImage, strokes: &[Spline]) -> RgbImage {
    let s = image.size();
    let mut out = RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        if image.get(y as usize, x as usize) {
            Rgb([190, 190, 190])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let mut plot = |x: f64, y: f64, c: [u8; 3]| {
        let (xi, yi) = (x.round(), y.round());
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < s.width && (yi as usize) < s.height {
            out.put_pixel(xi as u32, yi as u32, Rgb(c));
        }
    };
    for (i, sp) in strokes.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let n = (sp.polygon_length() * 2.0).ceil().max(16.0) as usize;
        for p in sp.sample(n).0 {
            plot(p.x, p.y, c);
        }
        let st = sp.control_points()[0];
        for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)] {
            plot(st.x + dx, st.y + dy, [0, 0, 0]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BinaryImage {
        let s = CanvasSize::default();
        BinaryImage::new(s, (0..s.pixels()).map(|i| (i % 7 == 0) as u8).collect()).unwrap()
    }

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample();
        for name in ["a.pgm", "a.png"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p, img.size()).unwrap(), img);
        }
    }

    #[test]
    fn ascii_pgm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        fs::write(&p, "P2\n# tiny\n2 1\n15\n0 15\n").unwrap();
        let img = read_image(&p, CanvasSize::new(2, 1)).unwrap();
        assert_eq!(img.bits(), &[1, 0]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        write_pgm(&p, &sample()).unwrap();
        assert!(read_image(&p, CanvasSize::new(28, 28)).is_err());
    }

    #[test]
    fn grid_has_one_cell_per_image() {
        let g = grid_image(&[sample(), sample(), sample(), sample()], 3, &[0]);
        assert_eq!((g.width(), g.height()), (3 * 109 + 4, 2 * 109 + 4));
        assert_eq!(g.get_pixel(3, 3), &Rgb([220, 0, 0]));
    }
}
