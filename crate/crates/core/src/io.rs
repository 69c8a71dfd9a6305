//! File formats: PFM float maps, PNG images and masks, ASCII PLY point clouds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{MultiGrid, NormalGrid, PointCloud, ScalarGrid, ValidMask};

/// Raw PFM content: interleaved samples, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn from_grid(grid: &ScalarGrid) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            data: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_normals(normals: &NormalGrid) -> Self {
        Self {
            width: normals.width(),
            height: normals.height(),
            channels: 3,
            data: normals.vectors().iter().flat_map(|v| v.map(|x| x as f32)).collect(),
        }
    }

    pub fn into_grid(self) -> Result<ScalarGrid> {
        if self.channels != 1 {
            return Err(Error::Format(format!("expected 1-channel PFM, got {}", self.channels)));
        }
        ScalarGrid::new(self.width, self.height, self.data.into_iter().map(f64::from).collect())
    }

    pub fn into_normals(self) -> Result<NormalGrid> {
        if self.channels != 3 {
            return Err(Error::Format(format!("expected 3-channel PFM, got {}", self.channels)));
        }
        let vectors = self
            .data
            .chunks_exact(3)
            .map(|c| [f64::from(c[0]), f64::from(c[1]), f64::from(c[2])])
            .collect();
        NormalGrid::from_unoriented(self.width, self.height, vectors)
    }
}

/// Writes little-endian PFM (negative scale), rows bottom-up.
pub fn write_pfm_to(w: &mut impl Write, img: &PfmImage) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        n => return Err(Error::Format(format!("PFM supports 1 or 3 channels, got {n}"))),
    };
    write!(w, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    let row_len = img.width * img.channels;
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for row in img.data.chunks_exact(row_len).rev() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_pfm(path: impl AsRef<Path>, img: &PfmImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pfm_to(&mut w, img)?;
    w.flush()?;
    Ok(())
}

fn read_header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PFM header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

pub fn read_pfm_from(r: &mut impl BufRead) -> Result<PfmImage> {
    let channels = match read_header_token(r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad PFM {what}: {s:?}")))
    };
    let width = parse(read_header_token(r)?, "width")?;
    let height = parse(read_header_token(r)?, "height")?;
    let scale_tok = read_header_token(r)?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be non-zero".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PFM with zero dimension".into()));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("PFM payload shorter than {n} samples")))?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = width * channels;
    let data = values.chunks_exact(row_len).rev().flatten().copied().collect();
    Ok(PfmImage { width, height, channels, data })
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage> {
    read_pfm_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_pfm_grid(path: impl AsRef<Path>) -> Result<ScalarGrid> {
    read_pfm(path)?.into_grid()
}

pub fn write_pfm_grid(path: impl AsRef<Path>, grid: &ScalarGrid) -> Result<()> {
    write_pfm(path, &PfmImage::from_grid(grid))
}

pub fn read_pfm_normals(path: impl AsRef<Path>) -> Result<NormalGrid> {
    read_pfm(path)?.into_normals()
}

pub fn write_pfm_normals(path: impl AsRef<Path>, normals: &NormalGrid) -> Result<()> {
    write_pfm(path, &PfmImage::from_normals(normals))
}

/// Reads an 8- or 16-bit grayscale PNG; each sample becomes `raw * scale`.
pub fn read_png_gray(path: impl AsRef<Path>, scale: f64) -> Result<ScalarGrid> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    ScalarGrid::new(w as usize, h as usize, img.pixels().map(|p| f64::from(p.0[0]) * scale).collect())
}

/// Writes a 16-bit grayscale PNG storing `round(value / scale)`.
pub fn write_png_gray16(path: impl AsRef<Path>, grid: &ScalarGrid, scale: f64) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let v = grid.get(y as usize, x as usize) / scale;
        Luma([v.round().clamp(0.0, 65535.0) as u16])
    });
    DynamicImage::ImageLuma16(img).save(path)?;
    Ok(())
}

/// Any non-zero sample is a valid pixel.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<ValidMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    ValidMask::new(w as usize, h as usize, img.pixels().map(|p| p.0[0] != 0).collect())
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &ValidMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.is_valid(y as usize * mask.width() + x as usize) { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Loads an RGB PNG as a 3-channel grid with values in `[0, 1]`.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<MultiGrid> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f64::from(p.0[c]) / 255.0;
        }
    }
    MultiGrid::new(3, w, h, data)
}

pub fn rgb_to_bytes(rgb: &MultiGrid, idx: usize) -> [u8; 3] {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let n = rgb.width() * rgb.height();
    let d = rgb.data();
    [to_u8(d[idx]), to_u8(d[n + idx]), to_u8(d[2 * n + idx])]
}

pub fn write_rgb_png(path: impl AsRef<Path>, rgb: &MultiGrid) -> Result<()> {
    if rgb.channels() != 3 {
        return Err(Error::InvalidArgument(format!("RGB PNG needs 3 channels, got {}", rgb.channels())));
    }
    let w = rgb.width();
    let img = RgbImage::from_fn(w as u32, rgb.height() as u32, |x, y| {
        image::Rgb(rgb_to_bytes(rgb, y as usize * w + x as usize))
    });
    img.save(path)?;
    Ok(())
}

pub fn write_ply_to(w: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if let Some(colors) = &cloud.colors {
        if colors.len() != cloud.points.len() {
            return Err(Error::InvalidArgument("color count differs from point count".into()));
        }
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        if let Some(colors) = &cloud.colors {
            let c = colors[i];
            write!(w, " {} {} {}", c[0], c[1], c[2])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_to(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn pfm_header_layout() {
        let g = ScalarGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_pfm_to(&mut buf, &PfmImage::from_grid(&g)).unwrap();
        assert!(buf.starts_with(b"Pf\n2 2\n-1.0\n"));
        let payload = &buf[12..];
        // Bottom row first.
        assert_eq!(&payload[0..4], &3.0f32.to_le_bytes());
        assert_eq!(&payload[12..16], &2.0f32.to_le_bytes());
    }

    #[test]
    fn reads_big_endian_pfm() {
        let mut buf = b"Pf\n1 2\n1.0\n".to_vec();
        buf.extend_from_slice(&7.5f32.to_be_bytes());
        buf.extend_from_slice(&(-1.25f32).to_be_bytes());
        let img = read_pfm_from(&mut Cursor::new(buf)).unwrap();
        assert_eq!(img.data, vec![-1.25, 7.5]);
    }

    #[test]
    fn truncated_pfm_is_format_error() {
        let buf = b"Pf\n4 4\n-1.0\n\0\0\0\0".to_vec();
        assert!(matches!(read_pfm_from(&mut Cursor::new(buf)), Err(Error::Format(_))));
        let buf = b"P6\n4 4\n-1.0\n".to_vec();
        assert!(matches!(read_pfm_from(&mut Cursor::new(buf)), Err(Error::Format(_))));
    }

    #[test]
    fn three_channel_normals_round_trip() {
        let n = NormalGrid::from_unoriented(2, 1, vec![[0.0, 0.6, -0.8], [0.0, 0.0, -1.0]]).unwrap();
        let mut buf = Vec::new();
        write_pfm_to(&mut buf, &PfmImage::from_normals(&n)).unwrap();
        assert!(buf.starts_with(b"PF\n"));
        let back = read_pfm_from(&mut Cursor::new(buf)).unwrap().into_normals().unwrap();
        for (a, b) in n.vectors().iter().zip(back.vectors()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn png_mask_and_gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = ValidMask::from_fn(5, 3, |r, c| (r + c) % 2 == 0);
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);

        let g = ScalarGrid::from_fn(4, 3, |r, c| (r * 4 + c) as f64 * 0.5).unwrap();
        let p = dir.path().join("g.png");
        write_png_gray16(&p, &g, 0.5).unwrap();
        assert_eq!(read_png_gray(&p, 0.5).unwrap(), g);
    }

    #[test]
    fn ply_header_with_colors() {
        let cloud = PointCloud { points: vec![[0.0, 1.0, 2.0]], colors: Some(vec![[1, 2, 3]]) };
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &cloud).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("element vertex 1\n"));
        assert!(text.contains("property uchar red\n"));
        assert!(text.ends_with("end_header\n0 1 2 1 2 3\n"));
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(w in 1usize..6, h in 1usize..6, vals in proptest::collection::vec(-1e6f32..1e6, 36)) {
            let data: Vec<f64> = vals[..w * h].iter().map(|&v| f64::from(v)).collect();
            let g = ScalarGrid::new(w, h, data).unwrap();
            let mut buf = Vec::new();
            write_pfm_to(&mut buf, &PfmImage::from_grid(&g)).unwrap();
            let back = read_pfm_from(&mut Cursor::new(buf)).unwrap().into_grid().unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
