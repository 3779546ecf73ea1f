//! Disk formats: 8-bit images, 16-bit transmission maps, raw float depth,
//! and side-by-side comparison panels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::image::{Colorspace, ImagePlane};
use crate::scalar::Scalar;

/// Loads an 8-bit PNG or JPEG as a normalized image plane.
/// Grayscale files stay single-channel; everything else becomes RGB.
pub fn load_image<F: Scalar>(path: &Path) -> Result<ImagePlane<F>> {
    let dynimg = image::open(path).map_err(|e| Error::image(path, e))?;
    let (plane, cs) = match dynimg {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                F::from_f64(g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
            });
            (data, Colorspace::Gray)
        }
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            let data = Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                F::from_f64(g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
            });
            (data, Colorspace::Gray)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                F::from_f64(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
            });
            (data, Colorspace::Rgb)
        }
    };
    ImagePlane::new_clipped(plane, cs)
}

/// Saves a plane as an 8-bit PNG (or JPEG, by extension).
pub fn save_image<F: Scalar>(path: &Path, img: &ImagePlane<F>) -> Result<()> {
    let h = img.height() as u32;
    let w = img.width() as u32;
    let quant = |v: F| (Scalar::to_f64(v) * 255.0).round().clamp(0.0, 255.0) as u8;
    match img.colorspace() {
        Colorspace::Gray => {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([quant(img.data()[[y as usize, x as usize, 0]])])
            });
            buf.save(path).map_err(|e| Error::image(path, e))
        }
        Colorspace::Rgb => {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                let p = |c: usize| quant(img.data()[[y as usize, x as usize, c]]);
                Rgb([p(0), p(1), p(2)])
            });
            buf.save(path).map_err(|e| Error::image(path, e))
        }
    }
}

/// Saves a [0, 1] map as a 16-bit grayscale PNG.
pub fn save_map_png16<F: Scalar>(path: &Path, map: &Array2<F>) -> Result<()> {
    let (h, w) = map.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = Scalar::to_f64(map[[y as usize, x as usize]]);
            Luma([(v * 65535.0).round().clamp(0.0, 65535.0) as u16])
        });
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Loads a grayscale PNG (8- or 16-bit) as a [0, 1] map.
pub fn load_map_png16<F: Scalar>(path: &Path) -> Result<Array2<F>> {
    let dynimg = image::open(path).map_err(|e| Error::image(path, e))?;
    match dynimg {
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                F::from_f64(g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
            }))
        }
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                F::from_f64(g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
            }))
        }
        _ => Err(Error::invalid(
            "map load",
            format!("{} is not a grayscale image", path.display()),
        )),
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTF";
const DEPTH_VERSION: u32 = 1;

/// Writes raw depth values as a little-endian f32 container. Unlike the PNG
/// route this keeps exact values, which synthesis reproducibility relies on.
pub fn save_depth<F: Scalar>(path: &Path, depth: &Array2<F>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(DEPTH_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_u32::<LittleEndian>(DEPTH_VERSION)
        .map_err(|e| Error::io(path, e))?;
    let (h, wd) = depth.dim();
    w.write_u32::<LittleEndian>(h as u32).map_err(|e| Error::io(path, e))?;
    w.write_u32::<LittleEndian>(wd as u32).map_err(|e| Error::io(path, e))?;
    for &v in depth.iter() {
        w.write_f32::<LittleEndian>(Scalar::to_f64(v) as f32)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a depth container written by [`save_depth`].
pub fn load_depth_container<F: Scalar>(path: &Path) -> Result<Array2<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != DEPTH_MAGIC {
        return Err(Error::invalid(
            "depth load",
            format!("{} is not a depth container", path.display()),
        ));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != DEPTH_VERSION {
        return Err(Error::invalid(
            "depth load",
            format!("unsupported depth container version {version}"),
        ));
    }
    let h = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        data.push(F::from_f64(
            r.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))? as f64,
        ));
    }
    Array2::from_shape_vec((h, w), data)
        .map_err(|_| Error::invalid("depth load", "container size mismatch"))
}

/// Loads depth from either a `.dpt` container (raw values) or a 16-bit
/// grayscale PNG (relative depth in [0, 1], scaled by `png_scale`).
pub fn load_depth<F: Scalar>(path: &Path, png_scale: f64) -> Result<Array2<F>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dpt") => load_depth_container(path),
        _ => {
            let rel = load_map_png16::<F>(path)?;
            Ok(rel.mapv(|v| v * F::from_f64(png_scale)))
        }
    }
}

/// Stitches equally sized planes into one horizontal comparison panel,
/// separated by thin white gutters. Grayscale planes are expanded to RGB so
/// mixed panels stay valid.
pub fn save_panel<F: Scalar>(path: &Path, planes: &[&ImagePlane<F>]) -> Result<()> {
    let first = planes.first().ok_or_else(|| Error::EmptyDataset {
        context: "panel".to_string(),
    })?;
    let (h, w) = (first.height(), first.width());
    const GAP: usize = 4;
    let total_w = planes.len() * w + (planes.len() - 1) * GAP;
    let mut canvas = Array3::<F>::from_elem((h, total_w, 3), F::one());
    for (i, plane) in planes.iter().enumerate() {
        if (plane.height(), plane.width()) != (h, w) {
            return Err(Error::shape(
                "panel",
                &[h, w],
                &[plane.height(), plane.width()],
            ));
        }
        let x0 = i * (w + GAP);
        let mut window = canvas.slice_mut(ndarray::s![.., x0..x0 + w, ..]);
        match plane.colorspace() {
            Colorspace::Rgb => window.assign(plane.data()),
            Colorspace::Gray => {
                let g = plane.data().index_axis(Axis(2), 0);
                for c in 0..3 {
                    window.index_axis_mut(Axis(2), c).assign(&g);
                }
            }
        }
    }
    let panel = ImagePlane::new_clipped(canvas, Colorspace::Rgb)?;
    save_image(path, &panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn png8_round_trip_within_quantization() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("img.png");
        let data = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| {
            ((y * 7 + x) as f32 * 0.02 + c as f32 * 0.1).min(1.0)
        });
        let img = ImagePlane::new_clipped(data, Colorspace::Rgb).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image::<f32>(&path).unwrap();
        assert_eq!(back.colorspace(), Colorspace::Rgb);
        for (a, b) in back.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn png16_map_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("t.png");
        let map = Array2::from_shape_fn((4, 6), |(y, x)| (y as f64 * 6.0 + x as f64) / 30.0);
        save_map_png16(&path, &map).unwrap();
        let back = load_map_png16::<f64>(&path).unwrap();
        for (a, b) in back.iter().zip(map.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-9);
        }
    }

    #[test]
    fn depth_container_is_lossless_for_f32() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.dpt");
        let depth = Array2::from_shape_fn((3, 3), |(y, x)| (y * 3 + x) as f32 * 1.37 + 0.25);
        save_depth(&path, &depth).unwrap();
        let back = load_depth_container::<f32>(&path).unwrap();
        assert_eq!(back, depth);
    }

    #[test]
    fn panel_stitches_and_rejects_mismatch() {
        let dir = TempDir::new().unwrap();
        let a = ImagePlane::<f32>::constant(4, 4, &[0.2, 0.4, 0.6], Colorspace::Rgb).unwrap();
        let b = ImagePlane::<f32>::constant(4, 4, &[0.5], Colorspace::Gray).unwrap();
        save_panel(&dir.path().join("p.png"), &[&a, &b]).unwrap();
        let loaded = load_image::<f32>(&dir.path().join("p.png")).unwrap();
        assert_eq!(loaded.width(), 12);
        assert_eq!(loaded.height(), 4);
        let c = ImagePlane::<f32>::constant(3, 4, &[0.5], Colorspace::Gray).unwrap();
        assert!(save_panel(&dir.path().join("q.png"), &[&a, &c]).is_err());
    }
}
