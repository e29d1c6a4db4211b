//! Binary PGM/PPM (P5/P6) images, image directories and reconstruction grids.

use std::path::Path;

use super::{unit_to_byte, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a P5 or P6 file as `[C, H, W]` in `[0, 1]`.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, path)
}

fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |offset: usize, reason: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, reason };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(err(0, "expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "expected a decimal header field".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, format!("maxval {maxval} unsupported (1..=255)")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "missing whitespace after header".into()));
    }
    pos += 1;
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| err(bytes.len(), format!("raster truncated: need {n} bytes after offset {pos}")))?;
    // interleaved → planar
    let mut data = vec![0.0; n];
    for (i, &b) in raster.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * w * h + pix] = b as f64 / maxval as f64;
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Writes `[C, H, W]` (C = 1 or 3) as P5/P6 with maxval 255, clamping to `[0, 1]`.
pub fn write_pnm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape("write_pnm", "[1 or 3, H, W]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for pix in 0..h * w {
        for ch in 0..c {
            out.push(unit_to_byte(image.data()[ch * h * w + pix]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of `[C, H, W]` with pixel-centre alignment.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "non-empty [C, H, W]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(src_len - 1), x - lo as f64)
    };
    let src = image.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = coord(y, h, out_h);
            for x in 0..out_w {
                let (x0, x1, fx) = coord(x, w, out_w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

fn to_channels(img: Tensor, c: usize) -> Result<Tensor> {
    let s = img.shape().to_vec();
    let plane = s[1] * s[2];
    match (s[0], c) {
        (a, b) if a == b => Ok(img),
        (1, 3) => Tensor::new(vec![3, s[1], s[2]], img.data().repeat(3)),
        (3, 1) => {
            let d = img.data();
            Tensor::new(vec![1, s[1], s[2]], (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0).collect())
        }
        _ => Err(Error::shape("load_image_dir", format!("{c} channels"), format!("{:?}", s))),
    }
}

/// Per-class subfolders of PGM/PPM files; labels follow sorted folder names.
/// Every image is resized to `target_size`², with the channel count of the
/// first readable image.
pub fn load_image_dir(dir: impl AsRef<Path>, target_size: usize) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let sorted = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let classes: Vec<_> = sorted(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    let (mut images, mut labels, mut channels) = (Vec::new(), Vec::new(), None);
    for (label, class_dir) in classes.iter().enumerate() {
        for file in sorted(class_dir)? {
            let img = match read_pnm(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    continue;
                }
            };
            let c = *channels.get_or_insert(img.shape()[0]);
            let img = resize_bilinear(&to_channels(img, c)?, target_size, target_size)?;
            images.push(img);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("no readable PGM/PPM images under {}", dir.display())));
    }
    let parts: Vec<&Tensor> = images.iter().collect();
    let stacked = Tensor::concat_rows(&parts)?;
    let c = channels.unwrap_or(1);
    let stacked = stacked.reshape(&[images.len(), c, target_size, target_size])?;
    let name = dir.file_name().map_or("images".into(), |n| n.to_string_lossy().into_owned());
    LabeledDataset::new(name, stacked, labels, classes.len().max(1))
}

/// Tiles `(N, C, H, W)` row-major into `cols` columns with 1-pixel white
/// separators (including the outer border) and writes PGM or PPM.
pub fn write_image_grid(images: &Tensor, path: impl AsRef<Path>, cols: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 || cols == 0 {
        return Err(Error::shape("write_image_grid", "[N>0, C, H, W] and cols > 0", format!("{s:?}, cols {cols}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut grid = vec![1.0; c * gh * gw];
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        let img = images.row(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid[ch * gh * gw + (oy + y) * gw + ox + x] = img[ch * h * w + y * w + x].clamp(0.0, 1.0);
                }
            }
        }
    }
    write_pnm(path, &Tensor::new(vec![c, gh, gw], grid)?)
}
