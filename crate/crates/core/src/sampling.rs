//! Sample grids and latent interpolation strips.
//!
//! A grid is `rows x cols` tiles; every tile is generated in eval mode from
//! its own `(c, v)` pair, and those pairs are kept so that any tile can be
//! regenerated on its own.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ppm_bytes, quantize, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::objectives::interpolate_latent;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::train::ModelBundle;

pub const MAX_GRID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolate {
    Content,
    View,
}

impl std::str::FromStr for Interpolate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Self::Content),
            "view" => Ok(Self::View),
            _ => Err(Error::Invalid(format!("cannot interpolate `{s}` (expected content or view)"))),
        }
    }
}

/// Latents of every tile, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileLatents {
    pub rows: usize,
    pub cols: usize,
    pub content: Vec<Vec<f32>>,
    pub view: Vec<Vec<f32>>,
    /// Dataset indices whose codes gave each row's content, for
    /// conditional models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<usize>>,
}

impl TileLatents {
    pub fn tile(&self, row: usize, col: usize) -> (&[f32], &[f32]) {
        let i = row * self.cols + col;
        (&self.content[i], &self.view[i])
    }
}

fn check_grid(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || rows > MAX_GRID || cols > MAX_GRID {
        return Err(Error::Invalid(format!("grid {rows}x{cols} outside 1x1..{MAX_GRID}x{MAX_GRID}")));
    }
    Ok(())
}

fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f32]>::to_vec).collect()
}

fn normal_rows(r: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    rng::standard_normal(r, n * dim).chunks(dim).map(<[f32]>::to_vec).collect()
}

/// Content codes for `n` rows: prior draws, or encoded test-split images
/// (distinct objects while they last) for conditional models.
fn row_contents(bundle: &ModelBundle, ds: Option<&Dataset>, n: usize, seed: u64) -> Result<(Vec<Vec<f32>>, Option<Vec<usize>>)> {
    let cd = bundle.config.arch.content_dim;
    if bundle.e.is_none() {
        return Ok((normal_rows(&mut rng::stream(seed, "sample/content"), n, cd), None));
    }
    let ds = ds.ok_or_else(|| Error::Invalid(format!("model `{}` needs a dataset to condition on", bundle.kind())))?;
    let mut r = rng::stream(seed, "sample/inputs");
    let objects = ds.objects(Split::Test);
    if objects.is_empty() {
        return Err(Error::Invalid("dataset has no test objects to condition on".into()));
    }
    let mut order: Vec<usize> = (0..objects.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    let inputs: Vec<usize> = (0..n)
        .map(|i| {
            let o = &objects[order[i % order.len()]];
            o.indices[rand::Rng::random_range(&mut r, 0..o.indices.len())]
        })
        .collect();
    let codes = bundle.encode(&ds.batch(&inputs))?;
    Ok((rows_of(&codes), Some(inputs)))
}

/// Row `i` shares content `c_i`; column `j` shares view `v_j` across rows.
pub fn grid_latents(bundle: &ModelBundle, ds: Option<&Dataset>, rows: usize, cols: usize, seed: u64) -> Result<TileLatents> {
    check_grid(rows, cols)?;
    let (c, inputs) = row_contents(bundle, ds, rows, seed)?;
    let v = normal_rows(&mut rng::stream(seed, "sample/view"), cols, bundle.config.arch.view_dim);
    let mut out = TileLatents { rows, cols, content: Vec::new(), view: Vec::new(), inputs };
    for ci in &c {
        for vj in &v {
            out.content.push(ci.clone());
            out.view.push(vj.clone());
        }
    }
    Ok(out)
}

/// Each row walks from one endpoint to another in `steps` tiles, in
/// content (view fixed per row) or in view (content fixed per row).
/// `endpoints` overrides the drawn endpoints of every row.
pub fn interpolation_latents(
    bundle: &ModelBundle,
    ds: Option<&Dataset>,
    mode: Interpolate,
    rows: usize,
    steps: usize,
    seed: u64,
    endpoints: Option<(Vec<f32>, Vec<f32>)>,
) -> Result<TileLatents> {
    check_grid(rows, steps)?;
    let vd = bundle.config.arch.view_dim;
    let mut out = TileLatents { rows, cols: steps, content: Vec::new(), view: Vec::new(), inputs: None };
    match mode {
        Interpolate::Content => {
            let (ends, inputs) = match &endpoints {
                Some((a, b)) => ((0..rows).flat_map(|_| [a.clone(), b.clone()]).collect(), None),
                None => row_contents(bundle, ds, 2 * rows, seed)?,
            };
            let v = normal_rows(&mut rng::stream(seed, "sample/view"), rows, vd);
            for i in 0..rows {
                for c in interpolate_latent(&ends[2 * i], &ends[2 * i + 1], steps)? {
                    out.content.push(c);
                    out.view.push(v[i].clone());
                }
            }
            out.inputs = inputs;
        }
        Interpolate::View => {
            let (c, inputs) = row_contents(bundle, ds, rows, seed)?;
            let ends = match &endpoints {
                Some((a, b)) => (0..rows).flat_map(|_| [a.clone(), b.clone()]).collect(),
                None => normal_rows(&mut rng::stream(seed, "sample/view"), 2 * rows, vd),
            };
            for i in 0..rows {
                for v in interpolate_latent(&ends[2 * i], &ends[2 * i + 1], steps)? {
                    out.content.push(c[i].clone());
                    out.view.push(v);
                }
            }
            out.inputs = inputs;
        }
    }
    let (cd, vd) = (bundle.config.arch.content_dim, vd);
    if out.content.iter().any(|c| c.len() != cd) || out.view.iter().any(|v| v.len() != vd) {
        return Err(Error::Shape(format!("endpoints must have {} entries", if mode == Interpolate::Content { cd } else { vd })));
    }
    Ok(out)
}

/// Generate tiles `[first, first + n)` in one eval-mode batch. Joint
/// generators contribute their first head.
pub fn render_tiles(bundle: &ModelBundle, lat: &TileLatents, first: usize, n: usize) -> Result<Vec<Tensor<f32>>> {
    let (cd, vd) = (bundle.config.arch.content_dim, bundle.config.arch.view_dim);
    let c: Vec<f32> = lat.content[first..first + n].concat();
    let v: Vec<f32> = lat.view[first..first + n].concat();
    let out = bundle.generate(&Tensor::new(&[n, cd], c)?, &Tensor::new(&[n, vd], v)?)?.swap_remove(0);
    let per = out.numel() / n;
    let shape = out.shape()[1..].to_vec();
    (0..n).map(|i| Tensor::new(&shape, out.data()[i * per..(i + 1) * per].to_vec())).collect()
}

pub fn render(bundle: &ModelBundle, lat: &TileLatents) -> Result<Vec<Tensor<f32>>> {
    render_tiles(bundle, lat, 0, lat.rows * lat.cols)
}

/// Quantized planar RGB of the whole grid: `(bytes, height, width)`.
pub fn assemble(tiles: &[Tensor<f32>], rows: usize, cols: usize) -> Result<(Vec<u8>, usize, usize)> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::Shape(format!("{} tiles for a {rows}x{cols} grid", tiles.len())));
    }
    let h = tiles[0].shape()[1];
    let (gh, gw) = (rows * h, cols * h);
    let mut out = vec![0u8; 3 * gh * gw];
    for (t, tile) in tiles.iter().enumerate() {
        if tile.shape() != [3, h, h] {
            return Err(Error::Shape(format!("tile of shape {:?}", tile.shape())));
        }
        let (r0, c0) = ((t / cols) * h, (t % cols) * h);
        for ch in 0..3 {
            for y in 0..h {
                let src = &tile.data()[(ch * h + y) * h..][..h];
                let dst = &mut out[(ch * gh + r0 + y) * gw + c0..][..h];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = quantize(s);
                }
            }
        }
    }
    Ok((out, gh, gw))
}

/// Write planar RGB as PNG (`.png`) or binary PPM (anything else),
/// atomically.
pub fn write_image(path: &Path, chw: &[u8], height: usize, width: usize) -> Result<()> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { png_bytes(chw, height, width)? } else { ppm_bytes(chw, height, width) };
    write_atomic(path, &bytes)
}

fn png_bytes(chw: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    let plane = height * width;
    let rgb: Vec<u8> = (0..plane).flat_map(|i| [chw[i], chw[plane + i], chw[2 * plane + i]]).collect();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Format(format!("png encoding: {e}"));
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&rgb).map_err(fail)?;
    }
    Ok(buf)
}

/// Render a grid straight to an image file.
pub fn write_grid(path: &Path, bundle: &ModelBundle, lat: &TileLatents) -> Result<()> {
    let (bytes, h, w) = assemble(&render(bundle, lat)?, lat.rows, lat.cols)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_image(path, &bytes, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assemble_places_tiles_row_major() {
        let tiles: Vec<Tensor<f32>> = (0..6).map(|i| Tensor::full(&[3, 2, 2], -1.0 + 0.1 * i as f32)).collect();
        let (bytes, h, w) = assemble(&tiles, 2, 3).unwrap();
        assert_eq!((h, w), (4, 6));
        // red plane, row 3, column 5 lies in tile (1, 2)
        assert_eq!(bytes[3 * w + 5], quantize(tiles[5].data()[0]));
        assert_eq!(bytes[h * w], quantize(tiles[0].data()[0]));
        assert!(assemble(&tiles, 2, 2).is_err());
    }

    #[test]
    fn grid_bounds() {
        assert!(check_grid(16, 16).is_ok());
        assert!(check_grid(17, 1).is_err());
        assert!(check_grid(0, 3).is_err());
    }
}
