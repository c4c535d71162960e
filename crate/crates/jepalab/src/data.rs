//! Image ingestion, procedural synthetic data, patch tokenization, and 2D
//! sin-cos position embeddings.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Token grid dimensions (image height/patch, width/patch).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        GridShape { rows, cols }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// `H x W x 3` pixels in `[0,1]` plus a class index.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Patch tokens of one image together with their position embeddings.
///
/// `patches` holds the raw flattened `P x P x 3` patch rows; the trainer
/// projects them inside the autodiff graph so the projection receives
/// gradients. `tokens` is only materialized by [`patchify`], which applies a
/// fixed projection eagerly.
#[derive(Clone, Debug)]
pub struct TokenizedImage {
    pub patches: Tensor<f32>,
    pub positions: Tensor<f32>,
    pub grid: GridShape,
    pub tokens: Option<Tensor<f32>>,
    pub label: usize,
}

/// 2D sin-cos position table: half the channels encode the row index, half
/// the column index, each as interleaved sin/cos over geometric frequencies
/// with base 10000. Output is `[rows*cols, d]` in raster order.
pub fn sincos_pos_embed(rows: usize, cols: usize, d: usize) -> Result<Tensor<f32>> {
    if d % 4 != 0 {
        return Err(Error::Invalid(format!(
            "position embedding dim {d} must be divisible by 4"
        )));
    }
    let pairs = d / 4;
    let freqs: Vec<f64> = (0..pairs)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / pairs as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r, c] {
                for &w in &freqs {
                    let angle = pos as f64 * w;
                    data.push(angle.sin() as f32);
                    data.push(angle.cos() as f32);
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, d], data)
}

/// Cut an image into raster-ordered `P x P` patches; compute position rows.
/// No learned projection is applied.
pub fn tokenize(image: &LabeledImage, patch: usize, dim: usize) -> Result<TokenizedImage> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let grid = GridShape::new(h / patch, w / patch);
    let t = grid.tokens();
    let plen = patch * patch * 3;
    let px = image.pixels.data();
    let mut patches = Vec::with_capacity(t * plen);
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            for py in 0..patch {
                let y = gr * patch + py;
                for px_i in 0..patch {
                    let x = gc * patch + px_i;
                    let base = (y * w + x) * 3;
                    patches.extend_from_slice(&px[base..base + 3]);
                }
            }
        }
    }
    Ok(TokenizedImage {
        patches: Tensor::new(vec![t, plen], patches)?,
        positions: sincos_pos_embed(grid.rows, grid.cols, dim)?,
        grid,
        tokens: None,
        label: image.label,
    })
}

/// Tokenize and apply a linear patch projection eagerly, adding position
/// embeddings into the tokens. `proj` must hold `patch_proj.w` (`[3P^2, d]`)
/// and `patch_proj.b` (`[1, d]`).
pub fn patchify(image: &LabeledImage, patch: usize, proj: &ParamStore) -> Result<TokenizedImage> {
    let w = proj
        .get("patch_proj.w")
        .ok_or_else(|| Error::Invalid("proj store missing patch_proj.w".into()))?;
    let b = proj
        .get("patch_proj.b")
        .ok_or_else(|| Error::Invalid("proj store missing patch_proj.b".into()))?;
    let dim = w.value.cols();
    let mut img = tokenize(image, patch, dim)?;
    if w.value.rows() != img.patches.cols() {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            details: format!(
                "projection [{}x{}] vs patch rows of {}",
                w.value.rows(),
                w.value.cols(),
                img.patches.cols()
            ),
        });
    }
    let t = img.grid.tokens();
    let mut tokens = vec![0f32; t * dim];
    for (row, out) in img.patches.data().chunks_exact(img.patches.cols()).zip(tokens.chunks_exact_mut(dim)) {
        out.copy_from_slice(b.value.data());
        for (k, &pv) in row.iter().enumerate() {
            let wrow = w.value.row(k);
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += pv * wv;
            }
        }
    }
    for (out, pos) in tokens.chunks_exact_mut(dim).zip(img.positions.data().chunks_exact(dim)) {
        for (o, &p) in out.iter_mut().zip(pos) {
            *o += p;
        }
    }
    img.tokens = Some(Tensor::new(vec![t, dim], tokens)?);
    Ok(img)
}

/// Reassemble pixels from raw patch rows (exact inverse of the extraction in
/// [`tokenize`]).
pub fn un_patchify(patches: &Tensor<f32>, grid: GridShape, patch: usize) -> Result<Tensor<f32>> {
    let plen = patch * patch * 3;
    if patches.shape() != [grid.tokens(), plen] {
        return Err(Error::ShapeMismatch {
            op: "un_patchify",
            details: format!("{:?} vs grid {}x{}", patches.shape(), grid.rows, grid.cols),
        });
    }
    let (h, w) = (grid.rows * patch, grid.cols * patch);
    let mut out = vec![0f32; h * w * 3];
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = patches.row(gr * grid.cols + gc);
            let mut it = row.iter();
            for py in 0..patch {
                let y = gr * patch + py;
                for px_i in 0..patch {
                    let x = gc * patch + px_i;
                    let base = (y * w + x) * 3;
                    for ch in 0..3 {
                        out[base + ch] = *it.next().expect("patch length");
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

pub const SHAPE_CLASSES: [&str; 4] = ["cross", "disk", "square", "triangle"];

fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-purpose rng stream derived from a master seed.
pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed, salt))
}

fn shape_hits(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        // cross
        0 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        // disk
        1 => dx * dx + dy * dy <= r * r,
        // square
        2 => dx.abs() <= r && dy.abs() <= r,
        // triangle (apex up)
        3 => {
            let ty = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&ty) && dx.abs() <= ty * r
        }
        _ => unreachable!("class index"),
    }
}

/// Procedural dataset: colored shapes (class = dominant shape type) over a
/// background whose spatial autocorrelation is set by `corr` (1 = smooth
/// gradients, 0 = per-pixel noise). Deterministic per seed.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    grid_objects: usize,
    corr: f64,
    image_size: usize,
) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| gen_one(splitmix(seed, 0x5e_ed + i as u64), grid_objects, corr, image_size))
        .collect()
}

fn gen_one(seed: u64, grid_objects: usize, corr: f64, size: usize) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (size, size);
    // Smooth component: bilinear interpolation of a 3x3 corner lattice.
    let lattice: Vec<f32> = (0..9 * 3).map(|_| rng.gen::<f32>()).collect();
    let mut pixels = vec![0f32; h * w * 3];
    for y in 0..h {
        let fy = y as f32 / (h - 1) as f32 * 2.0;
        let (gy, ty) = (fy.floor().min(1.0) as usize, fy - fy.floor().min(1.0));
        for x in 0..w {
            let fx = x as f32 / (w - 1) as f32 * 2.0;
            let (gx, tx) = (fx.floor().min(1.0) as usize, fx - fx.floor().min(1.0));
            for ch in 0..3 {
                let at = |r: usize, c: usize| lattice[(r * 3 + c) * 3 + ch];
                let smooth = at(gy, gx) * (1.0 - ty) * (1.0 - tx)
                    + at(gy, gx + 1) * (1.0 - ty) * tx
                    + at(gy + 1, gx) * ty * (1.0 - tx)
                    + at(gy + 1, gx + 1) * ty * tx;
                let noise: f32 = rng.gen();
                pixels[(y * w + x) * 3 + ch] = corr as f32 * smooth + (1.0 - corr as f32) * noise;
            }
        }
    }

    let class = rng.gen_range(0..SHAPE_CLASSES.len());
    if grid_objects > 0 {
        // Distinct placement cells on a square layout; the dominant class
        // keeps a strict plurality of the placed shapes.
        let side = (grid_objects as f64).sqrt().ceil() as usize;
        let mut cells: Vec<usize> = (0..side * side).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let n_dom = grid_objects - (grid_objects - 1) / 2;
        let cell_h = h as f64 / side as f64;
        let cell_w = w as f64 / side as f64;
        for (slot, &cell) in cells.iter().take(grid_objects).enumerate() {
            let shape = if slot < n_dom {
                class
            } else {
                let mut other = rng.gen_range(0..SHAPE_CLASSES.len() - 1);
                if other >= class {
                    other += 1;
                }
                other
            };
            let (cr, cc) = (cell / side, cell % side);
            let min_side = cell_h.min(cell_w);
            let r = rng.gen_range(0.30..0.45) * min_side;
            let cy = (cr as f64 + 0.5 + rng.gen_range(-0.08..0.08)) * cell_h;
            let cx = (cc as f64 + 0.5 + rng.gen_range(-0.08..0.08)) * cell_w;
            let color = [
                rng.gen_range(0.25f32..1.0),
                rng.gen_range(0.25f32..1.0),
                rng.gen_range(0.25f32..1.0),
            ];
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    if shape_hits(shape, dx, dy, r) {
                        let base = (y * w + x) * 3;
                        pixels[base..base + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledImage {
        pixels: Tensor::new(vec![h, w, 3], pixels).expect("pixel buffer length"),
        label: class,
    }
}

/// Write a dataset in the directory-per-class PNG layout.
pub fn export_dataset(images: &[LabeledImage], root: &Path) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        let class = SHAPE_CLASSES
            .get(img.label)
            .ok_or_else(|| Error::Invalid(format!("label {} out of range", img.label)))?;
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (h, w) = (img.height(), img.width());
        let bytes: Vec<u8> = img
            .pixels
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Invalid("pixel buffer size".into()))?;
        let path = dir.join(format!("img_{i:05}.png"));
        buf.save(&path)
            .map_err(|e| Error::Dataset { path, message: e.to_string() })?;
    }
    Ok(())
}

/// Load a directory-per-class PNG tree. Ordering is stable: class names
/// sorted, then file names sorted; labels follow sorted class-name order.
/// Images are resized (shortest side) and center-cropped to `size`.
pub fn load_dataset(root: &Path, size: usize) -> Result<Vec<LabeledImage>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut classes: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            message: "no class directories".into(),
        });
    }
    let mut out = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)
            .map_err(|e| Error::io(class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset {
                path: class_dir.clone(),
                message: "empty class directory".into(),
            });
        }
        for path in files {
            let img = image::open(&path).map_err(|e| Error::Dataset {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let rgb = to_sized_rgb(img, size);
            let pixels: Vec<f32> = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            out.push(LabeledImage {
                pixels: Tensor::new(vec![size, size, 3], pixels)?,
                label,
            });
        }
    }
    Ok(out)
}

fn to_sized_rgb(img: image::DynamicImage, size: usize) -> image::RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width(), rgb.height());
    if (w as usize, h as usize) == (size, size) {
        return rgb;
    }
    let scale = size as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(size as u32);
    let nh = ((h as f64 * scale).round() as u32).max(size as u32);
    let resized = image::imageops::resize(&rgb, nw, nh, image::imageops::FilterType::Triangle);
    let x0 = (nw - size as u32) / 2;
    let y0 = (nh - size as u32) / 2;
    image::imageops::crop_imm(&resized, x0, y0, size as u32, size as u32).to_image()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_norm_is_half_dim() {
        let p = sincos_pos_embed(5, 7, 16).unwrap();
        for r in 0..p.rows() {
            let n2: f32 = p.row(r).iter().map(|v| v * v).sum();
            assert!((n2 - 8.0).abs() < 1e-5, "row {r}: {n2}");
        }
    }

    #[test]
    fn sincos_origin_row() {
        let p = sincos_pos_embed(2, 2, 8).unwrap();
        // row 0 col 0: every sin channel 0, every cos channel 1
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sincos_rejects_bad_dim() {
        assert!(sincos_pos_embed(2, 2, 6).is_err());
    }

    #[test]
    fn sincos_rows_distinct_on_large_grid() {
        let p = sincos_pos_embed(64, 64, 8).unwrap();
        let mut seen = std::collections::HashSet::new();
        for r in 0..p.rows() {
            let key: Vec<u32> = p.row(r).iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "duplicate embedding at row {r}");
        }
    }

    #[test]
    fn tokenize_counts_and_reconstruction() {
        let img = gen_one(42, 3, 0.5, 32);
        let tok = tokenize(&img, 4, 64).unwrap();
        assert_eq!(tok.grid.tokens(), 64);
        let back = un_patchify(&tok.patches, tok.grid, 4).unwrap();
        assert_eq!(back.data(), img.pixels.data());
    }

    #[test]
    fn tokenize_8x8_p4_gives_4_tokens() {
        let img = LabeledImage {
            pixels: Tensor::zeros(vec![8, 8, 3]),
            label: 0,
        };
        let tok = tokenize(&img, 4, 16).unwrap();
        assert_eq!(tok.grid.tokens(), 4);
    }

    #[test]
    fn tokenize_rejects_indivisible() {
        let img = LabeledImage {
            pixels: Tensor::zeros(vec![10, 10, 3]),
            label: 0,
        };
        assert!(tokenize(&img, 4, 16).is_err());
    }

    #[test]
    fn zero_image_zero_proj_tokens_equal_positions() {
        let img = LabeledImage {
            pixels: Tensor::zeros(vec![8, 8, 3]),
            label: 0,
        };
        let mut proj = ParamStore::new();
        proj.add("patch_proj.w", Tensor::zeros(vec![48, 16])).unwrap();
        proj.add("patch_proj.b", Tensor::zeros(vec![1, 16])).unwrap();
        let tok = patchify(&img, 4, &proj).unwrap();
        assert_eq!(tok.tokens.unwrap().data(), tok.positions.data());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(9, 3, 3, 0.7, 16);
        let b = gen_synthetic(9, 3, 3, 0.7, 16);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pixels.data(), y.pixels.data());
        }
        assert!(gen_synthetic(9, 0, 3, 0.7, 16).is_empty());
    }

    #[test]
    fn corr_controls_high_pass_energy() {
        // High-pass energy of the background: pixel minus 3x3 local mean.
        let hp_energy = |img: &LabeledImage| -> f64 {
            let (h, w) = (img.height(), img.width());
            let px = img.pixels.data();
            let mut acc = 0.0;
            let mut count = 0;
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    for ch in 0..3 {
                        let mut local = 0.0f64;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                local += px[((y + dy - 1) * w + (x + dx - 1)) * 3 + ch] as f64;
                            }
                        }
                        let v = px[(y * w + x) * 3 + ch] as f64 - local / 9.0;
                        acc += v * v;
                        count += 1;
                    }
                }
            }
            acc / count as f64
        };
        let smooth = gen_synthetic(5, 8, 0, 1.0, 32);
        let noisy = gen_synthetic(5, 8, 0, 0.0, 32);
        for (s, n) in smooth.iter().zip(&noisy) {
            assert!(hp_energy(s) < hp_energy(n));
        }
    }

    #[test]
    fn positions_are_image_independent() {
        let a = gen_one(1, 2, 0.5, 32);
        let b = gen_one(2, 2, 0.5, 32);
        let ta = tokenize(&a, 4, 64).unwrap();
        let tb = tokenize(&b, 4, 64).unwrap();
        assert_eq!(ta.positions.data(), tb.positions.data());
    }
}
