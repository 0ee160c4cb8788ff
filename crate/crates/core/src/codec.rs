//! Images, patches and patch codes.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major; a patch of side `a` is a
//! vector of `a * a` values with index `i * a + j` for row `i`, column `j`.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::approx::{lsqr_solve, FeatureMatrix, LeastSquaresReport, LsqrOptions, StopReason};
use crate::container::{self, Kind};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: String,
    pub side: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(id: impl Into<String>, side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::Shape {
                expected: side * side,
                got: pixels.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            side,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }
}

fn fft2(buf: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    fft.process(buf);
    let mut t = vec![Complex::new(0.0, 0.0); n * n];
    transpose::transpose(buf, &mut t, n, n);
    fft.process(&mut t);
    transpose::transpose(&t, buf, n, n);
}

mod transpose {
    pub fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
}

/// Gaussian random field with a `1/f` amplitude spectrum, min-max scaled to
/// `[0, 1]`.
pub fn synthesize_image(seed: u64, side: usize) -> Image {
    let mut r = rng::seeded(seed);
    let mut buf: Vec<Complex<f64>> = (0..side * side)
        .map(|_| Complex::new(r.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    if side > 1 {
        fft2(&mut buf, side, false);
        for u in 0..side {
            let fu = u.min(side - u) as f64;
            for v in 0..side {
                let fv = v.min(side - v) as f64;
                let f = (fu * fu + fv * fv).sqrt();
                buf[u * side + v] *= if f > 0.0 { 1.0 / f } else { 0.0 };
            }
        }
        fft2(&mut buf, side, true);
    }
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let lo = re.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = re.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = re
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Image {
        id: format!("synthetic:{seed}"),
        side,
        pixels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ImageSource {
    Synthetic { seed: u64 },
    Files { paths: Vec<PathBuf> },
}

/// Loads `count` images cropped to `side x side`, or synthesises them with
/// image `i` drawn from stream `i` of the seed.
pub fn load_or_synthesize_images(source: &ImageSource, count: usize, side: usize) -> Result<Vec<Image>> {
    match source {
        ImageSource::Synthetic { seed } => Ok((0..count)
            .into_par_iter()
            .map(|i| {
                let s = rng::stream(*seed, i as u64).random::<u64>();
                let mut img = synthesize_image(s, side);
                img.id = format!("synthetic:{seed}:{i}");
                img
            })
            .collect()),
        ImageSource::Files { paths } => {
            if paths.len() < count {
                return Err(Error::Config(format!("{count} images requested, {} given", paths.len())));
            }
            paths[..count].iter().map(|p| load_image(p, Some(side))).collect()
        }
    }
}

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Reads a graymap (8 or 16 bit, or anything the decoder can convert to
/// gray) or a raw `.f64` plane with its `.hdr` sidecar. With `crop`, the
/// centred `crop x crop` square is kept; without it the image must be
/// square.
pub fn load_image(path: &Path, crop: Option<usize>) -> Result<Image> {
    let (rows, cols, pixels) = if path.extension().is_some_and(|e| e == "f64") {
        read_raw(path)?
    } else {
        let img = image::ImageReader::open(path)
            .map_err(|e| ingest(path, e.to_string()))?
            .with_guessed_format()
            .map_err(|e| ingest(path, e.to_string()))?
            .decode()
            .map_err(|e| ingest(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<f64> = match img {
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
            other => other
                .to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| f64::from(v) / 65535.0)
                .collect(),
        };
        (h, w, pixels)
    };
    let side = match crop {
        Some(s) if rows < s || cols < s => {
            return Err(ingest(path, format!("{cols}x{rows} is smaller than the {s}x{s} crop")))
        }
        Some(s) => s,
        None if rows != cols => return Err(ingest(path, format!("{cols}x{rows} is not square"))),
        None => rows,
    };
    let (r0, c0) = ((rows - side) / 2, (cols - side) / 2);
    let mut out = Vec::with_capacity(side * side);
    for r in r0..r0 + side {
        out.extend_from_slice(&pixels[r * cols + c0..r * cols + c0 + side]);
    }
    Image::new(path.display().to_string(), side, out)
}

fn read_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let header = fs::read_to_string(sidecar(path)).map_err(|e| ingest(path, format!("sidecar: {e}")))?;
    let mut rows = None;
    let mut cols = None;
    for line in header.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match (k.trim(), v.trim()) {
            ("format", f) if f != "f64le" => return Err(ingest(path, format!("unsupported format {f}"))),
            ("rows", v) => rows = v.parse::<usize>().ok(),
            ("cols", v) => cols = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (Some(rows), Some(cols)) = (rows, cols) else {
        return Err(ingest(path, "sidecar needs rows and cols"));
    };
    let mut reader = BufReader::new(fs::File::open(path).map_err(|e| ingest(path, e.to_string()))?);
    let pixels = container::read_f64s(&mut reader, rows * cols).map_err(|e| ingest(path, e.to_string()))?;
    Ok((rows, cols, pixels))
}

/// Writes a raw little-endian `f64` plane and its sidecar header.
pub fn write_raw_image(image: &Image, path: &Path) -> Result<()> {
    fs::write(
        sidecar(path),
        format!("format = f64le\nrows = {0}\ncols = {0}\n", image.side),
    )?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    container::write_f64s(&mut w, &image.pixels)?;
    w.flush()?;
    Ok(())
}

/// Writes a 16-bit binary graymap.
pub fn write_pgm16(image: &Image, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{0} {0}\n65535\n", image.side)?;
    for &v in &image.pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PatchOrigin {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// Non-overlapping square patches, stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    side: usize,
    data: Vec<f64>,
    origins: Vec<PatchOrigin>,
}

impl PatchSet {
    pub fn empty(side: usize) -> Self {
        Self {
            side,
            data: Vec::new(),
            origins: Vec::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn origins(&self) -> &[PatchOrigin] {
        &self.origins
    }

    pub fn append(&mut self, other: PatchSet) {
        assert_eq!(self.side, other.side, "patch sides differ");
        self.data.extend(other.data);
        self.origins.extend(other.origins);
    }

    pub fn to_features(&self) -> FeatureMatrix {
        FeatureMatrix::new(self.len(), self.dim(), self.data.clone()).expect("consistent patch storage")
    }
}

/// `floor(side / a)^2` tiles of side `a` in raster order.
pub fn extract_patches(image: &Image, a: usize) -> Result<PatchSet> {
    extract_patches_indexed(image, 0, a)
}

fn extract_patches_indexed(image: &Image, index: usize, a: usize) -> Result<PatchSet> {
    if a == 0 || a > image.side {
        return Err(Error::Ingest {
            path: PathBuf::from(&image.id),
            reason: format!("patch side {a} does not fit a {0}x{0} image", image.side),
        });
    }
    let g = image.side / a;
    let mut data = Vec::with_capacity(g * g * a * a);
    let mut origins = Vec::with_capacity(g * g);
    for gr in 0..g {
        for gc in 0..g {
            let (r0, c0) = (gr * a, gc * a);
            for r in r0..r0 + a {
                data.extend_from_slice(&image.pixels[r * image.side + c0..r * image.side + c0 + a]);
            }
            origins.push(PatchOrigin {
                image: index,
                row: r0,
                col: c0,
            });
        }
    }
    Ok(PatchSet { side: a, data, origins })
}

/// Patches of every image, image by image.
pub fn extract_all(images: &[Image], a: usize) -> Result<PatchSet> {
    let mut set = PatchSet::empty(a);
    for (i, img) in images.iter().enumerate() {
        set.append(extract_patches_indexed(img, i, a)?);
    }
    Ok(set)
}

/// Smallest `a` with `factor * a^2 > floor(side / a)^2`.
pub fn choose_patch_side(side: usize, factor: u64) -> Result<usize> {
    if factor == 0 {
        return Err(Error::Config("code factor must be at least 1".into()));
    }
    (1..=side)
        .find(|&a| {
            let g = (side / a) as u128;
            u128::from(factor) * (a as u128).pow(2) > g * g
        })
        .ok_or_else(|| Error::Infeasible(format!("no patch side for image side {side} and factor {factor}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitenOptions {
    pub epsilon: f64,
    /// Scale by `1/sqrt(lambda + epsilon)`; rotation only when false.
    pub rescale: bool,
}

impl Default for WhitenOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-10,
            rescale: true,
        }
    }
}

/// `y = W (x - mean)` with `W = diag(s) V^T` from the patch covariance.
#[derive(Clone, Debug)]
pub struct Whitener {
    pub mean: Vec<f64>,
    /// Eigenvalues in the order of the rows of `transform`.
    pub eigenvalues: Vec<f64>,
    pub transform: DMatrix<f64>,
    pub options: WhitenOptions,
}

impl Whitener {
    /// Fits on the patches using the unbiased covariance.
    pub fn fit(patches: &PatchSet, options: WhitenOptions) -> Result<Self> {
        let n = patches.len();
        if n < 2 {
            return Err(Error::NotEnoughPatches { needed: 2, available: n });
        }
        let d = patches.dim();
        let x = DMatrix::from_row_slice(n, d, patches.data());
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let mut centered = x;
        for (j, m) in mean.iter().enumerate() {
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut transform = DMatrix::zeros(d, d);
        let mut eigenvalues = Vec::with_capacity(d);
        for (row, &k) in order.iter().enumerate() {
            let lambda = eig.eigenvalues[k];
            let s = if options.rescale {
                1.0 / (lambda.max(0.0) + options.epsilon).sqrt()
            } else {
                1.0
            };
            for j in 0..d {
                transform[(row, j)] = s * eig.eigenvectors[(j, k)];
            }
            eigenvalues.push(lambda);
        }
        Ok(Self {
            mean,
            eigenvalues,
            transform,
            options,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Components whose eigenvalue exceeds `1e-8` of the largest.
    pub fn retained(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues.iter().filter(|&&l| l > 1e-8 * top).count()
    }

    pub fn apply(&self, patch: &[f64]) -> Result<Vec<f64>> {
        if patch.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: patch.len(),
            });
        }
        let centered: Vec<f64> = patch.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.dim())
            .map(|r| self.transform.row(r).iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn apply_all(&self, patches: &[f64]) -> Result<FeatureMatrix> {
        let d = self.dim();
        let rows: Vec<Vec<f64>> = patches.par_chunks(d).map(|p| self.apply(p)).collect::<Result<_>>()?;
        FeatureMatrix::from_rows(&rows)
    }
}

/// Fits a whitener on the set and returns the complete codes of its patches.
pub fn whiten(patches: &PatchSet, options: WhitenOptions) -> Result<(Whitener, FeatureMatrix)> {
    let w = Whitener::fit(patches, options)?;
    let codes = w.apply_all(patches.data())?;
    Ok((w, codes))
}

/// Gaussian copula with Pareto marginals for `(sigma_x, sigma_y, lambda)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaConfig {
    pub rho: f64,
    /// `(alpha, beta)` for `sigma_x`, `sigma_y`, `lambda`.
    pub pareto: [(f64, f64); 3],
}

impl Default for CopulaConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            pareto: [(2.0, 1.0); 3],
        }
    }
}

impl CopulaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("copula rho must lie in (0, 1], got {}", self.rho)));
        }
        for (a, b) in self.pareto {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Config(format!("invalid Pareto parameters ({a}, {b})")));
            }
        }
        Ok(())
    }
}

/// Standard normal upper tail `1 - Phi(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(x: f64) -> f64 {
    normal_sf(-x)
}

/// Pareto inverse CDF evaluated at `Phi(z)`, written with the upper tail to
/// keep precision for large `z`.
fn pareto_of_normal(z: f64, alpha: f64, beta: f64) -> f64 {
    beta / normal_sf(z).powf(1.0 / alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub orientation: f64,
    pub phase: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub lambda: f64,
    pub x0: f64,
    pub y0: f64,
}

impl GaborParams {
    pub const FIELDS: [&'static str; 7] = ["orientation", "phase", "sigma_x", "sigma_y", "lambda", "x0", "y0"];

    fn to_array(self) -> [f64; 7] {
        [
            self.orientation,
            self.phase,
            self.sigma_x,
            self.sigma_y,
            self.lambda,
            self.x0,
            self.y0,
        ]
    }

    fn from_array(v: &[f64]) -> Self {
        Self {
            orientation: v[0],
            phase: v[1],
            sigma_x: v[2],
            sigma_y: v[3],
            lambda: v[4],
            x0: v[5],
            y0: v[6],
        }
    }

    /// Atom value at pixel `(i, j)`.
    pub fn eval(&self, i: f64, j: f64) -> f64 {
        let (di, dj) = (i - self.x0, j - self.y0);
        let (s, c) = self.orientation.sin_cos();
        let it = c * di - s * dj;
        let jt = s * di + c * dj;
        let envelope = (-0.5 * (it * it / (self.sigma_x * self.sigma_x) + jt * jt / (self.sigma_y * self.sigma_y))).exp();
        envelope * (std::f64::consts::TAU / self.lambda * jt + self.phase).cos()
    }
}

/// Draws `count` atoms for patches of side `a`. Per atom, in order: one
/// normal `z` shared by the three spatial parameters, orientation in
/// `[0, pi)`, phase in `[0, 2 pi)`, then the centre in `[0, a-1]^2`.
pub fn sample_gabor_params(seed: u64, count: usize, a: usize, copula: &CopulaConfig) -> Result<Vec<GaborParams>> {
    copula.validate()?;
    let mut r = rng::seeded(seed);
    let span = a.saturating_sub(1) as f64;
    let [(a1, b1), (a2, b2), (a3, b3)] = copula.pareto;
    Ok((0..count)
        .map(|_| {
            let z: f64 = r.sample(StandardNormal);
            let orientation = r.random::<f64>() * std::f64::consts::PI;
            let phase = r.random::<f64>() * std::f64::consts::TAU;
            let x0 = r.random::<f64>() * span;
            let y0 = r.random::<f64>() * span;
            GaborParams {
                orientation,
                phase,
                sigma_x: pareto_of_normal(z, a1, b1),
                sigma_y: pareto_of_normal(z, a2, b2),
                lambda: pareto_of_normal(copula.rho * z, a3, b3),
                x0,
                y0,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMeta {
    pub copula: CopulaConfig,
    pub seed: Option<u64>,
}

/// Dense `d x m` dictionary; column `r'` is atom `r'` on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborDictionary {
    side: usize,
    params: Vec<GaborParams>,
    matrix: DMatrix<f64>,
    pub meta: DictionaryMeta,
}

/// Evaluates every atom on the `a x a` grid with unit amplitude.
pub fn build_dictionary(params: &[GaborParams], a: usize) -> GaborDictionary {
    let d = a * a;
    let cols: Vec<f64> = params
        .par_iter()
        .flat_map_iter(|p| (0..d).map(move |r| p.eval((r / a) as f64, (r % a) as f64)))
        .collect();
    GaborDictionary {
        side: a,
        params: params.to_vec(),
        matrix: DMatrix::from_vec(d, params.len(), cols),
        meta: DictionaryMeta {
            copula: CopulaConfig::default(),
            seed: None,
        },
    }
}

impl GaborDictionary {
    /// `factor * a^2` atoms drawn from `seed`.
    pub fn sample(seed: u64, a: usize, factor: usize, copula: &CopulaConfig) -> Result<Self> {
        let params = sample_gabor_params(seed, factor * a * a, a, copula)?;
        let mut dict = build_dictionary(&params, a);
        dict.meta = DictionaryMeta {
            copula: *copula,
            seed: Some(seed),
        };
        Ok(dict)
    }

    /// A dictionary with explicit columns and no atom parameters.
    pub fn from_matrix(side: usize, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != side * side {
            return Err(Error::Shape {
                expected: side * side,
                got: matrix.nrows(),
            });
        }
        Ok(Self {
            side,
            params: Vec::new(),
            matrix,
            meta: DictionaryMeta {
                copula: CopulaConfig::default(),
                seed: None,
            },
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn atoms(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn overcompleteness(&self) -> f64 {
        self.atoms() as f64 / self.dim() as f64
    }

    pub fn params(&self) -> &[GaborParams] {
        &self.params
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn apply(&self, code: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, col) in code.iter().zip(self.matrix.column_iter()) {
            if *c != 0.0 {
                for (o, g) in out.iter_mut().zip(col.iter()) {
                    *o += c * g;
                }
            }
        }
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        for (o, col) in out.iter_mut().zip(self.matrix.column_iter()) {
            *o = col.iter().zip(y).map(|(g, v)| g * v).sum();
        }
    }

    /// Writes the dictionary in the versioned container: side, atoms,
    /// copula, seed flag and seed, the `m x 7` parameter table, then the
    /// column-major matrix.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_header(w, Kind::Dictionary)?;
        container::write_u64(w, self.side as u64)?;
        container::write_u64(w, self.atoms() as u64)?;
        let c = &self.meta.copula;
        container::write_f64s(w, &[c.rho, c.pareto[0].0, c.pareto[0].1, c.pareto[1].0, c.pareto[1].1, c.pareto[2].0, c.pareto[2].1])?;
        container::write_u64(w, u64::from(self.meta.seed.is_some()))?;
        container::write_u64(w, self.meta.seed.unwrap_or(0))?;
        container::write_u64(w, self.params.len() as u64)?;
        for p in &self.params {
            container::write_f64s(w, &p.to_array())?;
        }
        container::write_f64s(w, self.matrix.as_slice())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        container::read_header(r, Kind::Dictionary)?;
        let side = container::read_len(r, 1 << 16)?;
        let atoms = container::read_len(r, 1 << 32)?;
        let c = container::read_f64s(r, 7)?;
        let copula = CopulaConfig {
            rho: c[0],
            pareto: [(c[1], c[2]), (c[3], c[4]), (c[5], c[6])],
        };
        let has_seed = container::read_u64(r)? != 0;
        let seed = container::read_u64(r)?;
        let n_params = container::read_len(r, atoms as u64)?;
        let table = container::read_f64s(r, n_params * 7)?;
        let params = table.chunks(7).map(GaborParams::from_array).collect();
        let matrix = DMatrix::from_vec(side * side, atoms, container::read_f64s(r, side * side * atoms)?);
        Ok(Self {
            side,
            params,
            matrix,
            meta: DictionaryMeta {
                copula,
                seed: has_seed.then_some(seed),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }

    /// One CSV row per atom with the seven parameters.
    pub fn write_params_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["atom"];
        header.extend(GaborParams::FIELDS);
        w.write_record(&header)?;
        for (i, p) in self.params.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(p.to_array().iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SparseCode {
    pub coefficients: Vec<f64>,
    /// `|G code - patch|_2`.
    pub residual_norm: f64,
    pub report: LeastSquaresReport,
}

/// Minimum-norm least-squares code of `patch`.
pub fn encode(dict: &GaborDictionary, patch: &[f64], tol: f64, max_iter: usize) -> Result<SparseCode> {
    if patch.len() != dict.dim() {
        return Err(Error::Shape {
            expected: dict.dim(),
            got: patch.len(),
        });
    }
    let (coefficients, report) = lsqr_solve(
        dict.atoms(),
        |x, y| dict.apply(x, y),
        |y, x| dict.apply_t(y, x),
        patch,
        &LsqrOptions::new(tol, max_iter),
    )?;
    let mut recon = vec![0.0; dict.dim()];
    dict.apply(&coefficients, &mut recon);
    let residual_norm = recon.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if report.stop == StopReason::IterationLimit {
        return Err(Error::IterationLimit {
            iterations: report.iterations,
            residual: report.residual,
            best: coefficients,
        });
    }
    Ok(SparseCode {
        coefficients,
        residual_norm,
        report,
    })
}

/// Codes of every patch, one row each.
pub fn encode_all(dict: &GaborDictionary, patches: &[f64], tol: f64, max_iter: usize) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f64>> = patches
        .par_chunks(dict.dim())
        .map(|p| encode(dict, p, tol, max_iter).map(|c| c.coefficients))
        .collect::<Result<_>>()?;
    FeatureMatrix::from_rows(&rows)
}

/// `G code`.
pub fn decode(dict: &GaborDictionary, code: &[f64]) -> Result<Vec<f64>> {
    if code.len() != dict.atoms() {
        return Err(Error::Shape {
            expected: dict.atoms(),
            got: code.len(),
        });
    }
    let mut out = vec![0.0; dict.dim()];
    dict.apply(code, &mut out);
    Ok(out)
}

/// Keys cubic kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Interpolation weights for enlarging `n` samples by integer `scale`, with
/// pixel-centre alignment and replicated edges.
fn cubic_weights(n: usize, scale: usize) -> Vec<[(usize, f64); 4]> {
    (0..n * scale)
        .map(|o| {
            let x = (o as f64 + 0.5) / scale as f64 - 0.5;
            let left = x.floor() as i64 - 1;
            let mut taps = [(0usize, 0.0); 4];
            for (t, tap) in taps.iter_mut().enumerate() {
                let k = left + t as i64;
                *tap = (k.clamp(0, n as i64 - 1) as usize, cubic(x - k as f64));
            }
            taps
        })
        .collect()
}

/// Bicubic enlargement of an `a x a` patch to `(s a) x (s a)`, where
/// `pixel_factor = s^2`. The map is linear; no clamping is applied.
pub fn upscale_patch(patch: &[f64], a: usize, pixel_factor: usize) -> Result<Vec<f64>> {
    let s = (pixel_factor as f64).sqrt().round() as usize;
    if s == 0 || s * s != pixel_factor {
        return Err(Error::Config(format!("upscale factor {pixel_factor} is not a perfect square")));
    }
    if patch.len() != a * a {
        return Err(Error::Shape {
            expected: a * a,
            got: patch.len(),
        });
    }
    let w = cubic_weights(a, s);
    let big = a * s;
    let mut rows = vec![0.0; a * big];
    for r in 0..a {
        for (c, taps) in w.iter().enumerate() {
            rows[r * big + c] = taps.iter().map(|&(k, wt)| wt * patch[r * a + k]).sum();
        }
    }
    let mut out = vec![0.0; big * big];
    for (r, taps) in w.iter().enumerate() {
        for c in 0..big {
            out[r * big + c] = taps.iter().map(|&(k, wt)| wt * rows[k * big + c]).sum();
        }
    }
    Ok(out)
}

/// Input representation for the linear value network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Representation {
    Raw,
    /// Bicubic enlargement to `k` times as many pixels.
    Upscaled(usize),
    Whitened,
    /// Code over `k d` Gabor atoms.
    Sparse(usize),
    OneHot,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Raw => write!(f, "raw"),
            Self::Upscaled(k) => write!(f, "upscaled:{k}"),
            Self::Whitened => write!(f, "whitened"),
            Self::Sparse(k) => write!(f, "sparse:{k}"),
            Self::OneHot => write!(f, "onehot"),
        }
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown representation {s:?}"));
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => (n, Some(k.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (name, k) {
            ("raw", None) => Ok(Self::Raw),
            ("whitened", None) => Ok(Self::Whitened),
            ("onehot", None) => Ok(Self::OneHot),
            ("upscaled", Some(k)) if k >= 1 => Ok(Self::Upscaled(k)),
            ("sparse", Some(k)) if k >= 1 => Ok(Self::Sparse(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Representation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Representation> for String {
    fn from(r: Representation) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationOptions {
    pub dictionary_seed: u64,
    pub copula: CopulaConfig,
    pub whiten: WhitenOptions,
    /// Relative residual for sparse encodings.
    pub encode_tol: f64,
    /// LSQR cap per encoding; `50 m` when absent.
    pub encode_max_iter: Option<usize>,
}

impl Default for RepresentationOptions {
    fn default() -> Self {
        Self {
            dictionary_seed: 0,
            copula: CopulaConfig::default(),
            whiten: WhitenOptions::default(),
            encode_tol: 1e-10,
            encode_max_iter: None,
        }
    }
}

/// Features of `patches` (back to back, side `a`). Whitening is fitted on
/// `library`, the full patch collection.
pub fn represent(kind: Representation, library: &PatchSet, patches: &[f64], opts: &RepresentationOptions) -> Result<FeatureMatrix> {
    let a = library.side();
    let d = a * a;
    if d == 0 || !patches.len().is_multiple_of(d) {
        return Err(Error::Shape {
            expected: d,
            got: patches.len(),
        });
    }
    let n = patches.len() / d;
    match kind {
        Representation::Raw => FeatureMatrix::new(n, d, patches.to_vec()),
        Representation::OneHot => Ok(FeatureMatrix::identity(n)),
        Representation::Upscaled(k) => {
            let rows: Vec<Vec<f64>> = patches
                .par_chunks(d)
                .map(|p| upscale_patch(p, a, k))
                .collect::<Result<_>>()?;
            FeatureMatrix::from_rows(&rows)
        }
        Representation::Whitened => Whitener::fit(library, opts.whiten)?.apply_all(patches),
        Representation::Sparse(k) => {
            let dict = GaborDictionary::sample(opts.dictionary_seed, a, k, &opts.copula)?;
            let cap = opts.encode_max_iter.unwrap_or(50 * dict.atoms());
            encode_all(&dict, patches, opts.encode_tol, cap)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let img = synthesize_image(1, 152);
        assert_eq!(extract_patches(&img, 19).unwrap().len(), 64);
        let img = synthesize_image(2, 40);
        assert_eq!(extract_patches(&img, 19).unwrap().len(), 4);
        assert_eq!(extract_patches(&img, 40).unwrap().len(), 1);
        assert!(extract_patches(&img, 41).is_err());
        assert!(extract_patches(&img, 0).is_err());
    }

    #[test]
    fn raster_order_and_contents() {
        let pixels: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Image::new("t", 4, pixels).unwrap();
        let set = extract_patches(&img, 2).unwrap();
        assert_eq!(set.patch(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(set.patch(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(set.patch(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(set.origins()[3], PatchOrigin { image: 0, row: 2, col: 2 });
    }

    #[test]
    fn patch_side_choice() {
        assert_eq!(choose_patch_side(2844, 64).unwrap(), 19);
        assert_eq!(choose_patch_side(2844, 1).unwrap(), 54);
        assert_eq!(choose_patch_side(12, 16).unwrap(), 2);
        assert!(choose_patch_side(10, 0).is_err());
    }

    #[test]
    fn synthetic_images_are_unit_range_and_seeded() {
        let a = synthesize_image(9, 64);
        let b = synthesize_image(9, 64);
        assert_eq!(a, b);
        let lo = a.pixels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_ne!(a.pixels, synthesize_image(10, 64).pixels);
    }

    #[test]
    fn raw_and_pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthesize_image(4, 20);
        let raw = dir.path().join("x.f64");
        write_raw_image(&img, &raw).unwrap();
        let back = load_image(&raw, None).unwrap();
        assert_eq!(back.pixels, img.pixels);
        let pgm = dir.path().join("x.pgm");
        write_pgm16(&img, &pgm).unwrap();
        let back = load_image(&pgm, Some(16)).unwrap();
        assert_eq!(back.side, 16);
        assert!((back.get(0, 0) - img.get(2, 2)).abs() <= 0.5 / 65535.0 + 1e-12);
        assert!(load_image(&pgm, Some(21)).is_err());
        assert!(load_image(&dir.path().join("missing.pgm"), None).is_err());
    }

    #[test]
    fn gabor_center_atom_is_gaussian() {
        let p = GaborParams {
            orientation: 0.3,
            phase: 0.0,
            sigma_x: 2.0,
            sigma_y: 1.5,
            lambda: 1e6,
            x0: 3.0,
            y0: 3.0,
        };
        let dict = build_dictionary(&[p], 7);
        assert!(dict.matrix().iter().all(|&v| v > 0.0));
        assert!((dict.matrix()[(3 * 7 + 3, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dictionary_sizes_and_floors() {
        let c = CopulaConfig::default();
        let params = sample_gabor_params(3, 500, 19, &c).unwrap();
        assert!(params
            .iter()
            .all(|p| p.sigma_x >= 1.0 && p.sigma_y >= 1.0 && p.lambda >= 1.0 && (0.0..=18.0).contains(&p.x0)));
        assert_eq!(sample_gabor_params(3, 500, 19, &c).unwrap(), params);
        let bad = CopulaConfig {
            pareto: [(0.0, 1.0); 3],
            ..c
        };
        assert!(sample_gabor_params(3, 5, 19, &bad).is_err());
        let d = GaborDictionary::sample(1, 4, 4, &c).unwrap();
        assert_eq!((d.dim(), d.atoms(), d.overcompleteness()), (16, 64, 4.0));
    }

    #[test]
    fn identity_dictionary_encode_decode() {
        let dict = GaborDictionary::from_matrix(3, DMatrix::identity(9, 9)).unwrap();
        let patch: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let code = encode(&dict, &patch, 1e-12, 50).unwrap();
        for (c, p) in code.coefficients.iter().zip(&patch) {
            assert!((c - p).abs() < 1e-14);
        }
        assert_eq!(decode(&dict, &patch).unwrap(), patch);
        assert_eq!(decode(&dict, &[0.0; 9]).unwrap(), vec![0.0; 9]);
        assert!(decode(&dict, &[0.0; 8]).is_err());
        assert!(encode(&dict, &[0.0; 8], 1e-6, 5).is_err());
    }

    #[test]
    fn dictionary_container_roundtrip() {
        let dict = GaborDictionary::sample(7, 3, 2, &CopulaConfig::default()).unwrap();
        let mut buf = Vec::new();
        dict.write_to(&mut buf).unwrap();
        let back = GaborDictionary::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, dict);
        buf[0] = b'X';
        assert!(GaborDictionary::read_from(&mut buf.as_slice()).is_err());
        let mut csv_out = Vec::new();
        dict.write_params_csv(&mut csv_out).unwrap();
        assert_eq!(String::from_utf8(csv_out).unwrap().lines().count(), 19);
    }

    #[test]
    fn upscale_preserves_constants_and_is_linear() {
        let flat = vec![0.25; 16];
        let up = upscale_patch(&flat, 4, 4).unwrap();
        assert_eq!(up.len(), 64);
        assert!(up.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let a: Vec<f64> = (0..16).map(|i| (i * 7 % 5) as f64).collect();
        let b: Vec<f64> = (0..16).map(|i| (i * 3 % 4) as f64).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 2.0 * y).collect();
        let (ua, ub, us) = (
            upscale_patch(&a, 4, 16).unwrap(),
            upscale_patch(&b, 4, 16).unwrap(),
            upscale_patch(&sum, 4, 16).unwrap(),
        );
        for i in 0..us.len() {
            assert!((us[i] - ua[i] - 2.0 * ub[i]).abs() < 1e-12);
        }
        assert!(upscale_patch(&a, 4, 3).is_err());
    }

    #[test]
    fn representation_names() {
        for r in [
            Representation::Raw,
            Representation::Upscaled(4),
            Representation::Whitened,
            Representation::Sparse(16),
            Representation::OneHot,
        ] {
            assert_eq!(r.to_string().parse::<Representation>().unwrap(), r);
        }
        assert!("sparse".parse::<Representation>().is_err());
        assert!("sparse:0".parse::<Representation>().is_err());
    }
}
