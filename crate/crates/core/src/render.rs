//! Ground-truth rendering: glyph catalogs, affine jitter, pixel-min
//! compositing of overlapping glyphs, and non-overlapping grid scenes.
//!
//! Images use the ink-dark convention: strokes near 0, background near 1,
//! so a pointwise minimum overlays ink.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::labelset::{Episode, LabelSet};

/// Side length of every glyph.
pub const GLYPH_SIZE: usize = 64;

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(height * width, pixels.len(), "image buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![1.0; height * width])
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at fractional coordinates; `fill` outside the image.
    pub fn sample(&self, y: f32, x: f32, fill: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let get = |yy: isize, xx: isize| {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                fill
            } else {
                self.pixels[yy as usize * self.width + xx as usize]
            }
        };
        if fy == 0.0 && fx == 0.0 {
            return get(y0, x0);
        }
        let top = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1) * fx;
        let bottom = get(y0 + 1, x0) * (1.0 - fx) + get(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Image {
        let mut pixels = Vec::with_capacity(height * width);
        for r in y..y + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + x..r * self.width + x + width]);
        }
        Image::new(height, width, pixels)
    }

    /// Copies `src` with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, src: &Image, y: usize, x: usize) {
        for r in 0..src.height {
            let dst = &mut self.pixels[(y + r) * self.width + x..(y + r) * self.width + x + src.width];
            dst.copy_from_slice(&src.pixels[r * src.width..(r + 1) * src.width]);
        }
    }

    /// Resampling with pixel-center alignment. Downscaling by an integer
    /// factor averages each source block; everything else is bilinear.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        if self.height % height == 0 && self.width % width == 0 {
            let (fy, fx) = (self.height / height, self.width / width);
            let inv = 1.0 / (fy * fx) as f32;
            let mut pixels = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    let mut s = 0.0;
                    for dy in 0..fy {
                        let row = (y * fy + dy) * self.width + x * fx;
                        s += self.pixels[row..row + fx].iter().sum::<f32>();
                    }
                    pixels.push(s * inv);
                }
            }
            return Image::new(height, width, pixels);
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            for x in 0..width {
                let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                pixels.push(self.sample(src_y, src_x, 1.0));
            }
        }
        Image::new(height, width, pixels)
    }

    /// Pads with background to a centered square, then resizes to `side`.
    pub fn fit_square(&self, side: usize) -> Image {
        let n = self.height.max(self.width);
        let squared = if self.height == self.width {
            self.clone()
        } else {
            let mut canvas = Image::blank(n, n);
            canvas.paste(self, (n - self.height) / 2, (n - self.width) / 2);
            canvas
        };
        squared.resize(side, side)
    }

    /// Fraction of pixels darker than 0.5.
    pub fn ink_coverage(&self) -> f64 {
        self.pixels.iter().filter(|&&p| p < 0.5).count() as f64 / self.pixels.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Directory(PathBuf),
    Synthetic { seed: u64 },
}

/// Per-class glyph exemplars. Class ids are indices into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphStore {
    pub names: Vec<String>,
    pub classes: Vec<Vec<Image>>,
    pub provenance: Provenance,
}

impl GlyphStore {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn exemplars(&self, class: usize) -> &[Image] {
        &self.classes[class]
    }

    /// A store restricted to the given classes (renumbered in the given order).
    pub fn select_classes(&self, ids: &[usize]) -> GlyphStore {
        GlyphStore {
            names: ids.iter().map(|&i| self.names[i].clone()).collect(),
            classes: ids.iter().map(|&i| self.classes[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps exemplars `range` of every class; classes keep their ids.
    pub fn select_exemplars(&self, range: std::ops::Range<usize>) -> Result<GlyphStore> {
        let mut classes = Vec::with_capacity(self.classes.len());
        for (i, ex) in self.classes.iter().enumerate() {
            if range.end > ex.len() || range.is_empty() {
                return invalid_arg(format!(
                    "class {i} has {} exemplars; cannot select {range:?}",
                    ex.len()
                ));
            }
            classes.push(ex[range.clone()].to_vec());
        }
        Ok(GlyphStore {
            names: self.names.clone(),
            classes,
            provenance: self.provenance.clone(),
        })
    }
}

/// Reads `root/<class_name>/<exemplar>.png`. Images are converted to
/// grayscale, scaled to `[0, 1]` and resized to 64x64; class ids follow the
/// sorted class names. Non-directory entries directly under `root` are ignored.
pub fn load_glyph_store(root: &Path) -> Result<GlyphStore> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::EmptyStore(root.to_path_buf()));
    }
    let mut names = Vec::new();
    let mut classes = Vec::new();
    for dir in class_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Ingestion {
                path: dir,
                reason: "class directory has no exemplars".into(),
            });
        }
        let mut exemplars = Vec::with_capacity(files.len());
        for f in files {
            let img = image::open(&f).map_err(|e| Error::Ingestion {
                path: f.clone(),
                reason: e.to_string(),
            })?;
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            let pixels = gray.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
            exemplars.push(Image::new(h as usize, w as usize, pixels).resize(GLYPH_SIZE, GLYPH_SIZE));
        }
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        classes.push(exemplars);
    }
    Ok(GlyphStore {
        names,
        classes,
        provenance: Provenance::Directory(root.to_path_buf()),
    })
}

/// Writes a store in the layout read by [`load_glyph_store`].
pub fn save_glyph_store(store: &GlyphStore, root: &Path) -> Result<()> {
    for (name, exemplars) in store.names.iter().zip(&store.classes) {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for (j, img) in exemplars.iter().enumerate() {
            img.save_png(&dir.join(format!("{j:02}.png")))?;
        }
    }
    Ok(())
}

type Stroke = Vec<(f32, f32)>;

/// Procedural glyph catalog. Each class is a skeleton of 3-6 random
/// polyline strokes drawn with a 2px pen; exemplars re-render the skeleton
/// with small control-point jitter. Fully determined by `seed`.
pub fn synth_glyph_store(n_classes: usize, n_exemplars: usize, seed: u64) -> Result<GlyphStore> {
    if n_classes == 0 || n_exemplars == 0 {
        return invalid_arg("class and exemplar counts must be positive");
    }
    let mut classes = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        let skeleton = random_skeleton(&mut rng);
        let jitter = Normal::new(0.0f32, 1.5).expect("valid sigma");
        let exemplars = (0..n_exemplars)
            .map(|_| {
                let strokes: Vec<Stroke> = skeleton
                    .iter()
                    .map(|s| {
                        s.iter()
                            .map(|&(y, x)| (y + jitter.sample(&mut rng), x + jitter.sample(&mut rng)))
                            .collect()
                    })
                    .collect();
                draw_strokes(&strokes)
            })
            .collect();
        classes.push(exemplars);
    }
    Ok(GlyphStore {
        names: (0..n_classes).map(|i| format!("glyph{i:04}")).collect(),
        classes,
        provenance: Provenance::Synthetic { seed },
    })
}

/// The un-jittered rendering of a synthetic class.
pub fn synth_prototype(class: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    draw_strokes(&random_skeleton(&mut rng))
}

fn random_skeleton<R: Rng>(rng: &mut R) -> Vec<Stroke> {
    let margin = 12.0;
    let hi = GLYPH_SIZE as f32 - margin;
    let n_strokes = rng.gen_range(3..=6);
    (0..n_strokes)
        .map(|_| {
            let n_points = rng.gen_range(2..=4);
            (0..n_points)
                .map(|_| (rng.gen_range(margin..hi), rng.gen_range(margin..hi)))
                .collect()
        })
        .collect()
}

fn draw_strokes(strokes: &[Stroke]) -> Image {
    const HALF_WIDTH: f32 = 1.0;
    let mut img = Image::blank(GLYPH_SIZE, GLYPH_SIZE);
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let p = (y as f32 + 0.5, x as f32 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |seg| segment_distance(p, seg[0], seg[1])))
                .fold(f32::INFINITY, f32::min);
            // Solid within the pen radius, one pixel of linear falloff.
            let ink = (HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
            img.pixels[y * GLYPH_SIZE + x] = 1.0 - ink;
        }
    }
    img
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (a.0 + t * dy - p.0, a.1 + t * dx - p.1);
    (qy * qy + qx * qx).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenderMode {
    /// Overlapping glyphs combined by pointwise minimum.
    OverlayMin,
    /// One glyph per cell of a `rows x cols` grid of 64x64 cells.
    GridScene { rows: usize, cols: usize },
}

/// Free parameters of the rendering function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Maximum translation per axis as a fraction of the glyph width.
    pub shift_frac: f32,
    pub scale_range: (f32, f32),
    /// Maximum absolute rotation in degrees.
    pub rot_deg: f32,
    pub noise_sigma: f32,
    pub mode: RenderMode,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            shift_frac: 0.1,
            scale_range: (0.8, 1.2),
            rot_deg: 15.0,
            noise_sigma: 0.05,
            mode: RenderMode::OverlayMin,
        }
    }
}

impl RenderSpec {
    /// No jitter and no noise.
    pub fn identity() -> Self {
        Self {
            shift_frac: 0.0,
            scale_range: (1.0, 1.0),
            rot_deg: 0.0,
            noise_sigma: 0.0,
            mode: RenderMode::OverlayMin,
        }
    }

    pub fn with_mode(mut self, mode: RenderMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.shift_frac) {
            return invalid_arg(format!("shift_frac {} outside [0, 0.5]", self.shift_frac));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return invalid_arg(format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= hi"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.rot_deg >= 0.0) {
            return invalid_arg("noise_sigma and rot_deg must be nonnegative");
        }
        if let RenderMode::GridScene { rows, cols } = self.mode {
            if rows == 0 || cols == 0 {
                return invalid_arg("grid must have at least one cell");
            }
        }
        Ok(())
    }
}

/// A rendered example with its ground-truth label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image: Image,
    pub truth: LabelSet,
    /// Grid mode only: episode class index -> (row, col) of its cell.
    pub cells: Option<BTreeMap<usize, (usize, usize)>>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.gen::<f32>()
}

/// Random translation, scale and rotation about the image center, with
/// background fill outside the source. Always consumes four draws.
pub fn affine_jitter<R: Rng + ?Sized>(glyph: &Image, spec: &RenderSpec, rng: &mut R) -> Image {
    let max_shift = spec.shift_frac * glyph.width as f32;
    let ty = uniform(rng, -max_shift, max_shift);
    let tx = uniform(rng, -max_shift, max_shift);
    let scale = uniform(rng, spec.scale_range.0, spec.scale_range.1);
    let theta = uniform(rng, -spec.rot_deg, spec.rot_deg).to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (glyph.height as f32 - 1.0) / 2.0;
    let cx = (glyph.width as f32 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(glyph.pixels.len());
    for y in 0..glyph.height {
        for x in 0..glyph.width {
            // inverse map: undo translation, scale, then rotation
            let dy = (y as f32 - cy - ty) / scale;
            let dx = (x as f32 - cx - tx) / scale;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            out.push(glyph.sample(sy, sx, 1.0).clamp(0.0, 1.0));
        }
    }
    Image::new(glyph.height, glyph.width, out)
}

/// Pointwise minimum of equally sized images.
pub fn composite_min(layers: &[Image]) -> Image {
    let mut out = layers[0].clone();
    for l in &layers[1..] {
        assert_eq!((l.height, l.width), (out.height, out.width), "layer size mismatch");
        for (o, &p) in out.pixels.iter_mut().zip(&l.pixels) {
            *o = o.min(p);
        }
    }
    out
}

/// Adds i.i.d. Gaussian noise and clamps to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(img: &mut Image, sigma: f32, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
        for p in &mut img.pixels {
            *p += normal.sample(rng);
        }
    }
    for p in &mut img.pixels {
        *p = p.clamp(0.0, 1.0);
    }
}

/// A uniformly chosen exemplar of `class`, jittered.
pub fn jittered_exemplar<R: Rng + ?Sized>(
    store: &GlyphStore,
    class: usize,
    spec: &RenderSpec,
    rng: &mut R,
) -> Image {
    let ex = store.exemplars(class);
    let pick = rng.gen_range(0..ex.len());
    affine_jitter(&ex[pick], spec, rng)
}

/// A singleton rendering (jitter + noise) of catalog class `class`.
pub fn render_singleton<R: Rng + ?Sized>(
    store: &GlyphStore,
    class: usize,
    spec: &RenderSpec,
    rng: &mut R,
) -> Image {
    let mut img = jittered_exemplar(store, class, spec, rng);
    add_noise(&mut img, spec.noise_sigma, rng);
    img
}

/// The reference example of episode class `i`: its designated exemplar,
/// jittered and noised.
pub fn render_reference<R: Rng + ?Sized>(
    store: &GlyphStore,
    episode: &Episode,
    i: usize,
    spec: &RenderSpec,
    rng: &mut R,
) -> Image {
    let ex = &store.exemplars(episode.class_ids[i])[episode.reference_exemplar_ids[i]];
    let mut img = affine_jitter(ex, spec, rng);
    add_noise(&mut img, spec.noise_sigma, rng);
    img
}

/// Overlay rendering: one jittered random exemplar per class of `t`,
/// pointwise minimum, then noise and clamping.
pub fn render_composite<R: Rng + ?Sized>(
    store: &GlyphStore,
    episode: &Episode,
    t: &LabelSet,
    spec: &RenderSpec,
    rng: &mut R,
) -> Result<Scene> {
    spec.validate()?;
    if spec.mode != RenderMode::OverlayMin {
        return invalid_arg("render_composite requires overlay mode");
    }
    if t.is_empty() {
        return invalid_arg("cannot render an empty label set");
    }
    check_universe(episode, t)?;
    let layers: Vec<Image> = episode
        .classes_of(t)
        .into_iter()
        .map(|c| jittered_exemplar(store, c, spec, rng))
        .collect();
    let mut image = composite_min(&layers);
    add_noise(&mut image, spec.noise_sigma, rng);
    Ok(Scene {
        image,
        truth: *t,
        cells: None,
    })
}

/// Grid rendering: each class of `t` is jittered into its own uniformly
/// chosen cell; other cells stay background.
pub fn render_scene<R: Rng + ?Sized>(
    store: &GlyphStore,
    episode: &Episode,
    t: &LabelSet,
    spec: &RenderSpec,
    rng: &mut R,
) -> Result<Scene> {
    spec.validate()?;
    let RenderMode::GridScene { rows, cols } = spec.mode else {
        return invalid_arg("render_scene requires grid mode");
    };
    if t.is_empty() {
        return invalid_arg("cannot render an empty label set");
    }
    check_universe(episode, t)?;
    if rows * cols < t.len() {
        return invalid_arg(format!(
            "{} classes do not fit a {rows}x{cols} grid",
            t.len()
        ));
    }
    let mut cell_ids: Vec<usize> = (0..rows * cols).collect();
    cell_ids.partial_shuffle(rng, t.len());
    let mut image = Image::blank(rows * GLYPH_SIZE, cols * GLYPH_SIZE);
    let mut cells = BTreeMap::new();
    for (i, &cell) in t.canonical_elements().iter().zip(&cell_ids) {
        let glyph = jittered_exemplar(store, episode.class_ids[*i], spec, rng);
        let (r, c) = (cell / cols, cell % cols);
        image.paste(&glyph, r * GLYPH_SIZE, c * GLYPH_SIZE);
        cells.insert(*i, (r, c));
    }
    add_noise(&mut image, spec.noise_sigma, rng);
    Ok(Scene {
        image,
        truth: *t,
        cells: Some(cells),
    })
}

/// Dispatches on the spec's mode.
pub fn render<R: Rng + ?Sized>(
    store: &GlyphStore,
    episode: &Episode,
    t: &LabelSet,
    spec: &RenderSpec,
    rng: &mut R,
) -> Result<Scene> {
    match spec.mode {
        RenderMode::OverlayMin => render_composite(store, episode, t, spec, rng),
        RenderMode::GridScene { .. } => render_scene(store, episode, t, spec, rng),
    }
}

fn check_universe(episode: &Episode, t: &LabelSet) -> Result<()> {
    if t.universe_size() != episode.k() {
        return invalid_arg(format!(
            "label set over {} classes used with a {}-class episode",
            t.universe_size(),
            episode.k()
        ));
    }
    Ok(())
}
