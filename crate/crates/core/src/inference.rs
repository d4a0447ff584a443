//! Full-domain prediction by stitching patch predictions.
//!
//! All three strategies share one engine: reflect-pad the input, cut tiles
//! of a fixed size, keep a square region of each tile's prediction, and
//! average kept values per output cell. Padding arithmetic:
//!
//! * no_overlap: pad bottom/right up to a multiple of `P`; tiles on a `P` grid.
//! * overlap: pad bottom/right to `P + ceil(max(H-P, 0)/S)*S`; tiles on an `S`
//!   grid, so every cell of the original extent lies in at least one window.
//! * center_crop: pad bottom/right up to a multiple of `Pc`, then `ctx =
//!   (Pt-Pc)/2` on every side; tiles of `Pt` on a `Pc` grid, keeping the
//!   central `Pc` square.

use serde::{Deserialize, Serialize};

use crate::convnet::UNet;
use crate::error::{Error, Result};
use crate::raster::{reflect_pad_planes, InputStack};
use crate::tensor::Tensor;

/// Anything that maps a `[N, 3, P, P]` batch to `[N, 1, P, P]` predictions.
pub trait PatchModel {
    /// Tile sides must be multiples of this.
    fn side_multiple(&self) -> usize;
    fn predict_batch(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchModel for UNet<f32> {
    fn side_multiple(&self) -> usize {
        self.config().side_multiple()
    }

    fn predict_batch(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NoOverlap,
    Overlap,
    CenterCrop,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoOverlap, Strategy::Overlap, Strategy::CenterCrop];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoOverlap => "no_overlap",
            Strategy::Overlap => "overlap",
            Strategy::CenterCrop => "center_crop",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub strategy: Strategy,
    /// Tile side for every strategy (P_total for center_crop).
    pub patch_size: usize,
    /// Overlap stride; defaults to `patch_size / 2`.
    pub stride: Option<usize>,
    /// Kept square for center_crop; defaults to `patch_size / 2`.
    pub center_size: Option<usize>,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CenterCrop,
            patch_size: 128,
            stride: None,
            center_size: None,
            batch_size: 16,
        }
    }
}

impl InferenceConfig {
    pub fn new(strategy: Strategy, patch_size: usize) -> Self {
        Self {
            strategy,
            patch_size,
            ..Default::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size / 2)
    }

    pub fn center_size(&self) -> usize {
        self.center_size.unwrap_or(self.patch_size / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("patch_size and batch_size must be positive".into()));
        }
        match self.strategy {
            Strategy::NoOverlap => Ok(()),
            Strategy::Overlap => {
                let s = self.stride();
                if s == 0 || s >= self.patch_size {
                    return Err(Error::Config(format!(
                        "overlap stride must satisfy 0 < S < P, got S={s}, P={}",
                        self.patch_size
                    )));
                }
                Ok(())
            }
            Strategy::CenterCrop => check_center(self.patch_size, self.center_size()),
        }
    }
}

fn check_center(total: usize, center: usize) -> Result<()> {
    if center == 0 || center >= total || total % 2 != 0 || center % 2 != 0 {
        return Err(Error::Config(format!(
            "center_crop needs even 0 < P_center < P_total, got P_center={center}, P_total={total}"
        )));
    }
    Ok(())
}

/// Geometry of one stitching pass over an `rows x cols` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub tile: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    /// Top-left corners in padded input coordinates.
    pub origins: Vec<(usize, usize)>,
    /// Offset and side of the retained square inside each tile.
    pub keep_offset: usize,
    pub keep_size: usize,
}

fn grid_origins(len: usize, tile: usize, step: usize) -> Vec<usize> {
    (0..=len - tile).step_by(step).collect()
}

impl TilePlan {
    fn build(rows: usize, cols: usize, tile: usize, step: usize, ctx: usize, padded: impl Fn(usize) -> usize) -> Self {
        let (ph, pw) = (padded(rows), padded(cols));
        let ys = grid_origins(ph + 2 * ctx, tile, step);
        let xs = grid_origins(pw + 2 * ctx, tile, step);
        let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        Self {
            rows,
            cols,
            tile,
            pad_top: ctx,
            pad_bottom: ph - rows + ctx,
            pad_left: ctx,
            pad_right: pw - cols + ctx,
            origins,
            keep_offset: ctx,
            keep_size: tile - 2 * ctx,
        }
    }

    pub fn no_overlap(rows: usize, cols: usize, p: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || p == 0 {
            return Err(Error::Shape("empty image or tile".into()));
        }
        Ok(Self::build(rows, cols, p, p, 0, |n| n.div_ceil(p) * p))
    }

    pub fn overlap(rows: usize, cols: usize, p: usize, s: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || p == 0 {
            return Err(Error::Shape("empty image or tile".into()));
        }
        if s == 0 || s > p {
            return Err(Error::Config(format!("invalid stride {s} for patch {p}")));
        }
        Ok(Self::build(rows, cols, p, s, 0, |n| p + n.saturating_sub(p).div_ceil(s) * s))
    }

    pub fn center_crop(rows: usize, cols: usize, total: usize, center: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        check_center(total, center)?;
        let ctx = (total - center) / 2;
        Ok(Self::build(rows, cols, total, center, ctx, |n| n.div_ceil(center) * center))
    }

    pub fn for_config(rows: usize, cols: usize, cfg: &InferenceConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.strategy {
            Strategy::NoOverlap => Self::no_overlap(rows, cols, cfg.patch_size),
            Strategy::Overlap => Self::overlap(rows, cols, cfg.patch_size, cfg.stride()),
            Strategy::CenterCrop => Self::center_crop(rows, cols, cfg.patch_size, cfg.center_size()),
        }
    }

    fn canvas(&self) -> (usize, usize) {
        (
            self.rows + self.pad_top + self.pad_bottom - 2 * self.keep_offset,
            self.cols + self.pad_left + self.pad_right - 2 * self.keep_offset,
        )
    }

    /// Canvas position of tile `origin`'s first kept cell.
    fn destination(&self, origin: (usize, usize)) -> (usize, usize) {
        (
            origin.0 + self.keep_offset - self.pad_top,
            origin.1 + self.keep_offset - self.pad_left,
        )
    }

    /// How many kept tile regions write each cell of the original extent.
    pub fn cover_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.rows * self.cols];
        for &o in &self.origins {
            let (dy, dx) = self.destination(o);
            for y in dy..(dy + self.keep_size).min(self.rows) {
                for x in dx..(dx + self.keep_size).min(self.cols) {
                    counts[y * self.cols + x] += 1;
                }
            }
        }
        counts
    }
}

/// Cover counts of the overlap strategy.
pub fn overlap_cover_counts(rows: usize, cols: usize, p: usize, s: usize) -> Result<Vec<u32>> {
    Ok(TilePlan::overlap(rows, cols, p, s)?.cover_counts())
}

/// Runs `model` over `plan` and returns the `[rows, cols]` stitched prediction.
pub fn run_plan(model: &dyn PatchModel, image: &InputStack, plan: &TilePlan, batch_size: usize) -> Result<Tensor<f32>> {
    if (image.rows, image.cols) != (plan.rows, plan.cols) {
        return Err(Error::Shape(format!(
            "image {}x{} does not match plan {}x{}",
            image.rows, image.cols, plan.rows, plan.cols
        )));
    }
    let m = model.side_multiple();
    if plan.tile % m != 0 {
        return Err(Error::Config(format!("tile size {} is not divisible by {m}", plan.tile)));
    }
    let c = InputStack::CHANNELS;
    let padded = reflect_pad_planes(
        &image.data,
        c,
        image.rows,
        image.cols,
        plan.pad_top,
        plan.pad_bottom,
        plan.pad_left,
        plan.pad_right,
    );
    let pw = image.cols + plan.pad_left + plan.pad_right;
    let ph = image.rows + plan.pad_top + plan.pad_bottom;
    let t = plan.tile;
    let (canvas_h, canvas_w) = plan.canvas();
    let mut sum = vec![0.0f64; canvas_h * canvas_w];
    let mut count = vec![0u32; canvas_h * canvas_w];

    for chunk in plan.origins.chunks(batch_size.max(1)) {
        let mut batch = Vec::with_capacity(chunk.len() * c * t * t);
        for &(y0, x0) in chunk {
            for ch in 0..c {
                let plane = &padded[ch * ph * pw..(ch + 1) * ph * pw];
                for y in y0..y0 + t {
                    batch.extend_from_slice(&plane[y * pw + x0..y * pw + x0 + t]);
                }
            }
        }
        let batch = Tensor::from_vec(&[chunk.len(), c, t, t], batch)?;
        let out = model.predict_batch(&batch)?;
        if out.shape() != [chunk.len(), 1, t, t] {
            return Err(Error::Shape(format!("model returned {:?} for tiles of {t}", out.shape())));
        }
        for (i, &origin) in chunk.iter().enumerate() {
            let pred = &out.data()[i * t * t..(i + 1) * t * t];
            let (dy, dx) = plan.destination(origin);
            let k = plan.keep_offset;
            for y in 0..plan.keep_size {
                let src = &pred[(y + k) * t + k..(y + k) * t + k + plan.keep_size];
                let row = (dy + y) * canvas_w + dx;
                for (x, &v) in src.iter().enumerate() {
                    sum[row + x] += v as f64;
                    count[row + x] += 1;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(plan.rows * plan.cols);
    for y in 0..plan.rows {
        for x in 0..plan.cols {
            let i = y * canvas_w + x;
            out.push((sum[i] / count[i] as f64) as f32);
        }
    }
    Tensor::from_vec(&[plan.rows, plan.cols], out)
}

pub fn infer_no_overlap(model: &dyn PatchModel, image: &InputStack, p: usize) -> Result<Tensor<f32>> {
    run_plan(model, image, &TilePlan::no_overlap(image.rows, image.cols, p)?, 16)
}

pub fn infer_overlap(model: &dyn PatchModel, image: &InputStack, p: usize, s: usize) -> Result<Tensor<f32>> {
    run_plan(model, image, &TilePlan::overlap(image.rows, image.cols, p, s)?, 16)
}

pub fn infer_center_crop(model: &dyn PatchModel, image: &InputStack, total: usize, center: usize) -> Result<Tensor<f32>> {
    run_plan(model, image, &TilePlan::center_crop(image.rows, image.cols, total, center)?, 16)
}

/// Dispatches on `cfg.strategy`.
pub fn infer(model: &dyn PatchModel, image: &InputStack, cfg: &InferenceConfig) -> Result<Tensor<f32>> {
    let plan = TilePlan::for_config(image.rows, image.cols, cfg)?;
    run_plan(model, image, &plan, cfg.batch_size)
}
