//! Global/local view planning and visual-token budgets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{ImageTensor, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub fn square(side: usize) -> Self {
        Canvas {
            width: side,
            height: side,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub global_canvas: Canvas,
    pub local_canvas: Canvas,
    pub k_max: usize,
    pub n_global: usize,
    pub n_local: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            global_canvas: Canvas::square(256),
            local_canvas: Canvas::square(192),
            k_max: 6,
            n_global: 16,
            n_local: 9,
        }
    }
}

impl PlannerConfig {
    pub fn paper() -> Self {
        PlannerConfig {
            global_canvas: Canvas::square(1024),
            local_canvas: Canvas::square(768),
            k_max: 6,
            n_global: 256,
            n_local: 144,
        }
    }

    /// Checks the per-view token counts against the tokenizer formula.
    pub fn validate(&self, tokenizer: &TokenizerConfig) -> Result<()> {
        let g = tokenizer.token_count(self.global_canvas.height, self.global_canvas.width)?;
        let l = tokenizer.token_count(self.local_canvas.height, self.local_canvas.width)?;
        if g != self.n_global || l != self.n_local {
            return Err(Error::Config(format!(
                "canvases give {g}/{l} tokens but n_global/n_local are {}/{}",
                self.n_global, self.n_local
            )));
        }
        Ok(())
    }

    pub fn min_budget(&self) -> usize {
        self.n_global
    }

    pub fn max_budget(&self) -> usize {
        self.k_max * self.n_local + self.n_global
    }
}

/// Pixel rectangle `[x, x+width) × [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Aspect-preserving resize of `source` to `scaled`, placed top-left on `canvas`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewTransform {
    pub source: Rect,
    pub canvas: Canvas,
    pub scaled_width: usize,
    pub scaled_height: usize,
}

impl ViewTransform {
    pub fn fit(source: Rect, canvas: Canvas) -> Self {
        // scale = min(cw/sw, ch/sh), computed in integers to stay exact.
        let (sw, sh, cw, ch) = (source.width, source.height, canvas.width, canvas.height);
        let (scaled_width, scaled_height) = if cw * sh <= ch * sw {
            (cw, ((sh * cw + sw / 2) / sw).clamp(1, ch))
        } else {
            (((sw * ch + sh / 2) / sh).clamp(1, cw), ch)
        };
        ViewTransform {
            source,
            canvas,
            scaled_width,
            scaled_height,
        }
    }

    /// Nearest-neighbor resize then zero padding.
    pub fn apply(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let c = image.channels;
        let mut out = ImageTensor::filled(self.canvas.height, self.canvas.width, c, 0.0)?;
        let s = self.source;
        for y in 0..self.scaled_height {
            let sy = s.y + y * s.height / self.scaled_height;
            for x in 0..self.scaled_width {
                let sx = s.x + x * s.width / self.scaled_width;
                for ch in 0..c {
                    out.set(y, x, ch, image.at(sy, sx, ch));
                }
            }
        }
        out.valid = (self.scaled_height, self.scaled_width);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropPlan {
    pub page_width: usize,
    pub page_height: usize,
    pub global: ViewTransform,
    /// Row-major over the crop grid.
    pub locals: Vec<ViewTransform>,
    pub grid: (usize, usize),
}

impl CropPlan {
    pub fn k(&self) -> usize {
        self.locals.len()
    }

    /// One line: `k=<k> budget=<tokens>` plus ` grid=<rows>x<cols>` when cropping.
    pub fn summary(&self, cfg: &PlannerConfig) -> String {
        let mut s = format!("k={} budget={}", self.k(), token_budget(self, cfg));
        if self.k() > 0 {
            s.push_str(&format!(" grid={}x{}", self.grid.0, self.grid.1));
        }
        s
    }
}

/// Distortion, then larger grid, then fewer rows.
type GridKey = (u128, std::cmp::Reverse<usize>, usize);

/// Crop grid `(rows, cols)` for a page, or `None` when no cropping applies.
///
/// Candidates satisfy `1 ≤ rows·cols ≤ k_max`; the winner minimizes the aspect
/// distortion `|cols·Lw/width − rows·Lh/height|`, then maximizes `rows·cols`,
/// then takes fewer rows.
pub fn choose_grid(width: usize, height: usize, cfg: &PlannerConfig) -> Option<(usize, usize)> {
    let (lw, lh) = (cfg.local_canvas.width, cfg.local_canvas.height);
    if cfg.k_max == 0 || (width < lw && height < lh) {
        return None;
    }
    let mut best: Option<(GridKey, (usize, usize))> = None;
    for r in 1..=cfg.k_max {
        for c in 1..=cfg.k_max / r {
            // |c·Lw/w − r·Lh/h| scaled by w·h
            let a = (c * lw * height) as u128;
            let b = (r * lh * width) as u128;
            let key = (a.abs_diff(b), std::cmp::Reverse(r * c), r);
            if best.as_ref().is_none_or(|(k, _)| key < *k) {
                best = Some((key, (r, c)));
            }
        }
    }
    best.map(|(_, g)| g)
}

pub fn plan(width: usize, height: usize, cfg: &PlannerConfig) -> Result<CropPlan> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "page size {width}x{height} must be positive"
        )));
    }
    let page = Rect {
        x: 0,
        y: 0,
        width,
        height,
    };
    let global = ViewTransform::fit(page, cfg.global_canvas);
    let (grid, locals) = match choose_grid(width, height, cfg) {
        None => ((0, 0), Vec::new()),
        Some((r, c)) => {
            let mut locals = Vec::with_capacity(r * c);
            for i in 0..r {
                let (y0, y1) = (i * height / r, (i + 1) * height / r);
                for j in 0..c {
                    let (x0, x1) = (j * width / c, (j + 1) * width / c);
                    let rect = Rect {
                        x: x0,
                        y: y0,
                        width: (x1 - x0).max(1),
                        height: (y1 - y0).max(1),
                    };
                    locals.push(ViewTransform::fit(rect, cfg.local_canvas));
                }
            }
            ((r, c), locals)
        }
    };
    Ok(CropPlan {
        page_width: width,
        page_height: height,
        global,
        locals,
        grid,
    })
}

pub fn token_budget(plan: &CropPlan, cfg: &PlannerConfig) -> usize {
    plan.k() * cfg.n_local + cfg.n_global
}

/// Global view and local views (row-major) for `image`.
pub fn apply(plan: &CropPlan, image: &ImageTensor) -> Result<(ImageTensor, Vec<ImageTensor>)> {
    if image.width != plan.page_width || image.height != plan.page_height {
        return Err(Error::Dimension(format!(
            "image is {}x{} but the plan is for {}x{}",
            image.width, image.height, plan.page_width, plan.page_height
        )));
    }
    let global = plan.global.apply(image)?;
    let locals = plan
        .locals
        .iter()
        .map(|t| t.apply(image))
        .collect::<Result<_>>()?;
    Ok((global, locals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_examples() {
        let cfg = PlannerConfig::paper();
        let p = plan(700, 500, &cfg).unwrap();
        assert_eq!((p.k(), token_budget(&p, &cfg)), (0, 256));
        assert_eq!(p.summary(&cfg), "k=0 budget=256");
        let p = plan(1536, 768, &cfg).unwrap();
        assert_eq!((p.grid, p.k(), token_budget(&p, &cfg)), ((1, 2), 2, 544));
        assert_eq!(p.summary(&cfg), "k=2 budget=544 grid=1x2");
        cfg.validate(&TokenizerConfig::default()).unwrap();
        PlannerConfig::default().validate(&TokenizerConfig::default()).unwrap();
    }

    #[test]
    fn one_large_side_crops() {
        let cfg = PlannerConfig::paper();
        assert!(plan(800, 100, &cfg).unwrap().k() > 0);
        assert_eq!(plan(767, 767, &cfg).unwrap().k(), 0);
    }

    #[test]
    fn padding_geometry() {
        let cfg = PlannerConfig::paper();
        let p = plan(2048, 1024, &cfg).unwrap();
        assert_eq!((p.global.scaled_width, p.global.scaled_height), (1024, 512));
        let sq = plan(2048, 2048, &cfg).unwrap();
        assert_eq!((sq.global.scaled_width, sq.global.scaled_height), (1024, 1024));
    }
}
