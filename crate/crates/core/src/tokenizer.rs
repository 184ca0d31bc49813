//! Patch embedding followed by learned 2×2 merges: `H·W / (patch² · 4^stages)` tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{ParamGroup, ParamStore, Scalar, Tape, Tensor, Var};

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    /// `(height, width)` of the region holding source pixels; the rest is padding.
    pub valid: (usize, usize),
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            values,
            valid: (height, width),
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, fill: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![fill; height * width * channels])
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Places `image` at the top-left of a `target_h × target_w` canvas filled with `fill`.
pub fn pad_to_canvas(image: &ImageTensor, target_h: usize, target_w: usize, fill: f32) -> Result<ImageTensor> {
    if target_h < image.height || target_w < image.width {
        return Err(Error::Shape(format!(
            "canvas {target_h}x{target_w} is smaller than image {}x{}",
            image.height, image.width
        )));
    }
    let c = image.channels;
    let mut out = ImageTensor::filled(target_h, target_w, c, fill)?;
    for y in 0..image.height {
        let src = &image.values[y * image.width * c..(y + 1) * image.width * c];
        out.values[y * target_w * c..(y * target_w + image.width) * c].copy_from_slice(src);
    }
    out.valid = (image.height, image.width);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub patch: usize,
    pub downsample_stages: usize,
    pub channels: usize,
    pub d_out: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            patch: 16,
            downsample_stages: 2,
            channels: 1,
            d_out: 64,
        }
    }
}

impl TokenizerConfig {
    pub fn paper() -> Self {
        TokenizerConfig {
            d_out: 896,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 || self.d_out == 0 {
            return Err(Error::Config(
                "tokenizer patch, channels and d_out must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Pixels per final token side: `patch · 2^stages`.
    pub fn stride(&self) -> usize {
        self.patch << self.downsample_stages
    }

    /// Final token grid `(rows, cols)` for an `height × width` input.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::Shape(format!(
                "{height}x{width} is not divisible by patch·2^stages = {s}"
            )));
        }
        Ok((height / s, width / s))
    }

    pub fn token_count(&self, height: usize, width: usize) -> Result<usize> {
        self.grid(height, width).map(|(r, c)| r * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub patch: Linear,
    pub merges: Vec<Linear>,
}

impl Tokenizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: TokenizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Tokenizer;
        let d = cfg.d_out;
        let patch = Linear::new(store, "tokenizer.patch", g, cfg.patch * cfg.patch * cfg.channels, d, true, rng)?;
        let merges = (0..cfg.downsample_stages)
            .map(|s| Linear::new(store, &format!("tokenizer.merge{s}"), g, 4 * d, d, true, rng))
            .collect::<Result<_>>()?;
        Ok(Tokenizer { cfg, patch, merges })
    }

    /// Flattened patches, one row per patch in row-major grid order; each row is
    /// the patch's pixels in `(y, x, channel)` order.
    pub fn patch_matrix<T: Scalar>(&self, image: &ImageTensor) -> Result<Tensor<T>> {
        if image.channels != self.cfg.channels {
            return Err(Error::Shape(format!(
                "image has {} channels, tokenizer expects {}",
                image.channels, self.cfg.channels
            )));
        }
        self.cfg.grid(image.height, image.width)?;
        let p = self.cfg.patch;
        let (gh, gw) = (image.height / p, image.width / p);
        let c = image.channels;
        let mut data = Vec::with_capacity(image.values.len());
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let start = ((py * p + y) * image.width + px * p) * c;
                    data.extend(image.values[start..start + p * c].iter().map(|&v| T::from_f64(v as f64)));
                }
            }
        }
        Tensor::new(vec![gh * gw, p * p * c], data)
    }

    /// Visual tokens `[m × d_out]`, row-major over the final grid.
    pub fn tokenize<T: Scalar>(&self, tape: &mut Tape<'_, T>, image: &ImageTensor) -> Result<Var> {
        let patches = self.patch_matrix(image)?;
        let x = tape.constant(patches);
        let mut x = self.patch.forward(tape, x)?;
        let (mut gh, mut gw) = (image.height / self.cfg.patch, image.width / self.cfg.patch);
        for merge in &self.merges {
            let (nh, nw) = (gh / 2, gw / 2);
            let mut parts = Vec::with_capacity(4);
            for dy in 0..2 {
                for dx in 0..2 {
                    let rows: Vec<usize> = (0..nh)
                        .flat_map(|y| (0..nw).map(move |x| (2 * y + dy) * gw + 2 * x + dx))
                        .collect();
                    parts.push(tape.gather_rows(x, &rows)?);
                }
            }
            let cat = tape.concat_cols(&parts)?;
            x = merge.forward(tape, cat)?;
            (gh, gw) = (nh, nw);
        }
        Ok(x)
    }
}
