//! Synthetic glyph-grid documents with known reading orders.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::ImageTensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Glyph `g ≥ 1` is token `g + GLYPH_OFFSET`.
pub const GLYPH_OFFSET: usize = 2;
pub const MAX_VOCAB: usize = 4096;

pub fn glyph_token(glyph: usize) -> usize {
    glyph + GLYPH_OFFSET
}

pub fn token_glyph(token: usize) -> Option<usize> {
    (token > GLYPH_OFFSET).then(|| token - GLYPH_OFFSET)
}

/// Token vocabulary size for `vocab` glyphs plus pad/bos/eos.
pub fn token_vocab(vocab: usize) -> usize {
    vocab + GLYPH_OFFSET + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Raster,
    TwoColumn,
    Spiral,
    TableRowwise,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 4] = [
        LayoutKind::Raster,
        LayoutKind::TwoColumn,
        LayoutKind::Spiral,
        LayoutKind::TableRowwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::Raster => "raster",
            LayoutKind::TwoColumn => "two_column",
            LayoutKind::Spiral => "spiral",
            LayoutKind::TableRowwise => "table_rowwise",
        }
    }

    /// Column left blank by two-column pages.
    pub fn gutter(cols: usize) -> usize {
        cols / 2
    }

    /// Every cell the layout may fill, in reading order.
    pub fn traversal(self, rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
        match self {
            LayoutKind::Raster | LayoutKind::TableRowwise => {
                if rows == 0 || cols == 0 {
                    return Err(Error::InvalidArgument("grid must have at least one cell".into()));
                }
                Ok((0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect())
            }
            LayoutKind::TwoColumn => {
                if rows == 0 || cols < 3 {
                    return Err(Error::InvalidArgument(format!(
                        "two_column needs at least 3 columns, got {rows}x{cols}"
                    )));
                }
                let g = Self::gutter(cols);
                let left = (0..rows).flat_map(|r| (0..g).map(move |c| (r, c)));
                let right = (0..rows).flat_map(|r| (g + 1..cols).map(move |c| (r, c)));
                Ok(left.chain(right).collect())
            }
            LayoutKind::Spiral => {
                if rows < 2 || cols < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "spiral needs at least 2x2, got {rows}x{cols}"
                    )));
                }
                let mut out = Vec::with_capacity(rows * cols);
                let (mut top, mut bottom, mut left, mut right) = (0isize, rows as isize - 1, 0isize, cols as isize - 1);
                while top <= bottom && left <= right {
                    for c in left..=right {
                        out.push((top, c));
                    }
                    for r in top + 1..=bottom {
                        out.push((r, right));
                    }
                    if top < bottom {
                        for c in (left..right).rev() {
                            out.push((bottom, c));
                        }
                    }
                    if left < right {
                        for r in (top + 1..bottom).rev() {
                            out.push((r, left));
                        }
                    }
                    top += 1;
                    bottom -= 1;
                    left += 1;
                    right -= 1;
                }
                Ok(out.into_iter().map(|(r, c)| (r as usize, c as usize)).collect())
            }
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(LayoutKind::TableRowwise),
            _ => Self::ALL
                .into_iter()
                .find(|k| k.as_str() == s)
                .ok_or_else(|| Error::Parse(format!("unknown layout `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major glyph ids, 0 = blank.
    pub cells: Vec<usize>,
    pub layout: LayoutKind,
    /// Non-blank cells in reading order.
    pub reading_order: Vec<(usize, usize)>,
}

impl GlyphGrid {
    pub fn new(layout: LayoutKind, rows: usize, cols: usize, cells: Vec<usize>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} grid needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        let traversal = layout.traversal(rows, cols)?;
        if layout == LayoutKind::TwoColumn {
            let g = LayoutKind::gutter(cols);
            if (0..rows).any(|r| cells[r * cols + g] != 0) {
                return Err(Error::InvalidArgument("two_column gutter must be blank".into()));
            }
        }
        let reading_order = traversal
            .into_iter()
            .filter(|&(r, c)| cells[r * cols + c] != 0)
            .collect();
        Ok(GlyphGrid {
            rows,
            cols,
            cells,
            layout,
            reading_order,
        })
    }

    pub fn glyph(&self, r: usize, c: usize) -> usize {
        self.cells[r * self.cols + c]
    }

    pub fn non_blank(&self) -> usize {
        self.cells.iter().filter(|&&g| g != 0).count()
    }

    /// `[bos, glyph tokens in reading order, eos]`.
    pub fn target(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.reading_order.iter().map(|&(r, c)| glyph_token(self.glyph(r, c))))
            .chain(std::iter::once(EOS))
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Binary `cell_pixels²` patterns for glyph ids `1..=vocab`, pairwise (and
/// against blank) at Hamming distance ≥ `cell_pixels²/8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphTable {
    pub cell_pixels: usize,
    pub salt: u64,
    patterns: Vec<Vec<bool>>,
}

impl GlyphTable {
    pub fn new(vocab: usize, cell_pixels: usize) -> Result<Self> {
        if cell_pixels < 4 {
            return Err(Error::InvalidArgument(format!(
                "cell_pixels {cell_pixels} must be at least 4"
            )));
        }
        if vocab == 0 || vocab > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "vocab {vocab} outside 1..={MAX_VOCAB}"
            )));
        }
        let bits = cell_pixels * cell_pixels;
        let min = Self::min_distance(cell_pixels);
        for salt in 0u64.. {
            let patterns: Vec<Vec<bool>> = (0..=vocab as u64)
                .map(|id| {
                    (0..bits as u64)
                        .map(|b| id != 0 && splitmix(splitmix(salt ^ (id << 20)) ^ b) & 1 == 1)
                        .collect()
                })
                .collect();
            let ok = (0..patterns.len()).all(|i| {
                (i + 1..patterns.len()).all(|j| hamming(&patterns[i], &patterns[j]) >= min)
            });
            if ok {
                return Ok(GlyphTable {
                    cell_pixels,
                    salt,
                    patterns,
                });
            }
        }
        unreachable!("salt space exhausted")
    }

    pub fn min_distance(cell_pixels: usize) -> usize {
        (cell_pixels * cell_pixels).div_ceil(8)
    }

    pub fn vocab(&self) -> usize {
        self.patterns.len() - 1
    }

    /// Pattern for `id` (0 is the all-blank pattern).
    pub fn pattern(&self, id: usize) -> &[bool] {
        &self.patterns[id]
    }
}

pub fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn render(grid: &GlyphGrid, table: &GlyphTable) -> Result<ImageTensor> {
    let cp = table.cell_pixels;
    let (h, w) = (grid.rows * cp, grid.cols * cp);
    let mut img = ImageTensor::filled(h, w, 1, 0.0)?;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let g = grid.glyph(r, c);
            if g == 0 {
                continue;
            }
            if g > table.vocab() {
                return Err(Error::InvalidArgument(format!(
                    "glyph {g} outside table of {}",
                    table.vocab()
                )));
            }
            for (k, &on) in table.pattern(g).iter().enumerate() {
                if on {
                    img.set(r * cp + k / cp, c * cp + k % cp, 0, 1.0);
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub layout: LayoutKind,
    pub grid: GlyphGrid,
    pub image: ImageTensor,
    pub target: Vec<usize>,
}

/// Grid geometry and glyph statistics shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeParams {
    pub rows: usize,
    pub cols: usize,
    pub cell_pixels: usize,
    pub vocab: usize,
    pub density: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            rows: 8,
            cols: 8,
            cell_pixels: 8,
            vocab: 32,
            density: 0.5,
        }
    }
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("grid must be non-empty".into()));
        }
        if self.vocab == 0 || self.vocab > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!("vocab {} out of range", self.vocab)));
        }
        if self.cell_pixels < 4 {
            return Err(Error::InvalidArgument("cell_pixels must be at least 4".into()));
        }
        Ok(())
    }

    pub fn page_size(&self) -> (usize, usize) {
        (self.cols * self.cell_pixels, self.rows * self.cell_pixels)
    }

    /// Longest possible target (bos + every cell + eos).
    pub fn max_target_len(&self) -> usize {
        self.rows * self.cols + 2
    }
}

/// Range of filled-prefix lengths for a traversal of `cap` cells at `density`.
pub fn prefix_range(cap: usize, density: f64) -> (usize, usize) {
    let center = (density * cap as f64).round() as usize;
    let half = (cap as f64 * density.min(1.0 - density) / 2.0).floor() as usize;
    let lo = center.saturating_sub(half).max(1);
    let hi = (center + half).min(cap).max(lo);
    (lo, hi)
}

/// One sample. Raster, two-column and spiral pages fill a random-length prefix
/// of their reading order; table pages fill column 0 and each other cell with
/// probability `density`.
pub fn generate(seed: u64, kind: LayoutKind, shape: &ShapeParams, table: &GlyphTable) -> Result<Sample> {
    shape.validate()?;
    if table.vocab() < shape.vocab || table.cell_pixels != shape.cell_pixels {
        return Err(Error::InvalidArgument("glyph table does not match shape parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (shape.rows, shape.cols);
    let traversal = kind.traversal(rows, cols)?;
    let mut cells = vec![0; rows * cols];
    match kind {
        LayoutKind::TableRowwise => {
            for r in 0..rows {
                for c in 0..cols {
                    if c == 0 || rng.gen_bool(shape.density) {
                        cells[r * cols + c] = rng.gen_range(1..=shape.vocab);
                    }
                }
            }
        }
        _ => {
            let (lo, hi) = prefix_range(traversal.len(), shape.density);
            let len = rng.gen_range(lo..=hi);
            for &(r, c) in &traversal[..len] {
                cells[r * cols + c] = rng.gen_range(1..=shape.vocab);
            }
        }
    }
    let grid = GlyphGrid::new(kind, rows, cols, cells)?;
    let image = render(&grid, table)?;
    let target = grid.target();
    Ok(Sample {
        seed,
        layout: kind,
        grid,
        image,
        target,
    })
}

/// Layout fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mix {
    pub raster: f64,
    pub two_column: f64,
    pub spiral: f64,
    #[serde(alias = "table")]
    pub table_rowwise: f64,
}

impl Mix {
    pub fn fraction(&self, kind: LayoutKind) -> f64 {
        match kind {
            LayoutKind::Raster => self.raster,
            LayoutKind::TwoColumn => self.two_column,
            LayoutKind::Spiral => self.spiral,
            LayoutKind::TableRowwise => self.table_rowwise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = LayoutKind::ALL.map(|k| self.fraction(k));
        if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::InvalidArgument("mix fractions must be non-negative".into()));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mix fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `count` samples (ties go to the earlier layout).
    pub fn allocate(&self, count: usize) -> Result<BTreeMap<LayoutKind, usize>> {
        self.validate()?;
        let quotas: Vec<(LayoutKind, f64)> = LayoutKind::ALL
            .into_iter()
            .map(|k| (k, self.fraction(k) * count as f64))
            .collect();
        let mut out: BTreeMap<LayoutKind, usize> =
            quotas.iter().map(|&(k, q)| (k, q.floor() as usize)).collect();
        let assigned: usize = out.values().sum();
        let mut rema: Vec<(LayoutKind, f64)> = quotas
            .iter()
            .filter(|&&(k, _)| self.fraction(k) > 0.0)
            .map(|&(k, q)| (k, q - q.floor()))
            .collect();
        rema.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (k, _) in rema.into_iter().take(count.saturating_sub(assigned)) {
            *out.get_mut(&k).expect("known layout") += 1;
        }
        out.retain(|_, n| *n > 0);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub shape: ShapeParams,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn counts(&self) -> BTreeMap<LayoutKind, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.layout).or_insert(0) += 1;
        }
        out
    }

    /// Text manifest: header lines, then one `sample` record per sample.
    pub fn manifest(&self) -> String {
        use std::fmt::Write as _;
        let sh = &self.shape;
        let mut s = String::from("dataset v1\n");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "count {}", self.samples.len());
        let _ = writeln!(
            s,
            "shape rows={} cols={} cell_pixels={} vocab={} density={}",
            sh.rows, sh.cols, sh.cell_pixels, sh.vocab, sh.density
        );
        let counts: Vec<String> = self.counts().iter().map(|(k, n)| format!("{k}={n}")).collect();
        let _ = writeln!(s, "layouts {}", counts.join(" "));
        for (i, smp) in self.samples.iter().enumerate() {
            let ids: Vec<String> = smp.target.iter().map(usize::to_string).collect();
            let _ = writeln!(
                s,
                "sample {i} seed={} layout={} file={} target={}",
                smp.seed,
                smp.layout,
                image_file(i),
                ids.join(" ")
            );
        }
        s
    }

    pub fn manifest_hash(&self) -> String {
        hex::encode(Sha256::digest(self.manifest().as_bytes()))
    }

    /// Writes `manifest.txt` and one PGM per sample into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let path = dir.join(image_file(i));
            fs::write(&path, encode_pgm(&s.image)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }

    /// Reads a snapshot by regenerating each sample from its manifest record and
    /// checking the stored target and image against it.
    pub fn read_snapshot(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("dataset v1") {
            return Err(Error::Parse("manifest lacks `dataset v1` header".into()));
        }
        let mut seed = None;
        let mut shape = None;
        let mut records = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "seed" => seed = Some(parse_num::<u64>(rest, line)?),
                "shape" => {
                    let f = fields(rest);
                    let get = |k: &str| f.get(k).copied().ok_or_else(|| Error::Parse(format!("shape lacks {k}")));
                    shape = Some(ShapeParams {
                        rows: parse_num(get("rows")?, line)?,
                        cols: parse_num(get("cols")?, line)?,
                        cell_pixels: parse_num(get("cell_pixels")?, line)?,
                        vocab: parse_num(get("vocab")?, line)?,
                        density: parse_num(get("density")?, line)?,
                    });
                }
                "sample" => records.push(line),
                _ => {}
            }
        }
        let (seed, shape) = match (seed, shape) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Parse("manifest lacks seed or shape".into())),
        };
        let table = GlyphTable::new(shape.vocab, shape.cell_pixels)?;
        let mut samples = Vec::with_capacity(records.len());
        for (i, line) in records.into_iter().enumerate() {
            let (head, target) = line
                .split_once(" target=")
                .ok_or_else(|| Error::Parse(format!("sample record lacks target: {line}")))?;
            let f = fields(head);
            let sseed: u64 = parse_num(f.get("seed").copied().unwrap_or(""), line)?;
            let layout: LayoutKind = f.get("layout").copied().unwrap_or("").parse()?;
            let target: Vec<usize> = target
                .split_whitespace()
                .map(|t| parse_num(t, line))
                .collect::<Result<_>>()?;
            let sample = generate(sseed, layout, &shape, &table)?;
            if sample.target != target {
                return Err(Error::Integrity(format!("sample {i}: target differs from regeneration")));
            }
            let img_path = dir.join(image_file(i));
            let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            if bytes != encode_pgm(&sample.image) {
                return Err(Error::Integrity(format!("sample {i}: image differs from regeneration")));
            }
            samples.push(sample);
        }
        Ok(Dataset { seed, shape, samples })
    }
}

fn fields(s: &str) -> BTreeMap<&str, &str> {
    s.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

fn parse_num<N: FromStr>(s: &str, line: &str) -> Result<N> {
    s.trim().parse().map_err(|_| Error::Parse(format!("bad number `{s}` in `{line}`")))
}

pub fn image_file(index: usize) -> String {
    format!("sample_{index:05}.pgm")
}

/// 8-bit binary PGM (P5) of channel 0.
pub fn encode_pgm(image: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    for y in 0..image.height {
        for x in 0..image.width {
            out.push((image.at(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Deterministic dataset: layouts allocated by largest remainder, shuffled by
/// `seed`, each sample generated from its own derived seed.
pub fn make_dataset(seed: u64, mix: &Mix, count: usize, shape: &ShapeParams) -> Result<Dataset> {
    shape.validate()?;
    let alloc = mix.allocate(count)?;
    let table = GlyphTable::new(shape.vocab, shape.cell_pixels)?;
    let mut kinds: Vec<LayoutKind> = alloc
        .iter()
        .flat_map(|(&k, &n)| std::iter::repeat_n(k, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kinds.shuffle(&mut rng);
    let samples = kinds
        .into_iter()
        .map(|k| generate(rng.gen(), k, shape, &table))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        seed,
        shape: *shape,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_two_by_two() {
        let g = GlyphGrid::new(LayoutKind::Raster, 2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(g.target(), vec![BOS, 3, 4, 5, 6, EOS]);
    }

    #[test]
    fn spiral_three_by_three() {
        let t = LayoutKind::Spiral.traversal(3, 3).unwrap();
        assert_eq!(
            t,
            vec![(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0), (1, 1)]
        );
    }

    #[test]
    fn two_column_four_by_five() {
        let t = LayoutKind::TwoColumn.traversal(4, 5).unwrap();
        let want: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .chain((0..4).flat_map(|r| (3..5).map(move |c| (r, c))))
            .collect();
        assert_eq!(t, want);
        assert!(LayoutKind::TwoColumn.traversal(4, 2).is_err());
        assert!(LayoutKind::Spiral.traversal(1, 5).is_err());
        let mut cells = vec![0; 20];
        cells[2] = 1;
        assert!(GlyphGrid::new(LayoutKind::TwoColumn, 4, 5, cells).is_err());
    }

    #[test]
    fn glyph_table_distances() {
        let t = GlyphTable::new(32, 8).unwrap();
        let min = GlyphTable::min_distance(8);
        for i in 0..=32 {
            for j in i + 1..=32 {
                assert!(hamming(t.pattern(i), t.pattern(j)) >= min);
            }
        }
    }

    #[test]
    fn allocation() {
        let mix = Mix {
            raster: 0.6,
            spiral: 0.2,
            table_rowwise: 0.2,
            ..Mix::default()
        };
        let a = mix.allocate(100).unwrap();
        assert_eq!(a[&LayoutKind::Raster], 60);
        assert_eq!(a[&LayoutKind::Spiral], 20);
        assert_eq!(a[&LayoutKind::TableRowwise], 20);
        let b = Mix { raster: 0.4, two_column: 0.3, spiral: 0.3, ..Mix::default() }.allocate(7).unwrap();
        assert_eq!(b.values().sum::<usize>(), 7);
        assert!(Mix { raster: 0.5, ..Mix::default() }.validate().is_err());
    }

    #[test]
    fn prefix_ranges() {
        assert_eq!(prefix_range(64, 0.5), (16, 48));
        assert_eq!(prefix_range(56, 0.5), (14, 42));
        assert_eq!(prefix_range(4, 1.0), (4, 4));
    }
}
