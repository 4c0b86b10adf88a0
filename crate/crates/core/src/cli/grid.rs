//! Composited PNG grids with a sidecar TSV describing every cell.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{imageops, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;

/// Black border between and around cells, in pixels.
pub const GRID_PAD: usize = 2;

pub const SIDECAR_HEADER: &str = "row\tcol\tx\ty\twidth\theight\tkind\tcaption\tnoise\talpha\tsource";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Generated,
    GroundTruth,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Generated => "generated",
            CellKind::GroundTruth => "ground_truth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generated" => Ok(CellKind::Generated),
            "ground_truth" => Ok(CellKind::GroundTruth),
            other => Err(Error::Format(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// What a cell shows; written verbatim to the sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMeta {
    pub kind: CellKind,
    pub caption: String,
    /// Noise description such as `seed=7,index=0`; empty for dataset images.
    pub noise: String,
    pub alpha: Option<f64>,
    /// Dataset image path for ground-truth cells.
    pub source: String,
}

impl CellMeta {
    pub fn generated(caption: &str, noise: String, alpha: Option<f64>) -> Self {
        Self {
            kind: CellKind::Generated,
            caption: caption.to_string(),
            noise,
            alpha,
            source: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub image: Image,
    pub meta: CellMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    rows: usize,
    cols: usize,
    side: usize,
    cells: Vec<GridCell>,
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

impl ImageGrid {
    pub fn new(rows: usize, cols: usize, side: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || side == 0 {
            return Err(Error::Validation(format!("grid {rows}x{cols} of {side}px cells is empty")));
        }
        Ok(Self {
            rows,
            cols,
            side,
            cells: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn place(&mut self, row: usize, col: usize, image: Image, meta: CellMeta) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::Validation(format!(
                "cell ({row}, {col}) outside a {}x{} grid",
                self.rows, self.cols
            )));
        }
        if image.height() != self.side || image.width() != self.side {
            return Err(Error::shape(
                "grid cell",
                [self.side, self.side],
                [image.height(), image.width()],
            ));
        }
        if self.cells.iter().any(|c| c.row == row && c.col == col) {
            return Err(Error::Validation(format!("cell ({row}, {col}) placed twice")));
        }
        self.cells.push(GridCell { row, col, image, meta });
        Ok(())
    }

    fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (GRID_PAD + col * (self.side + GRID_PAD), GRID_PAD + row * (self.side + GRID_PAD))
    }

    pub fn render(&self) -> RgbImage {
        let w = self.cols * (self.side + GRID_PAD) + GRID_PAD;
        let h = self.rows * (self.side + GRID_PAD) + GRID_PAD;
        let mut canvas = RgbImage::new(w as u32, h as u32);
        for c in &self.cells {
            let (x, y) = self.origin(c.row, c.col);
            imageops::replace(&mut canvas, &c.image.to_rgb(), x as i64, y as i64);
        }
        canvas
    }

    pub fn sidecar(&self) -> String {
        let mut out = format!("{SIDECAR_HEADER}\n");
        let mut cells: Vec<&GridCell> = self.cells.iter().collect();
        cells.sort_by_key(|c| (c.row, c.col));
        for c in cells {
            let (x, y) = self.origin(c.row, c.col);
            let m = &c.meta;
            writeln!(
                out,
                "{}\t{}\t{x}\t{y}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.row,
                c.col,
                self.side,
                self.side,
                m.kind.name(),
                clean(&m.caption),
                clean(&m.noise),
                m.alpha.map(|a| format!("{a:?}")).unwrap_or_default(),
                clean(&m.source),
            )
            .expect("string write");
        }
        out
    }

    /// Writes `path` (PNG) and its `.tsv` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut png = Vec::new();
        self.render()
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        write_atomic(path, &png)?;
        write_atomic(&sidecar_path(path), self.sidecar().as_bytes())
    }
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("tsv")
}

/// Writes through a temporary sibling so a failed run leaves no partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Decodes a grid written by [`ImageGrid::save`] back into its cells.
pub fn read_grid(path: &Path) -> Result<Vec<GridCell>> {
    let canvas = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let bad = |n: usize, what: &str| Error::Load {
        path: side_path.clone(),
        message: format!("line {}: {what}", n + 1),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SIDECAR_HEADER => {}
        _ => return Err(bad(0, "missing header")),
    }
    let mut cells = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(bad(n, "expected 11 fields"));
        }
        let num = |i: usize| f[i].parse::<usize>().map_err(|_| bad(n, "bad number"));
        let (x, y, w, h) = (num(2)?, num(3)?, num(4)?, num(5)?);
        if x + w > canvas.width() as usize || y + h > canvas.height() as usize {
            return Err(bad(n, "cell outside the image"));
        }
        let crop = imageops::crop_imm(&canvas, x as u32, y as u32, w as u32, h as u32).to_image();
        let alpha = if f[9].is_empty() {
            None
        } else {
            Some(f[9].parse().map_err(|_| bad(n, "bad alpha"))?)
        };
        cells.push(GridCell {
            row: num(0)?,
            col: num(1)?,
            image: Image::from_rgb(&crop),
            meta: CellMeta {
                kind: CellKind::parse(f[6]).map_err(|_| bad(n, "bad kind"))?,
                caption: f[7].to_string(),
                noise: f[8].to_string(),
                alpha,
                source: f[10].to_string(),
            },
        });
    }
    Ok(cells)
}
