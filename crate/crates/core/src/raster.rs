//! Grayscale rendering of states and binary PGM image files.
//!
//! Cell `(r, c)` occupies the block starting at pixel `(r * tile_px, c * tile_px)`.
//! Maze walls are drawn inside the blocks of the cells they bound, so the
//! image is exactly `size * tile_px` pixels square for every task.

use crate::gridworld::{Action, CellKind, EnvState, Layout, Pos};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const BACKGROUND: u8 = 200;
const HOLE: u8 = 40;
const FLAG: u8 = 90;
const AGENT: u8 = 0;
const CARGO: u8 = 255;
const PRINTER: u8 = 60;
const TABLE: u8 = 140;
const WALL: u8 = 0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cell ({row}, {col}) outside a {size}x{size} grid")]
    OutOfRange { row: usize, col: usize, size: usize },
    #[error("image is not a binary graymap: {0}")]
    BadHeader(String),
    #[error("image truncated: expected {expected} pixel bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image has {extra} bytes beyond its {width}x{height} payload")]
    DimensionMismatch { width: usize, height: usize, extra: usize },
    #[error("block dimensions differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, value: u8) -> Raster {
        Raster {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::ShapeMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Copy `block` into this image with its top-left corner at pixel `(x, y)`.
    pub fn blit(&mut self, block: &Raster, x: usize, y: usize) {
        for by in 0..block.height {
            let dst = (y + by) * self.width + x;
            self.pixels[dst..dst + block.width]
                .copy_from_slice(&block.pixels[by * block.width..(by + 1) * block.width]);
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Raster {
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + w]);
        }
        Raster { width: w, height: h, pixels }
    }

    /// Concatenate images of equal height left to right.
    pub fn hstack(images: &[Raster]) -> Result<Raster, RasterError> {
        let Some(first) = images.first() else {
            return Ok(Raster::filled(0, 0, 0));
        };
        let height = first.height;
        if let Some(bad) = images.iter().find(|r| r.height != height) {
            return Err(RasterError::ShapeMismatch(first.width, height, bad.width, bad.height));
        }
        let width = images.iter().map(|r| r.width).sum();
        let mut out = Raster::filled(width, height, 0);
        let mut x = 0;
        for img in images {
            out.blit(img, x, 0);
            x += img.width;
        }
        Ok(out)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Raster, RasterError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RasterError::BadHeader("header ended early".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(RasterError::BadHeader(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| RasterError::BadHeader(format!("number {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(RasterError::BadHeader(format!("maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() {
            return Err(RasterError::Truncated {
                expected: width * height,
                found: 0,
            });
        }
        pos += 1;
        let payload = &bytes[pos..];
        let expected = width * height;
        if payload.len() < expected {
            return Err(RasterError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(RasterError::DimensionMismatch {
                width,
                height,
                extra: payload.len() - expected,
            });
        }
        Ok(Raster {
            width,
            height,
            pixels: payload.to_vec(),
        })
    }
}

pub fn write_image(raster: &Raster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&raster.to_pgm())?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Raster::from_pgm(&bytes)
}

/// What a sprite depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Glyph {
    Floor,
    Hole,
    Flag,
    Table,
    Printer,
    Agent,
    AgentCarrying,
}

impl Glyph {
    pub const ALL: [Glyph; 7] = [
        Glyph::Floor,
        Glyph::Hole,
        Glyph::Flag,
        Glyph::Table,
        Glyph::Printer,
        Glyph::Agent,
        Glyph::AgentCarrying,
    ];
}

/// A tile_px x tile_px glyph; `mask` marks the pixels it paints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sprite {
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
}

/// Sprite set used to draw cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileAtlas {
    pub tile_px: usize,
    pub wall_thickness: usize,
    sprites: Vec<Sprite>,
}

impl Default for TileAtlas {
    fn default() -> Self {
        TileAtlas::new(16, 2)
    }
}

impl TileAtlas {
    /// # Panics
    /// If the tile is too small to hold distinguishable glyphs (`tile_px < 8`)
    /// or the walls would cover a quarter of the tile.
    pub fn new(tile_px: usize, wall_thickness: usize) -> TileAtlas {
        assert!(tile_px >= 8, "tile_px must be at least 8");
        assert!(wall_thickness >= 1 && wall_thickness * 4 <= tile_px, "wall too thick");
        let t = tile_px;
        let n = t * t;
        let mut sprites = Vec::with_capacity(Glyph::ALL.len());
        let c = (t as f64 - 1.0) / 2.0;
        for g in Glyph::ALL {
            let mut px = vec![BACKGROUND; n];
            let mut mask = vec![false; n];
            let mut paint = |x: usize, y: usize, v: u8| {
                px[y * t + x] = v;
                mask[y * t + x] = true;
            };
            match g {
                Glyph::Floor => (0..n).for_each(|i| paint(i % t, i / t, BACKGROUND)),
                Glyph::Table => (0..n).for_each(|i| paint(i % t, i / t, TABLE)),
                Glyph::Hole => {
                    let m = t / 8;
                    for y in m..t - m {
                        for x in m..t - m {
                            paint(x, y, HOLE);
                        }
                    }
                }
                Glyph::Flag => {
                    // pole on the left, pennant along the top edge
                    let m = t / 8;
                    for y in m..t - m {
                        paint(m, y, FLAG);
                        paint(m + 1, y, FLAG);
                    }
                    let h = t * 3 / 8;
                    for k in 0..h {
                        let reach = (t - 3 * m) * (h - k) / h;
                        for x in m + 2..(m + 2 + reach).min(t - m) {
                            paint(x, m + k, FLAG);
                        }
                    }
                }
                Glyph::Printer => {
                    let m = t * 3 / 16;
                    let w = (t / 8).max(1);
                    for y in m..t - m {
                        for x in m..t - m {
                            let edge = x < m + w || x >= t - m - w || y < m + w || y >= t - m - w;
                            if edge {
                                paint(x, y, PRINTER);
                            }
                        }
                    }
                }
                Glyph::Agent | Glyph::AgentCarrying => {
                    let r = t as f64 * 0.28;
                    for y in 0..t {
                        for x in 0..t {
                            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                            if d <= r {
                                paint(x, y, AGENT);
                            }
                        }
                    }
                    if g == Glyph::AgentCarrying {
                        let s = t / 4;
                        let o = (t - s) / 2;
                        for y in o..o + s {
                            for x in o..o + s {
                                paint(x, y, CARGO);
                            }
                        }
                    }
                }
            }
            sprites.push(Sprite { pixels: px, mask });
        }
        TileAtlas {
            tile_px,
            wall_thickness,
            sprites,
        }
    }

    pub fn sprite(&self, g: Glyph) -> &Sprite {
        &self.sprites[Glyph::ALL.iter().position(|&x| x == g).expect("known glyph")]
    }

    /// The empty floor tile as a block.
    pub fn floor(&self) -> Raster {
        Raster {
            width: self.tile_px,
            height: self.tile_px,
            pixels: self.sprite(Glyph::Floor).pixels.clone(),
        }
    }

    fn stamp(&self, block: &mut Raster, g: Glyph) {
        let s = self.sprite(g);
        for (i, (&p, &m)) in s.pixels.iter().zip(&s.mask).enumerate() {
            if m {
                block.pixels[i] = p;
            }
        }
    }

    fn walls(&self, block: &mut Raster, mask: u8) {
        let t = self.tile_px;
        let w = self.wall_thickness;
        for dir in Action::MOVES {
            if mask & dir.wall_bit() == 0 {
                continue;
            }
            for a in 0..t {
                for b in 0..w {
                    let (x, y) = match dir {
                        Action::Up => (a, b),
                        Action::Down => (a, t - 1 - b),
                        Action::Left => (b, a),
                        _ => (t - 1 - b, a),
                    };
                    block.set(x, y, WALL);
                }
            }
        }
    }
}

/// Glyphs stacked in one cell, bottom to top.
pub fn cell_glyphs(state: &EnvState, p: Pos, with_agent: bool) -> Vec<Glyph> {
    let layout: &Layout = &state.layout;
    let mut out = vec![match layout.cell(p) {
        CellKind::Hole => Glyph::Hole,
        CellKind::Table => Glyph::Table,
        _ => Glyph::Floor,
    }];
    if layout.cell(p) == CellKind::Hole {
        out.insert(0, Glyph::Floor);
    }
    if layout.cell(p) == CellKind::Goal {
        out.push(Glyph::Flag);
    }
    if state.printer == Some(p) {
        out.push(Glyph::Printer);
    }
    if with_agent && state.agent == p {
        out.push(if state.carrying { Glyph::AgentCarrying } else { Glyph::Agent });
    }
    out
}

/// Render a single cell block, optionally leaving out the agent.
pub fn render_cell(state: &EnvState, p: Pos, atlas: &TileAtlas, with_agent: bool) -> Raster {
    let mut block = atlas.floor();
    for g in cell_glyphs(state, p, with_agent) {
        atlas.stamp(&mut block, g);
    }
    let mask = state.layout.wall_mask(p);
    if mask != 0 {
        atlas.walls(&mut block, mask);
    }
    block
}

fn render_with(state: &EnvState, atlas: &TileAtlas, with_agent: bool) -> Raster {
    let t = atlas.tile_px;
    let size = state.size();
    let mut img = Raster::filled(size * t, size * t, BACKGROUND);
    for p in state.layout.positions() {
        img.blit(&render_cell(state, p, atlas, with_agent), p.col * t, p.row * t);
    }
    img
}

/// Pixel-deterministic rendering of a state.
pub fn render(state: &EnvState, atlas: &TileAtlas) -> Raster {
    render_with(state, atlas, true)
}

/// Rendering with the agent left out (static scene plus printer).
pub fn render_scene(state: &EnvState, atlas: &TileAtlas) -> Raster {
    render_with(state, atlas, false)
}

/// Draw an extra agent glyph on a cell of an existing raster.
pub fn overlay_agent(raster: &mut Raster, p: Pos, atlas: &TileAtlas, carrying: bool) {
    let t = atlas.tile_px;
    let mut block = raster.crop(p.col * t, p.row * t, t, t);
    atlas.stamp(&mut block, if carrying { Glyph::AgentCarrying } else { Glyph::Agent });
    raster.blit(&block, p.col * t, p.row * t);
}

/// The tile_px x tile_px block of cell `(row, col)`.
pub fn cell_block(raster: &Raster, row: usize, col: usize, atlas: &TileAtlas) -> Result<Raster, RasterError> {
    let t = atlas.tile_px;
    let size = raster.width / t;
    if raster.width % t != 0 || raster.height != raster.width || row >= size || col >= size {
        return Err(RasterError::OutOfRange { row, col, size });
    }
    Ok(raster.crop(col * t, row * t, t, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{gen_layout, spawn_state, TaskKind};
    use std::sync::Arc;

    fn lake3() -> EnvState {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(2, 2));
        EnvState::new(Arc::new(l), Pos::new(0, 0))
    }

    #[test]
    fn dimensions_and_determinism() {
        let atlas = TileAtlas::default();
        let s = lake3();
        let a = render(&s, &atlas);
        assert_eq!((a.width, a.height), (48, 48));
        assert_eq!(a, render(&s, &atlas));
    }

    #[test]
    fn agent_move_changes_only_two_blocks() {
        let atlas = TileAtlas::default();
        let s = lake3();
        let mut t = s.clone();
        t.agent = Pos::new(0, 1);
        let (a, b) = (render(&s, &atlas), render(&t, &atlas));
        for p in s.layout.positions() {
            let same = cell_block(&a, p.row, p.col, &atlas).unwrap() == cell_block(&b, p.row, p.col, &atlas).unwrap();
            assert_eq!(same, p != s.agent && p != t.agent, "cell {p}");
        }
    }

    #[test]
    fn blocks_tile_the_image() {
        let atlas = TileAtlas::default();
        let s = lake3();
        let img = render(&s, &atlas);
        let mut rebuilt = Raster::filled(img.width, img.height, 7);
        for p in s.layout.positions() {
            let b = cell_block(&img, p.row, p.col, &atlas).unwrap();
            rebuilt.blit(&b, p.col * 16, p.row * 16);
        }
        assert_eq!(rebuilt, img);
        assert_eq!(cell_block(&img, 0, 0, &atlas).unwrap(), img.crop(0, 0, 16, 16));
        assert!(matches!(cell_block(&img, 3, 0, &atlas), Err(RasterError::OutOfRange { .. })));
    }

    #[test]
    fn goal_block_matches_sprite() {
        let atlas = TileAtlas::default();
        let img = render(&lake3(), &atlas);
        let mut expected = atlas.floor();
        atlas.stamp(&mut expected, Glyph::Flag);
        assert_eq!(cell_block(&img, 2, 2, &atlas).unwrap(), expected);
    }

    #[test]
    fn sprites_are_distinct() {
        let atlas = TileAtlas::default();
        let n = 16 * 16;
        // every composed cell appearance that can occur
        let mut looks: Vec<Vec<u8>> = Vec::new();
        for stack in [
            vec![Glyph::Floor],
            vec![Glyph::Floor, Glyph::Hole],
            vec![Glyph::Floor, Glyph::Flag],
            vec![Glyph::Table],
            vec![Glyph::Floor, Glyph::Printer],
            vec![Glyph::Table, Glyph::Printer],
            vec![Glyph::Floor, Glyph::Agent],
            vec![Glyph::Floor, Glyph::AgentCarrying],
            vec![Glyph::Floor, Glyph::Flag, Glyph::Agent],
        ] {
            let mut b = atlas.floor();
            for g in stack {
                atlas.stamp(&mut b, g);
            }
            looks.push(b.pixels);
        }
        for i in 0..looks.len() {
            for j in i + 1..looks.len() {
                let diff = looks[i].iter().zip(&looks[j]).filter(|(a, b)| a != b).count();
                assert!(diff * 20 >= n, "appearances {i} and {j} differ in only {diff} pixels");
            }
        }
        assert!(atlas.sprite(Glyph::Floor).pixels.iter().all(|&p| p == BACKGROUND));
    }

    #[test]
    fn pgm_roundtrip_and_errors() {
        let atlas = TileAtlas::default();
        let l = Arc::new(gen_layout(TaskKind::Maze, 4, 2).unwrap());
        let img = render(&spawn_state(&l, 1), &atlas);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);

        let bytes = img.to_pgm();
        assert!(matches!(
            Raster::from_pgm(&bytes[..bytes.len() - 10]),
            Err(RasterError::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(Raster::from_pgm(&longer), Err(RasterError::DimensionMismatch { .. })));
        assert!(matches!(Raster::from_pgm(b"P2\n1 1\n255\n\x00"), Err(RasterError::BadHeader(_))));
        assert!(matches!(Raster::from_pgm(b"P5\n4"), Err(RasterError::BadHeader(_))));
        assert_eq!(&bytes[..12], b"P5\n64 64\n255");
    }

    #[test]
    fn hstack_width() {
        let a = Raster::filled(3, 2, 1);
        let b = Raster::filled(4, 2, 2);
        let s = Raster::hstack(&[a, b]).unwrap();
        assert_eq!((s.width, s.height), (7, 2));
        assert_eq!(s.get(2, 1), 1);
        assert_eq!(s.get(3, 0), 2);
    }
}
