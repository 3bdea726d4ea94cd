//! Synthetic exemplar-translation pairs with known correspondence.
//!
//! Shapes are filled ellipses or rectangles whose centres sit on latent-cell
//! centres, so moving a shape between layouts is an integer translation in
//! latent pixels and the ground-truth flow is exact at latent resolution.

use std::fs;
use std::path::Path;

use midm_core::grid::{Position, RgbImage};
use midm_core::matching::FlowField;
use midm_core::rng::Rng;

use crate::error::{io_err, HarnessError, Result};
use crate::ppm::write_ppm;

pub const BACKGROUND: [u8; 3] = [144, 144, 144];
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// One shape in both layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    /// Half extents in image pixels.
    pub radius: (f64, f64),
    /// Latent cell holding the shape centre in the ground-truth layout.
    pub gt_cell: (usize, usize),
    /// Latent cell holding the shape centre in the exemplar layout.
    pub exemplar_cell: (usize, usize),
    pub gt_color: [u8; 3],
    pub exemplar_color: [u8; 3],
}

impl PlacedShape {
    /// Exemplar-minus-ground-truth displacement in latent pixels.
    pub fn translation(&self) -> (i64, i64) {
        (
            self.exemplar_cell.0 as i64 - self.gt_cell.0 as i64,
            self.exemplar_cell.1 as i64 - self.gt_cell.1 as i64,
        )
    }

    fn center(cell: (usize, usize), factor: usize) -> (f64, f64) {
        let off = (factor as f64 - 1.0) / 2.0;
        ((cell.0 * factor) as f64 + off, (cell.1 * factor) as f64 + off)
    }

    fn contains(&self, cell: (usize, usize), factor: usize, py: usize, px: usize) -> bool {
        let (cy, cx) = Self::center(cell, factor);
        let (dy, dx) = ((py as f64 - cy) / self.radius.0, (px as f64 - cx) / self.radius.1);
        match self.kind {
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }

    /// Inclusive pixel bounding box `(y0, x0, y1, x1)` (may extend past the image).
    fn bbox(&self, cell: (usize, usize), factor: usize) -> (f64, f64, f64, f64) {
        let (cy, cx) = Self::center(cell, factor);
        (cy - self.radius.0, cx - self.radius.1, cy + self.radius.0, cx + self.radius.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub seed: u64,
    pub factor: usize,
    /// Binary outline map of the ground-truth layout.
    pub condition: RgbImage,
    pub ground_truth: RgbImage,
    pub exemplar: RgbImage,
    /// For each condition latent cell, the corresponding exemplar position.
    pub gt_flow: FlowField,
    /// Latent cells covered (by majority) by a shape in the ground-truth layout.
    pub foreground: Vec<bool>,
    pub shapes: Vec<PlacedShape>,
}

/// Shape index per pixel (`None` for background).
fn label_map(shapes: &[PlacedShape], layout_gt: bool, height: usize, width: usize, factor: usize) -> Vec<Option<usize>> {
    let mut labels = vec![None; height * width];
    for (i, s) in shapes.iter().enumerate() {
        let cell = if layout_gt { s.gt_cell } else { s.exemplar_cell };
        for py in 0..height {
            for px in 0..width {
                if s.contains(cell, factor, py, px) {
                    labels[py * width + px] = Some(i);
                }
            }
        }
    }
    labels
}

fn paint(labels: &[Option<usize>], colors: impl Fn(usize) -> [u8; 3], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, BACKGROUND).expect("positive dims");
    for (p, l) in labels.iter().enumerate() {
        if let Some(i) = l {
            img.put(p / width, p % width, colors(*i));
        }
    }
    img
}

/// White 1-pixel inner outlines on black.
pub fn outline_image(labels: &[Option<usize>], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, [0, 0, 0]).expect("positive dims");
    for y in 0..height {
        for x in 0..width {
            let Some(here) = labels[y * width + x] else { continue };
            let boundary = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 || labels[ny as usize * width + nx as usize] != Some(here)
            });
            if boundary {
                img.put(y, x, [255, 255, 255]);
            }
        }
    }
    img
}

/// Majority shape label of each latent cell.
pub fn latent_labels(labels: &[Option<usize>], width: usize, height: usize, factor: usize, shapes: usize) -> Vec<Option<usize>> {
    let (lh, lw) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(lh * lw);
    for ly in 0..lh {
        for lx in 0..lw {
            let mut counts = vec![0usize; shapes];
            for py in ly * factor..(ly + 1) * factor {
                for px in lx * factor..(lx + 1) * factor {
                    if let Some(i) = labels[py * width + px] {
                        counts[i] += 1;
                    }
                }
            }
            let best = counts.iter().enumerate().max_by_key(|(_, &c)| c);
            out.push(match best {
                Some((i, &c)) if 2 * c >= factor * factor => Some(i),
                _ => None,
            });
        }
    }
    out
}

fn random_color(rng: &mut Rng) -> [u8; 3] {
    loop {
        let c = [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8];
        let luma = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
        let spread = c.iter().max().unwrap() - c.iter().min().unwrap();
        if (luma - BACKGROUND[0] as f64).abs() >= 48.0 && spread >= 60 {
            return c;
        }
    }
}

fn recolor(rng: &mut Rng, c: [u8; 3]) -> [u8; 3] {
    c.map(|v| (v as i64 + rng.range_inclusive(-24, 24)).clamp(0, 255) as u8)
}

/// Places every shape on the latent lattice with at least one latent cell of
/// clearance between bounding boxes.
fn place(rng: &mut Rng, radii: &[(f64, f64)], kinds: &[ShapeKind], height: usize, width: usize, factor: usize) -> Result<Vec<(usize, usize)>> {
    let (lh, lw) = (height / factor, width / factor);
    let gap = factor as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut cells: Vec<(usize, usize)> = Vec::with_capacity(radii.len());
        let mut ok = true;
        for (i, &r) in radii.iter().enumerate() {
            let cell = (rng.below(lh), rng.below(lw));
            let probe = PlacedShape {
                kind: kinds[i],
                radius: r,
                gt_cell: cell,
                exemplar_cell: cell,
                gt_color: [0; 3],
                exemplar_color: [0; 3],
            };
            let (y0, x0, y1, x1) = probe.bbox(cell, factor);
            if y0 < 1.0 || x0 < 1.0 || y1 > height as f64 - 2.0 || x1 > width as f64 - 2.0 {
                ok = false;
                break;
            }
            let clash = cells.iter().enumerate().any(|(j, &other)| {
                let q = PlacedShape { radius: radii[j], ..probe.clone() };
                let (oy0, ox0, oy1, ox1) = q.bbox(other, factor);
                !(y1 + gap < oy0 || oy1 + gap < y0 || x1 + gap < ox0 || ox1 + gap < x0)
            });
            if clash {
                ok = false;
                break;
            }
            cells.push(cell);
        }
        if ok {
            return Ok(cells);
        }
    }
    Err(HarnessError::Generation(format!(
        "could not place {} shapes in {height}x{width} without overlap after {MAX_ATTEMPTS} attempts",
        radii.len()
    )))
}

/// Generates a condition / ground-truth / exemplar triple.
pub fn gen_synthetic_pair(seed: u64, size: (usize, usize), num_shapes: usize, factor: usize) -> Result<SyntheticPair> {
    let (height, width) = size;
    if factor == 0 || height % factor != 0 || width % factor != 0 || height == 0 || width == 0 {
        return Err(midm_core::MidmError::InvalidArgument(format!(
            "size {height}x{width} must be positive and divisible by {factor}"
        ))
        .into());
    }
    if !(1..=8).contains(&num_shapes) {
        return Err(midm_core::MidmError::InvalidArgument(format!("num_shapes must be in [1, 8], got {num_shapes}")).into());
    }
    let mut rng = Rng::new(seed);
    let min_side = height.min(width) as f64;
    let (r_lo, r_hi) = ((min_side / 12.0).max(2.0), (min_side / 6.5).max(2.5));
    let kinds: Vec<ShapeKind> =
        (0..num_shapes).map(|_| if rng.below(2) == 0 { ShapeKind::Ellipse } else { ShapeKind::Rectangle }).collect();
    let radii: Vec<(f64, f64)> = (0..num_shapes)
        .map(|_| (r_lo + rng.next_f64() * (r_hi - r_lo), r_lo + rng.next_f64() * (r_hi - r_lo)))
        .collect();
    let gt_cells = place(&mut rng, &radii, &kinds, height, width, factor)?;
    let ex_cells = place(&mut rng, &radii, &kinds, height, width, factor)?;
    let shapes: Vec<PlacedShape> = (0..num_shapes)
        .map(|i| {
            let gt_color = random_color(&mut rng);
            let exemplar_color = recolor(&mut rng, gt_color);
            PlacedShape { kind: kinds[i], radius: radii[i], gt_cell: gt_cells[i], exemplar_cell: ex_cells[i], gt_color, exemplar_color }
        })
        .collect();

    let gt_labels = label_map(&shapes, true, height, width, factor);
    let ex_labels = label_map(&shapes, false, height, width, factor);
    let ground_truth = paint(&gt_labels, |i| shapes[i].gt_color, width, height);
    let exemplar = paint(&ex_labels, |i| shapes[i].exemplar_color, width, height);
    let condition = outline_image(&gt_labels, width, height);

    let (lh, lw) = (height / factor, width / factor);
    let cell_labels = latent_labels(&gt_labels, width, height, factor, num_shapes);
    let foreground: Vec<bool> = cell_labels.iter().map(Option::is_some).collect();
    let positions = (0..lh * lw)
        .map(|p| {
            let (y, x) = ((p / lw) as f64, (p % lw) as f64);
            match cell_labels[p] {
                Some(i) => {
                    let (dy, dx) = shapes[i].translation();
                    Position::new(y + dy as f64, x + dx as f64)
                }
                None => Position::new(y, x),
            }
        })
        .collect();
    let gt_flow = FlowField::new(lh, lw, positions)?;
    Ok(SyntheticPair { seed, factor, condition, ground_truth, exemplar, gt_flow, foreground, shapes })
}

impl SyntheticPair {
    pub fn size(&self) -> (usize, usize) {
        (self.exemplar.height(), self.exemplar.width())
    }

    pub fn ground_truth_labels(&self) -> Vec<Option<usize>> {
        let (h, w) = self.size();
        label_map(&self.shapes, true, h, w, self.factor)
    }

    pub fn exemplar_labels(&self) -> Vec<Option<usize>> {
        let (h, w) = self.size();
        label_map(&self.shapes, false, h, w, self.factor)
    }

    /// Condition drawn from the exemplar's own layout, for self-translation.
    pub fn self_condition(&self) -> RgbImage {
        let (h, w) = self.size();
        outline_image(&self.exemplar_labels(), w, h)
    }

    /// Identity flow restricted to the exemplar's foreground.
    pub fn self_flow(&self) -> (FlowField, Vec<bool>) {
        let (h, w) = self.size();
        let labels = latent_labels(&self.exemplar_labels(), w, h, self.factor, self.shapes.len());
        (FlowField::identity(h / self.factor, w / self.factor), labels.iter().map(Option::is_some).collect())
    }

    /// `y,x,flow_y,flow_x,foreground` rows at latent resolution.
    pub fn flow_csv(&self) -> String {
        flow_to_csv(&self.gt_flow, &self.foreground)
    }
}

pub fn flow_to_csv(flow: &FlowField, foreground: &[bool]) -> String {
    let mut out = String::from("y,x,flow_y,flow_x,foreground\n");
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let p = flow.at(y, x);
            out.push_str(&format!("{y},{x},{},{},{}\n", p.y, p.x, u8::from(foreground[y * flow.width() + x])));
        }
    }
    out
}

/// Parses the output of [`flow_to_csv`].
pub fn flow_from_csv(text: &str) -> Result<(FlowField, Vec<bool>)> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || HarnessError::Config(format!("flow csv line {}: malformed row `{line}`", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let y: usize = f[0].trim().parse().map_err(|_| bad())?;
        let x: usize = f[1].trim().parse().map_err(|_| bad())?;
        let fy: f64 = f[2].trim().parse().map_err(|_| bad())?;
        let fx: f64 = f[3].trim().parse().map_err(|_| bad())?;
        let fg = f[4].trim() == "1";
        rows.push((y, x, Position::new(fy, fx), fg));
    }
    let h = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let w = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if h == 0 || rows.len() != h * w {
        return Err(HarnessError::Config("flow csv does not cover a full grid".into()));
    }
    let mut positions = vec![Position::default(); h * w];
    let mut fg = vec![false; h * w];
    for (y, x, p, f) in rows {
        positions[y * w + x] = p;
        fg[y * w + x] = f;
    }
    Ok((FlowField::new(h, w, positions)?, fg))
}

/// Writes `condition.ppm`, `ground_truth.ppm`, `exemplar.ppm`, `gt_flow.csv`
/// and the self-translation variant `self_condition.ppm` / `self_flow.csv`.
pub fn write_pair(dir: &Path, pair: &SyntheticPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_ppm(&dir.join("condition.ppm"), &pair.condition)?;
    write_ppm(&dir.join("ground_truth.ppm"), &pair.ground_truth)?;
    write_ppm(&dir.join("exemplar.ppm"), &pair.exemplar)?;
    write_ppm(&dir.join("self_condition.ppm"), &pair.self_condition())?;
    let (flow, fg) = pair.self_flow();
    for (name, text) in [("gt_flow.csv", pair.flow_csv()), ("self_flow.csv", flow_to_csv(&flow, &fg))] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(path))?;
    }
    Ok(())
}
