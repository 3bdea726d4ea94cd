//! Dense cross-domain correspondence: descriptors, correlation volumes,
//! softmax warping, soft-argmax flows and cycle-consistency masks.
//!
//! Every reduction over source positions runs in ascending position order,
//! so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::grid::{l2_normalize_vectors, FeatureGrid, LatentGrid, Position};

/// Normalised similarity between every query position (rows) and every
/// source position (columns), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    query_dims: (usize, usize),
    source_dims: (usize, usize),
    values: Vec<f64>,
}

impl CorrelationMap {
    pub fn new(query_dims: (usize, usize), source_dims: (usize, usize), values: Vec<f64>) -> Result<Self> {
        let rows = query_dims.0 * query_dims.1;
        let cols = source_dims.0 * source_dims.1;
        if rows == 0 || cols == 0 {
            return invalid("correlation map dimensions must be positive");
        }
        if values.len() != rows * cols {
            return mismatch(format!("correlation map has {} values, expected {rows}x{cols}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("correlation map values must be finite");
        }
        Ok(Self { query_dims, source_dims, values })
    }

    pub fn rows(&self) -> usize {
        self.query_dims.0 * self.query_dims.1
    }

    pub fn cols(&self) -> usize {
        self.source_dims.0 * self.source_dims.1
    }

    pub fn query_dims(&self) -> (usize, usize) {
        self.query_dims
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, u: usize) -> &[f64] {
        let cols = self.cols();
        &self.values[u * cols..(u + 1) * cols]
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.cols() + v]
    }

    /// The reverse-direction map: query and source roles swapped.
    pub fn transpose(&self) -> CorrelationMap {
        let (rows, cols) = (self.rows(), self.cols());
        let mut values = vec![0.0; rows * cols];
        for u in 0..rows {
            for v in 0..cols {
                values[v * rows + u] = self.values[u * cols + v];
            }
        }
        CorrelationMap { query_dims: self.source_dims, source_dims: self.query_dims, values }
    }

    /// Softmax of row `u` at the given temperature.
    pub fn softmax_row(&self, u: usize, temperature: f64) -> Vec<f64> {
        softmax(self.row(u), temperature)
    }
}

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = row.iter().map(|&c| ((c - peak) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    Ok(())
}

/// Per-position boolean cycle-consistency verdicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceMask {
    height: usize,
    width: usize,
    flags: Vec<bool>,
}

impl ConfidenceMask {
    pub fn new(height: usize, width: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != height * width {
            return mismatch(format!("mask has {} flags for a {height}x{width} grid", flags.len()));
        }
        Ok(Self { height, width, flags })
    }

    pub fn uniform(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, flags: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.flags[y * self.width + x]
    }

    /// Fraction of confident positions.
    pub fn coverage(&self) -> f64 {
        self.flags.iter().filter(|&&f| f).count() as f64 / self.flags.len() as f64
    }

    pub fn all(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    pub fn none(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }
}

/// For each query position, a corresponding source coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    height: usize,
    width: usize,
    positions: Vec<Position>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, positions: Vec<Position>) -> Result<Self> {
        if positions.len() != height * width {
            return mismatch(format!("flow has {} positions for a {height}x{width} grid", positions.len()));
        }
        if positions.iter().any(|p| !(p.y.is_finite() && p.x.is_finite())) {
            return invalid("flow coordinates must be finite");
        }
        Ok(Self { height, width, positions })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let positions = (0..height * width).map(|p| Position::new((p / width) as f64, (p % width) as f64)).collect();
        Self { height, width, positions }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn at(&self, y: usize, x: usize) -> Position {
        self.positions[y * self.width + x]
    }

    /// Euclidean endpoint errors against `truth`, restricted to positions where `select` holds.
    pub fn endpoint_errors(&self, truth: &FlowField, select: &[bool]) -> Result<Vec<f64>> {
        if (self.height, self.width) != (truth.height, truth.width) || select.len() != self.positions.len() {
            return mismatch("endpoint_errors: flow dimensions differ");
        }
        Ok(self
            .positions
            .iter()
            .zip(&truth.positions)
            .zip(select)
            .filter(|(_, &s)| s)
            .map(|((a, b), _)| a.distance(b))
            .collect())
    }
}

/// Size of the square neighbourhood and weight of the condition block in
/// iteration features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorConfig {
    pub patch_radius: usize,
    pub condition_weight: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self { patch_radius: 1, condition_weight: 0.5 }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.condition_weight >= 0.0 && self.condition_weight.is_finite()) {
            return invalid(format!("condition_weight must be >= 0, got {}", self.condition_weight));
        }
        Ok(())
    }
}

/// Flattened `(2r+1)² · c` neighbourhood at every position, edge-replicated
/// at the borders and mean-subtracted per position. Element order is
/// channel, then row offset, then column offset.
pub fn patch_descriptor(g: &LatentGrid, cfg: &DescriptorConfig) -> Result<FeatureGrid> {
    cfg.validate()?;
    let (c, h, w) = g.shape();
    let r = cfg.patch_radius;
    if 2 * r > h.min(w) {
        return invalid(format!("patch radius {r} too large for a {h}x{w} grid"));
    }
    let side = 2 * r + 1;
    let dim = side * side * c;
    let plane = h * w;
    let mut data = vec![0.0; dim * plane];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut patch = vec![0.0; dim];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for ch in 0..c {
                for dy in -(r as isize)..=(r as isize) {
                    for dx in -(r as isize)..=(r as isize) {
                        patch[k] = g.get(ch, clampi(y as isize + dy, h), clampi(x as isize + dx, w));
                        k += 1;
                    }
                }
            }
            let mean = patch.iter().sum::<f64>() / dim as f64;
            let p = y * w + x;
            for (d, v) in patch.iter().enumerate() {
                data[d * plane + p] = v - mean;
            }
        }
    }
    FeatureGrid::new(dim, h, w, data)
}

/// Cosine similarity between every query vector and every source vector.
pub fn correlation_map(q: &FeatureGrid, s: &FeatureGrid) -> Result<CorrelationMap> {
    if q.dim() != s.dim() {
        return mismatch(format!("correlation_map: feature dims {} vs {}", q.dim(), s.dim()));
    }
    let qn = l2_normalize_vectors(q).vectors();
    let sn = l2_normalize_vectors(s).vectors();
    let mut values = Vec::with_capacity(qn.len() * sn.len());
    for a in &qn {
        for b in &sn {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            values.push(dot.clamp(-1.0, 1.0));
        }
    }
    CorrelationMap::new(q.spatial(), s.spatial(), values)
}

/// `R(u) = Σ_v softmax_v(C(u, v) / τ) · source(v)`.
pub fn soft_warp(c: &CorrelationMap, source: &LatentGrid, temperature: f64) -> Result<LatentGrid> {
    check_temperature(temperature)?;
    if source.spatial() != c.source_dims() {
        return mismatch(format!(
            "soft_warp: source grid {:?} vs correlation columns {:?}",
            source.spatial(),
            c.source_dims()
        ));
    }
    let channels = source.channels();
    let (qh, qw) = c.query_dims();
    let plane_q = qh * qw;
    let plane_s = c.cols();
    let src = source.data();
    let bounds = source.channel_bounds();
    let mut data = vec![0.0; channels * plane_q];
    for u in 0..plane_q {
        let weights = c.softmax_row(u, temperature);
        for ch in 0..channels {
            let plane = &src[ch * plane_s..(ch + 1) * plane_s];
            let v: f64 = weights.iter().zip(plane).map(|(w, v)| w * v).sum();
            // rounding can push a convex combination one ulp past the hull
            data[ch * plane_q + u] = v.clamp(bounds[ch].0, bounds[ch].1);
        }
    }
    LatentGrid::new(channels, qh, qw, data)
}

/// Softmax-expected source coordinate for every query position.
pub fn soft_argmax_flow(c: &CorrelationMap, temperature: f64) -> Result<FlowField> {
    check_temperature(temperature)?;
    let (qh, qw) = c.query_dims();
    let (_, sw) = c.source_dims();
    let positions = (0..c.rows())
        .map(|u| {
            let weights = c.softmax_row(u, temperature);
            let (mut y, mut x) = (0.0, 0.0);
            for (v, wv) in weights.iter().enumerate() {
                y += wv * (v / sw) as f64;
                x += wv * (v % sw) as f64;
            }
            Position::new(y, x)
        })
        .collect();
    FlowField::new(qh, qw, positions)
}

/// `M(u) = ‖u − ψ_bwd(round(ψ_fwd(u)))‖² < γ` for explicit flows.
/// `fwd` maps query cells into the source grid, `bwd` maps source cells back.
pub fn cycle_mask_from_flows(fwd: &FlowField, bwd: &FlowField, gamma: f64) -> Result<ConfidenceMask> {
    if !(gamma >= 0.0) {
        return invalid(format!("gamma must be non-negative, got {gamma}"));
    }
    let flags = (0..fwd.height() * fwd.width())
        .map(|u| {
            let here = Position::new((u / fwd.width()) as f64, (u % fwd.width()) as f64);
            let (sy, sx) = fwd.positions()[u].nearest_cell(bwd.height(), bwd.width());
            here.squared_distance(&bwd.at(sy, sx)) < gamma
        })
        .collect();
    ConfidenceMask::new(fwd.height(), fwd.width(), flags)
}

/// Cycle-consistency mask from a forward map and its reverse-direction map.
pub fn cycle_confidence_mask(
    c_fwd: &CorrelationMap,
    c_bwd: &CorrelationMap,
    gamma: f64,
    temperature: f64,
) -> Result<ConfidenceMask> {
    if c_bwd.query_dims() != c_fwd.source_dims() || c_bwd.source_dims() != c_fwd.query_dims() {
        return mismatch("cycle_confidence_mask: backward map is not the reverse of the forward map");
    }
    let fwd = soft_argmax_flow(c_fwd, temperature)?;
    let bwd = soft_argmax_flow(c_bwd, temperature)?;
    cycle_mask_from_flows(&fwd, &bwd, gamma)
}

/// Iteration features: `patch(r̃) ‖ w_c · patch(d_x)`.
pub fn iter_features(r_tilde: &LatentGrid, d_x: &LatentGrid, cfg: &DescriptorConfig) -> Result<FeatureGrid> {
    if r_tilde.spatial() != d_x.spatial() {
        return mismatch(format!("iter_features: {:?} vs {:?}", r_tilde.spatial(), d_x.spatial()));
    }
    let own = patch_descriptor(r_tilde, cfg)?;
    let cond = patch_descriptor(d_x, cfg)?.scaled(cfg.condition_weight)?;
    own.concat(&cond)
}

/// The feature extractors used for matching: `F_X`, `F_Y` and the iteration
/// extractor, plus the exemplar-side features the iteration features are
/// correlated against.
pub trait CorrespondenceEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn descriptor(&self) -> &DescriptorConfig;
    fn condition_features(&self, d_x: &LatentGrid) -> Result<FeatureGrid>;
    fn exemplar_features(&self, d_y: &LatentGrid) -> Result<FeatureGrid>;
    fn iteration_features(&self, r_tilde: &LatentGrid, d_x: &LatentGrid) -> Result<FeatureGrid>;
    /// Must have the same dimension as [`Self::iteration_features`].
    fn exemplar_iteration_features(&self, d_y: &LatentGrid) -> Result<FeatureGrid>;
}

/// Plain patch descriptors for both domains. The exemplar iteration
/// features are `patch(d_y) ‖ w_c · patch(d_y)`, i.e. `iter_features(d_y, d_y)`.
#[derive(Debug, Clone, Default)]
pub struct PatchEncoder {
    cfg: DescriptorConfig,
}

impl PatchEncoder {
    pub fn new(cfg: DescriptorConfig) -> Self {
        Self { cfg }
    }
}

impl CorrespondenceEncoder for PatchEncoder {
    fn name(&self) -> &str {
        "patch"
    }

    fn descriptor(&self) -> &DescriptorConfig {
        &self.cfg
    }

    fn condition_features(&self, d_x: &LatentGrid) -> Result<FeatureGrid> {
        patch_descriptor(d_x, &self.cfg)
    }

    fn exemplar_features(&self, d_y: &LatentGrid) -> Result<FeatureGrid> {
        patch_descriptor(d_y, &self.cfg)
    }

    fn iteration_features(&self, r_tilde: &LatentGrid, d_x: &LatentGrid) -> Result<FeatureGrid> {
        iter_features(r_tilde, d_x, &self.cfg)
    }

    fn exemplar_iteration_features(&self, d_y: &LatentGrid) -> Result<FeatureGrid> {
        iter_features(d_y, d_y, &self.cfg)
    }
}

/// Channel-mean of a condition latent rescaled from `[−1, 1]` to `[0, 1]`:
/// the fraction of edge pixels in each cell of an edge map.
pub fn condition_boundary_map(d_x: &LatentGrid) -> Result<LatentGrid> {
    let (c, h, w) = d_x.shape();
    LatentGrid::from_fn(1, h, w, |_, y, x| (0..c).map(|ch| (d_x.get(ch, y, x) + 1.0) / 2.0).sum::<f64>() / c as f64)
}

/// Foreground of an edge-map latent: every cell not reachable from the grid
/// border through edge-free cells (4-connected). Cells holding any edge
/// pixel count as foreground.
pub fn condition_region_map(d_x: &LatentGrid) -> Result<LatentGrid> {
    let boundary = condition_boundary_map(d_x)?;
    let (h, w) = boundary.spatial();
    let wall: Vec<bool> = boundary.data().iter().map(|&v| v > 1e-9).collect();
    let mut outside = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w)
        .filter(|&p| {
            let (y, x) = (p / w, p % w);
            (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !wall[p]
        })
        .collect();
    for &p in &stack {
        outside[p] = true;
    }
    while let Some(p) = stack.pop() {
        let (y, x) = (p / w, p % w);
        let neighbours = [
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
        ];
        for q in neighbours.into_iter().flatten() {
            if !outside[q] && !wall[q] {
                outside[q] = true;
                stack.push(q);
            }
        }
    }
    LatentGrid::new(1, h, w, outside.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect())
}

/// Foreground of an appearance latent: cells whose colour is farther than
/// `threshold · max` from the background colour, taken as the per-channel
/// median over the border cells.
pub fn exemplar_region_map(d_y: &LatentGrid, threshold: f64) -> Result<LatentGrid> {
    let (c, h, w) = d_y.shape();
    let background: Vec<f64> = (0..c)
        .map(|ch| {
            let mut border: Vec<f64> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| y == 0 || x == 0 || y + 1 == h || x + 1 == w)
                .map(|(y, x)| d_y.get(ch, y, x))
                .collect();
            border.sort_by(f64::total_cmp);
            let m = border.len() / 2;
            if border.len() % 2 == 1 {
                border[m]
            } else {
                0.5 * (border[m - 1] + border[m])
            }
        })
        .collect();
    let dist = LatentGrid::from_fn(1, h, w, |_, y, x| {
        (0..c).map(|ch| (d_y.get(ch, y, x) - background[ch]).powi(2)).sum::<f64>().sqrt()
    })?;
    let peak = dist.data().iter().cloned().fold(0.0, f64::max);
    dist.map(|v| if peak > 0.0 && v > threshold * peak { 1.0 } else { 0.0 })
}

/// Low-frequency sinusoids of each coordinate; their dot product peaks at
/// zero displacement and decays with distance.
pub fn positional_features(h: usize, w: usize) -> Result<FeatureGrid> {
    const OCTAVES: usize = 3;
    let dim = 4 * OCTAVES;
    let plane = h * w;
    let mut data = vec![0.0; dim * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for j in 0..OCTAVES {
                let scale = std::f64::consts::PI * (1 << j) as f64;
                let (ay, ax) = (scale * y as f64 / h as f64, scale * x as f64 / w as f64);
                for (k, v) in [ay.cos(), ay.sin(), ax.cos(), ax.sin()].into_iter().enumerate() {
                    data[(4 * j + k) * plane + p] = v / (2.0 * OCTAVES as f64).sqrt();
                }
            }
        }
    }
    FeatureGrid::new(dim, h, w, data)
}

/// Cross-domain matching through foreground regions: both domains are
/// reduced to a binary region map and described by its mean-subtracted
/// patches of radius `context_radius` plus a constant `flat_bias` entry, so
/// featureless neighbourhoods match each other instead of everything.
///
/// Iteration features prepend an appearance block (`patch(r̃)` with the same
/// bias entry) and, with `iterate_structure`, the region features of `r̃`
/// itself, matched against the same blocks computed on the exemplar.
#[derive(Debug, Clone)]
pub struct StructureEncoder {
    cfg: DescriptorConfig,
    pub context_radius: usize,
    pub flat_bias: f64,
    pub region_threshold: f64,
    pub iterate_structure: bool,
    /// Scale of the positional tie-break entries.
    pub position_weight: f64,
    /// Weight of the unit-normalised appearance block in iteration features;
    /// the unit-normalised region block is weighted by `condition_weight`.
    pub appearance_weight: f64,
}

impl Default for StructureEncoder {
    fn default() -> Self {
        Self::new(DescriptorConfig::default())
    }
}

impl StructureEncoder {
    pub fn new(cfg: DescriptorConfig) -> Self {
        Self {
            cfg,
            context_radius: 3,
            flat_bias: 0.05,
            region_threshold: 0.02,
            iterate_structure: false,
            position_weight: 0.2,
            appearance_weight: 0.1,
        }
    }

    fn with_bias(&self, f: FeatureGrid) -> Result<FeatureGrid> {
        let (h, w) = f.spatial();
        let f = f.concat(&FeatureGrid::new(1, h, w, vec![self.flat_bias; h * w])?)?;
        if self.position_weight > 0.0 {
            f.concat(&positional_features(h, w)?.scaled(self.position_weight)?)
        } else {
            Ok(f)
        }
    }

    fn describe(&self, region: &LatentGrid) -> Result<FeatureGrid> {
        let (h, w) = region.spatial();
        let radius = self.context_radius.min(h.min(w) / 2);
        self.with_bias(patch_descriptor(region, &DescriptorConfig { patch_radius: radius, ..self.cfg })?)
    }

    fn appearance(&self, g: &LatentGrid) -> Result<FeatureGrid> {
        let mut own = self.with_bias(patch_descriptor(g, &self.cfg)?)?;
        if self.iterate_structure {
            own = own.concat(&self.exemplar_features(g)?)?;
        }
        l2_normalize_vectors(&own).scaled(self.appearance_weight)
    }

    fn weighted_region(&self, f: FeatureGrid) -> Result<FeatureGrid> {
        l2_normalize_vectors(&f).scaled(self.cfg.condition_weight)
    }
}

impl CorrespondenceEncoder for StructureEncoder {
    fn name(&self) -> &str {
        "structure"
    }

    fn descriptor(&self) -> &DescriptorConfig {
        &self.cfg
    }

    fn condition_features(&self, d_x: &LatentGrid) -> Result<FeatureGrid> {
        self.describe(&condition_region_map(d_x)?)
    }

    fn exemplar_features(&self, d_y: &LatentGrid) -> Result<FeatureGrid> {
        self.describe(&exemplar_region_map(d_y, self.region_threshold)?)
    }

    fn iteration_features(&self, r_tilde: &LatentGrid, d_x: &LatentGrid) -> Result<FeatureGrid> {
        if r_tilde.spatial() != d_x.spatial() {
            return mismatch(format!("iteration_features: {:?} vs {:?}", r_tilde.spatial(), d_x.spatial()));
        }
        self.appearance(r_tilde)?.concat(&self.weighted_region(self.condition_features(d_x)?)?)
    }

    fn exemplar_iteration_features(&self, d_y: &LatentGrid) -> Result<FeatureGrid> {
        self.appearance(d_y)?.concat(&self.weighted_region(self.exemplar_features(d_y)?)?)
    }
}
