//! Socially-aware grid planning.
//!
//! Each activity edge with a cost-table entry becomes an interaction segment
//! between the planar positions of its endpoints. A segment penalizes a
//! point `p` at distance `d` from it by `c_rel * (1 - d / R)` when `d < R`
//! and not at all otherwise. Penalties are rasterized onto an occupancy grid
//! and an 8-connected least-cost path is searched, with each step costing
//! `step_length * (1 + cell_total)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::graph::SocialSceneGraph;

/// `(column, row)` grid index.
pub type Cell = (usize, usize);

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("cell {0:?} lies outside the {1}x{2} grid")]
    OutOfBounds(Cell, usize, usize),
    #[error("no path from {start:?} to {goal:?}: {reason}")]
    NoPath {
        start: Cell,
        goal: Cell,
        reason: String,
    },
    #[error("graph has no points to build a grid from")]
    EmptyGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    /// World position of the lower-left corner of cell (0, 0); `z` is the
    /// floor height.
    pub origin: Vec3,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub base_cost: Vec<f64>,
    pub obstacle: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub resolution: f64,
    /// Points between these heights above the floor become obstacles.
    pub min_obstacle_height: f64,
    pub max_obstacle_height: f64,
    /// Free border added around the scene extent, meters.
    pub margin: f64,
    pub humans_as_obstacles: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            min_obstacle_height: 0.1,
            max_obstacle_height: 1.8,
            margin: 0.5,
            humans_as_obstacles: true,
        }
    }
}

impl OccupancyGrid {
    pub fn new(origin: Vec3, resolution: f64, width: usize, height: usize) -> Self {
        assert!(resolution > 0.0, "grid resolution must be positive");
        Self {
            origin,
            resolution,
            width,
            height,
            base_cost: vec![0.0; width * height],
            obstacle: vec![false; width * height],
        }
    }

    /// Projects node point clouds within the obstacle height band onto the
    /// floor plane. The floor is the lowest point of the scene.
    pub fn from_graph(graph: &SocialSceneGraph, config: &GridConfig) -> Result<Self, PlanError> {
        let all: Vec<&Vec3> = graph.nodes().flat_map(|n| n.points()).collect();
        if all.is_empty() {
            return Err(PlanError::EmptyGraph);
        }
        let floor = all.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &all {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let origin = Vec3::new(x0 - config.margin, y0 - config.margin, floor);
        let width = ((x1 - x0 + 2.0 * config.margin) / config.resolution).ceil() as usize + 1;
        let height = ((y1 - y0 + 2.0 * config.margin) / config.resolution).ceil() as usize + 1;
        let mut grid = OccupancyGrid::new(origin, config.resolution, width, height);
        for node in graph.nodes() {
            if node.is_human() && !config.humans_as_obstacles {
                continue;
            }
            for p in node.points() {
                let h = p.z - floor;
                if h < config.min_obstacle_height || h > config.max_obstacle_height {
                    continue;
                }
                if let Some(c) = grid.world_to_cell(p.x, p.y) {
                    grid.set_obstacle(c);
                }
            }
        }
        Ok(grid)
    }

    pub fn index(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.0 < self.width && c.1 < self.height
    }

    pub fn set_obstacle(&mut self, c: Cell) {
        let i = self.index(c);
        self.obstacle[i] = true;
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacle[self.index(c)]
    }

    pub fn cell_center(&self, c: Cell) -> (f64, f64) {
        (
            self.origin.x + (c.0 as f64 + 0.5) * self.resolution,
            self.origin.y + (c.1 as f64 + 0.5) * self.resolution,
        )
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<Cell> {
        let cx = ((x - self.origin.x) / self.resolution).floor();
        let cy = ((y - self.origin.y) / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 {
            return None;
        }
        let c = (cx as usize, cy as usize);
        self.contains(c).then_some(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSegment {
    pub a: Vec3,
    pub b: Vec3,
    pub frame: String,
    pub c_rel: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub c_rel: f64,
    pub radius: f64,
}

/// Frame name to social-cost magnitude and radius of influence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostTable(pub BTreeMap<String, CostEntry>);

impl Default for CostTable {
    fn default() -> Self {
        let talk = CostEntry {
            c_rel: 10.0,
            radius: 1.5,
        };
        let view = CostEntry {
            c_rel: 6.0,
            radius: 3.0,
        };
        CostTable(BTreeMap::from([
            ("SPEAK".to_string(), talk),
            ("LISTEN".to_string(), talk),
            ("INTERACT".to_string(), talk),
            ("SEE".to_string(), view),
        ]))
    }
}

impl CostTable {
    pub fn scaled(&self, factor: f64) -> CostTable {
        CostTable(
            self.0
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        CostEntry {
                            c_rel: v.c_rel * factor,
                            radius: v.radius,
                        },
                    )
                })
                .collect(),
        )
    }
}

/// One segment per activity edge whose frame has a cost entry. Edges in both
/// directions between the same pair under the same frame share a segment.
pub fn extract_segments(graph: &SocialSceneGraph, table: &CostTable) -> Vec<InteractionSegment> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for edge in graph.activity_edges() {
        let Some(entry) = table.0.get(&edge.frame) else {
            continue;
        };
        let pair = (edge.from_id.min(edge.to_id), edge.from_id.max(edge.to_id));
        if !seen.insert((pair, edge.frame.clone())) {
            continue;
        }
        let (Some(a), Some(b)) = (graph.node(pair.0), graph.node(pair.1)) else {
            continue;
        };
        let (a, b) = (a.center(), b.center());
        out.push(InteractionSegment {
            a: Vec3::new(a.x, a.y, 0.0),
            b: Vec3::new(b.x, b.y, 0.0),
            frame: edge.frame.clone(),
            c_rel: entry.c_rel,
            radius: entry.radius,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combination {
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SocialCostField {
    pub segments: Vec<InteractionSegment>,
    #[serde(default)]
    pub combination: Combination,
}

/// Planar distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

pub fn segment_cost(p: (f64, f64), seg: &InteractionSegment) -> f64 {
    let d = point_segment_distance(p, (seg.a.x, seg.a.y), (seg.b.x, seg.b.y));
    if d < seg.radius {
        seg.c_rel * (1.0 - d / seg.radius)
    } else {
        0.0
    }
}

pub fn social_cost_at(p: (f64, f64), field: &SocialCostField) -> f64 {
    let costs = field.segments.iter().map(|s| segment_cost(p, s));
    match field.combination {
        Combination::Max => costs.fold(0.0, f64::max),
        Combination::Sum => costs.sum(),
    }
}

/// Occupancy grid with the social field sampled at every free cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGrid {
    pub grid: OccupancyGrid,
    pub social: Vec<f64>,
}

impl CostGrid {
    /// Base plus social cost of a cell; infinite for obstacles.
    pub fn total(&self, c: Cell) -> f64 {
        let i = self.grid.index(c);
        if self.grid.obstacle[i] {
            f64::INFINITY
        } else {
            self.grid.base_cost[i] + self.social[i]
        }
    }
}

pub fn rasterize_cost(grid: &OccupancyGrid, field: &SocialCostField) -> CostGrid {
    let mut social = vec![0.0; grid.width * grid.height];
    for y in 0..grid.height {
        for x in 0..grid.width {
            let i = grid.index((x, y));
            if !grid.obstacle[i] {
                social[i] = social_cost_at(grid.cell_center((x, y)), field);
            }
        }
    }
    CostGrid {
        grid: grid.clone(),
        social,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub cells: Vec<Cell>,
    /// Geometric length, meters.
    pub length: f64,
    /// Sum of `step_length * social_cost` over entered cells.
    pub social_cost: f64,
    /// The minimized objective.
    pub total_cost: f64,
}

const MOVES: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Free 8-connected neighbors with their step length. Diagonal moves may not
/// cut the corner of an obstacle.
pub fn neighbors(grid: &OccupancyGrid, c: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
    MOVES.iter().filter_map(move |&(dx, dy)| {
        let nx = c.0.checked_add_signed(dx)?;
        let ny = c.1.checked_add_signed(dy)?;
        let n = (nx, ny);
        if !grid.contains(n) || grid.is_obstacle(n) {
            return None;
        }
        if dx != 0 && dy != 0 && (grid.is_obstacle((nx, c.1)) || grid.is_obstacle((c.0, ny))) {
            return None;
        }
        let step = if dx != 0 && dy != 0 {
            std::f64::consts::SQRT_2
        } else {
            1.0
        };
        Some((n, step * grid.resolution))
    })
}

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Least-cost path between two free cells (Dijkstra). Among equal-cost
/// predecessors the lexicographically smallest `(row, column)` wins.
pub fn plan(costs: &CostGrid, start: Cell, goal: Cell) -> Result<Plan, PlanError> {
    let grid = &costs.grid;
    for c in [start, goal] {
        if !grid.contains(c) {
            return Err(PlanError::OutOfBounds(c, grid.width, grid.height));
        }
    }
    let no_path = |reason: &str| PlanError::NoPath {
        start,
        goal,
        reason: reason.to_string(),
    };
    if grid.is_obstacle(start) {
        return Err(no_path("start cell is an obstacle"));
    }
    if grid.is_obstacle(goal) {
        return Err(no_path("goal cell is an obstacle"));
    }
    let n = grid.width * grid.height;
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let s = grid.index(start);
    let g = grid.index(goal);
    dist[s] = 0.0;
    heap.push(Entry {
        cost: 0.0,
        index: s,
    });
    while let Some(Entry { cost, index }) = heap.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        if index == g {
            break;
        }
        let cell = (index % grid.width, index / grid.width);
        for (next, step) in neighbors(grid, cell) {
            let j = grid.index(next);
            if done[j] {
                continue;
            }
            let nd = cost + step * (1.0 + costs.total(next));
            if nd < dist[j] || (nd == dist[j] && index < pred[j]) {
                dist[j] = nd;
                pred[j] = index;
                heap.push(Entry { cost: nd, index: j });
            }
        }
    }
    if !dist[g].is_finite() {
        return Err(no_path("goal unreachable"));
    }
    let mut cells = vec![goal];
    let mut cur = g;
    while cur != s {
        cur = pred[cur];
        cells.push((cur % grid.width, cur / grid.width));
    }
    cells.reverse();
    let mut length = 0.0;
    let mut social = 0.0;
    for w in cells.windows(2) {
        let diagonal = w[0].0 != w[1].0 && w[0].1 != w[1].1;
        let step = if diagonal {
            std::f64::consts::SQRT_2 * grid.resolution
        } else {
            grid.resolution
        };
        length += step;
        social += step * costs.social[grid.index(w[1])];
    }
    Ok(Plan {
        cells,
        length,
        social_cost: social,
        total_cost: dist[g],
    })
}

/// SVG rendering of the cost grid, interaction segments and paths.
pub fn render_svg(
    costs: &CostGrid,
    field: &SocialCostField,
    paths: &[(&Plan, &str, &str)],
) -> String {
    let grid = &costs.grid;
    let px = 8.0;
    let (w, h) = (grid.width as f64 * px, grid.height as f64 * px);
    let max_social = costs.social.iter().cloned().fold(0.0, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" viewBox="0 0 {w} {}">"#,
        h + 20.0,
        h + 20.0
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    // Row 0 is drawn at the bottom so +y points up.
    let to_svg = |c: (f64, f64)| (c.0 * px, h - c.1 * px);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let i = grid.index((x, y));
            let (sx, sy) = to_svg((x as f64, y as f64 + 1.0));
            if grid.obstacle[i] {
                let _ = writeln!(
                    s,
                    r#"<rect x="{sx}" y="{sy}" width="{px}" height="{px}" fill="black"/>"#
                );
            } else if costs.social[i] > 0.0 && max_social > 0.0 {
                let a = (costs.social[i] / max_social).min(1.0) * 0.6;
                let _ = writeln!(
                    s,
                    r#"<rect x="{sx}" y="{sy}" width="{px}" height="{px}" fill="orange" fill-opacity="{a:.3}"/>"#
                );
            }
        }
    }
    let world_to_svg = |p: &Vec3| {
        to_svg((
            (p.x - grid.origin.x) / grid.resolution,
            (p.y - grid.origin.y) / grid.resolution,
        ))
    };
    for seg in &field.segments {
        let (ax, ay) = world_to_svg(&seg.a);
        let (bx, by) = world_to_svg(&seg.b);
        let _ = writeln!(
            s,
            r#"<line x1="{ax}" y1="{ay}" x2="{bx}" y2="{by}" stroke="red" stroke-width="2"><title>{}</title></line>"#,
            seg.frame
        );
    }
    for (plan, color, label) in paths {
        let pts: Vec<String> = plan
            .cells
            .iter()
            .map(|c| {
                let (x, y) = to_svg((c.0 as f64 + 0.5, c.1 as f64 + 0.5));
                format!("{x},{y}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{label}</title></polyline>"#,
            pts.join(" ")
        );
    }
    let mut lx = 4.0;
    for (plan, color, label) in paths {
        let _ = writeln!(
            s,
            r#"<text x="{lx}" y="{}" font-size="11" fill="{color}">{label}: {:.2} m, social {:.2}</text>"#,
            h + 14.0,
            plan.length,
            plan.social_cost
        );
        lx += w / paths.len().max(1) as f64;
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(a: (f64, f64), b: (f64, f64), c_rel: f64, radius: f64) -> InteractionSegment {
        InteractionSegment {
            a: Vec3::new(a.0, a.1, 0.0),
            b: Vec3::new(b.0, b.1, 0.0),
            frame: "SPEAK".into(),
            c_rel,
            radius,
        }
    }

    #[test]
    fn cost_on_segment_and_at_radius() {
        let s = seg((0.0, 0.0), (2.0, 0.0), 10.0, 1.5);
        let f = SocialCostField {
            segments: vec![s],
            combination: Combination::Max,
        };
        assert_eq!(social_cost_at((1.0, 0.0), &f), 10.0);
        assert_eq!(social_cost_at((1.0, 0.75), &f), 5.0);
        assert_eq!(social_cost_at((1.0, 1.5), &f), 0.0);
        assert_eq!(social_cost_at((1.0, 2.0), &f), 0.0);
        // beyond the endpoint the distance is to the endpoint itself
        assert_eq!(social_cost_at((2.75, 0.0), &f), 5.0);
    }

    #[test]
    fn overlapping_segments_take_max_or_sum() {
        let mut f = SocialCostField {
            segments: vec![
                seg((0.0, 0.0), (1.0, 0.0), 3.0, 1.0),
                seg((0.0, 0.0), (1.0, 0.0), 5.0, 1.0),
            ],
            combination: Combination::Max,
        };
        assert_eq!(social_cost_at((0.5, 0.0), &f), 5.0);
        f.combination = Combination::Sum;
        assert_eq!(social_cost_at((0.5, 0.0), &f), 8.0);
    }

    #[test]
    fn empty_field_leaves_grid_unchanged() {
        let grid = OccupancyGrid::new(Vec3::ZERO, 0.1, 5, 5);
        let c = rasterize_cost(&grid, &SocialCostField::default());
        assert!(c.social.iter().all(|&s| s == 0.0));
        assert_eq!(c.grid, grid);
    }

    #[test]
    fn obstacle_inside_radius_stays_impassable() {
        let mut grid = OccupancyGrid::new(Vec3::ZERO, 1.0, 5, 1);
        grid.set_obstacle((2, 0));
        let f = SocialCostField {
            segments: vec![seg((2.5, 0.5), (2.5, 0.5), 10.0, 3.0)],
            combination: Combination::Max,
        };
        let c = rasterize_cost(&grid, &f);
        assert_eq!(c.total((2, 0)), f64::INFINITY);
        assert!(matches!(
            plan(&c, (0, 0), (4, 0)),
            Err(PlanError::NoPath { .. })
        ));
    }

    #[test]
    fn straight_line_without_field() {
        let grid = OccupancyGrid::new(Vec3::ZERO, 0.5, 10, 10);
        let c = rasterize_cost(&grid, &SocialCostField::default());
        let p = plan(&c, (0, 0), (9, 0)).unwrap();
        assert_eq!(p.cells.len(), 10);
        assert!((p.length - 4.5).abs() < 1e-12);
        assert_eq!(p.social_cost, 0.0);
        let d = plan(&c, (0, 0), (9, 9)).unwrap();
        assert!((d.length - 9.0 * 0.5 * std::f64::consts::SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn goal_in_obstacle() {
        let mut grid = OccupancyGrid::new(Vec3::ZERO, 1.0, 4, 4);
        grid.set_obstacle((3, 3));
        let c = rasterize_cost(&grid, &SocialCostField::default());
        assert!(matches!(
            plan(&c, (0, 0), (3, 3)),
            Err(PlanError::NoPath { .. })
        ));
        assert!(matches!(
            plan(&c, (0, 0), (9, 3)),
            Err(PlanError::OutOfBounds(..))
        ));
    }

    #[test]
    fn diagonal_moves_do_not_cut_corners() {
        let mut grid = OccupancyGrid::new(Vec3::ZERO, 1.0, 2, 2);
        grid.set_obstacle((1, 0));
        grid.set_obstacle((0, 1));
        let c = rasterize_cost(&grid, &SocialCostField::default());
        assert!(plan(&c, (0, 0), (1, 1)).is_err());
    }

    #[test]
    fn world_cell_round_trip() {
        let grid = OccupancyGrid::new(Vec3::new(-1.0, -1.0, 0.0), 0.25, 8, 8);
        let c = grid.world_to_cell(0.1, -0.6).unwrap();
        assert_eq!(c, (4, 1));
        let (x, y) = grid.cell_center(c);
        assert_eq!(grid.world_to_cell(x, y), Some(c));
        assert_eq!(grid.world_to_cell(-1.5, 0.0), None);
    }

    #[test]
    fn svg_mentions_paths_and_segments() {
        let grid = OccupancyGrid::new(Vec3::ZERO, 0.5, 6, 6);
        let f = SocialCostField {
            segments: vec![seg((1.0, 1.0), (2.0, 2.0), 10.0, 1.0)],
            combination: Combination::Max,
        };
        let c = rasterize_cost(&grid, &f);
        let p = plan(&c, (0, 0), (5, 5)).unwrap();
        let svg = render_svg(&c, &f, &[(&p, "blue", "social")]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("<line"));
    }
}
