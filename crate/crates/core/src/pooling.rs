//! Per-pedestrian neighbourhood tensors: social (neighbour hidden states),
//! navigation (crossing frequencies) and semantic (class frequencies).
//!
//! All grids use half-open cells `[low, high)` and are flattened row-major
//! with the first grid index running along `x` and the second along `y`.
//! Cells that fall outside a map read as zero.

use crate::maps::{CellHistograms, NavigationMap, NUM_CLASSES};

/// Geometry of the social neighbourhood: `size × size` cells of side
/// `cell_size`, centred on the pedestrian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SocialGrid {
    pub size: usize,
    pub cell_size: f64,
}

impl SocialGrid {
    /// Cell of a neighbour at offset `(dx, dy)`, or `None` outside the grid.
    pub fn cell_of(&self, dx: f64, dy: f64) -> Option<usize> {
        let half = self.size as f64 * self.cell_size / 2.0;
        let m = ((dx + half) / self.cell_size).floor();
        let n = ((dy + half) / self.cell_size).floor();
        let s = self.size as f64;
        (m >= 0.0 && n >= 0.0 && m < s && n < s).then(|| m as usize * self.size + n as usize)
    }
}

/// `(cell, j)` for every neighbour `j ≠ i` inside `i`'s social grid, in
/// ascending `j` order.
pub fn social_cells(i: usize, positions: &[[f64; 2]], grid: &SocialGrid) -> Vec<(usize, usize)> {
    let pi = positions[i];
    positions
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .filter_map(|(j, pj)| grid.cell_of(pj[0] - pi[0], pj[1] - pi[1]).map(|c| (c, j)))
        .collect()
}

/// Dense `size × size × dim` social tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialTensor {
    pub size: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SocialTensor {
    pub fn cell(&self, m: usize, n: usize) -> &[f64] {
        let off = (m * self.size + n) * self.dim;
        &self.data[off..off + self.dim]
    }
}

/// Sums the previous hidden states of `i`'s neighbours per cell. A `None`
/// hidden state (pedestrian without history) contributes nothing.
pub fn social_tensor(i: usize, positions: &[[f64; 2]], hidden_prev: &[Option<&[f64]>], dim: usize, grid: &SocialGrid) -> SocialTensor {
    let mut data = vec![0.0; grid.size * grid.size * dim];
    for (cell, j) in social_cells(i, positions, grid) {
        if let Some(h) = hidden_prev[j] {
            for (d, v) in data[cell * dim..(cell + 1) * dim].iter_mut().zip(h) {
                *d += v;
            }
        }
    }
    SocialTensor {
        size: grid.size,
        dim,
        data,
    }
}

/// First map cell `(row, col)` of the `size × size` block centred on `p`.
fn block_origin(grid: &crate::maps::GridTransform, p: [f64; 2], size: usize) -> (i64, i64) {
    let (r, c) = grid.signed_cell(p);
    let h = (size / 2) as i64;
    (r - h, c - h)
}

/// `size × size` navigation tensor around `p`, as a flat row-major vector.
/// A pedestrian standing outside the map gets an all-zero tensor.
pub fn navigation_tensor(p: [f64; 2], map: &NavigationMap, size: usize) -> Vec<f64> {
    let grid = map.transform();
    let mut out = vec![0.0; size * size];
    let (r, c) = grid.signed_cell(p);
    if !grid.contains(r, c) {
        log::warn!("pedestrian at ({:.2}, {:.2}) is outside the navigation map", p[0], p[1]);
        return out;
    }
    let (r0, c0) = block_origin(grid, p, size);
    for m in 0..size {
        for n in 0..size {
            out[m * size + n] = map.get(r0 + n as i64, c0 + m as i64);
        }
    }
    out
}

/// `size × size × 7` class-frequency tensor around `p`. Cells with no raster
/// pixel inside are zero vectors.
pub fn semantic_tensor(p: [f64; 2], cells: &CellHistograms, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * NUM_CLASSES];
    let (r0, c0) = block_origin(cells.grid(), p, size);
    for m in 0..size {
        for n in 0..size {
            if let Some(counts) = cells.get(r0 + n as i64, c0 + m as i64) {
                let total: u32 = counts.iter().sum();
                if total > 0 {
                    let dst = &mut out[(m * size + n) * NUM_CLASSES..(m * size + n + 1) * NUM_CLASSES];
                    for (d, &k) in dst.iter_mut().zip(counts) {
                        *d = f64::from(k) / f64::from(total);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{GridTransform, SemanticClass, SemanticMap};

    #[test]
    fn lone_pedestrian_is_zero() {
        let grid = SocialGrid { size: 8, cell_size: 0.5 };
        let h = [1.0, 2.0];
        let t = social_tensor(0, &[[0.0, 0.0]], &[Some(&h)], 2, &grid);
        assert!(t.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadrant_cell() {
        let grid = SocialGrid { size: 2, cell_size: 0.5 };
        let hj = [0.25, -1.0, 3.0];
        let t = social_tensor(0, &[[0.0, 0.0], [0.3, 0.3]], &[None, Some(&hj)], 3, &grid);
        assert_eq!(t.cell(1, 1), &hj);
        let nonzero = (0..2).flat_map(|m| (0..2).map(move |n| (m, n))).filter(|&(m, n)| t.cell(m, n).iter().any(|v| *v != 0.0));
        assert_eq!(nonzero.count(), 1);
    }

    #[test]
    fn same_cell_sums() {
        let grid = SocialGrid { size: 4, cell_size: 1.0 };
        let (ha, hb) = ([1.0, 2.0], [10.0, 20.0]);
        let pos = [[0.0, 0.0], [-1.5, 0.2], [-1.2, 0.9]];
        let t = social_tensor(0, &pos, &[None, Some(&ha), Some(&hb)], 2, &grid);
        // offset -1.5 and -1.2 in x → m = 0; 0.2, 0.9 in y → n = 2
        assert_eq!(t.cell(0, 2), &[11.0, 22.0]);
    }

    #[test]
    fn neighbours_outside_grid_are_ignored() {
        let grid = SocialGrid { size: 2, cell_size: 0.5 };
        let h = [1.0];
        let t = social_tensor(0, &[[0.0, 0.0], [0.5, 0.0]], &[None, Some(&h)], 1, &grid);
        assert!(t.data.iter().all(|v| *v == 0.0));
        // lower boundary is inclusive
        let t = social_tensor(0, &[[0.0, 0.0], [-0.5, -0.5]], &[None, Some(&h)], 1, &grid);
        assert_eq!(t.cell(0, 0), &[1.0]);
    }

    fn uniform_nav(value: f64) -> NavigationMap {
        let g = GridTransform::new([0.0, 0.0], 0.1, 100, 100).unwrap();
        NavigationMap::from_values(g, vec![value; g.len()]).unwrap()
    }

    #[test]
    fn uniform_navigation_interior() {
        let t = navigation_tensor([5.0, 5.0], &uniform_nav(0.7), 32);
        assert!(t.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn navigation_at_corner_fills_one_quadrant() {
        let t = navigation_tensor([0.05, 0.05], &uniform_nav(1.0), 32);
        for m in 0..32 {
            for n in 0..32 {
                // pedestrian cell sits at block index 16
                let inside = m >= 16 && n >= 16;
                assert_eq!(t[m * 32 + n] != 0.0, inside, "({m}, {n})");
            }
        }
    }

    #[test]
    fn navigation_outside_map_is_zero() {
        let t = navigation_tensor([-3.0, 5.0], &uniform_nav(1.0), 4);
        assert!(t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_count_map_window() {
        let g = GridTransform::new([0.0, 0.0], 0.1, 100, 100).unwrap();
        let mut vals = vec![0.0; g.len()];
        let (cr, cc) = (40usize, 60usize);
        vals[cr * 100 + cc] = 1.0;
        let map = NavigationMap::from_values(g, vals).unwrap();
        for &(px, py) in &[(6.05, 4.05), (4.45, 5.55), (4.35, 2.45), (7.65, 4.05), (7.55, 4.05)] {
            let t = navigation_tensor([px, py], &map, 32);
            let (r, c) = g.signed_cell([px, py]);
            let within = (cr as i64 - (r - 16)) >= 0 && (cr as i64 - (r - 16)) < 32 && (cc as i64 - (c - 16)) >= 0 && (cc as i64 - (c - 16)) < 32;
            assert_eq!(t.iter().any(|v| *v != 0.0), within, "({px}, {py})");
        }
    }

    fn two_class_map() -> (GridTransform, SemanticMap) {
        // pooling cells of 0.1 m, raster pixels of 0.05 m: 2x2 pixels per cell
        let grid = GridTransform::new([0.0, 0.0], 0.1, 30, 30).unwrap();
        let raster = GridTransform::new([0.0, 0.0], 0.05, 60, 60).unwrap();
        let classes = (0..raster.len())
            .map(|i| if (i % 60) % 2 == 0 { SemanticClass::Road as u8 } else { SemanticClass::Sidewalk as u8 })
            .collect();
        (grid, SemanticMap::new(raster, classes).unwrap())
    }

    #[test]
    fn uniform_road_semantics() {
        let grid = GridTransform::new([0.0, 0.0], 0.1, 30, 30).unwrap();
        let sem = SemanticMap::uniform(grid, SemanticClass::Road);
        let t = semantic_tensor([1.5, 1.5], &sem.cell_histograms(&grid), 20);
        for cell in t.chunks(NUM_CLASSES) {
            assert_eq!(cell, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn half_road_half_sidewalk() {
        let (grid, sem) = two_class_map();
        let t = semantic_tensor([1.5, 1.5], &sem.cell_histograms(&grid), 4);
        for cell in t.chunks(NUM_CLASSES) {
            assert_eq!(cell, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        }
    }

    #[test]
    fn out_of_map_semantics_are_zero() {
        let (grid, sem) = two_class_map();
        let t = semantic_tensor([0.05, 0.05], &sem.cell_histograms(&grid), 4);
        // block starts two cells below and left of the pedestrian
        for m in 0..4 {
            for n in 0..4 {
                let cell = &t[(m * 4 + n) * NUM_CLASSES..(m * 4 + n + 1) * NUM_CLASSES];
                let s: f64 = cell.iter().sum();
                if m < 2 || n < 2 {
                    assert_eq!(s, 0.0);
                } else {
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    // Coordinates on a 1/64 m lattice keep every shift exact in f64.
    fn lattice(lo: i32, hi: i32) -> impl proptest::strategy::Strategy<Value = f64> {
        (lo * 64..hi * 64).prop_map(|k| f64::from(k) / 64.0)
    }

    fn random_maps(seed: u64, origin: [f64; 2]) -> (NavigationMap, SemanticMap, GridTransform) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = GridTransform::new(origin, 0.25, 24, 24).unwrap();
        let nav = NavigationMap::from_values(grid, (0..grid.len()).map(|_| rng.random_range(0.0..4.0)).collect()).unwrap();
        let raster = GridTransform::new([origin[0] + 0.5, origin[1] - 0.25], 0.125, 40, 40).unwrap();
        let classes = (0..raster.len()).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
        (nav, SemanticMap::new(raster, classes).unwrap(), grid)
    }

    fn shifted_maps(nav: &NavigationMap, sem: &SemanticMap, grid: &GridTransform, v: [f64; 2]) -> (NavigationMap, SemanticMap, GridTransform) {
        let move_grid = |g: &GridTransform| GridTransform::new([g.origin[0] + v[0], g.origin[1] + v[1]], g.cell_size, g.rows, g.cols).unwrap();
        let g = move_grid(grid);
        (
            NavigationMap::from_values(g, nav.values().to_vec()).unwrap(),
            SemanticMap::new(move_grid(sem.transform()), sem.classes().to_vec()).unwrap(),
            g,
        )
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensors_are_translation_invariant(
            pos in proptest::collection::vec((lattice(-1, 7), lattice(-1, 7)), 1..8),
            v in (lattice(-20, 20), lattice(-20, 20)),
            seed in any::<u64>(),
        ) {
            let pos: Vec<[f64; 2]> = pos.into_iter().map(|(x, y)| [x, y]).collect();
            let moved: Vec<[f64; 2]> = pos.iter().map(|p| [p[0] + v.0, p[1] + v.1]).collect();
            let hidden: Vec<Vec<f64>> = (0..pos.len()).map(|j| vec![j as f64 + 1.0, -(j as f64)]).collect();
            let refs: Vec<Option<&[f64]>> = hidden.iter().map(|h| Some(h.as_slice())).collect();
            let social = SocialGrid { size: 4, cell_size: 0.5 };
            let (nav, sem, grid) = random_maps(seed, [0.0, 0.0]);
            let (nav2, sem2, grid2) = shifted_maps(&nav, &sem, &grid, [v.0, v.1]);
            let (hist, hist2) = (sem.cell_histograms(&grid), sem2.cell_histograms(&grid2));
            for i in 0..pos.len() {
                prop_assert_eq!(social_tensor(i, &pos, &refs, 2, &social), social_tensor(i, &moved, &refs, 2, &social));
                prop_assert_eq!(navigation_tensor(pos[i], &nav, 6), navigation_tensor(moved[i], &nav2, 6));
                prop_assert_eq!(semantic_tensor(pos[i], &hist, 5), semantic_tensor(moved[i], &hist2, 5));
            }
        }

        #[test]
        fn in_map_semantic_cells_sum_to_one(x in 0.0f64..6.0, y in 0.0f64..6.0, seed in any::<u64>()) {
            let (_, sem, grid) = random_maps(seed, [0.0, 0.0]);
            let t = semantic_tensor([x, y], &sem.cell_histograms(&grid), 5);
            for cell in t.chunks(NUM_CLASSES) {
                let s: f64 = cell.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12, "{}", s);
            }
        }
    }
}
