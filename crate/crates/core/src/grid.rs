use crate::error::{CoreError, Result};

/// Coordinate axis of the structured grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Outward face normal of a boundary cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Face {
    XNeg,
    XPos,
    YNeg,
    YPos,
    ZNeg,
    ZPos,
}

pub const ALL_FACES: [Face; 6] = [
    Face::XNeg,
    Face::XPos,
    Face::YNeg,
    Face::YPos,
    Face::ZNeg,
    Face::ZPos,
];

impl Face {
    pub fn axis(self) -> Axis {
        match self {
            Face::XNeg | Face::XPos => Axis::X,
            Face::YNeg | Face::YPos => Axis::Y,
            Face::ZNeg | Face::ZPos => Axis::Z,
        }
    }

    /// Outward direction along the face axis (-1 or +1).
    pub fn sign(self) -> i64 {
        match self {
            Face::XNeg | Face::YNeg | Face::ZNeg => -1,
            Face::XPos | Face::YPos | Face::ZPos => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Face::XNeg => "x-",
            Face::XPos => "x+",
            Face::YNeg => "y-",
            Face::YPos => "y+",
            Face::ZNeg => "z-",
            Face::ZPos => "z+",
        }
    }
}

/// Structured Cartesian grid of cubic cells.
#[derive(Debug, Clone)]
pub struct Grid {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// Edge length of a cubic cell (m).
    pub cell_size: f64,
    /// Cell volume (m^3).
    pub cell_volume: f64,
    /// Boundary cells with their outward face normals, ordered by cell index.
    pub surface_cells: Vec<(usize, Vec<Face>)>,
    /// Axis of largest diffusivity for anisotropic materials.
    pub fiber_axis: Axis,
}

/// Builds a grid with bijective cell indexing and a complete boundary-cell
/// enumeration. The index of cell (i, j, k) is `i + n_x * (j + n_y * k)`.
pub fn build_grid(n_x: usize, n_y: usize, n_z: usize, cell_size: f64) -> Result<Grid> {
    if n_x == 0 || n_y == 0 || n_z == 0 {
        return Err(CoreError::InvalidArgument(
            "cell counts must be positive".into(),
        ));
    }
    if !(cell_size > 0.0) {
        return Err(CoreError::InvalidArgument(
            "cell_size must be positive".into(),
        ));
    }
    let mut surface_cells = Vec::new();
    for k in 0..n_z {
        for j in 0..n_y {
            for i in 0..n_x {
                let mut faces = Vec::new();
                if i == 0 {
                    faces.push(Face::XNeg);
                }
                if i + 1 == n_x {
                    faces.push(Face::XPos);
                }
                if j == 0 {
                    faces.push(Face::YNeg);
                }
                if j + 1 == n_y {
                    faces.push(Face::YPos);
                }
                if k == 0 {
                    faces.push(Face::ZNeg);
                }
                if k + 1 == n_z {
                    faces.push(Face::ZPos);
                }
                if !faces.is_empty() {
                    surface_cells.push((i + n_x * (j + n_y * k), faces));
                }
            }
        }
    }
    surface_cells.sort_by_key(|(idx, _)| *idx);
    Ok(Grid {
        n_x,
        n_y,
        n_z,
        cell_size,
        cell_volume: cell_size * cell_size * cell_size,
        surface_cells,
        fiber_axis: Axis::X,
    })
}

impl Grid {
    pub fn cell_count(&self) -> usize {
        self.n_x * self.n_y * self.n_z
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.n_x && j < self.n_y && k < self.n_z);
        i + self.n_x * (j + self.n_y * k)
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.n_x;
        let j = (idx / self.n_x) % self.n_y;
        let k = idx / (self.n_x * self.n_y);
        (i, j, k)
    }

    /// Neighbor cell across the given face, if it exists.
    pub fn neighbor(&self, idx: usize, face: Face) -> Option<usize> {
        let (i, j, k) = self.coords(idx);
        let (mut i, mut j, mut k) = (i as i64, j as i64, k as i64);
        match face.axis() {
            Axis::X => i += face.sign(),
            Axis::Y => j += face.sign(),
            Axis::Z => k += face.sign(),
        }
        if i < 0
            || j < 0
            || k < 0
            || i >= self.n_x as i64
            || j >= self.n_y as i64
            || k >= self.n_z as i64
        {
            None
        } else {
            Some(self.index(i as usize, j as usize, k as usize))
        }
    }

    pub fn is_surface_cell(&self, idx: usize) -> bool {
        let (i, j, k) = self.coords(idx);
        i == 0
            || j == 0
            || k == 0
            || i + 1 == self.n_x
            || j + 1 == self.n_y
            || k + 1 == self.n_z
    }

    pub fn face_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    /// All cells lying on one boundary face of the particle, ordered by index.
    pub fn face_cells(&self, face: Face) -> Vec<usize> {
        let fixed = |i: usize, n: usize| match face.sign() {
            -1 => i == 0,
            _ => i + 1 == n,
        };
        (0..self.cell_count())
            .filter(|&idx| {
                let (i, j, k) = self.coords(idx);
                match face.axis() {
                    Axis::X => fixed(i, self.n_x),
                    Axis::Y => fixed(j, self.n_y),
                    Axis::Z => fixed(k, self.n_z),
                }
            })
            .collect()
    }

    /// Centered rectangular patch of `a x b` cells on a boundary face. The
    /// in-face axes are taken in axis order (e.g. (j, k) for an x face).
    pub fn centered_patch(&self, face: Face, a: usize, b: usize) -> Result<Vec<usize>> {
        let (na, nb) = match face.axis() {
            Axis::X => (self.n_y, self.n_z),
            Axis::Y => (self.n_x, self.n_z),
            Axis::Z => (self.n_x, self.n_y),
        };
        if a > na || b > nb {
            return Err(CoreError::InvalidArgument(format!(
                "patch {a}x{b} does not fit on face {} ({na}x{nb})",
                face.label()
            )));
        }
        let (a0, b0) = ((na - a) / 2, (nb - b) / 2);
        let cells = self
            .face_cells(face)
            .into_iter()
            .filter(|&idx| {
                let (i, j, k) = self.coords(idx);
                let (u, v) = match face.axis() {
                    Axis::X => (j, k),
                    Axis::Y => (i, k),
                    Axis::Z => (i, j),
                };
                u >= a0 && u < a0 + a && v >= b0 && v < b0 + b
            })
            .collect();
        Ok(cells)
    }

    /// Faces orthogonal to the fiber axis.
    pub fn fiber_orthogonal_faces(&self) -> [Face; 2] {
        match self.fiber_axis {
            Axis::X => [Face::XNeg, Face::XPos],
            Axis::Y => [Face::YNeg, Face::YPos],
            Axis::Z => [Face::ZNeg, Face::ZPos],
        }
    }

    /// True if the cell touches more than one boundary face (edge or corner).
    pub fn is_edge_or_corner(&self, idx: usize) -> bool {
        self.surface_cells
            .binary_search_by_key(&idx, |(c, _)| *c)
            .map(|pos| self.surface_cells[pos].1.len() > 1)
            .unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grid_counts() {
        let g = build_grid(10, 20, 5, 1e-3).unwrap();
        assert_eq!(g.cell_count(), 1000);
        assert_eq!(g.surface_cells.len(), 568);
        assert!((g.cell_volume - 1e-9).abs() < 1e-24);
    }

    #[test]
    fn single_cell_has_six_normals() {
        let g = build_grid(1, 1, 1, 1e-3).unwrap();
        assert_eq!(g.cell_count(), 1);
        assert_eq!(g.surface_cells.len(), 1);
        assert_eq!(g.surface_cells[0].1.len(), 6);
    }

    #[test]
    fn three_cube_boundary() {
        let g = build_grid(3, 3, 3, 1e-3).unwrap();
        assert_eq!(g.surface_cells.len(), 26);
        assert!(!g.is_surface_cell(g.index(1, 1, 1)));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(build_grid(0, 3, 3, 1e-3).is_err());
        assert!(build_grid(3, 3, 3, 0.0).is_err());
        assert!(build_grid(3, 3, 3, -1.0).is_err());
    }

    #[test]
    fn reference_mask_patch() {
        let g = build_grid(10, 20, 5, 1e-3).unwrap();
        let mask = g.centered_patch(Face::XPos, 17, 3).unwrap();
        assert_eq!(mask.len(), 51);
        for &c in &mask {
            assert!(g.is_surface_cell(c));
            let (i, _, _) = g.coords(c);
            assert_eq!(i, 9);
        }
    }

    #[test]
    fn index_bijection() {
        let g = build_grid(4, 5, 3, 1e-3).unwrap();
        for idx in 0..g.cell_count() {
            let (i, j, k) = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn neighbors_are_symmetric() {
        let g = build_grid(3, 4, 2, 1e-3).unwrap();
        for idx in 0..g.cell_count() {
            for face in ALL_FACES {
                if let Some(nb) = g.neighbor(idx, face) {
                    let back = match face {
                        Face::XNeg => Face::XPos,
                        Face::XPos => Face::XNeg,
                        Face::YNeg => Face::YPos,
                        Face::YPos => Face::YNeg,
                        Face::ZNeg => Face::ZPos,
                        Face::ZPos => Face::ZNeg,
                    };
                    assert_eq!(g.neighbor(nb, back), Some(idx));
                }
            }
        }
    }
}
