//! Spatial weight matrices: construction, validation, normalization, persistence.
//!
//! A [`SpatialWeightSet`] holds the ordered, non-stochastic n-by-n weight
//! matrices of a model. Entries are non-negative with zero diagonals; weights
//! are stored dense since every experiment in this crate runs at desk scale
//! (n up to a few hundred). Sets are immutable after construction and safe to
//! share across threads.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row sums must match 1 within this tolerance for a matrix to count as
/// row-normalized.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// An ordered set of validated spatial weight matrices `M_1..M_p`.
#[derive(Debug, Clone)]
pub struct SpatialWeightSet {
    n: usize,
    mats: Vec<DMatrix<f64>>,
    row_normalized: Vec<bool>,
}

impl SpatialWeightSet {
    /// Validate and wrap a set of weight matrices.
    ///
    /// Every matrix must be square of the same size, with finite non-negative
    /// entries and an exactly zero diagonal. Signed or general asymmetric
    /// weight schemes are rejected here by design.
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::InvalidWeights("empty weight set".into()));
        }
        let n = mats[0].nrows();
        for (l, m) in mats.iter().enumerate() {
            if m.nrows() != m.ncols() {
                return Err(Error::InvalidWeights(format!(
                    "matrix {} is {}x{}, not square",
                    l + 1,
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "matrix {} has n={}, expected {}",
                    l + 1,
                    m.nrows(),
                    n
                )));
            }
            for i in 0..n {
                if m[(i, i)] != 0.0 {
                    return Err(Error::InvalidWeights(format!(
                        "matrix {} has nonzero diagonal at ({i},{i})",
                        l + 1
                    )));
                }
                for j in 0..n {
                    let w = m[(i, j)];
                    if !w.is_finite() {
                        return Err(Error::InvalidWeights(format!(
                            "matrix {} has non-finite entry at ({i},{j})",
                            l + 1
                        )));
                    }
                    if w < 0.0 {
                        return Err(Error::InvalidWeights(format!(
                            "matrix {} has negative entry {w} at ({i},{j})",
                            l + 1
                        )));
                    }
                }
            }
        }
        let row_normalized = mats.iter().map(|m| is_row_normalized(m)).collect();
        Ok(SpatialWeightSet { n, mats, row_normalized })
    }

    /// Cross-section size n.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Spatial lag order p (number of matrices).
    pub fn order(&self) -> usize {
        self.mats.len()
    }

    pub fn matrix(&self, l: usize) -> &DMatrix<f64> {
        &self.mats[l]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn is_matrix_row_normalized(&self, l: usize) -> bool {
        self.row_normalized[l]
    }

    /// True when every matrix in the set is row-normalized.
    pub fn all_row_normalized(&self) -> bool {
        self.row_normalized.iter().all(|&b| b)
    }

    /// Largest infinity norm (max absolute row sum) across the set.
    pub fn max_inf_norm(&self) -> f64 {
        self.mats
            .iter()
            .map(|m| {
                (0..m.nrows())
                    .map(|i| m.row(i).iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Divide each nonzero row by its sum. Zero rows (islands) stay zero;
    /// downstream estimators must not assume irreducibility.
    pub fn row_normalize(&self) -> SpatialWeightSet {
        let mats = self
            .mats
            .iter()
            .map(|m| {
                let mut out = m.clone();
                for i in 0..out.nrows() {
                    let s: f64 = out.row(i).iter().sum();
                    if s > 0.0 {
                        for j in 0..out.ncols() {
                            out[(i, j)] /= s;
                        }
                    }
                }
                out
            })
            .collect::<Vec<_>>();
        let row_normalized = mats.iter().map(|m| is_row_normalized(m)).collect();
        SpatialWeightSet { n: self.n, mats, row_normalized }
    }
}

fn is_row_normalized(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| {
        let s: f64 = m.row(i).iter().sum();
        s == 0.0 || (s - 1.0).abs() <= ROW_SUM_TOL
    })
}

/// Queen contiguity on a `side x side` lattice: cells are neighbors when
/// their Chebyshev distance is 1 (all eight surrounding cells). Returns a
/// single row-normalized matrix with n = side^2.
pub fn build_queen_contiguity(side: usize) -> Result<SpatialWeightSet> {
    if side < 2 {
        return Err(Error::InvalidLattice(format!(
            "queen contiguity needs side >= 2, got {side}"
        )));
    }
    let w = queen_ring(side, 1);
    Ok(SpatialWeightSet::new(vec![w])?.row_normalize())
}

/// First- and second-order queen contiguity on a `side x side` lattice.
/// M_1 links first-lag neighbors, M_2 links cells at queen graph-distance
/// exactly two; the supports are disjoint and each matrix is row-normalized
/// independently.
pub fn build_second_order_contiguity(side: usize) -> Result<SpatialWeightSet> {
    if side < 3 {
        return Err(Error::InvalidLattice(format!(
            "second-order contiguity needs side >= 3, got {side}"
        )));
    }
    let m1 = queen_ring(side, 1);
    let m2 = queen_ring(side, 2);
    Ok(SpatialWeightSet::new(vec![m1, m2])?.row_normalize())
}

// On a full rectangular lattice the queen graph distance equals the
// Chebyshev distance, so ring d is just the set of cells at that distance.
fn queen_ring(side: usize, dist: usize) -> DMatrix<f64> {
    let n = side * side;
    let mut w = DMatrix::zeros(n, n);
    for r1 in 0..side {
        for c1 in 0..side {
            let i = r1 * side + c1;
            for r2 in 0..side {
                for c2 in 0..side {
                    let j = r2 * side + c2;
                    if i == j {
                        continue;
                    }
                    let d = r1.abs_diff(r2).max(c1.abs_diff(c2));
                    if d == dist {
                        w[(i, j)] = 1.0;
                    }
                }
            }
        }
    }
    w
}

/// Write a weight set as UTF-8 text: a `n p` header line, then one
/// `l i j w` line per nonzero entry (1-based matrix index, 0-based cell
/// indices). Floats use the shortest representation that round-trips.
pub fn save_weights(w: &SpatialWeightSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    let _ = writeln!(buf, "{} {}", w.n(), w.order());
    for (l, m) in w.matrices().iter().enumerate() {
        for i in 0..w.n() {
            for j in 0..w.n() {
                let v = m[(i, j)];
                if v != 0.0 {
                    let _ = writeln!(buf, "{} {} {} {}", l + 1, i, j, v);
                }
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a weight set written by [`save_weights`]. Lines starting with `#`
/// are comments. Out-of-range indices, nonzero diagonals, duplicates and
/// malformed rows are rejected with the offending line number.
pub fn load_weights(path: impl AsRef<Path>) -> Result<SpatialWeightSet> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(idx, l)| (idx + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&display, 1, "missing `n p` header"))?;
    let mut hp = header.split_whitespace();
    let n: usize = hp
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(&display, hline, "header must be `n p`"))?;
    let p: usize = hp
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(&display, hline, "header must be `n p`"))?;
    if hp.next().is_some() {
        return Err(Error::parse(&display, hline, "header must be exactly `n p`"));
    }
    if n == 0 || p == 0 {
        return Err(Error::parse(&display, hline, "n and p must be positive"));
    }

    let mut mats = vec![DMatrix::<f64>::zeros(n, n); p];
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::parse(&display, lineno, "expected `l i j w`"));
        }
        let l: usize = toks[0]
            .parse()
            .map_err(|_| Error::parse(&display, lineno, "bad matrix index"))?;
        let i: usize = toks[1]
            .parse()
            .map_err(|_| Error::parse(&display, lineno, "bad row index"))?;
        let j: usize = toks[2]
            .parse()
            .map_err(|_| Error::parse(&display, lineno, "bad column index"))?;
        let w: f64 = toks[3]
            .parse()
            .map_err(|_| Error::parse(&display, lineno, "bad weight"))?;
        if l == 0 || l > p {
            return Err(Error::parse(
                &display,
                lineno,
                format!("matrix index {l} out of range 1..={p}"),
            ));
        }
        if i >= n || j >= n {
            return Err(Error::parse(
                &display,
                lineno,
                format!("cell index ({i},{j}) out of range for n={n}"),
            ));
        }
        if i == j && w != 0.0 {
            return Err(Error::parse(
                &display,
                lineno,
                format!("nonzero diagonal entry at ({i},{i})"),
            ));
        }
        if !seen.insert((l, i, j)) {
            return Err(Error::parse(
                &display,
                lineno,
                format!("duplicate entry for ({l},{i},{j})"),
            ));
        }
        mats[l - 1][(i, j)] = w;
    }
    SpatialWeightSet::new(mats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queen_side2_is_complete_graph() {
        let w = build_queen_contiguity(2).unwrap();
        assert_eq!(w.n(), 4);
        let m = w.matrix(0);
        for i in 0..4 {
            let nonzero = (0..4).filter(|&j| m[(i, j)] > 0.0).count();
            assert_eq!(nonzero, 3);
            for j in 0..4 {
                if i != j {
                    assert!((m[(i, j)] - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn queen_side3_degree_pattern() {
        let w = build_queen_contiguity(3).unwrap();
        let m = w.matrix(0);
        // corners 3 neighbors, edges 5, center 8
        let expected = [3, 5, 3, 5, 8, 5, 3, 5, 3];
        for (i, &deg) in expected.iter().enumerate() {
            let nonzero = (0..9).filter(|&j| m[(i, j)] > 0.0).count();
            assert_eq!(nonzero, deg, "row {i}");
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < ROW_SUM_TOL);
        }
    }

    #[test]
    fn queen_side8_matches_design_size() {
        let w = build_queen_contiguity(8).unwrap();
        assert_eq!(w.n(), 64);
        assert!(w.all_row_normalized());
    }

    #[test]
    fn queen_support_is_symmetric() {
        let w = build_queen_contiguity(5).unwrap();
        let m = w.matrix(0);
        for i in 0..w.n() {
            for j in 0..w.n() {
                assert_eq!(m[(i, j)] > 0.0, m[(j, i)] > 0.0);
            }
        }
    }

    #[test]
    fn second_order_disjoint_supports() {
        for side in 3..=7 {
            let w = build_second_order_contiguity(side).unwrap();
            let (m1, m2) = (w.matrix(0), w.matrix(1));
            for i in 0..w.n() {
                for j in 0..w.n() {
                    assert!(
                        m1[(i, j)] * m2[(i, j)] == 0.0,
                        "overlapping support at ({i},{j}), side {side}"
                    );
                }
            }
        }
    }

    #[test]
    fn second_order_side7_size() {
        let w = build_second_order_contiguity(7).unwrap();
        assert_eq!(w.n(), 49);
        assert_eq!(w.order(), 2);
    }

    #[test]
    fn second_order_side3_center_has_no_distance_two() {
        let w = build_second_order_contiguity(3).unwrap();
        let m2 = w.matrix(1);
        // center cell of the 3x3 lattice is index 4; everything else is adjacent
        assert!(m2.row(4).iter().all(|&v| v == 0.0));
        // corner rows do have distance-2 cells
        assert!(m2.row(0).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn lattice_size_limits() {
        assert!(matches!(build_queen_contiguity(1), Err(Error::InvalidLattice(_))));
        assert!(matches!(build_second_order_contiguity(2), Err(Error::InvalidLattice(_))));
    }

    #[test]
    fn row_normalize_divides_and_keeps_zero_rows() {
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 2.0;
        m[(0, 2)] = 2.0;
        // row 1 is an island
        m[(2, 0)] = 5.0;
        let w = SpatialWeightSet::new(vec![m]).unwrap();
        let norm = w.row_normalize();
        let nm = norm.matrix(0);
        assert_eq!(nm[(0, 1)], 0.5);
        assert_eq!(nm[(0, 2)], 0.5);
        assert!(nm.row(1).iter().all(|&v| v == 0.0 && !v.is_nan()));
        assert_eq!(nm[(2, 0)], 1.0);
        assert!(norm.all_row_normalized());
    }

    #[test]
    fn row_normalize_is_idempotent() {
        let w = build_queen_contiguity(4).unwrap();
        let again = w.row_normalize();
        for l in 0..w.order() {
            assert_eq!(w.matrix(l), again.matrix(l));
        }
    }

    #[test]
    fn negative_weights_rejected() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = -1.0;
        assert!(matches!(SpatialWeightSet::new(vec![m]), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn nonzero_diagonal_rejected() {
        let mut m = DMatrix::zeros(2, 2);
        m[(1, 1)] = 0.5;
        assert!(matches!(SpatialWeightSet::new(vec![m]), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("starch-wtest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("queen3.txt");
        let w = build_queen_contiguity(3).unwrap();
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.n(), w.n());
        assert_eq!(back.order(), w.order());
        for l in 0..w.order() {
            assert_eq!(w.matrix(l), back.matrix(l), "matrix {l} not identical");
        }
        assert!(back.all_row_normalized());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn file_rejects_bad_entries() {
        let dir = std::env::temp_dir().join(format!("starch-wbad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let diag = dir.join("diag.txt");
        std::fs::write(&diag, "6 1\n1 5 5 0.1\n").unwrap();
        assert!(matches!(load_weights(&diag), Err(Error::Parse { .. })));

        let range = dir.join("range.txt");
        std::fs::write(&range, "4 1\n1 5 0 0.3\n").unwrap();
        assert!(matches!(load_weights(&range), Err(Error::Parse { .. })));

        let lidx = dir.join("lidx.txt");
        std::fs::write(&lidx, "4 1\n2 0 1 0.3\n").unwrap();
        assert!(matches!(load_weights(&lidx), Err(Error::Parse { .. })));

        std::fs::remove_dir_all(&dir).ok();
    }
}
