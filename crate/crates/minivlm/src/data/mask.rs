//! Boolean patch-grid masks and their run-length wire form.

use crate::error::{Error, Result};

/// A square boolean grid over the patch lattice, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    side: usize,
    cells: Vec<bool>,
}

impl Mask {
    /// All-false grid of `side`×`side` cells.
    pub fn empty(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Data("mask side must be positive".into()));
        }
        Ok(Self { side, cells: vec![false; side * side] })
    }

    pub fn from_cells(side: usize, cells: Vec<bool>) -> Result<Self> {
        if side == 0 {
            return Err(Error::Data("mask side must be positive".into()));
        }
        if cells.len() != side * side {
            return Err(Error::Data(format!(
                "mask cell count {} does not match side {side}",
                cells.len()
            )));
        }
        Ok(Self { side, cells })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.side && col < self.side, "mask index out of range");
        self.cells[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        assert!(row < self.side && col < self.side, "mask index out of range");
        self.cells[row * self.side + col] = value;
    }

    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn any(&self) -> bool {
        self.cells.iter().any(|&c| c)
    }

    /// True iff every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.side == other.side
            && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    /// Run-length encoding: alternating false/true run lengths, starting
    /// with the false run (which may be 0 when the grid starts true).
    /// Every later run is positive, and the runs sum to side².
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    /// Inverse of [`to_runs`](Self::to_runs); rejects non-canonical input
    /// (zero-length runs after the first, or a total that misses side²).
    pub fn from_runs(side: usize, runs: &[usize]) -> Result<Self> {
        if side == 0 {
            return Err(Error::Data("mask side must be positive".into()));
        }
        if runs.is_empty() {
            return Err(Error::Data("mask runs must be non-empty".into()));
        }
        if runs.iter().skip(1).any(|&r| r == 0) {
            return Err(Error::Data("mask runs after the first must be positive".into()));
        }
        let total: usize = runs.iter().sum();
        if total != side * side {
            return Err(Error::Data(format!(
                "mask runs sum to {total}, expected {} for side {side}",
                side * side
            )));
        }
        let mut cells = Vec::with_capacity(total);
        let mut value = false;
        for &r in runs {
            cells.extend(std::iter::repeat(value).take(r));
            value = !value;
        }
        Ok(Self { side, cells })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_round_trip_all_patterns() {
        let patterns: Vec<Vec<bool>> = vec![
            vec![false; 4],
            vec![true; 4],
            vec![true, false, false, true],
            vec![false, true, true, false],
        ];
        for cells in patterns {
            let m = Mask::from_cells(2, cells).unwrap();
            let runs = m.to_runs();
            assert_eq!(Mask::from_runs(2, &runs).unwrap(), m);
            // Canonical: only the leading run may be zero.
            assert!(runs.iter().skip(1).all(|&r| r > 0));
        }
    }

    #[test]
    fn bad_runs_are_rejected() {
        assert!(Mask::from_runs(2, &[1, 2]).is_err()); // sums to 3, not 4
        assert!(Mask::from_runs(2, &[1, 0, 3]).is_err()); // interior zero
        assert!(Mask::from_runs(0, &[0]).is_err());
        assert!(Mask::from_runs(2, &[]).is_err());
    }

    #[test]
    fn subset_and_counts() {
        let mut small = Mask::empty(3).unwrap();
        small.set(1, 1, true);
        let mut big = small.clone();
        big.set(0, 2, true);
        assert!(small.is_subset_of(&big));
        assert!(!big.is_subset_of(&small));
        assert_eq!(big.count_true(), 2);
        assert!(big.any());
        assert!(!Mask::empty(3).unwrap().any());
    }
}
