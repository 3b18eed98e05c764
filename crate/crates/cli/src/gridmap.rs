//! Spatial grid visualization of labels: the first width*height test
//! patches laid out row-major, one gray level per class index, 255 for
//! cells past the end of the split.

use lczlab_core::Result;
use std::fs;
use std::path::Path;

pub const GRID_SENTINEL: u8 = 255;

pub struct GridReport {
    pub width: usize,
    pub height: usize,
    pub truth: Vec<u8>,
    pub predicted: Vec<u8>,
}

impl GridReport {
    pub fn new(width: usize, height: usize, truths: &[usize], preds: &[usize]) -> Self {
        let cells = width * height;
        let fill = |vals: &[usize]| {
            (0..cells)
                .map(|i| vals.get(i).map_or(GRID_SENTINEL, |&v| v.min(254) as u8))
                .collect()
        };
        GridReport {
            width,
            height,
            truth: fill(truths),
            predicted: fill(preds),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,truth,predicted\n");
        for row in 0..self.height {
            for col in 0..self.width {
                let i = row * self.width + col;
                out.push_str(&format!(
                    "{row},{col},{},{}\n",
                    self.truth[i], self.predicted[i]
                ));
            }
        }
        out
    }
}

/// Binary portable graymap (P5), maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, cells: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(cells);
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_splits_pad_with_the_sentinel() {
        let g = GridReport::new(3, 2, &[0, 1, 2], &[2, 1, 0]);
        assert_eq!(g.truth, [0, 1, 2, 255, 255, 255]);
        assert_eq!(g.predicted, [2, 1, 0, 255, 255, 255]);
    }

    #[test]
    fn pgm_header_is_binary_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        write_pgm(&path, 2, 2, &[0, 1, 2, 255]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 1, 2, 255]);
    }

    #[test]
    fn csv_walks_the_grid_row_major() {
        let g = GridReport::new(2, 1, &[3], &[4]);
        assert_eq!(g.to_csv(), "row,col,truth,predicted\n0,0,3,4\n0,1,255,255\n");
    }
}
