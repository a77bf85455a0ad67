//! Plain-text grayscale (P2) export of unit-range grids.

use std::fmt::Write as _;
use std::path::Path;

use flint_core::fieldio::Grid;

const MAXVAL: u32 = 255;

/// P2 image of a 2D grid, or of the middle slice along the slowest axis of a
/// 3D grid. Rows follow the slowest remaining axis.
pub fn encode(grid: &Grid) -> String {
    let d = grid.dims();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    let offset = if d.len() == 3 { d[0] / 2 * h * w } else { 0 };
    let mut s = format!("P2\n{w} {h}\n{MAXVAL}\n");
    for r in 0..h {
        let row: Vec<String> = (0..w)
            .map(|c| {
                let v = grid.values()[offset + r * w + c].clamp(0.0, 1.0);
                ((v * MAXVAL as f64).round() as u32).to_string()
            })
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn write(grid: &Grid, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, encode(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_values() {
        let g = Grid::new(vec![2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.2]).unwrap();
        assert_eq!(encode(&g), "P2\n3 2\n255\n0 128 255\n255 0 51\n");
    }
}
