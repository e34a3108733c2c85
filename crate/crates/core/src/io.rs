//! GridMap files: one JSON header line followed by little-endian f64 values
//! in row-major node order. CSV export for one- and two-dimensional grids.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid, GridMap, MAX_DIM};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    m: usize,
    res: usize,
    inradius: f64,
    ambient_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<Vec<f64>>,
}

pub fn write_gridmap(u: &GridMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let centered = u.grid.center.iter().all(|&c| c == 0.0);
    let header = Header {
        m: u.grid.m,
        res: u.grid.res,
        inradius: u.grid.inradius,
        ambient_dim: u.nu,
        center: if centered { None } else { Some(u.grid.center.clone()) },
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &u.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gridmap(path: &Path) -> Result<GridMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    let center = header.center.unwrap_or_else(|| vec![0.0; header.m]);
    let grid = Grid::with_center(header.m, header.res, header.inradius, center)?;
    let n = grid.n_nodes() * header.ambient_dim;
    let mut bytes = Vec::with_capacity(n * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 8 {
        return invalid(format!("GridMap file holds {} bytes of data, expected {}", bytes.len(), n * 8));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    GridMap::new(grid, header.ambient_dim, values)
}

/// Columns x1[,x2],v1..vν with one row per node.
pub fn write_csv(u: &GridMap, path: &Path) -> Result<()> {
    if u.grid.m > 2 {
        return invalid("CSV export supports m ≤ 2 only");
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut head: Vec<String> = (1..=u.grid.m).map(|a| format!("x{a}")).collect();
    head.extend((1..=u.nu).map(|c| format!("v{c}")));
    w.write_record(&head)?;
    let mut x = [0.0; MAX_DIM];
    for i in 0..u.n_nodes() {
        u.grid.node_coords(i, &mut x);
        let row: Vec<String> = x[..u.grid.m]
            .iter()
            .chain(u.value(i))
            .map(|v| format!("{v:.17e}"))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::with_center(2, 5, 0.5, vec![0.25, -1.0]).unwrap();
        let u = GridMap::from_fn(g, 3, |x, o| {
            o[0] = x[0];
            o[1] = x[1] * x[0];
            o[2] = 1.0 / 3.0;
        });
        let p = dir.path().join("u.bin");
        write_gridmap(&u, &p).unwrap();
        assert_eq!(read_gridmap(&p).unwrap(), u);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let dir = tempfile::tempdir().unwrap();
        let u = GridMap::constant(Grid::new(2, 3, 1.0).unwrap(), &[1.0]);
        let p = dir.path().join("u.csv");
        write_csv(&u, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("x1,x2,v1"));
    }
}
