//! Space-time grids, named fields and their on-disk form.
//!
//! A dataset at `base` is written as a JSON sidecar `base.json` plus one
//! headerless CSV per field, `base.<field>.csv`, with `nt` rows of `nx`
//! values (or `2·nx` interleaved `re,im` pairs for complex fields).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Uniform space-time lattice. Row index is time, column index is space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub nt: usize,
    pub nx: usize,
    pub dt: f64,
    pub dx: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub periodic_x: bool,
}

impl Grid {
    pub fn new(nt: usize, nx: usize, dt: f64, dx: f64) -> Result<Grid> {
        let g = Grid {
            nt,
            nx,
            dt,
            dx,
            t0: 0.0,
            x0: 0.0,
            periodic_x: false,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_origin(mut self, t0: f64, x0: f64) -> Grid {
        self.t0 = t0;
        self.x0 = x0;
        self
    }

    pub fn periodic(mut self, periodic_x: bool) -> Grid {
        self.periodic_x = periodic_x;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nt < 3 {
            return Err(Error::data(format!("grid needs nt >= 3, got {}", self.nt)));
        }
        if self.nx < 5 {
            return Err(Error::data(format!("grid needs nx >= 5, got {}", self.nx)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::data(format!(
                "grid dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::data(format!(
                "grid dx must be positive, got {}",
                self.dx
            )));
        }
        if !(self.t0.is_finite() && self.x0.is_finite()) {
            return Err(Error::data("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.dx
    }

    pub fn len(&self) -> usize {
        self.nt * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same shape, spacing and origin up to rounding.
    pub fn matches(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
        self.nt == other.nt
            && self.nx == other.nx
            && close(self.dt, other.dt)
            && close(self.dx, other.dx)
            && close(self.t0, other.t0)
            && close(self.x0, other.x0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn sign(self) -> i8 {
        match self {
            Parity::Even => 1,
            Parity::Odd => -1,
        }
    }

    pub fn flip(self) -> Parity {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }

    pub fn from_sign(s: i64) -> Result<Parity> {
        match s {
            1 => Ok(Parity::Even),
            -1 => Ok(Parity::Odd),
            other => Err(Error::data(format!("parity must be +1 or -1, got {other}"))),
        }
    }
}

/// A named scalar field sampled on a grid. Real fields keep `im == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    name: String,
    complex: bool,
    pub p_parity: Option<Parity>,
    pub t_parity: Option<Parity>,
    values: Array2<C64>,
}

fn check_name(name: &str) -> Result<()> {
    let mut chars = name.chars();
    let ok = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::data(format!(
            "field name {name:?} must start with a letter and use only letters, digits and _"
        )))
    }
}

impl Field {
    pub fn new_real(name: &str, values: Array2<f64>) -> Result<Field> {
        check_name(name)?;
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::data(format!(
                "field {name}: non-finite value {v} at row {i}, column {j}"
            )));
        }
        Ok(Field {
            name: name.to_string(),
            complex: false,
            p_parity: None,
            t_parity: None,
            values: values.mapv(|v| C64::new(v, 0.0)),
        })
    }

    pub fn new_complex(name: &str, values: Array2<C64>) -> Result<Field> {
        check_name(name)?;
        if let Some(((i, j), v)) = values
            .indexed_iter()
            .find(|(_, v)| !(v.re.is_finite() && v.im.is_finite()))
        {
            return Err(Error::data(format!(
                "field {name}: non-finite value {v} at row {i}, column {j}"
            )));
        }
        Ok(Field {
            name: name.to_string(),
            complex: true,
            p_parity: None,
            t_parity: None,
            values,
        })
    }

    pub fn with_parity(mut self, p: Option<Parity>, t: Option<Parity>) -> Field {
        self.p_parity = p;
        self.t_parity = t;
        self
    }

    pub fn renamed(mut self, name: &str) -> Result<Field> {
        check_name(name)?;
        self.name = name.to_string();
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    pub fn values(&self) -> &Array2<C64> {
        &self.values
    }

    pub fn nt(&self) -> usize {
        self.values.nrows()
    }

    pub fn nx(&self) -> usize {
        self.values.ncols()
    }

    pub fn real_part(&self) -> Array2<f64> {
        self.values.mapv(|v| v.re)
    }
}

/// Grid plus uniquely named fields plus free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    fields: Vec<Field>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    grid: Grid,
    fields: Vec<SidecarField>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarField {
    name: String,
    complex: bool,
    p_parity: Option<i64>,
    t_parity: Option<i64>,
    csv: String,
}

impl Dataset {
    pub fn new(grid: Grid) -> Result<Dataset> {
        grid.validate()?;
        Ok(Dataset {
            grid,
            fields: Vec::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn add_field(&mut self, field: Field) -> Result<()> {
        if field.nt() != self.grid.nt || field.nx() != self.grid.nx {
            return Err(Error::data(format!(
                "field {} is {}x{} but the grid is {}x{}",
                field.name,
                field.nt(),
                field.nx(),
                self.grid.nt,
                self.grid.nx
            )));
        }
        if self.fields.iter().any(|f| f.name == field.name) {
            return Err(Error::data(format!("duplicate field name {}", field.name)));
        }
        self.fields.push(field);
        Ok(())
    }

    pub fn with_field(mut self, field: Field) -> Result<Dataset> {
        self.add_field(field)?;
        Ok(self)
    }

    /// Inserts or overwrites a field of the same name.
    pub fn put_field(&mut self, field: Field) -> Result<()> {
        if let Some(pos) = self.fields.iter().position(|f| f.name == field.name) {
            let old = self.fields.remove(pos);
            if let Err(e) = self.add_field(field) {
                self.fields.insert(pos, old);
                return Err(e);
            }
            let last = self.fields.pop().expect("just pushed");
            self.fields.insert(pos, last);
            Ok(())
        } else {
            self.add_field(field)
        }
    }

    pub fn field(&self, name: &str) -> Result<&Field> {
        self.fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::data(format!("dataset has no field named {name}")))
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn field_names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn is_real(&self) -> bool {
        self.fields.iter().all(|f| !f.complex)
    }

    /// Sub-dataset over half-open index ranges. The origin moves with the
    /// window; the x axis stays periodic only if it is kept whole.
    pub fn window(&self, t: Range<usize>, x: Range<usize>) -> Result<Dataset> {
        if t.start >= t.end || x.start >= x.end || t.end > self.grid.nt || x.end > self.grid.nx {
            return Err(Error::data(format!(
                "window t={:?} x={:?} is empty or outside the {}x{} grid",
                t, x, self.grid.nt, self.grid.nx
            )));
        }
        let grid = Grid {
            nt: t.len(),
            nx: x.len(),
            dt: self.grid.dt,
            dx: self.grid.dx,
            t0: self.grid.t(t.start),
            x0: self.grid.x(x.start),
            periodic_x: self.grid.periodic_x && x.start == 0 && x.end == self.grid.nx,
        };
        grid.validate()?;
        let fields = self
            .fields
            .iter()
            .map(|f| Field {
                values: f.values.slice(s![t.clone(), x.clone()]).to_owned(),
                ..f.clone()
            })
            .collect();
        Ok(Dataset {
            grid,
            fields,
            meta: self.meta.clone(),
        })
    }

    /// Window by coordinates: keeps samples with `t_lo <= t <= t_hi` and
    /// `x_lo <= x <= x_hi`, up to a 1e-9 relative slack on the bounds.
    pub fn window_coords(&self, t_lo: f64, t_hi: f64, x_lo: f64, x_hi: f64) -> Result<Dataset> {
        let g = &self.grid;
        let pick =
            |lo: f64, hi: f64, n: usize, at: &dyn Fn(usize) -> f64, step: f64| -> Range<usize> {
                let slack = 1e-9 * step;
                let idx: Vec<usize> = (0..n)
                    .filter(|&i| at(i) >= lo - slack && at(i) <= hi + slack)
                    .collect();
                match (idx.first(), idx.last()) {
                    (Some(&a), Some(&b)) => a..b + 1,
                    _ => 0..0,
                }
            };
        let t = pick(t_lo, t_hi, g.nt, &|i| g.t(i), g.dt);
        let x = pick(x_lo, x_hi, g.nx, &|j| g.x(j), g.dx);
        self.window(t, x)
    }

    /// Writes the sidecar and CSVs; returns every path written.
    pub fn save(&self, base: &Path) -> Result<Vec<PathBuf>> {
        self.grid.validate()?;
        let base = strip_json(base);
        let stem = base
            .file_name()
            .ok_or_else(|| Error::data(format!("{} has no file name", base.display())))?
            .to_string_lossy()
            .to_string();
        if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut written = Vec::new();
        let mut entries = Vec::new();
        for f in &self.fields {
            let csv_name = format!("{stem}.{}.csv", f.name);
            let path = base.with_file_name(&csv_name);
            write_csv(&path, f)?;
            written.push(path);
            entries.push(SidecarField {
                name: f.name.clone(),
                complex: f.complex,
                p_parity: f.p_parity.map(|p| p.sign() as i64),
                t_parity: f.t_parity.map(|p| p.sign() as i64),
                csv: csv_name,
            });
        }
        let sidecar = Sidecar {
            grid: self.grid.clone(),
            fields: entries,
            meta: self.meta.clone(),
        };
        let json_path = base.with_file_name(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        written.insert(0, json_path);
        Ok(written)
    }

    pub fn load(base: &Path) -> Result<Dataset> {
        let base = strip_json(base);
        let stem = base
            .file_name()
            .ok_or_else(|| Error::data(format!("{} has no file name", base.display())))?
            .to_string_lossy()
            .to_string();
        let json_path = base.with_file_name(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", json_path.display())))?;
        let mut ds = Dataset::new(sidecar.grid)?;
        ds.meta = sidecar.meta;
        for entry in sidecar.fields {
            let path = base.with_file_name(&entry.csv);
            let values = read_csv(&path, ds.grid.nt, ds.grid.nx, entry.complex)?;
            let p = entry.p_parity.map(Parity::from_sign).transpose()?;
            let t = entry.t_parity.map(Parity::from_sign).transpose()?;
            let field = if entry.complex {
                Field::new_complex(&entry.name, values)?
            } else {
                Field::new_real(&entry.name, values.mapv(|v| v.re))?
            };
            ds.add_field(field.with_parity(p, t))?;
        }
        Ok(ds)
    }
}

fn strip_json(base: &Path) -> PathBuf {
    match base.extension() {
        Some(ext) if ext == "json" => base.with_extension(""),
        _ => base.to_path_buf(),
    }
}

fn write_csv(path: &Path, f: &Field) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    for row in f.values.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.16e}", v.re));
            if f.complex {
                line.push(',');
                line.push_str(&format!("{:.16e}", v.im));
            }
        }
        line.push('\n');
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path, nt: usize, nx: usize, complex: bool) -> Result<Array2<C64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let width = if complex { 2 * nx } else { nx };
    let mut out = Array2::<C64>::zeros((nt, nx));
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if i >= nt {
            return Err(Error::data(format!(
                "{}: expected {nt} rows, found more",
                path.display()
            )));
        }
        if record.len() != width {
            return Err(Error::data(format!(
                "{}: row {i} has {} columns, expected {width}",
                path.display(),
                record.len()
            )));
        }
        let mut parsed = Vec::with_capacity(width);
        for (j, tok) in record.iter().enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| {
                Error::data(format!(
                    "{}: row {i}, column {j}: cannot parse {tok:?}",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}: row {i}, column {j}: non-finite value {tok:?}",
                    path.display()
                )));
            }
            parsed.push(v);
        }
        for j in 0..nx {
            out[[i, j]] = if complex {
                C64::new(parsed[2 * j], parsed[2 * j + 1])
            } else {
                C64::new(parsed[j], 0.0)
            };
        }
        rows += 1;
    }
    if rows != nt {
        return Err(Error::data(format!(
            "{}: expected {nt} rows, found {rows}",
            path.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(nt: usize, nx: usize) -> Dataset {
        let grid = Grid::new(nt, nx, 0.1, 0.5).unwrap().with_origin(1.0, -2.0);
        let u = Array2::from_shape_fn((nt, nx), |(i, j)| (i as f64 * 0.3 + j as f64).sin());
        let w = Array2::from_shape_fn((nt, nx), |(i, j)| C64::new(i as f64, -(j as f64) / 3.0));
        Dataset::new(grid)
            .unwrap()
            .with_field(
                Field::new_real("rho", u)
                    .unwrap()
                    .with_parity(Some(Parity::Even), Some(Parity::Even)),
            )
            .unwrap()
            .with_field(Field::new_complex("u", w).unwrap())
            .unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(Grid::new(2, 10, 0.1, 1.0).is_err());
        assert!(Grid::new(10, 4, 0.1, 1.0).is_err());
        assert!(Grid::new(10, 10, 0.0, 1.0).is_err());
        assert!(Grid::new(10, 10, 0.1, -1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let mut ds = Dataset::new(Grid::new(4, 6, 0.1, 1.0).unwrap()).unwrap();
        let err = ds
            .add_field(Field::new_real("a", Array2::zeros((4, 7))).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("4x7") && err.contains("4x6"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ds = sample(4, 6);
        let f = ds.field("rho").unwrap().clone();
        assert!(ds.add_field(f).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut v = Array2::zeros((3, 5));
        v[[1, 2]] = f64::NAN;
        assert!(Field::new_real("u", v).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = sample(5, 7);
        ds.meta.insert("source".into(), "unit".into());
        ds.meta.insert("zz_unknown".into(), "kept".into());
        let base = dir.path().join("set");
        let written = ds.save(&base).unwrap();
        assert_eq!(written.len(), 3);
        assert!(dir.path().join("set.rho.csv").exists());
        let back = Dataset::load(&base).unwrap();
        assert_eq!(back, ds);
        let via_json = Dataset::load(&dir.path().join("set.json")).unwrap();
        assert_eq!(via_json, ds);
    }

    #[test]
    fn nan_token_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample(4, 5);
        let base = dir.path().join("d");
        ds.save(&base).unwrap();
        let csv = dir.path().join("d.rho.csv");
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut toks: Vec<&str> = lines[2].split(',').collect();
        toks[1] = "NaN";
        lines[2] = toks.join(",");
        fs::write(&csv, lines.join("\n") + "\n").unwrap();
        let err = Dataset::load(&base).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn missing_csv_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample(4, 5);
        let base = dir.path().join("d");
        ds.save(&base).unwrap();
        fs::remove_file(dir.path().join("d.u.csv")).unwrap();
        let err = Dataset::load(&base).unwrap_err().to_string();
        assert!(err.contains("d.u.csv"), "{err}");
    }

    #[test]
    fn window_moves_origin_and_is_idempotent() {
        let ds = sample(10, 12);
        let w = ds.window(2..8, 3..10).unwrap();
        assert_eq!((w.grid.nt, w.grid.nx), (6, 7));
        assert!((w.grid.t0 - ds.grid.t(2)).abs() < 1e-15);
        assert!((w.grid.x0 - ds.grid.x(3)).abs() < 1e-15);
        assert_eq!(
            w.field("rho").unwrap().values()[[0, 0]],
            ds.field("rho").unwrap().values()[[2, 3]]
        );
        assert_eq!(ds.window(0..10, 0..12).unwrap(), ds);
        assert!(ds.window(0..2, 0..12).is_err());
        assert!(ds.window(3..3, 0..12).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_any_values(vals in proptest::collection::vec(-1e300f64..1e300, 3 * 5 * 2)) {
            let grid = Grid::new(3, 5, 0.25, 1.0).unwrap();
            let re = Array2::from_shape_vec((3, 5), vals[..15].to_vec()).unwrap();
            let c = Array2::from_shape_fn((3, 5), |(i, j)| C64::new(vals[15 + i * 5 + j], vals[i * 5 + j]));
            let ds = Dataset::new(grid).unwrap()
                .with_field(Field::new_real("a", re).unwrap()).unwrap()
                .with_field(Field::new_complex("b", c).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let base = dir.path().join("p");
            ds.save(&base).unwrap();
            prop_assert_eq!(Dataset::load(&base).unwrap(), ds);
        }
    }
}
