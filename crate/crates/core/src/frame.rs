//! Population frames, validation and sample extraction.
//!
//! A frame holds one row per unit. Covariates are split into the
//! fixed-effect block `x1` (first column is the intercept) and the
//! random-effect block `x2`. Outcomes are `None` wherever they were not
//! observed.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, SoftcalError};

/// Finite-population data with selection indicators.
///
/// `design_weight` carries first-stage or two-stage sampling weights when
/// the rows are themselves a probability sample; it is all ones for a
/// plain population frame, in which case the population size is the row
/// count.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFrame {
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
    pub y: Vec<Option<f64>>,
    pub delta: Vec<bool>,
    pub q_scale: DVector<f64>,
    pub design_weight: DVector<f64>,
}

impl PopulationFrame {
    /// Builds a frame with unit scale factors and unit design weights.
    pub fn new(
        x1: DMatrix<f64>,
        x2: DMatrix<f64>,
        y: Vec<Option<f64>>,
        delta: Vec<bool>,
    ) -> Result<Self> {
        let n = x1.nrows();
        check_len("x2 rows", n, x2.nrows())?;
        check_len("y", n, y.len())?;
        check_len("delta", n, delta.len())?;
        Ok(Self {
            x1,
            x2,
            y,
            delta,
            q_scale: DVector::from_element(n, 1.0),
            design_weight: DVector::from_element(n, 1.0),
        })
    }

    pub fn with_q_scale(mut self, q: DVector<f64>) -> Result<Self> {
        check_len("q_scale", self.n_total(), q.len())?;
        self.q_scale = q;
        Ok(self)
    }

    pub fn with_design_weights(mut self, d: DVector<f64>) -> Result<Self> {
        check_len("design weights", self.n_total(), d.len())?;
        self.design_weight = d;
        Ok(self)
    }

    /// Number of rows.
    pub fn n_total(&self) -> usize {
        self.x1.nrows()
    }

    /// Design-weighted population size `N = Σ d_i`.
    pub fn pop_size(&self) -> f64 {
        self.design_weight.sum()
    }

    pub fn n_sample(&self) -> usize {
        self.delta.iter().filter(|&&s| s).count()
    }

    pub fn p(&self) -> usize {
        self.x1.ncols()
    }

    pub fn q(&self) -> usize {
        self.x2.ncols()
    }

    /// Full covariate row `(x1ᵢ, x2ᵢ)`.
    pub fn x_row(&self, i: usize) -> DVector<f64> {
        let (p, q) = (self.p(), self.q());
        DVector::from_fn(p + q, |j, _| {
            if j < p {
                self.x1[(i, j)]
            } else {
                self.x2[(i, j - p)]
            }
        })
    }

    /// `[x1 x2]` as one N×(p+q) matrix.
    pub fn x_full(&self) -> DMatrix<f64> {
        let (n, p, q) = (self.n_total(), self.p(), self.q());
        let mut x = DMatrix::zeros(n, p + q);
        x.view_mut((0, 0), (n, p)).copy_from(&self.x1);
        x.view_mut((0, p), (n, q)).copy_from(&self.x2);
        x
    }

    /// Row indices with `delta = 1`, in frame order.
    pub fn sample_indices(&self) -> Vec<usize> {
        (0..self.n_total()).filter(|&i| self.delta[i]).collect()
    }

    /// Restriction of the frame to the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x1: self.x1.select_rows(rows.iter()),
            x2: self.x2.select_rows(rows.iter()),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            delta: rows.iter().map(|&i| self.delta[i]).collect(),
            q_scale: DVector::from_fn(rows.len(), |k, _| self.q_scale[rows[k]]),
            design_weight: DVector::from_fn(rows.len(), |k, _| self.design_weight[rows[k]]),
        }
    }

    /// Copy of the frame with a different selection indicator.
    pub fn with_delta(&self, delta: Vec<bool>) -> Result<Self> {
        check_len("delta", self.n_total(), delta.len())?;
        let mut f = self.clone();
        f.delta = delta;
        Ok(f)
    }

    /// Copy of the frame with outcomes replaced.
    pub fn with_y(&self, y: Vec<Option<f64>>) -> Result<Self> {
        check_len("y", self.n_total(), y.len())?;
        let mut f = self.clone();
        f.y = y;
        Ok(f)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_frame(self);
        match report.failures.first() {
            None => Ok(()),
            Some(v) => Err(SoftcalError::InvalidFrame(v.to_string())),
        }
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SoftcalError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// One violated frame invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub invariant: String,
    pub index: Option<usize>,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "{} (index {})", self.invariant, i),
            None => write!(f, "{}", self.invariant),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checked: Vec<String>,
    pub failures: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn has(&self, invariant: &str) -> bool {
        self.failures.iter().any(|v| v.invariant == invariant)
    }
}

pub const INV_INTERCEPT: &str = "first column of x1 is not all ones";
pub const INV_Y_MISSING: &str = "y missing where selected";
pub const INV_EMPTY: &str = "sample is empty";
pub const INV_Q: &str = "q_scale nonpositive";
pub const INV_D: &str = "design weight nonpositive";
pub const INV_FINITE: &str = "covariate not finite";

/// Checks every frame invariant and reports the first offending index of each.
pub fn validate_frame(frame: &PopulationFrame) -> ValidationReport {
    let mut failures = Vec::new();
    let n = frame.n_total();
    let mut fail = |inv: &str, index: Option<usize>| {
        failures.push(Violation {
            invariant: inv.to_string(),
            index,
        })
    };

    if frame.p() == 0 {
        fail(INV_INTERCEPT, None);
    } else if let Some(i) = (0..n).find(|&i| frame.x1[(i, 0)] != 1.0) {
        fail(INV_INTERCEPT, Some(i));
    }
    if let Some(i) = (0..n).find(|&i| frame.delta[i] && !frame.y[i].is_some_and(f64::is_finite)) {
        fail(INV_Y_MISSING, Some(i));
    }
    if frame.n_sample() == 0 {
        fail(INV_EMPTY, None);
    }
    if let Some(i) = (0..n).find(|&i| !(frame.q_scale[i] > 0.0 && frame.q_scale[i].is_finite())) {
        fail(INV_Q, Some(i));
    }
    if let Some(i) =
        (0..n).find(|&i| !(frame.design_weight[i] > 0.0 && frame.design_weight[i].is_finite()))
    {
        fail(INV_D, Some(i));
    }
    let bad_x = (0..n).find(|&i| {
        frame.x1.row(i).iter().any(|v| !v.is_finite()) || frame.x2.row(i).iter().any(|v| !v.is_finite())
    });
    if let Some(i) = bad_x {
        fail(INV_FINITE, Some(i));
    }

    ValidationReport {
        checked: [INV_INTERCEPT, INV_Y_MISSING, INV_EMPTY, INV_Q, INV_D, INV_FINITE]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        failures,
    }
}

/// Selected rows of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleView {
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
    pub y: DVector<f64>,
    pub q: DVector<f64>,
    pub d: DVector<f64>,
    /// Frame row of each sample row.
    pub index: Vec<usize>,
}

impl SampleView {
    /// Writes per-sample values back to their frame rows; other rows stay `None`.
    pub fn scatter(&self, values: &DVector<f64>, n_total: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; n_total];
        for (k, &i) in self.index.iter().enumerate() {
            out[i] = Some(values[k]);
        }
        out
    }

    /// `[x1_s x2_s]`.
    pub fn x_full(&self) -> DMatrix<f64> {
        let (n, p, q) = (self.x1.nrows(), self.x1.ncols(), self.x2.ncols());
        let mut x = DMatrix::zeros(n, p + q);
        x.view_mut((0, 0), (n, p)).copy_from(&self.x1);
        x.view_mut((0, p), (n, q)).copy_from(&self.x2);
        x
    }
}

/// Extracts the selected rows in frame order.
pub fn sample_view(frame: &PopulationFrame) -> Result<SampleView> {
    if frame.n_total() > 0 && frame.n_sample() == 0 {
        return Err(SoftcalError::EmptySample);
    }
    frame.ensure_valid()?;
    let index = frame.sample_indices();
    let sub = frame.subset(&index);
    Ok(SampleView {
        x1: sub.x1,
        x2: sub.x2,
        y: DVector::from_iterator(index.len(), sub.y.iter().map(|v| v.unwrap_or(f64::NAN))),
        q: sub.q_scale,
        d: sub.design_weight,
        index,
    })
}

/// Columns read from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub delta: Option<Vec<bool>>,
    pub y: Vec<Option<f64>>,
    pub q: Option<Vec<f64>>,
    pub x1_names: Vec<String>,
    pub x1: DMatrix<f64>,
    pub x2_names: Vec<String>,
    pub x2: DMatrix<f64>,
    pub cluster: Option<Vec<String>>,
    pub d_i: Option<Vec<f64>>,
    pub n_pop_i: Option<Vec<f64>>,
    pub treatment: Option<Vec<bool>>,
}

impl CsvTable {
    /// Builds a plain frame; `delta` is required.
    pub fn to_frame(&self) -> Result<PopulationFrame> {
        let delta = self
            .delta
            .clone()
            .ok_or_else(|| SoftcalError::Csv("missing column `delta`".into()))?;
        let mut f = PopulationFrame::new(self.x1.clone(), self.x2.clone(), self.y.clone(), delta)?;
        if let Some(q) = &self.q {
            f = f.with_q_scale(DVector::from_column_slice(q))?;
        }
        Ok(f)
    }
}

fn parse_f64(s: &str, col: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| SoftcalError::Csv(format!("row {row}, column `{col}`: cannot parse `{s}`")))
}

fn parse_bool(s: &str, col: &str, row: usize) -> Result<bool> {
    match s.trim() {
        "1" | "1.0" | "true" | "TRUE" => Ok(true),
        "0" | "0.0" | "false" | "FALSE" => Ok(false),
        other => Err(SoftcalError::Csv(format!(
            "row {row}, column `{col}`: expected 0/1, got `{other}`"
        ))),
    }
}

/// Reads a frame table. Recognised columns: `delta`, `y`, `q`, `x1_*`,
/// `x2_*`, `cluster`, `d_i`, `N_i`, `A`. Unknown columns are an error.
pub fn read_csv<R: Read>(reader: R) -> Result<CsvTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let col_delta = find("delta");
    let col_y = find("y").ok_or_else(|| SoftcalError::Csv("missing column `y`".into()))?;
    let col_q = find("q");
    let col_cluster = find("cluster");
    let col_d = find("d_i");
    let col_n = find("N_i");
    let col_a = find("A");
    let x1_cols: Vec<usize> = (0..headers.len()).filter(|&j| headers[j].starts_with("x1_")).collect();
    let x2_cols: Vec<usize> = (0..headers.len()).filter(|&j| headers[j].starts_with("x2_")).collect();
    let known = [col_delta, Some(col_y), col_q, col_cluster, col_d, col_n, col_a];
    for (j, h) in headers.iter().enumerate() {
        if !known.contains(&Some(j)) && !x1_cols.contains(&j) && !x2_cols.contains(&j) {
            return Err(SoftcalError::Csv(format!("unknown column `{h}`")));
        }
    }
    if x1_cols.is_empty() {
        return Err(SoftcalError::Csv("no `x1_*` columns".into()));
    }

    let mut delta = Vec::new();
    let mut y = Vec::new();
    let mut q = Vec::new();
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    let mut cluster = Vec::new();
    let mut d_i = Vec::new();
    let mut n_i = Vec::new();
    let mut a = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |j: usize| rec.get(j).unwrap_or("");
        if let Some(j) = col_delta {
            delta.push(parse_bool(get(j), "delta", row)?);
        }
        let ys = get(col_y);
        y.push(if ys.is_empty() { None } else { Some(parse_f64(ys, "y", row)?) });
        if let Some(j) = col_q {
            q.push(parse_f64(get(j), "q", row)?);
        }
        for &j in &x1_cols {
            x1.push(parse_f64(get(j), &headers[j], row)?);
        }
        for &j in &x2_cols {
            x2.push(parse_f64(get(j), &headers[j], row)?);
        }
        if let Some(j) = col_cluster {
            cluster.push(get(j).to_string());
        }
        if let Some(j) = col_d {
            d_i.push(parse_f64(get(j), "d_i", row)?);
        }
        if let Some(j) = col_n {
            n_i.push(parse_f64(get(j), "N_i", row)?);
        }
        if let Some(j) = col_a {
            a.push(parse_bool(get(j), "A", row)?);
        }
    }
    let n = y.len();
    Ok(CsvTable {
        delta: col_delta.map(|_| delta),
        y,
        q: col_q.map(|_| q),
        x1_names: x1_cols.iter().map(|&j| headers[j].clone()).collect(),
        x1: DMatrix::from_row_slice(n, x1_cols.len(), &x1),
        x2_names: x2_cols.iter().map(|&j| headers[j].clone()).collect(),
        x2: DMatrix::from_row_slice(n, x2_cols.len(), &x2),
        cluster: col_cluster.map(|_| cluster),
        d_i: col_d.map(|_| d_i),
        n_pop_i: col_n.map(|_| n_i),
        treatment: col_a.map(|_| a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, delta: Vec<bool>) -> PopulationFrame {
        let x1 = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let x2 = DMatrix::from_fn(n, 1, |i, _| (i % 3) as f64);
        let y = (0..n).map(|i| if delta[i] { Some(i as f64) } else { None }).collect();
        PopulationFrame::new(x1, x2, y, delta).unwrap()
    }

    #[test]
    fn valid_frame_passes() {
        let delta = (0..100).map(|i| i % 10 == 0).collect();
        let f = toy(100, delta);
        assert_eq!(f.n_sample(), 10);
        assert!(validate_frame(&f).passed());
    }

    #[test]
    fn missing_y_reported_with_index() {
        let mut f = toy(5, vec![true; 5]);
        f.y[3] = None;
        let r = validate_frame(&f);
        assert_eq!(
            r.failures,
            vec![Violation {
                invariant: INV_Y_MISSING.into(),
                index: Some(3)
            }]
        );
    }

    #[test]
    fn zero_q_reported() {
        let mut f = toy(5, vec![true; 5]);
        f.q_scale[2] = 0.0;
        assert!(validate_frame(&f).has(INV_Q));
    }

    #[test]
    fn intercept_checked() {
        let mut f = toy(5, vec![true; 5]);
        f.x1[(4, 0)] = 2.0;
        let r = validate_frame(&f);
        assert_eq!(r.failures[0].index, Some(4));
    }

    #[test]
    fn sample_view_selects_rows_in_order() {
        let f = toy(5, vec![true, false, true, false, false]);
        let s = sample_view(&f).unwrap();
        assert_eq!(s.index, vec![0, 2]);
        assert_eq!(s.x1.row(1), f.x1.row(2));
        assert_eq!(s.y.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn sample_view_full_selection_is_identity() {
        let f = toy(6, vec![true; 6]);
        let s = sample_view(&f).unwrap();
        assert_eq!(s.x1, f.x1);
        assert_eq!(s.x2, f.x2);
    }

    #[test]
    fn empty_sample_is_an_error() {
        let f = toy(4, vec![false; 4]);
        assert!(matches!(sample_view(&f), Err(SoftcalError::EmptySample)));
    }

    #[test]
    fn csv_round_trip() {
        let text = "delta,y,q,x1_0,x1_a,x2_0\n1,2.5,1,1,0.5,1\n0,,2,1,0.1,0\n";
        let t = read_csv(text.as_bytes()).unwrap();
        let f = t.to_frame().unwrap();
        assert_eq!(f.n_total(), 2);
        assert_eq!(f.y, vec![Some(2.5), None]);
        assert_eq!(f.q_scale[1], 2.0);
        assert_eq!(f.x1[(1, 1)], 0.1);
        assert!(validate_frame(&f).passed());
    }

    #[test]
    fn csv_rejects_unknown_column() {
        let text = "delta,y,x1_0,zzz\n1,1,1,3\n";
        assert!(read_csv(text.as_bytes()).is_err());
    }
}
