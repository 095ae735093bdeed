//! Dense matrices as `{"rows": r, "cols": c, "data": [row-major]}`.

use nalgebra::DMatrix;
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Repr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Wire form of a matrix.
pub fn to_value(m: &DMatrix<f64>) -> serde_json::Value {
    serde_json::to_value(Repr {
        rows: m.nrows(),
        cols: m.ncols(),
        data: row_major(m),
    })
    .expect("matrix serialization is infallible")
}

pub fn from_value(v: serde_json::Value) -> Result<DMatrix<f64>, serde_json::Error> {
    let r: Repr = serde_json::from_value(v)?;
    build(r).map_err(serde_json::Error::custom)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        data.extend(m.row(i).iter());
    }
    data
}

fn build(r: Repr) -> Result<DMatrix<f64>, String> {
    if r.rows * r.cols != r.data.len() {
        return Err(format!(
            "matrix {}x{} needs {} entries, found {}",
            r.rows,
            r.cols,
            r.rows * r.cols,
            r.data.len()
        ));
    }
    Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
}

/// `#[serde(with = "matrix_json")]` support.
pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    Repr {
        rows: m.nrows(),
        cols: m.ncols(),
        data: row_major(m),
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    build(Repr::deserialize(d)?).map_err(D::Error::custom)
}
