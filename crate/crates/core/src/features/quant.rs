//! Symmetric per-vector INT8 transport quantisation.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedVector {
    pub values: Vec<i8>,
    pub scale: f64,
}

/// `scale = max|v| / 127`, round to nearest. The zero vector gets scale 0.
pub fn quantize_int8(v: &[f64]) -> Result<QuantizedVector> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::validation("cannot quantize a non-finite vector"));
    }
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return Ok(QuantizedVector { values: vec![0; v.len()], scale: 0.0 });
    }
    let scale = max / 127.0;
    let values = v.iter().map(|x| (x / scale).round().clamp(-127.0, 127.0) as i8).collect();
    Ok(QuantizedVector { values, scale })
}

pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    q.values.iter().map(|&x| x as f64 * q.scale).collect()
}
