use super::EncoderError;
use crate::diffcore::Tensor;
use crate::scalar::Real;

const ROW_TOLERANCE: f64 = 1e-5;

/// Mean row entropy per head of a `(B, heads, T, T)` attention map.
///
/// `valid` (length `B·T`) restricts the average to real query positions.
pub fn attention_entropy<S: Real>(
    map: &Tensor<S>,
    valid: Option<&[bool]>,
) -> Result<Vec<f64>, EncoderError> {
    let shape = map.shape();
    let (b, h, t) = match *shape {
        [b, h, t, t2] if t == t2 => (b, h, t),
        _ => {
            return Err(EncoderError::Config(format!(
                "attention map must be (B, H, T, T), got {shape:?}"
            )));
        }
    };
    let data = map.data();
    let mut out = vec![0.0; h];
    let mut count = vec![0usize; h];
    for bi in 0..b {
        for hi in 0..h {
            for qi in 0..t {
                let row_index = (bi * h + hi) * t + qi;
                let row = &data[row_index * t..(row_index + 1) * t];
                let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(EncoderError::InvalidAttention {
                        row: row_index,
                        sum,
                    });
                }
                if valid.is_some_and(|m| !m[bi * t + qi]) {
                    continue;
                }
                let e: f64 = row
                    .iter()
                    .map(|p| p.as_f64())
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum();
                out[hi] += e;
                count[hi] += 1;
            }
        }
    }
    Ok(out
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}
