use super::array::DenseArray;
use crate::{Error, Result};

/// Fixed 2-D sine/cosine positional embedding for an `h × w` grid.
///
/// Row-major over positions. The first `d/2` channels encode the row
/// index and the last `d/2` the column index; within each half, channel
/// `2k` is `sin(pos·ω_k)` and `2k+1` is `cos(pos·ω_k)` with
/// `ω_k = 10000^(−2k/(d/2))`.
pub fn sinusoidal_pe_2d(h: usize, w: usize, d: usize) -> Result<DenseArray> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::invalid(format!(
            "positional embedding width {d} must be a positive multiple of 4"
        )));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|k| 10000f64.powf(-((2 * k) as f64) / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for pos in [r as f64, c as f64] {
                for &f in &freqs {
                    let a = pos * f;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    DenseArray::from_vec(vec![h * w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = sinusoidal_pe_2d(1, 1, 12).unwrap();
        for (j, v) in pe.row(0).iter().enumerate() {
            assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn row_norms_are_sqrt_half_width() {
        let pe = sinusoidal_pe_2d(5, 7, 16).unwrap();
        for i in 0..35 {
            let n: f64 = pe.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 8f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_width_not_divisible_by_four() {
        assert!(sinusoidal_pe_2d(2, 2, 6).is_err());
        assert!(sinusoidal_pe_2d(2, 2, 0).is_err());
    }

    #[test]
    fn matches_closed_form() {
        // d = 8: two frequencies per half, ω = 1 and 10000^(-1/2) = 0.01.
        let pe = sinusoidal_pe_2d(2, 3, 8).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let (y, x) = (r as f64, c as f64);
                let expect = [
                    y.sin(),
                    y.cos(),
                    (y * 0.01).sin(),
                    (y * 0.01).cos(),
                    x.sin(),
                    x.cos(),
                    (x * 0.01).sin(),
                    (x * 0.01).cos(),
                ];
                for (a, b) in pe.row(r * 3 + c).iter().zip(expect) {
                    assert!((a - b).abs() <= 1e-15, "({r},{c}): {a} vs {b}");
                }
            }
        }
    }
}
