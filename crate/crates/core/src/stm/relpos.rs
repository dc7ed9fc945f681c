use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Expands a relative-position table `[side², heads]` into a dense additive
/// bias `[heads, q_side², k_side²]`.
///
/// Queries sit on a `q_side × q_side` grid at the origin; keys on a
/// `k_side × k_side` grid whose top-left corner is at `(key_origin,
/// key_origin)`. The displacement `key - query` along each axis, shifted by
/// `radius`, indexes the table.
pub fn relative_position_bias(
    table: &Tensor,
    q_side: usize,
    k_side: usize,
    key_origin: isize,
    radius: usize,
) -> Result<Tensor> {
    let [rows, heads] = table.dims2()?;
    let side = (rows as f64).sqrt() as usize;
    if side * side != rows {
        return Err(Error::shape("relative_position_bias", "[side², heads]", format!("{:?}", table.shape())));
    }
    let lo = key_origin - (q_side as isize - 1) + radius as isize;
    let hi = key_origin + k_side as isize - 1 + radius as isize;
    if lo < 0 || hi >= side as isize {
        return Err(Error::invalid(format!(
            "relative position table of side {side} cannot cover displacements [{lo}, {hi}]"
        )));
    }
    let (tq, tk) = (q_side * q_side, k_side * k_side);
    let mut out = vec![0.0f32; heads * tq * tk];
    for i in 0..tq {
        let (qy, qx) = ((i / q_side) as isize, (i % q_side) as isize);
        for j in 0..tk {
            let ky = (j / k_side) as isize + key_origin;
            let kx = (j % k_side) as isize + key_origin;
            let ry = (ky - qy + radius as isize) as usize;
            let rx = (kx - qx + radius as isize) as usize;
            let row = &table.data()[(ry * side + rx) * heads..][..heads];
            for (h, &b) in row.iter().enumerate() {
                out[(h * tq + i) * tk + j] = b;
            }
        }
    }
    Ok(Tensor::from_parts(vec![heads, tq, tk], out))
}

/// Side of the table needed for a block of side `b` with halo `halo`.
pub(crate) fn table_side(b: usize, halo: usize) -> usize {
    2 * (b + halo) - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_bias_is_translation_invariant() {
        let b = 3;
        let side = table_side(b, 0);
        let table = Tensor::from_fn(&[side * side, 2], |i| i as f32).unwrap();
        let bias = relative_position_bias(&table, b, b, 0, b - 1).unwrap();
        // (q=(0,0), k=(1,1)) and (q=(1,1), k=(2,2)) share a displacement
        let at = |h: usize, q: usize, k: usize| bias.at(&[h, q, k]);
        assert_eq!(at(1, 0, 4), at(1, 4, 8));
        assert_ne!(at(0, 0, 4), at(0, 0, 5));
    }

    #[test]
    fn rejects_small_table() {
        let table = Tensor::zeros(&[9, 1]).unwrap();
        assert!(relative_position_bias(&table, 3, 5, -1, 3).is_err());
    }
}
