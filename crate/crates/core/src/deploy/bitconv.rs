//! Binary convolution by xor and population count.
//!
//! A sign vector is stored one bit per element, bit 1 for `+1` and bit 0 for
//! `-1`. For two such vectors of length `n`,
//! `dot = n - 2 * popcount(x xor w)`.

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;

/// Dot product of two packed sign vectors over their first `n` bits.
/// Bits at positions `>= n` are ignored.
pub fn xnor_dot(x: &[u64], w: &[u64], n: usize) -> i64 {
    let full = n / 64;
    let mut mismatches: u32 = x[..full].iter().zip(&w[..full]).map(|(a, b)| (a ^ b).count_ones()).sum();
    let rest = n % 64;
    if rest != 0 {
        let mask = (1u64 << rest) - 1;
        mismatches += ((x[full] ^ w[full]) & mask).count_ones();
    }
    n as i64 - 2 * mismatches as i64
}

/// Packs `+-1` values (sign of each element) into `ceil(n/64)` words.
pub fn pack_signs(values: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; values.len().div_ceil(64)];
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 {
            out[i / 64] |= 1 << (i % 64);
        }
    }
    out
}

/// Packs each row of a `[rows, n]` matrix of `+-1` values into its own
/// word-aligned run of `ceil(n/64)` words.
pub fn pack_sign_rows(values: &[f64], n: usize) -> Vec<u64> {
    values.chunks(n).flat_map(pack_signs).collect()
}

/// What a zero-padded tap means for the bit kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// The tap contributes nothing (masked out of the count).
    Absent,
    /// The tap reads as `-1`; used for `{0, 1}` activations, where a zero
    /// pad is the value `0` and maps to sign `-1`.
    Minus,
}

/// Integer accumulators `[B, M, OH, OW]` of a convolution between sign
/// activations `x` (NCHW, `x > 0` read as `+1`) and packed sign weight rows
/// `w_rows` (one word-aligned row of `C*Kh*Kw` bits per output channel, in
/// the `(c, ky, kx)` order of the weight tensor).
pub fn binary_conv_popcount(geo: &ConvGeometry, x: &[f64], w_rows: &[u64], padding: Padding) -> Result<Vec<i64>> {
    let n = geo.patch_len();
    let wpp = n.div_ceil(64);
    let m = geo.out_channels;
    let in_len = geo.in_channels * geo.height * geo.width;
    if x.len() != geo.batch * in_len || w_rows.len() != m * wpp {
        return Err(Error::shape(
            "binary_conv_popcount",
            format!("{} activations and {} weight words for geometry {geo:?}", x.len(), w_rows.len()),
        ));
    }
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let mut out = vec![0i64; geo.batch * m * oh * ow];
    let mut bits = vec![0u64; wpp];
    let mut mask = vec![0u64; wpp];
    let (kh, kw, s, pad) = (geo.kernel_h, geo.kernel_w, geo.stride as isize, geo.padding as isize);
    for b in 0..geo.batch {
        let sample = &x[b * in_len..(b + 1) * in_len];
        for oy in 0..oh {
            for ox in 0..ow {
                bits.fill(0);
                mask.fill(0);
                let mut t = 0;
                for c in 0..geo.in_channels {
                    for ky in 0..kh {
                        let iy = oy as isize * s + ky as isize - pad;
                        for kx in 0..kw {
                            let ix = ox as isize * s + kx as isize - pad;
                            let inside = iy >= 0 && ix >= 0 && iy < geo.height as isize && ix < geo.width as isize;
                            if inside {
                                let v = sample[(c * geo.height + iy as usize) * geo.width + ix as usize];
                                if v > 0.0 {
                                    bits[t / 64] |= 1 << (t % 64);
                                }
                            }
                            if inside || padding == Padding::Minus {
                                mask[t / 64] |= 1 << (t % 64);
                            }
                            t += 1;
                        }
                    }
                }
                let valid: i64 = mask.iter().map(|w| w.count_ones() as i64).sum();
                for oc in 0..m {
                    let w = &w_rows[oc * wpp..(oc + 1) * wpp];
                    let mism: i64 =
                        (0..wpp).map(|j| ((bits[j] ^ w[j]) & mask[j]).count_ones() as i64).sum();
                    out[((b * m + oc) * oh + oy) * ow + ox] = valid - 2 * mism;
                }
            }
        }
    }
    Ok(out)
}

/// Convolution of `{0, 1}` activations with `+-1` weights through the sign
/// kernel: with `a = (s + 1) / 2`, `sum w a = (sum w s + sum w) / 2`, where
/// both sums run over the full receptive field (zero pads read as `s = -1`).
pub fn binary_conv01(geo: &ConvGeometry, a: &[f64], w_rows: &[u64]) -> Result<Vec<i64>> {
    let n = geo.patch_len();
    let wpp = n.div_ceil(64);
    let signed = binary_conv_popcount(geo, a, w_rows, Padding::Minus)?;
    let w_sum: Vec<i64> = (0..geo.out_channels)
        .map(|oc| {
            let plus = (0..wpp).map(|j| w_rows[oc * wpp + j].count_ones() as i64).sum::<i64>();
            2 * plus - n as i64
        })
        .collect();
    let per = geo.out_h() * geo.out_w();
    Ok(signed
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let oc = (i / per) % geo.out_channels;
            (d + w_sum[oc]) / 2
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_dot(x: u64, w: u64, n: usize) -> i64 {
        (0..n)
            .map(|i| {
                let a = if x >> i & 1 == 1 { 1 } else { -1 };
                let b = if w >> i & 1 == 1 { 1 } else { -1 };
                a * b
            })
            .sum()
    }

    #[test]
    fn identical_and_opposite() {
        assert_eq!(xnor_dot(&[0xff], &[0xff], 8), 8);
        assert_eq!(xnor_dot(&[0xa5], &[!0xa5u64], 8), -8);
    }

    #[test]
    fn exhaustive_small_lengths() {
        for n in 1..=8 {
            for x in 0..1u64 << n {
                for w in 0..1u64 << n {
                    assert_eq!(xnor_dot(&[x], &[w], n), reference_dot(x, w, n));
                }
            }
        }
        for n in 9..=16 {
            for x in 0..1u64 << n {
                for w in [0, u64::MAX, 0x5a5a, 0x1234] {
                    assert_eq!(xnor_dot(&[x], &[w], n), reference_dot(x, w, n), "n = {n}");
                }
            }
        }
    }

    #[test]
    fn ignores_bits_past_length() {
        assert_eq!(xnor_dot(&[0b1_0000], &[0], 4), 4);
        assert_eq!(xnor_dot(&[0b1_1111], &[0], 4), -4);
        assert_eq!(xnor_dot(&[u64::MAX, 1], &[u64::MAX, 0], 64), 64);
    }

    #[test]
    fn pack_rows_aligns_each_row() {
        let rows = pack_sign_rows(&[1.0, -1.0, 1.0, -1.0, -1.0, 1.0], 3);
        assert_eq!(rows, vec![0b101, 0b100]);
    }
}
