use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ScaleSchedule, TokenMap, TokenPyramid};
use crate::error::{Error, Result};

const CLASS_SALT: u64 = 0x5CA1_EC1A_55E5_0000;

/// Real-valued grid in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Random cosine-mode coefficients with frequencies in `freqs × freqs`.
fn modes(rng: &mut ChaCha8Rng, freqs: std::ops::Range<usize>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for p in freqs.clone() {
        for q in freqs.clone() {
            if p + q == 0 {
                continue;
            }
            out.push((p, q, rng.random_range(-1.0..1.0)));
        }
    }
    out
}

fn eval_modes(modes: &[(usize, usize, f64)], y: f64, x: f64) -> f64 {
    let norm = modes.iter().map(|m| m.2 * m.2).sum::<f64>().sqrt().max(1e-12);
    modes
        .iter()
        .map(|&(p, q, a)| a * (PI * p as f64 * y).cos() * (PI * q as f64 * x).cos())
        .sum::<f64>()
        / norm
}

/// Synthesises a field of the given size. The class fixes a low-frequency
/// layout (frequencies 0–2 plus an offset); the seed adds mid-frequency
/// structure and per-cell noise.
pub fn generate_field(seed: u64, class_label: u32, size: (usize, usize)) -> Field {
    let (h, w) = size;
    let mut class_rng = ChaCha8Rng::seed_from_u64(CLASS_SALT ^ u64::from(class_label));
    let offset = class_rng.random_range(-0.15..0.15);
    let layout = modes(&mut class_rng, 0..3);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(class_label));
    let detail = modes(&mut rng, 2..5);

    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let noise: f64 = rng.random_range(-1.0..1.0);
            let v = 0.5
                + offset
                + 0.35 * eval_modes(&layout, y, x)
                + 0.12 * eval_modes(&detail, y, x)
                + 0.06 * noise;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Field { h, w, data }
}

/// Area average-pool to `(h, w)`: output cell `(i, j)` averages source rows
/// `⌊i·H/h⌋ .. ⌈(i+1)·H/h⌉` and the analogous columns.
pub fn adaptive_pool(field: &Field, size: (usize, usize)) -> Vec<f64> {
    let (h, w) = size;
    let span = |i: usize, out: usize, src: usize| (i * src / out, ((i + 1) * src).div_ceil(out));
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (r0, r1) = span(i, h, field.h);
        for j in 0..w {
            let (c0, c1) = span(j, w, field.w);
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += field.data[r * field.w + c];
                }
            }
            out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

/// Half-open equal-width binning of `[0, 1]` into `vocab` bins; the top
/// edge lands in the last bin.
pub fn quantize(value: f64, vocab: usize) -> u16 {
    let bin = (value.clamp(0.0, 1.0) * vocab as f64).floor() as usize;
    bin.min(vocab - 1) as u16
}

/// Pools and quantises `field` at every scale of `schedule`.
pub fn build_pyramid(
    field: &Field,
    class_label: u32,
    schedule: &ScaleSchedule,
) -> Result<TokenPyramid> {
    if (field.h, field.w) != schedule.finest() {
        return Err(Error::Shape(format!(
            "field is {}x{}, finest scale is {:?}",
            field.h,
            field.w,
            schedule.finest()
        )));
    }
    let maps = schedule
        .grids()
        .iter()
        .map(|&(h, w)| {
            let tokens = adaptive_pool(field, (h, w))
                .into_iter()
                .map(|v| quantize(v, schedule.vocab()))
                .collect();
            TokenMap { h, w, tokens }
        })
        .collect();
    Ok(TokenPyramid { class_label, maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool2(field: &Field) -> Vec<f64> {
        adaptive_pool(field, (2, 2))
    }

    fn mad(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn deterministic_per_seed_and_class() {
        assert_eq!(generate_field(9, 3, (6, 6)), generate_field(9, 3, (6, 6)));
        assert_ne!(generate_field(9, 3, (6, 6)), generate_field(10, 3, (6, 6)));
    }

    #[test]
    fn classes_separate_at_coarse_scale() {
        let mut cross = 0.0;
        let mut within = 0.0;
        let n = 200;
        for s in 0..n {
            let a = pool2(&generate_field(s, 0, (6, 6)));
            let b = pool2(&generate_field(s, 1, (6, 6)));
            let a2 = pool2(&generate_field(s + 10_000, 0, (6, 6)));
            cross += mad(&a, &b);
            within += mad(&a, &a2);
            assert_ne!(
                generate_field(s, 0, (6, 6)).data,
                generate_field(s + 10_000, 0, (6, 6)).data
            );
        }
        assert!(cross / n as f64 > 0.0);
        assert!(within < cross, "within {within} cross {cross}");
    }

    #[test]
    fn constant_fields_hit_extreme_bins() {
        let schedule = ScaleSchedule::toy();
        for (value, token) in [(0.0, 0u16), (1.0, 63u16)] {
            let field = Field {
                h: 6,
                w: 6,
                data: vec![value; 36],
            };
            let p = build_pyramid(&field, 0, &schedule).unwrap();
            assert!(p.maps.iter().all(|m| m.tokens.iter().all(|&t| t == token)));
        }
    }

    #[test]
    fn pyramid_matches_direct_pool_and_bin() {
        let schedule = ScaleSchedule::square(&[1, 2, 4], 8).unwrap();
        let field = generate_field(17, 2, (4, 4));
        let p = build_pyramid(&field, 2, &schedule).unwrap();
        // 4x4 → 2x2 and 1x1 divide exactly, so plain block means apply.
        for (k, &side) in [1usize, 2, 4].iter().enumerate() {
            let block = 4 / side;
            for i in 0..side {
                for j in 0..side {
                    let mut acc = 0.0;
                    for r in 0..block {
                        for c in 0..block {
                            acc += field.data[(i * block + r) * 4 + j * block + c];
                        }
                    }
                    let mean = acc / (block * block) as f64;
                    let bin = ((mean * 8.0).floor() as u16).min(7);
                    assert_eq!(p.maps[k].get(i, j), bin);
                }
            }
        }
    }

    #[test]
    fn wrong_field_size_rejected() {
        let field = generate_field(1, 0, (5, 5));
        assert!(build_pyramid(&field, 0, &ScaleSchedule::toy()).is_err());
    }
}
