//! Binary morphology on pixel grids: Euclidean-disc dilation/erosion via
//! brute-force neighborhood checks (cheap at 32×32), Gaussian boundary
//! smoothing with rethresholding, and the rater-style annotation transform
//! built from those pieces.

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, standard_normal};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Jitter applied to the smoothed boundary field before rethresholding,
/// active only when a profile smooths (`boundary_smoothing_sigma > 0`).
/// Small enough that only pixels near the 0.5 level can flip.
pub const BOUNDARY_JITTER: f64 = 0.1;

/// One rater's systematic annotation style: signed structuring-element
/// radius (positive dilates, negative erodes), boundary smoothing strength,
/// and a constant translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    pub dilation_radius: i32,
    pub boundary_smoothing_sigma: f64,
    pub shift: (i32, i32),
}

impl RaterProfile {
    pub fn is_identity(&self) -> bool {
        self.dilation_radius == 0 && self.boundary_smoothing_sigma == 0.0 && self.shift == (0, 0)
    }
}

/// The four default rater styles: a faithful rater, a dilator, an eroder,
/// and a smoother who also shifts. Pairwise distinct by construction.
pub fn default_profiles() -> Vec<RaterProfile> {
    vec![
        RaterProfile {
            dilation_radius: 0,
            boundary_smoothing_sigma: 0.0,
            shift: (0, 0),
        },
        RaterProfile {
            dilation_radius: 1,
            boundary_smoothing_sigma: 0.5,
            shift: (0, 0),
        },
        RaterProfile {
            dilation_radius: -1,
            boundary_smoothing_sigma: 0.5,
            shift: (0, 0),
        },
        RaterProfile {
            dilation_radius: 0,
            boundary_smoothing_sigma: 1.0,
            shift: (1, 1),
        },
    ]
}

fn disc_offsets(radius: i32) -> Vec<(i32, i32)> {
    let r = radius.abs();
    let r2 = (r * r) as i64;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as i64 <= r2 {
                offs.push((dy, dx));
            }
        }
    }
    offs
}

fn expect_mask(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, "[H,W]", format!("{:?}", t.shape())));
    }
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "mask must be binary".to_string()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Dilation by a Euclidean disc of the given radius: a pixel turns on if any
/// foreground pixel center lies within `radius` of it.
pub fn dilate(mask: &Tensor, radius: i32) -> Result<Tensor> {
    let (h, w) = expect_mask(mask, "dilate")?;
    if radius <= 0 {
        return Ok(mask.clone());
    }
    let offs = disc_offsets(radius);
    let src = mask.data();
    let mut out = vec![0.0; h * w];
    for r in 0..h as i32 {
        for c in 0..w as i32 {
            let hit = offs.iter().any(|&(dy, dx)| {
                let (rr, cc) = (r + dy, c + dx);
                rr >= 0
                    && rr < h as i32
                    && cc >= 0
                    && cc < w as i32
                    && src[(rr as usize) * w + cc as usize] == 1.0
            });
            if hit {
                out[(r as usize) * w + c as usize] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Erosion by a Euclidean disc: a foreground pixel survives only if its
/// whole disc neighborhood is foreground (out-of-image counts as background).
pub fn erode(mask: &Tensor, radius: i32) -> Result<Tensor> {
    let (h, w) = expect_mask(mask, "erode")?;
    if radius <= 0 {
        return Ok(mask.clone());
    }
    let offs = disc_offsets(radius);
    let src = mask.data();
    let mut out = vec![0.0; h * w];
    for r in 0..h as i32 {
        for c in 0..w as i32 {
            if src[(r as usize) * w + c as usize] != 1.0 {
                continue;
            }
            let keep = offs.iter().all(|&(dy, dx)| {
                let (rr, cc) = (r + dy, c + dx);
                rr >= 0
                    && rr < h as i32
                    && cc >= 0
                    && cc < w as i32
                    && src[(rr as usize) * w + cc as usize] == 1.0
            });
            if keep {
                out[(r as usize) * w + c as usize] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Deepest-interior pixels of a mask: the argmax set of the Euclidean
/// distance-to-background transform. Non-empty whenever the mask is.
pub fn core_pixels(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = expect_mask(mask, "core_pixels")?;
    let src = mask.data();
    let fg: Vec<(i32, i32)> = (0..h * w)
        .filter(|&i| src[i] == 1.0)
        .map(|i| ((i / w) as i32, (i % w) as i32))
        .collect();
    if fg.is_empty() {
        return Err(Error::invalid("core_pixels", "mask is empty".to_string()));
    }
    let bg: Vec<(i32, i32)> = (0..h * w)
        .filter(|&i| src[i] == 0.0)
        .map(|i| ((i / w) as i32, (i % w) as i32))
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut dist = vec![0.0; fg.len()];
    for (k, &(r, c)) in fg.iter().enumerate() {
        // Distance to image border also bounds depth.
        let border = (r.min(c).min(h as i32 - 1 - r).min(w as i32 - 1 - c) + 1) as f64;
        let mut d = border;
        for &(br, bc) in &bg {
            let dd = (((r - br) * (r - br) + (c - bc) * (c - bc)) as f64).sqrt();
            if dd < d {
                d = dd;
            }
        }
        dist[k] = d;
        if d > best {
            best = d;
        }
    }
    let mut out = vec![0.0; h * w];
    for (k, &(r, c)) in fg.iter().enumerate() {
        if dist[k] == best {
            out[(r as usize) * w + c as usize] = 1.0;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Separable Gaussian smoothing of a scalar field with zero extension
/// outside the image (appropriate for masks on a dark background).
pub fn smooth_field(field: &Tensor, sigma: f64) -> Result<Tensor> {
    if field.shape().len() != 2 {
        return Err(Error::shape("smooth_field", "[H,W]", format!("{:?}", field.shape())));
    }
    if sigma <= 0.0 {
        return Ok(field.clone());
    }
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let radius = (3.0 * sigma).ceil() as i32;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let src = field.data();
    let mut tmp = vec![0.0; h * w];
    for r in 0..h as i32 {
        for c in 0..w as i32 {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let cc = c + ki as i32 - radius;
                if cc >= 0 && cc < w as i32 {
                    acc += kv * src[(r as usize) * w + cc as usize];
                }
            }
            tmp[(r as usize) * w + c as usize] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h as i32 {
        for c in 0..w as i32 {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let rr = r + ki as i32 - radius;
                if rr >= 0 && rr < h as i32 {
                    acc += kv * tmp[(rr as usize) * w + c as usize];
                }
            }
            out[(r as usize) * w + c as usize] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

fn translate(mask: &Tensor, shift: (i32, i32)) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (dy, dx) = shift;
    let src = mask.data();
    let mut out = vec![0.0; h * w];
    for r in 0..h as i32 {
        for c in 0..w as i32 {
            let (sr, sc) = (r - dy, c - dx);
            if sr >= 0 && sr < h as i32 && sc >= 0 && sc < w as i32 {
                out[(r as usize) * w + c as usize] = src[(sr as usize) * w + sc as usize];
            }
        }
    }
    Tensor::new(vec![h, w], out).expect("same shape")
}

/// Applies one rater's style to a reference mask: signed disc
/// dilation/erosion, then Gaussian boundary smoothing with seeded jitter and
/// rethreshold at 0.5, then translation. Deterministic per seed. Erosion
/// that would empty the mask floors at the deepest-interior core, and a
/// pathological final emptiness falls back to the input's core, so the
/// output is always non-empty.
pub fn rater_annotate(mask: &Tensor, profile: &RaterProfile, seed: u64) -> Result<Tensor> {
    let (h, w) = expect_mask(mask, "rater_annotate")?;
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("rater_annotate", "reference mask is empty".to_string()));
    }

    let mut current = match profile.dilation_radius.cmp(&0) {
        std::cmp::Ordering::Greater => dilate(mask, profile.dilation_radius)?,
        std::cmp::Ordering::Less => {
            let eroded = erode(mask, -profile.dilation_radius)?;
            if eroded.data().iter().all(|&v| v == 0.0) {
                core_pixels(mask)?
            } else {
                eroded
            }
        }
        std::cmp::Ordering::Equal => mask.clone(),
    };

    if profile.boundary_smoothing_sigma > 0.0 {
        let soft = smooth_field(&current, profile.boundary_smoothing_sigma)?;
        let mut rng = rng_from_seed(seed);
        let data: Vec<f64> = soft
            .data()
            .iter()
            .map(|&v| {
                let jittered = v + BOUNDARY_JITTER * standard_normal(&mut rng);
                if jittered >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        current = Tensor::new(vec![h, w], data)?;
    }

    if profile.shift != (0, 0) {
        current = translate(&current, profile.shift);
    }

    if current.data().iter().all(|&v| v == 0.0) {
        current = core_pixels(mask)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_3x3(h: usize, w: usize, top: usize, left: usize) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for r in top..top + 3 {
            for c in left..left + 3 {
                t.data_mut()[r * w + c] = 1.0;
            }
        }
        t
    }

    fn count(t: &Tensor) -> usize {
        t.data().iter().filter(|&&v| v == 1.0).count()
    }

    fn subset(a: &Tensor, b: &Tensor) -> bool {
        a.data().iter().zip(b.data()).all(|(&x, &y)| x == 0.0 || y == 1.0)
    }

    /// Brute-force Minkowski-sum oracle for disc dilation.
    fn dilate_oracle(mask: &Tensor, radius: i32) -> Tensor {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let mut out = Tensor::zeros(&[h, w]);
        for pr in 0..h as i32 {
            for pc in 0..w as i32 {
                'search: for qr in 0..h as i32 {
                    for qc in 0..w as i32 {
                        if mask.data()[(qr as usize) * w + qc as usize] == 1.0
                            && (pr - qr) * (pr - qr) + (pc - qc) * (pc - qc) <= radius * radius
                        {
                            out.data_mut()[(pr as usize) * w + pc as usize] = 1.0;
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn radius_one_dilation_of_square_is_the_disc_minkowski_sum() {
        // A 3x3 square dilated by the radius-1 Euclidean disc (the
        // 4-neighborhood) gains one pixel in each cardinal direction: a
        // 21-pixel plus-shaped region whose bounding box is 5x5. The corner
        // pixels sit at Euclidean distance sqrt(2) > 1 and stay off.
        let sq = square_3x3(9, 9, 3, 3);
        let got = dilate(&sq, 1).unwrap();
        let want = dilate_oracle(&sq, 1);
        assert_eq!(got.data(), want.data());
        assert_eq!(count(&got), 21);
        // Bounding box 5x5.
        let on: Vec<usize> = (0..81).filter(|&i| got.data()[i] == 1.0).collect();
        let rows: Vec<usize> = on.iter().map(|i| i / 9).collect();
        let cols: Vec<usize> = on.iter().map(|i| i % 9).collect();
        assert_eq!(rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1, 5);
        assert_eq!(cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1, 5);
        // Corners of the box are off.
        assert_eq!(got.data()[2 * 9 + 2], 0.0);
        assert_eq!(got.data()[6 * 9 + 6], 0.0);
    }

    #[test]
    fn erosion_inverts_dilation_on_deep_interiors() {
        let sq = square_3x3(11, 11, 4, 4);
        let opened = erode(&dilate(&sq, 1).unwrap(), 1).unwrap();
        assert_eq!(opened.data(), sq.data());
    }

    #[test]
    fn opening_is_contained_in_closing() {
        // Interior masks: erosion treats out-of-image as background, so the
        // classical opening/closing ordering is stated away from the border.
        let mut rng = rng_from_seed(9);
        for _ in 0..20 {
            let mut m = Tensor::zeros(&[12, 12]);
            for r in 2..10 {
                for c in 2..10 {
                    if crate::rng::standard_normal(&mut rng) > 0.3 {
                        m.data_mut()[r * 12 + c] = 1.0;
                    }
                }
            }
            let opening = dilate(&erode(&m, 1).unwrap(), 1).unwrap();
            let closing = erode(&dilate(&m, 1).unwrap(), 1).unwrap();
            assert!(subset(&opening, &m), "opening must shrink");
            assert!(subset(&m, &closing), "closing must grow");
            assert!(subset(&opening, &closing));
        }
    }

    #[test]
    fn zero_profile_is_identity() {
        let sq = square_3x3(8, 8, 2, 2);
        let profile = RaterProfile {
            dilation_radius: 0,
            boundary_smoothing_sigma: 0.0,
            shift: (0, 0),
        };
        let out = rater_annotate(&sq, &profile, 123).unwrap();
        assert_eq!(out.data(), sq.data());
    }

    #[test]
    fn erosion_floors_at_the_core() {
        // Radius-2 erosion would wipe out a 3x3 square; the guarantee keeps
        // the deepest pixel (the center).
        let sq = square_3x3(9, 9, 3, 3);
        let profile = RaterProfile {
            dilation_radius: -2,
            boundary_smoothing_sigma: 0.0,
            shift: (0, 0),
        };
        let out = rater_annotate(&sq, &profile, 0).unwrap();
        assert_eq!(count(&out), 1);
        assert_eq!(out.data()[4 * 9 + 4], 1.0);
    }

    #[test]
    fn annotate_is_deterministic_per_seed_and_varies_across_seeds() {
        let sq = square_3x3(16, 16, 6, 6);
        let profile = RaterProfile {
            dilation_radius: 0,
            boundary_smoothing_sigma: 1.0,
            shift: (0, 0),
        };
        let a = rater_annotate(&sq, &profile, 5).unwrap();
        let b = rater_annotate(&sq, &profile, 5).unwrap();
        assert_eq!(a.data(), b.data());
        // Some seed within a small range flips at least one boundary pixel.
        let mut any_diff = false;
        for s in 6..16 {
            let c = rater_annotate(&sq, &profile, s).unwrap();
            if c.data() != a.data() {
                any_diff = true;
                break;
            }
        }
        assert!(any_diff, "boundary jitter should respond to the seed");
    }

    #[test]
    fn shifted_profile_translates_the_mask() {
        let sq = square_3x3(10, 10, 3, 3);
        let profile = RaterProfile {
            dilation_radius: 0,
            boundary_smoothing_sigma: 0.0,
            shift: (2, 1),
        };
        let out = rater_annotate(&sq, &profile, 0).unwrap();
        let want = square_3x3(10, 10, 5, 4);
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn default_profiles_are_pairwise_distinct() {
        let ps = default_profiles();
        assert_eq!(ps.len(), 4);
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                assert_ne!(ps[i], ps[j]);
            }
        }
        assert!(ps[0].is_identity());
    }

    #[test]
    fn smoothing_preserves_mass_roughly_and_rejects_bad_rank() {
        let sq = square_3x3(12, 12, 4, 4);
        let soft = smooth_field(&sq, 0.8).unwrap();
        let mass: f64 = soft.data().iter().sum();
        assert!((mass - 9.0).abs() < 1e-6, "interior mass preserved, got {mass}");
        assert!(smooth_field(&Tensor::zeros(&[2, 2, 2]), 1.0).is_err());
    }
}
