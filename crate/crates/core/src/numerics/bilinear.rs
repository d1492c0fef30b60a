//! Bilinear interpolation on `C x H x W` maps with analytic gradients.
//!
//! Coordinate convention: `(u, v) = (column, row)` with integer coordinates
//! at pixel centers. Samples outside `[0, W-1] x [0, H-1]` use zero padding:
//! out-of-bounds neighbor contributions are zero, and a fully out-of-bounds
//! point yields the zero vector. This boundary convention is a library
//! decision; anyone comparing against a framework grid-sample should check
//! its padding mode first.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The up-to-4 in-bounds corner taps of one bilinear sample.
///
/// `idx` holds flat `v * W + u` offsets into a single `H x W` channel plane.
/// `w` is the interpolation weight, `dwu`/`dwv` its derivatives w.r.t. the
/// sample coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dwu: [f64; 4],
    pub dwv: [f64; 4],
    pub count: usize,
}

impl Footprint {
    /// Interpolate one channel plane.
    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.count {
            acc += self.w[i] * plane[self.idx[i]];
        }
        acc
    }

    /// Derivative of the interpolant w.r.t. `(u, v)` for one channel plane.
    #[inline]
    pub fn sample_grad_uv(&self, plane: &[f64]) -> (f64, f64) {
        let (mut du, mut dv) = (0.0, 0.0);
        for i in 0..self.count {
            du += self.dwu[i] * plane[self.idx[i]];
            dv += self.dwv[i] * plane[self.idx[i]];
        }
        (du, dv)
    }

    /// Scatter `g` into the corner taps of one channel plane.
    #[inline]
    pub fn scatter(&self, g: f64, plane: &mut [f64]) {
        for i in 0..self.count {
            plane[self.idx[i]] += g * self.w[i];
        }
    }
}

/// Corner taps and weights for a sample at `(u, v)` on an `h x w` plane.
pub fn footprint(u: f64, v: f64, h: usize, w: usize) -> Footprint {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    // (du-sign, dv-sign) pattern per corner: (u0,v0), (u0+1,v0), (u0,v0+1), (u0+1,v0+1)
    let corners = [
        (u0, v0, (1.0 - fu) * (1.0 - fv), -(1.0 - fv), -(1.0 - fu)),
        (u0 + 1.0, v0, fu * (1.0 - fv), 1.0 - fv, -fu),
        (u0, v0 + 1.0, (1.0 - fu) * fv, -fv, 1.0 - fu),
        (u0 + 1.0, v0 + 1.0, fu * fv, fv, fu),
    ];
    let mut fp = Footprint {
        idx: [0; 4],
        w: [0.0; 4],
        dwu: [0.0; 4],
        dwv: [0.0; 4],
        count: 0,
    };
    for (cu, cv, cw, dwu, dwv) in corners {
        if cu >= 0.0 && cv >= 0.0 && (cu as usize) < w && (cv as usize) < h {
            let i = fp.count;
            fp.idx[i] = (cv as usize) * w + cu as usize;
            fp.w[i] = cw;
            fp.dwu[i] = dwu;
            fp.dwv[i] = dwv;
            fp.count += 1;
        }
    }
    fp
}

fn check_map_point(map: &Tensor, point: (f64, f64)) -> Result<(usize, usize, usize)> {
    map.require_rank(3, "bilinear_sample")?;
    if !point.0.is_finite() || !point.1.is_finite() {
        return Err(Error::NonFinite("bilinear sample point"));
    }
    let s = map.shape();
    Ok((s[0], s[1], s[2]))
}

/// Bilinear sample of a `C x H x W` map at continuous pixel `(u, v)`.
pub fn bilinear_sample(map: &Tensor, point: (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = check_map_point(map, point)?;
    let fp = footprint(point.0, point.1, h, w);
    let plane = h * w;
    let data = map.data();
    let mut out = vec![0.0; c];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = fp.sample(&data[ch * plane..(ch + 1) * plane]);
    }
    Tensor::new(vec![c], out)
}

/// Gradients of [`bilinear_sample`] w.r.t. the map and the point.
///
/// `grad_map` is nonzero only at the (at most 4) in-bounds corner pixels;
/// `grad_point` is the analytic derivative of the interpolant contracted
/// with `upstream`.
pub fn bilinear_sample_grad(
    map: &Tensor,
    point: (f64, f64),
    upstream: &Tensor,
) -> Result<(Tensor, (f64, f64))> {
    let (c, h, w) = check_map_point(map, point)?;
    if upstream.len() != c {
        return Err(Error::shape(
            "bilinear_sample_grad upstream",
            format!("{c}"),
            format!("{}", upstream.len()),
        ));
    }
    let fp = footprint(point.0, point.1, h, w);
    let plane = h * w;
    let data = map.data();
    let up = upstream.data();
    let mut grad_map = Tensor::zeros(map.shape());
    let (mut gu, mut gv) = (0.0, 0.0);
    for ch in 0..c {
        let src = &data[ch * plane..(ch + 1) * plane];
        let (du, dv) = fp.sample_grad_uv(src);
        gu += up[ch] * du;
        gv += up[ch] * dv;
        fp.scatter(up[ch], &mut grad_map.data_mut()[ch * plane..(ch + 1) * plane]);
    }
    Ok((grad_map, (gu, gv)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// Independent 4-term expansion, written against the definition rather
    /// than the Footprint machinery. Oracle for the tests below.
    fn oracle_sample(map: &Tensor, c: usize, u: f64, v: f64) -> f64 {
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let (u0, v0) = (u.floor() as i64, v.floor() as i64);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let tap = |uu: i64, vv: i64| -> f64 {
            if uu < 0 || vv < 0 || uu >= w as i64 || vv >= h as i64 {
                0.0
            } else {
                map.at(&[c, vv as usize, uu as usize])
            }
        };
        tap(u0, v0) * (1.0 - fu) * (1.0 - fv)
            + tap(u0 + 1, v0) * fu * (1.0 - fv)
            + tap(u0, v0 + 1) * (1.0 - fu) * fv
            + tap(u0 + 1, v0 + 1) * fu * fv
    }

    fn random_map(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, "bilinear-test-map");
        Tensor::from_fn(shape, |_| normal(&mut rng))
    }

    #[test]
    fn exact_at_grid_node() {
        let mut map = Tensor::zeros(&[2, 4, 5]);
        *map.at_mut(&[0, 2, 3]) = 7.0;
        *map.at_mut(&[1, 2, 3]) = 7.0;
        let out = bilinear_sample(&map, (3.0, 2.0)).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0]);
    }

    #[test]
    fn cell_center_is_mean() {
        let map = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = bilinear_sample(&map, (0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(out.data()[0], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn matches_four_term_oracle() {
        let map = random_map(&[1, 4, 4], 11);
        let out = bilinear_sample(&map, (1.3, 2.6)).unwrap();
        assert_abs_diff_eq!(out.data()[0], oracle_sample(&map, 0, 1.3, 2.6), epsilon = 1e-14);
    }

    #[test]
    fn zero_padding_outside() {
        let map = random_map(&[3, 4, 4], 12);
        // straddling the left edge: only the two in-bounds corners contribute
        let out = bilinear_sample(&map, (-0.25, 1.5)).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(out.data()[c], oracle_sample(&map, c, -0.25, 1.5), epsilon = 1e-14);
        }
        // fully outside
        let far = bilinear_sample(&map, (-10.0, 100.0)).unwrap();
        assert_eq!(far.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let map = Tensor::zeros(&[2, 2]);
        assert!(bilinear_sample(&map, (0.0, 0.0)).is_err());
        let map = Tensor::zeros(&[1, 2, 2]);
        assert!(bilinear_sample(&map, (f64::NAN, 0.0)).is_err());
        assert!(bilinear_sample(&map, (0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn linear_in_the_map() {
        let a = random_map(&[2, 5, 6], 21);
        let b = random_map(&[2, 5, 6], 22);
        let (alpha, beta) = (0.7, -1.3);
        let mixed = a.scale(alpha).add(&b.scale(beta)).unwrap();
        for &(u, v) in &[(1.2, 3.4), (0.0, 0.0), (4.9, 0.1), (-0.3, 2.0)] {
            let sa = bilinear_sample(&a, (u, v)).unwrap();
            let sb = bilinear_sample(&b, (u, v)).unwrap();
            let sm = bilinear_sample(&mixed, (u, v)).unwrap();
            for c in 0..2 {
                assert_abs_diff_eq!(
                    sm.data()[c],
                    alpha * sa.data()[c] + beta * sb.data()[c],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn continuous_across_cell_boundaries() {
        let map = random_map(&[1, 6, 6], 31);
        let m = map.max_abs();
        for &(u, v) in &[(2.0, 3.0), (1.0, 1.5), (0.0, 4.0), (5.0, 5.0)] {
            let here = bilinear_sample(&map, (u, v)).unwrap().data()[0];
            for (du, dv) in [(1e-9, 0.0), (-1e-9, 0.0), (0.0, 1e-9), (0.0, -1e-9)] {
                let near = bilinear_sample(&map, (u + du, v + dv)).unwrap().data()[0];
                assert!((here - near).abs() < 1e-6 * m);
            }
        }
    }

    #[test]
    fn grad_zero_upstream() {
        let map = random_map(&[2, 4, 4], 41);
        let up = Tensor::zeros(&[2]);
        let (gm, (gu, gv)) = bilinear_sample_grad(&map, (1.4, 2.2), &up).unwrap();
        assert_eq!(gm.max_abs(), 0.0);
        assert_eq!((gu, gv), (0.0, 0.0));
    }

    #[test]
    fn grad_at_grid_node_is_delta() {
        let map = random_map(&[1, 4, 4], 42);
        let up = Tensor::new(vec![1], vec![1.0]).unwrap();
        let (gm, _) = bilinear_sample_grad(&map, (2.0, 1.0), &up).unwrap();
        for v in 0..4 {
            for u in 0..4 {
                let want = if (u, v) == (2, 1) { 1.0 } else { 0.0 };
                assert_eq!(gm.at(&[0, v, u]), want);
            }
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = stream(43, "bilinear-fd");
        for _ in 0..100 {
            let map = Tensor::from_fn(&[2, 5, 5], |_| normal(&mut rng));
            // interior points away from integer coordinates (the interpolant
            // has corners there and one-sided FD would disagree)
            let u = 0.5 + 3.0 * rng.gen_range(0.05..0.95);
            let v = 0.5 + 3.0 * rng.gen_range(0.05..0.95);
            let up = Tensor::from_fn(&[2], |_| normal(&mut rng));
            let (gm, (gu, gv)) = bilinear_sample_grad(&map, (u, v), &up).unwrap();

            let f = |m: &Tensor, uu: f64, vv: f64| -> f64 {
                let s = bilinear_sample(m, (uu, vv)).unwrap();
                s.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            let rel = |fd: f64, an: f64| (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
            assert!(rel((f(&map, u + h, v) - f(&map, u - h, v)) / (2.0 * h), gu) < 1e-5);
            assert!(rel((f(&map, u, v + h) - f(&map, u, v - h)) / (2.0 * h), gv) < 1e-5);

            // spot-check a few map coordinates
            for _ in 0..5 {
                let i = rng.gen_range(0..map.len());
                let mut mp = map.clone();
                mp.data_mut()[i] += h;
                let mut mm = map.clone();
                mm.data_mut()[i] -= h;
                let fd = (f(&mp, u, v) - f(&mm, u, v)) / (2.0 * h);
                assert!(rel(fd, gm.data()[i]) < 1e-5, "map grad mismatch at {i}");
            }
        }
    }
}
