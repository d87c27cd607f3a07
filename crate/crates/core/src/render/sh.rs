//! Order-2 real spherical harmonics irradiance.

use crate::tensor::Real;

const C0: f64 = 0.282_094_791_773_878_1;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C3: f64 = 0.315_391_565_252_520_05;
const C4: f64 = 0.546_274_215_296_039_6;

/// The nine basis functions at unit direction `n = (x, y, z)`.
#[inline]
pub fn sh_basis<T: Real>(n: [T; 3]) -> [T; 9] {
    let [x, y, z] = n;
    [
        T::c(C0),
        T::c(C1) * y,
        T::c(C1) * z,
        T::c(C1) * x,
        T::c(C2) * x * y,
        T::c(C2) * y * z,
        T::c(C3) * (T::c(3.0) * z * z - T::one()),
        T::c(C2) * x * z,
        T::c(C4) * (x * x - y * y),
    ]
}

/// Gradient of each basis function with respect to `n`.
#[inline]
pub fn sh_basis_grad<T: Real>(n: [T; 3]) -> [[T; 3]; 9] {
    let [x, y, z] = n;
    let o = T::zero();
    let (c1, c2) = (T::c(C1), T::c(C2));
    [
        [o, o, o],
        [o, c1, o],
        [o, o, c1],
        [c1, o, o],
        [c2 * y, c2 * x, o],
        [o, c2 * z, c2 * y],
        [o, o, T::c(6.0 * C3) * z],
        [c2 * z, o, c2 * x],
        [T::c(2.0 * C4) * x, T::c(-2.0 * C4) * y, o],
    ]
}

/// `sum_k L_k Y_k(n)` before clamping.
#[inline]
pub fn sh_irradiance_raw<T: Real>(n: [T; 3], light: &[T]) -> T {
    let y = sh_basis(n);
    let mut s = T::zero();
    for k in 0..9 {
        s += light[k] * y[k];
    }
    s
}

/// Irradiance for unit normal `n`, clamped to be nonnegative.
pub fn shade_sh(n: [f64; 3], light: &[f64; 9]) -> f64 {
    sh_irradiance_raw(n, light).max(0.0)
}

/// Light whose irradiance is `level` in every direction.
pub fn ambient_light(level: f64) -> [f64; 9] {
    let mut l = [0.0; 9];
    l[0] = level / C0;
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirs() -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..7 {
            for j in 0..5 {
                let th = 0.3 + i as f64 * 0.4;
                let ph = -1.2 + j as f64 * 0.55;
                out.push([th.sin() * ph.cos(), th.cos(), th.sin() * ph.sin()]);
            }
        }
        out
    }

    #[test]
    fn dc_term_is_constant() {
        let c = 1.7;
        let mut l = [0.0; 9];
        l[0] = c;
        for n in dirs() {
            assert!((shade_sh(n, &l) - c * 0.282095).abs() < 1e-6);
        }
        assert!(dirs().iter().all(|&n| shade_sh(n, &[0.0; 9]) == 0.0));
        assert!((C0 - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn first_order_is_odd() {
        let mut l = [0.0; 9];
        l[1] = 1.0;
        for n in dirs() {
            let neg = [-n[0], -n[1], -n[2]];
            let a = sh_irradiance_raw(n, &l);
            assert!((a + sh_irradiance_raw(neg, &l)).abs() < 1e-12);
            assert!((a - C1 * n[1]).abs() < 1e-12);
            assert!(shade_sh(n, &l) >= 0.0);
        }
    }

    #[test]
    fn basis_gradient_matches_differences() {
        let n: [f64; 3] = [0.3, -0.5, 0.81];
        let g = sh_basis_grad(n);
        for axis in 0..3 {
            let mut p = n;
            let mut m = n;
            p[axis] += 1e-6;
            m[axis] -= 1e-6;
            let (yp, ym) = (sh_basis(p), sh_basis(m));
            for k in 0..9 {
                let fd = (yp[k] - ym[k]) / 2e-6;
                assert!((fd - g[k][axis]).abs() < 1e-7, "basis {k} axis {axis}");
            }
        }
    }
}
