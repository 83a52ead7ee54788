//! Real spherical-harmonic color evaluation, degrees 0 to 3.
//!
//! Sign conventions and constants follow the reference splatting
//! implementation, so coefficient files are interchangeable with it.

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Degree-0 coefficient that renders as `rgb`.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / C0)
}

pub fn dc_to_rgb(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|c| c * C0 + 0.5)
}

/// Basis values at the unit direction `d`, for `(degree+1)^2` terms.
pub fn basis(degree: usize, d: [f64; 3]) -> Vec<f64> {
    let [x, y, z] = d;
    let mut b = Vec::with_capacity((degree + 1) * (degree + 1));
    b.push(C0);
    if degree >= 1 {
        b.extend([-C1 * y, C1 * z, -C1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]);
        if degree >= 3 {
            b.extend([
                C3[0] * y * (3.0 * xx - yy),
                C3[1] * x * y * z,
                C3[2] * y * (4.0 * zz - xx - yy),
                C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                C3[4] * x * (4.0 * zz - xx - yy),
                C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3.0 * yy),
            ]);
        }
    }
    b
}

/// Partial derivatives of each basis term with respect to `(x, y, z)`,
/// treating the components as independent.
pub fn basis_jacobian(degree: usize, d: [f64; 3]) -> Vec<[f64; 3]> {
    let [x, y, z] = d;
    let mut j = Vec::with_capacity((degree + 1) * (degree + 1));
    j.push([0.0; 3]);
    if degree >= 1 {
        j.extend([[0.0, -C1, 0.0], [0.0, 0.0, C1], [-C1, 0.0, 0.0]]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        j.extend([
            [C2[0] * y, C2[0] * x, 0.0],
            [0.0, C2[1] * z, C2[1] * y],
            [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z],
            [C2[3] * z, 0.0, C2[3] * x],
            [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0],
        ]);
        if degree >= 3 {
            j.extend([
                [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
                [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
                [
                    -2.0 * C3[2] * x * y,
                    C3[2] * (4.0 * zz - xx - 3.0 * yy),
                    8.0 * C3[2] * y * z,
                ],
                [
                    -6.0 * C3[3] * x * z,
                    -6.0 * C3[3] * y * z,
                    C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
                ],
                [
                    C3[4] * (4.0 * zz - 3.0 * xx - yy),
                    -2.0 * C3[4] * x * y,
                    8.0 * C3[4] * x * z,
                ],
                [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)],
                [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0],
            ]);
        }
    }
    j
}

/// Color before the `+0.5` offset and clamp: `sum_k coeff_k * basis_k`.
pub fn eval(degree: usize, coeffs: &[[f64; 3]], d: [f64; 3]) -> [f64; 3] {
    let b = basis(degree, d);
    let mut out = [0.0; 3];
    for (c, bk) in coeffs.iter().zip(&b) {
        for ch in 0..3 {
            out[ch] += c[ch] * bk;
        }
    }
    out
}

/// Final splat color: `max(0, sh + 0.5)` per channel.
pub fn color(degree: usize, coeffs: &[[f64; 3]], d: [f64; 3]) -> [f64; 3] {
    eval(degree, coeffs, d).map(|v| (v + 0.5).max(0.0))
}
