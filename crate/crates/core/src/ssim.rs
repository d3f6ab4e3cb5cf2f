//! Structural similarity with an 11×11 Gaussian window (σ = 1.5), zero
//! padded, averaged over pixels and channels; plus its gradient with respect
//! to the first image.

use nalgebra::Vector3;

use crate::image::ImageRgb;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same" correlation with zero padding. The kernel is symmetric,
/// so this is also its own adjoint.
fn blur(img: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM of one channel and, optionally, d(mean SSIM)/dx.
fn channel_ssim(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = kernel();
    let n = (w * h) as f64;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur(x, w, h, &k);
    let mu_y = blur(y, w, h, &k);
    let e_xx = blur(&xx, w, h, &k);
    let e_yy = blur(&yy, w, h, &k);
    let e_xy = blur(&xy, w, h, &k);

    let mut total = 0.0;
    let (mut d_mu, mut d_var, mut d_cov) = if want_grad {
        (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..w * h {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let var_x = e_xx[p] - mx * mx;
        let var_y = e_yy[p] - my * my;
        let cov = e_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = var_x + var_y + C2;
        // Written as ratios so the gradient is exactly zero when x == y.
        let r1 = a1 / b1;
        let r2 = a2 / b2;
        let s = r1 * r2;
        total += s;
        if want_grad {
            let ds_dmx = 2.0 * r2 * (my - mx * r1) / b1;
            let ds_dvar = -s / b2;
            let ds_dcov = 2.0 * r1 / b2;
            // var_x = E[x²] - μx², cov = E[xy] - μx μy
            d_mu[p] = (ds_dmx + 2.0 * (mx * s - my * r1) / b2) / n;
            d_var[p] = ds_dvar / n;
            d_cov[p] = ds_dcov / n;
        }
    }
    let grad = if want_grad {
        let g_mu = blur(&d_mu, w, h, &k);
        let g_var = blur(&d_var, w, h, &k);
        let g_cov = blur(&d_cov, w, h, &k);
        Some(
            (0..w * h)
                .map(|q| g_mu[q] + 2.0 * x[q] * g_var[q] + y[q] * g_cov[q])
                .collect(),
        )
    } else {
        None
    };
    (total / n, grad)
}

/// Mean SSIM over pixels and the three channels.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert!(a.same_shape(b), "ssim: shape mismatch");
    (0..3)
        .map(|c| channel_ssim(&a.channel(c), &b.channel(c), a.width, a.height, false).0)
        .sum::<f64>()
        / 3.0
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> (f64, Vec<Vector3<f64>>) {
    assert!(a.same_shape(b), "ssim: shape mismatch");
    let mut grad = vec![Vector3::zeros(); a.width * a.height];
    let mut total = 0.0;
    for c in 0..3 {
        let (v, g) = channel_ssim(&a.channel(c), &b.channel(c), a.width, a.height, true);
        total += v / 3.0;
        for (dst, g) in grad.iter_mut().zip(g.unwrap()) {
            dst[c] = g / 3.0;
        }
    }
    (total, grad)
}
