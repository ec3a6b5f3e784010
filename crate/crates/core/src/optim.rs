//! Limited-memory quasi-Newton descent with optional projection.
//!
//! Used by the rate-function optimizer (smooth penalty objectives) and the
//! limit-set distance (nonsmooth max objectives, where L-BFGS directions
//! built from argmax subgradients are followed by a subgradient polish).
//! Everything here is deterministic for fixed inputs.

pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    pub min_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            memory: 8,
            grad_tol: 1e-10,
            min_step: 1e-14,
        }
    }
}

pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Minimize `f` (value + gradient into `grad`) starting at `x0`.
/// `project`, when given, is applied after every accepted step; the
/// curvature memory is dropped whenever it moves the point.
pub fn minimize(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    project: Option<&dyn Fn(&mut [f64])>,
    opts: &LbfgsOptions,
) -> MinimizeResult {
    let n = x0.len();
    let mut x = x0;
    if let Some(p) = project {
        p(&mut x);
    }
    let mut grad = vec![0.0; n];
    let mut value = f(&x, &mut grad);

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();

    for _ in 0..opts.max_iters {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= opts.grad_tol {
            break;
        }

        // two-loop recursion
        let mut dir = grad.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let a = rho[i] * dot(&s_hist[i], &dir);
            alpha[i] = a;
            axpy(-a, &y_hist[i], &mut dir);
        }
        if m > 0 {
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for v in dir.iter_mut() {
                *v *= gamma;
            }
        }
        for i in 0..m {
            let beta = rho[i] * dot(&y_hist[i], &dir);
            axpy(alpha[i] - beta, &s_hist[i], &mut dir);
        }
        for v in dir.iter_mut() {
            *v = -*v;
        }
        let mut descent = dot(&grad, &dir);
        if descent >= 0.0 {
            // fall back to steepest descent
            for (d, g) in dir.iter_mut().zip(&grad) {
                *d = -g;
            }
            descent = -grad.iter().map(|g| g * g).sum::<f64>();
        }

        // Armijo backtracking; on failure retry once along steepest
        // descent with the memory dropped
        let mut x_new = vec![0.0; n];
        let mut grad_new = vec![0.0; n];
        let mut value_new = value;
        let mut projected = false;
        let mut accepted = false;
        for attempt in 0..2 {
            if attempt == 1 {
                s_hist.clear();
                y_hist.clear();
                rho.clear();
                for (d, g) in dir.iter_mut().zip(&grad) {
                    *d = -g / gnorm.max(1.0);
                }
                descent = dot(&grad, &dir);
            }
            let mut step = 1.0;
            let mut tries = 0;
            for _ in 0..60 {
                tries += 1;
                for i in 0..n {
                    x_new[i] = x[i] + step * dir[i];
                }
                if let Some(p) = project {
                    let before = x_new.clone();
                    p(&mut x_new);
                    projected = x_new
                        .iter()
                        .zip(&before)
                        .any(|(a, b)| (a - b).abs() > 1e-15 * (1.0 + b.abs()));
                }
                value_new = f(&x_new, &mut grad_new);
                if value_new <= value + 1e-4 * step * descent {
                    // forward-track when the unit step already passes;
                    // guards against stale curvature shrinking the
                    // direction to a crawl
                    if tries == 1 && !projected {
                        let mut st = step * 2.0;
                        let mut cx = vec![0.0; n];
                        let mut cg = vec![0.0; n];
                        for _ in 0..24 {
                            for i in 0..n {
                                cx[i] = x[i] + st * dir[i];
                            }
                            let mut proj_here = false;
                            if let Some(p) = project {
                                let before = cx.clone();
                                p(&mut cx);
                                proj_here = cx
                                    .iter()
                                    .zip(&before)
                                    .any(|(a, b)| (a - b).abs() > 1e-15 * (1.0 + b.abs()));
                            }
                            let cv = f(&cx, &mut cg);
                            if cv <= value + 1e-4 * st * descent && cv < value_new {
                                x_new.copy_from_slice(&cx);
                                grad_new.copy_from_slice(&cg);
                                value_new = cv;
                                projected = proj_here;
                                st *= 2.0;
                            } else {
                                break;
                            }
                        }
                    }
                    accepted = true;
                    break;
                }
                step *= 0.5;
                if step < opts.min_step {
                    break;
                }
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break;
        }

        if projected {
            s_hist.clear();
            y_hist.clear();
            rho.clear();
        } else {
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) {
                s_hist.push(s);
                y_hist.push(y);
                rho.push(1.0 / sy);
                if s_hist.len() > opts.memory {
                    s_hist.remove(0);
                    y_hist.remove(0);
                    rho.remove(0);
                }
            }
        }

        let move_size: f64 = x_new
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = x_new.clone();
        grad = grad_new.clone();
        value = value_new;
        if move_size < opts.min_step {
            break;
        }
    }

    MinimizeResult { x, value }
}

/// Projected subgradient polish with decaying steps, tracking the best
/// point seen. Suitable for nonsmooth max-type objectives.
pub fn subgradient_polish(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    project: &dyn Fn(&mut [f64]),
    iters: usize,
    initial_step: f64,
) -> MinimizeResult {
    let n = x0.len();
    let mut x = x0;
    project(&mut x);
    let mut grad = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_v = f(&x, &mut grad);
    for it in 0..iters {
        let gn = norm(&grad).max(1e-30);
        let step = initial_step / (1.0 + 0.15 * it as f64);
        for i in 0..n {
            x[i] -= step * grad[i] / gn;
        }
        project(&mut x);
        let v = f(&x, &mut grad);
        if v < best_v {
            best_v = v;
            best_x = x.clone();
        }
    }
    MinimizeResult {
        x: best_x,
        value: best_v,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
