//! Limited-memory BFGS with two-loop recursion and Armijo backtracking.
//!
//! The driver is organized around *outer steps*: one outer step runs at most
//! `max_inner` quasi-Newton iterations, matching the optimizer regime used
//! for the latent counterfactual search (learning rate 1, 100 outer steps,
//! at most 20 inner iterations each). Curvature history is kept across outer
//! steps.

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    pub lr: f64,
    pub max_inner: usize,
    pub history: usize,
    /// Stop early once the gradient max-norm falls below this.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            lr: 1.0,
            max_inner: 20,
            history: 10,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuterReport {
    pub f: f64,
    pub evals: usize,
    pub inner_steps: usize,
    /// No descent step could be taken (line search exhausted or flat).
    pub stalled: bool,
}

pub struct Lbfgs {
    cfg: LbfgsConfig,
    pub x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    s_hist: Vec<Vec<f64>>,
    y_hist: Vec<Vec<f64>>,
    rho: Vec<f64>,
    first_step: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    /// `f0`/`g0` are the objective and gradient at `x0`.
    pub fn new(x0: Vec<f64>, f0: f64, g0: Vec<f64>, cfg: LbfgsConfig) -> Self {
        Lbfgs {
            cfg,
            x: x0,
            f: f0,
            g: g0,
            s_hist: Vec::new(),
            y_hist: Vec::new(),
            rho: Vec::new(),
            first_step: true,
        }
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    fn direction(&self) -> Vec<f64> {
        let mut q: Vec<f64> = self.g.iter().map(|v| -v).collect();
        let m = self.s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = self.rho[i] * dot(&self.s_hist[i], &q);
            for (qv, yv) in q.iter_mut().zip(&self.y_hist[i]) {
                *qv -= alpha[i] * yv;
            }
        }
        if m > 0 {
            let last = m - 1;
            let ys = dot(&self.y_hist[last], &self.s_hist[last]);
            let yy = dot(&self.y_hist[last], &self.y_hist[last]);
            if yy > 0.0 {
                let gamma = ys / yy;
                for qv in q.iter_mut() {
                    *qv *= gamma;
                }
            }
        }
        for i in 0..m {
            let beta = self.rho[i] * dot(&self.y_hist[i], &q);
            for (qv, sv) in q.iter_mut().zip(&self.s_hist[i]) {
                *qv += (alpha[i] - beta) * sv;
            }
        }
        q
    }

    /// One outer step. `eval` returns (objective, gradient).
    pub fn outer_step<F>(&mut self, mut eval: F) -> OuterReport
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let mut evals = 0;
        let mut inner = 0;
        let mut stalled = false;
        for _ in 0..self.cfg.max_inner {
            let gmax = self.g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax <= self.cfg.grad_tol {
                break;
            }
            let mut d = self.direction();
            let mut gd = dot(&self.g, &d);
            if gd >= 0.0 {
                // Not a descent direction; reset curvature and fall back to
                // steepest descent.
                self.s_hist.clear();
                self.y_hist.clear();
                self.rho.clear();
                d = self.g.iter().map(|v| -v).collect();
                gd = dot(&self.g, &d);
            }
            let mut t = if self.first_step {
                let g1: f64 = self.g.iter().map(|v| v.abs()).sum();
                (1.0f64).min(1.0 / g1.max(1e-12)) * self.cfg.lr
            } else {
                self.cfg.lr
            };
            self.first_step = false;
            const C1: f64 = 1e-4;
            let mut accepted = false;
            let mut xt = vec![0.0; self.x.len()];
            let mut ft = 0.0;
            let mut gt = Vec::new();
            for _bt in 0..10 {
                for ((xo, xv), dv) in xt.iter_mut().zip(&self.x).zip(&d) {
                    *xo = xv + t * dv;
                }
                let (fv, gv) = eval(&xt);
                evals += 1;
                if fv.is_finite() && fv <= self.f + C1 * t * gd {
                    accepted = true;
                    ft = fv;
                    gt = gv;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                stalled = true;
                break;
            }
            let s: Vec<f64> = xt.iter().zip(&self.x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gt.iter().zip(&self.g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-10 {
                self.s_hist.push(s);
                self.y_hist.push(y);
                self.rho.push(1.0 / sy);
                if self.s_hist.len() > self.cfg.history {
                    self.s_hist.remove(0);
                    self.y_hist.remove(0);
                    self.rho.remove(0);
                }
            }
            self.x = xt;
            self.f = ft;
            self.g = gt;
            inner += 1;
        }
        OuterReport {
            f: self.f,
            evals,
            inner_steps: inner,
            stalled,
        }
    }
}

/// Convenience driver: run `outer_steps` outer steps, returning the best
/// objective seen.
pub fn minimize<F>(
    x0: Vec<f64>,
    cfg: LbfgsConfig,
    outer_steps: usize,
    mut eval: F,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, g0) = eval(&x0);
    let mut opt = Lbfgs::new(x0, f0, g0, cfg);
    for _ in 0..outer_steps {
        let rep = opt.outer_step(&mut eval);
        if rep.stalled {
            break;
        }
    }
    let f = opt.f();
    (opt.x, f)
}
