//! Derivative-free simplex minimization.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Simplex settings. `step` scales the initial simplex around the start
/// point; per-coordinate steps are passed to [`nelder_mead_with_steps`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub step: f64,
    pub ftol: f64,
    pub xtol: f64,
    /// Iteration cap per simplex run; `None` means `2000 · d`.
    pub max_iter: Option<usize>,
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            step: 0.1,
            ftol: 1e-10,
            xtol: 1e-10,
            max_iter: None,
            restarts: 2,
        }
    }
}

impl NelderMeadOptions {
    pub fn iteration_cap(&self, d: usize) -> usize {
        self.max_iter.unwrap_or(2000 * d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    FunctionSpread,
    SimplexSize,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub f: T,
    pub meta: OptimizerMeta,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `f` from `x0` with a uniform initial step.
pub fn nelder_mead<T: Real, F: FnMut(&[T]) -> T>(f: F, x0: &[T], opts: &NelderMeadOptions) -> Minimum<T> {
    let steps = vec![T::lit(opts.step); x0.len()];
    nelder_mead_with_steps(f, x0, &steps, opts)
}

/// Minimizes `f` from `x0`; vertex `i` of the initial simplex is
/// `x0 + steps[i] · eᵢ`. Non-finite values count as `+∞`. After a run stops on
/// tolerance, up to `opts.restarts` fresh simplices are built around the
/// incumbent, stopping early once a restart fails to improve by `ftol`.
pub fn nelder_mead_with_steps<T: Real, F: FnMut(&[T]) -> T>(
    f: F,
    x0: &[T],
    steps: &[T],
    opts: &NelderMeadOptions,
) -> Minimum<T> {
    assert_eq!(x0.len(), steps.len(), "one step per coordinate");
    let offsets: Vec<Vec<T>> = (0..x0.len())
        .map(|i| {
            let mut e = vec![T::zero(); x0.len()];
            e[i] = steps[i];
            e
        })
        .collect();
    nelder_mead_with_offsets(f, x0, &offsets, opts)
}

/// As [`nelder_mead_with_steps`] with arbitrary edge vectors: vertex `i + 1`
/// of every (re)started simplex is the incumbent plus `offsets[i]`. The
/// offsets must span the space.
pub fn nelder_mead_with_offsets<T: Real, F: FnMut(&[T]) -> T>(
    mut f: F,
    x0: &[T],
    offsets: &[Vec<T>],
    opts: &NelderMeadOptions,
) -> Minimum<T> {
    assert_eq!(x0.len(), offsets.len(), "one edge per coordinate");
    assert!(offsets.iter().all(|o| o.len() == x0.len()), "edges must match the dimension");
    let d = x0.len();
    let cap = opts.iteration_cap(d);
    let mut evaluations = 0;
    let mut eval = |x: &[T]| {
        evaluations += 1;
        let v = f(x);
        if v.is_finite_val() {
            v
        } else {
            T::lit(f64::INFINITY)
        }
    };

    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0);
    let mut iterations = 0;
    let mut restarts = 0;
    let mut stop = StopReason::MaxIterations;
    if cap == 0 || d == 0 {
        return Minimum {
            x: best_x,
            f: best_f,
            meta: OptimizerMeta {
                iterations: 0,
                evaluations,
                restarts: 0,
                converged: d == 0,
                stop,
            },
        };
    }

    loop {
        let run = simplex_run(&mut eval, &best_x, best_f, offsets, cap, opts);
        iterations += run.iterations;
        stop = run.stop;
        let improved = best_f - run.f;
        if run.f <= best_f {
            best_x = run.x;
            best_f = run.f;
        }
        if stop == StopReason::MaxIterations || restarts == opts.restarts {
            break;
        }
        if restarts > 0 && !(improved > T::lit(opts.ftol)) {
            break;
        }
        restarts += 1;
    }
    Minimum {
        x: best_x,
        f: best_f,
        meta: OptimizerMeta {
            iterations,
            evaluations,
            restarts,
            converged: stop != StopReason::MaxIterations,
            stop,
        },
    }
}

fn column_sums<T: Real>(pts: &[Vec<T>]) -> Vec<T> {
    let mut sum = vec![T::zero(); pts[0].len()];
    for p in pts {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += *v;
        }
    }
    sum
}

struct RunOutcome<T> {
    x: Vec<T>,
    f: T,
    iterations: usize,
    stop: StopReason,
}

fn simplex_run<T: Real, E: FnMut(&[T]) -> T>(
    eval: &mut E,
    x0: &[T],
    f0: T,
    offsets: &[Vec<T>],
    cap: usize,
    opts: &NelderMeadOptions,
) -> RunOutcome<T> {
    let d = x0.len();
    let mut pts: Vec<Vec<T>> = Vec::with_capacity(d + 1);
    let mut vals: Vec<T> = Vec::with_capacity(d + 1);
    pts.push(x0.to_vec());
    vals.push(f0);
    for o in offsets {
        let v: Vec<T> = x0.iter().zip(o).map(|(&a, &b)| a + b).collect();
        vals.push(eval(&v));
        pts.push(v);
    }
    let ftol = T::lit(opts.ftol);
    let xtol = T::lit(opts.xtol);
    let (rho, chi, gamma, sigma) = (T::lit(REFLECT), T::lit(EXPAND), T::lit(CONTRACT), T::lit(SHRINK));

    let mut order: Vec<usize> = (0..=d).collect();
    let mut iterations = 0;
    // running vertex sum; the centroid of the kept face is (sum − worst) / d
    let mut sum = column_sums(&pts);
    let mut centroid = vec![T::zero(); d];
    let mut trial = vec![T::zero(); d];
    let mut xr = vec![T::zero(); d];
    let inv = T::one() / T::from_usize_lossy(d);
    let stop = loop {
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[d];
        let second = order[d - 1];
        if vals[worst] - vals[best] <= ftol {
            break StopReason::FunctionSpread;
        }
        let spread_out = order[1..]
            .iter()
            .any(|&i| pts[i].iter().zip(&pts[best]).any(|(a, b)| (*a - *b).abs() > xtol));
        if !spread_out {
            break StopReason::SimplexSize;
        }
        if iterations >= cap {
            break StopReason::MaxIterations;
        }
        iterations += 1;

        for j in 0..d {
            centroid[j] = (sum[j] - pts[worst][j]) * inv;
        }
        let along = |t: T, out: &mut [T], from: &[T]| {
            for j in 0..d {
                out[j] = centroid[j] + t * (from[j] - centroid[j]);
            }
        };
        along(-rho, &mut xr, &pts[worst]);
        let fr = eval(&xr);
        let accepted = if fr < vals[best] {
            along(chi, &mut trial, &xr);
            let fe = eval(&trial);
            if fe < fr {
                Some((true, fe))
            } else {
                Some((false, fr))
            }
        } else if fr < vals[second] {
            Some((false, fr))
        } else if fr < vals[worst] {
            along(gamma, &mut trial, &xr);
            let fc = eval(&trial);
            (fc <= fr).then_some((true, fc))
        } else {
            along(gamma, &mut trial, &pts[worst]);
            let fc = eval(&trial);
            (fc < vals[worst]).then_some((true, fc))
        };
        match accepted {
            Some((from_trial, fv)) => {
                let new = if from_trial { &trial } else { &xr };
                for j in 0..d {
                    sum[j] += new[j] - pts[worst][j];
                }
                pts[worst].copy_from_slice(new);
                vals[worst] = fv;
            }
            None => {
                let anchor = pts[best].clone();
                for &i in &order[1..] {
                    for j in 0..d {
                        pts[i][j] = anchor[j] + sigma * (pts[i][j] - anchor[j]);
                    }
                    vals[i] = eval(&pts[i]);
                }
                sum = column_sums(&pts);
            }
        }
    };
    let best = (0..=d)
        .min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal))
        .expect("non-empty simplex");
    RunOutcome {
        x: pts[best].clone(),
        f: vals[best],
        iterations,
        stop,
    }
}
