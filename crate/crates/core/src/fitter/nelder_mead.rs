//! Nelder–Mead simplex search with lower bounds enforced by projection and
//! dimension-adaptive coefficients (Gao & Han).

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of simplex values is below this fraction of |f|.
    pub ftol_rel: f64,
    /// ... and every vertex lies within this distance (max-norm) of the best.
    pub xtol_abs: f64,
    pub init_step: f64,
    /// Fresh simplices built around the optimum after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 2000,
            ftol_rel: 1e-8,
            xtol_abs: 1e-7,
            init_step: 0.25,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Counter<F> {
    f: F,
    evals: usize,
    max: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counter<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        if self.evals >= self.max {
            return f64::INFINITY;
        }
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, lo) in x.iter_mut().zip(lower) {
        if *v < *lo {
            *v = *lo;
        }
    }
}

/// Minimizes `f` subject to `x >= lower` componentwise.
pub fn minimize<F>(f: F, x0: &[f64], lower: &[f64], opts: &NelderMeadOptions) -> NelderMeadOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), lower.len());
    let mut counter = Counter {
        f,
        evals: 0,
        max: opts.max_evals.max(1),
    };
    let mut x = x0.to_vec();
    project(&mut x, lower);
    if x.is_empty() {
        let fx = counter.call(&x);
        return NelderMeadOutcome {
            x,
            f: fx,
            evals: counter.evals,
            converged: true,
        };
    }

    let mut step = opts.init_step;
    let mut best = run(&mut counter, &x, lower, step, opts);
    for _ in 0..opts.restarts {
        if !best.converged || counter.evals >= opts.max_evals {
            break;
        }
        step = (step * 0.1).max(100.0 * opts.xtol_abs);
        let again = run(&mut counter, &best.x.clone(), lower, step, opts);
        let improved = best.f - again.f > opts.ftol_rel * best.f.abs().max(1.0);
        if again.f <= best.f {
            best = again;
        } else {
            best.converged = again.converged && best.converged;
        }
        if !improved {
            break;
        }
    }
    NelderMeadOutcome {
        x: best.x,
        f: best.f,
        evals: counter.evals,
        converged: best.converged,
    }
}

struct RunResult {
    x: Vec<f64>,
    f: f64,
    converged: bool,
}

fn run<F: FnMut(&[f64]) -> f64>(
    counter: &mut Counter<F>,
    x0: &[f64],
    lower: &[f64],
    step: f64,
    opts: &NelderMeadOptions,
) -> RunResult {
    let n = x0.len();
    let nf = n as f64;
    let (rho, chi, gamma, sigma) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|v| counter.call(v)).collect();

    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    loop {
        // Order vertices by value; ties keep the earlier vertex first.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fvals[a].partial_cmp(&fvals[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fvals = idx.iter().map(|&i| fvals[i]).collect();

        let fbest = fvals[0];
        let fworst = fvals[n];
        let spread_ok = fbest.is_finite() && (fworst - fbest) <= opts.ftol_rel * fbest.abs().max(1e-300);
        let diam = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread_ok && diam <= opts.xtol_abs {
            return RunResult {
                x: simplex[0].clone(),
                f: fbest,
                converged: true,
            };
        }
        if counter.evals >= opts.max_evals {
            return RunResult {
                x: simplex[0].clone(),
                f: fbest,
                converged: false,
            };
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / nf;
            }
        }

        for i in 0..n {
            trial[i] = centroid[i] + rho * (centroid[i] - simplex[n][i]);
        }
        project(&mut trial, lower);
        let fr = counter.call(&trial);

        if fr < fvals[0] {
            for i in 0..n {
                trial2[i] = centroid[i] + chi * (trial[i] - centroid[i]);
            }
            project(&mut trial2, lower);
            let fe = counter.call(&trial2);
            if fe < fr {
                simplex[n].copy_from_slice(&trial2);
                fvals[n] = fe;
            } else {
                simplex[n].copy_from_slice(&trial);
                fvals[n] = fr;
            }
            continue;
        }
        if fr < fvals[n - 1] {
            simplex[n].copy_from_slice(&trial);
            fvals[n] = fr;
            continue;
        }

        let (fc, accept) = if fr < fvals[n] {
            for i in 0..n {
                trial2[i] = centroid[i] + gamma * (trial[i] - centroid[i]);
            }
            project(&mut trial2, lower);
            let fc = counter.call(&trial2);
            (fc, fc <= fr)
        } else {
            for i in 0..n {
                trial2[i] = centroid[i] - gamma * (centroid[i] - simplex[n][i]);
            }
            project(&mut trial2, lower);
            let fc = counter.call(&trial2);
            (fc, fc < fvals[n])
        };
        if accept {
            simplex[n].copy_from_slice(&trial2);
            fvals[n] = fc;
            continue;
        }

        // Shrink towards the best vertex.
        let best = simplex[0].clone();
        for j in 1..=n {
            for i in 0..n {
                simplex[j][i] = best[i] + sigma * (simplex[j][i] - best[i]);
            }
            project(&mut simplex[j], lower);
            fvals[j] = counter.call(&simplex[j]);
        }
    }
}
