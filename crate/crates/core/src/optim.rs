//! Derivative-free maximization by Nelder–Mead with dimension-adaptive
//! coefficients and one restart from the incumbent.

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl OptimResult {
    pub fn improved(&self) -> bool {
        self.value > self.initial_value
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    /// Total evaluation budget across both runs.
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below this.
    pub ftol: f64,
    /// Stop when the simplex diameter falls below this.
    pub xtol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead { max_evals: 10_000, ftol: 1e-9, xtol: 1e-9 }
    }
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    /// Negated objective, with non-finite values mapped to +∞.
    fn cost(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            -v
        }
    }
}

impl NelderMead {
    /// Maximize `f` from `x0` with initial per-coordinate steps `steps`.
    /// The returned value is never below `f(x0)`.
    pub fn maximize<F: FnMut(&[f64]) -> f64>(&self, f: F, x0: &[f64], steps: &[f64]) -> OptimResult {
        assert_eq!(x0.len(), steps.len());
        let mut obj = Counted { f, evals: 0 };
        let f0 = obj.cost(x0);
        if x0.is_empty() {
            return OptimResult { x: vec![], value: -f0, initial_value: -f0, evaluations: 1, converged: true };
        }
        let budget = self.max_evals.max(2 * (x0.len() + 1));
        let (x1, c1, conv1) = self.run(&mut obj, x0, f0, steps, budget / 2);
        let shrunk: Vec<f64> = steps.iter().map(|s| 0.5 * s).collect();
        let remaining = budget.saturating_sub(obj.evals);
        let (x2, c2, conv2) = if remaining > x0.len() + 1 {
            self.run(&mut obj, &x1, c1, &shrunk, remaining)
        } else {
            (x1.clone(), c1, conv1)
        };
        let (x, cost, converged) = if c2 <= c1 { (x2, c2, conv2) } else { (x1, c1, conv1) };
        let (x, cost) = if cost <= f0 { (x, cost) } else { (x0.to_vec(), f0) };
        OptimResult { x, value: -cost, initial_value: -f0, evaluations: obj.evals, converged }
    }

    fn run<F: FnMut(&[f64]) -> f64>(
        &self,
        obj: &mut Counted<F>,
        x0: &[f64],
        f0: f64,
        steps: &[f64],
        budget: usize,
    ) -> (Vec<f64>, f64, bool) {
        let d = x0.len();
        let df = d as f64;
        let (alpha, beta, gamma, delta) = if d >= 2 {
            (1.0, 1.0 + 2.0 / df, 0.75 - 0.5 / df, 1.0 - 1.0 / df)
        } else {
            (1.0, 2.0, 0.5, 0.5)
        };
        let start = obj.evals;
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
        let mut values: Vec<f64> = Vec::with_capacity(d + 1);
        simplex.push(x0.to_vec());
        values.push(f0);
        for j in 0..d {
            let mut v = x0.to_vec();
            v[j] += if steps[j] != 0.0 { steps[j] } else { 1e-3 };
            values.push(obj.cost(&v));
            simplex.push(v);
        }
        let mut order: Vec<usize> = (0..=d).collect();
        let mut centroid = vec![0.0; d];
        let mut trial = vec![0.0; d];
        let mut trial2 = vec![0.0; d];
        let mut converged = false;
        while obj.evals - start < budget {
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let best = order[0];
            let worst = order[d];
            let second = order[d - 1];
            let spread = values[worst] - values[best];
            let diameter = simplex
                .iter()
                .map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if spread.is_finite() && spread <= self.ftol * (1.0 + values[best].abs()) || diameter <= self.xtol {
                converged = true;
                break;
            }
            centroid.iter_mut().for_each(|c| *c = 0.0);
            for &i in &order[..d] {
                for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                    *c += v / df;
                }
            }
            for j in 0..d {
                trial[j] = centroid[j] + alpha * (centroid[j] - simplex[worst][j]);
            }
            let fr = obj.cost(&trial);
            if fr < values[best] {
                for j in 0..d {
                    trial2[j] = centroid[j] + beta * (trial[j] - centroid[j]);
                }
                let fe = obj.cost(&trial2);
                if fe < fr {
                    simplex[worst].copy_from_slice(&trial2);
                    values[worst] = fe;
                } else {
                    simplex[worst].copy_from_slice(&trial);
                    values[worst] = fr;
                }
                continue;
            }
            if fr < values[second] {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = fr;
                continue;
            }
            let outside = fr < values[worst];
            for j in 0..d {
                trial2[j] = if outside {
                    centroid[j] + gamma * (trial[j] - centroid[j])
                } else {
                    centroid[j] - gamma * (centroid[j] - simplex[worst][j])
                };
            }
            let fc = obj.cost(&trial2);
            if (outside && fc <= fr) || (!outside && fc < values[worst]) {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = fc;
                continue;
            }
            let anchor = simplex[best].clone();
            for &i in &order[1..] {
                for (v, a) in simplex[i].iter_mut().zip(&anchor) {
                    *v = a + delta * (*v - a);
                }
                values[i] = obj.cost(&simplex[i]);
            }
        }
        let best = (0..=d).min_by(|&a, &b| values[a].total_cmp(&values[b])).expect("simplex is nonempty");
        (simplex[best].clone(), values[best], converged)
    }
}
