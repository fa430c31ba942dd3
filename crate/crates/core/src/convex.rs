//! General-purpose inner machinery: a deterministic primal log-barrier solver
//! with Newton inner steps for smooth convex programs under affine equalities,
//! a 3x3 PSD verifier and ball-geometry helpers.
//!
//! Problems here are small and dense (dimension a few hundred), so the linear
//! algebra is a plain symmetric Cholesky with a ridge fallback. No sparsity
//! exploitation.

use thiserror::Error;

use crate::model::Point;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("start point violates inequality {index}: g = {value}")]
    InfeasibleStart { index: usize, value: f64 },
    #[error("start point violates equality residual {0}")]
    EqualityViolatedAtStart(f64),
    #[error("Newton line search failed at stage {stage} (step {step})")]
    NewtonDivergence { stage: usize, step: usize },
    #[error("barrier stage limit exhausted before reaching the target gap")]
    MaxIterations,
    #[error("linear algebra failure: {0}")]
    Numerical(&'static str),
    #[error("matrix not symmetric: |a - a^T| = {0}")]
    Asymmetric(f64),
}

/// Dense symmetric matrix, full row-major storage.
#[derive(Debug, Clone)]
pub struct SymMat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn reset(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
        if i != j {
            self.data[j * self.n + i] += v;
        }
    }

    /// Adds `w * g g^T` restricted to the nonzero pattern of `g` given as
    /// (index, value) pairs.
    pub fn add_outer_sparse(&mut self, entries: &[(usize, f64)], w: f64) {
        for (a, &(i, gi)) in entries.iter().enumerate() {
            self.data[i * self.n + i] += w * gi * gi;
            for &(j, gj) in &entries[a + 1..] {
                let v = w * gi * gj;
                self.data[i * self.n + j] += v;
                self.data[j * self.n + i] += v;
            }
        }
    }

    /// In-place Cholesky factorization (lower triangle). Fails on loss of
    /// positive definiteness. Inner products run over row slices so the
    /// compiler can vectorize them.
    fn cholesky(&mut self) -> Result<(), ()> {
        let n = self.n;
        for j in 0..n {
            let row_j = &self.data[j * n..j * n + j];
            let d = self.data[j * n + j] - row_j.iter().map(|l| l * l).sum::<f64>();
            if d <= 0.0 || !d.is_finite() {
                return Err(());
            }
            let dj = d.sqrt();
            self.data[j * n + j] = dj;
            let inv = 1.0 / dj;
            for i in j + 1..n {
                let (upper, lower) = self.data.split_at_mut(i * n);
                let row_j = &upper[j * n..j * n + j];
                let row_i = &mut lower[..n];
                let dot: f64 = row_i[..j].iter().zip(row_j).map(|(a, b)| a * b).sum();
                row_i[j] = (row_i[j] - dot) * inv;
            }
        }
        Ok(())
    }

    /// Solves L L^T x = b given a factored matrix.
    fn solve_factored(&self, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        x.copy_from_slice(b);
        for i in 0..n {
            let row = &self.data[i * n..i * n + i];
            let dot: f64 = row.iter().zip(x.iter()).map(|(a, v)| a * v).sum();
            x[i] = (x[i] - dot) / self.data[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.data[k * n + i] * x[k];
            }
            x[i] = s / self.data[i * n + i];
        }
    }
}

/// A smooth convex program: objective and inequality callbacks with explicit
/// derivatives, plus affine equalities `A x = b`. Callbacks must be
/// deterministic pure functions with symmetric Hessians.
pub trait SmoothProgram {
    fn dim(&self) -> usize;

    /// Objective value; fills the gradient when requested.
    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64;

    /// Adds the objective Hessian into `h`.
    fn objective_hessian_add(&self, x: &[f64], h: &mut SymMat);

    fn num_inequalities(&self) -> usize;

    /// Value of inequality `j` in `g_j(x) <= 0` form.
    fn inequality(&self, j: usize, x: &[f64]) -> f64;

    /// Dense gradient of inequality `j` (overwrites `grad`).
    fn inequality_grad(&self, j: usize, x: &[f64], grad: &mut [f64]);

    /// Adds `w * hessian(g_j)` into `h`.
    fn inequality_hess_add(&self, j: usize, x: &[f64], w: f64, h: &mut SymMat);

    /// Equality rows and right-hand sides; empty slices when unconstrained.
    fn equalities(&self) -> (&[Vec<f64>], &[f64]);

    /// Adds `sum_j w_outer[j] * dg_j dg_j^T + w_curv[j] * hessian(g_j)` into
    /// `h`. The default is generic; structured programs override it.
    fn barrier_hessian_add(&self, x: &[f64], w_outer: &[f64], w_curv: &[f64], h: &mut SymMat) {
        let mut g = vec![0.0; self.dim()];
        let mut pattern: Vec<(usize, f64)> = Vec::with_capacity(self.dim());
        for j in 0..self.num_inequalities() {
            self.inequality_grad(j, x, &mut g);
            pattern.clear();
            for (i, &v) in g.iter().enumerate() {
                if v != 0.0 {
                    pattern.push((i, v));
                }
            }
            h.add_outer_sparse(&pattern, w_outer[j]);
            self.inequality_hess_add(j, x, w_curv[j], h);
        }
    }
}

/// Log-barrier solver settings.
#[derive(Debug, Clone)]
pub struct BarrierSettings {
    /// Initial barrier weight.
    pub mu0: f64,
    /// Barrier decrease factor per stage, in (0, 1).
    pub kappa: f64,
    /// Newton decrement tolerance per stage.
    pub newton_tol: f64,
    /// Maximum Newton steps per stage.
    pub max_newton: usize,
    /// Feasibility tolerance for the start point's equality residual.
    pub feas_tol: f64,
    /// Target complementarity gap, relative to `gap_scale + |f|`.
    pub gap_tol: f64,
    /// Natural magnitude of the objective. Matters when the optimum sits
    /// near zero (parametric Dinkelbach objectives do by construction).
    pub gap_scale: f64,
    /// Maximum number of barrier stages.
    pub max_stages: usize,
    /// Early exit once the objective drops below this value (phase-I style
    /// feasibility searches stop as soon as a margin is certified).
    pub stop_below: Option<f64>,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            kappa: 0.2,
            newton_tol: 1e-8,
            max_newton: 40,
            feas_tol: 1e-8,
            gap_tol: 1e-9,
            gap_scale: 1.0,
            max_stages: 48,
            stop_below: None,
        }
    }
}

/// Result of a barrier solve with the final KKT residuals.
#[derive(Debug, Clone)]
pub struct Solved {
    pub x: Vec<f64>,
    pub objective: f64,
    pub newton_steps: usize,
    pub stages: usize,
    /// mu * m at exit.
    pub gap: f64,
    /// max_j g_j(x) at exit (negative when strictly feasible).
    pub max_inequality: f64,
    /// Norm of the stationarity residual grad f + sum lambda grad g + A^T nu.
    pub stationarity: f64,
    /// Objective value recorded at the end of each barrier stage.
    pub stage_objectives: Vec<f64>,
}

struct Workspace {
    grad_f: Vec<f64>,
    grad_phi: Vec<f64>,
    gvals: Vec<f64>,
    w_outer: Vec<f64>,
    w_curv: Vec<f64>,
    h: SymMat,
    dx: Vec<f64>,
    scratch: Vec<f64>,
}

fn barrier_value(prog: &dyn SmoothProgram, x: &[f64], mu: f64, gvals: &mut [f64]) -> Option<f64> {
    let f = prog.objective(x, None);
    let mut phi = f;
    for j in 0..prog.num_inequalities() {
        let g = prog.inequality(j, x);
        gvals[j] = g;
        if g >= 0.0 {
            return None;
        }
        phi -= mu * (-g).ln();
    }
    Some(phi)
}

/// Minimizes the program from a strictly feasible start by the primal
/// log-barrier method with Newton inner iterations and backtracking line
/// search. Returns the KKT-accurate solution or a distinct failure.
pub fn barrier_solve(
    prog: &dyn SmoothProgram,
    x0: &[f64],
    settings: &BarrierSettings,
) -> Result<Solved, SolveError> {
    assert!(settings.mu0 > 0.0 && settings.kappa > 0.0 && settings.kappa < 1.0);
    let dim = prog.dim();
    let m = prog.num_inequalities();
    assert_eq!(x0.len(), dim);

    for j in 0..m {
        let g = prog.inequality(j, x0);
        if g >= 0.0 || !g.is_finite() {
            return Err(SolveError::InfeasibleStart { index: j, value: g });
        }
    }
    let (a_rows, b) = prog.equalities();
    for (row, &bi) in a_rows.iter().zip(b) {
        let r: f64 = row.iter().zip(x0).map(|(a, x)| a * x).sum::<f64>() - bi;
        if r.abs() > settings.feas_tol * (1.0 + bi.abs()) {
            return Err(SolveError::EqualityViolatedAtStart(r));
        }
    }

    let mut ws = Workspace {
        grad_f: vec![0.0; dim],
        grad_phi: vec![0.0; dim],
        gvals: vec![0.0; m],
        w_outer: vec![0.0; m],
        w_curv: vec![0.0; m],
        h: SymMat::zeros(dim),
        dx: vec![0.0; dim],
        scratch: vec![0.0; dim],
    };
    let mut x = x0.to_vec();
    let mut mu = settings.mu0;
    let mut newton_steps = 0usize;
    let mut stage_objectives = Vec::new();
    let mut ineq_grad = vec![0.0; dim];

    let debug = std::env::var_os("BARRIER_DEBUG").is_some();
    for stage in 0..settings.max_stages {
        let mut stalled = false;
        let mut last_decrement = 0.0;
        let mut last_t = 1.0;
        let mut steps_used = 0;
        for step in 0..settings.max_newton {
            // Gradient of the barrier function.
            let f = prog.objective(&x, Some(&mut ws.grad_f));
            ws.grad_phi.copy_from_slice(&ws.grad_f);
            for j in 0..m {
                let g = prog.inequality(j, &x);
                ws.gvals[j] = g;
                let lam = mu / (-g);
                ws.w_outer[j] = lam / (-g);
                ws.w_curv[j] = lam;
                prog.inequality_grad(j, &x, &mut ineq_grad);
                for (gp, gi) in ws.grad_phi.iter_mut().zip(&ineq_grad) {
                    *gp += lam * gi;
                }
            }
            // Hessian of the barrier function.
            ws.h.reset();
            prog.objective_hessian_add(&x, &mut ws.h);
            prog.barrier_hessian_add(&x, &ws.w_outer, &ws.w_curv, &mut ws.h);

            newton_direction(prog, &mut ws, settings)?;
            let decrement: f64 = -ws.grad_phi.iter().zip(&ws.dx).map(|(g, d)| g * d).sum::<f64>();
            newton_steps += 1;
            steps_used = step + 1;
            last_decrement = decrement;
            if debug && std::env::var_os("BARRIER_DEBUG_STEPS").is_some() {
                let (mut imax, mut vmax) = (0, 0.0f64);
                for (i, d) in ws.dx.iter().enumerate() {
                    if d.abs() > vmax {
                        vmax = d.abs();
                        imax = i;
                    }
                }
                eprintln!(
                    "    step {step}: decrement {decrement:.6e} |dx|max {vmax:.3e} at {imax}"
                );
            }
            if decrement <= 0.0 {
                // Stationary to numerical precision for this stage.
                break;
            }
            if 0.5 * decrement <= settings.newton_tol * (settings.gap_scale + f.abs()) {
                break;
            }

            // Line search: find a strictly feasible fraction of the Newton
            // step first, then backtrack on the Armijo condition with an
            // allowance for floating-point noise in the merit value.
            let phi0 = barrier_value(prog, &x, mu, &mut ws.gvals)
                .ok_or(SolveError::NewtonDivergence { stage, step })?;
            let slope = -decrement;
            let noise = 1e-12 * (1.0 + phi0.abs());
            let mut tstep = 1.0;
            let mut feasible_t = None;
            for _ in 0..60 {
                for i in 0..dim {
                    ws.scratch[i] = x[i] + tstep * ws.dx[i];
                }
                if let Some(phi) = barrier_value(prog, &ws.scratch, mu, &mut ws.gvals) {
                    feasible_t = Some((tstep, phi));
                    break;
                }
                tstep *= 0.5;
            }
            if debug && feasible_t.map_or(true, |(t, _)| t < 1e-6) {
                for i in 0..dim {
                    ws.scratch[i] = x[i] + ws.dx[i];
                }
                for j in 0..m {
                    let g_full = prog.inequality(j, &ws.scratch);
                    if g_full >= 0.0 {
                        eprintln!(
                            "    blocking row {j}: g(x) = {:.3e}, g(x+dx) = {g_full:.3e}",
                            prog.inequality(j, &x)
                        );
                    }
                }
            }
            let mut accepted = false;
            if let Some((t_feas, phi_feas)) = feasible_t {
                tstep = if t_feas < 1.0 { t_feas * 0.9 } else { 1.0 };
                let mut phi_known = None;
                if t_feas >= 1.0 {
                    phi_known = Some(phi_feas);
                }
                for _ in 0..30 {
                    for i in 0..dim {
                        ws.scratch[i] = x[i] + tstep * ws.dx[i];
                    }
                    let value = phi_known
                        .take()
                        .or_else(|| barrier_value(prog, &ws.scratch, mu, &mut ws.gvals));
                    if let Some(v) = value {
                        if v <= phi0 + 0.25 * tstep * slope + noise {
                            x.copy_from_slice(&ws.scratch);
                            accepted = true;
                            break;
                        }
                    }
                    tstep *= 0.5;
                }
            }
            last_t = tstep;
            if !accepted || tstep < 1e-10 {
                // Boundary-locked at numerical precision for this barrier
                // weight; move on to the next stage.
                stalled = true;
                break;
            }
        }

        let f = prog.objective(&x, None);
        stage_objectives.push(f);
        if let Some(limit) = settings.stop_below {
            if f < limit {
                return Ok(finish(prog, x, mu, newton_steps, stage + 1, stage_objectives));
            }
        }
        let gap = mu * m as f64;
        if debug {
            eprintln!(
                "  stage {stage}: mu {mu:.2e} steps {steps_used} stalled {stalled} last_decrement {last_decrement:.3e} last_t {last_t:.2e} f {f:.8e}"
            );
        }
        if gap <= settings.gap_tol * (settings.gap_scale + f.abs()) || m == 0 {
            return Ok(finish(prog, x, mu, newton_steps, stage + 1, stage_objectives));
        }
        mu *= settings.kappa;
    }
    Err(SolveError::MaxIterations)
}

/// Computes the equality-constrained Newton direction into `ws.dx`. The
/// system is Jacobi-prescaled: the decision variables mix m^2 slacks with
/// m/s velocities, so raw diagonals can span many orders of magnitude.
fn newton_direction(
    prog: &dyn SmoothProgram,
    ws: &mut Workspace,
    _settings: &BarrierSettings,
) -> Result<(), SolveError> {
    let dim = prog.dim();
    let (a_rows, _) = prog.equalities();
    let scale: Vec<f64> = (0..dim)
        .map(|i| {
            let d = ws.h.data[i * dim + i].abs();
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = SymMat::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            scaled.data[i * dim + j] = ws.h.data[i * dim + j] * scale[i] * scale[j];
        }
    }
    let grad_s: Vec<f64> = (0..dim).map(|i| ws.grad_phi[i] * scale[i]).collect();
    let a_s: Vec<Vec<f64>> = a_rows
        .iter()
        .map(|row| row.iter().zip(&scale).map(|(a, s)| a * s).collect())
        .collect();

    // Factor with a ridge fallback.
    let mut ridge = 0.0;
    let mut factored = scaled.clone();
    for attempt in 0..8 {
        if attempt > 0 {
            ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
            factored.data.copy_from_slice(&scaled.data);
            for i in 0..dim {
                factored.data[i * dim + i] += ridge;
            }
        }
        if factored.cholesky().is_ok() {
            if a_s.is_empty() {
                let neg: Vec<f64> = grad_s.iter().map(|v| -v).collect();
                factored.solve_factored(&neg, &mut ws.dx);
                for i in 0..dim {
                    ws.dx[i] *= scale[i];
                }
                return Ok(());
            }
            // dx = -H^-1 (grad + A^T nu), nu = -(A H^-1 A^T)^-1 A H^-1 grad,
            // which keeps A dx = 0 for a feasible start.
            let p = a_s.len();
            let mut hinv_grad = vec![0.0; dim];
            factored.solve_factored(&grad_s, &mut hinv_grad);
            let mut hinv_at: Vec<Vec<f64>> = Vec::with_capacity(p);
            for row in &a_s {
                let mut out = vec![0.0; dim];
                factored.solve_factored(row, &mut out);
                hinv_at.push(out);
            }
            let mut s = SymMat::zeros(p);
            for r in 0..p {
                for c in 0..p {
                    let v: f64 = a_s[r].iter().zip(&hinv_at[c]).map(|(a, y)| a * y).sum();
                    s.data[r * p + c] = v;
                }
            }
            let rhs: Vec<f64> = a_s
                .iter()
                .map(|row| -row.iter().zip(&hinv_grad).map(|(a, y)| a * y).sum::<f64>())
                .collect();
            let mut nu = vec![0.0; p];
            if s.cholesky().is_err() {
                return Err(SolveError::Numerical("equality Schur complement not PD"));
            }
            s.solve_factored(&rhs, &mut nu);
            for i in 0..dim {
                let mut v = -hinv_grad[i];
                for (r, hrow) in hinv_at.iter().enumerate() {
                    v -= nu[r] * hrow[i];
                }
                ws.dx[i] = v * scale[i];
            }
            return Ok(());
        }
    }
    Err(SolveError::Numerical("Hessian factorization failed"))
}

fn finish(
    prog: &dyn SmoothProgram,
    x: Vec<f64>,
    mu: f64,
    newton_steps: usize,
    stages: usize,
    stage_objectives: Vec<f64>,
) -> Solved {
    let dim = prog.dim();
    let m = prog.num_inequalities();
    let mut grad_f = vec![0.0; dim];
    let f = prog.objective(&x, Some(&mut grad_f));
    let mut resid = grad_f.clone();
    let mut gbuf = vec![0.0; dim];
    let mut max_g = f64::NEG_INFINITY;
    for j in 0..m {
        let g = prog.inequality(j, &x);
        max_g = max_g.max(g);
        let lam = mu / (-g);
        prog.inequality_grad(j, &x, &mut gbuf);
        for (r, gi) in resid.iter_mut().zip(&gbuf) {
            *r += lam * gi;
        }
    }
    // Project the stationarity residual onto the nullspace of A: the dual
    // variables of the equalities absorb the row-space component.
    let (a_rows, _) = prog.equalities();
    if !a_rows.is_empty() {
        let mut gram = SymMat::zeros(a_rows.len());
        for r in 0..a_rows.len() {
            for c in 0..a_rows.len() {
                gram.data[r * a_rows.len() + c] = a_rows[r].iter().zip(&a_rows[c]).map(|(x1, y)| x1 * y).sum();
            }
        }
        let rhs: Vec<f64> = a_rows.iter().map(|row| row.iter().zip(&resid).map(|(a, r)| a * r).sum()).collect();
        let mut nu = vec![0.0; a_rows.len()];
        if gram.cholesky().is_ok() {
            gram.solve_factored(&rhs, &mut nu);
            for (r, row) in a_rows.iter().enumerate() {
                for (res, a) in resid.iter_mut().zip(row) {
                    *res -= nu[r] * a;
                }
            }
        }
    }
    let stationarity = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
    Solved {
        x,
        objective: f,
        newton_steps,
        stages,
        gap: mu * m as f64,
        max_inequality: if m == 0 { 0.0 } else { max_g },
        stationarity,
        stage_objectives,
    }
}

/// Callback-backed program for small problems and tests.
pub struct FnProgram {
    pub dim: usize,
    pub value: Box<dyn Fn(&[f64]) -> f64>,
    pub grad: Box<dyn Fn(&[f64], &mut [f64])>,
    pub hess_add: Box<dyn Fn(&[f64], &mut SymMat)>,
    pub constraints: Vec<FnConstraint>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
}

pub struct FnConstraint {
    pub value: Box<dyn Fn(&[f64]) -> f64>,
    pub grad: Box<dyn Fn(&[f64], &mut [f64])>,
    pub hess_add: Box<dyn Fn(&[f64], f64, &mut SymMat)>,
}

impl FnConstraint {
    /// Affine constraint `a . x + c <= 0`.
    pub fn affine(a: Vec<f64>, c: f64) -> Self {
        let a2 = a.clone();
        Self {
            value: Box::new(move |x| a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() + c),
            grad: Box::new(move |_, g| g.copy_from_slice(&a2)),
            hess_add: Box::new(|_, _, _| {}),
        }
    }
}

impl SmoothProgram for FnProgram {
    fn dim(&self) -> usize {
        self.dim
    }
    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad {
            (self.grad)(x, g);
        }
        (self.value)(x)
    }
    fn objective_hessian_add(&self, x: &[f64], h: &mut SymMat) {
        (self.hess_add)(x, h);
    }
    fn num_inequalities(&self) -> usize {
        self.constraints.len()
    }
    fn inequality(&self, j: usize, x: &[f64]) -> f64 {
        (self.constraints[j].value)(x)
    }
    fn inequality_grad(&self, j: usize, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|v| *v = 0.0);
        (self.constraints[j].grad)(x, grad);
    }
    fn inequality_hess_add(&self, j: usize, x: &[f64], w: f64, h: &mut SymMat) {
        (self.constraints[j].hess_add)(x, w, h);
    }
    fn equalities(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.eq_rows, &self.eq_rhs)
    }
}

/// True iff the symmetric 3x3 matrix is PSD up to `-1e-9 * ||m||_F`.
/// Eigenvalues come from the closed-form characteristic-polynomial roots.
pub fn psd_check(m: &[[f64; 3]; 3]) -> Result<bool, SolveError> {
    let scale = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let asym = (m[0][1] - m[1][0]).abs().max((m[0][2] - m[2][0]).abs()).max((m[1][2] - m[2][1]).abs());
    if asym > 1e-12 * scale.max(1.0) {
        return Err(SolveError::Asymmetric(asym));
    }
    if scale == 0.0 {
        return Ok(true);
    }
    let min_eig = min_eigenvalue_3x3(m);
    Ok(min_eig >= -1e-9 * scale)
}

fn min_eigenvalue_3x3(m: &[[f64; 3]; 3]) -> f64 {
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    if p1 == 0.0 {
        return m[0][0].min(m[1][1]).min(m[2][2]);
    }
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    // Smallest of the three roots.
    q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos()
}

/// Euclidean projection of a point onto the closed ball.
pub fn ball_project(point: Point, center: Point, radius: f64) -> Point {
    debug_assert!(radius >= 0.0);
    let d = [point[0] - center[0], point[1] - center[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dist <= radius {
        point
    } else {
        let s = radius / dist;
        [center[0] + d[0] * s, center[1] + d[1] * s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_program(dim: usize) -> FnProgram {
        FnProgram {
            dim,
            value: Box::new(|x| x.iter().map(|v| v * v).sum()),
            grad: Box::new(|x, g| {
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi = 2.0 * xi;
                }
            }),
            hess_add: Box::new(|_, h| {
                for i in 0..h.n {
                    h.data[i * h.n + i] += 2.0;
                }
            }),
            constraints: vec![],
            eq_rows: vec![],
            eq_rhs: vec![],
        }
    }

    #[test]
    fn projects_onto_hyperplane() {
        let mut prog = quadratic_program(3);
        prog.eq_rows = vec![vec![1.0, 0.0, 0.0]];
        prog.eq_rhs = vec![1.0];
        let out = barrier_solve(&prog, &[1.0, 0.5, -0.5], &BarrierSettings::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-8);
        assert!(out.x[1].abs() < 1e-8 && out.x[2].abs() < 1e-8);
    }

    #[test]
    fn active_bound_reached() {
        // minimize x subject to x >= 2.
        let prog = FnProgram {
            dim: 1,
            value: Box::new(|x| x[0]),
            grad: Box::new(|_, g| g[0] = 1.0),
            hess_add: Box::new(|_, _| {}),
            constraints: vec![FnConstraint::affine(vec![-1.0], 2.0)],
            eq_rows: vec![],
            eq_rhs: vec![],
        };
        let out = barrier_solve(&prog, &[5.0], &BarrierSettings::default()).unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-6, "got {}", out.x[0]);
    }

    #[test]
    fn qp_with_box_matches_grid_search() {
        // Fixed 2-D PSD quadratic with box constraints; grid oracle at 1e-3.
        let q = [[2.0, 0.6], [0.6, 1.0]];
        let c = [-1.3, 0.7];
        let f = move |x: &[f64]| {
            0.5 * (q[0][0] * x[0] * x[0] + 2.0 * q[0][1] * x[0] * x[1] + q[1][1] * x[1] * x[1])
                + c[0] * x[0]
                + c[1] * x[1]
        };
        let prog = FnProgram {
            dim: 2,
            value: Box::new(f),
            grad: Box::new(move |x, g| {
                g[0] = q[0][0] * x[0] + q[0][1] * x[1] + c[0];
                g[1] = q[0][1] * x[0] + q[1][1] * x[1] + c[1];
            }),
            hess_add: Box::new(move |_, h| {
                h.add(0, 0, q[0][0]);
                h.add(1, 1, q[1][1]);
                h.add(0, 1, q[0][1]);
            }),
            constraints: vec![
                FnConstraint::affine(vec![1.0, 0.0], -1.0),
                FnConstraint::affine(vec![-1.0, 0.0], -1.0),
                FnConstraint::affine(vec![0.0, 1.0], -1.0),
                FnConstraint::affine(vec![0.0, -1.0], -1.0),
            ],
            eq_rows: vec![],
            eq_rhs: vec![],
        };
        let out = barrier_solve(&prog, &[0.0, 0.0], &BarrierSettings::default()).unwrap();
        let mut best = f64::INFINITY;
        let mut best_x = [0.0, 0.0];
        let steps = 2001;
        for a in 0..steps {
            for b in 0..steps {
                let x = [-1.0 + 2.0 * a as f64 / (steps - 1) as f64, -1.0 + 2.0 * b as f64 / (steps - 1) as f64];
                let v = f(&x);
                if v < best {
                    best = v;
                    best_x = x;
                }
            }
        }
        assert!((out.x[0] - best_x[0]).abs() <= 1.5e-3, "{} vs {}", out.x[0], best_x[0]);
        assert!((out.x[1] - best_x[1]).abs() <= 1.5e-3, "{} vs {}", out.x[1], best_x[1]);
        assert!(out.objective <= best + 1e-6);
    }

    #[test]
    fn stage_objectives_non_increasing() {
        let prog = FnProgram {
            dim: 2,
            value: Box::new(|x| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2)),
            grad: Box::new(|x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 2.0 * (x[1] + 1.0);
            }),
            hess_add: Box::new(|_, h| {
                h.add(0, 0, 2.0);
                h.add(1, 1, 2.0);
            }),
            constraints: vec![
                FnConstraint::affine(vec![1.0, 0.0], -2.0),
                FnConstraint::affine(vec![0.0, 1.0], 0.0),
            ],
            eq_rows: vec![],
            eq_rhs: vec![],
        };
        let out = barrier_solve(&prog, &[0.0, -2.0], &BarrierSettings::default()).unwrap();
        for w in out.stage_objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        }
        assert!((out.x[0] - 2.0).abs() < 1e-6);
        assert!((out.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn solver_is_deterministic() {
        let make = || {
            let mut p = quadratic_program(4);
            p.constraints = vec![FnConstraint::affine(vec![1.0, 1.0, 1.0, 1.0], -1.0)];
            p
        };
        let a = barrier_solve(&make(), &[0.1, 0.05, 0.0, -0.1], &BarrierSettings::default()).unwrap();
        let b = barrier_solve(&make(), &[0.1, 0.05, 0.0, -0.1], &BarrierSettings::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn infeasible_start_is_distinct() {
        let mut prog = quadratic_program(1);
        prog.constraints = vec![FnConstraint::affine(vec![1.0], 0.0)];
        match barrier_solve(&prog, &[1.0], &BarrierSettings::default()) {
            Err(SolveError::InfeasibleStart { index: 0, .. }) => {}
            other => panic!("expected infeasible start, got {other:?}"),
        }
    }

    #[test]
    fn psd_check_identity_and_indefinite() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(psd_check(&id).unwrap());
        let neg = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(!psd_check(&neg).unwrap());
    }

    #[test]
    fn psd_check_rejects_asymmetric() {
        let m = [[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(psd_check(&m), Err(SolveError::Asymmetric(_))));
    }

    #[test]
    fn ball_projection_cases() {
        assert_eq!(ball_project([1.0, 0.0], [0.0, 0.0], 2.0), [1.0, 0.0]);
        let p = ball_project([4.0, 0.0], [0.0, 0.0], 2.0);
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        assert_eq!(ball_project([3.0, -1.0], [3.0, -1.0], 0.5), [3.0, -1.0]);
    }
}
